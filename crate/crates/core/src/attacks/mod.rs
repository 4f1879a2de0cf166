//! Attacks built on speculative register dereferencing.
//!
//! Every attack drives a [`MachineState`] only through the operations an
//! attacker has: writing registers, issuing syscalls or taking interrupts,
//! mapping its own memory and timing its own loads. Ground truth is never
//! read back from the machine by the attack itself.

mod covert;
mod l3;
mod translation;
mod trap;

pub use covert::{
    bits_to_bytes, bytes_to_bits, covert_benchmark, covert_receive, covert_run, covert_send, default_window,
    probe_round_trip, transmit, CovertBenchmark, CovertChannel, CovertFrame, RECEIVER, SENDER,
};
pub use l3::{foreshadow_l3_attack, meltdown_l3_experiment, ForeshadowOutcome, GuestTrigger, MeltdownOutcome};
pub use translation::{address_translation_attack, TranslationOutcome, TranslationSearch};
pub use trap::{
    dereference_trap, speculative_type_confusion_gadget, DerefGadget, KernelModuleGadget,
    ObjectType, RoundProbe, TrapOutcome, TypeConfusionGadget, TRAP_ROUNDS,
};

use crate::error::{Error, Result};
use crate::kernel::{MachineState, Pid, Register};

/// One way to make the kernel run the dereference gadget.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trigger {
    Syscall(u64),
    Interrupt,
}

/// Fills registers with a value and runs a trigger sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GadgetDriver {
    pub fill: Vec<Register>,
    pub triggers: Vec<Trigger>,
}

impl GadgetDriver {
    /// Trains the dispatch branch with `trainer`, then calls `victim`. Every
    /// register but rsp carries the value.
    pub fn syscall_pair(m: &MachineState, trainer: &str, victim: &str) -> Result<Self> {
        let nr = |name: &str| {
            m.syscall_by_name(name)
                .map(|d| d.id)
                .ok_or_else(|| Error::config(format!("no syscall named '{name}'")))
        };
        Ok(GadgetDriver {
            fill: Register::fillable(),
            triggers: vec![Trigger::Syscall(nr(trainer)?), Trigger::Syscall(nr(victim)?)],
        })
    }

    /// readv (dereferences every preset register) followed by sched_yield.
    pub fn default_for(m: &MachineState) -> Self {
        Self::syscall_pair(m, "readv", "sched_yield").expect("readv and sched_yield are in every table")
    }

    /// r8-r15 followed by an interrupt.
    pub fn interrupt() -> Self {
        GadgetDriver {
            fill: Register::STACKED.to_vec(),
            triggers: vec![Trigger::Interrupt],
        }
    }

    /// Returns the number of speculative fills the triggers caused.
    pub fn fire(&self, m: &mut MachineState, pid: Pid, value: u64) -> Result<usize> {
        m.write_registers(&self.fill, value)?;
        let mut fills = 0;
        for t in &self.triggers {
            fills += match *t {
                Trigger::Syscall(nr) => m.do_syscall(pid, nr)?,
                Trigger::Interrupt => m.deliver_interrupt(pid)?,
            }
            .speculative_fills
            .len();
        }
        Ok(fills)
    }
}

/// What an attack recovered.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Recovered {
    Nothing,
    Address(u64),
    Value(u64),
    Bytes(Vec<Option<u8>>),
    Bits(Vec<bool>),
    Flag(bool),
}

impl Recovered {
    pub fn is_empty(&self) -> bool {
        match self {
            Recovered::Nothing => true,
            Recovered::Bytes(b) => b.iter().all(Option::is_none),
            Recovered::Bits(b) => b.is_empty(),
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttackReport {
    pub attack: &'static str,
    pub success: bool,
    pub recovered: Recovered,
    pub probes: u64,
    pub simulated_cycles: u64,
    pub config_fingerprint: String,
}

impl AttackReport {
    pub(crate) fn new(
        attack: &'static str,
        m: &MachineState,
        success: bool,
        recovered: Recovered,
        probes: u64,
        start_cycle: u64,
    ) -> Self {
        AttackReport {
            attack,
            success: success && !recovered.is_empty(),
            recovered,
            probes,
            simulated_cycles: m.cycle() - start_cycle,
            config_fingerprint: m.mitigations().fingerprint(),
        }
    }
}
