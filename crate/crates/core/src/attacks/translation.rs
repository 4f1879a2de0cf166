use std::ops::Range;

use crate::address::{Mode, PhysicalAddress, VirtualAddress, PAGE_SIZE};
use crate::attacks::{AttackReport, GadgetDriver, Recovered};
use crate::error::{Error, Result};
use crate::kernel::{MachineState, Pid};

/// Which frames to try and how hard.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TranslationSearch {
    pub frames: Range<u64>,
    /// Full passes over `frames` before giving up.
    pub sweeps: u32,
    /// Extra hits a candidate must repeat before it is accepted.
    pub confirmations: u32,
}

impl TranslationSearch {
    /// Every frame of `m`, one sweep, no confirmation.
    pub fn full(m: &MachineState) -> Self {
        TranslationSearch {
            frames: 0..m.memory_size() / PAGE_SIZE,
            sweeps: 1,
            confirmations: 0,
        }
    }

    pub fn frames(mut self, frames: Range<u64>) -> Self {
        self.frames = frames;
        self
    }

    pub fn sweeps(mut self, sweeps: u32) -> Self {
        self.sweeps = sweeps;
        self
    }

    pub fn confirmations(mut self, confirmations: u32) -> Self {
        self.confirmations = confirmations;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TranslationOutcome {
    pub physical: Option<PhysicalAddress>,
    /// Guesses tried, over all sweeps.
    pub guesses: u64,
    pub report: AttackReport,
}

/// Recovers the physical address behind `v`.
///
/// For each guessed frame the gadget registers get the direct-map address of
/// that frame at `v`'s page offset. If the guess is right the kernel fetches
/// the very line `v` maps, and reloading `v` hits.
pub fn address_translation_attack(
    m: &mut MachineState,
    pid: Pid,
    v: VirtualAddress,
    search: &TranslationSearch,
    driver: &GadgetDriver,
) -> Result<TranslationOutcome> {
    let frames = search.frames.clone();
    m.user_aspace(pid)?
        .translate(v, Mode::User, false)
        .map_err(|_| Error::Unmapped(v))?;
    let total = m.memory_size() / PAGE_SIZE;
    if frames.end > total {
        return Err(Error::config(format!(
            "guess range {}..{} exceeds the {total} physical frames",
            frames.start, frames.end
        )));
    }
    let start_cycle = m.cycle();
    let mut guesses = 0;
    let mut physical = None;
    let mut probes = 0;
    let mut attempt = |m: &mut MachineState, guess: PhysicalAddress| -> Result<bool> {
        probes += 1;
        m.flush_virtual(pid, v)?;
        driver.fire(m, pid, m.dpm_address(guess)?.0)?;
        Ok(m.probe(pid, v)?.is_hit())
    };
    'sweeps: for _ in 0..search.sweeps.max(1) {
        for g in frames.clone() {
            guesses += 1;
            let guess = PhysicalAddress::from_frame(g, v.page_offset());
            if !attempt(m, guess)? {
                continue;
            }
            let mut confirmed = true;
            for _ in 0..search.confirmations {
                if !attempt(m, guess)? {
                    confirmed = false;
                    break;
                }
            }
            if confirmed {
                physical = Some(guess);
                break 'sweeps;
            }
        }
    }
    let recovered = physical.map_or(Recovered::Nothing, |p| Recovered::Address(p.0));
    let report = AttackReport::new("addr_translate", m, physical.is_some(), recovered, probes, start_cycle);
    Ok(TranslationOutcome {
        physical,
        guesses,
        report,
    })
}
