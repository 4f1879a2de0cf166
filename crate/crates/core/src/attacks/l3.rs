use crate::address::PhysicalAddress;
use crate::attacks::{AttackReport, GadgetDriver, Recovered};
use crate::error::{Error, Result};
use crate::kernel::{MachineState, Pid, Register, RegisterFile, TransientReader};

/// How the guest gets the host kernel to dereference its registers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GuestTrigger {
    /// External interrupt while the guest runs; stacked r8-r15.
    Interrupt,
    /// Mistrained hypercall dispatch (only a gadget in pre-patch hosts).
    Hypercall,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ForeshadowOutcome {
    /// One entry per secret byte; `None` is a gap.
    pub bytes: Vec<Option<u8>>,
    pub report: AttackReport,
}

const HYPERCALL_TRAINER: u64 = 10;
const HYPERCALL_VICTIM: u64 = 1;

/// Leaks host memory that only sits in the shared L3.
///
/// A host core keeps touching the secret so it stays in L3. For every line
/// the guest puts the line's direct-map address into its registers and makes
/// the host kernel dereference them, which pulls the line into this core's
/// L1. After the VM entry a Foreshadow read then returns the bytes, unless
/// the entry flushed L1 in between. Each line is retried up to `attempts`
/// times; missing bytes are left as gaps.
pub fn foreshadow_l3_attack(
    m: &mut MachineState,
    guest: Pid,
    secret: PhysicalAddress,
    length: u64,
    trigger: GuestTrigger,
    attempts: u32,
) -> Result<ForeshadowOutcome> {
    if !m.is_guest(guest) {
        return Err(Error::UnknownGuest(guest));
    }
    let start_cycle = m.cycle();
    let line_size = m.line_size();
    let mut bytes: Vec<Option<u8>> = vec![None; length as usize];
    let mut probes = 0;
    let end = secret.0 + length;
    let mut line_start = secret.0 / line_size * line_size;
    while line_start < end {
        let line = PhysicalAddress(line_start);
        let lo = line_start.max(secret.0);
        let hi = (line_start + line_size).min(end);
        let dpm = m.dpm_address(line)?.0;
        for _ in 0..attempts.max(1) {
            m.remote_access(line)?;
            match trigger {
                GuestTrigger::Interrupt => {
                    m.write_registers(&Register::STACKED, dpm)?;
                    m.deliver_interrupt(guest)?;
                }
                GuestTrigger::Hypercall => {
                    let mut args = RegisterFile::default();
                    args.set(Register::Rax, HYPERCALL_TRAINER);
                    m.vm_hypercall(guest, &args)?;
                    args.set(Register::Rax, HYPERCALL_VICTIM);
                    args.fill(&[Register::Rbx, Register::Rcx, Register::Rdx, Register::Rsi], dpm);
                    m.vm_hypercall(guest, &args)?;
                }
            }
            for a in lo..hi {
                probes += 1;
                if let Some(b) = m.transient_read(TransientReader::Foreshadow, PhysicalAddress(a)) {
                    bytes[(a - secret.0) as usize] = Some(b);
                }
            }
            if bytes[(lo - secret.0) as usize..(hi - secret.0) as usize]
                .iter()
                .all(Option::is_some)
            {
                break;
            }
        }
        line_start += line_size;
    }
    let complete = bytes.iter().all(Option::is_some);
    let report = AttackReport::new(
        "foreshadow_l3",
        m,
        complete,
        Recovered::Bytes(bytes.clone()),
        probes,
        start_cycle,
    );
    Ok(ForeshadowOutcome { bytes, report })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MeltdownOutcome {
    pub read: Option<u8>,
    pub report: AttackReport,
}

/// Meltdown against a secret another core keeps in L3. With `gadget` the
/// attacker first has the kernel dereference the secret's direct-map
/// address, which is what brings it into L1 where Meltdown can read it.
pub fn meltdown_l3_experiment(
    m: &mut MachineState,
    pid: Pid,
    secret: PhysicalAddress,
    gadget: Option<&GadgetDriver>,
) -> Result<MeltdownOutcome> {
    let start_cycle = m.cycle();
    m.remote_access(secret)?;
    if let Some(driver) = gadget {
        let dpm = m.dpm_address(secret)?.0;
        driver.fire(m, pid, dpm)?;
    }
    let read = m.transient_read(TransientReader::MeltdownUs, secret);
    let recovered = Recovered::Bytes(vec![read]);
    let report = AttackReport::new("meltdown_l3", m, read.is_some(), recovered, 1, start_cycle);
    Ok(MeltdownOutcome { read, report })
}
