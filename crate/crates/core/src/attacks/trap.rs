use crate::address::{Mode, PhysicalAddress, VirtualAddress, PAGE_SIZE};
use crate::attacks::{AttackReport, Recovered};
use crate::error::{Error, Result};
use crate::kernel::{MachineState, Pid, View};

/// Rounds needed to pin bits 31..12 of a 32-bit value.
pub const TRAP_ROUNDS: u32 = 20;
const VALUE_BITS: u32 = 32;

/// Indirect call site in the enclave where objects are printed.
const PRINT_CALL_SITE: u64 = 0x0000_5555_5555_4A30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectType {
    /// Its print function dereferences the object's data member.
    Dummy,
    /// Its print function never touches the member, which holds a secret.
    Secret,
}

impl ObjectType {
    fn print_target(self) -> u64 {
        match self {
            ObjectType::Dummy => 0x0000_5555_5555_6100,
            ObjectType::Secret => 0x0000_5555_5555_6200,
        }
    }
}

/// Prints an object of type `trained` (if any), then prints the Secret
/// object. A BTB still pointing at the Dummy print makes the CPU run it
/// transiently with the Secret object's member, i.e. dereference
/// `victim_secret`. Returns the physical line that was fetched.
pub fn speculative_type_confusion_gadget(
    m: &mut MachineState,
    pid: Pid,
    trained: Option<ObjectType>,
    victim_secret: u64,
) -> Result<Option<PhysicalAddress>> {
    if let Some(t) = trained {
        m.user_indirect_branch(PRINT_CALL_SITE, t.print_target())?;
    }
    let predicted = m.user_indirect_branch(PRINT_CALL_SITE, ObjectType::Secret.print_target())?;
    if predicted == Some(ObjectType::Dummy.print_target()) {
        m.speculative_load(View::Process(pid), Mode::User, VirtualAddress(victim_secret))
    } else {
        Ok(None)
    }
}

/// Something the attacker can invoke that transiently dereferences a value
/// it cannot read.
pub trait DerefGadget {
    fn trigger(&mut self, m: &mut MachineState) -> Result<()>;
}

/// Enclave code with the Dummy/Secret type confusion; runs in the attacker
/// process address space.
#[derive(Clone, Copy, Debug)]
pub struct TypeConfusionGadget {
    pub pid: Pid,
    pub secret: u32,
}

impl DerefGadget for TypeConfusionGadget {
    fn trigger(&mut self, m: &mut MachineState) -> Result<()> {
        speculative_type_confusion_gadget(m, self.pid, Some(ObjectType::Dummy), self.secret as u64)?;
        Ok(())
    }
}

/// A kernel module whose mispredicted indirect call dereferences a secret
/// held in a register. Kernel-mode translation applies, so SMAP stops it.
#[derive(Clone, Copy, Debug)]
pub struct KernelModuleGadget {
    pub pid: Pid,
    pub secret: u32,
}

impl DerefGadget for KernelModuleGadget {
    fn trigger(&mut self, m: &mut MachineState) -> Result<()> {
        if m.mitigations().kernel_speculation() {
            m.speculative_load(View::Process(self.pid), Mode::Kernel, VirtualAddress(self.secret as u64))?;
        }
        Ok(())
    }
}

/// Which trap page and line answered in a round. `page` 0 is the lower half.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoundProbe {
    pub round: u32,
    pub page: u8,
    pub line: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrapOutcome {
    /// Bits 31..6 of the dereferenced value; bits 5..0 are zero.
    pub value: u64,
    pub schedule: Vec<RoundProbe>,
    pub probes: u64,
    pub report: AttackReport,
}

/// Recovers a 32-bit value a gadget dereferences.
///
/// Each round maps a region known to contain the value onto two physical
/// pages, lower half to `p1`, upper half to `p2`, triggers the gadget and
/// probes every line of both pages. The page that hit fixes one more address
/// bit and the line fixes bits 11..6; the next round maps only the half that
/// hit. The old mapping is dropped first. Each round retries the gadget up
/// to `attempts` times.
pub fn dereference_trap(
    m: &mut MachineState,
    pid: Pid,
    gadget: &mut dyn DerefGadget,
    p1: PhysicalAddress,
    p2: PhysicalAddress,
    attempts: u32,
) -> Result<TrapOutcome> {
    if p1.page_offset() != 0 || p2.page_offset() != 0 || p1 == p2 {
        return Err(Error::config("trap pages must be two distinct page-aligned frames"));
    }
    let start_cycle = m.cycle();
    let line_size = m.line_size();
    let lines = PAGE_SIZE / line_size;
    let mut known = 0u64;
    let mut low_line = 0u64;
    let mut probes = 0u64;
    let mut schedule = Vec::with_capacity(TRAP_ROUNDS as usize);
    let mut mapped: Option<(VirtualAddress, u64)> = None;

    for round in 0..TRAP_ROUNDS {
        let count = 1u64 << (VALUE_BITS - 12 - round);
        let start = VirtualAddress(known);
        if let Some((s, c)) = mapped.take() {
            m.unmap_range(pid, s, c)?;
        }
        m.map_shared_range(pid, start, count, p1, p2)?;
        mapped = Some((start, count));
        let upper = start.offset(count / 2 * PAGE_SIZE);
        let line_addr = |page: u8, line: u64| if page == 0 { start } else { upper }.offset(line * line_size);

        let mut hit = None;
        for _ in 0..attempts.max(1) {
            for page in 0..2u8 {
                for line in 0..lines {
                    m.flush_virtual(pid, line_addr(page, line))?;
                }
            }
            gadget.trigger(m)?;
            for page in 0..2u8 {
                for line in 0..lines {
                    probes += 1;
                    if m.probe(pid, line_addr(page, line))?.is_hit() && hit.is_none() {
                        hit = Some(RoundProbe { round, page, line });
                    }
                }
            }
            if hit.is_some() {
                break;
            }
        }
        let Some(h) = hit else {
            if let Some((s, c)) = mapped {
                m.unmap_range(pid, s, c)?;
            }
            return Err(Error::Aborted(format!(
                "round {round}: no line of either trap page was cached; the gadget did not fire \
                 or the value lies outside {start}..+{count} pages"
            )));
        };
        known |= (h.page as u64) << (VALUE_BITS - 1 - round);
        if round == 0 {
            low_line = h.line;
        }
        schedule.push(h);
    }
    if let Some((s, c)) = mapped {
        m.unmap_range(pid, s, c)?;
    }
    let value = known | (low_line * line_size);
    let report = AttackReport::new("deref_trap", m, true, Recovered::Value(value), probes, start_cycle);
    Ok(TrapOutcome {
        value,
        schedule,
        probes,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{CpuOrder, MachineConfig, MitigationConfig};

    const PID: Pid = Pid(3);
    const P1: PhysicalAddress = PhysicalAddress(0x10_0000);
    const P2: PhysicalAddress = PhysicalAddress(0x20_0000);

    fn machine(m: MitigationConfig) -> MachineState {
        let mut s = MachineState::new(MachineConfig::with_mitigations(m), 9).unwrap();
        s.spawn_process(PID).unwrap();
        s
    }

    fn trap(secret: u32) -> Result<TrapOutcome> {
        let mut m = machine(MitigationConfig::default());
        let mut g = TypeConfusionGadget { pid: PID, secret };
        dereference_trap(&mut m, PID, &mut g, P1, P2, 1)
    }

    #[test]
    fn recovers_value_without_low_bits() {
        assert_eq!(trap(0x1230_0000).unwrap().value, 0x1230_0000);
        assert_eq!(trap(0x7F).unwrap().value, 0x40);
        assert_eq!(trap(0).unwrap().value, 0);
        assert_eq!(trap(u32::MAX).unwrap().value, 0xFFFF_FFC0);
    }

    #[test]
    fn probe_budget() {
        let out = trap(0xDEAD_BEEF).unwrap();
        assert_eq!(out.schedule.len(), TRAP_ROUNDS as usize);
        assert_eq!(out.probes, TRAP_ROUNDS as u64 * 128);
        assert!(out.report.success);
    }

    #[test]
    fn mappings_removed_afterwards() {
        let mut m = machine(MitigationConfig::default());
        let mut g = TypeConfusionGadget { pid: PID, secret: 0xABCD_0000 };
        dereference_trap(&mut m, PID, &mut g, P1, P2, 1).unwrap();
        assert!(m.user_aspace(PID).unwrap().lookup(VirtualAddress(0xABCD_0000)).is_none());
    }

    #[test]
    fn in_order_core_aborts() {
        let mut m = machine(MitigationConfig {
            cpu_order: CpuOrder::InOrder,
            ..Default::default()
        });
        let mut g = TypeConfusionGadget { pid: PID, secret: 0x1230_0000 };
        let err = dereference_trap(&mut m, PID, &mut g, P1, P2, 1).unwrap_err();
        assert!(matches!(err, Error::Aborted(ref s) if s.starts_with("round 0")));
    }

    #[test]
    fn kernel_gadget_needs_smap_off() {
        let mut m = machine(MitigationConfig::default());
        let mut g = KernelModuleGadget { pid: PID, secret: 0x0042_1000 };
        assert!(dereference_trap(&mut m, PID, &mut g, P1, P2, 1).is_err());

        let mut m = machine(MitigationConfig {
            smap: false,
            ..Default::default()
        });
        assert_eq!(dereference_trap(&mut m, PID, &mut g, P1, P2, 1).unwrap().value, 0x0042_1000);
    }

    #[test]
    fn type_confusion_needs_dummy_training() {
        let mut m = machine(MitigationConfig::default());
        let dummy = VirtualAddress(0x40_0000);
        m.map_page(PID, dummy, P1, true).unwrap();
        let secret = dummy.0 + 0x1C0;
        assert_eq!(speculative_type_confusion_gadget(&mut m, PID, None, secret).unwrap(), None);
        assert_eq!(
            speculative_type_confusion_gadget(&mut m, PID, Some(ObjectType::Secret), secret).unwrap(),
            None
        );
        assert_eq!(
            speculative_type_confusion_gadget(&mut m, PID, Some(ObjectType::Dummy), secret).unwrap(),
            Some(PhysicalAddress(P1.0 + 0x1C0))
        );
    }

    #[test]
    fn rejects_bad_pages() {
        let mut m = machine(MitigationConfig::default());
        let mut g = TypeConfusionGadget { pid: PID, secret: 1 };
        assert!(dereference_trap(&mut m, PID, &mut g, P1, P1, 1).is_err());
        assert!(dereference_trap(&mut m, PID, &mut g, PhysicalAddress(0x10), P2, 1).is_err());
    }
}
