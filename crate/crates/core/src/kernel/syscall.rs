//! Syscall and hypercall handler tables.
//!
//! Which registers a handler dereferences differs between kernel builds, so
//! it is data here rather than code. A preset fixes the register set the
//! argument-taking handlers use; zero-argument handlers dereference nothing.

use crate::kernel::regs::Register;

/// Indirect call in the syscall entry path that dispatches to the handler.
pub const SYSCALL_DISPATCH_SITE: u64 = 0xFFFF_FFFF_8180_2000;
/// Indirect call in the VM-exit path that dispatches hypercalls.
pub const HYPERCALL_DISPATCH_SITE: u64 = 0xFFFF_FFFF_8104_3A10;

const SYSCALL_HANDLER_BASE: u64 = 0xFFFF_FFFF_8120_0000;
const HYPERCALL_HANDLER_BASE: u64 = 0xFFFF_FFFF_8106_0000;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SyscallDescriptor {
    pub id: u64,
    pub name: String,
    /// Sorted, deduplicated.
    pub deref_registers: Vec<Register>,
    pub latency: u64,
}

impl SyscallDescriptor {
    pub fn new(id: u64, name: &str, deref: &[Register], latency: u64) -> Self {
        let mut deref_registers = deref.to_vec();
        deref_registers.sort();
        deref_registers.dedup();
        SyscallDescriptor {
            id,
            name: name.to_string(),
            deref_registers,
            latency,
        }
    }

    /// Branch-target identifier of the syscall handler.
    pub fn syscall_target(&self) -> u64 {
        SYSCALL_HANDLER_BASE + self.id * 0x100
    }

    pub fn hypercall_target(&self) -> u64 {
        HYPERCALL_HANDLER_BASE + self.id * 0x100
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GadgetPreset {
    pub name: &'static str,
    pub registers: &'static [Register],
    pub description: &'static str,
}

pub const PRESETS: [GadgetPreset; 3] = [
    GadgetPreset {
        name: "kernel-4.18",
        registers: &[Register::R12, Register::R13, Register::R14],
        description: "Ubuntu 18.10, kernel 4.18: leaking handlers dereference r12, r13, r14",
    },
    GadgetPreset {
        name: "kernel-4.19",
        registers: &[Register::R9, Register::R10],
        description: "Debian 8, kernel 4.19: leaking handlers dereference r9, r10",
    },
    GadgetPreset {
        name: "kernel-4.15-mint",
        registers: &[Register::Rdi, Register::Rdx],
        description: "Linux Mint 19, kernel 4.15: leaking handlers dereference rdi, rdx",
    },
];

pub const DEFAULT_PRESET: &str = "kernel-4.19";

pub fn preset(name: &str) -> Option<&'static GadgetPreset> {
    PRESETS.iter().find(|p| p.name == name)
}

/// How much of the preset register set a handler dereferences.
#[derive(Clone, Copy)]
enum Share {
    All,
    First,
    Last,
    Nothing,
}

// x86-64 syscall numbers.
const SYSCALLS: &[(u64, &str, Share, u64)] = &[
    (0, "read", Share::First, 260),
    (1, "write", Share::Last, 280),
    (4, "stat", Share::All, 420),
    (19, "readv", Share::All, 300),
    (22, "pipe", Share::All, 900),
    (24, "sched_yield", Share::Nothing, 180),
    (35, "nanosleep", Share::First, 350),
    (42, "connect", Share::First, 450),
    (44, "sendto", Share::Last, 500),
    (49, "bind", Share::First, 400),
    (51, "getsockname", Share::First, 320),
    (52, "getpeername", Share::All, 320),
    (79, "getcwd", Share::All, 260),
    (107, "geteuid", Share::Nothing, 150),
    (165, "mount", Share::All, 1200),
    (186, "gettid", Share::Nothing, 150),
];

/// Hypothetical pre-patch hypercall handlers (KVM numbering). Patched KVM
/// clears guest registers on exit, which removes the gadget.
const HYPERCALLS: &[(u64, &str, Share, u64)] = &[
    (1, "kvm_hc_vapic_poll_irq", Share::Nothing, 400),
    (5, "kvm_hc_kick_cpu", Share::First, 600),
    (9, "kvm_hc_clock_pairing", Share::All, 700),
    (10, "kvm_hc_send_ipi", Share::All, 800),
];

fn registers_for(share: Share, preset: &[Register]) -> Vec<Register> {
    match share {
        Share::All => preset.to_vec(),
        Share::First => preset.iter().take(1).copied().collect(),
        Share::Last => preset.iter().last().copied().into_iter().collect(),
        Share::Nothing => Vec::new(),
    }
}

pub fn syscall_table(preset: &GadgetPreset) -> Vec<SyscallDescriptor> {
    SYSCALLS
        .iter()
        .map(|&(id, name, share, lat)| SyscallDescriptor::new(id, name, &registers_for(share, preset.registers), lat))
        .collect()
}

/// KVM hypercalls take arguments in rbx, rcx, rdx, rsi.
pub fn hypercall_table() -> Vec<SyscallDescriptor> {
    let args = [Register::Rbx, Register::Rcx, Register::Rdx, Register::Rsi];
    HYPERCALLS
        .iter()
        .map(|&(id, name, share, lat)| SyscallDescriptor::new(id, name, &registers_for(share, &args[..2]), lat))
        .collect()
}

pub fn find_by_name<'a>(table: &'a [SyscallDescriptor], name: &str) -> Option<&'a SyscallDescriptor> {
    table.iter().find(|d| d.name == name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_documented_register_sets() {
        assert_eq!(preset("kernel-4.18").unwrap().registers, &[Register::R12, Register::R13, Register::R14]);
        assert_eq!(preset("kernel-4.19").unwrap().registers, &[Register::R9, Register::R10]);
        assert_eq!(preset("kernel-4.15-mint").unwrap().registers, &[Register::Rdi, Register::Rdx]);
        assert!(preset("kernel-9").is_none());
    }

    #[test]
    fn tables_are_well_formed() {
        for p in &PRESETS {
            let t = syscall_table(p);
            let mut ids: Vec<u64> = t.iter().map(|d| d.id).collect();
            ids.dedup();
            assert_eq!(ids.len(), t.len());
            for d in &t {
                assert!(d.deref_registers.iter().all(|r| p.registers.contains(r)));
            }
            assert!(find_by_name(&t, "sched_yield").unwrap().deref_registers.is_empty());
            assert_eq!(find_by_name(&t, "readv").unwrap().deref_registers.len(), p.registers.len());
        }
        assert!(!hypercall_table().is_empty());
    }
}
