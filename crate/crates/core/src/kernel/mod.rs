//! Kernel entry paths, the speculative executor and mitigation toggles.

mod events;
mod machine;
mod mitigation;
mod regs;
mod syscall;

use std::fmt;

pub use events::{Action, AspaceRef, Cause, Event, EVENT_LOG_HEADER};
pub use machine::{
    EntryOutcome, MachineConfig, MachineState, NoiseModel, TransientReader, View, FLUSH_CYCLES, HYPERCALL_CYCLES,
    INTERRUPT_CYCLES, L1_FLUSH_CYCLES, REG_WRITE_CYCLES, VM_ENTRY_CYCLES,
};
pub use mitigation::{CpuOrder, L1dFlushPolicy, MitigationConfig};
pub use regs::{format_register_list, parse_register_list, Register, RegisterFile};
pub use syscall::{
    find_by_name, hypercall_table, preset, syscall_table, GadgetPreset, SyscallDescriptor, DEFAULT_PRESET,
    HYPERCALL_DISPATCH_SITE, PRESETS, SYSCALL_DISPATCH_SITE,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Pid(pub u32);

impl fmt::Display for Pid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pid {}", self.0)
    }
}
