//! Deterministic simulator of speculative register dereferencing.
//!
//! Kernel entry paths (syscall dispatch, interrupt entry, hypercalls) that
//! mispredict an indirect branch execute the wrong handler for a few
//! instructions. If that handler dereferences a register the user filled with
//! an address, the line behind the address is pulled into the cache. The
//! crate models that mechanism on top of a small cache hierarchy, a branch
//! target buffer and a page-table abstraction, and implements the attacks
//! that use it:
//!
//! * address translation (virtual to physical) through the direct-physical map,
//! * a cross-core covert channel,
//! * Meltdown and Foreshadow against data that only sits in the shared L3,
//! * Dereference Trap, which recovers the value of a speculatively
//!   dereferenced register.
//!
//! Every mitigation is a toggle in [`kernel::MitigationConfig`], so each
//! causal claim becomes a runnable experiment. The [`harness`] module runs
//! experiments from a config file and emits CSV.

pub mod address;
pub mod attacks;
pub mod error;
pub mod harness;
pub mod kernel;
pub mod microarch;
pub mod par;

pub use address::{AddressSpace, Fault, FaultKind, Mode, PhysicalAddress, VirtualAddress, PAGE_SIZE};
pub use error::{Error, Result};
pub use kernel::{MachineState, MitigationConfig};
