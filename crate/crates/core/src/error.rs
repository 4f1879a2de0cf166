use thiserror::Error;

use crate::address::{PhysicalAddress, VirtualAddress};
use crate::kernel::Pid;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Error {
    #[error("physical address {addr} outside physical memory of {limit:#x} bytes")]
    AddressRange { addr: PhysicalAddress, limit: u64 },

    #[error("virtual address {0} is not canonical")]
    NonCanonical(VirtualAddress),

    #[error("virtual address {0} is not page aligned")]
    Misaligned(VirtualAddress),

    #[error("mapping of {count} pages at {start} leaves the user half")]
    RangeOverflow { start: VirtualAddress, count: u64 },

    #[error("virtual address {0} is not mapped")]
    Unmapped(VirtualAddress),

    #[error("unknown syscall {0}")]
    UnknownSyscall(u64),

    #[error("unknown hypercall {0}")]
    UnknownHypercall(u64),

    #[error("unknown process {0}")]
    UnknownProcess(Pid),

    #[error("process {0} is not a registered guest")]
    UnknownGuest(Pid),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("attack aborted: {0}")]
    Aborted(String),

    #[error("event log: {0}")]
    EventLog(String),

    #[error("{0}")]
    Io(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
