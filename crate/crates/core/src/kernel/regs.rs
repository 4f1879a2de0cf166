use std::fmt;
use std::str::FromStr;

use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Register {
    Rax,
    Rbx,
    Rcx,
    Rdx,
    Rsi,
    Rdi,
    Rbp,
    Rsp,
    R8,
    R9,
    R10,
    R11,
    R12,
    R13,
    R14,
    R15,
}

impl Register {
    pub const ALL: [Register; 16] = [
        Register::Rax,
        Register::Rbx,
        Register::Rcx,
        Register::Rdx,
        Register::Rsi,
        Register::Rdi,
        Register::Rbp,
        Register::Rsp,
        Register::R8,
        Register::R9,
        Register::R10,
        Register::R11,
        Register::R12,
        Register::R13,
        Register::R14,
        Register::R15,
    ];

    /// Registers the interrupt entry code spills to the stack.
    pub const STACKED: [Register; 8] = [
        Register::R8,
        Register::R9,
        Register::R10,
        Register::R11,
        Register::R12,
        Register::R13,
        Register::R14,
        Register::R15,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Register::Rax => "rax",
            Register::Rbx => "rbx",
            Register::Rcx => "rcx",
            Register::Rdx => "rdx",
            Register::Rsi => "rsi",
            Register::Rdi => "rdi",
            Register::Rbp => "rbp",
            Register::Rsp => "rsp",
            Register::R8 => "r8",
            Register::R9 => "r9",
            Register::R10 => "r10",
            Register::R11 => "r11",
            Register::R12 => "r12",
            Register::R13 => "r13",
            Register::R14 => "r14",
            Register::R15 => "r15",
        }
    }

    /// Everything an attacker can usefully fill: all GPRs but the stack pointer.
    pub fn fillable() -> Vec<Register> {
        Register::ALL.into_iter().filter(|&r| r != Register::Rsp).collect()
    }
}

impl fmt::Display for Register {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Register {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Register::ALL
            .into_iter()
            .find(|r| r.name() == s.trim())
            .ok_or_else(|| Error::config(format!("unknown register '{s}'")))
    }
}

/// Parses `r9,r10` or `r9|r10`.
pub fn parse_register_list(s: &str) -> Result<Vec<Register>, Error> {
    let mut regs: Vec<Register> = s
        .split([',', '|'])
        .filter(|t| !t.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_, _>>()?;
    regs.sort();
    regs.dedup();
    Ok(regs)
}

pub fn format_register_list(regs: &[Register]) -> String {
    regs.iter().map(|r| r.name()).collect::<Vec<_>>().join("|")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct RegisterFile([u64; 16]);

impl RegisterFile {
    pub fn get(&self, r: Register) -> u64 {
        self.0[r.index()]
    }

    pub fn set(&mut self, r: Register, value: u64) {
        self.0[r.index()] = value;
    }

    pub fn fill(&mut self, regs: &[Register], value: u64) {
        for &r in regs {
            self.set(r, value);
        }
    }

    pub fn values(&self) -> &[u64; 16] {
        &self.0
    }
}
