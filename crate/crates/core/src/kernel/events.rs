//! Append-only simulation log.
//!
//! Every state mutation of a [`MachineState`](super::MachineState) is one
//! event, so replaying a log on the initial state rebuilds the final state.
//! The line format is `cycle,event_kind,address,level,cause`. `level` holds
//! the serving cache level for accesses and `key=value` details (separated
//! by `;`) for everything else.

use std::fmt;
use std::str::FromStr;

use crate::address::{FaultKind, PhysicalAddress, VirtualAddress};
use crate::error::Error;
use crate::kernel::regs::{format_register_list, parse_register_list, Register};
use crate::kernel::Pid;
use crate::microarch::HitLevel;

pub const EVENT_LOG_HEADER: &str = "cycle,event_kind,address,level,cause";

/// Which page table a mapping event edits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AspaceRef {
    Kernel,
    Process(Pid),
}

impl fmt::Display for AspaceRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AspaceRef::Kernel => f.write_str("kernel"),
            AspaceRef::Process(pid) => write!(f, "{}", pid.0),
        }
    }
}

impl FromStr for AspaceRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        if s == "kernel" {
            return Ok(AspaceRef::Kernel);
        }
        Ok(AspaceRef::Process(Pid(parse_num(s)? as u32)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Cause {
    Setup,
    User,
    Arch,
    Spec,
    Probe,
    Prefetch,
    Remote,
    VmEntry,
}

impl Cause {
    pub fn as_str(self) -> &'static str {
        match self {
            Cause::Setup => "setup",
            Cause::User => "user",
            Cause::Arch => "arch",
            Cause::Spec => "spec",
            Cause::Probe => "probe",
            Cause::Prefetch => "prefetch",
            Cause::Remote => "remote",
            Cause::VmEntry => "vm_entry",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "setup" => Cause::Setup,
            "user" => Cause::User,
            "arch" => Cause::Arch,
            "spec" => Cause::Spec,
            "probe" => Cause::Probe,
            "prefetch" => Cause::Prefetch,
            "remote" => Cause::Remote,
            "vm_entry" => Cause::VmEntry,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    Spawn { pid: Pid },
    RegisterVm { pid: Pid },
    MapPage { aspace: AspaceRef, v: VirtualAddress, p: PhysicalAddress, user: bool },
    MapShared { pid: Pid, start: VirtualAddress, count: u64, p1: PhysicalAddress, p2: PhysicalAddress },
    Unmap { pid: Pid, start: VirtualAddress, count: u64 },
    Plant { p: PhysicalAddress, byte: u8 },
    Regs { regs: Vec<Register>, value: u64 },
    Access { p: PhysicalAddress, level: HitLevel },
    RemoteAccess { p: PhysicalAddress },
    Flush { p: PhysicalAddress },
    FlushL1,
    EvictL1 { p: PhysicalAddress },
    MarkSensitive { p: PhysicalAddress },
    BtbTrain { site: u64, target: u64 },
    Syscall { pid: Pid, nr: u64 },
    Interrupt { pid: Pid },
    Hypercall { pid: Pid, nr: u64 },
    VmEntry { pid: Pid },
    SpecFault { v: VirtualAddress, fault: FaultKind },
    Idle { cycles: u64 },
}

impl Action {
    pub fn kind(&self) -> &'static str {
        match self {
            Action::Spawn { .. } => "spawn",
            Action::RegisterVm { .. } => "register_vm",
            Action::MapPage { .. } => "map_page",
            Action::MapShared { .. } => "map_shared",
            Action::Unmap { .. } => "unmap",
            Action::Plant { .. } => "plant",
            Action::Regs { .. } => "regs",
            Action::Access { .. } => "access",
            Action::RemoteAccess { .. } => "remote_access",
            Action::Flush { .. } => "flush",
            Action::FlushL1 => "flush_l1",
            Action::EvictL1 { .. } => "evict_l1",
            Action::MarkSensitive { .. } => "mark_sensitive",
            Action::BtbTrain { .. } => "btb_train",
            Action::Syscall { .. } => "syscall",
            Action::Interrupt { .. } => "interrupt",
            Action::Hypercall { .. } => "hypercall",
            Action::VmEntry { .. } => "vm_entry",
            Action::SpecFault { .. } => "spec_fault",
            Action::Idle { .. } => "idle",
        }
    }

    fn address_and_level(&self) -> (u64, String) {
        match self {
            Action::Spawn { pid } | Action::RegisterVm { pid } | Action::VmEntry { pid } | Action::Interrupt { pid } => {
                (pid.0 as u64, "-".into())
            }
            Action::MapPage { aspace, v, p, user } => {
                (v.0, format!("as={aspace};phys={:#x};user={}", p.0, u8::from(*user)))
            }
            Action::MapShared { pid, start, count, p1, p2 } => (
                start.0,
                format!("as={};count={count};p1={:#x};p2={:#x}", pid.0, p1.0, p2.0),
            ),
            Action::Unmap { pid, start, count } => (start.0, format!("as={};count={count}", pid.0)),
            Action::Plant { p, byte } => (p.0, format!("byte={byte:#04x}")),
            Action::Regs { regs, value } => (*value, format!("regs={}", format_register_list(regs))),
            Action::Access { p, level } => (p.0, level.as_str().into()),
            Action::RemoteAccess { p } => (p.0, "L3".into()),
            Action::Flush { p } | Action::EvictL1 { p } | Action::MarkSensitive { p } => (p.0, "-".into()),
            Action::FlushL1 => (0, "L1".into()),
            Action::BtbTrain { site, target } => (*site, format!("target={target:#x}")),
            Action::Syscall { pid, nr } | Action::Hypercall { pid, nr } => (*nr, format!("pid={}", pid.0)),
            Action::SpecFault { v, fault } => (v.0, format!("fault={}", fault.as_str())),
            Action::Idle { cycles } => (*cycles, "-".into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Event {
    /// Machine cycle counter after the event took effect.
    pub cycle: u64,
    pub action: Action,
    pub cause: Cause,
}

impl Event {
    pub fn is_speculative_fill(&self) -> bool {
        self.cause == Cause::Spec && matches!(self.action, Action::Access { .. })
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (address, level) = self.action.address_and_level();
        write!(
            f,
            "{},{},{:#018x},{},{}",
            self.cycle,
            self.action.kind(),
            address,
            level,
            self.cause.as_str()
        )
    }
}

fn parse_num(s: &str) -> Result<u64, Error> {
    let s = s.trim();
    let parsed = match s.strip_prefix("0x") {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => s.parse(),
    };
    parsed.map_err(|_| Error::EventLog(format!("bad number '{s}'")))
}

struct Details<'a>(Vec<(&'a str, &'a str)>);

impl<'a> Details<'a> {
    fn parse(s: &'a str) -> Self {
        Details(s.split(';').filter_map(|kv| kv.split_once('=')).collect())
    }

    fn get(&self, key: &str) -> Result<&'a str, Error> {
        self.0
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::EventLog(format!("missing detail '{key}'")))
    }

    fn num(&self, key: &str) -> Result<u64, Error> {
        parse_num(self.get(key)?)
    }
}

impl FromStr for Event {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self, Error> {
        let fields: Vec<&str> = line.trim().split(',').collect();
        let [cycle, kind, address, level, cause] = fields[..] else {
            return Err(Error::EventLog(format!("expected 5 fields: '{line}'")));
        };
        let cycle = parse_num(cycle)?;
        let addr = parse_num(address)?;
        let cause = Cause::parse(cause).ok_or_else(|| Error::EventLog(format!("unknown cause '{cause}'")))?;
        let d = Details::parse(level);
        let pid = || Pid(addr as u32);
        let phys = |key: &str| d.num(key).map(PhysicalAddress);
        let action = match kind {
            "spawn" => Action::Spawn { pid: pid() },
            "register_vm" => Action::RegisterVm { pid: pid() },
            "vm_entry" => Action::VmEntry { pid: pid() },
            "interrupt" => Action::Interrupt { pid: pid() },
            "map_page" => Action::MapPage {
                aspace: d.get("as")?.parse()?,
                v: VirtualAddress(addr),
                p: phys("phys")?,
                user: d.num("user")? == 1,
            },
            "map_shared" => Action::MapShared {
                pid: Pid(d.num("as")? as u32),
                start: VirtualAddress(addr),
                count: d.num("count")?,
                p1: phys("p1")?,
                p2: phys("p2")?,
            },
            "unmap" => Action::Unmap {
                pid: Pid(d.num("as")? as u32),
                start: VirtualAddress(addr),
                count: d.num("count")?,
            },
            "plant" => Action::Plant {
                p: PhysicalAddress(addr),
                byte: d.num("byte")? as u8,
            },
            "regs" => Action::Regs {
                regs: parse_register_list(d.get("regs")?)?,
                value: addr,
            },
            "access" => Action::Access {
                p: PhysicalAddress(addr),
                level: HitLevel::parse(level).ok_or_else(|| Error::EventLog(format!("bad level '{level}'")))?,
            },
            "remote_access" => Action::RemoteAccess { p: PhysicalAddress(addr) },
            "flush" => Action::Flush { p: PhysicalAddress(addr) },
            "flush_l1" => Action::FlushL1,
            "evict_l1" => Action::EvictL1 { p: PhysicalAddress(addr) },
            "mark_sensitive" => Action::MarkSensitive { p: PhysicalAddress(addr) },
            "btb_train" => Action::BtbTrain {
                site: addr,
                target: d.num("target")?,
            },
            "syscall" => Action::Syscall {
                pid: Pid(d.num("pid")? as u32),
                nr: addr,
            },
            "hypercall" => Action::Hypercall {
                pid: Pid(d.num("pid")? as u32),
                nr: addr,
            },
            "spec_fault" => Action::SpecFault {
                v: VirtualAddress(addr),
                fault: FaultKind::parse(d.get("fault")?)
                    .ok_or_else(|| Error::EventLog(format!("bad fault in '{line}'")))?,
            },
            "idle" => Action::Idle { cycles: addr },
            other => return Err(Error::EventLog(format!("unknown event kind '{other}'"))),
        };
        Ok(Event { cycle, action, cause })
    }
}
