use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::address::{AddressSpace, Fault, Mode, PhysicalAddress, VirtualAddress, DEFAULT_DPM_BASE};
use crate::error::{Error, Result};
use crate::kernel::events::{Action, AspaceRef, Cause, Event};
use crate::kernel::mitigation::{CpuOrder, L1dFlushPolicy, MitigationConfig};
use crate::kernel::regs::{Register, RegisterFile};
use crate::kernel::syscall::{
    hypercall_table, preset, syscall_table, SyscallDescriptor, DEFAULT_PRESET, HYPERCALL_DISPATCH_SITE,
    SYSCALL_DISPATCH_SITE,
};
use crate::kernel::Pid;
use crate::microarch::{
    validate_threshold, AccessOutcome, BranchTargetBuffer, CacheConfig, CacheState, HitLevel, LevelName, Probe,
    DEFAULT_BTB_CAPACITY, DEFAULT_PROBE_THRESHOLD,
};

pub const FLUSH_CYCLES: u64 = 40;
pub const REG_WRITE_CYCLES: u64 = 1;
pub const INTERRUPT_CYCLES: u64 = 2000;
pub const HYPERCALL_CYCLES: u64 = 1500;
pub const VM_ENTRY_CYCLES: u64 = 400;
pub const L1_FLUSH_CYCLES: u64 = 1000;

/// Stochastic knobs. The default is fully deterministic.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModel {
    /// Chance that one speculative dereference actually executes.
    pub speculation_probability: f64,
    /// Chance that a Flush+Reload probe of an uncached line reports a hit.
    pub fp_rate: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            speculation_probability: 1.0,
            fp_rate: 0.0,
        }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("speculation_probability", self.speculation_probability),
            ("fp_rate", self.fp_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        Ok(())
    }

    pub fn is_deterministic(&self) -> bool {
        self.speculation_probability >= 1.0 && self.fp_rate <= 0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MachineConfig {
    pub cache: CacheConfig,
    pub btb_capacity: usize,
    pub dpm_base: u64,
    pub probe_threshold: u64,
    pub preset: String,
    pub mitigations: MitigationConfig,
    pub noise: NoiseModel,
}

impl Default for MachineConfig {
    fn default() -> Self {
        MachineConfig {
            cache: CacheConfig::default(),
            btb_capacity: DEFAULT_BTB_CAPACITY,
            dpm_base: DEFAULT_DPM_BASE,
            probe_threshold: DEFAULT_PROBE_THRESHOLD,
            preset: DEFAULT_PRESET.to_string(),
            mitigations: MitigationConfig::default(),
            noise: NoiseModel::default(),
        }
    }
}

impl MachineConfig {
    pub fn with_mitigations(mitigations: MitigationConfig) -> Self {
        MachineConfig {
            mitigations,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.cache.validate()?;
        validate_threshold(&self.cache, self.probe_threshold)?;
        self.noise.validate()?;
        if self.btb_capacity == 0 {
            return Err(Error::config("BTB capacity must be positive"));
        }
        let dpm = VirtualAddress(self.dpm_base);
        if !dpm.is_canonical() || !dpm.is_kernel_half() || !dpm.is_page_aligned() {
            return Err(Error::config(format!("DPM base {dpm} must be a page-aligned kernel-half address")));
        }
        if self.dpm_base.checked_add(self.cache.memory_size).is_none() {
            return Err(Error::config("DPM region overflows the address space"));
        }
        if preset(&self.preset).is_none() {
            return Err(Error::config(format!("unknown gadget preset '{}'", self.preset)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransientReader {
    MeltdownUs,
    Foreshadow,
}

/// Translation context of a speculative kernel load.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum View {
    /// Kernel running on behalf of a host process: user half from the
    /// process, kernel half from the kernel page table.
    Process(Pid),
    /// Host kernel handling a VM exit; guest values are host addresses.
    Host,
}

/// What one kernel entry did speculatively.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EntryOutcome {
    pub predicted: Option<u64>,
    pub speculative_fills: Vec<PhysicalAddress>,
}

/// The unit of simulation.
#[derive(Clone, Debug)]
pub struct MachineState {
    config: MachineConfig,
    regs: RegisterFile,
    cache: CacheState,
    btb: BranchTargetBuffer,
    kernel_aspace: AddressSpace,
    user_aspaces: BTreeMap<Pid, AddressSpace>,
    guests: BTreeSet<Pid>,
    syscall_table: Vec<SyscallDescriptor>,
    hypercall_table: Vec<SyscallDescriptor>,
    memory: BTreeMap<u64, u8>,
    host_sensitive: BTreeSet<u64>,
    rng_seed: u64,
    rng: ChaCha8Rng,
    cycle: u64,
    events: Vec<Event>,
}

impl MachineState {
    pub fn new(config: MachineConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let gadget = preset(&config.preset).expect("validated preset");
        Ok(MachineState {
            regs: RegisterFile::default(),
            cache: CacheState::new(config.cache.clone())?,
            btb: BranchTargetBuffer::new(config.btb_capacity),
            kernel_aspace: AddressSpace::new(
                config.cache.memory_size,
                VirtualAddress(config.dpm_base),
                config.mitigations.kaiser,
            ),
            user_aspaces: BTreeMap::new(),
            guests: BTreeSet::new(),
            syscall_table: syscall_table(gadget),
            hypercall_table: hypercall_table(),
            memory: BTreeMap::new(),
            host_sensitive: BTreeSet::new(),
            rng_seed: seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            cycle: 0,
            events: Vec::new(),
            config,
        })
    }

    /// Replaces the syscall table; setup-time only, before any event.
    pub fn with_syscall_table(mut self, table: Vec<SyscallDescriptor>) -> Self {
        debug_assert!(self.events.is_empty());
        self.syscall_table = table;
        self
    }

    pub fn with_hypercall_table(mut self, table: Vec<SyscallDescriptor>) -> Self {
        debug_assert!(self.events.is_empty());
        self.hypercall_table = table;
        self
    }

    // ---- accessors ----

    pub fn config(&self) -> &MachineConfig {
        &self.config
    }

    pub fn mitigations(&self) -> &MitigationConfig {
        &self.config.mitigations
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.config.noise
    }

    pub fn regs(&self) -> &RegisterFile {
        &self.regs
    }

    pub fn cache(&self) -> &CacheState {
        &self.cache
    }

    pub fn btb(&self) -> &BranchTargetBuffer {
        &self.btb
    }

    pub fn kernel_aspace(&self) -> &AddressSpace {
        &self.kernel_aspace
    }

    pub fn user_aspace(&self, pid: Pid) -> Result<&AddressSpace> {
        self.user_aspaces.get(&pid).ok_or(Error::UnknownProcess(pid))
    }

    pub fn syscall_table(&self) -> &[SyscallDescriptor] {
        &self.syscall_table
    }

    pub fn syscall_by_name(&self, name: &str) -> Option<&SyscallDescriptor> {
        self.syscall_table.iter().find(|d| d.name == name)
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    pub fn seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn probe_threshold(&self) -> u64 {
        self.config.probe_threshold
    }

    pub fn line_size(&self) -> u64 {
        self.config.cache.line_size
    }

    pub fn memory_size(&self) -> u64 {
        self.config.cache.memory_size
    }

    pub fn memory_byte(&self, p: PhysicalAddress) -> u8 {
        self.memory.get(&p.0).copied().unwrap_or(0)
    }

    pub fn is_guest(&self, pid: Pid) -> bool {
        self.guests.contains(&pid)
    }

    pub fn dpm_address(&self, p: PhysicalAddress) -> Result<VirtualAddress> {
        self.kernel_aspace.dpm_address(p)
    }

    /// Number of speculative cache fills logged so far.
    pub fn speculative_fill_count(&self) -> usize {
        self.events.iter().filter(|e| e.is_speculative_fill()).count()
    }

    // ---- event plumbing ----

    fn aspace_mut(&mut self, which: AspaceRef) -> Result<&mut AddressSpace> {
        match which {
            AspaceRef::Kernel => Ok(&mut self.kernel_aspace),
            AspaceRef::Process(pid) => self.user_aspaces.get_mut(&pid).ok_or(Error::UnknownProcess(pid)),
        }
    }

    /// Applies the state effect of one action.
    fn apply(&mut self, action: &Action) -> Result<Option<AccessOutcome>> {
        match action {
            Action::Spawn { pid } => {
                let aspace = AddressSpace::new(
                    self.config.cache.memory_size,
                    VirtualAddress(self.config.dpm_base),
                    self.config.mitigations.kaiser,
                );
                self.user_aspaces.insert(*pid, aspace);
            }
            Action::RegisterVm { pid } => {
                self.guests.insert(*pid);
            }
            Action::MapPage { aspace, v, p, user } => self.aspace_mut(*aspace)?.map_page(*v, *p, *user)?,
            Action::MapShared { pid, start, count, p1, p2 } => {
                self.aspace_mut(AspaceRef::Process(*pid))?
                    .map_shared_range(*start, *count, *p1, *p2)?
            }
            Action::Unmap { pid, start, count } => {
                self.aspace_mut(AspaceRef::Process(*pid))?.unmap_range(*start, *count)?
            }
            Action::Plant { p, byte } => {
                self.memory.insert(p.0, *byte);
            }
            Action::Regs { regs, value } => self.regs.fill(regs, *value),
            Action::Access { p, .. } => return self.cache.access(*p).map(Some),
            Action::RemoteAccess { p } => self.cache.remote_access(*p)?,
            Action::Flush { p } => self.cache.flush(*p)?,
            Action::FlushL1 => self.cache.flush_level(LevelName::L1),
            Action::EvictL1 { p } => {
                self.cache.evict_from(LevelName::L1, *p);
            }
            Action::MarkSensitive { p } => {
                let line = self.cache.line_of(*p);
                self.host_sensitive.insert(line);
            }
            Action::BtbTrain { site, target } => self.btb.train(*site, *target),
            Action::Syscall { .. }
            | Action::Interrupt { .. }
            | Action::Hypercall { .. }
            | Action::VmEntry { .. }
            | Action::SpecFault { .. }
            | Action::Idle { .. } => {}
        }
        Ok(None)
    }

    fn commit(&mut self, mut action: Action, cause: Cause, cost: u64) -> Result<Option<AccessOutcome>> {
        let outcome = self.apply(&action)?;
        let mut cycles = cost;
        match &mut action {
            Action::Access { level, .. } => {
                let out = outcome.expect("access yields an outcome");
                *level = out.level;
                if cause != Cause::Spec {
                    cycles += out.latency;
                }
            }
            Action::Flush { .. } | Action::EvictL1 { .. } => cycles += FLUSH_CYCLES,
            Action::FlushL1 => cycles += L1_FLUSH_CYCLES,
            Action::Regs { regs, .. } => cycles += REG_WRITE_CYCLES * regs.len() as u64,
            Action::Idle { cycles: n } => cycles += *n,
            _ => {}
        }
        self.cycle += cycles;
        self.events.push(Event {
            cycle: self.cycle,
            action,
            cause,
        });
        Ok(outcome)
    }

    fn access(&mut self, p: PhysicalAddress, cause: Cause) -> Result<AccessOutcome> {
        let out = self.commit(
            Action::Access {
                p,
                level: HitLevel::Memory,
            },
            cause,
            0,
        )?;
        Ok(out.expect("access yields an outcome"))
    }

    /// Rebuilds a machine by replaying `events` on `initial`.
    ///
    /// Recorded cache levels are checked against the replayed ones, so a log
    /// that does not belong to `initial` is rejected rather than silently
    /// producing a different state.
    pub fn replay(mut initial: MachineState, events: &[Event]) -> Result<MachineState> {
        for (i, ev) in events.iter().enumerate() {
            let outcome = initial.apply(&ev.action)?;
            if let (Action::Access { level, .. }, Some(out)) = (&ev.action, outcome) {
                if *level != out.level {
                    return Err(Error::EventLog(format!(
                        "event {i}: recorded level {level} but replay served {}",
                        out.level
                    )));
                }
            }
            if ev.cycle < initial.cycle {
                return Err(Error::EventLog(format!("event {i}: cycle counter went backwards")));
            }
            initial.cycle = ev.cycle;
            initial.events.push(ev.clone());
        }
        Ok(initial)
    }

    /// Canonical rendering of everything but the RNG stream and the log.
    pub fn state_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("seed={};cycle={};\n", self.rng_seed, self.cycle));
        out.push_str(&format!("mitigations={};preset={}\n", self.config.mitigations.fingerprint(), self.config.preset));
        out.push_str(&format!("regs={:x?}\n", self.regs.values()));
        out.push_str(&format!("cache={}\n", self.cache.canonical_text()));
        out.push_str(&format!("btb={}\n", self.btb.canonical_text()));
        out.push_str(&format!("kernel={}\n", self.kernel_aspace.canonical_text()));
        for (pid, a) in &self.user_aspaces {
            out.push_str(&format!("as{}={}\n", pid.0, a.canonical_text()));
        }
        out.push_str(&format!("guests={:?}\n", self.guests));
        out.push_str(&format!("memory={:?}\n", self.memory));
        out.push_str(&format!("sensitive={:?}\n", self.host_sensitive));
        for d in self.syscall_table.iter().chain(&self.hypercall_table) {
            out.push_str(&format!("{}:{}:{:?}:{};", d.id, d.name, d.deref_registers, d.latency));
        }
        out
    }

    pub fn state_digest(&self) -> String {
        hex::encode(Sha256::digest(self.state_text().as_bytes()))
    }

    /// Same simulated state and the same event history.
    pub fn same_state(&self, other: &MachineState) -> bool {
        self.state_text() == other.state_text() && self.events == other.events
    }

    // ---- setup ----

    pub fn spawn_process(&mut self, pid: Pid) -> Result<()> {
        self.commit(Action::Spawn { pid }, Cause::Setup, 0)?;
        Ok(())
    }

    /// Registers `pid` as a VM guest, creating its address space if needed.
    pub fn register_vm(&mut self, pid: Pid) -> Result<()> {
        if !self.user_aspaces.contains_key(&pid) {
            self.spawn_process(pid)?;
        }
        self.commit(Action::RegisterVm { pid }, Cause::Setup, 0)?;
        Ok(())
    }

    pub fn map_page(&mut self, pid: Pid, v: VirtualAddress, p: PhysicalAddress, user: bool) -> Result<()> {
        self.user_aspace(pid)?;
        self.commit(
            Action::MapPage {
                aspace: AspaceRef::Process(pid),
                v,
                p,
                user,
            },
            Cause::Setup,
            0,
        )?;
        Ok(())
    }

    pub fn map_kernel_page(&mut self, v: VirtualAddress, p: PhysicalAddress) -> Result<()> {
        self.commit(
            Action::MapPage {
                aspace: AspaceRef::Kernel,
                v,
                p,
                user: false,
            },
            Cause::Setup,
            0,
        )?;
        Ok(())
    }

    pub fn map_shared_range(
        &mut self,
        pid: Pid,
        start: VirtualAddress,
        count: u64,
        p1: PhysicalAddress,
        p2: PhysicalAddress,
    ) -> Result<()> {
        self.user_aspace(pid)?;
        self.commit(Action::MapShared { pid, start, count, p1, p2 }, Cause::User, 0)?;
        Ok(())
    }

    pub fn unmap_range(&mut self, pid: Pid, start: VirtualAddress, count: u64) -> Result<()> {
        self.user_aspace(pid)?;
        self.commit(Action::Unmap { pid, start, count }, Cause::User, 0)?;
        Ok(())
    }

    pub fn plant_secret(&mut self, p: PhysicalAddress, bytes: &[u8]) -> Result<()> {
        for (i, &byte) in bytes.iter().enumerate() {
            let at = PhysicalAddress(p.0 + i as u64);
            if at.0 >= self.memory_size() {
                return Err(Error::AddressRange {
                    addr: at,
                    limit: self.memory_size(),
                });
            }
            self.commit(Action::Plant { p: at, byte }, Cause::Setup, 0)?;
        }
        Ok(())
    }

    /// Marks the line of `p` as host data the conditional L1D flush covers.
    pub fn mark_host_sensitive(&mut self, p: PhysicalAddress) -> Result<()> {
        self.commit(Action::MarkSensitive { p }, Cause::Setup, 0)?;
        Ok(())
    }

    // ---- user-level actions ----

    pub fn write_registers(&mut self, regs: &[Register], value: u64) -> Result<()> {
        if regs.is_empty() {
            return Ok(());
        }
        let mut regs = regs.to_vec();
        regs.sort();
        regs.dedup();
        self.commit(Action::Regs { regs, value }, Cause::User, 0)?;
        Ok(())
    }

    pub fn idle(&mut self, cycles: u64) -> Result<()> {
        if cycles > 0 {
            self.commit(Action::Idle { cycles }, Cause::User, 0)?;
        }
        Ok(())
    }

    fn user_translate(&self, pid: Pid, v: VirtualAddress) -> Result<PhysicalAddress> {
        self.user_aspace(pid)?
            .translate(v, Mode::User, false)
            .map_err(|_| Error::Unmapped(v))
    }

    /// Architectural user-mode load.
    pub fn user_access(&mut self, pid: Pid, v: VirtualAddress) -> Result<AccessOutcome> {
        let p = self.user_translate(pid, v)?;
        self.access(p, Cause::User)
    }

    /// Load by a core that does not share this core's L1/L2.
    pub fn remote_access(&mut self, p: PhysicalAddress) -> Result<()> {
        self.commit(Action::RemoteAccess { p }, Cause::Remote, 0)?;
        Ok(())
    }

    /// clflush through a user mapping.
    pub fn flush_virtual(&mut self, pid: Pid, v: VirtualAddress) -> Result<()> {
        let p = self.user_translate(pid, v)?;
        self.commit(Action::Flush { p }, Cause::User, 0)?;
        Ok(())
    }

    pub fn flush_physical(&mut self, p: PhysicalAddress) -> Result<()> {
        self.commit(Action::Flush { p }, Cause::Setup, 0)?;
        Ok(())
    }

    fn probe_line(&mut self, p: PhysicalAddress) -> Result<Probe> {
        let out = self.access(p, Cause::Probe)?;
        self.commit(Action::Flush { p }, Cause::Probe, 0)?;
        let mut hit = out.latency < self.config.probe_threshold;
        let fp = self.config.noise.fp_rate;
        if !hit && fp > 0.0 && self.rng.gen::<f64>() < fp {
            hit = true;
        }
        Ok(if hit { Probe::Hit } else { Probe::Miss })
    }

    /// Flush+Reload on a user virtual address (reload, classify, flush).
    pub fn probe(&mut self, pid: Pid, v: VirtualAddress) -> Result<Probe> {
        let p = self.user_translate(pid, v)?;
        self.probe_line(p)
    }

    /// Flush+Reload from a privileged context (e.g. a verification driver).
    pub fn probe_physical(&mut self, p: PhysicalAddress) -> Result<Probe> {
        if p.0 >= self.memory_size() {
            return Err(Error::AddressRange {
                addr: p,
                limit: self.memory_size(),
            });
        }
        self.probe_line(p)
    }

    /// Prefetch hint from user code. Fetches only what the user may access.
    pub fn software_prefetch(&mut self, pid: Pid, v: VirtualAddress) -> Result<Option<AccessOutcome>> {
        match self.user_aspace(pid)?.translate(v, Mode::User, false) {
            Ok(p) => self.access(p, Cause::Prefetch).map(Some),
            Err(_) => Ok(None),
        }
    }

    /// An indirect branch in user (or enclave) code. Trains the BTB with
    /// `target` and returns the stale prediction when the CPU would run it
    /// transiently.
    pub fn user_indirect_branch(&mut self, site: u64, target: u64) -> Result<Option<u64>> {
        let predicted = self.btb.predict(site);
        self.commit(Action::BtbTrain { site, target }, Cause::User, 0)?;
        let speculates = self.config.mitigations.cpu_order == CpuOrder::OutOfOrder;
        Ok(predicted.filter(|&t| t != target && speculates))
    }

    // ---- speculative executor ----

    fn speculation_fires(&mut self) -> bool {
        let p = self.config.noise.speculation_probability;
        p >= 1.0 || self.rng.gen::<f64>() < p
    }

    fn kernel_translate(&self, view: View, v: VirtualAddress) -> Result<PhysicalAddress, Fault> {
        let smap = self.config.mitigations.smap;
        match view {
            View::Process(pid) if !v.is_kernel_half() => match self.user_aspaces.get(&pid) {
                Some(a) => a.translate(v, Mode::Kernel, smap),
                None => Err(Fault {
                    kind: crate::address::FaultKind::NotPresent,
                    address: v,
                }),
            },
            _ => self.kernel_aspace.translate(v, Mode::Kernel, smap),
        }
    }

    /// One transient load of `v`. Faults are squashed and only logged.
    /// `Mode::User` translates through the process page table with user
    /// permissions (enclave code); `Mode::Kernel` goes through `view`.
    pub fn speculative_load(&mut self, view: View, mode: Mode, v: VirtualAddress) -> Result<Option<PhysicalAddress>> {
        if !self.speculation_fires() {
            return Ok(None);
        }
        let translated = match (mode, view) {
            (Mode::Kernel, _) => self.kernel_translate(view, v),
            (Mode::User, View::Process(pid)) => self.user_aspace(pid)?.translate(v, Mode::User, false),
            (Mode::User, View::Host) => return Err(Error::config("user-mode speculative load needs a process view")),
        };
        match translated {
            Ok(p) => {
                self.access(p, Cause::Spec)?;
                Ok(Some(p))
            }
            Err(f) => {
                self.commit(Action::SpecFault { v, fault: f.kind }, Cause::Spec, 0)?;
                Ok(None)
            }
        }
    }

    fn speculate(&mut self, view: View, values: &[u64]) -> Result<Vec<PhysicalAddress>> {
        let mut fills = Vec::new();
        for &value in values {
            if let Some(p) = self.speculative_load(view, Mode::Kernel, VirtualAddress(value))? {
                fills.push(p);
            }
        }
        Ok(fills)
    }

    /// Runs syscall `nr` for `pid`.
    ///
    /// Transient phase: with an out-of-order core and no retpoline, a BTB
    /// prediction at the dispatch site that names a different handler makes
    /// that handler's register dereferences run with the caller's register
    /// values. Register clearing on entry zeroes them first. Architectural
    /// phase: the BTB learns the real handler, which only dereferences
    /// pointers that pass the user-pointer check.
    pub fn do_syscall(&mut self, pid: Pid, nr: u64) -> Result<EntryOutcome> {
        self.user_aspace(pid)?;
        let actual = self
            .syscall_table
            .iter()
            .find(|d| d.id == nr)
            .cloned()
            .ok_or(Error::UnknownSyscall(nr))?;
        self.commit(Action::Syscall { pid, nr }, Cause::Arch, actual.latency)?;

        let mut outcome = EntryOutcome::default();
        if self.config.mitigations.kernel_speculation() {
            outcome.predicted = self.btb.predict(SYSCALL_DISPATCH_SITE);
            let wrong = outcome
                .predicted
                .filter(|&t| t != actual.syscall_target())
                .and_then(|t| self.syscall_table.iter().find(|d| d.syscall_target() == t))
                .cloned();
            if let Some(wrong) = wrong {
                if !self.config.mitigations.register_clearing_on_syscall {
                    let values: Vec<u64> = wrong.deref_registers.iter().map(|&r| self.regs.get(r)).collect();
                    outcome.speculative_fills = self.speculate(View::Process(pid), &values)?;
                }
            }
        }

        self.commit(
            Action::BtbTrain {
                site: SYSCALL_DISPATCH_SITE,
                target: actual.syscall_target(),
            },
            Cause::Arch,
            0,
        )?;
        for r in &actual.deref_registers {
            let v = VirtualAddress(self.regs.get(*r));
            if let Ok(p) = self.user_aspace(pid)?.translate(v, Mode::User, false) {
                self.access(p, Cause::Arch)?;
            }
        }
        Ok(outcome)
    }

    /// Interrupt while `pid` runs. Entry code spills r8-r15 to the stack and
    /// clears them; the stacked copies are what gets dereferenced
    /// transiently, so register clearing does not help. Interrupting a guest
    /// exits to the host and re-enters the VM afterwards.
    pub fn deliver_interrupt(&mut self, pid: Pid) -> Result<EntryOutcome> {
        self.user_aspace(pid)?;
        self.commit(Action::Interrupt { pid }, Cause::Arch, INTERRUPT_CYCLES)?;
        let guest = self.is_guest(pid);
        let mut outcome = EntryOutcome::default();
        if self.config.mitigations.kernel_speculation() {
            let view = if guest { View::Host } else { View::Process(pid) };
            let stacked: Vec<u64> = Register::STACKED.iter().map(|&r| self.regs.get(r)).collect();
            outcome.speculative_fills = self.speculate(view, &stacked)?;
        }
        if guest {
            self.vm_resume(pid)?;
        }
        Ok(outcome)
    }

    /// Hypercall from `guest` with the guest's register file `args`; the
    /// hypercall number is in rax.
    pub fn vm_hypercall(&mut self, guest: Pid, args: &RegisterFile) -> Result<EntryOutcome> {
        if !self.is_guest(guest) {
            return Err(Error::UnknownGuest(guest));
        }
        let nr = args.get(Register::Rax);
        let actual = self
            .hypercall_table
            .iter()
            .find(|d| d.id == nr)
            .cloned()
            .ok_or(Error::UnknownHypercall(nr))?;
        self.commit(Action::Hypercall { pid: guest, nr }, Cause::Arch, HYPERCALL_CYCLES + actual.latency)?;

        let mut outcome = EntryOutcome::default();
        let m = self.config.mitigations;
        if m.kernel_speculation() {
            outcome.predicted = self.btb.predict(HYPERCALL_DISPATCH_SITE);
            let wrong = outcome
                .predicted
                .filter(|&t| t != actual.hypercall_target())
                .and_then(|t| self.hypercall_table.iter().find(|d| d.hypercall_target() == t))
                .cloned();
            if let Some(wrong) = wrong {
                if !m.register_clearing_on_vmexit {
                    let values: Vec<u64> = wrong.deref_registers.iter().map(|&r| args.get(r)).collect();
                    outcome.speculative_fills = self.speculate(View::Host, &values)?;
                }
            }
        }
        self.commit(
            Action::BtbTrain {
                site: HYPERCALL_DISPATCH_SITE,
                target: actual.hypercall_target(),
            },
            Cause::Arch,
            0,
        )?;
        self.vm_resume(guest)?;
        Ok(outcome)
    }

    /// VM entry: applies the L1D flush policy. L3 is never flushed.
    pub fn vm_resume(&mut self, guest: Pid) -> Result<()> {
        self.commit(Action::VmEntry { pid: guest }, Cause::VmEntry, VM_ENTRY_CYCLES)?;
        match self.config.mitigations.l1d_flush_on_vmentry {
            L1dFlushPolicy::None => {}
            L1dFlushPolicy::Always => {
                self.commit(Action::FlushL1, Cause::VmEntry, 0)?;
            }
            L1dFlushPolicy::Conditional => {
                let line_size = self.line_size();
                let resident: Vec<u64> = self
                    .host_sensitive
                    .iter()
                    .copied()
                    .filter(|&line| self.cache.contains(LevelName::L1, PhysicalAddress(line * line_size)))
                    .collect();
                for line in resident {
                    self.commit(
                        Action::EvictL1 {
                            p: PhysicalAddress(line * line_size),
                        },
                        Cause::VmEntry,
                        0,
                    )?;
                }
            }
        }
        Ok(())
    }

    /// Meltdown/Foreshadow style read of physical address `p`. Data is only
    /// forwarded from L1. Silicon with the fix returns zero.
    pub fn transient_read(&self, reader: TransientReader, p: PhysicalAddress) -> Option<u8> {
        let vulnerable = match reader {
            TransientReader::MeltdownUs => self.config.mitigations.meltdown_us_vulnerable,
            TransientReader::Foreshadow => self.config.mitigations.l1tf_vulnerable,
        };
        if !vulnerable {
            return Some(0);
        }
        if self.cache.contains(LevelName::L1, p) {
            Some(self.memory_byte(p))
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::address::PAGE_SIZE;
    use crate::kernel::syscall::find_by_name;

    const ATTACKER: Pid = Pid(1);
    const GUEST: Pid = Pid(7);

    fn machine(m: MitigationConfig) -> MachineState {
        let mut s = MachineState::new(MachineConfig::with_mitigations(m), 42).unwrap();
        s.spawn_process(ATTACKER).unwrap();
        s
    }

    fn nr(s: &MachineState, name: &str) -> u64 {
        find_by_name(s.syscall_table(), name).unwrap().id
    }

    /// Trains the dispatch BTB with readv, fills every register with `value`
    /// and calls sched_yield.
    fn gadget(s: &mut MachineState, value: u64) -> EntryOutcome {
        let readv = nr(s, "readv");
        let yield_ = nr(s, "sched_yield");
        s.do_syscall(ATTACKER, readv).unwrap();
        s.write_registers(&Register::fillable(), value).unwrap();
        s.do_syscall(ATTACKER, yield_).unwrap()
    }

    #[test]
    fn mistrained_dispatch_fetches_dpm_line() {
        let mut s = machine(MitigationConfig::default());
        let p = PhysicalAddress(0x2A_0C0);
        let dpm = s.dpm_address(p).unwrap().0;
        let out = gadget(&mut s, dpm);
        assert_eq!(out.speculative_fills, vec![p; 2]);
        assert!(s.cache().contains(LevelName::L1, p));
    }

    #[test]
    fn retpoline_blocks_fetch() {
        let m = MitigationConfig {
            spectre_btb: true,
            ..Default::default()
        };
        let mut s = machine(m);
        let p = PhysicalAddress(0x2A_0C0);
        let dpm = s.dpm_address(p).unwrap().0;
        assert!(gadget(&mut s, dpm).speculative_fills.is_empty());
        assert_eq!(s.cache().resident_level(p), HitLevel::Memory);
    }

    #[test]
    fn in_order_core_never_speculates() {
        let m = MitigationConfig {
            cpu_order: CpuOrder::InOrder,
            ..Default::default()
        };
        let mut s = machine(m);
        let p = PhysicalAddress(0x2A_0C0);
        let dpm = s.dpm_address(p).unwrap().0;
        assert!(gadget(&mut s, dpm).speculative_fills.is_empty());
        s.deliver_interrupt(ATTACKER).unwrap();
        assert_eq!(s.speculative_fill_count(), 0);
    }

    #[test]
    fn untrained_btb_does_not_speculate() {
        let mut s = machine(MitigationConfig::default());
        let p = PhysicalAddress(0x8000);
        let dpm = s.dpm_address(p).unwrap().0;
        s.write_registers(&Register::fillable(), dpm).unwrap();
        let yield_ = nr(&s, "sched_yield");
        assert!(s.do_syscall(ATTACKER, yield_).unwrap().speculative_fills.is_empty());
        // Same handler twice: correct prediction.
        assert!(s.do_syscall(ATTACKER, yield_).unwrap().speculative_fills.is_empty());
    }

    #[test]
    fn register_clearing_on_syscall_blocks_fetch() {
        let m = MitigationConfig {
            register_clearing_on_syscall: true,
            ..Default::default()
        };
        let mut s = machine(m);
        let dpm = s.dpm_address(PhysicalAddress(0x8000)).unwrap().0;
        assert!(gadget(&mut s, dpm).speculative_fills.is_empty());
    }

    #[test]
    fn unknown_syscall_and_process() {
        let mut s = machine(MitigationConfig::default());
        assert_eq!(s.do_syscall(ATTACKER, 9999), Err(Error::UnknownSyscall(9999)));
        assert_eq!(s.do_syscall(Pid(99), 24), Err(Error::UnknownProcess(Pid(99))));
    }

    #[test]
    fn interrupt_dereferences_stacked_registers() {
        let mut s = machine(MitigationConfig::default());
        let p = PhysicalAddress(0x3_1000);
        let dpm = s.dpm_address(p).unwrap().0;
        s.write_registers(&[Register::R9], dpm).unwrap();
        let before = *s.regs();
        let out = s.deliver_interrupt(ATTACKER).unwrap();
        assert_eq!(out.speculative_fills, vec![p]);
        assert_eq!(*s.regs(), before);
    }

    #[test]
    fn interrupt_respects_smap_and_retpoline() {
        let mut s = machine(MitigationConfig::default());
        let v = VirtualAddress(0x60_0000);
        s.map_page(ATTACKER, v, PhysicalAddress(0x9000), true).unwrap();
        s.write_registers(&[Register::R9], v.0).unwrap();
        assert!(s.deliver_interrupt(ATTACKER).unwrap().speculative_fills.is_empty());

        let mut s = machine(MitigationConfig {
            spectre_btb: true,
            ..Default::default()
        });
        let dpm = s.dpm_address(PhysicalAddress(0x9000)).unwrap().0;
        s.write_registers(&Register::STACKED, dpm).unwrap();
        assert!(s.deliver_interrupt(ATTACKER).unwrap().speculative_fills.is_empty());
    }

    #[test]
    fn smap_off_lets_user_address_through() {
        let mut s = machine(MitigationConfig {
            smap: false,
            ..Default::default()
        });
        let v = VirtualAddress(0x60_0000);
        s.map_page(ATTACKER, v, PhysicalAddress(0x9000), true).unwrap();
        s.write_registers(&[Register::R9], v.0).unwrap();
        assert_eq!(
            s.deliver_interrupt(ATTACKER).unwrap().speculative_fills,
            vec![PhysicalAddress(0x9000)]
        );
    }

    fn hypercall_machine(m: MitigationConfig) -> (MachineState, RegisterFile, RegisterFile) {
        let mut s = machine(m);
        s.register_vm(GUEST).unwrap();
        let mut trainer = RegisterFile::default();
        trainer.set(Register::Rax, 10);
        let mut trigger = RegisterFile::default();
        trigger.set(Register::Rax, 1);
        (s, trainer, trigger)
    }

    #[test]
    fn hypercall_gadget_without_register_clearing() {
        let (mut s, trainer, mut trigger) = hypercall_machine(MitigationConfig {
            register_clearing_on_vmexit: false,
            l1d_flush_on_vmentry: L1dFlushPolicy::None,
            ..Default::default()
        });
        let p = PhysicalAddress(0x4_2000);
        let dpm = s.dpm_address(p).unwrap().0;
        trigger.fill(&[Register::Rbx, Register::Rcx], dpm);
        s.vm_hypercall(GUEST, &trainer).unwrap();
        let out = s.vm_hypercall(GUEST, &trigger).unwrap();
        assert!(!out.speculative_fills.is_empty());
        assert!(s.cache().contains(LevelName::L1, p));
    }

    #[test]
    fn hypercall_register_clearing_blocks() {
        let (mut s, trainer, mut trigger) = hypercall_machine(MitigationConfig::default());
        let p = PhysicalAddress(0x4_2000);
        trigger.fill(&[Register::Rbx, Register::Rcx], s.dpm_address(p).unwrap().0);
        s.vm_hypercall(GUEST, &trainer).unwrap();
        assert!(s.vm_hypercall(GUEST, &trigger).unwrap().speculative_fills.is_empty());
        assert_eq!(s.cache().resident_level(p), HitLevel::Memory);
    }

    #[test]
    fn hypercall_always_flush_empties_l1() {
        let (mut s, trainer, mut trigger) = hypercall_machine(MitigationConfig {
            register_clearing_on_vmexit: false,
            l1d_flush_on_vmentry: L1dFlushPolicy::Always,
            ..Default::default()
        });
        let p = PhysicalAddress(0x4_2000);
        trigger.fill(&[Register::Rbx, Register::Rcx], s.dpm_address(p).unwrap().0);
        s.vm_hypercall(GUEST, &trainer).unwrap();
        s.vm_hypercall(GUEST, &trigger).unwrap();
        assert!(s.cache().is_empty(LevelName::L1));
        assert!(s.cache().contains(LevelName::L3, p));
    }

    #[test]
    fn hypercall_from_non_guest() {
        let mut s = machine(MitigationConfig::default());
        assert_eq!(
            s.vm_hypercall(ATTACKER, &RegisterFile::default()),
            Err(Error::UnknownGuest(ATTACKER))
        );
    }

    #[test]
    fn vm_resume_policies() {
        let p = PhysicalAddress(0x5_0000);
        for (policy, tagged, stays) in [
            (L1dFlushPolicy::Always, false, false),
            (L1dFlushPolicy::None, true, true),
            (L1dFlushPolicy::Conditional, false, true),
            (L1dFlushPolicy::Conditional, true, false),
        ] {
            let mut s = machine(MitigationConfig {
                l1d_flush_on_vmentry: policy,
                ..Default::default()
            });
            s.register_vm(GUEST).unwrap();
            if tagged {
                s.mark_host_sensitive(p).unwrap();
            }
            s.probe_physical(p).unwrap();
            s.access(p, Cause::Setup).unwrap();
            s.vm_resume(GUEST).unwrap();
            assert_eq!(s.cache().contains(LevelName::L1, p), stays, "{policy:?} tagged={tagged}");
            assert!(s.cache().contains(LevelName::L3, p));
        }
    }

    #[test]
    fn transient_read_needs_l1() {
        let mut s = machine(MitigationConfig::default());
        let p = PhysicalAddress(0x6_0010);
        s.plant_secret(p, &[0xA5]).unwrap();
        assert_eq!(s.transient_read(TransientReader::Foreshadow, p), None);
        s.remote_access(p).unwrap();
        assert_eq!(s.transient_read(TransientReader::Foreshadow, p), None);
        assert_eq!(s.transient_read(TransientReader::MeltdownUs, p), None);
        s.access(p, Cause::Setup).unwrap();
        assert_eq!(s.transient_read(TransientReader::Foreshadow, p), Some(0xA5));
        assert_eq!(s.transient_read(TransientReader::MeltdownUs, p), Some(0xA5));

        let fixed = machine(MitigationConfig {
            meltdown_us_vulnerable: false,
            l1tf_vulnerable: false,
            ..Default::default()
        });
        assert_eq!(fixed.transient_read(TransientReader::MeltdownUs, p), Some(0));
        assert_eq!(fixed.transient_read(TransientReader::Foreshadow, p), Some(0));
    }

    #[test]
    fn probe_flushes_and_classifies() {
        let mut s = machine(MitigationConfig::default());
        let v = VirtualAddress(0x1000);
        s.map_page(ATTACKER, v, PhysicalAddress(0x7000), true).unwrap();
        assert_eq!(s.probe(ATTACKER, v).unwrap(), Probe::Miss);
        s.user_access(ATTACKER, v).unwrap();
        assert_eq!(s.probe(ATTACKER, v).unwrap(), Probe::Hit);
        assert_eq!(s.probe(ATTACKER, v).unwrap(), Probe::Miss);
        assert!(s.probe(ATTACKER, VirtualAddress(0x2000)).is_err());
    }

    #[test]
    fn physical_indexing_across_aliases() {
        let mut s = machine(MitigationConfig::default());
        let (a, b) = (VirtualAddress(0x1000), VirtualAddress(0x7_7000));
        s.map_page(ATTACKER, a, PhysicalAddress(0x3000), true).unwrap();
        s.map_page(ATTACKER, b, PhysicalAddress(0x3000), true).unwrap();
        s.user_access(ATTACKER, a.offset(0x80)).unwrap();
        assert_eq!(s.probe(ATTACKER, b.offset(0x80)).unwrap(), Probe::Hit);
    }

    #[test]
    fn replay_reconstructs_state() {
        let mut s = machine(MitigationConfig::default());
        s.register_vm(GUEST).unwrap();
        let v = VirtualAddress(0x1000);
        s.map_page(ATTACKER, v, PhysicalAddress(0x3000), true).unwrap();
        s.plant_secret(PhysicalAddress(0x3000), b"hi").unwrap();
        let dpm = s.dpm_address(PhysicalAddress(0x3000)).unwrap().0;
        gadget(&mut s, dpm);
        s.deliver_interrupt(GUEST).unwrap();
        s.probe(ATTACKER, v).unwrap();
        s.idle(123).unwrap();
        s.map_shared_range(ATTACKER, VirtualAddress(0x100_0000), 4, PhysicalAddress(0), PhysicalAddress(0x1000))
            .unwrap();

        let fresh = MachineState::new(s.config().clone(), s.seed()).unwrap();
        let replayed = MachineState::replay(fresh, s.events()).unwrap();
        assert!(replayed.same_state(&s));
        assert_eq!(replayed.state_digest(), s.state_digest());

        // Text round trip.
        let parsed: Vec<Event> = s.events().iter().map(|e| e.to_string().parse().unwrap()).collect();
        let fresh = MachineState::new(s.config().clone(), s.seed()).unwrap();
        assert!(MachineState::replay(fresh, &parsed).unwrap().same_state(&s));
    }

    #[test]
    fn replay_rejects_foreign_log() {
        let mut s = machine(MitigationConfig::default());
        s.remote_access(PhysicalAddress(0x40)).unwrap();
        s.access(PhysicalAddress(0x40), Cause::Setup).unwrap();
        // Drop the remote access: the recorded L3 hit no longer reproduces.
        let mut tampered = s.events().to_vec();
        assert!(matches!(tampered.remove(1).action, Action::RemoteAccess { .. }));
        let fresh = MachineState::new(s.config().clone(), s.seed()).unwrap();
        assert!(MachineState::replay(fresh, &tampered).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = MachineConfig::default();
        c.probe_threshold = 20;
        assert!(MachineState::new(c, 0).is_err());
        let mut c = MachineConfig::default();
        c.noise.fp_rate = 1.5;
        assert!(MachineState::new(c, 0).is_err());
        let mut c = MachineConfig::default();
        c.preset = "nope".into();
        assert!(MachineState::new(c, 0).is_err());
        let mut c = MachineConfig::default();
        c.dpm_base = 0x1000;
        assert!(MachineState::new(c, 0).is_err());
    }

    #[test]
    fn page_size_matches_cache_geometry() {
        assert_eq!(PAGE_SIZE / MachineConfig::default().cache.line_size, 64);
    }
}
