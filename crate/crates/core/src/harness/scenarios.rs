//! Experiment protocols.
//!
//! Every scenario builds fresh machines from the config, plants its own
//! ground truth, runs the protocol once per repetition and checks the
//! outcome against what the mitigation settings predict. Repetition `i`
//! runs on a machine seeded with `derive_seed(seed, i)`.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::address::{PhysicalAddress, VirtualAddress, PAGE_SIZE};
use crate::attacks::{
    address_translation_attack, covert_run, dereference_trap, foreshadow_l3_attack, meltdown_l3_experiment,
    DerefGadget, GadgetDriver, GuestTrigger, KernelModuleGadget, Trigger, TranslationSearch, TypeConfusionGadget,
};
use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, Scenario};
use crate::harness::stats::{f1_score, ConfusionCounts};
use crate::kernel::{
    Action, CpuOrder, L1dFlushPolicy, MachineConfig, MachineState, MitigationConfig, Pid, Register,
};
use crate::microarch::HitLevel;
use crate::par::derive_seed;

pub const ATTACKER: Pid = Pid(1);
pub const GUEST: Pid = Pid(5);
const PROBE_PAGE: VirtualAddress = VirtualAddress(0x7f00_0000_0000);

/// Outcome of one scenario run.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioResult {
    pub scenario: Scenario,
    pub fingerprint: String,
    pub seed: u64,
    pub metrics: Vec<(String, f64)>,
    pub passed: bool,
    pub notes: Vec<String>,
}

impl ScenarioResult {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(k, _)| k == name).map(|&(_, v)| v)
    }
}

pub struct RunOutput {
    pub result: ScenarioResult,
    /// Machine of repetition 0, when requested.
    pub machine: Option<MachineState>,
}

/// The syscall gadget fires on this configuration.
pub fn syscall_gadget_active(m: &MitigationConfig) -> bool {
    m.kernel_speculation() && !m.register_clearing_on_syscall
}

pub fn run_scenario(cfg: &ExperimentConfig) -> Result<ScenarioResult> {
    run_scenario_capture(cfg, false).map(|o| o.result)
}

pub fn run_scenario_capture(cfg: &ExperimentConfig, capture: bool) -> Result<RunOutput> {
    cfg.validate()?;
    let mut out = Outcome::default();
    let machine = match cfg.scenario {
        Scenario::H1 => h1(cfg, capture, &mut out)?,
        Scenario::H2 => h2(cfg, capture, &mut out)?,
        Scenario::H3 => h3(cfg, capture, &mut out)?,
        Scenario::H4 => h4(cfg, capture, &mut out)?,
        Scenario::H5 => h5(cfg, capture, &mut out)?,
        Scenario::AddrTranslate => addr_translate(cfg, capture, &mut out)?,
        Scenario::Covert => covert(cfg, &mut out)?,
        Scenario::DerefTrap => deref_trap(cfg, capture, &mut out)?,
        Scenario::ForeshadowL3 => foreshadow(cfg, capture, &mut out)?,
        Scenario::MeltdownL3 => meltdown(cfg, capture, &mut out)?,
        Scenario::SyscallSweep => syscall_sweep(cfg, capture, &mut out)?,
        Scenario::BtbMistrainSweep => mistrain_scenario(cfg, capture, &mut out)?,
    };
    let result = ScenarioResult {
        scenario: cfg.scenario,
        fingerprint: cfg.mitigations.fingerprint(),
        seed: cfg.seed,
        metrics: out.metrics,
        passed: out.failures.is_empty(),
        notes: out.notes.into_iter().chain(out.failures).collect(),
    };
    Ok(RunOutput { result, machine })
}

#[derive(Default)]
struct Outcome {
    metrics: Vec<(String, f64)>,
    notes: Vec<String>,
    failures: Vec<String>,
}

impl Outcome {
    fn metric(&mut self, name: impl Into<String>, value: impl Into<f64>) {
        self.metrics.push((name.into(), value.into()));
    }

    fn check(&mut self, ok: bool, what: impl Into<String>) {
        if !ok {
            self.failures.push(format!("FAILED: {}", what.into()));
        }
    }
}

/// Runs `rep` for every repetition in the configured execution mode and
/// keeps the machine of repetition 0 if asked to.
fn repeat<R, F>(cfg: &ExperimentConfig, capture: bool, rep: F) -> Result<(Vec<R>, Option<MachineState>)>
where
    R: Send,
    F: Fn(u64) -> Result<(R, MachineState)> + Sync + Send,
{
    let results = cfg.execution.map_range(cfg.repetitions as u64, |i| {
        rep(derive_seed(cfg.seed, i)).map(|(r, m)| (r, (capture && i == 0).then_some(m)))
    });
    let mut out = Vec::with_capacity(results.len());
    let mut machine = None;
    for r in results {
        let (r, m) = r?;
        if m.is_some() {
            machine = m;
        }
        out.push(r);
    }
    Ok((out, machine))
}

fn machine(config: MachineConfig, seed: u64) -> Result<(MachineState, ChaCha8Rng)> {
    let mut m = MachineState::new(config, seed)?;
    m.spawn_process(ATTACKER)?;
    // Scenario randomness is independent of the machine's noise stream.
    let rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5CE7_A210);
    Ok((m, rng))
}

fn random_frame(m: &MachineState, rng: &mut ChaCha8Rng) -> u64 {
    rng.gen_range(1..m.memory_size() / PAGE_SIZE)
}

fn random_line(m: &MachineState, rng: &mut ChaCha8Rng) -> PhysicalAddress {
    let lines = PAGE_SIZE / m.line_size();
    PhysicalAddress::from_frame(random_frame(m, rng), rng.gen_range(0..lines) * m.line_size())
}

fn spec_fills_since(m: &MachineState, from: usize) -> Vec<PhysicalAddress> {
    m.events()[from..]
        .iter()
        .filter(|e| e.is_speculative_fill())
        .filter_map(|e| match e.action {
            Action::Access { p, .. } => Some(p),
            _ => None,
        })
        .collect()
}

fn count(xs: &[bool]) -> f64 {
    xs.iter().filter(|&&x| x).count() as f64
}

fn deterministic(cfg: &ExperimentConfig) -> bool {
    cfg.noise.speculation_probability >= 1.0
}

fn driver_from_params(cfg: &ExperimentConfig, m: &MachineState) -> Result<GadgetDriver> {
    match cfg.param_or("trigger", "syscall".to_string())?.as_str() {
        "syscall" => {
            let trainer = cfg.param_or("trainer", "readv".to_string())?;
            let victim = cfg.param_or("victim", "sched_yield".to_string())?;
            GadgetDriver::syscall_pair(m, &trainer, &victim)
        }
        "interrupt" => Ok(GadgetDriver::interrupt()),
        other => Err(Error::config(format!("unknown trigger '{other}'"))),
    }
}

fn driver_active(driver: &GadgetDriver, m: &MitigationConfig) -> bool {
    if driver.triggers.contains(&Trigger::Interrupt) {
        m.kernel_speculation()
    } else {
        syscall_gadget_active(m)
    }
}

// ---- H1: the prefetch instruction is not what fetches ----

fn h1(cfg: &ExperimentConfig, capture: bool, out: &mut Outcome) -> Result<Option<MachineState>> {
    let (reps, machine) = repeat(cfg, capture, |seed| {
        let mut runs = Vec::new();
        for with_prefetch in [true, false] {
            let (mut m, mut rng) = machine(cfg.machine_config(), seed)?;
            let target = random_line(&m, &mut rng);
            let dpm = m.dpm_address(target)?;
            let driver = GadgetDriver::default_for(&m);
            m.write_registers(&driver.fill, dpm.0)?;
            if with_prefetch {
                m.software_prefetch(ATTACKER, dpm)?;
            }
            driver.fire(&mut m, ATTACKER, dpm.0)?;
            if with_prefetch {
                m.software_prefetch(ATTACKER, dpm)?;
            }
            let fills = m.speculative_fill_count();
            runs.push((fills, m.state_digest(), m));
        }
        let (without, with) = (runs.pop().unwrap(), runs.pop().unwrap());
        Ok(((with.0, without.0, with.1 == without.1), with.2))
    })?;
    let identical: Vec<bool> = reps.iter().map(|r| r.2 && r.0 == r.1).collect();
    out.metric("fills_with_prefetch", reps.iter().map(|r| r.0 as f64).sum::<f64>());
    out.metric("fills_without_prefetch", reps.iter().map(|r| r.1 as f64).sum::<f64>());
    out.metric("identical_reps", count(&identical));
    out.check(
        identical.iter().all(|&x| x),
        "removing the prefetch instructions changed the outcome",
    );
    if syscall_gadget_active(&cfg.mitigations) && deterministic(cfg) {
        out.check(reps.iter().all(|r| r.1 > 0), "the gadget fetched nothing");
    }
    Ok(machine)
}

// ---- H2: only values held in registers are fetched ----

fn h2(cfg: &ExperimentConfig, capture: bool, out: &mut Outcome) -> Result<Option<MachineState>> {
    let syscall_active = syscall_gadget_active(&cfg.mitigations);
    let interrupt_active = cfg.mitigations.kernel_speculation();
    let (reps, machine) = repeat(cfg, capture, |seed| {
        let (mut m, mut rng) = machine(cfg.machine_config(), seed)?;
        let preset_regs: Vec<Register> = m.syscall_by_name("readv").unwrap().deref_registers.clone();
        let mut allowed = BTreeSet::new();
        let mut expected = BTreeSet::new();
        for r in Register::fillable() {
            let value = match rng.gen_range(0..3) {
                0 => {
                    let p = random_line(&m, &mut rng);
                    let line = p.0 / m.line_size();
                    allowed.insert(line);
                    if (syscall_active && preset_regs.contains(&r))
                        || (interrupt_active && Register::STACKED.contains(&r))
                    {
                        expected.insert(line);
                    }
                    m.dpm_address(p)?.0
                }
                1 => rng.gen_range(0x1000..1u64 << 47),
                _ => 0,
            };
            m.write_registers(&[r], value)?;
        }
        // Data the handlers reach through rip-relative or immediate operands.
        let immediate = loop {
            let p = random_line(&m, &mut rng);
            if !allowed.contains(&(p.0 / m.line_size())) {
                break p;
            }
        };
        let readv = m.syscall_by_name("readv").unwrap().id;
        let yield_ = m.syscall_by_name("sched_yield").unwrap().id;
        m.do_syscall(ATTACKER, readv)?;
        m.do_syscall(ATTACKER, yield_)?;
        m.deliver_interrupt(ATTACKER)?;
        let fills: BTreeSet<u64> = spec_fills_since(&m, 0).iter().map(|p| p.0 / m.line_size()).collect();
        let outside = fills.difference(&allowed).count();
        let immediate_hit = m.cache().resident_level(immediate) != HitLevel::Memory;
        let exact = fills == expected;
        Ok(((fills.len(), outside, immediate_hit, exact), m))
    })?;
    out.metric("fills", reps.iter().map(|r| r.0 as f64).sum::<f64>());
    let outside: f64 = reps.iter().map(|r| r.1 as f64).sum();
    let immediate = count(&reps.iter().map(|r| r.2).collect::<Vec<_>>());
    let exact = count(&reps.iter().map(|r| r.3).collect::<Vec<_>>());
    out.metric("fills_outside_registers", outside);
    out.metric("immediate_target_fills", immediate);
    out.metric("exact_reps", exact);
    out.check(outside == 0.0, "a line no register pointed to was fetched");
    out.check(immediate == 0.0, "an immediate/rip-relative target was fetched");
    if deterministic(cfg) {
        out.check(
            exact == cfg.repetitions as f64,
            "fetched lines differ from the gadget registers' targets",
        );
    }
    Ok(machine)
}

// ---- H3: no kernel entry, no fetch ----

fn h3(cfg: &ExperimentConfig, capture: bool, out: &mut Outcome) -> Result<Option<MachineState>> {
    let (reps, machine) = repeat(cfg, capture, |seed| {
        let (mut m, mut rng) = machine(cfg.machine_config(), seed)?;
        let target = random_line(&m, &mut rng);
        let dpm = m.dpm_address(target)?;
        let own = PhysicalAddress::from_frame(random_frame(&m, &mut rng), 0);
        m.map_page(ATTACKER, PROBE_PAGE, own, true)?;
        m.write_registers(&Register::fillable(), dpm.0)?;
        for _ in 0..16 {
            m.software_prefetch(ATTACKER, dpm)?;
            m.user_access(ATTACKER, PROBE_PAGE)?;
            m.flush_virtual(ATTACKER, PROBE_PAGE)?;
            m.user_indirect_branch(0x40_1000, 0x40_2000)?;
            m.idle(1000)?;
        }
        let idle_fills = m.speculative_fill_count();
        GadgetDriver::default_for(&m).fire(&mut m, ATTACKER, dpm.0)?;
        let entry_fills = m.speculative_fill_count() - idle_fills;
        Ok(((idle_fills, entry_fills), m))
    })?;
    let idle: usize = reps.iter().map(|r| r.0).sum();
    let entry: usize = reps.iter().map(|r| r.1).sum();
    out.metric("fills_without_kernel_entry", idle as f64);
    out.metric("fills_with_kernel_entry", entry as f64);
    out.check(idle == 0, "lines were fetched without any syscall or interrupt");
    if syscall_gadget_active(&cfg.mitigations) && deterministic(cfg) {
        out.check(reps.iter().all(|r| r.1 > 0), "the control run fetched nothing");
    }
    Ok(machine)
}

// ---- H4: SMAP is honoured ----

fn h4(cfg: &ExperimentConfig, capture: bool, out: &mut Outcome) -> Result<Option<MachineState>> {
    let (reps, machine) = repeat(cfg, capture, |seed| {
        let (mut m, mut rng) = machine(cfg.machine_config(), seed)?;
        let frame = random_frame(&m, &mut rng);
        let offset = rng.gen_range(0..PAGE_SIZE / m.line_size()) * m.line_size();
        m.map_page(ATTACKER, PROBE_PAGE, PhysicalAddress::from_frame(frame, 0), true)?;
        let v = PROBE_PAGE.offset(offset);
        let driver = GadgetDriver::default_for(&m);
        driver.fire(&mut m, ATTACKER, v.0)?;
        m.deliver_interrupt(ATTACKER)?;
        let user_fills = spec_fills_since(&m, 0).iter().filter(|p| p.frame() == frame).count();
        Ok((user_fills, m))
    })?;
    let fills: usize = reps.iter().sum();
    out.metric("user_address_fills", fills as f64);
    out.metric("smap", if cfg.mitigations.smap { 1.0 } else { 0.0 });
    if cfg.mitigations.smap {
        out.check(fills == 0, "a user-accessible page was fetched with SMAP on");
    } else if cfg.mitigations.kernel_speculation() && deterministic(cfg) {
        out.check(reps.iter().all(|&f| f > 0), "with SMAP off the user page should be fetched");
    }
    Ok(machine)
}

// ---- H5: in-order cores do not speculate ----

fn h5(cfg: &ExperimentConfig, capture: bool, out: &mut Outcome) -> Result<Option<MachineState>> {
    let (reps, machine) = repeat(cfg, capture, |seed| {
        let mut fills = [0usize; 2];
        let mut kept = None;
        for (i, order) in [CpuOrder::InOrder, CpuOrder::OutOfOrder].into_iter().enumerate() {
            let mut mc = cfg.machine_config();
            mc.mitigations.cpu_order = order;
            let (mut m, mut rng) = machine(mc, seed)?;
            let dpm = m.dpm_address(random_line(&m, &mut rng))?.0;
            GadgetDriver::default_for(&m).fire(&mut m, ATTACKER, dpm)?;
            m.deliver_interrupt(ATTACKER)?;
            fills[i] = m.speculative_fill_count();
            if order == cfg.mitigations.cpu_order {
                kept = Some(m);
            }
        }
        Ok((fills, kept.unwrap()))
    })?;
    let in_order: usize = reps.iter().map(|f| f[0]).sum();
    let ooo: usize = reps.iter().map(|f| f[1]).sum();
    out.metric("fills_in_order", in_order as f64);
    out.metric("fills_out_of_order", ooo as f64);
    out.check(in_order == 0, "an in-order core fetched speculatively");
    Ok(machine)
}

// ---- address translation ----

fn addr_translate(cfg: &ExperimentConfig, capture: bool, out: &mut Outcome) -> Result<Option<MachineState>> {
    let sweeps = cfg.param_or("sweeps", 1u32)?;
    let confirmations = cfg.param_or("confirmations", 0u32)?;
    let probe = MachineState::new(cfg.machine_config(), 0)?;
    let active = driver_active(&driver_from_params(cfg, &probe)?, &cfg.mitigations);
    let (reps, machine) = repeat(cfg, capture, |seed| {
        let (mut m, mut rng) = machine(cfg.machine_config(), seed)?;
        let p = PhysicalAddress::from_frame(random_frame(&m, &mut rng), rng.gen_range(0..PAGE_SIZE));
        m.map_page(ATTACKER, PROBE_PAGE, PhysicalAddress::from_frame(p.frame(), 0), true)?;
        let v = PROBE_PAGE.offset(p.page_offset());
        let driver = driver_from_params(cfg, &m)?;
        let search = TranslationSearch::full(&m).sweeps(sweeps).confirmations(confirmations);
        let found = address_translation_attack(&mut m, ATTACKER, v, &search, &driver)?;
        Ok(((found.physical.map(|f| f == p), found.guesses, found.report.simulated_cycles), m))
    })?;
    let mut c = ConfusionCounts::default();
    for r in &reps {
        match r.0 {
            Some(true) => c.tp += 1,
            Some(false) => {
                c.fp += 1;
                c.fn_ += 1
            }
            None => c.fn_ += 1,
        }
    }
    let n = reps.len() as f64;
    out.metric("tp", c.tp as f64);
    out.metric("fp", c.fp as f64);
    out.metric("fn", c.fn_ as f64);
    out.metric("precision", c.precision());
    out.metric("recall", c.recall());
    out.metric("f1", f1_score(&c));
    out.metric("mean_guesses", reps.iter().map(|r| r.1 as f64).sum::<f64>() / n);
    out.metric("mean_cycles", reps.iter().map(|r| r.2 as f64).sum::<f64>() / n);
    if cfg.noise.fp_rate == 0.0 {
        out.check(c.fp == 0, "the attack returned a wrong physical address");
    }
    if active {
        let min_recall = cfg.param_or("min_recall", if deterministic(cfg) { 1.0 } else { 0.95 })?;
        out.check(c.recall() >= min_recall, format!("recall {} below {min_recall}", c.recall()));
    } else {
        out.check(c.tp == 0, "the attack succeeded although the gadget is mitigated");
    }
    Ok(machine)
}

// ---- covert channel ----

fn covert(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<Option<MachineState>> {
    let bytes = cfg.param_or("message_bytes", 128usize)?;
    let window: Option<u64> = cfg.param("window")?;
    let mc = cfg.machine_config();
    let results = cfg.execution.map_range(cfg.repetitions as u64, |i| {
        let seed = derive_seed(cfg.seed, i);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0DE);
        let message: Vec<u8> = (0..bytes).map(|_| rng.gen()).collect();
        let sent = crate::attacks::bytes_to_bits(&message);
        match covert_run(&mc, seed, &message, window) {
            Ok((received, cycles)) => {
                let errors = sent.iter().zip(&received).filter(|(a, b)| a != b).count() as u64;
                Ok(Some((sent.len() as u64, errors, cycles)))
            }
            Err(Error::Aborted(_)) => Ok(None),
            Err(e) => Err(e),
        }
    });
    let (mut bits, mut errors, mut cycles, mut dead) = (0u64, 0u64, 0u64, 0u64);
    for r in results {
        match r? {
            Some((b, e, c)) => {
                bits += b;
                errors += e;
                cycles += c;
            }
            None => dead += 1,
        }
    }
    let error_rate = if bits > 0 { errors as f64 / bits as f64 } else { 0.0 };
    let bitrate = if cycles > 0 { bits as f64 * 1e6 / cycles as f64 } else { 0.0 };
    out.metric("bits", bits as f64);
    out.metric("bit_errors", errors as f64);
    out.metric("error_rate", error_rate);
    out.metric("bitrate", bitrate);
    out.metric("dead_runs", dead as f64);
    out.notes.push("bitrate is in bits per million simulated cycles".into());
    if syscall_gadget_active(&cfg.mitigations) {
        let noiseless = cfg.noise.is_deterministic();
        let max = cfg.param_or("max_error_rate", if noiseless { 0.0 } else { 0.001 })?;
        out.check(dead == 0, "the channel could not be set up");
        out.check(error_rate <= max, format!("bit error rate {error_rate} above {max}"));
    } else {
        out.check(
            dead == cfg.repetitions as u64 || errors * 2 >= bits,
            "the channel carried data although the gadget is mitigated",
        );
    }
    Ok(None)
}

// ---- Dereference Trap ----

const LISTED_SECRET: u32 = 0x1230_0000;

fn deref_trap(cfg: &ExperimentConfig, capture: bool, out: &mut Outcome) -> Result<Option<MachineState>> {
    let kind = cfg.param_or("gadget", "type_confusion".to_string())?;
    let fixed: Option<u32> = cfg.param("secret")?;
    let attempts = cfg.param_or("attempts", 1u32)?;
    let m = &cfg.mitigations;
    let active = match kind.as_str() {
        "type_confusion" => m.cpu_order == CpuOrder::OutOfOrder,
        "kernel_module" => m.kernel_speculation() && !m.smap,
        other => return Err(Error::config(format!("unknown trap gadget '{other}'"))),
    };
    let first_seed = derive_seed(cfg.seed, 0);
    let (reps, machine) = repeat(cfg, capture, |seed| {
        let (mut m, mut rng) = machine(cfg.machine_config(), seed)?;
        let secret = fixed.unwrap_or_else(|| if seed == first_seed { LISTED_SECRET } else { rng.gen() });
        let p1 = PhysicalAddress::from_frame(random_frame(&m, &mut rng), 0);
        let p2 = loop {
            let f = random_frame(&m, &mut rng);
            if f != p1.frame() {
                break PhysicalAddress::from_frame(f, 0);
            }
        };
        let mut gadget: Box<dyn DerefGadget> = match kind.as_str() {
            "kernel_module" => Box::new(KernelModuleGadget { pid: ATTACKER, secret }),
            _ => Box::new(TypeConfusionGadget { pid: ATTACKER, secret }),
        };
        let r = match dereference_trap(&mut m, ATTACKER, gadget.as_mut(), p1, p2, attempts) {
            Ok(o) => Some((o.value == (secret & !0x3F) as u64, o.probes, o.schedule.len())),
            Err(Error::Aborted(_)) => None,
            Err(e) => return Err(e),
        };
        Ok((r, m))
    })?;
    let correct = reps.iter().filter(|r| matches!(r, Some((true, ..)))).count();
    let wrong = reps.iter().filter(|r| matches!(r, Some((false, ..)))).count();
    let aborted = reps.iter().filter(|r| r.is_none()).count();
    let max_probes = reps.iter().flatten().map(|r| r.1).max().unwrap_or(0);
    let max_rounds = reps.iter().flatten().map(|r| r.2).max().unwrap_or(0);
    out.metric("recovered", correct as f64);
    out.metric("wrong", wrong as f64);
    out.metric("aborted", aborted as f64);
    out.metric("max_probes", max_probes as f64);
    out.metric("max_rounds", max_rounds as f64);
    if cfg.noise.fp_rate == 0.0 {
        out.check(wrong == 0, "a trap run recovered a wrong value");
    }
    if active && deterministic(cfg) {
        out.check(correct == reps.len(), "not every secret was recovered");
    } else if !active {
        out.check(correct == 0, "the trap worked although its gadget cannot fire");
    }
    Ok(machine)
}

// ---- Foreshadow from L3 ----

fn foreshadow(cfg: &ExperimentConfig, capture: bool, out: &mut Outcome) -> Result<Option<MachineState>> {
    let length = cfg.param_or("length", 64u64)?;
    let attempts = cfg.param_or("attempts", 1u32)?;
    let trigger = match cfg.param_or("trigger", "interrupt".to_string())?.as_str() {
        "interrupt" => GuestTrigger::Interrupt,
        "hypercall" => GuestTrigger::Hypercall,
        other => return Err(Error::config(format!("unknown guest trigger '{other}'"))),
    };
    if length == 0 || length > PAGE_SIZE {
        return Err(Error::config("params.length must be in 1..=4096"));
    }
    let m = &cfg.mitigations;
    let reaches_l1 = match trigger {
        GuestTrigger::Interrupt => m.kernel_speculation(),
        GuestTrigger::Hypercall => m.kernel_speculation() && !m.register_clearing_on_vmexit,
    };
    let expected = reaches_l1 && m.l1tf_vulnerable && m.l1d_flush_on_vmentry != L1dFlushPolicy::Always;
    if trigger == GuestTrigger::Hypercall {
        out.notes.push("hypercall gadget models a pre-patch host (no such KVM gadget is known)".into());
    }
    let (reps, machine) = repeat(cfg, capture, |seed| {
        let (mut m, mut rng) = machine(cfg.machine_config(), seed)?;
        m.register_vm(GUEST)?;
        let lines = PAGE_SIZE / m.line_size();
        let span = length.div_ceil(m.line_size());
        let start = PhysicalAddress::from_frame(
            random_frame(&m, &mut rng),
            rng.gen_range(0..=lines - span) * m.line_size(),
        );
        let secret: Vec<u8> = (0..length).map(|_| rng.gen_range(1..=255)).collect();
        m.plant_secret(start, &secret)?;
        let got = foreshadow_l3_attack(&mut m, GUEST, start, length, trigger, attempts)?;
        let correct = got.bytes.iter().zip(&secret).filter(|(g, s)| **g == Some(**s)).count();
        Ok((correct, m))
    })?;
    let correct: usize = reps.iter().sum();
    let total = length as usize * reps.len();
    out.metric("bytes_recovered", correct as f64);
    out.metric("bytes_total", total as f64);
    if expected && deterministic(cfg) {
        out.check(correct == total, "the host secret was not fully recovered");
    } else if !expected {
        out.check(correct == 0, "secret bytes leaked although the attack is mitigated");
    }
    Ok(machine)
}

// ---- Meltdown from L3 ----

fn meltdown(cfg: &ExperimentConfig, capture: bool, out: &mut Outcome) -> Result<Option<MachineState>> {
    let m = &cfg.mitigations;
    let expected = syscall_gadget_active(m) && m.meltdown_us_vulnerable;
    let (reps, machine) = repeat(cfg, capture, |seed| {
        let (mut m, mut rng) = machine(cfg.machine_config(), seed)?;
        let p = PhysicalAddress::from_frame(random_frame(&m, &mut rng), rng.gen_range(0..PAGE_SIZE));
        let byte = rng.gen_range(1..=255u8);
        m.plant_secret(p, &[byte])?;
        let without = meltdown_l3_experiment(&mut m, ATTACKER, p, None)?.read == Some(byte);
        let driver = GadgetDriver::default_for(&m);
        let with = meltdown_l3_experiment(&mut m, ATTACKER, p, Some(&driver))?.read == Some(byte);
        Ok(((without, with), m))
    })?;
    let without = count(&reps.iter().map(|r| r.0).collect::<Vec<_>>());
    let with = count(&reps.iter().map(|r| r.1).collect::<Vec<_>>());
    out.metric("success_without_gadget", without);
    out.metric("success_with_gadget", with);
    out.check(without == 0.0, "Meltdown read an L3-only line without the gadget");
    if expected && deterministic(cfg) {
        out.check(with == reps.len() as f64, "the gadget did not make the secret readable");
    } else if !expected {
        out.check(with == 0.0, "the secret was read although the gadget is mitigated");
    }
    Ok(machine)
}

// ---- sweeps ----

/// Per-syscall F1 of "does this handler, run transiently with every
/// argument register set to a direct-map address, fetch that address".
/// Positive trials point the registers at the probed line, negative trials
/// at a line of another frame.
fn syscall_sweep(cfg: &ExperimentConfig, capture: bool, out: &mut Outcome) -> Result<Option<MachineState>> {
    let trials = cfg.param_or("trials", 20u32)?;
    let mc = cfg.machine_config();
    let table = MachineState::new(mc.clone(), 0)?.syscall_table().to_vec();
    let reps = cfg.repetitions as u64;
    let cells: Vec<(usize, u64)> = (0..table.len()).flat_map(|s| (0..reps).map(move |r| (s, r))).collect();
    let results = cfg.execution.map(&cells, |&(s, r)| -> Result<(usize, ConfusionCounts, Option<MachineState>)> {
        let seed = derive_seed(cfg.seed, s as u64 * reps + r);
        let (mut m, mut rng) = machine(mc.clone(), seed)?;
        let pos = random_line(&m, &mut rng);
        let neg = loop {
            let q = random_line(&m, &mut rng);
            if q.frame() != pos.frame() {
                break q;
            }
        };
        m.map_page(ATTACKER, PROBE_PAGE, PhysicalAddress::from_frame(pos.frame(), 0), true)?;
        let v = PROBE_PAGE.offset(pos.page_offset());
        let under_test = table[s].id;
        let follower = if table[s].name == "sched_yield" { "gettid" } else { "sched_yield" };
        let follower = m.syscall_by_name(follower).unwrap().id;
        let mut c = ConfusionCounts::default();
        for t in 0..trials {
            let positive = t % 2 == 0;
            let target = if positive { pos } else { neg };
            m.flush_virtual(ATTACKER, v)?;
            m.write_registers(&Register::fillable(), m.dpm_address(target)?.0)?;
            m.do_syscall(ATTACKER, under_test)?;
            m.do_syscall(ATTACKER, follower)?;
            c.record(m.probe(ATTACKER, v)?.is_hit(), positive);
        }
        Ok((s, c, (capture && s == 0 && r == 0).then_some(m)))
    });
    let mut per = vec![ConfusionCounts::default(); table.len()];
    let mut captured = None;
    for r in results {
        let (s, c, m) = r?;
        per[s].merge(&c);
        if m.is_some() {
            captured = m;
        }
    }
    let active = syscall_gadget_active(&cfg.mitigations);
    for (d, c) in table.iter().zip(&per) {
        let f1 = f1_score(c);
        out.metric(format!("f1:{}", d.name), f1);
        let fetches = active && !d.deref_registers.is_empty();
        if !fetches {
            out.check(c.tp == 0, format!("{} fetched although it cannot", d.name));
        } else if cfg.noise.is_deterministic() {
            out.check(f1 == 1.0, format!("{} has F1 {f1} in a noiseless run", d.name));
        }
    }
    out.metric("trials", per.iter().map(|c| c.total() as f64).sum::<f64>());
    Ok(captured)
}

/// One row of the BTB mistraining ranking.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MistrainRow {
    /// `None` means no syscall ran before the victim.
    pub prior: Option<String>,
    pub fills: u64,
}

/// For every candidate prior syscall (and for none), runs prior-then-victim
/// with every register holding a direct-map address and counts the victim
/// call's speculative fills. Sorted by fills, descending, then by name.
pub fn btb_mistrain_sweep(cfg: &ExperimentConfig) -> Result<Vec<MistrainRow>> {
    mistrain_rows(cfg, false).map(|(rows, _)| rows)
}

fn mistrain_rows(cfg: &ExperimentConfig, capture: bool) -> Result<(Vec<MistrainRow>, Option<MachineState>)> {
    let trials = cfg.param_or("trials", 10u32)?;
    let victim_name = cfg.param_or("victim", "sched_yield".to_string())?;
    let mc = cfg.machine_config();
    let table = MachineState::new(mc.clone(), 0)?.syscall_table().to_vec();
    let victim = table
        .iter()
        .find(|d| d.name == victim_name)
        .ok_or_else(|| Error::config(format!("no syscall named '{victim_name}'")))?
        .id;
    let mut candidates: Vec<Option<&str>> = vec![None];
    candidates.extend(table.iter().map(|d| Some(d.name.as_str())));
    let reps = cfg.repetitions as u64;
    let cells: Vec<(usize, u64)> = (0..candidates.len()).flat_map(|c| (0..reps).map(move |r| (c, r))).collect();
    let results = cfg.execution.map(&cells, |&(ci, r)| -> Result<(usize, u64, Option<MachineState>)> {
        let seed = derive_seed(cfg.seed, ci as u64 * reps + r);
        let (mut m, mut rng) = machine(mc.clone(), seed)?;
        let prior = candidates[ci].map(|n| m.syscall_by_name(n).unwrap().id);
        let mut fills = 0;
        for _ in 0..trials {
            let dpm = m.dpm_address(random_line(&m, &mut rng))?.0;
            m.write_registers(&Register::fillable(), dpm)?;
            if let Some(p) = prior {
                m.do_syscall(ATTACKER, p)?;
            }
            fills += m.do_syscall(ATTACKER, victim)?.speculative_fills.len() as u64;
        }
        Ok((ci, fills, (capture && ci == 0 && r == 0).then_some(m)))
    });
    let mut totals = vec![0u64; candidates.len()];
    let mut captured = None;
    for r in results {
        let (ci, f, m) = r?;
        totals[ci] += f;
        if m.is_some() {
            captured = m;
        }
    }
    let mut rows: Vec<MistrainRow> = candidates
        .iter()
        .zip(totals)
        .map(|(c, fills)| MistrainRow {
            prior: c.map(str::to_string),
            fills,
        })
        .collect();
    rows.sort_by(|a, b| b.fills.cmp(&a.fills).then_with(|| a.prior.cmp(&b.prior)));
    Ok((rows, captured))
}

fn btb_mistrain_sweep_scenario(
    cfg: &ExperimentConfig,
    capture: bool,
    out: &mut Outcome,
) -> Result<(Vec<MistrainRow>, Option<MachineState>)> {
    let (rows, machine) = mistrain_rows(cfg, capture)?;
    let mc = cfg.machine_config();
    let table = MachineState::new(mc, 0)?.syscall_table().to_vec();
    let victim = cfg.param_or("victim", "sched_yield".to_string())?;
    for (i, row) in rows.iter().enumerate() {
        let name = row.prior.as_deref().unwrap_or("none");
        out.metric(format!("rank{:02}:{name}", i + 1), row.fills as f64);
        let empty = row
            .prior
            .as_ref()
            .is_none_or(|p| table.iter().any(|d| &d.name == p && d.deref_registers.is_empty()));
        if empty || row.prior.as_deref() == Some(victim.as_str()) {
            out.check(row.fills == 0, format!("prior '{name}' cannot mistrain but caused fills"));
        }
    }
    Ok((rows, machine))
}

fn mistrain_scenario(cfg: &ExperimentConfig, capture: bool, out: &mut Outcome) -> Result<Option<MachineState>> {
    btb_mistrain_sweep_scenario(cfg, capture, out).map(|(_, m)| m)
}
