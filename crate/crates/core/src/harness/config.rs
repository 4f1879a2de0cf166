//! Experiment configuration files.
//!
//! ```text
//! # comment
//! scenario = covert          # keys before any section belong to [experiment]
//! mitigations.spectre_btb = off
//!
//! [experiment]
//! seed = 7
//! repetitions = 50
//!
//! [noise]
//! fp_rate = 0.000004
//!
//! [params]
//! message_bytes = 128
//! ```
//!
//! Sections: `experiment` (scenario, seed, repetitions, preset, execution),
//! `mitigations` (every mitigation toggle), `noise` (speculation_probability,
//! fp_rate), `machine` (probe_threshold, btb_capacity, hierarchy) and
//! `params` (scenario specific). A dotted key `section.key` works anywhere.
//! Later assignments win, which is how command-line overrides are applied.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kernel::{preset, MachineConfig, MitigationConfig, NoiseModel, DEFAULT_PRESET};
use crate::microarch::CacheConfig;
use crate::par::Execution;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scenario {
    H1,
    H2,
    H3,
    H4,
    H5,
    AddrTranslate,
    Covert,
    DerefTrap,
    ForeshadowL3,
    MeltdownL3,
    SyscallSweep,
    BtbMistrainSweep,
}

impl Scenario {
    pub const ALL: [Scenario; 12] = [
        Scenario::H1,
        Scenario::H2,
        Scenario::H3,
        Scenario::H4,
        Scenario::H5,
        Scenario::AddrTranslate,
        Scenario::Covert,
        Scenario::DerefTrap,
        Scenario::ForeshadowL3,
        Scenario::MeltdownL3,
        Scenario::SyscallSweep,
        Scenario::BtbMistrainSweep,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::H1 => "H1",
            Scenario::H2 => "H2",
            Scenario::H3 => "H3",
            Scenario::H4 => "H4",
            Scenario::H5 => "H5",
            Scenario::AddrTranslate => "addr_translate",
            Scenario::Covert => "covert",
            Scenario::DerefTrap => "deref_trap",
            Scenario::ForeshadowL3 => "foreshadow_l3",
            Scenario::MeltdownL3 => "meltdown_l3",
            Scenario::SyscallSweep => "syscall_sweep",
            Scenario::BtbMistrainSweep => "btb_mistrain_sweep",
        }
    }

    /// Sweeps are run by the `sweep` subcommand, everything else by `run`.
    pub fn is_sweep(self) -> bool {
        matches!(self, Scenario::SyscallSweep | Scenario::BtbMistrainSweep)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown scenario '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub mitigations: MitigationConfig,
    pub gadget_preset: String,
    pub repetitions: u32,
    pub seed: u64,
    pub noise: NoiseModel,
    pub execution: Execution,
    pub probe_threshold: Option<u64>,
    pub btb_capacity: Option<usize>,
    pub two_level: bool,
    pub params: BTreeMap<String, String>,
}

impl ExperimentConfig {
    pub fn new(scenario: Scenario) -> Self {
        ExperimentConfig {
            scenario,
            mitigations: MitigationConfig::default(),
            gadget_preset: DEFAULT_PRESET.to_string(),
            repetitions: 1,
            seed: 0,
            noise: NoiseModel::default(),
            execution: Execution::default(),
            probe_threshold: None,
            btb_capacity: None,
            two_level: false,
            params: BTreeMap::new(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut scenario = None;
        let mut pending = Vec::new();
        let mut section = String::from("experiment");
        for (n, raw) in text.lines().enumerate() {
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::config(format!("line {}: unterminated section header", n + 1)))?;
                section = name.trim().to_ascii_lowercase();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let key = if k.contains('.') { k.to_string() } else { format!("{section}.{k}") };
            if key == "experiment.scenario" {
                scenario = Some(v.parse::<Scenario>()?);
            } else {
                pending.push((key, v.to_string(), n + 1));
            }
        }
        let scenario = scenario.ok_or_else(|| Error::config("no scenario given"))?;
        let mut cfg = ExperimentConfig::new(scenario);
        for (k, v, line) in pending {
            cfg.set(&k, &v).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {line}: {msg}")),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one dotted `section.key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, name) = key
            .split_once('.')
            .unwrap_or(("experiment", key));
        let bad = |what: &str| Error::config(format!("invalid {what} '{value}' for {key}"));
        match (section, name) {
            ("experiment", "scenario") => self.scenario = value.parse()?,
            ("experiment", "seed") => self.seed = parse_u64(value).ok_or_else(|| bad("seed"))?,
            ("experiment", "repetitions") => self.repetitions = value.parse().map_err(|_| bad("count"))?,
            ("experiment", "preset") => self.gadget_preset = value.to_string(),
            ("experiment", "execution") => {
                self.execution = match value {
                    "parallel" => Execution::Parallel,
                    "sequential" => Execution::Sequential,
                    _ => return Err(bad("execution mode")),
                }
            }
            ("mitigations", m) => self.mitigations.set(m, value).map_err(Error::Config)?,
            ("noise", "speculation_probability") => {
                self.noise.speculation_probability = value.parse().map_err(|_| bad("probability"))?
            }
            ("noise", "fp_rate") => self.noise.fp_rate = value.parse().map_err(|_| bad("probability"))?,
            ("machine", "probe_threshold") => {
                self.probe_threshold = Some(value.parse().map_err(|_| bad("threshold"))?)
            }
            ("machine", "btb_capacity") => self.btb_capacity = Some(value.parse().map_err(|_| bad("capacity"))?),
            ("machine", "hierarchy") => {
                self.two_level = match value {
                    "three-level" => false,
                    "two-level" => true,
                    _ => return Err(bad("hierarchy")),
                }
            }
            ("params", p) if !p.is_empty() => {
                self.params.insert(p.to_string(), value.to_string());
            }
            _ => return Err(Error::config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::config("repetitions must be at least 1"));
        }
        if preset(&self.gadget_preset).is_none() {
            return Err(Error::config(format!("unknown gadget preset '{}'", self.gadget_preset)));
        }
        self.machine_config().validate()
    }

    pub fn machine_config(&self) -> MachineConfig {
        let mut m = MachineConfig {
            mitigations: self.mitigations,
            preset: self.gadget_preset.clone(),
            noise: self.noise,
            ..MachineConfig::default()
        };
        if self.two_level {
            m.cache = CacheConfig::two_level();
        }
        if let Some(t) = self.probe_threshold {
            m.probe_threshold = t;
        }
        if let Some(c) = self.btb_capacity {
            m.btb_capacity = c;
        }
        m
    }

    pub fn param<T: FromStr>(&self, name: &str) -> Result<Option<T>> {
        match self.params.get(name) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::config(format!("invalid value '{v}' for params.{name}"))),
        }
    }

    pub fn param_or<T: FromStr>(&self, name: &str, default: T) -> Result<T> {
        Ok(self.param(name)?.unwrap_or(default))
    }

    /// Canonical text form; parses back to an equal config.
    pub fn render(&self) -> String {
        let mut out = String::from("[experiment]\n");
        out.push_str(&format!("scenario = {}\n", self.scenario));
        out.push_str(&format!("seed = {}\n", self.seed));
        out.push_str(&format!("repetitions = {}\n", self.repetitions));
        out.push_str(&format!("preset = {}\n", self.gadget_preset));
        let exec = match self.execution {
            Execution::Parallel => "parallel",
            Execution::Sequential => "sequential",
        };
        out.push_str(&format!("execution = {exec}\n"));
        out.push_str("[mitigations]\n");
        for (k, v) in self.mitigations.entries() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out.push_str("[noise]\n");
        out.push_str(&format!("speculation_probability = {}\n", self.noise.speculation_probability));
        out.push_str(&format!("fp_rate = {}\n", self.noise.fp_rate));
        out.push_str("[machine]\n");
        out.push_str(&format!(
            "hierarchy = {}\n",
            if self.two_level { "two-level" } else { "three-level" }
        ));
        if let Some(t) = self.probe_threshold {
            out.push_str(&format!("probe_threshold = {t}\n"));
        }
        if let Some(c) = self.btb_capacity {
            out.push_str(&format!("btb_capacity = {c}\n"));
        }
        if !self.params.is_empty() {
            out.push_str("[params]\n");
            for (k, v) in &self.params {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }
}

fn strip_comment(line: &str) -> &str {
    let cut = line.find(['#', ';']).unwrap_or(line.len());
    &line[..cut]
}

fn parse_u64(s: &str) -> Option<u64> {
    match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(&hex.replace('_', ""), 16).ok(),
        None => s.replace('_', "").parse().ok(),
    }
}
