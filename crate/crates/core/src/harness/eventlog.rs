//! Event-log export and replay.
//!
//! ```text
//! # machine seed=..
//! # machine preset=kernel-4.19
//! # machine mitigations.kaiser=on
//! ...
//! cycle,event_kind,address,level,cause
//! 0,spawn,...
//! # digest=<sha256 of the final state>
//! ```

use crate::error::{Error, Result};
use crate::kernel::{Event, MachineConfig, MachineState, EVENT_LOG_HEADER};
use crate::microarch::CacheConfig;

const MACHINE_PREFIX: &str = "# machine ";
const DIGEST_PREFIX: &str = "# digest=";

fn machine_header(m: &MachineState) -> Vec<(String, String)> {
    let c = m.config();
    let mut kv = vec![
        ("seed".to_string(), m.seed().to_string()),
        ("preset".to_string(), c.preset.clone()),
        ("probe_threshold".to_string(), c.probe_threshold.to_string()),
        ("btb_capacity".to_string(), c.btb_capacity.to_string()),
        (
            "hierarchy".to_string(),
            if c.cache.levels.len() == 2 { "two-level" } else { "three-level" }.to_string(),
        ),
        ("speculation_probability".to_string(), c.noise.speculation_probability.to_string()),
        ("fp_rate".to_string(), c.noise.fp_rate.to_string()),
    ];
    for (k, v) in c.mitigations.entries() {
        kv.push((format!("mitigations.{k}"), v));
    }
    kv
}

/// Serializes the machine's configuration, its full event log and the
/// digest of its final state.
pub fn export_event_log(m: &MachineState) -> String {
    let mut out = String::new();
    for (k, v) in machine_header(m) {
        out.push_str(&format!("{MACHINE_PREFIX}{k}={v}\n"));
    }
    out.push_str(EVENT_LOG_HEADER);
    out.push('\n');
    for e in m.events() {
        out.push_str(&e.to_string());
        out.push('\n');
    }
    out.push_str(&format!("{DIGEST_PREFIX}{}\n", m.state_digest()));
    out
}

#[derive(Clone, Debug)]
pub struct ParsedLog {
    pub config: MachineConfig,
    pub seed: u64,
    pub events: Vec<Event>,
    pub digest: Option<String>,
}

pub fn parse_event_log(text: &str) -> Result<ParsedLog> {
    let mut config = MachineConfig::default();
    let mut seed = None;
    let mut events = Vec::new();
    let mut digest = None;
    let bad = |n: usize, msg: String| Error::EventLog(format!("line {}: {msg}", n + 1));
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line == EVENT_LOG_HEADER {
            continue;
        }
        if let Some(kv) = line.strip_prefix(MACHINE_PREFIX) {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad(n, "expected key=value".into()))?;
            let num = |what: &str| v.parse::<u64>().map_err(|_| bad(n, format!("bad {what} '{v}'")));
            let prob = || v.parse::<f64>().map_err(|_| bad(n, format!("bad probability '{v}'")));
            match k {
                "seed" => seed = Some(num("seed")?),
                "preset" => config.preset = v.to_string(),
                "probe_threshold" => config.probe_threshold = num("threshold")?,
                "btb_capacity" => config.btb_capacity = num("capacity")? as usize,
                "hierarchy" => {
                    config.cache = match v {
                        "two-level" => CacheConfig::two_level(),
                        "three-level" => CacheConfig::default(),
                        _ => return Err(bad(n, format!("bad hierarchy '{v}'"))),
                    }
                }
                "speculation_probability" => config.noise.speculation_probability = prob()?,
                "fp_rate" => config.noise.fp_rate = prob()?,
                _ => match k.strip_prefix("mitigations.") {
                    Some(m) => config.mitigations.set(m, v).map_err(|e| bad(n, e))?,
                    None => return Err(bad(n, format!("unknown machine key '{k}'"))),
                },
            }
            continue;
        }
        if let Some(d) = line.strip_prefix(DIGEST_PREFIX) {
            digest = Some(d.to_string());
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        events.push(line.parse::<Event>().map_err(|e| bad(n, e.to_string()))?);
    }
    let seed = seed.ok_or_else(|| Error::EventLog("missing machine seed".into()))?;
    Ok(ParsedLog {
        config,
        seed,
        events,
        digest,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReplayOutcome {
    pub events: usize,
    pub digest: String,
    pub expected: Option<String>,
}

impl ReplayOutcome {
    pub fn matches(&self) -> bool {
        self.expected.as_deref().is_none_or(|d| d == self.digest)
    }
}

/// Rebuilds the machine from the log and returns it with the comparison.
pub fn replay_event_log(text: &str) -> Result<(MachineState, ReplayOutcome)> {
    let parsed = parse_event_log(text)?;
    let fresh = MachineState::new(parsed.config, parsed.seed)?;
    let m = MachineState::replay(fresh, &parsed.events)?;
    let outcome = ReplayOutcome {
        events: parsed.events.len(),
        digest: m.state_digest(),
        expected: parsed.digest,
    };
    Ok((m, outcome))
}
