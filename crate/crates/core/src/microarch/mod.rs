//! Cache hierarchy, branch target buffer and access timing.
//!
//! Timing is deterministic: an access costs exactly the configured latency
//! of the level that served it. Noise is layered on top by the machine.

mod btb;
mod cache;

pub use btb::{BranchTargetBuffer, DEFAULT_BTB_CAPACITY};
pub use cache::{AccessOutcome, CacheConfig, CacheState, HitLevel, LevelConfig, LevelName};

use crate::address::{AddressSpace, Mode, PhysicalAddress, VirtualAddress};
use crate::error::{Error, Result};

pub const DEFAULT_PROBE_THRESHOLD: u64 = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Probe {
    Hit,
    Miss,
}

impl Probe {
    pub fn is_hit(self) -> bool {
        self == Probe::Hit
    }
}

/// The threshold must separate every cache hit from a memory access.
pub fn validate_threshold(config: &CacheConfig, threshold: u64) -> Result<()> {
    if threshold <= config.last_level_latency() || threshold >= config.miss_latency {
        return Err(Error::config(format!(
            "probe threshold {threshold} must lie strictly between {} and {}",
            config.last_level_latency(),
            config.miss_latency
        )));
    }
    Ok(())
}

/// Reload `p`, classify by latency, then flush it for the next round.
pub fn flush_reload_probe(state: &mut CacheState, p: PhysicalAddress, threshold: u64) -> Result<Probe> {
    validate_threshold(state.config(), threshold)?;
    let outcome = state.access(p)?;
    state.flush(p)?;
    Ok(if outcome.latency < threshold { Probe::Hit } else { Probe::Miss })
}

/// A prefetch hint: fetches the line when `v` translates under `mode`,
/// otherwise does nothing. Hints never fault.
pub fn software_prefetch(
    state: &mut CacheState,
    v: VirtualAddress,
    aspace: &AddressSpace,
    mode: Mode,
) -> Option<AccessOutcome> {
    let p = aspace.translate(v, mode, false).ok()?;
    state.access(p).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::address::PAGE_SIZE;

    fn cache() -> CacheState {
        CacheState::new(CacheConfig::default()).unwrap()
    }

    #[test]
    fn probe_hit_and_miss() {
        let mut c = cache();
        let p = PhysicalAddress(0x3000);
        c.access(p).unwrap();
        assert_eq!(flush_reload_probe(&mut c, p, 100).unwrap(), Probe::Hit);
        assert_eq!(flush_reload_probe(&mut c, p, 100).unwrap(), Probe::Miss);
    }

    #[test]
    fn probe_l3_only_line() {
        let mut c = cache();
        let p = PhysicalAddress(0x7000);
        c.remote_access(p).unwrap();
        // L3 latency 40 < threshold 100 < memory 300.
        let l3 = c.config().latency_of(HitLevel::L3);
        let threshold = l3 + 1;
        assert!(threshold < c.config().miss_latency);
        assert_eq!(flush_reload_probe(&mut c, p, threshold).unwrap(), Probe::Hit);
    }

    #[test]
    fn probe_rejects_bad_threshold() {
        let mut c = cache();
        assert!(flush_reload_probe(&mut c, PhysicalAddress(0), 40).is_err());
        assert!(flush_reload_probe(&mut c, PhysicalAddress(0), 300).is_err());
        assert!(flush_reload_probe(&mut c, PhysicalAddress(0), 41).is_ok());
    }

    #[test]
    fn prefetch_user_page_caches_line() {
        let mut c = cache();
        let mut a = AddressSpace::with_defaults(false);
        let v = VirtualAddress(0x10_0000);
        a.map_page(v, PhysicalAddress(2 * PAGE_SIZE), true).unwrap();
        assert!(software_prefetch(&mut c, v, &a, Mode::User).is_some());
        assert!(c.contains(LevelName::L1, PhysicalAddress(2 * PAGE_SIZE)));
    }

    #[test]
    fn prefetch_of_kernel_or_unmapped_is_noop() {
        for kaiser in [false, true] {
            let mut c = cache();
            let a = AddressSpace::with_defaults(kaiser);
            let before = c.clone();
            let dpm = a.dpm_address(PhysicalAddress(0x5000)).unwrap();
            assert!(software_prefetch(&mut c, dpm, &a, Mode::User).is_none());
            assert!(software_prefetch(&mut c, VirtualAddress(0x9000), &a, Mode::User).is_none());
            assert_eq!(c, before);
        }
    }
}
