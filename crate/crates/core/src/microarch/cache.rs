//! Physically indexed, physically tagged set-associative hierarchy with true
//! LRU replacement.

use std::fmt;

use crate::address::PhysicalAddress;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LevelName {
    L1,
    L2,
    L3,
}

impl LevelName {
    pub fn as_str(self) -> &'static str {
        match self {
            LevelName::L1 => "L1",
            LevelName::L2 => "L2",
            LevelName::L3 => "L3",
        }
    }
}

/// Where an access was served from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum HitLevel {
    L1,
    L2,
    L3,
    Memory,
}

impl HitLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            HitLevel::L1 => "L1",
            HitLevel::L2 => "L2",
            HitLevel::L3 => "L3",
            HitLevel::Memory => "MEM",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "L1" => HitLevel::L1,
            "L2" => HitLevel::L2,
            "L3" => HitLevel::L3,
            "MEM" => HitLevel::Memory,
            _ => return None,
        })
    }
}

impl From<LevelName> for HitLevel {
    fn from(l: LevelName) -> Self {
        match l {
            LevelName::L1 => HitLevel::L1,
            LevelName::L2 => HitLevel::L2,
            LevelName::L3 => HitLevel::L3,
        }
    }
}

impl fmt::Display for HitLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LevelConfig {
    pub name: LevelName,
    pub sets: usize,
    pub ways: usize,
    pub hit_latency: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CacheConfig {
    pub levels: Vec<LevelConfig>,
    pub line_size: u64,
    pub miss_latency: u64,
    /// L3 inclusive of L1/L2: an L3 eviction back-invalidates inner levels.
    pub inclusive: bool,
    pub memory_size: u64,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            levels: vec![
                LevelConfig { name: LevelName::L1, sets: 64, ways: 8, hit_latency: 4 },
                LevelConfig { name: LevelName::L2, sets: 512, ways: 8, hit_latency: 12 },
                LevelConfig { name: LevelName::L3, sets: 1024, ways: 16, hit_latency: 40 },
            ],
            line_size: 64,
            miss_latency: 300,
            inclusive: true,
            memory_size: crate::address::DEFAULT_MEMORY_SIZE,
        }
    }
}

impl CacheConfig {
    /// Two-level variant (L1 + L3) of the default hierarchy.
    pub fn two_level() -> Self {
        let mut c = Self::default();
        c.levels.retain(|l| l.name != LevelName::L2);
        c
    }

    pub fn validate(&self) -> Result<()> {
        if !self.line_size.is_power_of_two() {
            return Err(Error::config(format!("line size {} is not a power of two", self.line_size)));
        }
        let names: Vec<LevelName> = self.levels.iter().map(|l| l.name).collect();
        if names != [LevelName::L1, LevelName::L3] && names != [LevelName::L1, LevelName::L2, LevelName::L3] {
            return Err(Error::config(format!("cache levels must be L1,L3 or L1,L2,L3, got {names:?}")));
        }
        for l in &self.levels {
            if l.sets == 0 || l.ways == 0 {
                return Err(Error::config(format!("{} needs positive sets and ways", l.name.as_str())));
            }
        }
        for pair in self.levels.windows(2) {
            if pair[1].hit_latency <= pair[0].hit_latency {
                return Err(Error::config("hit latencies must strictly increase from L1 to L3"));
            }
        }
        if self.miss_latency <= self.last_level_latency() {
            return Err(Error::config("memory latency must exceed the L3 hit latency"));
        }
        if self.memory_size == 0 || !self.memory_size.is_multiple_of(self.line_size) {
            return Err(Error::config("memory size must be a positive multiple of the line size"));
        }
        Ok(())
    }

    pub fn last_level_latency(&self) -> u64 {
        self.levels.last().map_or(0, |l| l.hit_latency)
    }

    pub fn latency_of(&self, level: HitLevel) -> u64 {
        match level {
            HitLevel::Memory => self.miss_latency,
            _ => self
                .levels
                .iter()
                .find(|l| HitLevel::from(l.name) == level)
                .map_or(self.miss_latency, |l| l.hit_latency),
        }
    }

    pub fn lines_per_page(&self) -> u64 {
        crate::address::PAGE_SIZE / self.line_size
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AccessOutcome {
    pub latency: u64,
    pub level: HitLevel,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct Level {
    name: LevelName,
    ways: usize,
    /// Line numbers per set, most recently used first.
    sets: Vec<Vec<u64>>,
}

impl Level {
    fn new(cfg: &LevelConfig) -> Self {
        Level {
            name: cfg.name,
            ways: cfg.ways,
            sets: vec![Vec::with_capacity(cfg.ways); cfg.sets],
        }
    }

    fn set_of(&self, line: u64) -> usize {
        (line % self.sets.len() as u64) as usize
    }

    fn contains(&self, line: u64) -> bool {
        self.sets[self.set_of(line)].contains(&line)
    }

    /// Moves `line` to MRU, inserting it if absent. Returns the evicted line.
    fn touch(&mut self, line: u64) -> Option<u64> {
        let ways = self.ways;
        let n = self.sets.len() as u64;
        let set = &mut self.sets[(line % n) as usize];
        if let Some(pos) = set.iter().position(|&l| l == line) {
            set.remove(pos);
            set.insert(0, line);
            return None;
        }
        let victim = if set.len() == ways { set.pop() } else { None };
        set.insert(0, line);
        victim
    }

    fn remove(&mut self, line: u64) -> bool {
        let idx = self.set_of(line);
        let set = &mut self.sets[idx];
        match set.iter().position(|&l| l == line) {
            Some(pos) => {
                set.remove(pos);
                true
            }
            None => false,
        }
    }

    fn clear(&mut self) {
        self.sets.iter_mut().for_each(Vec::clear);
    }

    fn lines(&self) -> impl Iterator<Item = u64> + '_ {
        self.sets.iter().flatten().copied()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CacheState {
    config: CacheConfig,
    levels: Vec<Level>,
}

impl CacheState {
    pub fn new(config: CacheConfig) -> Result<Self> {
        config.validate()?;
        let levels = config.levels.iter().map(Level::new).collect();
        Ok(CacheState { config, levels })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn line_of(&self, p: PhysicalAddress) -> u64 {
        p.0 / self.config.line_size
    }

    fn check(&self, p: PhysicalAddress) -> Result<u64> {
        if p.0 >= self.config.memory_size {
            return Err(Error::AddressRange {
                addr: p,
                limit: self.config.memory_size,
            });
        }
        Ok(self.line_of(p))
    }

    /// First level holding the line of `p`, without touching replacement state.
    pub fn resident_level(&self, p: PhysicalAddress) -> HitLevel {
        let line = self.line_of(p);
        self.levels
            .iter()
            .find(|l| l.contains(line))
            .map_or(HitLevel::Memory, |l| l.name.into())
    }

    pub fn contains(&self, level: LevelName, p: PhysicalAddress) -> bool {
        let line = self.line_of(p);
        self.levels.iter().any(|l| l.name == level && l.contains(line))
    }

    /// Inserts a line into one level and resolves the eviction it causes.
    fn install(&mut self, idx: usize, line: u64) {
        if let Some(victim) = self.levels[idx].touch(line) {
            let last = self.levels.len() - 1;
            if idx == last && self.config.inclusive {
                for inner in &mut self.levels[..last] {
                    inner.remove(victim);
                }
            }
        }
    }

    pub fn access(&mut self, p: PhysicalAddress) -> Result<AccessOutcome> {
        let line = self.check(p)?;
        let level = self.resident_level(p);
        // Outermost first, so an L3 back-invalidation cannot undo the L1 fill.
        for idx in (0..self.levels.len()).rev() {
            self.install(idx, line);
        }
        Ok(AccessOutcome {
            latency: self.config.latency_of(level),
            level,
        })
    }

    /// Access by another physical core: only the shared last level is filled.
    pub fn remote_access(&mut self, p: PhysicalAddress) -> Result<()> {
        let line = self.check(p)?;
        let last = self.levels.len() - 1;
        self.install(last, line);
        Ok(())
    }

    /// clflush: removes the line from every level.
    pub fn flush(&mut self, p: PhysicalAddress) -> Result<()> {
        let line = self.check(p)?;
        for l in &mut self.levels {
            l.remove(line);
        }
        Ok(())
    }

    pub fn flush_level(&mut self, level: LevelName) {
        for l in self.levels.iter_mut().filter(|l| l.name == level) {
            l.clear();
        }
    }

    pub fn evict_from(&mut self, level: LevelName, p: PhysicalAddress) -> bool {
        let line = self.line_of(p);
        self.levels
            .iter_mut()
            .filter(|l| l.name == level)
            .map(|l| l.remove(line))
            .fold(false, |a, b| a | b)
    }

    /// Sorted line numbers resident in `level`.
    pub fn lines_in(&self, level: LevelName) -> Vec<u64> {
        let mut lines: Vec<u64> = self
            .levels
            .iter()
            .filter(|l| l.name == level)
            .flat_map(|l| l.lines())
            .collect();
        lines.sort_unstable();
        lines
    }

    pub fn is_empty(&self, level: LevelName) -> bool {
        self.levels
            .iter()
            .filter(|l| l.name == level)
            .all(|l| l.lines().next().is_none())
    }

    /// L1 and L2 contents are subsets of L3 (only meaningful when inclusive).
    pub fn inclusion_holds(&self) -> bool {
        let last = self.levels.last().expect("validated hierarchy");
        self.levels[..self.levels.len() - 1]
            .iter()
            .all(|inner| inner.lines().all(|line| last.contains(line)))
    }

    /// Canonical rendering including LRU order, for digests.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        for l in &self.levels {
            out.push_str(l.name.as_str());
            out.push(':');
            for (i, set) in l.sets.iter().enumerate().filter(|(_, s)| !s.is_empty()) {
                out.push_str(&format!("{i}={set:?};"));
            }
            out.push('|');
        }
        out
    }
}
