//! Virtual-to-physical translation and the kernel direct-physical map.
//!
//! The page table is a flat map from virtual page to frame. It is stored as
//! extents so that the millions of aliasing mappings Dereference Trap needs
//! cost two entries instead of millions. An extent either maps its pages
//! linearly onto consecutive frames or maps every page onto a single frame.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

pub const PAGE_SIZE: u64 = 4096;
pub const PAGE_SHIFT: u32 = 12;

/// Default size of simulated physical memory: 4,096 frames.
pub const DEFAULT_MEMORY_SIZE: u64 = 1 << 24;

/// Linux-like base of the direct-physical map.
pub const DEFAULT_DPM_BASE: u64 = 0xFFFF_8880_0000_0000;

/// First address above the user half.
pub const USER_TOP: u64 = 1 << 47;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct PhysicalAddress(pub u64);

impl PhysicalAddress {
    pub fn frame(self) -> u64 {
        self.0 >> PAGE_SHIFT
    }

    pub fn page_offset(self) -> u64 {
        self.0 & (PAGE_SIZE - 1)
    }

    pub fn from_frame(frame: u64, offset: u64) -> Self {
        PhysicalAddress((frame << PAGE_SHIFT) + offset)
    }
}

impl fmt::Display for PhysicalAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P:{:#x}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct VirtualAddress(pub u64);

impl VirtualAddress {
    /// Bits 48..64 must replicate bit 47.
    pub fn is_canonical(self) -> bool {
        let top = self.0 >> 47;
        top == 0 || top == 0x1_FFFF
    }

    pub fn is_kernel_half(self) -> bool {
        self.0 >> 63 == 1
    }

    pub fn page(self) -> u64 {
        self.0 >> PAGE_SHIFT
    }

    pub fn page_offset(self) -> u64 {
        self.0 & (PAGE_SIZE - 1)
    }

    pub fn is_page_aligned(self) -> bool {
        self.page_offset() == 0
    }

    pub fn offset(self, bytes: u64) -> Self {
        VirtualAddress(self.0.wrapping_add(bytes))
    }
}

impl fmt::Display for VirtualAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "V:{:#x}", self.0)
    }
}

/// Privilege of the access being translated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    User,
    Kernel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FaultKind {
    NotPresent,
    UserAccessToKernel,
    SmapViolation,
    NonCanonical,
}

impl FaultKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FaultKind::NotPresent => "not_present",
            FaultKind::UserAccessToKernel => "user_access_to_kernel",
            FaultKind::SmapViolation => "smap_violation",
            FaultKind::NonCanonical => "non_canonical",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "not_present" => FaultKind::NotPresent,
            "user_access_to_kernel" => FaultKind::UserAccessToKernel,
            "smap_violation" => FaultKind::SmapViolation,
            "non_canonical" => FaultKind::NonCanonical,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fault {
    pub kind: FaultKind,
    pub address: VirtualAddress,
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at {}", self.kind.as_str(), self.address)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum FrameLayout {
    /// Page `i` of the extent maps to `frame + i`.
    Linear,
    /// Every page of the extent maps to `frame`.
    Aliased,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
struct Extent {
    pages: u64,
    frame: u64,
    layout: FrameLayout,
    user: bool,
    present: bool,
}

impl Extent {
    fn frame_at(&self, index: u64) -> u64 {
        match self.layout {
            FrameLayout::Linear => self.frame + index,
            FrameLayout::Aliased => self.frame,
        }
    }

    fn tail(&self, skip: u64) -> Extent {
        Extent {
            pages: self.pages - skip,
            frame: self.frame_at(skip),
            ..*self
        }
    }
}

/// Page-table entry as seen by a lookup.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PageEntry {
    pub frame: u64,
    pub user_accessible: bool,
    pub present: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AddressSpace {
    extents: BTreeMap<u64, Extent>,
    dpm_base: VirtualAddress,
    memory_size: u64,
    kaiser_enabled: bool,
}

impl AddressSpace {
    pub fn new(memory_size: u64, dpm_base: VirtualAddress, kaiser_enabled: bool) -> Self {
        AddressSpace {
            extents: BTreeMap::new(),
            dpm_base,
            memory_size,
            kaiser_enabled,
        }
    }

    pub fn with_defaults(kaiser_enabled: bool) -> Self {
        Self::new(DEFAULT_MEMORY_SIZE, VirtualAddress(DEFAULT_DPM_BASE), kaiser_enabled)
    }

    pub fn dpm_base(&self) -> VirtualAddress {
        self.dpm_base
    }

    pub fn memory_size(&self) -> u64 {
        self.memory_size
    }

    pub fn kaiser_enabled(&self) -> bool {
        self.kaiser_enabled
    }

    pub fn frames(&self) -> u64 {
        self.memory_size / PAGE_SIZE
    }

    fn check_phys(&self, p: PhysicalAddress) -> Result<()> {
        if p.0 >= self.memory_size {
            return Err(Error::AddressRange {
                addr: p,
                limit: self.memory_size,
            });
        }
        Ok(())
    }

    fn in_dpm(&self, v: VirtualAddress) -> bool {
        v.0 >= self.dpm_base.0 && v.0 - self.dpm_base.0 < self.memory_size
    }

    /// Kernel alias of a physical address.
    pub fn dpm_address(&self, p: PhysicalAddress) -> Result<VirtualAddress> {
        self.check_phys(p)?;
        Ok(VirtualAddress(self.dpm_base.0 + p.0))
    }

    pub fn lookup(&self, v: VirtualAddress) -> Option<PageEntry> {
        let vpn = v.page();
        let (&start, ext) = self.extents.range(..=vpn).next_back()?;
        if vpn - start >= ext.pages {
            return None;
        }
        Some(PageEntry {
            frame: ext.frame_at(vpn - start),
            user_accessible: ext.user,
            present: ext.present,
        })
    }

    pub fn translate(&self, v: VirtualAddress, mode: Mode, smap: bool) -> Result<PhysicalAddress, Fault> {
        let fault = |kind| Fault { kind, address: v };
        if !v.is_canonical() {
            return Err(fault(FaultKind::NonCanonical));
        }
        if v.is_kernel_half() {
            if self.in_dpm(v) {
                return match mode {
                    // KAISER removes the direct-physical map from the user view only.
                    Mode::User if self.kaiser_enabled => Err(fault(FaultKind::NotPresent)),
                    Mode::User => Err(fault(FaultKind::UserAccessToKernel)),
                    Mode::Kernel => Ok(PhysicalAddress(v.0 - self.dpm_base.0)),
                };
            }
            if mode == Mode::User {
                return Err(fault(FaultKind::UserAccessToKernel));
            }
        }
        let entry = self.lookup(v).ok_or(fault(FaultKind::NotPresent))?;
        if !entry.present {
            return Err(fault(FaultKind::NotPresent));
        }
        match mode {
            Mode::User if !entry.user_accessible => return Err(fault(FaultKind::UserAccessToKernel)),
            Mode::Kernel if entry.user_accessible && smap => return Err(fault(FaultKind::SmapViolation)),
            _ => {}
        }
        Ok(PhysicalAddress::from_frame(entry.frame, v.page_offset()))
    }

    fn check_range(&self, start: VirtualAddress, count: u64) -> Result<()> {
        if !start.is_canonical() {
            return Err(Error::NonCanonical(start));
        }
        if !start.is_page_aligned() {
            return Err(Error::Misaligned(start));
        }
        if start.is_kernel_half() {
            return Ok(());
        }
        let end = count
            .checked_mul(PAGE_SIZE)
            .and_then(|len| start.0.checked_add(len));
        match end {
            Some(end) if end <= USER_TOP => Ok(()),
            _ => Err(Error::RangeOverflow { start, count }),
        }
    }

    /// Removes every mapping of pages in `[lo, hi)`, splitting extents that
    /// straddle the boundaries.
    fn carve(&mut self, lo: u64, hi: u64) {
        let overlapping: Vec<u64> = self
            .extents
            .range(..hi)
            .rev()
            .take_while(|(&start, ext)| start + ext.pages > lo)
            .map(|(&start, _)| start)
            .collect();
        for start in overlapping {
            let ext = self.extents.remove(&start).expect("extent listed above");
            let end = start + ext.pages;
            if start < lo {
                self.extents.insert(
                    start,
                    Extent {
                        pages: lo - start,
                        ..ext
                    },
                );
            }
            if end > hi {
                self.extents.insert(hi, ext.tail(hi - start));
            }
        }
    }

    pub fn map_page(&mut self, v: VirtualAddress, p: PhysicalAddress, user_accessible: bool) -> Result<()> {
        self.check_range(v, 1)?;
        self.check_phys(p)?;
        let vpn = v.page();
        self.carve(vpn, vpn + 1);
        self.extents.insert(
            vpn,
            Extent {
                pages: 1,
                frame: p.frame(),
                layout: FrameLayout::Linear,
                user: user_accessible,
                present: true,
            },
        );
        Ok(())
    }

    /// Maps `count` consecutive pages onto consecutive frames starting at `p`.
    pub fn map_linear(&mut self, start: VirtualAddress, count: u64, p: PhysicalAddress, user_accessible: bool) -> Result<()> {
        self.check_range(start, count)?;
        if count == 0 {
            return Ok(());
        }
        self.check_phys(PhysicalAddress::from_frame(p.frame() + count - 1, 0))?;
        let vpn = start.page();
        self.carve(vpn, vpn + count);
        self.extents.insert(
            vpn,
            Extent {
                pages: count,
                frame: p.frame(),
                layout: FrameLayout::Linear,
                user: user_accessible,
                present: true,
            },
        );
        Ok(())
    }

    /// Maps the first `count / 2` pages at `start` onto the frame of `p1` and
    /// the next `count / 2` onto the frame of `p2`, all user accessible.
    pub fn map_shared_range(
        &mut self,
        start: VirtualAddress,
        count: u64,
        p1: PhysicalAddress,
        p2: PhysicalAddress,
    ) -> Result<()> {
        if count == 0 || !count.is_multiple_of(2) {
            return Err(Error::config(format!("shared range needs an even, non-zero page count, got {count}")));
        }
        if start.is_kernel_half() {
            return Err(Error::RangeOverflow { start, count });
        }
        self.check_range(start, count)?;
        self.check_phys(p1)?;
        self.check_phys(p2)?;
        let vpn = start.page();
        let half = count / 2;
        self.carve(vpn, vpn + count);
        for (first, p) in [(vpn, p1), (vpn + half, p2)] {
            self.extents.insert(
                first,
                Extent {
                    pages: half,
                    frame: p.frame(),
                    layout: FrameLayout::Aliased,
                    user: true,
                    present: true,
                },
            );
        }
        Ok(())
    }

    pub fn unmap_range(&mut self, start: VirtualAddress, count: u64) -> Result<()> {
        self.check_range(start, count)?;
        let vpn = start.page();
        self.carve(vpn, vpn + count);
        Ok(())
    }

    /// Clears the present bit of the page containing `v`.
    pub fn mark_not_present(&mut self, v: VirtualAddress) -> Result<()> {
        let entry = self.lookup(v).ok_or(Error::Unmapped(v))?;
        let vpn = v.page();
        self.carve(vpn, vpn + 1);
        self.extents.insert(
            vpn,
            Extent {
                pages: 1,
                frame: entry.frame,
                layout: FrameLayout::Linear,
                user: entry.user_accessible,
                present: false,
            },
        );
        Ok(())
    }

    /// Number of extents backing the page table.
    pub fn extent_count(&self) -> usize {
        self.extents.len()
    }

    /// Canonical text rendering used for state digests.
    pub fn canonical_text(&self) -> String {
        let mut out = format!(
            "dpm={:#x};mem={:#x};kaiser={};",
            self.dpm_base.0, self.memory_size, self.kaiser_enabled
        );
        for (start, ext) in &self.extents {
            out.push_str(&format!(
                "{:#x}+{}->{:#x}/{:?}/{}/{};",
                start, ext.pages, ext.frame, ext.layout, ext.user, ext.present
            ));
        }
        out
    }
}
