//! Simulated x86-64 address spaces.
//!
//! An [`AddressSpace`] is a sparse set of non-overlapping [`Region`]s plus the
//! [`GroundTruth`] that generated them. Layouts are built from a
//! [`ScenarioSpec`] and are a pure function of its kind and seed.

mod catalog;
mod layout;

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::addr::{self, Level, PAGE_1G, PAGE_2M, PAGE_4K, PML4_SPAN};
use crate::error::{Error, Result};

pub use layout::{AMD_4K_OFFSETS, KVAS_PAGES, RANDOM_CUSTOM_WINDOW, TRAMPOLINE_PAGES, WINDOWS_KERNEL_SLOTS};
pub use catalog::{default_libraries, default_modules, names_with_pages, LibraryEntry, ModuleEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum SizeClass {
    #[default]
    Page4K,
    Page2M,
    Page1G,
}

impl SizeClass {
    pub fn bytes(self) -> u64 {
        match self {
            SizeClass::Page4K => PAGE_4K,
            SizeClass::Page2M => PAGE_2M,
            SizeClass::Page1G => PAGE_1G,
        }
    }

    /// Page-table level holding the leaf entry for this page size.
    pub fn terminal_level(self) -> Level {
        match self {
            SizeClass::Page4K => Level::Pt,
            SizeClass::Page2M => Level::Pd,
            SizeClass::Page1G => Level::Pdpt,
        }
    }
}

/// Per-page attributes. When `present` is false the remaining bits carry no
/// meaning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageAttributes {
    pub present: bool,
    pub user_accessible: bool,
    /// Cleared for `PROT_NONE` mappings, which keep a page-table entry but
    /// deny every access.
    #[serde(default = "yes")]
    pub readable: bool,
    pub writable: bool,
    pub executable: bool,
    pub dirty: bool,
    pub size_class: SizeClass,
}

fn yes() -> bool {
    true
}

impl PageAttributes {
    pub fn kernel_text(size_class: SizeClass) -> Self {
        PageAttributes {
            present: true,
            user_accessible: false,
            readable: true,
            writable: false,
            executable: true,
            dirty: true,
            size_class,
        }
    }

    pub fn kernel_data(size_class: SizeClass) -> Self {
        PageAttributes {
            writable: true,
            executable: false,
            ..Self::kernel_text(size_class)
        }
    }

    pub fn user(perm: Perm) -> Self {
        PageAttributes {
            present: true,
            user_accessible: true,
            readable: perm != Perm::None,
            writable: perm == Perm::ReadWrite,
            executable: perm == Perm::ReadExec,
            dirty: perm == Perm::ReadWrite,
            size_class: SizeClass::Page4K,
        }
    }

    /// Present and readable: the translation can be cached.
    pub fn is_accessible_mapping(&self) -> bool {
        self.present && self.readable
    }

    pub fn perm(&self) -> Perm {
        if !self.present || !self.readable {
            Perm::None
        } else if self.writable {
            Perm::ReadWrite
        } else if self.executable {
            Perm::ReadExec
        } else {
            Perm::ReadOnly
        }
    }
}

/// User-visible protection of a page (`mmap` style).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Perm {
    None,
    ReadOnly,
    ReadExec,
    ReadWrite,
}

impl Perm {
    pub fn as_str(self) -> &'static str {
        match self {
            Perm::None => "---",
            Perm::ReadOnly => "r--",
            Perm::ReadExec => "r-x",
            Perm::ReadWrite => "rw-",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub base: u64,
    pub length: u64,
    pub attrs: PageAttributes,
    #[serde(default)]
    pub label: String,
}

impl Region {
    pub fn new(base: u64, length: u64, attrs: PageAttributes, label: impl Into<String>) -> Self {
        Region {
            base,
            length,
            attrs,
            label: label.into(),
        }
    }

    pub fn end(&self) -> u64 {
        self.base + self.length
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.base && addr < self.end()
    }

    fn validate(&self) -> Result<()> {
        let page = self.attrs.size_class.bytes();
        if self.length == 0 || !self.base.is_multiple_of(page) || !self.length.is_multiple_of(page) {
            return Err(Error::Config(format!(
                "region {:#x}+{:#x} ({}) is not aligned to its page size {:#x}",
                self.base, self.length, self.label, page
            )));
        }
        if !addr::is_canonical(self.base) || !addr::is_canonical(self.end() - 1) {
            return Err(Error::Config(format!(
                "region {:#x}+{:#x} is not canonical",
                self.base, self.length
            )));
        }
        Ok(())
    }
}

/// Sorted, non-overlapping set of regions with range queries.
#[derive(Debug, Clone, Default)]
pub struct PageMap {
    regions: BTreeMap<u64, Region>,
}

impl PageMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, region: Region) -> Result<()> {
        region.validate()?;
        if self.overlaps(region.base, region.end()) {
            return Err(Error::Config(format!(
                "region {:#x}+{:#x} ({}) overlaps an existing region",
                region.base, region.length, region.label
            )));
        }
        self.regions.insert(region.base, region);
        Ok(())
    }

    pub fn region_at(&self, addr: u64) -> Option<&Region> {
        self.regions
            .range(..=addr)
            .next_back()
            .map(|(_, r)| r)
            .filter(|r| r.contains(addr))
    }

    /// True if any region intersects `[lo, hi)`.
    pub fn overlaps(&self, lo: u64, hi: u64) -> bool {
        self.overlapping(lo, hi).next().is_some()
    }

    /// Regions intersecting `[lo, hi)`, highest base first.
    pub fn overlapping(&self, lo: u64, hi: u64) -> impl Iterator<Item = &Region> {
        self.regions
            .range(..hi)
            .rev()
            .map(|(_, r)| r)
            .take_while(move |r| r.end() > lo)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Region> {
        self.regions.values()
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }
}

/// Outcome of walking the page tables for one address.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Walk {
    /// Level whose entry ended the walk: the leaf level for mapped pages, the
    /// level holding the first non-present entry otherwise.
    pub level: Level,
    /// Page base and attributes when a leaf entry exists.
    pub page: Option<(u64, PageAttributes)>,
}

/// Walks the union of `maps`. Paging structures exist wherever some region
/// needs them, so a non-present walk stops at the deepest existing table.
pub fn walk(maps: &[&PageMap], addr: u64) -> Walk {
    for m in maps {
        if let Some(r) = m.region_at(addr) {
            let size = r.attrs.size_class.bytes();
            return Walk {
                level: r.attrs.size_class.terminal_level(),
                page: Some((addr::align_down(addr, size), r.attrs)),
            };
        }
    }
    let any = |lo: u64, hi: u64| maps.iter().any(|m| m.overlaps(lo, hi));
    let pml4 = addr::align_down(addr, PML4_SPAN);
    let level = if !any(pml4, pml4.saturating_add(PML4_SPAN)) {
        Level::Pml4
    } else {
        let gb = addr::align_down(addr, PAGE_1G);
        if !any(gb, gb.saturating_add(PAGE_1G)) {
            Level::Pdpt
        } else {
            let mb = addr::align_down(addr, PAGE_2M);
            let hi = mb.saturating_add(PAGE_2M);
            let has_pt = maps.iter().any(|m| {
                m.overlapping(mb, hi)
                    .any(|r| r.attrs.size_class == SizeClass::Page4K)
            });
            if has_pt {
                Level::Pt
            } else {
                Level::Pd
            }
        }
    };
    Walk { level, page: None }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScenarioKind {
    LinuxDefault,
    LinuxKpti,
    LinuxFlare,
    LinuxNokaslr,
    AmdLinux,
    Windows,
    WindowsKvas,
    Userspace,
    Custom,
}

impl ScenarioKind {
    pub fn is_linux(self) -> bool {
        matches!(
            self,
            ScenarioKind::LinuxDefault
                | ScenarioKind::LinuxKpti
                | ScenarioKind::LinuxFlare
                | ScenarioKind::LinuxNokaslr
                | ScenarioKind::AmdLinux
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mitigation {
    FlareDummyMap,
    TlbPartition,
    MaskedOpNop,
}

/// Everything needed to regenerate a layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mitigations: BTreeSet<Mitigation>,
    #[serde(default = "default_modules")]
    pub module_catalog: Vec<ModuleEntry>,
    #[serde(default = "default_libraries")]
    pub library_catalog: Vec<LibraryEntry>,
    #[serde(default = "default_trampoline_offset")]
    pub trampoline_offset: u64,
    #[serde(default = "default_kvas_offset")]
    pub kvas_offset: u64,
    #[serde(default = "default_userspace_window_bits")]
    pub userspace_window_bits: u32,
    /// Map only the KPTI trampoline into the user page tables. Implied by
    /// `LinuxKpti`; combine with `LinuxNokaslr` for a fixed-base KPTI kernel.
    #[serde(default)]
    pub kpti: bool,
    #[serde(default = "default_kernel_image_size")]
    pub kernel_image_size: u64,
    /// log2 of the number of 2 MiB slots the KVAS kernel base is drawn from.
    #[serde(default = "default_kvas_window_bits")]
    pub kvas_window_bits: u32,
    #[serde(default)]
    pub custom_regions: Vec<Region>,
}

fn default_trampoline_offset() -> u64 {
    0xc0_0000
}
fn default_kvas_offset() -> u64 {
    0x29_8000
}
fn default_userspace_window_bits() -> u32 {
    20
}
fn default_kernel_image_size() -> u64 {
    32 << 20
}
fn default_kvas_window_bits() -> u32 {
    5
}

impl ScenarioSpec {
    pub fn new(kind: ScenarioKind, seed: u64) -> Self {
        let mut mitigations = BTreeSet::new();
        if kind == ScenarioKind::LinuxFlare {
            mitigations.insert(Mitigation::FlareDummyMap);
        }
        ScenarioSpec {
            kind,
            seed,
            mitigations,
            module_catalog: default_modules(),
            library_catalog: default_libraries(),
            trampoline_offset: default_trampoline_offset(),
            kvas_offset: default_kvas_offset(),
            userspace_window_bits: default_userspace_window_bits(),
            kpti: kind == ScenarioKind::LinuxKpti,
            kernel_image_size: default_kernel_image_size(),
            kvas_window_bits: default_kvas_window_bits(),
            custom_regions: Vec::new(),
        }
    }

    /// Cloud preset: a KPTI kernel whose trampoline sits at `0xe00000`.
    pub fn aws_kpti(seed: u64) -> Self {
        ScenarioSpec {
            trampoline_offset: 0xe0_0000,
            ..Self::new(ScenarioKind::LinuxKpti, seed)
        }
    }

    pub fn custom(regions: Vec<Region>) -> Self {
        ScenarioSpec {
            custom_regions: regions,
            ..Self::new(ScenarioKind::Custom, 0)
        }
    }

    /// A random kernel layout of 4 KiB runs and 2 MiB pages inside
    /// [`RANDOM_CUSTOM_WINDOW`].
    pub fn random_custom(seed: u64) -> Self {
        layout::random_custom(seed)
    }

    pub fn with_mitigation(mut self, m: Mitigation) -> Self {
        self.mitigations.insert(m);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn has(&self, m: Mitigation) -> bool {
        self.mitigations.contains(&m)
    }

    pub fn kpti_enabled(&self) -> bool {
        self.kpti || self.kind == ScenarioKind::LinuxKpti
    }

    /// 4 KiB-aligned window an attacker sweeps for the KVAS shadow pages.
    /// Derived from the scenario parameters only.
    pub fn kvas_search_window(&self) -> Range<u64> {
        let start = addr::WINDOWS_START;
        let span = (1u64 << self.kvas_window_bits) * PAGE_2M + self.kvas_offset + 4 * PAGE_4K;
        start..(start + span).min(addr::WINDOWS_END)
    }

    /// Windows an attacker sweeps in a user-space scenario: the program image
    /// range and the shared-library range.
    pub fn userspace_windows(&self) -> Vec<Range<u64>> {
        let slots = 1u64 << self.userspace_window_bits;
        let code_span = (slots + layout::APP_SPAN_PAGES) * PAGE_4K;
        let lib_pages: u64 = self
            .library_catalog
            .iter()
            .map(|l| l.total_pages() + layout::MAX_LIB_GAP_PAGES)
            .sum::<u64>()
            + layout::APP_SPAN_PAGES;
        let lib_span = (slots + lib_pages) * PAGE_4K;
        vec![
            addr::USER_CODE_BASE..addr::USER_CODE_BASE + code_span,
            addr::USER_LIB_BASE..addr::USER_LIB_BASE + lib_span,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModulePlacement {
    pub name: String,
    pub base: u64,
    pub size: u64,
}

impl ModulePlacement {
    pub fn pages(&self) -> u64 {
        self.size.div_ceil(PAGE_4K)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LibraryPlacement {
    pub name: String,
    pub base: u64,
    pub section_sizes: [u64; 4],
}

/// Hidden layout facts, kept for oracles and never consulted by attacks.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub kernel_base: Option<u64>,
    /// Genuine kernel image extent `(base, length)` as mapped in the probed
    /// page tables.
    pub kernel_extent: Option<(u64, u64)>,
    pub module_placements: Vec<ModulePlacement>,
    pub library_placements: Vec<LibraryPlacement>,
    pub trampoline_base: Option<u64>,
    pub kvas_base: Option<u64>,
    pub code_base: Option<u64>,
    /// 4 KiB pages embedded in an AMD kernel image.
    pub kernel_4k_pages: Vec<u64>,
    /// Present pages that the process's self-reported map omits.
    pub unlisted_pages: Vec<u64>,
    /// The process's self-reported map `(base, length)`.
    pub reported_maps: Vec<(u64, u64)>,
}

impl GroundTruth {
    pub fn kernel_range(&self) -> Option<Range<u64>> {
        self.kernel_extent.map(|(b, l)| b..b + l)
    }
}

/// Immutable simulated address space.
#[derive(Debug, Clone)]
pub struct AddressSpace {
    map: PageMap,
    truth: GroundTruth,
    spec: ScenarioSpec,
}

impl AddressSpace {
    pub fn build(spec: ScenarioSpec) -> Result<Self> {
        let (map, truth) = layout::build(&spec)?;
        Ok(AddressSpace { map, truth, spec })
    }

    /// Attributes of the page containing `addr`, `None` when nothing is
    /// mapped there.
    pub fn lookup(&self, addr: u64) -> Result<Option<PageAttributes>> {
        addr::check_canonical(addr)?;
        Ok(self.map.region_at(addr).map(|r| r.attrs))
    }

    pub fn region_at(&self, addr: u64) -> Option<&Region> {
        self.map.region_at(addr)
    }

    pub fn enumerate_truth(&self) -> &GroundTruth {
        &self.truth
    }

    pub fn truth(&self) -> &GroundTruth {
        &self.truth
    }

    pub fn spec(&self) -> &ScenarioSpec {
        &self.spec
    }

    pub fn regions(&self) -> impl Iterator<Item = &Region> {
        self.map.iter()
    }

    pub fn page_map(&self) -> &PageMap {
        &self.map
    }
}

#[cfg(test)]
mod tests;
