//! Latency model of AVX masked load/store probes.
//!
//! [`MicroarchState`] owns a TLB, the paging-structure caches, a timing
//! profile and a seeded noise source, and evaluates probes against a shared
//! [`AddressSpace`]. Attacker-owned pages (calibration pages and the TLB
//! eviction buffer) live in a private overlay that the walk consults first.

mod profile;
mod tlb;

use std::collections::{BTreeSet, HashSet};
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::addr::{self, Level, PAGE_4K};
use crate::error::{Error, Result};
use crate::rng::{self, SplitMix64};
use crate::space::{self, AddressSpace, Mitigation, PageAttributes, PageMap, Perm, Region};

pub use profile::TimingProfile;
pub use tlb::{PagingStructureCache, Tlb, DEFAULT_PSC_CAPACITY, DEFAULT_TLB_CAPACITY};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    MaskedLoad,
    MaskedStore,
}

impl OpKind {
    pub fn is_store(self) -> bool {
        self == OpKind::MaskedStore
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::MaskedLoad => "load",
            OpKind::MaskedStore => "store",
        }
    }
}

/// Lane mask of a 256-bit masked move over eight 32-bit elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ElementMask(pub u8);

impl ElementMask {
    pub const ZERO: ElementMask = ElementMask(0);
    pub const ALL: ElementMask = ElementMask(0xff);
    pub const LANES: u64 = 8;
    pub const LANE_BYTES: u64 = 4;

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }

    pub fn lanes(self) -> impl Iterator<Item = u64> {
        (0..Self::LANES).filter(move |i| self.0 >> i & 1 == 1)
    }
}

/// One timed probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSample {
    pub addr: u64,
    pub kind: OpKind,
    /// Some lane was unmasked. Such a probe only succeeds on pages every
    /// unmasked lane may legally access.
    pub mask_nonzero: bool,
    pub latency: u64,
    pub tlb_hit: bool,
    pub terminal_level: Level,
}

/// Outcome of a masked probe that did not produce a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum ProbeError {
    #[error("page fault at {addr:#018x}")]
    Fault { addr: u64 },
    #[error("non-canonical address {0:#018x}")]
    NonCanonical(u64),
}

/// Base of the attacker's calibration pages.
const CALIBRATION_BASE: u64 = 0x0400_0000_0000;
/// Eviction buffer pages spread over PML4 slots 16..48 so that they also
/// displace every paging-structure-cache entry.
const EVICTION_PML4_FIRST: u64 = 16;
const EVICTION_PML4_SLOTS: u64 = 32;

/// Mutable simulator state for one execution stream.
#[derive(Debug, Clone)]
pub struct MicroarchState {
    space: Arc<AddressSpace>,
    own: PageMap,
    dirtied: HashSet<u64>,
    profile: TimingProfile,
    mitigations: BTreeSet<Mitigation>,
    tlb: Tlb,
    psc: PagingStructureCache,
    rng: SplitMix64,
    eviction_set: Vec<u64>,
    eviction_slack: f64,
    next_calibration: u64,
    trace: Option<Vec<ProbeSample>>,
}

impl MicroarchState {
    pub fn new(space: Arc<AddressSpace>, profile: TimingProfile, noise_seed: u64) -> Self {
        let mitigations = space.spec().mitigations.clone();
        let partitioned = mitigations.contains(&Mitigation::TlbPartition);
        MicroarchState {
            space,
            own: PageMap::new(),
            dirtied: HashSet::new(),
            profile,
            mitigations,
            tlb: Tlb::new(DEFAULT_TLB_CAPACITY, partitioned),
            psc: PagingStructureCache::new(DEFAULT_PSC_CAPACITY),
            rng: rng::seeded(noise_seed),
            eviction_set: Vec::new(),
            eviction_slack: 0.25,
            next_calibration: CALIBRATION_BASE,
            trace: None,
        }
    }

    pub fn space(&self) -> &Arc<AddressSpace> {
        &self.space
    }

    pub fn profile(&self) -> &TimingProfile {
        &self.profile
    }

    pub fn tlb(&self) -> &Tlb {
        &self.tlb
    }

    pub fn psc(&self) -> &PagingStructureCache {
        &self.psc
    }

    pub fn has(&self, m: Mitigation) -> bool {
        self.mitigations.contains(&m)
    }

    pub fn set_eviction_slack(&mut self, slack: f64) {
        self.eviction_slack = slack.max(0.0);
        self.eviction_set.clear();
    }

    /// Starts recording every probe sample.
    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn take_trace(&mut self) -> Vec<ProbeSample> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    fn walk(&self, addr: u64) -> space::Walk {
        space::walk(&[&self.own, self.space.page_map()], addr)
    }

    fn is_dirty(&self, page: u64, attrs: &PageAttributes) -> bool {
        attrs.dirty || self.dirtied.contains(&page)
    }

    /// User-mode probes of kernel translations can neither hit nor fill the
    /// TLB on AMD-style parts or behind a user/kernel TLB split.
    fn user_tlb_blocked(&self, addr: u64) -> bool {
        addr::is_kernel(addr) && (self.profile.amd_mode || self.has(Mitigation::TlbPartition))
    }

    /// Executes one masked load or store from user mode.
    pub fn masked_probe(
        &mut self,
        addr: u64,
        kind: OpKind,
        mask: ElementMask,
    ) -> Result<ProbeSample, ProbeError> {
        if !addr::is_canonical(addr) {
            return Err(ProbeError::NonCanonical(addr));
        }
        let store = kind.is_store();

        // Architectural checks for unmasked lanes.
        let mut to_dirty = Vec::new();
        for lane in mask.lanes() {
            let a = addr.wrapping_add(lane * ElementMask::LANE_BYTES);
            if !addr::is_canonical(a) {
                return Err(ProbeError::Fault { addr: a });
            }
            let w = self.walk(a);
            let ok = match w.page {
                Some((_, at)) => {
                    at.is_accessible_mapping() && at.user_accessible && (!store || at.writable)
                }
                None => false,
            };
            if !ok {
                return Err(ProbeError::Fault { addr: a });
            }
            if store {
                to_dirty.push(w.page.unwrap().0);
            }
        }
        self.dirtied.extend(to_dirty);

        let w = self.walk(addr);
        let p = &self.profile;
        let base = p.base(store);

        if mask.is_zero() && self.has(Mitigation::MaskedOpNop) {
            let latency = base + self.noise();
            return Ok(self.record(addr, kind, mask, latency, false, w.level));
        }

        let cacheable = w.page.is_some_and(|(_, at)| at.is_accessible_mapping());
        let assist = match w.page {
            Some((_, at)) if cacheable && at.user_accessible => {
                if store && !at.writable {
                    p.assist_store
                } else if store && !self.is_dirty(w.page.unwrap().0, &at) {
                    p.dirty_assist
                } else {
                    0
                }
            }
            _ => p.assist(store),
        };

        let blocked = self.user_tlb_blocked(addr);
        let page = w.page.map(|(b, _)| b).unwrap_or_else(|| addr::align_down(addr, w.level.span()));
        let hit = cacheable && !blocked && self.tlb.lookup_user(page).is_some();
        let translation = if hit {
            self.profile.tlb_hit_load
        } else {
            let p = &self.profile;
            let rank: u64 = match w.level {
                Level::Pt | Level::Pd => 1,
                Level::Pdpt => 2,
                Level::Pml4 => 3,
            };
            let covered = self.psc.hits_above(addr, w.level);
            let levels = rank.saturating_sub(covered).max(1);
            let mut cost = p.tlb_miss_walk + p.walk_per_level * levels;
            if w.level == Level::Pt {
                cost += p.pt_extra;
            }
            if !cacheable {
                cost += p.nonpresent_extra;
            }
            if cacheable && !blocked {
                self.tlb.insert(page, w.level);
                self.psc.fill(addr, w.level);
            }
            cost
        };
        let latency = base + assist + translation + self.noise();
        Ok(self.record(addr, kind, mask, latency, hit, w.level))
    }

    fn record(
        &mut self,
        addr: u64,
        kind: OpKind,
        mask: ElementMask,
        latency: u64,
        tlb_hit: bool,
        terminal_level: Level,
    ) -> ProbeSample {
        let s = ProbeSample {
            addr,
            kind,
            mask_nonzero: !mask.is_zero(),
            latency,
            tlb_hit,
            terminal_level,
        };
        if let Some(t) = &mut self.trace {
            t.push(s);
        }
        s
    }

    /// Additive noise: a clipped, rounded Gaussian plus rare interrupt spikes.
    fn noise(&mut self) -> u64 {
        let mut n = 0;
        if self.profile.noise_sigma > 0.0 {
            let z: f64 = self.rng.sample(StandardNormal);
            n += (z * self.profile.noise_sigma).round().max(0.0) as u64;
        }
        if self.profile.outlier_prob > 0.0 && self.rng.random::<f64>() < self.profile.outlier_prob {
            n += self.profile.outlier_cost;
        }
        n
    }

    /// Displaces kernel translations by touching `capacity * (1 + slack)`
    /// distinct attacker pages.
    pub fn evict_tlb(&mut self) {
        if self.eviction_set.is_empty() {
            self.build_eviction_set();
        }
        for i in 0..self.eviction_set.len() {
            let page = self.eviction_set[i];
            self.tlb.insert(page, Level::Pt);
            self.psc.fill(page, Level::Pt);
        }
    }

    fn build_eviction_set(&mut self) {
        let cap = self.tlb.capacity() as f64;
        let n = (cap * (1.0 + self.eviction_slack)).ceil() as u64;
        for i in 0..n {
            let pml4 = EVICTION_PML4_FIRST + i % EVICTION_PML4_SLOTS;
            let rest = i / EVICTION_PML4_SLOTS;
            let page = (pml4 << 39) | ((rest % 512) << 30) | ((i % 512) << 21);
            self.own
                .insert(Region::new(page, PAGE_4K, PageAttributes::user(Perm::ReadWrite), "eviction"))
                .expect("eviction pages are disjoint");
            self.eviction_set.push(page);
        }
    }

    /// Drops every cached translation. Test-only shortcut for a full flush.
    pub fn flush_translation_caches(&mut self) {
        self.tlb.flush();
        self.psc.flush();
    }

    /// Fills translations as if the kernel itself executed at `addrs`.
    pub fn touch_kernel_pages(&mut self, addrs: &[u64]) -> Result<()> {
        let mut walks = Vec::with_capacity(addrs.len());
        for &a in addrs {
            addr::check_canonical(a)?;
            let w = self.walk(a);
            match w.page {
                Some((page, at)) if at.present && addr::is_kernel(a) => walks.push((a, page, w.level)),
                _ => return Err(Error::NotPresent(a)),
            }
        }
        for (a, page, level) in walks {
            self.tlb.insert(page, level);
            self.psc.fill(a, level);
        }
        Ok(())
    }

    /// Maps a fresh attacker page with the given protection. Writable pages
    /// start clean unless `dirty` is set.
    /// Whether `addr` lies on one of the attacker's own calibration pages.
    pub fn is_calibration_page(&self, addr: u64) -> bool {
        self.own.region_at(addr).is_some()
    }

    pub fn alloc_page(&mut self, perm: Perm, dirty: bool) -> u64 {
        let page = self.next_calibration;
        self.next_calibration += 2 * PAGE_4K;
        let mut attrs = PageAttributes::user(perm);
        attrs.dirty = dirty && perm == Perm::ReadWrite;
        self.own
            .insert(Region::new(page, PAGE_4K, attrs, "calibration"))
            .expect("calibration pages are disjoint");
        page
    }
}
