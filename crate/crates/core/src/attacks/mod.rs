//! The three timing primitives: page-table, TLB and permission attacks.
//!
//! Each primitive is a classification procedure over probe measurements and
//! never issues a probe with a nonzero mask.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::addr::Level;
use crate::error::{Error, Result};
use crate::prober::{measure, MeasurePolicy, Prober, Threshold};
use crate::sim::{OpKind, DEFAULT_TLB_CAPACITY};
use crate::space::Perm;

/// A verdict that can be written as an `addr,verdict,latency` CSV row.
pub trait VerdictRow {
    fn addr(&self) -> u64;
    fn label(&self) -> &'static str;
    fn latency(&self) -> u64;
}

pub fn write_verdicts_csv<W: Write, V: VerdictRow>(out: W, verdicts: &[V]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["addr", "verdict", "latency"])?;
    for v in verdicts {
        w.write_record([format!("{:#018x}", v.addr()), v.label().to_string(), v.latency().to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mapping {
    Mapped,
    Unmapped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingVerdict {
    pub addr: u64,
    pub verdict: Mapping,
    pub latency: u64,
}

impl MappingVerdict {
    pub fn classify(addr: u64, latency: u64, threshold: &Threshold) -> Self {
        let verdict = if threshold.is_below(latency) { Mapping::Mapped } else { Mapping::Unmapped };
        MappingVerdict { addr, verdict, latency }
    }

    pub fn is_mapped(&self) -> bool {
        self.verdict == Mapping::Mapped
    }
}

impl VerdictRow for MappingVerdict {
    fn addr(&self) -> u64 {
        self.addr
    }
    fn label(&self) -> &'static str {
        match self.verdict {
            Mapping::Mapped => "mapped",
            Mapping::Unmapped => "unmapped",
        }
    }
    fn latency(&self) -> u64 {
        self.latency
    }
}

/// Mapped/unmapped verdict per address from masked-load timings.
pub fn page_table_attack<P: Prober + ?Sized>(
    prober: &mut P,
    addrs: &[u64],
    threshold: &Threshold,
    policy: MeasurePolicy,
) -> Result<Vec<MappingVerdict>> {
    addrs
        .iter()
        .map(|&a| {
            let l = measure(prober, a, OpKind::MaskedLoad, policy)?;
            Ok(MappingVerdict::classify(a, l, threshold))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum WalkLevel {
    Pt,
    Pd,
    Pdpt,
    Pml4,
    NonPresent,
}

impl WalkLevel {
    pub fn name(self) -> &'static str {
        match self {
            WalkLevel::Pt => "PT",
            WalkLevel::Pd => "PD",
            WalkLevel::Pdpt => "PDPT",
            WalkLevel::Pml4 => "PML4",
            WalkLevel::NonPresent => "non-present",
        }
    }
}

/// One latency class: the walk ends at `depth` and finds a present page
/// unless `level` is [`WalkLevel::NonPresent`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub level: WalkLevel,
    pub depth: Level,
    pub mean: f64,
}

/// Latency bands for [`walk_level_attack`]; a latency is assigned to the band
/// with the nearest mean, i.e. cut-offs sit at midpoints between means.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelBands {
    bands: Vec<Band>,
}

impl LevelBands {
    pub fn new(mut bands: Vec<Band>) -> Result<Self> {
        if bands.is_empty() {
            return Err(Error::Usage("level bands need at least one band".into()));
        }
        bands.sort_by(|a, b| a.mean.total_cmp(&b.mean));
        Ok(LevelBands { bands })
    }

    /// Measures every fixture `samples` times with an evicted TLB.
    pub fn calibrate<P: Prober + ?Sized>(
        prober: &mut P,
        fixtures: &[(u64, WalkLevel, Level)],
        samples: usize,
    ) -> Result<Self> {
        let mut bands = Vec::with_capacity(fixtures.len());
        for &(addr, level, depth) in fixtures {
            let mut sum = 0u64;
            for _ in 0..samples.max(1) {
                prober.evict_tlb()?;
                sum += prober.probe(addr, OpKind::MaskedLoad)?;
            }
            bands.push(Band { level, depth, mean: sum as f64 / samples.max(1) as f64 });
        }
        LevelBands::new(bands)
    }

    pub fn bands(&self) -> &[Band] {
        &self.bands
    }

    pub fn is_calibrated(&self) -> bool {
        !self.bands.is_empty()
    }

    pub fn classify(&self, latency: u64) -> Result<&Band> {
        let l = latency as f64;
        self.bands
            .iter()
            .min_by(|a, b| (a.mean - l).abs().total_cmp(&(b.mean - l).abs()))
            .ok_or_else(|| Error::Usage("walk-level attack needs calibrated bands".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WalkLevelVerdict {
    pub addr: u64,
    pub level: WalkLevel,
    /// Deepest table level the walk reached.
    pub depth: Level,
    pub latency: u64,
}

impl VerdictRow for WalkLevelVerdict {
    fn addr(&self) -> u64 {
        self.addr
    }
    fn label(&self) -> &'static str {
        self.level.name()
    }
    fn latency(&self) -> u64 {
        self.latency
    }
}

/// How often [`walk_level_attack`] evicts the TLB.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Eviction {
    BeforeEachProbe,
    /// Once per call; enough when probes cannot fill the TLB themselves.
    OncePerBatch,
}

/// Page-table level of each address from cold-TLB masked-load timings.
pub fn walk_level_attack<P: Prober + ?Sized>(
    prober: &mut P,
    addrs: &[u64],
    bands: &LevelBands,
    policy: MeasurePolicy,
    eviction: Eviction,
) -> Result<Vec<WalkLevelVerdict>> {
    if !bands.is_calibrated() {
        return Err(Error::Usage("walk-level attack needs calibrated bands".into()));
    }
    policy.validate()?;
    if eviction == Eviction::OncePerBatch {
        prober.evict_tlb()?;
    }
    let k = match policy {
        MeasurePolicy::SecondOfTwo => 1,
        MeasurePolicy::MedianOfK { k } => k as usize,
    };
    let mut v = Vec::with_capacity(k);
    addrs
        .iter()
        .map(|&a| {
            v.clear();
            for _ in 0..k {
                if eviction == Eviction::BeforeEachProbe {
                    prober.evict_tlb()?;
                }
                v.push(prober.probe(a, OpKind::MaskedLoad)?);
            }
            v.sort_unstable();
            let latency = v[v.len() / 2];
            let band = bands.classify(latency)?;
            Ok(WalkLevelVerdict { addr: a, level: band.level, depth: band.depth, latency })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TlbState {
    Hit,
    Miss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TlbVerdict {
    pub addr: u64,
    pub state: TlbState,
    pub latency: u64,
}

impl VerdictRow for TlbVerdict {
    fn addr(&self) -> u64 {
        self.addr
    }
    fn label(&self) -> &'static str {
        match self.state {
            TlbState::Hit => "hit",
            TlbState::Miss => "miss",
        }
    }
    fn latency(&self) -> u64 {
        self.latency
    }
}

/// Hit/miss separator: latencies strictly below `value` are hits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TlbSeparator {
    pub value: f64,
    pub hit_mean: f64,
    pub miss_mean: f64,
    /// Standard error of `miss_mean - hit_mean`.
    pub gap_stderr: f64,
}

impl TlbSeparator {
    pub fn manual(value: f64) -> Self {
        TlbSeparator { value, hit_mean: f64::NAN, miss_mean: f64::NAN, gap_stderr: f64::NAN }
    }

    pub fn is_hit(&self, latency: u64) -> bool {
        (latency as f64) < self.value
    }

    /// Whether calibration saw hits clearly faster than misses: the gap
    /// exceeds [`SIGNAL_SIGMAS`] standard errors. Manual separators have no
    /// calibration data and report `false`.
    pub fn has_signal(&self) -> bool {
        self.miss_mean - self.hit_mean > SIGNAL_SIGMAS * self.gap_stderr.max(f64::MIN_POSITIVE)
    }

    /// Midpoint between post-eviction and warm probe means of `reference`,
    /// a page known to be mapped.
    pub fn calibrate<P: Prober + ?Sized>(prober: &mut P, reference: u64, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Usage("TLB separator needs at least one sample".into()));
        }
        let (mut hit, mut miss) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            prober.evict_tlb()?;
            miss.push(prober.probe(reference, OpKind::MaskedLoad)?);
            hit.push(prober.probe(reference, OpKind::MaskedLoad)?);
        }
        let (h, vh) = robust_stats(&mut hit);
        let (m, vm) = robust_stats(&mut miss);
        Ok(TlbSeparator { value: (h + m) / 2.0, hit_mean: h, miss_mean: m, gap_stderr: (vh + vm).sqrt() })
    }
}

/// Standard errors a calibrated hit/miss gap must exceed.
pub const SIGNAL_SIGMAS: f64 = 4.0;

/// Mean of the lower 90 % of samples and the variance of that mean.
fn robust_stats(v: &mut [u64]) -> (f64, f64) {
    let mean = robust_mean(v);
    let keep = &v[..(v.len() * 9).div_ceil(10).max(1)];
    let n = keep.len() as f64;
    let var = keep.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var / n)
}

/// Mean of the lower 90 % of samples; drops interrupt spikes.
fn robust_mean(v: &mut [u64]) -> f64 {
    v.sort_unstable();
    let keep = (v.len() * 9).div_ceil(10).max(1);
    v[..keep].iter().sum::<u64>() as f64 / keep as f64
}

/// Largest batch probed without re-baselining.
pub const TLB_CHUNK: usize = DEFAULT_TLB_CAPACITY / 4;

/// Observes pre-existing TLB state with a single probe per address.
///
/// Addresses are probed in ascending order. Batches larger than
/// [`TLB_CHUNK`] are split, and the TLB is evicted between chunks so one
/// chunk's own fills never mask the next. Verdicts come back in input order.
pub fn tlb_attack<P: Prober + ?Sized>(
    prober: &mut P,
    addrs: &[u64],
    separator: &TlbSeparator,
) -> Result<Vec<TlbVerdict>> {
    let mut order: Vec<usize> = (0..addrs.len()).collect();
    order.sort_by_key(|&i| addrs[i]);
    let mut out = vec![None; addrs.len()];
    for (c, chunk) in order.chunks(TLB_CHUNK).enumerate() {
        if c > 0 {
            prober.evict_tlb()?;
        }
        for &i in chunk {
            let latency = prober.probe(addrs[i], OpKind::MaskedLoad)?;
            let state = if separator.is_hit(latency) { TlbState::Hit } else { TlbState::Miss };
            out[i] = Some(TlbVerdict { addr: addrs[i], state, latency });
        }
    }
    Ok(out.into_iter().map(|v| v.expect("every index probed")).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PermissionClass {
    NoAccess,
    ReadNoWrite,
    ReadWrite,
    Unmapped,
}

impl PermissionClass {
    pub fn name(self) -> &'static str {
        match self {
            PermissionClass::NoAccess => "---",
            PermissionClass::ReadNoWrite => "r-?",
            PermissionClass::ReadWrite => "rw-",
            PermissionClass::Unmapped => "unmapped",
        }
    }

    /// Class the attack should report for a page with protection `perm`.
    pub fn expected(perm: Option<Perm>, none_possible: bool) -> PermissionClass {
        match perm {
            Some(Perm::ReadWrite) => PermissionClass::ReadWrite,
            Some(Perm::ReadOnly | Perm::ReadExec) => PermissionClass::ReadNoWrite,
            Some(Perm::None) | None if none_possible => PermissionClass::NoAccess,
            _ => PermissionClass::Unmapped,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermissionVerdict {
    pub addr: u64,
    pub perm: PermissionClass,
    pub load_latency: u64,
    pub store_latency: Option<u64>,
}

impl VerdictRow for PermissionVerdict {
    fn addr(&self) -> u64 {
        self.addr
    }
    fn label(&self) -> &'static str {
        self.perm.name()
    }
    fn latency(&self) -> u64 {
        self.store_latency.unwrap_or(self.load_latency)
    }
}

/// Separators for the two passes of [`permission_attack`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermissionThresholds {
    /// Load pass: accessible pages are strictly faster.
    pub load: Threshold,
    /// Store pass: writable pages are strictly faster.
    pub store: f64,
}

impl PermissionThresholds {
    /// Keeps `load` and derives the store separator from the attacker's own
    /// writable and read-only pages.
    pub fn calibrate<P: Prober + ?Sized>(prober: &mut P, load: Threshold, n: usize) -> Result<Self> {
        let rw = prober.alloc_calibration_page(Perm::ReadWrite, true)?;
        let ro = prober.alloc_calibration_page(Perm::ReadOnly, false)?;
        let mut mean = |a| -> Result<f64> {
            let mut v = (0..n.max(1))
                .map(|_| measure(prober, a, OpKind::MaskedStore, MeasurePolicy::SecondOfTwo))
                .collect::<Result<Vec<u64>>>()?;
            Ok(robust_mean(&mut v))
        };
        let (w, r) = (mean(rw)?, mean(ro)?);
        if w >= r {
            return Err(Error::Backend(format!("no store signal: rw {w:.1} vs ro {r:.1}")));
        }
        Ok(PermissionThresholds { load, store: (w + r) / 2.0 })
    }
}

/// Two-pass permission inference. The load pass separates accessible pages
/// from the rest; the store pass splits accessible pages into writable and
/// read-only. Slow loads are reported as `NoAccess` when `none_possible`
/// says the region may hold `PROT_NONE` pages, otherwise `Unmapped`.
pub fn permission_attack<P: Prober + ?Sized>(
    prober: &mut P,
    addrs: &[u64],
    thresholds: &PermissionThresholds,
    policy: MeasurePolicy,
    none_possible: bool,
) -> Result<Vec<PermissionVerdict>> {
    let loads = page_table_attack(prober, addrs, &thresholds.load, policy)?;
    loads
        .into_iter()
        .map(|l| {
            if !l.is_mapped() {
                let perm = if none_possible { PermissionClass::NoAccess } else { PermissionClass::Unmapped };
                return Ok(PermissionVerdict { addr: l.addr, perm, load_latency: l.latency, store_latency: None });
            }
            let s = measure(prober, l.addr, OpKind::MaskedStore, policy)?;
            let perm = if (s as f64) < thresholds.store {
                PermissionClass::ReadWrite
            } else {
                PermissionClass::ReadNoWrite
            };
            Ok(PermissionVerdict { addr: l.addr, perm, load_latency: l.latency, store_latency: Some(s) })
        })
        .collect()
}

#[cfg(test)]
mod tests;
