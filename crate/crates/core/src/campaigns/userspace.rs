use std::ops::Range;
use std::time::Instant;

use crate::addr::{align_down, PAGE_4K};
use crate::attacks::{PermissionClass, PermissionThresholds};
use crate::error::Result;
use crate::prober::{calibrate_threshold, measure, MeasurePolicy, Prober};
use crate::sim::OpKind;
use crate::space::LibraryEntry;

use super::scan::{mapped_runs, Scanner};
use super::{Campaign, DetectedRegion, Outcome, ScanReport, THRESHOLD_SAMPLES};

fn window_pages(windows: &[Range<u64>]) -> Vec<u64> {
    let mut pages: Vec<u64> = windows
        .iter()
        .flat_map(|w| {
            let first = align_down(w.start, PAGE_4K);
            (first..w.end).step_by(PAGE_4K as usize)
        })
        .collect();
    pages.sort_unstable();
    pages.dedup();
    pages
}

/// Contiguous runs of mapped pages as `(base, pages)`.
fn runs_of<P: Prober + ?Sized>(s: &mut Scanner<'_, P>, pages: &[u64]) -> Result<Vec<(u64, u64)>> {
    let verdicts = s.sweep(pages)?;
    let mut out: Vec<(u64, u64)> = Vec::new();
    for (start, len) in mapped_runs(&verdicts) {
        let base = pages[start];
        // Windows can be adjacent; merge runs that touch in address space.
        match out.last_mut() {
            Some((b, n)) if *b + *n * PAGE_4K == base => *n += len as u64,
            _ => out.push((base, len as u64)),
        }
    }
    Ok(out)
}

/// Probes every 4 KiB page of `windows` and reports each mapped run.
pub fn sweep_userspace<P: Prober + ?Sized>(
    prober: &mut P,
    policy: MeasurePolicy,
    windows: &[Range<u64>],
) -> Result<ScanReport> {
    let t0 = Instant::now();
    let mut report = ScanReport::new(Campaign::SweepUserspace);
    let mut s = Scanner::calibrated(prober, policy)?;
    let runs = runs_of(&mut s, &window_pages(windows))?;
    s.finish(&mut report);
    report.regions = runs.iter().map(|&(b, n)| DetectedRegion::new(b, n * PAGE_4K)).collect();
    if !report.regions.is_empty() {
        report.outcome = Outcome::Found;
    }
    report.elapsed = t0.elapsed();
    Ok(report)
}

struct Run {
    base: u64,
    classes: Vec<PermissionClass>,
}

impl Run {
    fn pages(&self) -> u64 {
        self.classes.len() as u64
    }

    fn end(&self) -> u64 {
        self.base + self.pages() * PAGE_4K
    }

    fn all(&self, c: PermissionClass) -> bool {
        self.classes.iter().all(|&x| x == c)
    }

    /// `(read-only, writable)` lengths when the run is a block of
    /// non-writable pages followed by a block of writable ones.
    fn ro_rw(&self) -> Option<(u64, u64)> {
        let ro = self.classes.iter().take_while(|&&c| c == PermissionClass::ReadNoWrite).count();
        let rw = self.classes[ro..].iter().take_while(|&&c| c == PermissionClass::ReadWrite).count();
        (ro + rw == self.classes.len()).then_some((ro as u64, rw as u64))
    }
}

/// Sweeps `windows`, splits each mapped page into writable or not with the
/// store pass, and matches libraries by their section-size signature: an
/// executable run, a gap of inaccessible pages, then read-only pages followed
/// by writable ones. Runs that fit no catalog entry are reported unlabeled.
pub fn fingerprint_libraries<P: Prober + ?Sized>(
    prober: &mut P,
    policy: MeasurePolicy,
    catalog: &[LibraryEntry],
    windows: &[Range<u64>],
) -> Result<ScanReport> {
    let t0 = Instant::now();
    let mut report = ScanReport::new(Campaign::Fingerprint);
    policy.validate()?;
    let load = calibrate_threshold(prober, THRESHOLD_SAMPLES)?;
    let th = PermissionThresholds::calibrate(prober, load, THRESHOLD_SAMPLES)?;
    let mut s = Scanner::with_threshold(prober, policy, load);
    let mapped = runs_of(&mut s, &window_pages(windows))?;
    let mut runs = Vec::with_capacity(mapped.len());
    for (base, n) in mapped {
        let classes = (0..n)
            .map(|i| {
                let l = measure(s.prober, base + i * PAGE_4K, OpKind::MaskedStore, policy)?;
                Ok(if (l as f64) < th.store { PermissionClass::ReadWrite } else { PermissionClass::ReadNoWrite })
            })
            .collect::<Result<Vec<_>>>()?;
        runs.push(Run { base, classes });
    }
    let stores: u64 = runs.iter().map(Run::pages).sum();
    s.finish(&mut report);
    report.slots_probed += stores;

    let mut i = 0;
    while i < runs.len() {
        let cur = &runs[i];
        if let Some(next) = runs.get(i + 1).filter(|_| cur.all(PermissionClass::ReadNoWrite)) {
            if let Some((ro, rw)) = next.ro_rw() {
                let gap = (next.base - cur.end()) / PAGE_4K;
                let sig = [cur.pages(), gap, ro, rw];
                let names: Vec<String> = catalog
                    .iter()
                    .filter(|l| l.section_pages() == sig)
                    .map(|l| l.name.clone())
                    .collect();
                if !names.is_empty() {
                    report.regions.push(DetectedRegion::new(cur.base, next.end() - cur.base).labeled(names));
                    i += 2;
                    continue;
                }
            }
        }
        report.regions.push(DetectedRegion::new(cur.base, cur.pages() * PAGE_4K));
        i += 1;
    }
    if !report.regions.is_empty() {
        report.outcome = Outcome::Found;
    }
    report.elapsed = t0.elapsed();
    Ok(report)
}
