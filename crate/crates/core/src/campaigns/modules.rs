use std::time::Instant;

use crate::addr::{MODULES_START, MODULE_SLOTS, PAGE_4K};
use crate::error::Result;
use crate::prober::{MeasurePolicy, Prober};
use crate::space::{names_with_pages, ModuleEntry};

use super::scan::{mapped_runs, Scanner};
use super::{Campaign, DetectedRegion, Outcome, ScanReport};

/// Sweeps the module range at 4 KiB stride and labels every run of mapped
/// pages with the catalog names whose page count matches its length.
pub fn scan_modules<P: Prober + ?Sized>(
    prober: &mut P,
    policy: MeasurePolicy,
    catalog: &[ModuleEntry],
) -> Result<ScanReport> {
    let t0 = Instant::now();
    let mut report = ScanReport::new(Campaign::ScanModules);
    let mut s = Scanner::calibrated(prober, policy)?;
    let addrs: Vec<u64> = (0..MODULE_SLOTS).map(|i| MODULES_START + i * PAGE_4K).collect();
    let verdicts = s.sweep(&addrs)?;
    s.finish(&mut report);
    for (start, len) in mapped_runs(&verdicts) {
        let len = len as u64;
        report.regions.push(
            DetectedRegion::new(addrs[start], len * PAGE_4K).labeled(names_with_pages(catalog, len)),
        );
    }
    report.outcome = Outcome::Found;
    report.elapsed = t0.elapsed();
    Ok(report)
}
