//! Walk-level kernel scan on a Zen 3 profile, where user probes never hit
//! kernel TLB entries and only the page-walk depth leaks.

use std::sync::Arc;

use aslrlab::campaigns::{amd_reference_bands, scan_amd_kernel};
use aslrlab::error::Result;
use aslrlab::prober::{MeasurePolicy, SimProber};
use aslrlab::sim::TimingProfile;
use aslrlab::space::{AddressSpace, ScenarioKind, ScenarioSpec};

fn main() -> Result<()> {
    let profile = TimingProfile::zen3();
    let bands = amd_reference_bands(&profile, 200, 99)?;
    for b in bands.bands() {
        println!("band {:<12} {:<4} mean {:.1}", b.level.name(), b.depth.name(), b.mean);
    }

    let space = Arc::new(AddressSpace::build(ScenarioSpec::new(ScenarioKind::AmdLinux, 21))?);
    let mut prober = SimProber::new(space.clone(), profile, 4);
    let report = scan_amd_kernel(&mut prober, MeasurePolicy::SecondOfTwo, &bands)?;

    let pt_pages: Vec<String> = report
        .regions
        .iter()
        .filter(|r| r.labels.iter().any(|l| l == "pt-page"))
        .map(|r| format!("{:#x}", r.base))
        .collect();
    println!("outcome  {:?}", report.outcome);
    println!("base     {:#x} (actual {:#x})", report.detected_base.unwrap_or(0), space.truth().kernel_base.unwrap_or(0));
    println!("4k pages {}", pt_pages.join(" "));
    Ok(())
}
