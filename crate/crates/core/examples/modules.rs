//! Locates loaded kernel modules and names those whose size is unique in
//! the catalog.

use std::sync::Arc;

use aslrlab::campaigns::scan_modules;
use aslrlab::error::Result;
use aslrlab::prober::{MeasurePolicy, SimProber};
use aslrlab::sim::TimingProfile;
use aslrlab::space::{AddressSpace, ScenarioKind, ScenarioSpec};

fn main() -> Result<()> {
    let spec = ScenarioSpec::new(ScenarioKind::LinuxDefault, 3);
    let catalog = spec.module_catalog.clone();
    let space = Arc::new(AddressSpace::build(spec)?);
    let mut prober = SimProber::new(space.clone(), TimingProfile::alderlake(), 11);
    let report = scan_modules(&mut prober, MeasurePolicy::SecondOfTwo, &catalog)?;

    for r in &report.regions {
        let truth = space.truth().module_placements.iter().find(|m| m.base == r.base);
        println!(
            "{:#x} {:>4} pages  candidates {:<32} actual {}",
            r.base,
            r.size / 4096,
            r.labels.join(","),
            truth.map_or("-", |m| m.name.as_str())
        );
    }
    println!("{} regions, {} probes", report.regions.len(), report.probes_issued);
    Ok(())
}
