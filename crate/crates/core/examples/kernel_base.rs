//! Finds the randomized kernel base on a simulated Alder Lake machine.

use std::sync::Arc;

use aslrlab::campaigns::scan_kernel_base;
use aslrlab::error::Result;
use aslrlab::prober::{MeasurePolicy, SimProber};
use aslrlab::sim::TimingProfile;
use aslrlab::space::{AddressSpace, ScenarioKind, ScenarioSpec};

fn main() -> Result<()> {
    let space = Arc::new(AddressSpace::build(ScenarioSpec::new(ScenarioKind::LinuxDefault, 7))?);
    let mut prober = SimProber::new(space.clone(), TimingProfile::alderlake(), 1);
    let report = scan_kernel_base(&mut prober, MeasurePolicy::SecondOfTwo)?;

    println!("outcome      {:?}", report.outcome);
    println!("detected     {:#x}", report.detected_base.unwrap_or(0));
    println!("actual       {:#x}", space.truth().kernel_base.unwrap_or(0));
    println!("probes       {}", report.probes_issued);
    Ok(())
}
