//! Recovers the kernel base through the KPTI trampoline, the only kernel
//! text mapped while user code runs.

use std::sync::Arc;

use aslrlab::campaigns::scan_kpti;
use aslrlab::error::Result;
use aslrlab::prober::{MeasurePolicy, SimProber};
use aslrlab::sim::TimingProfile;
use aslrlab::space::{AddressSpace, ScenarioKind, ScenarioSpec};

fn main() -> Result<()> {
    let cases = [
        ("distribution kernel", ScenarioSpec::new(ScenarioKind::LinuxKpti, 5)),
        ("cloud kernel", ScenarioSpec::aws_kpti(5)),
    ];
    for (name, spec) in cases {
        let offset = spec.trampoline_offset;
        let space = Arc::new(AddressSpace::build(spec)?);
        let mut prober = SimProber::new(space.clone(), TimingProfile::alderlake(), 2);
        let report = scan_kpti(&mut prober, MeasurePolicy::SecondOfTwo, offset)?;
        println!(
            "{name:<20} offset {offset:#x}  detected {:#x}  actual {:#x}  {:?}",
            report.detected_base.unwrap_or(0),
            space.truth().kernel_base.unwrap_or(0),
            report.outcome
        );
    }
    Ok(())
}
