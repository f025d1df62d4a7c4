//! Windows kernel base, directly and through the KVAS shadow pages.

use std::sync::Arc;

use aslrlab::campaigns::{scan_kvas, scan_windows};
use aslrlab::error::Result;
use aslrlab::prober::{MeasurePolicy, SimProber};
use aslrlab::sim::TimingProfile;
use aslrlab::space::{AddressSpace, ScenarioKind, ScenarioSpec};

fn main() -> Result<()> {
    let policy = MeasurePolicy::SecondOfTwo;

    let space = Arc::new(AddressSpace::build(ScenarioSpec::new(ScenarioKind::Windows, 8))?);
    let mut p = SimProber::new(space.clone(), TimingProfile::alderlake(), 1);
    let r = scan_windows(&mut p, policy)?;
    println!(
        "ntoskrnl   {:#x} actual {:#x}  {} probes",
        r.detected_base.unwrap_or(0),
        space.truth().kernel_base.unwrap_or(0),
        r.probes_issued
    );

    let spec = ScenarioSpec::new(ScenarioKind::WindowsKvas, 8);
    let (window, offset) = (spec.kvas_search_window(), spec.kvas_offset);
    let space = Arc::new(AddressSpace::build(spec)?);
    let mut p = SimProber::new(space.clone(), TimingProfile::alderlake(), 1);
    let r = scan_kvas(&mut p, policy, window, offset)?;
    println!(
        "kvas       {:#x} actual {:#x}  {} probes",
        r.detected_base.unwrap_or(0),
        space.truth().kernel_base.unwrap_or(0),
        r.probes_issued
    );
    Ok(())
}
