//! Sweeps user address space for mappings and identifies shared libraries
//! from their section permission signature.

use std::sync::Arc;

use aslrlab::campaigns::{fingerprint_libraries, sweep_userspace};
use aslrlab::error::Result;
use aslrlab::prober::{MeasurePolicy, SimProber};
use aslrlab::sim::TimingProfile;
use aslrlab::space::{AddressSpace, ScenarioKind, ScenarioSpec};

fn main() -> Result<()> {
    let mut spec = ScenarioSpec::new(ScenarioKind::Userspace, 12);
    spec.userspace_window_bits = 6;
    let windows = spec.userspace_windows();
    let catalog = spec.library_catalog.clone();
    let space = Arc::new(AddressSpace::build(spec)?);
    let policy = MeasurePolicy::SecondOfTwo;

    let mut p = SimProber::new(space.clone(), TimingProfile::alderlake().without_noise(), 3);
    let sweep = sweep_userspace(&mut p, policy, &windows)?;
    println!("sweep: {} mapped runs, {} probes", sweep.regions.len(), sweep.probes_issued);

    let mut p = SimProber::new(space.clone(), TimingProfile::alderlake().without_noise(), 3);
    let report = fingerprint_libraries(&mut p, policy, &catalog, &windows)?;
    for lib in &space.truth().library_placements {
        let found = report.regions.iter().find(|r| r.base == lib.base).and_then(|r| r.identified());
        println!("{:<24} {:#x}  identified as {}", lib.name, lib.base, found.unwrap_or("-"));
    }
    Ok(())
}
