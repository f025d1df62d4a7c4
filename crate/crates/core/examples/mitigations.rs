//! Balanced accuracy of the page-table and TLB primitives against three
//! kernel hardening schemes.

use aslrlab::campaigns::Campaign;
use aslrlab::error::Result;
use aslrlab::sim::TimingProfile;
use aslrlab::space::{Mitigation, ScenarioKind, ScenarioSpec};
use aslrlab::trials::{run_trials, Cell};

fn main() -> Result<()> {
    let linux = ScenarioSpec::new(ScenarioKind::LinuxDefault, 0);
    let flare = ScenarioSpec::new(ScenarioKind::LinuxFlare, 0);
    let cells = [
        ("dummy mappings", flare.clone(), Campaign::MitigationPageTable),
        ("dummy mappings", flare, Campaign::MitigationTlb),
        ("TLB partition", linux.clone().with_mitigation(Mitigation::TlbPartition), Campaign::MitigationTlb),
        ("masked-op no-op", linux.with_mitigation(Mitigation::MaskedOpNop), Campaign::MitigationPageTable),
    ];
    for (name, spec, campaign) in cells {
        let cell = Cell::new(spec, TimingProfile::alderlake(), campaign);
        let s = run_trials(&cell, 20, 5)?;
        println!("{name:<16} {:<22} {:>6.2}%", campaign.name(), s.accuracy * 100.0);
    }
    Ok(())
}
