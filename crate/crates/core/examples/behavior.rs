//! Watches a kernel module's TLB footprint while a driver toggles it on and
//! off, then scores the recovered activity trace.

use aslrlab::campaigns::Campaign;
use aslrlab::error::Result;
use aslrlab::trials::{run_trials, Cell};

fn main() -> Result<()> {
    let cell = Cell::for_campaign(Campaign::Monitor);
    let summary = run_trials(&cell, 10, 42)?;
    for r in &summary.records {
        println!(
            "trial {:>2}  module {:#x}  F1 {:.3}",
            r.index,
            r.report.detected_base.unwrap_or(0),
            r.report.per_trial_accuracy.unwrap_or(0.0)
        );
    }
    println!("mean F1 {:.3} on {}", summary.accuracy, summary.profile);
    Ok(())
}
