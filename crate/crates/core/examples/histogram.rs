//! Latency histogram of one traced kernel-base scan with noise enabled.

use aslrlab::campaigns::Campaign;
use aslrlab::error::Result;
use aslrlab::hist::Histogram;
use aslrlab::trials::{prepare, run_trial, Cell};

fn main() -> Result<()> {
    let cell = Cell::for_campaign(Campaign::ScanBase);
    let prepared = prepare(&cell, 0)?;
    let (report, samples) = run_trial(&cell, &prepared, 0, 0, true)?;
    let latencies: Vec<u64> = samples.iter().map(|s| s.latency).filter(|&l| l < 150).collect();
    let h = Histogram::from_latencies(1, &latencies)?;
    print!("{}", h.render_ascii(50));
    println!("modes {:?}, base {:#x}", h.modes(), report.detected_base.unwrap_or(0));
    Ok(())
}
