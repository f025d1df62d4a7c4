//! Raw masked load and store latencies for each kind of page, the timing
//! differences every attack builds on.

use std::sync::Arc;

use aslrlab::addr::{KERNEL_TEXT_START, PAGE_2M};
use aslrlab::error::Result;
use aslrlab::prober::{Prober, SimProber};
use aslrlab::sim::{OpKind, TimingProfile};
use aslrlab::space::{AddressSpace, Perm, ScenarioKind, ScenarioSpec};

fn mean<P: Prober>(p: &mut P, addr: u64, kind: OpKind) -> Result<f64> {
    let mut total = 0;
    for _ in 0..50 {
        p.probe(addr, kind)?;
        total += p.probe(addr, kind)?;
    }
    Ok(total as f64 / 50.0)
}

fn main() -> Result<()> {
    let space = Arc::new(AddressSpace::build(ScenarioSpec::new(ScenarioKind::LinuxDefault, 1))?);
    let base = space.truth().kernel_base.unwrap_or(KERNEL_TEXT_START);
    let unmapped = if base > KERNEL_TEXT_START { KERNEL_TEXT_START } else { base + 256 * PAGE_2M };
    let mut p = SimProber::new(space, TimingProfile::alderlake().without_noise(), 0);

    println!("{:<16} {:>8} {:>8}", "page", "load", "store");
    let kernel = [("kernel mapped", base), ("kernel unmapped", unmapped)];
    for (name, addr) in kernel {
        println!("{name:<16} {:>8.1} {:>8.1}", mean(&mut p, addr, OpKind::MaskedLoad)?, mean(&mut p, addr, OpKind::MaskedStore)?);
    }
    for perm in [Perm::ReadWrite, Perm::ReadOnly, Perm::ReadExec, Perm::None] {
        let addr = p.alloc_calibration_page(perm, true)?;
        println!(
            "user {:<11} {:>8.1} {:>8.1}",
            perm.as_str(),
            mean(&mut p, addr, OpKind::MaskedLoad)?,
            mean(&mut p, addr, OpKind::MaskedStore)?
        );
    }
    Ok(())
}
