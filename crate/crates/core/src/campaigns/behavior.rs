use serde::{Deserialize, Serialize};

use crate::addr::PAGE_4K;
use crate::attacks::{tlb_attack, TlbSeparator};
use crate::error::Result;
use crate::prober::Prober;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tick {
    pub index: usize,
    pub mean_latency: f64,
    pub active: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BehaviorTrace {
    pub ticks: Vec<Tick>,
}

impl BehaviorTrace {
    pub fn verdicts(&self) -> Vec<bool> {
        self.ticks.iter().map(|t| t.active).collect()
    }

    /// F1 score of the active verdicts against `truth`. Two all-idle
    /// sequences score 1.
    pub fn f1(&self, truth: &[bool]) -> f64 {
        let (mut tp, mut fp, mut fn_) = (0u32, 0u32, 0u32);
        for (t, &want) in self.ticks.iter().zip(truth) {
            match (t.active, want) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        if tp + fp + fn_ == 0 {
            return 1.0;
        }
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// `ticks` booleans alternating between `period` active and `period` idle,
/// starting active.
pub fn square_wave(period: usize, ticks: usize) -> Vec<bool> {
    let period = period.max(1);
    (0..ticks).map(|i| (i / period).is_multiple_of(2)).collect()
}

/// Spy loop over the first `n_pages` pages of a kernel module.
///
/// Each tick optionally replays kernel activity (`driver` returns whether
/// the victim runs on that tick), runs the TLB attack over the pages, scores
/// the mean latency against `separator`, then evicts to reset the TLB.
pub fn monitor_behavior<P: Prober + ?Sized>(
    prober: &mut P,
    module_base: u64,
    n_pages: usize,
    ticks: usize,
    separator: &TlbSeparator,
    driver: Option<&dyn Fn(usize) -> bool>,
) -> Result<BehaviorTrace> {
    let pages: Vec<u64> = (0..n_pages as u64).map(|i| module_base + i * PAGE_4K).collect();
    let mut trace = BehaviorTrace::default();
    prober.evict_tlb()?;
    for index in 0..ticks {
        if driver.is_some_and(|d| d(index)) {
            prober.kernel_activity(&pages)?;
        }
        let v = tlb_attack(prober, &pages, separator)?;
        let mean_latency = v.iter().map(|x| x.latency as f64).sum::<f64>() / v.len().max(1) as f64;
        trace.ticks.push(Tick { index, mean_latency, active: mean_latency < separator.value });
        prober.evict_tlb()?;
    }
    Ok(trace)
}
