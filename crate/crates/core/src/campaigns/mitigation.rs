use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::addr::{KERNEL_TEXT_SLOTS, KERNEL_TEXT_START, PAGE_2M};
use crate::attacks::{page_table_attack, tlb_attack, TlbSeparator};
use crate::error::{Error, Result};
use crate::prober::{calibrate_threshold, MeasurePolicy, Prober};

use super::{Campaign, DetectedRegion, Outcome, ScanReport, THRESHOLD_SAMPLES};

/// Samples for the TLB hit/miss separator.
const SEPARATOR_SAMPLES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Primitive {
    PageTable,
    Tlb,
}

impl Primitive {
    pub fn name(self) -> &'static str {
        match self {
            Primitive::PageTable => "page-table",
            Primitive::Tlb => "tlb",
        }
    }

    pub fn campaign(self) -> Campaign {
        match self {
            Primitive::PageTable => Campaign::MitigationPageTable,
            Primitive::Tlb => Campaign::MitigationTlb,
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Primitive> {
        match s {
            "page-table" => Ok(Primitive::PageTable),
            "tlb" => Ok(Primitive::Tlb),
            _ => Err(Error::Usage(format!("unknown primitive `{s}` (expected page-table or tlb)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    /// Mean of the true-positive and true-negative rates. A class with no
    /// members is left out of the mean.
    pub fn balanced_accuracy(&self) -> f64 {
        let rates: Vec<f64> = [(self.tp, self.fn_), (self.tn, self.fp)]
            .into_iter()
            .filter(|&(ok, bad)| ok + bad > 0)
            .map(|(ok, bad)| ok as f64 / (ok + bad) as f64)
            .collect();
        if rates.is_empty() {
            return 1.0;
        }
        rates.iter().sum::<f64>() / rates.len() as f64
    }
}

/// Runs a kernel-slot scan built on `primitive` and scores each of the 512
/// slot verdicts against `kernel`, the genuine image extent.
///
/// The TLB variant takes the first slot the page-table attack reports as
/// mapped for its hit/miss reference and probes every slot once per round.
/// Second-of-two runs two rounds and keeps the faster reading; median-of-k
/// runs `k` rounds and keeps the median. A slot is kernel when that reading
/// is a TLB hit. Without a calibrated hit/miss gap no slot is reported.
pub fn evaluate_mitigation<P: Prober + ?Sized>(
    prober: &mut P,
    kernel: Option<Range<u64>>,
    primitive: Primitive,
    policy: MeasurePolicy,
) -> Result<ScanReport> {
    policy.validate()?;
    let t0 = Instant::now();
    let mut report = ScanReport::new(primitive.campaign());
    let slots: Vec<u64> = (0..KERNEL_TEXT_SLOTS).map(|i| KERNEL_TEXT_START + i * PAGE_2M).collect();
    let threshold = calibrate_threshold(prober, THRESHOLD_SAMPLES)?;

    let start = prober.probes_issued();
    let mapped = page_table_attack(prober, &slots, &threshold, policy)?;
    let (predicted, excluded) = match primitive {
        Primitive::PageTable => (mapped.iter().map(|v| v.is_mapped()).collect(), 0),
        Primitive::Tlb => match mapped.iter().find(|v| v.is_mapped()) {
            None => (vec![false; slots.len()], 0),
            Some(reference) => tlb_verdicts(prober, &slots, reference.addr, policy, &mut report)?,
        },
    };
    report.probes_issued = prober.probes_issued() - start - excluded;
    report.slots_probed = slots.len() as u64;

    let mut confusion = Confusion::default();
    for (&a, &p) in slots.iter().zip(&predicted) {
        confusion.add(p, kernel.as_ref().is_some_and(|k| k.contains(&a)));
        if p {
            report.regions.push(DetectedRegion::new(a, PAGE_2M));
        }
    }
    report.detected_base = report.regions.first().map(|r| r.base);
    report.outcome = if report.detected_base.is_some() { Outcome::Found } else { Outcome::NotFound };
    report.per_trial_accuracy = Some(confusion.balanced_accuracy());
    report.elapsed = t0.elapsed();
    Ok(report)
}

/// TLB-hit verdicts per slot and the calibration probes spent.
fn tlb_verdicts<P: Prober + ?Sized>(
    prober: &mut P,
    slots: &[u64],
    reference: u64,
    policy: MeasurePolicy,
    report: &mut ScanReport,
) -> Result<(Vec<bool>, u64)> {
    let used = prober.probes_issued();
    let sep = TlbSeparator::calibrate(prober, reference, SEPARATOR_SAMPLES)?;
    let calibration = prober.probes_issued() - used;
    if !sep.has_signal() {
        report.note = Some(format!("no TLB signal: hit {:.1} vs miss {:.1} cycles", sep.hit_mean, sep.miss_mean));
        return Ok((vec![false; slots.len()], calibration));
    }
    report.note = Some(format!("tlb separator {:.1}", sep.value));
    let rounds = match policy {
        MeasurePolicy::SecondOfTwo => 2,
        MeasurePolicy::MedianOfK { k } => k as usize,
    };
    let mut lat = vec![Vec::with_capacity(rounds); slots.len()];
    for _ in 0..rounds {
        prober.evict_tlb()?;
        for (i, v) in tlb_attack(prober, slots, &sep)?.into_iter().enumerate() {
            lat[i].push(v.latency);
        }
    }
    let verdicts = lat
        .into_iter()
        .map(|mut l| {
            l.sort_unstable();
            let pick = match policy {
                MeasurePolicy::SecondOfTwo => l[0],
                MeasurePolicy::MedianOfK { .. } => l[l.len() / 2],
            };
            sep.is_hit(pick)
        })
        .collect();
    Ok((verdicts, calibration))
}
