use crate::attacks::MappingVerdict;
use crate::error::Result;
use crate::prober::{calibrate_threshold, measure, MeasurePolicy, Prober, Threshold};
use crate::sim::OpKind;

use super::ScanReport;

/// Store samples averaged into the mapped/unmapped threshold.
pub const THRESHOLD_SAMPLES: usize = 1000;
/// Extra measurements granted to an unmapped verdict next to a mapped one.
pub const RETRIES: u32 = 3;

/// Threshold-based scanning with boundary re-measurement.
///
/// Noise only ever adds latency, so a mapped page can look unmapped but not
/// the reverse. Unmapped verdicts that border a mapped one are measured
/// again up to [`RETRIES`] times and flip to mapped on the first fast result.
pub(super) struct Scanner<'a, P: Prober + ?Sized> {
    pub prober: &'a mut P,
    pub policy: MeasurePolicy,
    pub threshold: Threshold,
    slots: u64,
    remeasured: u64,
    start: u64,
}

impl<'a, P: Prober + ?Sized> Scanner<'a, P> {
    pub fn calibrated(prober: &'a mut P, policy: MeasurePolicy) -> Result<Self> {
        policy.validate()?;
        let threshold = calibrate_threshold(prober, THRESHOLD_SAMPLES)?;
        Ok(Scanner::with_threshold(prober, policy, threshold))
    }

    pub fn with_threshold(prober: &'a mut P, policy: MeasurePolicy, threshold: Threshold) -> Self {
        let start = prober.probes_issued();
        Scanner { prober, policy, threshold, slots: 0, remeasured: 0, start }
    }

    pub fn measure(&mut self, addr: u64) -> Result<MappingVerdict> {
        self.slots += 1;
        let l = measure(self.prober, addr, OpKind::MaskedLoad, self.policy)?;
        Ok(MappingVerdict::classify(addr, l, &self.threshold))
    }

    /// Re-measures an unmapped verdict; returns the first mapped result.
    pub fn remeasure(&mut self, addr: u64) -> Result<Option<MappingVerdict>> {
        for _ in 0..RETRIES {
            self.remeasured += 1;
            let l = measure(self.prober, addr, OpKind::MaskedLoad, self.policy)?;
            let v = MappingVerdict::classify(addr, l, &self.threshold);
            if v.is_mapped() {
                return Ok(Some(v));
            }
        }
        Ok(None)
    }

    /// Measures every address, then re-measures unmapped verdicts that
    /// border mapped ones until nothing changes.
    pub fn sweep(&mut self, addrs: &[u64]) -> Result<Vec<MappingVerdict>> {
        let mut v = addrs.iter().map(|&a| self.measure(a)).collect::<Result<Vec<_>>>()?;
        let mut tried = vec![false; v.len()];
        loop {
            let mut changed = false;
            for i in 0..v.len() {
                if v[i].is_mapped() || tried[i] {
                    continue;
                }
                let left = i > 0 && v[i - 1].is_mapped();
                let right = i + 1 < v.len() && v[i + 1].is_mapped();
                if !(left || right) {
                    continue;
                }
                tried[i] = true;
                if let Some(m) = self.remeasure(v[i].addr)? {
                    v[i] = m;
                    changed = true;
                }
            }
            if !changed {
                return Ok(v);
            }
        }
    }

    /// Scans `addr_of(0..count)` in order and returns `(start, len)` of the
    /// first run of mapped slots that `accept(len, reaches_end)` takes. When a
    /// run closes its start is extended downwards while the slot below
    /// re-measures as mapped, and the extended run is judged.
    pub fn first_run(
        &mut self,
        count: usize,
        addr_of: impl Fn(usize) -> u64,
        accept: impl Fn(usize, bool) -> bool,
    ) -> Result<Option<(usize, usize)>> {
        let mut start = 0;
        let mut len = 0;
        for i in 0..count {
            let mut mapped = self.measure(addr_of(i))?.is_mapped();
            if !mapped && len > 0 {
                mapped = self.remeasure(addr_of(i))?.is_some();
            }
            if mapped {
                if len == 0 {
                    start = i;
                }
                len += 1;
                if i + 1 == count {
                    let run = self.extend_down(start, len, &addr_of)?;
                    if accept(run.1, true) {
                        return Ok(Some(run));
                    }
                }
            } else if len > 0 {
                let run = self.extend_down(start, len, &addr_of)?;
                if accept(run.1, false) {
                    return Ok(Some(run));
                }
                len = 0;
            }
        }
        Ok(None)
    }

    fn extend_down(
        &mut self,
        mut start: usize,
        mut len: usize,
        addr_of: &impl Fn(usize) -> u64,
    ) -> Result<(usize, usize)> {
        while start > 0 && self.remeasure(addr_of(start - 1))?.is_some() {
            start -= 1;
            len += 1;
        }
        Ok((start, len))
    }

    pub fn finish(self, report: &mut ScanReport) {
        report.probes_issued = self.prober.probes_issued() - self.start;
        report.slots_probed = self.slots;
        report.remeasurements = self.remeasured;
    }
}

/// Maximal runs of consecutive mapped verdicts as `(start, len)` index pairs.
pub(super) fn mapped_runs(v: &[MappingVerdict]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut i = 0;
    while i < v.len() {
        if v[i].is_mapped() {
            let s = i;
            while i < v.len() && v[i].is_mapped() {
                i += 1;
            }
            runs.push((s, i - s));
        } else {
            i += 1;
        }
    }
    runs
}
