//! End-to-end attacks composed from the primitives.
//!
//! Every campaign returns a [`ScanReport`]. Calibration probes are not
//! counted in `probes_issued`; `slots_probed` and `remeasurements` account
//! for the rest, so `probes_issued` equals their sum times the policy
//! multiplier for the threshold-based scans.

mod behavior;
mod kernel;
mod mitigation;
mod modules;
mod scan;
mod userspace;

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use behavior::{monitor_behavior, square_wave, BehaviorTrace, Tick};
pub use kernel::{
    amd_reference_bands, amd_reference_fixtures, scan_amd_kernel, scan_kernel_base, scan_kpti,
    scan_kvas, scan_windows, scan_windows_refined,
};
pub use mitigation::{evaluate_mitigation, Confusion, Primitive};
pub use modules::scan_modules;
pub use scan::{RETRIES, THRESHOLD_SAMPLES};
pub use userspace::{fingerprint_libraries, sweep_userspace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Campaign {
    ScanBase,
    ScanModules,
    ScanKpti,
    ScanAmd,
    ScanWindows,
    ScanKvas,
    SweepUserspace,
    Fingerprint,
    Monitor,
    MitigationPageTable,
    MitigationTlb,
}

impl Campaign {
    pub const ALL: [Campaign; 11] = [
        Campaign::ScanBase,
        Campaign::ScanModules,
        Campaign::ScanKpti,
        Campaign::ScanAmd,
        Campaign::ScanWindows,
        Campaign::ScanKvas,
        Campaign::SweepUserspace,
        Campaign::Fingerprint,
        Campaign::Monitor,
        Campaign::MitigationPageTable,
        Campaign::MitigationTlb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Campaign::ScanBase => "scan-base",
            Campaign::ScanModules => "scan-modules",
            Campaign::ScanKpti => "scan-kpti",
            Campaign::ScanAmd => "scan-amd",
            Campaign::ScanWindows => "scan-windows",
            Campaign::ScanKvas => "scan-kvas",
            Campaign::SweepUserspace => "sweep-userspace",
            Campaign::Fingerprint => "fingerprint",
            Campaign::Monitor => "monitor",
            Campaign::MitigationPageTable => "mitigation-page-table",
            Campaign::MitigationTlb => "mitigation-tlb",
        }
    }
}

impl fmt::Display for Campaign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Campaign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Campaign> {
        Campaign::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Campaign::ALL.iter().map(|c| c.name()).collect();
                Error::Usage(format!("unknown campaign `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Found,
    NotFound,
    Degraded,
}

/// A detected mapping with the catalog names its size or signature matches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectedRegion {
    pub base: u64,
    pub size: u64,
    pub labels: Vec<String>,
}

impl DetectedRegion {
    pub fn new(base: u64, size: u64) -> Self {
        DetectedRegion { base, size, labels: Vec::new() }
    }

    pub fn labeled(mut self, labels: Vec<String>) -> Self {
        self.labels = labels;
        self
    }

    /// Exactly one candidate name.
    pub fn identified(&self) -> Option<&str> {
        match self.labels.as_slice() {
            [one] => Some(one),
            _ => None,
        }
    }

    pub fn end(&self) -> u64 {
        self.base + self.size
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub campaign: Campaign,
    pub outcome: Outcome,
    pub detected_base: Option<u64>,
    pub regions: Vec<DetectedRegion>,
    /// Filled in when the report is scored against ground truth.
    pub per_trial_accuracy: Option<f64>,
    pub probes_issued: u64,
    pub slots_probed: u64,
    pub remeasurements: u64,
    pub note: Option<String>,
    /// Wall time; excluded from serialized output so reports are reproducible.
    #[serde(skip)]
    pub elapsed: Duration,
}

impl ScanReport {
    pub fn new(campaign: Campaign) -> Self {
        ScanReport {
            campaign,
            outcome: Outcome::NotFound,
            detected_base: None,
            regions: Vec::new(),
            per_trial_accuracy: None,
            probes_issued: 0,
            slots_probed: 0,
            remeasurements: 0,
            note: None,
            elapsed: Duration::ZERO,
        }
    }

    pub fn is_found(&self) -> bool {
        self.outcome == Outcome::Found
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<ScanReport> {
        Ok(serde_json::from_str(text)?)
    }

    /// One row per detected region: `base,size,labels`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["base", "size", "labels"])?;
        for r in &self.regions {
            w.write_record([format!("{:#018x}", r.base), r.size.to_string(), r.labels.join("|")])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests;
