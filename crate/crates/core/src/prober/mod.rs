//! Probing contract shared by every attack, measurement policies and
//! threshold calibration.

#[cfg(all(feature = "native", target_arch = "x86_64", target_os = "linux"))]
mod native;
mod sim;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::OpKind;
use crate::space::Perm;

#[cfg(all(feature = "native", target_arch = "x86_64", target_os = "linux"))]
pub use native::NativeProber;
pub use sim::{write_trace, Background, SimProber};

/// Environment variable consulted when no backend is given explicitly.
pub const BACKEND_ENV: &str = "ASLRLAB_BACKEND";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Backend {
    Simulator,
    NativeHardware,
}

impl Backend {
    pub fn as_str(self) -> &'static str {
        match self {
            Backend::Simulator => "sim",
            Backend::NativeHardware => "native",
        }
    }

    /// Reads [`BACKEND_ENV`], defaulting to the simulator.
    pub fn from_env() -> Result<Backend> {
        match std::env::var(BACKEND_ENV) {
            Ok(v) if !v.is_empty() => v.parse(),
            _ => Ok(Backend::Simulator),
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Backend> {
        match s {
            "sim" | "simulator" => Ok(Backend::Simulator),
            "native" | "hw" => Ok(Backend::NativeHardware),
            _ => Err(Error::Usage(format!("unknown backend `{s}` (expected sim or native)"))),
        }
    }
}

/// CPU family whose TLB behavior a campaign must account for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Vendor {
    Intel,
    /// User-mode probes never fill or hit kernel TLB entries.
    Amd,
}

/// A source of timed all-zero-mask probes.
pub trait Prober {
    fn backend(&self) -> Backend;

    fn vendor(&self) -> Vendor;

    /// Times one masked operation with an all-zero mask. Never faults.
    fn probe(&mut self, addr: u64, kind: OpKind) -> Result<u64>;

    /// Displaces every kernel translation from the TLB.
    fn evict_tlb(&mut self) -> Result<()>;

    /// Maps a fresh attacker-owned page.
    fn alloc_calibration_page(&mut self, perm: Perm, dirty: bool) -> Result<u64>;

    fn probes_issued(&self) -> u64;

    /// Makes the kernel execute on `pages`, filling their translations.
    /// Only backends that can drive the kernel support this.
    fn kernel_activity(&mut self, pages: &[u64]) -> Result<()> {
        let _ = pages;
        Err(Error::Capability(format!(
            "the {} backend cannot inject kernel activity",
            self.backend()
        )))
    }
}

impl<P: Prober + ?Sized> Prober for &mut P {
    fn backend(&self) -> Backend {
        (**self).backend()
    }
    fn vendor(&self) -> Vendor {
        (**self).vendor()
    }
    fn probe(&mut self, addr: u64, kind: OpKind) -> Result<u64> {
        (**self).probe(addr, kind)
    }
    fn evict_tlb(&mut self) -> Result<()> {
        (**self).evict_tlb()
    }
    fn alloc_calibration_page(&mut self, perm: Perm, dirty: bool) -> Result<u64> {
        (**self).alloc_calibration_page(perm, dirty)
    }
    fn probes_issued(&self) -> u64 {
        (**self).probes_issued()
    }
    fn kernel_activity(&mut self, pages: &[u64]) -> Result<()> {
        (**self).kernel_activity(pages)
    }
}

/// How repeated probes of one address are folded into a single latency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
#[derive(Default)]
pub enum MeasurePolicy {
    /// Probe twice and keep the second timing.
    #[default]
    SecondOfTwo,
    /// Median of `k` probes.
    MedianOfK { k: u32 },
}


impl MeasurePolicy {
    pub const DEFAULT_K: u32 = 7;

    pub fn median(k: u32) -> Result<MeasurePolicy> {
        let p = MeasurePolicy::MedianOfK { k };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            MeasurePolicy::MedianOfK { k } if k < 3 || k % 2 == 0 => {
                Err(Error::Usage(format!("median policy needs an odd k >= 3, got {k}")))
            }
            _ => Ok(()),
        }
    }

    /// Probes issued per measurement.
    pub fn multiplier(&self) -> u64 {
        match *self {
            MeasurePolicy::SecondOfTwo => 2,
            MeasurePolicy::MedianOfK { k } => k as u64,
        }
    }
}

impl fmt::Display for MeasurePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MeasurePolicy::SecondOfTwo => f.write_str("second-of-two"),
            MeasurePolicy::MedianOfK { k } => write!(f, "median-of-{k}"),
        }
    }
}

impl FromStr for MeasurePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<MeasurePolicy> {
        if s == "second-of-two" || s == "second" {
            return Ok(MeasurePolicy::SecondOfTwo);
        }
        let k = s
            .strip_prefix("median-of-")
            .or_else(|| s.strip_prefix("median"))
            .and_then(|k| if k.is_empty() { Some(Self::DEFAULT_K) } else { k.parse().ok() })
            .ok_or_else(|| Error::Usage(format!("unknown measure policy `{s}`")))?;
        MeasurePolicy::median(k)
    }
}

/// Folds probes of `addr` according to `policy`.
pub fn measure<P: Prober + ?Sized>(
    prober: &mut P,
    addr: u64,
    kind: OpKind,
    policy: MeasurePolicy,
) -> Result<u64> {
    match policy {
        MeasurePolicy::SecondOfTwo => {
            prober.probe(addr, kind)?;
            prober.probe(addr, kind)
        }
        MeasurePolicy::MedianOfK { k } => {
            policy.validate()?;
            let mut v = (0..k)
                .map(|_| prober.probe(addr, kind))
                .collect::<Result<Vec<u64>>>()?;
            v.sort_unstable();
            Ok(v[v.len() / 2])
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThresholdSource {
    StoreOnUserMapped,
    Manual,
}

/// Mapped/unmapped separator: latencies strictly below `value` are mapped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub value: f64,
    pub source: ThresholdSource,
    pub sample_count: usize,
}

impl Threshold {
    pub fn manual(value: f64) -> Result<Threshold> {
        if value.is_nan() || value <= 0.0 {
            return Err(Error::Usage(format!("threshold must be positive, got {value}")));
        }
        Ok(Threshold {
            value,
            source: ThresholdSource::Manual,
            sample_count: 0,
        })
    }

    pub fn is_below(&self, latency: u64) -> bool {
        (latency as f64) < self.value
    }
}

pub const MIN_CALIBRATION_SAMPLES: usize = 100;

/// Mean masked-store latency on a writable user page after one warm-up store.
pub fn calibrate_threshold<P: Prober + ?Sized>(prober: &mut P, n: usize) -> Result<Threshold> {
    if n < MIN_CALIBRATION_SAMPLES {
        return Err(Error::Usage(format!(
            "threshold calibration needs at least {MIN_CALIBRATION_SAMPLES} samples, got {n}"
        )));
    }
    let page = prober.alloc_calibration_page(Perm::ReadWrite, false)?;
    prober.probe(page, OpKind::MaskedStore)?;
    let mut sum = 0u64;
    for _ in 0..n {
        sum += prober.probe(page, OpKind::MaskedStore)?;
    }
    Ok(Threshold {
        value: sum as f64 / n as f64,
        source: ThresholdSource::StoreOnUserMapped,
        sample_count: n,
    })
}

/// True when this build and CPU can run the hardware backend.
pub fn native_probe_available() -> bool {
    #[cfg(all(feature = "native", target_arch = "x86_64", target_os = "linux"))]
    {
        native::check_cpu().is_ok()
    }
    #[cfg(not(all(feature = "native", target_arch = "x86_64", target_os = "linux")))]
    {
        false
    }
}
