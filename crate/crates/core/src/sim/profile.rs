use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-CPU cycle costs of a masked load/store probe.
///
/// A probe costs `base + assist + translation + noise`, where translation is
/// `tlb_hit_load` on a TLB hit and `tlb_miss_walk` plus the walk terms on a
/// miss. The shipped presets are solved from these anchor means:
///
/// | preset       | anchor                                                    |
/// |--------------|-----------------------------------------------------------|
/// | `alderlake`  | kernel mapped 93, kernel unmapped 107                     |
/// | `icelake`    | user mapped load 13, kernel load 92, kernel store 76      |
/// | `coffeelake` | kernel load after TLB eviction 381, on TLB hit 147        |
/// | `zen3`       | no anchors; kernel probes always walk                     |
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingProfile {
    pub name: String,
    pub base_load: u64,
    pub base_store: u64,
    /// Microcode assist on an invalid or inaccessible load.
    pub assist_load: u64,
    /// Microcode assist on an invalid, inaccessible or read-only store.
    pub assist_store: u64,
    /// Assist paid by a store to a writable page whose dirty bit is clear.
    pub dirty_assist: u64,
    pub walk_per_level: u64,
    /// Extra cost of a walk that reaches the PT level (never cached in the
    /// paging-structure caches).
    pub pt_extra: u64,
    /// Extra cost of a walk that ends on a non-present entry.
    pub nonpresent_extra: u64,
    pub tlb_hit_load: u64,
    pub tlb_miss_walk: u64,
    pub noise_sigma: f64,
    pub outlier_prob: f64,
    pub outlier_cost: u64,
    /// Kernel translations are never served from the TLB to user-mode probes.
    pub amd_mode: bool,
}

const PROFILES_JSON: &str = include_str!("../../data/profiles.json");

impl TimingProfile {
    pub fn presets() -> Vec<TimingProfile> {
        serde_json::from_str(PROFILES_JSON).expect("bundled profiles are valid JSON")
    }

    pub fn by_name(name: &str) -> Result<TimingProfile> {
        Self::presets()
            .into_iter()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Config(format!("unknown timing profile `{name}`")))
    }

    pub fn alderlake() -> Self {
        Self::by_name("alderlake").unwrap()
    }

    pub fn icelake() -> Self {
        Self::by_name("icelake").unwrap()
    }

    pub fn coffeelake() -> Self {
        Self::by_name("coffeelake").unwrap()
    }

    pub fn zen3() -> Self {
        Self::by_name("zen3").unwrap()
    }

    pub fn from_json(text: &str) -> Result<Vec<TimingProfile>> {
        let v: Vec<TimingProfile> = serde_json::from_str(text)?;
        for p in &v {
            p.validate()?;
        }
        Ok(v)
    }

    pub fn without_noise(mut self) -> Self {
        self.noise_sigma = 0.0;
        self.outlier_prob = 0.0;
        self
    }

    pub fn with_noise_sigma(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn is_noiseless(&self) -> bool {
        self.noise_sigma == 0.0 && self.outlier_prob == 0.0
    }

    pub fn base(&self, store: bool) -> u64 {
        if store {
            self.base_store
        } else {
            self.base_load
        }
    }

    pub fn assist(&self, store: bool) -> u64 {
        if store {
            self.assist_store
        } else {
            self.assist_load
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 || !(0.0..=1.0).contains(&self.outlier_prob) {
            return Err(Error::Config(format!("profile {}: invalid noise parameters", self.name)));
        }
        if self.base_store >= self.base_load + self.assist_load {
            return Err(Error::Config(format!(
                "profile {}: base_store must stay below base_load + assist_load",
                self.name
            )));
        }
        if self.tlb_miss_walk < self.tlb_hit_load {
            return Err(Error::Config(format!(
                "profile {}: a TLB miss cannot be cheaper than a hit",
                self.name
            )));
        }
        Ok(())
    }
}
