use std::io::Write;
use std::sync::Arc;

use super::{Backend, Prober, Vendor};
use crate::error::{Error, Result};
use crate::sim::{ElementMask, MicroarchState, OpKind, ProbeError, ProbeSample, TimingProfile};
use crate::space::{AddressSpace, Perm};

/// Kernel pages the simulated system keeps executing on its own.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Background {
    pub pages: Vec<u64>,
    /// Re-touch after this many probes; 0 re-touches only after evictions.
    pub every: u64,
}

/// [`Prober`] over the microarchitectural simulator.
#[derive(Debug, Clone)]
pub struct SimProber {
    state: MicroarchState,
    issued: u64,
    background: Option<Background>,
    since_background: u64,
}

impl SimProber {
    pub fn new(space: Arc<AddressSpace>, profile: TimingProfile, noise_seed: u64) -> Self {
        SimProber::from_state(MicroarchState::new(space, profile, noise_seed))
    }

    pub fn from_state(state: MicroarchState) -> Self {
        SimProber {
            state,
            issued: 0,
            background: None,
            since_background: 0,
        }
    }

    pub fn with_background(mut self, bg: Background) -> Result<Self> {
        self.state.touch_kernel_pages(&bg.pages)?;
        self.background = Some(bg);
        Ok(self)
    }

    pub fn with_trace(mut self) -> Self {
        self.state.enable_trace();
        self
    }

    pub fn state(&self) -> &MicroarchState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut MicroarchState {
        &mut self.state
    }

    pub fn space(&self) -> &Arc<AddressSpace> {
        self.state.space()
    }

    pub fn profile(&self) -> &TimingProfile {
        self.state.profile()
    }

    pub fn take_trace(&mut self) -> Vec<ProbeSample> {
        self.state.take_trace()
    }

    fn run_background(&mut self) {
        if let Some(bg) = &self.background {
            self.state
                .touch_kernel_pages(&bg.pages)
                .expect("background pages were validated");
        }
        self.since_background = 0;
    }
}

impl Prober for SimProber {
    fn backend(&self) -> Backend {
        Backend::Simulator
    }

    fn vendor(&self) -> Vendor {
        if self.state.profile().amd_mode {
            Vendor::Amd
        } else {
            Vendor::Intel
        }
    }

    fn probe(&mut self, addr: u64, kind: OpKind) -> Result<u64> {
        let sample = self
            .state
            .masked_probe(addr, kind, ElementMask::ZERO)
            .map_err(|e| match e {
                ProbeError::NonCanonical(a) => Error::NonCanonical(a),
                ProbeError::Fault { addr } => {
                    Error::Backend(format!("zero-mask probe faulted at {addr:#x}"))
                }
            })?;
        self.issued += 1;
        if let Some(every) = self.background.as_ref().map(|b| b.every) {
            self.since_background += 1;
            if every > 0 && self.since_background >= every {
                self.run_background();
            }
        }
        Ok(sample.latency)
    }

    fn evict_tlb(&mut self) -> Result<()> {
        self.state.evict_tlb();
        if self.background.is_some() {
            self.run_background();
        }
        Ok(())
    }

    fn alloc_calibration_page(&mut self, perm: Perm, dirty: bool) -> Result<u64> {
        Ok(self.state.alloc_page(perm, dirty))
    }

    fn probes_issued(&self) -> u64 {
        self.issued
    }

    fn kernel_activity(&mut self, pages: &[u64]) -> Result<()> {
        self.state.touch_kernel_pages(pages)
    }
}

/// Writes probe samples as CSV rows `addr,kind,latency,tlb_hit,terminal_level`.
pub fn write_trace<W: Write>(out: W, samples: &[ProbeSample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["addr", "kind", "latency", "tlb_hit", "terminal_level"])?;
    for s in samples {
        w.write_record([
            format!("{:#018x}", s.addr),
            s.kind.as_str().to_string(),
            s.latency.to_string(),
            s.tlb_hit.to_string(),
            s.terminal_level.name().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
