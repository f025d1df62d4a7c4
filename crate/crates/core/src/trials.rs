//! Monte-Carlo trials: many independent (layout seed, noise seed) cells of
//! one campaign, scored against ground truth and aggregated.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::addr::{PAGE_2M, PAGE_4K};
use crate::attacks::{LevelBands, TlbSeparator};
use crate::campaigns::{
    amd_reference_bands, evaluate_mitigation, fingerprint_libraries, monitor_behavior, scan_amd_kernel,
    scan_kernel_base, scan_kpti, scan_kvas, scan_modules, scan_windows, square_wave, sweep_userspace, Campaign,
    Outcome, Primitive, ScanReport,
};
use crate::error::{Error, Result};
use crate::prober::{Background, MeasurePolicy, Prober, SimProber};
use crate::rng::derive_seed;
use crate::sim::TimingProfile;
use crate::sim::ProbeSample;
use crate::space::{names_with_pages, AddressSpace, GroundTruth, ScenarioKind, ScenarioSpec};

/// Ticks and half-period of the behavior monitor's square wave.
pub const MONITOR_TICKS: usize = 100;
pub const MONITOR_PERIOD: usize = 20;
/// Module pages watched by the behavior monitor.
pub const MONITOR_PAGES: usize = 10;
/// Background re-touch interval for TLB-based mitigation runs.
pub const BACKGROUND_EVERY: u64 = 64;
const BAND_SAMPLES: usize = 200;
const SEPARATOR_SAMPLES: usize = 200;

fn default_profile() -> String {
    "alderlake".into()
}

/// On-disk scenario: a layout spec plus the timing profile to probe it with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    #[serde(default = "default_profile")]
    pub profile: String,
    #[serde(flatten)]
    pub spec: ScenarioSpec,
}

impl ScenarioFile {
    pub fn load(path: &Path) -> Result<ScenarioFile> {
        let text = std::fs::read_to_string(path)?;
        ScenarioFile::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<ScenarioFile> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn timing_profile(&self) -> Result<TimingProfile> {
        TimingProfile::by_name(&self.profile)
    }
}

/// One campaign on one scenario family; trials vary the seeds.
#[derive(Debug, Clone)]
pub struct Cell {
    pub target: String,
    pub spec: ScenarioSpec,
    pub profile: TimingProfile,
    pub campaign: Campaign,
    pub policy: MeasurePolicy,
}

impl Cell {
    pub fn new(spec: ScenarioSpec, profile: TimingProfile, campaign: Campaign) -> Self {
        Cell {
            target: format!("{} {}", profile.name, campaign),
            spec,
            profile,
            campaign,
            policy: MeasurePolicy::default(),
        }
    }

    pub fn named(mut self, target: impl Into<String>) -> Self {
        self.target = target.into();
        self
    }

    pub fn with_policy(mut self, policy: MeasurePolicy) -> Self {
        self.policy = policy;
        self
    }

    /// Default cell for `campaign`: its intended scenario kind with the
    /// profile it needs.
    pub fn for_campaign(campaign: Campaign) -> Cell {
        let profile = match campaign {
            Campaign::ScanAmd => TimingProfile::zen3(),
            Campaign::Monitor => TimingProfile::coffeelake(),
            _ => TimingProfile::alderlake(),
        };
        Cell::new(ScenarioSpec::new(Cell::default_kind(campaign), 0), profile, campaign)
    }

    /// Scenario kind each campaign is meant for.
    pub fn default_kind(campaign: Campaign) -> ScenarioKind {
        match campaign {
            Campaign::ScanBase | Campaign::ScanModules | Campaign::Monitor | Campaign::MitigationPageTable => {
                ScenarioKind::LinuxDefault
            }
            Campaign::MitigationTlb => ScenarioKind::LinuxFlare,
            Campaign::ScanKpti => ScenarioKind::LinuxKpti,
            Campaign::ScanAmd => ScenarioKind::AmdLinux,
            Campaign::ScanWindows => ScenarioKind::Windows,
            Campaign::ScanKvas => ScenarioKind::WindowsKvas,
            Campaign::SweepUserspace | Campaign::Fingerprint => ScenarioKind::Userspace,
        }
    }
}

/// Seeds of trial `index` under `seed`: `(layout, noise)`.
pub fn trial_seeds(seed: u64, index: u64) -> (u64, u64) {
    (derive_seed(seed, 2 * index), derive_seed(seed, 2 * index + 1))
}

/// Shared per-cell inputs that are measured once, not per trial.
#[derive(Debug, Clone, Default)]
pub struct Prepared {
    pub bands: Option<LevelBands>,
}

pub fn prepare(cell: &Cell, seed: u64) -> Result<Prepared> {
    let bands = match cell.campaign {
        Campaign::ScanAmd => Some(amd_reference_bands(&cell.profile, BAND_SAMPLES, derive_seed(seed, u64::MAX))?),
        _ => None,
    };
    Ok(Prepared { bands })
}

/// Builds the trial's layout and prober, runs the campaign and scores it.
/// Returns the report and, if tracing was requested, the probe samples
/// against the target (calibration probes are left out).
pub fn run_trial(
    cell: &Cell,
    prepared: &Prepared,
    seed: u64,
    index: u64,
    trace: bool,
) -> Result<(ScanReport, Vec<ProbeSample>)> {
    let (layout_seed, noise_seed) = trial_seeds(seed, index);
    let spec = match cell.spec.kind {
        ScenarioKind::LinuxNokaslr | ScenarioKind::Custom => cell.spec.clone(),
        _ => cell.spec.clone().with_seed(layout_seed),
    };
    let space = Arc::new(AddressSpace::build(spec)?);
    let mut p = SimProber::new(space.clone(), cell.profile.clone(), noise_seed);
    if trace {
        p = p.with_trace();
    }
    if let (Campaign::MitigationTlb, Some(k)) = (cell.campaign, space.truth().kernel_range()) {
        let pages = (k.start..k.end).step_by(PAGE_2M as usize).collect();
        p = p.with_background(Background { pages, every: BACKGROUND_EVERY })?;
    }
    let mut report = run_campaign(&mut p, cell.campaign, space.spec(), cell.policy, prepared, Some(space.truth()))?;
    if report.per_trial_accuracy.is_none() {
        report.per_trial_accuracy = Some(score(&report, &space));
    }
    let mut trace = p.take_trace();
    trace.retain(|s| !p.state().is_calibration_page(s.addr));
    Ok((report, trace))
}

/// Runs `campaign` on any prober. `spec` supplies the attacker-side
/// parameters (offsets, catalogs, windows). The behavior monitor and the
/// mitigation evaluation need `truth` for the module base and for scoring.
pub fn run_campaign<P: Prober + ?Sized>(
    p: &mut P,
    campaign: Campaign,
    spec: &ScenarioSpec,
    policy: MeasurePolicy,
    prepared: &Prepared,
    truth: Option<&GroundTruth>,
) -> Result<ScanReport> {
    let need_truth = || Error::Usage(format!("{campaign} needs a simulated scenario"));
    Ok(match campaign {
        Campaign::ScanBase => scan_kernel_base(p, policy)?,
        Campaign::ScanModules => scan_modules(p, policy, &spec.module_catalog)?,
        Campaign::ScanKpti => scan_kpti(p, policy, spec.trampoline_offset)?,
        Campaign::ScanAmd => {
            let bands = prepared.bands.as_ref().ok_or_else(|| Error::Usage("AMD bands not prepared".into()))?;
            scan_amd_kernel(p, policy, bands)?
        }
        Campaign::ScanWindows => scan_windows(p, policy)?,
        Campaign::ScanKvas => scan_kvas(p, policy, spec.kvas_search_window(), spec.kvas_offset)?,
        Campaign::SweepUserspace => sweep_userspace(p, policy, &spec.userspace_windows())?,
        Campaign::Fingerprint => fingerprint_libraries(p, policy, &spec.library_catalog, &spec.userspace_windows())?,
        Campaign::Monitor => {
            let module = truth
                .ok_or_else(need_truth)?
                .module_placements
                .iter()
                .find(|m| m.pages() >= MONITOR_PAGES as u64)
                .ok_or_else(|| Error::Config(format!("monitor needs a module of {MONITOR_PAGES} pages")))?;
            let sep = TlbSeparator::calibrate(p, module.base, SEPARATOR_SAMPLES)?;
            let wave = square_wave(MONITOR_PERIOD, MONITOR_TICKS);
            let driver = |t: usize| wave[t];
            let start = p.probes_issued();
            let trace = monitor_behavior(p, module.base, MONITOR_PAGES, MONITOR_TICKS, &sep, Some(&driver))?;
            let mut r = ScanReport::new(Campaign::Monitor);
            r.probes_issued = p.probes_issued() - start;
            r.slots_probed = (MONITOR_PAGES * MONITOR_TICKS) as u64;
            r.outcome = Outcome::Found;
            r.detected_base = Some(module.base);
            r.per_trial_accuracy = Some(trace.f1(&wave));
            r.note = Some(format!("separator {:.1}", sep.value));
            r
        }
        Campaign::MitigationPageTable | Campaign::MitigationTlb => {
            let primitive = if campaign == Campaign::MitigationTlb { Primitive::Tlb } else { Primitive::PageTable };
            evaluate_mitigation(p, truth.ok_or_else(need_truth)?.kernel_range(), primitive, policy)?
        }
    })
}

/// Ground-truth score of one report in `[0, 1]`.
pub fn score(report: &ScanReport, space: &AddressSpace) -> f64 {
    let truth = space.truth();
    let hit = |b: bool| if b { 1.0 } else { 0.0 };
    match report.campaign {
        Campaign::ScanBase | Campaign::ScanKpti | Campaign::ScanAmd | Campaign::ScanWindows | Campaign::ScanKvas => {
            hit(truth.kernel_base.is_some() && report.detected_base == truth.kernel_base)
        }
        Campaign::ScanModules => {
            let catalog = &space.spec().module_catalog;
            hit(truth.module_placements.iter().all(|m| {
                names_with_pages(catalog, m.pages()).len() != 1
                    || report
                        .regions
                        .iter()
                        .any(|g| g.base == m.base && g.identified() == Some(m.name.as_str()))
            }))
        }
        Campaign::SweepUserspace => {
            let found: HashSet<u64> = report
                .regions
                .iter()
                .flat_map(|g| (g.base..g.end()).step_by(PAGE_4K as usize))
                .collect();
            let present: HashSet<u64> = space
                .regions()
                .filter(|g| g.attrs.is_accessible_mapping())
                .flat_map(|g| (g.base..g.end()).step_by(PAGE_4K as usize))
                .collect();
            hit(found == present)
        }
        Campaign::Fingerprint => {
            let libs = &truth.library_placements;
            if libs.is_empty() {
                return 1.0;
            }
            let ok = libs
                .iter()
                .filter(|l| report.regions.iter().any(|g| g.base == l.base && g.identified() == Some(&l.name)))
                .count();
            ok as f64 / libs.len() as f64
        }
        Campaign::Monitor | Campaign::MitigationPageTable | Campaign::MitigationTlb => {
            report.per_trial_accuracy.unwrap_or(0.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: u64,
    pub layout_seed: u64,
    pub noise_seed: u64,
    pub report: ScanReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub target: String,
    pub campaign: Campaign,
    pub profile: String,
    pub trials: u64,
    pub seed: u64,
    /// Mean per-trial accuracy.
    pub accuracy: f64,
    pub mean_probes: f64,
    pub found: u64,
    pub records: Vec<TrialRecord>,
    #[serde(skip)]
    pub mean_elapsed: Duration,
}

/// Runs `trials` independent trials in parallel; records come back sorted
/// by trial index.
pub fn run_trials(cell: &Cell, trials: u64, seed: u64) -> Result<TrialSummary> {
    if trials == 0 {
        return Err(Error::Usage("trials must be at least 1".into()));
    }
    let prepared = prepare(cell, seed)?;
    let mut results = (0..trials)
        .into_par_iter()
        .map(|i| {
            let (report, _) = run_trial(cell, &prepared, seed, i, false)?;
            let (layout_seed, noise_seed) = trial_seeds(seed, i);
            Ok(TrialRecord { index: i, layout_seed, noise_seed, report })
        })
        .collect::<Result<Vec<_>>>()?;
    results.sort_by_key(|r| r.index);
    let n = results.len() as f64;
    let accuracy = results.iter().map(|r| r.report.per_trial_accuracy.unwrap_or(0.0)).sum::<f64>() / n;
    let mean_probes = results.iter().map(|r| r.report.probes_issued as f64).sum::<f64>() / n;
    let found = results.iter().filter(|r| r.report.is_found()).count() as u64;
    let total: Duration = results.iter().map(|r| r.report.elapsed).sum();
    Ok(TrialSummary {
        target: cell.target.clone(),
        campaign: cell.campaign,
        profile: cell.profile.name.clone(),
        trials,
        seed,
        accuracy,
        mean_probes,
        found,
        records: results,
        mean_elapsed: total / trials as u32,
    })
}

/// The five cells of the runtime/accuracy table.
pub fn table1_cells() -> Vec<Cell> {
    let linux = ScenarioSpec::new(ScenarioKind::LinuxDefault, 0);
    vec![
        Cell::new(linux.clone(), TimingProfile::alderlake(), Campaign::ScanBase).named("Alder Lake kernel base"),
        Cell::new(linux.clone(), TimingProfile::alderlake(), Campaign::ScanModules).named("Alder Lake modules"),
        Cell::new(linux.clone(), TimingProfile::icelake(), Campaign::ScanBase).named("Ice Lake kernel base"),
        Cell::new(linux, TimingProfile::icelake(), Campaign::ScanModules).named("Ice Lake modules"),
        Cell::new(ScenarioSpec::new(ScenarioKind::AmdLinux, 0), TimingProfile::zen3(), Campaign::ScanAmd)
            .named("Zen 3 kernel base"),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub target: String,
    pub probes: f64,
    pub accuracy: f64,
    pub trials: u64,
    /// Simulator wall time per trial in milliseconds.
    pub wall_ms: f64,
}

impl From<&TrialSummary> for TableRow {
    fn from(s: &TrialSummary) -> Self {
        TableRow {
            target: s.target.clone(),
            probes: s.mean_probes,
            accuracy: s.accuracy,
            trials: s.trials,
            wall_ms: s.mean_elapsed.as_secs_f64() * 1e3,
        }
    }
}

pub fn table1(cells: &[Cell], trials: u64, seed: u64) -> Result<Vec<TableRow>> {
    cells
        .iter()
        .enumerate()
        .map(|(i, c)| run_trials(c, trials, derive_seed(seed, i as u64)).map(|s| TableRow::from(&s)))
        .collect()
}

/// Fixed-width text rendering.
pub fn render_table(rows: &[TableRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<28} {:>12} {:>10} {:>8} {:>16}",
        "target", "probes", "accuracy", "trials", "sim wall ms*"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<28} {:>12.1} {:>9.2}% {:>8} {:>16.3}",
            r.target,
            r.probes,
            r.accuracy * 100.0,
            r.trials,
            r.wall_ms
        );
    }
    out.push_str("* simulator wall time, not comparable to hardware runtimes\n");
    out
}

pub fn write_table_csv<W: Write>(out: W, rows: &[TableRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["target", "probes", "accuracy", "trials", "sim_wall_ms_noncomparable"])?;
    for r in rows {
        w.write_record([
            r.target.clone(),
            format!("{:.1}", r.probes),
            format!("{:.6}", r.accuracy),
            r.trials.to_string(),
            format!("{:.3}", r.wall_ms),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_cells_score_perfectly() {
        for campaign in [Campaign::ScanBase, Campaign::ScanModules, Campaign::ScanKvas, Campaign::Monitor] {
            let profile = if campaign == Campaign::Monitor {
                TimingProfile::coffeelake()
            } else {
                TimingProfile::alderlake()
            };
            let cell = Cell::new(
                ScenarioSpec::new(Cell::default_kind(campaign), 0),
                profile.without_noise(),
                campaign,
            );
            let s = run_trials(&cell, 3, 1).unwrap();
            assert_eq!(s.accuracy, 1.0, "{campaign}");
        }
    }

    #[test]
    fn records_are_sorted_and_deterministic() {
        let cell = Cell::new(ScenarioSpec::new(ScenarioKind::LinuxDefault, 0), TimingProfile::alderlake(), Campaign::ScanBase);
        let a = run_trials(&cell, 8, 5).unwrap();
        let b = run_trials(&cell, 8, 5).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(a.records.windows(2).all(|w| w[0].index < w[1].index));
    }

    #[test]
    fn zero_trials_is_a_usage_error() {
        let cell = Cell::new(ScenarioSpec::new(ScenarioKind::LinuxDefault, 0), TimingProfile::alderlake(), Campaign::ScanBase);
        assert!(matches!(run_trials(&cell, 0, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn table_has_five_rows_and_fixed_columns() {
        let cells: Vec<Cell> = table1_cells()
            .into_iter()
            .map(|c| Cell { profile: c.profile.without_noise(), ..c })
            .collect();
        let rows = table1(&cells, 1, 0).unwrap();
        assert_eq!(rows.len(), 5);
        assert!(rows.iter().all(|r| r.accuracy == 1.0));
        let text = render_table(&rows);
        assert!(text.starts_with("target"));
        assert!(text.contains("not comparable"));
        let mut buf = Vec::new();
        write_table_csv(&mut buf, &rows[..1]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 2);
    }

    #[test]
    fn scenario_file_defaults_profile() {
        let f = ScenarioFile::from_json(r#"{"kind":"LinuxDefault","seed":3}"#).unwrap();
        assert_eq!(f.profile, "alderlake");
        assert_eq!(f.spec.seed, 3);
        let f = ScenarioFile::from_json(r#"{"kind":"AmdLinux","profile":"zen3"}"#).unwrap();
        assert!(f.timing_profile().unwrap().amd_mode);
    }
}
