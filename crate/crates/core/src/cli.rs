//! Command-line front end: `run`, `hist` and `table1`.
//!
//! Exit codes: 0 on success, 1 on usage or configuration errors, 2 when a
//! campaign ends NotFound or Degraded.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::campaigns::{Campaign, Outcome};
use crate::error::{Error, Result};
use crate::hist::{read_latencies, Histogram};
use crate::prober::{write_trace, Backend, BACKEND_ENV};
use crate::sim::{ProbeSample, TimingProfile};
use crate::trials::{self, Cell, ScenarioFile, TrialSummary};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NOT_FOUND: i32 = 2;

const BAR_WIDTH: usize = 60;

#[derive(Debug, Parser)]
#[command(name = "aslrlab", version, about = "Masked load/store timing side-channel laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a campaign over one or more seeded trials.
    Run(RunArgs),
    /// Histogram the latencies of a samples CSV.
    Hist(HistArgs),
    /// Reproduce the runtime and accuracy table.
    Table1(TableArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Scenario JSON file; defaults to the campaign's built-in scenario.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long, default_value = "scan-base")]
    pub campaign: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub trials: u64,
    /// Overrides the profile's noise sigma in cycles; 0 also drops outliers.
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Timing profile name; overrides the scenario file.
    #[arg(long)]
    pub profile: Option<String>,
    /// `second-of-two` or `median-of-K`.
    #[arg(long)]
    pub policy: Option<String>,
    /// `sim` or `native`.
    #[arg(long, env = BACKEND_ENV)]
    pub backend: Option<String>,
    /// Required to probe the host CPU.
    #[arg(long)]
    pub allow_native: bool,
    #[arg(long, default_value_t = 1)]
    pub bucket_width: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct HistArgs {
    pub samples: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub bucket_width: u64,
    /// Also write the histogram as CSV to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TableArgs {
    #[arg(long, default_value_t = 1000)]
    pub trials: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Keep only rows whose target contains this text (repeatable).
    #[arg(long)]
    pub only: Vec<String>,
    /// Directory for table1.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let res = match cli.command {
        Command::Run(a) => cmd_run(&a),
        Command::Hist(a) => cmd_hist(&a),
        Command::Table1(a) => cmd_table1(&a),
    };
    res.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        EXIT_USAGE
    })
}

fn noisy(profile: TimingProfile, sigma: Option<f64>) -> Result<TimingProfile> {
    let p = match sigma {
        Some(0.0) => profile.without_noise(),
        Some(s) => profile.with_noise_sigma(s),
        None => profile,
    };
    p.validate()?;
    Ok(p)
}

/// Builds the trial cell a `run` invocation describes.
pub fn run_cell(a: &RunArgs) -> Result<Cell> {
    let campaign: Campaign = a.campaign.parse()?;
    let mut cell = match &a.scenario {
        Some(path) => {
            let file = ScenarioFile::load(path)
                .map_err(|e| Error::Config(format!("scenario {}: {e}", path.display())))?;
            let profile = file.timing_profile()?;
            let target = path.file_stem().map_or_else(|| campaign.to_string(), |s| s.to_string_lossy().into_owned());
            Cell::new(file.spec, profile, campaign).named(format!("{target} {campaign}"))
        }
        None => Cell::for_campaign(campaign),
    };
    if let Some(name) = &a.profile {
        cell.profile = TimingProfile::by_name(name)?;
    }
    cell.profile = noisy(cell.profile, a.noise_sigma)?;
    if let Some(p) = &a.policy {
        cell.policy = p.parse()?;
    }
    Ok(cell)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_outputs(out: &Path, summary: &TrialSummary, samples: &[ProbeSample], width: u64) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut w = create(&out.join("report.json"))?;
    serde_json::to_writer_pretty(&mut w, summary)?;
    writeln!(w)?;
    w.flush()?;
    write_trace(create(&out.join("samples.csv"))?, samples)?;
    let latencies: Vec<u64> = samples.iter().map(|s| s.latency).collect();
    Histogram::from_latencies(width, &latencies)?.write_csv(create(&out.join("hist.csv"))?)
}

fn exit_for(summary: &TrialSummary) -> i32 {
    let ok = match summary.records.as_slice() {
        [one] => one.report.outcome == Outcome::Found,
        _ => summary.found > 0,
    };
    if ok {
        EXIT_OK
    } else {
        EXIT_NOT_FOUND
    }
}

pub fn cmd_run(a: &RunArgs) -> Result<i32> {
    let backend = match &a.backend {
        Some(b) => b.parse()?,
        None => Backend::Simulator,
    };
    Histogram::new(a.bucket_width)?;
    let cell = run_cell(a)?;
    if a.trials == 0 {
        return Err(Error::Usage("trials must be at least 1".into()));
    }
    let (summary, samples) = match backend {
        Backend::Simulator => {
            let summary = trials::run_trials(&cell, a.trials, a.seed)?;
            let prepared = trials::prepare(&cell, a.seed)?;
            let (_, samples) = trials::run_trial(&cell, &prepared, a.seed, 0, true)?;
            (summary, samples)
        }
        Backend::NativeHardware => (run_native(&cell, a)?, Vec::new()),
    };
    write_outputs(&a.out, &summary, &samples, a.bucket_width)?;
    println!(
        "{} on {}: accuracy {:.2}% over {} trials, found {}/{}, mean probes {:.1}",
        summary.campaign,
        summary.target,
        summary.accuracy * 100.0,
        summary.trials,
        summary.found,
        summary.trials,
        summary.mean_probes
    );
    if let [one] = summary.records.as_slice() {
        let r = &one.report;
        match r.detected_base {
            Some(b) => println!("outcome {:?}, base {b:#x}", r.outcome),
            None => println!("outcome {:?}", r.outcome),
        }
        if let Some(n) = &r.note {
            println!("note: {n}");
        }
    }
    Ok(exit_for(&summary))
}

#[cfg(all(feature = "native", target_arch = "x86_64", target_os = "linux"))]
fn run_native(cell: &Cell, a: &RunArgs) -> Result<TrialSummary> {
    use crate::prober::NativeProber;
    use crate::trials::TrialRecord;

    if matches!(cell.campaign, Campaign::Monitor | Campaign::MitigationPageTable | Campaign::MitigationTlb) {
        return Err(Error::Capability(format!("{} needs ground truth and runs only on the simulator", cell.campaign)));
    }
    let prepared = trials::prepare(cell, a.seed)?;
    let mut p = NativeProber::new(a.allow_native)?;
    let mut records = Vec::new();
    for index in 0..a.trials {
        let report = trials::run_campaign(&mut p, cell.campaign, &cell.spec, cell.policy, &prepared, None)?;
        records.push(TrialRecord { index, layout_seed: 0, noise_seed: 0, report });
    }
    let n = records.len() as f64;
    Ok(TrialSummary {
        target: format!("native {}", cell.campaign),
        campaign: cell.campaign,
        profile: "native".into(),
        trials: a.trials,
        seed: a.seed,
        accuracy: f64::NAN,
        mean_probes: records.iter().map(|r| r.report.probes_issued as f64).sum::<f64>() / n,
        found: records.iter().filter(|r| r.report.is_found()).count() as u64,
        mean_elapsed: records.iter().map(|r| r.report.elapsed).sum::<std::time::Duration>() / a.trials as u32,
        records,
    })
}

#[cfg(not(all(feature = "native", target_arch = "x86_64", target_os = "linux")))]
fn run_native(_cell: &Cell, _a: &RunArgs) -> Result<TrialSummary> {
    Err(Error::Capability("this build has no native backend (enable the `native` feature on x86-64 Linux)".into()))
}

pub fn cmd_hist(a: &HistArgs) -> Result<i32> {
    let file = File::open(&a.samples)?;
    let h = Histogram::from_latencies(a.bucket_width, &read_latencies(file)?)?;
    print!("{}", h.render_ascii(BAR_WIDTH));
    let modes: Vec<String> = h.modes().iter().take(3).map(u64::to_string).collect();
    println!("samples {}, modes [{}]", h.total(), modes.join(", "));
    if let Some(out) = &a.out {
        h.write_csv(create(out)?)?;
    }
    Ok(EXIT_OK)
}

pub fn cmd_table1(a: &TableArgs) -> Result<i32> {
    let mut cells = trials::table1_cells();
    if !a.only.is_empty() {
        cells.retain(|c| a.only.iter().any(|o| c.target.contains(o.as_str())));
        if cells.is_empty() {
            return Err(Error::Usage(format!("no table cell matches {:?}", a.only)));
        }
    }
    for c in &mut cells {
        c.profile = noisy(c.profile.clone(), a.noise_sigma)?;
    }
    let rows = trials::table1(&cells, a.trials, a.seed)?;
    print!("{}", trials::render_table(&rows));
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        trials::write_table_csv(create(&out.join("table1.csv"))?, &rows)?;
    }
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prober::MeasurePolicy;

    fn run_args(extra: &[&str]) -> RunArgs {
        let mut v = vec!["aslrlab", "run"];
        v.extend(extra);
        match Cli::try_parse_from(v).unwrap().command {
            Command::Run(a) => a,
            _ => unreachable!(),
        }
    }

    #[test]
    fn unknown_campaign_is_a_usage_error() {
        assert!(matches!(run_cell(&run_args(&["--campaign", "nope"])), Err(Error::Usage(_))));
    }

    #[test]
    fn overrides_apply() {
        let c = run_cell(&run_args(&["--campaign", "scan-amd", "--noise-sigma", "0", "--policy", "median-of-5"])).unwrap();
        assert_eq!(c.profile.name, "zen3");
        assert!(c.profile.is_noiseless());
        assert_eq!(c.policy, MeasurePolicy::MedianOfK { k: 5 });
        assert!(run_cell(&run_args(&["--noise-sigma=-1"])).is_err());
    }

    #[test]
    fn help_exits_zero_and_bad_flags_exit_one() {
        assert_eq!(main_with_args(["aslrlab", "--help"]), EXIT_OK);
        assert_eq!(main_with_args(["aslrlab", "run", "--trials", "x"]), EXIT_USAGE);
        assert_eq!(main_with_args(["aslrlab", "bogus"]), EXIT_USAGE);
    }
}
