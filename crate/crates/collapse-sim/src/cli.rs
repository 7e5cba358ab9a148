//! Command-line front end: JSON config in, CSV/JSON artifacts out.
//!
//! Exit codes: 0 success, 1 statistical test failure (`ensemble --strict`),
//! 2 config error, 3 I/O error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::closedform::{self, TrajectoryPath};
use crate::ensemble::{self, EnsembleConfig, EnsembleSummary, TestReport, DEFAULT_PATH_BUDGET};
use crate::model::{
    build_spectral_model, reduction_timescale, LevelInput, ReductionParams, SpectralModel,
    DEFAULT_STEP_CAP,
};
use crate::validation::{validation_sweep, ValidationReport};
use crate::{Error, Result};

pub const CSV_VERSION_LINE: &str = "# collapse-sim v1";

/// One spectrum entry of the config file. Amplitudes need not be
/// pre-normalized; `im` defaults to zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelSpec {
    pub energy: f64,
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

/// The single flat JSON config document. CLI flags override scalar fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub levels: Vec<LevelSpec>,
    pub sigma: f64,
    pub t_max: f64,
    pub dt: f64,
    pub seed: u64,
    #[serde(default = "default_epsilon")]
    pub reduction_epsilon: f64,
    #[serde(default = "default_n_paths")]
    pub n_paths: usize,
    #[serde(default)]
    pub checkpoints: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub worker_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mid_time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merge_tol: Option<f64>,
    #[serde(default = "default_log_threshold")]
    pub martingale_log_threshold: f64,
    #[serde(default = "default_step_cap")]
    pub step_cap: usize,
    #[serde(default = "default_path_budget")]
    pub path_budget: u64,
}

fn default_epsilon() -> f64 {
    1e-4
}
fn default_n_paths() -> usize {
    1
}
fn default_log_threshold() -> f64 {
    10.0
}
fn default_step_cap() -> usize {
    DEFAULT_STEP_CAP
}
fn default_path_budget() -> u64 {
    DEFAULT_PATH_BUDGET
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| {
            // serde_json reports line and column for both syntax and type
            // errors.
            Error::InvalidConfig(format!("{}: {e}", path.display()))
        })
    }

    pub fn build_model(&self) -> Result<SpectralModel> {
        let levels: Vec<LevelInput> = self
            .levels
            .iter()
            .map(|l| LevelInput::new(l.energy, Complex64::new(l.re, l.im)))
            .collect();
        build_spectral_model(&levels, self.merge_tol)
    }

    pub fn params(&self) -> ReductionParams {
        ReductionParams {
            sigma: self.sigma,
            t_max: self.t_max,
            dt: self.dt,
            reduction_epsilon: self.reduction_epsilon,
            seed: self.seed,
            step_cap: self.step_cap,
        }
    }

    fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.sigma {
            self.sigma = v;
        }
        if let Some(v) = o.t_max {
            self.t_max = v;
        }
        if let Some(v) = o.dt {
            self.dt = v;
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.n_paths {
            self.n_paths = v;
        }
        if let Some(v) = o.reduction_epsilon {
            self.reduction_epsilon = v;
        }
        if let Some(v) = o.workers {
            self.worker_count = Some(v);
        }
        if let Ok(env) = std::env::var("COLLAPSE_SIM_THREADS") {
            if let Ok(v) = env.parse::<usize>() {
                self.worker_count = Some(v);
            }
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub t_max: Option<f64>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_paths: Option<usize>,
    #[arg(long)]
    pub reduction_epsilon: Option<f64>,
    /// Worker threads for ensemble runs (also via COLLAPSE_SIM_THREADS).
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Parser)]
#[command(
    name = "collapse-sim",
    version,
    about = "Energy-based quantum state reduction simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate one trajectory and write it as CSV.
    Simulate {
        config: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
        /// Append per-level amplitude columns (re_i, im_i).
        #[arg(long)]
        with_amplitudes: bool,
        /// Echo the effective config as JSON and exit.
        #[arg(long)]
        dump_config: bool,
    },
    /// Run an ensemble and write the summary JSON.
    Ensemble {
        config: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
        /// Omit the statistical test blocks from the summary.
        #[arg(long)]
        skip_tests: bool,
        /// Exit 1 if any statistical test fails.
        #[arg(long)]
        strict: bool,
        #[arg(long)]
        dump_config: bool,
    },
    /// Compare the closed form against Euler-Maruyama across refinements.
    Validate {
        config: PathBuf,
        /// Number of grid refinement levels (config dt is the coarsest).
        #[arg(long, default_value_t = 3)]
        levels: usize,
        /// Step ratio between consecutive levels.
        #[arg(long, default_value_t = 2)]
        ratio: usize,
        /// Number of independent seeded paths.
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Print the analytic reduction-probability table for a two-state model.
    Timescale {
        config: PathBuf,
        /// Decay depth n in P(M < e^-n).
        #[arg(long, default_value_t = 10.0)]
        n: f64,
        /// Comma-separated evaluation times.
        #[arg(long, value_delimiter = ',')]
        times: Vec<f64>,
        /// Interpret times as multiples of the reduction timescale 1/beta.
        #[arg(long)]
        in_tau: bool,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

/// Entry point used by the binary; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Io(_) => 3,
                Error::Json(_) => 3,
                _ => 2,
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Simulate {
            config,
            output,
            overrides,
            with_amplitudes,
            dump_config,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            cfg.apply(&overrides);
            if dump_config {
                println!("{}", serde_json::to_string_pretty(&cfg)?);
                return Ok(0);
            }
            let model = cfg.build_model()?;
            let params = cfg.params();
            params.validate()?;
            let path = closedform::simulate_trajectory(&model, &params)?;
            let csv = trajectory_csv(&path, with_amplitudes);
            write_output(output.as_deref(), &csv)?;
            Ok(0)
        }
        Command::Ensemble {
            config,
            output,
            overrides,
            skip_tests,
            strict,
            dump_config,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            cfg.apply(&overrides);
            if dump_config {
                println!("{}", serde_json::to_string_pretty(&cfg)?);
                return Ok(0);
            }
            let model = cfg.build_model()?;
            let params = cfg.params();
            params.validate()?;
            if cfg.n_paths == 0 {
                return Err(Error::InvalidConfig("n_paths must be positive".into()));
            }
            let mut econfig =
                EnsembleConfig::new(model.clone(), params, cfg.n_paths, cfg.checkpoints.clone());
            econfig.worker_count = cfg.worker_count;
            econfig.mid_time = cfg.mid_time;
            econfig.martingale_log_threshold = cfg.martingale_log_threshold;
            econfig.path_budget = cfg.path_budget;
            eprintln!(
                "running {} paths x {} steps ...",
                cfg.n_paths,
                (cfg.t_max / cfg.dt).round()
            );
            let summary = ensemble::run_ensemble(&econfig)?;
            let doc = summary_json(&summary, &model, skip_tests);
            let mut failed = false;
            if let Some(tests) = &doc.tests {
                failed = [&tests.martingale, &tests.potential, &tests.terminal]
                    .iter()
                    .any(|t| !t.passed && !t.inconclusive)
                    || tests
                        .reduction_time
                        .as_ref()
                        .is_some_and(|t| !t.passed && !t.inconclusive)
                    || tests
                        .conditional_mean
                        .as_ref()
                        .is_some_and(|t| !t.passed && !t.inconclusive);
            }
            write_output(
                output.as_deref(),
                &format!("{}\n", serde_json::to_string_pretty(&doc)?),
            )?;
            Ok(if strict && failed { 1 } else { 0 })
        }
        Command::Validate {
            config,
            levels,
            ratio,
            seeds,
            output,
            overrides,
        } => {
            if levels < 2 {
                return Err(Error::InvalidConfig(
                    "validate needs at least 2 refinement levels".into(),
                ));
            }
            let mut cfg = RunConfig::load(&config)?;
            cfg.apply(&overrides);
            let model = cfg.build_model()?;
            let params = cfg.params();
            params.validate()?;
            let report = validation_sweep(
                &model, cfg.sigma, cfg.t_max, cfg.dt, ratio, levels, cfg.seed, seeds,
            )?;
            print_validation(&report);
            write_output(
                output.as_deref(),
                &format!("{}\n", serde_json::to_string_pretty(&report)?),
            )?;
            if !report.errors_strictly_decreasing {
                eprintln!("warning: mean error did not decrease monotonically");
            }
            Ok(0)
        }
        Command::Timescale {
            config,
            n,
            times,
            in_tau,
            output,
        } => {
            let cfg = RunConfig::load(&config)?;
            let model = cfg.build_model()?;
            if model.len() != 2 {
                return Err(Error::InvalidConfig(format!(
                    "timescale needs a two-state model, got {} levels",
                    model.len()
                )));
            }
            if times.is_empty() {
                return Err(Error::InvalidConfig("no times given".into()));
            }
            let omega = model.energies()[1] - model.energies()[0];
            let beta = 0.25 * cfg.sigma * cfg.sigma * omega * omega;
            let tau_v0 = reduction_timescale(&model, cfg.sigma);
            let mut out = String::new();
            out.push_str(CSV_VERSION_LINE);
            out.push('\n');
            out.push_str(&format!(
                "# tau_R(1/sigma^2 V0)={tau_v0}, beta={beta}, n={n}\n"
            ));
            out.push_str("t,probability\n");
            for &t in &times {
                let t_abs = if in_tau { t / beta } else { t };
                let p = closedform::reduction_probability(beta, t_abs, n)?;
                out.push_str(&format!("{t_abs},{p}\n"));
            }
            match output {
                Some(p) => fs::write(p, out)?,
                None => print!("{out}"),
            }
            Ok(0)
        }
    }
}

fn write_output(path: Option<&Path>, content: &str) -> Result<()> {
    match path {
        Some(p) => {
            let mut f = fs::File::create(p)?;
            f.write_all(content.as_bytes())?;
            Ok(())
        }
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

/// Renders a trajectory as versioned CSV. Floats use the shortest
/// round-trip representation, so byte equality implies value equality.
pub fn trajectory_csv(path: &TrajectoryPath, with_amplitudes: bool) -> String {
    let n_levels = path.pi_t[0].len();
    let mut out = String::new();
    out.push_str(CSV_VERSION_LINE);
    out.push('\n');
    out.push_str("t,xi,W,H,V,skew");
    for i in 1..=n_levels {
        out.push_str(&format!(",Pi_{i}"));
    }
    if with_amplitudes {
        for i in 1..=n_levels {
            out.push_str(&format!(",re_{i},im_{i}"));
        }
    }
    out.push('\n');
    for k in 0..path.grid.len() {
        out.push_str(&format!(
            "{},{},{},{},{},{}",
            path.grid.time(k),
            path.xi[k],
            path.w[k],
            path.h[k],
            path.v[k],
            path.skew[k]
        ));
        for p in &path.pi_t[k] {
            out.push_str(&format!(",{p}"));
        }
        if with_amplitudes {
            for a in &path.amplitudes[k] {
                out.push_str(&format!(",{},{}", a.re, a.im));
            }
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Serialize)]
pub struct SeriesJson {
    pub t: Vec<f64>,
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct ReductionTimesJson {
    pub count: usize,
    pub censored: usize,
    pub mean: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct TestsJson {
    pub martingale: TestReport,
    pub potential: TestReport,
    pub terminal: TestReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reduction_time: Option<TestReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conditional_mean: Option<TestReport>,
}

#[derive(Debug, Serialize)]
pub struct SummaryJson {
    pub n_paths: usize,
    pub h0: f64,
    pub v0: f64,
    pub h_mean: SeriesJson,
    pub v_mean: SeriesJson,
    pub v2_mean: SeriesJson,
    pub terminal_fractions: Vec<f64>,
    pub sampled_fractions: Vec<f64>,
    pub unreduced: usize,
    pub reduction_times: ReductionTimesJson,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tests: Option<TestsJson>,
}

pub fn summary_json(
    summary: &EnsembleSummary,
    model: &SpectralModel,
    skip_tests: bool,
) -> SummaryJson {
    let series = |f: &dyn Fn(&ensemble::CheckpointStats) -> (f64, f64)| {
        let mut t = Vec::new();
        let mut mean = Vec::new();
        let mut se = Vec::new();
        for s in &summary.stats {
            let (m, e) = f(s);
            t.push(s.t);
            mean.push(m);
            se.push(e);
        }
        SeriesJson { t, mean, se }
    };
    let rt = &summary.reduction_times;
    let reduction_times = ReductionTimesJson {
        count: rt.len(),
        censored: summary.unreduced,
        mean: (!rt.is_empty()).then(|| rt.iter().sum::<f64>() / rt.len() as f64),
        min: rt.iter().cloned().reduce(f64::min),
        max: rt.iter().cloned().reduce(f64::max),
    };
    let tests = (!skip_tests).then(|| TestsJson {
        martingale: ensemble::martingale_test(summary, summary.h0),
        potential: ensemble::potential_test(summary),
        terminal: ensemble::terminal_test(summary, model),
        reduction_time: (model.len() == 2).then(|| ensemble::reduction_time_test(summary, model)),
        conditional_mean: (!summary.mid_records.is_empty())
            .then(|| ensemble::conditional_mean_test(summary, 10)),
    });
    SummaryJson {
        n_paths: summary.n_paths,
        h0: summary.h0,
        v0: summary.v0,
        h_mean: series(&|s| (s.h_mean, s.h_se)),
        v_mean: series(&|s| (s.v_mean, s.v_se)),
        v2_mean: series(&|s| (s.v2_mean, s.v2_se)),
        terminal_fractions: summary.terminal_fractions(),
        sampled_fractions: summary
            .sampled_tallies
            .iter()
            .map(|&c| c as f64 / summary.n_paths as f64)
            .collect(),
        unreduced: summary.unreduced,
        reduction_times,
        tests,
    }
}

fn print_validation(report: &ValidationReport) {
    eprintln!(
        "validation over {} seeds, t_max = {}",
        report.n_seeds, report.t_max
    );
    eprintln!(
        "{:>14} {:>16} {:>16} {:>10}",
        "dt", "mean max|dH|", "max max|dH|", "agree"
    );
    for l in &report.levels {
        eprintln!(
            "{:>14.6e} {:>16.6e} {:>16.6e} {:>10.3}",
            l.dt, l.mean_max_h_error, l.max_max_h_error, l.terminal_agreement
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ReductionParams;

    fn demo_config_json() -> String {
        r#"{
            "levels": [
                {"energy": -1.0, "re": 0.7071067811865476},
                {"energy": 1.0, "re": 0.7071067811865476}
            ],
            "sigma": 1.0,
            "t_max": 1.0,
            "dt": 0.01,
            "seed": 42,
            "n_paths": 4,
            "checkpoints": [0.0, 0.5, 1.0]
        }"#
        .to_string()
    }

    #[test]
    fn config_round_trip() {
        let cfg: RunConfig = serde_json::from_str(&demo_config_json()).unwrap();
        let echoed = serde_json::to_string_pretty(&cfg).unwrap();
        let again: RunConfig = serde_json::from_str(&echoed).unwrap();
        assert_eq!(
            serde_json::to_string(&cfg).unwrap(),
            serde_json::to_string(&again).unwrap()
        );
    }

    #[test]
    fn unknown_fields_rejected() {
        let bad = demo_config_json().replace("\"sigma\"", "\"sgima\"");
        let err = serde_json::from_str::<RunConfig>(&bad).unwrap_err();
        assert!(err.to_string().contains("sgima"), "{err}");
    }

    #[test]
    fn csv_shape() {
        let cfg: RunConfig = serde_json::from_str(&demo_config_json()).unwrap();
        let model = cfg.build_model().unwrap();
        let params: ReductionParams = cfg.params();
        let path = closedform::simulate_trajectory(&model, &params).unwrap();
        let csv = trajectory_csv(&path, false);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), CSV_VERSION_LINE);
        assert_eq!(lines.next().unwrap(), "t,xi,W,H,V,skew,Pi_1,Pi_2");
        assert_eq!(lines.count(), 101);

        let with_amps = trajectory_csv(&path, true);
        assert!(with_amps
            .lines()
            .nth(1)
            .unwrap()
            .ends_with("Pi_1,Pi_2,re_1,im_1,re_2,im_2"));
    }

    #[test]
    fn csv_floats_round_trip() {
        let cfg: RunConfig = serde_json::from_str(&demo_config_json()).unwrap();
        let model = cfg.build_model().unwrap();
        let path = closedform::simulate_trajectory(&model, &cfg.params()).unwrap();
        let csv = trajectory_csv(&path, false);
        let row: Vec<f64> = csv
            .lines()
            .nth(52)
            .unwrap()
            .split(',')
            .map(|s| s.parse().unwrap())
            .collect();
        assert_eq!(row[1], path.xi[50]);
        assert_eq!(row[3], path.h[50]);
    }
}
