//! Seeded Monte Carlo ensembles of closed-form trajectories, with
//! statistical checks of the martingale, potential, terminal-distribution,
//! conditional-moment, and reduction-timescale laws.
//!
//! Per-path seeds derive from the root seed and the path index, so results
//! are reproducible and independent of the worker count. Paths are walked
//! in fixed-size chunks; chunk accumulators are combined in index order, so
//! the floating-point aggregation is bitwise deterministic regardless of
//! scheduling.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::closedform::{
    conditional_moments, conditional_probabilities, reduction_probability, sample_terminal_energy,
    trajectory_rng, TimeGrid,
};
use crate::model::{initial_moments, ReductionParams, SpectralModel};
use crate::{Error, Result};

/// Paths in one sequentially-walked chunk. Fixed so that aggregation order
/// does not depend on the thread count.
const CHUNK: usize = 256;

/// Default cap on n_paths * steps for one ensemble run.
pub const DEFAULT_PATH_BUDGET: u64 = 2_000_000_000;

#[derive(Debug, Clone)]
pub struct EnsembleConfig {
    pub n_paths: usize,
    pub model: SpectralModel,
    pub params: ReductionParams,
    /// Times at which cross-path statistics are recorded; must lie on the
    /// grid, sorted, within [0, t_max].
    pub checkpoint_times: Vec<f64>,
    /// None selects the rayon default.
    pub worker_count: Option<usize>,
    /// When set, per-path (H, V, terminal energy) records are kept at this
    /// time for the conditional-moment test.
    pub mid_time: Option<f64>,
    /// The `n` in the martingale-decay events `M < e^-n` tallied for the
    /// reduction-time test.
    pub martingale_log_threshold: f64,
    pub path_budget: u64,
}

impl EnsembleConfig {
    pub fn new(
        model: SpectralModel,
        params: ReductionParams,
        n_paths: usize,
        checkpoint_times: Vec<f64>,
    ) -> Self {
        Self {
            n_paths,
            model,
            params,
            checkpoint_times,
            worker_count: None,
            mid_time: None,
            martingale_log_threshold: 10.0,
            path_budget: DEFAULT_PATH_BUDGET,
        }
    }
}

/// Cross-path statistics at one checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CheckpointStats {
    pub t: f64,
    pub h_mean: f64,
    pub h_var: f64,
    /// Standard error of `h_mean`; zero when n_paths = 1 (flagged by
    /// `EnsembleSummary::single_path`).
    pub h_se: f64,
    pub v_mean: f64,
    pub v_se: f64,
    pub v2_mean: f64,
    pub v2_se: f64,
    /// Mean of the per-path identity deviation
    /// `V_t - V_first + sigma^2 * int V_s^2 ds` (trapezoid over checkpoints
    /// from the first checkpoint); should vanish under the variance law.
    pub ident_mean: f64,
    pub ident_se: f64,
}

/// Per-path record at the configured mid time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MidRecord {
    pub h_mid: f64,
    pub v_mid: f64,
    pub terminal_energy: f64,
}

/// Aggregated output of [`run_ensemble`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleSummary {
    pub n_paths: usize,
    pub sigma: f64,
    pub t_max: f64,
    pub reduction_epsilon: f64,
    pub h0: f64,
    pub v0: f64,
    pub checkpoint_times: Vec<f64>,
    pub stats: Vec<CheckpointStats>,
    /// Paths classified per level by the terminal posterior threshold.
    pub terminal_tallies: Vec<usize>,
    pub unreduced: usize,
    /// Sampled terminal level per path, tallied.
    pub sampled_tallies: Vec<usize>,
    /// First-passage times of the posterior threshold, reduced paths only,
    /// path order.
    pub reduction_times: Vec<f64>,
    pub martingale_log_threshold: f64,
    /// Two-state models, conditioned on sampled level 0: paths counted at
    /// each checkpoint, and how many have the off-branch martingale below
    /// `e^-n`.
    pub cond_counts: Vec<usize>,
    pub cond_below: Vec<usize>,
    /// `(ln M, ln|H - E_1|)` at the last checkpoint, conditioned paths.
    pub tail_pairs: Vec<(f64, f64)>,
    pub mid_records: Vec<MidRecord>,
    /// True when variance estimates are undefined (n_paths = 1).
    pub single_path: bool,
}

impl EnsembleSummary {
    pub fn terminal_fractions(&self) -> Vec<f64> {
        self.terminal_tallies
            .iter()
            .map(|&c| c as f64 / self.n_paths as f64)
            .collect()
    }
}

struct Accumulator {
    sum_h: Vec<f64>,
    sum_h2: Vec<f64>,
    sum_v: Vec<f64>,
    sum_v2: Vec<f64>,
    sum_v4: Vec<f64>,
    sum_d: Vec<f64>,
    sum_d2: Vec<f64>,
    terminal_tallies: Vec<usize>,
    unreduced: usize,
    sampled_tallies: Vec<usize>,
    reduction_times: Vec<f64>,
    cond_counts: Vec<usize>,
    cond_below: Vec<usize>,
    tail_pairs: Vec<(f64, f64)>,
    mid_records: Vec<MidRecord>,
}

impl Accumulator {
    fn new(n_checkpoints: usize, n_levels: usize) -> Self {
        Self {
            sum_h: vec![0.0; n_checkpoints],
            sum_h2: vec![0.0; n_checkpoints],
            sum_v: vec![0.0; n_checkpoints],
            sum_v2: vec![0.0; n_checkpoints],
            sum_v4: vec![0.0; n_checkpoints],
            sum_d: vec![0.0; n_checkpoints],
            sum_d2: vec![0.0; n_checkpoints],
            terminal_tallies: vec![0; n_levels],
            unreduced: 0,
            sampled_tallies: vec![0; n_levels],
            reduction_times: Vec::new(),
            cond_counts: vec![0; n_checkpoints],
            cond_below: vec![0; n_checkpoints],
            tail_pairs: Vec::new(),
            mid_records: Vec::new(),
        }
    }

    fn merge(&mut self, other: Accumulator) {
        for (a, b) in self.sum_h.iter_mut().zip(&other.sum_h) {
            *a += b;
        }
        for (a, b) in self.sum_h2.iter_mut().zip(&other.sum_h2) {
            *a += b;
        }
        for (a, b) in self.sum_v.iter_mut().zip(&other.sum_v) {
            *a += b;
        }
        for (a, b) in self.sum_v2.iter_mut().zip(&other.sum_v2) {
            *a += b;
        }
        for (a, b) in self.sum_v4.iter_mut().zip(&other.sum_v4) {
            *a += b;
        }
        for (a, b) in self.sum_d.iter_mut().zip(&other.sum_d) {
            *a += b;
        }
        for (a, b) in self.sum_d2.iter_mut().zip(&other.sum_d2) {
            *a += b;
        }
        for (a, b) in self
            .terminal_tallies
            .iter_mut()
            .zip(&other.terminal_tallies)
        {
            *a += b;
        }
        self.unreduced += other.unreduced;
        for (a, b) in self.sampled_tallies.iter_mut().zip(&other.sampled_tallies) {
            *a += b;
        }
        self.reduction_times.extend(other.reduction_times);
        for (a, b) in self.cond_counts.iter_mut().zip(&other.cond_counts) {
            *a += b;
        }
        for (a, b) in self.cond_below.iter_mut().zip(&other.cond_below) {
            *a += b;
        }
        self.tail_pairs.extend(other.tail_pairs);
        self.mid_records.extend(other.mid_records);
    }
}

fn checkpoint_indices(times: &[f64], grid: &TimeGrid) -> Result<Vec<usize>> {
    let mut indices = Vec::with_capacity(times.len());
    let mut prev = f64::NEG_INFINITY;
    for &t in times {
        if t < prev {
            return Err(Error::InvalidParams(
                "checkpoint_times must be sorted".into(),
            ));
        }
        prev = t;
        if t < 0.0 || t > grid.t_max() * (1.0 + 1e-12) {
            return Err(Error::InvalidParams(format!(
                "checkpoint {t} outside [0, {}]",
                grid.t_max()
            )));
        }
        let k = (t / grid.dt()).round() as usize;
        let k = k.min(grid.n_steps());
        if (t - grid.time(k)).abs() > 1e-9 * grid.dt().max(t) {
            return Err(Error::InvalidParams(format!(
                "checkpoint {t} does not lie on the grid (dt = {})",
                grid.dt()
            )));
        }
        indices.push(k);
    }
    Ok(indices)
}

/// Walks one path and folds it into `acc`. Consumes one uniform draw for
/// the terminal sample and one normal draw per step.
#[allow(clippy::too_many_arguments)]
fn walk_path(
    config: &EnsembleConfig,
    grid: &TimeGrid,
    cp_indices: &[usize],
    mid_index: Option<usize>,
    path_index: u64,
    acc: &mut Accumulator,
) {
    let model = &config.model;
    let sigma = config.params.sigma;
    let eps = config.params.reduction_epsilon;
    let two_state = model.len() == 2;
    let n_thresh = config.martingale_log_threshold;

    let mut rng = trajectory_rng(config.params.seed, path_index);
    let j = sample_terminal_energy(model, &mut rng);
    acc.sampled_tallies[j] += 1;
    let e_j = model.energies()[j];
    let drift = sigma * e_j * grid.dt();
    let sqrt_dt = grid.dt().sqrt();

    // omega for the two-state conditioned martingale M_{21} (only tallied
    // for paths that sampled level 0).
    let omega21 = if two_state {
        model.energies()[1] - model.energies()[0]
    } else {
        0.0
    };

    let mut xi = 0.0;
    let mut reduction_time: Option<f64> = None;
    let mut cp_cursor = 0usize;
    let mut terminal_pi_max = (0usize, 0.0f64);
    // Per-path trapezoid of V^2 over checkpoint times, for the variance
    // identity.
    let mut v_first = 0.0;
    let mut v2_integral = 0.0;
    let mut prev_cp: Option<(f64, f64)> = None;

    for k in 0..grid.len() {
        if k > 0 {
            let z: f64 = rng.sample(StandardNormal);
            xi += drift + sqrt_dt * z;
        }
        let t = grid.time(k);
        let pi = conditional_probabilities(model, sigma, xi, t);
        let (h, v, _) = conditional_moments(&pi, model.energies());

        if reduction_time.is_none() && pi[j] > 1.0 - eps {
            reduction_time = Some(t);
        }

        while cp_cursor < cp_indices.len() && cp_indices[cp_cursor] == k {
            let c = cp_cursor;
            acc.sum_h[c] += h;
            acc.sum_h2[c] += h * h;
            acc.sum_v[c] += v;
            acc.sum_v2[c] += v * v;
            acc.sum_v4[c] += v * v * v * v;
            match prev_cp {
                None => v_first = v,
                Some((t_prev, v2_prev)) => {
                    v2_integral += 0.5 * (t - t_prev) * (v2_prev + v * v);
                }
            }
            prev_cp = Some((t, v * v));
            let d = v - v_first + sigma * sigma * v2_integral;
            acc.sum_d[c] += d;
            acc.sum_d2[c] += d * d;
            if two_state && j == 0 {
                acc.cond_counts[c] += 1;
                let b = xi - sigma * e_j * t;
                let ln_m = sigma * omega21 * b - 0.5 * sigma * sigma * omega21 * omega21 * t;
                if ln_m < -n_thresh {
                    acc.cond_below[c] += 1;
                }
                if c == cp_indices.len() - 1 {
                    let dev = (h - model.energies()[0]).abs();
                    if dev > 0.0 && ln_m < 0.0 {
                        acc.tail_pairs.push((ln_m, dev.ln()));
                    }
                }
            }
            cp_cursor += 1;
        }

        if Some(k) == mid_index {
            acc.mid_records.push(MidRecord {
                h_mid: h,
                v_mid: v,
                terminal_energy: e_j,
            });
        }

        if k == grid.n_steps() {
            let (arg, max) = pi
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, &p)| (i, p))
                .unwrap();
            terminal_pi_max = (arg, max);
        }
    }

    if terminal_pi_max.1 > 1.0 - eps {
        acc.terminal_tallies[terminal_pi_max.0] += 1;
        if let Some(rt) = reduction_time {
            acc.reduction_times.push(rt);
        }
    } else {
        acc.unreduced += 1;
    }
}

/// Runs `n_paths` independent trajectories and aggregates per-checkpoint
/// statistics. Bitwise deterministic for a given config, independent of
/// `worker_count`.
pub fn run_ensemble(config: &EnsembleConfig) -> Result<EnsembleSummary> {
    if config.n_paths == 0 {
        return Err(Error::InvalidParams("n_paths must be positive".into()));
    }
    let grid = TimeGrid::from_params(&config.params)?;
    let work = config.n_paths as u64 * grid.n_steps() as u64;
    if work > config.path_budget {
        return Err(Error::ResourceCap(format!(
            "n_paths * steps = {work} exceeds the budget {}",
            config.path_budget
        )));
    }
    let cp_indices = checkpoint_indices(&config.checkpoint_times, &grid)?;
    let mid_index = match config.mid_time {
        Some(t) => Some(
            checkpoint_indices(&[t], &grid)
                .map_err(|_| Error::InvalidParams(format!("mid_time {t} not on the grid")))?[0],
        ),
        None => None,
    };

    let n_cp = cp_indices.len();
    let n_levels = config.model.len();
    let chunk_starts: Vec<usize> = (0..config.n_paths).step_by(CHUNK).collect();

    let run = || -> Vec<Accumulator> {
        chunk_starts
            .par_iter()
            .map(|&start| {
                let end = (start + CHUNK).min(config.n_paths);
                let mut acc = Accumulator::new(n_cp, n_levels);
                for i in start..end {
                    walk_path(config, &grid, &cp_indices, mid_index, i as u64, &mut acc);
                }
                acc
            })
            .collect()
    };
    let chunk_accs = match config.worker_count {
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w.max(1))
                .build()
                .map_err(|e| Error::InvalidParams(format!("worker pool: {e}")))?;
            pool.install(run)
        }
        None => run(),
    };

    let mut acc = Accumulator::new(n_cp, n_levels);
    for chunk in chunk_accs {
        acc.merge(chunk);
    }

    let n = config.n_paths as f64;
    let single_path = config.n_paths == 1;
    let stats: Vec<CheckpointStats> = (0..n_cp)
        .map(|c| {
            let h_mean = acc.sum_h[c] / n;
            let v_mean = acc.sum_v[c] / n;
            let v2_mean = acc.sum_v2[c] / n;
            let d_mean = acc.sum_d[c] / n;
            let (h_var, h_se, v_se, v2_se, d_se) = if single_path {
                (0.0, 0.0, 0.0, 0.0, 0.0)
            } else {
                let h_var = ((acc.sum_h2[c] - n * h_mean * h_mean) / (n - 1.0)).max(0.0);
                let v_var = ((acc.sum_v2[c] - n * v_mean * v_mean) / (n - 1.0)).max(0.0);
                let v2_var = ((acc.sum_v4[c] - n * v2_mean * v2_mean) / (n - 1.0)).max(0.0);
                let d_var = ((acc.sum_d2[c] - n * d_mean * d_mean) / (n - 1.0)).max(0.0);
                (
                    h_var,
                    (h_var / n).sqrt(),
                    (v_var / n).sqrt(),
                    (v2_var / n).sqrt(),
                    (d_var / n).sqrt(),
                )
            };
            CheckpointStats {
                t: config.checkpoint_times[c],
                h_mean,
                h_var,
                h_se,
                v_mean,
                v_se,
                v2_mean,
                v2_se,
                ident_mean: d_mean,
                ident_se: d_se,
            }
        })
        .collect();

    let (h0, v0, _) = initial_moments(&config.model);
    Ok(EnsembleSummary {
        n_paths: config.n_paths,
        sigma: config.params.sigma,
        t_max: grid.t_max(),
        reduction_epsilon: config.params.reduction_epsilon,
        h0,
        v0,
        checkpoint_times: config.checkpoint_times.clone(),
        stats,
        terminal_tallies: acc.terminal_tallies,
        unreduced: acc.unreduced,
        sampled_tallies: acc.sampled_tallies,
        reduction_times: acc.reduction_times,
        martingale_log_threshold: config.martingale_log_threshold,
        cond_counts: acc.cond_counts,
        cond_below: acc.cond_below,
        tail_pairs: acc.tail_pairs,
        mid_records: acc.mid_records,
        single_path,
    })
}

/// One line of a statistical test report.
#[derive(Debug, Clone, Serialize)]
pub struct TestRow {
    pub label: String,
    pub observed: f64,
    pub expected: f64,
    pub tolerance: f64,
    pub z: f64,
    pub passed: bool,
}

impl TestRow {
    fn gate(label: String, observed: f64, expected: f64, tolerance: f64) -> Self {
        let dev = observed - expected;
        let z = if tolerance > 0.0 {
            3.0 * dev / tolerance
        } else if dev == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        Self {
            label,
            observed,
            expected,
            tolerance,
            z,
            passed: dev.abs() <= tolerance,
        }
    }
}

/// Outcome of one law check. All gates are three-sigma; with the sample
/// sizes used by the test suite the per-test false-failure rate stays well
/// under 1% (two-sided 3-sigma is alpha ~ 0.0027 per gate).
#[derive(Debug, Clone, Serialize)]
pub struct TestReport {
    pub name: String,
    pub passed: bool,
    pub inconclusive: bool,
    pub rows: Vec<TestRow>,
    pub skipped: Vec<String>,
}

impl TestReport {
    fn from_rows(name: &str, rows: Vec<TestRow>, skipped: Vec<String>) -> Self {
        Self {
            name: name.to_string(),
            passed: rows.iter().all(|r| r.passed),
            inconclusive: rows.is_empty(),
            rows,
            skipped,
        }
    }
}

/// Energy conservation in the mean: |mean(H_t) - H0| <= 3 SE at every
/// checkpoint.
pub fn martingale_test(summary: &EnsembleSummary, h0: f64) -> TestReport {
    let rows = summary
        .stats
        .iter()
        .map(|s| TestRow::gate(format!("H at t={}", s.t), s.h_mean, h0, 3.0 * s.h_se))
        .collect();
    TestReport::from_rows("martingale", rows, Vec::new())
}

/// Variance decay: mean(V_t) nonincreasing beyond noise, terminal variance
/// collapsed when the run is long enough, and the expectation identity
/// `E[V_t] = V0 - sigma^2 int_0^t E[V_s^2] ds` (trapezoid over checkpoints,
/// requires the first checkpoint at t = 0).
pub fn potential_test(summary: &EnsembleSummary) -> TestReport {
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    let stats = &summary.stats;

    for w in stats.windows(2) {
        let tol = 3.0 * (w[0].v_se * w[0].v_se + w[1].v_se * w[1].v_se).sqrt();
        let increase = (w[1].v_mean - w[0].v_mean).max(0.0);
        if increase > tol {
            rows.push(TestRow::gate(
                format!("V monotone {} -> {}", w[0].t, w[1].t),
                w[1].v_mean,
                w[0].v_mean,
                tol,
            ));
        }
    }
    if rows.is_empty() {
        rows.push(TestRow {
            label: "V monotone across checkpoints".into(),
            observed: 0.0,
            expected: 0.0,
            tolerance: 0.0,
            z: 0.0,
            passed: true,
        });
    }

    let tau_r = if summary.v0 > 0.0 {
        1.0 / (summary.sigma * summary.sigma * summary.v0)
    } else {
        f64::INFINITY
    };
    if summary.v0 == 0.0 {
        // Eigenstate: V identically zero.
        if let Some(last) = stats.last() {
            rows.push(TestRow::gate(
                "terminal V (eigenstate)".into(),
                last.v_mean,
                0.0,
                1e-12,
            ));
        }
    } else if summary.t_max >= 20.0 * tau_r * (1.0 - 1e-9) {
        let last = stats.last().unwrap();
        let row = TestRow {
            label: format!("terminal V < 0.01 V0 at t={}", last.t),
            observed: last.v_mean,
            expected: 0.01 * summary.v0,
            tolerance: 0.0,
            z: 0.0,
            passed: last.v_mean < 0.01 * summary.v0,
        };
        rows.push(row);
    } else {
        skipped.push("terminal decay (t_max < 20 tau_R)".into());
    }

    // Integral identity: the per-path deviation
    // V_t - V_first + sigma^2 * trapz(V^2) is accumulated during the run,
    // so its SE carries the cross-checkpoint correlations exactly.
    if stats.len() >= 3 {
        for s in stats.iter().skip(1) {
            rows.push(TestRow::gate(
                format!("E[V] identity at t={}", s.t),
                s.ident_mean,
                0.0,
                3.0 * s.ident_se,
            ));
        }
    } else {
        skipped.push("integral identity (needs >= 3 checkpoints)".into());
    }

    TestReport::from_rows("potential", rows, skipped)
}

/// Bins paths by H at the mid time; within each populated bin the terminal
/// energies must average to the bin's H (and their squared deviations to
/// the bin's V) within 3 SE.
pub fn conditional_mean_test(summary: &EnsembleSummary, n_bins: usize) -> TestReport {
    let records = &summary.mid_records;
    let mut skipped = Vec::new();
    if records.is_empty() {
        return TestReport {
            name: "conditional_mean".into(),
            passed: false,
            inconclusive: true,
            rows: Vec::new(),
            skipped: vec!["no mid-time records (set mid_time in the config)".into()],
        };
    }
    let lo = records
        .iter()
        .map(|r| r.h_mid)
        .fold(f64::INFINITY, f64::min);
    let hi = records
        .iter()
        .map(|r| r.h_mid)
        .fold(f64::NEG_INFINITY, f64::max);
    let width = ((hi - lo) / n_bins as f64).max(f64::MIN_POSITIVE);

    let mut bins: Vec<Vec<&MidRecord>> = vec![Vec::new(); n_bins];
    for r in records {
        let b = (((r.h_mid - lo) / width) as usize).min(n_bins - 1);
        bins[b].push(r);
    }

    let mut rows = Vec::new();
    for (b, bin) in bins.iter().enumerate() {
        if bin.len() < 30 {
            if !bin.is_empty() {
                skipped.push(format!("bin {b}: only {} paths", bin.len()));
            }
            continue;
        }
        let n = bin.len() as f64;
        // First moment: mean(E_term - H_mid) should vanish.
        let d1: Vec<f64> = bin.iter().map(|r| r.terminal_energy - r.h_mid).collect();
        let m1 = d1.iter().sum::<f64>() / n;
        let s1 = (d1.iter().map(|d| (d - m1) * (d - m1)).sum::<f64>() / (n - 1.0) / n).sqrt();
        rows.push(TestRow::gate(format!("bin {b} mean"), m1, 0.0, 3.0 * s1));
        // Second moment: mean((E_term - H_mid)^2 - V_mid) should vanish.
        let d2: Vec<f64> = bin
            .iter()
            .map(|r| (r.terminal_energy - r.h_mid).powi(2) - r.v_mid)
            .collect();
        let m2 = d2.iter().sum::<f64>() / n;
        let s2 = (d2.iter().map(|d| (d - m2) * (d - m2)).sum::<f64>() / (n - 1.0) / n).sqrt();
        rows.push(TestRow::gate(format!("bin {b} var"), m2, 0.0, 3.0 * s2));
    }
    let mut report = TestReport::from_rows("conditional_mean", rows, skipped);
    report.inconclusive = report.rows.is_empty();
    report
}

/// Two-state reduction-timescale law: the fraction of paths (conditioned on
/// sampled level 0) whose off-branch martingale has decayed below `e^-n` is
/// compared to the analytic normal-CDF law at each checkpoint, and the
/// tail relation `H - E_1 ~ const * M` is checked as a unit log-log slope.
pub fn reduction_time_test(summary: &EnsembleSummary, model: &SpectralModel) -> TestReport {
    let name = "reduction_time";
    let mut skipped = Vec::new();
    if model.len() != 2 {
        return TestReport {
            name: name.into(),
            passed: false,
            inconclusive: true,
            rows: Vec::new(),
            skipped: vec!["model is not two-state".into()],
        };
    }
    let total_cond = *summary.cond_counts.last().unwrap_or(&0);
    if total_cond < 500 {
        return TestReport {
            name: name.into(),
            passed: false,
            inconclusive: true,
            rows: Vec::new(),
            skipped: vec![format!("only {total_cond} conditioned paths (< 500)")],
        };
    }

    let omega = model.energies()[1] - model.energies()[0];
    let beta = 0.25 * summary.sigma * summary.sigma * omega * omega;
    let n_thresh = summary.martingale_log_threshold;

    let mut rows = Vec::new();
    for (c, &t) in summary.checkpoint_times.iter().enumerate() {
        if t <= 0.0 {
            continue;
        }
        let count = summary.cond_counts[c];
        if count == 0 {
            continue;
        }
        let expected = reduction_probability(beta, t, n_thresh).unwrap();
        let nf = count as f64;
        // Normal-approximation validity for the binomial band.
        if expected * nf < 10.0 || (1.0 - expected) * nf < 10.0 {
            skipped.push(format!(
                "t={t}: expected fraction {expected:.3e} too extreme"
            ));
            continue;
        }
        let observed = summary.cond_below[c] as f64 / nf;
        let tol = 3.0 * (expected * (1.0 - expected) / nf).sqrt();
        rows.push(TestRow::gate(
            format!("P(M < e^-{n_thresh}) at t={t}"),
            observed,
            expected,
            tol,
        ));
    }

    // Tail slope of ln|H - E_1| against ln M: the asymptote is slope 1.
    let pairs: Vec<&(f64, f64)> = summary
        .tail_pairs
        .iter()
        .filter(|(ln_m, _)| *ln_m < -2.0)
        .collect();
    if pairs.len() >= 100 {
        let n = pairs.len() as f64;
        let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
        let slope = sxy / sxx;
        rows.push(TestRow::gate("tail log-log slope".into(), slope, 1.0, 0.1));
    } else {
        skipped.push(format!(
            "tail slope: only {} deep-tail pairs at the final checkpoint",
            pairs.len()
        ));
    }

    let mut report = TestReport::from_rows(name, rows, skipped);
    report.inconclusive = report.rows.is_empty();
    report
}

/// Terminal tallies against the initial probabilities, 3-sigma binomial
/// band per level. Unreduced paths fail the check if they exceed the band.
pub fn terminal_test(summary: &EnsembleSummary, model: &SpectralModel) -> TestReport {
    let n = summary.n_paths as f64;
    let mut rows: Vec<TestRow> = model
        .probabilities()
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let observed = summary.terminal_tallies[i] as f64 / n;
            let tol = 3.0 * (p * (1.0 - p) / n).sqrt();
            TestRow::gate(format!("terminal fraction level {i}"), observed, p, tol)
        })
        .collect();
    rows.push(TestRow {
        label: "unreduced paths".into(),
        observed: summary.unreduced as f64,
        expected: 0.0,
        tolerance: 0.0,
        z: 0.0,
        // A handful of stragglers is statistically expected; gate at 1%.
        passed: (summary.unreduced as f64) <= 0.01 * n,
    });
    TestReport::from_rows("terminal", rows, Vec::new())
}
