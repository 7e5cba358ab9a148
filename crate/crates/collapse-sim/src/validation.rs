//! Pathwise validation of the closed-form engine against the Euler-Maruyama
//! reference, across grid refinements on a shared Brownian path.
//!
//! The Brownian increments are generated once on the finest grid; coarser
//! signal paths are exact restrictions of the fine path, so the comparison
//! isolates the integrator's discretization error. Each reference run is
//! driven by the innovation increments of the closed-form trajectory on its
//! own grid, which makes the comparison pathwise rather than merely
//! distributional.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::closedform::{
    self, conditional_moments, conditional_probabilities, innovation_path, sample_terminal_energy,
    trajectory_rng, TimeGrid,
};
use crate::model::SpectralModel;
use crate::sde_reference::integrate_reference;
use crate::{Error, Result};

/// Aggregated comparison at one refinement level.
#[derive(Debug, Clone, Serialize)]
pub struct RefinementLevel {
    pub dt: f64,
    pub mean_max_h_error: f64,
    pub max_max_h_error: f64,
    /// Fraction of seeds whose terminal classification (argmax posterior vs
    /// argmax squared reference amplitude) agrees.
    pub terminal_agreement: f64,
}

/// Output of [`validation_sweep`].
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub n_seeds: usize,
    pub t_max: f64,
    pub levels: Vec<RefinementLevel>,
    /// Mean max-error strictly decreases from coarse to fine.
    pub errors_strictly_decreasing: bool,
    /// Fraction of seeds whose per-seed error column is strictly decreasing.
    pub per_seed_monotone_fraction: f64,
}

struct SeedResult {
    errors: Vec<f64>,
    agreements: Vec<bool>,
}

#[allow(clippy::too_many_arguments)]
fn validate_seed(
    model: &SpectralModel,
    sigma: f64,
    t_max: f64,
    base_dt: f64,
    ratio: usize,
    n_levels: usize,
    seed: u64,
    path_index: u64,
) -> Result<SeedResult> {
    let fine_stride = ratio.pow((n_levels - 1) as u32);
    let fine_grid = TimeGrid::new(t_max, base_dt / fine_stride as f64)?;

    let mut rng = trajectory_rng(seed, path_index);
    let j = sample_terminal_energy(model, &mut rng);
    let drift = sigma * model.energies()[j] * fine_grid.dt();
    let sqrt_dt = fine_grid.dt().sqrt();
    let mut xi_fine = Vec::with_capacity(fine_grid.len());
    xi_fine.push(0.0);
    let mut x = 0.0;
    for _ in 0..fine_grid.n_steps() {
        let z: f64 = rng.sample(StandardNormal);
        x += drift + sqrt_dt * z;
        xi_fine.push(x);
    }

    let mut errors = Vec::with_capacity(n_levels);
    let mut agreements = Vec::with_capacity(n_levels);
    for level in 0..n_levels {
        let stride = ratio.pow((n_levels - 1 - level) as u32);
        let grid = TimeGrid::new(t_max, base_dt / ratio.pow(level as u32) as f64)?;
        let xi: Vec<f64> = xi_fine.iter().step_by(stride).copied().collect();
        debug_assert_eq!(xi.len(), grid.len());

        let mut h_closed = Vec::with_capacity(grid.len());
        let mut last_pi = Vec::new();
        for (k, t) in grid.times().enumerate() {
            let pi = conditional_probabilities(model, sigma, xi[k], t);
            h_closed.push(conditional_moments(&pi, model.energies()).0);
            if k == grid.n_steps() {
                last_pi = pi;
            }
        }
        let w = innovation_path(&xi, &h_closed, sigma, &grid)?;
        let dw: Vec<f64> = (1..grid.len()).map(|k| w[k] - w[k - 1]).collect();
        let reference = integrate_reference(model, &grid, sigma, &dw)?;

        let max_err = reference
            .h
            .iter()
            .zip(&h_closed)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let closed_class = argmax(&last_pi);
        let ref_class = argmax(
            &reference.amplitudes[grid.n_steps()]
                .iter()
                .map(|a| a.norm_sqr())
                .collect::<Vec<_>>(),
        );
        errors.push(max_err);
        agreements.push(closed_class == ref_class);
    }
    Ok(SeedResult { errors, agreements })
}

fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap()
}

/// Runs the closed-form vs reference comparison over `n_seeds` independent
/// paths and `n_levels` grid refinements (coarsest step `base_dt`, refined
/// by `ratio` each level).
#[allow(clippy::too_many_arguments)]
pub fn validation_sweep(
    model: &SpectralModel,
    sigma: f64,
    t_max: f64,
    base_dt: f64,
    ratio: usize,
    n_levels: usize,
    seed: u64,
    n_seeds: usize,
) -> Result<ValidationReport> {
    if n_levels < 2 {
        return Err(Error::InvalidParams(
            "validation needs at least 2 refinement levels".into(),
        ));
    }
    if ratio < 2 {
        return Err(Error::InvalidParams("refinement ratio must be >= 2".into()));
    }
    if n_seeds == 0 {
        return Err(Error::InvalidParams("n_seeds must be positive".into()));
    }
    let results: Vec<Result<SeedResult>> = (0..n_seeds)
        .into_par_iter()
        .map(|i| {
            validate_seed(
                model, sigma, t_max, base_dt, ratio, n_levels, seed, i as u64,
            )
        })
        .collect();
    let results: Vec<SeedResult> = results.into_iter().collect::<Result<_>>()?;

    let mut levels = Vec::with_capacity(n_levels);
    for l in 0..n_levels {
        let errs: Vec<f64> = results.iter().map(|r| r.errors[l]).collect();
        let agree = results.iter().filter(|r| r.agreements[l]).count();
        levels.push(RefinementLevel {
            dt: base_dt / ratio.pow(l as u32) as f64,
            mean_max_h_error: errs.iter().sum::<f64>() / errs.len() as f64,
            max_max_h_error: errs.iter().cloned().fold(0.0, f64::max),
            terminal_agreement: agree as f64 / n_seeds as f64,
        });
    }
    let decreasing = levels
        .windows(2)
        .all(|w| w[1].mean_max_h_error < w[0].mean_max_h_error);
    let monotone_seeds = results
        .iter()
        .filter(|r| r.errors.windows(2).all(|w| w[1] < w[0]))
        .count();
    Ok(ValidationReport {
        n_seeds,
        t_max,
        levels,
        errors_strictly_decreasing: decreasing,
        per_seed_monotone_fraction: monotone_seeds as f64 / n_seeds as f64,
    })
}

/// Root-mean-square residual of the posterior dynamics
/// `dPi_i = sigma (E_i - H) Pi_i dW` at refinements of a fixed Brownian
/// path: returns one RMS per level, coarsest first. Used to check the
/// residual shrinks at least linearly in dt.
pub fn pi_dynamics_residual_rms(
    model: &SpectralModel,
    sigma: f64,
    t_max: f64,
    base_dt: f64,
    n_levels: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let ratio = 2usize;
    let fine_stride = ratio.pow((n_levels - 1) as u32);
    let fine_grid = TimeGrid::new(t_max, base_dt / fine_stride as f64)?;

    let mut rng = trajectory_rng(seed, 0);
    let j = sample_terminal_energy(model, &mut rng);
    let xi_fine = closedform::simulate_signal(j, model, &fine_grid, sigma, &mut rng);

    let mut out = Vec::with_capacity(n_levels);
    for level in 0..n_levels {
        let stride = ratio.pow((n_levels - 1 - level) as u32);
        let grid = TimeGrid::new(t_max, base_dt / ratio.pow(level as u32) as f64)?;
        let xi: Vec<f64> = xi_fine.iter().step_by(stride).copied().collect();

        let mut pi_path = Vec::with_capacity(grid.len());
        let mut h_path = Vec::with_capacity(grid.len());
        for (k, t) in grid.times().enumerate() {
            let pi = conditional_probabilities(model, sigma, xi[k], t);
            h_path.push(conditional_moments(&pi, model.energies()).0);
            pi_path.push(pi);
        }
        let w = innovation_path(&xi, &h_path, sigma, &grid)?;

        let mut sum_sqr = 0.0;
        let mut count = 0usize;
        for k in 0..grid.n_steps() {
            let dw = w[k + 1] - w[k];
            for ((&e, &p), &p_next) in model
                .energies()
                .iter()
                .zip(&pi_path[k])
                .zip(&pi_path[k + 1])
            {
                let predicted = sigma * (e - h_path[k]) * p * dw;
                let residual = (p_next - p) - predicted;
                sum_sqr += residual * residual;
                count += 1;
            }
        }
        out.push((sum_sqr / count as f64).sqrt());
    }
    Ok(out)
}
