//! Closed-form reduction engine.
//!
//! A trajectory is generated in three moves: sample the terminal energy
//! level from the initial probabilities, simulate the signal
//! `xi_t = sigma*E_j*t + B_t`, and recover conditional probabilities,
//! energy moments, state vector, and the innovation Brownian motion
//! algebraically at each grid time. No stochastic integration is involved.

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::model::{ReductionParams, SpectralModel};
use crate::{Error, Result};

/// Uniform time grid from 0 to `t_max` in `n_steps` steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    dt: f64,
    n_steps: usize,
}

impl TimeGrid {
    /// Builds a grid covering `[0, t_max]`. `t_max/dt` must be an integer
    /// within 1e-9 relative; the step is adjusted to divide `t_max` exactly.
    pub fn new(t_max: f64, dt: f64) -> Result<Self> {
        if !(t_max > 0.0 && dt > 0.0 && dt < t_max) {
            return Err(Error::InvalidParams(
                "time grid needs 0 < dt < t_max".into(),
            ));
        }
        let ratio = t_max / dt;
        let n_steps = ratio.round() as usize;
        if n_steps == 0 || (ratio - n_steps as f64).abs() > 1e-9 * ratio {
            return Err(Error::InvalidParams(format!(
                "t_max/dt = {ratio} is not an integer number of steps"
            )));
        }
        Ok(Self {
            dt: t_max / n_steps as f64,
            n_steps,
        })
    }

    pub fn from_params(params: &ReductionParams) -> Result<Self> {
        params.validate()?;
        Self::new(params.t_max, params.dt)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Number of grid points, `n_steps + 1`.
    pub fn len(&self) -> usize {
        self.n_steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn t_max(&self) -> f64 {
        self.dt * self.n_steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.dt * k as f64
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.len()).map(|k| self.time(k))
    }
}

/// One realization of the reduction process on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPath {
    pub grid: TimeGrid,
    /// Index of the sampled terminal level.
    pub terminal_index: usize,
    pub xi: Vec<f64>,
    pub w: Vec<f64>,
    pub pi_t: Vec<Vec<f64>>,
    pub h: Vec<f64>,
    pub v: Vec<f64>,
    pub skew: Vec<f64>,
    pub amplitudes: Vec<Vec<Complex64>>,
}

impl TrajectoryPath {
    /// First grid time at which the terminal level's conditional probability
    /// exceeds `1 - epsilon`, if it ever does.
    pub fn reduction_time(&self, epsilon: f64) -> Option<f64> {
        self.pi_t
            .iter()
            .position(|pi| pi[self.terminal_index] > 1.0 - epsilon)
            .map(|k| self.grid.time(k))
    }
}

/// RNG for one trajectory: the root seed keys the cipher and the path index
/// selects an independent stream, so ensembles are reproducible and
/// embarrassingly parallel.
pub fn trajectory_rng(seed: u64, path_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_index);
    rng
}

/// Samples the terminal level index with the model's probabilities.
/// Consumes exactly one uniform draw.
pub fn sample_terminal_energy<R: Rng + ?Sized>(model: &SpectralModel, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in model.probabilities().iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    model.len() - 1
}

/// Signal path `xi_k = sigma*E_j*t_k + B_{t_k}` on the grid, one normal
/// draw per step.
pub fn simulate_signal<R: Rng + ?Sized>(
    terminal_index: usize,
    model: &SpectralModel,
    grid: &TimeGrid,
    sigma: f64,
    rng: &mut R,
) -> Vec<f64> {
    let drift = sigma * model.energies()[terminal_index] * grid.dt();
    let sqrt_dt = grid.dt().sqrt();
    let mut xi = Vec::with_capacity(grid.len());
    xi.push(0.0);
    let mut x = 0.0;
    for _ in 0..grid.n_steps() {
        let z: f64 = rng.sample(StandardNormal);
        x += drift + sqrt_dt * z;
        xi.push(x);
    }
    xi
}

/// Log-weights `ln(pi_i) + sigma*E_i*xi - sigma^2*E_i^2*t/2` of the Bayes
/// posterior, before normalization.
fn log_weights(model: &SpectralModel, sigma: f64, xi: f64, t: f64) -> Vec<f64> {
    model
        .probabilities()
        .iter()
        .zip(model.energies())
        .map(|(&p, &e)| p.ln() + sigma * e * xi - 0.5 * sigma * sigma * e * e * t)
        .collect()
}

/// Normalizes log-weights into probabilities by shifting out the maximum
/// exponent before exponentiating.
fn softmax_in_place(lw: &mut [f64]) {
    let max = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for w in lw.iter_mut() {
        *w = (*w - max).exp();
        sum += *w;
    }
    for w in lw.iter_mut() {
        *w /= sum;
    }
}

/// Posterior probability of each level given the signal value `xi` at time
/// `t`. Evaluated in the log domain, so exponents up to ~1e6 in magnitude
/// are safe.
pub fn conditional_probabilities(model: &SpectralModel, sigma: f64, xi: f64, t: f64) -> Vec<f64> {
    let mut lw = log_weights(model, sigma, xi, t);
    softmax_in_place(&mut lw);
    lw
}

/// Mean, variance, and third central moment of `energies` under `pi_vec`.
/// Two-pass around the mean.
pub fn conditional_moments(pi_vec: &[f64], energies: &[f64]) -> (f64, f64, f64) {
    debug_assert_eq!(pi_vec.len(), energies.len());
    let h: f64 = pi_vec.iter().zip(energies).map(|(&p, &e)| p * e).sum();
    let mut v = 0.0;
    let mut beta = 0.0;
    for (&p, &e) in pi_vec.iter().zip(energies) {
        let d = e - h;
        v += p * d * d;
        beta += p * d * d * d;
    }
    (h, v.max(0.0), beta)
}

/// Conditional energy expectation `H(xi, t)`.
pub fn conditional_energy(model: &SpectralModel, sigma: f64, xi: f64, t: f64) -> f64 {
    conditional_moments(
        &conditional_probabilities(model, sigma, xi, t),
        model.energies(),
    )
    .0
}

/// Conditional energy variance `V(xi, t)`.
pub fn conditional_variance(model: &SpectralModel, sigma: f64, xi: f64, t: f64) -> f64 {
    conditional_moments(
        &conditional_probabilities(model, sigma, xi, t),
        model.energies(),
    )
    .1
}

/// State vector at `(xi, t)`: per level, the retained initial phase, the
/// Schrodinger phase `exp(-i E_i t)`, and modulus `sqrt(Pi_i)`.
pub fn state_vector(model: &SpectralModel, sigma: f64, xi: f64, t: f64) -> Vec<Complex64> {
    let pi = conditional_probabilities(model, sigma, xi, t);
    model
        .phases()
        .iter()
        .zip(model.energies())
        .zip(&pi)
        .map(|((&phase, &e), &p)| phase * Complex64::from_polar(p.sqrt(), -e * t))
        .collect()
}

/// Innovation process `W_t = xi_t - sigma * int_0^t H_s ds`, the integral
/// taken by the trapezoidal rule on the grid.
pub fn innovation_path(xi: &[f64], h: &[f64], sigma: f64, grid: &TimeGrid) -> Result<Vec<f64>> {
    if xi.len() != grid.len() {
        return Err(Error::LengthMismatch {
            expected: grid.len(),
            got: xi.len(),
            context: "signal path vs grid",
        });
    }
    if h.len() != grid.len() {
        return Err(Error::LengthMismatch {
            expected: grid.len(),
            got: h.len(),
            context: "energy path vs grid",
        });
    }
    let dt = grid.dt();
    let mut w = Vec::with_capacity(grid.len());
    w.push(0.0);
    let mut integral = 0.0;
    for k in 1..grid.len() {
        integral += 0.5 * (h[k - 1] + h[k]) * dt;
        w.push(xi[k] - sigma * integral);
    }
    Ok(w)
}

/// Exponential martingale `exp(sigma*omega*b - sigma^2*omega^2*t/2)`.
pub fn exponential_martingale(sigma: f64, omega: f64, b: f64, t: f64) -> f64 {
    (sigma * omega * b - 0.5 * sigma * sigma * omega * omega * t).exp()
}

/// Realized energy expectation conditioned on terminal level `j`, written
/// in terms of the exponential martingales of the non-selected levels:
/// `(pi_j E_j + sum' pi_i E_i M_ij) / (pi_j + sum' pi_i M_ij)`.
///
/// Algebraically identical to the Bayes route evaluated at
/// `xi = sigma*E_j*t + b`; computed in the log domain for stability.
pub fn realized_energy(
    model: &SpectralModel,
    sigma: f64,
    terminal_index: usize,
    b: f64,
    t: f64,
) -> f64 {
    let e_j = model.energies()[terminal_index];
    // Log-weights relative to the selected level: lw_j = ln(pi_j), and
    // lw_i = ln(pi_i) + ln(M_ij) for i != j.
    let lw: Vec<f64> = model
        .probabilities()
        .iter()
        .zip(model.energies())
        .map(|(&p, &e)| {
            let omega = e - e_j;
            p.ln() + sigma * omega * b - 0.5 * sigma * sigma * omega * omega * t
        })
        .collect();
    let max = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut num = 0.0;
    let mut den = 0.0;
    for (lw_i, &e) in lw.iter().zip(model.energies()) {
        let w = (lw_i - max).exp();
        num += w * e;
        den += w;
    }
    num / den
}

/// Probability that the off-branch martingale has decayed below `e^-n` by
/// time `t`: `N(sqrt(beta*t) - n/(2*sqrt(beta*t)))` with `N` the standard
/// normal CDF.
pub fn reduction_probability(beta_rate: f64, t: f64, n: f64) -> Result<f64> {
    if t.is_nan() || t <= 0.0 {
        return Err(Error::Domain(format!("t must be positive, got {t}")));
    }
    if beta_rate.is_nan() || beta_rate <= 0.0 {
        return Err(Error::Domain(format!(
            "beta_rate must be positive, got {beta_rate}"
        )));
    }
    let s = (beta_rate * t).sqrt();
    Ok(normal_cdf(s - 0.5 * n / s))
}

/// Standard normal CDF via the complementary error function (libm's erfc
/// is accurate to about 1 ulp, well inside the 1e-12 requirement).
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Generates one full trajectory: terminal sample, signal path, and the
/// algebraic readout of all conditional quantities. Deterministic given
/// `(model, params)` through the seed in `params`.
pub fn simulate_trajectory(
    model: &SpectralModel,
    params: &ReductionParams,
) -> Result<TrajectoryPath> {
    let mut rng = trajectory_rng(params.seed, 0);
    simulate_trajectory_with(model, params, &mut rng)
}

/// As [`simulate_trajectory`] but drawing from a caller-supplied stream.
pub fn simulate_trajectory_with<R: Rng + ?Sized>(
    model: &SpectralModel,
    params: &ReductionParams,
    rng: &mut R,
) -> Result<TrajectoryPath> {
    let grid = TimeGrid::from_params(params)?;
    let terminal_index = sample_terminal_energy(model, rng);
    let xi = simulate_signal(terminal_index, model, &grid, params.sigma, rng);

    let mut pi_t = Vec::with_capacity(grid.len());
    let mut h = Vec::with_capacity(grid.len());
    let mut v = Vec::with_capacity(grid.len());
    let mut skew = Vec::with_capacity(grid.len());
    let mut amplitudes = Vec::with_capacity(grid.len());
    for (k, t) in grid.times().enumerate() {
        let pi = conditional_probabilities(model, params.sigma, xi[k], t);
        let (hk, vk, bk) = conditional_moments(&pi, model.energies());
        amplitudes.push(state_vector(model, params.sigma, xi[k], t));
        pi_t.push(pi);
        h.push(hk);
        v.push(vk);
        skew.push(bk);
    }
    let w = innovation_path(&xi, &h, params.sigma, &grid)?;

    Ok(TrajectoryPath {
        grid,
        terminal_index,
        xi,
        w,
        pi_t,
        h,
        v,
        skew,
        amplitudes,
    })
}
