//! Spectral description of the system under simulation: distinct energy
//! levels, transition probabilities of the initial state, and derived
//! moments and timescales.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default cap on the number of grid steps per trajectory.
pub const DEFAULT_STEP_CAP: usize = 10_000_000;

/// One energy eigenvalue together with the initial-state amplitude on it.
/// Entries with equal (or nearly equal) energies are merged into a single
/// level at model construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelInput {
    pub energy: f64,
    pub amplitude: Complex64,
}

impl LevelInput {
    pub fn new(energy: f64, amplitude: Complex64) -> Self {
        Self { energy, amplitude }
    }

    pub fn real(energy: f64, amplitude: f64) -> Self {
        Self::new(energy, Complex64::new(amplitude, 0.0))
    }
}

/// Deduplicated energy spectrum with the transition probabilities of the
/// initial state and one retained phase per level.
///
/// Energies are strictly increasing; probabilities are nonnegative and sum
/// to one. The phase is the phase carried by the projected component of the
/// initial state on that level, so state-vector reconstruction can restore
/// the initial condition exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralModel {
    energies: Vec<f64>,
    probabilities: Vec<f64>,
    phases: Vec<Complex64>,
}

impl SpectralModel {
    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn phases(&self) -> &[Complex64] {
        &self.phases
    }

    /// Number of distinct energy levels.
    pub fn len(&self) -> usize {
        self.energies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energies.is_empty()
    }

    /// Largest energy spread, zero for a single level.
    pub fn energy_span(&self) -> f64 {
        self.energies[self.energies.len() - 1] - self.energies[0]
    }
}

/// Builds a [`SpectralModel`] from raw levels. Amplitudes need not be
/// normalized. Levels whose energies lie within `merge_tol` of each other
/// are merged; the merged probability is the sum of squared amplitude
/// moduli over the group.
///
/// Pass `None` for the default tolerance `1e-12 * max|E|`.
pub fn build_spectral_model(
    levels: &[LevelInput],
    merge_tol: Option<f64>,
) -> Result<SpectralModel> {
    if levels.is_empty() {
        return Err(Error::InvalidModel("no levels supplied".into()));
    }
    let total: f64 = levels.iter().map(|l| l.amplitude.norm_sqr()).sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::InvalidModel(
            "all amplitudes are zero (or non-finite)".into(),
        ));
    }
    if levels.iter().any(|l| !l.energy.is_finite()) {
        return Err(Error::InvalidModel("non-finite energy".into()));
    }
    let max_abs_e = levels.iter().map(|l| l.energy.abs()).fold(0.0, f64::max);
    let tol = match merge_tol {
        Some(t) if t >= 0.0 => t,
        Some(_) => return Err(Error::InvalidModel("merge_tol must be >= 0".into())),
        None => 1e-12 * max_abs_e,
    };

    let mut sorted: Vec<&LevelInput> = levels.iter().collect();
    sorted.sort_by(|a, b| a.energy.total_cmp(&b.energy));

    let mut energies = Vec::new();
    let mut probabilities = Vec::new();
    let mut phases = Vec::new();

    let mut group: Vec<&LevelInput> = Vec::new();
    let flush = |group: &mut Vec<&LevelInput>,
                 energies: &mut Vec<f64>,
                 probabilities: &mut Vec<f64>,
                 phases: &mut Vec<Complex64>| {
        let weight: f64 = group.iter().map(|l| l.amplitude.norm_sqr()).sum();
        // Probability-weighted mean keeps the merged energy stable under
        // permutations of the input.
        let energy = if weight > 0.0 {
            group
                .iter()
                .map(|l| l.energy * l.amplitude.norm_sqr())
                .sum::<f64>()
                / weight
        } else {
            group.iter().map(|l| l.energy).sum::<f64>() / group.len() as f64
        };
        // The retained phase is that of the dominant amplitude in the group,
        // with a deterministic tie-break so construction is permutation
        // invariant.
        let dominant = group
            .iter()
            .max_by(|a, b| {
                a.amplitude
                    .norm_sqr()
                    .total_cmp(&b.amplitude.norm_sqr())
                    .then(a.amplitude.re.total_cmp(&b.amplitude.re))
                    .then(a.amplitude.im.total_cmp(&b.amplitude.im))
            })
            .unwrap();
        let phase = if dominant.amplitude.norm() > 0.0 {
            dominant.amplitude / dominant.amplitude.norm()
        } else {
            Complex64::new(1.0, 0.0)
        };
        energies.push(energy);
        probabilities.push(weight);
        phases.push(phase);
        group.clear();
    };

    for level in sorted {
        match group.last() {
            Some(prev) if (level.energy - prev.energy).abs() > tol => {
                flush(&mut group, &mut energies, &mut probabilities, &mut phases);
            }
            _ => {}
        }
        group.push(level);
    }
    flush(&mut group, &mut energies, &mut probabilities, &mut phases);

    for p in probabilities.iter_mut() {
        *p /= total;
    }

    // Levels the initial state has no overlap with can never be selected;
    // drop them so n = 1 exactly characterizes an eigenstate.
    let keep: Vec<usize> = (0..probabilities.len())
        .filter(|&i| probabilities[i] > 0.0)
        .collect();
    if keep.len() != probabilities.len() {
        energies = keep.iter().map(|&i| energies[i]).collect();
        phases = keep.iter().map(|&i| phases[i]).collect();
        probabilities = keep.iter().map(|&i| probabilities[i]).collect();
    }

    debug_assert!(energies.windows(2).all(|w| w[0] < w[1]));
    Ok(SpectralModel {
        energies,
        probabilities,
        phases,
    })
}

/// Mean, variance, and third central moment of the initial energy
/// distribution.
pub fn initial_moments(model: &SpectralModel) -> (f64, f64, f64) {
    crate::closedform::conditional_moments(model.probabilities(), model.energies())
}

/// Characteristic collapse timescale 1/(sigma^2 V0). An eigenstate has no
/// dispersion to collapse, so the timescale is infinite.
pub fn reduction_timescale(model: &SpectralModel, sigma: f64) -> f64 {
    let (_, v0, _) = initial_moments(model);
    if v0 <= 0.0 {
        f64::INFINITY
    } else {
        1.0 / (sigma * sigma * v0)
    }
}

/// Coupling, time grid, and numerical thresholds for one simulation run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReductionParams {
    /// Coupling sigma, units energy^-1 time^-1/2.
    pub sigma: f64,
    pub t_max: f64,
    pub dt: f64,
    /// A trajectory counts as reduced to level i once Pi_i > 1 - epsilon.
    pub reduction_epsilon: f64,
    pub seed: u64,
    /// Refuse grids longer than this many steps.
    #[serde(default = "default_step_cap")]
    pub step_cap: usize,
}

fn default_step_cap() -> usize {
    DEFAULT_STEP_CAP
}

impl ReductionParams {
    pub fn new(sigma: f64, t_max: f64, dt: f64, seed: u64) -> Self {
        Self {
            sigma,
            t_max,
            dt,
            reduction_epsilon: 1e-4,
            seed,
            step_cap: DEFAULT_STEP_CAP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::InvalidParams("sigma must be positive".into()));
        }
        if !(self.t_max.is_finite() && self.t_max > 0.0) {
            return Err(Error::InvalidParams("t_max must be positive".into()));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::InvalidParams("dt must be positive".into()));
        }
        if self.dt >= self.t_max {
            return Err(Error::InvalidParams("dt must be smaller than t_max".into()));
        }
        if self.t_max / self.dt > self.step_cap as f64 {
            return Err(Error::ResourceCap(format!(
                "t_max/dt = {:.3e} exceeds the step cap {}",
                self.t_max / self.dt,
                self.step_cap
            )));
        }
        if !(self.reduction_epsilon > 0.0 && self.reduction_epsilon < 1.0) {
            return Err(Error::InvalidParams(
                "reduction_epsilon must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}
