//! Direct Euler-Maruyama integration of the nonlinear reduction SDE,
//! used only to validate the closed-form engine pathwise. Not a production
//! integrator: explicit scheme, fixed step, renormalization after every
//! step.

use num_complex::Complex64;

use crate::closedform::TimeGrid;
use crate::model::SpectralModel;
use crate::{Error, Result};

/// Output of one reference integration.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    pub grid: TimeGrid,
    pub amplitudes: Vec<Vec<Complex64>>,
    pub h: Vec<f64>,
    pub v: Vec<f64>,
}

fn moments(amps: &[Complex64], energies: &[f64]) -> (f64, f64) {
    let norm_sqr: f64 = amps.iter().map(|a| a.norm_sqr()).sum();
    let h: f64 = amps
        .iter()
        .zip(energies)
        .map(|(a, &e)| a.norm_sqr() * e)
        .sum::<f64>()
        / norm_sqr;
    let v: f64 = amps
        .iter()
        .zip(energies)
        .map(|(a, &e)| a.norm_sqr() * (e - h) * (e - h))
        .sum::<f64>()
        / norm_sqr;
    (h, v.max(0.0))
}

/// One explicit Euler-Maruyama step of the reduction SDE, in the energy
/// eigenbasis:
///
/// `amp_i' = amp_i + [-i*E_i - sigma^2 (E_i - H)^2 / 8] amp_i dt
///           + sigma (E_i - H) amp_i dW / 2`
///
/// with `H` evaluated at the start of the step. The result is renormalized
/// to unit norm; the continuous-time equation preserves the norm but the
/// discrete scheme drifts by O(dt) per step.
pub fn euler_step(
    amps: &[Complex64],
    model: &SpectralModel,
    sigma: f64,
    dt: f64,
    dw: f64,
) -> Vec<Complex64> {
    euler_step_raw(amps, model, sigma, dt, dw, true)
}

/// As [`euler_step`], optionally skipping the renormalization (diagnostic
/// use: exhibits the discrete norm drift).
pub fn euler_step_raw(
    amps: &[Complex64],
    model: &SpectralModel,
    sigma: f64,
    dt: f64,
    dw: f64,
    renormalize: bool,
) -> Vec<Complex64> {
    let (h, _) = moments(amps, model.energies());
    let mut next: Vec<Complex64> = amps
        .iter()
        .zip(model.energies())
        .map(|(&a, &e)| {
            let d = e - h;
            let drift = Complex64::new(-0.125 * sigma * sigma * d * d, -e);
            a + a * drift * dt + a * (0.5 * sigma * d * dw)
        })
        .collect();
    if renormalize {
        let norm = next.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        if norm > 0.0 {
            for a in next.iter_mut() {
                *a /= norm;
            }
        }
    }
    next
}

/// Integrates the reduction SDE from the model's initial Lüders amplitudes,
/// driven by the supplied Brownian increments (one per grid step).
pub fn integrate_reference(
    model: &SpectralModel,
    grid: &TimeGrid,
    sigma: f64,
    w_increments: &[f64],
) -> Result<ReferenceTrajectory> {
    integrate_reference_opts(model, grid, sigma, w_increments, true)
}

/// As [`integrate_reference`] with the renormalization switch exposed.
pub fn integrate_reference_opts(
    model: &SpectralModel,
    grid: &TimeGrid,
    sigma: f64,
    w_increments: &[f64],
    renormalize: bool,
) -> Result<ReferenceTrajectory> {
    if w_increments.len() != grid.n_steps() {
        return Err(Error::LengthMismatch {
            expected: grid.n_steps(),
            got: w_increments.len(),
            context: "Brownian increments vs grid steps",
        });
    }
    let mut amps: Vec<Complex64> = model
        .phases()
        .iter()
        .zip(model.probabilities())
        .map(|(&phase, &p)| phase * p.sqrt())
        .collect();

    let mut amplitudes = Vec::with_capacity(grid.len());
    let mut h_path = Vec::with_capacity(grid.len());
    let mut v_path = Vec::with_capacity(grid.len());
    let record = |amps: &Vec<Complex64>,
                  amplitudes: &mut Vec<Vec<Complex64>>,
                  h_path: &mut Vec<f64>,
                  v_path: &mut Vec<f64>| {
        let (h, v) = moments(amps, model.energies());
        amplitudes.push(amps.clone());
        h_path.push(h);
        v_path.push(v);
    };
    record(&amps, &mut amplitudes, &mut h_path, &mut v_path);
    for &dw in w_increments {
        amps = euler_step_raw(&amps, model, sigma, grid.dt(), dw, renormalize);
        record(&amps, &mut amplitudes, &mut h_path, &mut v_path);
    }
    Ok(ReferenceTrajectory {
        grid: *grid,
        amplitudes,
        h: h_path,
        v: v_path,
    })
}
