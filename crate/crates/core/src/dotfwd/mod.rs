//! Frequency-domain diffuse optical tomography on a square grid.
//!
//! The fluence solves
//! `(-∇·κ∇ + μa + jω/c) Φ = 0`, `κ = 1 / (2(μa + μs'))`,
//! with the Robin condition `Φ + (α / 2ζ) κ ∂Φ/∂n = q/ζ` on source patches
//! and `0` elsewhere. Data are `log Γ` for the exitance `Γ = (2ζ/α) Φ`
//! averaged over each detector, stacked as a log-amplitude block followed by
//! a phase block, each ordered source-major.

mod geometry;
mod jacobian;
mod solver;

use num_complex::Complex64;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

pub use geometry::{
    perimeter_point, Edge, Geometry, Instrument, OpticalField, Patch, REFRACTIVE_INDEX,
    SPEED_OF_LIGHT_MM_S, ZETA_2D,
};
pub use jacobian::{area_resampling, jacobian, DotJacobian};
pub use solver::{DiffusionSystem, RESIDUAL_TOLERANCE};

use crate::error::{check_len, Error, Result};
use crate::field::Field;
use crate::gaussian::CovarianceOperator;
use crate::operator::LinearOperator;
use crate::rng::master_rng;

/// Fluence for source `source` (cell values, row-major).
pub fn solve_forward(
    optics: &OpticalField,
    inst: &Instrument,
    source: usize,
) -> Result<Vec<Complex64>> {
    if source >= inst.n_sources() {
        return Err(Error::Parameter(format!(
            "source index {source} out of range ({} sources)",
            inst.n_sources()
        )));
    }
    let sys = DiffusionSystem::new(optics, inst)?;
    sys.solve(&sys.source_rhs(source))
}

/// Stacked `[log|Γ|; arg Γ]` data for every source/detector pair.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementSet {
    pub values: Vec<f64>,
    pub n_sources: usize,
    pub n_detectors: usize,
    /// Standard deviations of the amplitude and phase blocks, when known.
    pub noise_std: Option<[f64; 2]>,
}

impl MeasurementSet {
    pub fn log_amplitude(&self) -> &[f64] {
        &self.values[..self.values.len() / 2]
    }

    pub fn phase(&self) -> &[f64] {
        &self.values[self.values.len() / 2..]
    }

    /// `self - reference`, with phase differences wrapped into `(-π, π]`.
    pub fn difference(&self, reference: &MeasurementSet) -> Result<Vec<f64>> {
        check_len(
            "measurement difference",
            self.values.len(),
            reference.values.len(),
        )?;
        let half = self.values.len() / 2;
        Ok(self
            .values
            .iter()
            .zip(&reference.values)
            .enumerate()
            .map(|(k, (a, b))| if k < half { a - b } else { wrap_phase(a - b) })
            .collect())
    }
}

pub fn wrap_phase(p: f64) -> f64 {
    use std::f64::consts::PI;
    let w = p.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Measurement from precomputed fluences, one per source.
pub fn measure(
    phis: &[Vec<Complex64>],
    optics: &OpticalField,
    inst: &Instrument,
) -> Result<MeasurementSet> {
    let sys = DiffusionSystem::new(optics, inst)?;
    measure_with(&sys, phis, inst)
}

pub(crate) fn measure_with(
    sys: &DiffusionSystem,
    phis: &[Vec<Complex64>],
    inst: &Instrument,
) -> Result<MeasurementSet> {
    check_len("fluence fields", inst.n_sources(), phis.len())?;
    let (ns, nd) = (inst.n_sources(), inst.n_detectors());
    let mut amp = Vec::with_capacity(ns * nd);
    let mut phase = Vec::with_capacity(ns * nd);
    for (s, phi) in phis.iter().enumerate() {
        check_len("fluence field", sys.n_unknowns(), phi.len())?;
        for d in 0..nd {
            let g = sys.detector_exitance(phi, s, d);
            if !(g.norm() > 0.0) || !g.is_finite() {
                return Err(Error::Measurement(format!(
                    "exitance {g} at source {s}, detector {d}"
                )));
            }
            let l = g.ln();
            amp.push(l.re);
            phase.push(l.im);
        }
    }
    amp.extend(phase);
    Ok(MeasurementSet {
        values: amp,
        n_sources: ns,
        n_detectors: nd,
        noise_std: None,
    })
}

/// Solves every source and measures.
pub fn forward_data(optics: &OpticalField, inst: &Instrument) -> Result<MeasurementSet> {
    let sys = DiffusionSystem::new(optics, inst)?;
    let phis = solve_all(&sys)?;
    measure_with(&sys, &phis, inst)
}

pub(crate) fn solve_all(sys: &DiffusionSystem) -> Result<Vec<Vec<Complex64>>> {
    (0..sys.source_data.len())
        .into_par_iter()
        .map(|s| sys.solve(&sys.source_rhs(s)))
        .collect()
}

/// Additive Gaussian noise on the amplitude and phase blocks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModel {
    pub sigma_amp: f64,
    pub sigma_phase: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sigma_amp: 0.05,
            sigma_phase: 0.001,
        }
    }
}

impl NoiseModel {
    pub fn none() -> Self {
        Self {
            sigma_amp: 0.0,
            sigma_phase: 0.0,
        }
    }

    pub fn std_devs(&self, m: usize) -> Vec<f64> {
        (0..m)
            .map(|k| {
                if k < m / 2 {
                    self.sigma_amp
                } else {
                    self.sigma_phase
                }
            })
            .collect()
    }

    /// Diagonal noise covariance for a data vector of length `m`.
    pub fn covariance(&self, m: usize) -> Result<CovarianceOperator> {
        CovarianceOperator::diagonal(self.std_devs(m).iter().map(|s| s * s).collect())
    }
}

/// `A x + ε` for the rescaled two-channel field `truth`, with `ε` drawn from
/// `noise` using `seed`.
///
/// The result is in the rescaled data convention, i.e. physical difference
/// data already shifted by the rescaling offset.
pub fn simulate_difference_data(
    truth: &Field,
    a: &dyn LinearOperator,
    noise: &NoiseModel,
    seed: u64,
) -> Result<Vec<f64>> {
    if !(noise.sigma_amp >= 0.0 && noise.sigma_phase >= 0.0) {
        return Err(Error::Parameter(format!("invalid noise model {noise:?}")));
    }
    let mut y = a.apply(truth)?;
    let mut rng = master_rng(seed);
    let sd = noise.std_devs(y.len());
    for (v, s) in y.iter_mut().zip(sd) {
        if s > 0.0 {
            *v += Normal::new(0.0, s)
                .map_err(|e| Error::Parameter(e.to_string()))?
                .sample(&mut rng);
        }
    }
    Ok(y)
}
