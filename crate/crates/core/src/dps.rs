//! Diffusion posterior sampling baseline.
//!
//! An unconditional denoiser `x̂₀(x, t) ≈ E[X₀ | X_τ = x]` gives the prior
//! score `(e^{-τ/2}x̂₀ - x)/(1 - e^{-τ})`; the likelihood is approximated by
//! a data-fidelity gradient evaluated through the denoiser:
//!
//! ```text
//! s(x, τ; y) ≈ s(x, τ) - ρ 𝒞 ∇_x ‖y - A x̂₀(x)‖²_Γ
//! ```
//!
//! The fidelity gradient is preconditioned by `𝒞` to match the score
//! convention `s = 𝒞∇log q`.

use std::sync::Mutex;

use rand::Rng;

use crate::autodiff::train::{fit, Example, TrainReport};
use crate::autodiff::ScoreNetwork;
use crate::diffusion::{
    integrate_reverse, perturbation_params, run_chains, DiffusionSchedule, ScoreFunction, TimePoint,
};
use crate::ensemble::{Method, SampleEnsemble};
use crate::error::{check_len, Error, Result};
use crate::field::Field;
use crate::gaussian::CovarianceOperator;
use crate::rng::standard_normal_vec;
use crate::ucos::{lambda_coeff, LossWeighting, TrainingConfig, UcosProblem};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DpsConfig {
    pub rho: f64,
    /// Use `ρ/‖y - Ax̂₀‖_Γ` instead of a constant step.
    pub normalize_by_residual: bool,
}

impl Default for DpsConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            normalize_by_residual: true,
        }
    }
}

/// `x ↦ x̂₀(x, time)` together with vector-Jacobian products.
pub trait PriorDenoiser: Sync {
    fn dim(&self) -> usize;

    fn denoise(&self, x: &[f64], at: TimePoint) -> Result<Vec<f64>>;

    /// Returns `(x̂₀(x), J_xᵀ v)`.
    fn denoise_vjp(&self, x: &[f64], at: TimePoint, v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)>;
}

impl PriorDenoiser for ScoreNetwork {
    fn dim(&self) -> usize {
        self.config().input_shape().len()
    }

    fn denoise(&self, x: &[f64], at: TimePoint) -> Result<Vec<f64>> {
        self.forward(x, at.t)
    }

    fn denoise_vjp(&self, x: &[f64], at: TimePoint, v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.vjp_input(x, at.t, v)
    }
}

/// The unconditional score implied by a denoiser.
pub struct PriorScore<'a, D: ?Sized> {
    pub denoiser: &'a D,
}

impl<D: PriorDenoiser + ?Sized> ScoreFunction for PriorScore<'_, D> {
    fn dim(&self) -> usize {
        self.denoiser.dim()
    }

    fn score_into(&self, x: &[f64], at: TimePoint, out: &mut [f64]) -> Result<()> {
        let x0 = self.denoiser.denoise(x, at)?;
        prior_score_from(&x0, x, at.tau, out);
        Ok(())
    }
}

fn prior_score_from(x0: &[f64], x: &[f64], tau: f64, out: &mut [f64]) {
    let (a, v) = perturbation_params(tau);
    for ((o, d), xi) in out.iter_mut().zip(x0).zip(x) {
        *o = (a * d - xi) / v;
    }
}

/// Score value plus the data residual `‖y - Ax̂₀‖_Γ` at which it was computed.
#[derive(Clone, Debug)]
pub struct DpsEval {
    pub score: Vec<f64>,
    pub residual: f64,
}

pub fn dps_score<D: PriorDenoiser + ?Sized>(
    denoiser: &D,
    problem: &UcosProblem,
    y: &[f64],
    x: &[f64],
    at: TimePoint,
    cfg: &DpsConfig,
) -> Result<DpsEval> {
    if !(at.tau > 0.0) {
        return Err(Error::Parameter(format!(
            "DPS score needs positive time, got {}",
            at.tau
        )));
    }
    check_len("DPS state", problem.dim(), x.len())?;
    check_len("DPS data", problem.data_dim(), y.len())?;
    let mut score = vec![0.0; x.len()];
    if cfg.rho == 0.0 {
        let x0 = denoiser.denoise(x, at)?;
        prior_score_from(&x0, x, at.tau, &mut score);
        let residual = weighted_residual(problem, y, &x0)?.1;
        return Ok(DpsEval { score, residual });
    }
    // Two passes: the residual needs x̂₀, the VJP needs the residual.
    let x0 = denoiser.denoise(x, at)?;
    let (w, residual) = weighted_residual(problem, y, &x0)?;
    let v = problem.a.apply_adjoint(&w)?.into_vec();
    let (_, jtv) = denoiser.denoise_vjp(x, at, &v)?;
    if jtv.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite fidelity gradient at t = {}",
            at.t
        )));
    }
    prior_score_from(&x0, x, at.tau, &mut score);
    let rho = if cfg.normalize_by_residual {
        if residual > 0.0 {
            cfg.rho / residual
        } else {
            0.0
        }
    } else {
        cfg.rho
    };
    // -ρ𝒞∇‖y - Ax̂₀‖²_Γ = 2ρ𝒞 J_xᵀA*Γ⁻¹(y - Ax̂₀)
    let pushed = problem.c.apply(&jtv);
    for (s, g) in score.iter_mut().zip(&pushed) {
        *s += 2.0 * rho * g;
    }
    Ok(DpsEval { score, residual })
}

/// `(Γ⁻¹(y - Ax̂₀), ‖y - Ax̂₀‖_Γ)`
fn weighted_residual(problem: &UcosProblem, y: &[f64], x0: &[f64]) -> Result<(Vec<f64>, f64)> {
    let ax = problem.a.apply_slice(x0)?;
    let r: Vec<f64> = y.iter().zip(&ax).map(|(a, b)| a - b).collect();
    let w = problem.gamma_obs.solve(&r)?;
    let norm = crate::field::dot(&r, &w).max(0.0).sqrt();
    Ok((w, norm))
}

struct DpsChainScore<'a, D: ?Sized> {
    denoiser: &'a D,
    problem: &'a UcosProblem,
    y: &'a [f64],
    cfg: DpsConfig,
    residuals: Mutex<Vec<f64>>,
}

impl<D: PriorDenoiser + ?Sized> ScoreFunction for DpsChainScore<'_, D> {
    fn dim(&self) -> usize {
        self.problem.dim()
    }

    fn score_into(&self, x: &[f64], at: TimePoint, out: &mut [f64]) -> Result<()> {
        let e = dps_score(self.denoiser, self.problem, self.y, x, at, &self.cfg)?;
        out.copy_from_slice(&e.score);
        self.residuals.lock().unwrap().push(e.residual);
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DpsRun {
    pub ensemble: SampleEnsemble,
    /// Per chain, the residual `‖y - Ax̂₀‖_Γ` at every step.
    pub residuals: Vec<Vec<f64>>,
}

pub fn sample_dps<D: PriorDenoiser + ?Sized>(
    problem: &UcosProblem,
    denoiser: &D,
    y: &[f64],
    cfg: &DpsConfig,
    n_samples: usize,
    seed: u64,
) -> Result<DpsRun> {
    if !(cfg.rho >= 0.0) {
        return Err(Error::Parameter(format!(
            "ρ must be nonnegative, got {}",
            cfg.rho
        )));
    }
    if n_samples == 0 {
        return Err(Error::Parameter("need at least one sample".into()));
    }
    check_len("DPS data", problem.data_dim(), y.len())?;
    let chains = run_chains(n_samples, seed, |_, rng| {
        let score = DpsChainScore {
            denoiser,
            problem,
            y,
            cfg: *cfg,
            residuals: Mutex::new(Vec::with_capacity(problem.sched.n_steps)),
        };
        let x0 = problem
            .c
            .sqrt_apply(&standard_normal_vec(rng, problem.dim()));
        let out = integrate_reverse(
            &score,
            &problem.c,
            &problem.sched,
            x0,
            |z| {
                for v in z.iter_mut() {
                    *v = rng.sample(rand_distr::StandardNormal);
                }
            },
            |_, _, _| {},
        )?;
        Ok((out, score.residuals.into_inner().unwrap()))
    });
    let mut residuals = Vec::with_capacity(n_samples);
    let samples = chains
        .into_iter()
        .map(|c| {
            c.map(|(x, r)| {
                residuals.push(r);
                x
            })
        })
        .collect();
    let ensemble = SampleEnsemble::from_chains(problem.shape(), samples, Method::Dps, seed)?;
    Ok(DpsRun {
        ensemble,
        residuals,
    })
}

/// Denoising score matching on the pure diffusion: regress `x₀` from
/// `e^{-τ/2}x₀ + √(1 - e^{-τ})𝒞^{1/2}z` at `t ~ U[ε, t_max]`.
pub fn train_unconditional(
    dataset: &[Field],
    c: &CovarianceOperator,
    sched: &DiffusionSchedule,
    net: &mut ScoreNetwork,
    cfg: &TrainingConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Training("empty dataset".into()));
    }
    let shape = net.config().input_shape();
    if let Some(f) = dataset.iter().find(|f| f.shape() != shape) {
        return Err(Error::dim("dataset field", shape.len(), f.len()));
    }
    check_len("diffusion covariance", shape.len(), c.dim())?;
    let eps = cfg.t_truncation;
    let tmax = sched.t_max;
    fit(net, dataset.len(), &cfg.fit_config(), |i, rng| {
        let t = rng.random_range(eps..tmax);
        let tau = sched.tau(t);
        let (a, v) = perturbation_params(tau);
        let x0 = dataset[i].as_slice();
        let noise = c.sqrt_apply(&standard_normal_vec(rng, x0.len()));
        let sd = v.sqrt();
        let input = x0.iter().zip(&noise).map(|(x, z)| a * x + sd * z).collect();
        let weight = match cfg.weighting {
            LossWeighting::Lambda2 => lambda_coeff(tau)?.powi(2),
            LossWeighting::Uniform => 1.0,
        };
        Ok(Example {
            input,
            t,
            target: x0.to_vec(),
            weight,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldShape;
    use crate::operator::IdentityOperator;
    use std::sync::Arc;

    /// Exact denoiser of a standard normal prior: `x̂₀ = e^{-τ/2}x`.
    struct StandardNormalPrior(usize);

    impl PriorDenoiser for StandardNormalPrior {
        fn dim(&self) -> usize {
            self.0
        }
        fn denoise(&self, x: &[f64], at: TimePoint) -> Result<Vec<f64>> {
            let a = (-at.tau / 2.0).exp();
            Ok(x.iter().map(|v| a * v).collect())
        }
        fn denoise_vjp(&self, x: &[f64], at: TimePoint, v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
            let a = (-at.tau / 2.0).exp();
            Ok((self.denoise(x, at)?, v.iter().map(|g| a * g).collect()))
        }
    }

    fn identity_problem(n: usize, noise: f64) -> UcosProblem {
        UcosProblem::new(
            Arc::new(IdentityOperator::new(FieldShape::flat(n))),
            CovarianceOperator::identity(n),
            CovarianceOperator::diagonal(vec![noise; n]).unwrap(),
            DiffusionSchedule::default(),
        )
        .unwrap()
    }

    #[test]
    fn zero_rho_and_zero_residual_give_prior_score() {
        let p = identity_problem(3, 1.0);
        let d = StandardNormalPrior(3);
        let at = TimePoint::identity(0.6);
        let x = [0.5, -1.0, 2.0];
        let prior = PriorScore { denoiser: &d }.score(&x, at).unwrap();
        for (s, xi) in prior.iter().zip(&x) {
            assert!((s + xi).abs() < 1e-14);
        }
        let y = [9.0, 9.0, 9.0];
        let cfg0 = DpsConfig {
            rho: 0.0,
            ..Default::default()
        };
        assert_eq!(dps_score(&d, &p, &y, &x, at, &cfg0).unwrap().score, prior);
        let y_exact = d.denoise(&x, at).unwrap();
        let e = dps_score(&d, &p, &y_exact, &x, at, &DpsConfig::default()).unwrap();
        assert_eq!(e.residual, 0.0);
        assert_eq!(e.score, prior);
    }

    #[test]
    fn linear_oracle_gradient() {
        let p = identity_problem(2, 1.0);
        let d = StandardNormalPrior(2);
        let at = TimePoint::identity(0.8);
        let x = [0.3, -0.7];
        let y = [1.0, 0.5];
        let cfg = DpsConfig {
            rho: 1.0,
            normalize_by_residual: false,
        };
        let e = dps_score(&d, &p, &y, &x, at, &cfg).unwrap();
        let a = (-0.4f64).exp();
        for i in 0..2 {
            // ∇‖y - a x‖² = -2a(y - a x); score = -x + 2a(y - a x)
            let expect = -x[i] + 2.0 * a * (y[i] - a * x[i]);
            assert!((e.score[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn rho_zero_samples_prior() {
        let p = identity_problem(1, 0.01);
        let d = StandardNormalPrior(1);
        let cfg = DpsConfig {
            rho: 0.0,
            ..Default::default()
        };
        let run = sample_dps(&p, &d, &[3.0], &cfg, 400, 1).unwrap();
        let xs: Vec<f64> = run
            .ensemble
            .samples
            .iter()
            .map(|f| f.as_slice()[0])
            .collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 3.0 / (xs.len() as f64).sqrt());
        assert_eq!(run.residuals[0].len(), p.sched.n_steps);
    }

    #[test]
    fn shrinkage_on_gaussian_toy() {
        let sigma2 = 0.05;
        let p = identity_problem(1, sigma2);
        let d = StandardNormalPrior(1);
        let y = [1.5];
        let run = sample_dps(&p, &d, &y, &DpsConfig::default(), 400, 2).unwrap();
        let xs: Vec<f64> = run
            .ensemble
            .samples
            .iter()
            .map(|f| f.as_slice()[0])
            .collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let target = y[0] / (1.0 + sigma2);
        assert!(
            (mean - target).abs() < 0.1 * target,
            "mean {mean} vs {target}"
        );
        // residual settles over the last fifth of the trajectory
        let k = p.sched.n_steps;
        let tail = k - k / 5;
        let avg = |r: std::ops::Range<usize>| {
            let len = r.len() as f64;
            run.residuals
                .iter()
                .map(|c| c[r.clone()].iter().sum::<f64>())
                .sum::<f64>()
                / (len * run.residuals.len() as f64)
        };
        let half = tail + (k - tail) / 2;
        assert!(avg(half..k) <= avg(tail..half) * 1.05);
    }

    #[test]
    fn rejects_negative_rho() {
        let p = identity_problem(1, 1.0);
        let cfg = DpsConfig {
            rho: -1.0,
            ..Default::default()
        };
        assert!(sample_dps(&p, &StandardNormalPrior(1), &[0.0], &cfg, 1, 0).is_err());
    }
}
