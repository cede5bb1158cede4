//! Unconditional representation of the conditional score.
//!
//! With `λ(τ) = 1/(e^{τ/2} - e^{-τ/2})`, `C_τ = (e^τ-1)A𝒞A* + Γ`,
//! `R_τ = (e^τ-1)I - (e^τ-1)²𝒞A*C_τ⁻¹A`, `Σ_τ = R_τ𝒞` and
//! `ξ_τ = 𝒞A*Γ⁻¹y + λ(τ)x`, the conditional score is
//!
//! ```text
//! s(x, τ; y) = λ(τ)(r(ξ_τ, τ) - e^{τ/2}x)
//! ```
//!
//! where `r(η, τ) = E[X₀ | R_τ⁻¹X̃_τ = η]` does not depend on `y` and is
//! learned by regression on `R_τ⁻¹X̃_τ = (1/(e^τ-1) + 𝒞A*Γ⁻¹A)X₀ +
//! (e^τ-1)^{-1/2}𝒞^{1/2}Z₁ + 𝒞A*Γ^{-1/2}Z₂`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::autodiff::optim::AdamWConfig;
use crate::autodiff::train::{fit, Example, FitConfig, TrainReport};
use crate::autodiff::ScoreNetwork;
use crate::diffusion::{
    reverse_em_sample, run_chains, DiffusionSchedule, ScoreFunction, TimePoint,
};
use crate::ensemble::{Method, SampleEnsemble};
use crate::error::{check_len, Error, Result};
use crate::field::{Field, FieldShape};
use crate::gaussian::{analytic_posterior, CovarianceOperator, GaussianScore};
use crate::operator::LinearOperator;
use crate::rng::standard_normal_vec;

#[derive(Clone)]
pub struct UcosProblem {
    pub a: Arc<dyn LinearOperator>,
    /// Diffusion covariance 𝒞.
    pub c: CovarianceOperator,
    pub gamma_obs: CovarianceOperator,
    pub sched: DiffusionSchedule,
}

impl UcosProblem {
    pub fn new(
        a: Arc<dyn LinearOperator>,
        c: CovarianceOperator,
        gamma_obs: CovarianceOperator,
        sched: DiffusionSchedule,
    ) -> Result<Self> {
        check_len("diffusion covariance", a.domain().len(), c.dim())?;
        check_len("noise covariance", a.codomain_dim(), gamma_obs.dim())?;
        sched.validate()?;
        Ok(Self {
            a,
            c,
            gamma_obs,
            sched,
        })
    }

    pub fn shape(&self) -> FieldShape {
        self.a.domain()
    }

    pub fn dim(&self) -> usize {
        self.a.domain().len()
    }

    pub fn data_dim(&self) -> usize {
        self.a.codomain_dim()
    }

    /// `γ = 𝒞A*Γ⁻¹y`
    pub fn data_term(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_len("data", self.data_dim(), y.len())?;
        let w = self.gamma_obs.solve(y)?;
        Ok(self.c.apply(self.a.apply_adjoint(&w)?.as_slice()))
    }

    /// `𝒞A*Γ⁻¹A x`
    fn normal_term(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.data_term(&self.a.apply_slice(x)?)
    }

    /// `κ = tr(𝒞A*Γ⁻¹A)/n`, computed exactly from one adjoint application per
    /// data component.
    pub fn kappa(&self) -> Result<f64> {
        let m = self.data_dim();
        let mut tr = 0.0;
        let mut e = vec![0.0; m];
        for j in 0..m {
            e[j] = 1.0;
            let g = self.gamma_obs.inv_sqrt_apply(&e)?;
            e[j] = 0.0;
            let v = self.a.apply_adjoint(&g)?;
            tr += crate::field::dot(v.as_slice(), &self.c.apply(v.as_slice()));
        }
        Ok(tr / self.dim() as f64)
    }
}

/// `λ(τ) = 1/(e^{τ/2} - e^{-τ/2})`
pub fn lambda_coeff(tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!(
            "λ needs positive time, got {tau}"
        )));
    }
    Ok(1.0 / (2.0 * (tau / 2.0).sinh()))
}

/// `ξ_τ = γ + λ(τ)x` with `γ = 𝒞A*Γ⁻¹y` precomputed.
pub fn xi(gamma: &[f64], x: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_len("ξ state", gamma.len(), x.len())?;
    let l = lambda_coeff(tau)?;
    Ok(gamma.iter().zip(x).map(|(g, xi)| g + l * xi).collect())
}

/// Input scaling `c_in(τ) = 1/(1/(e^τ-1) + κ)` applied before the network so
/// that its input stays O(1) across times.
pub fn input_scale(tau: f64, kappa: f64) -> f64 {
    1.0 / (1.0 / tau.exp_m1() + kappa)
}

/// Draws `R_τ⁻¹X̃_τ` given `X₀ = x0`.
pub fn sample_training_input<R: Rng + ?Sized>(
    problem: &UcosProblem,
    x0: &[f64],
    tau: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!(
            "training time must be positive, got {tau}"
        )));
    }
    check_len("training sample", problem.dim(), x0.len())?;
    let em1 = tau.exp_m1();
    let z1 = standard_normal_vec(rng, problem.dim());
    let z2 = standard_normal_vec(rng, problem.data_dim());
    let mut out = problem.normal_term(x0)?;
    let c_z1 = problem.c.sqrt_apply(&z1);
    let g_z2 = problem.gamma_obs.inv_sqrt_apply(&z2)?;
    let d_z2 = problem.c.apply(problem.a.apply_adjoint(&g_z2)?.as_slice());
    let sd = 1.0 / em1.sqrt();
    for i in 0..out.len() {
        out[i] += x0[i] / em1 + sd * c_z1[i] + d_z2[i];
    }
    Ok(out)
}

/// Dense `R_τ`, `Σ_τ` and `C_τ` for small problems.
#[derive(Clone, Debug)]
pub struct UcosMatrices {
    pub r: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub c_t: DMatrix<f64>,
}

impl UcosMatrices {
    pub fn new(problem: &UcosProblem, tau: f64) -> Result<Self> {
        let n = problem.dim();
        let a = problem.a.to_dense();
        let c = problem.c.to_dense();
        let em1 = tau.exp_m1();
        let c_t = &a * &c * a.transpose() * em1 + problem.gamma_obs.to_dense();
        let c_t_inv_a = c_t
            .clone()
            .lu()
            .solve(&a)
            .ok_or_else(|| Error::Numerical(format!("C_τ singular at τ={tau}")))?;
        let r = DMatrix::identity(n, n) * em1 - &c * a.transpose() * c_t_inv_a * (em1 * em1);
        let sigma = &r * &c;
        Ok(Self { r, sigma, c_t })
    }

    /// Covariance of `R_τ⁻¹X̃_τ` given `X₀`: `R⁻¹ΣR⁻ᵀ`.
    pub fn input_covariance(&self) -> Result<DMatrix<f64>> {
        let r_inv = self
            .r
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("R_τ singular".into()))?;
        Ok(&r_inv * &self.sigma * r_inv.transpose())
    }

    /// Smallest eigenvalue of the symmetric part of `Σ_τ`, for
    /// semi-definiteness checks.
    pub fn sigma_min_eigenvalue(&self) -> f64 {
        let s = (&self.sigma + self.sigma.transpose()) * 0.5;
        s.symmetric_eigen().eigenvalues.min()
    }
}

/// A map `r(η, time)` plugged into the conditional score.
pub trait Denoiser: Sync {
    fn dim(&self) -> usize;
    fn denoise(&self, eta: &[f64], at: TimePoint) -> Result<Vec<f64>>;
}

/// Trained network with input scaling `c_in(τ)`.
pub struct NetworkDenoiser<'a> {
    pub net: &'a ScoreNetwork,
    pub kappa: f64,
}

impl Denoiser for NetworkDenoiser<'_> {
    fn dim(&self) -> usize {
        self.net.config().input_shape().len()
    }

    fn denoise(&self, eta: &[f64], at: TimePoint) -> Result<Vec<f64>> {
        let c = input_scale(at.tau, self.kappa);
        let scaled: Vec<f64> = eta.iter().map(|v| c * v).collect();
        self.net.forward(&scaled, at.t)
    }
}

/// Closed-form `r(η, τ) = m + S(S + Σ_τ)⁻¹(R_τη - m)` under the prior `N(m, S)`.
pub struct GaussianDenoiser {
    problem: UcosProblem,
    mean: DVector<f64>,
    s: DMatrix<f64>,
}

impl GaussianDenoiser {
    pub fn new(
        problem: &UcosProblem,
        prior_mean: &[f64],
        prior_cov: &CovarianceOperator,
    ) -> Result<Self> {
        check_len("prior mean", problem.dim(), prior_mean.len())?;
        check_len("prior covariance", problem.dim(), prior_cov.dim())?;
        Ok(Self {
            problem: problem.clone(),
            mean: DVector::from_column_slice(prior_mean),
            s: prior_cov.to_dense(),
        })
    }
}

impl Denoiser for GaussianDenoiser {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn denoise(&self, eta: &[f64], at: TimePoint) -> Result<Vec<f64>> {
        let mats = UcosMatrices::new(&self.problem, at.tau)?;
        let rhs = &mats.r * DVector::from_column_slice(eta) - &self.mean;
        let v = (&self.s + &mats.sigma)
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Numerical(format!("S + Σ_τ singular at τ={}", at.tau)))?;
        Ok((&self.mean + &self.s * v).as_slice().to_vec())
    }
}

/// `λ(τ)(r(ξ_τ, τ) - e^{τ/2}x)`
pub fn conditional_score<D: Denoiser + ?Sized>(
    r: &D,
    gamma: &[f64],
    x: &[f64],
    at: TimePoint,
) -> Result<Vec<f64>> {
    let l = lambda_coeff(at.tau)?;
    let eta = xi(gamma, x, at.tau)?;
    let rv = r.denoise(&eta, at)?;
    check_len("denoiser output", x.len(), rv.len())?;
    let g = (at.tau / 2.0).exp();
    Ok(rv.iter().zip(x).map(|(ri, xi)| l * (ri - g * xi)).collect())
}

/// `(1 - α)s_data + αs_gauss`
pub fn regularized_score(s_data: &[f64], s_gauss: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    check_len("regularized score", s_data.len(), s_gauss.len())?;
    Ok(s_data
        .iter()
        .zip(s_gauss)
        .map(|(d, g)| (1.0 - alpha) * d + alpha * g)
        .collect())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Parameter(format!(
            "α must lie in [0, 1], got {alpha}"
        )));
    }
    Ok(())
}

/// The (optionally regularised) conditional score as a [`ScoreFunction`].
pub struct UcosScore<'a> {
    pub r: Option<&'a dyn Denoiser>,
    pub gamma: Vec<f64>,
    pub gaussian: Option<GaussianScore>,
    pub alpha: f64,
}

impl ScoreFunction for UcosScore<'_> {
    fn dim(&self) -> usize {
        self.gamma.len()
    }

    fn score_into(&self, x: &[f64], at: TimePoint, out: &mut [f64]) -> Result<()> {
        let data = if self.alpha < 1.0 {
            let r = self
                .r
                .ok_or_else(|| Error::Usage("α < 1 needs a learned or closed-form r".into()))?;
            Some(conditional_score(r, &self.gamma, x, at)?)
        } else {
            None
        };
        let gauss = if self.alpha > 0.0 {
            let g = self
                .gaussian
                .as_ref()
                .ok_or_else(|| Error::Usage("α > 0 needs the Gaussian posterior".into()))?;
            Some(g.score(x, at.tau))
        } else {
            None
        };
        match (data, gauss) {
            (Some(d), Some(g)) => out.copy_from_slice(&regularized_score(&d, &g, self.alpha)?),
            (Some(d), None) => out.copy_from_slice(&d),
            (None, Some(g)) => out.copy_from_slice(&g),
            (None, None) => unreachable!("alpha is in [0, 1]"),
        }
        Ok(())
    }
}

/// Model-based Gaussian prior `N(m, S)` used for regularisation.
#[derive(Clone, Debug)]
pub struct GaussianPrior {
    pub mean: Field,
    pub cov: CovarianceOperator,
}

/// Reverse-time sampling with the conditional score. With `α > 0` the
/// analytic posterior of `prior` is precomputed and mixed in.
pub fn sample_posterior(
    problem: &UcosProblem,
    r: Option<&dyn Denoiser>,
    prior: Option<&GaussianPrior>,
    y: &[f64],
    alpha: f64,
    n_samples: usize,
    seed: u64,
) -> Result<SampleEnsemble> {
    check_alpha(alpha)?;
    if n_samples == 0 {
        return Err(Error::Parameter("need at least one sample".into()));
    }
    let gamma = problem.data_term(y)?;
    let gaussian = if alpha > 0.0 {
        let prior = prior.ok_or_else(|| Error::Usage("α > 0 needs a Gaussian prior".into()))?;
        let post = analytic_posterior(
            problem.a.as_ref(),
            &problem.gamma_obs,
            &prior.mean,
            &prior.cov,
            y,
        )?;
        Some(GaussianScore::new(&post, &problem.c)?)
    } else {
        None
    };
    let score = UcosScore {
        r,
        gamma,
        gaussian,
        alpha,
    };
    let chains = run_chains(n_samples, seed, |_, rng| {
        reverse_em_sample(&score, &problem.c, &problem.sched, rng)
    });
    let method = if alpha == 1.0 {
        Method::Gaussian
    } else if alpha > 0.0 {
        Method::UcosReg
    } else {
        Method::Ucos
    };
    SampleEnsemble::from_chains(problem.shape(), chains, method, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossWeighting {
    /// `λ(τ)²‖r - x₀‖²`
    Lambda2,
    /// `‖r - x₀‖²`
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Lower end of the training time range `t ~ U[ε, 1]`.
    pub t_truncation: f64,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    pub weighting: LossWeighting,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            t_truncation: 0.001,
            seed: 0,
            optimizer: AdamWConfig::default(),
            weighting: LossWeighting::Uniform,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_truncation > 0.0 && self.t_truncation < 1.0) {
            return Err(Error::Parameter(format!(
                "training truncation must lie in (0, 1), got {}",
                self.t_truncation
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Parameter(
                "epochs and batch size must be positive".into(),
            ));
        }
        Ok(())
    }

    pub(crate) fn fit_config(&self) -> FitConfig {
        FitConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            optimizer: self.optimizer,
        }
    }
}

/// Regression of `r_θ` on `(R_τ⁻¹X̃_τ, t) ↦ X₀` over the dataset.
pub fn train(
    problem: &UcosProblem,
    dataset: &[Field],
    net: &mut ScoreNetwork,
    cfg: &TrainingConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Training("empty dataset".into()));
    }
    if let Some(f) = dataset.iter().find(|f| f.shape() != problem.shape()) {
        return Err(Error::dim(
            format!("dataset field {} vs problem {}", f.shape(), problem.shape()),
            problem.dim(),
            f.len(),
        ));
    }
    if net.config().input_shape() != problem.shape() {
        return Err(Error::dim(
            "network input",
            problem.dim(),
            net.config().input_shape().len(),
        ));
    }
    let kappa = problem.kappa()?;
    let eps = cfg.t_truncation;
    let tmax = problem.sched.t_max;
    fit(net, dataset.len(), &cfg.fit_config(), |i, rng| {
        let t = rng.random_range(eps..tmax);
        let tau = problem.sched.tau(t);
        let x0 = dataset[i].as_slice();
        let mut input = sample_training_input(problem, x0, tau, rng)?;
        let c = input_scale(tau, kappa);
        input.iter_mut().for_each(|v| *v *= c);
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
    use crate::field::PixelGrid;
    use crate::gaussian::{gaussian_posterior_score, ou_covariance};
    use crate::operator::{DenseMatrixOperator, IdentityOperator, ZeroOperator};
    use crate::rng::master_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_problem(seed: u64, n: usize, m: usize, ou: bool) -> (UcosProblem, GaussianPrior) {
        let mut rng = master_rng(seed);
        let a = DenseMatrixOperator::from_row_major(m, n, &standard_normal_vec(&mut rng, m * n))
            .unwrap();
        let c = if ou {
            let grid = PixelGrid::new(1, n, 1.0).unwrap();
            ou_covariance(&grid, 0.8, 2.0, 1).unwrap()
        } else {
            CovarianceOperator::identity(n)
        };
        let noise =
            CovarianceOperator::diagonal((0..m).map(|_| 0.1 + rng.random::<f64>()).collect())
                .unwrap();
        let b = DMatrix::from_vec(n, n, standard_normal_vec(&mut rng, n * n));
        let s = CovarianceOperator::dense(
            &b * b.transpose() / n as f64 + DMatrix::identity(n, n) * 0.2,
        )
        .unwrap();
        let mean = Field::from_vec(FieldShape::flat(n), standard_normal_vec(&mut rng, n)).unwrap();
        (
            UcosProblem::new(Arc::new(a), c, noise, DiffusionSchedule::default()).unwrap(),
            GaussianPrior { mean, cov: s },
        )
    }

    #[test]
    fn lambda_examples() {
        let t = 2.0 * 2f64.ln();
        assert!((lambda_coeff(t).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((lambda_coeff(4f64.ln()).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(lambda_coeff(80.0).unwrap() < 1e-17);
        assert!(lambda_coeff(0.0).is_err());
    }

    #[test]
    fn xi_examples() {
        let shape = FieldShape::flat(2);
        let p = UcosProblem::new(
            Arc::new(IdentityOperator::new(shape)),
            CovarianceOperator::identity(2),
            CovarianceOperator::identity(2),
            DiffusionSchedule::default(),
        )
        .unwrap();
        let tau = 2.0 * 2f64.ln();
        let g = p.data_term(&[1.0, 0.0]).unwrap();
        let v = xi(&g, &[0.0, 1.0], tau).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-15 && (v[1] - 2.0 / 3.0).abs() < 1e-15);
        let g0 = p.data_term(&[0.0, 0.0]).unwrap();
        assert_eq!(xi(&g0, &[3.0, 0.0], tau).unwrap(), vec![2.0, 0.0]);
        assert_eq!(xi(&g, &[0.0, 0.0], tau).unwrap(), g);
    }

    #[test]
    fn training_input_without_data_coupling() {
        let shape = FieldShape::flat(3);
        let p = UcosProblem::new(
            Arc::new(ZeroOperator::new(shape, 2)),
            CovarianceOperator::identity(3),
            CovarianceOperator::identity(2),
            DiffusionSchedule::default(),
        )
        .unwrap();
        let tau: f64 = 0.7;
        let x0 = [1.0, 2.0, -1.0];
        let a = sample_training_input(&p, &x0, tau, &mut master_rng(3)).unwrap();
        let mut rng = master_rng(3);
        let z1 = standard_normal_vec(&mut rng, 3);
        let em1 = tau.exp_m1();
        for i in 0..3 {
            let expect = x0[i] / em1 + z1[i] / em1.sqrt();
            assert!((a[i] - expect).abs() < 1e-14);
        }
        assert!(sample_training_input(&p, &x0, 0.0, &mut rng).is_err());
    }

    #[test]
    fn kappa_matches_dense_trace() {
        let (p, _) = random_problem(4, 6, 3, true);
        let a = p.a.to_dense();
        let g_inv = p.gamma_obs.to_dense().try_inverse().unwrap();
        let tr = (p.c.to_dense() * a.transpose() * g_inv * &a).trace() / 6.0;
        assert!((p.kappa().unwrap() - tr).abs() < 1e-12 * tr.abs().max(1.0));
    }

    #[test]
    fn gaussian_oracle_matches_posterior_score() {
        for seed in 0..20u64 {
            let n = 2 + (seed as usize % 7);
            let m = 1 + (seed as usize % 4);
            let (p, prior) = random_problem(seed, n, m, seed % 2 == 0);
            let mut rng = master_rng(100 + seed);
            let y = standard_normal_vec(&mut rng, m);
            let post = analytic_posterior(p.a.as_ref(), &p.gamma_obs, &prior.mean, &prior.cov, &y)
                .unwrap();
            let r = GaussianDenoiser::new(&p, prior.mean.as_slice(), &prior.cov).unwrap();
            let gamma = p.data_term(&y).unwrap();
            for t in [0.05, 0.2, 0.5, 0.9] {
                let at = p.sched.time_point(t);
                let x = standard_normal_vec(&mut rng, n);
                let s = conditional_score(&r, &gamma, &x, at).unwrap();
                let s_ref = gaussian_posterior_score(&post, &p.c, &x, at.tau).unwrap();
                let err =
                    crate::field::norm(&crate::field::sub(&s, &s_ref)) / crate::field::norm(&s_ref);
                assert!(err < 1e-6, "seed {seed} t {t}: {err}");
            }
        }
    }

    #[test]
    fn regularized_endpoints() {
        let d = [2.0, 4.0];
        let g = [0.0, 0.0];
        assert_eq!(regularized_score(&d, &g, 0.0).unwrap(), d.to_vec());
        assert_eq!(regularized_score(&d, &g, 1.0).unwrap(), g.to_vec());
        assert_eq!(regularized_score(&d, &g, 0.5).unwrap(), vec![1.0, 2.0]);
        assert!(regularized_score(&d, &g, 1.5).is_err());
    }

    #[test]
    fn cancellation_gives_zero_score() {
        struct Echo;
        impl Denoiser for Echo {
            fn dim(&self) -> usize {
                2
            }
            fn denoise(&self, eta: &[f64], at: TimePoint) -> Result<Vec<f64>> {
                // with y = 0, ξ = λx, so this returns e^{τ/2}x
                let l = lambda_coeff(at.tau)?;
                let g = (at.tau / 2.0).exp();
                Ok(eta.iter().map(|v| g * v / l).collect())
            }
        }
        let s =
            conditional_score(&Echo, &[0.0, 0.0], &[0.3, -1.0], TimePoint::identity(0.4)).unwrap();
        assert!(s.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn sigma_is_positive_semidefinite_on_small_instances() {
        for seed in 0..10 {
            let (p, _) = random_problem(seed, 5, 3, true);
            for t in [0.01, 0.3, 1.0] {
                let m = UcosMatrices::new(&p, p.sched.tau(t)).unwrap();
                let lmax = m.sigma.amax();
                assert!(m.sigma_min_eigenvalue() >= -1e-10 * lmax);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn regularized_score_is_affine_in_alpha(a in 0.0f64..1.0, b in 0.0f64..1.0, seed in any::<u64>()) {
            let mut rng = master_rng(seed);
            let d = standard_normal_vec(&mut rng, 5);
            let g = standard_normal_vec(&mut rng, 5);
            let sa = regularized_score(&d, &g, a).unwrap();
            let sb = regularized_score(&d, &g, b).unwrap();
            let mid = regularized_score(&d, &g, 0.5 * (a + b)).unwrap();
            for i in 0..5 {
                prop_assert!((mid[i] - 0.5 * (sa[i] + sb[i])).abs() < 1e-12);
            }
        }

        #[test]
        fn gaussian_oracle_identity_holds(seed in any::<u64>(), t in 0.02f64..1.0) {
            let (p, prior) = random_problem(seed, 4, 2, seed % 2 == 0);
            let mut rng = master_rng(seed ^ 0xabc);
            let y = standard_normal_vec(&mut rng, 2);
            let post = analytic_posterior(p.a.as_ref(), &p.gamma_obs, &prior.mean, &prior.cov, &y).unwrap();
            let r = GaussianDenoiser::new(&p, prior.mean.as_slice(), &prior.cov).unwrap();
            let gamma = p.data_term(&y).unwrap();
            let at = p.sched.time_point(t);
            let x = standard_normal_vec(&mut rng, 4);
            let s = conditional_score(&r, &gamma, &x, at).unwrap();
            let s_ref = gaussian_posterior_score(&post, &p.c, &x, at.tau).unwrap();
            let err = crate::field::norm(&crate::field::sub(&s, &s_ref)) / crate::field::norm(&s_ref);
            prop_assert!(err < 1e-6);
        }
    }
}
