//! Variance-preserving diffusion: time change, perturbation kernel, Tweedie
//! denoiser and the reverse-time Euler–Maruyama sampler.
//!
//! Scores follow the preconditioned convention `s = C ∇log q_τ`, for which the
//! forward process `dX = -½β X dt + √β C^{1/2} dW` has the reverse-time drift
//! `β(½Y + s)`. Closed-form quantities are evaluated at the effective time
//! `τ(t) = ∫₀ᵗ β`.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{check_len, Error, Result};
use crate::gaussian::{CovarianceOperator, GaussianScore};
use crate::rng::{standard_normal_vec, stream_rng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub t_min: f64,
    pub t_max: f64,
    pub n_steps: usize,
    pub beta0: f64,
    pub beta1: f64,
}

impl Default for DiffusionSchedule {
    /// `ε = 0.005`, `T = 1`, 500 steps, `β(t) = 0.05 + 9.95t`.
    fn default() -> Self {
        Self {
            t_min: 0.005,
            t_max: 1.0,
            n_steps: 500,
            beta0: 0.05,
            beta1: 10.0,
        }
    }
}

impl DiffusionSchedule {
    pub fn new(t_min: f64, t_max: f64, n_steps: usize, beta0: f64, beta1: f64) -> Result<Self> {
        let s = Self {
            t_min,
            t_max,
            n_steps,
            beta0,
            beta1,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_min > 0.0 && self.t_min < self.t_max && self.t_max.is_finite()) {
            return Err(Error::Parameter(format!(
                "schedule needs 0 < t_min < t_max, got [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        if self.n_steps == 0 {
            return Err(Error::Parameter("schedule needs at least one step".into()));
        }
        if !(self.beta0 > 0.0 && self.beta1 > 0.0) {
            return Err(Error::Parameter(format!(
                "time change endpoints must be positive, got {} and {}",
                self.beta0, self.beta1
            )));
        }
        Ok(())
    }

    pub fn with_steps(self, n_steps: usize) -> Self {
        Self { n_steps, ..self }
    }

    pub fn beta(&self, t: f64) -> f64 {
        self.beta0 + (self.beta1 - self.beta0) * t
    }

    /// `τ(t)` without range checks.
    pub fn tau(&self, t: f64) -> f64 {
        self.beta0 * t + 0.5 * (self.beta1 - self.beta0) * t * t
    }

    pub fn effective_time(&self, t: f64) -> Result<f64> {
        if !(0.0..=self.t_max).contains(&t) {
            return Err(Error::Parameter(format!(
                "time {t} outside [0, {}]",
                self.t_max
            )));
        }
        Ok(self.tau(t))
    }

    pub fn time_point(&self, t: f64) -> TimePoint {
        TimePoint {
            t,
            tau: self.tau(t),
        }
    }

    pub fn step_size(&self) -> f64 {
        (self.t_max - self.t_min) / self.n_steps as f64
    }

    /// Uniform grid from `t_max` down to `t_min`, `n_steps + 1` points.
    pub fn grid(&self) -> Vec<f64> {
        let dt = self.step_size();
        (0..=self.n_steps)
            .map(|i| {
                if i == self.n_steps {
                    self.t_min
                } else {
                    self.t_max - i as f64 * dt
                }
            })
            .collect()
    }
}

/// Raw time `t` together with its effective time `τ(t)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimePoint {
    pub t: f64,
    pub tau: f64,
}

impl TimePoint {
    /// A point whose raw and effective times coincide (β ≡ 1).
    pub fn identity(t: f64) -> Self {
        Self { t, tau: t }
    }
}

/// `(e^{-τ/2}, 1 - e^{-τ})`: mean scale and noise variance scale of
/// `X_τ | X_0 ~ N(e^{-τ/2}X_0, (1 - e^{-τ})C)`.
pub fn perturbation_params(tau: f64) -> (f64, f64) {
    ((-tau / 2.0).exp(), -(-tau).exp_m1())
}

pub trait ScoreFunction: Sync {
    fn dim(&self) -> usize;

    fn score_into(&self, x: &[f64], at: TimePoint, out: &mut [f64]) -> Result<()>;

    fn score(&self, x: &[f64], at: TimePoint) -> Result<Vec<f64>> {
        check_len("score input", self.dim(), x.len())?;
        let mut out = vec![0.0; self.dim()];
        self.score_into(x, at, &mut out)?;
        Ok(out)
    }
}

impl ScoreFunction for GaussianScore {
    fn dim(&self) -> usize {
        self.mean().len()
    }

    fn score_into(&self, x: &[f64], at: TimePoint, out: &mut [f64]) -> Result<()> {
        GaussianScore::score_into(self, x, at.tau, out);
        Ok(())
    }
}

/// Adapts a closure `(x, time, out)` into a [`ScoreFunction`].
pub struct FnScore<F> {
    dim: usize,
    f: F,
}

impl<F> FnScore<F>
where
    F: Fn(&[f64], TimePoint, &mut [f64]) -> Result<()> + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> ScoreFunction for FnScore<F>
where
    F: Fn(&[f64], TimePoint, &mut [f64]) -> Result<()> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn score_into(&self, x: &[f64], at: TimePoint, out: &mut [f64]) -> Result<()> {
        (self.f)(x, at, out)
    }
}

/// `E[X₀ | X_τ = x] = e^{τ/2}(x + (1 - e^{-τ}) s(x, τ))`.
pub fn tweedie_denoiser<S: ScoreFunction + ?Sized>(
    score: &S,
    x: &[f64],
    at: TimePoint,
) -> Result<Vec<f64>> {
    if !(at.tau > 0.0) {
        return Err(Error::Parameter(format!(
            "denoiser needs positive time, got {}",
            at.tau
        )));
    }
    let s = score.score(x, at)?;
    Ok(tweedie_from_score(x, &s, at.tau))
}

pub(crate) fn tweedie_from_score(x: &[f64], s: &[f64], tau: f64) -> Vec<f64> {
    let (_, var) = perturbation_params(tau);
    let g = (tau / 2.0).exp();
    x.iter()
        .zip(s)
        .map(|(xi, si)| g * (xi + var * si))
        .collect()
}

/// Integrates the reverse SDE from `t_max` to `t_min`, starting at `x`.
///
/// `noise` fills a buffer with the standard normal increment for each step;
/// `observe` sees `(step, time, state)` after each update.
pub fn integrate_reverse<S, N, O>(
    score: &S,
    c: &CovarianceOperator,
    sched: &DiffusionSchedule,
    mut x: Vec<f64>,
    mut noise: N,
    mut observe: O,
) -> Result<Vec<f64>>
where
    S: ScoreFunction + ?Sized,
    N: FnMut(&mut [f64]),
    O: FnMut(usize, TimePoint, &[f64]),
{
    sched.validate()?;
    let n = score.dim();
    check_len("sampler state", n, x.len())?;
    check_len("diffusion covariance", n, c.dim())?;
    let dt = sched.step_size();
    let mut s = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut cz = vec![0.0; n];
    for step in 0..sched.n_steps {
        let t = sched.t_max - step as f64 * dt;
        let at = sched.time_point(t);
        let beta = sched.beta(t);
        score.score_into(&x, at, &mut s)?;
        noise(&mut z);
        c.sqrt_apply_into(&z, &mut cz);
        let sd = (beta * dt).sqrt();
        for i in 0..n {
            x[i] += beta * (0.5 * x[i] + s[i]) * dt + sd * cz[i];
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step,
                detail: format!("non-finite state at t = {t:.6}"),
            });
        }
        observe(step, sched.time_point((t - dt).max(sched.t_min)), &x);
    }
    Ok(x)
}

/// One reverse-time chain: `Y(t_max) ~ N(0, C)`, then `n_steps` uniform
/// Euler–Maruyama steps down to `t_min`.
pub fn reverse_em_sample<S, R>(
    score: &S,
    c: &CovarianceOperator,
    sched: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Vec<f64>>
where
    S: ScoreFunction + ?Sized,
    R: Rng + ?Sized,
{
    let x0 = c.sqrt_apply(&standard_normal_vec(rng, c.dim()));
    integrate_reverse(
        score,
        c,
        sched,
        x0,
        |z| {
            for v in z.iter_mut() {
                *v = rng.sample(rand_distr::StandardNormal);
            }
        },
        |_, _, _| {},
    )
}

/// Runs `n` independent chains, chain `k` on stream `k` of `seed`.
/// Failures are per chain.
pub fn run_chains<T, F>(n: usize, seed: u64, chain: F) -> Vec<Result<T>>
where
    T: Send,
    F: Fn(usize, &mut crate::rng::Rng) -> Result<T> + Sync,
{
    (0..n)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream_rng(seed, k as u64);
            chain(k, &mut rng)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian1d {
    pub mean: f64,
    pub var: f64,
}

impl Gaussian1d {
    pub fn new(mean: f64, var: f64) -> Self {
        Self { mean, var }
    }

    /// Law after diffusing for (effective) time `t` with `C = 1`.
    pub fn diffused(&self, t: f64) -> Self {
        let (a, v) = perturbation_params(t);
        Self {
            mean: a * self.mean,
            var: a * a * self.var + v,
        }
    }

    pub fn score(&self, x: f64) -> f64 {
        -(x - self.mean) / self.var
    }
}

/// Normalised form of the geometric mixture `p1^α p2^{1-α}`.
pub fn geometric_mixture(p1: Gaussian1d, p2: Gaussian1d, alpha: f64) -> Gaussian1d {
    let prec = alpha / p1.var + (1.0 - alpha) / p2.var;
    let mean = (alpha * p1.mean / p1.var + (1.0 - alpha) * p2.mean / p2.var) / prec;
    Gaussian1d::new(mean, 1.0 / prec)
}

/// For each `t`, the gap between the convex combination of diffused scores
/// and the diffused score of the geometric mixture, evaluated at `x`.
pub fn mixture_rate_check(
    p1: Gaussian1d,
    p2: Gaussian1d,
    alpha: f64,
    x: f64,
    t_list: &[f64],
) -> Vec<(f64, f64)> {
    let q = geometric_mixture(p1, p2, alpha);
    t_list
        .iter()
        .map(|&t| {
            let mix = alpha * p1.diffused(t).score(x) + (1.0 - alpha) * p2.diffused(t).score(x);
            (t, (mix - q.diffused(t).score(x)).abs())
        })
        .collect()
}
