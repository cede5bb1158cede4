//! Gaussian priors, the linear-Gaussian posterior and its diffused score.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{check_len, Error, Result};
use crate::field::{Field, FieldShape, PixelGrid};
use crate::operator::LinearOperator;
use crate::rng::standard_normal_vec;

/// Symmetric positive semi-definite covariance with a square-root factor.
///
/// Dense factors are computed once at construction: Cholesky when it
/// succeeds, otherwise a symmetric eigendecomposition with eigenvalues below
/// `-1e-10·λ_max` rejected and the remaining negatives clamped to zero.
#[derive(Clone, Debug)]
pub struct CovarianceOperator {
    dim: usize,
    repr: Repr,
}

#[derive(Clone, Debug)]
enum Repr {
    Identity,
    Diagonal {
        var: Vec<f64>,
        sd: Vec<f64>,
    },
    Dense {
        matrix: DMatrix<f64>,
        factor: DenseFactor,
    },
    Block {
        block: Box<CovarianceOperator>,
        copies: usize,
    },
}

#[derive(Clone, Debug)]
enum DenseFactor {
    /// Lower-triangular `L` with `LLᵀ = C`.
    Cholesky(DMatrix<f64>),
    /// `C = V diag(λ) Vᵀ`, λ clamped to be nonnegative.
    Eigen {
        vectors: DMatrix<f64>,
        values: DVector<f64>,
    },
}

const EIGEN_CLAMP: f64 = 1e-10;

impl CovarianceOperator {
    pub fn identity(n: usize) -> Self {
        Self {
            dim: n,
            repr: Repr::Identity,
        }
    }

    pub fn zero(n: usize) -> Self {
        Self {
            dim: n,
            repr: Repr::Diagonal {
                var: vec![0.0; n],
                sd: vec![0.0; n],
            },
        }
    }

    pub fn diagonal(variances: Vec<f64>) -> Result<Self> {
        if let Some(v) = variances.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::Parameter(format!(
                "diagonal covariance entries must be finite and nonnegative, got {v}"
            )));
        }
        let sd = variances.iter().map(|v| v.sqrt()).collect();
        Ok(Self {
            dim: variances.len(),
            repr: Repr::Diagonal { var: variances, sd },
        })
    }

    pub fn dense(matrix: DMatrix<f64>) -> Result<Self> {
        let n = matrix.nrows();
        check_len("covariance matrix columns", n, matrix.ncols())?;
        let scale = matrix.amax().max(f64::MIN_POSITIVE);
        for i in 0..n {
            for j in 0..i {
                if (matrix[(i, j)] - matrix[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::Parameter(format!(
                        "covariance matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter(
                "covariance matrix has non-finite entries".into(),
            ));
        }
        let factor = factor_dense(&matrix)?;
        Ok(Self {
            dim: n,
            repr: Repr::Dense { matrix, factor },
        })
    }

    /// `copies` independent identical blocks along the diagonal.
    pub fn block_diagonal(block: CovarianceOperator, copies: usize) -> Self {
        if copies == 1 {
            return block;
        }
        Self {
            dim: block.dim * copies,
            repr: Repr::Block {
                block: Box::new(block),
                copies,
            },
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.repr, Repr::Identity)
    }

    /// Diagonal entries if the covariance is diagonal (or identity).
    pub fn as_diagonal(&self) -> Option<Vec<f64>> {
        match &self.repr {
            Repr::Identity => Some(vec![1.0; self.dim]),
            Repr::Diagonal { var, .. } => Some(var.clone()),
            Repr::Block { block, copies } => block.as_diagonal().map(|d| d.repeat(*copies)),
            Repr::Dense { .. } => None,
        }
    }

    /// `C x`
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.apply_into(x, &mut out);
        out
    }

    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.repr {
            Repr::Identity => out.copy_from_slice(x),
            Repr::Diagonal { var, .. } => {
                for ((o, v), xi) in out.iter_mut().zip(var).zip(x) {
                    *o = v * xi;
                }
            }
            Repr::Dense { matrix, .. } => gemv(matrix, x, out),
            Repr::Block { block, .. } => {
                let b = block.dim;
                for (xc, oc) in x.chunks(b).zip(out.chunks_mut(b)) {
                    block.apply_into(xc, oc);
                }
            }
        }
    }

    /// `C^{1/2} z` for the stored factor, so that `C^{1/2}z ~ N(0, C)` when
    /// `z` is standard normal.
    pub fn sqrt_apply(&self, z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.sqrt_apply_into(z, &mut out);
        out
    }

    pub fn sqrt_apply_into(&self, z: &[f64], out: &mut [f64]) {
        match &self.repr {
            Repr::Identity => out.copy_from_slice(z),
            Repr::Diagonal { sd, .. } => {
                for ((o, s), zi) in out.iter_mut().zip(sd).zip(z) {
                    *o = s * zi;
                }
            }
            Repr::Dense { factor, .. } => match factor {
                DenseFactor::Cholesky(l) => lower_gemv(l, z, out),
                DenseFactor::Eigen { vectors, values } => {
                    let scaled: Vec<f64> = z
                        .iter()
                        .zip(values.iter())
                        .map(|(zi, l)| zi * l.sqrt())
                        .collect();
                    gemv(vectors, &scaled, out);
                }
            },
            Repr::Block { block, .. } => {
                let b = block.dim;
                for (zc, oc) in z.chunks(b).zip(out.chunks_mut(b)) {
                    block.sqrt_apply_into(zc, oc);
                }
            }
        }
    }

    /// `C^{-1} b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        check_len("covariance solve", self.dim, b.len())?;
        match &self.repr {
            Repr::Identity => Ok(b.to_vec()),
            Repr::Diagonal { var, .. } => b
                .iter()
                .zip(var)
                .map(|(bi, v)| {
                    if *v > 0.0 {
                        Ok(bi / v)
                    } else {
                        Err(Error::Numerical("singular diagonal covariance".into()))
                    }
                })
                .collect(),
            Repr::Dense { factor, .. } => match factor {
                DenseFactor::Cholesky(l) => {
                    let mut v = DVector::from_column_slice(b);
                    let ok = l.solve_lower_triangular_mut(&mut v)
                        && l.tr_solve_lower_triangular_mut(&mut v);
                    if !ok {
                        return Err(Error::Numerical("singular Cholesky factor".into()));
                    }
                    Ok(v.as_slice().to_vec())
                }
                DenseFactor::Eigen { vectors, values } => {
                    let lmax = values.max();
                    let tol = EIGEN_CLAMP * lmax.max(f64::MIN_POSITIVE);
                    if values.iter().any(|l| *l <= tol) {
                        return Err(Error::Numerical(format!(
                            "covariance is singular (smallest eigenvalue {:e})",
                            values.min()
                        )));
                    }
                    let mut c = vectors.tr_mul(&DVector::from_column_slice(b));
                    c.component_div_assign(values);
                    Ok((vectors * c).as_slice().to_vec())
                }
            },
            Repr::Block { block, .. } => {
                let mut out = Vec::with_capacity(self.dim);
                for bc in b.chunks(block.dim) {
                    out.extend(block.solve(bc)?);
                }
                Ok(out)
            }
        }
    }

    /// Applies a factor `G` with `GGᵀ = C^{-1}`, so `G z ~ N(0, C^{-1})`.
    pub fn inv_sqrt_apply(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_len("covariance inverse square root", self.dim, z.len())?;
        match &self.repr {
            Repr::Identity => Ok(z.to_vec()),
            Repr::Diagonal { sd, .. } => z
                .iter()
                .zip(sd)
                .map(|(zi, s)| {
                    if *s > 0.0 {
                        Ok(zi / s)
                    } else {
                        Err(Error::Numerical("singular diagonal covariance".into()))
                    }
                })
                .collect(),
            Repr::Dense { factor, .. } => match factor {
                DenseFactor::Cholesky(l) => {
                    let mut v = DVector::from_column_slice(z);
                    if !l.tr_solve_lower_triangular_mut(&mut v) {
                        return Err(Error::Numerical("singular Cholesky factor".into()));
                    }
                    Ok(v.as_slice().to_vec())
                }
                DenseFactor::Eigen { vectors, values } => {
                    let tol = EIGEN_CLAMP * values.max().max(f64::MIN_POSITIVE);
                    if values.iter().any(|l| *l <= tol) {
                        return Err(Error::Numerical("covariance is singular".into()));
                    }
                    let scaled: Vec<f64> = z
                        .iter()
                        .zip(values.iter())
                        .map(|(zi, l)| zi / l.sqrt())
                        .collect();
                    let mut out = vec![0.0; self.dim];
                    gemv(vectors, &scaled, &mut out);
                    Ok(out)
                }
            },
            Repr::Block { block, .. } => {
                let mut out = Vec::with_capacity(self.dim);
                for zc in z.chunks(block.dim) {
                    out.extend(block.inv_sqrt_apply(zc)?);
                }
                Ok(out)
            }
        }
    }

    /// `C M` for a matrix with `dim` rows.
    pub fn apply_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.repr {
            Repr::Identity => m.clone(),
            Repr::Diagonal { var, .. } => {
                let mut out = m.clone();
                for (i, v) in var.iter().enumerate() {
                    out.row_mut(i).scale_mut(*v);
                }
                out
            }
            Repr::Dense { matrix, .. } => matrix * m,
            Repr::Block { block, copies } => {
                let b = block.dim;
                let mut out = DMatrix::zeros(m.nrows(), m.ncols());
                for c in 0..*copies {
                    let part = block.apply_matrix(&m.rows(c * b, b).into_owned());
                    out.rows_mut(c * b, b).copy_from(&part);
                }
                out
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match &self.repr {
            Repr::Identity => DMatrix::identity(self.dim, self.dim),
            Repr::Diagonal { var, .. } => DMatrix::from_diagonal(&DVector::from_column_slice(var)),
            Repr::Dense { matrix, .. } => matrix.clone(),
            Repr::Block { block, copies } => {
                let b = block.dim;
                let inner = block.to_dense();
                let mut out = DMatrix::zeros(self.dim, self.dim);
                for c in 0..*copies {
                    out.view_mut((c * b, c * b), (b, b)).copy_from(&inner);
                }
                out
            }
        }
    }

    /// Dense square-root factor `G` with `GGᵀ = C`.
    pub fn sqrt_dense(&self) -> DMatrix<f64> {
        match &self.repr {
            Repr::Dense { factor, .. } => match factor {
                DenseFactor::Cholesky(l) => l.clone(),
                DenseFactor::Eigen { vectors, values } => {
                    let mut g = vectors.clone();
                    for (j, l) in values.iter().enumerate() {
                        g.column_mut(j).scale_mut(l.sqrt());
                    }
                    g
                }
            },
            Repr::Block { block, copies } => {
                let b = block.dim;
                let inner = block.sqrt_dense();
                let mut out = DMatrix::zeros(self.dim, self.dim);
                for c in 0..*copies {
                    out.view_mut((c * b, c * b), (b, b)).copy_from(&inner);
                }
                out
            }
            _ => {
                let mut out = DMatrix::zeros(self.dim, self.dim);
                for i in 0..self.dim {
                    let mut e = vec![0.0; self.dim];
                    e[i] = 1.0;
                    out.column_mut(i).copy_from_slice(&self.sqrt_apply(&e));
                }
                out
            }
        }
    }

    pub fn trace(&self) -> f64 {
        match &self.repr {
            Repr::Identity => self.dim as f64,
            Repr::Diagonal { var, .. } => var.iter().sum(),
            Repr::Dense { matrix, .. } => matrix.trace(),
            Repr::Block { block, copies } => block.trace() * *copies as f64,
        }
    }
}

fn factor_dense(matrix: &DMatrix<f64>) -> Result<DenseFactor> {
    if let Some(ch) = matrix.clone().cholesky() {
        return Ok(DenseFactor::Cholesky(ch.unpack()));
    }
    let eig = matrix.clone().symmetric_eigen();
    let lmax = eig.eigenvalues.max();
    let lmin = eig.eigenvalues.min();
    if lmin < -EIGEN_CLAMP * lmax.max(0.0) {
        return Err(Error::Numerical(format!(
            "covariance is indefinite: smallest eigenvalue {lmin:e}, largest {lmax:e}"
        )));
    }
    Ok(DenseFactor::Eigen {
        vectors: eig.eigenvectors,
        values: eig.eigenvalues.map(|l| l.max(0.0)),
    })
}

fn gemv(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    let xv = nalgebra::DVectorView::from_slice(x, x.len());
    let mut ov = nalgebra::DVectorViewMut::from_slice(out, m.nrows());
    ov.gemv(1.0, m, &xv, 0.0);
}

fn lower_gemv(l: &DMatrix<f64>, z: &[f64], out: &mut [f64]) {
    // Column-oriented traversal of the lower triangle.
    let n = l.nrows();
    out.fill(0.0);
    for j in 0..n {
        let zj = z[j];
        if zj == 0.0 {
            continue;
        }
        let col = &l.as_slice()[j * n..(j + 1) * n];
        for i in j..n {
            out[i] += col[i] * zj;
        }
    }
}

/// OU covariance `σ² exp(-‖r_i - r_j‖/ℓ)` over pixel centres, block-diagonal
/// with identical blocks when `channels > 1`.
pub fn ou_covariance(
    grid: &PixelGrid,
    sigma: f64,
    ell: f64,
    channels: usize,
) -> Result<CovarianceOperator> {
    if !(sigma > 0.0) || !(ell > 0.0) {
        return Err(Error::Parameter(format!(
            "OU covariance needs sigma > 0 and ell > 0, got sigma={sigma}, ell={ell}"
        )));
    }
    let n = grid.pixels();
    let centers: Vec<(f64, f64)> = (0..grid.height)
        .flat_map(|i| (0..grid.width).map(move |j| (i, j)))
        .map(|(i, j)| grid.center(i, j))
        .collect();
    let s2 = sigma * sigma;
    let mut m = DMatrix::zeros(n, n);
    for a in 0..n {
        m[(a, a)] = s2;
        for b in 0..a {
            let (dx, dy) = (centers[a].0 - centers[b].0, centers[a].1 - centers[b].1);
            let v = s2 * (-(dx * dx + dy * dy).sqrt() / ell).exp();
            m[(a, b)] = v;
            m[(b, a)] = v;
        }
    }
    let block = CovarianceOperator::dense(m)?;
    Ok(CovarianceOperator::block_diagonal(block, channels.max(1)))
}

pub fn sample_gaussian<R: Rng + ?Sized>(
    mean: &Field,
    cov: &CovarianceOperator,
    rng: &mut R,
) -> Result<Field> {
    check_len("gaussian sample", cov.dim(), mean.len())?;
    let z = standard_normal_vec(rng, cov.dim());
    let mut x = cov.sqrt_apply(&z);
    for (xi, mi) in x.iter_mut().zip(mean.as_slice()) {
        *xi += mi;
    }
    Field::from_vec(mean.shape(), x)
}

#[derive(Clone, Debug)]
pub struct GaussianPosterior {
    pub mean: Field,
    pub covariance: CovarianceOperator,
}

/// Conditions the prior `N(m, S)` on `y = Ax + ε`, `ε ~ N(0, Γ_obs)`.
pub fn analytic_posterior(
    a: &dyn LinearOperator,
    gamma_obs: &CovarianceOperator,
    prior_mean: &Field,
    prior_cov: &CovarianceOperator,
    y: &[f64],
) -> Result<GaussianPosterior> {
    let n = a.domain().len();
    let m = a.codomain_dim();
    check_len("prior mean", n, prior_mean.len())?;
    check_len("prior covariance", n, prior_cov.dim())?;
    check_len("noise covariance", m, gamma_obs.dim())?;
    check_len("data", m, y.len())?;

    let a_mat = a.to_dense();
    let sat = prior_cov.apply_matrix(&a_mat.transpose()); // S A*, n x m
    let mut gram = &a_mat * &sat + gamma_obs.to_dense();
    gram = (&gram + gram.transpose()) * 0.5;
    let chol = gram
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("A S A* + Γ_obs is not positive definite".into()))?;

    let am = a.apply_slice(prior_mean.as_slice())?;
    let resid = DVector::from_iterator(m, y.iter().zip(&am).map(|(yi, ai)| yi - ai));
    let w = chol.solve(&resid);
    let mean_vec = DVector::from_column_slice(prior_mean.as_slice()) + &sat * w;

    // Γ_post = S - SA*(ASA* + Γ)^{-1} A S, with AS = (SA*)ᵀ.
    let k = chol.solve(&sat.transpose());
    let mut post = prior_cov.to_dense() - &sat * k;
    post = (&post + post.transpose()) * 0.5;

    Ok(GaussianPosterior {
        mean: Field::from_vec(prior_mean.shape(), mean_vec.as_slice().to_vec())?,
        covariance: CovarianceOperator::dense(post)?,
    })
}

/// Minimiser of `½‖y - Ax‖²_Γ + ½‖x - m‖²_S` by a direct normal-equations
/// solve. Dense; intended for small problems and cross-checks.
pub fn tikhonov_map(
    a: &dyn LinearOperator,
    gamma_obs: &CovarianceOperator,
    prior_mean: &Field,
    prior_cov: &CovarianceOperator,
    y: &[f64],
) -> Result<Field> {
    let n = a.domain().len();
    check_len("prior mean", n, prior_mean.len())?;
    check_len("data", a.codomain_dim(), y.len())?;
    let a_mat = a.to_dense();
    let g_inv = gamma_obs
        .to_dense()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("noise covariance is singular".into()))?;
    let s_inv = prior_cov
        .to_dense()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("prior covariance is singular".into()))?;
    let at_g = a_mat.transpose() * &g_inv;
    let lhs = &at_g * &a_mat + &s_inv;
    let rhs = &at_g * DVector::from_column_slice(y)
        + &s_inv * DVector::from_column_slice(prior_mean.as_slice());
    let x = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("normal equations are singular".into()))?;
    Field::from_vec(prior_mean.shape(), x.as_slice().to_vec())
}

/// `C((1 - e^{-τ})C + e^{-τ}Γ_post)^{-1}(e^{-τ/2}x̄ - x)` by a direct dense solve.
pub fn gaussian_posterior_score(
    post: &GaussianPosterior,
    c: &CovarianceOperator,
    x: &[f64],
    tau: f64,
) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!(
            "score time must be positive, got {tau}"
        )));
    }
    let n = post.mean.len();
    check_len("score state", n, x.len())?;
    check_len("diffusion covariance", n, c.dim())?;
    let d = (-tau).exp();
    let sys = c.to_dense() * (1.0 - d) + post.covariance.to_dense() * d;
    let h = (-tau / 2.0).exp();
    let rhs = DVector::from_iterator(
        n,
        post.mean.as_slice().iter().zip(x).map(|(m, xi)| h * m - xi),
    );
    let v = sys.lu().solve(&rhs).ok_or_else(|| {
        Error::Numerical(format!("diffused posterior covariance singular at τ={tau}"))
    })?;
    Ok(c.apply(v.as_slice()))
}

/// Diffused Gaussian posterior score with a precomputed simultaneous
/// diagonalisation of `(C, Γ_post)`, so each evaluation costs two dense
/// matrix-vector products.
///
/// With `C = LLᵀ` and `L⁻¹Γ_post L⁻ᵀ = V diag(d) Vᵀ`, the score is
/// `W diag(1/((1-e^{-τ}) + e^{-τ}d)) W⁻¹ (e^{-τ/2}x̄ - x)` with `W = LV`.
#[derive(Clone, Debug)]
pub struct GaussianScore {
    mean: Vec<f64>,
    shape: FieldShape,
    w: DMatrix<f64>,
    w_inv: DMatrix<f64>,
    d: DVector<f64>,
}

impl GaussianScore {
    pub fn new(post: &GaussianPosterior, c: &CovarianceOperator) -> Result<Self> {
        let n = post.mean.len();
        check_len("diffusion covariance", n, c.dim())?;
        let l = c
            .to_dense()
            .cholesky()
            .ok_or_else(|| {
                Error::Numerical("diffusion covariance is not positive definite".into())
            })?
            .unpack();
        let l_inv = l
            .clone()
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .ok_or_else(|| Error::Numerical("singular diffusion covariance factor".into()))?;
        let mut m = &l_inv * post.covariance.to_dense() * l_inv.transpose();
        m = (&m + m.transpose()) * 0.5;
        let eig = m.symmetric_eigen();
        let w = &l * &eig.eigenvectors;
        let w_inv = eig.eigenvectors.transpose() * &l_inv;
        Ok(Self {
            mean: post.mean.as_slice().to_vec(),
            shape: post.mean.shape(),
            w,
            w_inv,
            d: eig.eigenvalues.map(|v| v.max(0.0)),
        })
    }

    pub fn shape(&self) -> FieldShape {
        self.shape
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn score_into(&self, x: &[f64], tau: f64, out: &mut [f64]) {
        let n = self.mean.len();
        let e = (-tau).exp();
        let h = (-tau / 2.0).exp();
        let r: Vec<f64> = self.mean.iter().zip(x).map(|(m, xi)| h * m - xi).collect();
        let mut u = vec![0.0; n];
        gemv(&self.w_inv, &r, &mut u);
        for (ui, di) in u.iter_mut().zip(self.d.iter()) {
            *ui /= (1.0 - e) + e * di;
        }
        gemv(&self.w, &u, out);
    }

    pub fn score(&self, x: &[f64], tau: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.mean.len()];
        self.score_into(x, tau, &mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::{DenseMatrixOperator, IdentityOperator, ZeroOperator};
    use crate::rng::master_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_spd(n: usize, rng: &mut crate::rng::Rng) -> DMatrix<f64> {
        let b = DMatrix::from_vec(n, n, standard_normal_vec(rng, n * n));
        &b * b.transpose() / n as f64 + DMatrix::identity(n, n) * 0.1
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let d: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        d / crate::field::norm(b).max(1e-300)
    }

    #[test]
    fn ou_entries() {
        let grid = PixelGrid::square(4, 8.0).unwrap(); // 2 mm pixels
        let c = ou_covariance(&grid, 1.5, 2.0, 1).unwrap();
        let m = c.to_dense();
        assert!((m[(0, 0)] - 2.25).abs() < 1e-15);
        // neighbours along a row are exactly ℓ apart
        assert!((m[(0, 1)] - 2.25 * (-1.0f64).exp()).abs() < 1e-14);
        assert_eq!(m, m.transpose());
        assert!(ou_covariance(&grid, 0.0, 1.0, 1).is_err());
        assert!(ou_covariance(&grid, 1.0, -1.0, 1).is_err());
    }

    #[test]
    fn ou_two_channels_is_block_diagonal() {
        let grid = PixelGrid::square(3, 3.0).unwrap();
        let c = ou_covariance(&grid, 1.0, 2.0, 2).unwrap();
        let m = c.to_dense();
        assert_eq!(c.dim(), 18);
        assert_eq!(m[(0, 9)], 0.0);
        assert_eq!(m[(9, 10)], m[(0, 1)]);
    }

    #[test]
    fn sqrt_consistency_dense_and_block() {
        let grid = PixelGrid::square(5, 10.0).unwrap();
        let c = ou_covariance(&grid, 0.7, 3.0, 2).unwrap();
        let g = c.sqrt_dense();
        let m = c.to_dense();
        assert!((&g * g.transpose() - &m).norm() / m.norm() < 1e-8);
    }

    #[test]
    fn eigen_fallback_for_singular() {
        // rank-one matrix: Cholesky fails, eigen factor reproduces it
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let m = &v * v.transpose();
        let c = CovarianceOperator::dense(m.clone()).unwrap();
        let g = c.sqrt_dense();
        assert!((&g * g.transpose() - &m).norm() / m.norm() < 1e-8);
        assert!(c.solve(&[1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn indefinite_is_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        match CovarianceOperator::dense(m) {
            Err(Error::Numerical(msg)) => assert!(msg.contains("eigenvalue")),
            other => panic!("expected numerical error, got {other:?}"),
        }
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(CovarianceOperator::dense(asym).is_err());
    }

    #[test]
    fn solve_and_inv_sqrt() {
        let mut rng = master_rng(5);
        let m = random_spd(6, &mut rng);
        let c = CovarianceOperator::dense(m.clone()).unwrap();
        let b = standard_normal_vec(&mut rng, 6);
        let x = c.solve(&b).unwrap();
        assert!(rel_err(&c.apply(&x), &b) < 1e-10);
        // G with GGᵀ = C⁻¹
        let mut g = DMatrix::zeros(6, 6);
        for j in 0..6 {
            let mut e = vec![0.0; 6];
            e[j] = 1.0;
            g.column_mut(j)
                .copy_from_slice(&c.inv_sqrt_apply(&e).unwrap());
        }
        let inv = m.try_inverse().unwrap();
        assert!((&g * g.transpose() - &inv).norm() / inv.norm() < 1e-10);
    }

    #[test]
    fn zero_covariance_sample_is_mean() {
        let shape = FieldShape::new(1, 2, 2);
        let mean = Field::from_vec(shape, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = sample_gaussian(&mean, &CovarianceOperator::zero(4), &mut master_rng(1)).unwrap();
        assert_eq!(s, mean);
    }

    #[test]
    fn identity_sample_variance() {
        let mut rng = master_rng(9);
        let shape = FieldShape::flat(3);
        let mean = Field::zeros(shape);
        let c = CovarianceOperator::identity(3);
        let n = 100_000;
        let mut acc = [0.0; 3];
        for _ in 0..n {
            let s = sample_gaussian(&mean, &c, &mut rng).unwrap();
            for (a, v) in acc.iter_mut().zip(s.as_slice()) {
                *a += v * v;
            }
        }
        for a in acc {
            let var = a / n as f64;
            assert!((0.98..=1.02).contains(&var), "variance {var}");
        }
    }

    #[test]
    fn ou_sample_correlation_at_lag_ell() {
        let grid = PixelGrid::square(2, 4.0).unwrap(); // neighbours 2 mm apart
        let c = ou_covariance(&grid, 1.0, 2.0, 1).unwrap();
        let mean = Field::zeros(grid.shape(1));
        let mut rng = master_rng(21);
        let n = 40_000;
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let s = sample_gaussian(&mean, &c, &mut rng).unwrap();
            let (a, b) = (s.as_slice()[0], s.as_slice()[1]);
            sxy += a * b;
            sxx += a * a;
            syy += b * b;
        }
        let rho = sxy / (sxx * syy).sqrt();
        let target = (-1.0f64).exp();
        let se = (1.0 - target * target) / (n as f64).sqrt();
        assert!((rho - target).abs() < 3.0 * se, "rho {rho}");
    }

    #[test]
    fn posterior_scalar_conjugacy() {
        let shape = FieldShape::flat(3);
        let id = IdentityOperator::new(shape);
        let y = [1.0, -4.0, 0.5];
        let p = analytic_posterior(
            &id,
            &CovarianceOperator::identity(3),
            &Field::zeros(shape),
            &CovarianceOperator::identity(3),
            &y,
        )
        .unwrap();
        for (m, yi) in p.mean.as_slice().iter().zip(&y) {
            assert!((m - yi / 2.0).abs() < 1e-14);
        }
        let half = DMatrix::<f64>::identity(3, 3) * 0.5;
        assert!((p.covariance.to_dense() - half).amax() < 1e-14);
    }

    #[test]
    fn zero_operator_returns_prior() {
        let shape = FieldShape::flat(2);
        let prior_mean = Field::from_vec(shape, vec![0.3, -0.2]).unwrap();
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let prior = CovarianceOperator::dense(s.clone()).unwrap();
        let p = analytic_posterior(
            &ZeroOperator::new(shape, 2),
            &CovarianceOperator::identity(2),
            &prior_mean,
            &prior,
            &[5.0, 5.0],
        )
        .unwrap();
        assert_eq!(p.mean, prior_mean);
        assert!((p.covariance.to_dense() - s).amax() < 1e-15);
    }

    #[test]
    fn noiseless_limit() {
        let a = DenseMatrixOperator::from_row_major(1, 1, &[2.0]).unwrap();
        let p = analytic_posterior(
            &a,
            &CovarianceOperator::diagonal(vec![1e-8]).unwrap(),
            &Field::zeros(FieldShape::flat(1)),
            &CovarianceOperator::identity(1),
            &[4.0],
        )
        .unwrap();
        assert!((p.mean.as_slice()[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn score_vanishes_at_diffused_mean() {
        let shape = FieldShape::flat(2);
        let post = GaussianPosterior {
            mean: Field::from_vec(shape, vec![1.0, -2.0]).unwrap(),
            covariance: CovarianceOperator::diagonal(vec![0.3, 0.5]).unwrap(),
        };
        let c = CovarianceOperator::identity(2);
        let tau = 0.7;
        let h = (-tau / 2.0f64).exp();
        let x = [h, -2.0 * h];
        let s = gaussian_posterior_score(&post, &c, &x, tau).unwrap();
        assert!(s.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn score_stationary_limit() {
        let shape = FieldShape::flat(2);
        let post = GaussianPosterior {
            mean: Field::from_vec(shape, vec![1.0, 3.0]).unwrap(),
            covariance: CovarianceOperator::diagonal(vec![0.3, 0.5]).unwrap(),
        };
        let x = [0.4, -1.1];
        let s =
            gaussian_posterior_score(&post, &CovarianceOperator::identity(2), &x, 40.0).unwrap();
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!(rel_err(&s, &neg) < 1e-3);
    }

    #[test]
    fn score_matches_finite_difference_1d() {
        let post = GaussianPosterior {
            mean: Field::from_vec(FieldShape::flat(1), vec![1.0]).unwrap(),
            covariance: CovarianceOperator::diagonal(vec![0.25]).unwrap(),
        };
        let tau: f64 = 0.5;
        let mu = (-tau / 2.0).exp();
        let var = (-tau).exp() * 0.25 + 1.0 - (-tau).exp();
        let logp = |x: f64| -(x - mu).powi(2) / (2.0 * var);
        for x in [-1.0, 0.2, 1.7] {
            let h = 1e-4;
            let fd = (logp(x + h) - logp(x - h)) / (2.0 * h);
            let s = gaussian_posterior_score(&post, &CovarianceOperator::identity(1), &[x], tau)
                .unwrap();
            assert!((s[0] - fd).abs() < 1e-5);
        }
    }

    #[test]
    fn small_time_limit() {
        let mut rng = master_rng(2);
        let shape = FieldShape::flat(3);
        let post = GaussianPosterior {
            mean: Field::from_vec(shape, standard_normal_vec(&mut rng, 3)).unwrap(),
            covariance: CovarianceOperator::dense(random_spd(3, &mut rng)).unwrap(),
        };
        let c = CovarianceOperator::dense(random_spd(3, &mut rng)).unwrap();
        let x = standard_normal_vec(&mut rng, 3);
        let diff: Vec<f64> = post
            .mean
            .as_slice()
            .iter()
            .zip(&x)
            .map(|(m, xi)| m - xi)
            .collect();
        let limit = c.apply(&post.covariance.solve(&diff).unwrap());
        let e1 = rel_err(
            &gaussian_posterior_score(&post, &c, &x, 1e-3).unwrap(),
            &limit,
        );
        let e2 = rel_err(
            &gaussian_posterior_score(&post, &c, &x, 5e-4).unwrap(),
            &limit,
        );
        assert!(e1 < 1e-2);
        assert!(e2 < 0.6 * e1, "not O(t): {e1} {e2}");
    }

    #[test]
    fn fast_score_matches_direct() {
        let mut rng = master_rng(8);
        let n = 6;
        let shape = FieldShape::flat(n);
        let post = GaussianPosterior {
            mean: Field::from_vec(shape, standard_normal_vec(&mut rng, n)).unwrap(),
            covariance: CovarianceOperator::dense(random_spd(n, &mut rng)).unwrap(),
        };
        let c = CovarianceOperator::dense(random_spd(n, &mut rng)).unwrap();
        let fast = GaussianScore::new(&post, &c).unwrap();
        for tau in [0.01, 0.3, 2.0, 6.0] {
            let x = standard_normal_vec(&mut rng, n);
            let a = fast.score(&x, tau);
            let b = gaussian_posterior_score(&post, &c, &x, tau).unwrap();
            assert!(rel_err(&a, &b) < 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn posterior_mean_is_tikhonov_minimiser(seed in any::<u64>(), n in 1usize..=16, m in 1usize..=8) {
            let mut rng = master_rng(seed);
            let a = DenseMatrixOperator::from_row_major(m, n, &standard_normal_vec(&mut rng, m * n)).unwrap();
            let prior = CovarianceOperator::dense(random_spd(n, &mut rng)).unwrap();
            let noise = CovarianceOperator::diagonal(
                (0..m).map(|_| 0.05 + rng.random::<f64>()).collect()).unwrap();
            let mean = Field::from_vec(FieldShape::flat(n), standard_normal_vec(&mut rng, n)).unwrap();
            let y = standard_normal_vec(&mut rng, m);
            let p = analytic_posterior(&a, &noise, &mean, &prior, &y).unwrap();
            let t = tikhonov_map(&a, &noise, &mean, &prior, &y).unwrap();
            prop_assert!(rel_err(p.mean.as_slice(), t.as_slice()) < 1e-8);
            // contraction: S - Γ_post is PSD
            let diff = prior.to_dense() - p.covariance.to_dense();
            let lmin = diff.symmetric_eigen().eigenvalues.min();
            prop_assert!(lmin >= -1e-10);
        }

        #[test]
        fn covariance_apply_is_symmetric(seed in any::<u64>(), n in 1usize..8) {
            let mut rng = master_rng(seed);
            let c = CovarianceOperator::block_diagonal(
                CovarianceOperator::dense(random_spd(n, &mut rng)).unwrap(), 2);
            let x = standard_normal_vec(&mut rng, 2 * n);
            let y = standard_normal_vec(&mut rng, 2 * n);
            let lhs = crate::field::dot(&c.apply(&x), &y);
            let rhs = crate::field::dot(&x, &c.apply(&y));
            prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
        }
    }
}
