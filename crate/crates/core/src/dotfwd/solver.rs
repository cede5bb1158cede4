//! Finite-volume assembly and the banded complex direct solver.
//!
//! Unknowns are cell-centred fluence values, indexed `i * N + j` for row `i`
//! (y) and column `j` (x). Interior faces use the harmonic mean of the
//! adjacent diffusion coefficients; boundary faces close the Robin condition
//! `Φ + ρ κ ∂Φ/∂n = g` with a half-cell one-sided difference, which gives the
//! face flux `β (Φ_c - g)` with `β = 2κh / (h + 2ρκ)` and `ρ = α / (2ζ)`.

use num_complex::Complex64;

use super::geometry::{boundary_faces, patch_overlaps, BoundaryFace, Instrument, OpticalField};
use crate::error::{Error, Result};

/// Relative residual above which a solve is reported as failed.
pub const RESIDUAL_TOLERANCE: f64 = 1e-10;

/// Dense band storage with LU factors computed in place, no pivoting.
#[derive(Clone, Debug)]
pub(crate) struct BandedLu {
    n: usize,
    bw: usize,
    band: Vec<Complex64>,
}

impl BandedLu {
    fn width(&self) -> usize {
        2 * self.bw + 1
    }

    fn idx(&self, r: usize, c: usize) -> usize {
        r * self.width() + c + self.bw - r
    }

    fn zeros(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            band: vec![Complex64::new(0.0, 0.0); n * (2 * bw + 1)],
        }
    }

    fn add(&mut self, r: usize, c: usize, v: Complex64) {
        let k = self.idx(r, c);
        self.band[k] += v;
    }

    fn factor(&mut self) -> Result<()> {
        let (n, bw) = (self.n, self.bw);
        for k in 0..n {
            let pivot = self.band[self.idx(k, k)];
            if !(pivot.norm() > 1e-300) || !pivot.is_finite() {
                return Err(Error::Numerical(format!(
                    "zero pivot at row {k} in the diffusion system"
                )));
            }
            let end = (k + bw + 1).min(n);
            for r in k + 1..end {
                let ik = self.idx(r, k);
                let l = self.band[ik] / pivot;
                self.band[ik] = l;
                if l == Complex64::new(0.0, 0.0) {
                    continue;
                }
                for c in k + 1..end {
                    let u = self.band[self.idx(k, c)];
                    let rc = self.idx(r, c);
                    self.band[rc] -= l * u;
                }
            }
        }
        Ok(())
    }

    fn solve_in_place(&self, x: &mut [Complex64]) {
        let (n, bw) = (self.n, self.bw);
        for r in 0..n {
            let mut acc = x[r];
            for c in r.saturating_sub(bw)..r {
                acc -= self.band[self.idx(r, c)] * x[c];
            }
            x[r] = acc;
        }
        for r in (0..n).rev() {
            let mut acc = x[r];
            for c in r + 1..(r + bw + 1).min(n) {
                acc -= self.band[self.idx(r, c)] * x[c];
            }
            x[r] = acc / self.band[self.idx(r, r)];
        }
    }
}

/// Assembled and factored diffusion system for one optical field and
/// instrument. The matrix does not depend on the source, so one
/// factorisation serves every forward and adjoint solve.
#[derive(Clone, Debug)]
pub struct DiffusionSystem {
    pub(crate) n: usize,
    pub(crate) h: f64,
    /// Boundary coefficient `ρ = α / (2ζ)`.
    pub(crate) rho: f64,
    pub(crate) kappa: Vec<f64>,
    pub(crate) faces: Vec<BoundaryFace>,
    /// Per source: `(face, g)` with `g` the face-averaged Robin data `q/ζ`.
    pub(crate) source_data: Vec<Vec<(usize, f64)>>,
    /// Per detector: `(face, weight)`, weights summing to one.
    pub(crate) detector_weights: Vec<Vec<(usize, f64)>>,
    /// Diagonal of the operator and the `+x` / `+y` couplings, for residuals.
    diag: Vec<Complex64>,
    east: Vec<f64>,
    north: Vec<f64>,
    lu: BandedLu,
}

impl DiffusionSystem {
    pub fn new(optics: &OpticalField, inst: &Instrument) -> Result<Self> {
        inst.validate()?;
        let n = optics.n();
        let h = optics.grid.spacing_mm;
        let extent = optics.extent();
        let rho = inst.alpha_bc / (2.0 * inst.zeta);
        let kappa = optics.kappa();
        let faces = boundary_faces(n, h);
        let reaction_im = inst.omega / inst.c * h * h;

        let np = n * n;
        let mut diag: Vec<Complex64> = optics
            .mua
            .iter()
            .map(|a| Complex64::new(a * h * h, reaction_im))
            .collect();
        let mut east = vec![0.0; np];
        let mut north = vec![0.0; np];
        for i in 0..n {
            for j in 0..n {
                let p = i * n + j;
                if j + 1 < n {
                    let kf = harmonic(kappa[p], kappa[p + 1]);
                    east[p] = kf;
                    diag[p] += kf;
                    diag[p + 1] += kf;
                }
                if i + 1 < n {
                    let kf = harmonic(kappa[p], kappa[p + n]);
                    north[p] = kf;
                    diag[p] += kf;
                    diag[p + n] += kf;
                }
            }
        }
        for f in &faces {
            diag[f.cell] += robin_beta(kappa[f.cell], h, rho);
        }

        let mut lu = BandedLu::zeros(np, n);
        for p in 0..np {
            lu.add(p, p, diag[p]);
            if east[p] != 0.0 {
                lu.add(p, p + 1, (-east[p]).into());
                lu.add(p + 1, p, (-east[p]).into());
            }
            if north[p] != 0.0 {
                lu.add(p, p + n, (-north[p]).into());
                lu.add(p + n, p, (-north[p]).into());
            }
        }
        lu.factor()?;

        let source_data = inst
            .sources
            .iter()
            .map(|s| {
                patch_overlaps(s, &faces, h, extent)
                    .into_iter()
                    .map(|(f, len)| (f, s.strength / inst.zeta * len / h))
                    .collect()
            })
            .collect();
        let detector_weights = inst
            .detectors
            .iter()
            .map(|d| {
                let ov = patch_overlaps(d, &faces, h, extent);
                let total: f64 = ov.iter().map(|o| o.1).sum();
                ov.into_iter().map(|(f, len)| (f, len / total)).collect()
            })
            .collect();

        Ok(Self {
            n,
            h,
            rho,
            kappa,
            faces,
            source_data,
            detector_weights,
            diag,
            east,
            north,
            lu,
        })
    }

    pub fn n_unknowns(&self) -> usize {
        self.n * self.n
    }

    /// `K x` for the assembled operator.
    pub fn apply(&self, x: &[Complex64]) -> Vec<Complex64> {
        let n = self.n;
        let mut out: Vec<Complex64> = self.diag.iter().zip(x).map(|(d, v)| d * v).collect();
        for p in 0..n * n {
            if self.east[p] != 0.0 {
                out[p] -= self.east[p] * x[p + 1];
                out[p + 1] -= self.east[p] * x[p];
            }
            if self.north[p] != 0.0 {
                out[p] -= self.north[p] * x[p + n];
                out[p + n] -= self.north[p] * x[p];
            }
        }
        out
    }

    /// Solves `K x = b`, checking the relative residual.
    pub fn solve(&self, b: &[Complex64]) -> Result<Vec<Complex64>> {
        let mut x = b.to_vec();
        self.lu.solve_in_place(&mut x);
        let r = self.relative_residual(&x, b);
        if !(r <= RESIDUAL_TOLERANCE) {
            return Err(Error::Numerical(format!(
                "diffusion solve failed: relative residual {r:.3e}"
            )));
        }
        Ok(x)
    }

    pub fn relative_residual(&self, x: &[Complex64], b: &[Complex64]) -> f64 {
        let kx = self.apply(x);
        let num: f64 = kx.iter().zip(b).map(|(a, b)| (a - b).norm_sqr()).sum();
        let den: f64 = b.iter().map(|v| v.norm_sqr()).sum();
        (num / den.max(f64::MIN_POSITIVE)).sqrt()
    }

    /// Right-hand side for source `s`.
    pub fn source_rhs(&self, s: usize) -> Vec<Complex64> {
        let mut b = vec![Complex64::new(0.0, 0.0); self.n_unknowns()];
        for &(f, g) in &self.source_data[s] {
            let cell = self.faces[f].cell;
            b[cell] += robin_beta(self.kappa[cell], self.h, self.rho) * g;
        }
        b
    }

    /// Robin data of source `s` on face `f`.
    pub(crate) fn source_value(&self, s: usize, f: usize) -> f64 {
        self.source_data[s]
            .iter()
            .filter(|(k, _)| *k == f)
            .map(|(_, g)| g)
            .sum()
    }

    /// Boundary fluence on face `f` given the cell value and Robin data.
    pub(crate) fn boundary_value(&self, f: usize, phi_c: Complex64, g: f64) -> Complex64 {
        let k = self.kappa[self.faces[f].cell];
        let h = self.h;
        (h * g + 2.0 * self.rho * k * phi_c) / (h + 2.0 * self.rho * k)
    }

    /// Exitance `Γ = (2ζ/α) Φ` averaged over detector `d` for the field of
    /// source `s`.
    pub fn detector_exitance(&self, phi: &[Complex64], s: usize, d: usize) -> Complex64 {
        self.detector_weights[d]
            .iter()
            .map(|&(f, w)| {
                let g = self.source_value(s, f);
                w * self.boundary_value(f, phi[self.faces[f].cell], g) / self.rho
            })
            .sum()
    }

    /// Adjoint source: gradient of the detector functional with respect to
    /// the cell values.
    pub(crate) fn detector_functional(&self, d: usize) -> Vec<Complex64> {
        let mut c = vec![Complex64::new(0.0, 0.0); self.n_unknowns()];
        for &(f, w) in &self.detector_weights[d] {
            let cell = self.faces[f].cell;
            let k = self.kappa[cell];
            c[cell] += w * 2.0 * k / (self.h + 2.0 * self.rho * k);
        }
        c
    }
}

pub(crate) fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

pub(crate) fn robin_beta(kappa: f64, h: f64, rho: f64) -> f64 {
    2.0 * kappa * h / (h + 2.0 * rho * kappa)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn banded_lu_matches_dense_solve() {
        let n = 12;
        let bw = 3;
        let mut lu = BandedLu::zeros(n, bw);
        let mut dense = DMatrix::<Complex64>::zeros(n, n);
        for r in 0..n {
            for c in r.saturating_sub(bw)..(r + bw + 1).min(n) {
                let v = if r == c {
                    Complex64::new(10.0, 1.0 + r as f64)
                } else {
                    Complex64::new(((r * 7 + c * 3) % 5) as f64 * 0.3 - 0.6, 0.1)
                };
                lu.add(r, c, v);
                dense[(r, c)] = v;
            }
        }
        let b: Vec<Complex64> = (0..n).map(|k| Complex64::new(k as f64, 1.0)).collect();
        lu.factor().unwrap();
        let mut x = b.clone();
        lu.solve_in_place(&mut x);
        let bx = &dense * nalgebra::DVector::from_vec(x);
        for (u, v) in bx.iter().zip(&b) {
            assert!((u - v).norm() < 1e-12);
        }
    }
}
