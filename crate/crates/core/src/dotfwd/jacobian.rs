//! Adjoint-method Jacobians of the log-exitance data.

use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use super::geometry::{Instrument, OpticalField};
use super::solver::DiffusionSystem;
use super::{measure_with, solve_all, MeasurementSet};
use crate::error::{Error, Result};
use crate::field::{FieldShape, PixelGrid};
use crate::operator::{rescale_jacobian, DenseMatrixOperator, RescaledJacobian};

/// Derivatives of the stacked data with respect to pixelwise `μa` and `μs'`.
#[derive(Clone)]
pub struct DotJacobian {
    pub mua: DenseMatrixOperator,
    pub mus: DenseMatrixOperator,
    /// Data of the background the Jacobian was taken at.
    pub reference: MeasurementSet,
    pub grid: PixelGrid,
}

impl DotJacobian {
    /// The scaled operator on `[0, 1]`-rescaled perturbations.
    pub fn rescaled(&self) -> Result<RescaledJacobian> {
        rescale_jacobian(Arc::new(self.mua.clone()), Arc::new(self.mus.clone()))
    }

    /// The same Jacobian acting on a field given on `coarse`, pulled back by
    /// area-weighted resampling onto this Jacobian's grid.
    pub fn resampled_from(&self, coarse: &PixelGrid) -> Result<Self> {
        let r = area_resampling(coarse, &self.grid)?;
        let shape = FieldShape::new(1, coarse.height, coarse.width);
        Ok(Self {
            mua: DenseMatrixOperator::new(self.mua.matrix() * &r, shape)?,
            mus: DenseMatrixOperator::new(self.mus.matrix() * &r, shape)?,
            reference: self.reference.clone(),
            grid: *coarse,
        })
    }

    pub fn data_len(&self) -> usize {
        self.reference.values.len()
    }
}

/// Matrix mapping pixel values on `from` to area-weighted averages on `to`;
/// both grids must cover the same square.
pub fn area_resampling(from: &PixelGrid, to: &PixelGrid) -> Result<DMatrix<f64>> {
    let tol = 1e-9 * from.extent_x().max(to.extent_x());
    if (from.extent_x() - to.extent_x()).abs() > tol
        || (from.extent_y() - to.extent_y()).abs() > tol
    {
        return Err(Error::Parameter(format!(
            "resampling grids cover different extents: {}x{} mm vs {}x{} mm",
            from.extent_x(),
            from.extent_y(),
            to.extent_x(),
            to.extent_y()
        )));
    }
    let weights = |nf: usize, nt: usize| {
        let hf = from.spacing_mm;
        let ht = to.spacing_mm;
        let mut w = DMatrix::zeros(nt, nf);
        for t in 0..nt {
            for f in 0..nf {
                let a = (t as f64 * ht).max(f as f64 * hf);
                let b = ((t + 1) as f64 * ht).min((f + 1) as f64 * hf);
                if b > a {
                    w[(t, f)] = (b - a) / ht;
                }
            }
        }
        w
    };
    let wy = weights(from.height, to.height);
    let wx = weights(from.width, to.width);
    Ok(wy.kronecker(&wx))
}

/// Jacobian at `background` by the adjoint method: one forward solve per
/// source, one adjoint solve per detector, all sharing one factorisation.
pub fn jacobian(background: &OpticalField, inst: &Instrument) -> Result<DotJacobian> {
    let sys = DiffusionSystem::new(background, inst)?;
    let phis = solve_all(&sys)?;
    let reference = measure_with(&sys, &phis, inst)?;
    let nd = inst.n_detectors();
    let psis = (0..nd)
        .into_par_iter()
        .map(|d| sys.solve(&sys.detector_functional(d)))
        .collect::<Result<Vec<_>>>()?;

    let ns = inst.n_sources();
    let np = sys.n_unknowns();
    let pairs: Vec<(usize, usize)> = (0..ns).flat_map(|s| (0..nd).map(move |d| (s, d))).collect();
    let rows: Vec<(Vec<Complex64>, Vec<Complex64>)> = pairs
        .par_iter()
        .map(|&(s, d)| {
            let m = sys.detector_exitance(&phis[s], s, d);
            pair_sensitivity(&sys, &phis[s], &psis[d], s, d, m)
        })
        .collect();

    let m = 2 * ns * nd;
    let mut ja = DMatrix::zeros(m, np);
    let mut js = DMatrix::zeros(m, np);
    for (row, (da, ds)) in rows.iter().enumerate() {
        for p in 0..np {
            ja[(row, p)] = da[p].re;
            ja[(row + ns * nd, p)] = da[p].im;
            js[(row, p)] = ds[p].re;
            js[(row + ns * nd, p)] = ds[p].im;
        }
    }
    let grid = background.grid;
    let shape = grid.shape(1);
    Ok(DotJacobian {
        mua: DenseMatrixOperator::new(ja, shape)?,
        mus: DenseMatrixOperator::new(js, shape)?,
        reference,
        grid,
    })
}

/// `(d log M / dμa, d log M / dμs')` for one source/detector pair.
fn pair_sensitivity(
    sys: &DiffusionSystem,
    phi: &[Complex64],
    psi: &[Complex64],
    s: usize,
    d: usize,
    m: Complex64,
) -> (Vec<Complex64>, Vec<Complex64>) {
    let n = sys.n;
    let h = sys.h;
    let rho = sys.rho;
    let kappa = &sys.kappa;
    let zero = Complex64::new(0.0, 0.0);
    let mut dk = vec![zero; n * n];

    let mut face_pair = |p: usize, q: usize| {
        let t = -(psi[p] - psi[q]) * (phi[p] - phi[q]);
        let sum = kappa[p] + kappa[q];
        dk[p] += t * (2.0 * kappa[q] * kappa[q] / (sum * sum));
        dk[q] += t * (2.0 * kappa[p] * kappa[p] / (sum * sum));
    };
    for i in 0..n {
        for j in 0..n {
            let p = i * n + j;
            if j + 1 < n {
                face_pair(p, p + 1);
            }
            if i + 1 < n {
                face_pair(p, p + n);
            }
        }
    }

    let mut g = vec![0.0; sys.faces.len()];
    for &(f, v) in &sys.source_data[s] {
        g[f] += v;
    }
    for (f, face) in sys.faces.iter().enumerate() {
        let c = face.cell;
        let den = h + 2.0 * rho * kappa[c];
        let dbeta = 2.0 * h * h / (den * den);
        dk[c] += dbeta * psi[c] * (g[f] - phi[c]);
    }
    for &(f, w) in &sys.detector_weights[d] {
        let c = sys.faces[f].cell;
        let den = h + 2.0 * rho * kappa[c];
        dk[c] += w * 2.0 * h * (phi[c] - g[f]) / (den * den);
    }

    let inv_m = 1.0 / m;
    let mut da = Vec::with_capacity(n * n);
    let mut ds = Vec::with_capacity(n * n);
    for p in 0..n * n {
        let chain = -2.0 * kappa[p] * kappa[p] * dk[p];
        da.push((chain - h * h * psi[p] * phi[p]) * inv_m);
        ds.push(chain * inv_m);
    }
    (da, ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dotfwd::forward_data;
    use crate::operator::LinearOperator;

    #[test]
    fn resampling_preserves_constants_and_mass() {
        let from = PixelGrid::square(4, 10.0).unwrap();
        let to = PixelGrid::square(5, 10.0).unwrap();
        let r = area_resampling(&from, &to).unwrap();
        assert_eq!(r.shape(), (25, 16));
        for row in r.row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        // total area-weighted mass is conserved
        let x = nalgebra::DVector::from_fn(16, |k, _| k as f64);
        let y = &r * &x;
        let mass_from = x.sum() * from.spacing_mm.powi(2);
        let mass_to = y.sum() * to.spacing_mm.powi(2);
        assert!((mass_from - mass_to).abs() < 1e-9);
        assert!(area_resampling(&from, &PixelGrid::square(5, 11.0).unwrap()).is_err());
    }

    #[test]
    fn zero_perturbation_gives_zero_data() {
        let grid = PixelGrid::square(8, 16.0).unwrap();
        let bg = OpticalField::homogeneous(grid, 0.01, 1.0).unwrap();
        let inst = Instrument::interleaved(16.0, 2, 1.0, 1.0, 1.0, 100e6);
        let j = jacobian(&bg, &inst).unwrap();
        let y = j.mua.apply_slice(&[0.0; 64]).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
        assert_eq!(j.reference, forward_data(&bg, &inst).unwrap());
    }

    #[test]
    fn column_matches_finite_difference() {
        let grid = PixelGrid::square(10, 20.0).unwrap();
        let bg = OpticalField::homogeneous(grid, 0.01, 1.0).unwrap();
        let inst = Instrument::interleaved(20.0, 3, 1.0, 1.0, 1.0, 100e6);
        let j = jacobian(&bg, &inst).unwrap();
        let base = forward_data(&bg, &inst).unwrap();
        let eps = 1e-6;
        for (pixel, channel) in [(0usize, 0usize), (33, 0), (55, 1), (99, 1)] {
            let mut e = vec![0.0; 100];
            e[pixel] = eps;
            let zeros = vec![0.0; 100];
            let pert = if channel == 0 {
                bg.perturbed(&e, &zeros)
            } else {
                bg.perturbed(&zeros, &e)
            }
            .unwrap();
            let fd: Vec<f64> = forward_data(&pert, &inst)
                .unwrap()
                .difference(&base)
                .unwrap()
                .iter()
                .map(|v| v / eps)
                .collect();
            let mat = if channel == 0 {
                j.mua.matrix()
            } else {
                j.mus.matrix()
            };
            let col: Vec<f64> = mat.column(pixel).iter().copied().collect();
            let err: f64 = fd
                .iter()
                .zip(&col)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let scale: f64 = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(
                err <= 1e-3 * scale,
                "pixel {pixel} ch {channel}: {err} vs {scale}"
            );
        }
    }
}
