//! Truncated 2D Fourier mode mixing.
//!
//! Forward, with `s = 1/√(HW)`:
//!
//! ```text
//! X_i[k] = s·fft2(x_i)[k]                 for retained modes k
//! Y_o[k] = Σ_i X_i[k] W_io[k]
//! y_o    = s·Re(ifft2(scatter(w_k Y_o)))   (unnormalised inverse)
//! ```
//!
//! Retained rows are the signed frequencies `|k_r| < n_modes`, retained
//! columns are `0..min(n_modes, W/2 + 1)`, and `w_k` is 1 on column 0 and on
//! the Nyquist column, 2 elsewhere, so a Hermitian spectrum gives the usual
//! real inverse transform.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Unnormalised 2D FFT on a row-major `h x w` complex array.
#[derive(Clone)]
pub struct Fft2 {
    h: usize,
    w: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Fft2({}x{})", self.h, self.w)
    }
}

impl Fft2 {
    pub fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            h,
            w,
            row_fwd: planner.plan_fft_forward(w),
            col_fwd: planner.plan_fft_forward(h),
            row_inv: planner.plan_fft_inverse(w),
            col_inv: planner.plan_fft_inverse(h),
        }
    }

    pub fn forward(&self, data: &mut [Complex64]) {
        self.run(data, &self.row_fwd, &self.col_fwd);
    }

    /// Unnormalised inverse (`Σ_k Z[k] e^{+iθ}`).
    pub fn inverse(&self, data: &mut [Complex64]) {
        self.run(data, &self.row_inv, &self.col_inv);
    }

    fn run(&self, data: &mut [Complex64], row: &Arc<dyn Fft<f64>>, col: &Arc<dyn Fft<f64>>) {
        let (h, w) = (self.h, self.w);
        row.process(data);
        let mut t = vec![Complex64::new(0.0, 0.0); h * w];
        for i in 0..h {
            for j in 0..w {
                t[j * h + i] = data[i * w + j];
            }
        }
        col.process(&mut t);
        for i in 0..h {
            for j in 0..w {
                data[i * w + j] = t[j * h + i];
            }
        }
    }
}

/// Retained frequency positions in an `h x w` spectrum.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModeSet {
    pub h: usize,
    pub w: usize,
    pub rows: Vec<usize>,
    pub cols: usize,
}

impl ModeSet {
    pub fn new(h: usize, w: usize, n_modes: usize) -> Self {
        let n_modes = n_modes.max(1);
        let rows = if 2 * n_modes - 1 >= h {
            (0..h).collect()
        } else {
            let mut r: Vec<usize> = (0..n_modes).collect();
            r.extend((1..n_modes).rev().map(|k| h - k));
            r
        };
        let cols = n_modes.min(w / 2 + 1);
        Self { h, w, rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows.len() * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat spectrum index of retained mode `k` (row-major over `rows x cols`).
    pub fn position(&self, k: usize) -> usize {
        self.rows[k / self.cols] * self.w + k % self.cols
    }

    pub fn column_weight(&self, k: usize) -> f64 {
        let c = k % self.cols;
        if c == 0 || (self.w % 2 == 0 && c == self.w / 2) {
            1.0
        } else {
            2.0
        }
    }
}

/// Shapes and FFT plans for one spectral layer; weights live elsewhere and
/// are laid out `[c_in][c_out][mode]`.
#[derive(Clone, Debug)]
pub struct SpectralPlan {
    pub c_in: usize,
    pub c_out: usize,
    pub modes: ModeSet,
    fft: Fft2,
}

impl SpectralPlan {
    pub fn new(c_in: usize, c_out: usize, h: usize, w: usize, n_modes: usize) -> Self {
        Self {
            c_in,
            c_out,
            modes: ModeSet::new(h, w, n_modes),
            fft: Fft2::new(h, w),
        }
    }

    pub fn weight_len(&self) -> usize {
        self.c_in * self.c_out * self.modes.len()
    }

    fn scale(&self) -> f64 {
        1.0 / ((self.modes.h * self.modes.w) as f64).sqrt()
    }

    /// Retained, scaled spectra of each channel of `x` (`c x h x w`).
    fn analyse(&self, x: &[f64], channels: usize) -> Vec<Complex64> {
        let p = self.modes.h * self.modes.w;
        let m = self.modes.len();
        let s = self.scale();
        let mut out = Vec::with_capacity(channels * m);
        let mut buf = vec![Complex64::new(0.0, 0.0); p];
        for c in 0..channels {
            for (b, v) in buf.iter_mut().zip(&x[c * p..(c + 1) * p]) {
                *b = Complex64::new(*v, 0.0);
            }
            self.fft.forward(&mut buf);
            out.extend((0..m).map(|k| buf[self.modes.position(k)] * s));
        }
        out
    }

    /// `s·Re(ifft2(scatter(coef)))` for each channel's mode coefficients.
    fn synthesise(&self, coef: &[Complex64], channels: usize, out: &mut [f64]) {
        let p = self.modes.h * self.modes.w;
        let m = self.modes.len();
        let s = self.scale();
        let mut buf = vec![Complex64::new(0.0, 0.0); p];
        for c in 0..channels {
            buf.fill(Complex64::new(0.0, 0.0));
            for k in 0..m {
                buf[self.modes.position(k)] = coef[c * m + k];
            }
            self.fft.inverse(&mut buf);
            for (o, b) in out[c * p..(c + 1) * p].iter_mut().zip(&buf) {
                *o = s * b.re;
            }
        }
    }

    /// Returns the layer output and the cached input spectra.
    pub fn forward(&self, x: &[f64], wre: &[f64], wim: &[f64]) -> (Vec<f64>, Vec<Complex64>) {
        let m = self.modes.len();
        let p = self.modes.h * self.modes.w;
        let xm = self.analyse(x, self.c_in);
        let mut y = vec![Complex64::new(0.0, 0.0); self.c_out * m];
        for i in 0..self.c_in {
            let xi = &xm[i * m..(i + 1) * m];
            for o in 0..self.c_out {
                let base = (i * self.c_out + o) * m;
                let yo = &mut y[o * m..(o + 1) * m];
                for k in 0..m {
                    yo[k] += xi[k] * Complex64::new(wre[base + k], wim[base + k]);
                }
            }
        }
        for o in 0..self.c_out {
            for k in 0..m {
                y[o * m + k] *= self.modes.column_weight(k);
            }
        }
        let mut out = vec![0.0; self.c_out * p];
        self.synthesise(&y, self.c_out, &mut out);
        (out, xm)
    }

    /// Vector-Jacobian product. Accumulates weight gradients into
    /// `gwre`/`gwim` and returns the input gradient.
    pub fn backward(
        &self,
        g: &[f64],
        xm: &[Complex64],
        wre: &[f64],
        wim: &[f64],
        gwre: &mut [f64],
        gwim: &mut [f64],
    ) -> Vec<f64> {
        let m = self.modes.len();
        let p = self.modes.h * self.modes.w;
        let mut gy = self.analyse(g, self.c_out);
        for o in 0..self.c_out {
            for k in 0..m {
                gy[o * m + k] *= self.modes.column_weight(k);
            }
        }
        let mut gx = vec![Complex64::new(0.0, 0.0); self.c_in * m];
        for i in 0..self.c_in {
            let xi = &xm[i * m..(i + 1) * m];
            for o in 0..self.c_out {
                let base = (i * self.c_out + o) * m;
                let go = &gy[o * m..(o + 1) * m];
                for k in 0..m {
                    let gw = go[k] * xi[k].conj();
                    gwre[base + k] += gw.re;
                    gwim[base + k] += gw.im;
                    gx[i * m + k] += go[k] * Complex64::new(wre[base + k], -wim[base + k]);
                }
            }
        }
        let mut out = vec![0.0; self.c_in * p];
        self.synthesise(&gx, self.c_in, &mut out);
        out
    }
}
