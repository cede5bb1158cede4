//! Matrix-free linear forward maps `x ↦ Ax` with adjoints.
//!
//! Operators act on channel-major [`Field`]s and produce flat data vectors.
//! Concrete operators are immutable once built, so they can be shared freely
//! between sampling chains.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, Error, Result};
use crate::field::{Field, FieldShape};

pub trait LinearOperator: Send + Sync {
    fn domain(&self) -> FieldShape;

    fn codomain_dim(&self) -> usize;

    /// Writes `A x` into `out`. Lengths are the caller's responsibility.
    fn apply_into(&self, x: &[f64], out: &mut [f64]);

    /// Writes `A* y` into `out`. Lengths are the caller's responsibility.
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]);

    fn apply(&self, x: &Field) -> Result<Vec<f64>> {
        if x.shape() != self.domain() {
            return Err(Error::dim(
                format!(
                    "operator domain {} (got field {})",
                    self.domain(),
                    x.shape()
                ),
                self.domain().len(),
                x.len(),
            ));
        }
        self.apply_slice(x.as_slice())
    }

    fn apply_slice(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("operator input", self.domain().len(), x.len())?;
        let mut out = vec![0.0; self.codomain_dim()];
        self.apply_into(x, &mut out);
        Ok(out)
    }

    fn apply_adjoint(&self, y: &[f64]) -> Result<Field> {
        check_len("operator adjoint input", self.codomain_dim(), y.len())?;
        let mut out = vec![0.0; self.domain().len()];
        self.adjoint_into(y, &mut out);
        Field::from_vec(self.domain(), out)
    }

    /// Materialises the operator as an `m x n` matrix by applying it to the
    /// standard basis.
    fn to_dense(&self) -> DMatrix<f64> {
        let n = self.domain().len();
        let m = self.codomain_dim();
        let mut mat = DMatrix::zeros(m, n);
        let mut e = vec![0.0; n];
        let mut col = vec![0.0; m];
        for j in 0..n {
            e[j] = 1.0;
            self.apply_into(&e, &mut col);
            mat.column_mut(j).copy_from_slice(&col);
            e[j] = 0.0;
        }
        mat
    }
}

impl<T: LinearOperator + ?Sized> LinearOperator for Arc<T> {
    fn domain(&self) -> FieldShape {
        (**self).domain()
    }
    fn codomain_dim(&self) -> usize {
        (**self).codomain_dim()
    }
    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        (**self).apply_into(x, out)
    }
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        (**self).adjoint_into(y, out)
    }
    fn to_dense(&self) -> DMatrix<f64> {
        (**self).to_dense()
    }
}

#[derive(Clone, Debug)]
pub struct IdentityOperator {
    shape: FieldShape,
}

impl IdentityOperator {
    pub fn new(shape: FieldShape) -> Self {
        Self { shape }
    }
}

impl LinearOperator for IdentityOperator {
    fn domain(&self) -> FieldShape {
        self.shape
    }
    fn codomain_dim(&self) -> usize {
        self.shape.len()
    }
    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(x);
    }
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        out.copy_from_slice(y);
    }
}

#[derive(Clone, Debug)]
pub struct ZeroOperator {
    shape: FieldShape,
    codomain: usize,
}

impl ZeroOperator {
    pub fn new(shape: FieldShape, codomain: usize) -> Self {
        Self { shape, codomain }
    }
}

impl LinearOperator for ZeroOperator {
    fn domain(&self) -> FieldShape {
        self.shape
    }
    fn codomain_dim(&self) -> usize {
        self.codomain
    }
    fn apply_into(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn adjoint_into(&self, _y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// Dense `m x n` matrix acting on fields of a fixed shape.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrixOperator {
    matrix: DMatrix<f64>,
    domain: FieldShape,
}

impl DenseMatrixOperator {
    pub fn new(matrix: DMatrix<f64>, domain: FieldShape) -> Result<Self> {
        check_len("dense operator columns", domain.len(), matrix.ncols())?;
        Ok(Self { matrix, domain })
    }

    /// Matrix on flat vectors of length `n`.
    pub fn from_matrix(matrix: DMatrix<f64>) -> Self {
        let domain = FieldShape::flat(matrix.ncols());
        Self { matrix, domain }
    }

    pub fn from_row_major(m: usize, n: usize, entries: &[f64]) -> Result<Self> {
        check_len("row-major entries", m * n, entries.len())?;
        Ok(Self::from_matrix(DMatrix::from_row_slice(m, n, entries)))
    }

    pub fn from_operator(op: &dyn LinearOperator) -> Self {
        Self {
            matrix: op.to_dense(),
            domain: op.domain(),
        }
    }

    pub fn with_domain(self, domain: FieldShape) -> Result<Self> {
        Self::new(self.matrix, domain)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }
}

impl LinearOperator for DenseMatrixOperator {
    fn domain(&self) -> FieldShape {
        self.domain
    }
    fn codomain_dim(&self) -> usize {
        self.matrix.nrows()
    }
    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        let xv = DVector::from_column_slice(x);
        let mut ov = DVector::zeros(self.matrix.nrows());
        ov.gemv(1.0, &self.matrix, &xv, 0.0);
        out.copy_from_slice(ov.as_slice());
    }
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        let yv = DVector::from_column_slice(y);
        let mut ov = DVector::zeros(self.matrix.ncols());
        ov.gemv_tr(1.0, &self.matrix, &yv, 0.0);
        out.copy_from_slice(ov.as_slice());
    }
    fn to_dense(&self) -> DMatrix<f64> {
        self.matrix.clone()
    }
}

/// `alpha * A`.
#[derive(Clone)]
pub struct ScaledOperator {
    alpha: f64,
    inner: Arc<dyn LinearOperator>,
}

impl ScaledOperator {
    pub fn new(alpha: f64, inner: Arc<dyn LinearOperator>) -> Self {
        Self { alpha, inner }
    }
}

impl LinearOperator for ScaledOperator {
    fn domain(&self) -> FieldShape {
        self.inner.domain()
    }
    fn codomain_dim(&self) -> usize {
        self.inner.codomain_dim()
    }
    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        self.inner.apply_into(x, out);
        out.iter_mut().for_each(|v| *v *= self.alpha);
    }
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        self.inner.adjoint_into(y, out);
        out.iter_mut().for_each(|v| *v *= self.alpha);
    }
}

/// `A ∘ B`: applies `second` after `first`.
#[derive(Clone)]
pub struct ComposedOperator {
    first: Arc<dyn LinearOperator>,
    second: Arc<dyn LinearOperator>,
}

impl ComposedOperator {
    pub fn new(first: Arc<dyn LinearOperator>, second: Arc<dyn LinearOperator>) -> Result<Self> {
        check_len(
            "composition inner dimension",
            second.domain().len(),
            first.codomain_dim(),
        )?;
        Ok(Self { first, second })
    }
}

impl LinearOperator for ComposedOperator {
    fn domain(&self) -> FieldShape {
        self.first.domain()
    }
    fn codomain_dim(&self) -> usize {
        self.second.codomain_dim()
    }
    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        let mut mid = vec![0.0; self.first.codomain_dim()];
        self.first.apply_into(x, &mut mid);
        self.second.apply_into(&mid, out);
    }
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        let mut mid = vec![0.0; self.first.codomain_dim()];
        self.second.adjoint_into(y, &mut mid);
        self.first.adjoint_into(&mid, out);
    }
}

/// Horizontal block operator `[a₁B₁, a₂B₂, ...]` where block `k` acts on a
/// contiguous channel group of the input field.
#[derive(Clone)]
pub struct ChannelBlockOperator {
    blocks: Vec<(f64, Arc<dyn LinearOperator>)>,
    domain: FieldShape,
    codomain: usize,
}

impl ChannelBlockOperator {
    pub fn new(blocks: Vec<(f64, Arc<dyn LinearOperator>)>) -> Result<Self> {
        let first = blocks
            .first()
            .ok_or_else(|| Error::Parameter("block operator needs at least one block".into()))?;
        let (h, w) = (first.1.domain().height, first.1.domain().width);
        let codomain = first.1.codomain_dim();
        let mut channels = 0;
        for (_, b) in &blocks {
            check_len("block codomain", codomain, b.codomain_dim())?;
            let d = b.domain();
            if d.height != h || d.width != w {
                return Err(Error::dim("block spatial size", h * w, d.pixels()));
            }
            channels += d.channels;
        }
        Ok(Self {
            blocks,
            domain: FieldShape::new(channels, h, w),
            codomain,
        })
    }
}

impl LinearOperator for ChannelBlockOperator {
    fn domain(&self) -> FieldShape {
        self.domain
    }
    fn codomain_dim(&self) -> usize {
        self.codomain
    }
    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let mut tmp = vec![0.0; self.codomain];
        let mut offset = 0;
        for (alpha, b) in &self.blocks {
            let n = b.domain().len();
            b.apply_into(&x[offset..offset + n], &mut tmp);
            for (o, t) in out.iter_mut().zip(&tmp) {
                *o += alpha * t;
            }
            offset += n;
        }
    }
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        let mut offset = 0;
        for (alpha, b) in &self.blocks {
            let n = b.domain().len();
            let part = &mut out[offset..offset + n];
            b.adjoint_into(y, part);
            part.iter_mut().for_each(|v| *v *= alpha);
            offset += n;
        }
    }
}

/// Rescaling of absorption and scattering perturbations onto `[0, 1]`:
/// `x_a = (δμ_a + 0.01) / 0.02`, `x_s = (δμ_s' + 1) / 2`.
pub const ABSORPTION_SCALE: f64 = 0.02;
pub const ABSORPTION_SHIFT: f64 = 0.01;
pub const SCATTERING_SCALE: f64 = 2.0;
pub const SCATTERING_SHIFT: f64 = 1.0;

/// Forward map on the rescaled two-channel field together with the constant
/// data offset produced by the affine rescaling.
///
/// For physical perturbations `δμ = scale * x - shift`, the linearised data
/// change is `J δμ = A x + offset`, so difference data must be shifted by
/// `-offset` before it is paired with `A`.
#[derive(Clone)]
pub struct RescaledJacobian {
    pub operator: ChannelBlockOperator,
    pub offset: Vec<f64>,
}

impl RescaledJacobian {
    /// Converts physical difference data `δY` into data for the rescaled model.
    pub fn shift_data(&self, delta_y: &[f64]) -> Result<Vec<f64>> {
        check_len("difference data", self.offset.len(), delta_y.len())?;
        Ok(delta_y
            .iter()
            .zip(&self.offset)
            .map(|(d, o)| d - o)
            .collect())
    }
}

/// Builds `A = (0.02·J_μa, 2·J_μs')` acting on `x = (x_a, x_s)`.
pub fn rescale_jacobian(
    j_mua: Arc<dyn LinearOperator>,
    j_mus: Arc<dyn LinearOperator>,
) -> Result<RescaledJacobian> {
    if j_mua.codomain_dim() != j_mus.codomain_dim() {
        return Err(Error::dim(
            "jacobian blocks codomain",
            j_mua.codomain_dim(),
            j_mus.codomain_dim(),
        ));
    }
    let ones_a = vec![1.0; j_mua.domain().len()];
    let ones_s = vec![1.0; j_mus.domain().len()];
    let mut offset = j_mua.apply_slice(&ones_a)?;
    let shift_s = j_mus.apply_slice(&ones_s)?;
    for (o, s) in offset.iter_mut().zip(&shift_s) {
        *o = -(ABSORPTION_SHIFT * *o + SCATTERING_SHIFT * s);
    }
    let operator =
        ChannelBlockOperator::new(vec![(ABSORPTION_SCALE, j_mua), (SCATTERING_SCALE, j_mus)])?;
    Ok(RescaledJacobian { operator, offset })
}

/// Largest violation of `⟨Ax, y⟩ = ⟨x, A*y⟩` over `trials` random pairs,
/// normalised by `‖Ax‖‖y‖ + ‖x‖‖A*y‖`.
pub fn adjoint_mismatch<R: rand::Rng + ?Sized>(
    op: &dyn LinearOperator,
    trials: usize,
    rng: &mut R,
) -> f64 {
    use crate::field::{dot, norm};
    let n = op.domain().len();
    let m = op.codomain_dim();
    let mut worst: f64 = 0.0;
    let mut ax = vec![0.0; m];
    let mut aty = vec![0.0; n];
    for _ in 0..trials {
        let x = crate::rng::standard_normal_vec(rng, n);
        let y = crate::rng::standard_normal_vec(rng, m);
        op.apply_into(&x, &mut ax);
        op.adjoint_into(&y, &mut aty);
        let lhs = dot(&ax, &y);
        let rhs = dot(&x, &aty);
        let scale = norm(&ax) * norm(&y) + norm(&x) * norm(&aty);
        if scale > 0.0 {
            worst = worst.max((lhs - rhs).abs() / scale);
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// SPMAT1 binary matrix files
// ---------------------------------------------------------------------------

pub const MATRIX_MAGIC: &[u8; 7] = b"SPMAT1\0";

/// Serialises `mat` as `SPMAT1\0`, `m: u64`, `n: u64`, then `m·n` doubles in
/// row-major order, all little-endian.
pub fn encode_matrix(mat: &DMatrix<f64>) -> Vec<u8> {
    let (m, n) = mat.shape();
    let mut buf = Vec::with_capacity(7 + 16 + 8 * m * n);
    buf.extend_from_slice(MATRIX_MAGIC);
    buf.extend_from_slice(&(m as u64).to_le_bytes());
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    for i in 0..m {
        for j in 0..n {
            buf.extend_from_slice(&mat[(i, j)].to_le_bytes());
        }
    }
    buf
}

pub fn decode_matrix(mut bytes: &[u8]) -> Result<DMatrix<f64>> {
    read_matrix_from(&mut bytes)
}

pub fn read_matrix_from<R: Read>(r: &mut R) -> Result<DMatrix<f64>> {
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("matrix file too short".into()))?;
    if &magic != MATRIX_MAGIC {
        return Err(Error::Format("bad matrix magic".into()));
    }
    let m = read_u64(r)? as usize;
    let n = read_u64(r)? as usize;
    let count = m
        .checked_mul(n)
        .ok_or_else(|| Error::Format("matrix dimensions overflow".into()))?;
    let mut raw = vec![0u8; count * 8];
    r.read_exact(&mut raw)
        .map_err(|_| Error::Format(format!("matrix payload shorter than {m}x{n}")))?;
    let entries: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(DMatrix::from_row_slice(m, n, &entries))
}

pub fn write_matrix_file(path: &Path, mat: &DMatrix<f64>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&encode_matrix(mat))?;
    f.flush()?;
    Ok(())
}

pub fn read_matrix_file(path: &Path) -> Result<DMatrix<f64>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_matrix_from(&mut f)
}

/// Reads a raw data vector: consecutive little-endian doubles, no header.
pub fn read_data_vector_file(path: &Path) -> Result<Vec<f64>> {
    let raw = std::fs::read(path)?;
    if raw.len() % 8 != 0 {
        return Err(Error::Format(format!(
            "data vector file length {} is not a multiple of 8",
            raw.len()
        )));
    }
    Ok(raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn write_data_vector_file(path: &Path, data: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 8);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("truncated header".into()))?;
    Ok(u64::from_le_bytes(b))
}
