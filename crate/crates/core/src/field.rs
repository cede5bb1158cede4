//! Multi-channel image fields on regular pixel grids.
//!
//! Fields are stored channel-major: channel `c`, row `i`, column `j` lives at
//! `c * height * width + i * width + j`.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FieldShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl FieldShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    /// Flat shape `(1, 1, n)` for plain vectors.
    pub const fn flat(n: usize) -> Self {
        Self::new(1, 1, n)
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub const fn index(&self, c: usize, i: usize, j: usize) -> usize {
        (c * self.height + i) * self.width + j
    }
}

impl std::fmt::Display for FieldShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    shape: FieldShape,
    data: Vec<f64>,
}

impl Field {
    pub fn zeros(shape: FieldShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: FieldShape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: FieldShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::dim(
                format!("field {shape}"),
                shape.len(),
                data.len(),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> FieldShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.shape.pixels();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let p = self.shape.pixels();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[self.shape.index(c, i, j)]
    }

    pub fn set(&mut self, c: usize, i: usize, j: usize, v: f64) {
        let k = self.shape.index(c, i, j);
        self.data[k] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        norm(&self.data)
    }
}

/// Regular square-pixel grid with physical spacing in millimetres.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelGrid {
    pub height: usize,
    pub width: usize,
    pub spacing_mm: f64,
}

impl PixelGrid {
    pub fn new(height: usize, width: usize, spacing_mm: f64) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Parameter("pixel grid must be non-empty".into()));
        }
        if !(spacing_mm > 0.0) {
            return Err(Error::Parameter(format!(
                "pixel spacing must be positive, got {spacing_mm}"
            )));
        }
        Ok(Self {
            height,
            width,
            spacing_mm,
        })
    }

    /// Square `n`x`n` grid covering a square of side `extent_mm`.
    pub fn square(n: usize, extent_mm: f64) -> Result<Self> {
        Self::new(n, n, extent_mm / n as f64)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Centre of pixel `(i, j)` as `(x, y)` in millimetres, with `x` along
    /// columns and `y` along rows.
    pub fn center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            (j as f64 + 0.5) * self.spacing_mm,
            (i as f64 + 0.5) * self.spacing_mm,
        )
    }

    pub fn extent_x(&self) -> f64 {
        self.width as f64 * self.spacing_mm
    }

    pub fn extent_y(&self) -> f64 {
        self.height as f64 * self.spacing_mm
    }

    pub fn shape(&self, channels: usize) -> FieldShape {
        FieldShape::new(channels, self.height, self.width)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn scaled(alpha: f64, x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| alpha * v).collect()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}
