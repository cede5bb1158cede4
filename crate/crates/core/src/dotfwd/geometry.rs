//! Optical fields, boundary patches and the preset instrument layouts.
//!
//! Positions on the boundary are given by a perimeter coordinate `s` in
//! millimetres that runs counter-clockwise from the corner `(0, 0)`: along
//! the bottom edge, up the right edge, back along the top edge and down the
//! left edge, so `s ∈ [0, 4L)` for a square of side `L`.

use std::f64::consts::PI;

use crate::error::{check_len, Error, Result};
use crate::field::PixelGrid;

/// Speed of light in vacuum, mm/s.
pub const SPEED_OF_LIGHT_MM_S: f64 = 2.998e11;
/// Refractive index used for the in-medium speed of light.
pub const REFRACTIVE_INDEX: f64 = 1.4;
/// Dimension constant of the 2D boundary condition.
pub const ZETA_2D: f64 = 1.0 / PI;

/// Absorption and reduced scattering maps on a square grid, both in mm⁻¹.
#[derive(Clone, Debug, PartialEq)]
pub struct OpticalField {
    pub grid: PixelGrid,
    pub mua: Vec<f64>,
    pub mus: Vec<f64>,
}

impl OpticalField {
    pub fn new(grid: PixelGrid, mua: Vec<f64>, mus: Vec<f64>) -> Result<Self> {
        if grid.height != grid.width {
            return Err(Error::Parameter(format!(
                "optical grid must be square, got {}x{}",
                grid.height, grid.width
            )));
        }
        check_len("absorption map", grid.pixels(), mua.len())?;
        check_len("scattering map", grid.pixels(), mus.len())?;
        if let Some(v) = mua
            .iter()
            .chain(&mus)
            .find(|v| !(**v > 0.0) || !v.is_finite())
        {
            return Err(Error::Parameter(format!(
                "optical coefficients must be positive and finite, found {v}"
            )));
        }
        Ok(Self { grid, mua, mus })
    }

    pub fn homogeneous(grid: PixelGrid, mua: f64, mus: f64) -> Result<Self> {
        let n = grid.pixels();
        Self::new(grid, vec![mua; n], vec![mus; n])
    }

    pub fn n(&self) -> usize {
        self.grid.width
    }

    pub fn extent(&self) -> f64 {
        self.grid.extent_x()
    }

    /// Diffusion coefficient `1 / (2(μa + μs'))` per pixel.
    pub fn kappa(&self) -> Vec<f64> {
        self.mua
            .iter()
            .zip(&self.mus)
            .map(|(a, s)| 1.0 / (2.0 * (a + s)))
            .collect()
    }

    /// Copy with `mua += da`, `mus += ds` pixelwise.
    pub fn perturbed(&self, da: &[f64], ds: &[f64]) -> Result<Self> {
        check_len("absorption perturbation", self.mua.len(), da.len())?;
        check_len("scattering perturbation", self.mus.len(), ds.len())?;
        Self::new(
            self.grid,
            self.mua.iter().zip(da).map(|(a, d)| a + d).collect(),
            self.mus.iter().zip(ds).map(|(a, d)| a + d).collect(),
        )
    }
}

/// A boundary patch centred at perimeter coordinate `center` (mm).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Patch {
    pub center: f64,
    pub width: f64,
    /// Source strength `q`; ignored for detectors.
    pub strength: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Edge {
    Bottom,
    Right,
    Top,
    Left,
}

impl Patch {
    pub fn new(center: f64, width: f64) -> Self {
        Self {
            center,
            width,
            strength: 1.0,
        }
    }

    /// Edge holding the patch centre on a square of side `extent`.
    pub fn edge(&self, extent: f64) -> Edge {
        let s = self.center.rem_euclid(4.0 * extent);
        match (s / extent) as usize {
            0 => Edge::Bottom,
            1 => Edge::Right,
            2 => Edge::Top,
            _ => Edge::Left,
        }
    }
}

/// Maps a perimeter coordinate to `(x, y)` on a square of side `extent`.
pub fn perimeter_point(s: f64, extent: f64) -> (f64, f64) {
    let l = extent;
    let s = s.rem_euclid(4.0 * l);
    if s < l {
        (s, 0.0)
    } else if s < 2.0 * l {
        (l, s - l)
    } else if s < 3.0 * l {
        (3.0 * l - s, l)
    } else {
        (0.0, 4.0 * l - s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instrument {
    pub sources: Vec<Patch>,
    pub detectors: Vec<Patch>,
    /// Angular modulation frequency, rad/s.
    pub omega: f64,
    /// Speed of light in the medium, mm/s.
    pub c: f64,
    pub zeta: f64,
    pub alpha_bc: f64,
}

impl Instrument {
    /// Alternating source/detector patches, `pairs` of each, evenly spaced
    /// over a fraction `arc` of the perimeter starting at the middle of the
    /// bottom edge.
    pub fn interleaved(
        extent: f64,
        pairs: usize,
        arc: f64,
        source_width: f64,
        detector_width: f64,
        frequency_hz: f64,
    ) -> Self {
        let perimeter = 4.0 * extent;
        let slots = 2 * pairs;
        let at = |k: usize| extent / 2.0 + arc * perimeter * k as f64 / slots as f64;
        Self {
            sources: (0..pairs)
                .map(|k| Patch::new(at(2 * k), source_width))
                .collect(),
            detectors: (0..pairs)
                .map(|k| Patch::new(at(2 * k + 1), detector_width))
                .collect(),
            omega: 2.0 * PI * frequency_hz,
            c: SPEED_OF_LIGHT_MM_S / REFRACTIVE_INDEX,
            zeta: ZETA_2D,
            alpha_bc: 1.0,
        }
    }

    pub fn n_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn n_detectors(&self) -> usize {
        self.detectors.len()
    }

    /// Length of the stacked data vector.
    pub fn data_len(&self) -> usize {
        2 * self.sources.len() * self.detectors.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() || self.detectors.is_empty() {
            return Err(Error::Parameter(
                "instrument needs at least one source and one detector".into(),
            ));
        }
        if !(self.omega >= 0.0) || !(self.c > 0.0) || !(self.zeta > 0.0) || !(self.alpha_bc > 0.0) {
            return Err(Error::Parameter(format!(
                "invalid instrument constants: omega {}, c {}, zeta {}, alpha {}",
                self.omega, self.c, self.zeta, self.alpha_bc
            )));
        }
        if let Some(p) = self
            .sources
            .iter()
            .chain(&self.detectors)
            .find(|p| !(p.width > 0.0) || !p.center.is_finite())
        {
            return Err(Error::Parameter(format!("invalid boundary patch {p:?}")));
        }
        Ok(())
    }
}

/// Preset measurement setups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Geometry {
    /// 20 sources and 20 detectors around the whole boundary.
    FullView,
    /// 10 sources and 10 detectors over half the boundary.
    LimitedView,
    /// 16 wide sources and 16 narrow detectors, two-region background.
    Experimental,
}

impl Geometry {
    pub fn name(self) -> &'static str {
        match self {
            Geometry::FullView => "full-view",
            Geometry::LimitedView => "limited-view",
            Geometry::Experimental => "experimental",
        }
    }

    /// Side length of the square domain, mm.
    pub fn extent(self) -> f64 {
        match self {
            Geometry::FullView | Geometry::LimitedView => 50.0,
            Geometry::Experimental => 80.0,
        }
    }

    pub fn instrument(self) -> Instrument {
        let l = self.extent();
        match self {
            Geometry::FullView => Instrument::interleaved(l, 20, 1.0, 1.0, 1.0, 100e6),
            Geometry::LimitedView => Instrument::interleaved(l, 10, 0.5, 1.0, 1.0, 100e6),
            Geometry::Experimental => Instrument::interleaved(l, 16, 1.0, 8.0, 0.6, 56.98e6),
        }
    }

    /// Background optical properties on an `n`x`n` grid.
    pub fn background(self, n: usize) -> Result<OpticalField> {
        let grid = PixelGrid::square(n, self.extent())?;
        match self {
            Geometry::FullView | Geometry::LimitedView => {
                OpticalField::homogeneous(grid, 0.01, 1.0)
            }
            Geometry::Experimental => {
                let c = self.extent() / 2.0;
                let mut mua = Vec::with_capacity(grid.pixels());
                let mut mus = Vec::with_capacity(grid.pixels());
                for i in 0..n {
                    for j in 0..n {
                        let (x, y) = grid.center(i, j);
                        let inner = (x - c).hypot(y - c) <= 30.0;
                        mua.push(if inner { 0.0065 } else { 0.01 });
                        mus.push(if inner { 0.95 } else { 0.8 });
                    }
                }
                OpticalField::new(grid, mua, mus)
            }
        }
    }
}

impl std::str::FromStr for Geometry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full-view" => Ok(Geometry::FullView),
            "limited-view" => Ok(Geometry::LimitedView),
            "experimental" => Ok(Geometry::Experimental),
            other => Err(Error::Usage(format!(
                "unknown geometry {other:?} (expected full-view, limited-view or experimental)"
            ))),
        }
    }
}

/// One outer face of a boundary cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct BoundaryFace {
    pub cell: usize,
    /// Perimeter coordinate where the face starts; it spans `[start, start + h]`.
    pub start: f64,
}

/// All `4N` boundary faces of an `N`x`N` grid with spacing `h`.
pub(crate) fn boundary_faces(n: usize, h: f64) -> Vec<BoundaryFace> {
    let l = n as f64 * h;
    let mut faces = Vec::with_capacity(4 * n);
    for j in 0..n {
        faces.push(BoundaryFace {
            cell: j,
            start: j as f64 * h,
        });
    }
    for i in 0..n {
        faces.push(BoundaryFace {
            cell: i * n + n - 1,
            start: l + i as f64 * h,
        });
    }
    for j in 0..n {
        faces.push(BoundaryFace {
            cell: (n - 1) * n + j,
            start: 3.0 * l - (j + 1) as f64 * h,
        });
    }
    for i in 0..n {
        faces.push(BoundaryFace {
            cell: i * n,
            start: 4.0 * l - (i + 1) as f64 * h,
        });
    }
    faces
}

/// `(face index, overlap length)` for every face the patch touches.
pub(crate) fn patch_overlaps(
    patch: &Patch,
    faces: &[BoundaryFace],
    h: f64,
    extent: f64,
) -> Vec<(usize, f64)> {
    let perimeter = 4.0 * extent;
    let lo = patch.center - patch.width / 2.0;
    let hi = patch.center + patch.width / 2.0;
    let mut out = Vec::new();
    for (k, f) in faces.iter().enumerate() {
        let mut len = 0.0;
        for shift in [-perimeter, 0.0, perimeter] {
            let a = (f.start + shift).max(lo);
            let b = (f.start + shift + h).min(hi);
            if b > a {
                len += b - a;
            }
        }
        if len > 0.0 {
            out.push((k, len));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn faces_tile_the_perimeter() {
        let faces = boundary_faces(4, 0.5);
        let mut starts: Vec<f64> = faces.iter().map(|f| f.start).collect();
        starts.sort_by(f64::total_cmp);
        for (k, s) in starts.iter().enumerate() {
            assert!((s - 0.5 * k as f64).abs() < 1e-12);
        }
        // corner cells appear twice
        let corner = faces.iter().filter(|f| f.cell == 0).count();
        assert_eq!(corner, 2);
    }

    #[test]
    fn face_positions_match_cells() {
        let n = 5;
        let h = 2.0;
        let grid = PixelGrid::square(n, n as f64 * h).unwrap();
        for f in boundary_faces(n, h) {
            let (x, y) = perimeter_point(f.start + h / 2.0, grid.extent_x());
            let (cx, cy) = grid.center(f.cell / n, f.cell % n);
            assert!((x - cx).abs() <= h / 2.0 + 1e-12 && (y - cy).abs() <= h / 2.0 + 1e-12);
        }
    }

    #[test]
    fn overlaps_sum_to_width() {
        let faces = boundary_faces(8, 1.0);
        for c in [0.2, 3.7, 15.9, 31.95] {
            let p = Patch::new(c, 0.6);
            let total: f64 = patch_overlaps(&p, &faces, 1.0, 8.0)
                .iter()
                .map(|o| o.1)
                .sum();
            assert!((total - 0.6).abs() < 1e-12, "centre {c}: {total}");
        }
    }

    #[test]
    fn presets() {
        let f = Geometry::FullView.instrument();
        assert_eq!(
            (f.n_sources(), f.n_detectors(), f.data_len()),
            (20, 20, 800)
        );
        let l = Geometry::LimitedView.instrument();
        assert_eq!((l.n_sources(), l.n_detectors()), (10, 10));
        // limited view stays on half the perimeter
        let last = l.detectors.last().unwrap().center;
        assert!(last - l.sources[0].center < 100.0);
        let e = Geometry::Experimental.instrument();
        assert_eq!((e.sources[0].width, e.detectors[0].width), (8.0, 0.6));
        assert!((f.omega - 2.0 * PI * 1e8).abs() < 1e-3);
        let bg = Geometry::Experimental.background(32).unwrap();
        assert_eq!(bg.mua[16 * 32 + 16], 0.0065);
        assert_eq!(bg.mua[0], 0.01);
        assert_eq!(Patch::new(60.0, 1.0).edge(50.0), Edge::Right);
    }

    #[test]
    fn rejects_nonpositive_coefficients() {
        let g = PixelGrid::square(2, 2.0).unwrap();
        assert!(OpticalField::new(g, vec![0.01, 0.0, 0.01, 0.01], vec![1.0; 4]).is_err());
        assert!(OpticalField::homogeneous(g, 0.01, 1.0).is_ok());
    }
}
