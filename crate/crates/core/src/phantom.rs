//! Random inclusion phantoms and fixed out-of-distribution targets.
//!
//! Each channel independently receives one to three disks with centres
//! uniform over the square, radii `U(0, 10)` mm and contrasts `U(0, 1)`.
//! Where disks overlap the later one wins.

use std::io::Read;
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{Field, FieldShape, PixelGrid};
use crate::rng::{stream_rng, Rng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhantomSpec {
    pub grid: PixelGrid,
    pub channels: usize,
    /// Inclusive range of inclusion counts per channel.
    pub inclusions: (usize, usize),
    pub radius_mm: (f64, f64),
    pub contrast: (f64, f64),
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            grid: PixelGrid::square(32, 50.0).expect("valid default grid"),
            channels: 2,
            inclusions: (1, 3),
            radius_mm: (0.0, 10.0),
            contrast: (0.0, 1.0),
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn shape(&self) -> FieldShape {
        self.grid.shape(self.channels)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.channels > 0
            && self.inclusions.0 <= self.inclusions.1
            && 0.0 <= self.radius_mm.0
            && self.radius_mm.0 < self.radius_mm.1
            && 0.0 <= self.contrast.0
            && self.contrast.0 <= self.contrast.1
            && self.contrast.1 <= 1.0
            && self.grid.extent_x() > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(format!("invalid phantom spec {self:?}")))
        }
    }
}

/// A disk in millimetre coordinates, `x` along columns and `y` along rows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Disk {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub contrast: f64,
}

impl Disk {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        (x - self.cx).powi(2) + (y - self.cy).powi(2) <= self.radius * self.radius
    }
}

fn uniform(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Draws the disks of every channel.
pub fn draw_inclusions(spec: &PhantomSpec, rng: &mut Rng) -> Vec<Vec<Disk>> {
    let (w, h) = (spec.grid.extent_x(), spec.grid.extent_y());
    (0..spec.channels)
        .map(|_| {
            let count = rng.random_range(spec.inclusions.0..=spec.inclusions.1);
            (0..count)
                .map(|_| Disk {
                    cx: uniform(rng, (0.0, w)),
                    cy: uniform(rng, (0.0, h)),
                    radius: uniform(rng, spec.radius_mm),
                    contrast: uniform(rng, spec.contrast),
                })
                .collect()
        })
        .collect()
}

/// Paints disks in order onto a zero background.
pub fn render(grid: &PixelGrid, layout: &[Vec<Disk>]) -> Field {
    let mut f = Field::zeros(grid.shape(layout.len()));
    for (c, disks) in layout.iter().enumerate() {
        for d in disks {
            paint(&mut f, grid, c, |x, y| d.contains(x, y), d.contrast);
        }
    }
    f
}

fn paint(
    f: &mut Field,
    grid: &PixelGrid,
    channel: usize,
    inside: impl Fn(f64, f64) -> bool,
    v: f64,
) {
    for i in 0..grid.height {
        for j in 0..grid.width {
            let (x, y) = grid.center(i, j);
            if inside(x, y) {
                f.set(channel, i, j, v);
            }
        }
    }
}

pub fn generate_phantom(spec: &PhantomSpec, rng: &mut Rng) -> Field {
    render(&spec.grid, &draw_inclusions(spec, rng))
}

/// `n` phantoms; phantom `k` uses stream `k` of the spec seed.
pub fn generate_dataset(spec: &PhantomSpec, n: usize) -> Result<Vec<Field>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Parameter("dataset size must be at least 1".into()));
    }
    Ok((0..n)
        .into_par_iter()
        .map(|k| generate_phantom(spec, &mut stream_rng(spec.seed, k as u64)))
        .collect())
}

pub const DATASET_MAGIC: &[u8; 7] = b"DOTDAT1";
pub const DATASET_VERSION: u8 = 1;

/// `DOTDAT1`, version byte, `u32` count, channels, height, width, then the
/// fields as `f64`, all little-endian.
pub fn encode_dataset(fields: &[Field]) -> Result<Vec<u8>> {
    let shape = fields
        .first()
        .map(|f| f.shape())
        .ok_or_else(|| Error::Parameter("cannot encode an empty dataset".into()))?;
    let mut buf = Vec::with_capacity(24 + fields.len() * shape.len() * 8);
    buf.extend_from_slice(DATASET_MAGIC);
    buf.push(DATASET_VERSION);
    for v in [fields.len(), shape.channels, shape.height, shape.width] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for f in fields {
        if f.shape() != shape {
            return Err(Error::dim("dataset field", shape.len(), f.len()));
        }
        for v in f.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<Field>> {
    let mut r = bytes;
    let short = |_| Error::Format("dataset file truncated".into());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(short)?;
    if &magic[..7] != DATASET_MAGIC {
        return Err(Error::Format("bad dataset magic".into()));
    }
    if magic[7] != DATASET_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {}",
            magic[7]
        )));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(short)?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let shape = FieldShape::new(dims[1], dims[2], dims[3]);
    if r.len() != dims[0] * shape.len() * 8 {
        return Err(Error::Format(format!(
            "dataset payload is {} bytes, expected {}",
            r.len(),
            dims[0] * shape.len() * 8
        )));
    }
    let values: Vec<f64> = r
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    values
        .chunks(shape.len().max(1))
        .take(dims[0])
        .map(|c| Field::from_vec(shape, c.to_vec()))
        .collect()
}

pub fn write_dataset(path: &Path, fields: &[Field]) -> Result<()> {
    std::fs::write(path, encode_dataset(fields)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Field>> {
    decode_dataset(&std::fs::read(path)?)
}

/// Contrast of the out-of-distribution inclusions.
pub const OOD_CONTRAST: f64 = 0.5;

/// Axis-aligned ellipse mask.
pub fn ellipse_mask(grid: &PixelGrid, center: (f64, f64), semi_axes: (f64, f64)) -> Vec<bool> {
    mask(grid, |x, y| {
        ((x - center.0) / semi_axes.0).powi(2) + ((y - center.1) / semi_axes.1).powi(2) <= 1.0
    })
}

/// Triangle mask; the result does not depend on the vertex order.
pub fn triangle_mask(grid: &PixelGrid, v: [(f64, f64); 3]) -> Vec<bool> {
    let cross = |a: (f64, f64), b: (f64, f64), p: (f64, f64)| {
        (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
    };
    mask(grid, |x, y| {
        let p = (x, y);
        let s = [
            cross(v[0], v[1], p),
            cross(v[1], v[2], p),
            cross(v[2], v[0], p),
        ];
        s.iter().all(|c| *c >= 0.0) || s.iter().all(|c| *c <= 0.0)
    })
}

fn mask(grid: &PixelGrid, inside: impl Fn(f64, f64) -> bool) -> Vec<bool> {
    let mut m = Vec::with_capacity(grid.pixels());
    for i in 0..grid.height {
        for j in 0..grid.width {
            let (x, y) = grid.center(i, j);
            m.push(inside(x, y));
        }
    }
    m
}

/// Fixed test targets on the default 50 mm square, scaled to `grid`.
///
/// - `ellipse`: semi-axes 12 x 6 mm centred at (18, 30) mm in absorption
///   and 6 x 12 mm centred at (32, 20) mm in scattering.
/// - `triangle`: vertices (12, 12), (36, 14), (22, 36) mm in absorption and
///   (30, 10), (42, 38), (16, 30) mm in scattering.
///
/// Coordinates scale with the grid extent so any square grid can be used.
pub fn ood_phantoms(grid: &PixelGrid) -> Vec<(&'static str, Field)> {
    let k = grid.extent_x() / 50.0;
    let s = |p: (f64, f64)| (p.0 * k, p.1 * k);
    let to_field = |masks: [Vec<bool>; 2]| {
        let mut f = Field::zeros(grid.shape(2));
        for (c, m) in masks.iter().enumerate() {
            for (v, inside) in f.channel_mut(c).iter_mut().zip(m) {
                if *inside {
                    *v = OOD_CONTRAST;
                }
            }
        }
        f
    };
    let ellipse = to_field([
        ellipse_mask(grid, s((18.0, 30.0)), s((12.0, 6.0))),
        ellipse_mask(grid, s((32.0, 20.0)), s((6.0, 12.0))),
    ]);
    let triangle = to_field([
        triangle_mask(grid, [s((12.0, 12.0)), s((36.0, 14.0)), s((22.0, 36.0))]),
        triangle_mask(grid, [s((30.0, 10.0)), s((42.0, 38.0)), s((16.0, 30.0))]),
    ]);
    vec![("ellipse", ellipse), ("triangle", triangle)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::master_rng;
    use std::f64::consts::PI;

    #[test]
    fn zero_contrast_gives_zero_field() {
        let spec = PhantomSpec {
            contrast: (0.0, 0.0),
            ..Default::default()
        };
        let f = generate_phantom(&spec, &mut master_rng(3));
        assert!(f.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn centred_disk_area() {
        let grid = PixelGrid::square(32, 50.0).unwrap();
        let d = Disk {
            cx: 25.0,
            cy: 25.0,
            radius: 10.0,
            contrast: 1.0,
        };
        let f = render(&grid, &[vec![d]]);
        let count = f.as_slice().iter().filter(|v| **v > 0.0).count() as f64;
        let expect = PI * (10.0 / grid.spacing_mm).powi(2);
        assert!((count / expect - 1.0).abs() < 0.1, "{count} vs {expect}");
    }

    #[test]
    fn later_disks_overwrite() {
        let grid = PixelGrid::square(4, 4.0).unwrap();
        let big = Disk {
            cx: 2.0,
            cy: 2.0,
            radius: 5.0,
            contrast: 0.2,
        };
        let small = Disk {
            cx: 0.5,
            cy: 0.5,
            radius: 0.1,
            contrast: 0.9,
        };
        let f = render(&grid, &[vec![big, small]]);
        assert_eq!(f.get(0, 0, 0), 0.9);
        assert_eq!(f.get(0, 3, 3), 0.2);
    }

    #[test]
    fn monte_carlo_law() {
        let spec = PhantomSpec::default();
        let mut rng = master_rng(11);
        let n = 10_000;
        let mut total = 0usize;
        let (mut sx, mut sy, mut sxx, mut syy, mut sxy, mut cnt) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let layout = draw_inclusions(&spec, &mut rng);
            total += layout.iter().map(Vec::len).sum::<usize>();
            let f = render(&spec.grid, &layout);
            assert!(f.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
            for (a, b) in f.channel(0).iter().zip(f.channel(1)) {
                sx += a;
                sy += b;
                sxx += a * a;
                syy += b * b;
                sxy += a * b;
                cnt += 1.0;
            }
        }
        let mean_count = total as f64 / (2 * n) as f64;
        assert!((mean_count - 2.0).abs() <= 0.05, "{mean_count}");
        let cov = sxy / cnt - sx / cnt * sy / cnt;
        let corr =
            cov / ((sxx / cnt - (sx / cnt).powi(2)) * (syy / cnt - (sy / cnt).powi(2))).sqrt();
        assert!(corr.abs() <= 0.05, "{corr}");
    }

    #[test]
    fn dataset_round_trip_and_determinism() {
        let spec = PhantomSpec {
            seed: 5,
            ..Default::default()
        };
        let one = generate_dataset(&spec, 1).unwrap();
        assert_eq!(decode_dataset(&encode_dataset(&one).unwrap()).unwrap(), one);
        let a = encode_dataset(&generate_dataset(&spec, 6).unwrap()).unwrap();
        let b = encode_dataset(&generate_dataset(&spec, 6).unwrap()).unwrap();
        assert_eq!(a, b);
        assert!(decode_dataset(&a[..a.len() - 3]).is_err());
        assert!(generate_dataset(&spec, 0).is_err());
    }

    #[test]
    fn ellipse_area_and_eccentricity() {
        let grid = PixelGrid::square(64, 50.0).unwrap();
        let m = ellipse_mask(&grid, (25.0, 25.0), (12.0, 6.0));
        let count = m.iter().filter(|v| **v).count() as f64;
        let expect = PI * 12.0 * 6.0 / grid.spacing_mm.powi(2);
        assert!((count / expect - 1.0).abs() < 0.1);
        // wider than tall
        let row = |i: usize| (0..64).filter(|j| m[i * 64 + j]).count();
        let col = |j: usize| (0..64).filter(|i| m[i * 64 + j]).count();
        assert!(row(32) > col(32) + 10);
    }

    #[test]
    fn triangle_vertex_order_invariance() {
        let grid = PixelGrid::square(32, 50.0).unwrap();
        let v = [(12.0, 12.0), (36.0, 14.0), (22.0, 36.0)];
        let base = triangle_mask(&grid, v);
        for p in [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
            assert_eq!(triangle_mask(&grid, [v[p[0]], v[p[1]], v[p[2]]]), base);
        }
        assert!(base.iter().any(|b| *b));
    }

    #[test]
    fn ood_ranges() {
        let grid = PixelGrid::square(32, 50.0).unwrap();
        let set = ood_phantoms(&grid);
        assert_eq!(set.len(), 2);
        for (_, f) in &set {
            assert!(f.as_slice().iter().all(|v| *v == 0.0 || *v == OOD_CONTRAST));
            assert!(f.channel(0).iter().any(|v| *v > 0.0) && f.channel(1).iter().any(|v| *v > 0.0));
        }
    }
}
