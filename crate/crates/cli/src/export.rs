//! Image and table export for ensemble statistics.
//!
//! Both formats are written with the top row holding the largest `y`, so a
//! CSV opened in a spreadsheet and the PGM shown in a viewer agree.

use std::fmt::Write as _;

use ucos_core::operator::{ABSORPTION_SCALE, ABSORPTION_SHIFT, SCATTERING_SCALE, SCATTERING_SHIFT};
use ucos_core::Field;

pub const CHANNEL_NAMES: [&str; 2] = ["absorption", "scattering"];

/// How a statistic transforms under the affine map back to physical units.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quantity {
    /// Transforms like the field itself (`scale * x - shift`).
    Value,
    /// Transforms like a difference or spread (`scale * x`).
    Spread,
}

/// Maps a rescaled two-channel field back to `δμa` and `δμs'` in mm⁻¹.
pub fn to_physical(field: &Field, quantity: Quantity) -> Field {
    let mut out = field.clone();
    let affine = [
        (ABSORPTION_SCALE, ABSORPTION_SHIFT),
        (SCATTERING_SCALE, SCATTERING_SHIFT),
    ];
    for (c, (scale, shift)) in affine.iter().enumerate().take(field.shape().channels) {
        let shift = if quantity == Quantity::Value {
            *shift
        } else {
            0.0
        };
        for v in out.channel_mut(c) {
            *v = scale * *v - shift;
        }
    }
    out
}

fn rows_top_down(field: &Field, c: usize) -> impl Iterator<Item = Vec<f64>> + '_ {
    let shape = field.shape();
    (0..shape.height)
        .rev()
        .map(move |i| (0..shape.width).map(|j| field.get(c, i, j)).collect())
}

/// Comma-separated values of one channel, preceded by `#` comment lines.
pub fn csv(field: &Field, c: usize, comments: &[String]) -> String {
    let mut s = String::new();
    for line in comments {
        writeln!(s, "# {line}").unwrap();
    }
    for row in rows_top_down(field, c) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        writeln!(s, "{}", cells.join(",")).unwrap();
    }
    s
}

/// Binary 16-bit graymap of one channel, linearly mapping `[min, max]` onto
/// `[0, 65535]`. The range is recorded in a comment.
pub fn pgm16(field: &Field, c: usize, comments: &[String]) -> Vec<u8> {
    let shape = field.shape();
    let values = field.channel(c);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut header = String::from("P5\n");
    for line in comments {
        writeln!(header, "# {line}").unwrap();
    }
    writeln!(header, "# range {lo:e} {hi:e}").unwrap();
    write!(header, "{} {}\n65535\n", shape.width, shape.height).unwrap();
    let mut out = header.into_bytes();
    for row in rows_top_down(field, c) {
        for v in row {
            let level = if span > 0.0 {
                ((v - lo) / span * 65535.0).round().clamp(0.0, 65535.0) as u16
            } else {
                0
            };
            out.extend_from_slice(&level.to_be_bytes());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ucos_core::FieldShape;

    fn ramp() -> Field {
        let shape = FieldShape::new(2, 2, 3);
        Field::from_vec(shape, (0..12).map(|k| k as f64 / 11.0).collect()).unwrap()
    }

    #[test]
    fn csv_puts_last_row_first() {
        let s = csv(&ramp(), 0, &["digest abc".into()]);
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "# digest abc");
        let first: Vec<f64> = lines[1].split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(first, vec![3.0 / 11.0, 4.0 / 11.0, 5.0 / 11.0]);
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn pgm_spans_full_range() {
        let bytes = pgm16(&ramp(), 1, &[]);
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.starts_with("P5\n# range"));
        let pixels = &bytes[bytes.len() - 12..];
        let levels: Vec<u16> = pixels
            .chunks(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]))
            .collect();
        assert_eq!(levels[2], 65535);
        assert_eq!(levels[3], 0);
    }

    #[test]
    fn constant_image_maps_to_zero() {
        let f = Field::filled(FieldShape::new(1, 2, 2), 0.3);
        let bytes = pgm16(&f, 0, &[]);
        assert!(bytes[bytes.len() - 8..].iter().all(|b| *b == 0));
    }

    #[test]
    fn physical_units() {
        let f = Field::filled(FieldShape::new(2, 1, 1), 1.0);
        let v = to_physical(&f, Quantity::Value);
        assert!((v.as_slice()[0] - 0.01).abs() < 1e-15);
        assert!((v.as_slice()[1] - 1.0).abs() < 1e-15);
        let s = to_physical(&f, Quantity::Spread);
        assert!((s.as_slice()[0] - 0.02).abs() < 1e-15);
        assert!((s.as_slice()[1] - 2.0).abs() < 1e-15);
    }
}
