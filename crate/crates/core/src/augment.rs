//! Fixed, exhaustive augmentation family: axis flips, ±k pixel shifts and
//! rotations in regular angular steps.
//!
//! Every member is deterministic. Flips, shifts and quarter-turn rotations
//! are pure index permutations; other angles use bilinear inverse mapping
//! with zero fill.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("rotation requested on non-square {rows}x{cols} image")]
    NonSquareRotation { rows: usize, cols: usize },
    #[error("invalid augmentation spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    pub flips: bool,
    pub shifts: bool,
    pub rotations: bool,
    pub shift_magnitude: usize,
    pub rotation_step: u32,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            flips: true,
            shifts: true,
            rotations: true,
            shift_magnitude: 4,
            rotation_step: 6,
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if self.shift_magnitude == 0 {
            return Err(AugmentError::InvalidSpec(
                "shift magnitude must be >= 1".into(),
            ));
        }
        if self.rotation_step == 0 || 360 % self.rotation_step != 0 {
            return Err(AugmentError::InvalidSpec(format!(
                "rotation step {} must divide 360",
                self.rotation_step
            )));
        }
        Ok(())
    }

    /// Number of images `augment_image` returns per input, original included.
    pub fn multiplicity(&self) -> usize {
        let mut n = 1;
        if self.flips {
            n += 3;
        }
        if self.shifts {
            n += 8;
        }
        if self.rotations {
            n += (360 / self.rotation_step) as usize - 1;
        }
        n
    }
}

/// Mirror across the horizontal axis (rows reversed).
pub fn flip_x(img: ArrayView2<f32>) -> Array2<f32> {
    let mut v = img.to_owned();
    v.invert_axis(Axis(0));
    v.as_standard_layout().into_owned()
}

/// Mirror across the vertical axis (columns reversed).
pub fn flip_y(img: ArrayView2<f32>) -> Array2<f32> {
    let mut v = img.to_owned();
    v.invert_axis(Axis(1));
    v.as_standard_layout().into_owned()
}

pub fn flip_both(img: ArrayView2<f32>) -> Array2<f32> {
    let mut v = img.to_owned();
    v.invert_axis(Axis(0));
    v.invert_axis(Axis(1));
    v.as_standard_layout().into_owned()
}

/// Translate the sampling window by `(dx, dy)`: `out[r][c] = img[r+dy][c+dx]`,
/// zero where that falls outside. Content therefore moves by `(-dx, -dy)`.
pub fn shift(img: ArrayView2<f32>, dx: i64, dy: i64) -> Array2<f32> {
    let (rows, cols) = img.dim();
    Array2::from_shape_fn((rows, cols), |(r, c)| {
        let sr = r as i64 + dy;
        let sc = c as i64 + dx;
        if sr >= 0 && sc >= 0 && (sr as usize) < rows && (sc as usize) < cols {
            img[[sr as usize, sc as usize]]
        } else {
            0.0
        }
    })
}

/// Counter-clockwise rotation about the image centre.
///
/// Multiples of 90° are exact index permutations. Other angles inverse-map
/// each output pixel into the source and interpolate bilinearly; samples
/// outside the source grid read as zero.
pub fn rotate(img: ArrayView2<f32>, degrees: f64) -> Result<Array2<f32>, AugmentError> {
    let (rows, cols) = img.dim();
    if rows != cols {
        return Err(AugmentError::NonSquareRotation { rows, cols });
    }
    let n = rows;
    let turns = degrees / 90.0;
    if (turns - turns.round()).abs() < 1e-12 {
        let quarter = (turns.round() as i64).rem_euclid(4);
        return Ok(match quarter {
            0 => img.to_owned(),
            1 => Array2::from_shape_fn((n, n), |(i, j)| img[[j, n - 1 - i]]),
            2 => Array2::from_shape_fn((n, n), |(i, j)| img[[n - 1 - i, n - 1 - j]]),
            _ => Array2::from_shape_fn((n, n), |(i, j)| img[[n - 1 - j, i]]),
        });
    }
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let center = (n as f64 - 1.0) / 2.0;
    let max = (n - 1) as f64;
    const EDGE: f64 = 1e-9;
    Ok(Array2::from_shape_fn((n, n), |(i, j)| {
        let x = j as f64 - center;
        let y = i as f64 - center;
        let sx = cos * x - sin * y + center;
        let sy = sin * x + cos * y + center;
        if sx < -EDGE || sy < -EDGE || sx > max + EDGE || sy > max + EDGE {
            return 0.0;
        }
        let sx = sx.clamp(0.0, max);
        let sy = sy.clamp(0.0, max);
        let c0 = (sx.floor() as usize).min(n - 1);
        let r0 = (sy.floor() as usize).min(n - 1);
        let c1 = (c0 + 1).min(n - 1);
        let r1 = (r0 + 1).min(n - 1);
        let fx = sx - c0 as f64;
        let fy = sy - r0 as f64;
        let top = f64::from(img[[r0, c0]]) * (1.0 - fx) + f64::from(img[[r0, c1]]) * fx;
        let bottom = f64::from(img[[r1, c0]]) * (1.0 - fx) + f64::from(img[[r1, c1]]) * fx;
        (top * (1.0 - fy) + bottom * fy) as f32
    }))
}

/// The shift offsets used by the family: every non-zero point of
/// `{-k, 0, k}²` in row-major order.
pub fn shift_offsets(magnitude: usize) -> Vec<(i64, i64)> {
    let k = magnitude as i64;
    let mut out = Vec::with_capacity(8);
    for dx in [-k, 0, k] {
        for dy in [-k, 0, k] {
            if (dx, dy) != (0, 0) {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Rotation angles used by the family, 0° and 360° excluded.
pub fn rotation_angles(step: u32) -> Vec<u32> {
    (1..360 / step).map(|k| k * step).collect()
}

/// `[original] ++ flips ++ shifts ++ rotations`, in that fixed order.
pub fn augment_image(
    img: ArrayView2<f32>,
    spec: &AugmentSpec,
) -> Result<Vec<Array2<f32>>, AugmentError> {
    spec.validate()?;
    let (rows, cols) = img.dim();
    if spec.rotations && rows != cols {
        return Err(AugmentError::NonSquareRotation { rows, cols });
    }
    let mut out = Vec::with_capacity(spec.multiplicity());
    out.push(img.to_owned());
    if spec.flips {
        out.push(flip_x(img));
        out.push(flip_y(img));
        out.push(flip_both(img));
    }
    if spec.shifts {
        for (dx, dy) in shift_offsets(spec.shift_magnitude) {
            out.push(shift(img, dx, dy));
        }
    }
    if spec.rotations {
        for angle in rotation_angles(spec.rotation_step) {
            out.push(rotate(img, f64::from(angle))?);
        }
    }
    Ok(out)
}
