//! Hounsfield conversion, intensity windowing and the three spatial
//! regimes: raw, localized crop and negative-space reduction.

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dicom::DicomSlice;

pub const DEFAULT_WINDOW: (f64, f64) = (-1000.0, 400.0);
pub const DEFAULT_CROP: usize = 128;
pub const DEFAULT_CANVAS: (usize, usize) = (266, 340);
pub const DEFAULT_BODY_THRESHOLD: f32 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("crop size {size} exceeds image {rows}x{cols}")]
    SizeExceedsImage {
        size: usize,
        rows: usize,
        cols: usize,
    },
    #[error("no pixel exceeds the body threshold {threshold}")]
    EmptyForeground { threshold: f32 },
    #[error("invalid regime: {0}")]
    InvalidRegime(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RegimeKind {
    Raw,
    Localized,
    Negspace,
}

/// Window plus spatial treatment applied to every slice of a study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessRegime {
    pub kind: RegimeKind,
    pub window_low: f64,
    pub window_high: f64,
    /// Side of the square crop, LOCALIZED only.
    pub crop_size: usize,
    /// (rows, cols) of the output canvas, NEGSPACE only.
    pub canvas: (usize, usize),
    pub body_threshold: f32,
}

impl PreprocessRegime {
    pub fn new(kind: RegimeKind) -> Self {
        PreprocessRegime {
            kind,
            window_low: DEFAULT_WINDOW.0,
            window_high: DEFAULT_WINDOW.1,
            crop_size: DEFAULT_CROP,
            canvas: DEFAULT_CANVAS,
            body_threshold: DEFAULT_BODY_THRESHOLD,
        }
    }

    pub fn validate(&self) -> Result<(), PreprocessError> {
        let bad = |m: String| Err(PreprocessError::InvalidRegime(m));
        if !(self.window_low.is_finite() && self.window_high.is_finite())
            || self.window_low >= self.window_high
        {
            return bad(format!(
                "window [{}, {}] must satisfy low < high",
                self.window_low, self.window_high
            ));
        }
        if self.kind == RegimeKind::Localized && (self.crop_size < 8 || !self.crop_size.is_multiple_of(2)) {
            return bad(format!(
                "crop size {} must be even and >= 8",
                self.crop_size
            ));
        }
        if self.kind == RegimeKind::Negspace && (self.canvas.0 == 0 || self.canvas.1 == 0) {
            return bad(format!("canvas {:?} must be positive", self.canvas));
        }
        if !(0.0..1.0).contains(&self.body_threshold) {
            return bad(format!(
                "body threshold {} outside [0, 1)",
                self.body_threshold
            ));
        }
        Ok(())
    }

    /// Stable text identifying every parameter that affects the output.
    pub fn fingerprint(&self) -> String {
        match self.kind {
            RegimeKind::Raw => format!("RAW;w={},{}", self.window_low, self.window_high),
            RegimeKind::Localized => format!(
                "LOCALIZED;w={},{};crop={}",
                self.window_low, self.window_high, self.crop_size
            ),
            RegimeKind::Negspace => format!(
                "NEGSPACE;w={},{};canvas={}x{};t={}",
                self.window_low,
                self.window_high,
                self.canvas.0,
                self.canvas.1,
                self.body_threshold
            ),
        }
    }

    /// Window a slice into `[0, 1]`.
    pub fn window(&self, slice: &DicomSlice) -> Array2<f32> {
        normalize(&to_hu(slice), self.window_low, self.window_high)
    }

    /// Spatial stage applied before augmentation: the localized crop for
    /// LOCALIZED, identity otherwise.
    pub fn pre_augment(
        &self,
        windowed: Array2<f32>,
        center: (i64, i64),
    ) -> Result<Array2<f32>, PreprocessError> {
        match self.kind {
            RegimeKind::Localized => localize(windowed.view(), center.0, center.1, self.crop_size),
            RegimeKind::Raw | RegimeKind::Negspace => Ok(windowed),
        }
    }

    /// Spatial stage applied after augmentation: negative-space reduction
    /// for NEGSPACE, identity otherwise.
    pub fn post_augment(&self, img: Array2<f32>) -> Result<Array2<f32>, PreprocessError> {
        match self.kind {
            RegimeKind::Negspace => {
                reduce_negative_space(img.view(), self.body_threshold, self.canvas)
            }
            RegimeKind::Raw | RegimeKind::Localized => Ok(img),
        }
    }

    /// Full treatment of one slice without augmentation.
    pub fn apply(
        &self,
        slice: &DicomSlice,
        center: (i64, i64),
    ) -> Result<Array2<f32>, PreprocessError> {
        self.post_augment(self.pre_augment(self.window(slice), center)?)
    }
}

/// Rescaled pixel values in Hounsfield units.
#[derive(Debug, Clone, PartialEq)]
pub struct HuImage(pub Array2<f64>);

pub fn to_hu(slice: &DicomSlice) -> HuImage {
    let rescale = slice.rescale();
    let (rows, cols) = (usize::from(slice.rows()), usize::from(slice.cols()));
    let values: Vec<f64> = slice.stored_values().map(|v| rescale.apply(v)).collect();
    HuImage(Array2::from_shape_vec((rows, cols), values).expect("slice geometry is validated"))
}

/// Linear window to `[0, 1]` with clamping.
pub fn normalize(img: &HuImage, low: f64, high: f64) -> Array2<f32> {
    debug_assert!(low < high);
    let span = high - low;
    img.0.mapv(|hu| ((hu - low) / span).clamp(0.0, 1.0) as f32)
}

/// Top-left corner of the `size`-window centred on `center`, translated to
/// lie fully inside `[0, extent)`.
fn window_start(center: i64, size: usize, extent: usize) -> usize {
    let start = center - (size / 2) as i64;
    start.clamp(0, (extent - size) as i64) as usize
}

/// Copy the `size`×`size` window centred on `(center_x, center_y)`.
///
/// `center_x` is a column and `center_y` a row. A window that would cross
/// the border is shifted back inside, never padded.
pub fn localize(
    img: ArrayView2<f32>,
    center_x: i64,
    center_y: i64,
    size: usize,
) -> Result<Array2<f32>, PreprocessError> {
    let (rows, cols) = img.dim();
    if size == 0 || size > rows.min(cols) {
        return Err(PreprocessError::SizeExceedsImage { size, rows, cols });
    }
    let r0 = window_start(center_y, size, rows);
    let c0 = window_start(center_x, size, cols);
    Ok(img.slice(s![r0..r0 + size, c0..c0 + size]).to_owned())
}

/// Half-open pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub row_start: usize,
    pub col_start: usize,
    pub row_end: usize,
    pub col_end: usize,
}

impl BoundingBox {
    pub fn height(&self) -> usize {
        self.row_end - self.row_start
    }

    pub fn width(&self) -> usize {
        self.col_end - self.col_start
    }
}

/// Tight box around every pixel strictly above `threshold`.
pub fn foreground_bbox(img: ArrayView2<f32>, threshold: f32) -> Option<BoundingBox> {
    let mut bbox: Option<BoundingBox> = None;
    for ((r, c), &v) in img.indexed_iter() {
        if v > threshold {
            let b = bbox.get_or_insert(BoundingBox {
                row_start: r,
                col_start: c,
                row_end: r + 1,
                col_end: c + 1,
            });
            b.row_start = b.row_start.min(r);
            b.col_start = b.col_start.min(c);
            b.row_end = b.row_end.max(r + 1);
            b.col_end = b.col_end.max(c + 1);
        }
    }
    bbox
}

/// (source start, destination start, length) along one axis when fitting
/// `len` pixels into `target` by centred padding or centred cropping.
fn fit_axis(len: usize, target: usize) -> (usize, usize, usize) {
    if len <= target {
        (0, (target - len) / 2, len)
    } else {
        ((len - target) / 2, 0, target)
    }
}

/// Crop away the background around the body, then centre the result on a
/// fixed zero canvas so every output has shape `canvas`.
pub fn reduce_negative_space(
    img: ArrayView2<f32>,
    body_threshold: f32,
    canvas: (usize, usize),
) -> Result<Array2<f32>, PreprocessError> {
    let bbox = foreground_bbox(img, body_threshold).ok_or(PreprocessError::EmptyForeground {
        threshold: body_threshold,
    })?;
    let (src_r, dst_r, h) = fit_axis(bbox.height(), canvas.0);
    let (src_c, dst_c, w) = fit_axis(bbox.width(), canvas.1);
    let mut out = Array2::<f32>::zeros(canvas);
    let r0 = bbox.row_start + src_r;
    let c0 = bbox.col_start + src_c;
    out.slice_mut(s![dst_r..dst_r + h, dst_c..dst_c + w])
        .assign(&img.slice(s![r0..r0 + h, c0..c0 + w]));
    Ok(out)
}

/// Row-major feature vector.
pub fn flatten(img: ArrayView2<f32>) -> Vec<f32> {
    img.iter().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dicom::{PixelRepresentation, Rescale};
    use proptest::prelude::*;

    fn one_pixel(stored: u16, slope: f64, intercept: f64) -> DicomSlice {
        DicomSlice::new(
            "P",
            0,
            1,
            1,
            PixelRepresentation::Unsigned,
            Rescale::new(slope, intercept).unwrap(),
            vec![stored],
        )
        .unwrap()
    }

    #[test]
    fn hu_rescale() {
        assert_eq!(to_hu(&one_pixel(1024, 1.0, -1024.0)).0[[0, 0]], 0.0);
        assert_eq!(to_hu(&one_pixel(5, 2.0, 0.0)).0[[0, 0]], 10.0);
    }

    #[test]
    fn normalize_endpoints_and_clamp() {
        let img =
            HuImage(Array2::from_shape_vec((1, 4), vec![-1000.0, 400.0, -2000.0, 3000.0]).unwrap());
        let out = normalize(&img, -1000.0, 400.0);
        assert_eq!(out.as_slice().unwrap(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn localize_center_and_clamp() {
        let img = Array2::from_shape_fn((512, 512), |(r, c)| (r * 512 + c) as f32);
        let out = localize(img.view(), 256, 256, 128).unwrap();
        assert_eq!(out, img.slice(s![192..320, 192..320]));
        let out = localize(img.view(), 10, 10, 128).unwrap();
        assert_eq!(out, img.slice(s![0..128, 0..128]));
        let out = localize(img.view(), 510, -40, 128).unwrap();
        assert_eq!(out, img.slice(s![0..128, 384..512]));
        assert!(matches!(
            localize(img.view(), 0, 0, 513),
            Err(PreprocessError::SizeExceedsImage { .. })
        ));
    }

    #[test]
    fn bbox_of_block() {
        let mut img = Array2::<f32>::zeros((40, 40));
        img.slice_mut(s![10..20, 5..30]).fill(0.5);
        // Brute-force min/max scan.
        let (mut rmin, mut rmax, mut cmin, mut cmax) = (usize::MAX, 0, usize::MAX, 0);
        for r in 0..40 {
            for c in 0..40 {
                if img[[r, c]] > 0.05 {
                    rmin = rmin.min(r);
                    rmax = rmax.max(r);
                    cmin = cmin.min(c);
                    cmax = cmax.max(c);
                }
            }
        }
        let b = foreground_bbox(img.view(), 0.05).unwrap();
        assert_eq!(
            (b.row_start, b.col_start, b.row_end, b.col_end),
            (rmin, cmin, rmax + 1, cmax + 1)
        );
        assert_eq!(
            (b.row_start, b.col_start, b.row_end, b.col_end),
            (10, 5, 20, 30)
        );
    }

    #[test]
    fn negative_space_canvas_shape_and_empty() {
        let mut img = Array2::<f32>::zeros((512, 512));
        img.slice_mut(s![100..400, 50..480]).fill(0.3);
        let out = reduce_negative_space(img.view(), 0.05, DEFAULT_CANVAS).unwrap();
        assert_eq!(out.dim(), (266, 340));
        let empty = Array2::<f32>::zeros((64, 64));
        assert_eq!(
            reduce_negative_space(empty.view(), 0.05, DEFAULT_CANVAS),
            Err(PreprocessError::EmptyForeground { threshold: 0.05 })
        );
    }

    #[test]
    fn negative_space_keeps_foreground_that_fits() {
        let mut img = Array2::<f32>::zeros((100, 100));
        img[[20, 30]] = 0.9;
        img[[60, 70]] = 0.4;
        img[[40, 35]] = 0.2;
        let out = reduce_negative_space(img.view(), 0.05, (50, 50)).unwrap();
        let kept: f32 = out.iter().sum();
        assert!((kept - 1.5).abs() < 1e-6);
    }

    #[test]
    fn flatten_row_major() {
        let img = Array2::from_shape_vec((2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(flatten(img.view()), vec![1.0, 2.0, 3.0, 4.0]);
        let back = Array2::from_shape_vec((2, 2), flatten(img.view())).unwrap();
        assert_eq!(back, img);
        assert_eq!(
            flatten(Array2::<f32>::zeros(DEFAULT_CANVAS).view()).len(),
            90440
        );
    }

    #[test]
    fn regime_validation() {
        let mut r = PreprocessRegime::new(RegimeKind::Localized);
        assert!(r.validate().is_ok());
        r.crop_size = 7;
        assert!(r.validate().is_err());
        let mut r = PreprocessRegime::new(RegimeKind::Raw);
        r.window_low = 500.0;
        assert!(r.validate().is_err());
    }

    proptest! {
        #[test]
        fn to_hu_is_affine(a in proptest::collection::vec(0u16..4096, 16),
                           b in proptest::collection::vec(0u16..4096, 16),
                           slope in 0.25f64..4.0, intercept in -2048.0f64..2048.0) {
            let mk = |px: Vec<u16>| DicomSlice::new("P", 0, 4, 4, PixelRepresentation::Unsigned,
                Rescale::new(slope, intercept).unwrap(), px).unwrap();
            let sum: Vec<u16> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let ha = to_hu(&mk(a)).0;
            let hb = to_hu(&mk(b)).0;
            let hs = to_hu(&mk(sum)).0;
            // hu(a + b) = hu(a) + hu(b) - intercept
            for i in 0..4 { for j in 0..4 {
                let lhs = hs[[i, j]];
                let rhs = ha[[i, j]] + hb[[i, j]] - intercept;
                prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
            }}
        }

        #[test]
        fn normalize_monotone(h1 in -3000.0f64..3000.0, h2 in -3000.0f64..3000.0) {
            let (lo, hi) = if h1 <= h2 { (h1, h2) } else { (h2, h1) };
            let img = HuImage(Array2::from_shape_vec((1, 2), vec![lo, hi]).unwrap());
            let out = normalize(&img, -1000.0, 400.0);
            prop_assert!(out[[0, 0]] <= out[[0, 1]]);
            prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn localize_matches_index_oracle(rows in 8usize..80, cols in 8usize..80,
                                         cx in -20i64..100, cy in -20i64..100, half in 1usize..40) {
            let size = (2 * half).min(rows.min(cols));
            let img = Array2::from_shape_fn((rows, cols), |(r, c)| (r * 1000 + c) as f32);
            let out = localize(img.view(), cx, cy, size).unwrap();
            prop_assert_eq!(out.dim(), (size, size));
            // Independent oracle: explicit min/max clamp on each axis.
            let r0 = (cy - (size / 2) as i64).max(0).min((rows - size) as i64) as usize;
            let c0 = (cx - (size / 2) as i64).max(0).min((cols - size) as i64) as usize;
            for i in 0..size { for j in 0..size {
                prop_assert_eq!(out[[i, j]], ((r0 + i) * 1000 + c0 + j) as f32);
            }}
        }
    }
}
