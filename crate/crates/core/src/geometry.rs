//! Box algebra shared by every stage of the grounding pipeline.
//!
//! Two coordinate conventions live here. [`PixelBox`] is the detector-native
//! form: corner coordinates in pixels with the origin at the top-left corner
//! and `y` growing downward. [`NormalizedBox`] is the form shown to language
//! models: `(center_x, center_y, width, height)` as fractions of the image
//! size with the origin at the *bottom-left* corner, every field rounded to
//! three decimals. The y-axis flip happens only in [`normalize`] and
//! [`denormalize`].

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default minimum area, as a fraction of the image, for a candidate to survive.
pub const DEFAULT_MIN_AREA_FRACTION: f64 = 0.025;
/// Default IoU above which the smaller of two boxes is suppressed.
pub const DEFAULT_NMS_IOU: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid box [{0}, {1}, {2}, {3}]: need 0 <= min < max on both axes")]
    InvalidBox(f64, f64, f64, f64),
    #[error("image dimensions must be positive, got {width}x{height}")]
    InvalidDims { width: u32, height: u32 },
    #[error("box {bbox} exceeds image bounds {width}x{height}")]
    OutOfBounds {
        bbox: PixelBox,
        width: u32,
        height: u32,
    },
    #[error("normalized value {0} outside [0, 1]")]
    InvalidNormalized(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawDims")]
pub struct ImageDims {
    width: u32,
    height: u32,
}

#[derive(Deserialize)]
struct RawDims {
    width: u32,
    height: u32,
}

impl TryFrom<RawDims> for ImageDims {
    type Error = GeometryError;

    fn try_from(raw: RawDims) -> Result<Self, Self::Error> {
        ImageDims::new(raw.width, raw.height)
    }
}

impl ImageDims {
    pub fn new(width: u32, height: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidDims { width, height });
        }
        Ok(Self { width, height })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn area(&self) -> f64 {
        f64::from(self.width) * f64::from(self.height)
    }

    /// The box covering the whole image.
    pub fn full_box(&self) -> PixelBox {
        PixelBox {
            x_min: 0.0,
            y_min: 0.0,
            x_max: f64::from(self.width),
            y_max: f64::from(self.height),
        }
    }

    pub fn contains(&self, b: &PixelBox) -> bool {
        b.x_max <= f64::from(self.width) && b.y_max <= f64::from(self.height)
    }
}

impl fmt::Display for ImageDims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// Axis-aligned box in pixel coordinates, top-left origin.
///
/// Serialized as `[x_min, y_min, x_max, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct PixelBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl PixelBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        let finite = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite());
        if !finite || x_min < 0.0 || y_min < 0.0 || x_min >= x_max || y_min >= y_max {
            return Err(GeometryError::InvalidBox(x_min, y_min, x_max, y_max));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Clamps raw detector coordinates into `dims`. Returns `None` when the
    /// clamped box is degenerate.
    pub fn clamped(
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
        dims: ImageDims,
    ) -> Option<Self> {
        let w = f64::from(dims.width);
        let h = f64::from(dims.height);
        let c = |v: f64, hi: f64| if v.is_nan() { 0.0 } else { v.clamp(0.0, hi) };
        Self::new(c(x_min, w), c(y_min, h), c(x_max, w), c(y_max, h)).ok()
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

impl TryFrom<[f64; 4]> for PixelBox {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        PixelBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<PixelBox> for [f64; 4] {
    fn from(b: PixelBox) -> Self {
        b.to_array()
    }
}

impl fmt::Display for PixelBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}, {}, {}, {}]",
            self.x_min, self.y_min, self.x_max, self.y_max
        )
    }
}

/// Center-format box in image fractions with a bottom-left origin.
///
/// Fields are stored as integer thousandths so that every value carries
/// exactly three decimals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct NormalizedBox {
    center_x: u16,
    center_y: u16,
    width: u16,
    height: u16,
}

impl NormalizedBox {
    /// Builds a box from fractional values, rounding each half-up to three
    /// decimals. Width and height are floored at `0.001`.
    pub fn from_fractions(
        center_x: f64,
        center_y: f64,
        width: f64,
        height: f64,
    ) -> Result<Self, GeometryError> {
        for v in [center_x, center_y, width, height] {
            if !(0.0..=1.0).contains(&v) {
                return Err(GeometryError::InvalidNormalized(v));
            }
        }
        Ok(Self {
            center_x: round_milli(center_x),
            center_y: round_milli(center_y),
            width: round_milli(width).max(1),
            height: round_milli(height).max(1),
        })
    }

    pub fn center_x(&self) -> f64 {
        f64::from(self.center_x) / 1000.0
    }
    pub fn center_y(&self) -> f64 {
        f64::from(self.center_y) / 1000.0
    }
    pub fn width(&self) -> f64 {
        f64::from(self.width) / 1000.0
    }
    pub fn height(&self) -> f64 {
        f64::from(self.height) / 1000.0
    }

    /// `[center_x, center_y, width, height]` in thousandths.
    pub fn millis(&self) -> [u16; 4] {
        [self.center_x, self.center_y, self.width, self.height]
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.center_x(), self.center_y(), self.width(), self.height()]
    }

    /// Comma-separated fields with three decimals each, e.g. `0.200, 0.800, 0.200, 0.200`.
    pub fn fields_text(&self) -> String {
        let [a, b, c, d] = self.millis();
        format!(
            "{}, {}, {}, {}",
            fixed3(a),
            fixed3(b),
            fixed3(c),
            fixed3(d)
        )
    }
}

impl TryFrom<[f64; 4]> for NormalizedBox {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        NormalizedBox::from_fractions(v[0], v[1], v[2], v[3])
    }
}

impl From<NormalizedBox> for [f64; 4] {
    fn from(b: NormalizedBox) -> Self {
        b.to_array()
    }
}

impl fmt::Display for NormalizedBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}]", self.fields_text())
    }
}

/// Formats thousandths as a fixed-point decimal with three places.
fn fixed3(milli: u16) -> String {
    format!("{}.{:03}", milli / 1000, milli % 1000)
}

/// Formats a fraction with exactly three decimals, rounding half-up.
pub fn format_fixed3(v: f64) -> String {
    let milli = (v.abs() * 1000.0 + 0.5 + ROUND_EPS).floor() as u64;
    let sign = if v < 0.0 && milli > 0 { "-" } else { "" };
    format!("{sign}{}.{:03}", milli / 1000, milli % 1000)
}

// Absorbs representation error so that values like 0.2345 (stored as
// 0.23449999...) round up as their decimal form says they should.
const ROUND_EPS: f64 = 1e-9;

fn round_milli(v: f64) -> u16 {
    ((v * 1000.0 + 0.5 + ROUND_EPS).floor()).clamp(0.0, 1000.0) as u16
}

/// Intersection over union. Zero for disjoint boxes.
pub fn iou(a: &PixelBox, b: &PixelBox) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).min(1.0)
}

/// Box area as a fraction of the image area.
pub fn area_fraction(b: &PixelBox, dims: ImageDims) -> Result<f64, GeometryError> {
    if !dims.contains(b) {
        return Err(GeometryError::OutOfBounds {
            bbox: *b,
            width: dims.width,
            height: dims.height,
        });
    }
    Ok(b.area() / dims.area())
}

/// Keeps boxes whose area fraction is at least `min_fraction`, preserving order.
pub fn filter_by_area(boxes: &[PixelBox], dims: ImageDims, min_fraction: f64) -> Vec<PixelBox> {
    filter_by_area_with(boxes, dims, min_fraction, |b| b)
}

/// [`filter_by_area`] over any item carrying a box.
pub fn filter_by_area_with<T: Clone>(
    items: &[T],
    dims: ImageDims,
    min_fraction: f64,
    key: impl Fn(&T) -> &PixelBox,
) -> Vec<T> {
    let image_area = dims.area();
    items
        .iter()
        .filter(|it| key(it).area() / image_area >= min_fraction)
        .cloned()
        .collect()
}

/// Stable sort by area, largest first.
pub fn sort_by_area_desc(boxes: &[PixelBox]) -> Vec<PixelBox> {
    let mut out = boxes.to_vec();
    out.sort_by(|a, b| cmp_area_desc(a, b));
    out
}

fn cmp_area_desc(a: &PixelBox, b: &PixelBox) -> Ordering {
    b.area().partial_cmp(&a.area()).unwrap_or(Ordering::Equal)
}

/// Greedy non-maximum suppression with box area as the priority.
///
/// Boxes are visited largest first (ties in input order); a box is dropped
/// when its IoU with an already kept box exceeds `iou_threshold`. The result
/// is ordered by descending area.
pub fn nms(boxes: &[PixelBox], iou_threshold: f64) -> Vec<PixelBox> {
    nms_with(boxes, iou_threshold, |b| b)
}

/// [`nms`] over any item carrying a box.
pub fn nms_with<T: Clone>(
    items: &[T],
    iou_threshold: f64,
    key: impl Fn(&T) -> &PixelBox,
) -> Vec<T> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&i, &j| cmp_area_desc(key(&items[i]), key(&items[j])));

    let mut suppressed = vec![false; items.len()];
    let mut kept = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[pos] {
            continue;
        }
        kept.push(items[i].clone());
        let bi = key(&items[i]);
        for (later, &j) in order.iter().enumerate().skip(pos + 1) {
            if !suppressed[later] && iou(bi, key(&items[j])) > iou_threshold {
                suppressed[later] = true;
            }
        }
    }
    kept
}

/// Pixel box to the bottom-left-origin center format.
pub fn normalize(b: &PixelBox, dims: ImageDims) -> NormalizedBox {
    let w = f64::from(dims.width);
    let h = f64::from(dims.height);
    let cx = ((b.x_min + b.x_max) / 2.0 / w).clamp(0.0, 1.0);
    let cy = ((h - (b.y_min + b.y_max) / 2.0) / h).clamp(0.0, 1.0);
    let bw = (b.width() / w).clamp(0.0, 1.0);
    let bh = (b.height() / h).clamp(0.0, 1.0);
    NormalizedBox {
        center_x: round_milli(cx),
        center_y: round_milli(cy),
        width: round_milli(bw).max(1),
        height: round_milli(bh).max(1),
    }
}

/// Inverse of [`normalize`] up to rounding. The result is clamped to the image.
pub fn denormalize(n: &NormalizedBox, dims: ImageDims) -> PixelBox {
    let w = f64::from(dims.width);
    let h = f64::from(dims.height);
    let cx = n.center_x() * w;
    let cy_top = (1.0 - n.center_y()) * h;
    let half_w = n.width() * w / 2.0;
    let half_h = n.height() * h / 2.0;
    PixelBox {
        x_min: (cx - half_w).clamp(0.0, w),
        y_min: (cy_top - half_h).clamp(0.0, h),
        x_max: (cx + half_w).clamp(0.0, w),
        y_max: (cy_top + half_h).clamp(0.0, h),
    }
}
