//! Visual prompting: outline one region and blur everything around it.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::geometry::{ImageDims, PixelBox};
use crate::imaging::{ImageError, ImagePayload};
use crate::scene::pixel_span;

fn default_color() -> [u8; 3] {
    [255, 0, 0]
}
fn default_width() -> u32 {
    3
}
fn default_sigma() -> f64 {
    10.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisualPromptSpec {
    #[serde(default = "default_color")]
    pub outline_color: [u8; 3],
    #[serde(default = "default_width")]
    pub outline_width: u32,
    #[serde(default = "default_sigma")]
    pub blur_sigma: f64,
}

impl Default for VisualPromptSpec {
    fn default() -> Self {
        Self {
            outline_color: default_color(),
            outline_width: default_width(),
            blur_sigma: default_sigma(),
        }
    }
}

impl VisualPromptSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.outline_width == 0 {
            return Err("outline_width must be >= 1".into());
        }
        if !(self.blur_sigma > 0.0) || !self.blur_sigma.is_finite() {
            return Err(format!("blur_sigma must be > 0, got {}", self.blur_sigma));
        }
        Ok(())
    }
}

/// Normalized Gaussian kernel truncated at 3 sigma.
fn kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k.into_iter().map(|v| v as f32).collect()
}

/// Convolves every row of an interleaved RGB buffer with `k`, clamping at the
/// row ends.
fn blur_rows(src: &[f32], w: usize, h: usize, k: &[f32]) -> Vec<f32> {
    let r = k.len() / 2;
    let mut out = vec![0f32; src.len()];
    let mut padded = vec![0f32; (w + 2 * r) * 3];
    for y in 0..h {
        let row = &src[y * w * 3..(y + 1) * w * 3];
        for (p, px) in padded.chunks_exact_mut(3).enumerate() {
            let sx = p.saturating_sub(r).min(w - 1);
            px.copy_from_slice(&row[sx * 3..sx * 3 + 3]);
        }
        let dst = &mut out[y * w * 3..(y + 1) * w * 3];
        for x in 0..w {
            let mut acc = [0f32; 3];
            let window = &padded[x * 3..(x + k.len()) * 3];
            for (kv, px) in k.iter().zip(window.chunks_exact(3)) {
                acc[0] += kv * px[0];
                acc[1] += kv * px[1];
                acc[2] += kv * px[2];
            }
            dst[x * 3..x * 3 + 3].copy_from_slice(&acc);
        }
    }
    out
}

fn transpose(src: &[f32], w: usize, h: usize) -> Vec<f32> {
    let mut out = vec![0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            let (s, d) = ((y * w + x) * 3, (x * h + y) * 3);
            out[d..d + 3].copy_from_slice(&src[s..s + 3]);
        }
    }
    out
}

/// Separable Gaussian blur with edge-clamp padding.
pub fn gaussian_blur(img: &RgbImage, sigma: f64) -> RgbImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return img.clone();
    }
    let k = kernel(sigma);
    let src: Vec<f32> = img.as_raw().iter().map(|&v| v as f32).collect();
    let horizontal = blur_rows(&src, w, h, &k);
    let vertical = transpose(&blur_rows(&transpose(&horizontal, w, h), h, w, &k), h, w);
    let raw: Vec<u8> = vertical.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    RgbImage::from_raw(img.width(), img.height(), raw).expect("buffer matches dimensions")
}

/// Blurs outside `bbox`, keeps its covered pixels verbatim, and draws an
/// outline band of `outline_width` pixels just outside it.
pub fn apply_visual_prompt(img: &RgbImage, bbox: &PixelBox, spec: &VisualPromptSpec) -> RgbImage {
    let dims = ImageDims::new(img.width(), img.height()).expect("non-empty image");
    let (x0, y0, x1, y1) = pixel_span(bbox, dims);
    let mut out = gaussian_blur(img, spec.blur_sigma);
    for y in y0..y1 {
        for x in x0..x1 {
            out.put_pixel(x, y, *img.get_pixel(x, y));
        }
    }
    let w = spec.outline_width;
    let (ox0, oy0) = (x0.saturating_sub(w), y0.saturating_sub(w));
    let (ox1, oy1) = ((x1 + w).min(dims.width()), (y1 + w).min(dims.height()));
    let color = Rgb(spec.outline_color);
    for y in oy0..oy1 {
        for x in ox0..ox1 {
            let inside = x >= x0 && x < x1 && y >= y0 && y < y1;
            if !inside {
                out.put_pixel(x, y, color);
            }
        }
    }
    out
}

/// Visual-prompt image for one candidate, re-encoded as PNG.
pub fn render_visual_prompt_image(
    image: &ImagePayload,
    bbox: &PixelBox,
    spec: &VisualPromptSpec,
) -> Result<ImagePayload, ImageError> {
    let rgb = image.decode_rgb()?;
    Ok(ImagePayload::from_rgb(&apply_visual_prompt(&rgb, bbox, spec)))
}
