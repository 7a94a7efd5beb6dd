//! Raster payloads exchanged with the multimodal roles.

use std::io::Cursor;
use std::path::Path;
use std::sync::Arc;

use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::sha256_hex;
use crate::geometry::ImageDims;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("cannot read image {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("unsupported image format (only png and jpeg are accepted)")]
    UnsupportedFormat,
    #[error("cannot decode image: {0}")]
    Decode(String),
    #[error("cannot encode image: {0}")]
    Encode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RasterFormat {
    Png,
    Jpeg,
}

impl RasterFormat {
    pub fn mime(&self) -> &'static str {
        match self {
            RasterFormat::Png => "image/png",
            RasterFormat::Jpeg => "image/jpeg",
        }
    }
}

/// Encoded image bytes plus their decoded dimensions.
#[derive(Debug, Clone)]
pub struct ImagePayload {
    bytes: Arc<Vec<u8>>,
    format: RasterFormat,
    dims: ImageDims,
    digest: String,
}

impl PartialEq for ImagePayload {
    fn eq(&self, other: &Self) -> bool {
        self.digest == other.digest
    }
}

impl ImagePayload {
    /// Validates that `bytes` decode as png or jpeg and records the dimensions.
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self, ImageError> {
        let format = match image::guess_format(&bytes) {
            Ok(ImageFormat::Png) => RasterFormat::Png,
            Ok(ImageFormat::Jpeg) => RasterFormat::Jpeg,
            _ => return Err(ImageError::UnsupportedFormat),
        };
        let reader = image::ImageReader::with_format(Cursor::new(&bytes), match format {
            RasterFormat::Png => ImageFormat::Png,
            RasterFormat::Jpeg => ImageFormat::Jpeg,
        });
        let (w, h) = reader
            .into_dimensions()
            .map_err(|e| ImageError::Decode(e.to_string()))?;
        let dims = ImageDims::new(w, h).map_err(|e| ImageError::Decode(e.to_string()))?;
        let digest = sha256_hex(&bytes);
        Ok(Self {
            bytes: Arc::new(bytes),
            format,
            dims,
            digest,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ImageError> {
        let bytes = std::fs::read(path).map_err(|source| ImageError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(bytes)
    }

    /// PNG-encodes an RGB raster.
    pub fn from_rgb(img: &RgbImage) -> Self {
        let bytes = encode_png(img).expect("png encoding into memory cannot fail");
        let dims = ImageDims::new(img.width(), img.height()).expect("non-empty raster");
        let digest = sha256_hex(&bytes);
        Self {
            bytes: Arc::new(bytes),
            format: RasterFormat::Png,
            dims,
            digest,
        }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn format(&self) -> RasterFormat {
        self.format
    }

    pub fn dims(&self) -> ImageDims {
        self.dims
    }

    /// SHA-256 of the encoded bytes, hex.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn decode_rgb(&self) -> Result<RgbImage, ImageError> {
        image::load_from_memory(&self.bytes)
            .map(|d| d.to_rgb8())
            .map_err(|e| ImageError::Decode(e.to_string()))
    }

    pub fn data_url(&self) -> String {
        use base64::Engine as _;
        format!(
            "data:{};base64,{}",
            self.format.mime(),
            base64::engine::general_purpose::STANDARD.encode(self.bytes.as_slice())
        )
    }
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>, ImageError> {
    let mut out = Vec::new();
    img.write_to(&mut Cursor::new(&mut out), ImageFormat::Png)
        .map_err(|e| ImageError::Encode(e.to_string()))?;
    Ok(out)
}

/// Digest of the decoded pixels; identical for any lossless re-encoding.
pub fn pixel_digest(img: &RgbImage) -> String {
    let mut buf = Vec::with_capacity(8 + img.as_raw().len());
    buf.extend_from_slice(&img.width().to_le_bytes());
    buf.extend_from_slice(&img.height().to_le_bytes());
    buf.extend_from_slice(img.as_raw());
    sha256_hex(&buf)
}

pub fn solid_image(width: u32, height: u32, rgb: [u8; 3]) -> RgbImage {
    RgbImage::from_pixel(width, height, image::Rgb(rgb))
}
