//! Crop-and-resample zoom used to simulate a change in table height.

use std::io::Cursor;

use image::imageops::FilterType;
use image::{ImageFormat, ImageReader};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::protocol::ImagePayload;

#[derive(Debug, Error)]
pub enum ZoomError {
    #[error("crop rectangle {0:?} is not inside the unit square")]
    BadRect(CropRect),
    #[error("cannot decode image: {0}")]
    Decode(String),
    #[error("cannot encode image: {0}")]
    Encode(String),
}

/// Crop rectangle in fractions of the image width and height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropRect {
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
}

impl CropRect {
    /// The central region covering `fraction` of each side.
    pub fn centered(fraction: f64) -> Self {
        let margin = (1.0 - fraction) / 2.0;
        Self {
            left: margin,
            top: margin,
            width: fraction,
            height: fraction,
        }
    }

    fn is_valid(&self) -> bool {
        let ok = |v: f64| v.is_finite() && (0.0..=1.0).contains(&v);
        ok(self.left)
            && ok(self.top)
            && self.width > 0.0
            && self.height > 0.0
            && self.left + self.width <= 1.0 + 1e-9
            && self.top + self.height <= 1.0 + 1e-9
    }
}

impl Default for CropRect {
    fn default() -> Self {
        Self::centered(0.8)
    }
}

fn format_for(media_type: &str) -> Option<ImageFormat> {
    ImageFormat::from_mime_type(media_type)
}

/// Crops `rect` out of `image` and resamples it back to the original size.
/// The output keeps the input's media type.
pub fn zoom(image: &ImagePayload, rect: CropRect) -> Result<ImagePayload, ZoomError> {
    if !rect.is_valid() {
        return Err(ZoomError::BadRect(rect));
    }
    let mut reader = ImageReader::new(Cursor::new(&image.bytes));
    match format_for(&image.media_type) {
        Some(format) => reader.set_format(format),
        None => {
            reader = reader
                .with_guessed_format()
                .map_err(|e| ZoomError::Decode(e.to_string()))?
        }
    }
    let format = reader
        .format()
        .ok_or_else(|| ZoomError::Decode("unknown image format".into()))?;
    let decoded = reader.decode().map_err(|e| ZoomError::Decode(e.to_string()))?;

    let (w, h) = (decoded.width(), decoded.height());
    let x = ((rect.left * f64::from(w)).round() as u32).min(w.saturating_sub(1));
    let y = ((rect.top * f64::from(h)).round() as u32).min(h.saturating_sub(1));
    let cw = ((rect.width * f64::from(w)).round() as u32).clamp(1, w - x);
    let ch = ((rect.height * f64::from(h)).round() as u32).clamp(1, h - y);

    let zoomed = decoded.crop_imm(x, y, cw, ch).resize_exact(w, h, FilterType::Triangle);

    let mut out = Cursor::new(Vec::new());
    zoomed
        .write_to(&mut out, format)
        .map_err(|e| ZoomError::Encode(e.to_string()))?;
    Ok(ImagePayload::new(out.into_inner(), image.media_type.clone()))
}
