//! Face localization, facial crops, and training-time augmentation.

mod augment;
mod batch;
mod localize;

use serde::{Deserialize, Serialize};

pub use augment::{augment, augment_with_trace, AugmentConfig, AugmentTrace};
pub use batch::{
    load_crops, preprocess_records, save_crops, CropIndexEntry, DroppedFrame, PreprocessOutcome, CROP_INDEX,
};
pub use localize::{
    load_sidecar, localizer_from_id, localize_face, CommandLocalizer, FaceLocalizer,
    FullFrameLocalizer, SidecarLocalizer, DEFAULT_MIN_CONFIDENCE,
};

use crate::error::{Error, Result};
use crate::imaging::RgbImage;

/// Model input resolution.
pub const MODEL_SIDE: usize = 224;

/// Axis-aligned face box in pixel coordinates of the source frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub confidence: f64,
}

impl FaceBox {
    pub fn full(image: &RgbImage) -> Self {
        FaceBox {
            x: 0.0,
            y: 0.0,
            w: image.width() as f64,
            h: image.height() as f64,
            confidence: 1.0,
        }
    }

    /// Integer pixel window `[x0, x1) × [y0, y1)` after clamping to the image.
    pub fn clamped(&self, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
        let x0 = self.x.max(0.0).floor();
        let y0 = self.y.max(0.0).floor();
        let x1 = (self.x + self.w).min(width as f64).ceil();
        let y1 = (self.y + self.h).min(height as f64).ceil();
        (x1 > x0 && y1 > y0).then_some((x0 as usize, y0 as usize, x1 as usize, y1 as usize))
    }

    pub fn is_valid_for(&self, width: usize, height: usize) -> bool {
        self.w > 0.0
            && self.h > 0.0
            && (0.0..=1.0).contains(&self.confidence)
            && self.x < width as f64
            && self.y < height as f64
            && self.x + self.w > 0.0
            && self.y + self.h > 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaceCrop {
    pub pixels: RgbImage,
    pub source_frame_id: String,
    pub source_box: FaceBox,
}

impl FaceCrop {
    pub fn is_standard(&self) -> bool {
        self.pixels.height() == MODEL_SIDE && self.pixels.width() == MODEL_SIDE
    }
}

/// Crop `face` (clamped to the image) and resize it to `side × side`.
pub fn crop_and_resize(image: &RgbImage, face: &FaceBox, side: usize, frame_id: &str) -> Result<FaceCrop> {
    if side == 0 {
        return Err(Error::InvalidArgument("crop side must be positive".into()));
    }
    let (width, height) = (image.width(), image.height());
    let (x0, y0, x1, y1) = face
        .clamped(width, height)
        .filter(|_| face.w > 0.0 && face.h > 0.0)
        .ok_or(Error::DegenerateBox { width, height })?;
    let pixels = image.resample_window(
        x0 as f64,
        y0 as f64,
        (x1 - x0) as f64,
        (y1 - y0) as f64,
        side,
        side,
    );
    Ok(FaceCrop {
        pixels,
        source_frame_id: frame_id.to_string(),
        source_box: *face,
    })
}
