use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{crop_and_resize, localize_face, FaceBox, FaceCrop, FaceLocalizer, MODEL_SIDE};
use crate::error::{Error, Result};
use crate::explain::file_stem;
use crate::imaging::RgbImage;
use crate::ingest::{resolve_image_ref, ConditionLabel, FrameRecord};

/// Index file written next to the crop images.
pub const CROP_INDEX: &str = "crops.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedFrame {
    pub frame_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct PreprocessOutcome {
    /// Crops in input order, skipping dropped frames.
    pub crops: Vec<FaceCrop>,
    pub labels: Vec<ConditionLabel>,
    pub dropped: Vec<DroppedFrame>,
}

/// Localize and crop every record. Frames with no box at or above
/// `min_confidence` are dropped; localizer and I/O failures abort.
pub fn preprocess_records(
    manifest_path: &Path,
    records: &[&FrameRecord],
    localizer: &dyn FaceLocalizer,
    min_confidence: f64,
) -> Result<PreprocessOutcome> {
    let results: Vec<Option<FaceCrop>> = records
        .par_iter()
        .map(|r| {
            let image = RgbImage::load(resolve_image_ref(manifest_path, &r.image_ref))?;
            match localize_face(&image, &r.frame_id, localizer, min_confidence)? {
                Some(face) => crop_and_resize(&image, &face, MODEL_SIDE, &r.frame_id).map(Some),
                None => Ok(None),
            }
        })
        .collect::<Result<_>>()?;
    let mut out = PreprocessOutcome::default();
    for (r, crop) in records.iter().zip(results) {
        match crop {
            Some(c) => {
                out.crops.push(c);
                out.labels.push(r.label);
            }
            None => out.dropped.push(DroppedFrame {
                frame_id: r.frame_id.clone(),
                reason: format!("no face at confidence >= {min_confidence}"),
            }),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropIndexEntry {
    pub frame_id: String,
    /// Relative to the crop directory.
    pub file: String,
    pub label: ConditionLabel,
    pub subject_id: String,
    #[serde(rename = "box")]
    pub source_box: FaceBox,
}

/// Write crops as PNG files plus a JSONL index into `dir`.
pub fn save_crops(dir: &Path, crops: &[FaceCrop], records: &[&FrameRecord]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = String::new();
    for crop in crops {
        let rec = records
            .iter()
            .find(|r| r.frame_id == crop.source_frame_id)
            .ok_or_else(|| Error::InvalidArgument(format!("crop for unknown frame {}", crop.source_frame_id)))?;
        let file = format!("{}.png", file_stem(&crop.source_frame_id));
        crop.pixels.save_png(dir.join(&file))?;
        let entry = CropIndexEntry {
            frame_id: crop.source_frame_id.clone(),
            file,
            label: rec.label,
            subject_id: rec.subject_id.clone(),
            source_box: crop.source_box,
        };
        index.push_str(&serde_json::to_string(&entry).expect("serializable"));
        index.push('\n');
    }
    let path = dir.join(CROP_INDEX);
    std::fs::write(&path, index).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Read a crop directory written by [`save_crops`].
pub fn load_crops(dir: &Path) -> Result<Vec<(FaceCrop, CropIndexEntry)>> {
    let path = dir.join(CROP_INDEX);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: CropIndexEntry = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let pixels = RgbImage::load(dir.join(&entry.file))?;
        out.push((
            FaceCrop {
                pixels,
                source_frame_id: entry.frame_id.clone(),
                source_box: entry.source_box,
            },
            entry,
        ));
    }
    Ok(out)
}
