//! Frame extraction from short condition-labeled videos.
//!
//! Videos are read as animated GIFs (per-frame delays give the timeline).
//! Frames are sampled at a fixed rate: sample `i` is taken at `t = i / rate`
//! for every `t` strictly before the end of the video, and shows whichever
//! source frame is on screen at `t`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use image::codecs::gif::GifDecoder;
use image::AnimationDecoder;
use rayon::prelude::*;

use super::{save_manifest, ConditionLabel, DatasetManifest, FrameRecord, Sex, SubjectMeta};
use crate::error::{Error, Result};
use crate::imaging::RgbImage;

pub const DEFAULT_SAMPLING_RATE_HZ: f64 = 5.0;

/// GIF frames with a zero delay are shown for 100 ms by common players.
const ZERO_DELAY_MS: f64 = 100.0;

pub struct DecodedVideo {
    pub frames: Vec<RgbImage>,
    pub delays_ms: Vec<f64>,
}

impl DecodedVideo {
    pub fn duration_ms(&self) -> f64 {
        self.delays_ms.iter().sum()
    }
}

pub fn decode_video(path: &Path) -> Result<DecodedVideo> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decode_err = |message: String| Error::Decode {
        path: path.to_path_buf(),
        message,
    };
    let decoder = GifDecoder::new(BufReader::new(file)).map_err(|e| decode_err(e.to_string()))?;
    let mut frames = Vec::new();
    let mut delays_ms = Vec::new();
    for frame in decoder.into_frames() {
        let frame = frame.map_err(|e| decode_err(e.to_string()))?;
        let (num, den) = frame.delay().numer_denom_ms();
        let delay = num as f64 / den as f64;
        delays_ms.push(if delay > 0.0 { delay } else { ZERO_DELAY_MS });
        let rgb = image::DynamicImage::ImageRgba8(frame.into_buffer()).to_rgb8();
        frames.push(RgbImage::from_rgb8(&rgb));
    }
    if frames.is_empty() {
        return Err(Error::EmptyVideo(path.to_path_buf()));
    }
    Ok(DecodedVideo { frames, delays_ms })
}

/// Source frame shown at each sampling instant.
pub fn sample_frame_positions(delays_ms: &[f64], rate_hz: f64) -> Result<Vec<usize>> {
    if !(rate_hz.is_finite() && rate_hz > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sampling rate must be positive, got {rate_hz}"
        )));
    }
    let mut starts = Vec::with_capacity(delays_ms.len());
    let mut acc = 0.0;
    for d in delays_ms {
        starts.push(acc);
        acc += d;
    }
    let duration = acc;
    let mut positions = Vec::new();
    let mut source = 0usize;
    for i in 0u64.. {
        let t = i as f64 * 1000.0 / rate_hz;
        if t >= duration {
            break;
        }
        while source + 1 < starts.len() && starts[source + 1] <= t {
            source += 1;
        }
        positions.push(source);
    }
    Ok(positions)
}

/// Decode `video_ref`, sample frames at `sampling_rate_hz`, write them as PNGs
/// under `out_dir`, and return one record per sampled frame. Every record
/// inherits the video's label.
pub fn extract_frames(
    video_ref: &Path,
    video_id: &str,
    label: ConditionLabel,
    subject_id: &str,
    sampling_rate_hz: f64,
    out_dir: &Path,
) -> Result<Vec<FrameRecord>> {
    if !(sampling_rate_hz.is_finite() && sampling_rate_hz > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sampling rate must be positive, got {sampling_rate_hz}"
        )));
    }
    let video = decode_video(video_ref)?;
    let positions = sample_frame_positions(&video.delays_ms, sampling_rate_hz)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    positions
        .iter()
        .enumerate()
        .map(|(i, &src)| {
            let frame_id = format!("{video_id}-f{i:05}");
            let path = out_dir.join(format!("{frame_id}.png"));
            video.frames[src].save_png(&path)?;
            Ok(FrameRecord {
                frame_id,
                image_ref: path.to_string_lossy().into_owned(),
                subject_id: subject_id.to_string(),
                video_id: video_id.to_string(),
                label,
                frame_index: i as i64,
            })
        })
        .collect()
}

struct LabelRow {
    line: usize,
    video: String,
    subject_id: String,
    label: ConditionLabel,
    meta: SubjectMeta,
}

fn read_label_table(path: &Path) -> Result<Vec<LabelRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                Error::MissingFile(path.to_path_buf())
            }
            _ => Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: e.to_string(),
            },
        })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let need = |name: &str| {
        col(name).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("missing column `{name}`"),
        })
    };
    let (c_video, c_subject, c_label) = (need("video")?, need("subject_id")?, need("label")?);
    let (c_sex, c_age, c_neutered) = (col("sex"), col("age_years"), col("neutered"));

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let bad = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let field = |c: Option<usize>| c.and_then(|c| record.get(c)).filter(|s| !s.is_empty());
        let raw_label = field(Some(c_label)).unwrap_or("");
        let label = ConditionLabel::parse(raw_label)
            .ok_or_else(|| bad(format!("unknown label `{raw_label}`")))?;
        let subject_id = field(Some(c_subject))
            .ok_or_else(|| bad("empty subject_id".into()))?
            .to_string();
        let age_years = field(c_age)
            .map(|s| s.parse::<f64>().map_err(|_| bad(format!("bad age_years `{s}`"))))
            .transpose()?;
        let neutered = field(c_neutered)
            .map(|s| match s.to_ascii_lowercase().as_str() {
                "true" | "yes" | "1" | "y" => Ok(true),
                "false" | "no" | "0" | "n" => Ok(false),
                _ => Err(bad(format!("bad neutered flag `{s}`"))),
            })
            .transpose()?;
        rows.push(LabelRow {
            line,
            video: field(Some(c_video))
                .ok_or_else(|| bad("empty video".into()))?
                .to_string(),
            meta: SubjectMeta {
                subject_id: subject_id.clone(),
                sex: field(c_sex).map(Sex::parse).unwrap_or_default(),
                age_years,
                neutered,
            },
            subject_id,
            label,
        });
    }
    Ok(rows)
}

/// Build a manifest from a directory of videos and a label table.
///
/// The label table is a CSV with columns `video,subject_id,label` and
/// optional `sex,age_years,neutered`. `video` is a file name inside
/// `videos_dir`; its stem becomes the video id. Frames are written under
/// `frames/` next to the output manifest and referenced relative to it.
pub fn ingest_videos(
    videos_dir: &Path,
    labels_csv: &Path,
    sampling_rate_hz: f64,
    out_manifest: &Path,
) -> Result<DatasetManifest> {
    let rows = read_label_table(labels_csv)?;
    let base = out_manifest
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let frames_root = base.join("frames");

    let per_video: Vec<Result<Vec<FrameRecord>>> = rows
        .par_iter()
        .map(|row| {
            let video_path = videos_dir.join(&row.video);
            let video_id = Path::new(&row.video)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| row.video.clone());
            let mut records = extract_frames(
                &video_path,
                &video_id,
                row.label,
                &row.subject_id,
                sampling_rate_hz,
                &frames_root.join(&video_id),
            )?;
            for r in &mut records {
                r.image_ref = relative_to(Path::new(&r.image_ref), &base);
            }
            log::info!("{}: {} frames (label table line {})", row.video, records.len(), row.line);
            Ok(records)
        })
        .collect();

    let mut subjects: BTreeMap<String, SubjectMeta> = BTreeMap::new();
    for row in &rows {
        let entry = subjects
            .entry(row.subject_id.clone())
            .or_insert_with(|| SubjectMeta::unknown(&row.subject_id));
        if entry.sex == Sex::Unknown {
            entry.sex = row.meta.sex;
        }
        entry.age_years = entry.age_years.or(row.meta.age_years);
        entry.neutered = entry.neutered.or(row.meta.neutered);
    }

    let mut records = Vec::new();
    for r in per_video {
        records.extend(r?);
    }
    let manifest = DatasetManifest {
        records,
        subjects: subjects.into_values().collect(),
        provenance: format!(
            "videos={} labels={} rate_hz={sampling_rate_hz}",
            videos_dir.display(),
            labels_csv.display()
        ),
    };
    save_manifest(&manifest, out_manifest)?;
    Ok(manifest)
}

fn relative_to(path: &Path, base: &Path) -> String {
    path.strip_prefix(base)
        .map(PathBuf::from)
        .unwrap_or_else(|_| path.to_path_buf())
        .to_string_lossy()
        .into_owned()
}
