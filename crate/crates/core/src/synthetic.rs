//! Generated datasets for smoke tests: cartoon faces on noisy backgrounds,
//! with a label-dependent ear pose and mouth shape.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imaging::RgbImage;
use crate::ingest::{save_manifest, ConditionLabel, DatasetManifest, FrameRecord, Sex, SubjectMeta};
use crate::preprocess::FaceBox;
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub n_subjects: usize,
    /// Frames per subject; split between one positive and one negative video.
    pub frames_per_subject: usize,
    pub image_side: usize,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            n_subjects: 10,
            frames_per_subject: 5,
            image_side: 128,
            seed: 0,
        }
    }
}

/// One generated frame and its face box.
pub fn render_face(label: ConditionLabel, subject: usize, frame: usize, side: usize, seed: u64) -> (RgbImage, FaceBox) {
    let mut r = rng::derived(seed, &["face", &subject.to_string(), &frame.to_string(), label.as_str()]);
    let mut subject_rng = rng::derived(seed, &["subject", &subject.to_string()]);
    let fur = [
        subject_rng.random_range(0.35..0.85f32),
        subject_rng.random_range(0.25..0.6f32),
        subject_rng.random_range(0.1..0.4f32),
    ];
    let s = side as f64;
    let face_w = s * r.random_range(0.5..0.65);
    let face_h = face_w * 1.1;
    let cx = s / 2.0 + r.random_range(-0.08..0.08) * s;
    let cy = s / 2.0 + r.random_range(-0.05..0.1) * s;
    let noise = Normal::new(0.0f32, 0.06).expect("valid");
    let bg: Vec<f32> = (0..side * side * 3).map(|_| noise.sample(&mut r)).collect();
    let positive = label == ConditionLabel::PositiveAnticipation;
    // Ears point up for positive frames and droop for negative ones.
    let (ear_dx, ear_dy, ear_ru, ear_rv) = if positive { (0.62, -0.85, 0.25, 0.4) } else { (1.0, -0.1, 0.22, 0.5) };
    let img = RgbImage::from_fn(side, side, |y, x| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let u = (px - cx) / (face_w / 2.0);
        let v = (py - cy) / (face_h / 2.0);
        let base = 0.55 + 0.1 * ((x / 8 + y / 8) % 2) as f32;
        let mut c = [base * 0.6, base * 0.8, base];
        for ear in [-1.0, 1.0] {
            let eu = (u - ear * ear_dx) / ear_ru;
            let ev = (v - ear_dy) / ear_rv;
            if eu * eu + ev * ev < 1.0 {
                c = [fur[0] * 0.6, fur[1] * 0.6, fur[2] * 0.6];
            }
        }
        if u * u + v * v < 1.0 {
            c = fur;
            for eye in [-0.35, 0.35] {
                let (du, dv) = (u - eye, v + 0.15);
                if du * du + dv * dv < 0.012 {
                    c = [0.05, 0.05, 0.05];
                }
            }
            let (nu, nv) = (u, v - 0.25);
            if nu * nu / 0.02 + nv * nv / 0.01 < 1.0 {
                c = [0.1, 0.08, 0.08];
            }
            // Open curved mouth for positive frames, a flat line otherwise.
            let mouth = if positive {
                let mv = v - 0.65 + 0.8 * u * u;
                u.abs() < 0.35 && mv.abs() < 0.06
            } else {
                u.abs() < 0.3 && (v - 0.55).abs() < 0.025
            };
            if mouth {
                c = if positive { [0.75, 0.2, 0.25] } else { [0.15, 0.1, 0.1] };
            }
        }
        let i = (y * side + x) * 3;
        [
            (c[0] + bg[i]).clamp(0.0, 1.0),
            (c[1] + bg[i + 1]).clamp(0.0, 1.0),
            (c[2] + bg[i + 2]).clamp(0.0, 1.0),
        ]
    });
    let pad = 0.45 * face_w;
    let x0 = (cx - face_w / 2.0 - pad * 0.6).max(0.0);
    let y0 = (cy - face_h / 2.0 - pad).max(0.0);
    let x1 = (cx + face_w / 2.0 + pad * 0.6).min(s);
    let y1 = (cy + face_h / 2.0 + pad * 0.3).min(s);
    let face = FaceBox {
        x: x0.floor(),
        y: y0.floor(),
        w: (x1 - x0).ceil(),
        h: (y1 - y0).ceil(),
        confidence: 0.9 + 0.1 * r.random::<f64>(),
    };
    (img, face)
}

/// Write `frames/*.png`, `manifest.jsonl` and a `boxes.jsonl` sidecar into
/// `dir`. Returns the manifest.
pub fn write_face_fixture(dir: &Path, spec: &FixtureSpec) -> Result<DatasetManifest> {
    let frames_dir = dir.join("frames");
    std::fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    let mut manifest = DatasetManifest {
        provenance: format!(
            "synthetic faces: {} subjects x {} frames, seed {}",
            spec.n_subjects, spec.frames_per_subject, spec.seed
        ),
        ..Default::default()
    };
    let mut boxes = String::new();
    for s in 0..spec.n_subjects {
        let subject_id = format!("dog{:02}", s + 1);
        manifest.subjects.push(SubjectMeta {
            subject_id: subject_id.clone(),
            sex: if s % 2 == 0 { Sex::Female } else { Sex::Male },
            age_years: Some(1.0 + (s % 9) as f64 * 0.75),
            neutered: Some(s % 3 != 0),
        });
        let n_pos = spec.frames_per_subject / 2 + (s % 2) * (spec.frames_per_subject % 2);
        for f in 0..spec.frames_per_subject {
            let (label, video_id, index) = if f < n_pos {
                (ConditionLabel::PositiveAnticipation, format!("{subject_id}-pos"), f)
            } else {
                (ConditionLabel::Frustration, format!("{subject_id}-neg"), f - n_pos)
            };
            let frame_id = format!("{video_id}-f{index:05}");
            let (img, face) = render_face(label, s, f, spec.image_side, spec.seed);
            let rel = format!("frames/{frame_id}.png");
            img.save_png(dir.join(&rel))?;
            boxes.push_str(&format!(
                "{{\"frame_id\":\"{frame_id}\",\"x\":{},\"y\":{},\"w\":{},\"h\":{},\"confidence\":{}}}\n",
                face.x, face.y, face.w, face.h, face.confidence
            ));
            manifest.records.push(FrameRecord {
                frame_id,
                image_ref: rel,
                subject_id: subject_id.clone(),
                video_id,
                label,
                frame_index: index as i64,
            });
        }
    }
    save_manifest(&manifest, dir.join("manifest.jsonl"))?;
    let boxes_path = dir.join("boxes.jsonl");
    std::fs::write(&boxes_path, boxes).map_err(|e| Error::io(&boxes_path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{load_manifest, summarize};
    use crate::preprocess::load_sidecar;

    #[test]
    fn fixture_is_valid_and_balanced() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_face_fixture(dir.path(), &FixtureSpec::default()).unwrap();
        assert_eq!(m.records.len(), 50);
        let loaded = load_manifest(dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(loaded, m);
        let s = summarize(&m);
        assert_eq!(s.n_frames_by_label[&ConditionLabel::PositiveAnticipation], 25);
        assert_eq!(s.n_frames_by_label[&ConditionLabel::Frustration], 25);
        load_sidecar(&dir.path().join("boxes.jsonl")).unwrap();
    }

    #[test]
    fn rendering_is_seeded() {
        let a = render_face(ConditionLabel::Frustration, 2, 1, 64, 5);
        let b = render_face(ConditionLabel::Frustration, 2, 1, 64, 5);
        assert_eq!(a, b);
        assert!(a.0.in_unit_range());
    }
}
