//! Labeled frame datasets: manifest model, validation, summaries, and
//! extraction of frames from condition-labeled videos.

mod manifest;
mod video;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

pub use manifest::{load_manifest, parse_manifest, save_manifest, write_manifest, MANIFEST_VERSION};
pub use video::{
    decode_video, extract_frames, ingest_videos, sample_frame_positions, DecodedVideo,
    DEFAULT_SAMPLING_RATE_HZ,
};

/// Experimental condition of a video, and so of every frame taken from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ConditionLabel {
    /// Frustration (blocked access to an expected reward).
    #[serde(rename = "negative")]
    Frustration,
    /// Positive anticipation of an expected reward.
    #[serde(rename = "positive")]
    PositiveAnticipation,
}

impl ConditionLabel {
    pub const ALL: [ConditionLabel; 2] = [ConditionLabel::Frustration, ConditionLabel::PositiveAnticipation];

    /// Class index used by the probe: negative = 0, positive = 1.
    pub fn index(self) -> usize {
        match self {
            ConditionLabel::Frustration => 0,
            ConditionLabel::PositiveAnticipation => 1,
        }
    }

    pub fn from_index(index: usize) -> Option<Self> {
        match index {
            0 => Some(ConditionLabel::Frustration),
            1 => Some(ConditionLabel::PositiveAnticipation),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ConditionLabel::Frustration => "negative",
            ConditionLabel::PositiveAnticipation => "positive",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "negative" | "frustration" => Some(ConditionLabel::Frustration),
            "positive" | "positive_anticipation" | "anticipation" => {
                Some(ConditionLabel::PositiveAnticipation)
            }
            _ => None,
        }
    }
}

impl fmt::Display for ConditionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Female,
    Male,
    #[default]
    Unknown,
}

impl Sex {
    pub fn parse(s: &str) -> Sex {
        match s.trim().to_ascii_lowercase().as_str() {
            "f" | "female" => Sex::Female,
            "m" | "male" => Sex::Male,
            _ => Sex::Unknown,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectMeta {
    pub subject_id: String,
    #[serde(default)]
    pub sex: Sex,
    #[serde(default)]
    pub age_years: Option<f64>,
    #[serde(default)]
    pub neutered: Option<bool>,
}

impl SubjectMeta {
    pub fn unknown(subject_id: impl Into<String>) -> Self {
        SubjectMeta {
            subject_id: subject_id.into(),
            sex: Sex::Unknown,
            age_years: None,
            neutered: None,
        }
    }
}

/// One labeled frame. `frame_index` is the ordinal of the frame among the
/// frames sampled from its video. It is signed only so that malformed input
/// can be loaded and reported by [`validate_manifest`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub frame_id: String,
    pub image_ref: String,
    pub subject_id: String,
    pub video_id: String,
    pub label: ConditionLabel,
    pub frame_index: i64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<FrameRecord>,
    pub subjects: Vec<SubjectMeta>,
    pub provenance: String,
}

impl DatasetManifest {
    pub fn subject(&self, subject_id: &str) -> Option<&SubjectMeta> {
        self.subjects.iter().find(|s| s.subject_id == subject_id)
    }

    pub fn record(&self, frame_id: &str) -> Option<&FrameRecord> {
        self.records.iter().find(|r| r.frame_id == frame_id)
    }

    /// Subject ids with at least one frame, in first-appearance order.
    pub fn subjects_with_frames(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.subject_id.as_str()))
            .map(|r| r.subject_id.clone())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationIssue {
    pub severity: Severity,
    /// Which record or subject the issue concerns, e.g. `record 3 (frame_id=a-f00001)`.
    pub locator: String,
    pub message: String,
}

impl ValidationIssue {
    pub(crate) fn error(locator: impl Into<String>, message: impl Into<String>) -> Self {
        ValidationIssue {
            severity: Severity::Error,
            locator: locator.into(),
            message: message.into(),
        }
    }

    pub(crate) fn warning(locator: impl Into<String>, message: impl Into<String>) -> Self {
        ValidationIssue {
            severity: Severity::Warning,
            locator: locator.into(),
            message: message.into(),
        }
    }

    pub fn is_error(&self) -> bool {
        self.severity == Severity::Error
    }
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Warning => "WARNING",
            Severity::Error => "ERROR",
        };
        write!(f, "{sev} {}: {}", self.locator, self.message)
    }
}

/// Check every manifest invariant. Issues are returned as data; an empty list
/// means the manifest is valid.
pub fn validate_manifest(manifest: &DatasetManifest) -> Vec<ValidationIssue> {
    let mut issues = Vec::new();

    let mut subject_ids = HashSet::new();
    for (i, subject) in manifest.subjects.iter().enumerate() {
        let loc = format!("subject {i} (subject_id={})", subject.subject_id);
        if subject.subject_id.trim().is_empty() {
            issues.push(ValidationIssue::error(loc.clone(), "empty subject_id"));
        }
        if !subject_ids.insert(subject.subject_id.as_str()) {
            issues.push(ValidationIssue::error(
                loc.clone(),
                format!("duplicate subject_id `{}`", subject.subject_id),
            ));
        }
        if let Some(age) = subject.age_years {
            if !(age.is_finite() && age >= 0.0) {
                issues.push(ValidationIssue::error(loc, format!("invalid age_years {age}")));
            }
        }
    }

    let mut frame_ids = HashSet::new();
    let mut video_labels: HashMap<&str, (ConditionLabel, &str)> = HashMap::new();
    let mut video_positions = HashSet::new();
    let mut used_subjects = HashSet::new();
    for (i, rec) in manifest.records.iter().enumerate() {
        let loc = format!("record {i} (frame_id={})", rec.frame_id);
        if rec.frame_id.is_empty() {
            issues.push(ValidationIssue::error(loc.clone(), "empty frame_id"));
        }
        if !frame_ids.insert(rec.frame_id.as_str()) {
            issues.push(ValidationIssue::error(
                loc.clone(),
                format!("duplicate frame_id `{}`", rec.frame_id),
            ));
        }
        if rec.image_ref.is_empty() {
            issues.push(ValidationIssue::error(loc.clone(), "empty image_ref"));
        }
        if rec.video_id.is_empty() {
            issues.push(ValidationIssue::error(loc.clone(), "empty video_id"));
        }
        if rec.frame_index < 0 {
            issues.push(ValidationIssue::error(
                loc.clone(),
                format!("negative frame_index {}", rec.frame_index),
            ));
        } else if !video_positions.insert((rec.video_id.as_str(), rec.frame_index)) {
            issues.push(ValidationIssue::error(
                loc.clone(),
                format!(
                    "frame_index {} repeated within video `{}`",
                    rec.frame_index, rec.video_id
                ),
            ));
        }
        if subject_ids.contains(rec.subject_id.as_str()) {
            used_subjects.insert(rec.subject_id.as_str());
        } else {
            issues.push(ValidationIssue::error(
                loc.clone(),
                format!("unresolved subject `{}`", rec.subject_id),
            ));
        }
        match video_labels.get(rec.video_id.as_str()) {
            None => {
                video_labels.insert(&rec.video_id, (rec.label, &rec.subject_id));
            }
            Some(&(label, subject)) => {
                if label != rec.label {
                    issues.push(ValidationIssue::error(
                        loc.clone(),
                        format!("video `{}` mixes labels {label} and {}", rec.video_id, rec.label),
                    ));
                }
                if subject != rec.subject_id {
                    issues.push(ValidationIssue::error(
                        loc,
                        format!("video `{}` spans subjects {subject} and {}", rec.video_id, rec.subject_id),
                    ));
                }
            }
        }
    }

    for (i, subject) in manifest.subjects.iter().enumerate() {
        if !used_subjects.contains(subject.subject_id.as_str()) {
            issues.push(ValidationIssue::warning(
                format!("subject {i} (subject_id={})", subject.subject_id),
                "subject has no frames",
            ));
        }
    }
    issues
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n_frames: usize,
    pub n_videos: usize,
    pub n_frames_by_label: BTreeMap<ConditionLabel, usize>,
    pub n_subjects: usize,
    pub subjects_by_sex: BTreeMap<Sex, usize>,
    /// Whole-year buckets (`"0"`, `"1"`, ...) plus `"unknown"`.
    pub subjects_by_age_bucket: BTreeMap<String, usize>,
    pub frames_per_subject: BTreeMap<String, usize>,
}

pub fn summarize(manifest: &DatasetManifest) -> DatasetSummary {
    let mut summary = DatasetSummary {
        n_frames: manifest.records.len(),
        n_subjects: manifest.subjects.len(),
        ..Default::default()
    };
    for label in ConditionLabel::ALL {
        summary.n_frames_by_label.insert(label, 0);
    }
    let mut videos = HashSet::new();
    for rec in &manifest.records {
        *summary.n_frames_by_label.entry(rec.label).or_default() += 1;
        *summary.frames_per_subject.entry(rec.subject_id.clone()).or_default() += 1;
        videos.insert(rec.video_id.as_str());
    }
    summary.n_videos = videos.len();
    for subject in &manifest.subjects {
        *summary.subjects_by_sex.entry(subject.sex).or_default() += 1;
        let bucket = match subject.age_years {
            Some(age) if age.is_finite() && age >= 0.0 => format!("{}", age.floor() as u64),
            _ => "unknown".to_string(),
        };
        *summary.subjects_by_age_bucket.entry(bucket).or_default() += 1;
    }
    summary
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// `n_subjects` subjects with `frames_each` frames, alternating labels per subject.
    pub fn grid(n_subjects: usize, frames_each: usize) -> DatasetManifest {
        let mut m = DatasetManifest {
            provenance: "fixture".into(),
            ..Default::default()
        };
        for s in 0..n_subjects {
            let sid = format!("s{}", s + 1);
            m.subjects.push(SubjectMeta::unknown(&sid));
            let label = if s % 2 == 0 {
                ConditionLabel::Frustration
            } else {
                ConditionLabel::PositiveAnticipation
            };
            for f in 0..frames_each {
                m.records.push(FrameRecord {
                    frame_id: format!("{sid}-v0-f{f:05}"),
                    image_ref: format!("frames/{sid}-v0-f{f:05}.png"),
                    subject_id: sid.clone(),
                    video_id: format!("{sid}-v0"),
                    label,
                    frame_index: f as i64,
                });
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::grid;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn valid_fixture_has_no_issues() {
        assert_eq!(validate_manifest(&grid(3, 4)), vec![]);
    }

    #[test]
    fn negative_frame_index_is_one_error() {
        let mut m = grid(2, 3);
        m.records[1].frame_index = -1;
        let issues = validate_manifest(&m);
        assert_eq!(issues.len(), 1, "{issues:?}");
        assert_eq!(issues[0].severity, Severity::Error);
        assert!(issues[0].locator.contains("record 1"));
    }

    #[test]
    fn dangling_subject_is_one_warning() {
        let mut m = grid(2, 3);
        m.subjects.push(SubjectMeta::unknown("lonely"));
        let issues = validate_manifest(&m);
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].severity, Severity::Warning);
        assert!(issues[0].locator.contains("lonely"));
    }

    #[test]
    fn mixed_labels_within_a_video_are_rejected() {
        let mut m = grid(1, 3);
        m.records[2].label = ConditionLabel::PositiveAnticipation;
        let issues = validate_manifest(&m);
        assert!(issues.iter().any(|i| i.is_error() && i.message.contains("mixes labels")));
    }

    #[test]
    fn duplicate_subject_and_bad_age() {
        let mut m = grid(1, 1);
        m.subjects.push(SubjectMeta {
            age_years: Some(-2.0),
            ..SubjectMeta::unknown("s1")
        });
        let issues = validate_manifest(&m);
        assert_eq!(issues.iter().filter(|i| i.is_error()).count(), 2, "{issues:?}");
    }

    #[test]
    fn summarize_empty_manifest() {
        let s = summarize(&DatasetManifest::default());
        assert_eq!(s.n_frames, 0);
        assert_eq!(s.n_subjects, 0);
        assert!(s.n_frames_by_label.values().all(|&c| c == 0));
        assert!(s.frames_per_subject.is_empty());
        assert!(s.subjects_by_sex.is_empty());
    }

    #[test]
    fn summarize_two_by_three() {
        let s = summarize(&grid(2, 3));
        let expected: BTreeMap<String, usize> = [("s1".to_string(), 3), ("s2".to_string(), 3)].into();
        assert_eq!(s.frames_per_subject, expected);
        assert_eq!(s.n_frames_by_label[&ConditionLabel::Frustration], 3);
        assert_eq!(s.n_frames_by_label[&ConditionLabel::PositiveAnticipation], 3);
        assert_eq!(s.n_videos, 2);
    }

    #[test]
    fn age_buckets_are_whole_years() {
        let mut m = grid(3, 1);
        m.subjects[0].age_years = Some(2.9);
        m.subjects[1].age_years = Some(2.0);
        m.subjects[0].sex = Sex::Female;
        let s = summarize(&m);
        assert_eq!(s.subjects_by_age_bucket["2"], 2);
        assert_eq!(s.subjects_by_age_bucket["unknown"], 1);
        assert_eq!(s.subjects_by_sex[&Sex::Female], 1);
        assert_eq!(s.subjects_by_sex[&Sex::Unknown], 2);
    }

    #[test]
    fn label_serializes_as_positive_negative() {
        assert_eq!(serde_json::to_string(&ConditionLabel::PositiveAnticipation).unwrap(), "\"positive\"");
        assert_eq!(serde_json::to_string(&ConditionLabel::Frustration).unwrap(), "\"negative\"");
        assert!(serde_json::from_str::<ConditionLabel>("\"neutral\"").is_err());
    }

    fn arb_manifest() -> impl Strategy<Value = DatasetManifest> {
        (1usize..8, prop::collection::vec((0usize..8, any::<bool>()), 0..60)).prop_map(
            |(n_subjects, frames)| {
                let mut m = DatasetManifest::default();
                for s in 0..n_subjects {
                    m.subjects.push(SubjectMeta::unknown(format!("s{s}")));
                }
                for (i, (s, pos)) in frames.into_iter().enumerate() {
                    let s = s % n_subjects;
                    m.records.push(FrameRecord {
                        frame_id: format!("f{i}"),
                        image_ref: format!("f{i}.png"),
                        subject_id: format!("s{s}"),
                        video_id: format!("s{s}-{pos}"),
                        label: if pos {
                            ConditionLabel::PositiveAnticipation
                        } else {
                            ConditionLabel::Frustration
                        },
                        frame_index: i as i64,
                    });
                }
                m
            },
        )
    }

    proptest! {
        #[test]
        fn summary_totals_match_record_count(m in arb_manifest()) {
            let s = summarize(&m);
            prop_assert_eq!(s.n_frames_by_label.values().sum::<usize>(), m.records.len());
            prop_assert_eq!(s.frames_per_subject.values().sum::<usize>(), m.records.len());
            prop_assert_eq!(s.subjects_by_sex.values().sum::<usize>(), m.subjects.len());
            prop_assert_eq!(s.subjects_by_age_bucket.values().sum::<usize>(), m.subjects.len());
        }

        #[test]
        fn generated_manifests_have_no_errors(m in arb_manifest()) {
            prop_assert!(validate_manifest(&m).iter().all(|i| !i.is_error()));
        }
    }
}

/// Resolve a record's `image_ref` against the directory holding the manifest.
pub fn resolve_image_ref(manifest_path: &std::path::Path, image_ref: &str) -> std::path::PathBuf {
    let p = std::path::Path::new(image_ref);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path
            .parent()
            .unwrap_or(std::path::Path::new("."))
            .join(p)
    }
}
