use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{ConditionLabel, DatasetManifest, ValidationIssue};
use crate::rng;

pub const SPLIT_FORMAT: &str = "affpipe-split";
pub const SPLIT_VERSION: u32 = 1;
/// Seeded subject partitions drawn before settling for the best-balanced one.
pub const SPLIT_CANDIDATES: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedFrame {
    pub frame_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub n_train_subjects: usize,
    pub n_test_subjects: usize,
    pub train_subjects: BTreeSet<String>,
    pub test_subjects: BTreeSet<String>,
    /// Manifest order.
    pub train_frames: Vec<String>,
    pub test_frames: Vec<String>,
    pub excluded: Vec<ExcludedFrame>,
    /// Fraction of positive frames on each side.
    pub positive_fraction_train: f64,
    pub positive_fraction_test: f64,
    pub stratify_tolerance: f64,
    /// Whether the label-ratio gap is within `stratify_tolerance`.
    pub stratified: bool,
}

impl SplitAssignment {
    pub fn side_of_subject(&self, subject_id: &str) -> Option<Side> {
        if self.train_subjects.contains(subject_id) {
            Some(Side::Train)
        } else if self.test_subjects.contains(subject_id) {
            Some(Side::Test)
        } else {
            None
        }
    }

    pub fn frames(&self, side: Side) -> &[String] {
        match side {
            Side::Train => &self.train_frames,
            Side::Test => &self.test_frames,
        }
    }

    pub fn descriptor(&self) -> SplitDescriptor {
        SplitDescriptor {
            seed: self.seed,
            n_train_subjects: self.train_subjects.len(),
            n_test_subjects: self.test_subjects.len(),
            n_train_frames: self.train_frames.len(),
            n_test_frames: self.test_frames.len(),
            n_excluded_frames: self.excluded.len(),
            positive_fraction_train: self.positive_fraction_train,
            positive_fraction_test: self.positive_fraction_test,
            stratified: self.stratified,
        }
    }
}

/// Compact split summary embedded in reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDescriptor {
    pub seed: u64,
    pub n_train_subjects: usize,
    pub n_test_subjects: usize,
    pub n_train_frames: usize,
    pub n_test_frames: usize,
    pub n_excluded_frames: usize,
    pub positive_fraction_train: f64,
    pub positive_fraction_test: f64,
    pub stratified: bool,
}

#[derive(Default, Clone, Copy)]
struct Tally {
    frames: usize,
    positive: usize,
}

fn positive_fraction(t: Tally) -> f64 {
    if t.frames == 0 {
        0.0
    } else {
        t.positive as f64 / t.frames as f64
    }
}

/// Partition subjects into train and test sides.
///
/// Up to [`SPLIT_CANDIDATES`] seeded partitions are drawn; the first whose
/// positive-frame fractions differ by at most `tolerance` is kept. If none
/// does, the draw with the smallest gap is kept and `stratified` is false.
/// Frames of subjects on neither side are listed as excluded.
pub fn subject_disjoint_split(
    manifest: &DatasetManifest,
    n_train: usize,
    n_test: usize,
    seed: u64,
    tolerance: f64,
) -> Result<SplitAssignment> {
    let mut tallies: BTreeMap<&str, Tally> = BTreeMap::new();
    for r in &manifest.records {
        let t = tallies.entry(r.subject_id.as_str()).or_default();
        t.frames += 1;
        if r.label == ConditionLabel::PositiveAnticipation {
            t.positive += 1;
        }
    }
    let subjects: Vec<&str> = tallies.keys().copied().collect();
    if n_train == 0 || n_test == 0 || n_train + n_test > subjects.len() {
        return Err(Error::InsufficientSubjects {
            requested: n_train + n_test,
            available: subjects.len(),
        });
    }

    let mut r = rng::derived(seed, &["split"]);
    let mut best: Option<(f64, Vec<&str>)> = None;
    for _ in 0..SPLIT_CANDIDATES {
        let mut order = subjects.clone();
        order.shuffle(&mut r);
        let sum = |ids: &[&str]| {
            ids.iter().fold(Tally::default(), |acc, id| Tally {
                frames: acc.frames + tallies[id].frames,
                positive: acc.positive + tallies[id].positive,
            })
        };
        let gap = (positive_fraction(sum(&order[..n_train])) - positive_fraction(sum(&order[n_train..n_train + n_test]))).abs();
        if best.as_ref().is_none_or(|(g, _)| gap < *g) {
            best = Some((gap, order));
        }
        if gap <= tolerance {
            break;
        }
    }
    let (gap, order) = best.expect("at least one candidate");
    let train_subjects: BTreeSet<String> = order[..n_train].iter().map(|s| s.to_string()).collect();
    let test_subjects: BTreeSet<String> = order[n_train..n_train + n_test].iter().map(|s| s.to_string()).collect();

    let mut split = SplitAssignment {
        seed,
        n_train_subjects: n_train,
        n_test_subjects: n_test,
        train_subjects,
        test_subjects,
        train_frames: vec![],
        test_frames: vec![],
        excluded: vec![],
        positive_fraction_train: 0.0,
        positive_fraction_test: 0.0,
        stratify_tolerance: tolerance,
        stratified: gap <= tolerance,
    };
    assign_frames(&mut split, manifest);
    Ok(split)
}

fn assign_frames(split: &mut SplitAssignment, manifest: &DatasetManifest) {
    let (mut train, mut test) = (Tally::default(), Tally::default());
    for r in &manifest.records {
        let positive = usize::from(r.label == ConditionLabel::PositiveAnticipation);
        match split.side_of_subject(&r.subject_id) {
            Some(Side::Train) => {
                split.train_frames.push(r.frame_id.clone());
                train.frames += 1;
                train.positive += positive;
            }
            Some(Side::Test) => {
                split.test_frames.push(r.frame_id.clone());
                test.frames += 1;
                test.positive += positive;
            }
            None => split.excluded.push(ExcludedFrame {
                frame_id: r.frame_id.clone(),
                reason: "subject not selected for either side".into(),
            }),
        }
    }
    split.positive_fraction_train = positive_fraction(train);
    split.positive_fraction_test = positive_fraction(test);
}

/// Check that a (possibly loaded) split is disjoint, consistent with the
/// manifest's subjects, and accounts for every manifest frame exactly once.
pub fn check_split(split: &SplitAssignment, manifest: &DatasetManifest) -> Result<()> {
    let mut issues = Vec::new();
    for s in split.train_subjects.intersection(&split.test_subjects) {
        issues.push(ValidationIssue::error(format!("subject {s}"), "subject on both sides"));
    }
    let mut placed: BTreeMap<&str, Side> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    let excluded = split.excluded.iter().map(|e| (e.frame_id.as_str(), None));
    let listed = split
        .train_frames
        .iter()
        .map(|f| (f.as_str(), Some(Side::Train)))
        .chain(split.test_frames.iter().map(|f| (f.as_str(), Some(Side::Test))))
        .chain(excluded);
    for (frame, side) in listed {
        if !seen.insert(frame) {
            issues.push(ValidationIssue::error(format!("frame {frame}"), "frame listed more than once"));
        }
        if let Some(side) = side {
            placed.insert(frame, side);
        }
    }
    for r in &manifest.records {
        if !seen.contains(r.frame_id.as_str()) {
            issues.push(ValidationIssue::error(format!("frame {}", r.frame_id), "frame missing from split"));
        }
        if let Some(&side) = placed.get(r.frame_id.as_str()) {
            if split.side_of_subject(&r.subject_id) != Some(side) {
                issues.push(ValidationIssue::error(
                    format!("frame {}", r.frame_id),
                    format!("frame placed on {side:?} but subject {} is not", r.subject_id),
                ));
            }
        }
    }
    if seen.len() != manifest.records.len() {
        for f in &seen {
            if manifest.record(f).is_none() {
                issues.push(ValidationIssue::error(format!("frame {f}"), "frame not in manifest"));
            }
        }
    }
    if issues.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(issues))
    }
}

#[derive(Serialize, Deserialize)]
struct SplitHeader {
    format: String,
    version: u32,
    seed: u64,
    n_train_subjects: usize,
    n_test_subjects: usize,
    stratify_tolerance: f64,
    stratified: bool,
    positive_fraction_train: f64,
    positive_fraction_test: f64,
}

#[derive(Serialize, Deserialize)]
struct SideEntry {
    id: String,
    side: Side,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitFile {
    header: SplitHeader,
    subjects: Vec<SideEntry>,
    frames: Vec<SideEntry>,
    excluded: Vec<ExcludedFrame>,
}

pub fn split_to_json(split: &SplitAssignment) -> String {
    let subjects = split
        .train_subjects
        .iter()
        .map(|s| SideEntry { id: s.clone(), side: Side::Train })
        .chain(split.test_subjects.iter().map(|s| SideEntry { id: s.clone(), side: Side::Test }))
        .collect();
    let frames = split
        .train_frames
        .iter()
        .map(|f| SideEntry { id: f.clone(), side: Side::Train })
        .chain(split.test_frames.iter().map(|f| SideEntry { id: f.clone(), side: Side::Test }))
        .collect();
    let file = SplitFile {
        header: SplitHeader {
            format: SPLIT_FORMAT.into(),
            version: SPLIT_VERSION,
            seed: split.seed,
            n_train_subjects: split.n_train_subjects,
            n_test_subjects: split.n_test_subjects,
            stratify_tolerance: split.stratify_tolerance,
            stratified: split.stratified,
            positive_fraction_train: split.positive_fraction_train,
            positive_fraction_test: split.positive_fraction_test,
        },
        subjects,
        frames,
        excluded: split.excluded.clone(),
    };
    serde_json::to_string_pretty(&file).expect("serializable")
}

pub fn split_from_json(text: &str, path: &Path) -> Result<SplitAssignment> {
    let parse_err = |e: serde_json::Error| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    };
    let file: SplitFile = serde_json::from_str(text).map_err(parse_err)?;
    if file.header.format != SPLIT_FORMAT || file.header.version != SPLIT_VERSION {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("unsupported split format {} v{}", file.header.format, file.header.version),
        });
    }
    let pick = |entries: &[SideEntry], side: Side| -> Vec<String> {
        entries.iter().filter(|e| e.side == side).map(|e| e.id.clone()).collect()
    };
    Ok(SplitAssignment {
        seed: file.header.seed,
        n_train_subjects: file.header.n_train_subjects,
        n_test_subjects: file.header.n_test_subjects,
        train_subjects: pick(&file.subjects, Side::Train).into_iter().collect(),
        test_subjects: pick(&file.subjects, Side::Test).into_iter().collect(),
        train_frames: pick(&file.frames, Side::Train),
        test_frames: pick(&file.frames, Side::Test),
        excluded: file.excluded,
        positive_fraction_train: file.header.positive_fraction_train,
        positive_fraction_test: file.header.positive_fraction_test,
        stratify_tolerance: file.header.stratify_tolerance,
        stratified: file.header.stratified,
    })
}

pub fn save_split(split: &SplitAssignment, path: &Path) -> Result<()> {
    std::fs::write(path, split_to_json(split)).map_err(|e| Error::io(path, e))
}

pub fn load_split(path: &Path) -> Result<SplitAssignment> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    split_from_json(&text, path)
}
