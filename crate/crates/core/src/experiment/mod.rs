//! Subject-disjoint splits, metrics, and end-to-end runs.

mod metrics;
mod run;
mod split;

pub use metrics::{evaluate, evaluate_features, Metrics};
pub use run::{run_experiment, RunArtifacts, LAYOUT_VERSION};
pub use split::{
    check_split, load_split, save_split, split_from_json, split_to_json, subject_disjoint_split,
    ExcludedFrame, Side, SplitAssignment, SplitDescriptor, SPLIT_CANDIDATES,
};

pub use crate::report::{EvalReport, ReportRow};
