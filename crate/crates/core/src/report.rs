//! Comparison tables and training-curve plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneSpec;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::experiment::{Metrics, SplitDescriptor};
use crate::ingest::DatasetSummary;
use crate::probe::TrainingCurve;

pub const REPORT_FORMAT: &str = "affpipe-report";
pub const REPORT_VERSION: u32 = 1;

pub const NOTE_COINCIDENT_SETS: &str =
    "model-selection and test sets coincide: the held-out subjects provide both the validation curves and the final accuracy";
pub const NOTE_TRAIN_ACCURACY: &str =
    "train accuracy is measured after the final epoch on that epoch's augmented training inputs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub code: String,
    pub message: String,
}

impl From<&Error> for ErrorRecord {
    fn from(e: &Error) -> Self {
        ErrorRecord {
            code: e.code().to_string(),
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub backbone: String,
    pub pretraining: String,
    pub architecture: String,
    pub train_accuracy: Option<f64>,
    pub val_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_metrics: Option<Metrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_metrics: Option<Metrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    /// Set when this backbone's run failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorRecord>,
}

impl ReportRow {
    /// A row carrying only the two table accuracies.
    pub fn new(spec: &BackboneSpec, train_accuracy: f64, val_accuracy: f64) -> Self {
        ReportRow {
            backbone: spec.to_string(),
            pretraining: spec.pretraining_label().into(),
            architecture: spec.architecture_label(),
            train_accuracy: Some(train_accuracy),
            val_accuracy: Some(val_accuracy),
            train_metrics: None,
            val_metrics: None,
            fingerprint: None,
            error: None,
        }
    }

    pub fn failed(spec: &BackboneSpec, error: &Error) -> Self {
        ReportRow {
            train_accuracy: None,
            val_accuracy: None,
            error: Some(error.into()),
            ..ReportRow::new(spec, 0.0, 0.0)
        }
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }

    fn rank(&self) -> usize {
        BackboneSpec::from_id(&self.backbone)
            .ok()
            .and_then(|s| s.table_rank())
            .unwrap_or(usize::MAX)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub version: u32,
    pub rows: Vec<ReportRow>,
    /// Keyed by backbone id.
    pub curves: BTreeMap<String, TrainingCurve>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<RunConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitDescriptor>,
    /// Frames without a usable face box.
    pub dropped_frames: usize,
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn new(rows: Vec<ReportRow>) -> Self {
        EvalReport {
            format: REPORT_FORMAT.into(),
            version: REPORT_VERSION,
            rows,
            curves: BTreeMap::new(),
            config: None,
            dataset: None,
            split: None,
            dropped_frames: 0,
            notes: vec![NOTE_COINCIDENT_SETS.into(), NOTE_TRAIN_ACCURACY.into()],
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn load(path: &Path) -> Result<EvalReport> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow<'a> {
    pub row: &'a ReportRow,
    pub best: bool,
}

/// Rows in comparison-table order, with every row that attains the highest
/// validation accuracy flagged.
pub fn compare_backbones(report: &EvalReport) -> Vec<TableRow<'_>> {
    let mut rows: Vec<&ReportRow> = report.rows.iter().collect();
    rows.sort_by_key(|r| r.rank());
    let best = rows
        .iter()
        .filter_map(|r| r.val_accuracy)
        .fold(f64::NEG_INFINITY, f64::max);
    rows.into_iter()
        .map(|row| TableRow {
            row,
            best: row.val_accuracy == Some(best),
        })
        .collect()
}

fn cell(value: Option<f64>, best: bool) -> String {
    match value {
        Some(v) if best => format!("*{v:.3}"),
        Some(v) => format!("{v:.3}"),
        None => "-".into(),
    }
}

/// Plain-text comparison table. Accuracies have three decimals; the best
/// row's cells carry a leading `*`.
pub fn emit_table(report: &EvalReport) -> String {
    let rows = compare_backbones(report);
    let header = ["Backbone", "", "Train Accuracy", "Val. Accuracy"];
    let body: Vec<[String; 4]> = rows
        .iter()
        .map(|t| {
            let status = match &t.row.error {
                Some(e) => format!("failed: {}", e.code),
                None => String::new(),
            };
            [
                t.row.pretraining.clone(),
                format!("{}{}", t.row.architecture, if status.is_empty() { String::new() } else { format!(" ({status})") }),
                cell(t.row.train_accuracy, t.best),
                cell(t.row.val_accuracy, t.best),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for r in &body {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let backbone_width = widths[0] + 1 + widths[1];
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<bw$} | {:>tw$} | {:>vw$}",
        header[0],
        header[2],
        header[3],
        bw = backbone_width,
        tw = widths[2],
        vw = widths[3]
    );
    let _ = writeln!(
        out,
        "{}-+-{}-+-{}",
        "-".repeat(backbone_width),
        "-".repeat(widths[2]),
        "-".repeat(widths[3])
    );
    let mut previous: Option<&str> = None;
    for r in &body {
        let group = if previous == Some(r[0].as_str()) { "" } else { r[0].as_str() };
        previous = Some(r[0].as_str());
        let _ = writeln!(
            out,
            "{:<pw$} {:<aw$} | {:>tw$} | {:>vw$}",
            group,
            r[1],
            r[2],
            r[3],
            pw = widths[0],
            aw = widths[1],
            tw = widths[2],
            vw = widths[3]
        );
    }
    out.push_str("* best validation accuracy\n");
    out
}

/// Which curve a plot shows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveKind {
    Loss,
    Accuracy,
}

impl CurveKind {
    fn title(self) -> &'static str {
        match self {
            CurveKind::Loss => "Validation loss",
            CurveKind::Accuracy => "Validation accuracy",
        }
    }

    fn value(self, r: &crate::probe::EpochRecord) -> f64 {
        match self {
            CurveKind::Loss => r.val_loss,
            CurveKind::Accuracy => r.val_accuracy,
        }
    }
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn nice_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = hi - lo;
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| span / s <= 6.0).unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() * step;
    (0..)
        .map(|i| first + i as f64 * step)
        .take_while(|&t| t <= hi + step * 1e-9)
        .collect()
}

/// One SVG line plot of the validation series of every curve, epoch on
/// the x axis.
pub fn render_curve_svg(curves: &[(&str, &TrainingCurve)], kind: CurveKind) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const LEFT: f64 = 64.0;
    const RIGHT: f64 = 170.0;
    const TOP: f64 = 36.0;
    const BOTTOM: f64 = 48.0;
    let values: Vec<f64> = curves
        .iter()
        .flat_map(|(_, c)| c.records.iter().map(|r| kind.value(r)))
        .filter(|v| v.is_finite())
        .collect();
    let max_epoch = curves.iter().filter_map(|(_, c)| c.last().map(|r| r.epoch)).max().unwrap_or(1).max(2) as f64;
    let (mut lo, mut hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = 0.1 * hi.abs().max(1.0);
        lo -= pad;
        hi += pad;
    }
    let x_of = |e: f64| LEFT + (e - 1.0) / (max_epoch - 1.0) * (W - LEFT - RIGHT);
    let y_of = |v: f64| TOP + (hi - v) / (hi - lo) * (H - TOP - BOTTOM);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, (LEFT + W - RIGHT) / 2.0, kind.title());
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    let _ = writeln!(s, r#"<path d="M{x0} {y0} L{x0} {y1} L{x1} {y1}" fill="none" stroke="black"/>"#);
    for t in nice_ticks(lo, hi) {
        let y = y_of(t);
        let _ = writeln!(s, r#"<line x1="{}" y1="{y:.2}" x2="{x0}" y2="{y:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"#, x0 - 4.0, x0 - 6.0, y + 4.0, trim_tick(t));
    }
    for t in nice_ticks(1.0, max_epoch) {
        let x = x_of(t);
        let _ = writeln!(s, r#"<line x1="{x:.2}" y1="{y1}" x2="{x:.2}" y2="{}" stroke="black"/><text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#, y1 + 4.0, y1 + 18.0, trim_tick(t));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">epoch</text>"#, (x0 + x1) / 2.0, H - 10.0);
    for (i, (label, curve)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = curve
            .records
            .iter()
            .filter(|r| kind.value(r).is_finite())
            .map(|r| format!("{:.2},{:.2}", x_of(r.epoch as f64), y_of(kind.value(r))))
            .collect();
        let label = xml_escape(label);
        let _ = writeln!(s, r#"<g class="series" data-label="{label}">"#);
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, points.join(" "));
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let _ = writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{label}</text>"#, x1 + 12.0, x1 + 32.0, x1 + 38.0, ly + 4.0);
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}

fn trim_tick(t: f64) -> String {
    let s = format!("{t:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Write `curves_loss.svg` and `curves_accuracy.svg` into `dir`.
pub fn emit_curves(curves: &BTreeMap<String, TrainingCurve>, dir: &Path) -> Result<[PathBuf; 2]> {
    let mut ordered: Vec<(&str, &TrainingCurve)> = curves.iter().map(|(k, v)| (k.as_str(), v)).collect();
    ordered.sort_by_key(|(id, _)| BackboneSpec::from_id(id).ok().and_then(|s| s.table_rank()).unwrap_or(usize::MAX));
    let loss = dir.join("curves_loss.svg");
    let acc = dir.join("curves_accuracy.svg");
    std::fs::write(&loss, render_curve_svg(&ordered, CurveKind::Loss)).map_err(|e| Error::io(&loss, e))?;
    std::fs::write(&acc, render_curve_svg(&ordered, CurveKind::Accuracy)).map_err(|e| Error::io(&acc, e))?;
    Ok([loss, acc])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::EpochRecord;

    fn reference_rows() -> EvalReport {
        let v = [(0.800, 0.809), (0.869, 0.780), (0.870, 0.813), (0.878, 0.853)];
        let mut rows: Vec<ReportRow> = BackboneSpec::all().iter().zip(v).map(|(s, (t, a))| ReportRow::new(s, t, a)).collect();
        rows.reverse();
        EvalReport::new(rows)
    }

    #[test]
    fn rows_follow_table_order() {
        let report = reference_rows();
        let ids: Vec<&str> = compare_backbones(&report).iter().map(|t| t.row.backbone.as_str()).collect();
        assert_eq!(ids, ["sup-resnet50", "sup-vit-s16", "dino-resnet50", "dino-vit-s8"]);
    }

    #[test]
    fn ties_flag_every_best_row() {
        let specs = BackboneSpec::all();
        let report = EvalReport::new(vec![
            ReportRow::new(&specs[0], 0.5, 0.9),
            ReportRow::new(&specs[1], 0.5, 0.7),
            ReportRow::new(&specs[2], 0.5, 0.9),
        ]);
        let flags: Vec<bool> = compare_backbones(&report).iter().map(|t| t.best).collect();
        assert_eq!(flags, [true, false, true]);
    }

    #[test]
    fn failed_rows_are_shown_not_flagged() {
        let specs = BackboneSpec::all();
        let err = Error::Divergence { epoch: 3 };
        let report = EvalReport::new(vec![ReportRow::failed(&specs[0], &err), ReportRow::new(&specs[3], 0.6, 0.61)]);
        let table = emit_table(&report);
        assert!(table.contains("failed: DIVERGENCE"), "{table}");
        assert!(table.contains("*0.610"));
        assert_eq!(compare_backbones(&report).iter().filter(|t| t.best).count(), 1);
    }

    fn flat(epochs: usize, v: f64) -> TrainingCurve {
        TrainingCurve {
            records: (1..=epochs)
                .map(|e| EpochRecord { epoch: e, train_loss: v, train_accuracy: 0.5, val_loss: v, val_accuracy: 0.5 })
                .collect(),
        }
    }

    #[test]
    fn flat_curve_spans_all_epochs() {
        let c = flat(30, 0.69);
        let svg = render_curve_svg(&[("sup-resnet50", &c)], CurveKind::Loss);
        assert_eq!(svg.matches("<polyline").count(), 1);
        let points = svg.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        let ys: BTreeMap<String, ()> = points.split(' ').map(|p| (p.split(',').nth(1).unwrap().to_string(), ())).collect();
        assert_eq!(points.split(' ').count(), 30);
        assert_eq!(ys.len(), 1);
    }

    #[test]
    fn one_series_per_curve() {
        let dir = tempfile::tempdir().unwrap();
        let curves: BTreeMap<String, TrainingCurve> = ["sup-resnet50", "sup-vit-s16", "dino-resnet50", "dino-vit-s8"]
            .iter()
            .enumerate()
            .map(|(i, id)| (id.to_string(), flat(30, i as f64)))
            .collect();
        let [loss, acc] = emit_curves(&curves, dir.path()).unwrap();
        for p in [loss, acc] {
            let svg = std::fs::read_to_string(p).unwrap();
            assert_eq!(svg.matches("<polyline").count(), 4);
            assert!(svg.contains("data-label=\"dino-vit-s8\""));
        }
    }

    #[test]
    fn report_json_round_trip() {
        let r = reference_rows();
        assert_eq!(serde_json::from_str::<EvalReport>(&r.to_json()).unwrap(), r);
    }
}
