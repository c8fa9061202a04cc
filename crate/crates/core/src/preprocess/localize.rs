use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Command, Stdio};

use serde::Deserialize;

use super::FaceBox;
use crate::error::{Error, Result};
use crate::imaging::RgbImage;

pub const DEFAULT_MIN_CONFIDENCE: f64 = 0.5;

/// A face detector. Implementations return candidate boxes sorted by
/// descending confidence.
pub trait FaceLocalizer: Send + Sync {
    fn id(&self) -> &str;
    fn detect(&self, frame_id: &str, image: &RgbImage) -> Result<Vec<FaceBox>>;
}

/// Highest-confidence valid box at or above `min_confidence`, or `None`.
///
/// A backend error is reported as `LOCALIZER_FAILURE`, which callers must
/// keep distinct from "no face found".
pub fn localize_face(
    image: &RgbImage,
    frame_id: &str,
    localizer: &dyn FaceLocalizer,
    min_confidence: f64,
) -> Result<Option<FaceBox>> {
    if image.is_empty() {
        return Err(Error::InvalidArgument(format!("frame {frame_id}: empty image")));
    }
    let boxes = localizer.detect(frame_id, image).map_err(|e| match e {
        e @ Error::LocalizerFailure { .. } => e,
        other => Error::LocalizerFailure {
            localizer: localizer.id().to_string(),
            message: other.to_string(),
        },
    })?;
    let mut best: Option<FaceBox> = None;
    for b in boxes {
        if !b.is_valid_for(image.width(), image.height()) {
            log::warn!("{}: discarding invalid box {b:?} for frame {frame_id}", localizer.id());
            continue;
        }
        if b.confidence >= min_confidence && best.is_none_or(|cur| b.confidence > cur.confidence) {
            best = Some(b);
        }
    }
    Ok(best)
}

/// Treats the whole frame as the face. Useful when inputs are pre-cropped.
pub struct FullFrameLocalizer;

impl FaceLocalizer for FullFrameLocalizer {
    fn id(&self) -> &str {
        "full-frame"
    }

    fn detect(&self, _frame_id: &str, image: &RgbImage) -> Result<Vec<FaceBox>> {
        Ok(vec![FaceBox::full(image)])
    }
}

#[derive(Deserialize)]
struct SidecarLine {
    frame_id: String,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    confidence: f64,
}

/// Precomputed boxes keyed by frame id.
pub struct SidecarLocalizer {
    id: String,
    boxes: HashMap<String, Vec<FaceBox>>,
}

impl SidecarLocalizer {
    pub fn new(boxes: HashMap<String, Vec<FaceBox>>) -> Self {
        let mut boxes = boxes;
        for list in boxes.values_mut() {
            list.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        }
        SidecarLocalizer {
            id: "sidecar".into(),
            boxes,
        }
    }
}

impl FaceLocalizer for SidecarLocalizer {
    fn id(&self) -> &str {
        &self.id
    }

    fn detect(&self, frame_id: &str, _image: &RgbImage) -> Result<Vec<FaceBox>> {
        Ok(self.boxes.get(frame_id).cloned().unwrap_or_default())
    }
}

/// Read a line-delimited box file: `{"frame_id", "x", "y", "w", "h", "confidence"}` per line.
pub fn load_sidecar(path: &Path) -> Result<SidecarLocalizer> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut boxes: HashMap<String, Vec<FaceBox>> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: SidecarLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        boxes.entry(rec.frame_id).or_default().push(FaceBox {
            x: rec.x,
            y: rec.y,
            w: rec.w,
            h: rec.h,
            confidence: rec.confidence,
        });
    }
    let mut loc = SidecarLocalizer::new(boxes);
    loc.id = format!("sidecar:{}", path.display());
    Ok(loc)
}

/// Adapter for an external detector process. The frame is written to the
/// child's stdin as binary PPM; the child answers with one JSON box
/// `{"x","y","w","h","confidence"}` per stdout line.
pub struct CommandLocalizer {
    id: String,
    program: String,
    args: Vec<String>,
}

impl CommandLocalizer {
    pub fn new(program: impl Into<String>, args: Vec<String>) -> Self {
        let program = program.into();
        CommandLocalizer {
            id: format!("cmd:{program}"),
            program,
            args,
        }
    }
}

#[derive(Deserialize)]
struct CommandBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    confidence: f64,
}

impl FaceLocalizer for CommandLocalizer {
    fn id(&self) -> &str {
        &self.id
    }

    fn detect(&self, frame_id: &str, image: &RgbImage) -> Result<Vec<FaceBox>> {
        let fail = |message: String| Error::LocalizerFailure {
            localizer: self.id.clone(),
            message,
        };
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .env("AFFPIPE_FRAME_ID", frame_id)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| fail(e.to_string()))?;
        let rgb = image.to_rgb8();
        let mut ppm = format!("P6\n{} {}\n255\n", rgb.width(), rgb.height()).into_bytes();
        ppm.extend_from_slice(rgb.as_raw());
        let mut stdin = child.stdin.take().expect("stdin is piped");
        let writer = std::thread::spawn(move || stdin.write_all(&ppm));
        let stdout = child.stdout.take().expect("stdout is piped");
        let mut boxes = Vec::new();
        for line in BufReader::new(stdout).lines() {
            let line = line.map_err(|e| fail(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let b: CommandBox = serde_json::from_str(&line).map_err(|e| fail(format!("bad output `{line}`: {e}")))?;
            boxes.push(FaceBox {
                x: b.x,
                y: b.y,
                w: b.w,
                h: b.h,
                confidence: b.confidence,
            });
        }
        let status = child.wait().map_err(|e| fail(e.to_string()))?;
        // A detector may exit without reading its whole input.
        let _ = writer.join();
        if !status.success() {
            return Err(fail(format!("exited with {status}")));
        }
        boxes.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        Ok(boxes)
    }
}

/// Resolve a detector id: `full-frame`, or `cmd:<program> [args...]`.
pub fn localizer_from_id(id: &str) -> Result<Box<dyn FaceLocalizer>> {
    if id == "full-frame" {
        return Ok(Box::new(FullFrameLocalizer));
    }
    if let Some(cmd) = id.strip_prefix("cmd:") {
        let mut parts = cmd.split_whitespace().map(String::from);
        if let Some(program) = parts.next() {
            return Ok(Box::new(CommandLocalizer::new(program, parts.collect())));
        }
    }
    Err(Error::InvalidArgument(format!(
        "unknown detector `{id}` (expected `full-frame` or `cmd:<program>`)"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(Vec<FaceBox>);

    impl FaceLocalizer for Fixed {
        fn id(&self) -> &str {
            "fixed"
        }
        fn detect(&self, _: &str, _: &RgbImage) -> Result<Vec<FaceBox>> {
            Ok(self.0.clone())
        }
    }

    struct Broken;

    impl FaceLocalizer for Broken {
        fn id(&self) -> &str {
            "broken"
        }
        fn detect(&self, _: &str, _: &RgbImage) -> Result<Vec<FaceBox>> {
            Err(Error::InvalidArgument("backend exploded".into()))
        }
    }

    fn bx(conf: f64) -> FaceBox {
        FaceBox { x: 1.0, y: 1.0, w: 4.0, h: 4.0, confidence: conf }
    }

    fn img() -> RgbImage {
        RgbImage::filled(10, 10, [0.5; 3])
    }

    #[test]
    fn single_box_above_threshold() {
        let got = localize_face(&img(), "f", &Fixed(vec![bx(0.9)]), 0.5).unwrap();
        assert_eq!(got, Some(bx(0.9)));
    }

    #[test]
    fn all_below_threshold_is_none() {
        let got = localize_face(&img(), "f", &Fixed(vec![bx(0.4), bx(0.3)]), 0.5).unwrap();
        assert_eq!(got, None);
    }

    #[test]
    fn picks_highest_confidence() {
        let got = localize_face(&img(), "f", &Fixed(vec![bx(0.7), bx(0.9)]), 0.5).unwrap();
        assert_eq!(got.unwrap().confidence, 0.9);
    }

    #[test]
    fn invalid_boxes_are_skipped() {
        let outside = FaceBox { x: 50.0, ..bx(0.99) };
        let got = localize_face(&img(), "f", &Fixed(vec![outside, bx(0.6)]), 0.5).unwrap();
        assert_eq!(got.unwrap().confidence, 0.6);
    }

    #[test]
    fn backend_error_is_distinct_from_none() {
        let err = localize_face(&img(), "f", &Broken, 0.5).unwrap_err();
        assert_eq!(err.code(), "LOCALIZER_FAILURE");
    }

    #[test]
    fn empty_image_is_rejected() {
        let empty = RgbImage::filled(0, 0, [0.0; 3]);
        assert!(localize_face(&empty, "f", &FullFrameLocalizer, 0.5).is_err());
    }

    #[test]
    fn sidecar_keyed_by_frame() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("boxes.jsonl");
        std::fs::write(
            &path,
            "{\"frame_id\":\"a\",\"x\":1,\"y\":1,\"w\":3,\"h\":3,\"confidence\":0.6}\n{\"frame_id\":\"a\",\"x\":0,\"y\":0,\"w\":5,\"h\":5,\"confidence\":0.8}\n",
        )
        .unwrap();
        let loc = load_sidecar(&path).unwrap();
        assert_eq!(loc.detect("a", &img()).unwrap()[0].confidence, 0.8);
        assert_eq!(localize_face(&img(), "b", &loc, 0.5).unwrap(), None);
    }

    #[cfg(unix)]
    #[test]
    fn command_localizer_reads_stdout_boxes() {
        let loc = CommandLocalizer::new(
            "sh",
            vec!["-c".into(), r#"cat >/dev/null; echo '{"x":1,"y":2,"w":3,"h":4,"confidence":0.75}'"#.into()],
        );
        let got = localize_face(&img(), "f", &loc, 0.5).unwrap().unwrap();
        assert_eq!((got.x, got.y, got.w, got.h, got.confidence), (1.0, 2.0, 3.0, 4.0, 0.75));

        let failing = CommandLocalizer::new("sh", vec!["-c".into(), "exit 3".into()]);
        assert_eq!(localize_face(&img(), "f", &failing, 0.5).unwrap_err().code(), "LOCALIZER_FAILURE");
    }
}
