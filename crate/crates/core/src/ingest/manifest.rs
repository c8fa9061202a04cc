//! Line-delimited manifest format.
//!
//! ```text
//! {"format":"affpipe-manifest","version":1,"provenance":"...","subjects":[{"subject_id":"s1","sex":"female","age_years":3.0,"neutered":true}]}
//! {"frame_id":"v1-f00000","image_ref":"frames/v1/v1-f00000.png","subject_id":"s1","video_id":"v1","label":"positive","frame_index":0}
//! ...
//! ```
//!
//! The first line is the header carrying subject metadata; every following
//! non-blank line is one [`FrameRecord`].

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{validate_manifest, DatasetManifest, FrameRecord, SubjectMeta};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
const FORMAT_TAG: &str = "affpipe-manifest";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    #[serde(default)]
    provenance: String,
    #[serde(default)]
    subjects: Vec<SubjectMeta>,
}

/// Parse manifest text without validating it.
pub fn parse_manifest(text: &str, path: &Path) -> Result<DatasetManifest> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());

    let (hline, htext) = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing manifest header".into()))?;
    let header: Header =
        serde_json::from_str(htext).map_err(|e| parse_err(hline, format!("bad header: {e}")))?;
    if header.format != FORMAT_TAG {
        return Err(parse_err(hline, format!("unexpected format tag `{}`", header.format)));
    }
    if header.version != MANIFEST_VERSION {
        return Err(parse_err(
            hline,
            format!("unsupported manifest version {}", header.version),
        ));
    }

    let mut records = Vec::new();
    for (line, text) in lines {
        let record: FrameRecord =
            serde_json::from_str(text).map_err(|e| parse_err(line, e.to_string()))?;
        records.push(record);
    }
    Ok(DatasetManifest {
        records,
        subjects: header.subjects,
        provenance: header.provenance,
    })
}

/// Load, parse and validate a manifest. Warnings are logged; any error-level
/// issue fails the load.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest = parse_manifest(&text, path)?;
    let issues = validate_manifest(&manifest);
    if issues.iter().any(|i| i.is_error()) {
        return Err(Error::Validation(issues));
    }
    for issue in &issues {
        log::warn!("{}: {issue}", path.display());
    }
    Ok(manifest)
}

pub fn write_manifest(manifest: &DatasetManifest, out: &mut impl Write) -> std::io::Result<()> {
    let header = Header {
        format: FORMAT_TAG.into(),
        version: MANIFEST_VERSION,
        provenance: manifest.provenance.clone(),
        subjects: manifest.subjects.clone(),
    };
    writeln!(out, "{}", serde_json::to_string(&header)?)?;
    for record in &manifest.records {
        writeln!(out, "{}", serde_json::to_string(record)?)?;
    }
    Ok(())
}

pub fn save_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_manifest(manifest, &mut buf).map_err(|e| Error::io(path, e))?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}
