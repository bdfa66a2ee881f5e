//! Line-delimited dataset file.
//!
//! ```text
//! {"manifest": {...}}                                         first line
//! {"segment": {"index": 0, "segment": {...}, "features": [..]}}    one per segment
//! {"pref": {"first": 3, "second": 17, "label": 1.0, ...}}          one per record
//! ```
//!
//! All floats are written in shortest round-trip form and parsed with
//! correct rounding, so every binary64 value survives unchanged.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::pool::{Dataset, DatasetManifest, PreferenceRecord, DATASET_VERSION};
use super::task::{StoredSegment, FEATURES};
use crate::error::{Error, Result};
use crate::segment::Segment;

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Line {
    Manifest(DatasetManifest),
    Segment(SegmentLine),
    Pref(PreferenceRecord),
}

#[derive(Serialize, Deserialize)]
struct SegmentLine {
    index: usize,
    segment: Segment,
    features: [f64; FEATURES],
}

pub fn to_jsonl(dataset: &Dataset) -> Result<String> {
    let mut out = String::new();
    let mut push = |line: &Line| -> Result<()> {
        out.push_str(&serde_json::to_string(line)?);
        out.push('\n');
        Ok(())
    };
    push(&Line::Manifest(dataset.manifest.clone()))?;
    for (index, s) in dataset.segments.iter().enumerate() {
        push(&Line::Segment(SegmentLine {
            index,
            segment: s.segment.clone(),
            features: s.features,
        }))?;
    }
    for r in &dataset.records {
        push(&Line::Pref(r.clone()))?;
    }
    Ok(out)
}

pub fn from_jsonl(text: &str) -> Result<Dataset> {
    let mut manifest = None;
    let mut segments = Vec::new();
    let mut records = Vec::new();
    let mut errors = String::new();
    for (n, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Line>(raw) {
            Ok(Line::Manifest(m)) if n == 0 => manifest = Some(m),
            Ok(Line::Manifest(_)) => {
                let _ = writeln!(errors, "line {}: manifest must be the first line", n + 1);
            }
            Ok(Line::Segment(s)) => {
                if s.index != segments.len() {
                    let _ = writeln!(
                        errors,
                        "line {}: segment index {} out of order",
                        n + 1,
                        s.index
                    );
                }
                segments.push(StoredSegment {
                    segment: s.segment,
                    features: s.features,
                });
            }
            Ok(Line::Pref(r)) => records.push(r),
            Err(e) => {
                let _ = writeln!(errors, "line {}: {e}", n + 1);
            }
        }
    }
    if !errors.is_empty() {
        return Err(Error::Data(errors.trim_end().to_string()));
    }
    let manifest = manifest.ok_or_else(|| Error::Data("missing manifest line".into()))?;
    if manifest.format_version != DATASET_VERSION {
        return Err(Error::Data(format!(
            "unsupported dataset version {} (expected {DATASET_VERSION})",
            manifest.format_version
        )));
    }
    if manifest.segments != segments.len() || manifest.records != records.len() {
        return Err(Error::Data(
            "manifest counts do not match file contents".into(),
        ));
    }
    let d = Dataset {
        manifest,
        segments,
        records,
    };
    d.validate()?;
    Ok(d)
}

pub fn save(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_jsonl(dataset)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_jsonl(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, GenConfig, RosterSpec};

    #[test]
    fn round_trip() {
        let cfg = GenConfig {
            segments: 10,
            ..GenConfig::desk(RosterSpec::opposing(0.05), 12, 3)
        };
        let d = generate(&cfg, 7).unwrap();
        let text = to_jsonl(&d).unwrap();
        let back = from_jsonl(&text).unwrap();
        assert_eq!(back, d);
        assert_eq!(to_jsonl(&back).unwrap(), text);
    }

    #[test]
    fn malformed_lines_are_reported() {
        let err = from_jsonl("{\"manifest\": 3}\nnot json\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 1") && err.contains("line 2"), "{err}");
    }
}
