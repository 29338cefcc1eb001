//! Line-delimited JSON manifests, one sample per line.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Fake => "fake",
        }
    }

    /// Binary target used for classification: fake is the positive class.
    pub fn target(self) -> f64 {
        match self {
            Label::Real => 0.0,
            Label::Fake => 1.0,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "real" => Some(Label::Real),
            "fake" => Some(Label::Fake),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "valid" => Some(Split::Valid),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub id: String,
    pub label: Label,
    pub split: Split,
    pub style_path: PathBuf,
    pub linguistics_path: PathBuf,
    pub dataset: String,
    pub attack_id: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    label: String,
    split: String,
    style_path: String,
    linguistics_path: String,
    dataset: String,
    #[serde(default)]
    attack_id: Option<String>,
}

/// Parses a manifest. Relative embedding paths are resolved against the
/// manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            reason: e.to_string(),
        })?;
        let label = Label::parse(&raw.label).ok_or_else(|| {
            Error::Validation(format!(
                "{}: line {line_no}: unknown label '{}' (expected real or fake)",
                path.display(),
                raw.label
            ))
        })?;
        let split = Split::parse(&raw.split).ok_or_else(|| {
            Error::Validation(format!(
                "{}: line {line_no}: unknown split '{}'",
                path.display(),
                raw.split
            ))
        })?;
        if let Some(first) = seen.insert(raw.id.clone(), line_no) {
            return Err(Error::Validation(format!(
                "{}: line {line_no}: duplicate id '{}' (first seen on line {first})",
                path.display(),
                raw.id
            )));
        }
        records.push(ManifestRecord {
            id: raw.id,
            label,
            split,
            style_path: base.join(raw.style_path),
            linguistics_path: base.join(raw.linguistics_path),
            dataset: raw.dataset,
            attack_id: raw.attack_id,
        });
    }
    Ok(records)
}

/// Writes a manifest; paths below the manifest's directory are stored relative.
pub fn write_manifest(records: &[ManifestRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let rel = |p: &Path| {
        p.strip_prefix(base)
            .unwrap_or(p)
            .to_string_lossy()
            .into_owned()
    };
    let mut out = String::new();
    for r in records {
        let raw = RawRecord {
            id: r.id.clone(),
            label: r.label.as_str().to_string(),
            split: r.split.as_str().to_string(),
            style_path: rel(&r.style_path),
            linguistics_path: rel(&r.linguistics_path),
            dataset: r.dataset.clone(),
            attack_id: r.attack_id.clone(),
        };
        out.push_str(&serde_json::to_string(&raw).expect("manifest records serialize"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: &str, label: &str) -> String {
        format!(
            r#"{{"id":"{id}","label":"{label}","split":"train","style_path":"s/{id}.slem","linguistics_path":"l/{id}.slem","dataset":"synth","attack_id":null}}"#
        )
    }

    fn write(lines: &[String]) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.jsonl");
        fs::write(&p, lines.join("\n")).unwrap();
        (dir, p)
    }

    #[test]
    fn three_lines_three_records() {
        let (dir, p) = write(&[line("a", "real"), line("b", "fake"), line("c", "real")]);
        let recs = load_manifest(&p).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[1].label, Label::Fake);
        assert_eq!(recs[0].style_path, dir.path().join("s/a.slem"));
    }

    #[test]
    fn duplicate_id_names_the_line() {
        let (_d, p) = write(&[line("a", "real"), line("a", "real")]);
        let err = load_manifest(&p).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn unknown_label_is_validation_error() {
        let (_d, p) = write(&[line("a", "spoof")]);
        assert!(matches!(load_manifest(&p).unwrap_err(), Error::Validation(_)));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let (_d, p) = write(&[line("a", "real"), "{not json".to_string()]);
        match load_manifest(&p).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn write_then_load_round_trips() {
        let (dir, p) = write(&[line("a", "real"), line("b", "fake")]);
        let recs = load_manifest(&p).unwrap();
        let p2 = dir.path().join("copy.jsonl");
        write_manifest(&recs, &p2).unwrap();
        assert_eq!(load_manifest(&p2).unwrap(), recs);
        assert!(fs::read_to_string(&p2).unwrap().contains(r#""style_path":"s/a.slem""#));
    }
}
