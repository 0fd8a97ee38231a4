//! Line-delimited JSON manifests.
//!
//! An optional first line `{"header": {"root": "<dir>"}}` declares the
//! directory frame paths are relative to; a relative root is taken from the
//! manifest's own directory, and without a header the manifest's directory
//! is the root. The header also records the split settings once applied.
//! Every other non-blank line is one entry with the fields
//! `sample_id, frames, label, method, split` in that order.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::split::SplitSpec;
use crate::detector::{FAKE, REAL};
use crate::error::{Error, Result};

/// Method tag every real sample carries.
pub const ORIGINAL_METHOD: &str = "original";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    /// Class index: real 0, fake 1.
    pub fn index(self) -> usize {
        match self {
            Label::Real => REAL,
            Label::Fake => FAKE,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            REAL => Ok(Label::Real),
            FAKE => Ok(Label::Fake),
            _ => Err(Error::invalid(format!("class index {i} is neither real nor fake"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Fake => "fake",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(Label::Real),
            "fake" => Ok(Label::Fake),
            _ => Err(Error::invalid(format!("unknown label `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    #[default]
    Unassigned,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Test, Split::Unassigned];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown split `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    /// Frame image paths in temporal order, relative to the manifest root.
    pub frames: Vec<PathBuf>,
    pub label: Label,
    pub method: String,
    #[serde(default)]
    pub split: Split,
}

impl ManifestEntry {
    pub fn validate(&self) -> Result<()> {
        let bad = |message: &str| Error::InvalidEntry {
            id: self.sample_id.clone(),
            message: message.into(),
        };
        if self.sample_id.is_empty() {
            return Err(bad("sample_id is empty"));
        }
        if self.frames.is_empty() {
            return Err(bad("no frames listed"));
        }
        if self.method.is_empty() {
            return Err(bad("method is empty"));
        }
        if self.label == Label::Real && self.method != ORIGINAL_METHOD {
            return Err(bad(&format!("real samples must have method `{ORIGINAL_METHOD}`")));
        }
        Ok(())
    }
}

/// Label is read as a string first so an unknown value becomes a validation
/// error naming the sample rather than a bare parse failure.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    sample_id: String,
    frames: Vec<PathBuf>,
    label: String,
    method: String,
    #[serde(default)]
    split: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    root: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<SplitSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    header: Header,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory frame paths resolve against.
    pub root: PathBuf,
    /// Settings the splits were drawn with, if any.
    pub split: Option<SplitSpec>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Result<Self> {
        check_entries(&entries)?;
        Ok(Manifest {
            root: root.into(),
            split: None,
            entries,
        })
    }

    pub fn resolve(&self, frame: &Path) -> PathBuf {
        self.root.join(frame)
    }

    /// Parses manifest text; `origin` names the source in errors and anchors a relative root.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let base = origin.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut root = base.clone();
        let mut split_spec = None;
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        let mut first = true;
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: origin.to_path_buf(),
                line: line_no,
                message,
            };
            if std::mem::take(&mut first) {
                if let Ok(h) = serde_json::from_str::<HeaderLine>(trimmed) {
                    root = base.join(h.header.root);
                    split_spec = h.header.split;
                    continue;
                }
            }
            let raw: RawEntry = serde_json::from_str(trimmed).map_err(|e| parse_err(e.to_string()))?;
            let with_line = |e: Error| match e {
                Error::InvalidArgument(m) => Error::InvalidEntry {
                    id: raw.sample_id.clone(),
                    message: format!("line {line_no}: {m}"),
                },
                other => other,
            };
            let label = raw.label.parse::<Label>().map_err(with_line)?;
            let split = match &raw.split {
                Some(s) => s.parse::<Split>().map_err(with_line)?,
                None => Split::Unassigned,
            };
            let entry = ManifestEntry {
                sample_id: raw.sample_id.clone(),
                frames: raw.frames,
                label,
                method: raw.method,
                split,
            };
            entry.validate().map_err(|e| match e {
                Error::InvalidEntry { id, message } => Error::InvalidEntry {
                    id,
                    message: format!("line {line_no}: {message}"),
                },
                other => other,
            })?;
            if !seen.insert(entry.sample_id.clone()) {
                return Err(Error::DuplicateId(entry.sample_id));
            }
            entries.push(entry);
        }
        Ok(Manifest {
            root,
            split: split_spec,
            entries,
        })
    }

    pub fn to_jsonl(&self, root_field: &Path) -> Result<String> {
        let ser = |e: serde_json::Error| Error::Serde(e.to_string());
        let header = HeaderLine {
            header: Header {
                root: root_field.to_path_buf(),
                split: self.split,
            },
        };
        let mut out = serde_json::to_string(&header).map_err(ser)?;
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).map_err(ser)?);
            out.push('\n');
        }
        Ok(out)
    }
}

fn check_entries(entries: &[ManifestEntry]) -> Result<()> {
    let mut seen = HashSet::new();
    for e in entries {
        e.validate()?;
        if !seen.insert(e.sample_id.as_str()) {
            return Err(Error::DuplicateId(e.sample_id.clone()));
        }
    }
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Manifest::parse(&text, path)
}

/// Writes atomically. The header stores the root relative to the manifest's
/// directory when possible so the corpus can be moved as a whole.
pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    check_entries(&manifest.entries)?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let root_field = manifest
        .root
        .strip_prefix(&dir)
        .map(Path::to_path_buf)
        .unwrap_or_else(|_| manifest.root.clone());
    let text = manifest.to_jsonl(&root_field)?;
    write_atomic(path, text.as_bytes())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: &str, label: &str, method: &str) -> String {
        format!(r#"{{"sample_id":"{id}","frames":["{id}/0.png"],"label":"{label}","method":"{method}"}}"#)
    }

    #[test]
    fn three_valid_lines() {
        let text = [line("a", "real", "original"), line("b", "fake", "wav2lip"), line("c", "fake", "retalking")]
            .join("\n");
        let m = Manifest::parse(&text, Path::new("/data/m.jsonl")).unwrap();
        assert_eq!(m.entries.len(), 3);
        assert_eq!(m.root, Path::new("/data"));
        assert_eq!(m.entries[1].label, Label::Fake);
        assert_eq!(m.entries[2].split, Split::Unassigned);
    }

    #[test]
    fn header_sets_root() {
        let text = format!("{{\"header\":{{\"root\":\"frames\"}}}}\n\n{}\n", line("a", "real", "original"));
        let m = Manifest::parse(&text, Path::new("/data/m.jsonl")).unwrap();
        assert_eq!(m.resolve(Path::new("a/0.png")), Path::new("/data/frames/a/0.png"));
        assert_eq!(m.split, None);
    }

    #[test]
    fn header_records_split_settings() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut m = Manifest::parse(&line("a", "real", "original"), &path).unwrap();
        m.split = Some(SplitSpec::small_corpus(4));
        write_manifest(&path, &m).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap().contains(r#""train":0.8,"val":0.15,"test":0.05"#));
        assert_eq!(load_manifest(&path).unwrap(), m);
    }

    #[test]
    fn duplicate_id_is_named() {
        let text = [line("dup", "real", "original"), line("dup", "fake", "wav2lip")].join("\n");
        match Manifest::parse(&text, Path::new("m.jsonl")) {
            Err(Error::DuplicateId(id)) => assert_eq!(id, "dup"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_label_is_rejected_with_line() {
        let text = [line("a", "real", "original"), line("b", "unknown", "x")].join("\n");
        match Manifest::parse(&text, Path::new("m.jsonl")) {
            Err(Error::InvalidEntry { id, message }) => {
                assert_eq!(id, "b");
                assert!(message.starts_with("line 2"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let text = format!("{}\n{{not json\n", line("a", "real", "original"));
        assert!(matches!(Manifest::parse(&text, Path::new("m.jsonl")), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn real_entries_must_be_original() {
        let text = line("a", "real", "wav2lip");
        assert!(matches!(Manifest::parse(&text, Path::new("m.jsonl")), Err(Error::InvalidEntry { .. })));
        let empty = r#"{"sample_id":"a","frames":[],"label":"fake","method":"x"}"#;
        assert!(matches!(Manifest::parse(empty, Path::new("m.jsonl")), Err(Error::InvalidEntry { .. })));
    }

    #[test]
    fn written_field_order_is_fixed() {
        let e = ManifestEntry {
            sample_id: "s".into(),
            frames: vec!["f.png".into()],
            label: Label::Fake,
            method: "wav2lip".into(),
            split: Split::Val,
        };
        assert_eq!(
            serde_json::to_string(&e).unwrap(),
            r#"{"sample_id":"s","frames":["f.png"],"label":"fake","method":"wav2lip","split":"val"}"#
        );
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let text = [line("a", "real", "original"), line("b", "fake", "wav2lip")].join("\n");
        let m = Manifest::parse(&text, &path).unwrap();
        write_manifest(&path, &m).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), m);
        assert!(matches!(load_manifest(&dir.path().join("none")), Err(Error::Io { .. })));
    }
}
