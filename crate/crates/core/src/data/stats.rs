//! Per-label, per-method and per-split counts of a manifest.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::manifest::{Label, ManifestEntry, Split};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total: usize,
    /// Always holds `real` and `fake`.
    pub by_label: BTreeMap<String, usize>,
    pub by_method: BTreeMap<String, usize>,
    /// Always holds every split name.
    pub by_split: BTreeMap<String, usize>,
}

impl DatasetStats {
    pub fn label(&self, l: Label) -> usize {
        self.by_label[l.as_str()]
    }

    pub fn split(&self, s: Split) -> usize {
        self.by_split[s.as_str()]
    }
}

pub fn compute_dataset_stats(entries: &[ManifestEntry]) -> DatasetStats {
    let mut s = DatasetStats {
        total: entries.len(),
        by_label: [Label::Real, Label::Fake].iter().map(|l| (l.to_string(), 0)).collect(),
        by_split: Split::ALL.iter().map(|v| (v.to_string(), 0)).collect(),
        ..Default::default()
    };
    for e in entries {
        *s.by_label.get_mut(e.label.as_str()).expect("seeded") += 1;
        *s.by_split.get_mut(e.split.as_str()).expect("seeded") += 1;
        *s.by_method.entry(e.method.clone()).or_default() += 1;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(i: usize, label: Label, method: &str) -> ManifestEntry {
        ManifestEntry {
            sample_id: i.to_string(),
            frames: vec!["f".into()],
            label,
            method: method.into(),
            split: Split::Unassigned,
        }
    }

    #[test]
    fn counts_are_exact() {
        let e = vec![
            entry(0, Label::Real, "original"),
            entry(1, Label::Real, "original"),
            entry(2, Label::Fake, "wav2lip"),
            entry(3, Label::Fake, "wav2lip"),
            entry(4, Label::Fake, "retalking"),
        ];
        let s = compute_dataset_stats(&e);
        assert_eq!((s.label(Label::Real), s.label(Label::Fake)), (2, 3));
        assert_eq!(s.by_method.values().sum::<usize>(), 5);
        assert_eq!(s.by_method["wav2lip"], 2);
        assert_eq!(s.split(Split::Unassigned), 5);
    }

    #[test]
    fn empty_manifest_is_all_zero() {
        let s = compute_dataset_stats(&[]);
        assert_eq!(s.total, 0);
        assert!(s.by_label.values().chain(s.by_split.values()).all(|&c| c == 0));
        assert!(s.by_method.is_empty());
    }
}
