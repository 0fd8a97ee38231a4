//! Replacing sample ids with opaque tokens, keeping a reversible map.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::manifest::{write_atomic, ManifestEntry};
use crate::error::{Error, Result};

/// `(token, original_id)` pairs in entry order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AnonymizationMap {
    pub pairs: Vec<(String, String)>,
}

impl AnonymizationMap {
    /// Two tab-separated columns, one pair per line, written atomically.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for (token, original) in &self.pairs {
            if original.contains(['\t', '\n', '\r']) {
                return Err(Error::invalid(format!("sample id {original:?} cannot be stored in a TSV map")));
            }
            text.push_str(&format!("{token}\t{original}\n"));
        }
        write_atomic(path, text.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (token, original) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "expected `token<TAB>original_id`".into(),
            })?;
            pairs.push((token.to_string(), original.to_string()));
        }
        Ok(AnonymizationMap { pairs })
    }

    /// Puts the original ids back.
    pub fn restore(&self, entries: &[ManifestEntry]) -> Result<Vec<ManifestEntry>> {
        let lookup: HashMap<&str, &str> = self.pairs.iter().map(|(t, o)| (t.as_str(), o.as_str())).collect();
        entries
            .iter()
            .map(|e| {
                let original = lookup
                    .get(e.sample_id.as_str())
                    .ok_or_else(|| Error::invalid(format!("token `{}` is not in the map", e.sample_id)))?;
                Ok(ManifestEntry {
                    sample_id: original.to_string(),
                    ..e.clone()
                })
            })
            .collect()
    }
}

/// Replaces every sample id with a distinct 16-hex-digit token drawn from
/// the seeded generator; labels, methods, frames and splits are untouched.
pub fn anonymize_names(entries: &[ManifestEntry], seed: u64) -> (Vec<ManifestEntry>, AnonymizationMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = HashSet::with_capacity(entries.len());
    let mut map = AnonymizationMap::default();
    let out = entries
        .iter()
        .map(|e| {
            let token = loop {
                let t = format!("{:016x}", rng.gen::<u64>());
                if used.insert(t.clone()) {
                    break t;
                }
            };
            map.pairs.push((token.clone(), e.sample_id.clone()));
            ManifestEntry {
                sample_id: token,
                ..e.clone()
            }
        })
        .collect();
    (out, map)
}
