//! Building a manifest from a directory of labelled, pre-cropped frames.
//!
//! Layout: `<root>/real/<clip>/<frame>` and `<root>/fake/<method>/<clip>/<frame>`.
//! Frames are image files taken in file-name order; clip folders without
//! any frame are skipped, matching clips where no face was found.

use std::path::{Path, PathBuf};

use super::manifest::{Label, Manifest, ManifestEntry, Split, ORIGINAL_METHOD};
use crate::error::{Error, Result};

pub const FRAME_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for item in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = item.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn sorted_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for item in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = item.map_err(|e| Error::io(dir, e))?.path();
        let is_frame = p
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| FRAME_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if p.is_file() && is_frame {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// The id a clip gets when scanned: `real_<clip>` or `fake_<method>_<clip>`.
pub fn clip_id(label: Label, method: &str, clip: &str) -> String {
    match label {
        Label::Real => format!("real_{clip}"),
        Label::Fake => format!("fake_{method}_{clip}"),
    }
}

/// Unassigned manifest of every clip under `root`, reals first, then fakes by method.
pub fn scan_frame_tree(root: &Path) -> Result<Manifest> {
    if !root.is_dir() {
        return Err(Error::invalid(format!("{} is not a directory", root.display())));
    }
    let mut clips: Vec<(Label, String, PathBuf)> = Vec::new();
    let real = root.join("real");
    if real.is_dir() {
        for c in sorted_dirs(&real)? {
            clips.push((Label::Real, ORIGINAL_METHOD.into(), c));
        }
    }
    let fake = root.join("fake");
    if fake.is_dir() {
        for m in sorted_dirs(&fake)? {
            for c in sorted_dirs(&m)? {
                clips.push((Label::Fake, name(&m), c));
            }
        }
    }
    let mut entries = Vec::new();
    for (label, method, dir) in clips {
        let frames = sorted_frames(&dir)?;
        if frames.is_empty() {
            continue;
        }
        let rel = |p: &PathBuf| p.strip_prefix(root).map(Path::to_path_buf).unwrap_or_else(|_| p.clone());
        entries.push(ManifestEntry {
            sample_id: clip_id(label, &method, &name(&dir)),
            frames: frames.iter().map(rel).collect(),
            label,
            method,
            split: Split::Unassigned,
        });
    }
    if entries.is_empty() {
        return Err(Error::Empty(format!("no frame folders under {}", root.display())));
    }
    Manifest::new(root, entries)
}
