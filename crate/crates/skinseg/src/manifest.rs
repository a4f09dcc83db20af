//! Line-delimited dataset manifests.
//!
//! Each non-empty line not starting with `#` holds four whitespace-separated
//! fields: `id image skin_mask body_mask`, where an absent mask is written `-`.
//! Paths are relative to the manifest's directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use skinseg_core::dataset::{LabelFlags, Sample};

use crate::error::{Error, Result};
use crate::io::{read_image, read_mask, read_text, write_text};

pub const ABSENT: &str = "-";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub skin_mask: Option<PathBuf>,
    pub body_mask: Option<PathBuf>,
}

impl ManifestEntry {
    pub fn flags(&self) -> LabelFlags {
        LabelFlags { skin: self.skin_mask.is_some(), body: self.body_mask.is_some() }
    }
}

fn validation(msg: String) -> Error {
    skinseg_core::Error::Validation(msg).into()
}

/// Parses a manifest and checks that every referenced file exists.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = read_text(path)?;
    let dir = path.parent().unwrap_or(Path::new(""));
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [id, image, skin, body] = fields[..] else {
            return Err(Error::Input(format!("{}:{}: expected 4 fields, found {}", path.display(), lineno + 1, fields.len())));
        };
        if !seen.insert(id.to_string()) {
            return Err(validation(format!("duplicate sample id '{id}' in {}", path.display())));
        }
        let resolve = |p: &str| -> Result<Option<PathBuf>> {
            if p == ABSENT {
                return Ok(None);
            }
            let full = dir.join(p);
            if !full.is_file() {
                return Err(Error::Input(format!("sample '{id}': missing file {}", full.display())));
            }
            Ok(Some(full))
        };
        let image = resolve(image)?.ok_or_else(|| Error::Input(format!("sample '{id}': image path is required")))?;
        let entry = ManifestEntry { id: id.to_string(), image, skin_mask: resolve(skin)?, body_mask: resolve(body)? };
        if entry.skin_mask.is_none() && entry.body_mask.is_none() {
            return Err(validation(format!("sample '{id}' has neither a skin nor a body mask")));
        }
        out.push(entry);
    }
    Ok(out)
}

/// Writes entries with paths made relative to the manifest's directory where possible.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new(""));
    let rel = |p: &Option<PathBuf>| match p {
        Some(p) => p.strip_prefix(dir).unwrap_or(p).display().to_string(),
        None => ABSENT.to_string(),
    };
    let mut text = String::from("# id\timage\tskin_mask\tbody_mask\n");
    for e in entries {
        text.push_str(&format!("{}\t{}\t{}\t{}\n", e.id, rel(&Some(e.image.clone())), rel(&e.skin_mask), rel(&e.body_mask)));
    }
    write_text(path, &text)
}

/// Loads one sample; with `size`, the image is resized bilinearly and the
/// masks by nearest neighbor to `size x size`.
pub fn load_sample(entry: &ManifestEntry, size: Option<usize>) -> Result<Sample> {
    let image = read_image(&entry.image)?;
    let (w, h) = (image.width(), image.height());
    let read = |p: &Option<PathBuf>| -> Result<Option<_>> {
        let Some(p) = p else { return Ok(None) };
        let m = read_mask(p)?;
        if m.width() != w || m.height() != h {
            return Err(validation(format!(
                "sample '{}': mask {} is {}x{}, image is {}x{}",
                entry.id,
                p.display(),
                m.width(),
                m.height(),
                w,
                h
            )));
        }
        Ok(Some(m))
    };
    let sample = Sample::new(entry.id.clone(), image, read(&entry.skin_mask)?, read(&entry.body_mask)?)?;
    Ok(match size {
        Some(s) if s != sample.image.width() || s != sample.image.height() => sample.resized(s),
        _ => sample,
    })
}

pub fn load_dataset(manifest: &Path, size: Option<usize>) -> Result<Vec<Sample>> {
    load_manifest(manifest)?.iter().map(|e| load_sample(e, size)).collect()
}
