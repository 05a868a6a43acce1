//! On-disk dataset format: `manifest.json` plus raw little-endian arrays per subject.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LabelVolume, Volume};
use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectEntry {
    pub id: String,
    pub slices: usize,
    pub height: usize,
    pub width: usize,
    pub spacing: (f64, f64),
    /// Path of the `f32` intensity array, relative to the manifest.
    pub image: String,
    /// Path of the `u8` label array, relative to the manifest.
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub num_classes: u8,
    pub image_dtype: String,
    pub label_dtype: String,
    pub subjects: Vec<SubjectEntry>,
}

pub type DatasetEntry = (Volume, Option<LabelVolume>);

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes `entries` under `dir` (created if needed) and returns the manifest path.
pub fn save_dataset(dir: &Path, entries: &[DatasetEntry], num_classes: u8) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut subjects = Vec::with_capacity(entries.len());
    for (vol, lab) in entries {
        let image = format!("{}_img.f32", vol.subject_id);
        let bytes: Vec<u8> = vol.intensities.iter().flat_map(|v| v.to_le_bytes()).collect();
        let p = dir.join(&image);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        let label = match lab {
            Some(l) => {
                if !l.matches(vol) {
                    return Err(Error::DimMismatch(format!("labels of {}", vol.subject_id)));
                }
                let name = format!("{}_lab.u8", vol.subject_id);
                let p = dir.join(&name);
                fs::write(&p, &l.labels).map_err(|e| Error::io(&p, e))?;
                Some(name)
            }
            None => None,
        };
        subjects.push(SubjectEntry {
            id: vol.subject_id.clone(),
            slices: vol.slices,
            height: vol.height,
            width: vol.width,
            spacing: vol.spacing,
            image,
            label,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        num_classes,
        image_dtype: "f32le".into(),
        label_dtype: "u8".into(),
        subjects,
    };
    let path = dir.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| format_err(&path, e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))?;
    if m.format_version != FORMAT_VERSION {
        return Err(format_err(path, format!("unsupported format version {}", m.format_version)));
    }
    if m.image_dtype != "f32le" || m.label_dtype != "u8" {
        return Err(format_err(path, "unsupported dtype"));
    }
    Ok(m)
}

/// Loads every subject listed in the manifest at `manifest_path` (a file, or a directory
/// containing `manifest.json`). Returns the entries and the class count.
pub fn load_dataset(manifest_path: &Path) -> Result<(Vec<DatasetEntry>, u8)> {
    let manifest_path = if manifest_path.is_dir() {
        manifest_path.join(MANIFEST_NAME)
    } else {
        manifest_path.to_path_buf()
    };
    let m = read_manifest(&manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::with_capacity(m.subjects.len());
    for s in &m.subjects {
        let n = s.slices * s.height * s.width;
        let p = base.join(&s.image);
        let raw = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        if raw.len() != 4 * n {
            return Err(Error::DimMismatch(format!(
                "{}: {} bytes for {}x{}x{} f32",
                p.display(),
                raw.len(),
                s.slices,
                s.height,
                s.width
            )));
        }
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let vol = Volume::new(data, s.slices, s.height, s.width, s.spacing, s.id.clone())?;
        let lab = match &s.label {
            None => None,
            Some(name) => {
                let p = base.join(name);
                let raw = fs::read(&p).map_err(|e| Error::io(&p, e))?;
                if raw.len() != n {
                    return Err(Error::DimMismatch(format!(
                        "{}: {} labels for {}x{}x{}",
                        p.display(),
                        raw.len(),
                        s.slices,
                        s.height,
                        s.width
                    )));
                }
                Some(LabelVolume::new(raw, s.slices, s.height, s.width, m.num_classes)?)
            }
        };
        out.push((vol, lab));
    }
    Ok((out, m.num_classes))
}
