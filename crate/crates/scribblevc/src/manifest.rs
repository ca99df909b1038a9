//! Dataset manifests: one JSON document per split, with pixel files stored
//! next to it and referenced by relative path.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use scribblevc_core::dataset::{ClassVector, DenseMask, Image, ScribbleMask};
use scribblevc_core::train::TrainSample;

use crate::error::{Error, Result};
use crate::png;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub scribble: PathBuf,
    /// Multi-hot, one entry per class.
    pub classes: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub split: String,
    pub seed: u64,
    pub records: Vec<ManifestRecord>,
}

/// A manifest record with its pixel files decoded.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedSample {
    pub id: String,
    pub image: Image,
    pub mask: DenseMask,
    pub scribble: ScribbleMask,
    pub classes: ClassVector,
}

impl LoadedSample {
    pub fn to_train_sample(&self) -> TrainSample {
        TrainSample {
            image: self.image.clone(),
            scribble: self.scribble.clone(),
            classes: self.classes.clone(),
        }
    }
}

/// A validated manifest and the directory its paths are relative to.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedManifest {
    pub path: PathBuf,
    pub manifest: DatasetManifest,
}

impl LoadedManifest {
    pub fn base_dir(&self) -> &Path {
        self.path.parent().unwrap_or(Path::new("."))
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.base_dir().join(rel)
    }

    /// Decodes every record's pixel files.
    pub fn load_samples(&self) -> Result<Vec<LoadedSample>> {
        let k = self.manifest.num_classes;
        self.manifest
            .records
            .iter()
            .map(|r| {
                let record_err = |message: String| Error::Manifest {
                    path: self.path.clone(),
                    record: Some(r.id.clone()),
                    message,
                };
                let image = png::load_image(&self.resolve(&r.image))?;
                let mask = png::load_mask(&self.resolve(&r.mask), k)?;
                let scribble = png::load_scribble(&self.resolve(&r.scribble), k)?;
                if (mask.height, mask.width) != (image.height, image.width)
                    || (scribble.height, scribble.width) != (image.height, image.width)
                {
                    return Err(record_err("image, mask and scribble sizes differ".into()));
                }
                Ok(LoadedSample {
                    id: r.id.clone(),
                    image,
                    mask,
                    scribble,
                    classes: ClassVector {
                        present: r.classes.clone(),
                    },
                })
            })
            .collect()
    }
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Reads and validates a manifest: every record has `K` class flags in
/// {0, 1}, ids are unique, and every referenced file exists.
pub fn load_manifest(path: &Path) -> Result<LoadedManifest> {
    let fail = |record: Option<&str>, message: String| Error::Manifest {
        path: path.to_path_buf(),
        record: record.map(str::to_string),
        message,
    };
    // A missing manifest is bad input, not an IO fault.
    if !path.is_file() {
        return Err(fail(None, "manifest file does not exist".into()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
    let k = manifest.num_classes;
    if !(2..=255).contains(&k) {
        return Err(fail(None, format!("num_classes must be in 2..=255, got {k}")));
    }
    let loaded = LoadedManifest {
        path: path.to_path_buf(),
        manifest,
    };
    let mut seen = std::collections::BTreeSet::new();
    for r in &loaded.manifest.records {
        if !seen.insert(r.id.as_str()) {
            return Err(fail(Some(&r.id), "duplicate record id".into()));
        }
        if r.classes.len() != k {
            return Err(fail(
                Some(&r.id),
                format!("class vector has {} entries but the manifest declares K={k}", r.classes.len()),
            ));
        }
        if r.classes.iter().any(|&c| c > 1) {
            return Err(fail(Some(&r.id), "class vector entries must be 0 or 1".into()));
        }
        for rel in [&r.image, &r.mask, &r.scribble] {
            let full = loaded.resolve(rel);
            if !full.is_file() {
                return Err(fail(Some(&r.id), format!("missing file {}", full.display())));
            }
        }
    }
    Ok(loaded)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, k: usize) -> ManifestRecord {
        ManifestRecord {
            id: id.into(),
            image: format!("{id}.png").into(),
            mask: format!("{id}.png").into(),
            scribble: format!("{id}.png").into(),
            classes: vec![1; k],
        }
    }

    fn write(dir: &Path, m: &DatasetManifest) -> PathBuf {
        for r in &m.records {
            fs::write(dir.join(&r.image), b"").unwrap();
        }
        let p = dir.join("m.json");
        save_manifest(m, &p).unwrap();
        p
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest {
            num_classes: 3,
            split: "train".into(),
            seed: 4,
            records: vec![record("a", 3), record("b", 3), record("c", 3)],
        };
        let p = write(dir.path(), &m);
        assert_eq!(load_manifest(&p).unwrap().manifest, m);
    }

    #[test]
    fn missing_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest {
            num_classes: 3,
            split: "val".into(),
            seed: 0,
            records: vec![record("a", 3)],
        };
        let p = write(dir.path(), &m);
        fs::remove_file(dir.path().join("a.png")).unwrap();
        let err = load_manifest(&p).unwrap_err().to_string();
        assert!(err.contains("a.png") && err.contains("record a:"), "{err}");
    }

    #[test]
    fn class_count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest {
            num_classes: 4,
            split: "train".into(),
            seed: 0,
            records: vec![record("a", 4), record("b", 3)],
        };
        let p = write(dir.path(), &m);
        let err = load_manifest(&p).unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("record b:"));
    }
}
