//! Dataset manifests: the ordered list of images (and feature files) a run uses.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clustering::FeatureGrid;
use crate::error::{Error, Result};
use crate::io::features::read_features;
use crate::io::image::read_image;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGES_DIR: &str = "images";
pub const FEATURES_FILE: &str = "features.mrgf";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    /// Image path relative to the manifest root.
    pub image: String,
    /// Feature file holding this image's grid, relative to the root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Root directory, relative to the manifest file's directory.
    pub root: String,
    pub image_size: usize,
    pub patch_size: usize,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Sorts entries by id and rejects duplicates.
    pub fn new(
        root: impl Into<String>,
        image_size: usize,
        patch_size: usize,
        mut entries: Vec<ManifestEntry>,
    ) -> Result<Self> {
        entries.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        let m = Self {
            root: root.into(),
            image_size,
            patch_size,
            entries,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        for pair in self.entries.windows(2) {
            match pair[0].image_id.cmp(&pair[1].image_id) {
                std::cmp::Ordering::Less => {}
                std::cmp::Ordering::Equal => {
                    return Err(Error::DuplicateId(pair[0].image_id.clone()))
                }
                std::cmp::Ordering::Greater => {
                    return Err(Error::Malformed(format!(
                        "manifest entries are not sorted at {:?}",
                        pair[1].image_id
                    )))
                }
            }
        }
        if self.image_size == 0 || self.patch_size == 0 {
            return Err(Error::Malformed(
                "manifest image and patch sizes must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.image_id.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A manifest together with the directory its relative paths resolve against.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
}

impl Dataset {
    /// Loads `path`, which is either a manifest file or a directory holding one.
    pub fn open(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let manifest: DatasetManifest = serde_json::from_slice(&fs::read(&file)?)?;
        manifest.validate()?;
        let base = file.parent().unwrap_or(Path::new("."));
        Ok(Self {
            root: base.join(&manifest.root),
            manifest,
        })
    }

    pub fn image_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.image)
    }

    pub fn load_images(&self) -> Result<Vec<Tensor<f32>>> {
        let n = self.manifest.image_size;
        self.manifest
            .entries
            .iter()
            .map(|e| {
                let img = read_image(&self.image_path(e))?;
                if img.shape() != [3, n, n] {
                    return Err(Error::shape(format!(
                        "{} is {:?}, manifest says {n}x{n}",
                        e.image,
                        img.shape()
                    )));
                }
                Ok(img)
            })
            .collect()
    }

    /// Feature grids in manifest order; every entry must name a feature file
    /// that contains its id.
    pub fn load_features(&self) -> Result<Vec<FeatureGrid>> {
        let mut files: BTreeMap<&str, BTreeMap<String, FeatureGrid>> = BTreeMap::new();
        for e in &self.manifest.entries {
            let name = e.features.as_deref().ok_or_else(|| {
                Error::invalid(format!(
                    "manifest entry {:?} has no feature file",
                    e.image_id
                ))
            })?;
            if !files.contains_key(name) {
                let grids = read_features(&self.root.join(name))?;
                files.insert(
                    name,
                    grids.into_iter().map(|g| (g.image_id.clone(), g)).collect(),
                );
            }
        }
        self.manifest
            .entries
            .iter()
            .map(|e| {
                let name = e.features.as_deref().unwrap_or_default();
                files
                    .get_mut(name)
                    .and_then(|m| m.remove(&e.image_id))
                    .ok_or_else(|| {
                        Error::invalid(format!("{name} has no record for {:?}", e.image_id))
                    })
            })
            .collect()
    }
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    manifest.validate()?;
    fs::write(path, serde_json::to_string_pretty(manifest)? + "\n")?;
    Ok(())
}

/// Builds a manifest over `dir/images/*.png`, ids being file stems. Entries
/// point at `dir/features.mrgf` when that file holds their id.
pub fn scan_directory(dir: &Path, patch_size: usize) -> Result<DatasetManifest> {
    let images = dir.join(IMAGES_DIR);
    let mut names: Vec<String> = fs::read_dir(&images)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    let first = names
        .first()
        .ok_or_else(|| Error::invalid(format!("no PNG images in {}", images.display())))?;
    let size = read_image(&images.join(first))?.shape()[1];

    let feature_ids: BTreeSet<String> = if dir.join(FEATURES_FILE).is_file() {
        read_features(&dir.join(FEATURES_FILE))?
            .into_iter()
            .map(|g| g.image_id)
            .collect()
    } else {
        BTreeSet::new()
    };
    let entries = names
        .iter()
        .map(|n| {
            let id = n.trim_end_matches(".png").to_string();
            ManifestEntry {
                features: feature_ids.contains(&id).then(|| FEATURES_FILE.to_string()),
                image: format!("{IMAGES_DIR}/{n}"),
                image_id: id,
            }
        })
        .collect();
    DatasetManifest::new(".", size, patch_size, entries)
}
