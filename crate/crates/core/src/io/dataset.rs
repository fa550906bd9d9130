//! On-disk synthetic datasets: images, features, manifest and ground truth.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::io::features::write_features;
use crate::io::image::write_rgb;
use crate::io::manifest::{
    write_manifest, DatasetManifest, ManifestEntry, FEATURES_FILE, IMAGES_DIR, MANIFEST_FILE,
};
use crate::synth::{generate, SyntheticSample, SyntheticSpec};

pub const TRUTH_FILE: &str = "truth.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthEntry {
    pub yaw_bin: usize,
    pub yaw_deg: f64,
    pub visible_faces: Vec<usize>,
    /// Ground-truth patch mask, one string of `0`/`1` per grid row.
    pub mask: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub yaw_bins: usize,
    pub samples: BTreeMap<String, TruthEntry>,
}

impl Truth {
    pub fn from_samples(spec: &SyntheticSpec, samples: &[SyntheticSample]) -> Self {
        let g = spec.grid_size();
        let samples = samples
            .iter()
            .map(|s| {
                let mask = s
                    .mask
                    .chunks(g)
                    .map(|row| row.iter().map(|&m| if m { '1' } else { '0' }).collect())
                    .collect();
                let entry = TruthEntry {
                    yaw_bin: s.yaw_bin,
                    yaw_deg: s.view.yaw_deg,
                    visible_faces: s.visible_faces.clone(),
                    mask,
                };
                (s.image_id.clone(), entry)
            })
            .collect();
        Self {
            yaw_bins: spec.yaw_bins,
            samples,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn label(&self, id: &str) -> Option<usize> {
        self.samples.get(id).map(|e| e.yaw_bin)
    }
}

/// Renders the dataset into `out`: `images/`, `features.mrgf`,
/// `manifest.json` and `truth.json`.
pub fn write_synthetic(spec: &SyntheticSpec, out: &Path) -> Result<(DatasetManifest, Truth)> {
    let samples = generate(spec)?;
    fs::create_dir_all(out.join(IMAGES_DIR))?;
    let n = spec.image_size;
    let mut entries = Vec::with_capacity(samples.len());
    for s in &samples {
        let rel = format!("{IMAGES_DIR}/{}.png", s.image_id);
        write_rgb(&out.join(&rel), &s.pixels, n, n)?;
        entries.push(ManifestEntry {
            image_id: s.image_id.clone(),
            image: rel,
            features: Some(FEATURES_FILE.to_string()),
        });
    }
    let grids: Vec<_> = samples.iter().map(|s| s.features.clone()).collect();
    write_features(&out.join(FEATURES_FILE), &grids)?;
    let manifest = DatasetManifest::new(".", n, spec.patch_size, entries)?;
    write_manifest(&out.join(MANIFEST_FILE), &manifest)?;
    let truth = Truth::from_samples(spec, &samples);
    fs::write(
        out.join(TRUTH_FILE),
        serde_json::to_string_pretty(&truth)? + "\n",
    )?;
    Ok((manifest, truth))
}
