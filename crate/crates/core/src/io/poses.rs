//! Poses file: discovered clusters plus the projections needed to label new images.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clustering::{PoseAssignment, PoseModel, TargetBox, DESCRIPTOR_COMPONENTS};
use crate::error::{Error, Result};
use crate::pca::PcaModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosesFile {
    pub k: usize,
    pub labels: BTreeMap<String, usize>,
    /// `[m][3][h][w]`.
    pub centroids: Vec<Vec<Vec<Vec<f64>>>>,
    pub pca1: PcaModel,
    pub pca2: PcaModel,
    pub rejected: Vec<String>,
    #[serde(default)]
    pub target_box: TargetBox,
    #[serde(default)]
    pub inertia: f64,
}

impl From<&PoseModel> for PosesFile {
    fn from(m: &PoseModel) -> Self {
        let a = &m.assignment;
        let (h, w) = (a.grid_h, a.grid_w);
        let centroids = a
            .centroids
            .iter()
            .map(|c| {
                (0..DESCRIPTOR_COMPONENTS)
                    .map(|k| {
                        (0..h)
                            .map(|r| c[k * h * w + r * w..k * h * w + (r + 1) * w].to_vec())
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self {
            k: a.k,
            labels: a.labels.clone(),
            centroids,
            pca1: m.pca1.clone(),
            pca2: m.pca2.clone(),
            rejected: m.rejected.clone(),
            target_box: m.target_box,
            inertia: a.inertia,
        }
    }
}

impl PosesFile {
    pub fn into_model(self) -> Result<PoseModel> {
        if self.centroids.len() != self.k || self.k == 0 {
            return Err(Error::Malformed(format!(
                "poses file lists {} centroids for k = {}",
                self.centroids.len(),
                self.k
            )));
        }
        let h = self.centroids[0].first().map_or(0, |p| p.len());
        let w = self.centroids[0]
            .first()
            .and_then(|p| p.first())
            .map_or(0, |r| r.len());
        let mut flat = Vec::with_capacity(self.k);
        for c in &self.centroids {
            let ok = c.len() == DESCRIPTOR_COMPONENTS
                && c.iter()
                    .all(|plane| plane.len() == h && plane.iter().all(|row| row.len() == w));
            if !ok || h == 0 || w == 0 {
                return Err(Error::Malformed("centroids are not [m][3][h][w]".into()));
            }
            flat.push(c.iter().flatten().flatten().copied().collect::<Vec<f64>>());
        }
        if let Some((id, &l)) = self.labels.iter().find(|(_, &l)| l >= self.k) {
            return Err(Error::Malformed(format!(
                "label {l} of {id:?} is not below k = {}",
                self.k
            )));
        }
        if self.pca2.k() != DESCRIPTOR_COMPONENTS
            || self.pca1.k() == 0
            || self.pca1.dim() != self.pca2.dim()
        {
            return Err(Error::Malformed(
                "poses file PCA models are inconsistent".into(),
            ));
        }
        self.target_box.validate()?;
        Ok(PoseModel {
            assignment: PoseAssignment {
                k: self.k,
                labels: self.labels,
                centroids: flat,
                grid_h: h,
                grid_w: w,
                inertia: self.inertia,
            },
            pca1: self.pca1,
            pca2: self.pca2,
            rejected: self.rejected,
            target_box: self.target_box,
        })
    }
}

pub fn write_poses(path: &Path, model: &PoseModel) -> Result<()> {
    fs::write(
        path,
        serde_json::to_string_pretty(&PosesFile::from(model))? + "\n",
    )?;
    Ok(())
}

pub fn read_poses(path: &Path) -> Result<PoseModel> {
    let file: PosesFile = serde_json::from_slice(&fs::read(path)?)?;
    file.into_model()
}
