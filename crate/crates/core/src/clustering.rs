//! Pose discovery from dense per-patch features.
//!
//! Tokens projecting onto the positive side of the first principal component
//! form a rough object mask; the mask's bounding box is mapped onto a shared
//! target box; foreground tokens are then reduced to three principal
//! components of the foreground-only feature distribution, and the resulting
//! `3×h×w` maps are clustered with k-means.

use std::collections::BTreeMap;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kmeans::{kmeans, nearest, KmeansConfig};
use crate::pca::{IncrementalPca, PcaModel};
use crate::tensor::Tensor;

/// Number of principal components kept for pose descriptors.
pub const DESCRIPTOR_COMPONENTS: usize = 3;

/// Dense feature map of one image, stored `(row, col, channel)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub image_id: String,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub patch_size: usize,
    pub data: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(
        image_id: impl Into<String>,
        h: usize,
        w: usize,
        c: usize,
        patch_size: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        let image_id = image_id.into();
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::shape(format!(
                "feature grid {image_id:?} has empty extent {h}x{w}x{c}"
            )));
        }
        if data.len() != h * w * c {
            return Err(Error::shape(format!(
                "feature grid {image_id:?}: {} values for {h}x{w}x{c}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature grid {image_id:?}")));
        }
        Ok(Self {
            image_id,
            h,
            w,
            c,
            patch_size,
            data,
        })
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    pub fn token(&self, row: usize, col: usize) -> &[f32] {
        let i = (row * self.w + col) * self.c;
        &self.data[i..i + self.c]
    }

    pub fn negated(&self) -> Self {
        Self {
            data: self.data.iter().map(|v| -v).collect(),
            ..self.clone()
        }
    }
}

/// Patch-level object segmentation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ForegroundMask {
    pub h: usize,
    pub w: usize,
    pub mask: Vec<bool>,
    /// Orientation of the first component that was treated as foreground.
    pub sign_used: i8,
}

impl ForegroundMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.w + col]
    }

    /// `(row_min, col_min, row_max, col_max)` of foreground patches, inclusive.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for r in 0..self.h {
            for c in 0..self.w {
                if self.get(r, c) {
                    bb = Some(match bb {
                        None => (r, c, r, c),
                        Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
                    });
                }
            }
        }
        bb
    }

    pub fn iou(&self, other: &ForegroundMask) -> f64 {
        let inter = self
            .mask
            .iter()
            .zip(&other.mask)
            .filter(|(a, b)| **a && **b)
            .count();
        let union = self
            .mask
            .iter()
            .zip(&other.mask)
            .filter(|(a, b)| **a || **b)
            .count();
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

fn mask_for_sign(proj: &[f64], sign: f64) -> Vec<bool> {
    proj.iter().map(|p| sign * p > 0.0).collect()
}

fn border_fraction(mask: &[bool], h: usize, w: usize) -> f64 {
    let mut total = 0;
    let mut fg = 0;
    for r in 0..h {
        for c in 0..w {
            if r == 0 || c == 0 || r + 1 == h || c + 1 == w {
                total += 1;
                fg += usize::from(mask[r * w + c]);
            }
        }
    }
    fg as f64 / total as f64
}

/// Thresholds the first-component projection at zero. The orientation is the
/// one marking the smaller fraction of border tokens as foreground (then the
/// one with fewer foreground tokens, then `+1`).
pub fn foreground_mask(grid: &FeatureGrid, pca1: &PcaModel) -> Result<ForegroundMask> {
    if pca1.k() == 0 || pca1.dim() != grid.c {
        return Err(Error::shape(format!(
            "foreground PCA has dimension {} and {} components; grid has {} channels",
            pca1.dim(),
            pca1.k(),
            grid.c
        )));
    }
    let proj: Vec<f64> = grid
        .data
        .chunks_exact(grid.c)
        .map(|t| pca1.project_first(t))
        .collect();
    let pos = mask_for_sign(&proj, 1.0);
    let neg = mask_for_sign(&proj, -1.0);
    let (bp, bn) = (
        border_fraction(&pos, grid.h, grid.w),
        border_fraction(&neg, grid.h, grid.w),
    );
    let count = |m: &[bool]| m.iter().filter(|&&v| v).count();
    let prefer_pos = if bp != bn {
        bp < bn
    } else {
        count(&pos) <= count(&neg)
    };
    let ordered = if prefer_pos {
        [(pos, 1i8), (neg, -1i8)]
    } else {
        [(neg, -1i8), (pos, 1i8)]
    };
    for (mask, sign_used) in ordered {
        if mask.iter().any(|&m| m) {
            return Ok(ForegroundMask {
                h: grid.h,
                w: grid.w,
                mask,
                sign_used,
            });
        }
    }
    Err(Error::Rejected {
        id: grid.image_id.clone(),
        reason: "foreground mask is empty for both orientations".into(),
    })
}

/// Target box in normalized image coordinates `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Default for TargetBox {
    /// Centered box spanning 80% of each side.
    fn default() -> Self {
        Self {
            x0: 0.1,
            y0: 0.1,
            x1: 0.9,
            y1: 0.9,
        }
    }
}

impl TargetBox {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.x0)
            && (0.0..1.0).contains(&self.y0)
            && self.x1 > self.x0
            && self.y1 > self.y0
            && self.x1 <= 1.0
            && self.y1 <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "target box {self:?} is not inside the frame"
            )))
        }
    }
}

/// Affine map from output normalized coordinates to source normalized coordinates.
#[derive(Clone, Copy, Debug)]
struct BoxMap {
    src: TargetBox,
    dst: TargetBox,
}

impl BoxMap {
    fn new(mask: &ForegroundMask, dst: TargetBox, image_id: &str) -> Result<Self> {
        dst.validate()?;
        let (r0, c0, r1, c1) = mask.bbox().ok_or_else(|| Error::Rejected {
            id: image_id.to_string(),
            reason: "degenerate (zero-area) foreground box".into(),
        })?;
        let src = TargetBox {
            x0: c0 as f64 / mask.w as f64,
            y0: r0 as f64 / mask.h as f64,
            x1: (c1 + 1) as f64 / mask.w as f64,
            y1: (r1 + 1) as f64 / mask.h as f64,
        };
        Ok(Self { src, dst })
    }

    #[inline]
    fn source(&self, u: f64, v: f64) -> (f64, f64) {
        let sx = (self.src.x1 - self.src.x0) / (self.dst.x1 - self.dst.x0);
        let sy = (self.src.y1 - self.src.y0) / (self.dst.y1 - self.dst.y0);
        (
            self.src.x0 + (u - self.dst.x0) * sx,
            self.src.y0 + (v - self.dst.y0) * sy,
        )
    }
}

/// Output of [`center_rescale`].
#[derive(Clone, Debug)]
pub struct Centered {
    pub image: Option<Tensor<f32>>,
    pub grid: FeatureGrid,
    pub mask: ForegroundMask,
}

fn resample_grid(
    grid: &FeatureGrid,
    mask: &ForegroundMask,
    map: &BoxMap,
) -> (FeatureGrid, ForegroundMask) {
    let mut data = Vec::with_capacity(grid.data.len());
    let mut out_mask = Vec::with_capacity(mask.mask.len());
    for r in 0..grid.h {
        for c in 0..grid.w {
            let u = (c as f64 + 0.5) / grid.w as f64;
            let v = (r as f64 + 0.5) / grid.h as f64;
            let (su, sv) = map.source(u, v);
            let inside = (0.0..1.0).contains(&su) && (0.0..1.0).contains(&sv);
            let sc = ((su * grid.w as f64).floor().max(0.0) as usize).min(grid.w - 1);
            let sr = ((sv * grid.h as f64).floor().max(0.0) as usize).min(grid.h - 1);
            data.extend_from_slice(grid.token(sr, sc));
            // Samples from beyond the frame replicate edge features but never
            // count as object.
            out_mask.push(inside && mask.get(sr, sc));
        }
    }
    (
        FeatureGrid {
            data,
            ..grid.clone()
        },
        ForegroundMask {
            mask: out_mask,
            ..mask.clone()
        },
    )
}

/// Bilinear resampling of a `[C, H, W]` image (or `[1, C, H, W]`), clamped at the edges.
fn resample_image(image: &Tensor<f32>, map: &BoxMap) -> Result<Tensor<f32>> {
    let s = image.shape();
    let (c, h, w) = match s {
        [c, h, w] => (*c, *h, *w),
        [1, c, h, w] => (*c, *h, *w),
        _ => return Err(Error::shape(format!("center_rescale image {s:?}"))),
    };
    let src = image.data();
    let mut out = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            let (su, sv) = map.source((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
            let fx = (su * w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let fy = (sv * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
            for ch in 0..c {
                let p = &src[ch * h * w..(ch + 1) * h * w];
                let top = p[y0 * w + x0] as f64 * (1.0 - ax) + p[y0 * w + x1] as f64 * ax;
                let bot = p[y1 * w + x0] as f64 * (1.0 - ax) + p[y1 * w + x1] as f64 * ax;
                out[ch * h * w + y * w + x] = (top * (1.0 - ay) + bot * ay) as f32;
            }
        }
    }
    Tensor::from_vec(s, out)
}

/// Maps the foreground bounding box onto `target`: the image is resampled
/// bilinearly, the feature grid and mask nearest-neighbor. Output extents
/// equal input extents.
pub fn center_rescale(
    image: Option<&Tensor<f32>>,
    grid: &FeatureGrid,
    mask: &ForegroundMask,
    target: TargetBox,
) -> Result<Centered> {
    if mask.h != grid.h || mask.w != grid.w {
        return Err(Error::shape("mask and feature grid extents differ"));
    }
    let map = BoxMap::new(mask, target, &grid.image_id)?;
    let (grid, mask) = resample_grid(grid, mask, &map);
    let image = image.map(|im| resample_image(im, &map)).transpose()?;
    Ok(Centered { image, grid, mask })
}

/// `3×h×w` map (channel-major) of foreground token projections; background is zero.
pub fn pose_descriptor(
    grid: &FeatureGrid,
    mask: &ForegroundMask,
    pca2: &PcaModel,
) -> Result<Vec<f64>> {
    if pca2.k() != DESCRIPTOR_COMPONENTS {
        return Err(Error::invalid(format!(
            "descriptor PCA must have {DESCRIPTOR_COMPONENTS} components, has {}",
            pca2.k()
        )));
    }
    if mask.h != grid.h || mask.w != grid.w {
        return Err(Error::shape("mask and feature grid extents differ"));
    }
    let hw = grid.tokens();
    let mut out = vec![0.0; DESCRIPTOR_COMPONENTS * hw];
    for i in 0..hw {
        if !mask.mask[i] {
            continue;
        }
        let token: Vec<f64> = grid.data[i * grid.c..(i + 1) * grid.c]
            .iter()
            .map(|&v| v as f64)
            .collect();
        for (k, p) in pca2.project(&token)?.into_iter().enumerate() {
            out[k * hw + i] = p;
        }
    }
    Ok(out)
}

/// Discovered pose clusters.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseAssignment {
    pub k: usize,
    pub labels: BTreeMap<String, usize>,
    /// Flattened `3×h×w` centroid descriptors.
    pub centroids: Vec<Vec<f64>>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub inertia: f64,
}

/// Nearest-centroid label; ties go to the lowest index.
pub fn assign_pose(descriptor: &[f64], assignment: &PoseAssignment) -> Result<usize> {
    let expected = DESCRIPTOR_COMPONENTS * assignment.grid_h * assignment.grid_w;
    if descriptor.len() != expected {
        return Err(Error::shape(format!(
            "descriptor of length {} for centroids of length {expected}",
            descriptor.len()
        )));
    }
    Ok(nearest(descriptor, &assignment.centroids).0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
    pub restarts: usize,
    /// Tokens per incremental-PCA batch.
    pub pca_batch_size: usize,
    pub target_box: TargetBox,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            k: 8,
            seed: 0,
            max_iters: 100,
            tol: 1e-6,
            restarts: 10,
            pca_batch_size: 256,
            target_box: TargetBox::default(),
        }
    }
}

/// Everything needed to label new images the way the training set was labeled.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseModel {
    pub assignment: PoseAssignment,
    pub pca1: PcaModel,
    pub pca2: PcaModel,
    pub rejected: Vec<String>,
    pub target_box: TargetBox,
}

impl PoseModel {
    /// Descriptor of a new image under the fitted projections.
    pub fn descriptor(&self, grid: &FeatureGrid) -> Result<Vec<f64>> {
        let mask = foreground_mask(grid, &self.pca1)?;
        let centered = center_rescale(None, grid, &mask, self.target_box)?;
        pose_descriptor(&centered.grid, &centered.mask, &self.pca2)
    }

    pub fn classify(&self, grid: &FeatureGrid) -> Result<usize> {
        assign_pose(&self.descriptor(grid)?, &self.assignment)
    }
}

/// Output of [`discover_poses`], with per-image descriptors in input order
/// (rejected images omitted).
#[derive(Clone, Debug)]
pub struct Discovery {
    pub model: PoseModel,
    pub kept_ids: Vec<String>,
    pub descriptors: Vec<Vec<f64>>,
}

fn fit_streaming<'a>(
    dim: usize,
    k: usize,
    batch_tokens: usize,
    tokens: impl Iterator<Item = &'a [f32]>,
) -> Result<PcaModel> {
    let mut ipca = IncrementalPca::new(dim, k)?;
    let mut buf: Vec<f64> = Vec::with_capacity(batch_tokens * dim);
    for t in tokens {
        buf.extend(t.iter().map(|&v| v as f64));
        if buf.len() == batch_tokens * dim {
            ipca.partial_fit(&buf)?;
            buf.clear();
        }
    }
    if !buf.is_empty() {
        ipca.partial_fit(&buf)?;
    }
    ipca.model()
}

/// Full pose-discovery pipeline over grids given in manifest order.
pub fn discover_poses(grids: &[FeatureGrid], config: &ClusterConfig) -> Result<Discovery> {
    let first = grids
        .first()
        .ok_or_else(|| Error::invalid("no feature grids to cluster"))?;
    let (h, w, c) = (first.h, first.w, first.c);
    if let Some(g) = grids.iter().find(|g| (g.h, g.w, g.c) != (h, w, c)) {
        return Err(Error::shape(format!(
            "grid {:?} is {}x{}x{}, expected {h}x{w}x{c}",
            g.image_id, g.h, g.w, g.c
        )));
    }
    if c < DESCRIPTOR_COMPONENTS {
        return Err(Error::invalid(format!(
            "features need at least {DESCRIPTOR_COMPONENTS} channels, got {c}"
        )));
    }
    config.target_box.validate()?;
    if config.pca_batch_size == 0 {
        return Err(Error::invalid("PCA batch size must be positive"));
    }

    let pca1 = fit_streaming(
        c,
        1,
        config.pca_batch_size,
        grids.iter().flat_map(|g| g.data.chunks_exact(c)),
    )?;

    let mut rejected = Vec::new();
    let mut centered = Vec::with_capacity(grids.len());
    for g in grids {
        let outcome =
            foreground_mask(g, &pca1).and_then(|m| center_rescale(None, g, &m, config.target_box));
        match outcome {
            Ok(cr) => centered.push(cr),
            Err(Error::Rejected { id, reason }) => {
                warn!("rejecting {id}: {reason}");
                rejected.push(id);
            }
            Err(e) => return Err(e),
        }
    }
    if centered.len() < config.k {
        return Err(Error::invalid(format!(
            "{} usable images are fewer than k = {}",
            centered.len(),
            config.k
        )));
    }

    let pca2 = fit_streaming(
        c,
        DESCRIPTOR_COMPONENTS,
        config.pca_batch_size,
        centered.iter().flat_map(|cr| {
            cr.grid
                .data
                .chunks_exact(c)
                .zip(&cr.mask.mask)
                .filter(|(_, &m)| m)
                .map(|(t, _)| t)
        }),
    )?;

    let descriptors = centered
        .iter()
        .map(|cr| pose_descriptor(&cr.grid, &cr.mask, &pca2))
        .collect::<Result<Vec<_>>>()?;
    let result = kmeans(
        &descriptors,
        KmeansConfig {
            k: config.k,
            seed: config.seed,
            max_iters: config.max_iters,
            tol: config.tol,
            restarts: config.restarts,
        },
    )?;
    debug!(
        "k-means converged after {} iterations, inertia {:.4}",
        result.iterations, result.inertia
    );

    let kept_ids: Vec<String> = centered.iter().map(|cr| cr.grid.image_id.clone()).collect();
    let labels = kept_ids
        .iter()
        .cloned()
        .zip(result.labels.iter().copied())
        .collect();
    Ok(Discovery {
        model: PoseModel {
            assignment: PoseAssignment {
                k: config.k,
                labels,
                centroids: result.centroids,
                grid_h: h,
                grid_w: w,
                inertia: result.inertia,
            },
            pca1,
            pca2,
            rejected,
            target_box: config.target_box,
        },
        kept_ids,
        descriptors,
    })
}

/// Fraction of items whose cluster's majority label equals their own label.
pub fn purity(clusters: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(clusters.len(), truth.len());
    let mut table: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for (&c, &t) in clusters.iter().zip(truth) {
        *table.entry(c).or_default().entry(t).or_default() += 1;
    }
    let hits: usize = table
        .values()
        .map(|row| row.values().copied().max().unwrap_or(0))
        .sum();
    hits as f64 / clusters.len() as f64
}

/// Majority ground-truth label of every cluster.
pub fn majority_labels(clusters: &[usize], truth: &[usize], k: usize) -> Vec<Option<usize>> {
    let mut counts = vec![BTreeMap::<usize, usize>::new(); k];
    for (&c, &t) in clusters.iter().zip(truth) {
        *counts[c].entry(t).or_default() += 1;
    }
    counts
        .into_iter()
        .map(|row| {
            row.into_iter()
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|(t, _)| t)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pca::fit_pca_exact;

    /// 6×6 grid, c = 2: border tokens near (0, 1), interior near (1, 0).
    fn blob_grid() -> FeatureGrid {
        let (h, w) = (6, 6);
        let mut data = Vec::new();
        for r in 0..h {
            for c in 0..w {
                let inside = (2..4).contains(&r) && (1..5).contains(&c);
                let jitter = ((r * 7 + c * 3) % 5) as f32 * 0.01;
                if inside {
                    data.extend([1.0 + jitter, 0.0]);
                } else {
                    data.extend([0.0, 1.0 - jitter]);
                }
            }
        }
        FeatureGrid::new("blob", h, w, 2, 4, data).unwrap()
    }

    fn pca_of(grid: &FeatureGrid, k: usize) -> PcaModel {
        let samples: Vec<f64> = grid.data.iter().map(|&v| v as f64).collect();
        fit_pca_exact(&samples, grid.c, k).unwrap()
    }

    fn interior_mask() -> Vec<bool> {
        (0..36)
            .map(|i| (2..4).contains(&(i / 6)) && (1..5).contains(&(i % 6)))
            .collect()
    }

    #[test]
    fn interior_is_foreground() {
        let g = blob_grid();
        let m = foreground_mask(&g, &pca_of(&g, 1)).unwrap();
        assert_eq!(m.mask, interior_mask());
        // orientation convention fixes PC1 pointing at the interior here
        assert_eq!(m.sign_used, 1);
    }

    #[test]
    fn negated_features_give_same_mask() {
        let g = blob_grid();
        let m = foreground_mask(&g, &pca_of(&g, 1)).unwrap();
        let neg = g.negated();
        let mn = foreground_mask(&neg, &pca_of(&neg, 1)).unwrap();
        assert_eq!(m.mask, mn.mask);
        assert_eq!(mn.sign_used, -m.sign_used);
    }

    #[test]
    fn uniform_grid_is_rejected() {
        let g = FeatureGrid::new("flat", 3, 3, 2, 4, vec![0.5; 18]).unwrap();
        let pca = PcaModel {
            mean: vec![0.5, 0.5],
            components: vec![vec![1.0, 0.0]],
            explained_variance: vec![0.0],
            samples_seen: 9,
        };
        assert!(matches!(
            foreground_mask(&g, &pca),
            Err(Error::Rejected { .. })
        ));
    }

    #[test]
    fn spanning_target_is_identity() {
        let g = blob_grid();
        let mask = ForegroundMask {
            h: 6,
            w: 6,
            mask: interior_mask(),
            sign_used: 1,
        };
        let target = TargetBox {
            x0: 1.0 / 6.0,
            y0: 2.0 / 6.0,
            x1: 5.0 / 6.0,
            y1: 4.0 / 6.0,
        };
        let image = crate::tensor::seeded_normal::<f32>(&[3, 24, 24], 1).unwrap();
        let out = center_rescale(Some(&image), &g, &mask, target).unwrap();
        assert_eq!(out.grid, g);
        assert_eq!(out.mask, mask);
        assert!(out.image.unwrap().max_abs_diff(&image).unwrap() < 1e-5);
    }

    #[test]
    fn top_left_object_moves_to_target() {
        let (h, w) = (8, 8);
        let mask: Vec<bool> = (0..64).map(|i| i / 8 < 4 && i % 8 < 4).collect();
        let data: Vec<f32> = mask
            .iter()
            .flat_map(|&m| if m { [1.0, 0.0] } else { [0.0, 1.0] })
            .collect();
        let g = FeatureGrid::new("tl", h, w, 2, 4, data).unwrap();
        let m = ForegroundMask {
            h,
            w,
            mask,
            sign_used: 1,
        };
        let target = TargetBox::default();
        let out = center_rescale(None, &g, &m, target).unwrap();
        let (r0, c0, r1, c1) = out.mask.bbox().unwrap();
        // target box in patch units: 0.8 .. 7.2
        let lo = target.x0 * 8.0;
        let hi = target.x1 * 8.0;
        for v in [r0 as f64, c0 as f64] {
            assert!((v - lo).abs() <= 1.0);
        }
        for v in [(r1 + 1) as f64, (c1 + 1) as f64] {
            assert!((v - hi).abs() <= 1.0);
        }
    }

    #[test]
    fn empty_mask_cannot_be_centered() {
        let g = blob_grid();
        let m = ForegroundMask {
            h: 6,
            w: 6,
            mask: vec![false; 36],
            sign_used: 1,
        };
        assert!(center_rescale(None, &g, &m, TargetBox::default()).is_err());
    }

    #[test]
    fn descriptor_background_is_zero_and_mean_token_projects_to_zero() {
        let g = blob_grid();
        let mut pca = pca_of(&g, 2);
        pca.components.push(vec![0.0, 0.0]);
        pca.components[2] = vec![0.0, 0.0];
        let none = ForegroundMask {
            h: 6,
            w: 6,
            mask: vec![false; 36],
            sign_used: 1,
        };
        assert!(pose_descriptor(&g, &none, &pca)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));

        let mut data = g.data.clone();
        data[0] = pca.mean[0] as f32;
        data[1] = pca.mean[1] as f32;
        let g2 = FeatureGrid::new("m", 6, 6, 2, 4, data).unwrap();
        let mut all = none.clone();
        all.mask[0] = true;
        let d = pose_descriptor(&g2, &all, &pca).unwrap();
        for k in 0..3 {
            assert!(d[k * 36].abs() < 1e-6);
        }
        assert!(pose_descriptor(&g, &all, &pca_of(&g, 2)).is_err());
    }

    #[test]
    fn assign_pose_exact_centroid_and_tie_break() {
        let a = PoseAssignment {
            k: 4,
            labels: BTreeMap::new(),
            centroids: vec![
                vec![9.0, 0.0, 0.0],
                vec![1.0, 0.0, 0.0],
                vec![5.0, 5.0, 5.0],
                vec![-1.0, 0.0, 0.0],
            ],
            grid_h: 1,
            grid_w: 1,
            inertia: 0.0,
        };
        for j in 0..4 {
            assert_eq!(assign_pose(&a.centroids[j], &a).unwrap(), j);
        }
        assert_eq!(assign_pose(&[0.0, 0.0, 0.0], &a).unwrap(), 1);
        assert!(assign_pose(&[0.0, 0.0], &a).is_err());
    }

    #[test]
    fn purity_counts_majorities() {
        assert_eq!(purity(&[0, 0, 1, 1], &[5, 5, 6, 6]), 1.0);
        assert_eq!(purity(&[0, 0, 0, 1], &[5, 5, 6, 6]), 0.75);
        assert_eq!(
            majority_labels(&[0, 0, 0, 1], &[5, 5, 6, 6], 3),
            vec![Some(5), Some(6), None]
        );
    }
}
