//! Principal component analysis, exact and incremental.
//!
//! The incremental variant merges each batch into the running factorization
//! by an SVD of the stacked matrix
//! `[diag(S)·components; batch − batch_mean; √(n·m/(n+m))·(mean − batch_mean)]`,
//! which keeps the running mean exact and reproduces the exact decomposition
//! when all data arrives in one batch.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, symmetric_eigen};

/// Mean plus an orthonormal basis of the top principal directions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `k` rows of length `c`.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    pub samples_seen: usize,
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    /// `components · (x − mean)`.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::shape(format!(
                "project: vector of length {} into a {}-dimensional model",
                x.len(),
                self.dim()
            )));
        }
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        Ok(self.components.iter().map(|c| dot(c, &centered)).collect())
    }

    /// Projection of a single-precision feature vector onto the first component.
    pub fn project_first(&self, x: &[f32]) -> f64 {
        self.components[0]
            .iter()
            .zip(x.iter().zip(&self.mean))
            .map(|(c, (&v, m))| c * (v as f64 - m))
            .sum()
    }

    /// `mean + coordsᵀ · components`.
    pub fn reconstruct(&self, coords: &[f64]) -> Result<Vec<f64>> {
        if coords.len() != self.k() {
            return Err(Error::shape(format!(
                "reconstruct: {} coordinates for {} components",
                coords.len(),
                self.k()
            )));
        }
        let mut out = self.mean.clone();
        for (w, comp) in coords.iter().zip(&self.components) {
            for (o, c) in out.iter_mut().zip(comp) {
                *o += w * c;
            }
        }
        Ok(out)
    }

    pub fn explained_variance_ratio(&self, total_variance: f64) -> Vec<f64> {
        self.explained_variance
            .iter()
            .map(|v| v / total_variance)
            .collect()
    }
}

/// Flips each vector so its largest-magnitude entry is positive (first such
/// entry on ties).
fn orient(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

fn check_rows(samples: &[f64], dim: usize) -> Result<usize> {
    if dim == 0 || samples.len() % dim != 0 {
        return Err(Error::shape(format!(
            "{} values do not form rows of length {dim}",
            samples.len()
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("PCA samples".into()));
    }
    Ok(samples.len() / dim)
}

fn column_mean(samples: &[f64], dim: usize) -> Vec<f64> {
    let n = samples.len() / dim;
    let mut mean = vec![0.0; dim];
    for row in samples.chunks_exact(dim) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    mean
}

/// Exact PCA from the eigen-decomposition of the sample covariance
/// (denominator `n − 1`). `samples` holds `n` rows of length `dim`.
pub fn fit_pca_exact(samples: &[f64], dim: usize, k: usize) -> Result<PcaModel> {
    let n = check_rows(samples, dim)?;
    if k == 0 || k > dim {
        return Err(Error::invalid(format!(
            "k = {k} must be in 1..={dim} (feature dimension)"
        )));
    }
    if n < k || n < 2 {
        return Err(Error::invalid(format!(
            "{n} samples are too few for {k} components"
        )));
    }
    let mean = column_mean(samples, dim);
    let mut cov = vec![0.0; dim * dim];
    let mut centered = vec![0.0; dim];
    for row in samples.chunks_exact(dim) {
        for (c, (v, m)) in centered.iter_mut().zip(row.iter().zip(&mean)) {
            *c = v - m;
        }
        for i in 0..dim {
            let ci = centered[i];
            for j in i..dim {
                cov[i * dim + j] += ci * centered[j];
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let v = cov[i * dim + j] / (n - 1) as f64;
            cov[i * dim + j] = v;
            cov[j * dim + i] = v;
        }
    }
    let (values, vectors) = symmetric_eigen(&cov, dim);
    let components = (0..k)
        .map(|i| {
            let mut v = vectors[i * dim..(i + 1) * dim].to_vec();
            orient(&mut v);
            v
        })
        .collect();
    Ok(PcaModel {
        mean,
        components,
        explained_variance: values[..k].iter().map(|v| v.max(0.0)).collect(),
        samples_seen: n,
    })
}

/// Extra directions carried between batches beyond the `k` reported ones.
pub const DEFAULT_OVERSAMPLE: usize = 10;

/// Directions carried by default regardless of `k`. Feature dimensions up to
/// this size are merged without truncation.
pub const MIN_RETAINED: usize = 32;

/// Streaming PCA refined one batch at a time.
///
/// Each batch is merged by an SVD of the stacked scaled components, the
/// centered batch, and a mean-correction row. Keeping a few more directions
/// than requested between merges stops truncation error from accumulating.
#[derive(Clone, Debug)]
pub struct IncrementalPca {
    dim: usize,
    k: usize,
    retained: usize,
    mean: Vec<f64>,
    samples_seen: usize,
    singular_values: Vec<f64>,
    components: Vec<Vec<f64>>,
}

impl IncrementalPca {
    pub fn new(dim: usize, k: usize) -> Result<Self> {
        let oversample = DEFAULT_OVERSAMPLE.max(MIN_RETAINED.saturating_sub(k));
        Self::with_oversample(dim, k, oversample)
    }

    pub fn with_oversample(dim: usize, k: usize, oversample: usize) -> Result<Self> {
        if k == 0 || k > dim {
            return Err(Error::invalid(format!(
                "k = {k} exceeds the feature dimension {dim}"
            )));
        }
        Ok(Self {
            dim,
            k,
            retained: (k + oversample).min(dim),
            mean: vec![0.0; dim],
            samples_seen: 0,
            singular_values: Vec::new(),
            components: Vec::new(),
        })
    }

    pub fn samples_seen(&self) -> usize {
        self.samples_seen
    }

    /// Exact mean of every sample seen so far.
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn partial_fit(&mut self, batch: &[f64]) -> Result<()> {
        let m = check_rows(batch, self.dim)?;
        if m == 0 {
            return Err(Error::invalid("empty PCA batch"));
        }
        let n = self.samples_seen;
        let total = n + m;
        let batch_mean = column_mean(batch, self.dim);
        let r = self.components.len();
        let rows = r + m + usize::from(n > 0);

        let mut stacked = DMatrix::<f64>::zeros(rows, self.dim);
        for (i, (s, comp)) in self
            .singular_values
            .iter()
            .zip(&self.components)
            .enumerate()
        {
            for (j, c) in comp.iter().enumerate() {
                stacked[(i, j)] = s * c;
            }
        }
        for (i, row) in batch.chunks_exact(self.dim).enumerate() {
            for (j, (v, bm)) in row.iter().zip(&batch_mean).enumerate() {
                stacked[(r + i, j)] = v - bm;
            }
        }
        if n > 0 {
            let w = ((n * m) as f64 / total as f64).sqrt();
            for j in 0..self.dim {
                stacked[(rows - 1, j)] = w * (self.mean[j] - batch_mean[j]);
            }
        }

        let svd = stacked.svd(false, true);
        let v_t = svd
            .v_t
            .ok_or_else(|| Error::invalid("SVD did not produce right singular vectors"))?;
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| {
            svd.singular_values[b]
                .total_cmp(&svd.singular_values[a])
                .then(a.cmp(&b))
        });
        let keep = self.retained.min(order.len());
        self.singular_values = order[..keep]
            .iter()
            .map(|&i| svd.singular_values[i])
            .collect();
        self.components = order[..keep]
            .iter()
            .map(|&i| {
                let mut v: Vec<f64> = v_t.row(i).iter().copied().collect();
                orient(&mut v);
                v
            })
            .collect();

        for (mu, bm) in self.mean.iter_mut().zip(&batch_mean) {
            *mu += (bm - *mu) * m as f64 / total as f64;
        }
        self.samples_seen = total;
        Ok(())
    }

    pub fn model(&self) -> Result<PcaModel> {
        if self.components.len() < self.k || self.samples_seen < 2 {
            return Err(Error::invalid(format!(
                "{} samples are too few for {} components",
                self.samples_seen, self.k
            )));
        }
        let denom = (self.samples_seen - 1) as f64;
        Ok(PcaModel {
            mean: self.mean.clone(),
            components: self.components[..self.k].to_vec(),
            explained_variance: self.singular_values[..self.k]
                .iter()
                .map(|s| s * s / denom)
                .collect(),
            samples_seen: self.samples_seen,
        })
    }
}

/// Incremental PCA over `samples` split into consecutive batches of
/// `batch_size` rows (the last batch may be shorter).
pub fn fit_pca_incremental(
    samples: &[f64],
    dim: usize,
    k: usize,
    batch_size: usize,
) -> Result<PcaModel> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    check_rows(samples, dim)?;
    let mut ipca = IncrementalPca::new(dim, k)?;
    for batch in samples.chunks(batch_size * dim) {
        ipca.partial_fit(batch)?;
    }
    ipca.model()
}

/// Principal angles (radians, ascending) between the row spans of two
/// orthonormal bases of equal size.
pub fn principal_angles(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<f64> {
    let k = a.len();
    assert_eq!(k, b.len(), "principal_angles: bases of different size");
    // Residual of b after projecting onto span(a); its singular values are sin θ.
    let dim = a[0].len();
    let mut resid = DMatrix::<f64>::zeros(k, dim);
    for (i, bi) in b.iter().enumerate() {
        let mut r = bi.clone();
        for aj in a {
            let d = dot(aj, bi);
            for (x, y) in r.iter_mut().zip(aj) {
                *x -= d * y;
            }
        }
        for (j, v) in r.into_iter().enumerate() {
            resid[(i, j)] = v;
        }
    }
    let mut angles: Vec<f64> = resid
        .singular_values()
        .iter()
        .map(|s| s.min(1.0).asin())
        .collect();
    angles.sort_by(f64::total_cmp);
    angles
}
