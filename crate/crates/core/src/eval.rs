//! Consistency proxies for generated views: pose agreement under the
//! clustering model and divergence of foreground color histograms.

use serde::{Deserialize, Serialize};

use crate::clustering::{foreground_mask, PoseModel};
use crate::error::{Error, Result};
use crate::synth::features_from_image;
use crate::tensor::Tensor;

/// Histogram bins per color channel.
pub const HISTOGRAM_BINS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewVerdict {
    pub name: String,
    pub requested: Option<usize>,
    /// `None` when the view has no usable foreground.
    pub predicted: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub views: Vec<ViewVerdict>,
    /// Views whose predicted pose equals the requested one.
    pub agreement: usize,
    /// Views that carry a requested pose.
    pub judged: usize,
    /// Mean pairwise Jensen–Shannon divergence (base 2) between the
    /// foreground color histograms of all views.
    pub histogram_divergence: f64,
}

/// Normalized joint RGB histogram over pixels in foreground patches, or
/// over the whole image when `mask` is `None`.
pub fn color_histogram(
    image: &Tensor<f32>,
    patch: usize,
    mask: Option<&[bool]>,
) -> Result<Vec<f64>> {
    let (h, w) = match image.shape() {
        [3, h, w] => (*h, *w),
        s => {
            return Err(Error::shape(format!(
                "expected a [3, H, W] image, got {s:?}"
            )))
        }
    };
    let gw = w / patch.max(1);
    let d = image.data();
    let bin = |v: f32| {
        (((v as f64 + 1.0) / 2.0 * HISTOGRAM_BINS as f64) as isize)
            .clamp(0, HISTOGRAM_BINS as isize - 1) as usize
    };
    let mut hist = vec![0.0; HISTOGRAM_BINS.pow(3)];
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            if let Some(m) = mask {
                if !m[(y / patch) * gw + x / patch] {
                    continue;
                }
            }
            let i = y * w + x;
            let idx = (bin(d[i]) * HISTOGRAM_BINS + bin(d[h * w + i])) * HISTOGRAM_BINS
                + bin(d[2 * h * w + i]);
            hist[idx] += 1.0;
            total += 1.0;
        }
    }
    if total > 0.0 {
        hist.iter_mut().for_each(|v| *v /= total);
    }
    Ok(hist)
}

/// Jensen–Shannon divergence in bits; 0 for identical histograms, at most 1.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter()
            .zip(m)
            .filter(|(x, _)| **x > 0.0)
            .map(|(x, y)| x * (x / y).log2())
            .sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    (0.5 * kl(p, &m) + 0.5 * kl(q, &m)).max(0.0)
}

/// Classifies every view with `model` and compares their foreground colors.
///
/// `views` pairs a name and optional requested pose with a `[3, H, W]`
/// image. Features are derived from pixels with [`features_from_image`].
pub fn evaluate_views(
    model: &PoseModel,
    views: &[(String, Option<usize>, Tensor<f32>)],
    patch: usize,
) -> Result<ConsistencyReport> {
    if views.is_empty() {
        return Err(Error::invalid("no views to evaluate"));
    }
    let mut verdicts = Vec::with_capacity(views.len());
    let mut hists = Vec::with_capacity(views.len());
    for (name, requested, image) in views {
        let grid = features_from_image(image, patch, name)?;
        let mask = foreground_mask(&grid, &model.pca1).ok();
        let predicted = model.classify(&grid).ok();
        hists.push(color_histogram(
            image,
            patch,
            mask.as_ref().map(|m| m.mask.as_slice()),
        )?);
        verdicts.push(ViewVerdict {
            name: name.clone(),
            requested: *requested,
            predicted,
        });
    }
    let judged = verdicts.iter().filter(|v| v.requested.is_some()).count();
    let agreement = verdicts
        .iter()
        .filter(|v| v.requested.is_some() && v.requested == v.predicted)
        .count();
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..hists.len() {
        for j in i + 1..hists.len() {
            sum += js_divergence(&hists[i], &hists[j]);
            pairs += 1;
        }
    }
    Ok(ConsistencyReport {
        views: verdicts,
        agreement,
        judged,
        histogram_divergence: if pairs == 0 { 0.0 } else { sum / pairs as f64 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn divergence_bounds() {
        let p = vec![0.5, 0.5, 0.0];
        let q = vec![0.0, 0.0, 1.0];
        assert_eq!(js_divergence(&p, &p), 0.0);
        assert!((js_divergence(&p, &q) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn histogram_is_normalized() {
        let im = Tensor::from_vec(
            &[3, 2, 2],
            vec![-1.0, 1.0, 0.0, 0.2, -1.0, 1.0, 0.0, 0.2, 1.0, 1.0, 1.0, 1.0],
        )
        .unwrap();
        let h = color_histogram(&im, 1, None).unwrap();
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let masked = color_histogram(&im, 1, Some(&[true, false, false, false])).unwrap();
        assert_eq!(masked.iter().filter(|&&v| v > 0.0).count(), 1);
    }
}
