//! Lloyd's algorithm with k-means++ seeding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::squared_distance;
use crate::tensor::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KmeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once no centroid moves farther than this (Euclidean).
    pub tol: f64,
    /// Independent k-means++ initializations; the lowest final inertia wins.
    pub restarts: usize,
}

impl KmeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iters: 100,
            tol: 1e-6,
            restarts: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KmeansResult {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Objective after each assignment step, in iteration order.
    pub history: Vec<f64>,
    pub iterations: usize,
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    points.iter().map(|p| nearest(p, centroids)).unzip()
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = d2.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            // every point coincides with a centroid already
            rng.random_range(0..points.len())
        };
        let c = points[idx].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Best of `config.restarts` runs of Lloyd's algorithm; ties keep the earliest run.
pub fn kmeans(points: &[Vec<f64>], config: KmeansConfig) -> Result<KmeansResult> {
    let k = config.k;
    if k == 0 {
        return Err(Error::invalid("k-means needs at least one cluster"));
    }
    if points.len() < k {
        return Err(Error::invalid(format!(
            "{} descriptors are fewer than k = {k} clusters",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::shape("k-means descriptors differ in length"));
    }

    if config.restarts == 0 {
        return Err(Error::invalid("k-means needs at least one restart"));
    }
    let mut best: Option<KmeansResult> = None;
    for r in 0..config.restarts {
        let run = lloyd(points, &config, derive_seed(config.seed, &[r as u64]));
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn lloyd(points: &[Vec<f64>], config: &KmeansConfig, seed: u64) -> KmeansResult {
    let k = config.k;
    let dim = points[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut history = Vec::new();
    let mut iterations = 0;

    for _ in 0..config.max_iters {
        iterations += 1;
        let (labels, dists) = assign(points, &centroids);
        history.push(dists.iter().sum());

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut next: Vec<Vec<f64>> = sums
            .into_iter()
            .zip(&counts)
            .zip(&centroids)
            .map(|((s, &n), old)| {
                if n == 0 {
                    old.clone()
                } else {
                    s.into_iter().map(|v| v / n as f64).collect()
                }
            })
            .collect();

        // Repair empty clusters with the points farthest from their centroid.
        let mut dists = dists;
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            let far = dists
                .iter()
                .enumerate()
                .fold(0, |best, (i, &d)| if d > dists[best] { i } else { best });
            next[j] = points[far].clone();
            dists[far] = 0.0;
        }

        let shift = next
            .iter()
            .zip(&centroids)
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if shift < config.tol {
            break;
        }
    }

    let (labels, dists) = assign(points, &centroids);
    KmeansResult {
        labels,
        centroids,
        inertia: dists.iter().sum(),
        history,
        iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn separated_blobs() {
        let r = kmeans(&pts(&[0.0, 0.1, 10.0, 10.1]), KmeansConfig::new(2, 3)).unwrap();
        assert_eq!(r.labels[0], r.labels[1]);
        assert_eq!(r.labels[2], r.labels[3]);
        assert_ne!(r.labels[0], r.labels[2]);
        assert!((r.inertia - 0.01).abs() < 1e-12);
    }

    #[test]
    fn one_point_per_cluster_has_zero_inertia() {
        let r = kmeans(&pts(&[1.0, 5.0, -3.0, 8.0]), KmeansConfig::new(4, 0)).unwrap();
        assert_eq!(r.inertia, 0.0);
    }

    #[test]
    fn too_few_points_is_an_error() {
        assert!(kmeans(&pts(&[1.0, 2.0]), KmeansConfig::new(3, 0)).is_err());
    }

    #[test]
    fn objective_never_increases() {
        let points: Vec<Vec<f64>> = (0..200)
            .map(|i| {
                let t = i as f64;
                vec![
                    (t * 0.37).sin() * 5.0 + (i % 3) as f64,
                    (t * 0.11).cos() * 3.0,
                ]
            })
            .collect();
        for seed in 0..5 {
            let config = KmeansConfig {
                restarts: 1,
                ..KmeansConfig::new(6, seed)
            };
            let r = kmeans(&points, config).unwrap();
            assert!(
                r.history.windows(2).all(|w| w[1] <= w[0] + 1e-9),
                "{:?}",
                r.history
            );
            assert!(r.inertia <= *r.history.last().unwrap() + 1e-9);
        }
    }

    #[test]
    fn centroids_are_member_means_at_convergence() {
        let points = pts(&[0.0, 1.0, 2.0, 10.0, 11.0, 30.0, 31.0, 32.0]);
        let r = kmeans(&points, KmeansConfig::new(3, 1)).unwrap();
        for (j, c) in r.centroids.iter().enumerate() {
            let members: Vec<f64> = points
                .iter()
                .zip(&r.labels)
                .filter(|(_, &l)| l == j)
                .map(|(p, _)| p[0])
                .collect();
            let mean = members.iter().sum::<f64>() / members.len() as f64;
            assert!((c[0] - mean).abs() < 1e-9);
        }
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let centroids = vec![vec![0.0], vec![-1.0], vec![5.0], vec![1.0]];
        assert_eq!(nearest(&[0.0], &centroids).0, 0);
        assert_eq!(nearest(&[0.0], &centroids[1..]).0, 0);
    }

    #[test]
    fn more_restarts_never_hurt() {
        let points: Vec<Vec<f64>> = (0..120)
            .map(|i| vec![((i * 37) % 101) as f64, ((i * 11) % 23) as f64])
            .collect();
        for seed in 0..4 {
            let one = kmeans(
                &points,
                KmeansConfig {
                    restarts: 1,
                    ..KmeansConfig::new(7, seed)
                },
            )
            .unwrap();
            let many = kmeans(&points, KmeansConfig::new(7, seed)).unwrap();
            assert!(many.inertia <= one.inertia);
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let points: Vec<Vec<f64>> = (0..50)
            .map(|i| vec![(i * 7 % 13) as f64, (i % 5) as f64])
            .collect();
        let a = kmeans(&points, KmeansConfig::new(4, 9)).unwrap();
        let b = kmeans(&points, KmeansConfig::new(4, 9)).unwrap();
        assert_eq!(a, b);
    }
}
