//! Pose discovery against the synthetic generator's ground truth.

use std::sync::OnceLock;

use poseview::clustering::{
    assign_pose, center_rescale, discover_poses, foreground_mask, pose_descriptor, purity,
    ClusterConfig, Discovery, ForegroundMask, TargetBox,
};
use poseview::linalg::squared_distance;
use poseview::synth::{generate, render_view, SyntheticSample, SyntheticSpec, View, PALETTE};

struct Fixture {
    spec: SyntheticSpec,
    samples: Vec<SyntheticSample>,
    discovery: Discovery,
}

fn fixture() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let spec = SyntheticSpec::default();
        let samples = generate(&spec).unwrap();
        let grids: Vec<_> = samples.iter().map(|s| s.features.clone()).collect();
        let discovery = discover_poses(&grids, &ClusterConfig::default()).unwrap();
        Fixture {
            spec,
            samples,
            discovery,
        }
    })
}

#[test]
fn eight_bins_are_recovered() {
    let f = fixture();
    assert!(f.discovery.model.rejected.is_empty());
    let truth: Vec<usize> = f.samples.iter().map(|s| s.yaw_bin).collect();
    let labels: Vec<usize> = f
        .samples
        .iter()
        .map(|s| f.discovery.model.assignment.labels[&s.image_id])
        .collect();
    let p = purity(&labels, &truth);
    assert!(p >= 0.9, "purity {p}");
}

#[test]
fn foreground_masks_match_object_support() {
    let f = fixture();
    let mut iou = 0.0;
    for s in &f.samples {
        let m = foreground_mask(&s.features, &f.discovery.model.pca1).unwrap();
        let truth = ForegroundMask {
            mask: s.mask.clone(),
            ..m.clone()
        };
        iou += m.iou(&truth);
    }
    iou /= f.samples.len() as f64;
    assert!(iou >= 0.8, "mean IoU {iou}");
}

#[test]
fn training_descriptors_keep_their_labels() {
    let f = fixture();
    let a = &f.discovery.model.assignment;
    for (id, d) in f.discovery.kept_ids.iter().zip(&f.discovery.descriptors) {
        assert_eq!(assign_pose(d, a).unwrap(), a.labels[id]);
    }
}

#[test]
fn classify_agrees_with_training_labels() {
    let f = fixture();
    for s in f.samples.iter().step_by(17) {
        assert_eq!(
            f.discovery.model.classify(&s.features).unwrap(),
            f.discovery.model.assignment.labels[&s.image_id]
        );
    }
}

fn descriptor(f: &Fixture, s: &SyntheticSample, centered: bool) -> Vec<f64> {
    let m = &f.discovery.model;
    let mask = foreground_mask(&s.features, &m.pca1).unwrap();
    if centered {
        let c = center_rescale(None, &s.features, &mask, TargetBox::default()).unwrap();
        pose_descriptor(&c.grid, &c.mask, &m.pca2).unwrap()
    } else {
        pose_descriptor(&s.features, &mask, &m.pca2).unwrap()
    }
}

fn upright(spec: &SyntheticSpec, bin: usize) -> View {
    View {
        yaw_deg: spec.yaw_degrees(bin),
        elevation_deg: spec.elevation_deg,
        scale: spec.base_scale * spec.image_size as f64,
        dx: 0.0,
        dy: 0.0,
    }
}

#[test]
fn centering_removes_patch_offsets() {
    let f = fixture();
    // Noise-free so the distances measure placement alone.
    let spec = &SyntheticSpec {
        feature_noise: 0.0,
        ..f.spec.clone()
    };
    let patch = spec.patch_size as f64;
    for bin in 0..spec.yaw_bins {
        let base = upright(spec, bin);
        for (dx, dy) in [(-patch, -patch), (patch, 0.0), (0.0, patch)] {
            let moved = View { dx, dy, ..base };
            let a = render_view(spec, "a".into(), bin, base, &PALETTE, 1).unwrap();
            let b = render_view(spec, "b".into(), bin, moved, &PALETTE, 2).unwrap();
            let before =
                squared_distance(&descriptor(f, &a, false), &descriptor(f, &b, false)).sqrt();
            let after = squared_distance(&descriptor(f, &a, true), &descriptor(f, &b, true)).sqrt();
            assert!(
                after < 0.25 * before,
                "bin {bin} ({dx}, {dy}): {after} vs {before}"
            );
        }
    }
}

#[test]
fn same_pose_recolored_is_nearest() {
    let f = fixture();
    let spec = &f.spec;
    let others: Vec<(usize, Vec<f64>)> = f
        .samples
        .iter()
        .step_by(5)
        .map(|s| (s.yaw_bin, descriptor(f, s, true)))
        .collect();
    let mut wins = 0;
    let mut total = 0;
    for trial in 0..40u64 {
        let bin = trial as usize % spec.yaw_bins;
        let view = upright(spec, bin);
        let mut recolored = PALETTE;
        for (i, color) in recolored.iter_mut().take(6).enumerate() {
            for (c, ch) in color.iter_mut().enumerate() {
                let phase = (trial as usize * 7 + i * 3 + c) % 5;
                *ch = (*ch + spec.color_jitter * (phase as f64 / 2.0 - 1.0)).clamp(0.0, 1.0);
            }
        }
        let a = render_view(spec, "a".into(), bin, view, &PALETTE, trial).unwrap();
        let b = render_view(spec, "b".into(), bin, view, &recolored, trial + 1000).unwrap();
        let (da, db) = (descriptor(f, &a, true), descriptor(f, &b, true));
        let same = squared_distance(&da, &db);
        let nearest_other = others
            .iter()
            .filter(|(y, _)| *y != bin)
            .map(|(_, d)| squared_distance(&da, d))
            .fold(f64::INFINITY, f64::min);
        wins += usize::from(same < nearest_other);
        total += 1;
    }
    assert!(wins * 10 >= total * 9, "{wins}/{total}");
}

#[test]
fn pipeline_is_deterministic() {
    let f = fixture();
    let grids: Vec<_> = f.samples.iter().map(|s| s.features.clone()).collect();
    let again = discover_poses(&grids, &ClusterConfig::default()).unwrap();
    assert_eq!(again.model, f.discovery.model);
}
