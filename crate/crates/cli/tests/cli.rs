use std::path::{Path, PathBuf};

use poseview::diffusion::DenoiserCheckpoint;
use poseview_cli::commands::{ViewsMetadata, CHECKPOINT_FILE, METADATA_FILE};
use poseview_cli::config::ECHO_FILE;
use poseview_cli::{run, RunConfig, EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION};
use tempfile::TempDir;

const TINY: &str = r#"
seed = 5

[synth]
yaw_bins = 2
samples_per_bin = 6
image_size = 16
patch_size = 4
translation_px = 0.5

[cluster]
k = 2

[schedule]
steps = 100

[unet]
base_channels = 4
channel_multipliers = [1, 2]
res_blocks_per_level = 1
attention_resolutions = [8]
groupnorm_groups = 2
embed_dim = 8

[train]
batch_size = 4
checkpoint_every = 2

[sampler]
steps = 5
"#;

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("poseview").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("tiny.toml");
        std::fs::write(&config, TINY).unwrap();
        Self {
            _dir: dir,
            root,
            config,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn synth(&self, out: &str) -> PathBuf {
        let out = self.path(out);
        assert_eq!(
            cli(&["synth", "--out", s(&out), "--config", s(&self.config)]),
            EXIT_OK
        );
        out
    }

    fn cluster(&self, data: &Path) -> PathBuf {
        let poses = self.path("poses.json");
        assert_eq!(
            cli(&[
                "cluster",
                "--features",
                s(data),
                "--out",
                s(&poses),
                "--config",
                s(&self.config)
            ]),
            EXIT_OK
        );
        poses
    }

    fn train(&self, data: &Path, poses: &Path, out: &Path, iterations: u64, resume: bool) -> i32 {
        let it = iterations.to_string();
        let mut args = vec![
            "train",
            "--data",
            s(data),
            "--poses",
            s(poses),
            "--out",
            s(out),
            "--config",
            s(&self.config),
            "--iterations",
            &it,
        ];
        if resume {
            args.push("--resume");
        }
        cli(&args)
    }
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn bad_arguments_exit_with_validation_status() {
    let f = Fixture::new();
    let out = f.path("d");
    assert_eq!(
        cli(&["synth", "--out", s(&out), "--yaw-bins", "0"]),
        EXIT_VALIDATION
    );
    assert_eq!(cli(&["no-such-command"]), EXIT_VALIDATION);
    assert_eq!(cli(&["--help"]), EXIT_OK);
    let bogus = f.path("bogus.toml");
    std::fs::write(&bogus, "unknown_key = 1\n").unwrap();
    assert_eq!(
        cli(&["synth", "--out", s(&out), "--config", s(&bogus)]),
        EXIT_VALIDATION
    );
}

#[test]
fn missing_files_are_runtime_errors() {
    let f = Fixture::new();
    let ckpt = f.path("absent.mrgc");
    let png = f.path("x.png");
    assert_eq!(
        cli(&[
            "sample",
            "--ckpt",
            s(&ckpt),
            "--pose",
            "0",
            "--out",
            s(&png)
        ]),
        EXIT_RUNTIME
    );
}

#[test]
fn synth_is_byte_identical_across_runs_and_echoes_its_config() {
    let f = Fixture::new();
    let a = f.synth("a");
    let b = f.synth("b");
    for name in ["manifest.json", "features.mrgf", "truth.json", ECHO_FILE] {
        assert_eq!(read(&a.join(name)), read(&b.join(name)), "{name}");
    }
    let echoed = RunConfig::load(Some(&a.join(ECHO_FILE))).unwrap();
    assert_eq!(echoed.synth.yaw_bins, 2);
    assert_eq!(echoed, echoed.clone().resolve());
}

#[test]
fn cluster_rejects_k_beyond_the_image_count() {
    let f = Fixture::new();
    let data = f.synth("d");
    let poses = f.path("p.json");
    assert_eq!(
        cli(&[
            "cluster",
            "--features",
            s(&data),
            "--out",
            s(&poses),
            "--k",
            "13"
        ]),
        EXIT_VALIDATION
    );
}

#[test]
fn ingest_requires_a_feature_file() {
    let f = Fixture::new();
    let data = f.synth("d");
    assert_eq!(
        cli(&["extract-ingest", "--dir", s(&data), "--patch-size", "4"]),
        EXIT_OK
    );
    std::fs::remove_file(data.join("features.mrgf")).unwrap();
    assert_eq!(
        cli(&["extract-ingest", "--dir", s(&data), "--patch-size", "4"]),
        EXIT_VALIDATION
    );
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let f = Fixture::new();
    let data = f.synth("d");
    let poses = f.cluster(&data);
    let whole = f.path("whole");
    let split = f.path("split");
    assert_eq!(f.train(&data, &poses, &whole, 4, false), EXIT_OK);
    assert_eq!(f.train(&data, &poses, &split, 2, false), EXIT_OK);
    assert_eq!(f.train(&data, &poses, &split, 4, true), EXIT_OK);
    assert_eq!(
        read(&whole.join(CHECKPOINT_FILE)),
        read(&split.join(CHECKPOINT_FILE))
    );
    assert_eq!(read(&whole.join("loss.csv")), read(&split.join("loss.csv")));
    assert!(whole.join("ckpt_0000002.mrgc").is_file());
    assert_eq!(
        DenoiserCheckpoint::load(&whole.join(CHECKPOINT_FILE))
            .unwrap()
            .step,
        4
    );
}

#[test]
fn inference_commands_run_end_to_end_deterministically() {
    let f = Fixture::new();
    let data = f.synth("d");
    let poses = f.cluster(&data);
    let run_dir = f.path("run");
    assert_eq!(f.train(&data, &poses, &run_dir, 2, false), EXIT_OK);
    let ckpt = run_dir.join(CHECKPOINT_FILE);
    let c = s(&f.config);

    let (s1, s2) = (f.path("s1.png"), f.path("s2.png"));
    for out in [&s1, &s2] {
        assert_eq!(
            cli(&[
                "sample",
                "--ckpt",
                s(&ckpt),
                "--pose",
                "1",
                "--out",
                s(out),
                "--config",
                c
            ]),
            EXIT_OK
        );
    }
    assert_eq!(read(&s1), read(&s2));
    assert_eq!(
        cli(&[
            "sample",
            "--ckpt",
            s(&ckpt),
            "--pose",
            "2",
            "--out",
            s(&s1),
            "--config",
            c
        ]),
        EXIT_VALIDATION
    );

    let image = data.join("images").join("img_00000.png");
    let inv = f.path("inv");
    assert_eq!(
        cli(&[
            "invert",
            "--ckpt",
            s(&ckpt),
            "--image",
            s(&image),
            "--poses",
            s(&poses),
            "--out",
            s(&inv),
            "--config",
            c
        ]),
        EXIT_OK
    );
    assert!(inv.join("noise.json").is_file() && inv.join("reconstruction.png").is_file());

    let (v1, v2) = (f.path("v1"), f.path("v2"));
    for out in [&v1, &v2] {
        let code = cli(&[
            "novel-views",
            "--ckpt",
            s(&ckpt),
            "--ref-image",
            s(&image),
            "--poses",
            s(&poses),
            "--targets",
            "all",
            "--out",
            s(out),
            "--config",
            c,
        ]);
        assert_eq!(code, EXIT_OK);
    }
    let meta: ViewsMetadata = serde_json::from_slice(&read(&v1.join(METADATA_FILE))).unwrap();
    assert_eq!(meta.views.len(), 2);
    assert_eq!(meta.reference_kind, "image");
    for name in [
        METADATA_FILE,
        "reference.png",
        "reconstruction.png",
        &meta.views[1].file,
    ] {
        assert_eq!(read(&v1.join(name)), read(&v2.join(name)), "{name}");
    }

    let seeded = f.path("seeded");
    let code = cli(&[
        "novel-views",
        "--ckpt",
        s(&ckpt),
        "--ref-pose",
        "0",
        "--targets",
        "1",
        "--seed",
        "9",
        "--out",
        s(&seeded),
        "--config",
        c,
    ]);
    assert_eq!(code, EXIT_OK);

    let report = f.path("report.json");
    assert_eq!(
        cli(&[
            "eval",
            "--views-dir",
            s(&v1),
            "--poses",
            s(&poses),
            "--out",
            s(&report)
        ]),
        EXIT_OK
    );
    let r: serde_json::Value = serde_json::from_slice(&read(&report)).unwrap();
    assert_eq!(r["judged"], 2);

    let empty = f.path("empty");
    std::fs::create_dir_all(&empty).unwrap();
    assert_eq!(
        cli(&[
            "eval",
            "--views-dir",
            s(&empty),
            "--poses",
            s(&poses),
            "--out",
            s(&report)
        ]),
        EXIT_VALIDATION
    );
}
