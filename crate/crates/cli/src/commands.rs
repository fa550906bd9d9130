//! One function per subcommand.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use log::info;
use poseview::clustering::{discover_poses, purity, FeatureGrid, PoseModel};
use poseview::diffusion::{
    train_resuming, DenoiserCheckpoint, LossRecord, RunDirObserver, TrainObserver, TrainingSet,
    UNetConfig,
};
use poseview::eval::{evaluate_views, ConsistencyReport};
use poseview::io::dataset::TRUTH_FILE;
use poseview::io::manifest::{FEATURES_FILE, MANIFEST_FILE};
use poseview::io::{
    read_features, read_image, read_poses, scan_directory, write_image, write_manifest,
    write_poses, write_synthetic, Dataset, Truth,
};
use poseview::sampling::{
    ddim_invert, ddim_sample, generate_novel_views, Denoiser, Guidance, ReferenceSource,
    SamplerConfig, ViewRequest,
};
use poseview::synth::{features_from_image, SyntheticSpec};
use poseview::tensor::{derive_seed, seeded_normal, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::invalid;

const STREAM_SAMPLE_NOISE: u64 = 21;
const STREAM_REFERENCE_NOISE: u64 = 22;

pub const CHECKPOINT_FILE: &str = "latest.mrgc";
pub const LOSS_FILE: &str = "loss.csv";
pub const METADATA_FILE: &str = "metadata.json";

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Run configuration (TOML); flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed from which every stage seed is derived.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut c = RunConfig::load(self.config.as_deref())?;
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if c.seed > i64::MAX as u64 {
            return Err(invalid(format!("seed {} does not fit in 63 bits", c.seed)));
        }
        Ok(c)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

/// Echo path for commands whose output is a single file.
fn sidecar(path: &Path) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    path.with_file_name(format!("{stem}.config.toml"))
}

fn echo_beside(config: &RunConfig, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(sidecar(path), config.to_toml()?)?;
    Ok(())
}

// ---------------------------------------------------------------- synth

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Synthetic spec (TOML with the fields of the `[synth]` table).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub yaw_bins: Option<usize>,
    #[arg(long)]
    pub samples_per_bin: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub translation_px: Option<f64>,
    #[arg(long)]
    pub scale_jitter: Option<f64>,
    #[arg(long)]
    pub color_jitter: Option<f64>,
    #[command(flatten)]
    pub common: Common,
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let mut c = a.common.load()?;
    if let Some(p) = &a.spec {
        let text =
            std::fs::read_to_string(p).with_context(|| format!("reading spec {}", p.display()))?;
        let spec: SyntheticSpec =
            toml::from_str(&text).map_err(|e| invalid(format!("spec {}: {e}", p.display())))?;
        if a.common.seed.is_none() {
            c.seed = spec.seed;
        }
        c.synth = spec;
    }
    let s = &mut c.synth;
    if let Some(v) = a.yaw_bins {
        s.yaw_bins = v;
    }
    if let Some(v) = a.samples_per_bin {
        s.samples_per_bin = v;
    }
    if let Some(v) = a.image_size {
        s.image_size = v;
    }
    if let Some(v) = a.patch_size {
        s.patch_size = v;
    }
    if let Some(v) = a.translation_px {
        s.translation_px = v;
    }
    if let Some(v) = a.scale_jitter {
        s.scale_jitter = v;
    }
    if let Some(v) = a.color_jitter {
        s.color_jitter = v;
    }
    let c = c.resolve();
    c.synth.validate()?;
    let (manifest, truth) = write_synthetic(&c.synth, &a.out)?;
    c.echo(&a.out)?;
    info!(
        "wrote {} images in {} yaw bins to {}",
        manifest.len(),
        truth.yaw_bins,
        a.out.display()
    );
    Ok(())
}

// -------------------------------------------------------- extract-ingest

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// Directory with `images/*.png` and the extractor's `features.mrgf`.
    #[arg(long)]
    pub dir: PathBuf,
    #[arg(long)]
    pub patch_size: usize,
}

pub fn extract_ingest(a: IngestArgs) -> Result<()> {
    let features = a.dir.join(FEATURES_FILE);
    if !features.is_file() {
        return Err(invalid(format!("{} not found", features.display())));
    }
    let grids = read_features(&features)?;
    let manifest = scan_directory(&a.dir, a.patch_size)?;
    let missing: Vec<&str> = manifest
        .entries
        .iter()
        .filter(|e| e.features.is_none())
        .map(|e| e.image_id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(invalid(format!(
            "images without feature records: {}",
            missing.join(", ")
        )));
    }
    let grid = manifest.image_size / a.patch_size;
    if let Some(g) = grids.iter().find(|g| g.h != grid || g.w != grid) {
        return Err(invalid(format!(
            "feature grid {}x{} for {:?} does not match {grid}x{grid} patches",
            g.h, g.w, g.image_id
        )));
    }
    write_manifest(&a.dir.join(MANIFEST_FILE), &manifest)?;
    info!("indexed {} images with features", manifest.len());
    Ok(())
}

// ---------------------------------------------------------------- cluster

#[derive(Args, Debug)]
pub struct ClusterArgs {
    /// Dataset directory, manifest file, or a bare feature file.
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    /// Output poses file.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Serialize)]
struct ClusterSummary {
    k: usize,
    images: usize,
    rejected: usize,
    cluster_sizes: Vec<usize>,
    inertia: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    purity: Option<f64>,
}

fn load_grids(path: &Path) -> Result<(Vec<FeatureGrid>, Option<PathBuf>)> {
    if path.is_file() && path.extension().is_some_and(|e| e == "mrgf") {
        return Ok((read_features(path)?, None));
    }
    let ds = Dataset::open(path)?;
    let base = if path.is_dir() {
        path.to_path_buf()
    } else {
        path.parent().unwrap_or(Path::new(".")).to_path_buf()
    };
    Ok((ds.load_features()?, Some(base)))
}

pub fn cluster(a: ClusterArgs) -> Result<()> {
    let mut c = a.common.load()?;
    if let Some(k) = a.k {
        c.cluster.k = k;
    }
    let c = c.resolve();
    let (grids, base) = load_grids(&a.features)?;
    if c.cluster.k > grids.len() {
        return Err(invalid(format!(
            "k = {} exceeds the {} available images",
            c.cluster.k,
            grids.len()
        )));
    }
    let disc = discover_poses(&grids, &c.cluster)?;
    write_poses(&a.out, &disc.model)?;
    echo_beside(&c, &a.out)?;

    let labels = &disc.model.assignment.labels;
    let mut sizes = vec![0; c.cluster.k];
    labels.values().for_each(|&l| sizes[l] += 1);
    let truth = base.map(|b| b.join(TRUTH_FILE)).filter(|p| p.is_file());
    let purity = match truth {
        Some(p) => {
            let truth = Truth::read(&p)?;
            let (pred, gt): (Vec<usize>, Vec<usize>) = labels
                .iter()
                .filter_map(|(id, &l)| truth.label(id).map(|t| (l, t)))
                .unzip();
            Some(purity(&pred, &gt))
        }
        None => None,
    };
    let summary = ClusterSummary {
        k: c.cluster.k,
        images: grids.len(),
        rejected: disc.model.rejected.len(),
        cluster_sizes: sizes,
        inertia: disc.model.assignment.inertia,
        purity,
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

// ------------------------------------------------------------------ train

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    /// The default desk-scale network.
    Desk,
    /// The reduced network used for single-core runs.
    Toy,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub poses: PathBuf,
    /// Run directory for checkpoints, loss log and echoed config.
    #[arg(long)]
    pub out: PathBuf,
    /// Total step count; on resume training continues up to this step.
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Network preset replacing the `[unet]` table.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Continue from the run directory's latest checkpoint.
    #[arg(long)]
    pub resume: bool,
    #[command(flatten)]
    pub common: Common,
}

/// Pairs each dataset image with its pose label. Images the clustering
/// rejected are skipped; any other unlabeled image is an error.
fn labeled_set(ds: &Dataset, model: &PoseModel) -> Result<TrainingSet> {
    let labels = &model.assignment.labels;
    let rejected: std::collections::BTreeSet<&str> =
        model.rejected.iter().map(String::as_str).collect();
    let missing: Vec<&str> = ds
        .manifest
        .entries
        .iter()
        .map(|e| e.image_id.as_str())
        .filter(|id| !labels.contains_key(*id) && !rejected.contains(id))
        .collect();
    if !missing.is_empty() {
        let shown: Vec<&str> = missing.iter().take(20).copied().collect();
        return Err(invalid(format!(
            "{} images have no pose label: {}{}",
            missing.len(),
            shown.join(", "),
            if missing.len() > shown.len() {
                ", ..."
            } else {
                ""
            }
        )));
    }
    let images = ds.load_images()?;
    let (imgs, labs): (Vec<Tensor<f32>>, Vec<usize>) = ds
        .manifest
        .entries
        .iter()
        .zip(images)
        .filter_map(|(e, im)| labels.get(&e.image_id).map(|&l| (im, l)))
        .unzip();
    if !rejected.is_empty() {
        log::warn!(
            "skipping {} images rejected during clustering",
            rejected.len()
        );
    }
    Ok(TrainingSet::new(imgs, labs)?)
}

fn read_losses(path: &Path, upto: u64) -> Result<Vec<f64>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        let mut parts = line.split(',');
        let step: u64 = parts
            .next()
            .unwrap_or("")
            .parse()
            .map_err(|_| invalid(format!("bad loss line {line:?}")))?;
        let loss: f64 = parts
            .next()
            .unwrap_or("")
            .parse()
            .map_err(|_| invalid(format!("bad loss line {line:?}")))?;
        if step <= upto {
            out.push(loss);
        }
    }
    Ok(out)
}

/// Truncates the loss log to `upto` steps so a resumed run appends cleanly.
fn truncate_losses(path: &Path, upto: u64) -> Result<()> {
    let text = std::fs::read_to_string(path)?;
    let kept: Vec<&str> = text
        .lines()
        .enumerate()
        .filter(|(i, l)| {
            *i == 0
                || l.split(',')
                    .next()
                    .and_then(|s| s.parse::<u64>().ok())
                    .is_some_and(|s| s <= upto)
        })
        .map(|(_, l)| l)
        .collect();
    std::fs::write(path, kept.join("\n") + "\n")?;
    Ok(())
}

struct Progress {
    inner: RunDirObserver,
    every: u64,
}

impl TrainObserver for Progress {
    fn on_step(&mut self, r: &LossRecord) -> poseview::Result<()> {
        if r.step % self.every == 0 {
            info!(
                "step {} loss {:.5} smoothed {:.5}",
                r.step, r.loss, r.smoothed
            );
        }
        self.inner.on_step(r)
    }

    fn on_checkpoint(&mut self, ckpt: &DenoiserCheckpoint) -> poseview::Result<()> {
        self.inner.on_checkpoint(ckpt)
    }
}

#[derive(Serialize, Deserialize)]
pub struct TrainSummary {
    pub step: u64,
    pub images: usize,
    pub initial_smoothed: f64,
    pub final_smoothed: f64,
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut c = a.common.load()?;
    if let Some(p) = a.preset {
        c.unet = match p {
            Preset::Desk => UNetConfig::default(),
            Preset::Toy => UNetConfig::toy(c.unet.pose_count),
        };
    }
    if let Some(v) = a.iterations {
        c.train.iterations = v;
    }
    if let Some(v) = a.batch_size {
        c.train.batch_size = v;
    }
    if let Some(v) = a.lr {
        c.train.adam.lr = v;
    }
    if let Some(v) = a.checkpoint_every {
        c.train.checkpoint_every = v;
    }
    let ds = Dataset::open(&a.data)?;
    let model = read_poses(&a.poses)?;
    c.unet.pose_count = model.assignment.k;
    c.unet.image_size = ds.manifest.image_size;
    let c = c.resolve();
    let set = labeled_set(&ds, &model)?;

    let ckpt_path = a.out.join(CHECKPOINT_FILE);
    let loss_path = a.out.join(LOSS_FILE);
    let (mut ckpt, prior) = if a.resume {
        let ckpt = DenoiserCheckpoint::load(&ckpt_path)
            .with_context(|| format!("resuming from {}", ckpt_path.display()))?;
        if ckpt.config != c.unet {
            return Err(invalid(
                "checkpoint network config differs from the resolved config",
            ));
        }
        let prior = if loss_path.is_file() {
            truncate_losses(&loss_path, ckpt.step)?;
            read_losses(&loss_path, ckpt.step)?
        } else {
            Vec::new()
        };
        (ckpt, prior)
    } else {
        (
            DenoiserCheckpoint::init(c.unet.clone(), c.schedule.build()?, c.init_seed())?,
            Vec::new(),
        )
    };
    c.echo(&a.out)?;

    let remaining = c.train.iterations.saturating_sub(ckpt.step);
    let run = poseview::diffusion::TrainConfig {
        iterations: remaining,
        ..c.train.clone()
    };
    info!(
        "training {} images from step {} for {remaining} steps",
        set.len(),
        ckpt.step
    );
    let mut obs = Progress {
        inner: RunDirObserver::new(&a.out, a.resume)?,
        every: 100,
    };
    let result = train_resuming(&mut ckpt, &set, &run, &prior, &mut obs);
    // keep whatever was reached, also when a numeric failure stopped the run
    drop(obs);
    ckpt.save(&ckpt_path)?;
    let report = result?;

    let losses = read_losses(&loss_path, ckpt.step)?;
    let window = c.train.smoothing_window.min(losses.len()).max(1);
    let initial = losses.iter().take(window).sum::<f64>() / window as f64;
    let last = report
        .records
        .last()
        .map(|r| r.smoothed)
        .unwrap_or(f64::NAN);
    write_json(
        &a.out.join("summary.json"),
        &TrainSummary {
            step: ckpt.step,
            images: set.len(),
            initial_smoothed: initial,
            final_smoothed: last,
        },
    )?;
    Ok(())
}

// ----------------------------------------------------------------- sample

/// A noise tensor on disk.
#[derive(Serialize, Deserialize)]
pub struct NoiseFile {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NoiseFile {
    pub fn write(path: &Path, t: &Tensor<f32>) -> Result<()> {
        write_json(
            path,
            &NoiseFile {
                shape: t.shape().to_vec(),
                data: t.to_vec(),
            },
        )
    }

    pub fn read(path: &Path) -> Result<Tensor<f32>> {
        let f: NoiseFile = serde_json::from_slice(&std::fs::read(path)?)
            .map_err(|e| invalid(format!("noise file {}: {e}", path.display())))?;
        Ok(Tensor::from_vec(&f.shape, f.data)?)
    }
}

#[derive(Args, Debug, Clone)]
pub struct SamplerFlags {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
}

impl SamplerFlags {
    fn apply(&self, s: &mut SamplerConfig) {
        if let Some(v) = self.steps {
            s.steps = v;
        }
        if let Some(v) = self.gamma {
            s.gamma = v;
        }
    }
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub pose: usize,
    /// Start from this noise file instead of seeded noise.
    #[arg(long)]
    pub noise: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub sampler: SamplerFlags,
    #[command(flatten)]
    pub common: Common,
}

fn image_shape(ckpt: &DenoiserCheckpoint) -> [usize; 3] {
    [
        ckpt.config.in_channels,
        ckpt.config.image_size,
        ckpt.config.image_size,
    ]
}

fn check_pose(p: usize, ckpt: &DenoiserCheckpoint) -> Result<()> {
    if p >= ckpt.config.pose_count {
        return Err(invalid(format!(
            "pose {p} out of range: the checkpoint has {} poses",
            ckpt.config.pose_count
        )));
    }
    Ok(())
}

fn batch1(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut s = vec![1];
    s.extend_from_slice(t.shape());
    Ok(t.reshape(&s)?)
}

fn unbatch(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    Ok(t.reshape(&t.shape()[1..])?)
}

pub fn sample(a: SampleArgs) -> Result<()> {
    let mut c = a.common.load()?;
    a.sampler.apply(&mut c.sampler);
    let c = c.resolve();
    let ckpt = DenoiserCheckpoint::load(&a.ckpt)?;
    check_pose(a.pose, &ckpt)?;
    let shape = image_shape(&ckpt);
    let noise = match &a.noise {
        Some(p) => NoiseFile::read(p)?,
        None => seeded_normal(
            &shape,
            derive_seed(c.sampler.seed, &[STREAM_SAMPLE_NOISE, a.pose as u64]),
        )?,
    };
    if noise.shape() != shape {
        return Err(invalid(format!(
            "noise {:?} does not match image shape {shape:?}",
            noise.shape()
        )));
    }
    let model = Denoiser::new(&ckpt)?;
    let out = ddim_sample(
        &model,
        &batch1(&noise)?,
        &[a.pose],
        &c.sampler,
        Guidance::Standard,
    )?;
    write_image(&a.out, &unbatch(&out.image)?)?;
    echo_beside(&c, &a.out)?;
    Ok(())
}

// ----------------------------------------------------------------- invert

#[derive(Args, Debug)]
pub struct InvertArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Pose label of the image; inferred with `--poses` when absent.
    #[arg(long)]
    pub pose: Option<usize>,
    #[arg(long)]
    pub poses: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub sampler: SamplerFlags,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Serialize, Deserialize)]
pub struct InvertMetadata {
    pub pose: usize,
    pub steps: usize,
    pub reconstruction_mae: f64,
}

/// Pose label of an image: explicit, or classified under the poses file.
fn resolve_pose(image: &Tensor<f32>, pose: Option<usize>, poses: Option<&Path>) -> Result<usize> {
    if let Some(p) = pose {
        return Ok(p);
    }
    let path = poses.ok_or_else(|| invalid("give --pose or a --poses file to infer it"))?;
    let model = read_poses(path)?;
    let size = image.shape()[1];
    let grid = model.assignment.grid_w;
    if grid == 0 || size % grid != 0 {
        return Err(invalid(format!(
            "image size {size} is not a multiple of the {grid}-patch pose grid"
        )));
    }
    let features = features_from_image(image, size / grid, "reference")?;
    Ok(model.classify(&features)?)
}

fn load_reference(path: &Path, ckpt: &DenoiserCheckpoint) -> Result<Tensor<f32>> {
    let image = read_image(path)?;
    if image.shape() != image_shape(ckpt) {
        return Err(invalid(format!(
            "{} is {:?}, the checkpoint expects {:?}",
            path.display(),
            image.shape(),
            image_shape(ckpt)
        )));
    }
    Ok(image)
}

pub fn invert(a: InvertArgs) -> Result<()> {
    let mut c = a.common.load()?;
    a.sampler.apply(&mut c.sampler);
    let c = c.resolve();
    let ckpt = DenoiserCheckpoint::load(&a.ckpt)?;
    let image = load_reference(&a.image, &ckpt)?;
    let pose = resolve_pose(&image, a.pose, a.poses.as_deref())?;
    check_pose(pose, &ckpt)?;
    let model = Denoiser::new(&ckpt)?;
    let x = batch1(&image)?;
    let inv = ddim_invert(&model, &x, &[pose], &c.sampler)?;
    let rec = ddim_sample(&model, &inv.noise, &[pose], &c.sampler, Guidance::Standard)?;
    let mae = rec.image.mean_abs_diff(&x)?;
    std::fs::create_dir_all(&a.out)?;
    NoiseFile::write(&a.out.join("noise.json"), &unbatch(&inv.noise)?)?;
    write_image(&a.out.join("reconstruction.png"), &unbatch(&rec.image)?)?;
    write_json(
        &a.out.join(METADATA_FILE),
        &InvertMetadata {
            pose,
            steps: c.sampler.steps,
            reconstruction_mae: mae,
        },
    )?;
    c.echo(&a.out)?;
    info!("inverted at pose {pose}; reconstruction MAE {mae:.5}");
    Ok(())
}

// ------------------------------------------------------------ novel-views

#[derive(Args, Debug)]
pub struct NovelViewsArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Reference image; otherwise the reference is sampled from `--seed`.
    #[arg(long, conflicts_with = "ref_pose")]
    pub ref_image: Option<PathBuf>,
    /// Pose label of a sampled reference.
    #[arg(long)]
    pub ref_pose: Option<usize>,
    /// Poses file used to infer the pose of a reference image.
    #[arg(long)]
    pub poses: Option<PathBuf>,
    /// Comma-separated pose labels, or `all`.
    #[arg(long, default_value = "all")]
    pub targets: String,
    /// Draw fresh noise per target instead of reusing the reference noise.
    #[arg(long)]
    pub independent_noise: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub sampler: SamplerFlags,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ViewEntry {
    pub pose: usize,
    pub file: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ViewsMetadata {
    pub reference_kind: String,
    pub reference_pose: usize,
    pub reference_file: String,
    /// Present for image references: the reconstruction from the inverted noise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reconstruction_file: Option<String>,
    pub gamma: f64,
    pub steps: usize,
    pub share_initial_noise: bool,
    pub seed: u64,
    pub checkpoint_step: u64,
    pub views: Vec<ViewEntry>,
}

fn parse_targets(spec: &str, pose_count: usize) -> Result<Vec<usize>> {
    if spec.trim() == "all" {
        return Ok((0..pose_count).collect());
    }
    let targets: Vec<usize> = spec
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| invalid(format!("bad target pose {s:?}")))
        })
        .collect::<Result<_>>()?;
    if targets.is_empty() {
        return Err(invalid("no target poses"));
    }
    if let Some(&p) = targets.iter().find(|&&p| p >= pose_count) {
        return Err(invalid(format!(
            "target pose {p} out of range 0..{pose_count}"
        )));
    }
    Ok(targets)
}

pub fn novel_views(a: NovelViewsArgs) -> Result<()> {
    let mut c = a.common.load()?;
    a.sampler.apply(&mut c.sampler);
    if a.independent_noise {
        c.sampler.share_initial_noise = false;
    }
    let c = c.resolve();
    let ckpt = DenoiserCheckpoint::load(&a.ckpt)?;
    let targets = parse_targets(&a.targets, ckpt.config.pose_count)?;
    let (reference, kind) = match &a.ref_image {
        Some(path) => {
            let image = load_reference(path, &ckpt)?;
            let pose = resolve_pose(&image, None, a.poses.as_deref())?;
            (ReferenceSource::Image { image, pose }, "image")
        }
        None => {
            let pose = a
                .ref_pose
                .ok_or_else(|| invalid("give --ref-image, or --ref-pose with --seed"))?;
            let noise = seeded_normal(
                &image_shape(&ckpt),
                derive_seed(c.sampler.seed, &[STREAM_REFERENCE_NOISE]),
            )?;
            (ReferenceSource::Noise { noise, pose }, "noise")
        }
    };
    check_pose(reference.pose(), &ckpt)?;
    let model = Denoiser::new(&ckpt)?;
    let request = ViewRequest {
        reference,
        targets: targets.clone(),
    };
    let out = generate_novel_views(&model, &request, &c.sampler, ckpt.config.pose_count)?;

    std::fs::create_dir_all(&a.out)?;
    write_image(&a.out.join("reference.png"), &out.reference_image)?;
    let reconstruction_file = if kind == "image" {
        let rec = ddim_sample(
            &model,
            &batch1(&out.reference_noise)?,
            &[request.reference.pose()],
            &c.sampler,
            Guidance::Standard,
        )?;
        write_image(&a.out.join("reconstruction.png"), &unbatch(&rec.image)?)?;
        Some("reconstruction.png".to_string())
    } else {
        None
    };
    let mut views = Vec::with_capacity(targets.len());
    for (i, (p, img)) in targets.iter().zip(&out.views).enumerate() {
        let file = format!("view_{i:02}_pose_{p:02}.png");
        write_image(&a.out.join(&file), img)?;
        views.push(ViewEntry { pose: *p, file });
    }
    write_json(
        &a.out.join(METADATA_FILE),
        &ViewsMetadata {
            reference_kind: kind.into(),
            reference_pose: request.reference.pose(),
            reference_file: "reference.png".into(),
            reconstruction_file,
            gamma: c.sampler.effective_gamma()?,
            steps: c.sampler.steps,
            share_initial_noise: c.sampler.share_initial_noise,
            seed: c.seed,
            checkpoint_step: ckpt.step,
            views,
        },
    )?;
    c.echo(&a.out)?;
    info!("wrote {} views to {}", targets.len(), a.out.display());
    Ok(())
}

// ------------------------------------------------------------------- eval

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub views_dir: PathBuf,
    #[arg(long)]
    pub poses: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Views listed in the directory's metadata, or every PNG when there is none.
fn collect_views(dir: &Path) -> Result<Vec<(String, Option<usize>, Tensor<f32>)>> {
    let meta = dir.join(METADATA_FILE);
    let listed: Vec<(String, Option<usize>)> = if meta.is_file() {
        let m: ViewsMetadata = serde_json::from_slice(&std::fs::read(&meta)?)
            .map_err(|e| invalid(format!("{}: {e}", meta.display())))?;
        m.views
            .into_iter()
            .map(|v| (v.file, Some(v.pose)))
            .collect()
    } else {
        let mut names: Vec<String> = std::fs::read_dir(dir)
            .with_context(|| format!("listing {}", dir.display()))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".png"))
            .collect();
        names.sort();
        names.into_iter().map(|n| (n, None)).collect()
    };
    if listed.is_empty() {
        return Err(invalid(format!("no views found in {}", dir.display())));
    }
    listed
        .into_iter()
        .map(|(name, pose)| {
            let im = read_image(&dir.join(&name))?;
            Ok((name, pose, im))
        })
        .collect()
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let views = collect_views(&a.views_dir)?;
    let model = read_poses(&a.poses)?;
    let size = views[0].2.shape()[1];
    let grid = model.assignment.grid_w;
    if grid == 0 || size % grid != 0 {
        return Err(invalid(format!(
            "view size {size} does not match the {grid}-patch pose grid"
        )));
    }
    let report: ConsistencyReport = evaluate_views(&model, &views, size / grid)?;
    write_json(&a.out, &report)?;
    let per_pose: BTreeMap<String, Option<usize>> = report
        .views
        .iter()
        .map(|v| (v.name.clone(), v.predicted))
        .collect();
    info!("predicted poses: {per_pose:?}");
    println!(
        "pose agreement {}/{}, histogram divergence {:.4}",
        report.agreement, report.judged, report.histogram_divergence
    );
    Ok(())
}
