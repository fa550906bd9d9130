//! Pose-conditioned denoising diffusion model.

pub mod checkpoint;
pub mod gradcheck;
pub mod schedule;
pub mod train;
pub mod unet;

pub use checkpoint::DenoiserCheckpoint;
pub use schedule::{forward_diffuse, make_schedule, NoiseSchedule};
pub use train::{
    ddpm_loss, train, train_resuming, LossRecord, RunDirObserver, TrainConfig, TrainObserver,
    TrainReport, TrainingSet,
};
pub use unet::{AttnMode, KvPair, UNet, UNetConfig};
