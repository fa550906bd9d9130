//! DDIM sampling and inversion with cross-frame attention and hard-attention
//! guidance.

pub mod attention;
pub mod ddim;
pub mod views;

pub use attention::{cross_frame_attention, hag_combine, hard_attention};
pub use ddim::{
    ddim_invert, ddim_sample, ddim_step, ddim_update, uniform_timesteps, Denoiser, Guidance,
    Inversion, NoisePredictor, ReferenceKv, SampleOutput, SamplerConfig,
};
pub use views::{generate_novel_views, NovelViews, ReferenceSource, ViewRequest};
