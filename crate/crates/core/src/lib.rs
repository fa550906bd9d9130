//! Unsupervised pose discovery, pose-conditioned diffusion and multi-view
//! synthesis with cross-frame attention.

pub mod clustering;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod io;
pub mod kmeans;
pub mod linalg;
pub mod pca;
pub mod sampling;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Float, Tensor};
