//! File formats and dataset plumbing.

pub mod dataset;
pub mod features;
pub mod image;
pub mod manifest;
pub mod poses;

pub use dataset::{write_synthetic, Truth, TruthEntry};
pub use features::{read_features, write_features};
pub use image::{read_image, write_image};
pub use manifest::{scan_directory, write_manifest, Dataset, DatasetManifest, ManifestEntry};
pub use poses::{read_poses, write_poses, PosesFile};
