//! Command-line pipeline: synthetic data, pose discovery, training, sampling,
//! inversion, novel views and evaluation.

use std::ffi::OsString;
use std::fmt;

use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;

pub use config::RunConfig;

/// Invalid user input; exits with status 1.
#[derive(Debug)]
pub struct Validation(pub String);

impl fmt::Display for Validation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Validation {}

pub(crate) fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Validation(msg.into()).into()
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "poseview",
    version,
    about = "Pose discovery and pose-conditioned multi-view diffusion"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic cuboid dataset.
    Synth(commands::SynthArgs),
    /// Build a manifest over images and an externally extracted feature file.
    ExtractIngest(commands::IngestArgs),
    /// Discover pose clusters from feature grids.
    Cluster(commands::ClusterArgs),
    /// Train the pose-conditioned denoiser.
    Train(commands::TrainArgs),
    /// Sample one image at a pose label.
    Sample(commands::SampleArgs),
    /// Invert an image to its initial noise and reconstruct it.
    Invert(commands::InvertArgs),
    /// Generate target poses from a reference with cross-frame attention.
    NovelViews(commands::NovelViewsArgs),
    /// Score a directory of views for pose agreement and color consistency.
    Eval(commands::EvalArgs),
}

/// Maps an error to the documented exit status.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<Validation>().is_some() {
            return EXIT_VALIDATION;
        }
        if let Some(e) = cause.downcast_ref::<poseview::Error>() {
            return if e.is_runtime() {
                EXIT_RUNTIME
            } else {
                EXIT_VALIDATION
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_RUNTIME;
        }
    }
    EXIT_RUNTIME
}

pub fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::ExtractIngest(a) => commands::extract_ingest(a),
        Command::Cluster(a) => commands::cluster(a),
        Command::Train(a) => commands::train(a),
        Command::Sample(a) => commands::sample(a),
        Command::Invert(a) => commands::invert(a),
        Command::NovelViews(a) => commands::novel_views(a),
        Command::Eval(a) => commands::eval(a),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit status. Errors are reported on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                EXIT_VALIDATION
            } else {
                EXIT_OK
            };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
