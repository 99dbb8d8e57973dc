//! Generation of images conditioned on a set of object labels plus a free-form
//! caption. The caption is never parsed into an explicit scene graph; instead,
//! pairwise relation vectors between objects are inferred by attention over the
//! caption words, and the resulting implicit graph drives layout composition
//! and a cascaded refinement generator trained adversarially against patch-,
//! object- and phrase-level discriminators.

pub mod backbones;
pub mod composer;
pub mod config;
pub mod damsm;
pub mod data;
pub mod discriminators;
pub mod evaluation;
pub mod generator;
pub mod graph;
pub mod inception;
pub mod manifest;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod text_encoder;
pub mod training;
pub mod vgg;

pub use config::PipelineConfig;

/// Error type shared across the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("missing prerequisite: run `{stage}` first ({what})")]
    MissingPrerequisite { stage: String, what: String },
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("numerical error: {0}")]
    Numerical(String),
}

impl Error {
    /// Short machine-parseable class tag, printed on the CLI error line.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Config(_) => "E_CONFIG",
            Error::Data(_) => "E_DATA",
            Error::Io(_) => "E_IO",
            Error::Tensor(_) => "E_TENSOR",
            Error::Checkpoint(_) => "E_CHECKPOINT",
            Error::MissingPrerequisite { .. } => "E_MISSING_PREREQUISITE",
            Error::Image(_) => "E_IMAGE",
            Error::Numerical(_) => "E_NUMERICAL",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
