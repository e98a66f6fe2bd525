//! Per-pixel lymphocyte classification from single-channel nuclear images.
//!
//! The crate is a self-contained desk-scale pipeline:
//!
//! * [`tape`] / [`tensor`] / [`optim`]: reverse-mode differentiation over a
//!   linear operation tape, plus AdamW.
//! * [`net`]: a small U-shaped encoder/decoder built on the tape.
//! * [`datagen`]: synthetic slides with texture-coded nuclei and marker
//!   channels, plus intensity-threshold labelling.
//! * [`pipeline`]: patch extraction, normalisation and dataset splits.
//! * [`train`]: the minibatch fitting loop.
//! * [`metrics`]: soft per-pixel and per-centroid precision/recall/F1.
//! * [`explain`]: per-class input optimisation and hierarchical
//!   perturbation saliency.
//! * [`run`] / [`config`] / [`checkpoint`] / [`rasters`] / [`dataset`]:
//!   the file formats and the four pipeline stages behind the CLI.
//!
//! Runnable walkthroughs of each capability live in `examples/`.

pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod dataset;
pub mod explain;
pub mod labels;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod pipeline;
pub mod rasters;
pub mod run;
pub mod tape;
pub mod tensor;
pub mod train;

pub use labels::{CellClass, LabelMap, CLASS_COUNT};
pub use net::{Network, NetworkConfig};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid class index {0} (valid range 0..=4)")]
    InvalidClass(u8),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("nucleus placement failed: {0}")]
    Placement(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
