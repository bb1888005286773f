//! Training with invariance hints enforced on generated "virtual" examples.
//!
//! The crate is organised bottom-up: [`tensor`] provides a small reverse-mode
//! autodiff engine, [`image`] the raster transforms used as hints, [`losses`]
//! the classification and hint objectives, [`generators`] the virtual-example
//! samplers and their Fréchet quality metric, [`trainer`] the alternating
//! optimisation loop, [`metrics`] the evaluation statistics, and [`harness`]
//! the config-driven experiment commands.

pub mod error;
pub mod generators;
pub mod harness;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod seed;
pub mod task;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use generators::{QualityReport, SamplerHandle};
pub use image::{HintTransformSpec, RasterImage};
pub use losses::{HintLossConfig, Logits, LossVariant};
pub use task::{Dataset, SyntheticTaskSpec};
pub use tensor::{Elementwise, Padding, Reduction, Tape, Tensor, Var};
pub use trainer::{ClassifierParams, RunRecord, TrainingConfig, TrainingOutcome};
