//! Multi-species intensity models for presence-only occurrence data.
//!
//! A residual MLP shared by all species feeds one log-linear head per
//! species. Training minimizes a cross-entropy between occurrence counts and
//! intensities normalized over the sites of each batch (Maxent-style), or one
//! of the baseline losses in [`losses::LossKind`]. Target-group background
//! restriction, spatially blocked cross-validation, AUC evaluation and a
//! synthetic data generator are included.

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod matrix;
pub mod model;
pub mod optim;
pub mod synth;
pub mod tape;
pub mod train;
pub mod verify;

pub use data::{OccurrenceMatrix, PaTable, SiteTable};
pub use error::{Error, Result};
pub use losses::LossKind;
pub use matrix::Matrix;
pub use model::{Architecture, ModelParams};
pub use train::{TrainConfig, TrainHistory};
