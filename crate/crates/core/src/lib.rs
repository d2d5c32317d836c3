//! Value-based controlled pretraining at desk scale.
//!
//! A learner is pretrained on a self-supervised loss while a small task
//! designer reshapes its targets (language) or views (vision) so that each
//! pretraining gradient aligns with the gradient of a downstream evaluator.
//! The learner never trains on downstream labels.
//!
//! Everything numeric is generic over [`vbpt_autodiff::Scalar`]; the aliases
//! at the bottom fix the precision.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod designer;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod lm;
pub mod mask_designer;
pub mod nn;
pub mod optim;
pub mod params;
pub mod presets;
pub mod rng;
pub mod targets;
pub mod trainer;
pub mod value;
pub mod vision;

pub use error::{Error, Result};
pub use params::{Bound, ParamStore};

pub type ParamStore64 = ParamStore<f64>;
pub type ParamStore32 = ParamStore<f32>;
