//! Desk-scale laboratory for class-incremental few-shot object detection.
//!
//! A toy two-stage detector is pre-trained on base classes of a synthetic
//! multi-mode world and then transferred to novel classes from K shots,
//! with optional knowledge distillation from pre-computed old-model
//! distributions and replay of selected base exemplars.

pub mod checkpoint;
pub mod detector;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod exemplar;
pub mod io;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod protocol;
pub mod rng;
pub mod world;

pub use error::{Error, Result};
