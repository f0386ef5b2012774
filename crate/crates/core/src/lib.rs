//! Location-and-context-aware knowledge distillation for DETR-style
//! detectors, with a small encoder-decoder detector, a synthetic shapes
//! dataset and an experiment harness around them.

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod detector;
pub mod distill;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod harness;
pub mod matching;
pub mod nn;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
