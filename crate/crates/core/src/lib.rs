//! Group-robust training when only part of the data carries group labels.
//!
//! A group classifier is fit on the labeled part, its predictions stand in for
//! missing group labels, and a group-DRO model is trained on the result.

pub mod ablation;
pub mod dataset;
pub mod error;
pub mod loss;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};
