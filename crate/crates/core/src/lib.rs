//! Speaker-adaptive feedforward networks: factorized scaling and bias codes,
//! LHUC, fMLLR and fine-tuning baselines, multi-speaker training, unseen
//! speaker adaptation, and a synthetic multi-speaker benchmark.

pub mod error;
pub mod harness;
pub mod layers;
pub mod model;
pub mod numeric;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};
