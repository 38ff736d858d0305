//! Long-tailed multi-label and zero-shot classification on precomputed
//! features: asymmetric and contrastive losses with analytic gradients,
//! multi-label metrics, projection-aware logit ensembling, prompt-ensembled
//! zero-shot scoring, dual-branch training with leak-free proxy validation,
//! synthetic data generators and the file formats tying them together.

pub mod dataio;
pub mod dualbranch;
pub mod ensemble;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod synthdata;
pub mod zeroshot;

pub use error::{Error, Result};
pub use numerics::{Matrix, SeededRng};
