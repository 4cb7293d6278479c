//! Autoregressive density models and the diagnostics used to probe them as
//! learning signals: input-space likelihood optimization, gradient-norm
//! fields on manifold data, NLL-interval outlier detection against a
//! class-conditional Gaussian baseline, and cycle-consistent translation
//! with frozen density models as the generative loss.

pub mod arcycle;
pub mod detection;
pub mod emit;
pub mod error;
pub mod likelihoods;
pub mod models;
pub mod sample_opt;
pub mod special;
pub mod tensor;
pub mod training;
pub mod workbench;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
