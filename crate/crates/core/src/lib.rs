//! Score forgetting distillation: data-free class unlearning for conditional
//! diffusion models via distillation into a one-step generator, built against
//! closed-form Gaussian-mixture teachers.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod gmm;
pub mod gradcheck;
pub mod losses;
pub mod mat2;
pub mod models;
pub mod schedule;
pub mod trainer;

pub use error::{Result, SfdError};
