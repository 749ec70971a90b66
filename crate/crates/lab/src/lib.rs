//! Everything around the SFD core that may touch teacher samples: sampling,
//! evaluation metrics, the verification suite, teacher pretraining, run
//! configuration and run directories.

pub mod config;
pub mod error;
pub mod metrics;
pub mod plots;
pub mod pretrain;
pub mod run;
pub mod sampling;
pub mod verify;

pub use error::{LabError, Result};
