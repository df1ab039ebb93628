extern crate self as ehoi;

pub mod annotations;
pub mod augval;
pub mod cli;
pub mod error;
pub mod matching;
pub mod metrics;
pub mod net;
pub mod plot;
pub mod synthgen;

pub use error::{Error, Result};

#[cfg(test)]
#[path = "../tests/common/pr_oracle.rs"]
mod pr_oracle;

#[cfg(test)]
#[path = "../tests/common/ssim_oracle.rs"]
mod ssim_oracle;

#[cfg(test)]
#[path = "../tests/common/fd_oracle.rs"]
mod fd_oracle;
