#![allow(dead_code)]

pub mod fd_oracle;
pub mod pr_oracle;
pub mod ssim_oracle;
