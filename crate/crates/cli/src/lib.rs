//! Command-line tooling for the ffabic codec: image I/O, PSNR and MS-SSIM,
//! Bjøntegaard rates and the subcommands behind the `ffabic` binary.

pub mod bdrate;
pub mod commands;
pub mod error;
pub mod imageio;
pub mod metrics;

pub use error::{CliError, CliResult};

#[cfg(test)]
mod tests;
