//! romcast: reduced-order modeling for gridded spatiotemporal fields.
//!
//! The pipeline compresses multichannel weather-like snapshot sequences into
//! a low-dimensional latent space (a convolutional autoencoder with channel
//! and spatial attention, or a POD basis as the linear baseline), fits a
//! time-delayed linear operator to the latent trajectories, and rolls the
//! operator forward to forecast full fields, scored by latitude-weighted
//! RMSE against held-out truth.
//!
//! The library is the primary interface; every major capability has a
//! runnable example:
//!
//! ```text
//! cargo run --release --example autodiff_basics      # graph + gradient checks
//! cargo run --release --example cbam_attention       # attention maps on a toy field
//! cargo run --release --example synthetic_dataset    # generator + format round trip
//! cargo run --release --example train_autoencoder    # small training run
//! cargo run --release --example pod_baseline         # POD fit, energy, sweep
//! cargo run --release --example operator_inference   # known-operator recovery
//! cargo run --release --example delay_sweep          # delay-depth comparison
//! cargo run --release --example forecast_pipeline    # end-to-end forecast
//! ```
//!
//! A thin `romcast` binary wraps the same entry points as subcommands for
//! scripted runs; see the README.

pub mod attention;
mod binio;
pub mod cae;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
mod linalg;
pub mod metrics;
pub mod pod;
pub mod rom;
pub mod tensor;

#[cfg(test)]
pub(crate) mod testsupport;

pub use error::{Error, Result};
