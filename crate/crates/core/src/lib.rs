//! Exemplar-guided Brownian-bridge diffusion at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`schedule`]: the bridge variance schedule and every reverse-process coefficient.
//! - [`bridge`]: forward bridge sampling, the regression target and the posterior mean.
//! - [`sampler`]: inference plans and the reverse chain.
//! - [`tensor`]: a small dense tensor with reverse-mode autodiff.
//! - [`networks`]: the exemplar-conditioned denoiser.
//! - [`training`]: the two-stage training loop and its optimizer.
//! - [`oracle`]: a jointly Gaussian world where the optimal denoiser is closed-form.
//! - [`synthdata`]: procedural control / target / exemplar triples.
//! - [`config`], [`verify`]: run configuration and the built-in verification suites.

pub mod bridge;
pub mod config;
pub mod error;
pub mod networks;
pub mod oracle;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod synthdata;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use schedule::BridgeSchedule;
pub use tensor::Tensor;
