//! Audio-guided selective state space modeling for per-frame facial action
//! unit detection, at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`], [`rng`], [`gradcheck`]: dense `f64` math, seeded streams and
//!   the finite-difference oracle used to verify every backward pass.
//! * [`ssm`]: zero-order-hold discretization and the diagonal recurrence
//!   (sequential reference scan, chunked scan, backpropagation through time).
//! * [`ag_ssm`]: the audio-guided selective scan layer.
//! * [`hga`]: landmark-guided local pooling, global pooling, multi-head
//!   cross-attention alignment and MLP fusion into region tokens.
//! * [`asl`]: asymmetric loss and F1 metrics.
//! * [`synth`]: planted synthetic audio-visual datasets and their file format.
//! * [`model`], [`optim`], [`train`]: the end-to-end model, AdamW with warmup
//!   plus cosine schedule and weight averaging, and the training loop with
//!   checkpoints.

pub mod ag_ssm;
pub mod asl;
pub mod error;
pub mod gradcheck;
pub mod hga;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod ssm;
pub mod suite;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
