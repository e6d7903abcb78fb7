//! A desk-scale laboratory for language-model theory: fully known synthetic
//! worlds, cross-entropy and Quad language models trained on exact
//! expectations, (tau, B)-natural classification tasks with self-verifying
//! certificates, and runtime checks of the transfer bounds that connect
//! language-modeling suboptimality to downstream classification loss.
//!
//! Everything is deterministic given one 64-bit seed: randomness flows
//! through labeled splittable streams ([`rng::Stream`]) and all expectations
//! are exact sums over the finite world, so theorem checks run at 1e-8..1e-12
//! tolerances instead of sampling noise.

pub mod bound;
pub mod config;
pub mod error;
pub mod experiment;
pub mod kahan;
pub mod linear_eval;
pub mod mat;
pub mod numerics;
pub mod partition;
pub mod quad;
pub mod rng;
pub mod softmax;
pub mod world;

pub use error::{Error, Result};
pub use mat::Mat;
pub use numerics::{EigDecomp, SymMatrix};
