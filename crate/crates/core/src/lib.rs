//! Robust text-to-image matching under noisy correspondence.
//!
//! The crate is organised the way a training run flows:
//!
//! - [`synth_data`]: seeded synthetic person-retrieval datasets with hidden
//!   ground-truth noise flags, plus the text record format.
//! - [`encoder`]: toy dual encoders with a global (BGE) head and a token
//!   selection (TSE) head, hand-written backpropagation and checkpoints.
//! - [`losses`]: the triplet alignment loss (TAL), the hardest-negative and
//!   summed triplet ranking losses (TRL, TRL-S), their analytic gradients and a
//!   finite-difference checker.
//! - [`division`]: two-component GMM sample selection over per-sample losses
//!   and consensus label recalibration.
//! - [`trainer`]: the epoch loop with Adam and cosine decay.
//! - [`eval`]: joint-similarity retrieval with Rank-K, mAP and mINP.
//! - [`experiment`]: seeded grids of runs and plot-ready sweep reports.

pub mod division;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod math;
pub mod synth_data;
pub mod trainer;

pub use error::{Error, Result};
