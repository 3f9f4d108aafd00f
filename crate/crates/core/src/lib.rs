//! Robust global contrastive loss (RGCL) with per-anchor learnable
//! temperatures, and the iSogCLR stochastic optimizer for its unimodal and
//! bimodal objectives.
//!
//! Module map:
//!
//! - [`numerics`]: dense helpers, stable reductions, rank correlation, seeded streams.
//! - [`encoder`]: two-layer encoders with unit-norm outputs and exact backprop.
//! - [`rgcl`]: hardness scores, the primal/dual losses, objectives and exact gradients.
//! - [`isogclr`]: per-anchor state and the stochastic optimizer steps.
//! - [`dro_oracle`]: independent solvers used to cross-check the above.
//! - [`datasynth`]: long-tailed synthetic clusters and paired two-view data.
//! - [`harness`]: experiment configuration, training loops, metrics and reports.

pub mod datasynth;
pub mod dro_oracle;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod isogclr;
pub mod numerics;
pub mod rgcl;

pub use encoder::{Activation, EmbeddingBatch, EncoderParams, EncoderShape};
pub use error::{Error, Result};
pub use isogclr::{AnchorState, BimodalAnchorState, OptimizerMode, OptimizerState};
pub use numerics::{DenseMatrix, RandomStream};
pub use rgcl::{DistributionalWeights, HardnessVector, RgclConfig};
