//! Memory-compressed streaming video object tracking.
//!
//! A frame's stride-16 features attend to a FIFO bank of past-frame
//! memories. Each dense `C×H×W` memory can be compressed into `Ng` global
//! and `Nl` window-local latent tokens, which cuts memory-attention cost by
//! `HW/(Ng+Nl)`. The crate ships the model path, a closed-form MAC model
//! checked against counted execution, wall-clock benchmarking, and the
//! distillation loss stack with analytic gradients.

pub mod attention;
pub mod bench;
pub mod error;
pub mod feature;
pub mod fusion;
pub mod kernel;
pub mod losses;
pub mod macs;
pub mod memory;
pub mod perceiver;
pub mod pipeline;
pub mod props;

pub use error::{Error, Result};
pub use feature::{FeatureMap, TokenSet};
pub use kernel::{Matrix, Real, Rng};
pub use macs::{MacKind, MacTally};
