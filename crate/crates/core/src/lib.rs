//! Dual-stream contrastive decoding: an instruction-conditioned stream and an
//! evidence-conditioned stream are mixed per step in log space, with a weight
//! set by how much the two streams disagree.

mod error;

pub mod backends;
pub mod decoder;
pub mod distcore;
pub mod divergence;
pub mod gatefusion;
pub mod metrics;

pub use error::{Error, Result};
