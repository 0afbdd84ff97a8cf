//! Flow matching with analytically propagated velocity uncertainty.
//!
//! A variational velocity field on a 2D target is trained with a weight-space
//! objective, and its predictive variance is carried through the network and
//! the sampling ODE in a single deterministic pass. The variance trajectory
//! feeds confidence scores for filtering, editing, adaptive integration and
//! divergence diagnostics.

pub mod backbone;
pub mod confidence;
pub mod diagnostics;
pub mod error;
pub mod evalbench;
pub mod moments;
pub mod numerics;
pub mod par;
pub mod sampler;
pub mod training;
pub mod vad;

pub use error::{Error, Result};
