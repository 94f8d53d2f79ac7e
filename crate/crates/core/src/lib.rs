//! Continual test-time adaptation with a cascading auxiliary head.
//!
//! A feature extractor feeds a main classifier whose logits feed an auxiliary
//! head. The auxiliary head's entropy drives unlabeled online updates of the
//! extractor's batch-norm affine parameters and the main classifier, and
//! pre-training is meta-learned so that such an update improves supervised
//! accuracy.

pub mod adapt;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod harness;
pub mod hash;
pub mod metrics;
pub mod nn;
pub mod pretrain;

pub use error::{Error, Result};
