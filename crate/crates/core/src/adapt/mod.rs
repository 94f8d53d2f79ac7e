//! Continual test-time adaptation over a domain stream.

mod method;
mod run;

pub use method::{trainable_mask, AdaptConfig, Method};
pub use run::{evaluate, run_continual, AdaptRun, AdaptTrace, Adapter, BatchOutcome, BatchRecord};
