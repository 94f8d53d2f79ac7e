//! Layers, losses, and the cascading and parallel network assemblies.

mod arch;
mod batchnorm;
mod checkpoint;
pub mod loss;
mod mask;
mod model;

pub use arch::{Architecture, BnSpan, DenseSpan, Layout, Paradigm, Partition};
pub use batchnorm::{BatchNormState, BnMode, RunningMoments, DEFAULT_EPSILON, DEFAULT_MOMENTUM};
pub use checkpoint::{ModelCheckpoint, FORMAT_VERSION};
pub use loss::{cross_entropy, entropy, entropy_per_row};
pub use mask::ParamMask;
pub use model::{Heads, Model};
