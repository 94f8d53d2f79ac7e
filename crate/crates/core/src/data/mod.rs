//! Synthetic source task, parametric corruptions and continual domain streams.

mod source;
mod stream;
mod transform;

pub use source::{gen_source, LabeledSet, SourceSpec};
pub use stream::{
    build_stream, derive_seed, split_meta_batch, Domain, DomainStream, MetaBatch, Setup, StreamConfig, StreamManifest,
    UnlabeledBatch, UnlabeledStream, GRADUAL_SEVERITIES,
};
pub use transform::{
    rotate_plane, rotate_quarter, shift_direction, ssl_transform_labels, Transform, TransformKind, TransformPool,
};
