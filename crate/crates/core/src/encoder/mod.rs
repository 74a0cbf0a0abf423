//! Node embeddings: semantic graph attention with learnable skips,
//! hand-crafted point descriptors and point-to-graph fusion.

mod descriptors;
mod fusion;
mod graph_encoder;
mod params;

pub use descriptors::{point_descriptors, DESCRIPTOR_DIM};
pub use fusion::{
    embed, embed_on, fuse_on, p2sg_fuse, subsample_per_object, NodeEmbeddings, PointGraph,
    PreparedFragment,
};
pub use graph_encoder::{encode_graph_on, encode_scene_graph, EdgeIndex};
pub use params::{
    uniform_fan_in, EncoderConfig, EncoderParams, EncoderWeights, GraphAttention, Linear, Mat, Mlp,
    PointAttention, LEAKY_SLOPE,
};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EncoderError {
    #[error("{what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("object {0} owns no points")]
    EmptyObject(usize),
    #[error("the encoder has no fusion layer")]
    MissingFusion,
}
