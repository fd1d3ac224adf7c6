//! Toy prompt-conditioned segmentation network: conv encoder, geometric
//! prompt embedding, broadcast-fused conv decoder, and the mask-likelihood
//! semantics used by the preference losses.

mod checkpoint;
mod forward;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{
    image_tensor, log_likelihood, log_likelihood_value, positional_encoding, GradStore,
    PolicyBinding, TrainableGroups,
};
pub use params::{block_descs, idx, BlockDesc, ParamGroup, PolicyParams, SegmenterConfig};
