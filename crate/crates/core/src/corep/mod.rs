//! Dual graph-attention state representation with a VAE head.
//!
//! A state is mapped to `N` node features by a shared MLP. Node similarity
//! `X X^T`, softmaxed over off-diagonal entries, gives a weighted adjacency
//! whose entries at or above `tau` define each node's neighbour set. Two
//! attention branches (core and general) run over that neighbourhood; their
//! outputs are concatenated and encoded into a Gaussian latent `h`, which a
//! decoder maps back to the state.

mod config;
mod forward;
mod model;

pub use config::{Branches, CorepConfig};
pub use forward::{
    adjacency_of, branch_forward, dual_forward, gat_layer, kl_standard_normal, losses, neighbor_mask,
    state_to_nodes, vae_heads, weighted_adjacency, DualOutput, LossTerms, LossWeights, VaeOutput,
    LOG_STD_LIMIT,
};
pub use model::{
    init_branch, init_decoder, init_encoder, init_featurizer, CorepModel, DualGatParams, ModelBindings,
    VaeParams,
};

use crate::numerics::NumericsError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CorepError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("weighted adjacency needs at least 2 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("node {row} has no neighbour with weight >= tau = {tau}")]
    EmptyNeighborhood { row: usize, tau: f64 },
    #[error("state has {got} entries, expected {expected}")]
    StateDim { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid representation config: {0}")]
    Config(String),
}
