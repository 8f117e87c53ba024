//! Mixed graphs, marginalization of a latent environment label, union
//! graphs across sub-environments, m-separation and MAG checks.

mod family;
mod graph;
mod mag;
mod order;

pub use family::{sample_subenv_family, worked_example_family, EnvMasks, SubEnvFamily, LATENT};
pub use graph::MixedGraph;
pub use mag::{
    dag_to_mag, m_separated, m_separated_by_paths, union_mags, verify_mag, MagReport,
    MAX_VERIFY_NODES,
};
pub use order::{order_compatible, PartialOrder};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("unknown node {0:?}")]
    UnknownNode(String),
    #[error("duplicate node {0:?}")]
    DuplicateNode(String),
    #[error("invalid node label {0:?}")]
    BadLabel(String),
    #[error("self-loop on {0:?}")]
    SelfLoop(String),
    #[error("pair {0:?}, {1:?} would carry both a directed and a bidirected edge")]
    EdgeConflict(String, String),
    #[error("not a DAG: {0}")]
    NotADag(String),
    #[error("latent {latent:?} has parent {parent:?}")]
    LatentHasParents { latent: String, parent: String },
    #[error("graphs do not share the same node list")]
    NodeMismatch,
    #[error("empty input")]
    EmptyInput,
    #[error("node {0:?} appears in more than one of X, Y, Z")]
    OverlappingSets(String),
    #[error("graph has {nodes} nodes; the limit is {limit}")]
    TooLarge { nodes: usize, limit: usize },
    #[error("relation is not a strict partial order: {0:?} precedes itself")]
    NotAnOrder(String),
    #[error("mask shapes do not match d_s={d_s}, d_h={d_h}")]
    MaskShape { d_s: usize, d_h: usize },
    #[error("edge probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}
