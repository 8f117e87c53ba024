//! Laboratory for causal-origin representations in non-stationary
//! reinforcement learning.
//!
//! * [`numerics`]: tensors and reverse-mode differentiation.
//! * [`causal_graphs`]: DAG to MAG construction, union graphs, m-separation.
//! * [`envs`]: toy control tasks with injected non-stationarity.
//! * [`corep`]: dual graph-attention encoder with a VAE head.
//! * [`td_detect`]: TD-error buffer and the core-branch freeze gate.
//! * [`policy`]: PPO actor-critic.
//! * [`harness`]: training loop, ablations, sweeps, checkpoints.

pub mod numerics;
pub mod causal_graphs;
pub mod envs;
pub mod td_detect;
pub mod corep;
pub mod policy;
pub mod harness;
