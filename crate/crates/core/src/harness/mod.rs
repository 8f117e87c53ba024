//! Training loop, run configuration, checkpoints and the experiment drivers
//! behind the `corep` command.

mod checkpoint;
mod config;
mod experiments;
mod metrics;
mod trainer;

pub use checkpoint::{Checkpoint, RngState};
pub use config::{RunConfig, Variant};
pub use experiments::{
    ablate, composite_loss_error, degree_sweep, export_graph, final_return, graph_verify, op_gradient_errors, selfcheck,
    write_matrix_csv, AblationRow,
    GraphVerifyReport, SelfCheckReport, SweepRow,
};
pub use metrics::{MetricsRow, METRICS_HEADER};
pub use trainer::{train, GateMode, Trainer};

use crate::causal_graphs::GraphError;
use crate::corep::CorepError;
use crate::envs::EnvError;
use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure in {component}: {detail}")]
    Numerical { component: &'static str, detail: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
}

impl HarnessError {
    /// Process exit code: 2 for configuration, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Numerical { .. } => 3,
            _ => 1,
        }
    }

    pub(crate) fn numerical(component: &'static str, e: impl std::fmt::Display) -> Self {
        HarnessError::Numerical { component, detail: e.to_string() }
    }
}

/// Numerical errors raised inside `component`. Config-shaped representation
/// errors keep their own kind.
pub(crate) fn in_component(component: &'static str) -> impl Fn(CorepError) -> HarnessError {
    move |e| match e {
        CorepError::Config(m) => HarnessError::Config(m),
        other => HarnessError::numerical(component, other),
    }
}

pub(crate) fn numerics_in(component: &'static str) -> impl Fn(NumericsError) -> HarnessError {
    move |e| HarnessError::numerical(component, e)
}
