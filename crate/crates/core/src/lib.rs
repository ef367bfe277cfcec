//! Offline planner for parallel branch execution of DNN graphs on mobile
//! CPU/accelerator systems.
//!
//! The pipeline runs in stages: [`graph`] parsing and shape inference,
//! [`cost`]-based delegate [`partition`]ing, branch/layer [`structure`],
//! per-branch arena planning in [`memplan`], and budgeted scheduling with a
//! latency simulator in [`schedule`]. [`pipeline`] chains them.

use thiserror::Error;

pub mod cost;
pub mod graph;
pub mod memplan;
pub mod partition;
pub mod pipeline;
pub mod schedule;
pub mod structure;
pub mod synth;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] graph::GraphError),
    #[error("graph failed validation: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error(transparent)]
    Shape(#[from] graph::ShapeError),
    #[error(transparent)]
    Cost(#[from] cost::CostError),
    #[error(transparent)]
    Partition(#[from] partition::PartitionError),
    #[error(transparent)]
    Structure(#[from] structure::StructureError),
    #[error(transparent)]
    MemPlan(#[from] memplan::MemPlanError),
    #[error(transparent)]
    Schedule(#[from] schedule::ScheduleError),
}

/// Coarse failure class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad input graph, profile or configuration.
    Invalid,
    /// A planner invariant broke.
    Internal,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        use memplan::MemPlanError as M;
        use partition::PartitionError as P;
        use structure::StructureError as S;
        match self {
            Error::Partition(P::Invariant(_))
            | Error::Structure(S::Cycle(_))
            | Error::MemPlan(M::ForeignTensor { .. } | M::SameLayerShare { .. }) => {
                ErrorKind::Internal
            }
            Error::Partition(P::Graph(_)) => ErrorKind::Internal,
            _ => ErrorKind::Invalid,
        }
    }
}
