use crate::graph::{NodeId, Variable};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid geo point: {0}")]
    InvalidPoint(String),

    #[error("duplicate node id {0}")]
    DuplicateNode(NodeId),

    #[error("unknown node id {0}")]
    UnknownNode(NodeId),

    #[error("graph mixes time indices {0} and {1}")]
    MixedTimeIndex(u32, u32),

    #[error("unknown observation source `{0}`")]
    UnknownSource(String),

    #[error("degenerate variable {0}: zero variance on the training split")]
    DegenerateVariable(Variable),

    #[error("need at least two distinct time indices to split, got {0}")]
    NotEnoughSnapshots(usize),

    #[error("graph values are not normalized")]
    Unnormalized,

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("graph has no grid nodes")]
    NoGridNodes,

    #[error("training diverged in {phase} epoch {epoch}: loss = {loss}")]
    Diverged {
        phase: &'static str,
        epoch: usize,
        loss: f64,
    },

    #[error("explain target {0} is not a grid node")]
    NotGridTarget(NodeId),

    #[error("activation cache was produced for a different graph")]
    StaleCache,

    #[error("cannot occlude grid node {0}")]
    OccludeTarget(NodeId),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("anomaly correlation undefined: zero-variance anomalies")]
    UndefinedAcc,

    #[error("unknown group key `{0}`")]
    UnknownGroupKey(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
