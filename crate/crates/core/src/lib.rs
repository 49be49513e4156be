//! Observation impact analysis on meteorological graphs.
//!
//! The pipeline: synthetic atmospheres ([`synthetic`]) are sampled into
//! graphs of grid points and observations ([`graph`]), a two-head GCN
//! ([`model`]) estimates the current state on grid points, layer-wise
//! relevance propagation ([`lrp`]) attributes each prediction to input
//! nodes, and [`eval`] scores predictions, aggregates impacts and measures
//! explanation fidelity by occlusion.

pub mod error;
pub mod eval;
pub mod geo;
pub mod graph;
pub mod lrp;
pub mod model;
pub mod synthetic;

pub use error::{Error, Result};
pub use geo::{assign_region, default_regions, haversine_km, GeoPoint, Region, RegionName};
pub use graph::{build_graph, extract_context, MetGraph, MetNode, NodeId, NodeKind, Variable};
pub use model::{encode_features, forward, ActivationCache, FeatureMatrix, Model, TrainConfig};
pub use synthetic::{Dataset, DatasetConfig, FieldSpec, NormStats, Snapshot};
pub use lrp::{lrp_explain, ExplainTarget, RelevanceMap, TargetVariable};
pub use eval::{compute_metrics, occlude, FidelityReport, GroupKey, ImpactTable, Metrics};
