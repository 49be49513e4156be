//! Two-head graph convolutional network with manual backpropagation.

pub mod adjacency;
pub mod checkpoint;
pub mod features;
pub mod gradcheck;
pub mod loss;
pub mod network;
pub mod train;

pub use adjacency::AdjacencyOp;
pub use checkpoint::Checkpoint;
pub use features::{encode_features, FeatureMatrix, N_FEATURES};
pub use gradcheck::{gradient_check, gradient_check_sampled, GradCheckReport};
pub use loss::{loss, LossValue, LossWeights, Targets};
pub use network::{backward, forward, forward_with, ActivationCache, Activations, DenseLayer, Model, DEFAULT_HIDDEN, N_TARGETS};
pub use train::{train, train_with_observer, EpochRecord, Phase, PreparedGraph, TrainConfig};
