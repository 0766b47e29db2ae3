//! Message-passing layers and the hierarchical two-level network.

pub mod aggregate;
pub mod jk;
pub mod layers;
pub mod model;

pub use aggregate::{compute_delta, pna_aggregate, Adjacency, DeltaStats, PNA_BLOCKS, STD_EPS};
pub use jk::{JkMode, JkParams};
pub use layers::{GnnLayer, LayerKind};
pub use model::{
    adam_for, readout_sum, tissue_init, train_step, FeatureStats, HactNet, HactNetConfig, Mode,
    ModelKind, PreparedGraph,
};
