//! Device-edge GNN co-inference scheduling.
//!
//! * [`types`]: configs, strategies and schemes
//! * [`profiles`]: latency LUTs, communication volumes, preset split points
//! * [`sysgraph`]: the system graph and its per-scheme node features
//! * [`predictor`]: GIN throughput and pairwise predictors
//! * [`scheduler`]: design-space ranking and hierarchical scheme optimization
//! * [`sim`]: discrete-event simulator used as the ground-truth oracle
//! * [`runtime`]: wire protocol, edge server and device client over TCP

pub mod predictor;
pub mod profiles;
pub mod runtime;
pub mod scheduler;
pub mod sim;
pub mod sysgraph;
pub mod types;

pub use types::*;
