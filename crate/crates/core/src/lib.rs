//! Heterogeneous federated prototype learning.
//!
//! Clients with different embedding architectures and different class
//! subsets train locally against shared class prototypes. Only prototypes
//! (per-class mean embeddings) travel between clients and the server.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`]: the two embedding architectures, the prototype-regularized
//!   local loss with its hand-derived gradient, and both inference paths.
//! * [`data`]: synthetic blobs, IDX loading and the n-way k-shot partitioner.
//! * [`aggregation`]: prototype fusion, FedAvg parameter averaging and
//!   payload accounting.
//! * [`orchestrator`]: the round loop for FedProto, FedAvg and Local.
//! * [`theory`]: assumption-constant estimation and the one-round,
//!   learning-rate, regularizer-weight and round-count bounds.
//! * [`transport`]: the binary wire format, TCP server and client.
//! * [`config`]: the flat `key = value` experiment configuration.

pub mod aggregation;
pub mod config;
pub mod data;
mod error;
pub mod model;
pub mod orchestrator;
pub mod rng;
pub mod theory;
pub mod transport;

pub use aggregation::{AggregationMode, AggregationPolicy, Payload};
pub use config::{DatasetSource, ExperimentConfig, Method};
pub use data::{Dataset, Sample, Shard};
pub use error::{Error, Result};
pub use model::{
    Arch, Gradient, LossBreakdown, LossConfig, Metric, ModelState, Params, PrototypeSet, RegOperand,
};
pub use orchestrator::{ClientState, Experiment, ExperimentReport, RoundRecord, ServerState};
pub use theory::{BoundReport, TheoryConstants};
pub use transport::{MessageKind, WireMessage};
