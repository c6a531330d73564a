//! Asynchronous federated learning with bidirectional aggregation.
//!
//! The server folds queued local models into a new global model, weighting
//! each by data quality, data size, loss and version staleness; workers in
//! turn fold each released global model into the model they are still
//! training, between batches. Around that core sit the wire protocol, a
//! routing-key broker, object storage for model exchange, a deterministic
//! discrete-event simulator and a monitoring/control service.

pub mod broker;
pub mod data;
pub mod error;
pub mod experiment;
pub mod model;
pub mod monitor;
pub mod params;
pub mod schedule;
pub mod server;
pub mod sim;
pub mod storage;
pub mod strategy;
pub mod wire;
pub mod worker;

pub use error::{Error, Result};
pub use params::ParameterVector;
