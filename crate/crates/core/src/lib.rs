//! Peer-to-peer data-parallel training with serverless gradient offload.

pub mod comms;
pub mod config;
pub mod cost;
pub mod dataset;
pub mod error;
pub mod executor;
pub mod experiment;
pub mod metrics;
pub mod ml;
pub mod store;
pub mod trainer;

pub use error::{Error, Result, Stage};
