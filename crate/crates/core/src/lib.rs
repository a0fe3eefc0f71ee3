//! Deterministic simulator of decentralized federated learning with robust
//! aggregation (Sentinel, FedAvg, Krum, TrimmedMean, Median, FLTrust) and
//! poisoning attacks.

pub mod aggregate;
pub mod attacks;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod params;
pub mod plot;
pub mod runner;
pub mod seed;
pub mod sim;

pub use error::{Error, Result};
