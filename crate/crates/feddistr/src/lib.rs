//! One-round federated learning by distribution transfer.
//!
//! Instead of exchanging model weights over many rounds, each client
//! decomposes its local data into base distributions, uploads the fitted
//! distribution parameters once (clipped and noised), the server aligns
//! parameters that describe the same base distribution across clients via
//! bipartite matching, and every client regenerates training data from the
//! aligned payload. A FedAvg baseline and a Monte Carlo validation of the
//! utility-loss bounds are included for comparison.

pub mod baseline;
pub mod client;
pub mod downstream;
pub mod harness;
pub mod linalg;
pub mod mixture;
pub mod server;
pub mod theory;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A run configuration is invalid (bad counts, infeasible settings).
    #[error("configuration error: {0}")]
    Config(String),
    /// An operation received malformed input (dimension mismatch, empty data).
    #[error("input error: {0}")]
    Input(String),
    /// The requested quantity is mathematically undefined for this input.
    #[error("domain error: {0}")]
    Domain(String),
    /// An internal contract between pipeline stages was violated.
    #[error("internal error: {0}")]
    Internal(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
