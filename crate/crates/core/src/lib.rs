//! Graph Echo State Networks.
//!
//! Node embeddings are the (possibly truncated) fixed point of an untrained
//! message-passing recurrence
//!
//! ```text
//! h_v(k) = tanh(W_in x_v + Σ_{u ∈ N(v)} Ŵ h_u(k-1)),   h_v(0) = 0
//! ```
//!
//! with random `W_in`, `Ŵ` rescaled to a chosen input scaling and spectral
//! radius. Only a linear ridge-regression readout is trained. The crate also
//! carries the tooling to benchmark this on node classification datasets and
//! to measure input sensitivity of untrained GCN stacks.
//!
//! Modules:
//! - [`graph`]: CSR graphs, spectral radius, homophily, components, normalized adjacency
//! - [`reservoir`]: weight initialization and state iteration
//! - [`readout`]: ridge readout, accuracy and bootstrap intervals
//! - [`sensitivity`]: GCN forward pass, Jacobian norms and the path-sum bound
//! - [`dataset`]: canonical on-disk datasets and splits
//! - [`bench`]: single runs, grid search, heatmaps and embedding dumps

// Argument checks are written `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod dataset;
pub mod error;
pub mod graph;
pub mod linalg;
pub mod readout;
pub mod reservoir;
pub mod sensitivity;
pub mod sparse;

pub use error::{Error, Result};
pub use graph::{GraphStats, SparseGraph};
pub use readout::{BootstrapResult, ReadoutModel};
pub use reservoir::{Aggregation, EmbeddingMatrix, ReservoirConfig, ReservoirWeights};
pub use sparse::CsrMatrix;
