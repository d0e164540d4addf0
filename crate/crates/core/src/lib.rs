//! Joint embedding of two unpaired datasets into one Euclidean space by
//! coupling weighted stress minimization with entropic optimal transport.
//!
//! The pipeline: build dissimilarities per domain ([`dissimilarity`]),
//! fit each domain with SMACOF ([`smacof`]), then alternate between
//! Wasserstein Procrustes matching ([`transport`]) and a SMACOF step on the
//! joint block system ([`jointmds::solve`]).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dissimilarity;
pub mod error;
pub mod io;
pub mod jointmds;
pub mod metrics;
pub mod smacof;
pub mod synthdata;
pub mod transport;

pub use dissimilarity::{DissimilarityMatrix, EdgeLength, FeatureMatrix, NeighborGraph, WeightMatrix};
pub use error::{Error, Result};
pub use jointmds::{JointConfig, JointResult};
pub use smacof::{Embedding, StressReport};
pub use transport::{Coupling, Marginals, Rotation};
