//! Estimation of the two-scale effective dimension (2sED) of stochastic
//! feed-forward models, together with its layerwise lower bound, from Monte
//! Carlo estimates of the block-diagonal Fisher information matrix.
//!
//! Pipeline: build a [`netmodel::ModelSpec`], estimate a Fisher ensemble over
//! sampled parameter vectors with [`fisher::block_fim`] /
//! [`fisher::normalize_ensemble`], then evaluate [`effdim::two_sed`] and
//! [`effdim::lower_two_sed`] on the shared eigenvalue ensemble. The
//! [`verify`] module holds brute-force oracles for the covering-number and
//! generalization-gap properties the measure is built on.

pub mod data;
pub mod effdim;
pub mod fisher;
pub mod linalg;
pub mod netmodel;
pub mod rng;
pub mod stats;
pub mod trainer;
pub mod verify;
