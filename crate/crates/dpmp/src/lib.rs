//! Deep probabilistic motion planning: from a workspace image to a
//! distribution over robot trajectories.
//!
//! The pipeline has three parts:
//!
//! 1. Movement primitives ([`promp`]): trajectories are modelled as
//!    `q_t = Ψ_tᵀ Θ + ε`, with normalised Gaussian bases over a phase
//!    variable and a Gaussian distribution over the weights `Θ`.
//! 2. A synthetic scene and demonstration generator ([`scene`]) standing in
//!    for a camera + kinesthetic-teaching rig, plus an on-disk dataset
//!    container ([`dataset_io`]).
//! 3. A dense neural stack ([`nn`]) and the staged training that maps an
//!    image (optionally with a condition vector) to per-joint weight
//!    distributions ([`pipeline`]), evaluated by [`metrics`].
//!
//! Everything is deterministic given a seed: training twice with the same
//! configuration produces bit-identical checkpoints.

pub mod checkpoint;
pub mod config;
pub mod dataset_io;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod promp;
pub mod report;
pub mod scene;
pub mod workers;
