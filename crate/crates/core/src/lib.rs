//! Replicator dynamics as natural-gradient flows.
//!
//! Two statistical manifolds are covered:
//!
//! * the interior of the probability simplex with the Shahshahani (categorical
//!   Fisher) metric, where the classical replicator equations live
//!   ([`simplex_games`]);
//! * the family of multivariate Gaussians `N(a, C)` with a quadratic-bilinear
//!   fitness landscape, where the replicator equations reduce to ODEs for the
//!   mean and covariance ([`gaussian_manifold`]).
//!
//! [`flow_engine`] integrates every vector field with a fixed-step RK4 scheme,
//! [`nes_engine`] implements the sampled (Natural Evolution Strategies) view of
//! the same flow together with rank-based fitness shaping, and [`oracle`] holds
//! brute-force verifiers used by the test-suites and by `repflow verify`.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod flow_engine;
pub mod gaussian_manifold;
pub mod nes_engine;
pub mod oracle;
pub mod simplex_games;
pub mod verify;

pub use error::{Error, Result};
pub use flow_engine::{FlowConfig, Trajectory};
pub use gaussian_manifold::{GaussianParams, ManifoldTangent, QuadBilinearLandscape};
pub use simplex_games::{FiniteLandscape, SimplexPoint};
