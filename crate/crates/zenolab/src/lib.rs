//! Numerical laboratory for a monitored quadratic observable on a
//! four-dimensional Euclidean momentum space.
//!
//! A pure-dephasing monitor of `C_Q(p) = pᵀQp` suppresses coherences with a
//! large monitoring gap. The library implements the pieces of the resulting
//! coarse-grained dynamics that are amenable to direct numerical checks:
//!
//! - [`quadform`]: quadratic forms, local normal/tangential frames, signature
//!   classification and isometry residuals;
//! - [`increments`]: the Zeno-conditioned Gaussian increment law, its exact
//!   covariance and Monte Carlo second moments;
//! - [`zenoflow`]: the calibrated one-dimensional flow of the tangential/normal
//!   ratio, its fixed-point search and stability;
//! - [`schur`]: the second-order (kick-out-and-return) correction tensor Σ
//!   built from the regularized monitoring resolvent;
//! - [`kinetics`]: detailed-balance jump dynamics on a momentum lattice and
//!   its Gibbs/Maxwell–Jüttner stationary states;
//! - [`robustness`]: reparametrization invariance of the reduced flow and
//!   contraction of weakly anisotropic perturbations.
//!
//! All Monte Carlo entry points take an explicit seed and produce identical
//! results for identical seeds, independent of thread count (see [`seeds`]).

// validation guards are written `!(x > 0.0)` so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod increments;
pub mod kinetics;
pub mod quadform;
pub mod robustness;
pub mod schur;
pub mod seeds;
pub mod zenoflow;

pub use nalgebra::{Matrix4, Vector4};
