//! Pinned numerical tolerances used by `verify` and the acceptance suite.
//!
//! One place, one version tag; the values travel with every run summary so
//! results can be tied to the thresholds they were checked against.

use serde::Serialize;

pub const TOLERANCES_VERSION: &str = "1";

/// Exact algebraic identities (contrast, kicked gap, Euler, homogeneity,
/// sensitivity combination, detailed balance in its entrywise form).
pub const EXACT_IDENTITY_REL: f64 = 1e-12;
/// Monte Carlo agreement bound in standard errors of the estimator.
pub const MC_SIGMA_BOUND: f64 = 4.0;
/// Scaling-law agreement bound in standard errors.
pub const SCALING_SIGMA_BOUND: f64 = 2.0;
/// Coefficient of the uniform resolvent remainder bound `C ε²/γ⁴`.
pub const RESOLVENT_REMAINDER_COEFF: f64 = 4.0;
/// Relative drift of the damping scale along a calibrated trajectory.
pub const GAMMA_DRIFT_REL: f64 = 1e-10;
/// Relative residual `|A + rB|/(|A| + |r||B|)` at a reported root.
pub const ROOT_RESIDUAL: f64 = 1e-10;
/// Frobenius residual of constructed isometries of the fixed-point form.
pub const ISOMETRY_RESIDUAL: f64 = 1e-10;
/// Entrywise relative detailed-balance violation.
pub const DB_RESIDUAL_REL: f64 = 1e-13;
/// Stationarity residual of the Gibbs populations.
pub const STATIONARITY_RESIDUAL: f64 = 1e-12;
/// L¹ distance to the Gibbs state reached from a point mass.
pub const L1_EQUILIBRATION: f64 = 1e-6;
/// Largest allowed deviation from the Gaussian limit at `p = 0.1 m/√α`.
pub const NONREL_MAX_DEV: f64 = 2e-5;
/// Allowed departure of the log-log deviation slope from 4.
pub const NONREL_SLOPE_TOL: f64 = 0.1;
/// The fitted anisotropic decay slope must be at most `−γ⊥ ×` this factor.
pub const ANISO_SLOPE_FACTOR: f64 = 0.5;
/// Relative tolerance of the linear-response doubling check.
pub const ANISO_LINEARITY_REL: f64 = 0.1;

#[derive(Clone, Copy, Debug, Serialize)]
pub struct Tolerances {
    pub version: &'static str,
    pub exact_identity_rel: f64,
    pub mc_sigma_bound: f64,
    pub scaling_sigma_bound: f64,
    pub resolvent_remainder_coeff: f64,
    pub gamma_drift_rel: f64,
    pub root_residual: f64,
    pub isometry_residual: f64,
    pub db_residual_rel: f64,
    pub stationarity_residual: f64,
    pub l1_equilibration: f64,
    pub nonrel_max_dev: f64,
    pub nonrel_slope_tol: f64,
    pub aniso_slope_factor: f64,
    pub aniso_linearity_rel: f64,
}

pub fn current() -> Tolerances {
    Tolerances {
        version: TOLERANCES_VERSION,
        exact_identity_rel: EXACT_IDENTITY_REL,
        mc_sigma_bound: MC_SIGMA_BOUND,
        scaling_sigma_bound: SCALING_SIGMA_BOUND,
        resolvent_remainder_coeff: RESOLVENT_REMAINDER_COEFF,
        gamma_drift_rel: GAMMA_DRIFT_REL,
        root_residual: ROOT_RESIDUAL,
        isometry_residual: ISOMETRY_RESIDUAL,
        db_residual_rel: DB_RESIDUAL_REL,
        stationarity_residual: STATIONARITY_RESIDUAL,
        l1_equilibration: L1_EQUILIBRATION,
        nonrel_max_dev: NONREL_MAX_DEV,
        nonrel_slope_tol: NONREL_SLOPE_TOL,
        aniso_slope_factor: ANISO_SLOPE_FACTOR,
        aniso_linearity_rel: ANISO_LINEARITY_REL,
    }
}
