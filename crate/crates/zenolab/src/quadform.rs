//! Quadratic forms on four-dimensional Euclidean momentum space.
//!
//! The monitored observable is `C_Q(p) = pᵀQp` with `Q` real symmetric. This
//! module provides construction and evaluation of such forms, the local
//! normal/tangential frame used to parametrize the two-eigenvalue family
//! `Q = q_n Π_n + q_tan Π_tan`, eigenvalue signature classification, and the
//! residual `‖ΛᵀQΛ − Q‖_F` measuring how well a linear map preserves `Q`.
//!
//! The frame axis `u` is a fixed unit vector (default `e0`). With this
//! convention the damping-scale formulas of [`crate::zenoflow`] are exact
//! identities for any reference momentum; a gradient-aligned frame
//! (`u ∥ Qp_ref`) is available for comparison via
//! [`LocalFrame::gradient_aligned`].

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors from constructors in this module.
#[derive(Debug, Error, PartialEq)]
pub enum QuadFormError {
    #[error("matrix has a non-finite entry")]
    NonFinite,
    #[error("matrix is not symmetric (max asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("frame axis must be a unit vector (|u| = {0})")]
    AxisNotUnit(f64),
    #[error("reference momentum must be nonzero")]
    ZeroReference,
    #[error("signature tolerance must be positive")]
    NonPositiveTolerance,
}

/// Real symmetric 4×4 quadratic form; storage is exactly symmetric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadForm {
    entries: Matrix4<f64>,
}

impl QuadForm {
    /// Build from an arbitrary matrix by explicit symmetrization `(M + Mᵀ)/2`.
    pub fn from_matrix(m: Matrix4<f64>) -> Result<Self, QuadFormError> {
        if !m.iter().all(|x| x.is_finite()) {
            return Err(QuadFormError::NonFinite);
        }
        let mut entries = Matrix4::zeros();
        for i in 0..4 {
            entries[(i, i)] = m[(i, i)];
            for j in (i + 1)..4 {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                entries[(i, j)] = v;
                entries[(j, i)] = v;
            }
        }
        Ok(Self { entries })
    }

    /// Build from a matrix that is already symmetric to within `1e-12`
    /// (absolute, entrywise); stored exactly symmetrized.
    pub fn from_symmetric(m: Matrix4<f64>) -> Result<Self, QuadFormError> {
        let asym = (m - m.transpose()).abs().max();
        if asym > 1e-12 {
            return Err(QuadFormError::NotSymmetric(asym));
        }
        Self::from_matrix(m)
    }

    pub fn identity() -> Self {
        Self { entries: Matrix4::identity() }
    }

    pub fn zero() -> Self {
        Self { entries: Matrix4::zeros() }
    }

    pub fn diagonal(d: [f64; 4]) -> Self {
        Self { entries: Matrix4::from_diagonal(&Vector4::new(d[0], d[1], d[2], d[3])) }
    }

    /// `diag(1, -alpha, -alpha, -alpha)`.
    pub fn lorentzian(alpha: f64) -> Self {
        Self::diagonal([1.0, -alpha, -alpha, -alpha])
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.entries
    }

    /// `C_Q(p) = pᵀQp`.
    pub fn evaluate(&self, p: &Vector4<f64>) -> f64 {
        (self.entries * p).dot(p)
    }

    /// Gradient of `C_Q` at `p`, the local normal `∇C_Q(p) = 2Qp`.
    pub fn normal_vector(&self, p: &Vector4<f64>) -> Vector4<f64> {
        2.0 * (self.entries * p)
    }

    pub fn scale(&self, alpha: f64) -> Self {
        Self { entries: alpha * self.entries }
    }

    /// `Q - other`, the shifted monitored form.
    pub fn shift(&self, other: &QuadForm) -> Self {
        Self { entries: self.entries - other.entries }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.entries.norm()
    }

    /// Eigenvalues of the (symmetric) form, ascending.
    pub fn eigenvalues(&self) -> [f64; 4] {
        let eig = nalgebra::SymmetricEigen::new(self.entries);
        let mut ev = [0.0; 4];
        for (slot, v) in ev.iter_mut().zip(eig.eigenvalues.iter()) {
            *slot = *v;
        }
        ev.sort_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"));
        ev
    }

    /// Eigenvalue sign counts with threshold `tol > 0`.
    pub fn signature(&self, tol: f64) -> Result<Signature, QuadFormError> {
        if !(tol > 0.0) {
            return Err(QuadFormError::NonPositiveTolerance);
        }
        let mut sig = Signature::default();
        for ev in self.eigenvalues() {
            if ev > tol {
                sig.n_pos += 1;
            } else if ev < -tol {
                sig.n_neg += 1;
            } else {
                sig.n_zero += 1;
            }
        }
        Ok(sig)
    }

    /// Signature with the default tolerance `1e-10` relative to the largest
    /// eigenvalue magnitude (floored at `1e-300` for the zero form).
    pub fn signature_auto(&self) -> Signature {
        let scale = self.eigenvalues().iter().fold(0.0f64, |m, e| m.max(e.abs()));
        let tol = (1e-10 * scale).max(1e-300);
        self.signature(tol).expect("tolerance is positive")
    }

    /// `‖ΛᵀQΛ − Q‖_F`; zero iff `Λ` is an isometry of `Q`.
    pub fn isometry_residual(&self, lambda: &Matrix4<f64>) -> f64 {
        (lambda.transpose() * self.entries * lambda - self.entries).norm()
    }
}

impl std::ops::Mul<QuadForm> for f64 {
    type Output = QuadForm;
    fn mul(self, q: QuadForm) -> QuadForm {
        q.scale(self)
    }
}

/// Eigenvalue sign counts of a quadratic form.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature {
    pub n_pos: usize,
    pub n_neg: usize,
    pub n_zero: usize,
}

impl Signature {
    pub fn new(n_pos: usize, n_neg: usize, n_zero: usize) -> Self {
        Self { n_pos, n_neg, n_zero }
    }

    /// One positive against three negative directions.
    pub fn is_lorentzian(&self) -> bool {
        *self == Signature::new(1, 3, 0)
    }
}

impl std::fmt::Display for Signature {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{})", self.n_pos, self.n_neg, self.n_zero)
    }
}

/// Orthogonal normal/tangential split of momentum space at a reference point.
///
/// `Π_n = uuᵀ` projects on the frame axis, `Π_tan = 1 − Π_n` on its
/// three-dimensional complement; `p_n = Π_n p_ref` and `p_t = p_ref − p_n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalFrame {
    p_ref: Vector4<f64>,
    u: Vector4<f64>,
    pi_n: Matrix4<f64>,
    pi_tan: Matrix4<f64>,
    p_n: Vector4<f64>,
    p_t: Vector4<f64>,
}

/// Relative `|p_t|/|p_ref|` below which a frame counts as degenerate.
pub const DEGENERATE_FRAME_TOL: f64 = 1e-12;

impl LocalFrame {
    /// Fixed-axis frame: `u` must be unit to within `1e-12`, `p_ref` nonzero.
    pub fn new(p_ref: Vector4<f64>, u: Vector4<f64>) -> Result<Self, QuadFormError> {
        if !p_ref.iter().chain(u.iter()).all(|x| x.is_finite()) {
            return Err(QuadFormError::NonFinite);
        }
        let norm_u = u.norm();
        if (norm_u - 1.0).abs() > 1e-12 {
            return Err(QuadFormError::AxisNotUnit(norm_u));
        }
        if p_ref.norm() == 0.0 {
            return Err(QuadFormError::ZeroReference);
        }
        let pi_n = u * u.transpose();
        let pi_tan = Matrix4::identity() - pi_n;
        let p_n = u.dot(&p_ref) * u;
        let p_t = p_ref - p_n;
        Ok(Self { p_ref, u, pi_n, pi_tan, p_n, p_t })
    }

    /// Frame with the axis along the local normal `Qp_ref/|Qp_ref|`.
    ///
    /// Exposed for comparison with the fixed-axis convention; note that for
    /// this choice `p_ref` need not split into nonzero `p_n`, `p_t`.
    pub fn gradient_aligned(q: &QuadForm, p_ref: Vector4<f64>) -> Result<Self, QuadFormError> {
        let n = q.normal_vector(&p_ref);
        let norm = n.norm();
        if norm == 0.0 {
            return Err(QuadFormError::ZeroReference);
        }
        Self::new(p_ref, n / norm)
    }

    /// Reference momentum at angle `theta` from `axis`, with norm `radius`.
    ///
    /// The in-plane direction completing the plane of rotation is the
    /// coordinate axis least aligned with `axis`, orthonormalized.
    pub fn oblique(axis: Vector4<f64>, theta: f64, radius: f64) -> Result<Self, QuadFormError> {
        let norm_axis = axis.norm();
        if norm_axis == 0.0 || !norm_axis.is_finite() {
            return Err(QuadFormError::ZeroReference);
        }
        let u = axis / norm_axis;
        // pick the coordinate direction with the smallest |u_i| and project out u
        let mut k = 0;
        for i in 1..4 {
            if u[i].abs() < u[k].abs() {
                k = i;
            }
        }
        let mut e = Vector4::zeros();
        e[k] = 1.0;
        let w = e - u.dot(&e) * u;
        let w = w / w.norm();
        let p_ref = radius * (theta.cos() * u + theta.sin() * w);
        Self::new(p_ref, u)
    }

    pub fn p_ref(&self) -> &Vector4<f64> {
        &self.p_ref
    }

    pub fn axis(&self) -> &Vector4<f64> {
        &self.u
    }

    pub fn pi_n(&self) -> &Matrix4<f64> {
        &self.pi_n
    }

    pub fn pi_tan(&self) -> &Matrix4<f64> {
        &self.pi_tan
    }

    pub fn p_n(&self) -> &Vector4<f64> {
        &self.p_n
    }

    pub fn p_t(&self) -> &Vector4<f64> {
        &self.p_t
    }

    /// True when `p_ref` is (numerically) parallel to the axis, so the
    /// tangential split vector vanishes and tangential moments degenerate.
    pub fn is_degenerate(&self) -> bool {
        self.p_t.norm() <= DEGENERATE_FRAME_TOL * self.p_ref.norm()
    }

    /// `Q = q_n Π_n + q_tan Π_tan`; eigenvalues are `{q_n, q_tan³}`.
    pub fn assemble(&self, q_n: f64, q_tan: f64) -> QuadForm {
        QuadForm { entries: q_n * self.pi_n + q_tan * self.pi_tan }
    }

    /// Project a form on the frame: `q_n = uᵀQu`, `q_tan = tr(Π_tan Q Π_tan)/3`,
    /// plus the Frobenius norm of what the two-eigenvalue family misses.
    pub fn decompose(&self, q: &QuadForm) -> Decomposition {
        let q_n = (q.entries * self.u).dot(&self.u);
        let q_tan = (self.pi_tan * q.entries * self.pi_tan).trace() / 3.0;
        let residual = (q.entries - q_n * self.pi_n - q_tan * self.pi_tan).norm();
        Decomposition { q_n, q_tan, residual }
    }
}

/// Result of projecting a form onto the two-eigenvalue family of a frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub q_n: f64,
    pub q_tan: f64,
    pub residual: f64,
}

/// Hyperbolic rotation of rapidity `phi` mixing coordinate `0` with spatial
/// coordinate `axis ∈ {1,2,3}`; an exact isometry of `diag(1,-1,-1,-1)`.
pub fn boost(phi: f64, axis: usize) -> Matrix4<f64> {
    assert!((1..=3).contains(&axis), "boost axis must be 1, 2 or 3");
    let mut m = Matrix4::identity();
    let (c, s) = (phi.cosh(), phi.sinh());
    m[(0, 0)] = c;
    m[(0, axis)] = s;
    m[(axis, 0)] = s;
    m[(axis, axis)] = c;
    m
}

/// Boost conjugated by `S = diag(1, √alpha, √alpha, √alpha)`: an isometry of
/// `diag(1, -alpha, -alpha, -alpha)` whenever the plain boost preserves
/// `diag(1,-1,-1,-1)`.
pub fn scaled_boost(alpha: f64, phi: f64, axis: usize) -> Matrix4<f64> {
    assert!(alpha > 0.0, "scaled boost needs alpha > 0");
    let root = alpha.sqrt();
    let s = Matrix4::from_diagonal(&Vector4::new(1.0, root, root, root));
    let s_inv = Matrix4::from_diagonal(&Vector4::new(1.0, 1.0 / root, 1.0 / root, 1.0 / root));
    s_inv * boost(phi, axis) * s
}

/// Rotation by `angle` in the spatial plane spanned by coordinates `i, j`.
pub fn spatial_rotation(angle: f64, i: usize, j: usize) -> Matrix4<f64> {
    assert!((1..=3).contains(&i) && (1..=3).contains(&j) && i != j, "rotation plane must be two distinct spatial axes");
    let mut m = Matrix4::identity();
    let (c, s) = (angle.cos(), angle.sin());
    m[(i, i)] = c;
    m[(j, j)] = c;
    m[(i, j)] = -s;
    m[(j, i)] = s;
    m
}
