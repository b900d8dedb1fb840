//! Zeno-conditioned local increment law and its second moments.
//!
//! Virtual momentum increments around a reference point follow an isotropic
//! centered Gaussian base measure μ₀ with standard deviation `s`, reweighted
//! by the Zeno suppression factor `exp(-(κ/2) ε²)` built from the local
//! contrast `ε = ∇C_Q(p_ref)·δp`. Gaussian base × Gaussian weight is again
//! Gaussian, with precision `s⁻²1 + κ nnᵀ` along the conditioning direction
//! `n = 2Qp_ref`; Sherman–Morrison gives the covariance in closed form:
//!
//! ```text
//! C = s²1 − s⁴κ nnᵀ / (1 + κ s² |n|²)
//! ```
//!
//! Every Monte Carlo estimate produced here therefore has an exact analytic
//! oracle. Second moments are taken against the frame split vectors,
//! `M_xy = ⟨(p_x·δp)(p_y·δp)⟩` with `p_x ∈ {p_n, p_t}`.

use nalgebra::{Matrix4, Vector4};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quadform::{LocalFrame, QuadForm};
use crate::seeds;

#[derive(Debug, Error, PartialEq)]
pub enum LawError {
    #[error("base standard deviation must be positive (got {0})")]
    NonPositiveBaseSd(f64),
    #[error("monitoring strength must be nonnegative (got {0})")]
    NegativeKappa(f64),
    #[error("conditioned covariance is not positive definite")]
    NotPositiveDefinite,
    #[error("sample count must be at least 1")]
    EmptySample,
}

/// Which second moments enter downstream formulas: conditioned by the Zeno
/// weight, or of the bare base measure (κ treated as 0 in the conditioning).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    Bare,
    Zeno,
}

/// How a [`MomentSet`] was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MomentMethod {
    Analytic,
    MonteCarlo,
}

/// Local measurement contrast `ε(p_ref, δp) = ∇C_Q(p_ref)·δp = 2(Qp_ref)·δp`.
///
/// Because `C_Q` is quadratic this equals the exact midpoint difference
/// `C_Q(p_ref + δp/2) − C_Q(p_ref − δp/2)` with no higher-order terms.
pub fn contrast(q: &QuadForm, p_ref: &Vector4<f64>, dp: &Vector4<f64>) -> f64 {
    q.normal_vector(p_ref).dot(dp)
}

/// The conditioned increment law μ_pref.
#[derive(Clone, Debug)]
pub struct IncrementLaw {
    base_sd: f64,
    kappa: f64,
    q: QuadForm,
    frame: LocalFrame,
}

impl IncrementLaw {
    pub fn new(base_sd: f64, kappa: f64, q: QuadForm, frame: LocalFrame) -> Result<Self, LawError> {
        if !(base_sd > 0.0) || !base_sd.is_finite() {
            return Err(LawError::NonPositiveBaseSd(base_sd));
        }
        if !(kappa >= 0.0) || !kappa.is_finite() {
            return Err(LawError::NegativeKappa(kappa));
        }
        Ok(Self { base_sd, kappa, q, frame })
    }

    pub fn base_sd(&self) -> f64 {
        self.base_sd
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn quad_form(&self) -> &QuadForm {
        &self.q
    }

    pub fn frame(&self) -> &LocalFrame {
        &self.frame
    }

    /// Conditioning direction `n = 2Qp_ref`.
    pub fn conditioning_direction(&self) -> Vector4<f64> {
        self.q.normal_vector(self.frame.p_ref())
    }

    pub fn contrast(&self, dp: &Vector4<f64>) -> f64 {
        contrast(&self.q, self.frame.p_ref(), dp)
    }

    /// Zeno suppression factor `exp(-(κ/2) ε²) ∈ (0, 1]`.
    pub fn zeno_weight(&self, dp: &Vector4<f64>) -> f64 {
        let eps = self.contrast(dp);
        (-0.5 * self.kappa * eps * eps).exp()
    }

    /// Covariance of μ_pref via the rank-one Sherman–Morrison update.
    pub fn conditioned_covariance(&self) -> Matrix4<f64> {
        let s2 = self.base_sd * self.base_sd;
        let n = self.conditioning_direction();
        let denom = 1.0 + self.kappa * s2 * n.norm_squared();
        s2 * Matrix4::identity() - (s2 * s2 * self.kappa / denom) * (n * n.transpose())
    }

    fn cholesky_factor(&self) -> Result<Matrix4<f64>, LawError> {
        nalgebra::Cholesky::new(self.conditioned_covariance())
            .map(|c| c.unpack())
            .ok_or(LawError::NotPositiveDefinite)
    }

    /// Draw `n_samples` i.i.d. increments; bit-identical for identical seeds
    /// regardless of thread count.
    pub fn sample(&self, n_samples: u64, seed: u64) -> Result<Vec<Vector4<f64>>, LawError> {
        if n_samples == 0 {
            return Err(LawError::EmptySample);
        }
        let chol = self.cholesky_factor()?;
        let chunks: Vec<Vec<Vector4<f64>>> = seeds::chunk_layout(n_samples)
            .into_par_iter()
            .map(|(idx, len)| {
                let mut rng = seeds::stream(seed, "increments.sample", idx);
                (0..len).map(|_| chol * draw_standard(&mut rng)).collect()
            })
            .collect();
        Ok(chunks.into_iter().flatten().collect())
    }

    /// Second moments against the frame split, by the requested method.
    pub fn moments(&self, method: MomentMethod, n_samples: u64, seed: u64) -> Result<MomentSet, LawError> {
        match method {
            MomentMethod::Analytic => Ok(self.moments_analytic()),
            MomentMethod::MonteCarlo => self.moments_montecarlo(n_samples, seed),
        }
    }

    /// Exact moments `M_xy = p_xᵀ C p_y` of the conditioned Gaussian.
    pub fn moments_analytic(&self) -> MomentSet {
        let c = self.conditioned_covariance();
        let (p_n, p_t) = (self.frame.p_n(), self.frame.p_t());
        MomentSet {
            m_nn: (c * p_n).dot(p_n),
            m_tt: (c * p_t).dot(p_t),
            m_nt: (c * p_n).dot(p_t),
            se_nn: 0.0,
            se_tt: 0.0,
            se_nt: 0.0,
            method: MomentMethod::Analytic,
            n_samples: 0,
            degenerate_frame: self.frame.is_degenerate(),
        }
    }

    /// Monte Carlo moments with standard errors of the means.
    pub fn moments_montecarlo(&self, n_samples: u64, seed: u64) -> Result<MomentSet, LawError> {
        if n_samples == 0 {
            return Err(LawError::EmptySample);
        }
        let chol = self.cholesky_factor()?;
        let (p_n, p_t) = (*self.frame.p_n(), *self.frame.p_t());
        let partials: Vec<Accumulator> = seeds::chunk_layout(n_samples)
            .into_par_iter()
            .map(|(idx, len)| {
                let mut rng = seeds::stream(seed, "increments.moments", idx);
                let mut acc = Accumulator::default();
                for _ in 0..len {
                    let dp = chol * draw_standard(&mut rng);
                    let xn = p_n.dot(&dp);
                    let xt = p_t.dot(&dp);
                    acc.push(xn * xn, xt * xt, xn * xt);
                }
                acc
            })
            .collect();
        // merge in chunk order so the reduction tree is fixed
        let acc = partials.into_iter().fold(Accumulator::default(), Accumulator::merge);
        let n = n_samples as f64;
        let (m_nn, se_nn) = acc.nn.mean_and_se(n);
        let (m_tt, se_tt) = acc.tt.mean_and_se(n);
        let (m_nt, se_nt) = acc.nt.mean_and_se(n);
        Ok(MomentSet {
            m_nn,
            m_tt,
            m_nt,
            se_nn,
            se_tt,
            se_nt,
            method: MomentMethod::MonteCarlo,
            n_samples,
            degenerate_frame: self.frame.is_degenerate(),
        })
    }
}

fn draw_standard(rng: &mut rand_chacha::ChaCha8Rng) -> Vector4<f64> {
    Vector4::new(
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
    )
}

#[derive(Clone, Copy, Debug, Default)]
struct Channel {
    sum: f64,
    sum_sq: f64,
}

impl Channel {
    fn push(&mut self, x: f64) {
        self.sum += x;
        self.sum_sq += x * x;
    }

    fn merge(self, other: Channel) -> Channel {
        Channel { sum: self.sum + other.sum, sum_sq: self.sum_sq + other.sum_sq }
    }

    fn mean_and_se(&self, n: f64) -> (f64, f64) {
        let mean = self.sum / n;
        let var = (self.sum_sq / n - mean * mean).max(0.0);
        (mean, (var / n).sqrt())
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct Accumulator {
    nn: Channel,
    tt: Channel,
    nt: Channel,
}

impl Accumulator {
    fn push(&mut self, nn: f64, tt: f64, nt: f64) {
        self.nn.push(nn);
        self.tt.push(tt);
        self.nt.push(nt);
    }

    fn merge(self, other: Accumulator) -> Accumulator {
        Accumulator { nn: self.nn.merge(other.nn), tt: self.tt.merge(other.tt), nt: self.nt.merge(other.nt) }
    }
}

/// Second moments of the conditioned increment law, with Monte Carlo standard
/// errors (zero for analytic evaluation).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentSet {
    pub m_nn: f64,
    pub m_tt: f64,
    pub m_nt: f64,
    pub se_nn: f64,
    pub se_tt: f64,
    pub se_nt: f64,
    pub method: MomentMethod,
    pub n_samples: u64,
    /// Set when `p_t = 0`, in which case the tangential moments vanish
    /// identically and ratio diagnostics built on `M_tt` degenerate.
    pub degenerate_frame: bool,
}

impl MomentSet {
    /// Plain values without error estimates, for synthetic providers.
    pub fn exact(m_nn: f64, m_tt: f64, m_nt: f64) -> Self {
        Self {
            m_nn,
            m_tt,
            m_nt,
            se_nn: 0.0,
            se_tt: 0.0,
            se_nt: 0.0,
            method: MomentMethod::Analytic,
            n_samples: 0,
            degenerate_frame: false,
        }
    }

    /// First-order propagated error of the Gram determinant
    /// `M_nn M_tt − M_nt²`, used by the Cauchy–Schwarz diagnostics.
    pub fn gram_se(&self) -> f64 {
        self.se_nn * self.m_tt.abs() + self.se_tt * self.m_nn.abs() + 2.0 * self.m_nt.abs() * self.se_nt
    }
}
