//! Second-order correction tensor from eliminating the fast monitored sector.
//!
//! Strong monitoring damps coherences at a rate set by the gap
//! `ΔC_Q(p₁,p₂) = C_Q(p₁) − C_Q(p₂)`. Virtual kick-out-and-return processes
//! through the fast sector are resummed by the regularized resolvent
//! `1/((ε + δ_Δ)² + γ²)`, where `ε` is the slow gap and
//! `δ_Δ = 2ΔᵀQ δp` the gap shift produced by a kick `Δ`. Their net effect is
//! a symmetric positive-semidefinite tensor
//!
//! ```text
//! Σ(Q) = (η²/κ) E_Δ[ T_Δ(p) / ((ΔC_Q(p;Δ))² + γ²) ]
//! ```
//!
//! built from the log-intensity tensor `T_Δ(p) = ½[∂Φ ⊗ ∂Φ]` of the kick
//! amplitudes, with the exact kicked increment
//! `ΔC_Q(p;Δ) = 2ΔᵀQp + ΔᵀQΔ`. The expectation runs over the model's kick
//! distribution; `shell` averaging additionally randomizes the tangential
//! orientation of the reference momentum.
//!
//! The amplitude model is a Gaussian kick profile times a Gaussian momentum
//! intensity, `M_Δ(p)² = (2πw²)⁻² exp(−|Δ|²/(2w²)) exp(−a|p|²)`, for which
//! `∂Φ = −2ap` in closed form, so every Monte Carlo estimate here has a
//! hand-computable integrand.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quadform::QuadForm;
use crate::seeds;

#[derive(Debug, Error, PartialEq)]
pub enum SchurError {
    #[error("kick spread must be positive (got {0})")]
    NonPositiveKickSpread(f64),
    #[error("intensity decay must be nonnegative (got {0})")]
    NegativeIntensityDecay(f64),
    #[error("resolvent regularization must be positive (got {0})")]
    NonPositiveGamma(f64),
    #[error("monitoring strength must be positive (got {0})")]
    NonPositiveKappa(f64),
    #[error("reference momentum violates the nondegeneracy assumption (Qp_ref = 0)")]
    DegenerateReference,
    #[error("sample count must be at least 1")]
    EmptySample,
}

/// Gaussian kick profile × Gaussian momentum intensity.
///
/// `M_Δ(p)² = (2πw²)⁻² exp(−|Δ|²/(2w²)) exp(−a|p|²)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeModel {
    kick_spread: f64,
    intensity_decay: f64,
}

impl AmplitudeModel {
    pub fn new(kick_spread: f64, intensity_decay: f64) -> Result<Self, SchurError> {
        if !(kick_spread > 0.0) || !kick_spread.is_finite() {
            return Err(SchurError::NonPositiveKickSpread(kick_spread));
        }
        if !(intensity_decay >= 0.0) || !intensity_decay.is_finite() {
            return Err(SchurError::NegativeIntensityDecay(intensity_decay));
        }
        Ok(Self { kick_spread, intensity_decay })
    }

    pub fn kick_spread(&self) -> f64 {
        self.kick_spread
    }

    pub fn intensity_decay(&self) -> f64 {
        self.intensity_decay
    }

    /// Real positive amplitude `M_Δ(p)`.
    pub fn amplitude(&self, delta: &Vector4<f64>, p: &Vector4<f64>) -> f64 {
        let w2 = self.kick_spread * self.kick_spread;
        let norm = 1.0 / (2.0 * std::f64::consts::PI * w2);
        norm * (-delta.norm_squared() / (4.0 * w2)).exp()
            * (-0.5 * self.intensity_decay * p.norm_squared()).exp()
    }

    /// Intensity `M_Δ(p)²`.
    pub fn intensity(&self, delta: &Vector4<f64>, p: &Vector4<f64>) -> f64 {
        let m = self.amplitude(delta, p);
        m * m
    }

    /// Log-intensity `Φ_Δ(p) = log M_Δ(p)²`.
    pub fn log_intensity(&self, delta: &Vector4<f64>, p: &Vector4<f64>) -> f64 {
        let w2 = self.kick_spread * self.kick_spread;
        -2.0 * (2.0 * std::f64::consts::PI * w2).ln() - delta.norm_squared() / (2.0 * w2)
            - self.intensity_decay * p.norm_squared()
    }

    /// `∂Φ/∂p = −2ap`; independent of the kick and of any Δ-dependent
    /// amplitude normalization.
    pub fn log_intensity_gradient(&self, _delta: &Vector4<f64>, p: &Vector4<f64>) -> Vector4<f64> {
        -2.0 * self.intensity_decay * p
    }

    /// `T_Δ(p) = ½[∂Φ ⊗ ∂Φ] = 2a² p pᵀ`: PSD, rank ≤ 1.
    pub fn log_intensity_tensor(&self, delta: &Vector4<f64>, p: &Vector4<f64>) -> Matrix4<f64> {
        let g = self.log_intensity_gradient(delta, p);
        0.5 * (g * g.transpose())
    }

    /// One kick `Δ ~ N(0, w²1)`.
    pub fn sample_kick(&self, rng: &mut rand_chacha::ChaCha8Rng) -> Vector4<f64> {
        let z: [f64; 4] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        self.kick_spread * Vector4::new(z[0], z[1], z[2], z[3])
    }
}

/// Monitoring strength and resolvent regularization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolventParams {
    pub kappa: f64,
    pub gamma: f64,
}

impl ResolventParams {
    pub fn new(kappa: f64, gamma: f64) -> Result<Self, SchurError> {
        if !(kappa > 0.0) {
            return Err(SchurError::NonPositiveKappa(kappa));
        }
        if !(gamma > 0.0) {
            return Err(SchurError::NonPositiveGamma(gamma));
        }
        Ok(Self { kappa, gamma })
    }
}

/// Monitoring gap `ΔC_Q(p₁,p₂) = C_Q(p₁) − C_Q(p₂)`.
pub fn gap(q: &QuadForm, p1: &Vector4<f64>, p2: &Vector4<f64>) -> f64 {
    q.evaluate(p1) - q.evaluate(p2)
}

/// Exact kicked increment `ΔC_Q(p;Δ) = C_Q(p+Δ) − C_Q(p) = 2ΔᵀQp + ΔᵀQΔ`.
pub fn kicked_increment(q: &QuadForm, p: &Vector4<f64>, delta: &Vector4<f64>) -> f64 {
    delta.dot(&q.normal_vector(p)) + (q.matrix() * delta).dot(delta)
}

/// Both sides of the kicked-gap identity
/// `ΔC_Q(p₁+Δ, p₂+Δ) = ΔC_Q(p₁,p₂) + 2ΔᵀQ(p₁−p₂)` and their residual.
#[derive(Clone, Copy, Debug)]
pub struct GapCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
}

pub fn kicked_gap_check(
    q: &QuadForm,
    p1: &Vector4<f64>,
    p2: &Vector4<f64>,
    delta: &Vector4<f64>,
) -> GapCheck {
    let lhs = gap(q, &(p1 + delta), &(p2 + delta));
    let shift = 2.0 * (q.matrix() * (p1 - p2)).dot(delta);
    let rhs = gap(q, p1, p2) + shift;
    GapCheck { lhs, rhs, residual: (lhs - rhs).abs() }
}

/// Regularized resolvent factor `F(ε; δ_Δ) = 1/((ε + δ_Δ)² + γ²)`.
pub fn resolvent_weight(eps: f64, delta_gap: f64, params: &ResolventParams) -> f64 {
    let shifted = eps + delta_gap;
    1.0 / (shifted * shifted + params.gamma * params.gamma)
}

/// First-order expansion data of the resolvent factor in the slow gap `ε`:
/// `F = F(0) + ε ∂F(0) + remainder`, with `|remainder| ≤ 4ε²/γ⁴`.
#[derive(Clone, Copy, Debug)]
pub struct ResolventExpansion {
    pub value: f64,
    pub zeroth: f64,
    pub first: f64,
    pub remainder: f64,
}

pub fn resolvent_expansion(eps: f64, delta_gap: f64, params: &ResolventParams) -> ResolventExpansion {
    let g2 = params.gamma * params.gamma;
    let d2 = delta_gap * delta_gap;
    let value = resolvent_weight(eps, delta_gap, params);
    let zeroth = 1.0 / (d2 + g2);
    let first = -2.0 * delta_gap / ((d2 + g2) * (d2 + g2));
    ResolventExpansion { value, zeroth, first, remainder: value - zeroth - eps * first }
}

/// Exact and leading-quadratic amplitude contrast between the two arms of a
/// near-diagonal coherence:
/// `exact = |M_Δ(p+δp/2) − M_Δ(p−δp/2)|²`, `quadratic = (∂M·δp)²`.
#[derive(Clone, Copy, Debug)]
pub struct ContrastCheck {
    pub exact: f64,
    pub quadratic: f64,
}

pub fn contrast_tensor(
    model: &AmplitudeModel,
    delta: &Vector4<f64>,
    p_ref: &Vector4<f64>,
    dp: &Vector4<f64>,
) -> ContrastCheck {
    let hi = model.amplitude(delta, &(p_ref + 0.5 * dp));
    let lo = model.amplitude(delta, &(p_ref - 0.5 * dp));
    let exact = (hi - lo) * (hi - lo);
    // dM = M · (∂Φ/2) for the real positive amplitude
    let dm = 0.5 * model.amplitude(delta, p_ref) * model.log_intensity_gradient(delta, p_ref).dot(dp);
    ContrastCheck { exact, quadratic: dm * dm }
}

/// How the slow average over reference momenta is taken.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum Averaging {
    /// Evaluate at the given `p_ref` only.
    Pointwise,
    /// Additionally rotate the component of `p_ref` orthogonal to `axis` by a
    /// uniform random rotation per sample; this preserves `C_Q` for forms
    /// that are tangentially isotropic about the axis.
    Shell { axis: [f64; 4] },
}

/// Choice of the resolvent regularization scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "policy", content = "value")]
pub enum GammaPolicy {
    /// `γ = κ^{-1/2} ×` median `|ΔC_Q(p_ref;Δ)|` over the kick distribution.
    Median,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SigmaConfig {
    pub eta: f64,
    pub kappa: f64,
    pub gamma: GammaPolicy,
    pub averaging: Averaging,
    pub n_samples: u64,
    pub seed: u64,
}

/// Monte Carlo estimate of Σ(Q) with support diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaTensor {
    pub sigma: Matrix4<f64>,
    /// Tangential weight `tr(Π_tan Σ Π_tan)/3` for the gradient-aligned frame
    /// at `p_ref`.
    pub sigma_tan: f64,
    /// `‖Π_n Σ Π_n‖_F / ‖Σ‖_F`; reported, not assumed zero.
    pub normal_fraction: f64,
    /// Largest entrywise standard error of the mean.
    pub mc_se: f64,
    /// Regularization actually used.
    pub gamma: f64,
    pub n_samples: u64,
}

impl SigmaTensor {
    /// Σ reinterpreted as a quadratic form shift.
    pub fn as_quad_form(&self) -> QuadForm {
        QuadForm::from_matrix(self.sigma).expect("sigma entries are finite")
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.as_quad_form().eigenvalues()[0]
    }
}

/// Median `|ΔC_Q(p_ref;Δ)|` over the kick distribution, for the γ policy.
pub fn median_kicked_gap(
    q: &QuadForm,
    p_ref: &Vector4<f64>,
    model: &AmplitudeModel,
    n_samples: u64,
    seed: u64,
) -> Result<f64, SchurError> {
    if n_samples == 0 {
        return Err(SchurError::EmptySample);
    }
    let mut rng = seeds::stream(seed, "schur.gamma_policy", 0);
    let mut gaps: Vec<f64> = (0..n_samples)
        .map(|_| kicked_increment(q, p_ref, &model.sample_kick(&mut rng)).abs())
        .collect();
    gaps.sort_by(|a, b| a.partial_cmp(b).expect("finite gaps"));
    Ok(gaps[gaps.len() / 2])
}

/// One integrand sample `T_Δ(p) / ((ΔC_Q(p;Δ))² + γ²)` of the Σ integral,
/// before the `η²/κ` prefactor.
pub fn sigma_integrand(
    model: &AmplitudeModel,
    q: &QuadForm,
    p: &Vector4<f64>,
    delta: &Vector4<f64>,
    gamma: f64,
) -> Matrix4<f64> {
    let dc = kicked_increment(q, p, delta);
    model.log_intensity_tensor(delta, p) / (dc * dc + gamma * gamma)
}

// orthonormal basis of the complement of the unit vector `u`
fn tangential_basis(u: &Vector4<f64>) -> [Vector4<f64>; 3] {
    let mut basis: Vec<Vector4<f64>> = Vec::with_capacity(3);
    // coordinate axes ordered by increasing overlap with u
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&i, &j| u[i].abs().partial_cmp(&u[j].abs()).expect("finite axis"));
    for &i in &order {
        if basis.len() == 3 {
            break;
        }
        let mut v = Vector4::zeros();
        v[i] = 1.0;
        v -= u.dot(&v) * u;
        for b in &basis {
            v -= b.dot(&v) * *b;
        }
        let norm = v.norm();
        if norm > 1e-8 {
            basis.push(v / norm);
        }
    }
    [basis[0], basis[1], basis[2]]
}

// uniform random rotation in three dimensions via a unit quaternion
fn random_rotation3(rng: &mut rand_chacha::ChaCha8Rng) -> Matrix3<f64> {
    let q: [f64; 4] = [
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
    ];
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

#[derive(Clone)]
struct MatrixAccumulator {
    sum: Matrix4<f64>,
    sum_sq: Matrix4<f64>,
}

impl Default for MatrixAccumulator {
    fn default() -> Self {
        Self { sum: Matrix4::zeros(), sum_sq: Matrix4::zeros() }
    }
}

impl MatrixAccumulator {
    fn push(&mut self, x: &Matrix4<f64>) {
        self.sum += x;
        self.sum_sq += x.component_mul(x);
    }

    fn merge(mut self, other: MatrixAccumulator) -> MatrixAccumulator {
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
        self
    }
}

/// Monte Carlo estimate of the correction tensor Σ(Q) at `p_ref`.
pub fn sigma_tensor(
    q: &QuadForm,
    p_ref: &Vector4<f64>,
    model: &AmplitudeModel,
    cfg: &SigmaConfig,
) -> Result<SigmaTensor, SchurError> {
    if cfg.n_samples == 0 {
        return Err(SchurError::EmptySample);
    }
    if !(cfg.kappa > 0.0) {
        return Err(SchurError::NonPositiveKappa(cfg.kappa));
    }
    let n_dir = q.normal_vector(p_ref);
    if n_dir.norm() == 0.0 {
        return Err(SchurError::DegenerateReference);
    }
    let gamma = match cfg.gamma {
        GammaPolicy::Fixed(g) => g,
        GammaPolicy::Median => {
            let probe = cfg.n_samples.clamp(1, 4096);
            median_kicked_gap(q, p_ref, model, probe, cfg.seed)? / cfg.kappa.sqrt()
        }
    };
    if !(gamma > 0.0) {
        return Err(SchurError::NonPositiveGamma(gamma));
    }

    let shell = match cfg.averaging {
        Averaging::Pointwise => None,
        Averaging::Shell { axis } => {
            let u = Vector4::new(axis[0], axis[1], axis[2], axis[3]);
            let norm = u.norm();
            if !(norm > 0.0) {
                return Err(SchurError::DegenerateReference);
            }
            let u = u / norm;
            Some((u, tangential_basis(&u)))
        }
    };

    let partials: Vec<MatrixAccumulator> = seeds::chunk_layout(cfg.n_samples)
        .into_par_iter()
        .map(|(idx, len)| {
            let mut rng = seeds::stream(cfg.seed, "schur.sigma", idx);
            let mut acc = MatrixAccumulator::default();
            for _ in 0..len {
                let delta = model.sample_kick(&mut rng);
                let p = match &shell {
                    None => *p_ref,
                    Some((u, basis)) => {
                        let p_axis = u.dot(p_ref) * *u;
                        let p_tan = p_ref - p_axis;
                        let coords =
                            Vector3::new(basis[0].dot(&p_tan), basis[1].dot(&p_tan), basis[2].dot(&p_tan));
                        let rotated = random_rotation3(&mut rng) * coords;
                        p_axis + rotated[0] * basis[0] + rotated[1] * basis[1] + rotated[2] * basis[2]
                    }
                };
                acc.push(&sigma_integrand(model, q, &p, &delta, gamma));
            }
            acc
        })
        .collect();
    let acc = partials.into_iter().fold(MatrixAccumulator::default(), MatrixAccumulator::merge);

    let n = cfg.n_samples as f64;
    let prefactor = cfg.eta * cfg.eta / cfg.kappa;
    let mean = acc.sum / n;
    let sigma = prefactor * mean;
    let mut mc_se = 0.0f64;
    for i in 0..4 {
        for j in 0..4 {
            let var = (acc.sum_sq[(i, j)] / n - mean[(i, j)] * mean[(i, j)]).max(0.0);
            mc_se = mc_se.max(prefactor * (var / n).sqrt());
        }
    }

    // support diagnostics in the gradient-aligned frame at p_ref
    let n_hat = n_dir / n_dir.norm();
    let pi_n = n_hat * n_hat.transpose();
    let pi_tan = Matrix4::identity() - pi_n;
    let sigma_tan = (pi_tan * sigma * pi_tan).trace() / 3.0;
    let norm_total = sigma.norm();
    let normal_fraction = if norm_total > 0.0 { (pi_n * sigma * pi_n).norm() / norm_total } else { 0.0 };

    Ok(SigmaTensor { sigma, sigma_tan, normal_fraction, mc_se, gamma, n_samples: cfg.n_samples })
}

/// Tangential correction per unit coarse-graining step, usable as the flow
/// clock `ρ_tan(r) = σ_tan(Q(r))/δλ`.
#[derive(Clone, Debug)]
pub struct SchurRate {
    pub model: AmplitudeModel,
    pub frame: crate::quadform::LocalFrame,
    pub config: SigmaConfig,
    pub delta_lambda: f64,
}

impl crate::zenoflow::RhoTanModel for SchurRate {
    fn rate(&self, _r: f64, q_n: f64, q_tan: f64) -> f64 {
        let q = self.frame.assemble(q_n, q_tan);
        match sigma_tensor(&q, self.frame.p_ref(), &self.model, &self.config) {
            // the rate must stay positive; Monte Carlo noise may graze zero
            Ok(s) => (s.sigma_tan / self.delta_lambda).max(f64::MIN_POSITIVE),
            Err(_) => f64::MIN_POSITIVE,
        }
    }
}

/// Structural comparison of the two expressions for the induced dephasing of
/// a near-diagonal pair: the gap-linear rate `κ ε ΔC_Σ` against the
/// first-order variation of the monitored rate under `Q → Q − Σ`. The two are
/// the same polynomial in the momenta; the report guards the code paths.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct IdentificationReport {
    pub n_pairs: usize,
    pub max_rel_mismatch: f64,
}

pub fn identification_report(
    q: &QuadForm,
    sigma: &QuadForm,
    kappa: f64,
    pairs: &[(Vector4<f64>, Vector4<f64>)],
) -> IdentificationReport {
    let mut max_rel = 0.0f64;
    for (p1, p2) in pairs {
        // route 1: Schur-predicted rate via the gap helpers
        let schur_rate = kappa * gap(q, p1, p2) * gap(sigma, p1, p2);
        // route 2: monitoring variation via direct evaluation
        let eps = q.evaluate(p1) - q.evaluate(p2);
        let dc_sigma = sigma.evaluate(p1) - sigma.evaluate(p2);
        let variation_rate = kappa * eps * dc_sigma;
        let scale = schur_rate.abs().max(variation_rate.abs()).max(1e-30);
        max_rel = max_rel.max((schur_rate - variation_rate).abs() / scale);
    }
    IdentificationReport { n_pairs: pairs.len(), max_rel_mismatch: max_rel }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    const E0: Vector4<f64> = Vector4::new(1.0, 0.0, 0.0, 0.0);

    fn model(w: f64, a: f64) -> AmplitudeModel {
        AmplitudeModel::new(w, a).unwrap()
    }

    #[test]
    fn gap_examples() {
        let q = QuadForm::identity();
        assert_eq!(gap(&q, &E0, &E0), 0.0);
        let p2 = Vector4::new(0.9, 0.1, 0.0, 0.0);
        assert!((gap(&q, &E0, &p2) - 0.18).abs() < 1e-15);
    }

    #[test]
    fn gap_equals_midpoint_linearization() {
        // exact for quadratic observables: gap = grad C(midpoint) · dp
        let q = QuadForm::diagonal([1.3, -0.2, 0.7, 0.4]);
        let p1 = Vector4::new(0.4, -1.0, 0.3, 0.8);
        let p2 = Vector4::new(0.5, -1.2, 0.1, 0.9);
        let mid = 0.5 * (p1 + p2);
        let lin = q.normal_vector(&mid).dot(&(p1 - p2));
        assert!((gap(&q, &p1, &p2) - lin).abs() < 1e-14);
    }

    #[test]
    fn kicked_gap_examples() {
        let q = QuadForm::identity();
        let p2 = Vector4::new(0.9, 0.1, 0.0, 0.0);
        let delta = Vector4::new(0.2, 0.0, 0.0, 0.0);
        let check = kicked_gap_check(&q, &E0, &p2, &delta);
        assert!((check.lhs - 0.22).abs() < 1e-15);
        assert!((check.rhs - 0.22).abs() < 1e-15);
        assert!(check.residual <= 1e-15);
        // zero kick
        let zero = kicked_gap_check(&q, &E0, &p2, &Vector4::zeros());
        assert_eq!(zero.residual, 0.0);
    }

    #[test]
    fn kicked_gap_identity_fuzz() {
        let mut rng = seeds::stream(99, "test.kicked_gap", 0);
        let mut max_res = 0.0f64;
        for _ in 0..10_000 {
            let mut m = Matrix4::zeros();
            for i in 0..4 {
                for j in 0..4 {
                    m[(i, j)] = rng.gen_range(-1.0..1.0);
                }
            }
            let q = QuadForm::from_matrix(m).unwrap();
            let mut rand_vec = || {
                Vector4::from_fn(|_, _| rng.gen_range(-3.0..3.0))
            };
            let (p1, p2, delta) = (rand_vec(), rand_vec(), rand_vec());
            let check = kicked_gap_check(&q, &p1, &p2, &delta);
            max_res = max_res.max(check.residual / check.lhs.abs().max(1.0));
        }
        assert!(max_res <= 1e-10, "max residual {max_res}");
    }

    #[test]
    fn kicked_increment_is_exact() {
        let q = QuadForm::diagonal([0.9, -0.6, 0.2, 1.1]);
        let p = Vector4::new(0.3, 0.5, -0.2, 0.9);
        let delta = Vector4::new(-0.4, 0.2, 0.6, -0.1);
        let direct = q.evaluate(&(p + delta)) - q.evaluate(&p);
        assert!((kicked_increment(&q, &p, &delta) - direct).abs() < 1e-14);
    }

    #[test]
    fn resolvent_examples() {
        let params = ResolventParams::new(1.0, 0.5).unwrap();
        assert!((resolvent_weight(0.0, 2.0, &params) - 1.0 / (4.0 + 0.25)).abs() < 1e-15);
        assert!((resolvent_weight(0.0, 0.0, &params) - 4.0).abs() < 1e-15);
        assert!(ResolventParams::new(1.0, 0.0).is_err());
        assert!(ResolventParams::new(0.0, 1.0).is_err());
    }

    #[test]
    fn resolvent_remainder_bound() {
        // |F - F(0) - eps dF(0)| <= 4 eps^2 / gamma^4 uniformly in delta
        for gamma in [0.1, 1.0] {
            let params = ResolventParams::new(1.0, gamma).unwrap();
            let bound = 4.0 / gamma.powi(4);
            for i in 0..100 {
                let eps = -1.0 + 2.0 * (i as f64) / 99.0;
                for j in 0..100 {
                    let delta = -10.0 + 20.0 * (j as f64) / 99.0;
                    let exp = resolvent_expansion(eps, delta, &params);
                    assert!(
                        exp.remainder.abs() <= bound * eps * eps + 1e-18,
                        "gamma={gamma} eps={eps} delta={delta}"
                    );
                }
            }
        }
    }

    #[test]
    fn contrast_tensor_examples() {
        let m = model(0.5, 1.0);
        let delta = Vector4::new(0.3, 0.0, -0.2, 0.0);
        let p = Vector4::new(0.8, 0.1, -0.4, 0.2);
        // zero increment
        let zero = contrast_tensor(&m, &delta, &p, &Vector4::zeros());
        assert_eq!((zero.exact, zero.quadratic), (0.0, 0.0));
        // nonnegative exact contrast, converging ratio under dp-halving
        let mut dp = Vector4::new(0.1, -0.05, 0.02, 0.08);
        let mut last_gap = f64::INFINITY;
        let mut c_fit = 0.0f64;
        for _ in 0..5 {
            let check = contrast_tensor(&m, &delta, &p, &dp);
            assert!(check.exact >= 0.0);
            let ratio_gap = (check.exact / check.quadratic - 1.0).abs();
            assert!(ratio_gap < last_gap, "ratio must approach 1");
            last_gap = ratio_gap;
            c_fit = c_fit.max((check.exact - check.quadratic).abs() / dp.norm().powi(3));
            dp *= 0.5;
        }
        // cubic bound with the fitted constant holds at the finest step
        let check = contrast_tensor(&m, &delta, &p, &dp);
        assert!((check.exact - check.quadratic).abs() <= c_fit * dp.norm().powi(3) * 1.01 + 1e-30);
    }

    #[test]
    fn log_intensity_tensor_examples() {
        // a = 0: flat intensity, zero tensor
        let flat = model(0.5, 0.0);
        assert_eq!(flat.log_intensity_tensor(&E0, &Vector4::new(0.3, 1.0, 0.0, 0.0)), Matrix4::zeros());
        // a = 1, p = e0: T = 2 e0 e0^T
        let m = model(0.5, 1.0);
        let t = m.log_intensity_tensor(&Vector4::zeros(), &E0);
        let mut expect = Matrix4::zeros();
        expect[(0, 0)] = 2.0;
        assert!((t - expect).norm() < 1e-14);
        // PSD of rank at most one
        let eig = nalgebra::SymmetricEigen::new(t).eigenvalues;
        assert!(eig.min() >= -1e-15);
        assert_eq!(eig.iter().filter(|e| e.abs() > 1e-12).count(), 1);
    }

    #[test]
    fn log_intensity_tensor_ignores_amplitude_normalization() {
        // changing the kick spread rescales M by a kick-dependent factor but
        // leaves the log-intensity gradient in p untouched
        let p = Vector4::new(0.7, -0.3, 0.1, 0.5);
        let delta = Vector4::new(0.2, 0.4, 0.0, -0.1);
        let t1 = model(0.5, 1.3).log_intensity_tensor(&delta, &p);
        let t2 = model(2.0, 1.3).log_intensity_tensor(&delta, &p);
        assert_eq!(t1, t2);
    }

    #[test]
    fn log_intensity_gradient_matches_finite_differences() {
        let m = model(0.7, 0.9);
        let delta = Vector4::new(0.1, -0.2, 0.3, 0.0);
        let p = Vector4::new(0.4, 0.8, -0.5, 0.2);
        let grad = m.log_intensity_gradient(&delta, &p);
        let h = 1e-6;
        for i in 0..4 {
            let mut hi = p;
            let mut lo = p;
            hi[i] += h;
            lo[i] -= h;
            let fd = (m.log_intensity(&delta, &hi) - m.log_intensity(&delta, &lo)) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn sigma_integrand_hand_check() {
        // single sample: Delta = 0.1 e0, Q = 1, p = e0, gamma = 1, a = 1
        let m = model(0.5, 1.0);
        let q = QuadForm::identity();
        let delta = Vector4::new(0.1, 0.0, 0.0, 0.0);
        let x = sigma_integrand(&m, &q, &E0, &delta, 1.0);
        let expect = 2.0 / (0.21 * 0.21 + 1.0);
        assert!((x[(0, 0)] - expect).abs() <= 1e-12 * expect);
        for (i, j) in [(0, 1), (1, 1), (2, 3), (3, 3)] {
            assert_eq!(x[(i, j)], 0.0);
        }
    }

    fn base_config(seed: u64) -> SigmaConfig {
        SigmaConfig {
            eta: 0.1,
            kappa: 1.0,
            gamma: GammaPolicy::Fixed(0.5),
            averaging: Averaging::Pointwise,
            n_samples: 20_000,
            seed,
        }
    }

    #[test]
    fn sigma_vanishes_for_flat_intensity() {
        let q = QuadForm::identity();
        let m = model(0.5, 0.0);
        let s = sigma_tensor(&q, &E0, &m, &base_config(3)).unwrap();
        assert_eq!(s.sigma, Matrix4::zeros());
        assert_eq!(s.sigma_tan, 0.0);
    }

    #[test]
    fn sigma_is_psd_and_deterministic() {
        let q = QuadForm::identity();
        let m = model(0.5, 1.0);
        let p_ref = Vector4::new(0.8, 0.6, 0.0, 0.0);
        let s1 = sigma_tensor(&q, &p_ref, &m, &base_config(7)).unwrap();
        let s2 = sigma_tensor(&q, &p_ref, &m, &base_config(7)).unwrap();
        assert_eq!(s1.sigma, s2.sigma);
        assert!(s1.min_eigenvalue() >= -4.0 * s1.mc_se);
        assert!(s1.sigma_tan >= -4.0 * s1.mc_se);
        assert!((s1.sigma - s1.sigma.transpose()).norm() < 1e-15);
    }

    #[test]
    fn sigma_prefactor_scalings_are_exact() {
        let q = QuadForm::identity();
        let m = model(0.5, 1.0);
        let p_ref = Vector4::new(0.8, 0.6, 0.0, 0.0);
        let base = sigma_tensor(&q, &p_ref, &m, &base_config(11)).unwrap();
        // eta^2 law with identical draws
        let mut cfg = base_config(11);
        cfg.eta = 0.2;
        let doubled = sigma_tensor(&q, &p_ref, &m, &cfg).unwrap();
        assert!((doubled.sigma - 4.0 * base.sigma).norm() <= 1e-12 * base.sigma.norm());
        // 1/kappa law at fixed gamma with identical draws
        let mut cfg = base_config(11);
        cfg.kappa = 2.0;
        let halved = sigma_tensor(&q, &p_ref, &m, &cfg).unwrap();
        assert!((halved.sigma - 0.5 * base.sigma).norm() <= 1e-12 * base.sigma.norm());
    }

    #[test]
    fn sigma_shell_mode_runs_and_is_psd() {
        let q = QuadForm::identity();
        let m = model(0.5, 1.0);
        let p_ref = Vector4::new(0.8, 0.6, 0.0, 0.0);
        let mut cfg = base_config(13);
        cfg.averaging = Averaging::Shell { axis: [1.0, 0.0, 0.0, 0.0] };
        let s = sigma_tensor(&q, &p_ref, &m, &cfg).unwrap();
        assert!(s.min_eigenvalue() >= -4.0 * s.mc_se);
    }

    #[test]
    fn sigma_median_gamma_policy() {
        let q = QuadForm::identity();
        let m = model(0.5, 1.0);
        let mut cfg = base_config(17);
        cfg.gamma = GammaPolicy::Median;
        let s = sigma_tensor(&q, &E0, &m, &cfg).unwrap();
        assert!(s.gamma > 0.0);
        let med = median_kicked_gap(&q, &E0, &m, 4096, 17).unwrap();
        assert!((s.gamma - med / 1.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn sigma_rejects_degenerate_reference() {
        let q = QuadForm::zero();
        let m = model(0.5, 1.0);
        assert_eq!(sigma_tensor(&q, &E0, &m, &base_config(1)), Err(SchurError::DegenerateReference));
    }

    #[test]
    fn identification_examples() {
        let q = QuadForm::diagonal([1.0, -0.4, 0.3, 0.9]);
        // zero correction: both rates vanish
        let zero =
            identification_report(&q, &QuadForm::zero(), 2.0, &[(E0, Vector4::new(0.9, 0.1, 0.0, 0.0))]);
        assert_eq!(zero.max_rel_mismatch, 0.0);
        // diagonal pair: eps = 0 on both routes
        let sig = QuadForm::diagonal([0.1, 0.2, 0.0, -0.1]);
        let diag = identification_report(&q, &sig, 2.0, &[(E0, E0)]);
        assert_eq!(diag.max_rel_mismatch, 0.0);
        // random near-diagonal pairs
        let mut rng = seeds::stream(5, "test.identification", 0);
        let pairs: Vec<_> = (0..200)
            .map(|_| {
                let mid = Vector4::from_fn(|_, _| rng.gen_range(-2.0..2.0));
                let dp = Vector4::from_fn(|_, _| rng.gen_range(-0.01..0.01));
                (mid + 0.5 * dp, mid - 0.5 * dp)
            })
            .collect();
        let rep = identification_report(&q, &sig, 2.0, &pairs);
        assert!(rep.max_rel_mismatch <= 1e-12);
        assert_eq!(rep.n_pairs, 200);
    }

    #[test]
    fn monitored_semigroup_damping_factor() {
        // d y/dt = -(kappa/2) gap^2 y integrated by RK4 against the closed form
        let kappa = 2.0;
        for (t_final, gap_val) in [(0.5, 0.3), (1.0, 1.0), (2.0, 0.7)] {
            let c = 0.5 * kappa * gap_val * gap_val;
            let steps = 20_000usize;
            let h = t_final / steps as f64;
            let mut y = 1.0f64;
            for _ in 0..steps {
                let k1 = -c * y;
                let k2 = -c * (y + 0.5 * h * k1);
                let k3 = -c * (y + 0.5 * h * k2);
                let k4 = -c * (y + h * k3);
                y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            }
            let exact = (-c * t_final).exp();
            assert!(((y - exact) / exact).abs() <= 1e-12, "t={t_final} gap={gap_val}");
        }
    }

    #[test]
    fn model_validation() {
        assert!(AmplitudeModel::new(0.0, 1.0).is_err());
        assert!(AmplitudeModel::new(0.5, -0.1).is_err());
        assert!(AmplitudeModel::new(0.5, 0.0).is_ok());
    }
}
