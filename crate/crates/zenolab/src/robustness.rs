//! Structural stability of the reduced flow.
//!
//! Two separate checks back the reduced one-dimensional description:
//!
//! 1. Calibration choices that enter only as a positive prefactor `α(r)` are
//!    time reparametrizations of the scalar flow `dr/dλ = F(r) = A + Br`;
//!    fixed points and stability types must not move. Calibration choices
//!    that change `(A, B)` themselves move the fixed point continuously as
//!    long as `B` stays away from zero.
//! 2. Weakly anisotropic perturbations `ΔQ` transverse to the two-eigenvalue
//!    family contract at a modeled rate `γ⊥`, and their back-coupling shifts
//!    the endpoint of the `r` trajectory only at first order in the
//!    perturbation size.
//!
//! The transverse generator is not derived from first principles here; it is
//! modeled as `−γ⊥` times the identity on the anisotropic sector plus a
//! bounded mixing term, which is exactly the structure assumed by the
//! contraction argument.

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quadform::LocalFrame;

#[derive(Debug, Error, PartialEq)]
pub enum RobustnessError {
    #[error("bracket must satisfy lo < hi (got {0}..{1})")]
    BadBracket(f64, f64),
    #[error("reparametrization must be positive on the bracket (alpha({0}) = {1})")]
    NonPositiveReparam(f64, f64),
    #[error("transverse rate must be positive (got {0})")]
    NonPositiveGap(f64),
    #[error("step count must be at least 2")]
    TooFewSteps,
}

/// Affine reduced flow `F(r) = A + Br`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarFlowSpec {
    pub a: f64,
    pub b: f64,
}

impl ScalarFlowSpec {
    pub fn eval(&self, r: f64) -> f64 {
        self.a + self.b * r
    }

    /// `r⋆ = −A/B` when `B ≠ 0`.
    pub fn fixed_point(&self) -> Option<f64> {
        (self.b != 0.0).then(|| -self.a / self.b)
    }
}

/// Numerically located root of a scalar function on a bracket.
fn bisect_root(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, n_scan: usize) -> Option<f64> {
    let mut prev = (lo, f(lo));
    for i in 1..=n_scan {
        let r = lo + (hi - lo) * (i as f64) / (n_scan as f64);
        let v = f(r);
        if prev.1 == 0.0 {
            return Some(prev.0);
        }
        if prev.1 * v < 0.0 {
            let (mut a, mut fa, mut b) = (prev.0, prev.1, r);
            for _ in 0..200 {
                let mid = 0.5 * (a + b);
                let fm = f(mid);
                if fm == 0.0 || (b - a) <= f64::EPSILON * mid.abs().max(1.0) {
                    return Some(mid);
                }
                if fa * fm < 0.0 {
                    b = mid;
                } else {
                    a = mid;
                    fa = fm;
                }
            }
            return Some(0.5 * (a + b));
        }
        prev = (r, v);
    }
    None
}

/// Comparison of the flow `F` and its reparametrization `α·F` on a bracket.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ReparamReport {
    pub root_plain: Option<f64>,
    pub root_scaled: Option<f64>,
    /// `|root_plain − root_scaled|` when both exist.
    pub root_gap: Option<f64>,
    pub slope_plain: Option<f64>,
    pub slope_scaled: Option<f64>,
    pub stability_signs_agree: bool,
    /// Set when `B = 0`: the affine flow has no finite fixed point.
    pub no_finite_fixed_point: bool,
}

/// Locate the fixed points of `F` and of `α·F` numerically and compare
/// positions and linearization signs. `α` must be positive on the bracket.
pub fn reparam_fixed_points(
    spec: &ScalarFlowSpec,
    alpha: &dyn Fn(f64) -> f64,
    bracket: (f64, f64),
) -> Result<ReparamReport, RobustnessError> {
    let (lo, hi) = bracket;
    if !(lo < hi) {
        return Err(RobustnessError::BadBracket(lo, hi));
    }
    let n_scan = 512;
    for i in 0..=n_scan {
        let r = lo + (hi - lo) * (i as f64) / (n_scan as f64);
        let a = alpha(r);
        if !(a > 0.0) {
            return Err(RobustnessError::NonPositiveReparam(r, a));
        }
    }
    if spec.b == 0.0 {
        return Ok(ReparamReport {
            root_plain: None,
            root_scaled: None,
            root_gap: None,
            slope_plain: None,
            slope_scaled: None,
            stability_signs_agree: true,
            no_finite_fixed_point: true,
        });
    }
    let plain = |r: f64| spec.eval(r);
    let scaled = |r: f64| alpha(r) * spec.eval(r);
    let root_plain = bisect_root(&plain, lo, hi, n_scan);
    let root_scaled = bisect_root(&scaled, lo, hi, n_scan);
    let slope = |f: &dyn Fn(f64) -> f64, r: f64| {
        let h = 1e-6 * r.abs().max(1.0);
        (f(r + h) - f(r - h)) / (2.0 * h)
    };
    let slope_plain = root_plain.map(|r| slope(&plain, r));
    let slope_scaled = root_scaled.map(|r| slope(&scaled, r));
    let signs_agree = match (slope_plain, slope_scaled) {
        (Some(sp), Some(ss)) => sp.signum() == ss.signum(),
        (None, None) => true,
        _ => false,
    };
    Ok(ReparamReport {
        root_plain,
        root_scaled,
        root_gap: root_plain.zip(root_scaled).map(|(a, b)| (a - b).abs()),
        slope_plain,
        slope_scaled,
        stability_signs_agree: signs_agree,
        no_finite_fixed_point: false,
    })
}

/// Frobenius projection of a symmetric matrix onto the complement of
/// `span{Π_n, Π_tan}`: the anisotropic sector of the frame.
pub fn project_anisotropic(m: &Matrix4<f64>, frame: &LocalFrame) -> Matrix4<f64> {
    let sym = 0.5 * (m + m.transpose());
    let pi_n = frame.pi_n();
    let pi_tan = frame.pi_tan();
    // ⟨Π_n, Π_n⟩_F = 1 and ⟨Π_tan, Π_tan⟩_F = 3 for a rank-one axis
    let c_n = sym.dot(pi_n);
    let c_tan = sym.dot(pi_tan) / 3.0;
    sym - c_n * pi_n - c_tan * pi_tan
}

/// Ratio plus transverse anisotropic component.
#[derive(Clone, Debug, PartialEq)]
pub struct AnisoState {
    pub r: f64,
    pub delta_q: Matrix4<f64>,
}

impl AnisoState {
    /// State with anisotropy of size `epsilon` along the (projected,
    /// normalized) direction `seed_direction`.
    pub fn new(r: f64, epsilon: f64, seed_direction: &Matrix4<f64>, frame: &LocalFrame) -> Self {
        let dir = project_anisotropic(seed_direction, frame);
        let norm = dir.norm();
        let delta_q = if norm > 0.0 { (epsilon / norm) * dir } else { Matrix4::zeros() };
        Self { r, delta_q }
    }

    pub fn epsilon(&self) -> f64 {
        self.delta_q.norm()
    }
}

/// Modeled transverse dynamics around the two-eigenvalue family:
/// `dr/dλ = F(r) + c_back ⟨D, ΔQ⟩` and
/// `dΔQ/dλ = −γ⊥ ΔQ + c_mix sin(r) P_aniso[W∘ΔQ]`.
#[derive(Clone, Debug)]
pub struct ContractionModel {
    pub flow: ScalarFlowSpec,
    pub gamma_perp: f64,
    /// Strength of the bounded mixing inside the anisotropic sector.
    pub mixer: f64,
    /// Coupling of the anisotropy back into the ratio equation.
    pub back_coupling: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnisoReport {
    pub endpoint_r: f64,
    pub isotropic_endpoint_r: f64,
    pub endpoint_shift: f64,
    /// Least-squares slope of `log‖ΔQ‖` against λ.
    pub decay_slope: f64,
    pub initial_epsilon: f64,
    pub norms: Vec<(f64, f64)>,
}

// fixed bounded pattern for the mixing term
fn mixing_pattern() -> Matrix4<f64> {
    Matrix4::new(
        0.3, -0.7, 0.2, 0.5, -0.7, 0.1, -0.4, 0.6, 0.2, -0.4, -0.2, 0.8, 0.5, 0.6, 0.8, 0.4,
    )
}

// fixed unit-Frobenius anisotropic direction used for the back-coupling
fn coupling_direction(frame: &LocalFrame) -> Matrix4<f64> {
    let mut seed = Matrix4::zeros();
    seed[(1, 2)] = 1.0;
    seed[(2, 1)] = 1.0;
    let dir = project_anisotropic(&seed, frame);
    dir / dir.norm()
}

/// Evolve `(r, ΔQ)` by fixed-step fourth-order Runge-Kutta up to
/// `lambda_max`, logging the anisotropic norm, and compare the endpoint with
/// the isotropic run started from the same `r`.
pub fn aniso_evolve(
    initial: &AnisoState,
    model: &ContractionModel,
    frame: &LocalFrame,
    lambda_max: f64,
    n_steps: usize,
) -> Result<AnisoReport, RobustnessError> {
    if !(model.gamma_perp > 0.0) {
        return Err(RobustnessError::NonPositiveGap(model.gamma_perp));
    }
    if n_steps < 2 {
        return Err(RobustnessError::TooFewSteps);
    }
    let pattern = mixing_pattern();
    let direction = coupling_direction(frame);
    let rhs = |r: f64, dq: &Matrix4<f64>| -> (f64, Matrix4<f64>) {
        let mixed = model.mixer * r.sin() * project_anisotropic(&pattern.component_mul(dq), frame);
        let d_dq = -model.gamma_perp * dq + mixed;
        let d_r = model.flow.eval(r) + model.back_coupling * direction.dot(dq);
        (d_r, d_dq)
    };

    let h = lambda_max / n_steps as f64;
    let mut r = initial.r;
    let mut dq = initial.delta_q;
    let mut r_iso = initial.r;
    let mut norms = Vec::with_capacity(n_steps + 1);
    norms.push((0.0, dq.norm()));
    for step in 0..n_steps {
        // coupled state
        let (k1r, k1q) = rhs(r, &dq);
        let (k2r, k2q) = rhs(r + 0.5 * h * k1r, &(dq + 0.5 * h * k1q));
        let (k3r, k3q) = rhs(r + 0.5 * h * k2r, &(dq + 0.5 * h * k2q));
        let (k4r, k4q) = rhs(r + h * k3r, &(dq + h * k3q));
        r += h / 6.0 * (k1r + 2.0 * k2r + 2.0 * k3r + k4r);
        dq += h / 6.0 * (k1q + 2.0 * k2q + 2.0 * k3q + k4q);
        // isotropic reference with the same integrator
        let j1 = model.flow.eval(r_iso);
        let j2 = model.flow.eval(r_iso + 0.5 * h * j1);
        let j3 = model.flow.eval(r_iso + 0.5 * h * j2);
        let j4 = model.flow.eval(r_iso + h * j3);
        r_iso += h / 6.0 * (j1 + 2.0 * j2 + 2.0 * j3 + j4);
        norms.push(((step + 1) as f64 * h, dq.norm()));
    }

    // log-linear fit of the norm decay over points that are safely nonzero
    let fit: Vec<(f64, f64)> =
        norms.iter().filter(|(_, n)| *n > 1e-290).map(|(l, n)| (*l, n.ln())).collect();
    let decay_slope = if fit.len() >= 2 {
        let n = fit.len() as f64;
        let sx: f64 = fit.iter().map(|(x, _)| x).sum();
        let sy: f64 = fit.iter().map(|(_, y)| y).sum();
        let sxx: f64 = fit.iter().map(|(x, _)| x * x).sum();
        let sxy: f64 = fit.iter().map(|(x, y)| x * y).sum();
        (n * sxy - sx * sy) / (n * sxx - sx * sx)
    } else {
        f64::NEG_INFINITY
    };

    Ok(AnisoReport {
        endpoint_r: r,
        isotropic_endpoint_r: r_iso,
        endpoint_shift: (r - r_iso).abs(),
        decay_slope,
        initial_epsilon: initial.epsilon(),
        norms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector4;

    const E0: Vector4<f64> = Vector4::new(1.0, 0.0, 0.0, 0.0);

    fn frame() -> LocalFrame {
        LocalFrame::oblique(E0, std::f64::consts::FRAC_PI_4, 1.0).unwrap()
    }

    #[test]
    fn reparam_constant_prefactor() {
        let spec = ScalarFlowSpec { a: 1.0, b: 2.0 };
        let report = reparam_fixed_points(&spec, &|_| 3.0, (-2.0, 2.0)).unwrap();
        assert!((report.root_plain.unwrap() + 0.5).abs() <= 1e-10);
        assert!((report.root_scaled.unwrap() + 0.5).abs() <= 1e-10);
        assert!(report.root_gap.unwrap() <= 1e-10);
        assert!(report.stability_signs_agree);
    }

    #[test]
    fn reparam_varying_prefactor() {
        let spec = ScalarFlowSpec { a: 1.0, b: 2.0 };
        let report = reparam_fixed_points(&spec, &|r| 1.0 + r * r, (-2.0, 2.0)).unwrap();
        assert!(report.root_gap.unwrap() <= 1e-10);
        assert!(report.stability_signs_agree);
    }

    #[test]
    fn reparam_randomized_invariance() {
        let mut state = 0x1234_5678_9abc_defu64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        for _ in 0..200 {
            let spec = ScalarFlowSpec { a: next() * 2.0, b: next() * 3.0 + 3.2 };
            let (c0, c1) = (next().abs() + 0.2, next());
            let alpha = move |r: f64| c0 * (1.0 + (c1 * r).tanh() * 0.5).max(0.1);
            let report = reparam_fixed_points(&spec, &alpha, (-5.0, 5.0)).unwrap();
            if let Some(gap) = report.root_gap {
                assert!(gap <= 1e-10, "roots differ by {gap}");
            }
            assert!(report.stability_signs_agree);
            // closed-form cross-check of the plain root
            if let (Some(found), Some(exact)) = (report.root_plain, spec.fixed_point()) {
                assert!((found - exact).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn reparam_reports_no_finite_fixed_point() {
        let spec = ScalarFlowSpec { a: 1.0, b: 0.0 };
        let report = reparam_fixed_points(&spec, &|_| 1.0, (-2.0, 2.0)).unwrap();
        assert!(report.no_finite_fixed_point);
        assert!(report.root_plain.is_none());
    }

    #[test]
    fn reparam_rejects_bad_input() {
        let spec = ScalarFlowSpec { a: 1.0, b: 2.0 };
        assert!(matches!(
            reparam_fixed_points(&spec, &|_| 1.0, (2.0, -2.0)),
            Err(RobustnessError::BadBracket(_, _))
        ));
        assert!(matches!(
            reparam_fixed_points(&spec, &|r| r, (-2.0, 2.0)),
            Err(RobustnessError::NonPositiveReparam(_, _))
        ));
    }

    #[test]
    fn fixed_point_path_is_continuous_in_calibration() {
        // perturbing (A, B) continuously moves the root continuously while B
        // stays away from zero
        let mut last: Option<f64> = None;
        for i in 0..=40 {
            let c = i as f64 / 40.0;
            let spec = ScalarFlowSpec { a: 1.0 + 0.3 * c, b: 2.0 - 0.5 * c };
            let report = reparam_fixed_points(&spec, &|_| 1.0, (-3.0, 3.0)).unwrap();
            let root = report.root_plain.unwrap();
            assert!((root - spec.fixed_point().unwrap()).abs() <= 1e-9);
            if let Some(prev) = last {
                assert!((root - prev).abs() < 0.02, "jump at c={c}");
            }
            last = Some(root);
        }
    }

    #[test]
    fn projection_is_orthogonal_to_the_family() {
        let f = frame();
        let mut m = Matrix4::zeros();
        for i in 0..4 {
            for j in 0..4 {
                m[(i, j)] = (i * 4 + j) as f64 * 0.37 - 2.0;
            }
        }
        let aniso = project_anisotropic(&m, &f);
        assert!((aniso - aniso.transpose()).norm() < 1e-14);
        assert!(aniso.dot(f.pi_n()).abs() < 1e-13);
        assert!(aniso.dot(f.pi_tan()).abs() < 1e-13);
        // idempotent
        assert!((project_anisotropic(&aniso, &f) - aniso).norm() < 1e-13);
    }

    fn seed_direction() -> Matrix4<f64> {
        let mut seed = Matrix4::zeros();
        seed[(1, 2)] = 1.0;
        seed[(2, 1)] = 1.0;
        seed[(0, 3)] = 0.5;
        seed[(3, 0)] = 0.5;
        seed
    }

    #[test]
    fn zero_anisotropy_reproduces_isotropic_run() {
        let f = frame();
        let model = ContractionModel {
            flow: ScalarFlowSpec { a: 1.0, b: -2.0 },
            gamma_perp: 1.0,
            mixer: 0.2,
            back_coupling: 0.5,
        };
        let state = AnisoState::new(1.0, 0.0, &seed_direction(), &f);
        let report = aniso_evolve(&state, &model, &f, 3.0, 3000).unwrap();
        assert_eq!(report.endpoint_r, report.isotropic_endpoint_r);
        assert_eq!(report.endpoint_shift, 0.0);
    }

    #[test]
    fn pure_decay_matches_exponential() {
        let f = frame();
        let model = ContractionModel {
            flow: ScalarFlowSpec { a: 1.0, b: -2.0 },
            gamma_perp: 1.0,
            mixer: 0.0,
            back_coupling: 0.0,
        };
        let eps = 0.05;
        let state = AnisoState::new(1.0, eps, &seed_direction(), &f);
        let report = aniso_evolve(&state, &model, &f, 3.0, 3000).unwrap();
        for (lambda, norm) in &report.norms {
            let exact = eps * (-lambda).exp();
            assert!(((norm - exact) / exact).abs() <= 1e-6, "lambda={lambda}");
        }
        assert!((report.decay_slope + 1.0).abs() < 1e-6);
    }

    #[test]
    fn decay_slope_beats_half_gap_with_mixing() {
        let f = frame();
        let model = ContractionModel {
            flow: ScalarFlowSpec { a: 1.0, b: -2.0 },
            gamma_perp: 1.0,
            mixer: 0.2,
            back_coupling: 0.3,
        };
        let state = AnisoState::new(1.0, 0.05, &seed_direction(), &f);
        let report = aniso_evolve(&state, &model, &f, 4.0, 4000).unwrap();
        assert!(report.decay_slope <= -0.5 * model.gamma_perp, "slope {}", report.decay_slope);
        // the anisotropic norm decreases strictly under the gap
        for pair in report.norms.windows(2) {
            assert!(pair[1].1 < pair[0].1);
        }
    }

    #[test]
    fn endpoint_shift_is_linear_in_epsilon() {
        let f = frame();
        let model = ContractionModel {
            flow: ScalarFlowSpec { a: 1.0, b: -2.0 },
            gamma_perp: 1.0,
            mixer: 0.1,
            back_coupling: 0.5,
        };
        let shift_at = |eps: f64| {
            let state = AnisoState::new(1.0, eps, &seed_direction(), &f);
            aniso_evolve(&state, &model, &f, 3.0, 3000).unwrap().endpoint_shift
        };
        let s1 = shift_at(0.02);
        let s2 = shift_at(0.04);
        assert!(s1 > 0.0);
        let ratio = s2 / s1;
        assert!((ratio - 2.0).abs() <= 0.2, "ratio {ratio}");
    }

    #[test]
    fn aniso_rejects_bad_input() {
        let f = frame();
        let model = ContractionModel {
            flow: ScalarFlowSpec { a: 1.0, b: -2.0 },
            gamma_perp: 0.0,
            mixer: 0.0,
            back_coupling: 0.0,
        };
        let state = AnisoState::new(1.0, 0.1, &seed_direction(), &f);
        assert!(matches!(
            aniso_evolve(&state, &model, &f, 3.0, 100),
            Err(RobustnessError::NonPositiveGap(_))
        ));
    }
}
