//! Experiment configuration: JSON in, validated parameters out.
//!
//! Every field has a default, so a partial config file (or none at all) is
//! enough to run. Serialization order is fixed by field order, which makes
//! serialize → parse → serialize byte-identical.

use serde::{Deserialize, Serialize};
use zenolab::increments::Weighting;
use zenolab::kinetics::BaseRate;
use zenolab::quadform::{LocalFrame, QuadFormError};
use zenolab::schur::{Averaging, GammaPolicy};
use zenolab::Vector4;

use crate::RunError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub geometry: GeometryConfig,
    pub increments: IncrementsConfig,
    pub amplitude: AmplitudeConfig,
    pub flow: FlowConfig,
    pub kinetics: KineticsConfig,
    pub robustness: RobustnessConfig,
    pub mc: McConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameConvention {
    /// Frame axis is the configured fixed unit vector.
    Fixed,
    /// Frame axis along the local normal of the identity form (`u ∥ p_ref`);
    /// exposed for comparison, degenerate by construction.
    Gradient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    /// Angle between the reference momentum and the frame axis.
    pub theta: f64,
    pub p_ref_norm: f64,
    pub axis: [f64; 4],
    pub convention: FrameConvention,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            theta: std::f64::consts::FRAC_PI_4,
            p_ref_norm: 1.0,
            axis: [1.0, 0.0, 0.0, 0.0],
            convention: FrameConvention::Fixed,
        }
    }
}

impl GeometryConfig {
    pub fn frame(&self) -> Result<LocalFrame, RunError> {
        let axis = Vector4::new(self.axis[0], self.axis[1], self.axis[2], self.axis[3]);
        let map_err = |e: QuadFormError| RunError::Config {
            field: "geometry.axis".to_string(),
            message: e.to_string(),
        };
        match self.convention {
            FrameConvention::Fixed => {
                LocalFrame::oblique(axis, self.theta, self.p_ref_norm).map_err(map_err)
            }
            FrameConvention::Gradient => {
                // the axis follows the normal of the identity form, which is
                // the reference direction itself
                let oblique =
                    LocalFrame::oblique(axis, self.theta, self.p_ref_norm).map_err(map_err)?;
                let p_ref = *oblique.p_ref();
                LocalFrame::new(p_ref, p_ref / p_ref.norm()).map_err(map_err)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IncrementsConfig {
    /// Standard deviation of the isotropic base increment law.
    pub s: f64,
    /// Monitoring strength.
    pub kappa: f64,
    pub weighting: Weighting,
    /// Grid for the `moments` table.
    pub kappa_grid: Vec<f64>,
}

impl Default for IncrementsConfig {
    fn default() -> Self {
        Self {
            s: 1.0,
            kappa: 1.0,
            weighting: Weighting::Zeno,
            kappa_grid: vec![0.0, 0.25, 0.5, 1.0, 2.0, 4.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AmplitudeConfig {
    /// Kick spread of the amplitude model.
    pub w: f64,
    /// Momentum intensity decay.
    pub a: f64,
    /// Weak-coupling prefactor.
    pub eta: f64,
    pub gamma: GammaPolicy,
    pub averaging: Averaging,
}

impl Default for AmplitudeConfig {
    fn default() -> Self {
        Self { w: 0.5, a: 1.0, eta: 0.1, gamma: GammaPolicy::Median, averaging: Averaging::Pointwise }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "model", content = "value")]
pub enum RhoTanConfig {
    Constant(f64),
    Schur(SchurRateConfig),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchurRateConfig {
    pub delta_lambda: f64,
    pub samples: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MomentSource {
    Analytic,
    MonteCarlo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub r0: f64,
    pub lambda_max: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub rhs_tol: f64,
    pub initial_step: f64,
    pub max_steps: usize,
    pub bracket: [f64; 2],
    pub rho_tan: RhoTanConfig,
    pub moments: MomentSource,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            r0: 1.0,
            lambda_max: 5.0,
            rel_tol: 1e-8,
            abs_tol: 1e-10,
            rhs_tol: 1e-10,
            initial_step: 1e-3,
            max_steps: 200_000,
            bracket: [-10.0, -1e-3],
            rho_tan: RhoTanConfig::Constant(1.0),
            moments: MomentSource::Analytic,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KineticsConfig {
    pub m: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Lattice spacing.
    pub h: f64,
    pub half_width: usize,
    pub jumps: Vec<i64>,
    pub base_rate: BaseRate,
    pub horizon: f64,
    pub log_every: usize,
    pub dt_safety: f64,
    /// Spacing of the fine lattice backing the nonrelativistic-window
    /// comparison; its half-width is sized to cover `|p| <= 0.1 m/sqrt(alpha)`.
    pub nonrel_h: f64,
    /// Run the small three-dimensional spot check in `verify`.
    pub grid3: bool,
    pub grid3_half_width: usize,
}

impl Default for KineticsConfig {
    fn default() -> Self {
        Self {
            m: 1.0,
            alpha: 1.0,
            beta: 1.0,
            h: 0.1,
            half_width: 200,
            jumps: vec![-2, -1, 1, 2],
            base_rate: BaseRate::Gaussian(0.5),
            horizon: 4000.0,
            log_every: 200,
            dt_safety: 0.5,
            nonrel_h: 0.0025,
            grid3: false,
            grid3_half_width: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustnessConfig {
    pub gamma_perp: Vec<f64>,
    pub epsilon_aniso: Vec<f64>,
    pub mixer: f64,
    pub back_coupling: f64,
    pub flow_a: f64,
    pub flow_b: f64,
    pub lambda_max: f64,
    pub n_steps: usize,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        Self {
            gamma_perp: vec![0.5, 1.0, 2.0],
            epsilon_aniso: vec![0.01, 0.02, 0.04],
            mixer: 0.1,
            back_coupling: 0.5,
            flow_a: 1.0,
            flow_b: -2.0,
            lambda_max: 3.0,
            n_steps: 3000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McConfig {
    pub samples: u64,
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self { samples: 200_000, seed: 12345 }
    }
}

fn ensure(cond: bool, field: &str, message: impl Into<String>) -> Result<(), RunError> {
    if cond {
        Ok(())
    } else {
        Err(RunError::Config { field: field.to_string(), message: message.into() })
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, RunError> {
        let cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| RunError::Config { field: "<json>".to_string(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let g = &self.geometry;
        ensure(g.theta.is_finite(), "geometry.theta", format!("must be finite, got {}", g.theta))?;
        ensure(
            g.p_ref_norm > 0.0 && g.p_ref_norm.is_finite(),
            "geometry.p_ref_norm",
            format!("must be positive, got {}", g.p_ref_norm),
        )?;
        ensure(
            g.axis.iter().any(|x| *x != 0.0) && g.axis.iter().all(|x| x.is_finite()),
            "geometry.axis",
            "must be a nonzero finite vector",
        )?;

        let i = &self.increments;
        ensure(i.s > 0.0 && i.s.is_finite(), "increments.s", format!("must be positive, got {}", i.s))?;
        ensure(
            i.kappa >= 0.0 && i.kappa.is_finite(),
            "increments.kappa",
            format!("must be nonnegative, got {}", i.kappa),
        )?;
        ensure(
            !i.kappa_grid.is_empty() && i.kappa_grid.iter().all(|k| *k >= 0.0 && k.is_finite()),
            "increments.kappa_grid",
            "must be a nonempty list of nonnegative values",
        )?;

        let a = &self.amplitude;
        ensure(a.w > 0.0 && a.w.is_finite(), "amplitude.w", format!("must be positive, got {}", a.w))?;
        ensure(a.a >= 0.0 && a.a.is_finite(), "amplitude.a", format!("must be nonnegative, got {}", a.a))?;
        ensure(a.eta > 0.0 && a.eta.is_finite(), "amplitude.eta", format!("must be positive, got {}", a.eta))?;
        if let GammaPolicy::Fixed(v) = a.gamma {
            ensure(v > 0.0 && v.is_finite(), "amplitude.gamma.value", format!("must be positive, got {v}"))?;
        }
        if let Averaging::Shell { axis } = a.averaging {
            ensure(
                axis.iter().any(|x| *x != 0.0) && axis.iter().all(|x| x.is_finite()),
                "amplitude.averaging.axis",
                "must be a nonzero finite vector",
            )?;
        }

        let f = &self.flow;
        ensure(f.r0.is_finite(), "flow.r0", format!("must be finite, got {}", f.r0))?;
        ensure(f.lambda_max > 0.0, "flow.lambda_max", format!("must be positive, got {}", f.lambda_max))?;
        ensure(f.rel_tol > 0.0, "flow.rel_tol", format!("must be positive, got {}", f.rel_tol))?;
        ensure(f.abs_tol > 0.0, "flow.abs_tol", format!("must be positive, got {}", f.abs_tol))?;
        ensure(f.rhs_tol > 0.0, "flow.rhs_tol", format!("must be positive, got {}", f.rhs_tol))?;
        ensure(
            f.initial_step > 0.0,
            "flow.initial_step",
            format!("must be positive, got {}", f.initial_step),
        )?;
        ensure(f.max_steps >= 1, "flow.max_steps", "must be at least 1")?;
        ensure(
            f.bracket[0] < f.bracket[1],
            "flow.bracket",
            format!("must satisfy lo < hi, got [{}, {}]", f.bracket[0], f.bracket[1]),
        )?;
        match f.rho_tan {
            RhoTanConfig::Constant(v) => {
                ensure(v > 0.0 && v.is_finite(), "flow.rho_tan.value", format!("must be positive, got {v}"))?
            }
            RhoTanConfig::Schur(s) => {
                ensure(
                    s.delta_lambda > 0.0,
                    "flow.rho_tan.value.delta_lambda",
                    format!("must be positive, got {}", s.delta_lambda),
                )?;
                ensure(s.samples >= 1, "flow.rho_tan.value.samples", "must be at least 1")?;
            }
        }

        let k = &self.kinetics;
        ensure(k.m > 0.0 && k.m.is_finite(), "kinetics.m", format!("must be positive, got {}", k.m))?;
        ensure(k.alpha > 0.0 && k.alpha.is_finite(), "kinetics.alpha", format!("must be positive, got {}", k.alpha))?;
        ensure(k.beta >= 0.0 && k.beta.is_finite(), "kinetics.beta", format!("must be nonnegative, got {}", k.beta))?;
        ensure(k.h > 0.0 && k.h.is_finite(), "kinetics.h", format!("must be positive, got {}", k.h))?;
        ensure(k.half_width >= 1, "kinetics.half_width", "must be at least 1")?;
        ensure(
            !k.jumps.is_empty() && k.jumps.iter().all(|d| *d != 0 && k.jumps.contains(&-d)),
            "kinetics.jumps",
            "must be a nonempty set closed under negation, without 0",
        )?;
        if let BaseRate::Gaussian(w) = k.base_rate {
            ensure(w > 0.0 && w.is_finite(), "kinetics.base_rate.width", format!("must be positive, got {w}"))?;
        }
        ensure(k.horizon > 0.0, "kinetics.horizon", format!("must be positive, got {}", k.horizon))?;
        ensure(k.log_every >= 1, "kinetics.log_every", "must be at least 1")?;
        ensure(
            k.dt_safety > 0.0 && k.dt_safety < 1.0,
            "kinetics.dt_safety",
            format!("must lie in (0, 1), got {}", k.dt_safety),
        )?;
        ensure(k.nonrel_h > 0.0, "kinetics.nonrel_h", format!("must be positive, got {}", k.nonrel_h))?;
        let window_sites = (0.105 * k.m / k.alpha.sqrt() / k.nonrel_h).ceil();
        ensure(
            window_sites.is_finite() && window_sites >= 2.0 && window_sites <= 2e6,
            "kinetics.nonrel_h",
            format!("window lattice would need {window_sites} sites per side"),
        )?;
        ensure(
            k.grid3_half_width >= 1 && k.grid3_half_width <= 10,
            "kinetics.grid3_half_width",
            "side length limited to 21",
        )?;

        let r = &self.robustness;
        ensure(
            !r.gamma_perp.is_empty() && r.gamma_perp.iter().all(|v| *v > 0.0 && v.is_finite()),
            "robustness.gamma_perp",
            "must be a nonempty list of positive values",
        )?;
        ensure(
            !r.epsilon_aniso.is_empty() && r.epsilon_aniso.iter().all(|v| *v >= 0.0 && v.is_finite()),
            "robustness.epsilon_aniso",
            "must be a nonempty list of nonnegative values",
        )?;
        ensure(r.lambda_max > 0.0, "robustness.lambda_max", format!("must be positive, got {}", r.lambda_max))?;
        ensure(r.n_steps >= 2, "robustness.n_steps", "must be at least 2")?;

        ensure(self.mc.samples >= 1, "mc.samples", "must be at least 1")?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
