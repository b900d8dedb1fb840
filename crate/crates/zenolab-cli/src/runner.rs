//! Subcommand implementations: build models from the config, run them, and
//! emit CSV/JSON artifacts plus a `summary.json` per run.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use zenolab::increments::{contrast, IncrementLaw, MomentSet};
use zenolab::kinetics::{self, EvolveOptions, JumpModel, PopulationGrid};
use zenolab::quadform::{self, LocalFrame, QuadForm};
use zenolab::robustness::{self, AnisoState, ContractionModel, ScalarFlowSpec};
use zenolab::schur::{self, AmplitudeModel, ResolventParams, SchurRate, SigmaConfig};
use zenolab::seeds;
use zenolab::zenoflow::{
    self, AnalyticMoments, ConstantRate, FixedPointOptions, FlowModel, FlowState, MomentProvider,
    MonteCarloMoments, RhoTanModel, StepControl,
};
use zenolab::{Matrix4, Vector4};

use crate::config::{ExperimentConfig, MomentSource, RhoTanConfig};
use crate::tolerances::{self, Tolerances};
use crate::RunError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Moments,
    Flow,
    FixedPoint,
    SchurSigma,
    Equilibrium,
    Anisotropy,
    Verify,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Moments => "moments",
            Command::Flow => "flow",
            Command::FixedPoint => "fixed-point",
            Command::SchurSigma => "schur-sigma",
            Command::Equilibrium => "equilibrium",
            Command::Anisotropy => "anisotropy",
            Command::Verify => "verify",
        }
    }
}

#[derive(Serialize)]
struct Summary<'a> {
    command: &'a str,
    config_sha256: String,
    seed: u64,
    samples: u64,
    tolerances: Tolerances,
    results: Value,
}

fn write_text(path: &Path, text: &str) -> Result<(), RunError> {
    fs::write(path, text)?;
    Ok(())
}

fn matrix_rows(m: &Matrix4<f64>) -> [[f64; 4]; 4] {
    let mut rows = [[0.0; 4]; 4];
    for (i, row) in rows.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = m[(i, j)];
        }
    }
    rows
}

/// Dispatch a subcommand, write its artifacts under `out`, and return the
/// summary results. `verify` additionally prints one line per check and
/// reports failure through the error channel after writing artifacts.
pub fn run(command: Command, cfg: &ExperimentConfig, out: &Path) -> Result<Value, RunError> {
    fs::create_dir_all(out)?;
    let results = match command {
        Command::Moments => run_moments(cfg, out)?,
        Command::Flow => run_flow(cfg, out)?,
        Command::FixedPoint => run_fixed_point(cfg, out)?,
        Command::SchurSigma => run_schur_sigma(cfg, out)?,
        Command::Equilibrium => run_equilibrium(cfg, out)?,
        Command::Anisotropy => run_anisotropy(cfg, out)?,
        Command::Verify => run_verify(cfg, out)?,
    };
    let summary = Summary {
        command: command.name(),
        config_sha256: cfg.hash(),
        seed: cfg.mc.seed,
        samples: cfg.mc.samples,
        tolerances: tolerances::current(),
        results: results.clone(),
    };
    write_text(&out.join("summary.json"), &serde_json::to_string_pretty(&summary).expect("summary"))?;
    if command == Command::Verify {
        let failed = results["failed"].as_u64().unwrap_or(0);
        if failed > 0 {
            return Err(RunError::VerifyFailed(failed as usize));
        }
    }
    Ok(results)
}

fn law_for(cfg: &ExperimentConfig, kappa: f64, q: QuadForm) -> Result<IncrementLaw, RunError> {
    let frame = cfg.geometry.frame()?;
    Ok(IncrementLaw::new(cfg.increments.s, kappa, q, frame)?)
}

fn run_moments(cfg: &ExperimentConfig, out: &Path) -> Result<Value, RunError> {
    let mut csv = String::from("kappa,method,m_nn,m_tt,m_nt,se_nn,se_tt,se_nt\n");
    let mut max_dev_se = 0.0f64;
    let mut degenerate = false;
    for (i, &kappa) in cfg.increments.kappa_grid.iter().enumerate() {
        let law = law_for(cfg, kappa, QuadForm::identity())?;
        let exact = law.moments_analytic();
        let mc = law.moments_montecarlo(cfg.mc.samples, seeds::derive(cfg.mc.seed, "cli.moments", i as u64))?;
        degenerate |= exact.degenerate_frame;
        for m in [&exact, &mc] {
            let method = match m.method {
                zenolab::increments::MomentMethod::Analytic => "analytic",
                zenolab::increments::MomentMethod::MonteCarlo => "montecarlo",
            };
            writeln!(
                csv,
                "{},{},{},{},{},{},{},{}",
                kappa, method, m.m_nn, m.m_tt, m.m_nt, m.se_nn, m.se_tt, m.se_nt
            )
            .expect("string write");
        }
        for (d, se) in [
            (mc.m_nn - exact.m_nn, mc.se_nn),
            (mc.m_tt - exact.m_tt, mc.se_tt),
            (mc.m_nt - exact.m_nt, mc.se_nt),
        ] {
            if se > 0.0 {
                max_dev_se = max_dev_se.max(d.abs() / se);
            }
        }
    }
    write_text(&out.join("moments.csv"), &csv)?;
    Ok(json!({
        "kappa_grid_len": cfg.increments.kappa_grid.len(),
        "max_mc_deviation_se": max_dev_se,
        "degenerate_frame": degenerate,
    }))
}

struct FlowParts {
    frame: LocalFrame,
    provider: Box<dyn MomentProvider>,
    rho: Box<dyn RhoTanModel>,
}

fn flow_parts(cfg: &ExperimentConfig) -> Result<FlowParts, RunError> {
    let frame = cfg.geometry.frame()?;
    let provider: Box<dyn MomentProvider> = match cfg.flow.moments {
        MomentSource::Analytic => Box::new(AnalyticMoments {
            base_sd: cfg.increments.s,
            kappa: cfg.increments.kappa,
            frame: frame.clone(),
            weighting: cfg.increments.weighting,
        }),
        MomentSource::MonteCarlo => Box::new(MonteCarloMoments {
            base_sd: cfg.increments.s,
            kappa: cfg.increments.kappa,
            frame: frame.clone(),
            weighting: cfg.increments.weighting,
            n_samples: cfg.mc.samples,
            seed: seeds::derive(cfg.mc.seed, "cli.flow.moments", 0),
        }),
    };
    let rho: Box<dyn RhoTanModel> = match cfg.flow.rho_tan {
        RhoTanConfig::Constant(v) => Box::new(ConstantRate(v)),
        RhoTanConfig::Schur(s) => {
            if !(cfg.increments.kappa > 0.0) {
                return Err(RunError::Config {
                    field: "increments.kappa".to_string(),
                    message: "the schur clock needs a positive monitoring strength".to_string(),
                });
            }
            Box::new(SchurRate {
                model: amplitude_model(cfg)?,
                frame: frame.clone(),
                config: SigmaConfig {
                    eta: cfg.amplitude.eta,
                    kappa: cfg.increments.kappa,
                    gamma: cfg.amplitude.gamma,
                    averaging: cfg.amplitude.averaging,
                    n_samples: s.samples,
                    seed: seeds::derive(cfg.mc.seed, "cli.flow.rho", 0),
                },
                delta_lambda: s.delta_lambda,
            })
        }
    };
    Ok(FlowParts { frame, provider, rho })
}

fn amplitude_model(cfg: &ExperimentConfig) -> Result<AmplitudeModel, RunError> {
    Ok(AmplitudeModel::new(cfg.amplitude.w, cfg.amplitude.a)?)
}

fn step_control(cfg: &ExperimentConfig) -> StepControl {
    StepControl {
        rel_tol: cfg.flow.rel_tol,
        abs_tol: cfg.flow.abs_tol,
        rhs_tol: cfg.flow.rhs_tol,
        initial_step: cfg.flow.initial_step,
        max_steps: cfg.flow.max_steps,
    }
}

fn run_flow(cfg: &ExperimentConfig, out: &Path) -> Result<Value, RunError> {
    let parts = flow_parts(cfg)?;
    let model = FlowModel::anchored(
        cfg.increments.kappa,
        parts.provider.as_ref(),
        parts.rho.as_ref(),
        1.0,
        cfg.flow.r0,
    )?;
    let traj = zenoflow::integrate_flow(&model, cfg.flow.r0, cfg.flow.lambda_max, &step_control(cfg))?;

    let mut csv = String::from("lambda,r,q_n,q_tan,Gamma,A,B\n");
    for rec in &traj.records {
        writeln!(csv, "{},{},{},{},{},{},{}", rec.lambda, rec.r, rec.q_n, rec.q_tan, rec.gamma, rec.a, rec.b)
            .expect("string write");
    }
    write_text(&out.join("trajectory.csv"), &csv)?;

    let last = traj.final_record();
    let (_, signature) = zenoflow::fixed_point_form(last.r, &parts.frame);
    Ok(json!({
        "final_lambda": last.lambda,
        "final_r": last.r,
        "final_signature": signature.to_string(),
        "termination": serde_json::to_value(&traj.termination).expect("termination"),
        "note": traj.note,
        "gamma_target": model.gamma_target,
        "gamma_drift_max_rel": traj.max_gamma_drift(),
        "records": traj.records.len(),
    }))
}

fn run_fixed_point(cfg: &ExperimentConfig, out: &Path) -> Result<Value, RunError> {
    let parts = flow_parts(cfg)?;
    let model = FlowModel::anchored(
        cfg.increments.kappa,
        parts.provider.as_ref(),
        parts.rho.as_ref(),
        1.0,
        cfg.flow.r0,
    )?;
    let bracket = (cfg.flow.bracket[0], cfg.flow.bracket[1]);
    let report = zenoflow::fixed_point(&model, bracket, &FixedPointOptions::default())?;
    let report_json = serde_json::to_value(&report).expect("report");
    write_text(&out.join("fixed_point.json"), &serde_json::to_string_pretty(&report_json).expect("json"))?;
    Ok(report_json)
}

fn run_schur_sigma(cfg: &ExperimentConfig, out: &Path) -> Result<Value, RunError> {
    if !(cfg.increments.kappa > 0.0) {
        return Err(RunError::Config {
            field: "increments.kappa".to_string(),
            message: "the correction tensor needs a positive monitoring strength".to_string(),
        });
    }
    let frame = cfg.geometry.frame()?;
    let q = frame.assemble(1.0, cfg.flow.r0);
    let model = amplitude_model(cfg)?;
    let sigma_cfg = SigmaConfig {
        eta: cfg.amplitude.eta,
        kappa: cfg.increments.kappa,
        gamma: cfg.amplitude.gamma,
        averaging: cfg.amplitude.averaging,
        n_samples: cfg.mc.samples,
        seed: seeds::derive(cfg.mc.seed, "cli.sigma", 0),
    };
    let sigma = schur::sigma_tensor(&q, frame.p_ref(), &model, &sigma_cfg)?;
    let payload = json!({
        "sigma": matrix_rows(&sigma.sigma),
        "sigma_tan": sigma.sigma_tan,
        "normal_fraction": sigma.normal_fraction,
        "mc_se": sigma.mc_se,
    });
    write_text(&out.join("sigma.json"), &serde_json::to_string_pretty(&payload).expect("json"))?;
    Ok(json!({
        "sigma_tan": sigma.sigma_tan,
        "normal_fraction": sigma.normal_fraction,
        "mc_se": sigma.mc_se,
        "gamma_used": sigma.gamma,
        "min_eigenvalue": sigma.min_eigenvalue(),
        // two regularized denominators are in circulation for the fast-sector
        // resolvent; the tensor integral uses the squared-increment form
        "resolvent_form": "1/((dC)^2 + gamma^2)",
    }))
}

/// Fine lattice sized to cover the small-momentum window with margin.
fn nonrel_model(cfg: &ExperimentConfig) -> Result<JumpModel, RunError> {
    let window = 0.105 * cfg.kinetics.m / cfg.kinetics.alpha.sqrt();
    let half_width = ((window / cfg.kinetics.nonrel_h).ceil() as usize).max(2);
    JumpModel::new(
        half_width,
        cfg.kinetics.nonrel_h,
        &cfg.kinetics.jumps,
        cfg.kinetics.m,
        cfg.kinetics.alpha,
        cfg.kinetics.beta,
        cfg.kinetics.base_rate,
    )
    .map_err(|e| RunError::Config { field: "kinetics".to_string(), message: e.to_string() })
}

fn jump_model(cfg: &ExperimentConfig) -> Result<JumpModel, RunError> {
    JumpModel::new(
        cfg.kinetics.half_width,
        cfg.kinetics.h,
        &cfg.kinetics.jumps,
        cfg.kinetics.m,
        cfg.kinetics.alpha,
        cfg.kinetics.beta,
        cfg.kinetics.base_rate,
    )
    .map_err(|e| RunError::Config { field: "kinetics".to_string(), message: e.to_string() })
}

fn run_equilibrium(cfg: &ExperimentConfig, out: &Path) -> Result<Value, RunError> {
    let model = jump_model(cfg)?;
    let gibbs = model.gibbs_state();
    let residual_max = model.stationarity_residual(&gibbs)?;

    let delta = PopulationGrid::delta(model.len(), model.len() / 2);
    let opts = EvolveOptions {
        horizon: cfg.kinetics.horizon,
        dt_safety: cfg.kinetics.dt_safety,
        log_every: cfg.kinetics.log_every,
        max_retries: 40,
    };
    let evolution = model.evolve(&delta, &opts)?;
    let l1_final = evolution.final_f.l1_distance(&gibbs);
    let profile = model.stationarity_profile(&evolution.final_f)?;

    let mut csv = String::from("p,f,f_gibbs,residual\n");
    for (idx, site_residual) in profile.iter().enumerate() {
        writeln!(
            csv,
            "{},{},{},{}",
            model.momentum(idx),
            evolution.final_f.values()[idx],
            gibbs.values()[idx],
            site_residual
        )
        .expect("string write");
    }
    write_text(&out.join("equilibrium.csv"), &csv)?;

    let mut log_csv = String::from("t,mass,l1_to_gibbs,free_energy\n");
    for entry in &evolution.log {
        writeln!(log_csv, "{},{},{},{}", entry.t, entry.mass, entry.l1_to_gibbs, entry.free_energy)
            .expect("string write");
    }
    write_text(&out.join("relaxation.csv"), &log_csv)?;

    let nonrel = nonrel_model(cfg)?.nonrelativistic_limit()?;

    Ok(json!({
        "residual_max": residual_max,
        "l1_distance_final": l1_final,
        "nonrel_max_dev": nonrel.max_deviation,
    }))
}

fn run_anisotropy(cfg: &ExperimentConfig, out: &Path) -> Result<Value, RunError> {
    let frame = cfg.geometry.frame()?;
    let mut csv = String::from("epsilon_aniso,gamma_perp,decay_slope,endpoint_shift\n");
    let mut rows = 0usize;
    let mut seed = Matrix4::zeros();
    seed[(1, 2)] = 1.0;
    seed[(2, 1)] = 1.0;
    seed[(0, 3)] = 0.5;
    seed[(3, 0)] = 0.5;
    for &gamma_perp in &cfg.robustness.gamma_perp {
        for &epsilon in &cfg.robustness.epsilon_aniso {
            let model = ContractionModel {
                flow: ScalarFlowSpec { a: cfg.robustness.flow_a, b: cfg.robustness.flow_b },
                gamma_perp,
                mixer: cfg.robustness.mixer,
                back_coupling: cfg.robustness.back_coupling,
            };
            let state = AnisoState::new(cfg.flow.r0, epsilon, &seed, &frame);
            let report = robustness::aniso_evolve(
                &state,
                &model,
                &frame,
                cfg.robustness.lambda_max,
                cfg.robustness.n_steps,
            )?;
            writeln!(csv, "{},{},{},{}", epsilon, gamma_perp, report.decay_slope, report.endpoint_shift)
                .expect("string write");
            rows += 1;
        }
    }
    write_text(&out.join("anisotropy.csv"), &csv)?;
    Ok(json!({ "rows": rows }))
}

struct Check {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

fn run_verify(cfg: &ExperimentConfig, out: &Path) -> Result<Value, RunError> {
    let checks = collect_verify_checks(cfg)?;
    let mut failed = 0usize;
    let mut lines = String::new();
    for c in &checks {
        let tag = if c.passed { "ok" } else { "FAIL" };
        let line = format!("[{}] {}: {}", tag, c.name, c.detail);
        println!("{line}");
        lines.push_str(&line);
        lines.push('\n');
        if !c.passed {
            failed += 1;
        }
    }
    let payload = json!({
        "checks": checks.iter().map(|c| json!({"name": c.name, "passed": c.passed, "detail": c.detail})).collect::<Vec<_>>(),
        "passed": checks.len() - failed,
        "failed": failed,
    });
    write_text(&out.join("verify.json"), &serde_json::to_string_pretty(&payload).expect("json"))?;
    write_text(&out.join("verify.log"), &lines)?;
    Ok(payload)
}

fn xorshift_stream(seed: u64) -> impl FnMut() -> f64 {
    let mut state = seed.max(1);
    move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    }
}

fn collect_verify_checks(cfg: &ExperimentConfig) -> Result<Vec<Check>, RunError> {
    let mut checks = Vec::new();
    let frame = cfg.geometry.frame()?;
    let seed = cfg.mc.seed;
    let samples = cfg.mc.samples.min(100_000);

    // --- local geometry ---
    {
        let mut next = xorshift_stream(seed ^ 0x51);
        let mut worst = 0.0f64;
        for _ in 0..500 {
            let q = QuadForm::from_matrix(Matrix4::from_fn(|_, _| next())).expect("finite");
            let p = Vector4::from_fn(|_, _| 3.0 * next());
            let grad = q.normal_vector(&p);
            let h = 1e-5;
            for i in 0..4 {
                let mut hi = p;
                let mut lo = p;
                hi[i] += h;
                lo[i] -= h;
                let fd = (q.evaluate(&hi) - q.evaluate(&lo)) / (2.0 * h);
                worst = worst.max((fd - grad[i]).abs() / grad[i].abs().max(1.0));
            }
        }
        checks.push(check("quadform.normal_gradient", worst <= 1e-7, format!("max rel dev {worst:.3e}")));
    }
    {
        let pi_err = (frame.pi_n() * frame.pi_n() - frame.pi_n()).norm()
            + (frame.pi_tan() * frame.pi_tan() - frame.pi_tan()).norm()
            + (frame.pi_n() * frame.pi_tan()).norm()
            + (frame.pi_n() + frame.pi_tan() - Matrix4::identity()).norm();
        let split_err =
            (frame.p_n() + frame.p_t() - frame.p_ref()).norm() + frame.p_n().dot(frame.p_t()).abs();
        checks.push(check(
            "quadform.frame_projectors",
            pi_err <= 1e-13 && split_err <= 1e-13,
            format!("projector residual {pi_err:.3e}, split residual {split_err:.3e}"),
        ));
    }
    {
        let alpha = 0.7;
        let q_star = QuadForm::lorentzian(alpha);
        let mut worst = q_star.isometry_residual(&quadform::scaled_boost(alpha, 0.3, 1));
        worst = worst.max(q_star.isometry_residual(&quadform::scaled_boost(alpha, -1.1, 3)));
        worst = worst.max(q_star.isometry_residual(&quadform::spatial_rotation(1.2, 1, 2)));
        worst = worst.max(q_star.isometry_residual(
            &(quadform::spatial_rotation(0.7, 2, 3) * quadform::scaled_boost(alpha, 0.5, 2)),
        ));
        checks.push(check(
            "quadform.isometries",
            worst <= tolerances::ISOMETRY_RESIDUAL,
            format!("max residual {worst:.3e}"),
        ));
    }

    // --- conditioned increments ---
    {
        let mut next = xorshift_stream(seed ^ 0x52);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let q = QuadForm::from_matrix(Matrix4::from_fn(|_, _| next())).expect("finite");
            let p = Vector4::from_fn(|_, _| 10.0 * next());
            let dp = Vector4::from_fn(|_, _| 10.0 * next());
            let lhs = q.evaluate(&(p + 0.5 * dp)) - q.evaluate(&(p - 0.5 * dp));
            let rhs = contrast(&q, &p, &dp);
            worst = worst.max((lhs - rhs).abs() / lhs.abs().max(1.0));
        }
        checks.push(check(
            "increments.contrast_identity",
            worst <= tolerances::EXACT_IDENTITY_REL,
            format!("max rel residual {worst:.3e}"),
        ));
    }
    {
        let law = IncrementLaw::new(cfg.increments.s, cfg.increments.kappa.max(0.5), QuadForm::identity(), frame.clone())?;
        let n = law.conditioning_direction();
        let s2 = cfg.increments.s * cfg.increments.s;
        let precision = Matrix4::identity() / s2 + cfg.increments.kappa.max(0.5) * (n * n.transpose());
        let oracle = precision.try_inverse().expect("positive definite precision");
        let err = (law.conditioned_covariance() - oracle).norm();
        checks.push(check(
            "increments.conditioned_covariance",
            err <= 1e-12,
            format!("closed form vs direct inverse {err:.3e}"),
        ));
    }
    {
        let law = IncrementLaw::new(cfg.increments.s, cfg.increments.kappa, QuadForm::identity(), frame.clone())?;
        let exact = law.moments_analytic();
        let mc = law.moments_montecarlo(samples, seeds::derive(seed, "verify.moments", 0))?;
        let dev = [
            (mc.m_nn - exact.m_nn).abs() / mc.se_nn.max(1e-300),
            (mc.m_tt - exact.m_tt).abs() / mc.se_tt.max(1e-300),
            (mc.m_nt - exact.m_nt).abs() / mc.se_nt.max(1e-300),
        ]
        .into_iter()
        .fold(0.0f64, f64::max);
        checks.push(check(
            "increments.mc_vs_analytic",
            dev <= tolerances::MC_SIGMA_BOUND,
            format!("max deviation {dev:.2} se at {samples} samples"),
        ));
    }

    // --- damping-scale algebra ---
    {
        let mut next = xorshift_stream(seed ^ 0x53);
        let mut worst_euler = 0.0f64;
        let mut worst_combo = 0.0f64;
        let mut worst_hom = 0.0f64;
        for _ in 0..1000 {
            let (q_n, q_tan, kappa) = (next() * 3.0 + 3.5, next() * 2.0, next().abs() * 4.0 + 0.1);
            let m = MomentSet::exact(next().abs() + 0.1, next().abs() + 0.1, 0.2 * next());
            let g = zenoflow::gamma(q_n, q_tan, kappa, &m);
            let (a, b) = zenoflow::sensitivities(q_n, q_tan, kappa, &m);
            worst_euler =
                worst_euler.max((g - 0.5 * (q_n * a + q_tan * b)).abs() / g.abs().max(1.0));
            let r = q_tan / q_n;
            let combo = 4.0 * kappa * q_n * zenoflow::moment_combination(r, &m);
            worst_combo = worst_combo.max((a + r * b - combo).abs() / combo.abs().max(1.0));
            for alpha in [0.5, 2.0, 10.0] {
                let scaled = zenoflow::gamma(alpha * q_n, alpha * q_tan, kappa, &m);
                worst_hom =
                    worst_hom.max((scaled - alpha * alpha * g).abs() / (alpha * alpha * g).abs().max(1e-30));
            }
        }
        let worst = worst_euler.max(worst_combo).max(worst_hom);
        checks.push(check(
            "zenoflow.damping_identities",
            worst <= tolerances::EXACT_IDENTITY_REL,
            format!("euler {worst_euler:.3e}, combination {worst_combo:.3e}, homogeneity {worst_hom:.3e}"),
        ));
    }
    {
        let provider = AnalyticMoments {
            base_sd: cfg.increments.s,
            kappa: cfg.increments.kappa,
            frame: frame.clone(),
            weighting: cfg.increments.weighting,
        };
        let g0 = zenoflow::reference_gamma(cfg.increments.kappa, &provider, 1.0, cfg.flow.r0)?;
        let mut state = FlowState::new(1.0, cfg.flow.r0, g0, 0.0)?;
        let mut drift = 0.0f64;
        for _ in 0..200 {
            state = zenoflow::discrete_step(&state, 1e-3 * state.q_n.abs(), cfg.increments.kappa, &provider)?;
            let m = provider.moments(state.q_n, state.q_tan)?;
            let g = zenoflow::gamma(state.q_n, state.q_tan, cfg.increments.kappa, &m);
            drift = drift.max(((g - g0) / g0).abs());
        }
        checks.push(check(
            "zenoflow.calibration_invariance",
            drift <= tolerances::GAMMA_DRIFT_REL,
            format!("max relative drift {drift:.3e} over 200 steps"),
        ));
    }
    {
        let parts = flow_parts(cfg)?;
        let model = FlowModel::anchored(
            cfg.increments.kappa,
            parts.provider.as_ref(),
            parts.rho.as_ref(),
            1.0,
            cfg.flow.r0,
        )?;
        let control = StepControl { rel_tol: 1e-8, ..Default::default() };
        let traj = zenoflow::integrate_flow(&model, cfg.flow.r0, cfg.flow.lambda_max.min(4.0), &control)?;
        let monotone = traj.records.windows(2).all(|w| w[1].r < w[0].r);
        let last = traj.final_record();
        let (_, sig) = zenoflow::fixed_point_form(last.r, &parts.frame);
        let sig_ok = last.r >= 0.0 || sig.is_lorentzian();
        let drift = traj.max_gamma_drift();
        checks.push(check(
            "zenoflow.signature_emergence",
            monotone && sig_ok && drift <= tolerances::GAMMA_DRIFT_REL,
            format!("final r {:.4}, signature {}, gamma drift {drift:.3e}", last.r, sig),
        ));
        let report = zenoflow::fixed_point(&model, (cfg.flow.bracket[0], cfg.flow.bracket[1]), &FixedPointOptions::default())?;
        let (ok, detail) = match &report.root {
            Some(root) => (
                root.residual <= tolerances::ROOT_RESIDUAL,
                format!(
                    "root at {:.6} residual {:.2e} ratio discrepancy {:?}",
                    root.r_star, root.residual, root.moment_ratio.discrepancy
                ),
            ),
            None => (true, format!("no root in bracket, min |A+rB| {:.3e}", report.scan_min_abs)),
        };
        checks.push(check("zenoflow.fixed_point_report", ok, detail));
    }

    // --- fast-sector elimination ---
    {
        let mut next = xorshift_stream(seed ^ 0x54);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let q = QuadForm::from_matrix(Matrix4::from_fn(|_, _| next())).expect("finite");
            let p1 = Vector4::from_fn(|_, _| 3.0 * next());
            let p2 = Vector4::from_fn(|_, _| 3.0 * next());
            let d = Vector4::from_fn(|_, _| 3.0 * next());
            let gc = schur::kicked_gap_check(&q, &p1, &p2, &d);
            worst = worst.max(gc.residual / gc.lhs.abs().max(1.0));
        }
        checks.push(check(
            "schur.kicked_gap_identity",
            worst <= tolerances::EXACT_IDENTITY_REL,
            format!("max rel residual {worst:.3e}"),
        ));
    }
    {
        let mut next = xorshift_stream(seed ^ 0x55);
        let mut violations = 0usize;
        for _ in 0..10_000 {
            let eps = next();
            let delta = 10.0 * next();
            let gamma = if next() > 0.0 { 1.0 } else { 0.1 };
            let params = ResolventParams::new(1.0, gamma).expect("valid");
            let exp = schur::resolvent_expansion(eps, delta, &params);
            if exp.remainder.abs() > tolerances::RESOLVENT_REMAINDER_COEFF * eps * eps / gamma.powi(4) + 1e-18 {
                violations += 1;
            }
        }
        checks.push(check("schur.resolvent_remainder", violations == 0, format!("{violations} violations")));
    }
    {
        let model = amplitude_model(cfg)?;
        let q = frame.assemble(1.0, cfg.flow.r0);
        let kappa = cfg.increments.kappa.max(0.5);
        let base = SigmaConfig {
            eta: cfg.amplitude.eta,
            kappa,
            gamma: cfg.amplitude.gamma,
            averaging: cfg.amplitude.averaging,
            n_samples: samples.min(20_000),
            seed: seeds::derive(seed, "verify.sigma", 0),
        };
        let s1 = schur::sigma_tensor(&q, frame.p_ref(), &model, &base)?;
        let psd_ok = s1.min_eigenvalue() >= -tolerances::MC_SIGMA_BOUND * s1.mc_se;
        let mut cfg_eta = base;
        cfg_eta.eta *= 2.0;
        let s_eta = schur::sigma_tensor(&q, frame.p_ref(), &model, &cfg_eta)?;
        let eta_err = (s_eta.sigma - 4.0 * s1.sigma).norm() / s1.sigma.norm().max(1e-300);
        let mut cfg_kappa = base;
        cfg_kappa.kappa *= 2.0;
        cfg_kappa.gamma = schur::GammaPolicy::Fixed(s1.gamma);
        let mut cfg_fixed = base;
        cfg_fixed.gamma = schur::GammaPolicy::Fixed(s1.gamma);
        let s_fixed = schur::sigma_tensor(&q, frame.p_ref(), &model, &cfg_fixed)?;
        let s_kappa = schur::sigma_tensor(&q, frame.p_ref(), &model, &cfg_kappa)?;
        let kappa_err = (s_kappa.sigma - 0.5 * s_fixed.sigma).norm() / s_fixed.sigma.norm().max(1e-300);
        checks.push(check(
            "schur.sigma_psd_and_scaling",
            psd_ok && eta_err <= 1e-12 && kappa_err <= 1e-12,
            format!(
                "min eig {:.3e} (se {:.3e}), eta-square rel {eta_err:.3e}, inverse-kappa rel {kappa_err:.3e}",
                s1.min_eigenvalue(),
                s1.mc_se
            ),
        ));
    }
    {
        let model = AmplitudeModel::new(0.5, 1.0)?;
        let q = QuadForm::identity();
        let e0 = Vector4::new(1.0, 0.0, 0.0, 0.0);
        let x = schur::sigma_integrand(&model, &q, &e0, &Vector4::new(0.1, 0.0, 0.0, 0.0), 1.0);
        let expect = 2.0 / (0.21 * 0.21 + 1.0);
        let err = (x[(0, 0)] - expect).abs() / expect;
        checks.push(check("schur.integrand_hand_value", err <= 1e-12, format!("rel error {err:.3e}")));
    }
    {
        let mut next = xorshift_stream(seed ^ 0x56);
        let q = frame.assemble(1.0, cfg.flow.r0);
        let sig = QuadForm::diagonal([0.1, 0.05, 0.05, 0.02]);
        let pairs: Vec<_> = (0..200)
            .map(|_| {
                let mid = Vector4::from_fn(|_, _| 2.0 * next());
                let dp = Vector4::from_fn(|_, _| 0.01 * next());
                (mid + 0.5 * dp, mid - 0.5 * dp)
            })
            .collect();
        let rep = schur::identification_report(&q, &sig, cfg.increments.kappa.max(0.5), &pairs);
        checks.push(check(
            "schur.identification",
            rep.max_rel_mismatch <= tolerances::EXACT_IDENTITY_REL,
            format!("max rel mismatch {:.3e} over {} pairs", rep.max_rel_mismatch, rep.n_pairs),
        ));
    }

    // --- shell kinetics ---
    {
        let model = jump_model(cfg)?;
        let db = model.detailed_balance_residual();
        checks.push(check(
            "kinetics.detailed_balance",
            db <= tolerances::DB_RESIDUAL_REL,
            format!("entrywise residual {db:.3e}"),
        ));
        let gibbs = model.gibbs_state();
        let stat = model.stationarity_residual(&gibbs)?;
        checks.push(check(
            "kinetics.gibbs_stationary",
            stat <= tolerances::STATIONARITY_RESIDUAL,
            format!("residual {stat:.3e}"),
        ));
    }
    {
        // reduced lattice keeps verify fast; the full horizon runs in equilibrium
        let model = JumpModel::new(
            40,
            cfg.kinetics.h,
            &cfg.kinetics.jumps,
            cfg.kinetics.m,
            cfg.kinetics.alpha,
            cfg.kinetics.beta,
            cfg.kinetics.base_rate,
        )
        .map_err(|e| RunError::Config { field: "kinetics".to_string(), message: e.to_string() })?;
        let delta = PopulationGrid::delta(model.len(), model.len() / 2);
        let opts = EvolveOptions { horizon: 400.0, log_every: 100, ..Default::default() };
        let ev = model.evolve(&delta, &opts)?;
        let l1 = ev.final_f.l1_distance(&model.gibbs_state());
        let mass_ok = ev.log.iter().all(|e| (e.mass - 1.0).abs() <= 1e-12);
        let monotone = ev.log.windows(2).all(|w| w[1].free_energy <= w[0].free_energy + 1e-12);
        checks.push(check(
            "kinetics.relaxation_h_theorem",
            l1 <= tolerances::L1_EQUILIBRATION && mass_ok && monotone,
            format!("l1 {l1:.3e}, mass conserved {mass_ok}, free energy monotone {monotone}"),
        ));
    }
    {
        // the deviation scale depends on (m, alpha, beta); compare against
        // the quartic Taylor-remainder prediction for the configured model
        let rep = nonrel_model(cfg)?.nonrelativistic_limit()?;
        let ok = if rep.theoretical_scale >= 1e-12 {
            (rep.max_deviation - rep.theoretical_scale).abs() <= 0.15 * rep.theoretical_scale
                && (rep.loglog_slope - 4.0).abs() <= tolerances::NONREL_SLOPE_TOL
        } else {
            rep.max_deviation <= 1e-11
        };
        checks.push(check(
            "kinetics.nonrelativistic_window",
            ok,
            format!(
                "max dev {:.3e} vs quartic scale {:.3e}, log-log slope {:.3}",
                rep.max_deviation, rep.theoretical_scale, rep.loglog_slope
            ),
        ));
    }
    if cfg.kinetics.grid3 {
        let model = kinetics::grid3::Grid3Model {
            half_width: cfg.kinetics.grid3_half_width,
            step: cfg.kinetics.h,
            mass: cfg.kinetics.m,
            alpha: cfg.kinetics.alpha,
            beta: cfg.kinetics.beta,
            base_rate: cfg.kinetics.base_rate,
        };
        let res = model.gibbs_stationarity_residual();
        checks.push(check(
            "kinetics.grid3_spot_check",
            res <= tolerances::STATIONARITY_RESIDUAL,
            format!("residual {res:.3e}"),
        ));
    }

    // --- structural stability ---
    {
        let spec = ScalarFlowSpec { a: cfg.robustness.flow_a, b: cfg.robustness.flow_b };
        let report = robustness::reparam_fixed_points(&spec, &|r: f64| 1.0 + r * r, (-5.0, 5.0))?;
        let ok = report.no_finite_fixed_point
            || (report.root_gap.is_some_and(|g| g <= tolerances::ROOT_RESIDUAL)
                && report.stability_signs_agree);
        checks.push(check(
            "robustness.reparametrization",
            ok,
            format!("root gap {:?}, signs agree {}", report.root_gap, report.stability_signs_agree),
        ));
    }
    {
        let mut seed_dir = Matrix4::zeros();
        seed_dir[(1, 2)] = 1.0;
        seed_dir[(2, 1)] = 1.0;
        let gamma_perp = cfg.robustness.gamma_perp[0];
        let model = ContractionModel {
            flow: ScalarFlowSpec { a: cfg.robustness.flow_a, b: cfg.robustness.flow_b },
            gamma_perp,
            mixer: cfg.robustness.mixer,
            back_coupling: cfg.robustness.back_coupling,
        };
        let eps = cfg.robustness.epsilon_aniso.iter().cloned().find(|e| *e > 0.0).unwrap_or(0.02);
        let run = |e: f64| {
            let state = AnisoState::new(cfg.flow.r0, e, &seed_dir, &frame);
            robustness::aniso_evolve(&state, &model, &frame, cfg.robustness.lambda_max, cfg.robustness.n_steps)
        };
        let r1 = run(eps)?;
        let r2 = run(2.0 * eps)?;
        let slope_ok = r1.decay_slope <= -tolerances::ANISO_SLOPE_FACTOR * gamma_perp;
        let ratio = r2.endpoint_shift / r1.endpoint_shift.max(1e-300);
        let linear_ok = (ratio - 2.0).abs() <= 2.0 * tolerances::ANISO_LINEARITY_REL;
        checks.push(check(
            "robustness.anisotropic_contraction",
            slope_ok && linear_ok,
            format!("decay slope {:.3}, doubling ratio {:.3}", r1.decay_slope, ratio),
        ));
    }

    // --- determinism ---
    {
        let law = IncrementLaw::new(cfg.increments.s, cfg.increments.kappa, QuadForm::identity(), frame.clone())?;
        let a = law.moments_montecarlo(samples.min(50_000), seeds::derive(seed, "verify.det", 0))?;
        let b = law.moments_montecarlo(samples.min(50_000), seeds::derive(seed, "verify.det", 0))?;
        let model = amplitude_model(cfg)?;
        let q = frame.assemble(1.0, cfg.flow.r0);
        let sig_cfg = SigmaConfig {
            eta: cfg.amplitude.eta,
            kappa: cfg.increments.kappa.max(0.5),
            gamma: cfg.amplitude.gamma,
            averaging: cfg.amplitude.averaging,
            n_samples: samples.min(20_000),
            seed: seeds::derive(seed, "verify.det", 1),
        };
        let s1 = schur::sigma_tensor(&q, frame.p_ref(), &model, &sig_cfg)?;
        let s2 = schur::sigma_tensor(&q, frame.p_ref(), &model, &sig_cfg)?;
        let identical = a == b && s1.sigma == s2.sigma;
        checks.push(check(
            "seeds.parallel_determinism",
            identical,
            format!("repeated seeded estimates bit-identical: {identical}"),
        ));
    }

    Ok(checks)
}
