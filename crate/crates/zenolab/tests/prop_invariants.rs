//! Property tests for the algebraic identities behind the flow.

use proptest::prelude::*;
use zenolab::increments::{contrast, MomentSet};
use zenolab::quadform::{LocalFrame, QuadForm, Signature};
use zenolab::schur::kicked_gap_check;
use zenolab::zenoflow::{gamma, moment_combination, sensitivities};
use zenolab::{Matrix4, Vector4};

fn arb_vec4(limit: f64) -> impl Strategy<Value = Vector4<f64>> {
    [-limit..limit, -limit..limit, -limit..limit, -limit..limit]
        .prop_map(|v| Vector4::new(v[0], v[1], v[2], v[3]))
}

fn arb_quadform() -> impl Strategy<Value = QuadForm> {
    proptest::collection::vec(-1.0..1.0f64, 16).prop_map(|v| {
        QuadForm::from_matrix(Matrix4::from_iterator(v.into_iter())).unwrap()
    })
}

proptest! {
    #[test]
    fn contrast_equals_midpoint_difference(q in arb_quadform(), p in arb_vec4(10.0), dp in arb_vec4(10.0)) {
        let lhs = q.evaluate(&(p + 0.5 * dp)) - q.evaluate(&(p - 0.5 * dp));
        let rhs = contrast(&q, &p, &dp);
        let scale = lhs.abs().max(rhs.abs()).max(1.0);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * scale);
    }

    #[test]
    fn kicked_gap_identity(q in arb_quadform(), p1 in arb_vec4(5.0), p2 in arb_vec4(5.0), delta in arb_vec4(5.0)) {
        let check = kicked_gap_check(&q, &p1, &p2, &delta);
        prop_assert!(check.residual <= 1e-12 * check.lhs.abs().max(1.0));
    }

    #[test]
    fn normal_vector_is_the_gradient(q in arb_quadform(), p in arb_vec4(3.0)) {
        let grad = q.normal_vector(&p);
        let h = 1e-5;
        for i in 0..4 {
            let mut hi = p;
            let mut lo = p;
            hi[i] += h;
            lo[i] -= h;
            let fd = (q.evaluate(&hi) - q.evaluate(&lo)) / (2.0 * h);
            prop_assert!((fd - grad[i]).abs() <= 1e-7 * grad[i].abs().max(1.0));
        }
    }

    #[test]
    fn euler_identity_and_combination(
        q_n in 0.1..3.0f64,
        q_tan in -3.0..3.0f64,
        kappa in 0.01..5.0f64,
        m_nn in 0.01..2.0f64,
        m_tt in 0.01..2.0f64,
        m_nt in -0.5..0.5f64,
    ) {
        let m = MomentSet::exact(m_nn, m_tt, m_nt);
        let g = gamma(q_n, q_tan, kappa, &m);
        let (a, b) = sensitivities(q_n, q_tan, kappa, &m);
        prop_assert!((g - 0.5 * (q_n * a + q_tan * b)).abs() <= 1e-12 * g.abs().max(1.0));
        let r = q_tan / q_n;
        let combo = 4.0 * kappa * q_n * moment_combination(r, &m);
        prop_assert!((a + r * b - combo).abs() <= 1e-12 * combo.abs().max(1.0));
        // quadratic homogeneity
        for alpha in [0.5f64, 2.0, 10.0] {
            let scaled = gamma(alpha * q_n, alpha * q_tan, kappa, &m);
            prop_assert!((scaled - alpha * alpha * g).abs() <= 1e-12 * (alpha * alpha * g).abs().max(1e-30));
        }
    }

    #[test]
    fn signature_of_family_forms(q_n in 0.05..4.0f64, ratio in -3.0..3.0f64) {
        let frame = LocalFrame::new(Vector4::new(1.0, 1.0, 0.0, 0.0), Vector4::new(1.0, 0.0, 0.0, 0.0)).unwrap();
        let q = frame.assemble(q_n, ratio * q_n);
        let tol = (q_n.abs().min((ratio * q_n).abs()) / 10.0).max(1e-14);
        let sig = q.signature(tol).unwrap();
        if ratio > 1e-9 {
            prop_assert_eq!(sig, Signature::new(4, 0, 0));
        } else if ratio < -1e-9 {
            prop_assert_eq!(sig, Signature::new(1, 3, 0));
        }
    }

    #[test]
    fn decompose_inverts_assemble(q_n in -3.0..3.0f64, q_tan in -3.0..3.0f64, theta in 0.1..1.4f64) {
        let frame = LocalFrame::oblique(Vector4::new(1.0, 0.0, 0.0, 0.0), theta, 1.0).unwrap();
        let q = frame.assemble(q_n, q_tan);
        let d = frame.decompose(&q);
        prop_assert!((d.q_n - q_n).abs() <= 1e-13 * q_n.abs().max(1.0));
        prop_assert!((d.q_tan - q_tan).abs() <= 1e-13 * q_tan.abs().max(1.0));
        prop_assert!(d.residual <= 1e-13);
    }

    #[test]
    fn isometry_residual_composition(phi in -1.0..1.0f64, angle in -3.0..3.0f64, alpha in 0.1..2.0f64) {
        let q = QuadForm::lorentzian(alpha);
        let boost = zenolab::quadform::scaled_boost(alpha, phi, 1);
        let rot = zenolab::quadform::spatial_rotation(angle, 2, 3);
        prop_assert!(q.isometry_residual(&boost) <= 1e-10);
        prop_assert!(q.isometry_residual(&rot) <= 1e-12);
        prop_assert!(q.isometry_residual(&(rot * boost)) <= 1e-10);
    }

    #[test]
    fn isometry_residual_unchanged_by_exact_isometry_factor(
        angle in -3.0..3.0f64,
        alpha in 0.1..2.0f64,
        entries in proptest::collection::vec(-1.0..1.0f64, 16),
    ) {
        // composing an arbitrary map with an exact isometry of Q leaves the
        // residual unchanged
        let q = QuadForm::lorentzian(alpha);
        let arbitrary = Matrix4::from_iterator(entries.into_iter());
        let r = zenolab::quadform::spatial_rotation(angle, 1, 2);
        let before = q.isometry_residual(&arbitrary);
        let after = q.isometry_residual(&(r * arbitrary));
        prop_assert!((before - after).abs() <= 1e-10 * before.max(1.0));
    }
}
