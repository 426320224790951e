use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::DMatrix;
use num_complex::Complex64;
use proptest::prelude::*;

use slowman::derivatives::{delta_forward, l_m, DerivativeMode};
use slowman::projector::{project, IterationConfig};
use slowman::rpm::{identify_subspace, RpmConfig, RpmState};
use slowman::stability::{
    boundary_residual, boundary_residual_general, boundary_residual_unit, critical_eta, h_max, in_sector, mu, mu_hat,
    uniform_bound, EigenMode,
};
use slowman::systems::{complex_pair, linear_test, michaelis_menten, FlowMap, ManifoldKind};

fn hurwitz_angle() -> impl Strategy<Value = f64> {
    (FRAC_PI_2 + 1e-3)..(1.5 * PI - 1e-3)
}

/// `exp(A t) z` for `A = [[a, 0], [c/eps, -1/eps]]`, from its eigen-decomposition.
fn linear_exact_flow(a: f64, c: f64, eps: f64, z: [f64; 2], t: f64) -> [f64; 2] {
    // x(t) = x e^{a t}; y(t) = k x(t) + (y - k x) e^{-t/eps} with k = c / (1 + eps a)
    let k = c / (1.0 + eps * a);
    let x = z[0] * (a * t).exp();
    [x, k * x + (z[1] - k * z[0]) * (-t / eps).exp()]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flow_matches_matrix_exponential(a in -1.0f64..1.0, c in -2.0f64..2.0, x in -2.0f64..2.0, y in -2.0f64..2.0) {
        let eps = 0.01;
        let fm = FlowMap::new(linear_test(a, c, eps).unwrap(), eps / 400.0).unwrap();
        let got = fm.flow(&[x, y], eps).unwrap();
        let want = linear_exact_flow(a, c, eps, [x, y], eps);
        prop_assert!((got[0] - want[0]).abs() < 1e-10 && (got[1] - want[1]).abs() < 1e-10);
    }

    #[test]
    fn flow_composes_on_the_step_grid(x in -2.0f64..2.0, y in -2.0f64..2.0, n1 in 0usize..40, n2 in 0usize..40) {
        let eps = 0.01;
        let fm = FlowMap::with_default_step(michaelis_menten(1.0, 0.5, eps).unwrap(), None).unwrap();
        let (x, y) = (x.abs() + 0.1, y.abs());
        let (t1, t2) = (n1 as f64 * fm.step(), n2 as f64 * fm.step());
        let two = fm.flow(&fm.flow(&[x, y], t1).unwrap(), t2).unwrap();
        let one = fm.flow(&[x, y], t1 + t2).unwrap();
        prop_assert!((two[0] - one[0]).abs() < 1e-12 && (two[1] - one[1]).abs() < 1e-12, "{two:?} {one:?}");
    }

    #[test]
    fn flow_composes(x in -2.0f64..2.0, y in -2.0f64..2.0, t1 in 0.0f64..0.1, t2 in 0.0f64..0.1) {
        // off-grid times are resolved by the integrator, so use a step small
        // enough that truncation sits below the tolerance
        let eps = 0.01;
        let fm = FlowMap::new(linear_test(0.7, 1.3, eps).unwrap(), eps / 200.0).unwrap();
        let two = fm.flow(&fm.flow(&[x, y], t1).unwrap(), t2).unwrap();
        let one = fm.flow(&[x, y], t1 + t2).unwrap();
        prop_assert!((two[0] - one[0]).abs() < 1e-9 && (two[1] - one[1]).abs() < 1e-9, "{two:?} {one:?}");
    }

    #[test]
    fn michaelis_menten_flow_stays_positive(s in 0.01f64..3.0, c in 0.01f64..1.0) {
        let fm = FlowMap::with_default_step(michaelis_menten(1.0, 0.5, 0.01).unwrap(), None).unwrap();
        let nodes = fm.flow_nodes(&[s, c], 0.05, 20).unwrap();
        for z in nodes {
            prop_assert!(z[0] > 0.0 && z[1] > 0.0);
        }
    }

    #[test]
    fn exact_manifolds_are_invariant(x in -3.0f64..3.0, theta in hurwitz_angle(), a in -1.0f64..1.0) {
        let eps = 0.02;
        for sys in [linear_test(a, 1.5, eps).unwrap(), complex_pair(theta, 1.3, a, 0.8, eps).unwrap()] {
            let r = sys.reference(ManifoldKind::ExactClosedForm).unwrap();
            let h = |xs: &[f64]| r.eval(xs).unwrap();
            let res = sys.invariance_residual(&h, &[x]);
            prop_assert!(res.iter().all(|v| v.abs() < 1e-10), "{res:?}");
        }
    }

    #[test]
    fn doubling_h_scales_l_m(a in -1.0f64..1.0, c in -2.0f64..2.0, x in -2.0f64..2.0, y in -2.0f64..2.0, m in 0usize..=4) {
        let eps = 0.01;
        let sys = linear_test(a, c, eps).unwrap();
        let l1 = l_m(&sys, &DerivativeMode::analytic(0.3 * eps), m, &[x, y]).unwrap()[0];
        let l2 = l_m(&sys, &DerivativeMode::analytic(0.6 * eps), m, &[x, y]).unwrap()[0];
        prop_assert!((l2 - 2f64.powi(m as i32 + 1) * l1).abs() <= 1e-12 * l2.abs().max(1e-300));
    }

    #[test]
    fn differencing_an_equilibrium_gives_zero(x in -3.0f64..3.0, m in 0usize..=3) {
        // a = 0: every point of y = c x is an equilibrium
        let eps = 0.01;
        let fm = FlowMap::with_default_step(linear_test(0.0, 1.0, eps).unwrap(), None).unwrap();
        let mode = DerivativeMode::forward_difference(eps, 1.0);
        let d = delta_forward(&fm, &mode, m, &[x, x]).unwrap()[0];
        prop_assert!(d.abs() <= 1e-12 * x.abs().max(1.0));
    }

    #[test]
    fn projection_keeps_slow_coordinate_and_is_deterministic(x0 in -2.0f64..2.0, seed in -2.0f64..2.0, m in 0usize..=3) {
        let eps = 0.01;
        let fm = FlowMap::with_default_step(linear_test(1.0, 1.0, eps).unwrap(), None).unwrap();
        let cfg = IterationConfig::new(m, DerivativeMode::analytic(0.5 * eps), eps);
        let a = project(&fm, &cfg, &[x0], &[seed]).unwrap();
        let b = project(&fm, &cfg, &[x0], &[seed]).unwrap();
        prop_assert_eq!(a.x0[0].to_bits(), x0.to_bits());
        prop_assert_eq!(&a, &b);
        prop_assert!(a.converged);
        prop_assert!(*a.residuals.last().unwrap() < cfg.tol);
        prop_assert_eq!(a.residuals.len() + 1, a.iterates.len());
    }

    #[test]
    fn converged_output_nearly_annihilates_l(x0 in -2.0f64..2.0, seed in -2.0f64..2.0, m in 0usize..=3, ratio in 0.2f64..1.0) {
        let eps = 0.01;
        let sys = linear_test(1.0, 1.0, eps).unwrap();
        let fm = FlowMap::with_default_step(sys.clone(), None).unwrap();
        let mode = DerivativeMode::analytic(ratio * eps);
        let cfg = IterationConfig::new(m, mode, eps);
        let t = project(&fm, &cfg, &[x0], &[seed]).unwrap();
        prop_assert!(t.converged);
        let l = l_m(&sys, &mode, m, &[x0, t.output[0]]).unwrap()[0];
        let dl = ratio.powi(m as i32 + 1);
        prop_assert!(l.abs() < cfg.tol * (1.0 + dl));
    }

    #[test]
    fn sector_is_symmetric(theta in hurwitz_angle(), m in 0usize..=5) {
        prop_assert_eq!(in_sector(m, theta).unwrap(), in_sector(m, 2.0 * PI - theta).unwrap());
    }

    #[test]
    fn h_max_separates_stable_from_unstable(theta in hurwitz_angle(), modulus in 0.2f64..5.0, m in 0usize..=4) {
        let e = EigenMode::from_polar(modulus, theta).unwrap();
        if let Some(h) = h_max(m, 1.0, &e) {
            // skip hairline cases where h_max itself is below the probe offset
            prop_assume!(h > 1e-3);
            prop_assert!(mu(m, h - 1e-6, 1.0, &e).norm() < 1.0);
            prop_assert!(mu(m, h + 1e-6, 1.0, &e).norm() > 1.0);
        }
    }

    #[test]
    fn eigenmode_polar_round_trip(theta in hurwitz_angle(), modulus in 0.01f64..100.0) {
        let e = EigenMode::from_polar(modulus, theta).unwrap();
        prop_assert!(e.lambda_re < 0.0);
        let back = EigenMode::from_complex(Complex64::new(e.lambda_re, e.lambda_im)).unwrap();
        prop_assert!((back.angle - theta).abs() < 1e-12);
        prop_assert!((e.modulus * e.angle.cos() - e.lambda_re).abs() < 1e-12 * modulus);
        prop_assert!((e.modulus * e.angle.sin() - e.lambda_im).abs() < 1e-12 * modulus);
    }

    #[test]
    fn boundary_residual_is_mu_hat_identity(theta in hurwitz_angle(), s in 0.01f64..5.0, m in 1usize..=3, eta in 0.3f64..2.0) {
        let direct = mu_hat(m, s, theta, eta).unwrap().norm_sqr() - 1.0;
        let scale = 1.0 + direct.abs();
        prop_assert!((boundary_residual(m, s, theta, eta) - direct).abs() < 1e-11 * scale);
        let unit = mu_hat(m, s, theta, 1.0).unwrap().norm_sqr() - 1.0;
        prop_assert!((boundary_residual_unit(m, s, theta) - unit).abs() < 1e-11 * (1.0 + unit.abs()));
        prop_assert!((boundary_residual_general(m, s, theta, 1.0) - boundary_residual_unit(m, s, theta)).abs() < 1e-12 * (1.0 + unit.abs()));
    }

    #[test]
    fn real_axis_residual_sign(s in 0.01f64..5.0, m in 1usize..=3) {
        let r = boundary_residual_unit(m, s, PI);
        let v = mu_hat(m, s, PI, 1.0).unwrap().norm() - 1.0;
        prop_assert!(r.signum() == v.signum() || v.abs() < 1e-12);
    }

    #[test]
    fn m0_differenced_unit_eta_always_contracts(theta in hurwitz_angle(), s in 1e-4f64..20.0) {
        prop_assert!(mu_hat(0, s, theta, 1.0).unwrap().norm() < 1.0);
    }

    #[test]
    fn projector_idempotent_and_orthogonal(entries in proptest::collection::vec(-1.5f64..1.5, 16), y in proptest::collection::vec(-3.0f64..3.0, 4)) {
        let df = DMatrix::from_row_slice(4, 4, &entries);
        let s = identify_subspace(&df, &RpmConfig::default()).unwrap();
        let st = RpmState::new(s.basis.clone(), &y);
        let k = st.dim();
        prop_assert!((st.basis.transpose() * &st.basis - DMatrix::<f64>::identity(k, k)).norm() < 1e-10);
        prop_assert!(st.p.dot(&st.q).abs() < 1e-10 * (1.0 + st.p.norm() * st.q.norm()));
        prop_assert!((st.project(&st.project(&st.p)) - st.project(&st.p)).norm() < 1e-12 * (1.0 + st.p.norm()));
        // the selected block is invariant: DF Z stays in span Z
        let dz = &df * &s.basis;
        let back = &s.basis * (s.basis.transpose() * &dz);
        prop_assert!((dz - back).norm() < 1e-9 * (1.0 + df.norm()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    // 10^4 samples in total across the cases
    #[test]
    fn uniform_bound_is_sufficient(seed in any::<u64>(), m in 1usize..=3, eta_frac in 0.1f64..0.98) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let eta = eta_frac * critical_eta(m);
        let bound = uniform_bound(m, eta).unwrap();
        for _ in 0..500 {
            let theta = rng.random_range(FRAC_PI_2 + 1e-6..1.5 * PI - 1e-6);
            let s = bound * (1.0 + 1e-9) + rng.random_range(0.0f64..10.0);
            prop_assert!(mu_hat(m, s, theta, eta).unwrap().norm() < 1.0, "theta {theta}, s {s}, eta {eta}");
        }
    }
}
