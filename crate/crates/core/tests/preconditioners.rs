mod common;

use common::*;
use modprec_core::numerics::{inverse_pth_root, kron, sym_eigh};
use modprec_core::preconditioners::{adamw_step, shampoo_precondition, soap_step, ParamState, PreconditionerKind};
use modprec_core::{AdamMoments, FactorState, Matrix, OptimizerHyper, SymMatrix};
use proptest::prelude::*;

fn orthonormal(seed: u64, n: usize) -> Matrix {
    sym_eigh(&random_spd(&mut rng(seed), n, 0.0)).unwrap().eigenvectors
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn shampoo_matches_explicit_kronecker(seed in any::<u64>(), m in 1usize..=6, n in 1usize..=6) {
        let mut r = rng(seed);
        let l = random_spd(&mut r, m, 0.05);
        let rr = random_spd(&mut r, n, 0.05);
        let g = gaussian(&mut r, m, n);
        let state = FactorState::with_factors(l.clone(), rr.clone(), 1, 10);
        let got = shampoo_precondition(&state, &g, 0.0).unwrap().vec();
        let big = kron(
            inverse_pth_root(&rr, 4, 0.0).unwrap().as_matrix(),
            inverse_pth_root(&l, 4, 0.0).unwrap().as_matrix(),
        );
        let vg = g.vec();
        for i in 0..m * n {
            let want: f64 = (0..m * n).map(|j| big[(i, j)] * vg[j]).sum();
            prop_assert!((got[i] - want).abs() <= 1e-8);
        }
    }

    #[test]
    fn soap_is_rotation_equivariant(seed in any::<u64>(), n in 2usize..=4) {
        let m = n;
        let u = orthonormal(seed ^ 1, m);
        let v = orthonormal(seed ^ 2, n);
        // A larger eps keeps Adam away from its |g| ≈ eps regime, where rounding
        // noise in near-zero rotated entries would dominate the comparison.
        let hyper = OptimizerHyper { eps: 1e-4, ..OptimizerHyper::default() };
        let mut plain = FactorState::new_soap(m, n, 3);
        let mut rotated = FactorState::new_soap(m, n, 3);
        let mut r = rng(seed);
        for _ in 0..12 {
            let g = gaussian(&mut r, m, n);
            let g_rot = naive_mul(&naive_mul(&u, &g), &naive_transpose(&v));
            let a = soap_step(&mut plain, &g, &hyper).unwrap();
            let b = soap_step(&mut rotated, &g_rot, &hyper).unwrap();
            let want = naive_mul(&naive_mul(&u, &a), &naive_transpose(&v));
            prop_assert!(b.max_abs_diff(&want).unwrap() <= 1e-8, "diff {}", b.max_abs_diff(&want).unwrap());
        }
    }

    #[test]
    fn factor_ema_matches_definition(seed in any::<u64>(), decay in 0.5f64..1.0) {
        let mut r = rng(seed);
        let mut st = FactorState::new(3, 2, 100);
        let mut l = Matrix::zeros(3, 3);
        for _ in 0..4 {
            let g = gaussian(&mut r, 3, 2);
            st.update_factors(&g, decay).unwrap();
            let ggt = naive_mul(&g, &naive_transpose(&g));
            l = l.scale(decay).add(&ggt.scale(1.0 - decay)).unwrap();
        }
        prop_assert!(st.left.max_abs_diff(&l).unwrap() <= 1e-12);
        prop_assert_eq!(st.step, 4);
    }
}

#[test]
fn adamw_first_step_is_sign_like() {
    let hyper = OptimizerHyper {
        lr: 0.1,
        ..OptimizerHyper::default()
    };
    let mut mom = AdamMoments::new(1, 3);
    let g = Matrix::from_rows(&[&[2.0, -0.5, 0.0]]);
    let param = Matrix::from_rows(&[&[1.0, 1.0, 1.0]]);
    let out = adamw_step(&mut mom, &g, &hyper, &param).unwrap();
    // m̂ = g, v̂ = g², update = g/(|g| + ε)
    let want = [2.0 / (2.0 + 1e-8), -0.5 / (0.5 + 1e-8), 0.0];
    for (j, w) in want.iter().enumerate() {
        assert!((out.update[(0, j)] - w).abs() < 1e-15);
        assert!((out.new_param[(0, j)] - (1.0 - 0.1 * w)).abs() < 1e-15);
    }
}

#[test]
fn adamw_weight_decay_is_decoupled() {
    let hyper = OptimizerHyper {
        lr: 0.1,
        weight_decay: 0.5,
        ..OptimizerHyper::default()
    };
    let mut mom = AdamMoments::new(1, 1);
    let out = adamw_step(&mut mom, &Matrix::zeros(1, 1), &hyper, &Matrix::from_rows(&[&[2.0]])).unwrap();
    // zero gradient: only the decay term acts, p − lr·wd·p
    assert!((out.new_param[(0, 0)] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
}

#[test]
fn soap_constant_gradient_with_frozen_diagonal_factors_is_scale_free() {
    let hyper = OptimizerHyper {
        factor_decay: 1.0,
        ..OptimizerHyper::default()
    };
    let mut st = FactorState::with_factors(SymMatrix::from_diag(&[1.0, 100.0]), SymMatrix::from_diag(&[1.0]), 0, 10);
    st.rotated_moments = Some(AdamMoments::new(2, 1));
    let g = Matrix::column(&[0.3, -40.0]);
    let mut last = Matrix::zeros(2, 1);
    for _ in 0..200 {
        last = soap_step(&mut st, &g, &hyper).unwrap();
    }
    assert!((last[(0, 0)] - 1.0).abs() < 1e-6);
    assert!((last[(1, 0)] + 1.0).abs() < 1e-6);
}

#[test]
fn param_state_round_trips_through_json() {
    let hyper = OptimizerHyper::default();
    let mut r = rng(9);
    for kind in [
        PreconditionerKind::Adamw,
        PreconditionerKind::Shampoo,
        PreconditionerKind::Soap,
    ] {
        let mut state = ParamState::new(kind, 3, 2, &hyper);
        let mut param = gaussian(&mut r, 3, 2);
        for _ in 0..3 {
            let g = gaussian(&mut r, 3, 2);
            state.step(&mut param, &g, &hyper).unwrap();
        }
        let json = serde_json::to_string(&state).unwrap();
        let mut back: ParamState = serde_json::from_str(&json).unwrap();
        assert_eq!(back, state);
        let g = gaussian(&mut r, 3, 2);
        let (mut p1, mut p2) = (param.clone(), param.clone());
        state.step(&mut p1, &g, &hyper).unwrap();
        back.step(&mut p2, &g, &hyper).unwrap();
        assert_eq!(p1, p2, "{kind:?}");
    }
}
