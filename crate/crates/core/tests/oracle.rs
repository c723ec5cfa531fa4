mod common;

use common::*;
use modprec_core::numerics::sym_eigh;
use modprec_core::oracle::{
    brute_force_beta, empirical_fisher, fisher_orthogonal_residual, fop_surrogate, ngd_direction, ngd_norm_identity,
    optimal_beta, predicted_reduction, second_gradient, surrogate_value, BetaGrid,
};
use modprec_core::{DenseFisher, Matrix, SymMatrix};
use proptest::prelude::*;

fn random_fisher(seed: u64, d: usize) -> DenseFisher {
    DenseFisher::from_matrix(random_spd(&mut rng(seed), d, 0.1), 0.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fop_surrogate_identity_holds_for_every_beta(seed in any::<u64>(), d in 2usize..=8, beta in -5.0f64..5.0) {
        let f = random_fisher(seed, d);
        let mut r = rng(seed ^ 3);
        let (a, g) = (gaussian_vec(&mut r, d), gaussian_vec(&mut r, d));
        let res = fisher_orthogonal_residual(&a, &g, &f).unwrap();
        let g2 = second_gradient(&a, &g);
        let d_soap = solve_dense(f.matrix(), &a);
        let j_soap = surrogate_value(&g2, &f, &d_soap).unwrap();
        let f_inv_r = solve_dense(f.matrix(), &res);
        let num = dot(&g, &f_inv_r);
        let den = dot(&res, &f_inv_r);
        let want = j_soap + 0.5 * beta * num + 0.5 * beta * beta * den;
        let got = fop_surrogate(&a, &g, &res, beta, &f).unwrap();
        prop_assert!((got - want).abs() <= 1e-9 * (1.0 + want.abs()));
    }

    #[test]
    fn optimal_beta_gives_the_predicted_strict_reduction(seed in any::<u64>(), d in 2usize..=8) {
        let f = random_fisher(seed, d);
        let mut r = rng(seed ^ 5);
        let (a, g) = (gaussian_vec(&mut r, d), gaussian_vec(&mut r, d));
        let res = fisher_orthogonal_residual(&a, &g, &f).unwrap();
        let beta = optimal_beta(&g, &res, &f).unwrap();
        let g2 = second_gradient(&a, &g);
        let j_soap = surrogate_value(&g2, &f, &f.solve(&a).unwrap()).unwrap();
        let j_fop = fop_surrogate(&a, &g, &res, beta, &f).unwrap();
        let reduction = predicted_reduction(&g, &res, &f).unwrap();
        prop_assert!(((j_fop - j_soap) - reduction).abs() <= 1e-8 * reduction.abs().max(1e-12));
        prop_assert!(j_fop < j_soap);
    }

    #[test]
    fn grid_agrees_with_closed_form(seed in any::<u64>(), d in 2usize..=6) {
        let f = random_fisher(seed, d);
        let mut r = rng(seed ^ 9);
        let (a, g) = (gaussian_vec(&mut r, d), gaussian_vec(&mut r, d));
        let res = fisher_orthogonal_residual(&a, &g, &f).unwrap();
        let beta = optimal_beta(&g, &res, &f).unwrap();
        prop_assume!(beta.abs() < 4.9);
        let grid = BetaGrid { lo: -5.0, hi: 5.0, steps: 10_001 };
        let (hat, _) = brute_force_beta(&a, &g, &f, grid).unwrap();
        prop_assert!((hat - beta).abs() <= grid.step_size());
    }

    #[test]
    fn ngd_solve_meets_residual_bound(seed in any::<u64>(), d in 1usize..=32) {
        let f = random_fisher(seed, d);
        let g = gaussian_vec(&mut rng(seed ^ 1), d);
        let x = ngd_direction(&f, &g).unwrap();
        let fx = f.mul_vec(&x).unwrap();
        let res: f64 = fx.iter().zip(&g).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        prop_assert!(res <= 1e-10 * dot(&g, &g).sqrt());
    }

    #[test]
    fn one_ngd_step_reaches_the_quadratic_minimizer(seed in any::<u64>(), d in 1usize..=32) {
        let h = random_spd(&mut rng(seed), d, 0.5);
        let f = DenseFisher::from_matrix(h.clone(), 0.0).unwrap();
        let mut r = rng(seed ^ 2);
        let (theta0, star) = (gaussian_vec(&mut r, d), gaussian_vec(&mut r, d));
        let diff: Vec<f64> = theta0.iter().zip(&star).map(|(a, b)| a - b).collect();
        let grad: Vec<f64> = (0..d).map(|i| (0..d).map(|j| h.as_matrix()[(i, j)] * diff[j]).sum()).collect();
        let step = ngd_direction(&f, &grad).unwrap();
        for i in 0..d {
            prop_assert!((theta0[i] - step[i] - star[i]).abs() <= 1e-10);
        }
    }
}

#[test]
fn norm_identity_equals_dimension() {
    for d in [1usize, 3, 8, 32] {
        let mut r = rng(d as u64);
        let samples: Vec<Vec<f64>> = (0..d).map(|_| gaussian_vec(&mut r, d)).collect();
        let v = ngd_norm_identity(&samples, 1e-12).unwrap();
        assert!((v - d as f64).abs() <= 1e-6, "d = {d}: {v}");
    }
}

#[test]
fn norm_identity_rank_one_limit() {
    let samples = vec![vec![1.0, -2.0, 0.5]; 3];
    let v = ngd_norm_identity(&samples, 1e-12).unwrap();
    assert!((v - 1.0).abs() < 1e-6, "{v}");
    assert!(ngd_norm_identity(&[vec![2.5], vec![-0.1]], 0.0).unwrap() == 1.0);
}

#[test]
fn empirical_fisher_examples() {
    let f = empirical_fisher(&[vec![1.0, 0.0]], 0.0).unwrap();
    assert_eq!(f.matrix(), &Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]));
    let f = empirical_fisher(&[vec![1.0, 0.0], vec![0.0, 1.0]], 0.0).unwrap();
    assert_eq!(f.matrix(), &Matrix::from_rows(&[&[0.5, 0.0], &[0.0, 0.5]]));
    assert!(empirical_fisher(&[], 0.0).is_err());
}

#[test]
fn monte_carlo_fisher_approaches_identity() {
    // The operator-norm error of a 200-sample second moment in d = 5 sits near
    // the spectral edge (1 + √(5/200))² − 1 ≈ 0.34, so a 0.2 bound fails for
    // most seeds. The mean error over seeds is checked against the edge, and
    // the worst seed against 0.5.
    use rand::Rng;
    use rand_distr::StandardNormal;
    let mut errors = Vec::new();
    for seed in 0..20u64 {
        let mut r = rng(seed);
        let samples: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..5).map(|_| r.sample(StandardNormal)).collect())
            .collect();
        let f = empirical_fisher(&samples, 0.0).unwrap();
        let mut dev = f.matrix().clone();
        for i in 0..5 {
            dev[(i, i)] -= 1.0;
        }
        let eig = sym_eigh(&SymMatrix::new(dev).unwrap()).unwrap();
        errors.push(eig.eigenvalues.iter().map(|x| x.abs()).fold(0.0, f64::max));
    }
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    let worst = errors.iter().copied().fold(0.0, f64::max);
    eprintln!("operator-norm errors: mean {mean:.3}, worst {worst:.3}");
    assert!(mean <= 0.34);
    assert!(worst <= 0.5);
}
