//! The identity suite behind `modprec verify`: every check compares the
//! scalable code path with a dense reference on seeded random instances.

use modprec_core::mlfold::reconstruct_segment;
use modprec_core::numerics::{inverse_pth_root, kron, sym_eigh};
use modprec_core::oracle::{
    brute_force_beta, fisher_orthogonal_residual, fop_surrogate, ngd_direction, ngd_norm_identity, optimal_beta,
    predicted_reduction, second_gradient, surrogate_value, BetaGrid,
};
use modprec_core::preconditioners::shampoo_precondition;
use modprec_core::{
    DenseFisher, FactorState, FoldConfig, FoldState, FopSettings, GradientPair, IdentityMetric, Matrix, Metric,
    SymMatrix,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::Result;

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// How often the universal "any β ≠ 0 helps" reading fails.
#[derive(Clone, Debug, Serialize)]
pub struct UniversalClaim {
    pub betas: Vec<f64>,
    pub pairs: usize,
    /// Pairs where the starving-modality surrogate did not decrease.
    pub per_modality_violations: usize,
    /// Pairs where the averaged surrogate did not decrease.
    pub averaged_violations: usize,
    pub note: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub version: String,
    pub checks: Vec<Check>,
    pub universal_claim: UniversalClaim,
    pub all_passed: bool,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gaussian(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| r.sample(StandardNormal))
}

fn gvec(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.sample(StandardNormal)).collect()
}

fn spd(r: &mut ChaCha8Rng, n: usize, shift: f64) -> SymMatrix {
    let a = gaussian(r, n, n);
    let mut s = a.matmul(&a.transpose()).expect("square").scale(1.0 / n as f64);
    for i in 0..n {
        s[(i, i)] += shift;
    }
    s.symmetrize();
    SymMatrix::new(s).expect("symmetric by construction")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check(name: &str, instances: usize, max_error: f64, tolerance: f64) -> Check {
    Check {
        name: name.into(),
        instances,
        max_error,
        tolerance,
        passed: max_error <= tolerance,
    }
}

fn kronecker(seed: u64) -> Result<Check> {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (m, n) = (r.random_range(1..=6), r.random_range(1..=6));
        let (l, rr) = (spd(&mut r, m, 0.05), spd(&mut r, n, 0.05));
        let g = gaussian(&mut r, m, n);
        let state = FactorState::with_factors(l.clone(), rr.clone(), 1, 10);
        let got = shampoo_precondition(&state, &g, 0.0)?.vec();
        let big = kron(
            inverse_pth_root(&rr, 4, 0.0)?.as_matrix(),
            inverse_pth_root(&l, 4, 0.0)?.as_matrix(),
        );
        let want = modprec_core::numerics::mat_vec(&big, &g.vec())?;
        worst = got.iter().zip(&want).fold(worst, |w, (a, b)| w.max((a - b).abs()));
    }
    Ok(check("kronecker_equivalence", 100, worst, 1e-8))
}

fn inverse_root(seed: u64) -> Result<Check> {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let n = r.random_range(1..=32);
        let p = if i % 2 == 0 { 2 } else { 4 };
        let a = spd(&mut r, n, 0.1);
        let damping = 1e-6;
        let b = inverse_pth_root(&a, p, damping)?;
        let mut shifted = a.as_matrix().clone();
        let eps = damping * sym_eigh(&a)?.lambda_max();
        for k in 0..n {
            shifted[(k, k)] += eps;
        }
        let mut acc = shifted;
        for _ in 0..p {
            acc = b.as_matrix().matmul(&acc)?;
        }
        worst = worst.max(acc.sub(&Matrix::identity(n))?.max_abs());
    }
    Ok(check("inverse_root_contract", 100, worst, 1e-6))
}

fn orthogonality(seed: u64) -> Result<Check> {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (m, n) = (r.random_range(2..=6), r.random_range(1..=6));
        let metric = FactorState::with_factors(spd(&mut r, m, 0.05), spd(&mut r, n, 0.05), 1, 10);
        let pair = GradientPair::new(gaussian(&mut r, m, n), gaussian(&mut r, m, n))?;
        let res = modprec_core::fop::orthogonal_residual(&pair, &metric, 0.0)?;
        let ma = metric.apply(&pair.g_avg)?;
        let cross = res.dot(&ma)?.abs();
        let scale = res.dot(&metric.apply(&res)?)?.sqrt() * pair.g_avg.dot(&ma)?.sqrt();
        worst = worst.max(cross / scale);
    }
    Ok(check("fisher_orthogonality", 1000, worst, 1e-6))
}

/// Optimal-β agreement, strict reduction and the universal-claim audit share
/// their instances.
fn surrogate_checks(seed: u64) -> Result<(Check, Check, UniversalClaim)> {
    let mut r = rng(seed);
    let grid = BetaGrid::default();
    let betas = vec![-2.0, -1.0, -0.5, -0.1, 0.1, 0.5, 1.0, 2.0];
    let (mut beta_err, mut red_err) = (0.0f64, 0.0f64);
    let (mut per_mod, mut averaged, mut pairs) = (0, 0, 0);
    for _ in 0..100 {
        let d = r.random_range(2..=16);
        let f = DenseFisher::from_matrix(spd(&mut r, d, 0.1), 0.0)?;
        let (a, g) = (gvec(&mut r, d), gvec(&mut r, d));
        let res = fisher_orthogonal_residual(&a, &g, &f)?;
        let beta = optimal_beta(&g, &res, &f)?;
        let (hat, _) = brute_force_beta(&a, &g, &f, grid)?;
        if beta.abs() <= grid.hi {
            beta_err = beta_err.max((hat - beta).abs() / grid.step_size());
        }
        let g2 = second_gradient(&a, &g);
        let d_soap = f.solve(&a)?;
        let j_soap = surrogate_value(&g2, &f, &d_soap)?;
        let j_fop = fop_surrogate(&a, &g, &res, beta, &f)?;
        let predicted = predicted_reduction(&g, &res, &f)?;
        let rel = ((j_fop - j_soap) - predicted).abs() / predicted.abs().max(1e-300);
        let strict_ok = dot(&g, &f.solve(&res)?).abs() <= 1e-12 || j_fop < j_soap;
        red_err = red_err.max(if strict_ok { rel } else { f64::INFINITY });

        let j_avg_soap = surrogate_value(&a, &f, &d_soap)?;
        for &b in &betas {
            pairs += 1;
            if fop_surrogate(&a, &g, &res, b, &f)? >= j_soap {
                per_mod += 1;
            }
            let comb: Vec<f64> = a.iter().zip(&res).map(|(x, y)| x + b * y).collect();
            if surrogate_value(&a, &f, &ngd_direction(&f, &comb)?)? >= j_avg_soap {
                averaged += 1;
            }
        }
    }
    let claim = UniversalClaim {
        betas,
        pairs,
        per_modality_violations: per_mod,
        averaged_violations: averaged,
        note: "The starving-modality surrogate decreases only for β between 0 and −⟨g_diff,F⁻¹r⟩/⟨r,F⁻¹r⟩; \
               the averaged surrogate changes by +½β²⟨r,F⁻¹r⟩ and never decreases. Reported, not asserted."
            .into(),
    };
    Ok((
        check("optimal_beta_vs_grid (in grid steps)", 100, beta_err, 1.0),
        check("strict_surrogate_reduction (relative)", 100, red_err, 1e-8),
        claim,
    ))
}

fn norm_identity(seed: u64) -> Result<Check> {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for d in [1usize, 3, 8, 32] {
        let samples: Vec<Vec<f64>> = (0..d).map(|_| gvec(&mut r, d)).collect();
        worst = worst.max((ngd_norm_identity(&samples, 1e-12)? - d as f64).abs());
    }
    Ok(check("ngd_norm_identity", 4, worst, 1e-6))
}

fn segment_reconstruction(seed: u64) -> Result<Check> {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for k in [2usize, 4, 8, 16, 32, 64] {
        let gs: Vec<Matrix> = (0..k).map(|_| gaussian(&mut r, 3, 2)).collect();
        let mean = |s: &[Matrix]| {
            let mut acc = Matrix::zeros(3, 2);
            for g in s {
                acc.axpy(1.0, g).expect("same shape");
            }
            acc.scale(1.0 / s.len() as f64)
        };
        let mut n1 = 1;
        while n1 < k {
            let seg = reconstruct_segment((n1, &mean(&gs[..n1])), (2 * n1, &mean(&gs[..2 * n1])))?;
            worst = worst.max(seg.max_abs_diff(&mean(&gs[n1..2 * n1]))?);
            n1 *= 2;
        }
    }
    Ok(check("segment_reconstruction", 6, worst, 1e-12))
}

fn folding_ladder(seed: u64) -> Result<Check> {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for log_k in 0..=6 {
        let k = 1usize << log_k;
        let gs: Vec<Matrix> = (0..k).map(|_| gaussian(&mut r, 3, 2)).collect();
        let cfg = FoldConfig::new(k, FopSettings::fixed(0.0))?;
        let mut st = FoldState::new(k)?;
        let mut sum = Matrix::zeros(3, 2);
        for g in &gs {
            st.accumulate_micro(g, &IdentityMetric, &cfg)?;
            sum.axpy(1.0, g)?;
            if st.persistent_buffers() > 3 {
                worst = f64::INFINITY;
            }
        }
        worst = worst.max(st.finalize()?.max_abs_diff(&sum.scale(1.0 / k as f64))?);
        let cfg = FoldConfig::new(k, FopSettings::default())?;
        let mut st = FoldState::new(k)?;
        for _ in 0..k {
            st.accumulate_micro(&gs[0], &IdentityMetric, &cfg)?;
        }
        worst = worst.max(st.finalize()?.max_abs_diff(&gs[0])?);
    }
    Ok(check("folding_degeneracy_ladder", 7, worst, 1e-12))
}

fn one_step_ngd(seed: u64) -> Result<Check> {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for d in [1usize, 2, 5, 8, 16, 32] {
        let h = spd(&mut r, d, 0.5);
        let f = DenseFisher::from_matrix(h.clone(), 0.0)?;
        let (theta, star) = (gvec(&mut r, d), gvec(&mut r, d));
        let diff: Vec<f64> = theta.iter().zip(&star).map(|(a, b)| a - b).collect();
        let grad = modprec_core::numerics::mat_vec(h.as_matrix(), &diff)?;
        let step = ngd_direction(&f, &grad)?;
        for i in 0..d {
            worst = worst.max((theta[i] - step[i] - star[i]).abs());
        }
    }
    Ok(check("one_step_ngd", 6, worst, 1e-10))
}

pub fn run_suite(seed: u64) -> Result<VerifyReport> {
    let (beta, reduction, claim) = surrogate_checks(seed + 3)?;
    let checks = vec![
        kronecker(seed)?,
        inverse_root(seed + 1)?,
        orthogonality(seed + 2)?,
        beta,
        reduction,
        norm_identity(seed + 4)?,
        segment_reconstruction(seed + 5)?,
        folding_ladder(seed + 6)?,
        one_step_ngd(seed + 7)?,
    ];
    let all_passed = checks.iter().all(|c| c.passed);
    Ok(VerifyReport {
        version: crate::record::version_string(),
        checks,
        universal_claim: claim,
        all_passed,
    })
}
