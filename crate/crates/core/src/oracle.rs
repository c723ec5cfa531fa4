//! Exact dense references: empirical Fisher, natural gradient, the quadratic
//! surrogates `J_i(d) = −g_iᵀd + ½dᵀFd` and the brute-force mixing
//! coefficient.
//!
//! Everything here is `O(d³)` and meant for `d ≤ 64`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fop::{self, GradientPair, Metric};
use crate::matrix::{dot_slices, Matrix};
use crate::numerics::{self, SymMatrix};

/// Default relative damping for oracle Fishers.
pub const DEFAULT_ORACLE_DAMPING: f64 = 1e-10;

/// A dense SPD Fisher matrix with its Cholesky factor.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseFisher {
    dim: usize,
    f: SymMatrix,
    damping: f64,
    /// Lower-triangular Cholesky factor, row-major.
    chol: Option<Matrix>,
}

impl DenseFisher {
    /// Wraps `f + damping·λ_max(f)·I`.
    pub fn from_matrix(f: SymMatrix, damping: f64) -> Result<Self> {
        if !(damping >= 0.0) {
            return Err(Error::Validation(alloc::format!(
                "damping must be nonnegative, got {damping}"
            )));
        }
        let dim = f.dim();
        let mut m = f.into_matrix();
        if damping > 0.0 {
            let lambda_max = numerics::sym_eigh(&SymMatrix::from_matrix_unchecked(m.clone()))?.lambda_max();
            let shift = damping * lambda_max.max(0.0);
            for i in 0..dim {
                m[(i, i)] += shift;
            }
        }
        let chol = cholesky(&m);
        Ok(Self {
            dim,
            f: SymMatrix::from_matrix_unchecked(m),
            damping,
            chol,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn damping(&self) -> f64 {
        self.damping
    }

    pub fn matrix(&self) -> &Matrix {
        self.f.as_matrix()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        numerics::mat_vec(self.f.as_matrix(), x)
    }

    /// Solves `F·x = b` to relative residual `1e-10`, with one round of
    /// iterative refinement when needed.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.dim {
            return Err(Error::Shape {
                op: "DenseFisher::solve",
                expected: (self.dim, 1),
                found: (b.len(), 1),
            });
        }
        let chol = self.chol.as_ref().ok_or(Error::Singular)?;
        let mut x = cholesky_solve(chol, b);
        for _ in 0..2 {
            let fx = self.mul_vec(&x)?;
            let resid: Vec<f64> = b.iter().zip(&fx).map(|(bi, fi)| bi - fi).collect();
            if norm(&resid) <= 1e-10 * norm(b).max(f64::MIN_POSITIVE) {
                return Ok(x);
            }
            let dx = cholesky_solve(chol, &resid);
            x.iter_mut().zip(&dx).for_each(|(xi, di)| *xi += di);
        }
        let fx = self.mul_vec(&x)?;
        let resid: Vec<f64> = b.iter().zip(&fx).map(|(bi, fi)| bi - fi).collect();
        if norm(&resid) <= 1e-10 * norm(b).max(f64::MIN_POSITIVE) {
            Ok(x)
        } else {
            Err(Error::Singular)
        }
    }
}

impl Metric for DenseFisher {
    fn apply(&self, v: &Matrix) -> Result<Matrix> {
        if v.len() != self.dim {
            return Err(Error::Shape {
                op: "DenseFisher::apply",
                expected: (self.dim, 1),
                found: v.shape(),
            });
        }
        Matrix::unvec(v.rows(), v.cols(), &self.mul_vec(&v.vec())?)
    }
}

fn norm(x: &[f64]) -> f64 {
    libm::sqrt(dot_slices(x, x))
}

fn cholesky(a: &Matrix) -> Option<Matrix> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = a[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > 0.0) {
            return None;
        }
        let ljj = libm::sqrt(diag);
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Some(l)
}

fn cholesky_solve(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// `F = (1/N)·Σ gᵢgᵢᵀ + damping·λ_max·I`.
pub fn empirical_fisher(sample_grads: &[Vec<f64>], damping: f64) -> Result<DenseFisher> {
    let first = sample_grads
        .first()
        .ok_or_else(|| Error::Validation("empirical Fisher needs at least one sample".into()))?;
    let d = first.len();
    let mut f = Matrix::zeros(d, d);
    for g in sample_grads {
        if g.len() != d {
            return Err(Error::Shape {
                op: "empirical_fisher",
                expected: (d, 1),
                found: (g.len(), 1),
            });
        }
        for i in 0..d {
            for j in 0..d {
                f[(i, j)] += g[i] * g[j];
            }
        }
    }
    f.scale_in_place(1.0 / sample_grads.len() as f64);
    DenseFisher::from_matrix(SymMatrix::from_matrix_unchecked(f), damping)
}

/// Natural-gradient direction `F⁻¹g`.
pub fn ngd_direction(fisher: &DenseFisher, g: &[f64]) -> Result<Vec<f64>> {
    fisher.solve(g)
}

/// `(1/N)·Σ gᵢᵀF⁻¹gᵢ` with `F` the empirical Fisher of the same samples.
/// Equals `Tr(F⁻¹F) = d` for a full-rank, undamped Fisher.
pub fn ngd_norm_identity(sample_grads: &[Vec<f64>], damping: f64) -> Result<f64> {
    let fisher = empirical_fisher(sample_grads, damping)?;
    let mut total = 0.0;
    for g in sample_grads {
        total += dot_slices(g, &fisher.solve(g)?);
    }
    Ok(total / sample_grads.len() as f64)
}

/// `J(d) = −gᵀd + ½dᵀFd`.
pub fn surrogate_value(g: &[f64], fisher: &DenseFisher, d: &[f64]) -> Result<f64> {
    if g.len() != fisher.dim() || d.len() != fisher.dim() {
        return Err(Error::Shape {
            op: "surrogate_value",
            expected: (fisher.dim(), 1),
            found: (g.len().max(d.len()), 1),
        });
    }
    Ok(-dot_slices(g, d) + 0.5 * dot_slices(d, &fisher.mul_vec(d)?))
}

/// Gradient of the second ("starving") modality, `g₂ = g_avg − ½·g_diff`.
pub fn second_gradient(g_avg: &[f64], g_diff: &[f64]) -> Vec<f64> {
    g_avg.iter().zip(g_diff).map(|(a, d)| a - 0.5 * d).collect()
}

/// Residual of `g_diff` that is exactly `F`-orthogonal to `g_avg`.
pub fn fisher_orthogonal_residual(g_avg: &[f64], g_diff: &[f64], fisher: &DenseFisher) -> Result<Vec<f64>> {
    let pair = GradientPair::new(Matrix::column(g_avg), Matrix::column(g_diff))?;
    let fa = fisher.mul_vec(g_avg)?;
    let eps = if dot_slices(g_avg, &fa) > 0.0 { 0.0 } else { 1e-300 };
    Ok(fop::orthogonal_residual(&pair, fisher, eps)?.into_vec())
}

/// Closed-form minimizer of `J₂(F⁻¹(g_avg + β·r))`:
/// `β* = −½·⟨g_diff, F⁻¹r⟩ / ⟨r, F⁻¹r⟩`. Zero when `r = 0`.
pub fn optimal_beta(g_diff: &[f64], residual: &[f64], fisher: &DenseFisher) -> Result<f64> {
    let f_inv_r = fisher.solve(residual)?;
    let den = dot_slices(residual, &f_inv_r);
    if !(den > 0.0) {
        return Ok(0.0);
    }
    Ok(-0.5 * dot_slices(g_diff, &f_inv_r) / den)
}

/// Predicted change `J₂(d_FOP(β*)) − J₂(d_SOAP) = −⅛·⟨g_diff, F⁻¹r⟩²/⟨r, F⁻¹r⟩`.
pub fn predicted_reduction(g_diff: &[f64], residual: &[f64], fisher: &DenseFisher) -> Result<f64> {
    let f_inv_r = fisher.solve(residual)?;
    let den = dot_slices(residual, &f_inv_r);
    if !(den > 0.0) {
        return Ok(0.0);
    }
    let num = dot_slices(g_diff, &f_inv_r);
    Ok(-0.125 * num * num / den)
}

/// `J₂` of the preconditioned direction `F⁻¹(g_avg + β·r)`, evaluated directly.
pub fn fop_surrogate(g_avg: &[f64], g_diff: &[f64], residual: &[f64], beta: f64, fisher: &DenseFisher) -> Result<f64> {
    let comb: Vec<f64> = g_avg.iter().zip(residual).map(|(a, r)| a + beta * r).collect();
    let d = fisher.solve(&comb)?;
    surrogate_value(&second_gradient(g_avg, g_diff), fisher, &d)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BetaGrid {
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
}

impl BetaGrid {
    pub fn step_size(&self) -> f64 {
        (self.hi - self.lo) / (self.steps.max(2) - 1) as f64
    }
}

impl Default for BetaGrid {
    fn default() -> Self {
        Self {
            lo: -5.0,
            hi: 5.0,
            steps: 100_000,
        }
    }
}

/// Grid minimization of `J₂(F⁻¹(g_avg + β·r))` over `β`, each point evaluated
/// from scratch. Returns `(β̂, J_min)`; `(0, J₂(d_SOAP))` when `r = 0`.
pub fn brute_force_beta(g_avg: &[f64], g_diff: &[f64], fisher: &DenseFisher, grid: BetaGrid) -> Result<(f64, f64)> {
    if grid.steps < 2 || !(grid.hi > grid.lo) {
        return Err(Error::Validation(
            "beta grid needs lo < hi and at least two points".into(),
        ));
    }
    let residual = fisher_orthogonal_residual(g_avg, g_diff, fisher)?;
    let g2 = second_gradient(g_avg, g_diff);
    let d_soap = fisher.solve(g_avg)?;
    let j_soap = surrogate_value(&g2, fisher, &d_soap)?;
    if norm(&residual) <= 1e-13 * norm(g_diff).max(f64::MIN_POSITIVE) {
        return Ok((0.0, j_soap));
    }
    let d_res = fisher.solve(&residual)?;
    let h = grid.step_size();
    let mut best = (0.0, f64::INFINITY);
    let mut d = vec![0.0; g_avg.len()];
    for i in 0..grid.steps {
        let beta = grid.lo + h * i as f64;
        for ((di, a), r) in d.iter_mut().zip(&d_soap).zip(&d_res) {
            *di = a + beta * r;
        }
        let j = surrogate_value(&g2, fisher, &d)?;
        if j < best.1 {
            best = (beta, j);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fisher(diag: &[f64]) -> DenseFisher {
        DenseFisher::from_matrix(SymMatrix::from_diag(diag), 0.0).unwrap()
    }

    #[test]
    fn empirical_fisher_small_cases() {
        let f = empirical_fisher(&[vec![1.0, 0.0]], 0.0).unwrap();
        assert_eq!(f.matrix(), &Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]));
        let f = empirical_fisher(&[vec![1.0, 0.0], vec![0.0, 1.0]], 0.0).unwrap();
        assert_eq!(f.matrix(), &Matrix::identity(2).scale(0.5));
        assert!(empirical_fisher(&[], 0.0).is_err());
        assert!(empirical_fisher(&[vec![1.0], vec![1.0, 2.0]], 0.0).is_err());
    }

    #[test]
    fn ngd_examples() {
        let g = [0.3, -2.0];
        assert_eq!(ngd_direction(&fisher(&[1.0, 1.0]), &g).unwrap(), g.to_vec());
        let d = ngd_direction(&fisher(&[2.0, 4.0]), &[2.0, 4.0]).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-15 && (d[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn singular_fisher_is_numerical_error() {
        let f = empirical_fisher(&[vec![1.0, 1.0]], 0.0).unwrap();
        assert!(matches!(ngd_direction(&f, &[1.0, 0.0]), Err(Error::Singular)));
    }

    #[test]
    fn norm_identity_scalar_and_rank_one() {
        let v = ngd_norm_identity(&[vec![2.5], vec![-0.5]], 0.0).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
        let g = vec![1.0, -2.0, 0.5];
        let v = ngd_norm_identity(&[g.clone(), g.clone(), g], 1e-12).unwrap();
        assert!((v - 1.0).abs() < 1e-9, "{v}");
        let err = ngd_norm_identity(&[vec![1.0, 0.0], vec![2.0, 0.0]], 0.0);
        assert!(err.is_err());
    }

    #[test]
    fn surrogate_examples() {
        let f = fisher(&[1.0, 1.0]);
        assert_eq!(surrogate_value(&[1.0, 0.0], &f, &[0.0, 0.0]).unwrap(), 0.0);
        let j = surrogate_value(&[1.0, 0.0], &f, &[1.0, 0.0]).unwrap();
        assert!((j + 0.5).abs() < 1e-15);
        // g₂ = (1, −1), d_SOAP = (1, 0): −½‖g_avg‖² + ½⟨g_diff, g_avg⟩ = −0.5 + 0
        let j2 = surrogate_value(&[1.0, -1.0], &f, &[1.0, 0.0]).unwrap();
        let closed = -0.5 * 1.0 + 0.5 * dot_slices(&[0.0, 2.0], &[1.0, 0.0]);
        assert!((j2 - closed).abs() < 1e-15);
    }

    #[test]
    fn brute_force_example() {
        let f = fisher(&[1.0, 1.0]);
        let (beta, j) = brute_force_beta(&[1.0, 0.0], &[0.0, 2.0], &f, BetaGrid::default()).unwrap();
        assert!((beta + 0.5).abs() <= BetaGrid::default().step_size());
        assert!((j + 1.0).abs() < 1e-8);
        let r = fisher_orthogonal_residual(&[1.0, 0.0], &[0.0, 2.0], &f).unwrap();
        assert!((optimal_beta(&[0.0, 2.0], &r, &f).unwrap() + 0.5).abs() < 1e-15);
        assert!((predicted_reduction(&[0.0, 2.0], &r, &f).unwrap() + 0.5).abs() < 1e-15);
    }

    #[test]
    fn brute_force_parallel_difference() {
        let f = fisher(&[2.0, 1.0]);
        let (beta, j) = brute_force_beta(&[1.0, 1.0], &[3.0, 3.0], &f, BetaGrid::default()).unwrap();
        assert_eq!(beta, 0.0);
        let g2 = second_gradient(&[1.0, 1.0], &[3.0, 3.0]);
        let j_soap = surrogate_value(&g2, &f, &f.solve(&[1.0, 1.0]).unwrap()).unwrap();
        assert_eq!(j, j_soap);
    }

    #[test]
    fn damping_is_relative_to_lambda_max() {
        let f = DenseFisher::from_matrix(SymMatrix::from_diag(&[100.0, 0.0]), 1e-3).unwrap();
        assert!((f.matrix()[(1, 1)] - 0.1).abs() < 1e-12);
        assert!((f.matrix()[(0, 0)] - 100.1).abs() < 1e-12);
    }
}
