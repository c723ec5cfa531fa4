//! Dense symmetric linear algebra for the Kronecker preconditioners.
//!
//! Eigendecomposition is Householder tridiagonalization followed by implicit
//! QL iteration with Wilkinson-style shifts. Everything here is a pure
//! function of its inputs.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::matrix::Matrix;

/// Default relative damping for inverse roots.
pub const DEFAULT_DAMPING: f64 = 1e-6;

/// Relative symmetry tolerance accepted by [`SymMatrix::new`].
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Negative eigenvalues above `-PSD_TOL · λ_max` are treated as round-off.
pub const PSD_TOL: f64 = 1e-8;

const MAX_QL_SWEEPS: usize = 64;

/// A square matrix that is symmetric to working precision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SymMatrix(Matrix);

impl SymMatrix {
    /// Validates symmetry (`|A_ij − A_ji| ≤ 1e-10·max(1, ‖A‖_max)`) and
    /// stores the exactly symmetrized matrix.
    pub fn new(mut a: Matrix) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::Shape {
                op: "SymMatrix::new",
                expected: (a.rows(), a.rows()),
                found: a.shape(),
            });
        }
        let n = a.rows();
        let tol = SYMMETRY_TOL * a.max_abs().max(1.0);
        let mut worst = 0.0_f64;
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
            }
        }
        if worst > tol || worst.is_nan() {
            return Err(Error::NotSymmetric { max_asymmetry: worst });
        }
        a.symmetrize();
        Ok(Self(a))
    }

    pub fn identity(n: usize) -> Self {
        Self(Matrix::identity(n))
    }

    pub fn zeros(n: usize) -> Self {
        Self(Matrix::zeros(n, n))
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        Self(Matrix::from_diag(diag))
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub(crate) fn from_matrix_unchecked(a: Matrix) -> Self {
        Self(a)
    }
}

impl AsRef<Matrix> for SymMatrix {
    fn as_ref(&self) -> &Matrix {
        &self.0
    }
}

/// Eigenvalues in ascending order with the matching orthonormal eigenvectors
/// stored as the columns of `eigenvectors`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenPair {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

impl EigenPair {
    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues.last().copied().unwrap_or(0.0)
    }

    /// `Q·diag(f(λ))·Qᵀ`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let q = &self.eigenvectors;
        let n = q.rows();
        let scaled = Matrix::from_fn(n, n, |i, j| q[(i, j)] * f(self.eigenvalues[j]));
        let mut out = scaled.matmul_t_unchecked(q);
        out.symmetrize();
        out
    }

    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_with(|l| l)
    }
}

/// Symmetric eigendecomposition `A = QΛQᵀ` with ascending eigenvalues.
pub fn sym_eigh(a: &SymMatrix) -> Result<EigenPair> {
    let n = a.dim();
    if n == 0 {
        return Ok(EigenPair {
            eigenvalues: Vec::new(),
            eigenvectors: Matrix::zeros(0, 0),
        });
    }
    let mut v: Vec<f64> = a.as_matrix().as_slice().to_vec();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tridiagonalize(n, &mut v, &mut d, &mut e);
    tridiagonal_ql(n, &mut v, &mut d, &mut e)?;
    sort_ascending(n, &mut v, &mut d);
    Ok(EigenPair {
        eigenvalues: d,
        eigenvectors: Matrix::from_vec(n, n, v)?,
    })
}

/// Householder reduction to tridiagonal form. On return `v` holds the
/// accumulated orthogonal transform, `d` the diagonal and `e[1..]` the
/// sub-diagonal.
fn tridiagonalize(n: usize, v: &mut [f64], d: &mut [f64], e: &mut [f64]) {
    let at = |i: usize, j: usize| i * n + j;
    for j in 0..n {
        d[j] = v[at(n - 1, j)];
    }
    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for dk in d.iter().take(i) {
            scale += dk.abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[at(i - 1, j)];
                v[at(i, j)] = 0.0;
                v[at(j, i)] = 0.0;
            }
        } else {
            for dk in d.iter_mut().take(i) {
                *dk /= scale;
                h += *dk * *dk;
            }
            let mut f = d[i - 1];
            let mut g = math::sqrt(h);
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = 0.0;
            }
            for j in 0..i {
                f = d[j];
                v[at(j, i)] = f;
                g = e[j] + v[at(j, j)] * f;
                for k in (j + 1)..i {
                    g += v[at(k, j)] * d[k];
                    e[k] += v[at(k, j)] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[at(k, j)] -= f * e[k] + g * d[k];
                }
                d[j] = v[at(i - 1, j)];
                v[at(i, j)] = 0.0;
            }
        }
        d[i] = h;
    }
    for i in 0..n - 1 {
        v[at(n - 1, i)] = v[at(i, i)];
        v[at(i, i)] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[at(k, i + 1)] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[at(k, i + 1)] * v[at(k, j)];
                }
                for k in 0..=i {
                    v[at(k, j)] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[at(k, i + 1)] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[at(n - 1, j)];
        v[at(n - 1, j)] = 0.0;
    }
    v[at(n - 1, n - 1)] = 1.0;
    e[0] = 0.0;
}

/// Implicit QL iteration on the tridiagonal `(d, e)`, rotating `v` along.
fn tridiagonal_ql(n: usize, v: &mut [f64], d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let at = |i: usize, j: usize| i * n + j;
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    let mut f = 0.0;
    let mut tst1 = 0.0_f64;
    let eps = f64::EPSILON;
    let mut total_sweeps = 0;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n - 1 {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m > l {
            let mut sweeps = 0;
            loop {
                sweeps += 1;
                total_sweeps += 1;
                if sweeps > MAX_QL_SWEEPS {
                    return Err(Error::NoConvergence {
                        iterations: total_sweeps,
                    });
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = math::hypot(p, 1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = math::hypot(p, e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for k in 0..n {
                        h = v[at(k, i + 1)];
                        v[at(k, i + 1)] = s * v[at(k, i)] + c * h;
                        v[at(k, i)] = c * v[at(k, i)] - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    if d.iter().any(|x| !x.is_finite()) {
        return Err(Error::NoConvergence {
            iterations: total_sweeps,
        });
    }
    Ok(())
}

fn sort_ascending(n: usize, v: &mut [f64], d: &mut [f64]) {
    for i in 0..n.saturating_sub(1) {
        let mut k = i;
        let mut p = d[i];
        for (j, &dj) in d.iter().enumerate().skip(i + 1) {
            if dj < p {
                k = j;
                p = dj;
            }
        }
        if k != i {
            d[k] = d[i];
            d[i] = p;
            for row in 0..n {
                v.swap(row * n + i, row * n + k);
            }
        }
    }
}

/// Damped inverse p-th root `(A + εI)^{-1/p}` with `ε = damping·max(λ_max, 1e-30)`.
///
/// Shifted eigenvalues are clamped below at `ε` before the negative power is
/// taken, so slightly negative round-off eigenvalues behave like zero.
pub fn inverse_pth_root(a: &SymMatrix, p: u32, damping: f64) -> Result<SymMatrix> {
    let eig = sym_eigh(a)?;
    inverse_pth_root_from_eigen(&eig, p, damping)
}

/// Same as [`inverse_pth_root`] for an already computed decomposition.
pub fn inverse_pth_root_from_eigen(eig: &EigenPair, p: u32, damping: f64) -> Result<SymMatrix> {
    if p == 0 || p % 2 != 0 {
        return Err(Error::Validation(alloc::format!(
            "root order must be a positive even integer, got {p}"
        )));
    }
    if !(damping >= 0.0) || !damping.is_finite() {
        return Err(Error::Validation(alloc::format!(
            "damping must be finite and nonnegative, got {damping}"
        )));
    }
    let lambda_max = eig.lambda_max();
    if let Some(&lambda_min) = eig.eigenvalues.first() {
        if lambda_min < -PSD_TOL * lambda_max.abs() {
            return Err(Error::NotPsd {
                eigenvalue: lambda_min,
                lambda_max,
            });
        }
    }
    let eps = damping * lambda_max.max(1e-30);
    if eig.eigenvalues.iter().any(|&l| (l + eps).max(eps) <= 0.0) {
        return Err(Error::Singular);
    }
    let exponent = -1.0 / f64::from(p);
    Ok(SymMatrix::from_matrix_unchecked(
        eig.reconstruct_with(|l| math::powf((l + eps).max(eps), exponent)),
    ))
}

/// Applies the Kronecker metric in matrix form, `L·G·R`.
///
/// Under column-major vectorization this equals `(R ⊗ L)·vec(G)` because `R`
/// is symmetric.
pub fn kron_apply(left: &SymMatrix, right: &SymMatrix, g: &Matrix) -> Result<Matrix> {
    if g.rows() != left.dim() || g.cols() != right.dim() {
        return Err(Error::Shape {
            op: "kron_apply",
            expected: (left.dim(), right.dim()),
            found: g.shape(),
        });
    }
    Ok(left.as_matrix().matmul_unchecked(g).matmul_unchecked(right.as_matrix()))
}

/// Explicit Kronecker product `A ⊗ B`. Only used as a test oracle.
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    let (p, q) = b.shape();
    Matrix::from_fn(a.rows() * p, a.cols() * q, |r, c| a[(r / p, c / q)] * b[(r % p, c % q)])
}

/// Dense matrix-vector product, used with [`kron`] in oracles.
pub fn mat_vec(a: &Matrix, x: &[f64]) -> Result<Vec<f64>> {
    if a.cols() != x.len() {
        return Err(Error::Shape {
            op: "mat_vec",
            expected: (a.cols(), 1),
            found: (x.len(), 1),
        });
    }
    Ok((0..a.rows()).map(|i| crate::matrix::dot_slices(a.row(i), x)).collect())
}
