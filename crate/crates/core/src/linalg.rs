//! Dense symmetric linear algebra used by the fitting code.
//!
//! The regression designs here are tall and narrow (thousands of rows, at
//! most a few hundred columns), so all solves go through the normal-equation
//! Gram matrix and plain `f64` kernels are entirely adequate:
//!
//! * [`cholesky`] / [`chol_solve`] / [`chol_inverse`] for symmetric
//!   positive-definite systems,
//! * [`pivoted_rank`] for rank detection with named dependent columns,
//! * [`jacobi_eigh`] (cyclic Jacobi) for symmetric eigendecompositions,
//! * [`pinv_sym`] as the pseudo-inverse fallback when a matrix that should be
//!   positive definite is numerically singular,
//! * [`psd_floor_ok`] for cheap positive-semidefiniteness checks.

use ndarray::{Array1, Array2};

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
/// Returns `None` when a pivot is not strictly positive (the matrix is not
/// numerically positive definite).
pub fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let dj = d.sqrt();
        l[[j, j]] = dj;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / dj;
        }
    }
    Some(l)
}

/// Solve `A x = b` given the lower Cholesky factor `l` of `A`.
pub fn chol_solve(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    debug_assert_eq!(n, b.len());
    // forward substitution: L z = b
    let mut z = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[[i, k]] * z[k];
        }
        z[i] = s / l[[i, i]];
    }
    // back substitution: L' x = z
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut s = z[i];
        for k in (i + 1)..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Inverse of a symmetric positive-definite matrix from its Cholesky factor.
pub fn chol_inverse(l: &Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut inv = Array2::<f64>::zeros((n, n));
    let mut e = Array1::<f64>::zeros(n);
    for j in 0..n {
        e.fill(0.0);
        e[j] = 1.0;
        let col = chol_solve(l, &e);
        inv.column_mut(j).assign(&col);
    }
    // symmetrize to wash out round-off drift between the two triangles
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (inv[[i, j]] + inv[[j, i]]);
            inv[[i, j]] = v;
            inv[[j, i]] = v;
        }
    }
    inv
}

/// Solve `A x = b` for symmetric positive-definite `A`, or `None` when `A`
/// is not numerically positive definite.
pub fn solve_spd(a: &Array2<f64>, b: &Array1<f64>) -> Option<Array1<f64>> {
    cholesky(a).map(|l| chol_solve(&l, b))
}

/// Jacobi (diagonal) scaling vector for a symmetric matrix with nonnegative
/// diagonal: `d[i] = sqrt(a[i,i])`, with non-positive diagonals mapped to 1
/// so the scaling is always invertible.
pub fn equilibration_scale(a: &Array2<f64>) -> Array1<f64> {
    Array1::from_iter((0..a.nrows()).map(|i| {
        let v = a[[i, i]];
        if v > 0.0 {
            v.sqrt()
        } else {
            1.0
        }
    }))
}

/// Equilibrated matrix `D^{-1} A D^{-1}` for the scaling `d`: unit diagonal
/// wherever the original diagonal was positive. Rank decisions and Cholesky
/// factorizations on the scaled matrix are invariant to column scaling of
/// the underlying design, which matters when columns mix magnitudes as
/// different as 0/1 indicators and squared covariates.
pub fn equilibrated(a: &Array2<f64>, d: &Array1<f64>) -> Array2<f64> {
    let n = a.nrows();
    let mut out = a.clone();
    for i in 0..n {
        for j in 0..n {
            out[[i, j]] /= d[i] * d[j];
        }
    }
    out
}

/// Cholesky factorization of the equilibrated matrix, exposing scale-robust
/// solves and inversion in the original coordinates.
pub struct EquilibratedChol {
    l: Array2<f64>,
    d: Array1<f64>,
}

impl EquilibratedChol {
    /// Factor `D^{-1} A D^{-1}`; `None` when that matrix is not numerically
    /// positive definite.
    pub fn new(a: &Array2<f64>) -> Option<Self> {
        let d = equilibration_scale(a);
        let l = cholesky(&equilibrated(a, &d))?;
        Some(Self { l, d })
    }

    /// Solution of `A x = b`.
    pub fn solve(&self, b: &Array1<f64>) -> Array1<f64> {
        let w = chol_solve(&self.l, &(b / &self.d));
        w / &self.d
    }

    /// `A^{-1}`, symmetrized.
    pub fn inverse(&self) -> Array2<f64> {
        let mut inv = chol_inverse(&self.l);
        let n = inv.nrows();
        for i in 0..n {
            for j in 0..n {
                inv[[i, j]] /= self.d[i] * self.d[j];
            }
        }
        inv
    }
}

/// Pseudo-inverse computed through the equilibrated matrix: identical to
/// `A^{-1}` when `A` is positive definite, and a better-conditioned
/// regularized inverse than raw [`pinv_sym`] when columns sit on very
/// different scales.
pub fn pinv_sym_equilibrated(a: &Array2<f64>, rel_tol: f64) -> Array2<f64> {
    let d = equilibration_scale(a);
    let mut inv = pinv_sym(&equilibrated(a, &d), rel_tol);
    let n = inv.nrows();
    for i in 0..n {
        for j in 0..n {
            inv[[i, j]] /= d[i] * d[j];
        }
    }
    inv
}

/// Result of a pivoted-Cholesky rank probe.
#[derive(Debug, Clone)]
pub struct RankProbe {
    /// Numerical rank at the given relative tolerance.
    pub rank: usize,
    /// Column indices judged linearly dependent (everything not selected as
    /// a pivot before the residual diagonal fell below tolerance).
    pub dependent: Vec<usize>,
}

/// Numerical rank of a symmetric positive-semidefinite matrix (a Gram matrix
/// `X'X`) via diagonally pivoted Cholesky. A column joins the dependent set
/// when its residual diagonal falls below `rel_tol` times the largest
/// original diagonal.
pub fn pivoted_rank(a: &Array2<f64>, rel_tol: f64) -> RankProbe {
    let n = a.nrows();
    let mut work = a.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let scale = (0..n).map(|i| a[[i, i]].abs()).fold(0.0_f64, f64::max);
    if scale == 0.0 {
        return RankProbe {
            rank: 0,
            dependent: (0..n).collect(),
        };
    }
    let tol = rel_tol * scale;
    let mut rank = 0;
    for step in 0..n {
        // select the largest remaining diagonal
        let (best, best_val) = (step..n)
            .map(|i| (i, work[[i, i]]))
            .fold((step, f64::NEG_INFINITY), |acc, cur| {
                if cur.1 > acc.1 {
                    cur
                } else {
                    acc
                }
            });
        if best_val <= tol {
            break;
        }
        // swap rows/cols `step` and `best`
        if best != step {
            perm.swap(step, best);
            for j in 0..n {
                let t = work[[step, j]];
                work[[step, j]] = work[[best, j]];
                work[[best, j]] = t;
            }
            for i in 0..n {
                let t = work[[i, step]];
                work[[i, step]] = work[[i, best]];
                work[[i, best]] = t;
            }
        }
        // eliminate
        let d = work[[step, step]];
        for i in (step + 1)..n {
            let f = work[[i, step]] / d;
            for j in (step + 1)..n {
                work[[i, j]] -= f * work[[step, j]];
            }
        }
        rank += 1;
    }
    let mut dependent: Vec<usize> = perm[rank..].to_vec();
    dependent.sort_unstable();
    RankProbe { rank, dependent }
}

/// Symmetric eigendecomposition by the cyclic Jacobi method. Returns
/// `(eigenvalues, eigenvectors)` with eigenvalues ascending and eigenvectors
/// in the corresponding columns.
pub fn jacobi_eigh(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        if off.sqrt() <= 1e-14 * (1.0 + frobenius(&m)) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // rotate rows/cols p,q of m
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[i, i]].partial_cmp(&m[[j, j]]).unwrap());
    let mut vals = Array1::<f64>::zeros(n);
    let mut vecs = Array2::<f64>::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        vals[dst] = m[[src, src]];
        vecs.column_mut(dst).assign(&v.column(src));
    }
    (vals, vecs)
}

/// Moore-Penrose pseudo-inverse of a symmetric matrix via its
/// eigendecomposition; eigenvalues below `rel_tol` times the largest absolute
/// eigenvalue are treated as zero.
pub fn pinv_sym(a: &Array2<f64>, rel_tol: f64) -> Array2<f64> {
    let n = a.nrows();
    let (vals, vecs) = jacobi_eigh(a);
    let scale = vals.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let mut out = Array2::<f64>::zeros((n, n));
    if scale == 0.0 {
        return out;
    }
    for k in 0..n {
        if vals[k].abs() > rel_tol * scale {
            let w = 1.0 / vals[k];
            let col = vecs.column(k);
            for i in 0..n {
                for j in 0..n {
                    out[[i, j]] += w * col[i] * col[j];
                }
            }
        }
    }
    out
}

/// Check that the minimum eigenvalue of symmetric `a` is at least `-floor`
/// (with `floor >= 0`), i.e. that `a` is positive semidefinite up to the
/// given slack. Implemented as a Cholesky probe of `a + floor*I`, which
/// succeeds exactly when `min_eig(a) > -floor`.
pub fn psd_floor_ok(a: &Array2<f64>, floor: f64) -> bool {
    let n = a.nrows();
    let mut shifted = a.clone();
    // tiny extra shift so an exactly-zero eigenvalue still passes
    let eps = 1e-14 * (1.0 + inf_norm(a));
    for i in 0..n {
        shifted[[i, i]] += floor + eps;
    }
    cholesky(&shifted).is_some()
}

/// Matrix infinity norm (maximum absolute row sum).
pub fn inf_norm(a: &Array2<f64>) -> f64 {
    let mut best = 0.0_f64;
    for row in a.rows() {
        let s: f64 = row.iter().map(|v| v.abs()).sum();
        best = best.max(s);
    }
    best
}

fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}
