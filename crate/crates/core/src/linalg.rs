//! Symmetric positive-definite factorization with a jitter ladder.
//!
//! Every solve and log-determinant in the crate goes through [`SpdFactor`].
//! A factorization is first attempted on the matrix as given; only if that
//! fails (or yields a pivot below [`PIVOT_FLOOR`] relative to the mean
//! diagonal) is a diagonal jitter of `1e-8 * mean(diag)` added, escalated by
//! a factor of ten up to `1e-4 * mean(diag)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, TadError};

pub const JITTER_START: f64 = 1e-8;
pub const JITTER_MAX: f64 = 1e-4;
/// Smallest admissible squared pivot relative to the mean diagonal.
pub const PIVOT_FLOOR: f64 = 1e-12;

/// Lower Cholesky factor `L` of `A + jitter * I`.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    l: DMatrix<f64>,
    jitter: f64,
}

impl SpdFactor {
    pub fn new(a: &DMatrix<f64>, context: &'static str) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(TadError::DimensionMismatch {
                context,
                expected: n,
                actual: a.ncols(),
            });
        }
        if n == 0 {
            return Ok(Self {
                l: DMatrix::zeros(0, 0),
                jitter: 0.0,
            });
        }
        let mean_diag = a.diagonal().iter().sum::<f64>() / n as f64;
        if !mean_diag.is_finite() || mean_diag <= 0.0 {
            return Err(TadError::NumericalSingularity {
                context,
                order: n,
                max_jitter: 0.0,
            });
        }
        if let Some(l) = cholesky_lower(a, 0.0, mean_diag) {
            return Ok(Self { l, jitter: 0.0 });
        }
        let mut rel = JITTER_START;
        while rel <= JITTER_MAX * (1.0 + 1e-9) {
            let jitter = rel * mean_diag;
            if let Some(l) = cholesky_lower(a, jitter, mean_diag) {
                tracing::trace!(context, order = n, jitter, "factorization needed jitter");
                return Ok(Self { l, jitter });
            }
            rel *= 10.0;
        }
        Err(TadError::NumericalSingularity {
            context,
            order: n,
            max_jitter: JITTER_MAX * mean_diag,
        })
    }

    pub fn order(&self) -> usize {
        self.l.nrows()
    }

    /// Diagonal jitter that was needed for the factorization to succeed.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// `L⁻¹ B`.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        forward_substitute(&self.l, &mut x);
        x
    }

    /// `A⁻¹ B`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        forward_substitute(&self.l, &mut x);
        backward_substitute_transposed(&self.l, &mut x);
        x
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
        forward_substitute(&self.l, &mut x);
        backward_substitute_transposed(&self.l, &mut x);
        DVector::from_column_slice(x.as_slice())
    }

    /// `bᵀ A⁻¹ b`, evaluated as the squared norm of the whitened vector.
    pub fn quad_form(&self, b: &DVector<f64>) -> f64 {
        let mut x = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
        forward_substitute(&self.l, &mut x);
        x.norm_squared()
    }

    /// Explicit `A⁻¹`, assembled as `L⁻ᵀ L⁻¹`. Only used where every entry is needed.
    pub fn inverse(&self) -> DMatrix<f64> {
        let linv = lower_inverse(&self.l);
        linv.tr_mul(&linv)
    }
}

fn cholesky_lower(a: &DMatrix<f64>, jitter: f64, mean_diag: f64) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    // Left-looking column Cholesky on the lower triangle, column-major friendly.
    for j in 0..n {
        let mut d = a[(j, j)] + jitter;
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > PIVOT_FLOOR * mean_diag) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        // column j below the diagonal: a[i,j] - sum_k l[i,k] l[j,k]
        for i in (j + 1)..n {
            l[(i, j)] = a[(i, j)];
        }
        for k in 0..j {
            let ljk = l[(j, k)];
            if ljk == 0.0 {
                continue;
            }
            let (left, mut right) = l.columns_range_pair_mut(k, j);
            let src = left.column(0);
            let mut dst = right.column_mut(0);
            for i in (j + 1)..n {
                dst[i] -= src[i] * ljk;
            }
        }
        let inv = 1.0 / djj;
        for i in (j + 1)..n {
            l[(i, j)] *= inv;
        }
    }
    Some(l)
}

/// Solves `L X = B` in place.
fn forward_substitute(l: &DMatrix<f64>, b: &mut DMatrix<f64>) {
    let n = l.nrows();
    for c in 0..b.ncols() {
        let mut col = b.column_mut(c);
        for k in 0..n {
            let v = col[k] / l[(k, k)];
            col[k] = v;
            if v != 0.0 {
                let lk = l.column(k);
                for i in (k + 1)..n {
                    col[i] -= v * lk[i];
                }
            }
        }
    }
}

/// Solves `Lᵀ X = B` in place.
fn backward_substitute_transposed(l: &DMatrix<f64>, b: &mut DMatrix<f64>) {
    let n = l.nrows();
    for c in 0..b.ncols() {
        let mut col = b.column_mut(c);
        for k in (0..n).rev() {
            let lk = l.column(k);
            let mut s = col[k];
            for i in (k + 1)..n {
                s -= lk[i] * col[i];
            }
            col[k] = s / lk[k];
        }
    }
}

fn lower_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut inv = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut col = inv.column_mut(j);
        col[j] = 1.0;
        for k in j..n {
            let v = col[k] / l[(k, k)];
            col[k] = v;
            if v != 0.0 {
                let lk = l.column(k);
                for i in (k + 1)..n {
                    col[i] -= v * lk[i];
                }
            }
        }
    }
    inv
}

/// Symmetrizes in place: `A ← (A + Aᵀ)/2`.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let mut s = a.clone();
    symmetrize(&mut s);
    let mut ev: Vec<f64> = s.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}
