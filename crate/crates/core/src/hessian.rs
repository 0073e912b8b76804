//! Layer Hessian 2XX^T: construction, dampening, SPD inversion, and the
//! rank-one row/column elimination that keeps the working inverse in sync
//! as weights are pruned or quantized.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::{cst, Scalar};

/// Diagonal dampening policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Damp {
    /// 0.01 times the mean diagonal of the accumulated 2XX^T.
    Auto,
    /// Fixed nonnegative value added to every diagonal entry.
    Value(f64),
}

impl Default for Damp {
    fn default() -> Self {
        Damp::Value(0.0)
    }
}

impl Damp {
    /// Resolve to a concrete value given the mean diagonal of 2XX^T.
    pub fn resolve<T: Scalar>(self, mean_diag: T) -> T {
        match self {
            Damp::Auto => cst::<T>(0.01) * mean_diag,
            Damp::Value(v) => cst(v),
        }
    }
}

impl std::str::FromStr for Damp {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Damp::Auto);
        }
        let v: f64 = s.parse().map_err(|_| format!("bad damp value {s:?}"))?;
        if !v.is_finite() || v < 0.0 {
            return Err(format!("damp must be nonnegative and finite, got {v}"));
        }
        Ok(Damp::Value(v))
    }
}

/// 2 * X * X^T + damp * I for inputs X of shape d_col x N.
///
/// Exactly symmetric by construction: each off-diagonal product is computed
/// once and mirrored.
pub fn compute_hessian<T: Scalar>(inputs: &Matrix<T>, damp: Damp) -> Matrix<T> {
    accumulate_hessian(&[inputs], damp)
}

/// Accumulated Hessian over several calibration batches (the inputs all
/// share d_col): sum of 2 X_i X_i^T, plus dampening applied once at the end.
/// Extra augmented batches only cost one pass here.
pub fn accumulate_hessian<T: Scalar>(inputs: &[&Matrix<T>], damp: Damp) -> Matrix<T> {
    assert!(!inputs.is_empty(), "need at least one input batch");
    let d = inputs[0].rows();
    let two = cst::<T>(2.0);

    let mut h = Matrix::zeros(d, d);
    for x in inputs {
        assert_eq!(x.rows(), d, "input batches must share d_col");
        for i in 0..d {
            let xi = x.row(i);
            for j in i..d {
                let xj = x.row(j);
                let dot: T = xi.iter().zip(xj.iter()).map(|(&a, &b)| a * b).sum();
                let v = h.get(i, j) + two * dot;
                h.set(i, j, v);
                if i != j {
                    h.set(j, i, v);
                }
            }
        }
    }

    let mean_diag = (0..d).map(|i| h.get(i, i)).sum::<T>() / cst(d as f64);
    let damp = damp.resolve(mean_diag);
    if damp != T::zero() {
        for i in 0..d {
            let v = h.get(i, i) + damp;
            h.set(i, i, v);
        }
    }
    h
}

/// Cholesky factor of a symmetric positive definite matrix, reporting the
/// first failing pivot when the matrix is not positive definite.
fn cholesky<T: Scalar>(h: &Matrix<T>) -> Result<Matrix<T>> {
    let n = h.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = h.get(j, j);
        for k in 0..j {
            let v = l.get(j, k);
            diag -= v * v;
        }
        if diag <= T::zero() || !diag.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j });
        }
        let ljj = diag.sqrt();
        l.set(j, j, ljj);
        for i in j + 1..n {
            let mut s = h.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / ljj);
        }
    }
    Ok(l)
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
///
/// The result is exactly symmetric (upper triangle computed, mirrored).
pub fn invert_spd<T: Scalar>(h: &Matrix<T>) -> Result<Matrix<T>> {
    let n = h.rows();
    if h.cols() != n {
        return Err(Error::shape(format!("invert_spd on {}x{}", n, h.cols())));
    }
    let l = cholesky(h)?;

    // M = L^-1 by forward substitution, column by column.
    let mut m = Matrix::zeros(n, n);
    for j in 0..n {
        m.set(j, j, T::one() / l.get(j, j));
        for i in j + 1..n {
            let mut s = T::zero();
            for k in j..i {
                s -= l.get(i, k) * m.get(k, j);
            }
            m.set(i, j, s / l.get(i, i));
        }
    }

    // H^-1 = M^T M; fill the upper triangle and mirror.
    let mut inv = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut s = T::zero();
            for k in j..n {
                s += m.get(k, i) * m.get(k, j);
            }
            inv.set(i, j, s);
            inv.set(j, i, s);
        }
    }
    Ok(inv)
}

/// Inverse of the submatrix of `h` restricted to `mask`. This is the
/// correct (H_M)^-1, which differs from (H^-1)_M.
pub fn masked_inverse<T: Scalar>(h: &Matrix<T>, mask: &[usize]) -> Result<Matrix<T>> {
    if mask.is_empty() {
        return Err(Error::arg("masked_inverse needs a nonempty mask"));
    }
    invert_spd(&h.submatrix(mask))
}

/// Working inverse Hessian with an active-index set.
///
/// `eliminate(p)` performs the rank-one Gaussian elimination of row and
/// column `p`; on the remaining active set the matrix then equals the true
/// inverse of H with row/column `p` deleted. Eliminated rows and columns
/// are zeroed (the stale diagonal entry is kept and never read again).
#[derive(Debug, Clone)]
pub struct InverseHessianState<T> {
    inv: Matrix<T>,
    active: Vec<bool>,
    active_count: usize,
    breakdown_floor: T,
}

impl<T: Scalar> InverseHessianState<T> {
    /// Wrap a freshly inverted Hessian. The numerical-breakdown floor is
    /// fixed here as 1e-12 * trace/d, making it scale-free.
    pub fn new(inv: Matrix<T>) -> Self {
        let d = inv.rows();
        debug_assert_eq!(d, inv.cols());
        let trace: T = (0..d).map(|i| inv.get(i, i)).sum();
        let breakdown_floor = cst::<T>(1e-12) * trace / cst(d as f64);
        InverseHessianState {
            inv,
            active: vec![true; d],
            active_count: d,
            breakdown_floor,
        }
    }

    pub fn dim(&self) -> usize {
        self.active.len()
    }

    pub fn active_count(&self) -> usize {
        self.active_count
    }

    pub fn is_active(&self, p: usize) -> bool {
        self.active[p]
    }

    /// Ascending active indices.
    pub fn active_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.active
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| a.then_some(i))
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.inv
    }

    #[inline]
    pub fn diag(&self, p: usize) -> T {
        self.inv.get(p, p)
    }

    /// Column `p` of the working inverse (equals row `p` by symmetry).
    pub fn column(&self, p: usize) -> Vec<T> {
        self.inv.column(p)
    }

    /// Gaussian elimination of row and column `p`:
    /// inv <- inv - inv[:,p] inv[p,:] / inv[p][p], then row/column p zeroed
    /// off-diagonal and p removed from the active set.
    pub fn eliminate(&mut self, p: usize) -> Result<()> {
        if !self.active[p] {
            return Err(Error::arg(format!("index {p} already eliminated")));
        }
        let d = self.inv.rows();
        let pivot = self.inv.get(p, p);
        if pivot <= self.breakdown_floor {
            return Err(Error::NumericalBreakdown {
                index: p,
                pivot: pivot.to_f64().unwrap_or(f64::NAN),
                threshold: self.breakdown_floor.to_f64().unwrap_or(f64::NAN),
            });
        }

        let col: Vec<T> = self.inv.column(p);
        let inv_pivot = T::one() / pivot;
        for i in 0..d {
            let ci = col[i];
            if ci == T::zero() || i == p {
                continue;
            }
            let f = ci * inv_pivot;
            let row = self.inv.row_mut(i);
            for (x, &cj) in row.iter_mut().zip(col.iter()) {
                *x -= f * cj;
            }
        }
        // Snap the eliminated row/column to exact zero; keep the stale
        // diagonal entry, which is never read again.
        for i in 0..d {
            if i != p {
                self.inv.set(p, i, T::zero());
                self.inv.set(i, p, T::zero());
            }
        }
        self.active[p] = false;
        self.active_count -= 1;
        Ok(())
    }

    /// Active submatrix in ascending index order (test/diagnostic helper).
    pub fn active_submatrix(&self) -> Matrix<T> {
        let idx: Vec<usize> = self.active_indices().collect();
        self.inv.submatrix(&idx)
    }
}
