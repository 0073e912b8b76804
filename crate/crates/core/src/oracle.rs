//! Brute-force reference implementations used by the test suite, the
//! acceptance harness, and the CLI's --verify mode.
//!
//! Everything here recomputes restricted Hessian inverses from scratch at
//! every step (or enumerates outright) instead of updating a working
//! inverse, so these routines share no solver path with the fast
//! implementations they check. They are O(d^4) or exponential by design.

use crate::error::{Error, Result};
use crate::hessian::invert_spd;
use crate::matrix::Matrix;
use crate::quant::{quantize_value, QuantGrid};
use crate::scalar::{cst, Scalar};

/// One exact greedy pruning step by full re-inversion: restrict H to the
/// surviving indices, invert, score every survivor, prune the best and apply
/// the compensating update. `zeroed[p]` marks already-pruned indices.
pub fn naive_obs_step<T: Scalar>(
    w: &[T],
    h: &Matrix<T>,
    zeroed: &[bool],
) -> Result<(usize, Vec<T>)> {
    let (p, _, updated) = naive_obs_step_scored(w, h, zeroed)?;
    Ok((p, updated))
}

fn naive_obs_step_scored<T: Scalar>(
    w: &[T],
    h: &Matrix<T>,
    zeroed: &[bool],
) -> Result<(usize, T, Vec<T>)> {
    naive_obs_step_restricted(w, h, zeroed, |_| true)
}

fn naive_obs_step_restricted<T: Scalar>(
    w: &[T],
    h: &Matrix<T>,
    zeroed: &[bool],
    mut allowed: impl FnMut(usize) -> bool,
) -> Result<(usize, T, Vec<T>)> {
    let survivors: Vec<usize> = (0..w.len()).filter(|&i| !zeroed[i]).collect();
    if survivors.is_empty() {
        return Err(Error::arg("no surviving weights to prune"));
    }
    let inv = invert_spd(&h.submatrix(&survivors))?;

    let mut best: Option<(usize, T)> = None;
    for (local, &global) in survivors.iter().enumerate() {
        if !allowed(global) {
            continue;
        }
        let score = w[global] * w[global] / inv.get(local, local);
        if best.is_none_or(|(_, s)| score < s) {
            best = Some((local, score));
        }
    }
    let (local_p, score) = best.ok_or_else(|| Error::arg("no allowed candidate"))?;
    let global_p = survivors[local_p];

    let coeff = w[global_p] / inv.get(local_p, local_p);
    let mut out = w.to_vec();
    for (local, &global) in survivors.iter().enumerate() {
        out[global] -= inv.get(local, local_p) * coeff;
    }
    out[global_p] = T::zero();
    Ok((global_p, score, out))
}

/// Iterate [`naive_obs_step`] `k` times, recording order and loss deltas.
pub fn naive_prune_trace<T: Scalar>(
    w: &[T],
    h: &Matrix<T>,
    k: usize,
) -> Result<(Vec<usize>, Vec<T>, Vec<T>)> {
    let mut row = w.to_vec();
    let mut zeroed = vec![false; w.len()];
    let mut order = Vec::with_capacity(k);
    let mut deltas = Vec::with_capacity(k);
    for _ in 0..k {
        let (p, score, updated) = naive_obs_step_scored(&row, h, &zeroed)?;
        row = updated;
        zeroed[p] = true;
        order.push(p);
        deltas.push(score);
    }
    Ok((order, deltas, row))
}

/// N:M pruning of one row by per-step re-inversion: candidates restricted
/// to blocks still holding fewer than m - n zeros, down to row sparsity
/// 1 - n/m.
pub fn naive_nm_trace<T: Scalar>(
    w: &[T],
    h: &Matrix<T>,
    n: usize,
    m: usize,
) -> Result<(Vec<usize>, Vec<T>, Vec<T>)> {
    let d = w.len();
    assert!(n < m && d.is_multiple_of(m));
    let per_block = m - n;
    let mut row = w.to_vec();
    let mut zeroed = vec![false; d];
    let mut zeros_in_block = vec![0usize; d / m];
    let mut order = Vec::new();
    let mut deltas = Vec::new();
    for _ in 0..per_block * (d / m) {
        let (p, score, updated) =
            naive_obs_step_restricted(&row, h, &zeroed, |g| zeros_in_block[g / m] < per_block)?;
        row = updated;
        zeroed[p] = true;
        zeros_in_block[p / m] += 1;
        order.push(p);
        deltas.push(score);
    }
    Ok((order, deltas, row))
}

/// Matrix-level exact greedy pruning: at every one of `k` steps, re-derive
/// each row's best candidate by full re-inversion and prune the global
/// minimum (ties: lowest row, then lowest column).
pub fn naive_prune_matrix<T: Scalar>(
    weights: &Matrix<T>,
    h: &Matrix<T>,
    k: usize,
) -> Result<Matrix<T>> {
    let (rows, d) = (weights.rows(), weights.cols());
    let mut out = weights.clone();
    let mut zeroed = vec![vec![false; d]; rows];

    for _ in 0..k {
        let mut best: Option<(T, usize)> = None;
        for r in 0..rows {
            if zeroed[r].iter().all(|&z| z) {
                continue;
            }
            let survivors: Vec<usize> = (0..d).filter(|&i| !zeroed[r][i]).collect();
            let inv = invert_spd(&h.submatrix(&survivors))?;
            for (local, &global) in survivors.iter().enumerate() {
                let wv = out.get(r, global);
                let score = wv * wv / inv.get(local, local);
                if best.is_none_or(|(s, _)| score < s) {
                    best = Some((score, r));
                }
            }
        }
        let (_, r) = best.ok_or_else(|| Error::arg("k exceeds available weights"))?;
        let row: Vec<T> = out.row(r).to_vec();
        let (p, updated) = naive_obs_step(&row, h, &zeroed[r])?;
        out.row_mut(r).copy_from_slice(&updated);
        zeroed[r][p] = true;
    }
    Ok(out)
}

/// Full-depth block pruning of one row by per-step re-inversion, mirroring
/// the contiguous-block solver.
pub fn naive_block_trace<T: Scalar>(
    w: &[T],
    h: &Matrix<T>,
    block_size: usize,
) -> Result<(Vec<usize>, Vec<T>, Vec<T>)> {
    let d = w.len();
    assert_eq!(d % block_size, 0);
    let n_blocks = d / block_size;
    let mut alive = vec![true; n_blocks];
    let mut row = w.to_vec();
    let mut order = Vec::new();
    let mut deltas = Vec::new();

    for _ in 0..n_blocks {
        let survivors: Vec<usize> = (0..d)
            .filter(|&i| alive[i / block_size])
            .collect();
        let inv = invert_spd(&h.submatrix(&survivors))?;
        let local_of = |global: usize| survivors.binary_search(&global).unwrap();

        let mut best: Option<(usize, T, Matrix<T>)> = None;
        for b in 0..n_blocks {
            if !alive[b] {
                continue;
            }
            let locals: Vec<usize> =
                (b * block_size..(b + 1) * block_size).map(local_of).collect();
            let sub_inv = invert_spd(&inv.submatrix(&locals))?;
            let mut score = T::zero();
            for (a, &la) in locals.iter().enumerate() {
                for (c, &lc) in locals.iter().enumerate() {
                    score += row[survivors[la]] * sub_inv.get(a, c) * row[survivors[lc]];
                }
            }
            if best.as_ref().is_none_or(|(_, s, _)| score < *s) {
                best = Some((b, score, sub_inv));
            }
        }
        let (b, score, sub_inv) = best.expect("alive block remains");
        let locals: Vec<usize> =
            (b * block_size..(b + 1) * block_size).map(local_of).collect();
        let v: Vec<T> = (0..block_size)
            .map(|a| {
                (0..block_size)
                    .map(|c| sub_inv.get(a, c) * row[survivors[locals[c]]])
                    .sum()
            })
            .collect();
        for (local, &global) in survivors.iter().enumerate() {
            let mut upd = T::zero();
            for (a, &la) in locals.iter().enumerate() {
                upd += inv.get(local, la) * v[a];
            }
            row[global] -= upd;
        }
        for p in b * block_size..(b + 1) * block_size {
            row[p] = T::zero();
        }
        alive[b] = false;
        order.push(b);
        deltas.push(score);
    }
    Ok((order, deltas, row))
}

/// Full-depth greedy quantization of one row by per-step re-inversion,
/// including the outlier rule.
pub fn naive_obq_trace<T: Scalar>(
    w: &[T],
    h: &Matrix<T>,
    grid: &QuantGrid<T>,
) -> Result<(Vec<usize>, Vec<T>, Vec<T>)> {
    let d = w.len();
    let mut row = w.to_vec();
    let mut frozen = vec![false; d];
    let mut order = Vec::with_capacity(d);
    let mut deltas = Vec::with_capacity(d);
    let half_step = grid.scale / cst(2.0);

    for _ in 0..d {
        let survivors: Vec<usize> = (0..d).filter(|&i| !frozen[i]).collect();
        let inv = invert_spd(&h.submatrix(&survivors))?;

        let mut pick: Option<(usize, T)> = None;
        for (local, &global) in survivors.iter().enumerate() {
            let err = quantize_value(row[global], grid) - row[global];
            if err.abs() > half_step && pick.is_none_or(|(_, e)| err.abs() > e.abs()) {
                pick = Some((local, err));
            }
        }
        let local_p = match pick {
            Some((local, _)) => local,
            None => {
                let mut best: Option<(usize, T)> = None;
                for (local, &global) in survivors.iter().enumerate() {
                    let err = quantize_value(row[global], grid) - row[global];
                    let score = err * err / inv.get(local, local);
                    if best.is_none_or(|(_, s)| score < s) {
                        best = Some((local, score));
                    }
                }
                best.expect("survivors nonempty").0
            }
        };

        let global_p = survivors[local_p];
        let target = quantize_value(row[global_p], grid);
        let err = target - row[global_p];
        deltas.push(err * err / inv.get(local_p, local_p));
        let coeff = (row[global_p] - target) / inv.get(local_p, local_p);
        for (local, &global) in survivors.iter().enumerate() {
            row[global] -= inv.get(local, local_p) * coeff;
        }
        row[global_p] = target;
        frozen[global_p] = true;
        order.push(global_p);
    }
    Ok((order, deltas, row))
}

/// Least-squares reconstruction of one row under a fixed zero set: entries
/// in `mask` are zero, survivors solve the plain normal equations on the
/// calibration inputs. This is the optimal row for the given support.
pub fn least_squares_on_support<T: Scalar>(
    w: &[T],
    inputs: &Matrix<T>,
    mask: &[usize],
) -> Result<Vec<T>> {
    let d = w.len();
    if inputs.rows() != d {
        return Err(Error::shape("row length vs calibration inputs"));
    }
    let n = inputs.cols();
    let support: Vec<usize> = (0..d).filter(|i| !mask.contains(i)).collect();
    let mut out = vec![T::zero(); d];
    if support.is_empty() {
        return Ok(out);
    }
    let target: Vec<T> = (0..n)
        .map(|s| (0..d).map(|j| w[j] * inputs.get(j, s)).sum())
        .collect();
    let gram = inputs.submatrix_gram(&support);
    let inv = invert_spd(&gram)?;
    let rhs: Vec<T> = support
        .iter()
        .map(|&j| (0..n).map(|s| inputs.get(j, s) * target[s]).sum())
        .collect();
    for (a, &j) in support.iter().enumerate() {
        out[j] = (0..support.len()).map(|b| inv.get(a, b) * rhs[b]).sum();
    }
    Ok(out)
}

const ENUM_LIMIT: u64 = 1_000_000;

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k.min(n));
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    acc
}

/// Globally optimal mask for pruning `k` weights of one row: enumerate all
/// index subsets, solve least squares on each surviving support, return the
/// minimum-loss mask and its loss ||wX - what X||^2.
pub fn exhaustive_mask<T: Scalar>(
    w: &[T],
    inputs: &Matrix<T>,
    k: usize,
) -> Result<(Vec<usize>, T)> {
    let d = w.len();
    if inputs.rows() != d {
        return Err(Error::shape("row length vs calibration inputs"));
    }
    if k > d {
        return Err(Error::arg(format!("cannot prune {k} of {d} weights")));
    }
    let count = binomial(d, k);
    if count > ENUM_LIMIT as u128 {
        return Err(Error::EnumerationLimit(count, ENUM_LIMIT));
    }

    let n = inputs.cols();
    let target: Vec<T> = (0..n)
        .map(|s| (0..d).map(|j| w[j] * inputs.get(j, s)).sum())
        .collect();

    let loss_for_support = |support: &[usize]| -> Result<T> {
        if support.is_empty() {
            return Ok(target.iter().map(|&t| t * t).sum());
        }
        // Normal equations on the support: (X_S X_S^T) a = X_S y^T.
        let gram = inputs.submatrix_gram(support);
        let inv = invert_spd(&gram)?;
        let rhs: Vec<T> = support
            .iter()
            .map(|&j| (0..n).map(|s| inputs.get(j, s) * target[s]).sum())
            .collect();
        let coef: Vec<T> = (0..support.len())
            .map(|a| (0..support.len()).map(|b| inv.get(a, b) * rhs[b]).sum())
            .collect();
        let mut loss = T::zero();
        for s in 0..n {
            let fit: T = support
                .iter()
                .zip(&coef)
                .map(|(&j, &c)| c * inputs.get(j, s))
                .sum();
            let r = fit - target[s];
            loss += r * r;
        }
        Ok(loss)
    };

    let mut best_mask: Option<Vec<usize>> = None;
    let mut best_loss = T::infinity();
    let mut visit = |mask: &[usize]| -> Result<()> {
        let support: Vec<usize> = (0..d).filter(|i| !mask.contains(i)).collect();
        let loss = loss_for_support(&support)?;
        if loss < best_loss {
            best_loss = loss;
            best_mask = Some(mask.to_vec());
        }
        Ok(())
    };

    if k == 0 {
        visit(&[])?;
    } else {
        let mut mask: Vec<usize> = (0..k).collect();
        loop {
            visit(&mask)?;
            // Advance to the next k-combination of 0..d.
            let mut i = k;
            loop {
                if i == 0 {
                    return Ok((best_mask.unwrap(), best_loss));
                }
                i -= 1;
                if mask[i] != i + d - k {
                    break;
                }
            }
            mask[i] += 1;
            for j in i + 1..k {
                mask[j] = mask[j - 1] + 1;
            }
        }
    }
    Ok((best_mask.unwrap(), best_loss))
}

use crate::allocator::{AllocationPlan, CompressionDatabase, PlanEntry};

/// Optimal allocation by full enumeration over level combinations, using
/// true (undiscretized) costs.
pub fn exhaustive_allocate(db: &CompressionDatabase, budget: f64) -> Result<AllocationPlan> {
    db.validate()?;
    let combos: u128 = db
        .layers
        .iter()
        .map(|l| l.levels.len() as u128)
        .product();
    if combos > ENUM_LIMIT as u128 {
        return Err(Error::EnumerationLimit(combos, ENUM_LIMIT));
    }

    let mut idx = vec![0usize; db.layers.len()];
    let mut best: Option<(f64, f64, Vec<usize>)> = None;
    loop {
        let mut cost = 0.0;
        let mut loss = 0.0;
        for (layer, &i) in db.layers.iter().zip(&idx) {
            cost += layer.levels[i].cost;
            loss += layer.levels[i].loss;
        }
        if cost <= budget && best.as_ref().is_none_or(|(l, _, _)| loss < *l) {
            best = Some((loss, cost, idx.clone()));
        }
        // Mixed-radix increment.
        let mut pos = idx.len();
        loop {
            if pos == 0 {
                let (total_loss, total_cost, pick) = best.ok_or({
                    let min_cost: f64 = db
                        .layers
                        .iter()
                        .map(|l| {
                            l.levels.iter().map(|lv| lv.cost).fold(f64::INFINITY, f64::min)
                        })
                        .sum();
                    Error::InfeasibleBudget { budget, min_cost }
                })?;
                let assignments = db
                    .layers
                    .iter()
                    .zip(&pick)
                    .map(|(layer, &i)| PlanEntry {
                        layer: layer.name.clone(),
                        label: layer.levels[i].label.clone(),
                    })
                    .collect();
                return Ok(AllocationPlan {
                    assignments,
                    total_cost,
                    total_loss,
                });
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < db.layers[pos].levels.len() {
                break;
            }
            idx[pos] = 0;
        }
    }
}

impl<T: Scalar> Matrix<T> {
    /// Gram matrix of the selected rows: G[a][b] = <row a, row b>.
    fn submatrix_gram(&self, rows: &[usize]) -> Matrix<T> {
        let k = rows.len();
        let mut g = Matrix::zeros(k, k);
        for (a, &ra) in rows.iter().enumerate() {
            for (b, &rb) in rows.iter().enumerate().skip(a) {
                let dot: T = self
                    .row(ra)
                    .iter()
                    .zip(self.row(rb))
                    .map(|(&x, &y)| x * y)
                    .sum();
                g.set(a, b, dot);
                g.set(b, a, dot);
            }
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocator::{CompressionLevel, LayerLevels};
    use crate::hessian::{compute_hessian, Damp};

    #[test]
    fn naive_step_diagonal_example() {
        let h = Matrix::from_diag(&[2.0, 2.0]);
        let (p, w) = naive_obs_step(&[3.0, 1.0], &h, &[false, false]).unwrap();
        assert_eq!(p, 1);
        assert_eq!(w, vec![3.0, 0.0]);
    }

    #[test]
    fn naive_trace_leaves_surviving_weights_optimal() {
        let mut v = 0.47_f64;
        let xdata: Vec<f64> = (0..6 * 24)
            .map(|_| {
                v = (v * 301.0 + 0.13).sin();
                v
            })
            .collect();
        let x = Matrix::new(6, 24, xdata).unwrap();
        let h = compute_hessian(&x, Damp::Value(0.0));
        let w: Vec<f64> = (0..6)
            .map(|_| {
                v = (v * 41.0 + 0.9).sin();
                v
            })
            .collect();
        let (order, _, pruned) = naive_prune_trace(&w, &h, 3).unwrap();

        // Gradient (what - w) H restricted to survivors vanishes.
        let scale = h.max_abs() * w.iter().map(|&a| a * a).sum::<f64>().sqrt();
        for j in 0..6 {
            if order.contains(&j) {
                continue;
            }
            let g: f64 = (0..6).map(|i| (pruned[i] - w[i]) * h.get(i, j)).sum();
            assert!(g.abs() < 1e-9 * scale.max(1.0), "gradient {g} at {j}");
        }
    }

    #[test]
    fn exhaustive_mask_trivial_cases() {
        let x = Matrix::<f64>::identity(2);
        let (mask, loss) = exhaustive_mask(&[3.0, 1.0], &x, 0).unwrap();
        assert!(mask.is_empty());
        assert_eq!(loss, 0.0);

        // Pruning one of two weights under identity inputs: drop the small
        // one, pay its squared value.
        let (mask, loss) = exhaustive_mask(&[3.0, 1.0], &x, 1).unwrap();
        assert_eq!(mask, vec![1]);
        assert!((loss - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exhaustive_mask_never_beaten_by_greedy() {
        let mut v = 0.59_f64;
        let xdata: Vec<f64> = (0..10 * 40)
            .map(|_| {
                v = (v * 211.0 + 0.77).sin();
                v
            })
            .collect();
        let x = Matrix::new(10, 40, xdata).unwrap();
        let h = compute_hessian(&x, Damp::Value(0.0));
        let w: Vec<f64> = (0..10)
            .map(|_| {
                v = (v * 31.0 + 0.3).sin();
                v
            })
            .collect();

        let (_, _, greedy_row) = naive_prune_trace(&w, &h, 5).unwrap();
        let greedy_loss: f64 = {
            let mut loss = 0.0;
            for s in 0..40 {
                let r: f64 = (0..10).map(|j| (greedy_row[j] - w[j]) * x.get(j, s)).sum();
                loss += r * r;
            }
            loss
        };
        let (_, optimal_loss) = exhaustive_mask(&w, &x, 5).unwrap();
        assert!(greedy_loss >= optimal_loss - 1e-9);
    }

    #[test]
    fn exhaustive_mask_respects_limit() {
        let x = Matrix::<f64>::identity(50);
        let w = vec![1.0; 50];
        assert!(matches!(
            exhaustive_mask(&w, &x, 25),
            Err(Error::EnumerationLimit(..))
        ));
    }

    fn small_db() -> CompressionDatabase {
        let level = |label: &str, loss: f64, cost: f64| CompressionLevel {
            label: label.into(),
            weights: std::path::PathBuf::from("x.npy"),
            loss,
            cost,
            grid: None,
        };
        CompressionDatabase {
            layers: vec![
                LayerLevels {
                    name: "a".into(),
                    levels: vec![level("identity", 0.0, 4.0), level("s", 2.0, 1.0)],
                },
                LayerLevels {
                    name: "b".into(),
                    levels: vec![level("identity", 0.0, 6.0), level("s", 3.0, 2.0)],
                },
            ],
        }
    }

    #[test]
    fn exhaustive_allocate_single_and_infeasible() {
        let db = small_db();
        let plan = exhaustive_allocate(&db, 10.0).unwrap();
        assert_eq!(plan.total_loss, 0.0);
        let plan = exhaustive_allocate(&db, 7.0).unwrap();
        assert_eq!(plan.total_loss, 2.0); // a compressed, b identity
        assert!(matches!(
            exhaustive_allocate(&db, 2.0),
            Err(Error::InfeasibleBudget { .. })
        ));
    }
}
