//! Exact greedy second-order pruning of weight matrices.
//!
//! Per row: repeatedly remove the weight whose removal least increases the
//! quadratic layer loss, compensate all survivors through the inverse
//! Hessian, and keep the inverse in sync by row/column elimination. Rows are
//! independent, so the layer-level solvers run them in parallel against a
//! shared read-only inverse template and combine the per-row loss ledgers in
//! a final sequential selection step.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hessian::{accumulate_hessian, invert_spd, Damp, InverseHessianState};
use crate::matrix::{LayerProblem, Matrix};
use crate::scalar::{cst, Scalar};

/// Pruning order and loss increments of one row, optionally with the full
/// weight vector after every step.
///
/// Deltas are on the 2XX^T Hessian scale: halve their sum to get the change
/// in squared error (see [`RowTrace::squared_error`]).
#[derive(Debug, Clone)]
pub struct RowTrace<T> {
    pub order: Vec<usize>,
    pub deltas: Vec<T>,
    pub snapshots: Option<Vec<Vec<T>>>,
}

impl<T: Scalar> RowTrace<T> {
    fn new(record_snapshots: bool) -> Self {
        RowTrace {
            order: Vec::new(),
            deltas: Vec::new(),
            snapshots: record_snapshots.then(Vec::new),
        }
    }

    fn push(&mut self, index: usize, delta: T, row: &[T]) {
        self.order.push(index);
        self.deltas.push(delta);
        if let Some(snaps) = &mut self.snapshots {
            snaps.push(row.to_vec());
        }
    }

    /// Squared-error change accounted by the first `steps` entries.
    pub fn squared_error(&self, steps: usize) -> T {
        self.deltas[..steps].iter().copied().sum::<T>() / cst(2.0)
    }

    pub fn into_ledger(self) -> RowLedger<T> {
        RowLedger {
            order: self.order,
            deltas: self.deltas,
        }
    }
}

/// Serializable per-row record of pruned/quantized indices and their loss
/// increments, in execution order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RowLedger<T> {
    pub order: Vec<usize>,
    pub deltas: Vec<T>,
}

/// Per-row ledgers for a whole layer; the input of global mask selection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossLedger<T> {
    pub rows: Vec<RowLedger<T>>,
}

impl<T: Scalar> LossLedger<T> {
    pub fn total_entries(&self) -> usize {
        self.rows.iter().map(|r| r.order.len()).sum()
    }

    /// Sum of all recorded deltas, converted to squared-error units.
    pub fn accounted_squared_error(&self) -> T {
        let raw: T = self
            .rows
            .iter()
            .map(|r| r.deltas.iter().copied().sum::<T>())
            .sum();
        raw / cst(2.0)
    }
}

/// Sparsity pattern requested from the layer-level solvers.
#[derive(Debug, Clone, PartialEq)]
pub enum SparsityTarget {
    Unstructured(SparsityAmount),
    /// Exactly `n` nonzeros in every block of `m` consecutive weights.
    Nm { n: usize, m: usize },
    /// Zeros only in aligned contiguous groups of `block_size` weights.
    Block { block_size: usize, sparsity: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SparsityAmount {
    Fraction(f64),
    Count(usize),
}

impl SparsityAmount {
    pub fn resolve(self, total: usize) -> Result<usize> {
        match self {
            SparsityAmount::Fraction(f) => {
                if !(0.0..1.0).contains(&f) {
                    return Err(Error::arg(format!("sparsity fraction {f} not in [0, 1)")));
                }
                Ok((f * total as f64).round() as usize)
            }
            SparsityAmount::Count(k) => {
                if k > total {
                    return Err(Error::arg(format!("prune count {k} exceeds {total} weights")));
                }
                Ok(k)
            }
        }
    }
}

/// How the final weights are materialized after global mask selection:
/// reload the stored per-step snapshots (more memory) or rebuild each row
/// from the group update formula (more compute).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Materialize {
    Trace,
    Recompute,
}

impl std::str::FromStr for Materialize {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "trace" => Ok(Materialize::Trace),
            "recompute" => Ok(Materialize::Recompute),
            other => Err(format!("unknown materialization mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PruneOptions {
    pub materialize: Materialize,
    /// Trace mode falls back to recompute when the estimated snapshot
    /// storage exceeds this cap.
    pub snapshot_cap_bytes: usize,
    /// Compact already-sparse rows to their nonzero support before solving,
    /// so per-row cost scales with density cubed.
    pub compact_sparse: bool,
}

impl Default for PruneOptions {
    fn default() -> Self {
        PruneOptions {
            materialize: Materialize::Recompute,
            snapshot_cap_bytes: 1 << 30,
            compact_sparse: false,
        }
    }
}

/// One greedy OBS step restricted to `allowed` candidates: pick the active
/// index minimizing w_p^2 / [H^-1]_pp (lowest index on ties), apply the
/// compensating update to the whole row, eliminate the index.
///
/// Returns `None` when no allowed candidate is active.
fn obs_step<T: Scalar>(
    w: &mut [T],
    state: &mut InverseHessianState<T>,
    mut allowed: impl FnMut(usize) -> bool,
) -> Result<Option<(usize, T)>> {
    let mut best: Option<(usize, T)> = None;
    for p in state.active_indices() {
        if !allowed(p) {
            continue;
        }
        let score = w[p] * w[p] / state.diag(p);
        if best.is_none_or(|(_, s)| score < s) {
            best = Some((p, score));
        }
    }
    let Some((p, delta)) = best else {
        return Ok(None);
    };

    let coeff = w[p] / state.diag(p);
    let col = state.column(p);
    for (wj, &cj) in w.iter_mut().zip(col.iter()) {
        *wj -= cj * coeff;
    }
    w[p] = T::zero(); // kill round-off so pruned entries are exact zeros
    state.eliminate(p)?;
    Ok(Some((p, delta)))
}

/// Prune `k` weights from one row, recording order and loss increments.
/// `state` must be freshly initialized from the dampened Hessian inverse.
pub fn prune_row<T: Scalar>(
    w: &[T],
    state: &mut InverseHessianState<T>,
    k: usize,
    record_snapshots: bool,
) -> Result<(RowTrace<T>, Vec<T>)> {
    if w.len() != state.dim() {
        return Err(Error::shape(format!(
            "row of length {} against {}-dim inverse state",
            w.len(),
            state.dim()
        )));
    }
    if k > state.active_count() {
        return Err(Error::arg(format!(
            "cannot prune {k} of {} active weights",
            state.active_count()
        )));
    }
    let mut row = w.to_vec();
    let mut trace = RowTrace::new(record_snapshots);
    for _ in 0..k {
        match obs_step(&mut row, state, |_| true)? {
            Some((p, delta)) => trace.push(p, delta, &row),
            None => break,
        }
    }
    Ok((trace, row))
}

/// Prune whole blocks of `block_size` contiguous weights from one row, up to
/// `max_blocks` of them. Block score is w_P^T ((H^-1)_P)^-1 w_P; the update
/// subtracts H^-1[:,P] ((H^-1)_P)^-1 w_P and the block members are then
/// eliminated one by one.
pub fn prune_row_blocks<T: Scalar>(
    w: &[T],
    state: &mut InverseHessianState<T>,
    block_size: usize,
    max_blocks: usize,
    record_snapshots: bool,
) -> Result<(RowTrace<T>, Vec<T>)> {
    let d = state.dim();
    if w.len() != d {
        return Err(Error::shape("row length vs inverse state"));
    }
    if block_size == 0 || !d.is_multiple_of(block_size) {
        return Err(Error::arg(format!(
            "block size {block_size} does not divide {d}"
        )));
    }
    let n_blocks = d / block_size;
    let mut alive = vec![true; n_blocks];
    let mut row = w.to_vec();
    let mut trace = RowTrace::new(record_snapshots);

    for _ in 0..max_blocks.min(n_blocks) {
        let mut best: Option<(usize, T, Matrix<T>)> = None;
        for b in 0..n_blocks {
            if !alive[b] {
                continue;
            }
            let idx: Vec<usize> = (b * block_size..(b + 1) * block_size).collect();
            let sub_inv = invert_spd(&state.matrix().submatrix(&idx))?;
            let mut score = T::zero();
            for (a, &pa) in idx.iter().enumerate() {
                for (c, &pc) in idx.iter().enumerate() {
                    score += row[pa] * sub_inv.get(a, c) * row[pc];
                }
            }
            if best.as_ref().is_none_or(|(_, s, _)| score < *s) {
                best = Some((b, score, sub_inv));
            }
        }
        let Some((b, delta, sub_inv)) = best else {
            break;
        };

        let idx: Vec<usize> = (b * block_size..(b + 1) * block_size).collect();
        let v: Vec<T> = (0..block_size)
            .map(|a| {
                (0..block_size)
                    .map(|c| sub_inv.get(a, c) * row[idx[c]])
                    .sum()
            })
            .collect();
        for j in 0..d {
            let mut upd = T::zero();
            for (a, &pa) in idx.iter().enumerate() {
                upd += state.matrix().get(j, pa) * v[a];
            }
            row[j] -= upd;
        }
        for &p in &idx {
            row[p] = T::zero();
            state.eliminate(p)?;
        }
        alive[b] = false;
        trace.push(b, delta, &row);
    }
    Ok((trace, row))
}

/// Global mask selection: repeatedly pop the row whose next loss increment
/// is smallest until `k` weights are chosen; returns per-row pruned counts.
pub fn select_global_mask<T: Scalar>(ledger: &LossLedger<T>, k: usize) -> Result<Vec<usize>> {
    let total = ledger.total_entries();
    if k > total {
        return Err(Error::arg(format!(
            "cannot select {k} weights from {total} ledger entries"
        )));
    }

    struct Next<T> {
        delta: T,
        row: usize,
    }
    impl<T: Scalar> PartialEq for Next<T> {
        fn eq(&self, other: &Self) -> bool {
            self.cmp(other) == Ordering::Equal
        }
    }
    impl<T: Scalar> Eq for Next<T> {}
    impl<T: Scalar> PartialOrd for Next<T> {
        fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
            Some(self.cmp(other))
        }
    }
    impl<T: Scalar> Ord for Next<T> {
        fn cmp(&self, other: &Self) -> Ordering {
            // Deltas are finite; ties go to the lower row index.
            self.delta
                .partial_cmp(&other.delta)
                .unwrap_or(Ordering::Equal)
                .then(self.row.cmp(&other.row))
        }
    }

    let mut counts = vec![0usize; ledger.rows.len()];
    let mut heap: BinaryHeap<std::cmp::Reverse<Next<T>>> = ledger
        .rows
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.deltas.is_empty())
        .map(|(i, r)| {
            std::cmp::Reverse(Next {
                delta: r.deltas[0],
                row: i,
            })
        })
        .collect();

    for _ in 0..k {
        let std::cmp::Reverse(next) = heap.pop().expect("k <= total entries");
        let row = next.row;
        counts[row] += 1;
        if let Some(&delta) = ledger.rows[row].deltas.get(counts[row]) {
            heap.push(std::cmp::Reverse(Next { delta, row }));
        }
    }
    Ok(counts)
}

/// Closed-form group update: returns
/// w - H^-1[:,mask] ((H^-1)_mask)^-1 w_mask, with the masked entries snapped
/// to exact zero. `h_inv` is the fresh (uneliminated) inverse Hessian.
pub fn group_obs_reconstruct<T: Scalar>(
    w: &[T],
    h_inv: &Matrix<T>,
    mask: &[usize],
) -> Result<Vec<T>> {
    if mask.is_empty() {
        return Err(Error::arg("group update needs a nonempty mask"));
    }
    let sub_inv = invert_spd(&h_inv.submatrix(mask))?;
    let k = mask.len();
    let v: Vec<T> = (0..k)
        .map(|a| (0..k).map(|c| sub_inv.get(a, c) * w[mask[c]]).sum())
        .collect();

    let mut out = w.to_vec();
    for (j, oj) in out.iter_mut().enumerate() {
        let mut upd = T::zero();
        for (a, &pa) in mask.iter().enumerate() {
            upd += h_inv.get(j, pa) * v[a];
        }
        *oj -= upd;
    }
    for &p in mask {
        out[p] = T::zero();
    }
    Ok(out)
}

struct RowSolve<T> {
    trace: RowTrace<T>,
}

/// Full-depth per-row solve, optionally compacting the row to its nonzero
/// support first. Compacted rows report their pre-existing zeros as leading
/// zero-delta prunes, matching what the dense path does organically.
fn solve_row_full<T: Scalar>(
    row: &[T],
    h: &Matrix<T>,
    inv_template: &Matrix<T>,
    snapshots: bool,
    compact: bool,
) -> Result<RowSolve<T>> {
    let d = row.len();
    let support: Vec<usize> = (0..d).filter(|&j| row[j] != T::zero()).collect();

    if compact && support.len() < d {
        let mut trace = RowTrace::new(snapshots);
        let mut dense_row = row.to_vec();
        for j in 0..d {
            if row[j] == T::zero() {
                trace.push(j, T::zero(), &dense_row);
            }
        }
        if !support.is_empty() {
            let sub_inv = invert_spd(&h.submatrix(&support))?;
            let mut state = InverseHessianState::new(sub_inv);
            let w_sub: Vec<T> = support.iter().map(|&j| row[j]).collect();
            let (sub_trace, _) = prune_row(&w_sub, &mut state, support.len(), snapshots)?;
            for (step, (&local, &delta)) in
                sub_trace.order.iter().zip(&sub_trace.deltas).enumerate()
            {
                let global = support[local];
                if let Some(snaps) = &sub_trace.snapshots {
                    for (&g, &v) in support.iter().zip(&snaps[step]) {
                        dense_row[g] = v;
                    }
                }
                trace.push(global, delta, &dense_row);
            }
        }
        return Ok(RowSolve { trace });
    }

    let mut state = InverseHessianState::new(inv_template.clone());
    let (trace, _) = prune_row(row, &mut state, d, snapshots)?;
    Ok(RowSolve { trace })
}

/// Unstructured pruning of a whole layer: full per-row traces, global mask
/// selection over the combined ledgers, then materialization of the chosen
/// prefix per row. Returns the compressed weights and the realized (applied)
/// per-row ledger.
pub fn prune_unstructured<T: Scalar>(
    problem: &LayerProblem<T>,
    target: &SparsityTarget,
    damp: Damp,
    opts: &PruneOptions,
) -> Result<(Matrix<T>, LossLedger<T>)> {
    let SparsityTarget::Unstructured(amount) = target else {
        return Err(Error::arg("prune_unstructured needs an unstructured target"));
    };
    let (n_rows, d) = (problem.d_row(), problem.d_col());
    let k_total = amount.resolve(n_rows * d)?;
    if k_total == 0 {
        return Ok((
            problem.weights.clone(),
            LossLedger {
                rows: vec![
                    RowLedger {
                        order: vec![],
                        deltas: vec![]
                    };
                    n_rows
                ],
            },
        ));
    }

    let h = accumulate_hessian(&[&problem.inputs], damp);
    let inv = invert_spd(&h)?;

    let snapshot_bytes = n_rows
        .saturating_mul(d)
        .saturating_mul(d)
        .saturating_mul(std::mem::size_of::<T>());
    let use_trace =
        opts.materialize == Materialize::Trace && snapshot_bytes <= opts.snapshot_cap_bytes;

    let solves: Vec<RowSolve<T>> = (0..n_rows)
        .into_par_iter()
        .map(|i| solve_row_full(problem.weights.row(i), &h, &inv, use_trace, opts.compact_sparse))
        .collect::<Result<Vec<_>>>()?;

    let full_ledger = LossLedger {
        rows: solves
            .iter()
            .map(|s| RowLedger {
                order: s.trace.order.clone(),
                deltas: s.trace.deltas.clone(),
            })
            .collect(),
    };
    let counts = select_global_mask(&full_ledger, k_total)?;

    let mut out = problem.weights.clone();
    for (i, solve) in solves.iter().enumerate() {
        let c = counts[i];
        if c == 0 {
            continue;
        }
        let materialized = if use_trace {
            solve.trace.snapshots.as_ref().expect("trace mode")[c - 1].clone()
        } else {
            group_obs_reconstruct(problem.weights.row(i), &inv, &solve.trace.order[..c])?
        };
        out.row_mut(i).copy_from_slice(&materialized);
    }

    let realized = LossLedger {
        rows: solves
            .iter()
            .zip(&counts)
            .map(|(s, &c)| RowLedger {
                order: s.trace.order[..c].to_vec(),
                deltas: s.trace.deltas[..c].to_vec(),
            })
            .collect(),
    };
    Ok((out, realized))
}

/// N:M semi-structured pruning: per row, greedy pruning restricted to blocks
/// that still have fewer than m-n zeros, stopping at row sparsity 1 - n/m.
/// Every row ends with exactly n nonzeros per m-block; there is no global
/// selection step.
pub fn prune_nm<T: Scalar>(
    problem: &LayerProblem<T>,
    n: usize,
    m: usize,
    damp: Damp,
) -> Result<(Matrix<T>, LossLedger<T>)> {
    let d = problem.d_col();
    if n == 0 || n >= m {
        return Err(Error::arg(format!("n:m pattern needs 0 < n < m, got {n}:{m}")));
    }
    if !d.is_multiple_of(m) {
        return Err(Error::arg(format!("m = {m} does not divide d_col = {d}")));
    }
    let per_block = m - n;
    let prunes_per_row = per_block * (d / m);

    let h = accumulate_hessian(&[&problem.inputs], damp);
    let inv = invert_spd(&h)?;

    let rows: Vec<(RowTrace<T>, Vec<T>)> = (0..problem.d_row())
        .into_par_iter()
        .map(|i| {
            let mut state = InverseHessianState::new(inv.clone());
            let mut row = problem.weights.row(i).to_vec();
            let mut zeros_in_block = vec![0usize; d / m];
            let mut trace = RowTrace::new(false);
            for _ in 0..prunes_per_row {
                let step = obs_step(&mut row, &mut state, |p| zeros_in_block[p / m] < per_block)?;
                let (p, delta) = step.expect("open block always remains until target sparsity");
                zeros_in_block[p / m] += 1;
                trace.push(p, delta, &row);
            }
            Ok((trace, row))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut out = problem.weights.clone();
    let mut ledger = LossLedger { rows: Vec::new() };
    for (i, (trace, row)) in rows.into_iter().enumerate() {
        out.row_mut(i).copy_from_slice(&row);
        ledger.rows.push(trace.into_ledger());
    }
    Ok((out, ledger))
}

/// Block pruning: per row, greedily remove minimum-score contiguous blocks
/// of `block_size` weights to full depth, then select globally over the
/// block ledgers and materialize through the group update formula.
pub fn prune_block<T: Scalar>(
    problem: &LayerProblem<T>,
    block_size: usize,
    sparsity: f64,
    damp: Damp,
) -> Result<(Matrix<T>, LossLedger<T>)> {
    let d = problem.d_col();
    if block_size == 0 || !d.is_multiple_of(block_size) {
        return Err(Error::arg(format!(
            "block size {block_size} does not divide d_col = {d}"
        )));
    }
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::arg(format!("sparsity {sparsity} not in [0, 1)")));
    }
    let blocks_per_row = d / block_size;
    let total_blocks = problem.d_row() * blocks_per_row;
    let k_blocks = (sparsity * total_blocks as f64).round() as usize;

    let h = accumulate_hessian(&[&problem.inputs], damp);
    let inv = invert_spd(&h)?;

    let traces: Vec<RowTrace<T>> = (0..problem.d_row())
        .into_par_iter()
        .map(|i| {
            let mut state = InverseHessianState::new(inv.clone());
            let (trace, _) = prune_row_blocks(
                problem.weights.row(i),
                &mut state,
                block_size,
                blocks_per_row,
                false,
            )?;
            Ok(trace)
        })
        .collect::<Result<Vec<_>>>()?;

    let full_ledger = LossLedger {
        rows: traces
            .iter()
            .map(|t| RowLedger {
                order: t.order.clone(),
                deltas: t.deltas.clone(),
            })
            .collect(),
    };
    let counts = select_global_mask(&full_ledger, k_blocks)?;

    let mut out = problem.weights.clone();
    for (i, trace) in traces.iter().enumerate() {
        let c = counts[i];
        if c == 0 {
            continue;
        }
        let mask: Vec<usize> = trace.order[..c]
            .iter()
            .flat_map(|&b| b * block_size..(b + 1) * block_size)
            .collect();
        let row = group_obs_reconstruct(problem.weights.row(i), &inv, &mask)?;
        out.row_mut(i).copy_from_slice(&row);
    }

    let realized = LossLedger {
        rows: traces
            .iter()
            .zip(&counts)
            .map(|(t, &c)| RowLedger {
                order: t.order[..c].to_vec(),
                deltas: t.deltas[..c].to_vec(),
            })
            .collect(),
    };
    Ok((out, realized))
}

/// Dispatch a sparsity target to the matching solver.
pub fn compress_sparse<T: Scalar>(
    problem: &LayerProblem<T>,
    target: &SparsityTarget,
    damp: Damp,
    opts: &PruneOptions,
) -> Result<(Matrix<T>, LossLedger<T>)> {
    match target {
        SparsityTarget::Unstructured(_) => prune_unstructured(problem, target, damp, opts),
        SparsityTarget::Nm { n, m } => prune_nm(problem, *n, *m, damp),
        SparsityTarget::Block {
            block_size,
            sparsity,
        } => prune_block(problem, *block_size, *sparsity, damp),
    }
}
