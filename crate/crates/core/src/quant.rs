//! Per-row uniform quantization grids and the greedy second-order quantizer.
//!
//! The quantizer is the pruning solver with the removal target generalized
//! from zero to the nearest grid point: pick the weight whose rounding hurts
//! least, round it, compensate the still-free weights, eliminate it from the
//! working inverse. An outlier rule quantizes weights whose rounding error
//! exceeds half a grid step as soon as they appear, while enough free
//! weights remain to absorb the error.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hessian::{accumulate_hessian, invert_spd, Damp, InverseHessianState};
use crate::matrix::{LayerProblem, Matrix};
use crate::scalar::{cst, Scalar};
use crate::sparse::{LossLedger, RowLedger, RowTrace};

/// Uniform per-row quantization grid. Representable values are
/// `scale * (q - zero_point)` for the 2^bits integers `q` of the chosen
/// range; symmetric grids have `zero_point == 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantGrid<T> {
    pub scale: T,
    pub zero_point: i64,
    pub bits: u32,
    pub symmetric: bool,
}

impl<T: Scalar> QuantGrid<T> {
    /// Degenerate grid used for all-zero rows.
    pub fn degenerate(bits: u32, symmetric: bool) -> Self {
        QuantGrid {
            scale: T::one(),
            zero_point: 0,
            bits,
            symmetric,
        }
    }

    /// A grid whose quantization function is identically zero: every value
    /// rounds and clamps to the zero level. Quantizing on this grid recovers
    /// pruning exactly.
    pub fn all_zero() -> Self {
        QuantGrid {
            scale: cst(1e300),
            zero_point: 0,
            bits: 2,
            symmetric: false,
        }
    }
}

/// Round onto the grid: scale, round half away from zero, clamp to the
/// representable integer range, map back.
pub fn quantize_value<T: Scalar>(w: T, g: &QuantGrid<T>) -> T {
    let scaled = (w / g.scale).round();
    if g.symmetric {
        let qmin = -cst::<T>((1u64 << (g.bits - 1)) as f64);
        let qmax = cst::<T>((1u64 << (g.bits - 1)) as f64 - 1.0);
        g.scale * scaled.max(qmin).min(qmax)
    } else {
        let z = cst::<T>(g.zero_point as f64);
        let qmax = cst::<T>((1u64 << g.bits) as f64 - 1.0);
        let q = (scaled + z).max(T::zero()).min(qmax);
        g.scale * (q - z)
    }
}

fn grid_from_range<T: Scalar>(lo: T, hi: T, bits: u32, symmetric: bool) -> QuantGrid<T> {
    if symmetric {
        let qmax = cst::<T>((1u64 << (bits - 1)) as f64 - 1.0);
        let scale = hi / qmax; // hi carries max|w| here
        QuantGrid {
            scale,
            zero_point: 0,
            bits,
            symmetric,
        }
    } else {
        let levels = cst::<T>((1u64 << bits) as f64 - 1.0);
        let span = hi - lo;
        let scale = if span > T::zero() {
            span / levels
        } else {
            // Constant row: any scale hitting the value exactly works.
            lo.abs().max(hi.abs())
        };
        let zp = (-(lo / scale)).round();
        let zp = zp
            .max(T::zero())
            .min(levels)
            .to_i64()
            .unwrap_or(0);
        QuantGrid {
            scale,
            zero_point: zp,
            bits,
            symmetric,
        }
    }
}

/// Fit a grid to a row by searching 128 clipping ratios r in [0.5, 1.0]
/// applied to max|w| (symmetric) or to (min w, max w) (asymmetric), keeping
/// the grid with the smallest round-off MSE; ties go to the larger scale.
pub fn fit_grid<T: Scalar>(w: &[T], bits: u32, symmetric: bool) -> QuantGrid<T> {
    assert!((2..=32).contains(&bits), "bits must be in 2..=32");
    if w.iter().all(|&v| v == T::zero()) {
        return QuantGrid::degenerate(bits, symmetric);
    }

    let max_abs = w.iter().fold(T::zero(), |m, &v| m.max(v.abs()));
    let min_w = w.iter().fold(T::infinity(), |m, &v| m.min(v));
    let max_w = w.iter().fold(T::neg_infinity(), |m, &v| m.max(v));

    let mut best: Option<(QuantGrid<T>, T)> = None;
    for i in 0..128u32 {
        let r = cst::<T>(0.5) + cst::<T>(0.5) * cst::<T>(i as f64) / cst::<T>(127.0);
        let grid = if symmetric {
            grid_from_range(T::zero(), r * max_abs, bits, true)
        } else {
            grid_from_range(r * min_w, r * max_w, bits, false)
        };
        if !(grid.scale > T::zero()) {
            continue;
        }
        let mse: T = w
            .iter()
            .map(|&v| {
                let e = quantize_value(v, &grid) - v;
                e * e
            })
            .sum();
        let better = match &best {
            None => true,
            Some((g, m)) => mse < *m || (mse == *m && grid.scale > g.scale),
        };
        if better {
            best = Some((grid, mse));
        }
    }
    best.expect("nonzero row always yields a positive-scale candidate").0
}

/// Single grid over a whole tensor, e.g. for activation quantization of one
/// input batch: same search as [`fit_grid`], tensor-level instead of
/// per-channel. The result can be stored as level metadata in a compression
/// database.
pub fn fit_tensor_grid<T: Scalar>(m: &Matrix<T>, bits: u32, symmetric: bool) -> QuantGrid<T> {
    fit_grid(m.data(), bits, symmetric)
}

#[derive(Debug, Clone)]
pub struct ObqOptions {
    pub outlier_heuristic: bool,
}

impl Default for ObqOptions {
    fn default() -> Self {
        ObqOptions {
            outlier_heuristic: true,
        }
    }
}

/// Quantize every still-active weight of one row, greedily in order of
/// least loss increase, compensating the remaining free weights after each
/// step. Returns the quantized row (every entry on the grid) and the trace.
pub fn obq_quantize_row<T: Scalar>(
    w: &[T],
    state: &mut InverseHessianState<T>,
    grid: &QuantGrid<T>,
) -> Result<(RowTrace<T>, Vec<T>)> {
    obq_quantize_row_opts(w, state, grid, &ObqOptions::default())
}

pub fn obq_quantize_row_opts<T: Scalar>(
    w: &[T],
    state: &mut InverseHessianState<T>,
    grid: &QuantGrid<T>,
    opts: &ObqOptions,
) -> Result<(RowTrace<T>, Vec<T>)> {
    if w.len() != state.dim() {
        return Err(Error::shape("row length vs inverse state"));
    }
    let mut row = w.to_vec();
    let mut trace = RowTrace {
        order: Vec::new(),
        deltas: Vec::new(),
        snapshots: None,
    };
    let half_step = grid.scale / cst(2.0);

    while state.active_count() > 0 {
        // Outliers (rounding error beyond half a grid step) jump the queue,
        // largest error first.
        let mut pick: Option<(usize, T)> = None;
        if opts.outlier_heuristic {
            for p in state.active_indices() {
                let err = quantize_value(row[p], grid) - row[p];
                if err.abs() > half_step
                    && pick.is_none_or(|(_, e)| err.abs() > e.abs())
                {
                    pick = Some((p, err));
                }
            }
        }
        let (p, err) = match pick {
            Some(found) => found,
            None => {
                let mut best: Option<(usize, T, T)> = None;
                for p in state.active_indices() {
                    let err = quantize_value(row[p], grid) - row[p];
                    let score = err * err / state.diag(p);
                    if best.is_none_or(|(_, _, s)| score < s) {
                        best = Some((p, err, score));
                    }
                }
                let (p, err, _) = best.expect("active set nonempty");
                (p, err)
            }
        };

        let delta = err * err / state.diag(p);
        let target = quantize_value(row[p], grid);
        let coeff = (row[p] - target) / state.diag(p);
        let col = state.column(p);
        for (wj, &cj) in row.iter_mut().zip(col.iter()) {
            *wj -= cj * coeff;
        }
        row[p] = target; // frozen on the grid
        state.eliminate(p)?;
        trace.order.push(p);
        trace.deltas.push(delta);
    }
    Ok((trace, row))
}

#[derive(Debug, Clone)]
pub struct QuantizeOptions {
    pub bits: u32,
    pub symmetric: bool,
    pub damp: Damp,
    /// Treat exact zeros as pruned support: they are eliminated up front,
    /// never selected as candidates, and stay zero. Grids are then fit on
    /// the surviving weights only.
    pub freeze_zeros: bool,
    pub outlier_heuristic: bool,
}

impl QuantizeOptions {
    pub fn new(bits: u32, symmetric: bool, damp: Damp) -> Self {
        QuantizeOptions {
            bits,
            symmetric,
            damp,
            freeze_zeros: false,
            outlier_heuristic: true,
        }
    }
}

/// Quantize a whole layer with per-row (per-channel) grids and fresh inverse
/// state per row. No global step is needed: every weight gets quantized.
pub fn quantize_layer<T: Scalar>(
    problem: &LayerProblem<T>,
    opts: &QuantizeOptions,
) -> Result<(Matrix<T>, Vec<QuantGrid<T>>, LossLedger<T>)> {
    let h = accumulate_hessian(&[&problem.inputs], opts.damp);
    let inv = invert_spd(&h)?;

    let solved: Vec<(QuantGrid<T>, RowTrace<T>, Vec<T>)> = (0..problem.d_row())
        .into_par_iter()
        .map(|i| {
            let row = problem.weights.row(i);
            let grid = if opts.freeze_zeros {
                let survivors: Vec<T> =
                    row.iter().copied().filter(|&v| v != T::zero()).collect();
                fit_grid(&survivors, opts.bits, opts.symmetric)
            } else {
                fit_grid(row, opts.bits, opts.symmetric)
            };
            let mut state = InverseHessianState::new(inv.clone());
            if opts.freeze_zeros {
                for (j, &v) in row.iter().enumerate() {
                    if v == T::zero() {
                        state.eliminate(j)?;
                    }
                }
            }
            let obq_opts = ObqOptions {
                outlier_heuristic: opts.outlier_heuristic,
            };
            let (trace, out) = obq_quantize_row_opts(row, &mut state, &grid, &obq_opts)?;
            Ok((grid, trace, out))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut out = problem.weights.clone();
    let mut grids = Vec::with_capacity(solved.len());
    let mut ledger = LossLedger { rows: Vec::new() };
    for (i, (grid, trace, row)) in solved.into_iter().enumerate() {
        out.row_mut(i).copy_from_slice(&row);
        grids.push(grid);
        ledger.rows.push(RowLedger {
            order: trace.order,
            deltas: trace.deltas,
        });
    }
    Ok((out, grids, ledger))
}

/// Closed-form least squares W minimizing ||W X - Y||^2, used to restart
/// quantization from a zero-gradient point when running on the compressed
/// model's inputs.
pub fn sequential_reopt<T: Scalar>(
    inputs: &Matrix<T>,
    targets: &Matrix<T>,
    damp: Damp,
) -> Result<Matrix<T>> {
    let (d, n) = (inputs.rows(), inputs.cols());
    if targets.cols() != n {
        return Err(Error::shape(format!(
            "targets {}x{} vs inputs {}x{}",
            targets.rows(),
            targets.cols(),
            d,
            n
        )));
    }

    // Gram matrix X X^T plus dampening (plain normal equations, undoubled).
    let mut gram = Matrix::zeros(d, d);
    for i in 0..d {
        let xi = inputs.row(i);
        for j in i..d {
            let dot: T = xi.iter().zip(inputs.row(j)).map(|(&a, &b)| a * b).sum();
            gram.set(i, j, dot);
            gram.set(j, i, dot);
        }
    }
    let mean_diag = (0..d).map(|i| gram.get(i, i)).sum::<T>() / cst(d as f64);
    let damp = damp.resolve(mean_diag);
    if damp != T::zero() {
        for i in 0..d {
            let v = gram.get(i, i) + damp;
            gram.set(i, i, v);
        }
    }
    let gram_inv = invert_spd(&gram)?;

    // B = X Y^T is d x d_row; W = (G^-1 B)^T.
    let d_row = targets.rows();
    let mut b = Matrix::zeros(d, d_row);
    for i in 0..d {
        let xi = inputs.row(i);
        for r in 0..d_row {
            let dot: T = xi.iter().zip(targets.row(r)).map(|(&a, &y)| a * y).sum();
            b.set(i, r, dot);
        }
    }
    let wt = gram_inv.matmul(&b)?;
    let mut w = Matrix::zeros(d_row, d);
    for i in 0..d {
        for r in 0..d_row {
            w.set(r, i, wt.get(i, r));
        }
    }
    Ok(w)
}

/// JSON shape for a layer's per-row grids: shared bits/symmetry plus one
/// (scale, zero_point) pair per row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerGrids<T> {
    pub bits: u32,
    pub symmetric: bool,
    pub rows: Vec<RowGrid<T>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RowGrid<T> {
    pub scale: T,
    pub zero_point: i64,
}

impl<T: Scalar> LayerGrids<T> {
    pub fn from_grids(grids: &[QuantGrid<T>]) -> Self {
        let bits = grids.first().map_or(2, |g| g.bits);
        let symmetric = grids.first().is_some_and(|g| g.symmetric);
        LayerGrids {
            bits,
            symmetric,
            rows: grids
                .iter()
                .map(|g| RowGrid {
                    scale: g.scale,
                    zero_point: g.zero_point,
                })
                .collect(),
        }
    }

    pub fn grid(&self, row: usize) -> QuantGrid<T> {
        let r = &self.rows[row];
        QuantGrid {
            scale: r.scale,
            zero_point: r.zero_point,
            bits: self.bits,
            symmetric: self.symmetric,
        }
    }
}
