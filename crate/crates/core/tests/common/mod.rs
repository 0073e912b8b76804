//! Shared generators for the integration suites.

use obc_core::matrix::{LayerProblem, Matrix};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::new(rows, cols, data).unwrap()
}

/// Random symmetric positive definite matrix with a mild ridge so the
/// conditioning stays friendly to 1e-10 comparisons.
pub fn rand_spd(rng: &mut ChaCha8Rng, d: usize) -> Matrix<f64> {
    let b = rand_matrix(rng, d, d);
    let mut h = Matrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let mut s: f64 = (0..d).map(|k| b.get(i, k) * b.get(j, k)).sum();
            s /= d as f64;
            if i == j {
                s += 0.1;
            }
            h.set(i, j, s);
            h.set(j, i, s);
        }
    }
    h
}

/// Random layer problem with enough samples for a full-rank Hessian.
pub fn rand_problem(
    rng: &mut ChaCha8Rng,
    d_row: usize,
    d_col: usize,
    samples: usize,
) -> LayerProblem<f64> {
    let w = rand_matrix(rng, d_row, d_col);
    let x = rand_matrix(rng, d_col, samples);
    LayerProblem::new(w, x, "test-layer").unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Least-squares slope of log(y) against log(x).
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let num: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    num / den
}
