//! Budgeted per-layer compression-level assignment: a database of
//! independently compressed layer variants, a discretized knapsack DP that
//! picks one level per layer under a cost budget, and the stitcher that
//! copies the chosen artifacts into a final weight set.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{LayerProblem, Matrix};
use crate::scalar::Scalar;

/// One compressed variant of one layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompressionLevel {
    pub label: String,
    /// NPY file holding the compressed weights.
    pub weights: PathBuf,
    /// Calibration loss ||WX - What X||^2 of this level.
    pub loss: f64,
    /// Cost under the budget metric (FLOPs, BOPs, or measured seconds).
    pub cost: f64,
    /// Optional grid metadata for quantized levels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerLevels {
    pub name: String,
    pub levels: Vec<CompressionLevel>,
}

/// Per-layer map from compression level to compressed weights, loss, and
/// cost. Every layer must carry an identity (uncompressed, loss 0) level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompressionDatabase {
    pub layers: Vec<LayerLevels>,
}

impl CompressionDatabase {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::arg("database has no layers"));
        }
        for layer in &self.layers {
            if layer.levels.is_empty() {
                return Err(Error::arg(format!("layer {} has no levels", layer.name)));
            }
            if !layer.levels.iter().any(|l| l.loss == 0.0) {
                return Err(Error::arg(format!(
                    "layer {} has no identity (loss 0) level",
                    layer.name
                )));
            }
            for level in &layer.levels {
                if !level.loss.is_finite() || level.loss < 0.0 {
                    return Err(Error::arg(format!(
                        "layer {} level {} has bad loss {}",
                        layer.name, level.label, level.loss
                    )));
                }
                if !level.cost.is_finite() || level.cost < 0.0 {
                    return Err(Error::arg(format!(
                        "layer {} level {} has bad cost {}",
                        layer.name, level.label, level.cost
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let db: CompressionDatabase = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.into(),
            reason: e.to_string(),
        })?;
        db.validate()?;
        Ok(db)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("database serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Overwrite level costs from an external table {layer: {label: cost}},
    /// e.g. measured timings. Unlisted levels keep their stored cost.
    pub fn apply_costs(
        &mut self,
        costs: &std::collections::BTreeMap<String, std::collections::BTreeMap<String, f64>>,
    ) {
        for layer in &mut self.layers {
            if let Some(table) = costs.get(&layer.name) {
                for level in &mut layer.levels {
                    if let Some(&c) = table.get(&level.label) {
                        level.cost = c;
                    }
                }
            }
        }
    }

    fn level(&self, layer: &str, label: &str) -> Result<&CompressionLevel> {
        self.layers
            .iter()
            .find(|l| l.name == layer)
            .and_then(|l| l.levels.iter().find(|lv| lv.label == label))
            .ok_or_else(|| Error::MissingLevel {
                layer: layer.into(),
                label: label.into(),
            })
    }
}

/// One chosen level per layer, with the resulting totals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub assignments: Vec<PlanEntry>,
    pub total_cost: f64,
    pub total_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub layer: String,
    pub label: String,
}

impl AllocationPlan {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.into(),
            reason: e.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("plan serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Sparsity grid where each level prunes the same fraction of remaining
/// weights: s_i = 1 - delta^i with delta the per-step retained fraction
/// (delta = 0.9 prunes 10% of what is left each step). Generation stops
/// before the first value exceeding `stop`.
pub fn sparsity_grid(delta: f64, stop: f64) -> Vec<f64> {
    assert!((0.0..1.0).contains(&delta) && delta > 0.0, "delta in (0,1)");
    assert!((0.0..1.0).contains(&stop) && stop > 0.0, "stop in (0,1)");
    let mut out = Vec::new();
    let mut retained = 1.0;
    loop {
        retained *= delta;
        let s = 1.0 - retained;
        if s > stop {
            break;
        }
        out.push(s);
    }
    out
}

/// Calibration loss ||W X - What X||^2 (squared Frobenius norm).
pub fn measure_loss<T: Scalar>(orig: &LayerProblem<T>, compressed: &Matrix<T>) -> Result<T> {
    if compressed.rows() != orig.d_row() || compressed.cols() != orig.d_col() {
        return Err(Error::shape(format!(
            "compressed {}x{} vs original {}x{}",
            compressed.rows(),
            compressed.cols(),
            orig.d_row(),
            orig.d_col()
        )));
    }
    let mut diff = orig.weights.clone();
    for (d, &c) in diff.data_mut().iter_mut().zip(compressed.data()) {
        *d -= c;
    }
    Ok(diff.matmul(&orig.inputs)?.frobenius_sq())
}

/// Knapsack DP over cost buckets of width budget/resolution (costs rounded
/// up to whole buckets): minimizes total loss subject to the discretized
/// costs fitting the budget. Optimal for the discretized costs.
pub fn dp_allocate(
    db: &CompressionDatabase,
    budget: f64,
    resolution: usize,
) -> Result<AllocationPlan> {
    db.validate()?;
    if resolution < 100 {
        return Err(Error::arg(format!("resolution {resolution} below minimum 100")));
    }
    if !(budget > 0.0) || !budget.is_finite() {
        return Err(Error::arg(format!("budget must be positive, got {budget}")));
    }
    let width = budget / resolution as f64;
    let bucketize = |cost: f64| -> usize {
        if cost <= 0.0 {
            0
        } else {
            (cost / width).ceil() as usize
        }
    };

    let min_cost_sum: f64 = db
        .layers
        .iter()
        .map(|l| l.levels.iter().map(|lv| lv.cost).fold(f64::INFINITY, f64::min))
        .sum();

    const UNSET: usize = usize::MAX;
    // dp[b]: minimal loss using the layers seen so far with total bucket
    // cost exactly <= b (non-increasing in b by construction below).
    let mut dp = vec![f64::INFINITY; resolution + 1];
    dp[0] = 0.0;
    let mut choice: Vec<Vec<usize>> = Vec::with_capacity(db.layers.len());

    for layer in &db.layers {
        let mut next = vec![f64::INFINITY; resolution + 1];
        let mut pick = vec![UNSET; resolution + 1];
        for b in 0..=resolution {
            for (li, level) in layer.levels.iter().enumerate() {
                let c = bucketize(level.cost);
                if c > b {
                    continue;
                }
                let prev = dp[b - c];
                if !prev.is_finite() {
                    continue;
                }
                let total = prev + level.loss;
                if total < next[b] {
                    next[b] = total;
                    pick[b] = li;
                }
            }
        }
        dp = next;
        choice.push(pick);
    }

    let best_bucket = (0..=resolution)
        .filter(|&b| dp[b].is_finite())
        .min_by(|&a, &b| dp[a].partial_cmp(&dp[b]).unwrap().then(a.cmp(&b)))
        .ok_or(Error::InfeasibleBudget {
            budget,
            min_cost: min_cost_sum,
        })?;

    // Trace back the chosen level per layer.
    let mut labels = vec![UNSET; db.layers.len()];
    let mut b = best_bucket;
    for (i, layer) in db.layers.iter().enumerate().rev() {
        let li = choice[i][b];
        debug_assert_ne!(li, UNSET);
        labels[i] = li;
        b -= bucketize(layer.levels[li].cost);
    }

    let mut assignments = Vec::with_capacity(db.layers.len());
    let mut total_cost = 0.0;
    let mut total_loss = 0.0;
    for (layer, &li) in db.layers.iter().zip(&labels) {
        let level = &layer.levels[li];
        assignments.push(PlanEntry {
            layer: layer.name.clone(),
            label: level.label.clone(),
        });
        total_cost += level.cost;
        total_loss += level.loss;
    }
    Ok(AllocationPlan {
        assignments,
        total_cost,
        total_loss,
    })
}

/// Entry of the manifest written by [`stitch`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub layer: String,
    pub label: String,
    pub weights: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<PathBuf>,
}

/// Copy each chosen level's weight file (and grid metadata, if any) into
/// `out_dir` and write a manifest.json describing the stitched model.
pub fn stitch(
    db: &CompressionDatabase,
    plan: &AllocationPlan,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<ManifestEntry>> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut manifest = Vec::with_capacity(plan.assignments.len());
    for entry in &plan.assignments {
        let level = db.level(&entry.layer, &entry.label)?;
        let dst = out_dir.join(format!("{}.npy", entry.layer));
        std::fs::copy(&level.weights, &dst).map_err(|e| Error::io(&level.weights, e))?;
        let grid_dst = match &level.grid {
            Some(src) => {
                let dst = out_dir.join(format!("{}.grid.json", entry.layer));
                std::fs::copy(src, &dst).map_err(|e| Error::io(src, e))?;
                Some(dst)
            }
            None => None,
        };
        manifest.push(ManifestEntry {
            layer: entry.layer.clone(),
            label: entry.label.clone(),
            weights: dst,
            grid: grid_dst,
        });
    }

    let manifest_path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

/// Bit-operations cost of a linear layer: FLOPs times both operand widths,
/// discounted by sparsity. FLOPs = 2 * d_row * d_col * spatial, with
/// `spatial` the output-position multiplier for unfolded convolutions
/// (1 for plain linear layers).
pub fn bop_cost(
    d_row: usize,
    d_col: usize,
    spatial: f64,
    weight_bits: u32,
    act_bits: u32,
    sparsity: f64,
) -> f64 {
    debug_assert!((0.0..1.0).contains(&sparsity));
    let flops = 2.0 * d_row as f64 * d_col as f64 * spatial;
    flops * weight_bits as f64 * act_bits as f64 * (1.0 - sparsity)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::npy::save_matrix;

    fn level(label: &str, loss: f64, cost: f64) -> CompressionLevel {
        CompressionLevel {
            label: label.into(),
            weights: PathBuf::from(format!("{label}.npy")),
            loss,
            cost,
            grid: None,
        }
    }

    fn two_layer_db() -> CompressionDatabase {
        CompressionDatabase {
            layers: vec![
                LayerLevels {
                    name: "a".into(),
                    levels: vec![level("identity", 0.0, 10.0), level("small", 4.0, 5.0)],
                },
                LayerLevels {
                    name: "b".into(),
                    levels: vec![level("identity", 0.0, 8.0), level("small", 1.0, 2.0)],
                },
            ],
        }
    }

    #[test]
    fn sparsity_grid_retains_ninety_percent_per_step() {
        let grid = sparsity_grid(0.9, 0.3);
        assert!((grid[0] - 0.1).abs() < 1e-12);
        assert!((grid[1] - 0.19).abs() < 1e-12);
        assert!((grid[2] - 0.271).abs() < 1e-12);
    }

    #[test]
    fn sparsity_grid_stops_immediately_when_first_level_exceeds() {
        assert!(sparsity_grid(0.9, 0.05).is_empty());
    }

    #[test]
    fn sparsity_grid_count_closed_form() {
        // Largest i with 1 - 0.9^i <= 0.99 is floor(log(0.01)/log(0.9)) = 43.
        let grid = sparsity_grid(0.9, 0.99);
        let expect = (f64::ln(1.0 - 0.99) / f64::ln(0.9)).floor() as usize;
        assert_eq!(grid.len(), expect);
        assert_eq!(grid.len(), 43);
        assert!(grid.iter().all(|&s| s <= 0.99));
        // Strictly increasing and bounded by 1.
        for w in grid.windows(2) {
            assert!(w[0] < w[1]);
        }
        assert!(*grid.last().unwrap() < 1.0);
    }

    #[test]
    fn measure_loss_examples() {
        let w = Matrix::new(2, 2, vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let p = LayerProblem::new(w.clone(), Matrix::identity(2), "l").unwrap();
        assert_eq!(measure_loss(&p, &w).unwrap(), 0.0);
        let zero = Matrix::zeros(2, 2);
        let loss = measure_loss(&p, &zero).unwrap();
        assert!((loss - 30.0).abs() < 1e-12); // ||W||_F^2
        let bad = Matrix::zeros(2, 3);
        assert!(measure_loss(&p, &bad).is_err());
    }

    #[test]
    fn measure_loss_matches_triple_loop() {
        let mut v = 0.7_f64;
        let mut gen = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    v = (v * 137.0 + 0.41).sin();
                    v
                })
                .collect()
        };
        let w = Matrix::new(3, 4, gen(12)).unwrap();
        let x = Matrix::new(4, 7, gen(28)).unwrap();
        let what = Matrix::new(3, 4, gen(12)).unwrap();
        let p = LayerProblem::new(w.clone(), x.clone(), "l").unwrap();
        let fast = measure_loss(&p, &what).unwrap();

        let mut slow = 0.0;
        for i in 0..3 {
            for k in 0..7 {
                let mut a = 0.0;
                let mut b = 0.0;
                for j in 0..4 {
                    a += w.get(i, j) * x.get(j, k);
                    b += what.get(i, j) * x.get(j, k);
                }
                slow += (a - b) * (a - b);
            }
        }
        assert!((fast - slow).abs() <= 1e-10 * slow.abs().max(1.0));
    }

    #[test]
    fn dp_single_layer_picks_cheapest_loss_within_budget() {
        let db = CompressionDatabase {
            layers: vec![LayerLevels {
                name: "only".into(),
                levels: vec![
                    level("identity", 0.0, 10.0),
                    level("mid", 2.0, 6.0),
                    level("small", 5.0, 2.0),
                ],
            }],
        };
        let plan = dp_allocate(&db, 7.0, 700).unwrap();
        assert_eq!(plan.assignments[0].label, "mid");
        let plan = dp_allocate(&db, 20.0, 2000).unwrap();
        assert_eq!(plan.assignments[0].label, "identity");
        assert!(dp_allocate(&db, 1.0, 100).is_err());
    }

    #[test]
    fn dp_two_layer_worked_example() {
        // Bucket-exact resolution: width 0.01 divides every cost.
        let plan = dp_allocate(&two_layer_db(), 12.0, 1200).unwrap();
        assert_eq!(plan.total_loss, 1.0);
        assert_eq!(plan.assignments[0].label, "identity");
        assert_eq!(plan.assignments[1].label, "small");
        assert!((plan.total_cost - 12.0).abs() < 1e-12);
    }

    #[test]
    fn dp_generous_budget_returns_identity_plan() {
        let plan = dp_allocate(&two_layer_db(), 100.0, 1000).unwrap();
        assert_eq!(plan.total_loss, 0.0);
        assert!(plan.assignments.iter().all(|a| a.label == "identity"));
    }

    #[test]
    fn stitch_copies_weights_and_writes_manifest() {
        let dir = std::env::temp_dir().join("obc-stitch-test");
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();

        let w1 = Matrix::new(1, 2, vec![1.0, 2.0]).unwrap();
        let w2 = Matrix::new(1, 2, vec![3.0, 4.0]).unwrap();
        let p1 = dir.join("a_id.npy");
        let p2 = dir.join("b_id.npy");
        save_matrix(&w1, &p1).unwrap();
        save_matrix(&w2, &p2).unwrap();

        let db = CompressionDatabase {
            layers: vec![
                LayerLevels {
                    name: "a".into(),
                    levels: vec![CompressionLevel {
                        label: "identity".into(),
                        weights: p1.clone(),
                        loss: 0.0,
                        cost: 1.0,
                        grid: None,
                    }],
                },
                LayerLevels {
                    name: "b".into(),
                    levels: vec![CompressionLevel {
                        label: "identity".into(),
                        weights: p2.clone(),
                        loss: 0.0,
                        cost: 1.0,
                        grid: None,
                    }],
                },
            ],
        };
        let plan = dp_allocate(&db, 10.0, 100).unwrap();
        let out = dir.join("stitched");
        let manifest = stitch(&db, &plan, &out).unwrap();
        assert_eq!(manifest.len(), 2);
        // Byte-identical copies.
        assert_eq!(
            std::fs::read(&p1).unwrap(),
            std::fs::read(out.join("a.npy")).unwrap()
        );
        assert!(out.join("manifest.json").exists());

        // Plan referencing an absent label errors.
        let bad_plan = AllocationPlan {
            assignments: vec![PlanEntry {
                layer: "a".into(),
                label: "missing".into(),
            }],
            total_cost: 0.0,
            total_loss: 0.0,
        };
        assert!(matches!(
            stitch(&db, &bad_plan, &out),
            Err(Error::MissingLevel { .. })
        ));
    }

    #[test]
    fn bop_cost_arithmetic() {
        let dense32 = bop_cost(4, 8, 1.0, 32, 32, 0.0);
        assert_eq!(dense32, 2.0 * 4.0 * 8.0 * 1024.0);
        let sparse8 = bop_cost(4, 8, 1.0, 8, 8, 0.5);
        assert!((sparse8 / dense32 - 1.0 / 32.0).abs() < 1e-15);
        assert!(bop_cost(4, 8, 1.0, 32, 32, 0.999) < dense32 * 0.002);
    }
}
