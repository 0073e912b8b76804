//! Batch command-line front end: one subcommand per workflow, NPY/JSON
//! artifacts on disk, human-readable reports on stdout.
//!
//! Exit codes: 0 ok, 1 usage, 2 numerical failure (including --verify
//! mismatches), 3 I/O or malformed input files.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use obc_core::allocator::{dp_allocate, measure_loss, stitch, AllocationPlan, CompressionDatabase};
use obc_core::correction::{apply_correction, collect_stats, ChannelStats, CorrectionForm};
use obc_core::hessian::accumulate_hessian;
use obc_core::matrix::{LayerProblem, Matrix};
use obc_core::npy::{load_matrix, save_matrix};
use obc_core::quant::{quantize_layer, LayerGrids, QuantizeOptions};
use obc_core::sparse::{
    compress_sparse, LossLedger, Materialize, PruneOptions, SparsityAmount, SparsityTarget,
};
use obc_core::{Damp, Error};

mod verify;

#[derive(Parser)]
#[command(
    name = "obc",
    version,
    about = "Layer-wise post-training compression of weight matrices"
)]
struct Cli {
    /// Row-parallel worker count (falls back to OBC_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Seed for the randomized self-check run by --verify on large layers.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Accumulate the dampened Hessian 2XX^T over one or more input files.
    Hessian {
        /// Input NPY files (d_col x N each), comma separated; extra files
        /// (e.g. augmented batches) are accumulated into the same Hessian.
        #[arg(long, value_delimiter = ',', required = true)]
        inputs: Vec<PathBuf>,
        /// Diagonal dampening: a nonnegative value, or "auto" for
        /// 0.01 x mean diagonal.
        #[arg(long, default_value = "0")]
        damp: Damp,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prune a weight matrix against calibration inputs.
    Prune(PruneArgs),
    /// Quantize a weight matrix onto per-row uniform grids.
    Quantize(QuantizeArgs),
    /// Pick one compression level per layer under a cost budget.
    Allocate {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        budget: f64,
        /// Optional external cost table {layer: {label: cost}} overriding
        /// the costs stored in the database.
        #[arg(long)]
        costs: Option<PathBuf>,
        /// Number of cost buckets for the DP discretization.
        #[arg(long, default_value_t = 10_000)]
        resolution: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Copy the planned levels out of the database into a stitched model.
    Stitch {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report the squared and relative calibration error of compressed weights.
    Eval {
        #[arg(long)]
        orig: PathBuf,
        #[arg(long)]
        comp: PathBuf,
        #[arg(long)]
        inputs: PathBuf,
    },
    /// Collect per-channel mean/std statistics of layer outputs.
    Stats {
        /// Outputs as channels x samples NPY.
        #[arg(long)]
        outputs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rescale compressed layer outputs toward dense statistics.
    Correct {
        #[arg(long)]
        outputs: PathBuf,
        #[arg(long)]
        dense_stats: PathBuf,
        #[arg(long)]
        comp_stats: PathBuf,
        /// Use the standard (sigma ratio, then mean restore) form instead of
        /// the scaled-shift default.
        #[arg(long)]
        textbook_correction: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum PruneMode {
    Unstructured,
    Nm,
    Block,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    inputs: PathBuf,
    #[arg(long, value_enum)]
    mode: PruneMode,
    /// Target sparsity fraction (unstructured and block modes).
    #[arg(long)]
    sparsity: Option<f64>,
    /// Exact number of weights to prune (unstructured mode alternative).
    #[arg(long, conflicts_with = "sparsity")]
    count: Option<usize>,
    /// Nonzeros per block (nm mode).
    #[arg(long)]
    n: Option<usize>,
    /// Block length (nm mode).
    #[arg(long)]
    m: Option<usize>,
    /// Contiguous block size (block mode).
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long, default_value = "0")]
    damp: Damp,
    /// How final weights are materialized after global selection.
    #[arg(long, default_value = "recompute")]
    materialize: Materialize,
    /// Snapshot storage cap for trace mode; above it the solver falls back
    /// to recomputation.
    #[arg(long, default_value_t = 1024)]
    snapshot_cap_mb: usize,
    /// Compact already-sparse rows to their nonzero support.
    #[arg(long)]
    compact_sparse: bool,
    /// Cross-check the result against the brute-force reference and fail
    /// loudly on mismatch.
    #[arg(long)]
    verify: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    inputs: PathBuf,
    #[arg(long)]
    bits: u32,
    #[arg(long, conflicts_with = "asymmetric")]
    symmetric: bool,
    #[arg(long)]
    asymmetric: bool,
    #[arg(long, default_value = "0")]
    damp: Damp,
    /// Keep exact zeros frozen (pruned support) and quantize only survivors.
    #[arg(long)]
    freeze_zeros: bool,
    /// Disable the early quantization of large-error outliers.
    #[arg(long)]
    no_outlier_heuristic: bool,
    #[arg(long)]
    verify: bool,
    #[arg(long)]
    out: PathBuf,
}

pub(crate) enum CliError {
    Core(Error),
    Usage(String),
    Verify(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

fn exit_code(e: &CliError) -> i32 {
    match e {
        CliError::Usage(_) => 1,
        CliError::Verify(_) => 2,
        CliError::Core(err) => match err {
            Error::Io { .. } | Error::Npy { .. } | Error::NonFinite { .. } | Error::Json { .. } => 3,
            Error::NotPositiveDefinite { .. } | Error::NumericalBreakdown { .. } => 2,
            _ => 1,
        },
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };

    let threads = cli.threads.or_else(|| {
        std::env::var("OBC_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(t) = threads.filter(|&t| t > 0) {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global();
    }

    if let Err(e) = run(cli) {
        match &e {
            CliError::Core(err) => eprintln!("error: {err}"),
            CliError::Usage(msg) => eprintln!("usage error: {msg}"),
            CliError::Verify(msg) => eprintln!("verification failed: {msg}"),
        }
        std::process::exit(exit_code(&e));
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Hessian { inputs, damp, out } => cmd_hessian(&inputs, damp, &out),
        Command::Prune(args) => cmd_prune(args, cli.seed),
        Command::Quantize(args) => cmd_quantize(args, cli.seed),
        Command::Allocate {
            db,
            budget,
            costs,
            resolution,
            out,
        } => cmd_allocate(&db, budget, costs.as_deref(), resolution, &out),
        Command::Stitch { db, plan, out } => cmd_stitch(&db, &plan, &out),
        Command::Eval { orig, comp, inputs } => cmd_eval(&orig, &comp, &inputs),
        Command::Stats { outputs, out } => cmd_stats(&outputs, &out),
        Command::Correct {
            outputs,
            dense_stats,
            comp_stats,
            textbook_correction,
            out,
        } => cmd_correct(&outputs, &dense_stats, &comp_stats, textbook_correction, &out),
    }
}

fn load_problem(weights: &PathBuf, inputs: &PathBuf) -> Result<LayerProblem<f64>, CliError> {
    let w = load_matrix(weights)?;
    let x = load_matrix(inputs)?;
    let name = weights
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "layer".into());
    Ok(LayerProblem::new(w, x, name)?)
}

fn write_ledger(ledger: &LossLedger<f64>, path: &PathBuf) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(ledger).expect("ledger serializes");
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    Ok(())
}

fn cmd_hessian(inputs: &[PathBuf], damp: Damp, out: &PathBuf) -> Result<(), CliError> {
    let matrices: Vec<Matrix<f64>> = inputs
        .iter()
        .map(load_matrix)
        .collect::<Result<_, _>>()?;
    let d = matrices[0].rows();
    for (path, m) in inputs.iter().zip(&matrices) {
        if m.rows() != d {
            return Err(CliError::Usage(format!(
                "{} has {} rows, expected {} to match the first input",
                path.display(),
                m.rows(),
                d
            )));
        }
    }
    let refs: Vec<&Matrix<f64>> = matrices.iter().collect();
    let h = accumulate_hessian(&refs, damp);
    save_matrix(&h, out)?;
    let samples: usize = matrices.iter().map(|m| m.cols()).sum();
    println!(
        "hessian: {d}x{d} from {} file(s), {samples} samples total -> {}",
        inputs.len(),
        out.display()
    );
    Ok(())
}

fn report_error(problem: &LayerProblem<f64>, compressed: &Matrix<f64>) -> (f64, f64) {
    let sq = measure_loss(problem, compressed).expect("shapes match");
    let denom = problem
        .weights
        .matmul(&problem.inputs)
        .expect("shapes match")
        .frobenius_sq();
    let rel = if denom > 0.0 { sq / denom } else { 0.0 };
    (sq, rel)
}

fn cmd_prune(args: PruneArgs, seed: u64) -> Result<(), CliError> {
    let problem = load_problem(&args.weights, &args.inputs)?;

    let target = match args.mode {
        PruneMode::Unstructured => {
            let amount = match (args.sparsity, args.count) {
                (Some(f), None) => SparsityAmount::Fraction(f),
                (None, Some(k)) => SparsityAmount::Count(k),
                (None, None) => {
                    return Err(CliError::Usage(
                        "unstructured mode needs --sparsity or --count".into(),
                    ))
                }
                _ => unreachable!("clap conflict"),
            };
            if args.n.is_some() || args.m.is_some() || args.block_size.is_some() {
                return Err(CliError::Usage(
                    "--n/--m/--block-size only apply to nm/block modes".into(),
                ));
            }
            SparsityTarget::Unstructured(amount)
        }
        PruneMode::Nm => {
            let (Some(n), Some(m)) = (args.n, args.m) else {
                return Err(CliError::Usage("nm mode needs --n and --m".into()));
            };
            if args.sparsity.is_some() || args.count.is_some() {
                return Err(CliError::Usage("nm mode fixes sparsity at 1 - n/m".into()));
            }
            SparsityTarget::Nm { n, m }
        }
        PruneMode::Block => {
            let Some(c) = args.block_size else {
                return Err(CliError::Usage("block mode needs --block-size".into()));
            };
            let Some(s) = args.sparsity else {
                return Err(CliError::Usage("block mode needs --sparsity".into()));
            };
            SparsityTarget::Block {
                block_size: c,
                sparsity: s,
            }
        }
    };

    let opts = PruneOptions {
        materialize: args.materialize,
        snapshot_cap_bytes: args.snapshot_cap_mb << 20,
        compact_sparse: args.compact_sparse,
    };
    let (compressed, ledger) = compress_sparse(&problem, &target, args.damp, &opts)?;

    if args.verify {
        verify::verify_prune(&problem, &target, args.damp, &compressed, seed)?;
    }

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let weights_path = args.out.join("compressed.npy");
    let ledger_path = args.out.join("ledger.json");
    save_matrix(&compressed, &weights_path)?;
    write_ledger(&ledger, &ledger_path)?;

    let (sq, rel) = report_error(&problem, &compressed);
    let zeros = compressed.data().iter().filter(|v| **v == 0.0).count();
    println!(
        "prune: {} ({}x{}), {} zeros of {} weights",
        problem.name,
        problem.d_row(),
        problem.d_col(),
        zeros,
        problem.d_row() * problem.d_col()
    );
    println!("squared_error={sq:.9e} relative_error={rel:.9e}");
    println!(
        "wrote {} and {}",
        weights_path.display(),
        ledger_path.display()
    );
    Ok(())
}

fn cmd_quantize(args: QuantizeArgs, seed: u64) -> Result<(), CliError> {
    if !(2..=32).contains(&args.bits) {
        return Err(CliError::Usage(format!(
            "--bits must be in 2..=32, got {}",
            args.bits
        )));
    }
    if !args.symmetric && !args.asymmetric {
        return Err(CliError::Usage(
            "pick one of --symmetric / --asymmetric".into(),
        ));
    }
    let problem = load_problem(&args.weights, &args.inputs)?;
    let opts = QuantizeOptions {
        bits: args.bits,
        symmetric: args.symmetric,
        damp: args.damp,
        freeze_zeros: args.freeze_zeros,
        outlier_heuristic: !args.no_outlier_heuristic,
    };
    let (quantized, grids, ledger) = quantize_layer(&problem, &opts)?;

    if args.verify {
        verify::verify_quantize(&problem, &opts, &quantized, seed)?;
    }

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let weights_path = args.out.join("quantized.npy");
    let grids_path = args.out.join("grids.json");
    let ledger_path = args.out.join("ledger.json");
    save_matrix(&quantized, &weights_path)?;
    let grids_json =
        serde_json::to_string_pretty(&LayerGrids::from_grids(&grids)).expect("grids serialize");
    std::fs::write(&grids_path, grids_json).map_err(|e| Error::io(&grids_path, e))?;
    write_ledger(&ledger, &ledger_path)?;

    let (sq, rel) = report_error(&problem, &quantized);
    println!(
        "quantize: {} ({}x{}), {} bits {}",
        problem.name,
        problem.d_row(),
        problem.d_col(),
        args.bits,
        if args.symmetric { "symmetric" } else { "asymmetric" }
    );
    println!("squared_error={sq:.9e} relative_error={rel:.9e}");
    println!(
        "wrote {}, {}, {}",
        weights_path.display(),
        grids_path.display(),
        ledger_path.display()
    );
    Ok(())
}

fn cmd_allocate(
    db_path: &PathBuf,
    budget: f64,
    costs: Option<&std::path::Path>,
    resolution: usize,
    out: &PathBuf,
) -> Result<(), CliError> {
    let mut db = CompressionDatabase::load(db_path)?;
    if let Some(costs_path) = costs {
        let text = std::fs::read_to_string(costs_path)
            .map_err(|e| Error::io(costs_path, e))?;
        let table = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: costs_path.into(),
            reason: e.to_string(),
        })?;
        db.apply_costs(&table);
    }
    let plan = dp_allocate(&db, budget, resolution)?;
    plan.save(out)?;
    println!(
        "allocate: budget {budget}, total_cost {:.6}, total_loss {:.6e}",
        plan.total_cost, plan.total_loss
    );
    for entry in &plan.assignments {
        println!("  {} -> {}", entry.layer, entry.label);
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_stitch(db_path: &PathBuf, plan_path: &PathBuf, out: &PathBuf) -> Result<(), CliError> {
    let db = CompressionDatabase::load(db_path)?;
    let plan = AllocationPlan::load(plan_path)?;
    let manifest = stitch(&db, &plan, out)?;
    println!("stitch: {} layers -> {}", manifest.len(), out.display());
    Ok(())
}

fn cmd_eval(orig: &PathBuf, comp: &PathBuf, inputs: &PathBuf) -> Result<(), CliError> {
    let problem = load_problem(orig, inputs)?;
    let compressed = load_matrix(comp)?;
    let sq = measure_loss(&problem, &compressed)?;
    let denom = problem.weights.matmul(&problem.inputs)?.frobenius_sq();
    let rel = if denom > 0.0 { sq / denom } else { 0.0 };
    println!("squared_error={sq:.9e}");
    println!("relative_error={rel:.9e}");
    Ok(())
}

fn cmd_stats(outputs: &PathBuf, out: &PathBuf) -> Result<(), CliError> {
    let m = load_matrix(outputs)?;
    let stats = collect_stats(&m)?;
    stats.save(out)?;
    println!(
        "stats: {} channels x {} samples -> {}",
        m.rows(),
        m.cols(),
        out.display()
    );
    Ok(())
}

fn cmd_correct(
    outputs: &PathBuf,
    dense_stats: &PathBuf,
    comp_stats: &PathBuf,
    textbook: bool,
    out: &PathBuf,
) -> Result<(), CliError> {
    let m = load_matrix(outputs)?;
    let dense: ChannelStats<f64> = ChannelStats::load(dense_stats)?;
    let comp: ChannelStats<f64> = ChannelStats::load(comp_stats)?;
    let form = if textbook {
        CorrectionForm::Textbook
    } else {
        CorrectionForm::ScaledShift
    };
    let corrected = apply_correction(&m, &dense, &comp, form)?;
    save_matrix(&corrected, out)?;
    println!("correct: {} channels -> {}", m.rows(), out.display());
    Ok(())
}
