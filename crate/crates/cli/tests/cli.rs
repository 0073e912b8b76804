//! End-to-end tests of the obc binary: file contracts, exit codes,
//! determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use obc_core::matrix::Matrix;
use obc_core::npy::{load_matrix, save_matrix};

fn obc() -> Command {
    Command::new(env!("CARGO_BIN_EXE_obc"))
}

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("obc-cli-tests").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_npy(path: &Path, rows: usize, cols: usize, data: Vec<f64>) {
    save_matrix(&Matrix::new(rows, cols, data).unwrap(), path).unwrap();
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn hessian_identity_inputs() {
    let dir = tmp_dir("hessian-identity");
    let x = dir.join("x.npy");
    write_npy(&x, 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
    let out = dir.join("h.npy");
    run_ok(obc().args(["hessian", "--inputs"]).arg(&x).arg("--out").arg(&out));
    let h = load_matrix(&out).unwrap();
    assert_eq!(h.data(), &[2.0, 0.0, 0.0, 2.0]);
}

#[test]
fn hessian_accumulates_over_files() {
    let dir = tmp_dir("hessian-accumulate");
    let x = dir.join("x.npy");
    write_npy(&x, 2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let once = dir.join("once.npy");
    let twice = dir.join("twice.npy");
    run_ok(obc().args(["hessian", "--inputs"]).arg(&x).arg("--out").arg(&once));
    run_ok(
        obc()
            .args(["hessian", "--inputs"])
            .arg(format!("{},{}", x.display(), x.display()))
            .arg("--out")
            .arg(&twice),
    );
    let a = load_matrix(&once).unwrap();
    let b = load_matrix(&twice).unwrap();
    for (x1, x2) in a.data().iter().zip(b.data()) {
        assert!((2.0 * x1 - x2).abs() < 1e-12);
    }
}

#[test]
fn prune_zero_sparsity_keeps_weights() {
    let dir = tmp_dir("prune-zero");
    let w = dir.join("w.npy");
    let x = dir.join("x.npy");
    write_npy(&w, 2, 2, vec![3.0, 1.0, 4.0, 2.0]);
    write_npy(&x, 2, 4, vec![1.0, 0.5, -0.5, 1.0, 0.0, 1.0, 1.0, -1.0]);
    let out = dir.join("out");
    run_ok(
        obc()
            .args(["prune", "--mode", "unstructured", "--sparsity", "0"])
            .arg("--weights")
            .arg(&w)
            .arg("--inputs")
            .arg(&x)
            .arg("--out")
            .arg(&out),
    );
    let result = load_matrix(out.join("compressed.npy")).unwrap();
    assert_eq!(result.data(), &[3.0, 1.0, 4.0, 2.0]);
}

#[test]
fn prune_nm_worked_example() {
    let dir = tmp_dir("prune-nm");
    let w = dir.join("w.npy");
    let x = dir.join("x.npy");
    write_npy(&w, 1, 4, vec![4.0, 3.0, 2.0, 1.0]);
    let mut eye = vec![0.0; 16];
    for i in 0..4 {
        eye[i * 4 + i] = 1.0;
    }
    write_npy(&x, 4, 4, eye);
    let out = dir.join("out");
    let output = run_ok(
        obc()
            .args(["prune", "--mode", "nm", "--n", "2", "--m", "4", "--verify"])
            .arg("--weights")
            .arg(&w)
            .arg("--inputs")
            .arg(&x)
            .arg("--out")
            .arg(&out),
    );
    assert!(String::from_utf8_lossy(&output.stdout).contains("verify: ok"));
    let result = load_matrix(out.join("compressed.npy")).unwrap();
    assert_eq!(result.data(), &[4.0, 3.0, 0.0, 0.0]);
    assert!(out.join("ledger.json").exists());
}

#[test]
fn quantize_representable_weights_unchanged() {
    let dir = tmp_dir("quantize-representable");
    let w = dir.join("w.npy");
    let x = dir.join("x.npy");
    // Exact 4-bit grid points (power-of-two scale), extremes attained.
    let scale = 0.25;
    let z = 3i64;
    let data: Vec<f64> = [0i64, 15, 7, 4, 9, 12, 1, 2]
        .iter()
        .map(|&q| scale * (q - z) as f64)
        .collect();
    write_npy(&w, 1, 8, data.clone());
    let mut eye = vec![0.0; 64];
    for i in 0..8 {
        eye[i * 8 + i] = 1.0;
    }
    write_npy(&x, 8, 8, eye);
    let out = dir.join("out");
    run_ok(
        obc()
            .args(["quantize", "--bits", "4", "--asymmetric"])
            .arg("--weights")
            .arg(&w)
            .arg("--inputs")
            .arg(&x)
            .arg("--out")
            .arg(&out),
    );
    let result = load_matrix(out.join("quantized.npy")).unwrap();
    assert_eq!(result.data(), &data[..]);
    assert!(out.join("grids.json").exists());
}

#[test]
fn eval_identical_weights_reports_zero() {
    let dir = tmp_dir("eval-zero");
    let w = dir.join("w.npy");
    let x = dir.join("x.npy");
    write_npy(&w, 1, 2, vec![1.5, -2.5]);
    write_npy(&x, 2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let out = run_ok(
        obc()
            .arg("eval")
            .arg("--orig")
            .arg(&w)
            .arg("--comp")
            .arg(&w)
            .arg("--inputs")
            .arg(&x),
    );
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.contains("squared_error=0.0"), "{text}");
}

#[test]
fn identical_runs_are_byte_identical() {
    let dir = tmp_dir("determinism");
    let w = dir.join("w.npy");
    let x = dir.join("x.npy");
    let wdata: Vec<f64> = (0..48).map(|i| ((i * 37 % 19) as f64 - 9.0) * 0.13).collect();
    let xdata: Vec<f64> = (0..12 * 32).map(|i| ((i * 61 % 23) as f64 - 11.0) * 0.07).collect();
    write_npy(&w, 4, 12, wdata);
    write_npy(&x, 12, 32, xdata);
    for (threads, out_name) in [("1", "out_a"), ("4", "out_b")] {
        let out = dir.join(out_name);
        run_ok(
            obc()
                .args([
                    "prune",
                    "--mode",
                    "unstructured",
                    "--sparsity",
                    "0.5",
                    "--damp",
                    "auto",
                    "--threads",
                    threads,
                ])
                .arg("--weights")
                .arg(&w)
                .arg("--inputs")
                .arg(&x)
                .arg("--out")
                .arg(&out),
        );
    }
    let a = std::fs::read(dir.join("out_a/compressed.npy")).unwrap();
    let b = std::fs::read(dir.join("out_b/compressed.npy")).unwrap();
    assert_eq!(a, b, "outputs differ across thread counts");
}

#[test]
fn allocate_and_stitch_roundtrip() {
    let dir = tmp_dir("allocate-stitch");
    let w_a = dir.join("a_identity.npy");
    let w_a_small = dir.join("a_small.npy");
    let w_b = dir.join("b_identity.npy");
    write_npy(&w_a, 1, 2, vec![1.0, 2.0]);
    write_npy(&w_a_small, 1, 2, vec![1.0, 0.0]);
    write_npy(&w_b, 1, 2, vec![3.0, 4.0]);

    let db_json = serde_json::json!({
        "layers": [
            {"name": "a", "levels": [
                {"label": "identity", "weights": w_a, "loss": 0.0, "cost": 10.0},
                {"label": "small", "weights": w_a_small, "loss": 4.0, "cost": 5.0}
            ]},
            {"name": "b", "levels": [
                {"label": "identity", "weights": w_b, "loss": 0.0, "cost": 8.0},
                {"label": "small", "weights": w_b, "loss": 1.0, "cost": 2.0}
            ]}
        ]
    });
    let db_path = dir.join("db.json");
    std::fs::write(&db_path, serde_json::to_string_pretty(&db_json).unwrap()).unwrap();

    let plan_path = dir.join("plan.json");
    run_ok(
        obc()
            .args(["allocate", "--budget", "12", "--resolution", "1200"])
            .arg("--db")
            .arg(&db_path)
            .arg("--out")
            .arg(&plan_path),
    );
    let plan: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&plan_path).unwrap()).unwrap();
    assert_eq!(plan["total_loss"], 1.0);
    assert_eq!(plan["assignments"][0]["label"], "identity");
    assert_eq!(plan["assignments"][1]["label"], "small");

    let stitched = dir.join("stitched");
    run_ok(
        obc()
            .arg("stitch")
            .arg("--db")
            .arg(&db_path)
            .arg("--plan")
            .arg(&plan_path)
            .arg("--out")
            .arg(&stitched),
    );
    assert_eq!(
        std::fs::read(&w_a).unwrap(),
        std::fs::read(stitched.join("a.npy")).unwrap()
    );
    assert!(stitched.join("manifest.json").exists());

    // Infeasible budget is a usage-class failure.
    let status = obc()
        .args(["allocate", "--budget", "1", "--resolution", "100"])
        .arg("--db")
        .arg(&db_path)
        .arg("--out")
        .arg(dir.join("nope.json"))
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(1));
}

#[test]
fn stats_and_correct_workflow() {
    let dir = tmp_dir("stats-correct");
    let y = dir.join("y.npy");
    write_npy(&y, 1, 4, vec![1.0, 2.0, 3.0, 4.0]);
    let stats_path = dir.join("comp.json");
    run_ok(
        obc()
            .arg("stats")
            .arg("--outputs")
            .arg(&y)
            .arg("--out")
            .arg(&stats_path),
    );
    let dense_path = dir.join("dense.json");
    std::fs::write(&dense_path, r#"{"channels": [{"mean": 0.0, "std": 2.0}]}"#).unwrap();

    let corrected = dir.join("corrected.npy");
    run_ok(
        obc()
            .arg("correct")
            .arg("--outputs")
            .arg(&y)
            .arg("--dense-stats")
            .arg(&dense_path)
            .arg("--comp-stats")
            .arg(&stats_path)
            .arg("--out")
            .arg(&corrected),
    );
    let m = load_matrix(&corrected).unwrap();
    // Corrected channel has std 2 (the dense target).
    let mean: f64 = m.data().iter().sum::<f64>() / 4.0;
    let var: f64 = m.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
    assert!((var.sqrt() - 2.0).abs() < 1e-10);

    // Textbook form restores the dense mean exactly.
    let corrected_tb = dir.join("corrected_tb.npy");
    run_ok(
        obc()
            .arg("correct")
            .arg("--outputs")
            .arg(&y)
            .arg("--dense-stats")
            .arg(&dense_path)
            .arg("--comp-stats")
            .arg(&stats_path)
            .arg("--textbook-correction")
            .arg("--out")
            .arg(&corrected_tb),
    );
    let tb = load_matrix(&corrected_tb).unwrap();
    let tb_mean: f64 = tb.data().iter().sum::<f64>() / 4.0;
    assert!(tb_mean.abs() < 1e-12);
}

#[test]
fn exit_codes_by_failure_class() {
    let dir = tmp_dir("exit-codes");

    // Usage: unknown mode.
    let status = obc()
        .args(["prune", "--mode", "bogus"])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(1));

    // Usage: nm without --n/--m.
    let w = dir.join("w.npy");
    let x = dir.join("x.npy");
    write_npy(&w, 1, 4, vec![1.0, 2.0, 3.0, 4.0]);
    let mut eye = vec![0.0; 16];
    for i in 0..4 {
        eye[i * 4 + i] = 1.0;
    }
    write_npy(&x, 4, 4, eye);
    let status = obc()
        .args(["prune", "--mode", "nm"])
        .arg("--weights")
        .arg(&w)
        .arg("--inputs")
        .arg(&x)
        .arg("--out")
        .arg(dir.join("o1"))
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(1));

    // Numerical: rank-deficient Hessian without dampening.
    let bad_x = dir.join("badx.npy");
    write_npy(&bad_x, 4, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    let status = obc()
        .args(["prune", "--mode", "unstructured", "--sparsity", "0.5"])
        .arg("--weights")
        .arg(&w)
        .arg("--inputs")
        .arg(&bad_x)
        .arg("--out")
        .arg(dir.join("o2"))
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(2));

    // I/O: weights file with an unsupported dtype.
    let int_file = dir.join("int.npy");
    let dict = "{'descr': '<i4', 'fortran_order': False, 'shape': (1, 4), }";
    let pad = (64 - (10 + dict.len() + 1) % 64) % 64;
    let mut bytes = Vec::new();
    bytes.extend_from_slice(b"\x93NUMPY\x01\x00");
    bytes.extend_from_slice(&((dict.len() + pad + 1) as u16).to_le_bytes());
    bytes.extend_from_slice(dict.as_bytes());
    bytes.extend_from_slice(&vec![b' '; pad]);
    bytes.push(b'\n');
    bytes.extend_from_slice(&[0u8; 16]);
    std::fs::write(&int_file, bytes).unwrap();
    let status = obc()
        .args(["prune", "--mode", "unstructured", "--sparsity", "0.5"])
        .arg("--weights")
        .arg(&int_file)
        .arg("--inputs")
        .arg(&x)
        .arg("--out")
        .arg(dir.join("o3"))
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(3));

    // Missing file is also I/O.
    let status = obc()
        .arg("eval")
        .arg("--orig")
        .arg(dir.join("missing.npy"))
        .arg("--comp")
        .arg(&w)
        .arg("--inputs")
        .arg(&x)
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(3));
}

#[test]
fn env_thread_count_is_honored() {
    let dir = tmp_dir("env-threads");
    let w = dir.join("w.npy");
    let x = dir.join("x.npy");
    write_npy(&w, 2, 4, vec![1.0, -2.0, 3.0, -4.0, 0.5, 1.5, -0.5, 2.5]);
    let mut eye = vec![0.0; 16];
    for i in 0..4 {
        eye[i * 4 + i] = 1.0;
    }
    write_npy(&x, 4, 4, eye);
    let out = dir.join("out");
    run_ok(
        obc()
            .env("OBC_THREADS", "2")
            .args(["prune", "--mode", "unstructured", "--sparsity", "0.25"])
            .arg("--weights")
            .arg(&w)
            .arg("--inputs")
            .arg(&x)
            .arg("--out")
            .arg(&out),
    );
    assert!(out.join("compressed.npy").exists());
}
