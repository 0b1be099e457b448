use std::path::Path;
use std::process::{Command, Output};

fn greenkit(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_greenkit"))
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

const TINY_CONFIG: &str = "\
[problem]
name = poisson1d

[network]
depth = 2
width = 40

[data]
n_r = 16
n_s = 8
n_b = 2
m = 8

[optim]
lr = 1e-3
epochs = 3
seed = 5
log_every = 1
";

#[test]
fn table_one_with_exact_kernel() {
    let dir = tempfile::tempdir().unwrap();
    let o = greenkit(&["table", "1", "--h", "2^-4,2^-6"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = read_csv(&dir.path().join("table1.csv"));
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        let k: f64 = r[col("kappa_ba")].parse().unwrap();
        assert!((k - 1.0).abs() < 1e-6);
        assert!(r[col("iters_prec")].parse::<usize>().unwrap() <= 3);
    }
    assert_eq!(rows[1][col("iters_base")], "63");
    let m = manifest(dir.path());
    assert_eq!(m["command"], "table");
    assert!(m["model"].is_null());
}

#[test]
fn csv_values_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    assert!(greenkit(&["table", "1", "--h", "2^-4"], dir.path()).status.success());
    let (_, rows) = read_csv(&dir.path().join("table1.csv"));
    for cell in rows.iter().flatten().filter(|c| c.contains('e')) {
        let v: f64 = cell.parse().unwrap();
        assert_eq!(format!("{v:.16e}"), *cell);
    }
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(greenkit(&["table", "3"], dir.path()).status.code(), Some(2));
    assert_eq!(greenkit(&["bogus"], dir.path()).status.code(), Some(2));
    assert_eq!(greenkit(&["table", "4"], dir.path()).status.code(), Some(2));

    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, TINY_CONFIG.replace("width = 40\n", "")).unwrap();
    let o = greenkit(&["train", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("network.width"));
}

#[test]
fn training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let oa = greenkit(&["train", cfg.to_str().unwrap()], &a);
    let ob = greenkit(&["train", cfg.to_str().unwrap()], &b);
    assert!(oa.status.success(), "{}", String::from_utf8_lossy(&oa.stderr));
    assert_eq!(oa.stdout, ob.stdout);
    let model: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("model.json")).unwrap()).unwrap();
    assert_eq!(model["input_dim"], 3);
    assert_eq!(model["depth"], 2);
    assert_eq!(model["width"], 40);
    let (ma, mb) = (manifest(&a), manifest(&b));
    assert_eq!(ma["model"]["blob_hash"], mb["model"]["blob_hash"]);
    assert_eq!(ma["seed"], 5);
    let (header, rows) = read_csv(&a.join("loss.csv"));
    assert_eq!(header[0], "epoch");
    assert_eq!(rows.len(), 3);

    let other = greenkit(&["--seed", "6", "train", cfg.to_str().unwrap()], &dir.path().join("c"));
    assert_ne!(other.stdout, oa.stdout);

    // a trained model is accepted by the solver commands
    let model_path = a.join("model.json");
    let o = greenkit(&["table", "1", "--h", "2^-4", "--model", model_path.to_str().unwrap()], &dir.path().join("t"));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(manifest(&dir.path().join("t"))["model"]["blob_hash"].is_string());
}

#[test]
fn hybrid_run_records_neural_applications() {
    let dir = tempfile::tempdir().unwrap();
    let o = greenkit(&["hybrid", "--h", "2^-5", "--periods", "2,4", "--maxiter", "40"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(dir.path());
    assert_eq!(m["summary"]["neural_applications"]["jacobi"], 0);
    assert_eq!(m["summary"]["neural_applications"]["hybrid_k2"], 1);
    assert_eq!(m["summary"]["jacobi_converged"], false);
    let (header, rows) = read_csv(&dir.path().join("jacobi.csv"));
    assert_eq!(&header[..3], &["k", "err_l2", "res_l2"]);
    assert_eq!(rows.len(), 41);
    assert!(dir.path().join("hybrid_k4.csv").exists());
}

#[test]
fn hybrid_reads_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("h.cfg");
    std::fs::write(&cfg, "[hybrid]\nh = 2^-4\nperiods = 3\nmaxiter = 10\nmodes = false\n").unwrap();
    let o = greenkit(&["hybrid", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (_, rows) = read_csv(&dir.path().join("summary.csv"));
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1][1], "3");
}

#[test]
fn spectrum_row_count_matches_request() {
    let dir = tempfile::tempdir().unwrap();
    let o = greenkit(&["spectrum", "--h", "2^-5", "--count", "12"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = read_csv(&dir.path().join("spectrum.csv"));
    assert_eq!(rows.len(), 12);
    assert_eq!(header[..4], ["j", "mu_exact", "mu_approx", "delta_mu"]);
    assert_eq!(greenkit(&["spectrum", "--h", "2^-3", "--count", "999"], dir.path()).status.code(), Some(2));
}

#[test]
fn solve_and_multigrid() {
    let dir = tempfile::tempdir().unwrap();
    let o = greenkit(&["solve", "--h", "2^-8"], dir.path());
    assert!(o.status.success());
    let (_, rows) = read_csv(&dir.path().join("solution.csv"));
    assert_eq!(rows.len(), 101);
    let o = greenkit(&["multigrid", "--levels", "2^-6,2^-3", "--cycles", "5"], &dir.path().join("mg"));
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("jacobi"));
    assert_eq!(manifest(&dir.path().join("mg"))["summary"]["cycles"], 5);
    let o = greenkit(&["multigrid", "--levels", "2^-3,2^-6"], &dir.path().join("mg2"));
    assert_eq!(o.status.code(), Some(2));
}
