use std::path::Path;
use std::process::{Command, Output};

use ntkw_core::checkpoint::{sha256_hex, KernelFile};
use serde_json::Value;

fn ntkw(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ntkw"))
        .current_dir(dir)
        .env_remove("NTKW_DATA_DIR")
        .env("RUST_LOG", "error")
        .args(args)
        .output()
        .expect("spawn ntkw")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn kernel_synth_writes_files_and_manifest() {
    let t = tempfile::tempdir().unwrap();
    let out = ntkw(t.path(), &["--seed", "7", "kernel", "--synth", "n=50,d=10", "--depth", "3", "--out", "k.bin"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let bytes = std::fs::read(t.path().join("k.bin")).unwrap();
    let k = KernelFile::from_bytes(&bytes).unwrap();
    assert_eq!(k.n(), 50);
    assert_eq!(k.depth, 3);
    let m = manifest(t.path());
    assert_eq!(m["seed"], 7);
    assert_eq!(m["exit_code"], 0);
    let arts = m["artifacts"].as_array().unwrap();
    let kernel = arts.iter().find(|a| a["path"] == "k.bin").unwrap();
    assert_eq!(kernel["sha256"], sha256_hex(&bytes));
    assert!(t.path().join("k.dataset").is_file());
    let summary: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(summary["diag"]["ok"], true);
}

#[test]
fn depth_one_is_an_argument_error() {
    let t = tempfile::tempdir().unwrap();
    let out = ntkw(t.path(), &["--seed", "1", "kernel", "--synth", "n=50,d=10", "--depth", "1"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("depth"));
}

#[test]
fn unparseable_flags_exit_two() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(code(&ntkw(t.path(), &["kernel", "--synth", "d=3"])), 2);
    assert_eq!(code(&ntkw(t.path(), &["kernel", "--depth", "x"])), 2);
    assert_eq!(code(&ntkw(t.path(), &["nonsense"])), 2);
    assert_eq!(code(&ntkw(t.path(), &["--help"])), 0);
}

#[test]
fn mnist_kernel_diagonal_at_depth_five() {
    let t = tempfile::tempdir().unwrap();
    let out = ntkw(
        t.path(),
        &["--seed", "0", "kernel", "--data", "mnist", "--classes", "3,8", "--n", "200", "--depth", "5"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let k = KernelFile::from_bytes(&std::fs::read(t.path().join("kernel.bin")).unwrap()).unwrap();
    assert_eq!(k.n(), 200);
    for i in 0..200 {
        assert!((k.theta[(i, i)] - 3.0).abs() <= 1e-12);
    }
}

#[test]
fn bound_kernel_and_flip_sweep_from_stored_kernel() {
    let t = tempfile::tempdir().unwrap();
    let dir = t.path();
    let out = ntkw(dir, &["--seed", "0", "kernel", "--data", "mnist", "--n", "200", "--depth", "5", "--out", "k.bin"]);
    assert_eq!(code(&out), 0);

    let out = ntkw(dir, &["--seed", "0", "--out-dir", "b", "bound", "kernel", "--kernel", "k.bin", "--labels-from", "data"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let mut lines = text.lines();
    assert!(lines.next().unwrap().split(',').any(|h| h == "first_term"));
    assert_eq!(lines.count(), 1);

    let out = ntkw(
        dir,
        &[
            "--seed", "0", "--out-dir", "f", "bound", "flip-sweep", "--kernel", "k.bin",
            "--ratios", "0,0.1,0.2,0.3,0.4,0.5", "--seeds", "5",
        ],
    );
    assert_eq!(code(&out), 0);
    assert_eq!(csv_rows(&dir.join("f/flip_sweep.csv")).len(), 30);
    let medians: Vec<f64> = csv_rows(&dir.join("f/flip_summary.csv"))
        .iter()
        .map(|r| r[1].parse().unwrap())
        .collect();
    assert_eq!(medians.len(), 6);
    assert!(medians.windows(2).all(|w| w[1] > w[0]), "{medians:?}");
}

#[test]
fn bound_ntrf_writes_rows_and_histories() {
    let t = tempfile::tempdir().unwrap();
    let out = ntkw(
        t.path(),
        &["--seed", "3", "bound", "ntrf", "--synth", "n=40,d=8", "--m", "64,128", "--R", "1,10", "--epochs", "4", "--seeds", "2"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv_rows(&t.path().join("ntrf.csv"));
    assert_eq!(rows.len(), 8);
    for r in &rows {
        let first: f64 = r[5].parse().unwrap();
        assert!(first.is_finite() && first > 0.0);
        let history = t.path().join(r.last().unwrap());
        assert_eq!(csv_rows(&history).len(), 4);
    }
}

#[test]
fn train_writes_one_row_per_example() {
    let t = tempfile::tempdir().unwrap();
    let out = ntkw(
        t.path(),
        &["--seed", "5", "train", "--synth", "n=200", "--m", "2048", "--depth", "3", "--kappa", "0.1", "--R", "10"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv_rows(&t.path().join("run.csv"));
    assert_eq!(rows.len(), 200);
    assert_eq!(rows[0][0], "1");
    let summary: Value = serde_json::from_str(&stdout(&out)).unwrap();
    let eta = summary["eta"].as_f64().unwrap();
    assert!((eta - 0.1 * 10.0 / (2048.0 * 200f64.sqrt())).abs() < 1e-15);
    assert!(t.path().join("selected.params").is_file());
}

#[test]
fn train_with_test_split_and_cumulative_check() {
    let t = tempfile::tempdir().unwrap();
    let out = ntkw(
        t.path(),
        &["--seed", "5", "train", "--synth", "n=60,d=8,test=40", "--m", "256", "--check-cumulative"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let s: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(s["test_n"], 40);
    let avg = s["test_error_average"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&avg));
    assert!(s["cumulative"]["gap_per_step"].as_f64().unwrap().is_finite());
}

#[test]
fn verify_norms_passes_wide_and_fails_narrow() {
    let t = tempfile::tempdir().unwrap();
    let out = ntkw(t.path(), &["--seed", "0", "verify", "--lemma", "norms", "--m", "2048", "--depth", "5", "--seeds", "10"]);
    assert_eq!(code(&out), 0);
    let line: Value = serde_json::from_str(stdout(&out).lines().next().unwrap()).unwrap();
    assert_eq!(line["lemma_id"], "norms");
    assert_eq!(line["verdict"], "PASS");

    let out = ntkw(t.path(), &["--seed", "0", "verify", "--lemma", "norms", "--m", "8"]);
    assert_eq!(code(&out), 1);
    let line: Value = serde_json::from_str(stdout(&out).lines().next().unwrap()).unwrap();
    assert_eq!(line["verdict"], "FAIL");
    let cmd = line["failure"]["reproduce"].as_str().unwrap();
    assert!(cmd.starts_with("ntkw verify --lemma norms --m 8"));
    assert_eq!(manifest(t.path())["exit_code"], 1);
}

#[test]
fn verify_unknown_lemma_exits_two() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(code(&ntkw(t.path(), &["--seed", "0", "verify", "--lemma", "bogus"])), 2);
}

#[test]
fn missing_data_dir_is_a_data_error() {
    let t = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ntkw"))
        .current_dir(t.path())
        .env("NTKW_DATA_DIR", t.path().join("empty"))
        .args(["--seed", "0", "kernel", "--data", "mnist"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 3);
}

#[test]
fn corrupt_kernel_file_is_a_data_error() {
    let t = tempfile::tempdir().unwrap();
    std::fs::write(t.path().join("bad.bin"), b"ntkw-kernel v1\n2\n3\n").unwrap();
    let out = ntkw(t.path(), &["--seed", "0", "bound", "kernel", "--kernel", "bad.bin", "--labels-from", "bad.bin"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn fetch_then_load_from_data_dir() {
    let t = tempfile::tempdir().unwrap();
    let root = t.path().join("store");
    let out = ntkw(t.path(), &["--seed", "0", "data", "fetch", "--to", root.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.join("mnist/train-images-idx3-ubyte.gz").is_file());
    let out = Command::new(env!("CARGO_BIN_EXE_ntkw"))
        .current_dir(t.path())
        .env("NTKW_DATA_DIR", &root)
        .args(["--seed", "0", "data", "inspect", "--data", "mnist", "--n", "100"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    let s: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(s["n"], 100);
    assert_eq!(s["positives"], 50);
    assert!(s["max_norm_deviation"].as_f64().unwrap() <= 1e-12);
    assert_eq!(s["digit_counts"].as_array().unwrap().len(), 10);
}

#[test]
fn fetch_without_destination_exits_two() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(code(&ntkw(t.path(), &["--seed", "0", "data", "fetch"])), 2);
}

#[test]
fn config_file_supplies_defaults_that_flags_override() {
    let t = tempfile::tempdir().unwrap();
    std::fs::write(t.path().join("run.cfg"), "# sweep\nm = 64\nR = 1,5\nepochs = 2\nseed = 11\n").unwrap();
    let out = ntkw(t.path(), &["--config", "run.cfg", "bound", "ntrf", "--synth", "n=30,d=6", "--R", "20"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv_rows(&t.path().join("ntrf.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0], "64");
    assert_eq!(rows[0][1], "20.0");
    assert_eq!(manifest(t.path())["seed"], 11);
}

#[test]
fn auto_seed_is_echoed_and_recorded() {
    let t = tempfile::tempdir().unwrap();
    let out = ntkw(t.path(), &["kernel", "--synth", "n=10,d=4", "--depth", "2"]);
    assert_eq!(code(&out), 0);
    let err = String::from_utf8_lossy(&out.stderr);
    let echoed: u64 = err
        .lines()
        .find_map(|l| l.strip_prefix("seed: "))
        .expect("seed echoed")
        .trim()
        .parse()
        .unwrap();
    let m = manifest(t.path());
    assert_eq!(m["seed"], echoed);
    let argv: Vec<&str> = m["argv"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert!(argv.windows(2).any(|w| w[0] == "--seed" && w[1] == echoed.to_string()));
}

#[test]
fn rerun_reproduces_artifacts_bit_identically() {
    let t = tempfile::tempdir().unwrap();
    let out = ntkw(
        t.path(),
        &["--out-dir", "first", "--threads", "1", "train", "--synth", "n=40,d=6,test=20", "--m", "128", "--check-cumulative"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = ntkw(t.path(), &["--out-dir", "second", "rerun", "first/manifest.json"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let report: Value = serde_json::from_str(stdout(&out).rsplit_once("\n{").map(|(_, r)| format!("{{{r}")).unwrap().as_str()).unwrap();
    assert_eq!(report["identical"], true);
    assert!(report["compared"].as_u64().unwrap() >= 4);
}
