//! End-to-end runs of the `snows` binary. Resolved-config snapshots live in
//! `tests/golden`; set `SNOWS_UPDATE_GOLDEN=1` to rewrite them.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn snows(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_snows"))
        .args(args)
        .env_remove("SNOWS_LOG")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = snows(args);
    assert!(
        out.status.success(),
        "snows {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Exit code and the JSON error object on stderr.
fn fails(args: &[&str]) -> (i32, Value) {
    let out = snows(args);
    let stderr = String::from_utf8_lossy(&out.stderr);
    let err = serde_json::from_str(stderr.trim()).unwrap_or_else(|_| panic!("stderr is not JSON: {stderr}"));
    (out.status.code().unwrap(), err)
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

fn golden(name: &str, args: &[&str]) {
    let mut all = vec!["--print-config"];
    all.extend(args);
    let actual = ok(&all);
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(format!("{name}.json"));
    if std::env::var_os("SNOWS_UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, &actual).unwrap();
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing snapshot {}", path.display()));
    assert_eq!(actual, expected, "resolved config for {name} drifted from {}", path.display());
}

#[test]
fn resolved_configs_match_snapshots() {
    golden("prune_defaults", &["prune"]);
    golden(
        "prune_flags",
        &[
            "prune", "--manifest", "m.json", "--checkpoint", "d.snws", "--data", "train.bin", "--data-encoding", "u8",
            "--label-bytes", "2", "--k", "3", "--mask", "unstructured:0.7", "--method", "magnitude", "--lambda", "0.01",
            "--cg-tol", "1e-6", "--cg-max-iters", "25", "--eps-fd", "1e-7", "--batch-size", "64", "--max-epochs", "2",
            "--lambda-retries", "7", "--calib-n", "256", "--seed", "5", "--out", "run",
        ],
    );
    golden("eval_defaults", &["eval"]);
    golden("ablate_defaults", &["ablate"]);
    golden(
        "ablate_flags",
        &["ablate", "--study", "sgd-vs-newton", "--layer", "conv2.w", "--ks", "0,2", "--lrs", "0.5,0.05", "--sgd-steps", "10"],
    );
    golden("gen_data_defaults", &["gen-data"]);
    golden("init_model_flags", &["init-model", "--arch", "mlp", "--input", "16", "--hidden", "12,8", "--classes", "4", "--epochs", "3"]);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"k": 5, "mask": "nm:1:4", "newton": {"cg": {"lambda": 0.5}}}"#).unwrap();
    let v: Value = serde_json::from_str(&ok(&["--print-config", "prune", "--config", cfg.to_str().unwrap(), "--k", "2"])).unwrap();
    assert_eq!(v["k"], 2);
    assert_eq!(v["mask"], "nm:1:4");
    assert_eq!(v["newton"]["cg"]["lambda"], 0.5);
    assert_eq!(v["calib_n"], 1024);
}

#[test]
fn unknown_config_field_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"kk": 5}"#).unwrap();
    let (code, err) = fails(&["prune", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert_eq!(err["class"], "validation");
    assert!(err["message"].as_str().unwrap().contains("kk"));
}

#[test]
fn missing_inputs_map_to_exit_codes() {
    let (code, err) = fails(&["prune", "--out", "x"]);
    assert_eq!(code, 2);
    assert!(err["message"].as_str().unwrap().contains("--manifest"));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let (code, err) = fails(&["eval", "--manifest", missing.to_str().unwrap(), "--checkpoint", "d", "--out", "x"]);
    assert_eq!(code, 4);
    assert_eq!(err["class"], "io");
    assert!(err["message"].as_str().unwrap().contains("nope.json"));
}

/// Data, a trained MLP and its directory.
struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new(hidden: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let f = Fixture { dir };
        ok(&[
            "gen-data", "--samples", "600", "--test-samples", "200", "--classes", "4", "--shape", "16", "--noise", "1.0",
            "--out", &f.path("train.bin"), "--test-out", &f.path("test.bin"),
        ]);
        ok(&[
            "init-model", "--arch", "mlp", "--input", "16", "--hidden", hidden, "--classes", "4", "--epochs", "6",
            "--train-data", &f.path("train.bin"), "--out", &f.path("model"),
        ]);
        f
    }

    fn path(&self, rel: &str) -> String {
        self.dir.path().join(rel).to_str().unwrap().to_string()
    }

    fn prune(&self, out: &str, extra: &[&str]) -> Output {
        let mut args = vec![
            "--threads".to_string(), "1".into(), "prune".into(),
            "--manifest".into(), self.path("model/manifest.json"),
            "--checkpoint".into(), self.path("model/dense.snws"),
            "--data".into(), self.path("train.bin"),
            "--calib-n".into(), "200".into(), "--batch-size".into(), "200".into(), "--max-epochs".into(), "2".into(),
            "--k".into(), "1".into(), "--out".into(), self.path(out),
        ];
        args.extend(extra.iter().map(|s| s.to_string()));
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        snows(&args)
    }
}

#[test]
fn prune_eval_and_reproducibility() {
    let f = Fixture::new("12");
    for run in ["a", "b"] {
        let out = f.prune(run, &["--mask", "nm:2:4", "--seed", "3"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let report = read_json(&f.dir.path().join("a/report.json"));
    assert_eq!(report["sparsity"], 0.5);
    assert_eq!(report["zeros"].as_u64().unwrap() * 2, report["prunable_params"].as_u64().unwrap());
    for file in ["report.json", "pruned.snws"] {
        let a = std::fs::read(f.dir.path().join("a").join(file)).unwrap();
        let b = std::fs::read(f.dir.path().join("b").join(file)).unwrap();
        assert!(a == b, "{file} differs between same-seed runs");
    }
    // Everything but the trailing wall_ms column.
    let steps = |run: &str| -> Vec<String> {
        let text = std::fs::read_to_string(f.dir.path().join(run).join("trajectories/fc0.w.csv")).unwrap();
        text.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect()
    };
    assert!(steps("a").len() > 1);
    assert_eq!(steps("a"), steps("b"));
    assert!(!f.dir.path().join("a/partial.snws").exists());
    let run = read_json(&f.dir.path().join("a/run.json"));
    assert_eq!(run["seed"], 3);
    assert_eq!(run["threads"], 1);

    ok(&[
        "eval", "--manifest", &f.path("model/manifest.json"), "--checkpoint", &f.path("a/pruned.snws"),
        "--reference", &f.path("model/dense.snws"), "--data", &f.path("test.bin"), "--calib-n", "100",
        "--out", &f.path("eval"),
    ]);
    let e = read_json(&f.dir.path().join("eval/eval.json"));
    let (acc, reference) = (e["accuracy"].as_f64().unwrap(), e["reference_accuracy"].as_f64().unwrap());
    assert!(reference > 0.9, "dense model at {reference}, chance is 0.25");
    assert!(acc > 0.5, "pruned model at {acc}, chance is 0.25");
    assert!((e["accuracy_delta"].as_f64().unwrap() - (acc - reference)).abs() < 1e-12);
    assert_eq!(e["layers"].as_array().unwrap().len(), 2);
}

#[test]
fn imported_mask_with_the_wrong_shape_names_the_tensor() {
    let a = Fixture::new("12");
    let out = a.prune("a", &["--method", "magnitude"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let b = Fixture::new("10");
    let import = format!("import:{}", a.path("a/pruned.snws"));
    let out = b.prune("b", &["--mask", &import]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let err: Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    let msg = err["message"].as_str().unwrap();
    assert!(msg.contains("fc0.w"), "{msg}");
}

#[test]
fn oracle_prints_a_passing_table() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&["oracle", "--suite", "toy-quadratic", "--out", dir.path().to_str().unwrap()]);
    assert!(stdout.contains("0 failed"), "{stdout}");
    let checks = read_json(&dir.path().join("oracle.json"));
    assert!(checks.as_array().unwrap().iter().all(|c| c["passed"] == true));
}
