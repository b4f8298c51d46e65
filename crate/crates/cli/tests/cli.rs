use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use deepnorm_cli::config::CliConfig;
use serde_json::Value;

const TINY: &str = r#"{
  "model": {"enc_layers": 1, "dec_layers": 1, "d_model": 16, "d_ff": 32, "n_heads": 2, "vocab_size": 16, "max_seq_len": 12},
  "task": {"vocab_size": 16, "max_len": 5, "train_size": 300, "eval_size": 32},
  "train": {"steps": 20, "warmup": 10, "batch_tokens": 128, "eval_every": 10}
}"#;

fn deepnorm(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deepnorm"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("DEEPNORM_OUT")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("cfg.json");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn grad_check_passes_and_catches_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let ok = deepnorm(&["grad-check", "--seed", "3"], dir.path());
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    let report = json(dir.path().join("gradcheck.json"));
    assert!(report["max_rel_error"].as_f64().unwrap() <= 1e-4);

    let bad = deepnorm(&["grad-check", "--seed", "3", "--corrupt-grad"], dir.path());
    assert_eq!(code(&bad), 3);
}

#[test]
fn invalid_model_dims_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = deepnorm(&["init-stats", "--enc", "0"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("enc_layers"), "{}", stderr(&o));
}

#[test]
fn inverted_support_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = deepnorm(&["bound-check", "--dist", "uniform", "--a", "1", "--b", "0"], dir.path());
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn unknown_config_keys_and_flags_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"model": {"dmodel": 8}}"#);
    let o = deepnorm(&["init-stats", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 2);
    let o = deepnorm(&["init-stats", "--no-such-flag"], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn uniform_row_matches_closed_form_std() {
    let dir = tempfile::tempdir().unwrap();
    let o = deepnorm(&["bound-check", "--dist", "uniform", "--a", "0", "--b", "1"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = json(dir.path().join("bound.json"));
    let row = &rows["rows"][0];
    assert!((row["empirical_std"].as_f64().unwrap() - 12f64.sqrt().recip()).abs() < 5e-3, "{row}");
    assert_eq!(row["holds"], true);
}

#[test]
fn init_stats_flags_glorot_post_norm() {
    let dir = tempfile::tempdir().unwrap();
    let l = deepnorm(&["init-stats", "--order", "v1", "--init", "lipschitz", "--enc", "6", "--dec", "6", "--assert-bound"], dir.path());
    assert_eq!(code(&l), 0, "{}", stderr(&l));
    let g = deepnorm(&["init-stats", "--order", "v1", "--init", "glorot", "--enc", "6", "--dec", "6", "--assert-bound"], dir.path());
    assert_eq!(code(&g), 3);
    let report = json(dir.path().join("stats.json"));
    assert!(report["max_sigma"].as_f64().unwrap() > 1.1);
    let csv = std::fs::read_to_string(dir.path().join("stats.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 30);
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let runs: [(&[&str], &[&str]); 4] = [
        (&["init-stats", "--seed", "5", "--enc", "2", "--dec", "2"], &["stats.csv", "stats.json"]),
        (&["bound-check", "--seed", "5", "--samples", "2000"], &["bound.csv", "bound.json"]),
        (&["grad-check", "--seed", "5"], &["gradcheck.csv", "gradcheck.json"]),
        (&["grid", "--depths", "1", "--steps", "6", "--batch-tokens", "128"], &["grid.csv", "grid.json"]),
    ];
    for (args, files) in runs {
        for dir in [&a, &b] {
            let o = deepnorm(args, dir.path());
            assert!(matches!(code(&o), 0 | 3), "{args:?}: {}", stderr(&o));
        }
        for f in files {
            let x = std::fs::read(a.path().join(f)).unwrap();
            let y = std::fs::read(b.path().join(f)).unwrap();
            assert!(x == y, "{f} differs between runs");
        }
    }
}

#[test]
fn train_then_decode_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let t = deepnorm(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(matches!(code(&t), 0 | 3), "{}", stderr(&t));
    let run = json(dir.path().join("run.json"));
    assert_eq!(run["steps_run"], 20);
    assert_eq!(run["complete"], true);
    assert!(dir.path().join("evals.csv").is_file());

    let ckpt = dir.path().join("model.ckpt");
    let args = ["decode", "--checkpoint", ckpt.to_str().unwrap(), "--src", "3 4 5", "--src", "6 7", "--max-len", "8"];
    let d = deepnorm(&args, dir.path());
    assert_eq!(code(&d), 0, "{}", stderr(&d));
    let text = String::from_utf8(d.stdout.clone()).unwrap();
    assert_eq!(text.lines().count(), 2);
    let report = json(dir.path().join("decode.json"));
    for out in report["outputs"].as_array().unwrap() {
        assert!(out.as_array().unwrap().len() <= 8);
    }
    assert_eq!(deepnorm(&args, dir.path()).stdout, d.stdout);

    let bad = deepnorm(&["decode", "--checkpoint", ckpt.to_str().unwrap(), "--src", "3 99"], dir.path());
    assert_eq!(code(&bad), 2);
    let missing = deepnorm(&["decode", "--checkpoint", "/nonexistent/x.ckpt", "--src", "3"], dir.path());
    assert_eq!(code(&missing), 4);
}

#[test]
fn killed_training_leaves_undetermined_partial_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &TINY.replace(r#""steps": 20"#, r#""steps": 1000000, "convergence_threshold": 1.0"#),
    );
    let mut child = Command::new(env!("CARGO_BIN_EXE_deepnorm"))
        .args(["train", "--config", cfg.to_str().unwrap(), "--out"])
        .arg(dir.path())
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let run = dir.path().join("run.json");
    let start = Instant::now();
    while !run.exists() {
        assert!(start.elapsed() < Duration::from_secs(120), "no partial report");
        std::thread::sleep(Duration::from_millis(50));
    }
    child.kill().unwrap();
    child.wait().unwrap();
    let report = json(run);
    assert_eq!(report["verdict"], "undetermined");
    assert_eq!(report["complete"], false);
    assert!(report["steps_run"].as_u64().unwrap() > 0);
}

#[test]
fn env_var_sets_default_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_deepnorm"))
        .args(["bound-check", "--samples", "1000"])
        .env("DEEPNORM_OUT", dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(dir.path().join("bound.csv").is_file());
}

#[test]
fn config_corpus_parses_without_panic() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus/cli_config");
    for entry in std::fs::read_dir(dir).unwrap() {
        let text = std::fs::read_to_string(entry.unwrap().path()).unwrap();
        if let Ok(cfg) = CliConfig::from_json(&text) {
            let _ = cfg.validate();
        }
    }
    assert!(CliConfig::from_json(r#"{"model": {"d_model": 0}, "bogus": 1}"#).is_err());
}
