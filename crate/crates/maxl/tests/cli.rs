//! End-to-end tests of the command-line driver: artifact plumbing, exit
//! codes, and determinism of the stored outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_maxl");

fn scratch(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("maxl-cli-{}-{}", tag, std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn maxl(data_dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--data-dir")
        .arg(data_dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "command failed: {}\n{}",
        String::from_utf8_lossy(&out.stderr),
        String::from_utf8_lossy(&out.stdout)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn gen_tiny(dir: &Path) {
    ok(&maxl(
        dir,
        &["gen-data", "--seed", "5", "--train-size", "12", "--dev-size", "4", "--test-size", "4"],
    ));
}

#[test]
fn gen_data_is_idempotent_for_fixed_seed() {
    let a = scratch("gen-a");
    let b = scratch("gen-b");
    gen_tiny(&a);
    gen_tiny(&b);
    for f in ["manifest.json", "train.jsonl", "dev.jsonl", "test.jsonl"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{} differs between identical gen-data runs",
            f
        );
    }
}

#[test]
fn gen_data_custom_grammar_reflected_in_manifest() {
    let dir = scratch("gen-custom");
    ok(&maxl(
        &dir,
        &[
            "gen-data", "--seed", "3", "--vocab", "64", "--intents", "3", "--slot-types", "5",
            "--train-size", "10", "--dev-size", "2", "--test-size", "2",
        ],
    ));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["grammar"]["vocab"], 64);
    assert_eq!(manifest["grammar"]["intents"], 3);
    assert_eq!(manifest["grammar"]["slot_types"], 5);
    assert_eq!(manifest["sizes"], serde_json::json!([10, 2, 2]));
}

#[test]
fn missing_corpus_is_a_config_error() {
    let dir = scratch("no-corpus");
    let out = maxl(&dir, &["train", "--epochs", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gen-data"));
    let out = maxl(&dir, &["pretrain"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn variable_length_interface_rejected_with_exit_2() {
    let dir = scratch("iface-reject");
    gen_tiny(&dir);
    for iface in ["list", "softmax"] {
        let out = maxl(&dir, &["train", "--interface", iface, "--epochs", "1"]);
        assert_eq!(out.status.code(), Some(2), "{} accepted", iface);
        assert!(
            String::from_utf8_lossy(&out.stderr).contains("variable-length"),
            "unexpected message for {}",
            iface
        );
    }
    let out = maxl(&dir, &["train", "--regime", "nonsense"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_rate_meta_run_leaves_checkpoints_unchanged() {
    let dir = scratch("zero-rates");
    gen_tiny(&dir);
    ok(&maxl(&dir, &["pretrain", "--skip-asr", "--skip-nlu"]));
    let out_dir = dir.join("runs/zero");
    ok(&maxl(
        &dir,
        &[
            "train", "--regime", "maxl_first_order", "--alpha", "0", "--beta", "0",
            "--entropy-weight", "0", "--epochs", "2", "--out", out_dir.to_str().unwrap(),
        ],
    ));
    assert_eq!(
        fs::read(dir.join("asr.ckpt")).unwrap(),
        fs::read(out_dir.join("asr.ckpt")).unwrap()
    );
    assert_eq!(
        fs::read(dir.join("nlu.ckpt")).unwrap(),
        fs::read(out_dir.join("nlu.ckpt")).unwrap()
    );
}

#[test]
fn evaluate_prints_metrics_json() {
    let dir = scratch("evaluate");
    gen_tiny(&dir);
    ok(&maxl(&dir, &["pretrain", "--skip-asr", "--skip-nlu"]));
    let stdout = ok(&maxl(&dir, &["evaluate", "--split", "dev"]));
    let m: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert!(m["cer"].is_number() && m["triple_f1"].is_number());
    assert_eq!(m["n_utts"], 4);
    let out = maxl(&dir, &["evaluate", "--split", "nope"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn table_reads_stored_runs_and_rejects_missing_ones() {
    let dir = scratch("table");
    gen_tiny(&dir);
    ok(&maxl(&dir, &["pretrain", "--skip-asr", "--skip-nlu"]));
    let run_dir = dir.join("runs/b");
    ok(&maxl(
        &dir,
        &["train", "--regime", "baseline", "--epochs", "1", "--out", run_dir.to_str().unwrap()],
    ));
    let run: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dir.join("run.json")).unwrap()).unwrap();
    assert!(run["config_hash"].as_str().unwrap().len() == 64);

    let md = ok(&maxl(&dir, &["table", run_dir.to_str().unwrap()]));
    assert_eq!(md.lines().count(), 3, "header + separator + one row:\n{}", md);
    let cer = format!("{:.4}", run["metrics"]["cer"].as_f64().unwrap());
    assert!(md.contains(&cer), "table row does not match stored metrics");

    let csv = ok(&maxl(&dir, &["table", "--csv", run_dir.to_str().unwrap()]));
    assert!(csv.starts_with("run_id,regime,interface,seed,cer,"));
    assert_eq!(csv.lines().count(), 2);

    let out = maxl(&dir, &["table", dir.join("runs/absent").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fixed_seed_rerun_is_bit_identical() {
    let dir = scratch("rerun");
    gen_tiny(&dir);
    ok(&maxl(&dir, &["pretrain", "--skip-asr", "--skip-nlu"]));
    let run = |name: &str| -> serde_json::Value {
        let out_dir = dir.join("runs").join(name);
        ok(&maxl(
            &dir,
            &[
                "train", "--regime", "maxl_first_order", "--seed", "7", "--epochs", "1",
                "--out", out_dir.to_str().unwrap(),
            ],
        ));
        serde_json::from_str(&fs::read_to_string(out_dir.join("run.json")).unwrap()).unwrap()
    };
    let a = run("r1");
    let b = run("r2");
    assert_eq!(a["metrics"], b["metrics"]);
}

#[test]
fn data_dir_env_var_is_honored() {
    let dir = scratch("env-dir");
    let out = Command::new(BIN)
        .env("MAXL_DATA_DIR", &dir)
        .args(["gen-data", "--seed", "1", "--train-size", "4", "--dev-size", "2", "--test-size", "2"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.join("manifest.json").exists());
}
