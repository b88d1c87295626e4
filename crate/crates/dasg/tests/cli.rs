//! Command-line behaviour: exit codes, output locations, config layering
//! and checkpoint round trips.

use std::path::Path;
use std::process::{Command, Output};

use dasg::checkpoint;
use dasg::config::RunConfig;
use dasg::report::read_jsonl;
use dasg_core::model::{block_forward, ForwardOptions, ModelParams};
use dasg_core::{Parameters, SeededRng, Tensor};

/// Keeps training runs to a fraction of a second.
const SMALL: [&str; 4] = ["train.epochs=1", "train.train_size=32", "train.test_size=16", "task.seq_len=16"];

fn dasg(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dasg"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("DASG_OUT_DIR")
        .output()
        .expect("run dasg")
}

fn small(cmd: &str, extra: &[&str]) -> Vec<String> {
    let mut v = vec![cmd.to_string()];
    v.extend(extra.iter().map(|s| s.to_string()));
    v.extend(SMALL.iter().map(|s| s.to_string()));
    v.push("model.gmha.seq_len=16".into());
    v
}

fn run(args: &[String], out: &Path) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    dasg(&refs, out)
}

#[test]
fn unknown_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&small("train", &["--seed", "1", "train.nonsense=3"]), dir.path());
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn missing_seed_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&small("train", &[]), dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));
}

#[test]
fn bad_cli_syntax_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(dasg(&["train", "--seed", "x"], dir.path()).status.code(), Some(1));
    assert_eq!(dasg(&["no-such-command"], dir.path()).status.code(), Some(1));
}

#[test]
fn divergence_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&small("train", &["--seed", "1", "train.divergence_limit=1e-3"]), dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn env_var_sets_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_dasg"))
        .args(["grad-check", "--seed", "3"])
        .env("DASG_OUT_DIR", &target)
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(target.join("grad_check.jsonl").exists());
    assert!(target.join("grad_check.csv").exists());
}

#[test]
fn config_layers_and_is_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.toml");
    std::fs::write(&file, "seed = 5\n[train]\nlr = 0.02\nbatch_size = 8\n").unwrap();
    let out = dir.path().join("out");
    let mut args = small("train", &["--config", file.to_str().unwrap()]);
    args.push("train.lr=0.05".into());
    let o = run(&args, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let records = read_jsonl(&out.join("report.jsonl")).unwrap();
    let c = &records[0]["config"];
    assert_eq!(records[0]["record"], "config");
    assert_eq!(c["seed"], 5);
    assert_eq!(c["train"]["batch_size"], 8);
    assert_eq!(c["train"]["lr"], 0.05);
    assert_eq!(c["train"]["epochs"], 1);
}

#[test]
fn inspect_routing_writes_one_record_per_token() {
    let dir = tempfile::tempdir().unwrap();
    let trained = dir.path().join("trained");
    assert!(run(&small("train", &["--seed", "2"]), &trained).status.success());
    let ckpt = trained.join("checkpoint.bin");
    let out = dir.path().join("inspect");
    let o = dasg(&["inspect-routing", "--seed", "2", "--samples", "3", "--checkpoint", ckpt.to_str().unwrap()], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let tokens = read_jsonl(&out.join("routing_trace.jsonl")).unwrap();
    assert_eq!(tokens.len(), 3 * 16);
    let samples = read_jsonl(&out.join("forward_trace.jsonl")).unwrap();
    assert_eq!(samples.iter().filter(|r| r["record"] == "sample").count(), 3);
}

fn bits(p: &ModelParams) -> Vec<(String, Vec<u64>, bool)> {
    let mut v = Vec::new();
    p.visit(&mut |name, t| v.push((name.to_string(), t.data().iter().map(|x| x.to_bits()).collect(), t.is_trainable())));
    v
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::layered(None, &["seed=9".to_string()]).unwrap();
    cfg.model.seed = 9;
    let p = ModelParams::init(&cfg.model).unwrap();
    let path = dir.path().join("c.bin");
    checkpoint::save(&path, &cfg, &p).unwrap();
    let (cfg2, p2) = checkpoint::load(&path).unwrap();
    assert_eq!(cfg, cfg2);
    assert_eq!(bits(&p), bits(&p2));
    let x = Tensor::randn(&[cfg.model.gmha.seq_len, cfg.model.gmha.model_dim], 1.0, &mut SeededRng::new(1));
    let (a, _) = block_forward(&x, &p, &cfg.model, &mut ForwardOptions::default()).unwrap();
    let (b, _) = block_forward(&x, &p2, &cfg2.model, &mut ForwardOptions::default()).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.bin");
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(checkpoint::load(&path).is_err());
}
