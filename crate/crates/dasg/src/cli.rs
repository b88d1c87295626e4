//! Command line front end.
//!
//! Exit codes: 0 on success, 1 when arguments or configuration are invalid,
//! 2 when a run fails (divergence, IO, a failed gradient check).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::checkpoint;
use crate::config::{ConfigError, RunConfig};
use crate::harness::{self, RunTimings};
use crate::report::{write_csv, write_json, JsonlWriter};

pub const OUT_DIR_ENV: &str = "DASG_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "dasg", version, about = "Dynamic sparse expert block: training, ablations and benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML configuration layered over the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed; applied after the file and overrides.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = OUT_DIR_ENV, default_value = "dasg-out")]
    pub out: PathBuf,
    /// Configuration overrides as dotted `key=value` pairs.
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on the configured task and save a checkpoint.
    Train(Common),
    /// Adaptive against random routing over several seeds.
    AblateRouting(Common),
    /// Accuracy and attention cost across group counts.
    AblateGroups(Common),
    /// Deep-tier activation rate against accuracy as θ_d varies.
    SweepActivation(Common),
    /// Grouped windowed attention against dense attention.
    BenchAttn(Common),
    /// Tape gradients against central differences on a small model.
    GradCheck(Common),
    /// Per-token routing traces of a few test samples.
    InspectRouting {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to inspect; a fresh initialisation otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        samples: usize,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::AblateRouting(_) => "ablate-routing",
            Command::AblateGroups(_) => "ablate-groups",
            Command::SweepActivation(_) => "sweep-activation",
            Command::BenchAttn(_) => "bench-attn",
            Command::GradCheck(_) => "grad-check",
            Command::InspectRouting { .. } => "inspect-routing",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Train(c)
            | Command::AblateRouting(c)
            | Command::AblateGroups(c)
            | Command::SweepActivation(c)
            | Command::BenchAttn(c)
            | Command::GradCheck(c) => c,
            Command::InspectRouting { common, .. } => common,
        }
    }

    fn needs_seed(&self) -> bool {
        matches!(
            self,
            Command::Train(_) | Command::AblateRouting(_) | Command::AblateGroups(_) | Command::SweepActivation(_)
        )
    }
}

/// Parses, runs, prints a one-line summary and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &anyhow::Error) -> i32 {
    if e.chain().any(|c| c.downcast_ref::<ConfigError>().is_some()) {
        1
    } else {
        2
    }
}

/// The effective configuration of a command.
pub fn resolve_config(cmd: &Command) -> Result<RunConfig, ConfigError> {
    let c = cmd.common();
    let mut overrides = c.overrides.clone();
    match c.seed {
        Some(s) => overrides.push(format!("seed={s}")),
        None if cmd.needs_seed() && !seed_elsewhere(c) => {
            return Err(ConfigError::Invalid {
                field: "--seed".into(),
                reason: format!("`{}` requires an explicit seed", cmd.name()),
            })
        }
        None => {}
    }
    RunConfig::layered(c.config.as_deref(), &overrides)
}

/// True when the config file or a `seed=` override provides the seed.
fn seed_elsewhere(c: &Common) -> bool {
    let in_overrides = c.overrides.iter().any(|o| o.split_once('=').is_some_and(|(k, _)| k.trim() == "seed"));
    let in_file = c
        .config
        .as_deref()
        .and_then(|p| std::fs::read_to_string(p).ok())
        .and_then(|s| s.parse::<toml::Table>().ok())
        .is_some_and(|t| t.contains_key("seed"));
    in_overrides || in_file
}

fn write_timings(out: &Path, command: &str, t: &RunTimings) -> Result<()> {
    write_json(&out.join("timings.json"), &json!({ "command": command, "timings": t }))
}

/// Runs a command; returns its summary line.
pub fn execute(cmd: &Command) -> Result<String> {
    let cfg = resolve_config(cmd)?;
    let out = cmd.common().out.clone();
    let name = cmd.name();
    match cmd {
        Command::Train(_) => {
            let run = harness::run_training(&cfg)?;
            let mut w = JsonlWriter::with_config(&out.join("report.jsonl"), name, &cfg)?;
            for e in &run.report.epochs {
                w.record("epoch", e)?;
            }
            w.record("summary", &run.report)?;
            w.finish()?;
            #[derive(Serialize)]
            struct Row {
                epoch: usize,
                train_loss: f64,
                train_accuracy: f64,
                test_loss: f64,
                test_accuracy: f64,
                deep_rate: f64,
                mean_k: f64,
            }
            let rows: Vec<Row> = run
                .report
                .epochs
                .iter()
                .map(|e| {
                    let t = e.test.clone().unwrap_or_default();
                    Row {
                        epoch: e.epoch,
                        train_loss: e.train_loss,
                        train_accuracy: e.train_accuracy,
                        test_loss: t.loss,
                        test_accuracy: t.accuracy,
                        deep_rate: t.deep_rate,
                        mean_k: t.mean_k,
                    }
                })
                .collect();
            write_csv(&out.join("summary.csv"), &rows)?;
            checkpoint::save(&out.join("checkpoint.bin"), &cfg, &run.params)?;
            write_timings(&out, name, &run.timings)?;
            let t = &run.report.final_test;
            Ok(format!(
                "train: task {} seed {} test accuracy {:.4} loss {:.4} deep rate {:.3} -> {}",
                run.report.task,
                cfg.seed,
                t.accuracy,
                t.loss,
                t.deep_rate,
                out.display()
            ))
        }
        Command::AblateRouting(_) => {
            let mut timings = RunTimings::default();
            let r = harness::ablation_routing(&cfg, &mut timings)?;
            let mut w = JsonlWriter::with_config(&out.join("ablate_routing.jsonl"), name, &cfg)?;
            for run in &r.runs {
                w.record("seed", run)?;
            }
            w.record(
                "summary",
                &json!({ "task": r.task, "mean_adaptive": r.mean_adaptive, "mean_random": r.mean_random, "difference": r.difference }),
            )?;
            w.finish()?;
            write_csv(&out.join("ablate_routing.csv"), &r.runs)?;
            write_timings(&out, name, &timings)?;
            Ok(format!(
                "ablate-routing: task {} {} seeds adaptive {:.4} random {:.4} difference {:+.4} -> {}",
                r.task,
                r.runs.len(),
                r.mean_adaptive,
                r.mean_random,
                r.difference,
                out.display()
            ))
        }
        Command::AblateGroups(_) => {
            let mut timings = RunTimings::default();
            let r = harness::ablation_groups(&cfg, &mut timings)?;
            let mut w = JsonlWriter::with_config(&out.join("ablate_groups.jsonl"), name, &cfg)?;
            for row in &r.rows {
                w.record("groups", row)?;
            }
            w.finish()?;
            #[derive(Serialize)]
            struct Row {
                groups: usize,
                window: usize,
                finite_pairs: usize,
                full_pairs: usize,
                pair_ratio: f64,
                mean_accuracy: f64,
                std_accuracy: f64,
            }
            let rows: Vec<Row> = r
                .rows
                .iter()
                .map(|g| Row {
                    groups: g.groups,
                    window: g.window,
                    finite_pairs: g.cost.grouped_finite_pairs,
                    full_pairs: g.cost.full_pairs,
                    pair_ratio: g.cost.ratio,
                    mean_accuracy: g.mean_accuracy,
                    std_accuracy: g.std_accuracy,
                })
                .collect();
            write_csv(&out.join("ablate_groups.csv"), &rows)?;
            write_timings(&out, name, &timings)?;
            let parts: Vec<String> = r.rows.iter().map(|g| format!("G={} {:.4}", g.groups, g.mean_accuracy)).collect();
            Ok(format!("ablate-groups: task {} {} -> {}", r.task, parts.join(", "), out.display()))
        }
        Command::SweepActivation(_) => {
            let mut timings = RunTimings::default();
            let r = harness::sweep_activation(&cfg, &mut timings)?;
            let mut w = JsonlWriter::with_config(&out.join("sweep_activation.jsonl"), name, &cfg)?;
            for seed in &r.seeds {
                w.record("seed", seed)?;
            }
            for p in &r.points {
                w.record("point", p)?;
            }
            let (above, below) = r.best_above_and_below(0.1);
            w.record(
                "summary",
                &json!({ "task": r.task, "rate_monotone": r.rate_monotone, "best_above_0.1": above, "best_at_or_below_0.1": below }),
            )?;
            w.finish()?;
            write_csv(&out.join("sweep_activation.csv"), &r.points)?;
            write_timings(&out, name, &timings)?;
            let best = r.points.iter().max_by(|a, b| a.accuracy.total_cmp(&b.accuracy));
            Ok(match best {
                Some(b) => format!(
                    "sweep-activation: task {} best mean accuracy {:.4} at deep rate {:.3}, rate monotone {} -> {}",
                    r.task,
                    b.accuracy,
                    b.deep_rate,
                    r.rate_monotone,
                    out.display()
                ),
                None => format!("sweep-activation: no thresholds -> {}", out.display()),
            })
        }
        Command::BenchAttn(_) => {
            let rows = harness::bench_attention(&cfg)?;
            let mut w = JsonlWriter::with_config(&out.join("bench_attn.jsonl"), name, &cfg)?;
            for r in &rows {
                w.record("case", r)?;
            }
            w.finish()?;
            write_csv(&out.join("bench_attn.csv"), &rows)?;
            let parts: Vec<String> = rows
                .iter()
                .map(|r| format!("N={} G={} w={} pairs {:.4} time {:.3}", r.seq_len, r.groups, r.window, r.pair_ratio, r.time_ratio))
                .collect();
            Ok(format!("bench-attn: {} -> {}", parts.join("; "), out.display()))
        }
        Command::GradCheck(_) => {
            let r = harness::grad_check_model(&cfg)?;
            #[derive(Serialize)]
            struct Row<'a> {
                name: &'a str,
                frozen: bool,
                elements: usize,
                checked: usize,
                skipped_kinks: usize,
                max_rel_error: f64,
                max_abs_error: f64,
                max_tape_grad: f64,
            }
            let rows: Vec<Row> = r
                .params
                .iter()
                .map(|p| Row {
                    name: &p.name,
                    frozen: p.frozen,
                    elements: p.elements,
                    checked: p.checked,
                    skipped_kinks: p.skipped_kinks,
                    max_rel_error: p.max_rel_error,
                    max_abs_error: p.max_abs_error,
                    max_tape_grad: p.max_tape_grad,
                })
                .collect();
            let mut w = JsonlWriter::with_config(&out.join("grad_check.jsonl"), name, &cfg)?;
            for row in &rows {
                w.record("param", row)?;
            }
            w.record(
                "summary",
                &json!({
                    "loss": r.loss,
                    "tolerance": r.tolerance,
                    "checked": r.checked(),
                    "skipped_kinks": r.skipped(),
                    "max_rel_error": r.max_rel_error(),
                    "frozen_grads_zero": r.frozen_grads_zero(),
                    "passed": r.passed(),
                }),
            )?;
            w.finish()?;
            write_csv(&out.join("grad_check.csv"), &rows)?;
            let line = format!(
                "grad-check: {} elements checked, {} kinks skipped, max relative error {:.3e} (tolerance {:.0e}) -> {}",
                r.checked(),
                r.skipped(),
                r.max_rel_error(),
                r.tolerance,
                out.display()
            );
            if !r.passed() {
                bail!("gradient check failed: {line}");
            }
            Ok(line)
        }
        Command::InspectRouting { checkpoint: ckpt, samples, .. } => {
            let (cfg, params) = match ckpt {
                Some(path) => {
                    let (saved, params) = checkpoint::load(path)?;
                    let mut cfg = cfg;
                    cfg.model = saved.model;
                    cfg.task = saved.task;
                    (cfg, params)
                }
                None => {
                    let p = dasg_core::model::ModelParams::init(&cfg.model)?;
                    (cfg, p)
                }
            };
            let (per_sample, per_token) = harness::inspect_routing(&cfg, &params, *samples)?;
            let mut w = JsonlWriter::create(&out.join("routing_trace.jsonl"))?;
            for t in &per_token {
                w.write(t)?;
            }
            w.finish()?;
            let mut w = JsonlWriter::with_config(&out.join("forward_trace.jsonl"), name, &cfg)?;
            for s in &per_sample {
                w.record("sample", s)?;
            }
            w.finish()?;
            let calls: usize = per_sample.iter().map(|s| s.calls.total()).sum();
            Ok(format!(
                "inspect-routing: {} samples, {} token records, {} expert calls -> {}",
                per_sample.len(),
                per_token.len(),
                calls,
                out.display()
            ))
        }
    }
}
