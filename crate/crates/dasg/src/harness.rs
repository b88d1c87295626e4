//! Training loops, ablations and benchmarks on the synthetic tasks.
//!
//! Every run is a pure function of its configuration and seed. Wall-clock
//! measurements are collected next to the results but kept out of the
//! deterministic report structures.

use std::time::Instant;

use anyhow::{bail, Context, Result};
use dasg_core::experts::{CallCounter, RouteMode};
use dasg_core::gmha::{self, attention_cost, CostReport, GmhaConfig};
use dasg_core::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use dasg_core::kernels;
use dasg_core::model::{
    self, block_forward, loss_and_grads, Clock, ForwardOptions, ForwardTrace, ModelConfig, ModelParams,
    RouterTraining, StageTimings, TierMode,
};
use dasg_core::params::{self, checksum};
use dasg_core::routing::{PolicyVariant, Tier};
use dasg_core::tasks::{Sample, Task};
use dasg_core::{Parameters, SeededRng, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{OptimizerKind, RunConfig, ThresholdGrid, TrainConfig};

/// Nanoseconds since construction.
#[derive(Debug, Clone, Copy)]
pub struct StdClock(Instant);

impl StdClock {
    pub fn new() -> Self {
        Self(Instant::now())
    }
}

impl Default for StdClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for StdClock {
    fn now_ns(&self) -> u64 {
        self.0.elapsed().as_nanos() as u64
    }
}

const TAG_TRAIN: u64 = 1;
const TAG_TEST: u64 = 2;
const TAG_SHUFFLE: u64 = 3;
const TAG_ROUTE: u64 = 4;
const TAG_EVAL_ROUTE: u64 = 5;

/// A seed for one purpose, derived from the run seed.
pub fn derived_seed(seed: u64, tag: u64) -> u64 {
    SeededRng::new(seed).fork(tag).next_u64()
}

pub fn checksum_hex<P: Parameters + ?Sized>(p: &P) -> String {
    format!("{:016x}", checksum(p))
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn generate(cfg: &RunConfig, seed: u64) -> Result<Self> {
        let task = Task::new(cfg.task)?;
        Ok(Self {
            train: task.dataset(derived_seed(seed, TAG_TRAIN), cfg.train.train_size),
            test: task.dataset(derived_seed(seed, TAG_TEST), cfg.train.test_size),
        })
    }
}

/// First-order optimizers over the trainable, unfrozen tensors of a model.
/// State slots follow parameter visiting order.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: TrainConfig,
    steps: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            cfg: cfg.clone(),
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Applies the gradient buffers, then zeroes them.
    pub fn step<P: Parameters + ?Sized>(&mut self, params: &mut P) {
        self.steps += 1;
        let (lr, mu, b2) = (self.cfg.lr, self.cfg.momentum, self.cfg.beta2);
        let kind = self.cfg.optimizer;
        let bc1 = 1.0 - mu.powi(self.steps);
        let bc2 = 1.0 - b2.powi(self.steps);
        let (first, second) = (&mut self.first, &mut self.second);
        let mut slot = 0;
        params.visit_mut(&mut |_, t| {
            if first.len() <= slot {
                first.push(vec![0.0; t.len()]);
                second.push(if kind == OptimizerKind::Adam { vec![0.0; t.len()] } else { Vec::new() });
            }
            if t.is_trainable() {
                if let Some(g) = t.grad().map(<[f64]>::to_vec) {
                    let m = &mut first[slot];
                    let v = &mut second[slot];
                    let w = t.data_mut();
                    match kind {
                        OptimizerKind::Sgd => {
                            for (w, g) in w.iter_mut().zip(&g) {
                                *w -= lr * g;
                            }
                        }
                        OptimizerKind::Momentum => {
                            for ((w, g), m) in w.iter_mut().zip(&g).zip(m.iter_mut()) {
                                *m = mu * *m + g;
                                *w -= lr * *m;
                            }
                        }
                        OptimizerKind::Adam => {
                            for (((w, g), m), v) in w.iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                                *m = mu * *m + (1.0 - mu) * g;
                                *v = b2 * *v + (1.0 - b2) * g * g;
                                *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + 1e-8);
                            }
                        }
                    }
                }
            }
            t.zero_grad();
            slot += 1;
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    /// Learned routers.
    Adaptive,
    /// Uniformly random tier and experts per token.
    Random,
}

/// Held-out performance and routing statistics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub samples: usize,
    pub accuracy: f64,
    pub loss: f64,
    pub tokens: usize,
    /// Fraction of expert executions in the deep tier.
    pub deep_rate: f64,
    /// Fraction of tokens whose decision names each tier (shallow, deep).
    pub tier_rates: [f64; 2],
    pub mean_k: f64,
    pub expert_calls: usize,
    /// Executions per expert.
    pub expert_load: CallCounter,
}

#[derive(Debug, Clone, Default)]
struct EvalAccumulator {
    stats: EvalStats,
    deep_tokens: usize,
    k_sum: usize,
    correct: usize,
}

impl EvalAccumulator {
    fn add(&mut self, logits: &Tensor, label: usize, trace: &ForwardTrace) {
        let s = &mut self.stats;
        s.samples += 1;
        let mut lp = vec![0.0; logits.len()];
        kernels::log_softmax_rows(logits.data(), logits.len(), &mut lp);
        s.loss -= lp[label];
        if kernels::argmax(logits.data()) == label {
            self.correct += 1;
        }
        s.tokens += trace.tokens.len();
        self.deep_tokens += trace.tokens.iter().filter(|t| t.decision.tier == Tier::Deep).count();
        self.k_sum += trace.tokens.iter().map(|t| t.decision.k_i).sum::<usize>();
        s.expert_load.merge(&trace.calls);
    }

    fn finish(mut self) -> EvalStats {
        let s = &mut self.stats;
        let n = s.samples.max(1) as f64;
        s.accuracy = self.correct as f64 / n;
        s.loss /= n;
        let t = s.tokens.max(1) as f64;
        s.tier_rates = [1.0 - self.deep_tokens as f64 / t, self.deep_tokens as f64 / t];
        s.mean_k = self.k_sum as f64 / t;
        s.expert_calls = s.expert_load.total();
        s.deep_rate = if s.expert_calls == 0 {
            0.0
        } else {
            s.expert_load.tier_total(Tier::Deep) as f64 / s.expert_calls as f64
        };
        self.stats
    }
}

/// Forward passes over `samples`.
pub fn evaluate(
    params: &ModelParams,
    cfg: &ModelConfig,
    samples: &[Sample],
    routing: Routing,
    route_seed: u64,
    clock: Option<&dyn Clock>,
    timings: &mut StageTimings,
) -> Result<EvalStats> {
    let mut acc = EvalAccumulator::default();
    let mut rng = SeededRng::new(route_seed);
    for s in samples {
        let route = match routing {
            Routing::Adaptive => RouteMode::Adaptive,
            Routing::Random => RouteMode::Random(&mut rng),
        };
        let mut opts = ForwardOptions {
            route,
            score_hook: None,
            clock,
        };
        let (logits, trace) = block_forward(&s.tokens, params, cfg, &mut opts)?;
        timings.merge(&trace.timings);
        acc.add(&logits, s.label, &trace);
    }
    Ok(acc.finish())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    /// Mean REINFORCE reward; 0 unless that router training is active.
    pub mean_reward: f64,
    /// Present when the epoch was evaluated.
    pub test: Option<EvalStats>,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub routing: Routing,
    pub epochs: usize,
    /// Seed for shuffling and random routing.
    pub seed: u64,
    /// Evaluate on the test split after every epoch, not only the last.
    pub eval_every_epoch: bool,
}

/// Wall-clock totals of a run; reported separately from results.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTimings {
    pub train_stages: StageTimings,
    pub eval_stages: StageTimings,
    pub wall_ns: u64,
}

/// Trains `params` in place. The last epoch is always evaluated.
pub fn train(
    params: &mut ModelParams,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    data: &Dataset,
    opts: &TrainOptions,
    timings: &mut RunTimings,
) -> Result<Vec<EpochReport>> {
    let clock = StdClock::new();
    let mut opt = Optimizer::new(tcfg);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut shuffle = SeededRng::new(derived_seed(opts.seed, TAG_SHUFFLE));
    let mut route_rng = SeededRng::new(derived_seed(opts.seed, TAG_ROUTE));
    let mut baseline: Option<f64> = None;
    let mut reports = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        shuffle.shuffle(&mut order);
        let (mut loss_sum, mut correct, mut reward_sum, mut batches) = (0.0, 0, 0.0, 0);
        for (b, chunk) in order.chunks(tcfg.batch_size).enumerate() {
            let batch: Vec<(&Tensor, usize)> = chunk.iter().map(|&i| (&data.train[i].tokens, data.train[i].label)).collect();
            let rng = match opts.routing {
                Routing::Adaptive => None,
                Routing::Random => Some(&mut route_rng),
            };
            let stats = loss_and_grads(&batch, params, cfg, rng, baseline.unwrap_or(0.0), Some(&clock))
                .with_context(|| format!("training diverged at epoch {epoch}, batch {b}"))?;
            if !(stats.loss <= tcfg.divergence_limit) {
                bail!(
                    "training diverged at epoch {epoch}, batch {b}: loss {} exceeds {} (stage: loss)",
                    stats.loss,
                    tcfg.divergence_limit
                );
            }
            if cfg.router_training == RouterTraining::Reinforce {
                let d = tcfg.baseline_decay;
                baseline = Some(match baseline {
                    Some(b) => d * b + (1.0 - d) * stats.mean_reward,
                    None => stats.mean_reward,
                });
            }
            timings.train_stages.merge(&stats.timings);
            loss_sum += stats.loss * chunk.len() as f64;
            correct += stats.correct;
            reward_sum += stats.mean_reward;
            batches += 1;
            opt.step(params);
        }
        let last = epoch + 1 == opts.epochs;
        let test = if last || opts.eval_every_epoch {
            let seed = derived_seed(opts.seed, TAG_EVAL_ROUTE);
            Some(evaluate(params, cfg, &data.test, opts.routing, seed, Some(&clock), &mut timings.eval_stages)?)
        } else {
            None
        };
        let n = data.train.len().max(1) as f64;
        reports.push(EpochReport {
            epoch,
            train_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            mean_reward: reward_sum / batches.max(1) as f64,
            test,
        });
    }
    timings.wall_ns += clock.now_ns();
    Ok(reports)
}

/// Attention and expert cost counters of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostCounters {
    pub attention: CostReport,
    /// `N · w`, the sliding-window bound on finite pairs.
    pub window_bound: usize,
    /// Expert executions on the test split after training.
    pub test_expert_calls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub task: String,
    pub seed: u64,
    pub init_checksum: String,
    pub final_checksum: String,
    pub epochs: Vec<EpochReport>,
    pub final_test: EvalStats,
    pub cost: CostCounters,
}

pub struct TrainOutcome {
    pub report: RunReport,
    pub params: ModelParams,
    pub timings: RunTimings,
}

/// Seeded end-to-end training run on the configured task.
pub fn run_training(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = cfg.model;
    model.seed = cfg.seed;
    let data = Dataset::generate(cfg, cfg.seed)?;
    let mut params = ModelParams::init(&model)?;
    let init_checksum = checksum_hex(&params);
    let mut timings = RunTimings::default();
    let opts = TrainOptions {
        routing: Routing::Adaptive,
        epochs: cfg.train.epochs,
        seed: cfg.seed,
        eval_every_epoch: true,
    };
    let epochs = train(&mut params, &model, &cfg.train, &data, &opts, &mut timings)?;
    let final_test = epochs.last().and_then(|e| e.test.clone()).unwrap_or_default();
    let g = &model.gmha;
    let report = RunReport {
        task: cfg.task.kind.name().to_string(),
        seed: cfg.seed,
        init_checksum,
        final_checksum: checksum_hex(&params),
        cost: CostCounters {
            attention: attention_cost(g),
            window_bound: g.seq_len * g.window,
            test_expert_calls: final_test.expert_calls,
        },
        final_test,
        epochs,
    };
    Ok(TrainOutcome {
        report,
        params,
        timings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingArms {
    pub seed: u64,
    /// Both arms start from these parameters.
    pub init_checksum: String,
    pub adaptive_accuracy: f64,
    pub random_accuracy: f64,
    pub adaptive_deep_rate: f64,
    pub random_deep_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingAblation {
    pub task: String,
    pub runs: Vec<RoutingArms>,
    pub mean_adaptive: f64,
    pub mean_random: f64,
    /// `mean_adaptive − mean_random`.
    pub difference: f64,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs.iter().copied());
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn seeds(cfg: &RunConfig) -> impl Iterator<Item = u64> {
    let base = cfg.seed;
    (0..cfg.ablation.seeds as u64).map(move |i| base.wrapping_add(i))
}

/// Adaptive against random routing from identical initial parameters and
/// data, one pair of runs per seed.
pub fn ablation_routing(cfg: &RunConfig, timings: &mut RunTimings) -> Result<RoutingAblation> {
    cfg.validate()?;
    let mut runs = Vec::new();
    for seed in seeds(cfg) {
        let mut model = cfg.model;
        model.seed = seed;
        let data = Dataset::generate(cfg, seed)?;
        let init = ModelParams::init(&model)?;
        let mut accs = [0.0; 2];
        let mut rates = [0.0; 2];
        let mut sums = [String::new(), String::new()];
        for (arm, routing) in [Routing::Adaptive, Routing::Random].into_iter().enumerate() {
            let mut params = init.clone();
            sums[arm] = checksum_hex(&params);
            let opts = TrainOptions {
                routing,
                epochs: cfg.train.epochs,
                seed,
                eval_every_epoch: false,
            };
            let epochs = train(&mut params, &model, &cfg.train, &data, &opts, timings)?;
            let t = epochs.last().and_then(|e| e.test.clone()).unwrap_or_default();
            accs[arm] = t.accuracy;
            rates[arm] = t.deep_rate;
        }
        if sums[0] != sums[1] {
            bail!("routing arms for seed {seed} started from different parameters");
        }
        runs.push(RoutingArms {
            seed,
            init_checksum: sums[0].clone(),
            adaptive_accuracy: accs[0],
            random_accuracy: accs[1],
            adaptive_deep_rate: rates[0],
            random_deep_rate: rates[1],
        });
    }
    let mean_adaptive = mean(runs.iter().map(|r| r.adaptive_accuracy));
    let mean_random = mean(runs.iter().map(|r| r.random_accuracy));
    Ok(RoutingAblation {
        task: cfg.task.kind.name().to_string(),
        runs,
        mean_adaptive,
        mean_random,
        difference: mean_adaptive - mean_random,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub groups: usize,
    pub window: usize,
    pub cost: CostReport,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAblation {
    pub task: String,
    pub rows: Vec<GroupRow>,
}

impl GroupAblation {
    pub fn mean_for(&self, groups: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.groups == groups).map(|r| r.mean_accuracy)
    }
}

/// Accuracy and attention cost for each group count, same seeds and data.
pub fn ablation_groups(cfg: &RunConfig, timings: &mut RunTimings) -> Result<GroupAblation> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &g in &cfg.ablation.groups {
        let mut model = cfg.model;
        model.gmha.num_groups = g;
        let mut accuracies = Vec::new();
        let seed_list: Vec<u64> = seeds(cfg).collect();
        for &seed in &seed_list {
            model.seed = seed;
            let data = Dataset::generate(cfg, seed)?;
            let mut params = ModelParams::init(&model)?;
            let opts = TrainOptions {
                routing: Routing::Adaptive,
                epochs: cfg.train.epochs,
                seed,
                eval_every_epoch: false,
            };
            let epochs = train(&mut params, &model, &cfg.train, &data, &opts, timings)?;
            accuracies.push(epochs.last().and_then(|e| e.test.as_ref()).map_or(0.0, |t| t.accuracy));
        }
        rows.push(GroupRow {
            groups: g,
            window: model.gmha.window,
            cost: attention_cost(&model.gmha),
            seeds: seed_list,
            mean_accuracy: mean(accuracies.iter().copied()),
            std_accuracy: std_dev(&accuracies),
            accuracies,
        });
    }
    Ok(GroupAblation {
        task: cfg.task.kind.name().to_string(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Grid value the thresholds came from.
    pub grid: f64,
    pub theta_s: f64,
    pub theta_d: f64,
    pub deep_rate: f64,
    pub accuracy: f64,
    pub mean_k: f64,
}

/// One seed of the activation sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSweep {
    pub seed: u64,
    /// Accuracy of the shallow-only pretrained model.
    pub pretrain_accuracy: f64,
    /// Complexity score quantiles (0, 10, 50, 90, 100%) on the test split.
    pub complexity_quantiles: [f64; 5],
    pub rows: Vec<SweepRow>,
    /// Whether the deep rate never increases with `θ_d`.
    pub rate_monotone: bool,
}

/// Across-seed means for one grid value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub grid: f64,
    pub deep_rate: f64,
    pub accuracy: f64,
    pub std_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationSweep {
    pub task: String,
    pub seeds: Vec<SeedSweep>,
    /// One point per grid value, in grid order.
    pub points: Vec<SweepPoint>,
    /// Deep rate is monotone non-increasing in `θ_d` for every seed.
    pub rate_monotone: bool,
}

impl ActivationSweep {
    /// Highest mean accuracy among points with deep rate above and at most
    /// `rate`.
    pub fn best_above_and_below(&self, rate: f64) -> (Option<f64>, Option<f64>) {
        let best = |keep: &dyn Fn(&SweepPoint) -> bool| {
            self.points.iter().filter(|p| keep(p)).map(|p| p.accuracy).fold(None, |m: Option<f64>, a| Some(m.map_or(a, |m| m.max(a))))
        };
        (best(&|p| p.deep_rate > rate), best(&|p| p.deep_rate <= rate))
    }
}

/// Prefixes of the parameters frozen during sweep finetuning: the attention
/// trunk and evaluator, so complexity scores are fixed across thresholds.
/// The evaluator alone is frozen from the start.
pub const SWEEP_FROZEN: [&str; 2] = ["gmha.", "evaluator."];

/// Complexity scores of every token of `samples`, sorted.
pub fn complexity_scores(params: &ModelParams, cfg: &ModelConfig, samples: &[Sample]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for s in samples {
        let (_, trace) = block_forward(&s.tokens, params, cfg, &mut ForwardOptions::default())?;
        out.extend(trace.tokens.iter().map(|t| t.complexity));
    }
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// Nearest-rank quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    sorted[((sorted.len() - 1) as f64 * q.clamp(0.0, 1.0)).round() as usize]
}

fn quantiles(sorted: &[f64]) -> [f64; 5] {
    [0.0, 0.1, 0.5, 0.9, 1.0].map(|q| quantile(sorted, q))
}

fn freeze_prefixes(p: &mut ModelParams, prefixes: &[&str]) {
    p.visit_mut(&mut |name, t| {
        if prefixes.iter().any(|pre| name.starts_with(pre)) {
            t.freeze();
        }
    });
}

/// Deep-tier activation against accuracy as `θ_d` varies.
///
/// Per seed, shallow experts are pretrained with every token routed to the
/// shallow tier and the evaluator frozen at initialisation, which keeps
/// complexity scores spread out. The deep tier is then rebuilt from the
/// trained shallow module. For each grid value a copy of that model is
/// finetuned in mixed-tier mode with the evaluator (and by default the
/// attention trunk) frozen, so every threshold sees the same scores.
pub fn sweep_activation(cfg: &RunConfig, timings: &mut RunTimings) -> Result<ActivationSweep> {
    cfg.validate()?;
    if cfg.model.policy.variant == PolicyVariant::TaskConditioned {
        bail!(crate::config::ConfigError::Invalid {
            field: "model.policy.variant".into(),
            reason: "the activation sweep varies thresholds; task_conditioned ignores them".into(),
        });
    }
    let seeds: Vec<SeedSweep> = (0..cfg.ablation.sweep_seeds as u64)
        .map(|i| sweep_seed(cfg, cfg.seed.wrapping_add(i), timings))
        .collect::<Result<_>>()?;
    let points = cfg
        .ablation
        .theta_d
        .iter()
        .enumerate()
        .map(|(j, &grid)| {
            let accs: Vec<f64> = seeds.iter().map(|s| s.rows[j].accuracy).collect();
            SweepPoint {
                grid,
                deep_rate: mean(seeds.iter().map(|s| s.rows[j].deep_rate)),
                accuracy: mean(accs.iter().copied()),
                std_accuracy: std_dev(&accs),
            }
        })
        .collect();
    Ok(ActivationSweep {
        task: cfg.task.kind.name().to_string(),
        rate_monotone: seeds.iter().all(|s| s.rate_monotone),
        seeds,
        points,
    })
}

fn sweep_seed(cfg: &RunConfig, seed: u64, timings: &mut RunTimings) -> Result<SeedSweep> {
    let mut model = cfg.model;
    model.seed = seed;
    model.tier_mode = TierMode::Mixed;
    let data = Dataset::generate(cfg, seed)?;
    let mut params = ModelParams::init(&model)?;
    freeze_prefixes(&mut params, &SWEEP_FROZEN[1..]);

    // Shallow-only pretraining: every complexity score falls below θ_s.
    let mut pre = model;
    pre.policy.theta_s = 1.0 - 1e-9;
    pre.policy.theta_d = 1.0 - 1e-10;
    let opts = TrainOptions {
        routing: Routing::Adaptive,
        epochs: cfg.ablation.pretrain_epochs.max(1),
        seed,
        eval_every_epoch: false,
    };
    let pre_epochs = train(&mut params, &pre, &cfg.train, &data, &opts, timings)?;
    let pretrain_accuracy = pre_epochs.last().and_then(|e| e.test.as_ref()).map_or(0.0, |t| t.accuracy);
    let mut rng = SeededRng::new(derived_seed(seed, 6));
    params.dsse.retransfer(model.deep_init, &mut rng);
    // The deep tier replicates the whole pretrained shallow module, so its
    // output projection and local router start from the shallow ones.
    params.dsse.out_d = params.dsse.out_s.clone();
    params.dsse.routers.deep = params.dsse.routers.shallow.clone();
    if cfg.ablation.freeze_trunk {
        freeze_prefixes(&mut params, &SWEEP_FROZEN);
    }
    let scores = complexity_scores(&params, &model, &data.test)?;
    let complexity_quantiles = quantiles(&scores);
    let threshold = |g: f64| match cfg.ablation.theta_grid {
        ThresholdGrid::Absolute => g,
        ThresholdGrid::Quantile => quantile(&scores, g).clamp(1e-9, 1.0 - 1e-9),
    };

    let mut rows = Vec::new();
    for &grid in &cfg.ablation.theta_d {
        let mut m = model;
        let theta_d = threshold(grid);
        m.policy.theta_d = theta_d;
        m.policy.theta_s = threshold(cfg.ablation.theta_s_ratio * grid).min(theta_d * (1.0 - 1e-9));
        m.validate()?;
        let mut p = params.clone();
        let opts = TrainOptions {
            routing: Routing::Adaptive,
            epochs: cfg.ablation.finetune_epochs.max(1),
            seed: derived_seed(seed, 7),
            eval_every_epoch: false,
        };
        let epochs = train(&mut p, &m, &cfg.train, &data, &opts, timings)?;
        let t = epochs.last().and_then(|e| e.test.clone()).unwrap_or_default();
        rows.push(SweepRow {
            grid,
            theta_s: m.policy.theta_s,
            theta_d,
            deep_rate: t.deep_rate,
            accuracy: t.accuracy,
            mean_k: t.mean_k,
        });
    }
    let mut sorted: Vec<&SweepRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.theta_d.total_cmp(&b.theta_d));
    let rate_monotone = sorted.windows(2).all(|w| w[1].deep_rate <= w[0].deep_rate);
    Ok(SeedSweep {
        seed,
        pretrain_accuracy,
        complexity_quantiles,
        rows,
        rate_monotone,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub seq_len: usize,
    pub groups: usize,
    pub window: usize,
    pub finite_pairs: usize,
    pub full_pairs: usize,
    pub pair_ratio: f64,
    /// `N · w`.
    pub window_bound: usize,
    pub grouped_median_ns: u64,
    pub full_median_ns: u64,
    pub time_ratio: f64,
}

fn median(mut xs: Vec<u64>) -> u64 {
    xs.sort_unstable();
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2
    }
}

fn time_attention(x: &Tensor, w: [&Tensor; 3], g: &GmhaConfig, warmup: usize, reps: usize) -> Result<u64> {
    for _ in 0..warmup {
        std::hint::black_box(gmha::windowed_attention_core(x, w[0], w[1], w[2], g)?);
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        std::hint::black_box(gmha::windowed_attention_core(x, w[0], w[1], w[2], g)?);
        samples.push(t.elapsed().as_nanos() as u64);
    }
    Ok(median(samples))
}

/// Finite-pair counts and median wall-clock of grouped windowed attention
/// against dense full attention (one group, window `2N − 1`) on the same
/// inputs.
pub fn bench_attention(cfg: &RunConfig) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let b = &cfg.bench;
    let mut rows = Vec::new();
    for (i, case) in b.cases.iter().enumerate() {
        let grouped = GmhaConfig {
            seq_len: case.seq_len,
            model_dim: b.model_dim,
            num_heads: b.num_heads,
            num_groups: case.groups,
            window: case.window,
            ff_dim: 1,
        };
        let full = GmhaConfig {
            num_groups: 1,
            window: 2 * case.seq_len - 1,
            ..grouped
        };
        let mut rng = SeededRng::new(derived_seed(cfg.seed, 100 + i as u64));
        let d = b.model_dim;
        let x = Tensor::randn(&[case.seq_len, d], 1.0, &mut rng);
        let s = (1.0 / d as f64).sqrt();
        let wq = Tensor::randn(&[d, d], s, &mut rng);
        let wk = Tensor::randn(&[d, d], s, &mut rng);
        let wv = Tensor::randn(&[d, d], s, &mut rng);
        let ws = [&wq, &wk, &wv];
        let g_ns = time_attention(&x, ws, &grouped, b.warmup, b.repetitions)?;
        let f_ns = time_attention(&x, ws, &full, b.warmup, b.repetitions)?;
        let cost = attention_cost(&grouped);
        rows.push(BenchRow {
            seq_len: case.seq_len,
            groups: case.groups,
            window: case.window,
            finite_pairs: cost.grouped_finite_pairs,
            full_pairs: cost.full_pairs,
            pair_ratio: cost.ratio,
            window_bound: case.seq_len * case.window,
            grouped_median_ns: g_ns,
            full_median_ns: f_ns,
            time_ratio: g_ns as f64 / f_ns.max(1) as f64,
        });
    }
    Ok(rows)
}

/// Geometry for the full-model gradient check: small enough for central
/// differences over every parameter.
pub fn grad_check_config(base: &ModelConfig) -> ModelConfig {
    ModelConfig {
        gmha: GmhaConfig {
            seq_len: 8,
            model_dim: 8,
            num_heads: 2,
            num_groups: 2,
            window: 3,
            ff_dim: 8,
        },
        eval_hidden: 4,
        d_hidden: 8,
        // Surrogate router gradients are not derivatives of the loss.
        router_training: RouterTraining::None,
        ..*base
    }
}

/// Tape gradients of the block's cross-entropy against central
/// differences, at the small geometry of [`grad_check_config`].
pub fn grad_check_model(cfg: &RunConfig) -> Result<GradCheckReport> {
    let mut model = grad_check_config(&cfg.model);
    model.seed = cfg.seed;
    let mut params = ModelParams::init(&model)?;
    let n = model.gmha.seq_len;
    let x = Tensor::randn(&[n, model.gmha.model_dim], 1.0, &mut SeededRng::new(derived_seed(cfg.seed, 8)));
    let label = (cfg.seed % model.num_classes as u64) as usize;
    let report = grad_check(
        &mut params,
        |t, p| {
            let b = model::record_block(t, &x, p, &model, &mut ForwardOptions::default())?;
            model::cross_entropy(t, b.logits, label)
        },
        GradCheckConfig {
            step: 1e-6,
            tolerance: 1e-3,
            floor: 1e-6,
        },
    )?;
    Ok(report)
}

/// One routed token of an inspected sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub sample: usize,
    pub token: usize,
    pub importance: f64,
    pub complexity: f64,
    pub k_i: usize,
    pub k_s: usize,
    pub k_d: usize,
    pub tier: Tier,
    pub experts: Vec<usize>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample: usize,
    pub label: usize,
    pub predicted: usize,
    pub logits: Vec<f64>,
    pub tokens: usize,
    pub calls: CallCounter,
    pub expected_calls: usize,
    pub deep_rate: f64,
    pub timings: StageTimings,
}

/// Forward traces of `count` test samples.
pub fn inspect_routing(
    cfg: &RunConfig,
    params: &ModelParams,
    count: usize,
) -> Result<(Vec<SampleRecord>, Vec<TokenRecord>)> {
    let task = Task::new(cfg.task)?;
    let samples = task.dataset(derived_seed(cfg.seed, TAG_TEST), count);
    let clock = StdClock::new();
    let mut per_sample = Vec::new();
    let mut per_token = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let mut opts = ForwardOptions {
            clock: Some(&clock),
            ..Default::default()
        };
        let (logits, trace) = block_forward(&s.tokens, params, &cfg.model, &mut opts)?;
        model::check_trace(&trace, &cfg.model)?;
        for t in &trace.tokens {
            per_token.push(TokenRecord {
                sample: i,
                token: t.token,
                importance: t.importance,
                complexity: t.complexity,
                k_i: t.decision.k_i,
                k_s: t.decision.k_s,
                k_d: t.decision.k_d,
                tier: t.decision.tier,
                experts: t.decision.experts.clone(),
                weights: t.decision.gate_weights.clone(),
            });
        }
        per_sample.push(SampleRecord {
            sample: i,
            label: s.label,
            predicted: kernels::argmax(logits.data()),
            logits: logits.data().to_vec(),
            tokens: trace.tokens.len(),
            calls: trace.calls,
            expected_calls: trace.expected_calls(),
            deep_rate: trace.deep_rate(),
            timings: trace.timings,
        });
    }
    Ok((per_sample, per_token))
}

/// Number of trainable parameters.
pub fn trainable_count(p: &ModelParams) -> usize {
    let mut n = 0;
    p.visit(&mut |_, t| {
        if t.is_trainable() {
            n += t.len();
        }
    });
    n
}

/// Resets every gradient buffer.
pub fn clear_grads(p: &mut ModelParams) {
    params::zero_grads(p);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(w: f64, g: f64) -> Vec<Tensor> {
        let mut t = Tensor::new(&[1], vec![w]).unwrap().trainable();
        t.accumulate_grad(&[g]);
        vec![t]
    }

    fn train_cfg(kind: OptimizerKind) -> TrainConfig {
        TrainConfig {
            optimizer: kind,
            lr: 0.1,
            momentum: 0.9,
            beta2: 0.999,
            ..Default::default()
        }
    }

    #[test]
    fn sgd_and_momentum_follow_their_update_rules() {
        let mut p = one_param(1.0, 2.0);
        Optimizer::new(&train_cfg(OptimizerKind::Sgd)).step(&mut p);
        assert!((p[0].data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(p[0].grad().unwrap(), &[0.0]);

        let mut opt = Optimizer::new(&train_cfg(OptimizerKind::Momentum));
        let mut p = one_param(1.0, 1.0);
        opt.step(&mut p);
        p[0].accumulate_grad(&[1.0]);
        opt.step(&mut p);
        // Velocities 1 then 1.9.
        assert!((p[0].data()[0] - (1.0 - 0.1 - 0.19)).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_the_learning_rate() {
        for g in [1e-4, 3.0, -7.0] {
            let mut p = one_param(0.0, g);
            Optimizer::new(&train_cfg(OptimizerKind::Adam)).step(&mut p);
            let want = -0.1 * g / (g.abs() + 1e-8);
            assert!((p[0].data()[0] - want).abs() < 1e-12, "g = {g}");
        }
    }

    #[test]
    fn frozen_tensors_are_not_updated() {
        let mut p = one_param(1.0, 2.0);
        p[0].freeze();
        Optimizer::new(&train_cfg(OptimizerKind::Adam)).step(&mut p);
        assert_eq!(p[0].data(), &[1.0]);
    }

    #[test]
    fn quantiles_pick_order_statistics() {
        let xs: Vec<f64> = (0..11).map(f64::from).collect();
        assert_eq!(quantile(&xs, 0.0), 0.0);
        assert_eq!(quantile(&xs, 0.5), 5.0);
        assert_eq!(quantile(&xs, 1.0), 10.0);
        assert_eq!(quantiles(&xs), [0.0, 1.0, 5.0, 9.0, 10.0]);
        assert_eq!(quantile(&[], 0.3), 0.0);
    }

    #[test]
    fn derived_seeds_differ_by_tag_and_are_stable() {
        assert_eq!(derived_seed(7, 1), derived_seed(7, 1));
        assert_ne!(derived_seed(7, 1), derived_seed(7, 2));
        assert_ne!(derived_seed(7, 1), derived_seed(8, 1));
    }

    #[test]
    fn median_handles_both_parities() {
        assert_eq!(median(vec![5, 1, 3]), 3);
        assert_eq!(median(vec![4, 1, 3, 2]), 2);
    }

    #[test]
    fn sweep_comparison_splits_at_the_rate() {
        let pt = |deep_rate, accuracy| SweepPoint {
            grid: 0.0,
            deep_rate,
            accuracy,
            std_accuracy: 0.0,
        };
        let s = ActivationSweep {
            task: "needle".into(),
            seeds: Vec::new(),
            points: vec![pt(0.9, 0.7), pt(0.3, 0.8), pt(0.1, 0.75), pt(0.0, 0.6)],
            rate_monotone: true,
        };
        assert_eq!(s.best_above_and_below(0.1), (Some(0.8), Some(0.75)));
    }
}
