//! The full block: grouped attention, token scoring, routing, sparse experts
//! and a mean-pooled classification head.
//!
//! Two routing compositions are offered:
//!
//! * [`TierMode::Algorithm1`]: the global router sends each token wholly to
//!   one tier, whose local router picks the token's `K_i` experts (`K_i = 2`
//!   under the default static policy).
//! * [`TierMode::Mixed`]: the allocation policy gives `(k_s, k_d)` per token;
//!   each tier's local router picks its share. The global router is unused.
//!
//! Discrete choices are made on values. Router training signals are opt-in
//! ([`RouterTraining`]) and never change forward values:
//!
//! * straight-through: gate weights of a token are multiplied by
//!   `1 + s − stop_grad(s)` for each score `s` that drove a discrete choice
//!   (tier probability, importance, complexity). The factor is exactly 1 in
//!   the forward pass, and its gradient is the inner product of the loss
//!   gradient with the experts' contribution.
//! * REINFORCE on the tier choice with reward `log p(label) − λ·depth`.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{self, EvaluatorParams, EvaluatorScores, FEATURES_PER_HEAD};
use crate::experts::{self, Assignment, CallCounter, DeepInit, DispatchInputs, DsseParams, RouteMode};
use crate::gmha::{self, GmhaConfig, GmhaParams};
use crate::kernels;
use crate::params::{visit_scoped, visit_scoped_mut, Affine, Parameters};
use crate::rng::SeededRng;
use crate::routing::{self, AllocationPolicy, RoutingDecision, Tier, EXPERTS_PER_TIER};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TierMode {
    Algorithm1,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterTraining {
    /// Exact gradients of the forward function only. Routers learn only
    /// through the gate weights of the experts they selected.
    None,
    StraightThrough,
    Reinforce,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub gmha: GmhaConfig,
    pub eval_hidden: usize,
    pub policy: AllocationPolicy,
    pub tier_mode: TierMode,
    pub d_hidden: usize,
    pub num_classes: usize,
    pub deep_init: DeepInit,
    pub router_training: RouterTraining,
    /// Cost weight `λ` of the tier-depth penalty in the REINFORCE reward.
    pub reinforce_lambda: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            gmha: GmhaConfig::default(),
            eval_hidden: 32,
            policy: AllocationPolicy::default(),
            tier_mode: TierMode::Algorithm1,
            d_hidden: 64,
            num_classes: 2,
            deep_init: DeepInit::default(),
            router_training: RouterTraining::StraightThrough,
            reinforce_lambda: 0.05,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.gmha.validate()?;
        self.policy.validate()?;
        if self.eval_hidden < 2 {
            return Err(Error::config("eval_hidden", "must be at least 2"));
        }
        if self.d_hidden == 0 {
            return Err(Error::config("d_hidden", "must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "must be at least 2"));
        }
        if self.tier_mode == TierMode::Algorithm1 && self.policy.k_max > EXPERTS_PER_TIER {
            return Err(Error::config("k_max", "cannot exceed the 8 experts of a tier"));
        }
        if self.policy.k_max > 2 * EXPERTS_PER_TIER {
            return Err(Error::config("k_max", "cannot exceed the 16 experts of both tiers"));
        }
        if let DeepInit::SmallRandom(s) = self.deep_init {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::config("deep_init", "scale must be finite and non-negative"));
            }
        }
        if !self.reinforce_lambda.is_finite() || self.reinforce_lambda < 0.0 {
            return Err(Error::config("reinforce_lambda", "must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn a_dim(&self) -> usize {
        FEATURES_PER_HEAD * self.gmha.num_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub gmha: GmhaParams,
    pub evaluator: EvaluatorParams,
    pub dsse: DsseParams,
    /// `num_classes × d`
    pub head: Affine,
}

impl ModelParams {
    /// Draws every parameter from a generator seeded with `cfg.seed`.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::new(cfg.seed);
        let d = cfg.gmha.model_dim;
        let gmha = GmhaParams::init(&cfg.gmha, &mut rng.fork(1))?;
        let evaluator = EvaluatorParams::init(cfg.a_dim(), cfg.eval_hidden, &mut rng.fork(2))?;
        let dsse = DsseParams::init(d, cfg.d_hidden, d, cfg.deep_init, &mut rng.fork(3));
        let head = Affine::init(cfg.num_classes, d, libm::sqrt(1.0 / d as f64), &mut rng.fork(4));
        Ok(Self {
            gmha,
            evaluator,
            dsse,
            head,
        })
    }
}

impl Parameters for ModelParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_scoped(&self.gmha, "gmha", f);
        visit_scoped(&self.evaluator, "evaluator", f);
        visit_scoped(&self.dsse, "dsse", f);
        visit_scoped(&self.head, "head", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_scoped_mut(&mut self.gmha, "gmha", f);
        visit_scoped_mut(&mut self.evaluator, "evaluator", f);
        visit_scoped_mut(&mut self.dsse, "dsse", f);
        visit_scoped_mut(&mut self.head, "head", f);
    }
}

/// Monotonic nanosecond clock supplied by the caller; the core has no clock.
pub trait Clock {
    fn now_ns(&self) -> u64;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTimings {
    pub gmha_ns: u64,
    pub evaluator_ns: u64,
    pub routing_ns: u64,
    pub experts_ns: u64,
    pub head_ns: u64,
}

impl StageTimings {
    pub fn merge(&mut self, o: &StageTimings) {
        self.gmha_ns += o.gmha_ns;
        self.evaluator_ns += o.evaluator_ns;
        self.routing_ns += o.routing_ns;
        self.experts_ns += o.experts_ns;
        self.head_ns += o.head_ns;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenTrace {
    pub token: usize,
    pub importance: f64,
    pub complexity: f64,
    pub decision: RoutingDecision,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ForwardTrace {
    pub tokens: Vec<TokenTrace>,
    pub calls: CallCounter,
    pub timings: StageTimings,
}

impl ForwardTrace {
    pub fn scores(&self) -> EvaluatorScores {
        EvaluatorScores {
            importance: self.tokens.iter().map(|t| t.importance).collect(),
            complexity: self.tokens.iter().map(|t| t.complexity).collect(),
        }
    }

    /// Expert executions implied by the decisions.
    pub fn expected_calls(&self) -> usize {
        self.tokens.iter().map(|t| t.decision.experts.len()).sum()
    }

    /// Fraction of expert executions that ran in the deep tier.
    pub fn deep_rate(&self) -> f64 {
        let total = self.calls.total();
        if total == 0 {
            0.0
        } else {
            self.calls.tier_total(Tier::Deep) as f64 / total as f64
        }
    }
}

/// Replaces evaluator scores `(I, C)` of a token before allocation.
pub type ScoreHook<'r> = &'r dyn Fn(usize, f64, f64) -> (f64, f64);

pub struct ForwardOptions<'r> {
    pub route: RouteMode<'r>,
    pub score_hook: Option<ScoreHook<'r>>,
    pub clock: Option<&'r dyn Clock>,
}

impl Default for ForwardOptions<'_> {
    fn default() -> Self {
        Self {
            route: RouteMode::Adaptive,
            score_hook: None,
            clock: None,
        }
    }
}

impl<'r> ForwardOptions<'r> {
    pub fn with_route(route: RouteMode<'r>) -> Self {
        Self {
            route,
            ..Default::default()
        }
    }
}

/// Tape handles of a recorded block.
#[derive(Debug, Clone)]
pub struct BlockVars {
    pub logits: Var,
    /// `[N, 2]` global router log-probabilities.
    pub tier_log_probs: Var,
    pub trace: ForwardTrace,
}

struct Stopwatch<'r> {
    clock: Option<&'r dyn Clock>,
    last: u64,
}

impl<'r> Stopwatch<'r> {
    fn new(clock: Option<&'r dyn Clock>) -> Self {
        let last = clock.map_or(0, |c| c.now_ns());
        Self { clock, last }
    }

    fn lap(&mut self) -> u64 {
        match self.clock {
            Some(c) => {
                let now = c.now_ns();
                let d = now.saturating_sub(self.last);
                self.last = now;
                d
            }
            None => 0,
        }
    }
}

fn check_finite(tape: &Tape<'_>, v: Var, stage: &'static str) -> Result<()> {
    if tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { stage })
    }
}

/// `1 + s − stop_grad(s)`: forward value exactly 1, gradient that of `s`.
fn straight_through(tape: &mut Tape<'_>, s: Var) -> Result<Var> {
    let frozen = tape.stop_grad(s);
    let d = tape.sub(s, frozen)?;
    Ok(tape.add_scalar(d, 1.0))
}

fn select(
    probs: &[f64],
    k: usize,
    mode: &mut RouteMode<'_>,
) -> Result<Vec<usize>> {
    match mode {
        RouteMode::Random(rng) => Ok(experts::random_experts(k, rng)),
        _ => routing::topk_indices(probs, k),
    }
}

/// Records one block on `tape` for `tokens: [N, d]`.
pub fn record_block<'a>(
    tape: &mut Tape<'a>,
    tokens: &Tensor,
    params: &'a ModelParams,
    cfg: &ModelConfig,
    opts: &mut ForwardOptions<'_>,
) -> Result<BlockVars> {
    let n = cfg.gmha.seq_len;
    params.dsse.check(cfg.gmha.model_dim)?;
    let mut watch = Stopwatch::new(opts.clock);
    let mut timings = StageTimings::default();

    let x = tape.constant(tokens.clone());
    let gv = gmha::grouped_attention(tape, x, &params.gmha, &cfg.gmha)?;
    let h = gv.output;
    check_finite(tape, h, "gmha")?;
    timings.gmha_ns = watch.lap();

    let feats = evaluator::pool_features_taped(tape, &gv.attn)?;
    let scores = evaluator::evaluate_taped(tape, feats, &params.evaluator)?;
    check_finite(tape, scores, "evaluator")?;
    let mut imp = Vec::with_capacity(n);
    let mut cpx = Vec::with_capacity(n);
    for i in 0..n {
        let (mut a, mut c) = (tape.value(scores)[2 * i], tape.value(scores)[2 * i + 1]);
        if let Some(hook) = opts.score_hook {
            (a, c) = hook(i, a, c);
        }
        imp.push(a);
        cpx.push(c);
    }
    timings.evaluator_ns = watch.lap();

    let r = &params.dsse.routers;
    let tier_logits = r.global.record(tape, h)?;
    let tier_probs = tape.softmax(tier_logits)?;
    let tier_log_probs = tape.log_softmax(tier_logits);
    let zs = r.shallow.record(tape, h)?;
    let ps = tape.softmax(zs)?;
    let zd = r.deep.record(tape, h)?;
    let pd = tape.softmax(zd)?;

    let mut assignments = Vec::with_capacity(n * cfg.policy.k_max);
    let mut traces = Vec::with_capacity(n);
    let mut fingerprint = 0u64;
    for i in 0..n {
        let k_i = cfg.policy.count(imp[i])?;
        let (k_s, k_d, tier) = match cfg.tier_mode {
            TierMode::Algorithm1 => {
                let tier = match &mut opts.route {
                    RouteMode::Adaptive => {
                        let p = &tape.value(tier_probs)[2 * i..2 * i + 2];
                        // argmax with ties to shallow
                        if p[1] > p[0] {
                            Tier::Deep
                        } else {
                            Tier::Shallow
                        }
                    }
                    RouteMode::Forced(t) => *t,
                    RouteMode::Random(rng) => Tier::from_index(rng.below(2)),
                };
                match tier {
                    Tier::Shallow => (k_i, 0, tier),
                    Tier::Deep => (0, k_i, tier),
                }
            }
            TierMode::Mixed => {
                let (k_s, k_d) = cfg.policy.split(cpx[i], k_i);
                let tier = if k_d > k_s { Tier::Deep } else { Tier::Shallow };
                (k_s, k_d, tier)
            }
        };
        let mut experts_i = Vec::with_capacity(k_i);
        let mut weights_i = Vec::with_capacity(k_i);
        for (t, k) in [(Tier::Shallow, k_s), (Tier::Deep, k_d)] {
            if k == 0 {
                continue;
            }
            let pv = match t {
                Tier::Shallow => ps,
                Tier::Deep => pd,
            };
            let row = &tape.value(pv)[i * EXPERTS_PER_TIER..(i + 1) * EXPERTS_PER_TIER];
            let row: [f64; EXPERTS_PER_TIER] = row.try_into().expect("eight experts");
            let chosen = select(&row, k, &mut opts.route)?;
            let mut w: Vec<f64> = chosen.iter().map(|&e| row[e]).collect();
            if cfg.policy.renormalize {
                routing::renormalize(&mut w);
            }
            for (&e, &wv) in chosen.iter().zip(&w) {
                assignments.push(Assignment { token: i, tier: t, expert: e });
                experts_i.push(RoutingDecision::expert_id(t, e));
                weights_i.push(wv);
                fingerprint = fingerprint.wrapping_mul(17).wrapping_add(RoutingDecision::expert_id(t, e) as u64 + 1);
            }
        }
        fingerprint = fingerprint.wrapping_mul(5).wrapping_add(k_i as u64);
        traces.push(TokenTrace {
            token: i,
            importance: imp[i],
            complexity: cpx[i],
            decision: RoutingDecision {
                tier,
                k_i,
                k_s,
                k_d,
                experts: experts_i,
                gate_weights: weights_i,
            },
        });
    }
    tape.note_decision(fingerprint);

    let mut gate_scale = [None, None];
    if cfg.router_training != RouterTraining::None && opts.score_hook.is_none() {
        let dynamic = cfg.policy.variant != routing::PolicyVariant::Static;
        let idx_i: Vec<usize> = (0..n).map(|i| 2 * i).collect();
        let idx_c: Vec<usize> = (0..n).map(|i| 2 * i + 1).collect();
        let imp_factor = if dynamic {
            let s = tape.gather(scores, &idx_i)?;
            Some(straight_through(tape, s)?)
        } else {
            None
        };
        for t in [Tier::Shallow, Tier::Deep] {
            let tier_factor = match cfg.tier_mode {
                TierMode::Algorithm1 if cfg.router_training == RouterTraining::StraightThrough => {
                    let idx: Vec<usize> = (0..n).map(|i| 2 * i + t as usize).collect();
                    let p = tape.gather(tier_probs, &idx)?;
                    Some(straight_through(tape, p)?)
                }
                TierMode::Mixed => {
                    let c = tape.gather(scores, &idx_c)?;
                    let s = match t {
                        Tier::Deep => c,
                        Tier::Shallow => {
                            let neg = tape.scale(c, -1.0);
                            tape.add_scalar(neg, 1.0)
                        }
                    };
                    Some(straight_through(tape, s)?)
                }
                _ => None,
            };
            gate_scale[t as usize] = match (imp_factor, tier_factor) {
                (Some(a), Some(b)) => Some(tape.mul(a, b)?),
                (a, b) => a.or(b),
            };
        }
    }
    timings.routing_ns = watch.lap();

    let mut calls = CallCounter::default();
    let inputs = DispatchInputs {
        x: h,
        probs: [ps, pd],
        gate_scale,
    };
    let y = experts::dispatch(tape, &params.dsse, inputs, &assignments, cfg.policy.renormalize, &mut calls)?;
    check_finite(tape, y, "experts")?;
    timings.experts_ns = watch.lap();

    let pooled = tape.mean_rows(y);
    let logits = params.head.record(tape, pooled)?;
    check_finite(tape, logits, "head")?;
    timings.head_ns = watch.lap();

    Ok(BlockVars {
        logits,
        tier_log_probs,
        trace: ForwardTrace {
            tokens: traces,
            calls,
            timings,
        },
    })
}

/// Untaped block evaluation: logits and trace.
pub fn block_forward(
    tokens: &Tensor,
    params: &ModelParams,
    cfg: &ModelConfig,
    opts: &mut ForwardOptions<'_>,
) -> Result<(Tensor, ForwardTrace)> {
    let mut tape = Tape::new();
    let b = record_block(&mut tape, tokens, params, cfg, opts)?;
    Ok((tape.to_tensor(b.logits), b.trace))
}

/// Records `−log softmax(logits)[label]`.
pub fn cross_entropy(tape: &mut Tape<'_>, logits: Var, label: usize) -> Result<Var> {
    let ls = tape.log_softmax(logits);
    let pick = tape.index(ls, label)?;
    Ok(tape.scale(pick, -1.0))
}

/// Outcome of one [`loss_and_grads`] call.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchStats {
    /// Mean cross-entropy.
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
    /// Mean per-token reward (REINFORCE only).
    pub mean_reward: f64,
    pub calls: CallCounter,
    pub tokens: usize,
    pub deep_tokens: usize,
    pub k_sum: usize,
    pub timings: StageTimings,
}

/// Mean cross-entropy over `batch`; gradients are added to the buffers of
/// `params` (zeroed first). With REINFORCE router training, the
/// policy-gradient term uses `baseline` as its reward baseline.
pub fn loss_and_grads(
    batch: &[(&Tensor, usize)],
    params: &mut ModelParams,
    cfg: &ModelConfig,
    route_rng: Option<&mut SeededRng>,
    baseline: f64,
    clock: Option<&dyn Clock>,
) -> Result<BatchStats> {
    crate::params::zero_grads(params);
    let mut stats = BatchStats::default();
    let b = batch.len().max(1) as f64;
    let mut rng = route_rng;
    let mut reward_sum = 0.0;
    for &(tokens, label) in batch {
        if label >= cfg.num_classes {
            return Err(Error::config("label", alloc::format!("{label} is not below num_classes")));
        }
        let grads = {
            let mut tape = Tape::new();
            let route = match rng.as_deref_mut() {
                Some(r) => RouteMode::Random(r),
                None => RouteMode::Adaptive,
            };
            let mut opts = ForwardOptions {
                route,
                score_hook: None,
                clock,
            };
            let bv = record_block(&mut tape, tokens, &*params, cfg, &mut opts)?;
            let ce = cross_entropy(&mut tape, bv.logits, label)?;
            let ce_val = tape.item(ce);
            if !ce_val.is_finite() {
                return Err(Error::NonFinite { stage: "loss" });
            }
            let mut loss = tape.scale(ce, 1.0 / b);
            if cfg.router_training == RouterTraining::Reinforce && cfg.tier_mode == TierMode::Algorithm1 {
                let n = bv.trace.tokens.len();
                let idx: Vec<usize> = bv.trace.tokens.iter().map(|t| 2 * t.token + t.decision.tier as usize).collect();
                let adv: Vec<f64> = bv
                    .trace
                    .tokens
                    .iter()
                    .map(|t| {
                        let r = -ce_val - cfg.reinforce_lambda * t.decision.tier.depth() as f64;
                        reward_sum += r;
                        r - baseline
                    })
                    .collect();
                let lp = tape.gather(bv.tier_log_probs, &idx)?;
                let adv = tape.constant(Tensor::vector(adv));
                let weighted = tape.mul(lp, adv)?;
                let s = tape.sum(weighted);
                let pg = tape.scale(s, -1.0 / (n as f64 * b));
                loss = tape.add(loss, pg)?;
            }
            stats.loss += ce_val / b;
            let lv = tape.value(bv.logits);
            if kernels::argmax(lv) == label {
                stats.correct += 1;
            }
            stats.count += 1;
            stats.calls.merge(&bv.trace.calls);
            stats.tokens += bv.trace.tokens.len();
            stats.deep_tokens += bv.trace.tokens.iter().filter(|t| t.decision.k_d > 0).count();
            stats.k_sum += bv.trace.tokens.iter().map(|t| t.decision.k_i).sum::<usize>();
            stats.timings.merge(&bv.trace.timings);
            tape.backward(loss)?
        };
        grads.accumulate_into(params);
    }
    if stats.tokens > 0 {
        stats.mean_reward = reward_sum / stats.tokens as f64;
    }
    Ok(stats)
}

/// Checks every per-token decision against the contracts of the policy.
pub fn check_trace(trace: &ForwardTrace, cfg: &ModelConfig) -> Result<()> {
    for t in &trace.tokens {
        t.decision.check()?;
        if t.decision.k_i == 0 || t.decision.k_i > cfg.policy.k_max {
            return Err(Error::config("k_i", "outside [1, K]"));
        }
    }
    if trace.calls.total() != trace.expected_calls() {
        return Err(Error::config("calls", "expert calls do not match decisions"));
    }
    Ok(())
}
