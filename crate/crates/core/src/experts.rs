//! Dual-scale shared experts.
//!
//! Eight shallow experts (one ReLU layer) and eight deep experts (three ReLU
//! layers with a residual from layer 1 to layer 3). A deep expert is made by
//! copying a trained shallow expert into its first layer and freezing it.
//! A global router picks the tier, the tier's local router picks the top-2
//! experts, and their hidden outputs are mixed with the raw router
//! probabilities before a tier-specific output projection.
//!
//! [`dsse_forward`] is the single-token reference path. [`dispatch`] records
//! the same computation on a tape for a whole sequence, gathering the rows
//! assigned to each expert so every expert runs once per batch.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{visit_scoped, visit_scoped_mut, Affine, Parameters};
use crate::rng::SeededRng;
use crate::routing::{self, RouterParams, RoutingDecision, Tier, EXPERTS_PER_TIER};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn relu_vec(mut v: Vec<f64>) -> Vec<f64> {
    for x in v.iter_mut() {
        *x = x.max(0.0);
    }
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShallowExpert {
    pub layer: Affine,
}

impl ShallowExpert {
    pub fn init(d_in: usize, d_hidden: usize, rng: &mut SeededRng) -> Self {
        Self {
            layer: Affine::init(d_hidden, d_in, libm::sqrt(2.0 / d_in as f64), rng),
        }
    }

    /// `[n, d_in] -> [n, d_hidden]`
    pub fn record<'a>(&'a self, tape: &mut Tape<'a>, x: Var) -> Result<Var> {
        let z = self.layer.record(tape, x)?;
        Ok(tape.relu(z))
    }
}

impl Parameters for ShallowExpert {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.layer.visit(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.layer.visit_mut(f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepExpert {
    /// Copied from a shallow expert; frozen.
    pub l1: Affine,
    pub l2: Affine,
    pub l3: Affine,
}

impl DeepExpert {
    /// `[n, d_in] -> [n, d_hidden]`
    pub fn record<'a>(&'a self, tape: &mut Tape<'a>, x: Var) -> Result<Var> {
        let z1 = self.l1.record(tape, x)?;
        let h1 = tape.relu(z1);
        let z2 = self.l2.record(tape, h1)?;
        let h2 = tape.relu(z2);
        let z3 = self.l3.record(tape, h2)?;
        let h3 = tape.relu(z3);
        tape.add(h3, h1)
    }
}

impl Parameters for DeepExpert {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_scoped(&self.l1, "l1", f);
        visit_scoped(&self.l2, "l2", f);
        visit_scoped(&self.l3, "l3", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_scoped_mut(&mut self.l1, "l1", f);
        visit_scoped_mut(&mut self.l2, "l2", f);
        visit_scoped_mut(&mut self.l3, "l3", f);
    }
}

/// Initialisation of deep layers 2 and 3 at transfer time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeepInit {
    /// Exact passthrough: the deep expert computes the shallow expert.
    Zero,
    /// Gaussian with the given standard deviation; breaks symmetry.
    SmallRandom(f64),
}

impl Default for DeepInit {
    fn default() -> Self {
        DeepInit::SmallRandom(1e-2)
    }
}

/// Value-copies each shallow expert into layer 1 of a new deep expert and
/// freezes it; layers 2 and 3 are initialised per `init`.
pub fn transfer_shallow_to_deep(shallow: &[ShallowExpert], init: DeepInit, rng: &mut SeededRng) -> Vec<DeepExpert> {
    shallow
        .iter()
        .map(|s| {
            let h = s.layer.out_dim();
            let fresh = |rng: &mut SeededRng| match init {
                DeepInit::Zero => Affine::zeros(h, h),
                DeepInit::SmallRandom(scale) => Affine::init(h, h, scale, rng),
            };
            let mut l1 = Affine {
                w: Tensor::new(s.layer.w.shape(), s.layer.w.data().to_vec()).expect("valid shape").trainable(),
                b: Tensor::new(s.layer.b.shape(), s.layer.b.data().to_vec()).expect("valid shape").trainable(),
            };
            l1.freeze();
            let l2 = fresh(rng);
            let l3 = fresh(rng);
            DeepExpert { l1, l2, l3 }
        })
        .collect()
}

/// `σ(W_s x + b_s)`
pub fn shallow_forward(x: &[f64], e: &ShallowExpert) -> Result<Vec<f64>> {
    Ok(relu_vec(e.layer.apply(x)?))
}

/// `h¹ = σ(W¹x + b¹)`, `h² = σ(W²h¹ + b²)`, returns `σ(W³h² + b³) + h¹`.
pub fn deep_forward(x: &[f64], e: &DeepExpert) -> Result<Vec<f64>> {
    let h1 = relu_vec(e.l1.apply(x)?);
    let h2 = relu_vec(e.l2.apply(&h1)?);
    let h3 = relu_vec(e.l3.apply(&h2)?);
    Ok(h3.iter().zip(&h1).map(|(a, b)| a + b).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DsseParams {
    pub shallow: Vec<ShallowExpert>,
    pub deep: Vec<DeepExpert>,
    pub routers: RouterParams,
    pub out_s: Affine,
    pub out_d: Affine,
}

impl DsseParams {
    /// Fresh shallow experts, deep experts transferred from them, routers and
    /// output projections.
    pub fn init(d_in: usize, d_hidden: usize, d_out: usize, deep_init: DeepInit, rng: &mut SeededRng) -> Self {
        let shallow: Vec<_> = (0..EXPERTS_PER_TIER).map(|_| ShallowExpert::init(d_in, d_hidden, rng)).collect();
        let deep = transfer_shallow_to_deep(&shallow, deep_init, rng);
        let routers = RouterParams::init(d_in, rng);
        let s = libm::sqrt(1.0 / d_hidden as f64);
        Self {
            shallow,
            deep,
            routers,
            out_s: Affine::init(d_out, d_hidden, s, rng),
            out_d: Affine::init(d_out, d_hidden, s, rng),
        }
    }

    /// Rebuilds the deep tier from the current shallow experts.
    pub fn retransfer(&mut self, init: DeepInit, rng: &mut SeededRng) {
        self.deep = transfer_shallow_to_deep(&self.shallow, init, rng);
    }

    pub fn check(&self, d_in: usize) -> Result<()> {
        if self.shallow.len() != EXPERTS_PER_TIER || self.deep.len() != EXPERTS_PER_TIER {
            return Err(Error::config("experts", "exactly 8 experts per tier"));
        }
        let h = self.out_s.in_dim();
        for (s, d) in self.shallow.iter().zip(&self.deep) {
            if s.layer.w.shape() != [h, d_in] || d.l1.w.shape() != [h, d_in] {
                return Err(Error::shape("expert layer 1", s.layer.w.shape(), &[h, d_in]));
            }
        }
        if self.routers.global.in_dim() != d_in {
            return Err(Error::shape("router", self.routers.global.w.shape(), &[2, d_in]));
        }
        Ok(())
    }

    pub fn out(&self, tier: Tier) -> &Affine {
        match tier {
            Tier::Shallow => &self.out_s,
            Tier::Deep => &self.out_d,
        }
    }
}

impl Parameters for DsseParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_scoped(&self.shallow, "shallow", f);
        visit_scoped(&self.deep, "deep", f);
        visit_scoped(&self.routers, "router", f);
        visit_scoped(&self.out_s, "out_s", f);
        visit_scoped(&self.out_d, "out_d", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_scoped_mut(&mut self.shallow, "shallow", f);
        visit_scoped_mut(&mut self.deep, "deep", f);
        visit_scoped_mut(&mut self.routers, "router", f);
        visit_scoped_mut(&mut self.out_s, "out_s", f);
        visit_scoped_mut(&mut self.out_d, "out_d", f);
    }
}

/// Expert executions per expert, counted in token rows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounter {
    pub shallow: [usize; EXPERTS_PER_TIER],
    pub deep: [usize; EXPERTS_PER_TIER],
}

impl CallCounter {
    pub fn record(&mut self, tier: Tier, expert: usize, rows: usize) {
        match tier {
            Tier::Shallow => self.shallow[expert] += rows,
            Tier::Deep => self.deep[expert] += rows,
        }
    }

    pub fn total(&self) -> usize {
        self.shallow.iter().chain(&self.deep).sum()
    }

    pub fn tier_total(&self, tier: Tier) -> usize {
        match tier {
            Tier::Shallow => self.shallow.iter().sum(),
            Tier::Deep => self.deep.iter().sum(),
        }
    }

    pub fn merge(&mut self, other: &CallCounter) {
        for (a, b) in self.shallow.iter_mut().zip(&other.shallow) {
            *a += b;
        }
        for (a, b) in self.deep.iter_mut().zip(&other.deep) {
            *a += b;
        }
    }
}

/// How the tier and experts are chosen.
#[derive(Debug)]
pub enum RouteMode<'r> {
    /// Global router, then local top-k.
    Adaptive,
    /// Skip the global router; local top-k in the given tier.
    Forced(Tier),
    /// Uniformly random tier and `k` distinct uniformly random experts,
    /// weighted by the local router's probabilities for them.
    Random(&'r mut SeededRng),
}

/// Draws `k` distinct expert indices uniformly.
pub fn random_experts(k: usize, rng: &mut SeededRng) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..EXPERTS_PER_TIER).collect();
    for i in 0..k {
        let j = i + rng.below(EXPERTS_PER_TIER - i);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Single-token dual-scale forward. Exactly `k` experts of one tier run.
pub fn dsse_forward(
    x: &[f64],
    params: &DsseParams,
    k: usize,
    mode: RouteMode<'_>,
    renormalize: bool,
    calls: &mut CallCounter,
) -> Result<(Vec<f64>, RoutingDecision)> {
    params.check(x.len())?;
    let (tier, experts, mut weights) = match mode {
        RouteMode::Adaptive => {
            let (m, _) = routing::global_route(x, &params.routers.global)?;
            let (idx, w) = routing::local_topk(x, params.routers.local(m), k)?;
            (m, idx, w)
        }
        RouteMode::Forced(m) => {
            let (idx, w) = routing::local_topk(x, params.routers.local(m), k)?;
            (m, idx, w)
        }
        RouteMode::Random(rng) => {
            let m = Tier::from_index(rng.below(2));
            let idx = random_experts(k, rng);
            let probs = routing::local_probs(x, params.routers.local(m))?;
            let w = idx.iter().map(|&i| probs[i]).collect();
            (m, idx, w)
        }
    };
    if renormalize {
        routing::renormalize(&mut weights);
    }
    let h = params.out_s.in_dim();
    let mut mix = vec![0.0; h];
    for (&e, &p) in experts.iter().zip(&weights) {
        let out = match tier {
            Tier::Shallow => shallow_forward(x, &params.shallow[e])?,
            Tier::Deep => deep_forward(x, &params.deep[e])?,
        };
        calls.record(tier, e, 1);
        for (m, o) in mix.iter_mut().zip(out) {
            *m += p * o;
        }
    }
    let y = params.out(tier).apply(&mix)?;
    let (k_s, k_d) = match tier {
        Tier::Shallow => (k, 0),
        Tier::Deep => (0, k),
    };
    let decision = RoutingDecision {
        tier,
        k_i: k,
        k_s,
        k_d,
        experts: experts.iter().map(|&e| RoutingDecision::expert_id(tier, e)).collect(),
        gate_weights: weights,
    };
    Ok((y, decision))
}

/// One selected expert for one token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Assignment {
    pub token: usize,
    pub tier: Tier,
    pub expert: usize,
}

/// Taped inputs to [`dispatch`].
#[derive(Debug, Clone, Copy)]
pub struct DispatchInputs {
    /// `[N, d_in]` expert inputs.
    pub x: Var,
    /// Local router probabilities per tier, `[N, 8]` each.
    pub probs: [Var; 2],
    /// Optional per-token `[N]` multipliers on the gate weights of each tier.
    pub gate_scale: [Option<Var>; 2],
}

/// Records the sparse expert computation for a sequence: each listed
/// assignment runs its expert on its token row, hidden outputs are mixed
/// with the router probability of that expert, and each tier's mixture goes
/// through the tier's output projection. A tier's output bias is added only
/// to tokens routed to that tier. Returns `[N, d_out]`.
pub fn dispatch<'a>(
    tape: &mut Tape<'a>,
    params: &'a DsseParams,
    inputs: DispatchInputs,
    assignments: &[Assignment],
    renormalize: bool,
    calls: &mut CallCounter,
) -> Result<Var> {
    let n = tape.rows(inputs.x);
    let d_out = params.out_s.out_dim();
    let mut total: Option<Var> = None;
    for tier in [Tier::Shallow, Tier::Deep] {
        let t = tier as usize;
        let mine: Vec<&Assignment> = assignments.iter().filter(|a| a.tier == tier).collect();
        if mine.is_empty() {
            continue;
        }
        let flat: Vec<usize> = mine.iter().map(|a| a.token * EXPERTS_PER_TIER + a.expert).collect();
        let mut w = tape.gather(inputs.probs[t], &flat)?;
        let tokens: Vec<usize> = mine.iter().map(|a| a.token).collect();
        if let Some(s) = inputs.gate_scale[t] {
            let s = tape.gather(s, &tokens)?;
            w = tape.mul(w, s)?;
        }
        if renormalize {
            let m = mine.len();
            let col = tape.reshape(w, &[m, 1])?;
            let sums = tape.scatter_rows(col, &tokens, n)?;
            let back = tape.gather_rows(sums, &tokens)?;
            let back = tape.reshape(back, &[m])?;
            w = tape.div(w, back)?;
        }

        let mut parts = Vec::new();
        let mut targets = Vec::with_capacity(mine.len());
        for e in 0..EXPERTS_PER_TIER {
            let pos: Vec<usize> = (0..mine.len()).filter(|&i| mine[i].expert == e).collect();
            if pos.is_empty() {
                continue;
            }
            let rows: Vec<usize> = pos.iter().map(|&i| mine[i].token).collect();
            let xe = tape.gather_rows(inputs.x, &rows)?;
            let he = match tier {
                Tier::Shallow => params.shallow[e].record(tape, xe)?,
                Tier::Deep => params.deep[e].record(tape, xe)?,
            };
            calls.record(tier, e, rows.len());
            let we = tape.gather(w, &pos)?;
            parts.push(tape.scale_rows(he, we)?);
            targets.extend_from_slice(&rows);
        }
        let stacked = tape.concat_rows(&parts)?;
        let acc = tape.scatter_rows(stacked, &targets, n)?;
        let out = params.out(tier);
        let wo = tape.param(&out.w);
        let proj = tape.linear(acc, wo, None)?;
        let mut mask = vec![0.0; n];
        for &tok in &tokens {
            mask[tok] = 1.0;
        }
        let mask = tape.constant(Tensor::new(&[n, 1], mask)?);
        let b = tape.param(&out.b);
        let b = tape.reshape(b, &[1, d_out])?;
        let bias = tape.matmul(mask, b)?;
        let y = tape.add(proj, bias)?;
        total = Some(match total {
            Some(tv) => tape.add(tv, y)?,
            None => y,
        });
    }
    total.ok_or_else(|| Error::config("assignments", "no expert was selected"))
}
