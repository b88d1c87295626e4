//! Grouped multi-head attention.
//!
//! The sequence is cut into `G` contiguous groups. Inside each group every
//! head runs scaled dot-product attention restricted to a symmetric sliding
//! window of width `w` (clipped at the group edges, never crossing into a
//! neighbouring group). The concatenated heads of group `i` are refined by
//! that group's own two-layer ReLU MLP, the refined groups are stacked back
//! along the sequence axis, and a shared output projection fuses them.
//!
//! Q/K/V projections are shared by all groups; only the refinement MLPs are
//! per group.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, MASK};
use crate::params::{visit_scoped, visit_scoped_mut, Parameters};
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmhaConfig {
    pub seq_len: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub num_groups: usize,
    /// Odd window width; a window at least `2·len − 1` wide is full attention.
    pub window: usize,
    pub ff_dim: usize,
}

impl Default for GmhaConfig {
    /// Desk-scale geometry.
    fn default() -> Self {
        Self {
            seq_len: 64,
            model_dim: 32,
            num_heads: 4,
            num_groups: 4,
            window: 9,
            ff_dim: 64,
        }
    }
}

impl GmhaConfig {
    /// The published architecture: 16 groups, 12 heads, d = 768, d_ff = 3072.
    /// Sequence length and window are not fixed by the architecture.
    pub fn published(seq_len: usize, window: usize) -> Self {
        Self {
            seq_len,
            model_dim: 768,
            num_heads: 12,
            num_groups: 16,
            window,
            ff_dim: 3072,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("seq_len", self.seq_len),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("num_groups", self.num_groups),
            ("window", self.window),
            ("ff_dim", self.ff_dim),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.seq_len % self.num_groups != 0 {
            return Err(Error::config(
                "num_groups",
                alloc::format!("seq_len {} is not divisible by {} groups", self.seq_len, self.num_groups),
            ));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::config(
                "num_heads",
                alloc::format!("model_dim {} is not divisible by {} heads", self.model_dim, self.num_heads),
            ));
        }
        if self.window % 2 == 0 {
            return Err(Error::config("window", alloc::format!("{} is even", self.window)));
        }
        Ok(())
    }

    pub fn group_len(&self) -> usize {
        self.seq_len / self.num_groups
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// Additive sliding-window mask: 0 where `|i − j| ≤ ⌊w/2⌋`, the mask
/// sentinel elsewhere.
pub fn window_mask(len: usize, w: usize) -> Result<Tensor> {
    if len == 0 {
        return Err(Error::config("len", "must be positive"));
    }
    if w == 0 || w % 2 == 0 {
        return Err(Error::config("window", alloc::format!("{w} must be odd and positive")));
    }
    let half = w / 2;
    let mut m = Tensor::zeros(&[len, len]);
    let data = m.data_mut();
    for i in 0..len {
        for j in 0..len {
            if i.abs_diff(j) > half {
                data[i * len + j] = MASK;
            }
        }
    }
    Ok(m)
}

/// Number of unmasked entries in a `len × len` window mask.
pub fn window_finite_pairs(len: usize, w: usize) -> usize {
    let half = w / 2;
    (0..len)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(len - 1);
            hi - lo + 1
        })
        .sum()
}

/// Contiguous, order-preserving partition of the rows of `x` into `groups`.
pub fn group_split(x: &Tensor, groups: usize) -> Result<Vec<Tensor>> {
    let n = x.rows();
    if x.rank() != 2 || groups == 0 || n % groups != 0 {
        return Err(Error::config(
            "num_groups",
            alloc::format!("seq_len {n} is not divisible by {groups} groups"),
        ));
    }
    let len = n / groups;
    (0..groups).map(|g| x.slice_rows(g * len, len)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupMlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Parameters for GroupMlp {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_scoped(&self.w1, "w1", f);
        visit_scoped(&self.b1, "b1", f);
        visit_scoped(&self.w2, "w2", f);
        visit_scoped(&self.b2, "b2", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_scoped_mut(&mut self.w1, "w1", f);
        visit_scoped_mut(&mut self.b1, "b1", f);
        visit_scoped_mut(&mut self.w2, "w2", f);
        visit_scoped_mut(&mut self.b2, "b2", f);
    }
}

/// Weights are stored `[out, in]`; every affine map is `x · Wᵀ + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct GmhaParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub groups: Vec<GroupMlp>,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl Parameters for GmhaParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_scoped(&self.wq, "wq", f);
        visit_scoped(&self.wk, "wk", f);
        visit_scoped(&self.wv, "wv", f);
        visit_scoped(&self.groups, "group", f);
        visit_scoped(&self.w_out, "w_out", f);
        visit_scoped(&self.b_out, "b_out", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_scoped_mut(&mut self.wq, "wq", f);
        visit_scoped_mut(&mut self.wk, "wk", f);
        visit_scoped_mut(&mut self.wv, "wv", f);
        visit_scoped_mut(&mut self.groups, "group", f);
        visit_scoped_mut(&mut self.w_out, "w_out", f);
        visit_scoped_mut(&mut self.b_out, "b_out", f);
    }
}

fn glorot(out: usize, inp: usize, rng: &mut SeededRng) -> Tensor {
    Tensor::randn(&[out, inp], libm::sqrt(1.0 / inp as f64), rng).trainable()
}

impl GmhaParams {
    pub fn init(cfg: &GmhaConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let (d, f) = (cfg.model_dim, cfg.ff_dim);
        let wq = glorot(d, d, rng);
        let wk = glorot(d, d, rng);
        let wv = glorot(d, d, rng);
        let groups = (0..cfg.num_groups)
            .map(|_| GroupMlp {
                w1: glorot(f, d, rng),
                b1: Tensor::zeros(&[f]).trainable(),
                w2: glorot(d, f, rng),
                b2: Tensor::zeros(&[d]).trainable(),
            })
            .collect();
        Ok(Self {
            wq,
            wk,
            wv,
            groups,
            w_out: glorot(d, d, rng),
            b_out: Tensor::zeros(&[d]).trainable(),
        })
    }

    /// Every group MLP computes the identity (`W₂·ReLU(W₁h) = ReLU(h) − ReLU(−h)`
    /// with `W₁ = [I; −I]`, `W₂ = [I, −I]`) and the output projection is the
    /// identity. Needs `ff_dim ≥ 2·model_dim`.
    pub fn set_identity_refinement(&mut self, cfg: &GmhaConfig) -> Result<()> {
        let (d, f) = (cfg.model_dim, cfg.ff_dim);
        if f < 2 * d {
            return Err(Error::config("ff_dim", "identity refinement needs ff_dim >= 2 * model_dim"));
        }
        for g in &mut self.groups {
            let mut w1 = Tensor::zeros(&[f, d]);
            let mut w2 = Tensor::zeros(&[d, f]);
            for i in 0..d {
                w1.data_mut()[i * d + i] = 1.0;
                w1.data_mut()[(d + i) * d + i] = -1.0;
                w2.data_mut()[i * f + i] = 1.0;
                w2.data_mut()[i * f + d + i] = -1.0;
            }
            g.w1.data_mut().copy_from_slice(w1.data());
            g.w2.data_mut().copy_from_slice(w2.data());
            g.b1.data_mut().fill(0.0);
            g.b2.data_mut().fill(0.0);
        }
        self.w_out.data_mut().copy_from_slice(Tensor::identity(d).data());
        self.b_out.data_mut().fill(0.0);
        Ok(())
    }

    fn check(&self, cfg: &GmhaConfig) -> Result<()> {
        let (d, f) = (cfg.model_dim, cfg.ff_dim);
        let expect = |t: &Tensor, s: &[usize]| {
            if t.shape() == s {
                Ok(())
            } else {
                Err(Error::shape("gmha params", t.shape(), s))
            }
        };
        expect(&self.wq, &[d, d])?;
        expect(&self.wk, &[d, d])?;
        expect(&self.wv, &[d, d])?;
        expect(&self.w_out, &[d, d])?;
        expect(&self.b_out, &[d])?;
        if self.groups.len() != cfg.num_groups {
            return Err(Error::config("groups", "one refinement MLP per group is required"));
        }
        for g in &self.groups {
            expect(&g.w1, &[f, d])?;
            expect(&g.b1, &[f])?;
            expect(&g.w2, &[d, f])?;
            expect(&g.b2, &[d])?;
        }
        Ok(())
    }
}

/// Tape handles produced by [`grouped_attention`].
#[derive(Debug, Clone)]
pub struct GmhaVars {
    /// Fused `N × d` output.
    pub output: Var,
    /// Stacked group MLP outputs before the output projection, `N × d`.
    pub refined: Var,
    /// Per group: concatenated head outputs before the MLP, `(N/G) × d`.
    pub heads: Vec<Var>,
    /// Per group, per head: post-softmax `(N/G) × (N/G)` weights.
    pub attn: Vec<Vec<Var>>,
}

/// Concrete values of a grouped-attention pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GmhaOutput {
    pub output: Tensor,
    pub refined: Tensor,
    pub heads: Vec<Tensor>,
    pub attn_weights: Vec<Vec<Tensor>>,
}

impl GmhaVars {
    pub fn read(&self, tape: &Tape<'_>) -> GmhaOutput {
        GmhaOutput {
            output: tape.to_tensor(self.output),
            refined: tape.to_tensor(self.refined),
            heads: self.heads.iter().map(|&v| tape.to_tensor(v)).collect(),
            attn_weights: self
                .attn
                .iter()
                .map(|hs| hs.iter().map(|&v| tape.to_tensor(v)).collect())
                .collect(),
        }
    }
}

/// Records grouped multi-head attention of `x: N × d` on the tape.
pub fn grouped_attention<'a>(
    tape: &mut Tape<'a>,
    x: Var,
    params: &'a GmhaParams,
    cfg: &GmhaConfig,
) -> Result<GmhaVars> {
    cfg.validate()?;
    params.check(cfg)?;
    if tape.shape(x) != [cfg.seq_len, cfg.model_dim] {
        return Err(Error::shape("grouped_attention input", tape.shape(x), &[cfg.seq_len, cfg.model_dim]));
    }
    let (len, dk) = (cfg.group_len(), cfg.head_dim());
    let scale = 1.0 / libm::sqrt(dk as f64);

    let wq = tape.param(&params.wq);
    let wk = tape.param(&params.wk);
    let wv = tape.param(&params.wv);
    let q = tape.linear(x, wq, None)?;
    let k = tape.linear(x, wk, None)?;
    let v = tape.linear(x, wv, None)?;
    let mask = tape.constant(window_mask(len, cfg.window)?);

    let mut heads = Vec::with_capacity(cfg.num_groups);
    let mut attn = Vec::with_capacity(cfg.num_groups);
    let mut refined_parts = Vec::with_capacity(cfg.num_groups);
    for (g, mlp) in params.groups.iter().enumerate() {
        let qg = tape.slice_rows(q, g * len, len)?;
        let kg = tape.slice_rows(k, g * len, len)?;
        let vg = tape.slice_rows(v, g * len, len)?;
        let mut head_outs = Vec::with_capacity(cfg.num_heads);
        let mut group_attn = Vec::with_capacity(cfg.num_heads);
        for h in 0..cfg.num_heads {
            let qh = tape.slice_cols(qg, h * dk, dk)?;
            let kh = tape.slice_cols(kg, h * dk, dk)?;
            let vh = tape.slice_cols(vg, h * dk, dk)?;
            let scores = tape.linear(qh, kh, None)?;
            let scores = tape.scale(scores, scale);
            let scores = tape.add(scores, mask)?;
            let a = tape.softmax(scores)?;
            head_outs.push(tape.matmul(a, vh)?);
            group_attn.push(a);
        }
        let hg = tape.concat_cols(&head_outs)?;

        let w1 = tape.param(&mlp.w1);
        let b1 = tape.param(&mlp.b1);
        let w2 = tape.param(&mlp.w2);
        let b2 = tape.param(&mlp.b2);
        let z = tape.linear(hg, w1, Some(b1))?;
        let z = tape.relu(z);
        refined_parts.push(tape.linear(z, w2, Some(b2))?);

        heads.push(hg);
        attn.push(group_attn);
    }
    let refined = tape.concat_rows(&refined_parts)?;
    let w_out = tape.param(&params.w_out);
    let b_out = tape.param(&params.b_out);
    let output = tape.linear(refined, w_out, Some(b_out))?;
    Ok(GmhaVars {
        output,
        refined,
        heads,
        attn,
    })
}

/// Convenience wrapper running [`grouped_attention`] on a throwaway tape.
pub fn grouped_attention_eval(x: &Tensor, params: &GmhaParams, cfg: &GmhaConfig) -> Result<GmhaOutput> {
    let mut tape = Tape::new();
    let xv = tape.constant_ref(x);
    let vars = grouped_attention(&mut tape, xv, params, cfg)?;
    Ok(vars.read(&tape))
}

/// Attention-score budget of a configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub full_pairs: usize,
    pub grouped_finite_pairs: usize,
    pub ratio: f64,
}

/// Counts unmasked score entries across all groups against dense `N²`.
pub fn attention_cost(cfg: &GmhaConfig) -> CostReport {
    let n = cfg.seq_len;
    let len = n / cfg.num_groups.max(1);
    let grouped = cfg.num_groups * window_finite_pairs(len, cfg.window);
    CostReport {
        full_pairs: n * n,
        grouped_finite_pairs: grouped,
        ratio: grouped as f64 / (n * n) as f64,
    }
}

/// Untaped multi-head windowed attention that only touches unmasked score
/// entries, returning the concatenated head outputs (`N × d`, before the
/// group MLPs). With one group and a window of at least `2N − 1` this is
/// dense full attention, which makes the two directly comparable in
/// wall-clock benchmarks.
pub fn windowed_attention_core(
    x: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    cfg: &GmhaConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let (n, d) = (cfg.seq_len, cfg.model_dim);
    if x.shape() != [n, d] {
        return Err(Error::shape("windowed_attention_core", x.shape(), &[n, d]));
    }
    let project = |w: &Tensor| {
        let mut out = vec![0.0; n * d];
        kernels::matmul_bt_acc(x.data(), w.data(), &mut out, n, d, d);
        out
    };
    let (q, k, v) = (project(wq), project(wk), project(wv));
    let (len, dk, half) = (cfg.group_len(), cfg.head_dim(), cfg.window / 2);
    let scale = 1.0 / libm::sqrt(dk as f64);

    let mut out = vec![0.0; n * d];
    let mut scores = vec![0.0; len.min(cfg.window)];
    for g in 0..cfg.num_groups {
        let base = g * len;
        for h in 0..cfg.num_heads {
            let col = h * dk;
            for i in 0..len {
                let lo = i.saturating_sub(half);
                let hi = (i + half).min(len - 1);
                let width = hi - lo + 1;
                let qi = &q[(base + i) * d + col..(base + i) * d + col + dk];
                let mut max = f64::NEG_INFINITY;
                for (s, j) in scores[..width].iter_mut().zip(lo..=hi) {
                    let kj = &k[(base + j) * d + col..(base + j) * d + col + dk];
                    *s = kernels::dot(qi, kj) * scale;
                    max = max.max(*s);
                }
                let mut sum = 0.0;
                for s in scores[..width].iter_mut() {
                    *s = libm::exp(*s - max);
                    sum += *s;
                }
                let orow = &mut out[(base + i) * d + col..(base + i) * d + col + dk];
                for (s, j) in scores[..width].iter().zip(lo..=hi) {
                    let p = s / sum;
                    let vj = &v[(base + j) * d + col..(base + j) * d + col + dk];
                    for (o, &x) in orow.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
            }
        }
    }
    Tensor::new(&[n, d], out)
}
