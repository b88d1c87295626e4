//! Expert-allocation rules and the softmax routers.
//!
//! Two questions are answered per token: how many experts it gets
//! ([`allocate_count`], driven by importance `I`) and how they split between
//! the shallow and deep tiers ([`allocate_tiers_threshold`] or
//! [`allocate_tiers_task`], driven by complexity `C`). The routers
//! ([`global_route`], [`local_topk`]) pick the tier and the concrete experts.
//!
//! Tie-breaks are fixed: tier ties go to shallow, expert ties to the lower
//! index.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;
use crate::params::{visit_scoped, visit_scoped_mut, Affine, Parameters};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Experts per tier.
pub const EXPERTS_PER_TIER: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyVariant {
    /// Every token gets `K` experts.
    Static,
    /// `K_i = max(1, ⌈I·K⌉)`, split by the complexity thresholds.
    DynamicImportance,
    /// `K_i` from importance, split by the task-conditioned rule.
    TaskConditioned,
    /// `K_i` from importance, split by the complexity thresholds.
    Threshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllocationPolicy {
    pub variant: PolicyVariant,
    /// Upper bound `K` on experts per token.
    pub k_max: usize,
    pub theta_s: f64,
    pub theta_d: f64,
    /// Task vector `T`; only the first entry enters the split rule.
    pub task: [f64; 2],
    /// Rescale selected gate weights to sum to one. Off by default: the
    /// combination uses raw router probabilities.
    pub renormalize: bool,
}

impl Default for AllocationPolicy {
    fn default() -> Self {
        Self {
            variant: PolicyVariant::Static,
            k_max: 2,
            theta_s: 0.3,
            theta_d: 0.7,
            task: [0.5, 0.5],
            renormalize: false,
        }
    }
}

impl AllocationPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.k_max == 0 {
            return Err(Error::config("k_max", "must be at least 1"));
        }
        let unit_open = |v: f64| v > 0.0 && v < 1.0;
        if !unit_open(self.theta_s) || !unit_open(self.theta_d) || self.theta_s >= self.theta_d {
            return Err(Error::config(
                "theta_s",
                alloc::format!("need 0 < theta_s < theta_d < 1, got {} and {}", self.theta_s, self.theta_d),
            ));
        }
        if self.task.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::config("task", "entries must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Expert budget for a token of importance `importance`.
    pub fn count(&self, importance: f64) -> Result<usize> {
        match self.variant {
            PolicyVariant::Static => Ok(self.k_max),
            _ => allocate_count(importance, self.k_max),
        }
    }

    /// `(k_s, k_d)` for a token with budget `k` and complexity `complexity`.
    pub fn split(&self, complexity: f64, k: usize) -> (usize, usize) {
        match self.variant {
            PolicyVariant::TaskConditioned => allocate_tiers_task(complexity, k, self.task),
            _ => allocate_tiers_threshold(complexity, k, self.theta_s, self.theta_d),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Shallow = 0,
    Deep = 1,
}

impl Tier {
    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Tier::Shallow
        } else {
            Tier::Deep
        }
    }

    /// Number of expert layers a token passes through in this tier.
    pub fn depth(self) -> usize {
        match self {
            Tier::Shallow => 1,
            Tier::Deep => 3,
        }
    }
}

/// Per-token routing record.
///
/// Expert ids are global: `0..8` are shallow experts, `8..16` deep ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub tier: Tier,
    pub k_i: usize,
    pub k_s: usize,
    pub k_d: usize,
    pub experts: Vec<usize>,
    pub gate_weights: Vec<f64>,
}

impl RoutingDecision {
    pub fn expert_id(tier: Tier, index: usize) -> usize {
        tier as usize * EXPERTS_PER_TIER + index
    }

    pub fn check(&self) -> Result<()> {
        if self.k_s + self.k_d != self.k_i {
            return Err(Error::config("k_i", "k_s + k_d must equal k_i"));
        }
        if self.experts.len() != self.gate_weights.len() {
            return Err(Error::config("gate_weights", "one weight per selected expert"));
        }
        let mut seen = [false; 2 * EXPERTS_PER_TIER];
        for &e in &self.experts {
            if e >= seen.len() || core::mem::replace(&mut seen[e], true) {
                return Err(Error::config("experts", "expert ids must be unique and in range"));
            }
        }
        Ok(())
    }
}

/// Global router `R_g` and the two local routers `R_s`, `R_d`.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams {
    pub global: Affine,
    pub shallow: Affine,
    pub deep: Affine,
}

impl RouterParams {
    pub fn init(d_in: usize, rng: &mut SeededRng) -> Self {
        let s = libm::sqrt(1.0 / d_in as f64);
        Self {
            global: Affine::init(2, d_in, s, rng),
            shallow: Affine::init(EXPERTS_PER_TIER, d_in, s, rng),
            deep: Affine::init(EXPERTS_PER_TIER, d_in, s, rng),
        }
    }

    pub fn local(&self, tier: Tier) -> &Affine {
        match tier {
            Tier::Shallow => &self.shallow,
            Tier::Deep => &self.deep,
        }
    }
}

impl Parameters for RouterParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_scoped(&self.global, "global", f);
        visit_scoped(&self.shallow, "shallow", f);
        visit_scoped(&self.deep, "deep", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_scoped_mut(&mut self.global, "global", f);
        visit_scoped_mut(&mut self.shallow, "shallow", f);
        visit_scoped_mut(&mut self.deep, "deep", f);
    }
}

/// `max(1, ⌈I·K⌉)`.
pub fn allocate_count(importance: f64, k: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&importance) {
        return Err(Error::Domain {
            what: "importance",
            value: importance,
        });
    }
    if k == 0 {
        return Err(Error::config("k_max", "must be at least 1"));
    }
    let c = libm::ceil(importance * k as f64) as usize;
    Ok(c.clamp(1, k))
}

/// Three-band split: all shallow below `theta_s`, all deep above `theta_d`,
/// an even split (extra expert to deep) in between.
pub fn allocate_tiers_threshold(complexity: f64, k: usize, theta_s: f64, theta_d: f64) -> (usize, usize) {
    if complexity < theta_s {
        (k, 0)
    } else if complexity > theta_d {
        (0, k)
    } else {
        (k / 2, k - k / 2)
    }
}

/// Task-conditioned split `g = K_i·(T₀ + (1 − T₀)(1 − C))`, read as the
/// shallow count and rounded half away from zero.
pub fn allocate_tiers_task(complexity: f64, k: usize, task: [f64; 2]) -> (usize, usize) {
    let t0 = task[0];
    let g = k as f64 * (t0 + (1.0 - t0) * (1.0 - complexity));
    let ks = (libm::round(g).max(0.0) as usize).min(k);
    (ks, k - ks)
}

/// Tier choice from router logits: softmax, then argmax with ties to shallow.
pub fn route_from_logits(logits: [f64; 2]) -> (Tier, [f64; 2]) {
    let mut p = [0.0; 2];
    kernels::softmax_rows(&logits, 2, &mut p).expect("finite logits");
    let m = if p[1] > p[0] { Tier::Deep } else { Tier::Shallow };
    (m, p)
}

/// Step 1 of the dual-scale forward: `p_g = softmax(R_g(x))`, `m = argmax p_g`.
pub fn global_route(x: &[f64], router: &Affine) -> Result<(Tier, [f64; 2])> {
    if router.out_dim() != 2 {
        return Err(Error::shape("global router", router.w.shape(), &[2, x.len()]));
    }
    let z = router.apply(x)?;
    Ok(route_from_logits([z[0], z[1]]))
}

/// Indices of the `k` largest probabilities, largest first, ties to the
/// lower index.
pub fn topk_indices(p: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > p.len() {
        return Err(Error::config("k", alloc::format!("top-{k} over {} experts", p.len())));
    }
    let mut order: Vec<usize> = (0..p.len()).collect();
    // Stable sort keeps lower indices first among equal probabilities.
    order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap_or(core::cmp::Ordering::Equal));
    order.truncate(k);
    Ok(order)
}

/// `softmax(R(x))`.
pub fn local_probs(x: &[f64], router: &Affine) -> Result<Vec<f64>> {
    let z = router.apply(x)?;
    let mut p = alloc::vec![0.0; z.len()];
    kernels::softmax_rows(&z, z.len(), &mut p).map_err(|row| Error::EmptyAttentionRow { row })?;
    Ok(p)
}

/// Top-`k` selection over `p = softmax(R(x))`; weights are the raw
/// probabilities of the selected experts.
pub fn local_topk(x: &[f64], router: &Affine, k: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let p = local_probs(x, router)?;
    let idx = topk_indices(&p, k)?;
    let w = idx.iter().map(|&i| p[i]).collect();
    Ok((idx, w))
}

/// Rescales weights to sum to one.
pub fn renormalize(weights: &mut [f64]) {
    let s: f64 = weights.iter().sum();
    if s > 0.0 {
        for w in weights.iter_mut() {
            *w /= s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn router_with_bias(bias: &[f64], d_in: usize) -> Affine {
        let mut r = Affine::zeros(bias.len(), d_in);
        r.b.data_mut().copy_from_slice(bias);
        r
    }

    #[test]
    fn count_examples() {
        assert_eq!(allocate_count(0.82, 3).unwrap(), 3);
        assert_eq!(allocate_count(0.11, 3).unwrap(), 1);
        assert_eq!(allocate_count(0.0, 3).unwrap(), 1);
        assert_eq!(allocate_count(1.0, 8).unwrap(), 8);
        assert!(matches!(allocate_count(1.2, 3), Err(Error::Domain { .. })));
        assert!(allocate_count(-0.1, 3).is_err());
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(allocate_tiers_threshold(0.2, 4, 0.3, 0.7), (4, 0));
        assert_eq!(allocate_tiers_threshold(0.9, 4, 0.3, 0.7), (0, 4));
        assert_eq!(allocate_tiers_threshold(0.5, 5, 0.3, 0.7), (2, 3));
    }

    #[test]
    fn task_examples() {
        assert_eq!(allocate_tiers_task(0.0, 4, [1.0, 0.0]), (4, 0));
        assert_eq!(allocate_tiers_task(1.0, 5, [0.2, 0.8]), (1, 4));
        assert_eq!(allocate_tiers_task(0.5, 4, [0.2, 0.8]), (2, 2));
    }

    #[test]
    fn global_examples() {
        let (m, p) = route_from_logits([2.0, -1.0]);
        assert_eq!(m, Tier::Shallow);
        assert!((p[0] - 0.9526).abs() < 1e-4 && (p[1] - 0.0474).abs() < 1e-4);
        let (m, p) = global_route(&[0.3, -0.2], &Affine::zeros(2, 2)).unwrap();
        assert_eq!((m, p), (Tier::Shallow, [0.5, 0.5]));
        assert_eq!(route_from_logits([-1.0, 0.5]).0, Tier::Deep);
    }

    #[test]
    fn topk_examples() {
        let p = [0.4, 0.3, 0.2, 0.1];
        assert_eq!(topk_indices(&p, 2).unwrap(), [0, 1]);
        let (idx, w) = local_topk(&[1.0], &router_with_bias(&[0.0; 8], 1), 2).unwrap();
        assert_eq!(idx, [0, 1]);
        assert_eq!(w, [0.125, 0.125]);
        assert!(topk_indices(&p, 5).is_err());
    }

    #[test]
    fn decision_check() {
        let mut d = RoutingDecision {
            tier: Tier::Deep,
            k_i: 2,
            k_s: 0,
            k_d: 2,
            experts: vec![8, 11],
            gate_weights: vec![0.3, 0.2],
        };
        assert!(d.check().is_ok());
        d.experts[1] = 8;
        assert!(d.check().is_err());
    }

    #[test]
    fn policy_validation() {
        assert!(AllocationPolicy::default().validate().is_ok());
        let bad = AllocationPolicy {
            theta_s: 0.8,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
