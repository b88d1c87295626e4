//! Synthetic sequence-classification tasks.
//!
//! Both tasks draw a fixed "world" of prototype embeddings from a task seed
//! and then generate samples from per-sample randomness.
//!
//! * **needle**: distractor tokens plus one or two planted signal tokens.
//!   Class 0 signals are `±u`, class 1 signals are `±v`; the sign is random,
//!   so class means coincide and a linear probe on the mean-pooled sequence
//!   sits near chance.
//! * **pairmatch**: the left and right halves each carry planted keys drawn
//!   from a small key set; the label says whether the two halves carry the
//!   same multiset of keys.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Needle,
    Pairmatch,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Needle => "needle",
            TaskKind::Pairmatch => "pairmatch",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            TaskKind::Needle => "one or two planted signal tokens among distractors; the signal class is the label",
            TaskKind::Pairmatch => "planted keys in both halves; the label says whether the key multisets match",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub seq_len: usize,
    pub dim: usize,
    /// Distractor vocabulary size.
    pub vocab: usize,
    /// Norm of planted signal or key tokens.
    pub signal: f64,
    /// Standard deviation of per-coordinate noise added to every token.
    pub noise: f64,
    /// Number of distinct keys (pairmatch).
    pub keys: usize,
    /// Planted keys per half (pairmatch).
    pub keys_per_half: usize,
    /// Seed of the prototype world.
    pub world_seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            kind: TaskKind::Needle,
            seq_len: 64,
            dim: 32,
            vocab: 32,
            signal: 2.0,
            noise: 0.3,
            keys: 4,
            keys_per_half: 1,
            world_seed: 0x5EED,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[N, d]`
    pub tokens: Tensor,
    pub label: usize,
    /// Positions of planted tokens.
    pub planted: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Task {
    pub cfg: TaskConfig,
    distractors: Vec<Vec<f64>>,
    /// Needle: `[u, v]`; pairmatch: one prototype per key.
    prototypes: Vec<Vec<f64>>,
}

fn unit(dim: usize, rng: &mut SeededRng) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    let n = libm::sqrt(v.iter().map(|x| x * x).sum());
    v.into_iter().map(|x| x / n).collect()
}

/// Removes from `v` its components along the (orthonormal) `basis`.
fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let p: f64 = v.iter().zip(b).map(|(a, b)| a * b).sum();
        for (x, y) in v.iter_mut().zip(b) {
            *x -= p * y;
        }
    }
}

impl Task {
    pub fn new(cfg: TaskConfig) -> Result<Self> {
        let protos = match cfg.kind {
            TaskKind::Needle => 2,
            TaskKind::Pairmatch => cfg.keys,
        };
        if cfg.seq_len < 4 {
            return Err(Error::config("seq_len", "tasks need at least 4 tokens"));
        }
        if cfg.kind == TaskKind::Pairmatch {
            if cfg.seq_len % 2 != 0 {
                return Err(Error::config("seq_len", "pairmatch needs an even length"));
            }
            if cfg.keys < 2 || cfg.keys_per_half == 0 || cfg.keys_per_half > cfg.seq_len / 2 {
                return Err(Error::config("keys", "need at least 2 keys and 1..=N/2 keys per half"));
            }
        }
        if cfg.dim < protos + 1 || cfg.vocab == 0 {
            return Err(Error::config("dim", "embedding too small for the prototypes"));
        }
        let mut rng = SeededRng::new(cfg.world_seed);
        let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(protos);
        for _ in 0..protos {
            let mut v = unit(cfg.dim, &mut rng);
            orthogonalize(&mut v, &prototypes);
            let n = libm::sqrt(v.iter().map(|x| x * x).sum());
            prototypes.push(v.into_iter().map(|x| x / n).collect());
        }
        let distractors = (0..cfg.vocab)
            .map(|_| {
                let mut v = unit(cfg.dim, &mut rng);
                orthogonalize(&mut v, &prototypes);
                v
            })
            .collect();
        Ok(Self {
            cfg,
            distractors,
            prototypes,
        })
    }

    fn token(&self, base: &[f64], scale: f64, rng: &mut SeededRng, out: &mut [f64]) {
        for (o, &b) in out.iter_mut().zip(base) {
            *o = scale * b + self.cfg.noise * rng.normal();
        }
    }

    fn haystack(&self, rng: &mut SeededRng) -> Vec<f64> {
        let (n, d) = (self.cfg.seq_len, self.cfg.dim);
        let mut data = vec![0.0; n * d];
        for row in data.chunks_mut(d) {
            let w = &self.distractors[rng.below(self.distractors.len())];
            self.token(w, 1.0, rng, row);
        }
        data
    }

    /// Deterministic in `rng`.
    pub fn sample(&self, rng: &mut SeededRng) -> Sample {
        match self.cfg.kind {
            TaskKind::Needle => self.needle(rng),
            TaskKind::Pairmatch => self.pairmatch(rng),
        }
    }

    pub fn sample_seeded(&self, seed: u64) -> Sample {
        self.sample(&mut SeededRng::new(seed))
    }

    pub fn dataset(&self, seed: u64, count: usize) -> Vec<Sample> {
        let mut rng = SeededRng::new(seed);
        (0..count).map(|_| self.sample(&mut rng)).collect()
    }

    fn needle(&self, rng: &mut SeededRng) -> Sample {
        let (n, d) = (self.cfg.seq_len, self.cfg.dim);
        let label = rng.below(2);
        let mut data = self.haystack(rng);
        let count = 1 + rng.below(2);
        let mut planted = Vec::with_capacity(count);
        while planted.len() < count {
            let p = rng.below(n);
            if !planted.contains(&p) {
                planted.push(p);
            }
        }
        for &p in &planted {
            let sign = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
            let proto = &self.prototypes[label];
            self.token(proto, sign * self.cfg.signal, rng, &mut data[p * d..(p + 1) * d]);
        }
        planted.sort_unstable();
        Sample {
            tokens: Tensor::new(&[n, d], data).expect("valid shape"),
            label,
            planted,
        }
    }

    fn pairmatch(&self, rng: &mut SeededRng) -> Sample {
        let (n, d) = (self.cfg.seq_len, self.cfg.dim);
        let (half, per) = (n / 2, self.cfg.keys_per_half);
        let label = rng.below(2);
        let left: Vec<usize> = (0..per).map(|_| rng.below(self.cfg.keys)).collect();
        let mut right = left.clone();
        if label == 1 {
            rng.shuffle(&mut right);
        } else {
            // Replace one key with a different one so the multisets differ.
            let i = rng.below(per);
            let shift = 1 + rng.below(self.cfg.keys - 1);
            right[i] = (right[i] + shift) % self.cfg.keys;
            rng.shuffle(&mut right);
        }
        let mut data = self.haystack(rng);
        let mut planted = Vec::with_capacity(2 * per);
        for (keys, offset) in [(&left, 0), (&right, half)] {
            let mut slots: Vec<usize> = (0..half).collect();
            rng.shuffle(&mut slots);
            for (&k, &s) in keys.iter().zip(&slots) {
                let p = offset + s;
                self.token(&self.prototypes[k], self.cfg.signal, rng, &mut data[p * d..(p + 1) * d]);
                planted.push(p);
            }
        }
        planted.sort_unstable();
        Sample {
            tokens: Tensor::new(&[n, d], data).expect("valid shape"),
            label,
            planted,
        }
    }

    /// Removes planted tokens by replacing them with fresh distractors.
    pub fn scrub(&self, sample: &Sample, rng: &mut SeededRng) -> Tensor {
        let d = self.cfg.dim;
        let mut t = sample.tokens.clone();
        for &p in &sample.planted {
            let w = &self.distractors[rng.below(self.distractors.len())];
            self.token(w, 1.0, rng, &mut t.data_mut()[p * d..(p + 1) * d]);
        }
        t
    }
}
