//! Token scoring from attention signatures.
//!
//! Each token is summarised by three numbers per head, taken from its
//! group's attention matrix: the mean attention it receives (column mean),
//! the entropy of the attention it emits (row entropy) and the peak of that
//! row. A two-layer ReLU MLP maps the `3·h` features to a raw pair which a
//! logistic squash turns into importance `I` and complexity `C` in `(0, 1)`.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;
use crate::params::{visit_scoped, visit_scoped_mut, Affine, Parameters};
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Pooled features per head.
pub const FEATURES_PER_HEAD: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluatorParams {
    /// `h_eval × a_dim`
    pub l1: Affine,
    /// `2 × h_eval`
    pub l2: Affine,
}

impl EvaluatorParams {
    pub fn init(a_dim: usize, hidden: usize, rng: &mut SeededRng) -> Result<Self> {
        if hidden < 2 {
            return Err(Error::config("eval_hidden", "must be at least 2"));
        }
        Ok(Self {
            l1: Affine::init(hidden, a_dim, libm::sqrt(1.0 / a_dim as f64), rng),
            l2: Affine::init(2, hidden, libm::sqrt(1.0 / hidden as f64), rng),
        })
    }

    pub fn zeros(a_dim: usize, hidden: usize) -> Self {
        Self {
            l1: Affine::zeros(hidden, a_dim),
            l2: Affine::zeros(2, hidden),
        }
    }

    pub fn a_dim(&self) -> usize {
        self.l1.in_dim()
    }

    pub fn freeze(&mut self) {
        self.l1.freeze();
        self.l2.freeze();
    }
}

impl Parameters for EvaluatorParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_scoped(&self.l1, "l1", f);
        visit_scoped(&self.l2, "l2", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_scoped_mut(&mut self.l1, "l1", f);
        visit_scoped_mut(&mut self.l2, "l2", f);
    }
}

/// Per-token importance and complexity, both in `(0, 1)`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvaluatorScores {
    pub importance: Vec<f64>,
    pub complexity: Vec<f64>,
}

/// Features of token `token` (global sequence index) from per-group,
/// per-head attention matrices.
pub fn pool_attention_features(attn: &[Vec<Tensor>], token: usize) -> Result<Tensor> {
    let len = attn
        .first()
        .and_then(|g| g.first())
        .map(|a| a.rows())
        .ok_or_else(|| Error::config("attn_weights", "no attention matrices"))?;
    let (g, i) = (token / len, token % len);
    let heads = attn
        .get(g)
        .ok_or(Error::Domain {
            what: "token index",
            value: token as f64,
        })?;
    let mut out = Vec::with_capacity(FEATURES_PER_HEAD * heads.len());
    for a in heads {
        let received = (0..len).map(|r| a.at(r, i)).sum::<f64>() / len as f64;
        let row = a.row(i);
        out.push(received);
        out.push(kernels::entropy(row));
        out.push(row[kernels::argmax(row)]);
    }
    Ok(Tensor::vector(out))
}

/// Taped features for every token: `[N, 3·h]`, rows in sequence order.
pub fn pool_features_taped(tape: &mut Tape<'_>, attn: &[Vec<Var>]) -> Result<Var> {
    let mut groups = Vec::with_capacity(attn.len());
    for heads in attn {
        let mut cols = Vec::with_capacity(FEATURES_PER_HEAD * heads.len());
        for &a in heads {
            let len = tape.rows(a);
            for f in [tape.mean_rows(a), tape.row_entropy(a), tape.row_max(a)] {
                cols.push(tape.reshape(f, &[len, 1])?);
            }
        }
        groups.push(tape.concat_cols(&cols)?);
    }
    tape.concat_rows(&groups)
}

/// `(I, C) = logistic(W₂·ReLU(W₁·f + b₁) + b₂)`.
pub fn evaluate(features: &[f64], params: &EvaluatorParams) -> Result<(f64, f64)> {
    let h: Vec<f64> = params.l1.apply(features)?.into_iter().map(|x| x.max(0.0)).collect();
    let raw = params.l2.apply(&h)?;
    Ok((kernels::sigmoid(raw[0]), kernels::sigmoid(raw[1])))
}

/// Taped scores for a feature matrix `[N, a_dim]`: returns `[N, 2]` with
/// importance in column 0 and complexity in column 1.
pub fn evaluate_taped<'a>(tape: &mut Tape<'a>, features: Var, params: &'a EvaluatorParams) -> Result<Var> {
    let h = params.l1.record(tape, features)?;
    let h = tape.relu(h);
    let raw = params.l2.record(tape, h)?;
    Ok(tape.sigmoid(raw))
}
