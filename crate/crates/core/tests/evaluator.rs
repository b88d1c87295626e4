use dasg_core::evaluator::*;
use dasg_core::gradcheck::{grad_check, GradCheckConfig};
use dasg_core::params::{visit_scoped, visit_scoped_mut};
use dasg_core::tape::Tape;
use dasg_core::{Parameters, SeededRng, Tensor};

/// Row-stochastic `[len, len]` from a random logit matrix.
fn random_attention(len: usize, rng: &mut SeededRng) -> Tensor {
    let mut data = Vec::with_capacity(len * len);
    for _ in 0..len {
        let z: Vec<f64> = (0..len).map(|_| 2.0 * rng.normal()).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        data.extend(e.iter().map(|v| v / s));
    }
    Tensor::new(&[len, len], data).unwrap()
}

/// Straight-line restatement of the three per-head features.
fn oracle_features(attn: &[Vec<Tensor>], token: usize) -> Vec<f64> {
    let len = attn[0][0].rows();
    let (g, i) = (token / len, token % len);
    let mut out = Vec::new();
    for a in &attn[g] {
        let mut col = 0.0;
        for r in 0..len {
            col += a.data()[r * len + i];
        }
        let mut ent = 0.0;
        let mut peak = 0.0f64;
        for c in 0..len {
            let p = a.data()[i * len + c];
            if p > 0.0 {
                ent -= p * p.ln();
            }
            peak = peak.max(p);
        }
        out.extend([col / len as f64, ent, peak]);
    }
    out
}

fn oracle_scores(f: &[f64], p: &EvaluatorParams) -> (f64, f64) {
    let (w1, b1) = (p.l1.w.data(), p.l1.b.data());
    let a = f.len();
    let h: Vec<f64> = (0..b1.len())
        .map(|j| {
            let mut s = b1[j];
            for k in 0..a {
                s += w1[j * a + k] * f[k];
            }
            s.max(0.0)
        })
        .collect();
    let (w2, b2) = (p.l2.w.data(), p.l2.b.data());
    let out: Vec<f64> = (0..2)
        .map(|o| {
            let mut s = b2[o];
            for (j, hj) in h.iter().enumerate() {
                s += w2[o * h.len() + j] * hj;
            }
            1.0 / (1.0 + (-s).exp())
        })
        .collect();
    (out[0], out[1])
}

#[test]
fn features_and_scores_match_straight_line_oracle() {
    let mut rng = SeededRng::new(11);
    for (groups, heads, len) in [(1, 1, 4), (2, 2, 5), (4, 3, 3)] {
        let attn: Vec<Vec<Tensor>> = (0..groups).map(|_| (0..heads).map(|_| random_attention(len, &mut rng)).collect()).collect();
        let params = EvaluatorParams::init(FEATURES_PER_HEAD * heads, 6, &mut rng).unwrap();
        let mut tape = Tape::new();
        let vars: Vec<Vec<_>> = attn.iter().map(|g| g.iter().map(|a| tape.constant(a.clone())).collect()).collect();
        let feats = pool_features_taped(&mut tape, &vars).unwrap();
        let scores = evaluate_taped(&mut tape, feats, &params).unwrap();
        let a_dim = FEATURES_PER_HEAD * heads;
        for tok in 0..groups * len {
            let want = oracle_features(&attn, tok);
            let got = pool_attention_features(&attn, tok).unwrap();
            let taped = &tape.value(feats)[tok * a_dim..(tok + 1) * a_dim];
            for k in 0..a_dim {
                assert!((got.data()[k] - want[k]).abs() < 1e-12, "tok {tok} feature {k}");
                assert!((taped[k] - want[k]).abs() < 1e-12, "taped tok {tok} feature {k}");
            }
            let (i, c) = evaluate(got.data(), &params).unwrap();
            let (oi, oc) = oracle_scores(&want, &params);
            assert!((i - oi).abs() < 1e-12 && (c - oc).abs() < 1e-12);
            let s = &tape.value(scores)[2 * tok..2 * tok + 2];
            assert!((s[0] - oi).abs() < 1e-12 && (s[1] - oc).abs() < 1e-12);
            assert!(i > 0.0 && i < 1.0 && c > 0.0 && c < 1.0);
        }
    }
}

struct Probe {
    eval: EvaluatorParams,
    /// Attention logits per group and head.
    logits: Vec<Tensor>,
}

impl Parameters for Probe {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_scoped(&self.eval, "eval", f);
        visit_scoped(&self.logits, "logits", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_scoped_mut(&mut self.eval, "eval", f);
        visit_scoped_mut(&mut self.logits, "logits", f);
    }
}

#[test]
fn squared_loss_gradient_matches_finite_differences() {
    let (groups, heads, len) = (2, 2, 4);
    let mut rng = SeededRng::new(5);
    let mut probe = Probe {
        eval: EvaluatorParams::init(FEATURES_PER_HEAD * heads, 5, &mut rng).unwrap(),
        logits: (0..groups * heads).map(|_| Tensor::randn(&[len, len], 1.0, &mut rng).trainable()).collect(),
    };
    let target = Tensor::randn(&[groups * len, 2], 0.3, &mut rng).map(|v| 0.5 + v.clamp(-0.4, 0.4));
    let report = grad_check(
        &mut probe,
        |t, p| {
            let mut attn = Vec::new();
            for g in 0..groups {
                let mut hs = Vec::new();
                for h in 0..heads {
                    let z = t.param(&p.logits[g * heads + h]);
                    hs.push(t.softmax(z)?);
                }
                attn.push(hs);
            }
            let f = pool_features_taped(t, &attn)?;
            let s = evaluate_taped(t, f, &p.eval)?;
            let y = t.constant(target.clone());
            let d = t.sub(s, y)?;
            let sq = t.mul(d, d)?;
            Ok(t.sum(sq))
        },
        GradCheckConfig {
            step: 1e-6,
            tolerance: 1e-5,
            floor: 1e-7,
        },
    )
    .unwrap();
    assert!(report.passed(), "{report:#?}");
    assert!(report.checked() > 50);
}

#[test]
fn permuting_heads_with_matching_weights_preserves_scores() {
    let (heads, len) = (3, 5);
    let mut rng = SeededRng::new(21);
    let attn: Vec<Vec<Tensor>> = vec![(0..heads).map(|_| random_attention(len, &mut rng)).collect()];
    let params = EvaluatorParams::init(FEATURES_PER_HEAD * heads, 7, &mut rng).unwrap();
    let perm = [2, 0, 1];
    let permuted: Vec<Vec<Tensor>> = vec![perm.iter().map(|&h| attn[0][h].clone()).collect()];
    // Column block b of the permuted weights reads head perm[b].
    let mut moved = params.clone();
    let a = FEATURES_PER_HEAD * heads;
    for r in 0..7 {
        for (b, &h) in perm.iter().enumerate() {
            for k in 0..FEATURES_PER_HEAD {
                moved.l1.w.data_mut()[r * a + b * FEATURES_PER_HEAD + k] = params.l1.w.data()[r * a + h * FEATURES_PER_HEAD + k];
            }
        }
    }
    for tok in 0..len {
        let f = pool_attention_features(&attn, tok).unwrap();
        let fp = pool_attention_features(&permuted, tok).unwrap();
        let (i, c) = evaluate(f.data(), &params).unwrap();
        let (ip, cp) = evaluate(fp.data(), &moved).unwrap();
        assert!((i - ip).abs() < 1e-14 && (c - cp).abs() < 1e-14);
    }
}

#[test]
fn frozen_evaluator_reports_zero_gradient() {
    let mut rng = SeededRng::new(2);
    let mut params = EvaluatorParams::init(6, 4, &mut rng).unwrap();
    params.freeze();
    let feats = Tensor::randn(&[3, 6], 1.0, &mut rng);
    let report = grad_check(
        &mut params,
        |t, p| {
            let f = t.constant(feats.clone());
            let s = evaluate_taped(t, f, p)?;
            Ok(t.sum(s))
        },
        GradCheckConfig::default(),
    )
    .unwrap();
    assert_eq!(report.checked(), 0);
    assert!(report.frozen_grads_zero());
    assert!(report.params.iter().all(|p| p.frozen));
}
