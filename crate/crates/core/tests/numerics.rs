use dasg_core::gradcheck::{grad_check, GradCheckConfig};
use dasg_core::kernels::MASK;
use dasg_core::params::{visit_scoped, visit_scoped_mut};
use dasg_core::{Parameters, SeededRng, Tape, Tensor};
use proptest::prelude::*;

/// Central differences of `f` around `x`, written out longhand.
fn central_diff(x: &[f64], step: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[test]
fn matmul_sum_gradient_matches_central_differences() {
    let mut rng = SeededRng::new(11);
    let a = Tensor::randn(&[5, 4], 1.0, &mut rng);
    let b = Tensor::randn(&[4, 3], 1.0, &mut rng);

    let mut tape = Tape::new();
    let va = tape.leaf(a.clone());
    let vb = tape.leaf(b.clone());
    let c = tape.matmul(va, vb).unwrap();
    let s = tape.sum(c);
    let g = tape.backward(s).unwrap();

    let fd_a = central_diff(a.data(), 1e-4, |x| naive_matmul(x, b.data(), 5, 4, 3).iter().sum());
    let fd_b = central_diff(b.data(), 1e-4, |x| naive_matmul(a.data(), x, 5, 4, 3).iter().sum());
    let err_a = g.wrt(va).unwrap().iter().zip(&fd_a).map(|(x, y)| rel(*x, *y)).fold(0.0, f64::max);
    let err_b = g.wrt(vb).unwrap().iter().zip(&fd_b).map(|(x, y)| rel(*x, *y)).fold(0.0, f64::max);
    assert!(err_a < 1e-4 && err_b < 1e-4, "{err_a} {err_b}");
}

struct Linear {
    w: Tensor,
    x: Tensor,
}

impl Parameters for Linear {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_scoped(&self.w, "w", f);
        visit_scoped(&self.x, "x", f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_scoped_mut(&mut self.w, "w", f);
        visit_scoped_mut(&mut self.x, "x", f);
    }
}

#[test]
fn grad_check_linear_function_is_tight() {
    let mut rng = SeededRng::new(2);
    let mut p = Linear {
        w: Tensor::randn(&[3, 4], 1.0, &mut rng).trainable(),
        x: Tensor::randn(&[4, 2], 1.0, &mut rng).trainable(),
    };
    let cfg = GradCheckConfig {
        step: 1e-4,
        tolerance: 1e-6,
        ..Default::default()
    };
    let report = grad_check(
        &mut p,
        |t, p| {
            let w = t.param(&p.w);
            let x = t.param(&p.x);
            let y = t.matmul(w, x)?;
            Ok(t.sum(y))
        },
        cfg,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
    assert_eq!(report.checked(), 12 + 8);
}

#[test]
fn frozen_weights_report_zero_gradient() {
    let mut rng = SeededRng::new(5);
    let mut p = Linear {
        w: Tensor::randn(&[3, 4], 1.0, &mut rng).trainable(),
        x: Tensor::randn(&[4, 2], 1.0, &mut rng).trainable(),
    };
    p.w.freeze();
    let report = grad_check(
        &mut p,
        |t, p| {
            let w = t.param(&p.w);
            let x = t.param(&p.x);
            let y = t.matmul(w, x)?;
            let y = t.relu(y);
            Ok(t.sum(y))
        },
        GradCheckConfig::default(),
    )
    .unwrap();
    let w = &report.params[0];
    assert!(w.frozen);
    assert_eq!(w.max_tape_grad, 0.0);
    assert_eq!(w.checked, 0);
    assert!(report.passed());
    assert_eq!(p.w.grad().unwrap().iter().filter(|&&g| g != 0.0).count(), 0);
}

/// Every differentiable tape op, composed into one scalar.
struct Composite {
    a: Tensor,
    b: Tensor,
    w: Tensor,
    bias: Tensor,
    s: Tensor,
}

impl Parameters for Composite {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_scoped(&self.a, "a", f);
        visit_scoped(&self.b, "b", f);
        visit_scoped(&self.w, "w", f);
        visit_scoped(&self.bias, "bias", f);
        visit_scoped(&self.s, "s", f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_scoped_mut(&mut self.a, "a", f);
        visit_scoped_mut(&mut self.b, "b", f);
        visit_scoped_mut(&mut self.w, "w", f);
        visit_scoped_mut(&mut self.bias, "bias", f);
        visit_scoped_mut(&mut self.s, "s", f);
    }
}

#[test]
fn every_op_gradient_matches_central_differences() {
    for seed in 0..5 {
        let mut rng = SeededRng::new(100 + seed);
        let n = 6;
        let mut p = Composite {
            a: Tensor::randn(&[n, 4], 1.0, &mut rng).trainable(),
            b: Tensor::randn(&[4, n], 1.0, &mut rng).trainable(),
            w: Tensor::randn(&[5, 4], 0.7, &mut rng).trainable(),
            bias: Tensor::randn(&[5], 0.3, &mut rng).trainable(),
            s: Tensor::scalar(0.8).trainable(),
        };
        let mut mask = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                if i.abs_diff(j) > 1 {
                    mask.data_mut()[i * n + j] = MASK;
                }
            }
        }
        let report = grad_check(
            &mut p,
            |t, p| {
                let a = t.param(&p.a);
                let b = t.param(&p.b);
                let w = t.param(&p.w);
                let bias = t.param(&p.bias);
                let s = t.param(&p.s);
                let m = t.constant(mask.clone());

                let scores = t.matmul(a, b)?;
                let scores = t.scale(scores, 0.5);
                let scores = t.add(scores, m)?;
                let attn = t.softmax(scores)?;
                let ent = t.row_entropy(attn);
                let mx = t.row_max(attn);
                let mixed = t.matmul(attn, a)?;
                let h = t.linear(mixed, w, Some(bias))?;
                let h = t.relu(h);
                let left = t.slice_cols(h, 0, 2)?;
                let right = t.slice_cols(h, 2, 3)?;
                let h = t.concat_cols(&[right, left])?;
                let top = t.slice_rows(h, 0, 2)?;
                let rest = t.slice_rows(h, 2, n - 2)?;
                let h = t.concat_rows(&[rest, top])?;
                let ht = t.transpose(h)?;
                let pooled = t.mean_rows(h);
                let sig = t.sigmoid(pooled);
                let gated = t.scale_by(sig, s)?;
                let e2 = t.mul(ent, mx)?;
                let lsm = t.log_softmax(gated);
                let pick = t.index(lsm, 1)?;
                let shifted = t.add_scalar(pick, 2.0);
                let r = t.reshape(ht, &[5 * n])?;
                let rs = t.sum(r);
                let es = t.sum(e2);
                let d = t.sub(shifted, es)?;
                let tot = t.add(d, rs)?;
                Ok(t.scale(tot, 0.1))
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {report:#?}");
        assert!(report.checked() > report.skipped() * 10, "{report:#?}");
    }
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let v = tape.leaf(Tensor::zeros(&[2]));
    assert!(tape.backward(v).is_err());
}

#[test]
fn shared_parameter_is_one_leaf() {
    let w = Tensor::full(&[2], 3.0).trainable();
    let mut tape = Tape::new();
    let a = tape.param(&w);
    let b = tape.param(&w);
    assert_eq!(a, b);
    let y = tape.mul(a, b).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.for_param(&w).unwrap(), &[6.0, 6.0]);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        row in prop::collection::vec(-30.0f64..30.0, 1..12),
        shift in -100.0f64..100.0,
    ) {
        let t = Tensor::vector(row.clone()).softmax_lastdim().unwrap();
        prop_assert!((t.sum() - 1.0).abs() < 1e-6);
        let shifted = Tensor::vector(row.iter().map(|x| x + shift).collect()).softmax_lastdim().unwrap();
        prop_assert!(t.max_abs_diff(&shifted) < 1e-9);
    }

    #[test]
    fn masked_softmax_is_finite_with_zeros(
        row in prop::collection::vec(-30.0f64..30.0, 2..12),
        keep in 0usize..12,
    ) {
        let keep = keep % row.len();
        let masked: Vec<f64> = row.iter().enumerate().map(|(i, &x)| if i == keep || i % 2 == 0 { x } else { MASK }).collect();
        let t = Tensor::vector(masked.clone()).softmax_lastdim().unwrap();
        prop_assert!(t.is_finite());
        prop_assert!((t.sum() - 1.0).abs() < 1e-6);
        for (p, x) in t.data().iter().zip(&masked) {
            if *x == MASK { prop_assert_eq!(*p, 0.0); }
        }
    }

    #[test]
    fn matmul_is_associative(seed in 0u64..1000, m in 1usize..6, k in 1usize..6, n in 1usize..6, q in 1usize..6) {
        let mut rng = SeededRng::new(seed);
        let a = Tensor::randn(&[m, k], 1.0, &mut rng);
        let b = Tensor::randn(&[k, n], 1.0, &mut rng);
        let c = Tensor::randn(&[n, q], 1.0, &mut rng);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        for (x, y) in left.data().iter().zip(right.data()) {
            prop_assert!((x - y).abs() <= 1e-5 * x.abs().max(y.abs()).max(1.0));
        }
    }

    #[test]
    fn frozen_buffer_stays_zero_across_backward_passes(seed in 0u64..200, passes in 1usize..5) {
        let mut rng = SeededRng::new(seed);
        let mut p = Linear {
            w: Tensor::randn(&[3, 3], 1.0, &mut rng).trainable(),
            x: Tensor::randn(&[3, 2], 1.0, &mut rng).trainable(),
        };
        p.w.freeze();
        for _ in 0..passes {
            let g = {
                let mut t = Tape::new();
                let w = t.param(&p.w);
                let x = t.param(&p.x);
                let y = t.matmul(w, x).unwrap();
                let s = t.sum(y);
                t.backward(s).unwrap()
            };
            g.accumulate_into(&mut p);
        }
        prop_assert!(p.w.grad().unwrap().iter().all(|&g| g == 0.0));
        prop_assert!(p.x.grad().unwrap().iter().any(|&g| g != 0.0));
    }
}

#[test]
fn indexing_ops_gradient_matches_central_differences() {
    for seed in 0..5 {
        let mut rng = SeededRng::new(300 + seed);
        let mut p = Composite {
            a: Tensor::randn(&[6, 3], 1.0, &mut rng).trainable(),
            b: Tensor::randn(&[4], 1.0, &mut rng).trainable(),
            w: Tensor::randn(&[3, 3], 0.7, &mut rng).trainable(),
            bias: Tensor::randn(&[3], 0.3, &mut rng).trainable(),
            s: Tensor::scalar(1.7).trainable(),
        };
        let report = grad_check(
            &mut p,
            |t, p| {
                let a = t.param(&p.a);
                let b = t.param(&p.b);
                let w = t.param(&p.w);
                let bias = t.param(&p.bias);
                let s = t.param(&p.s);
                // Duplicate row 4 so scatter has to add.
                let rows = [4usize, 1, 4, 0];
                let g = t.gather_rows(a, &rows)?;
                let h = t.linear(g, w, Some(bias))?;
                let h = t.sigmoid(h);
                let scaled = t.scale_rows(h, b)?;
                let back = t.scatter_rows(scaled, &[5, 2, 5, 3], 6)?;
                let picked = t.gather(back, &[15, 16, 6, 9, 17])?;
                let denom = t.add_scalar(s, 0.5);
                let sp = t.sum(picked);
                let q = t.div(sp, denom)?;
                let all = t.sum(back);
                let num = t.mul(all, q)?;
                t.div(num, s)
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {report:#?}");
        assert_eq!(report.skipped(), 0);
        // a rows 2,3,5 never reach the loss.
        assert!(report.params[0].checked == 18);
    }
}
