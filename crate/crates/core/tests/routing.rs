use dasg_core::params::Affine;
use dasg_core::routing::*;
use dasg_core::{Error, SeededRng, Tensor};
use proptest::prelude::*;

fn grid(step: f64) -> impl Iterator<Item = f64> {
    let n = (1.0 / step).round() as usize;
    (0..=n).map(move |i| i as f64 / n as f64)
}

#[test]
fn count_is_monotone_and_bounded_on_fine_grid() {
    for k in 1..=8 {
        let mut prev = 0;
        for i in grid(0.001) {
            let c = allocate_count(i, k).unwrap();
            assert!((1..=k).contains(&c), "I={i} K={k} -> {c}");
            assert!(c >= prev, "not monotone at I={i} K={k}");
            // Independent restatement: smallest integer ≥ I·K, floored at 1.
            let mut want = 0;
            while (want as f64) < i * k as f64 {
                want += 1;
            }
            assert_eq!(c, want.max(1));
            prev = c;
        }
        assert_eq!(allocate_count(1.0, k).unwrap(), k);
        assert_eq!(allocate_count(0.0, k).unwrap(), 1);
    }
}

#[test]
fn sentiment_fixture_with_three_experts() {
    assert_eq!(allocate_count(0.82, 3).unwrap(), 3);
    assert_eq!(allocate_count(0.11, 3).unwrap(), 1);
}

#[test]
fn count_rejects_out_of_range_importance() {
    for bad in [-1e-9, 1.0 + 1e-9, f64::NAN, 3.0] {
        assert!(matches!(allocate_count(bad, 4), Err(Error::Domain { .. })), "{bad}");
    }
}

#[test]
fn tier_splits_conserve_budget_exhaustively() {
    let tasks = [[0.0, 1.0], [0.2, 0.8], [0.5, 0.5], [1.0, 0.0], [0.73, 0.27]];
    for k in 1..=8 {
        for c in grid(0.001) {
            let (s, d) = allocate_tiers_threshold(c, k, 0.3, 0.7);
            assert_eq!(s + d, k);
            for t in tasks {
                let (s, d) = allocate_tiers_task(c, k, t);
                assert_eq!(s + d, k, "C={c} K={k} T={t:?}");
            }
        }
    }
}

#[test]
fn threshold_breakpoints_are_exactly_at_thetas() {
    for k in 1..=8 {
        let mut changes = Vec::new();
        let mut prev = allocate_tiers_threshold(0.0, k, 0.3, 0.7);
        for c in grid(0.001) {
            let cur = allocate_tiers_threshold(c, k, 0.3, 0.7);
            if cur != prev {
                changes.push(c);
            }
            prev = cur;
        }
        // θ_s = 0.3 itself belongs to the middle band, so the first change
        // shows up at 0.3; θ_d = 0.7 still belongs to it, so the second
        // change is at the next grid point. With K = 1 the middle band is
        // already (0, 1).
        let expected: &[f64] = if k == 1 { &[0.3] } else { &[0.3, 0.701] };
        assert_eq!(changes.len(), expected.len(), "K={k} {changes:?}");
        for (a, b) in changes.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "K={k} {changes:?}");
        }
        assert_eq!(allocate_tiers_threshold(0.3 - 1e-12, k, 0.3, 0.7), (k, 0));
        assert_eq!(allocate_tiers_threshold(0.7 + 1e-12, k, 0.3, 0.7), (0, k));
        assert_eq!(allocate_tiers_threshold(0.3, k, 0.3, 0.7), (k / 2, k - k / 2));
        assert_eq!(allocate_tiers_threshold(0.7, k, 0.3, 0.7), (k / 2, k - k / 2));
    }
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
fn task_split_never_adds_shallow_experts_as_complexity_rises() {
    for k in 1..=8 {
        for t0 in grid(0.05) {
            let mut prev = usize::MAX;
            for c in grid(0.001) {
                let (s, _) = allocate_tiers_task(c, k, [t0, 1.0 - t0]);
                assert!(s <= prev, "K={k} T0={t0} C={c}");
                prev = s;
            }
        }
    }
}

#[test]
fn policy_wires_variants() {
    let mut p = AllocationPolicy {
        k_max: 3,
        ..Default::default()
    };
    assert_eq!(p.count(0.11).unwrap(), 3, "static uses K");
    p.variant = PolicyVariant::DynamicImportance;
    assert_eq!(p.count(0.11).unwrap(), 1);
    assert_eq!(p.count(0.82).unwrap(), 3);
    assert_eq!(p.split(0.9, 3), (0, 3));
    p.variant = PolicyVariant::TaskConditioned;
    p.task = [0.2, 0.8];
    assert_eq!(p.split(1.0, 5), (1, 4));
    let bad = AllocationPolicy {
        theta_s: 0.8,
        theta_d: 0.2,
        ..Default::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn global_route_examples() {
    let (m, p) = route_from_logits([2.0, -1.0]);
    assert_eq!(m, Tier::Shallow);
    assert!((p[0] - 0.9526).abs() < 1e-4 && (p[1] - 0.0474).abs() < 1e-4);
    let r = Affine::zeros(2, 5);
    let (m, p) = global_route(&[1.0, 2.0, 3.0, 4.0, 5.0], &r).unwrap();
    assert_eq!(m, Tier::Shallow);
    assert_eq!(p, [0.5, 0.5]);
}

#[test]
fn topk_examples() {
    let p = [0.4, 0.3, 0.2, 0.1, 0.0, 0.0, 0.0, 0.0];
    assert_eq!(topk_indices(&p, 2).unwrap(), vec![0, 1]);
    let r = Affine::zeros(8, 3);
    let (idx, w) = local_topk(&[0.5, -0.5, 2.0], &r, 2).unwrap();
    assert_eq!(idx, vec![0, 1]);
    assert_eq!(w, vec![0.125, 0.125]);
    assert!(topk_indices(&p, 9).is_err());
}

/// Linear scans: the best index, then the best of the rest; ties to the
/// lower index.
fn brute_top2(p: &[f64]) -> (usize, usize) {
    let best_except = |skip: Option<usize>| {
        let mut best: Option<usize> = None;
        for i in 0..p.len() {
            if Some(i) == skip {
                continue;
            }
            if best.map_or(true, |b| p[i] > p[b]) {
                best = Some(i);
            }
        }
        best.unwrap()
    };
    let a = best_except(None);
    (a, best_except(Some(a)))
}

proptest! {
    #[test]
    fn local_topk_matches_brute_force(seed in 0u64..5000, d in 1usize..6, quantize in any::<bool>()) {
        let mut rng = SeededRng::new(seed);
        let mut r = Affine::init(8, d, 1.0, &mut rng);
        if quantize {
            // Coarse weights force exact probability ties.
            for w in r.w.data_mut() { *w = (*w * 2.0).round() / 2.0; }
        }
        let x: Vec<f64> = (0..d).map(|_| if quantize { 1.0 } else { rng.normal() }).collect();
        let (idx, w) = local_topk(&x, &r, 2).unwrap();
        let p = local_probs(&x, &r).unwrap();
        let (a, b) = brute_top2(&p);
        prop_assert_eq!(idx, vec![a, b]);
        prop_assert!(w.iter().all(|&v| v > 0.0 && v < 1.0));
        prop_assert!(w.iter().sum::<f64>() <= 1.0 + 1e-12);
        prop_assert_eq!(w, vec![p[a], p[b]]);
    }

    #[test]
    fn tier_choice_ignores_scale_and_shift(a in -20.0f64..20.0, b in -20.0f64..20.0, s in 0.01f64..50.0, c in -100.0f64..100.0) {
        let (m, _) = route_from_logits([a, b]);
        prop_assert_eq!(route_from_logits([s * a, s * b]).0, m);
        prop_assert_eq!(route_from_logits([a + c, b + c]).0, m);
    }

    #[test]
    fn decision_invariants_hold_for_any_router(seed in 0u64..2000) {
        let mut rng = SeededRng::new(seed);
        let routers = RouterParams::init(6, &mut rng);
        let x = Tensor::randn(&[6], 1.0, &mut rng);
        let (m, p) = global_route(x.data(), &routers.global).unwrap();
        prop_assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
        let (idx, w) = local_topk(x.data(), routers.local(m), 2).unwrap();
        let d = RoutingDecision {
            tier: m,
            k_i: 2,
            k_s: if m == Tier::Shallow { 2 } else { 0 },
            k_d: if m == Tier::Deep { 2 } else { 0 },
            experts: idx.iter().map(|&e| RoutingDecision::expert_id(m, e)).collect(),
            gate_weights: w,
        };
        prop_assert!(d.check().is_ok());
    }
}
