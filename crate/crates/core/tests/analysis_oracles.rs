//! Closed forms checked against values computed independently here.

use cachesort::analysis::{
    choose_k, cor1, cor2, cor3a, cor3b, exact_inplace, exact_outofplace, lower_inplace,
    msb_radix_bound, msb_radix_report, p_s, seq_cor, upper_inplace, upper_outofplace,
    upper_sequences, Criterion, DistKind, Estimator, Formula, OccupancyContext,
};
use cachesort::{CacheGeometry, ClassDistribution};
use proptest::prelude::*;

fn geom(b: u64, c: u64) -> CacheGeometry {
    CacheGeometry::new(b, c).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn cor1_worked_example() {
    let r = cor1(geom(8, 64), 8, 1_000_000);
    // 1/8 + 8*13/1024 + 8/4096
    assert!(close(r.rate, 0.228_515_625, 1e-12), "{}", r.rate);
    assert!(close(r.upper_total.unwrap(), 228_515.625 + 9.0, 1e-6));
    assert_eq!(r.formula, Formula::Cor1);
}

#[test]
fn thm6_worked_example() {
    let g = geom(8, 64);
    let r = msb_radix_report(g, 8, 4, 1_000_000).unwrap();
    // 1/8 + (8/512) * (18.4 + 6 + 6 - 2 + 0.7)
    assert!(close(r.rate, 0.579_687_5, 1e-12), "{}", r.rate);
    assert!(close(
        msb_radix_bound(g, 8, 4, 1_000_000).unwrap(),
        579_687.5 + 36.0,
        1e-6
    ));
    let sum: f64 = r.terms.iter().map(|t| t.value).sum();
    assert!(close(sum, r.rate, 1e-12));
}

#[test]
fn seq_cor_worked_example() {
    let r = seq_cor(geom(8, 64), 8, 1000);
    assert!(close(r.rate, 0.210_937_5, 1e-12));
    assert!(close(r.upper_total.unwrap(), 210.9375 + 8.0, 1e-9));
}

#[test]
fn cor3_forms() {
    let g = geom(8, 128);
    let (b, c) = (8.0, 128.0);
    for k in [8usize, 16, 64] {
        let kf = k as f64;
        let a = cor3a(g, k, 10).rate;
        let bb = cor3b(g, k, 10).rate;
        assert!(close(
            a,
            1.0 / b + kf * (b + 3.0) / (2.0 * b * c) + kf / (b * b * c) + kf / (b * c),
            1e-12
        ));
        assert!(close(
            bb,
            2.0 / b + kf * (b + 7.0) / (2.0 * b * c) + 2.0 * kf / (b * b * c) + 2.0 / c,
            1e-12
        ));
        assert!(bb > a);
    }
}

/// The general upper bounds specialised by hand to `p_i = 1/k`: each class/block
/// pair contributes `B / (k (B + 1))` and each class pair `1 / (2k)`.
fn uniform_thm2_by_hand(b: f64, c: f64, k: f64) -> (f64, f64) {
    let class_block = k / (b + 1.0);
    let class_class = k / 2.0;
    let p_d = 1.0 / b
        + k / (b * c)
        + (b - 1.0) / (b * c) * class_block
        + (b - 1.0) * (b - 1.0) / (b * b * c) * class_class;
    let p_c = k / (b * b * c) + (b - 1.0) / (b * c) * class_block;
    (p_c, p_d)
}

#[test]
fn thm2_uniform_matches_hand_specialisation_and_sits_below_cor1() {
    for (b, c) in [(8u64, 128u64), (8, 8192), (32, 128), (4, 256)] {
        for k in [8usize, 16, 32, 64, 128] {
            if (k as u64) < b || k as u64 > b * c {
                continue;
            }
            let g = geom(b, c);
            let ctx = OccupancyContext::uniform(g, k).unwrap();
            let r = upper_inplace(&ctx, 1000).unwrap();
            let (pc, pd) = uniform_thm2_by_hand(b as f64, c as f64, k as f64);
            if r.clamped {
                continue;
            }
            assert!(close(r.components.p_c.unwrap(), pc, 1e-12));
            assert!(close(r.components.p_d.unwrap(), pd, 1e-12));
            assert!(r.rate <= cor1(g, k, 1000).rate + 1e-12, "B={b} C={c} k={k}");
        }
    }
}

#[test]
fn thm5_uniform_matches_hand_specialisation() {
    let (b, c, k) = (8.0, 128.0, 32.0);
    let ctx = OccupancyContext::uniform(geom(8, 128), 32).unwrap();
    let r = upper_outofplace(&ctx, 1000).unwrap();
    let class_block = k / (b + 1.0);
    let class_class = k / 2.0;
    let pd = 1.0 / b
        + 2.0 * (b - 1.0) * k / (b * b * c)
        + (b - 1.0) / (b * c) * class_block
        + (b - 1.0) * (b - 1.0) / (b * b * c) * (1.0 + class_class);
    let pc = 2.0 * k / (b * b * c) + (b - 1.0) / (b * c) * (1.0 + class_block);
    assert!(close(r.components.p_d.unwrap(), pd, 1e-12));
    assert!(close(r.components.p_c.unwrap(), pc, 1e-12));
    assert!(close(r.components.p_s.unwrap(), p_s(geom(8, 128)), 1e-15));
    assert!(close(
        r.upper_total.unwrap(),
        1000.0 * r.rate + k * (1.0 + 1.0 / b) + 1.0,
        1e-9
    ));
}

#[test]
fn thm3_uniform_matches_hand_specialisation() {
    let (b, c) = (8.0, 128.0);
    for k in [8.0f64, 16.0, 64.0, 128.0] {
        let ctx = OccupancyContext::uniform(geom(8, 128), k as usize).unwrap();
        let r = lower_inplace(&ctx, 1000).unwrap();
        // With p_i = 1/k: sum p_i^2/(p_i+p_j) = k/2, the p_i(1-p_i-p_j)/(p_i+p_j)^2
        // sum is k(k-2)/4 per i, and the triple sum is k^3/(3k-1) per i.
        let sq = k / 2.0;
        let inner = k * (k - 2.0) / 4.0 - (b - 1.0) / 2.0 * k.powi(3) / (3.0 * k - 1.0);
        let pd =
            1.0 / b + k * (2.0 * c - k) / (2.0 * c * c) + k * (k - 3.0 * c) / (2.0 * b * c * c)
                - 1.0 / (2.0 * b * c)
                - k / (2.0 * b * b * c)
                + (b * (k - c) + 2.0 * c - 3.0 * k) / (b * c * c) * sq
                + (b - 1.0) * (b - 1.0) / (b * b * b * c * c) * inner;
        assert!(close(r.rate, pd, 1e-12), "k={k}: {} vs {pd}", r.rate);
        let c2 = cor2(geom(8, 128), k as usize, 1000).unwrap().rate;
        // cor2 is thm3 with lower-order terms simplified.
        assert!(
            close(r.rate, c2, 1.0 / c),
            "k={k}: thm3 {} cor2 {c2}",
            r.rate
        );
        assert!(r.rate < cor1(geom(8, 128), k as usize, 1000).rate);
    }
}

#[test]
fn seq_uniform_below_seq_cor() {
    for k in [2usize, 4, 16, 100] {
        let g = geom(8, 128);
        let ctx = OccupancyContext::uniform(g, k).unwrap();
        let thm = upper_sequences(&ctx, 1000).unwrap();
        assert_eq!(thm.k, k);
        assert!(thm.rate <= seq_cor(g, k, 1000).rate + 1e-12);
    }
}

#[test]
fn clamping_is_flagged() {
    let g = geom(8, 16);
    let r = cor1(g, 128, 100);
    assert!(r.clamped);
    assert_eq!(r.rate, 1.0);
    let ctx = OccupancyContext::uniform(g, 128).unwrap();
    let r = upper_inplace(&ctx, 100).unwrap();
    assert!(r.clamped);
    assert!(r.rate <= 2.0);
    let r = cor1(geom(8, 128), 8, 100);
    assert!(!r.clamped);
}

#[test]
fn exact_sits_between_bounds() {
    let g = geom(8, 128);
    let ctx = OccupancyContext::uniform(g, 16).unwrap();
    let est = Estimator::default();
    let ex = exact_inplace(&ctx, 1_000_000, &est).unwrap();
    let ci = ex.exact_estimate.unwrap();
    let up = upper_inplace(&ctx, 1_000_000).unwrap().rate;
    let lo = lower_inplace(&ctx, 1_000_000).unwrap().rate;
    assert!(ci.ci_halfwidth > 0.0 && ci.ci_halfwidth < 0.01);
    assert!(
        ex.rate <= up + ci.ci_halfwidth,
        "exact {} upper {up}",
        ex.rate
    );
    assert!(
        ex.rate >= lo - ci.ci_halfwidth,
        "exact {} lower {lo}",
        ex.rate
    );

    let oop = exact_outofplace(&ctx, 1_000_000, &est).unwrap();
    let up5 = upper_outofplace(&ctx, 1_000_000).unwrap().rate;
    let half = oop.exact_estimate.unwrap().ci_halfwidth;
    assert!(oop.rate <= up5 + half);
    assert!(oop.rate > ex.rate);
}

#[test]
fn exact_interval_shrinks_with_samples() {
    let ctx = OccupancyContext::new(geom(8, 128), ClassDistribution::geometric(16).unwrap());
    let width = |samples| {
        let est = Estimator {
            samples,
            ..Default::default()
        };
        exact_inplace(&ctx, 1_000_000, &est)
            .unwrap()
            .exact_estimate
            .unwrap()
            .ci_halfwidth
    };
    let ratio = width(8000) / width(2000);
    // Quadrupling the sample count should roughly halve the interval.
    assert!((0.35..0.7).contains(&ratio), "{ratio}");
}

#[test]
fn exact_is_reproducible() {
    let ctx = OccupancyContext::uniform(geom(8, 128), 32).unwrap();
    let est = Estimator {
        samples: 500,
        ..Default::default()
    };
    let a = exact_inplace(&ctx, 10_000, &est).unwrap();
    let b = exact_inplace(&ctx, 10_000, &est).unwrap();
    assert_eq!(a.rate, b.rate);
}

#[test]
fn strict_criterion_choice() {
    let g = geom(8, 128);
    let eps = 0.5;
    let c = choose_k(
        g,
        1 << 20,
        Criterion::StrictMisses(eps),
        DistKind::Uniform,
        1 << 20,
    );
    // Largest power of two with 1/B + cor1(k) <= (2 + eps)/B, evaluated by hand.
    let (b, cc) = (8.0, 128.0);
    let mut want = 0;
    let mut k = 2u64;
    while k <= 1024 {
        let kf = k as f64;
        if 2.0 / b + kf * (b + 5.0) / (2.0 * b * cc) + kf / (b * b * cc) <= (2.0 + eps) / b {
            want = k;
        }
        k *= 2;
    }
    assert_eq!(want, 8);
    assert_eq!(c.k, want);
    assert!(c.feasible);
}

#[test]
fn huge_cache_hits_the_candidate_cap() {
    let g = geom(8, 1 << 30);
    let c = choose_k(
        g,
        1 << 16,
        Criterion::StrictMisses(1.0),
        DistKind::Uniform,
        1 << 40,
    );
    assert_eq!(c.k, (1 << 16) / 8);
}

#[test]
fn float_model_choice_respects_thm6_preconditions() {
    let g = geom(8, 128);
    for n in [1u64 << 14, 1 << 20] {
        let c = choose_k(
            g,
            n,
            Criterion::TradeOff(Default::default()),
            DistKind::FloatModel { groups: 16 },
            n,
        );
        assert!(c.feasible);
        assert!(c.per_group <= 128 && c.k <= 1024);
        assert!(msb_radix_bound(g, 16, c.per_group, n).is_ok());
    }
}

proptest! {
    #[test]
    fn thm6_grows_with_group_width(log_k in 0u32..6) {
        let g = geom(8, 128);
        let k = 1u64 << log_k;
        let a = msb_radix_report(g, 8, k, 1000).unwrap().rate;
        let b = msb_radix_report(g, 8, 2 * k, 1000).unwrap().rate;
        prop_assert!(b > a);
    }

    #[test]
    fn bounds_ignore_block_order(weights in prop::collection::vec(1.0f64..10.0, 16), swap in 0usize..2) {
        let g = geom(8, 128);
        let d = ClassDistribution::from_weights(&weights).unwrap();
        let mut swapped = weights.clone();
        if swap == 1 {
            let (lo, hi) = swapped.split_at_mut(8);
            lo.swap_with_slice(hi);
        }
        let d2 = ClassDistribution::from_weights(&swapped).unwrap();
        let a = upper_inplace(&OccupancyContext::new(g, d), 100).unwrap();
        let b = upper_inplace(&OccupancyContext::new(g, d2), 100).unwrap();
        prop_assert!((a.rate - b.rate).abs() < 1e-12);
    }

    #[test]
    fn rates_are_probabilities(k in 2usize..300, logc in 4u32..12) {
        let g = geom(8, 1 << logc);
        for r in [cor1(g, k, 10), cor3a(g, k, 10), cor3b(g, k, 10), seq_cor(g, k, 10)] {
            prop_assert!((0.0..=1.0).contains(&r.rate));
        }
        let ctx = OccupancyContext::uniform(g, k).unwrap();
        if let Ok(r) = upper_inplace(&ctx, 10) {
            prop_assert!(r.components.p_c.unwrap() <= 1.0 && r.components.p_d.unwrap() <= 1.0);
        }
    }
}
