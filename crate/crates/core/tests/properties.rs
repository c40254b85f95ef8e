use proptest::prelude::*;
use tokfilter::metrics::mass::{attention_mass_lost, FutureMass};
use tokfilter::numerics::{seeded_rng, RngStream};
use tokfilter::policy::{
    layer_plan, per_layer_target, selected_count, update_threshold, Estimator, Focus, PruneConfig, SkipRatioEstimator,
};
use tokfilter::trace::{replay, synthesize, Pattern, ReplayOptions, SynthParams};

fn focus() -> impl Strategy<Value = Focus> {
    prop_oneof![Just(Focus::Tail), Just(Focus::Head), Just(Focus::Uniform)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn budget_composes_to_global(n in 1usize..64, y in 0.05f64..=1.0, share in 0.0f64..=1.0, focus in focus()) {
        let p = share * y;
        let cfg = PruneConfig { p_global: p, tail_fraction: y, focus, ..Default::default() };
        let plan = layer_plan(n, &cfg).unwrap();
        let target = per_layer_target(&cfg).unwrap();
        prop_assert!((0.0..=1.0).contains(&target));
        let k = selected_count(n, y);
        prop_assert!(k as f64 >= y * n as f64 - 1e-9 && (k as f64) < y * n as f64 + 1.0);
        let mean: f64 = plan.iter().map(|b| b.target_ratio).sum::<f64>() / n as f64;
        // Rounding the layer count up can only overshoot the budget.
        prop_assert!(mean >= p - 1e-9);
        if focus == Focus::Uniform || (y * n as f64).fract() == 0.0 {
            prop_assert!((mean - p).abs() < 1e-9);
        }
    }

    #[test]
    fn cumulative_controller_hits_target(target in 0.1f64..0.6, lo in -0.5f64..0.5, width in 0.1f64..0.5, seed in 0u64..1000) {
        let mut rng = seeded_rng(seed, RngStream::Synth);
        let mut tau = 0.9;
        let mut est = SkipRatioEstimator::new(Estimator::Cumulative, 0.9);
        // tau starts far above the score range; the cumulative ratio recovers
        // from that early deficit only as 1/t.
        let steps = 20_000;
        let mut skips = 0;
        for _ in 0..steps {
            let s: f64 = lo + width * rand::Rng::random::<f64>(&mut rng);
            let skip = s > tau;
            skips += usize::from(skip);
            est.observe(usize::from(skip), 1);
            tau = update_threshold(tau, est.ratio(), target, 0.01);
        }
        let ratio = skips as f64 / steps as f64;
        prop_assert!((ratio - target).abs() <= 0.03, "ratio {ratio} target {target}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn mass_lost_is_bounded_and_monotone(seed in 0u64..1000, p in 0.05f64..0.5, pattern in 0usize..3, mask in any::<u64>()) {
        let pattern = [Pattern::Repetitive, Pattern::Random, Pattern::DepthConcentrated][pattern];
        let t = synthesize(&SynthParams { pattern, n_layers: 4, n_heads: 2, d_head: 8, n_steps: 48, seed, ..Default::default() }).unwrap();
        let cfg = PruneConfig { p_global: p, ..Default::default() };
        let out = replay(&t, &cfg, ReplayOptions::default()).unwrap();
        let m = out.mass_lost.unwrap();
        prop_assert!((0.0..=1.0).contains(&m.global));
        prop_assert!(m.per_layer.iter().all(|x| (0.0..=1.0).contains(x)));

        // Growing the skipped set never lowers the mass lost.
        let fm = FutureMass::from_trace(&t).unwrap();
        let mut reports = out.reports.clone();
        let base = attention_mass_lost(&reports, &fm, 4).unwrap();
        for (i, r) in reports.iter_mut().enumerate() {
            r.skipped |= mask >> (i % 64) & 1 == 1;
        }
        let grown = attention_mass_lost(&reports, &fm, 4).unwrap();
        prop_assert!(grown.global >= base.global - 1e-12);
        for (a, b) in base.per_layer.iter().zip(&grown.per_layer) {
            prop_assert!(b >= &(a - 1e-12));
        }
        for r in &mut reports {
            r.skipped = true;
        }
        prop_assert!((attention_mass_lost(&reports, &fm, 4).unwrap().global - 1.0).abs() < 1e-9);
    }
}
