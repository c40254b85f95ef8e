mod common;

use tokfilter::metrics::aggregate::aggregate;
use tokfilter::metrics::correlation::correlation;
use tokfilter::metrics::mass::{attention_mass_lost, FutureMass};
use tokfilter::numerics::{seeded_rng, RngStream};
use tokfilter::policy::{AnchorMode, CacheOnSkip, Focus, PruneConfig};
use tokfilter::trace::replay::verify_attention;
use tokfilter::trace::{replay, ReplayOptions, Trace, TraceHeader, TraceSource, TRACE_FORMAT_VERSION};
use tokfilter::trace::TraceEvent;
use tokfilter::transformer::{decode, BlockMode, Model, ModelConfig, Session};

fn small() -> ModelConfig {
    ModelConfig { n_layers: 4, n_heads: 2, d_head: 8, d_model: 16, d_ff: 32, vocab_size: 64, max_seq: 128, seed: 5 }
}

fn eager() -> PruneConfig {
    PruneConfig { focus: Focus::Uniform, p_global: 0.5, warmup_steps: 2, tau_init: 0.2, ..Default::default() }
}

#[test]
fn attention_matches_oracle_on_live_cache() {
    let mut rng = seeded_rng(9, RngStream::Synth);
    let model = common::model_with_biases(small(), &mut rng);
    let cfg = PruneConfig::default();
    let mut session = Session::new(&model, &cfg, 1, false).unwrap();
    session.decode(&[vec![1, 2, 3]], 6, BlockMode::Dense).unwrap();
    for layer in 0..4 {
        let x = common::random_vec(&mut rng, 16, 1.0);
        let mut flops = 0;
        let got = model.attention_forward(layer, &x, session.cache(0), &mut flops).unwrap();
        let want = common::attention_oracle(&model, layer, &x, session.cache(0));
        for (a, b) in got.iter().zip(&want) {
            assert!((f64::from(*a) - b).abs() < 1e-5);
        }
    }
}

#[test]
fn recorded_trace_shape() {
    let model = Model::new(ModelConfig { n_layers: 2, ..small() }).unwrap();
    let cfg = PruneConfig::default();
    let out = decode(&model, &cfg, &[vec![7]], 2, BlockMode::Dense, true).unwrap();
    let t = out.trace.unwrap();
    assert_eq!(t.events.len(), 4);
    assert_eq!(t.header.n_layers, 2);
    let out = decode(&model, &cfg, &[vec![7]], 0, BlockMode::Dense, true).unwrap();
    assert!(out.trace.unwrap().events.is_empty());
    assert!(out.reports.is_empty());
}

#[test]
fn dense_replay_reproduces_recorded_attention() {
    let model = Model::new(small()).unwrap();
    let out = decode(&model, &PruneConfig::default(), &[vec![1, 2, 3, 4]], 24, BlockMode::Dense, true).unwrap();
    let t = out.trace.unwrap();
    assert!(verify_attention(&t).unwrap() <= 1e-5);
    let r = replay(&t, &PruneConfig::default(), ReplayOptions { enact: false, verify_attention: true }).unwrap();
    assert!(r.attention_max_error.unwrap() <= 1e-5);
    assert!(r.reports.iter().all(|x| !x.skipped));
}

fn live_vs_replay(cfg: &PruneConfig) {
    let model = Model::new(small()).unwrap();
    let prompts = vec![vec![3, 1, 4], vec![2, 7]];
    let live = decode(&model, cfg, &prompts, 40, BlockMode::Filtered, true).unwrap();
    let trace = live.trace.clone().unwrap();
    let mut buf = Vec::new();
    trace.write_ndjson(&mut buf).unwrap();
    let loaded = Trace::read_ndjson(buf.as_slice()).unwrap();
    for t in [&trace, &loaded] {
        let r = replay(t, cfg, ReplayOptions::default()).unwrap();
        let key = |x: &tokfilter::StepReport| (x.seq, x.step, x.layer);
        let mut a = live.reports.clone();
        let mut b = r.reports.clone();
        a.sort_by_key(key);
        b.sort_by_key(key);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.skipped, y.skipped, "{x:?} vs {y:?}");
            assert_eq!(x.s_kv().map(f64::to_bits), y.s_kv().map(f64::to_bits));
            assert_eq!(x.tau.map(f64::to_bits), y.tau.map(f64::to_bits));
        }
    }
    assert!(live.reports.iter().any(|r| r.skipped), "policy never fired");
}

#[test]
fn live_and_replay_decisions_agree() {
    live_vs_replay(&eager());
}

#[test]
fn live_and_replay_agree_when_skipped_tokens_stay_cached() {
    live_vs_replay(&PruneConfig { cache_on_skip: CacheOnSkip::Keep, ..eager() });
}

#[test]
fn zero_budget_matches_dense_tokens() {
    let model = Model::new(small()).unwrap();
    let prompts = vec![vec![5, 6, 7]];
    let dense = decode(&model, &PruneConfig::default(), &prompts, 30, BlockMode::Dense, false).unwrap();
    let cfg = PruneConfig { p_global: 0.0, ..Default::default() };
    let filt = decode(&model, &cfg, &prompts, 30, BlockMode::Filtered, false).unwrap();
    assert_eq!(dense.tokens, filt.tokens);
    assert!(filt.reports.iter().all(|r| !r.skipped && !r.in_scope));
}

#[test]
fn flops_conserved_in_every_mode() {
    let model = Model::new(small()).unwrap();
    for mode in [BlockMode::Dense, BlockMode::Filtered, BlockMode::ForcedSkip, BlockMode::ForcedKeep] {
        for cache_on_skip in [CacheOnSkip::Drop, CacheOnSkip::Keep] {
            let cfg = PruneConfig { cache_on_skip, ..eager() };
            let out = decode(&model, &cfg, &[vec![1, 2]], 20, mode, false).unwrap();
            assert!(out.ledger.is_conserved(), "{mode:?} {:?}", out.ledger);
            let reported: i64 = out.reports.iter().map(|r| r.flops_saved).sum();
            assert_eq!(reported, out.ledger.saved);
        }
    }
}

#[test]
fn skipping_saves_work() {
    let model = Model::new(small()).unwrap();
    let out = decode(&model, &eager(), &[vec![1, 2]], 40, BlockMode::Filtered, false).unwrap();
    assert!(out.ledger.executed < out.ledger.dense);
}

#[test]
fn warmup_is_respected_live() {
    let model = Model::new(small()).unwrap();
    let cfg = PruneConfig { warmup_steps: 10, tau_init: -1.0, ..eager() };
    let out = decode(&model, &cfg, &[vec![1]], 30, BlockMode::Filtered, false).unwrap();
    assert!(out.reports.iter().filter(|r| r.skipped).all(|r| r.step_index.unwrap() >= 10));
    assert!(out.reports.iter().any(|r| r.skipped));
}

/// Keys that drift away from the first token get ever lower similarity
/// while attention on them keeps growing, so the correlation is exactly -1.
#[test]
fn monotone_trace_gives_negative_one() {
    let n = 20;
    let header = TraceHeader {
        format_version: TRACE_FORMAT_VERSION,
        n_layers: 1,
        n_heads: 1,
        d_head: 2,
        n_seqs: 1,
        n_steps: n,
        source: TraceSource::External,
        generator_params: Default::default(),
    };
    let mut t = Trace::new(header);
    let angle = |i: usize| 0.05 * i as f32;
    for step in 0..n {
        let k = vec![vec![angle(step).cos(), angle(step).sin()]];
        // Later queries weigh key j by j+1.
        let row: Vec<f32> = (0..=step).map(|j| (j + 1) as f32).collect();
        let z: f32 = row.iter().sum();
        t.events.push(TraceEvent {
            seq: 0,
            step,
            layer: 0,
            prefill: step == 0,
            k: k.clone(),
            v: k,
            q: None,
            attn: Some(vec![row.iter().map(|x| x / z).collect()]),
        });
    }
    let cfg = PruneConfig { focus: Focus::Uniform, anchor_mode: AnchorMode::ExactMean, ..Default::default() };
    let r = replay(&t, &cfg, ReplayOptions { enact: false, verify_attention: false }).unwrap();
    let c = correlation(&t, &r.reports).unwrap();
    assert_eq!(c.entries.len(), 1);
    assert!((c.entries[0].spearman + 1.0).abs() < 1e-9, "{:?}", c.entries);
    let fm = FutureMass::from_trace(&t).unwrap();
    let m = attention_mass_lost(&r.reports, &fm, 1).unwrap();
    assert_eq!(m.global, 0.0);
    let s = aggregate(&r.reports, 1, Some(&m));
    assert_eq!(s.global.skipped, 0);
}
