//! Synthetic K/V/query streams with exact attention ground truth.
//!
//! Every head carries a shared direction `c` that all tokens contain plus a
//! token-specific deviation. The shared part shifts every score of a query
//! by the same amount, so attention is decided by the deviations alone:
//! tokens far from the running average attract more attention from random
//! queries, tokens close to it attract less.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Trace, TraceEvent, TraceHeader, TraceSource, TRACE_FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::numerics::{dot, gaussian_vec, seeded_rng, softmax_in_place, RngStream};
use crate::transformer::Heads;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    Repetitive,
    Random,
    DepthConcentrated,
}

impl Pattern {
    pub const NAMES: &'static [&'static str] = &["repetitive", "random", "depth_concentrated"];

    pub fn as_str(&self) -> &'static str {
        match self {
            Pattern::Repetitive => "repetitive",
            Pattern::Random => "random",
            Pattern::DepthConcentrated => "depth_concentrated",
        }
    }

    /// Query scale giving each pattern its intended attention profile:
    /// sharp enough on repetitive streams that a token's deviation, not its
    /// position, decides the attention it gets; unit scale for the random
    /// baseline; moderate at layer 0 of the depth schedule so early layers
    /// stay diffuse.
    pub fn default_query_scale(&self) -> f64 {
        match self {
            Pattern::Repetitive => 10.0,
            Pattern::Random => 1.0,
            Pattern::DepthConcentrated => 3.0,
        }
    }
}

impl FromStr for Pattern {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "repetitive" => Ok(Pattern::Repetitive),
            "random" => Ok(Pattern::Random),
            "depth_concentrated" => Ok(Pattern::DepthConcentrated),
            _ => Err(format!("unknown pattern `{s}` (expected one of {})", Pattern::NAMES.join(", "))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub pattern: Pattern,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub n_seqs: usize,
    /// Token positions per sequence.
    pub n_steps: usize,
    /// Leading positions marked as prefill.
    pub prefill: usize,
    pub seed: u64,
    /// Prototype count of the repetitive pattern.
    pub dictionary: usize,
    /// Additive noise norm of the repetitive pattern.
    pub noise: f64,
    /// Probability that a repetitive token repeats the previous prototype.
    pub repeat_prob: f64,
    /// Fraction of salient tokens in the depth-concentrated pattern.
    pub salient_fraction: f64,
    pub salient_scale: f64,
    pub filler_scale: f64,
    /// Per-layer perturbation of the shared token structure.
    pub layer_jitter: f64,
    /// Temperature schedule `t(l) = t0 * exp(-decay * l)`.
    pub t0: f64,
    pub decay: f64,
    /// Per-coordinate standard deviation of queries (before temperature);
    /// `None` picks [`Pattern::default_query_scale`].
    pub query_scale: Option<f64>,
    /// Norm of noise added to emitted keys after attention is computed.
    pub key_noise: f64,
    pub value_noise: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            pattern: Pattern::Repetitive,
            n_layers: 8,
            n_heads: 4,
            d_head: 16,
            n_seqs: 1,
            n_steps: 256,
            prefill: 1,
            seed: 0,
            dictionary: 8,
            noise: 0.1,
            repeat_prob: 0.5,
            salient_fraction: 0.2,
            salient_scale: 2.0,
            filler_scale: 0.25,
            layer_jitter: 0.05,
            t0: 1.0,
            decay: 0.15,
            query_scale: None,
            key_noise: 0.0,
            value_noise: 0.0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.n_layers),
            ("heads", self.n_heads),
            ("d_head", self.d_head),
            ("seqs", self.n_seqs),
            ("dictionary", self.dictionary),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        let nonneg = [
            ("noise", self.noise),
            ("salient_scale", self.salient_scale),
            ("filler_scale", self.filler_scale),
            ("layer_jitter", self.layer_jitter),
            ("decay", self.decay),
            ("query_scale", self.query_scale()),
            ("key_noise", self.key_noise),
            ("value_noise", self.value_noise),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(name, "must be finite and non-negative"));
            }
        }
        for (name, v) in [("repeat_prob", self.repeat_prob), ("salient_fraction", self.salient_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(name, "must be in [0, 1]"));
            }
        }
        if !(self.t0.is_finite() && self.t0 > 0.0) {
            return Err(Error::config("t0", "must be positive"));
        }
        Ok(())
    }

    fn generator_params(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("pattern", self.pattern.as_str().into());
        put("seed", self.seed.to_string());
        put("prefill", self.prefill.to_string());
        put("query_scale", self.query_scale().to_string());
        match self.pattern {
            Pattern::Repetitive => {
                put("dictionary", self.dictionary.to_string());
                put("noise", self.noise.to_string());
                put("repeat_prob", self.repeat_prob.to_string());
            }
            Pattern::Random => {}
            Pattern::DepthConcentrated => {
                put("salient_fraction", self.salient_fraction.to_string());
                put("salient_scale", self.salient_scale.to_string());
                put("filler_scale", self.filler_scale.to_string());
                put("layer_jitter", self.layer_jitter.to_string());
                put("t0", self.t0.to_string());
                put("decay", self.decay.to_string());
            }
        }
        if self.key_noise > 0.0 {
            put("key_noise", self.key_noise.to_string());
        }
        if self.value_noise > 0.0 {
            put("value_noise", self.value_noise.to_string());
        }
        m
    }

    pub fn query_scale(&self) -> f64 {
        self.query_scale.unwrap_or(self.pattern.default_query_scale())
    }

    /// Query scale of `layer` after the temperature schedule.
    pub fn layer_query_scale(&self, layer: usize) -> f64 {
        match self.pattern {
            Pattern::DepthConcentrated => self.query_scale() / (self.t0 * (-self.decay * layer as f64).exp()),
            _ => self.query_scale(),
        }
    }
}

/// Gaussian vector with expected norm close to `norm`.
fn direction(d: usize, norm: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    gaussian_vec(d, (norm / (d as f64).sqrt()) as f32, rng)
}

fn add(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn axpy(a: f32, x: &[f32], y: &mut [f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Per-token deviation: what distinguishes a token from the shared
/// direction, identical for every layer up to jitter.
struct Token {
    scale: f32,
    dev_k: Vec<Vec<f32>>,
    dev_v: Vec<Vec<f32>>,
}

fn token_stream(p: &SynthParams, rng: &mut ChaCha8Rng) -> Vec<Token> {
    let (h, d) = (p.n_heads, p.d_head);
    match p.pattern {
        Pattern::Repetitive => {
            let protos: Vec<(f32, Heads, Heads)> = (0..p.dictionary)
                .map(|i| {
                    // geometric ladder of deviation scales over [0.25, 2]
                    let frac = if p.dictionary == 1 { 0.5 } else { i as f64 / (p.dictionary - 1) as f64 };
                    let scale = (0.25 * 8f64.powf(frac)) as f32;
                    let k = (0..h).map(|_| direction(d, 1.0, rng)).collect();
                    let v = (0..h).map(|_| direction(d, 1.0, rng)).collect();
                    (scale, k, v)
                })
                .collect();
            let mut current = rng.random_range(0..p.dictionary);
            (0..p.n_steps)
                .map(|t| {
                    if t > 0 && !rng.random_bool(p.repeat_prob) {
                        current = rng.random_range(0..p.dictionary);
                    }
                    let (scale, k, v) = &protos[current];
                    let perturb = |base: &Vec<Vec<f32>>, rng: &mut ChaCha8Rng| -> Vec<Vec<f32>> {
                        base.iter()
                            .map(|b| {
                                let mut x: Vec<f32> = b.iter().map(|x| x * scale).collect();
                                if p.noise > 0.0 {
                                    axpy(1.0, &direction(d, p.noise, rng), &mut x);
                                }
                                x
                            })
                            .collect()
                    };
                    Token {
                        scale: 1.0,
                        dev_k: perturb(k, rng),
                        dev_v: perturb(v, rng),
                    }
                })
                .collect()
        }
        Pattern::DepthConcentrated => (0..p.n_steps)
            .map(|_| {
                let salient = rng.random_bool(p.salient_fraction);
                Token {
                    scale: if salient { p.salient_scale } else { p.filler_scale } as f32,
                    dev_k: (0..h).map(|_| direction(d, 1.0, rng)).collect(),
                    dev_v: (0..h).map(|_| direction(d, 1.0, rng)).collect(),
                }
            })
            .collect(),
        Pattern::Random => Vec::new(),
    }
}

/// Generates a trace; deterministic in `params`.
pub fn synthesize(params: &SynthParams) -> Result<Trace> {
    params.validate()?;
    let p = params;
    let (h, d) = (p.n_heads, p.d_head);
    let mut rng = seeded_rng(p.seed, RngStream::Synth);
    let inv_sqrt_d = 1.0 / (d as f32).sqrt();
    let mut trace = Trace::new(TraceHeader {
        format_version: TRACE_FORMAT_VERSION,
        n_layers: p.n_layers,
        n_heads: h,
        d_head: d,
        n_seqs: p.n_seqs,
        n_steps: p.n_steps,
        source: TraceSource::Synthetic,
        generator_params: p.generator_params(),
    });

    for seq in 0..p.n_seqs {
        let tokens = token_stream(p, &mut rng);
        for layer in 0..p.n_layers {
            let shared_k: Vec<Vec<f32>> = (0..h).map(|_| direction(d, 1.0, &mut rng)).collect();
            let shared_v: Vec<Vec<f32>> = (0..h).map(|_| direction(d, 1.0, &mut rng)).collect();
            let q_std = p.layer_query_scale(layer) as f32;
            let mut keys: Vec<Vec<Vec<f32>>> = vec![Vec::with_capacity(p.n_steps); h];
            #[allow(clippy::needless_range_loop)] // random traces have no token stream
            for step in 0..p.n_steps {
                let (k, v): (Vec<Vec<f32>>, Vec<Vec<f32>>) = match p.pattern {
                    Pattern::Random => (
                        (0..h).map(|_| gaussian_vec(d, 1.0, &mut rng)).collect(),
                        (0..h).map(|_| gaussian_vec(d, 1.0, &mut rng)).collect(),
                    ),
                    _ => {
                        let t = &tokens[step];
                        let jitter = if p.pattern == Pattern::DepthConcentrated { p.layer_jitter } else { 0.0 };
                        let mut build = |shared: &[Vec<f32>], dev: &[Vec<f32>]| -> Vec<Vec<f32>> {
                            shared
                                .iter()
                                .zip(dev)
                                .map(|(c, u)| {
                                    let mut x = u.clone();
                                    if jitter > 0.0 {
                                        axpy(1.0, &direction(d, jitter, &mut rng), &mut x);
                                    }
                                    let mut out = c.clone();
                                    axpy(t.scale, &x, &mut out);
                                    out
                                })
                                .collect()
                        };
                        let k = build(&shared_k, &t.dev_k);
                        let v = build(&shared_v, &t.dev_v);
                        (k, v)
                    }
                };
                let q: Vec<Vec<f32>> = (0..h).map(|_| gaussian_vec(d, q_std, &mut rng)).collect();
                let attn: Vec<Vec<f32>> = (0..h)
                    .map(|hi| {
                        keys[hi].push(k[hi].clone());
                        let mut row: Vec<f32> = keys[hi].iter().map(|kj| dot(&q[hi], kj) * inv_sqrt_d).collect();
                        softmax_in_place(&mut row);
                        row
                    })
                    .collect();
                let noisy = |x: Vec<Vec<f32>>, norm: f64, rng: &mut ChaCha8Rng| -> Vec<Vec<f32>> {
                    if norm == 0.0 {
                        return x;
                    }
                    x.into_iter().map(|xi| add(&xi, &direction(d, norm, rng))).collect()
                };
                let k = noisy(k, p.key_noise, &mut rng);
                let v = noisy(v, p.value_noise, &mut rng);
                trace.events.push(TraceEvent {
                    seq,
                    step,
                    layer,
                    prefill: step < p.prefill,
                    k,
                    v,
                    q: Some(q),
                    attn: Some(attn),
                });
            }
        }
    }
    trace.sort_events();
    Ok(trace)
}

/// Mean Shannon entropy (nats) of the attention rows of each layer.
pub fn mean_entropy_by_layer(trace: &Trace) -> Vec<f64> {
    let mut sum = vec![0.0; trace.header.n_layers];
    let mut n = vec![0usize; trace.header.n_layers];
    for e in &trace.events {
        let Some(rows) = &e.attn else { continue };
        for row in rows {
            let h: f64 = row
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -f64::from(p) * f64::from(p).ln())
                .sum();
            sum[e.layer] += h;
            n[e.layer] += 1;
        }
    }
    sum.iter().zip(&n).map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::cosine_similarity;

    #[test]
    fn rows_are_normalized_and_trace_validates() {
        for pattern in [Pattern::Repetitive, Pattern::Random, Pattern::DepthConcentrated] {
            let t = synthesize(&SynthParams {
                pattern,
                n_layers: 2,
                n_steps: 20,
                n_seqs: 2,
                ..Default::default()
            })
            .unwrap();
            assert_eq!(t.events.len(), 2 * 2 * 20);
            t.validate().unwrap();
        }
    }

    #[test]
    fn zero_steps_is_header_only() {
        let t = synthesize(&SynthParams { n_steps: 0, ..Default::default() }).unwrap();
        assert!(t.events.is_empty());
        assert_eq!(t.header.n_steps, 0);
    }

    #[test]
    fn same_seed_same_trace() {
        let p = SynthParams { n_steps: 10, n_layers: 2, ..Default::default() };
        assert_eq!(synthesize(&p).unwrap(), synthesize(&p).unwrap());
        let other = synthesize(&SynthParams { seed: 1, ..p }).unwrap();
        assert_ne!(other, synthesize(&SynthParams { n_steps: 10, n_layers: 2, ..Default::default() }).unwrap());
    }

    #[test]
    fn random_pattern_pairs_are_nearly_orthogonal() {
        let t = synthesize(&SynthParams {
            pattern: Pattern::Random,
            n_layers: 1,
            n_heads: 1,
            d_head: 64,
            n_steps: 2000,
            ..Default::default()
        })
        .unwrap();
        let ks: Vec<&[f32]> = t.events.iter().map(|e| e.k[0].as_slice()).collect();
        let mean = (0..1000)
            .map(|i| cosine_similarity(ks[2 * i], ks[2 * i + 1]).unwrap())
            .sum::<f64>()
            / 1000.0;
        assert!(mean.abs() < 0.05, "{mean}");
    }

    #[test]
    fn depth_concentrated_entropy_decreases_with_depth() {
        let t = synthesize(&SynthParams {
            pattern: Pattern::DepthConcentrated,
            n_steps: 128,
            ..Default::default()
        })
        .unwrap();
        let h = mean_entropy_by_layer(&t);
        for w in h.windows(2) {
            assert!(w[1] < w[0], "{h:?}");
        }
    }

    #[test]
    fn bad_params_are_rejected() {
        assert!(synthesize(&SynthParams { n_heads: 0, ..Default::default() }).is_err());
        assert!(synthesize(&SynthParams { repeat_prob: 1.5, ..Default::default() }).is_err());
        assert!("zipf".parse::<Pattern>().is_err());
    }
}
