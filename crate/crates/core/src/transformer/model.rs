use super::{KvCache, ModelConfig, Weights};
use crate::error::{Error, Result};
use crate::numerics::{argmax, dot, gelu, layer_norm, softmax_in_place};

pub(crate) const LN_EPS: f32 = 1e-5;

/// Per-head vectors, `n_heads x d_head`.
pub type Heads = Vec<Vec<f32>>;

/// Toy pre-norm decoder. Weights are immutable after construction.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    weights: Weights,
}

impl Model {
    /// Seeded random model.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Model {
            weights: Weights::random(&config),
            config,
        })
    }

    pub fn from_weights(config: ModelConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        if weights.layers.len() != config.n_layers || weights.embed.cols != config.d_model {
            return Err(Error::Weights("weights do not match config".into()));
        }
        Ok(Model { config, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    /// Token embedding plus sinusoidal position encoding.
    pub fn embed(&self, token: u32, pos: usize) -> Result<Vec<f32>> {
        let t = token as usize;
        if t >= self.config.vocab_size {
            return Err(Error::Precondition(format!(
                "token {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let d = self.config.d_model;
        let mut x = self.weights.embed.row(t).to_vec();
        for (i, xi) in x.iter_mut().enumerate() {
            let pair = (i / 2) as f32;
            let angle = pos as f32 / 10_000f32.powf(2.0 * pair / d as f32);
            *xi += if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
        Ok(x)
    }

    pub fn pre_attention_norm(&self, layer: usize, hidden: &[f32]) -> Vec<f32> {
        let w = &self.weights.layers[layer];
        layer_norm(hidden, &w.ln1_gain, &w.ln1_bias, LN_EPS)
    }

    fn split_heads(&self, flat: Vec<f32>) -> Heads {
        flat.chunks_exact(self.config.d_head).map(<[f32]>::to_vec).collect()
    }

    /// Key and value projections of an (already normalized) hidden state,
    /// split into heads.
    pub fn project_kv(&self, layer: usize, hidden: &[f32]) -> (Heads, Heads) {
        let w = &self.weights.layers[layer];
        let mut scratch = 0;
        let mut k = w.wk.matvec(hidden, &mut scratch);
        let mut v = w.wv.matvec(hidden, &mut scratch);
        for (x, b) in k.iter_mut().zip(&w.bk) {
            *x += b;
        }
        for (x, b) in v.iter_mut().zip(&w.bv) {
            *x += b;
        }
        (self.split_heads(k), self.split_heads(v))
    }

    pub fn project_q(&self, layer: usize, hidden: &[f32], flops: &mut u64) -> Heads {
        let w = &self.weights.layers[layer];
        let mut q = w.wq.matvec(hidden, flops);
        for (x, b) in q.iter_mut().zip(&w.bq) {
            *x += b;
        }
        self.split_heads(q)
    }

    /// Softmax attention weights of `q` over every cached position, per head.
    pub fn attention_weights(&self, layer: usize, q: &Heads, cache: &KvCache, flops: &mut u64) -> Vec<Vec<f32>> {
        let len = cache.len(layer);
        let d_head = self.config.d_head;
        let scale = 1.0 / (d_head as f32).sqrt();
        q.iter()
            .enumerate()
            .map(|(h, qh)| {
                let mut scores: Vec<f32> = (0..len)
                    .map(|j| dot(qh, cache.key(layer, h, j)) * scale)
                    .collect();
                *flops += (2 * d_head * len) as u64;
                softmax_in_place(&mut scores);
                *flops += 5 * len as u64;
                scores
            })
            .collect()
    }

    /// Causal scaled dot-product attention of one query over the cache,
    /// followed by the output projection. The current token's K/V must
    /// already be cached.
    pub fn attention_forward(&self, layer: usize, query_hidden: &[f32], cache: &KvCache, flops: &mut u64) -> Result<Vec<f32>> {
        let len = cache.len(layer);
        if len == 0 {
            return Err(Error::Precondition(format!("attention over empty cache at layer {layer}")));
        }
        let d_head = self.config.d_head;
        let q = self.project_q(layer, query_hidden, flops);
        let probs = self.attention_weights(layer, &q, cache, flops);
        let mut mixed = Vec::with_capacity(self.config.d_model);
        for (h, p) in probs.iter().enumerate() {
            let mut out = vec![0.0f32; d_head];
            for (j, &w) in p.iter().enumerate() {
                for (o, &x) in out.iter_mut().zip(cache.value(layer, h, j)) {
                    *o += w * x;
                }
            }
            *flops += (2 * d_head * len) as u64;
            mixed.extend(out);
        }
        Ok(self.weights.layers[layer].wo.matvec(&mixed, flops))
    }

    /// `W2 gelu(W1 LN(x) + b1) + b2`
    pub fn ffn(&self, layer: usize, hidden: &[f32]) -> Vec<f32> {
        let w = &self.weights.layers[layer];
        let mut scratch = 0;
        let x = layer_norm(hidden, &w.ln2_gain, &w.ln2_bias, LN_EPS);
        let mut a = w.w1.matvec(&x, &mut scratch);
        for (v, b) in a.iter_mut().zip(&w.b1) {
            *v = gelu(*v + b);
        }
        let mut out = w.w2.matvec(&a, &mut scratch);
        for (v, b) in out.iter_mut().zip(&w.b2) {
            *v += b;
        }
        out
    }

    pub fn logits(&self, hidden: &[f32]) -> Vec<f32> {
        let w = &self.weights;
        let x = layer_norm(hidden, &w.lnf_gain, &w.lnf_bias, LN_EPS);
        let mut scratch = 0;
        w.lm_head.matvec(&x, &mut scratch)
    }

    pub fn greedy_token(&self, hidden: &[f32]) -> u32 {
        argmax(&self.logits(hidden)) as u32
    }
}
