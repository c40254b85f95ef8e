//! Model parameters and their reproducibility snapshot format.
//!
//! Blob layout (all little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `TFWT` |
//! | 4 | format version (u32, currently 1) |
//! | 8 x 8 | `n_layers, n_heads, d_model, d_head, d_ff, vocab_size, max_seq, seed` as u64 |
//! | ... | f32 tensors, row-major, in [`Weights::tensors`] order |

use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{seeded_rng, Matrix, RngStream};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"TFWT";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Vec<f32>,
    pub ln1_bias: Vec<f32>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub bq: Vec<f32>,
    pub bk: Vec<f32>,
    pub bv: Vec<f32>,
    pub ln2_gain: Vec<f32>,
    pub ln2_bias: Vec<f32>,
    pub w1: Matrix,
    pub b1: Vec<f32>,
    pub w2: Matrix,
    pub b2: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub embed: Matrix,
    pub layers: Vec<LayerWeights>,
    pub lnf_gain: Vec<f32>,
    pub lnf_bias: Vec<f32>,
    pub lm_head: Matrix,
}

impl LayerWeights {
    fn random(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        let std_in = (1.0 / d as f32).sqrt();
        let std_ff = (1.0 / cfg.d_ff as f32).sqrt();
        LayerWeights {
            ln1_gain: vec![1.0; d],
            ln1_bias: vec![0.0; d],
            wq: Matrix::gaussian(d, d, std_in, rng),
            wk: Matrix::gaussian(d, d, std_in, rng),
            wv: Matrix::gaussian(d, d, std_in, rng),
            wo: Matrix::gaussian(d, d, std_in, rng),
            bq: vec![0.0; d],
            bk: vec![0.0; d],
            bv: vec![0.0; d],
            ln2_gain: vec![1.0; d],
            ln2_bias: vec![0.0; d],
            w1: Matrix::gaussian(cfg.d_ff, d, std_in, rng),
            b1: vec![0.0; cfg.d_ff],
            w2: Matrix::gaussian(d, cfg.d_ff, std_ff, rng),
            b2: vec![0.0; d],
        }
    }

    fn tensors(&self) -> Vec<&[f32]> {
        vec![
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq.data,
            &self.wk.data,
            &self.wv.data,
            &self.wo.data,
            &self.bq,
            &self.bk,
            &self.bv,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w1.data,
            &self.b1,
            &self.w2.data,
            &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        vec![
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq.data,
            &mut self.wk.data,
            &mut self.wv.data,
            &mut self.wo.data,
            &mut self.bq,
            &mut self.bk,
            &mut self.bv,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w1.data,
            &mut self.b1,
            &mut self.w2.data,
            &mut self.b2,
        ]
    }
}

impl Weights {
    /// Seeded random initialization: projections ~ N(0, 1/fan_in),
    /// embeddings ~ N(0, 1), LayerNorm gains 1 and all biases 0.
    pub fn random(cfg: &ModelConfig) -> Self {
        let mut rng = seeded_rng(cfg.seed, RngStream::Weights);
        let d = cfg.d_model;
        let embed = Matrix::gaussian(cfg.vocab_size, d, 1.0, &mut rng);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerWeights::random(cfg, &mut rng))
            .collect();
        let lm_head = Matrix::gaussian(cfg.vocab_size, d, (1.0 / d as f32).sqrt(), &mut rng);
        Weights {
            embed,
            layers,
            lnf_gain: vec![1.0; d],
            lnf_bias: vec![0.0; d],
            lm_head,
        }
    }

    /// Every tensor in serialization order.
    pub fn tensors(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![&self.embed.data];
        for l in &self.layers {
            out.extend(l.tensors());
        }
        out.push(&self.lnf_gain);
        out.push(&self.lnf_bias);
        out.push(&self.lm_head.data);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = vec![&mut self.embed.data];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.push(&mut self.lnf_gain);
        out.push(&mut self.lnf_bias);
        out.push(&mut self.lm_head.data);
        out
    }

    pub fn to_bytes(&self, cfg: &ModelConfig) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        for v in config_fields(cfg) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for t in self.tensors() {
            for x in t {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(ModelConfig, Weights)> {
        let header_len = 8 + 8 * 8;
        if bytes.len() < header_len {
            return Err(Error::Weights("truncated header".into()));
        }
        if &bytes[..4] != WEIGHTS_MAGIC {
            return Err(Error::Weights("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != WEIGHTS_VERSION {
            return Err(Error::Weights(format!("unsupported version {version}")));
        }
        let mut f = [0u64; 8];
        for (i, slot) in f.iter_mut().enumerate() {
            let at = 8 + i * 8;
            *slot = u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
        }
        let cfg = ModelConfig {
            n_layers: f[0] as usize,
            n_heads: f[1] as usize,
            d_model: f[2] as usize,
            d_head: f[3] as usize,
            d_ff: f[4] as usize,
            vocab_size: f[5] as usize,
            max_seq: f[6] as usize,
            seed: f[7],
        };
        cfg.validate()?;
        // Shapes come from the config; values are overwritten below.
        let mut w = Weights::random(&ModelConfig { seed: 0, ..cfg });
        let body = &bytes[header_len..];
        let expected: usize = w.tensors().iter().map(|t| t.len() * 4).sum();
        if body.len() != expected {
            return Err(Error::Weights(format!(
                "payload is {} bytes, expected {expected}",
                body.len()
            )));
        }
        let mut chunks = body.chunks_exact(4);
        for t in w.tensors_mut() {
            for x in t.iter_mut() {
                let c = chunks.next().expect("length checked");
                *x = f32::from_le_bytes(c.try_into().expect("4 bytes"));
            }
        }
        Ok((cfg, w))
    }
}

fn config_fields(cfg: &ModelConfig) -> [u64; 8] {
    [
        cfg.n_layers as u64,
        cfg.n_heads as u64,
        cfg.d_model as u64,
        cfg.d_head as u64,
        cfg.d_ff as u64,
        cfg.vocab_size as u64,
        cfg.max_seq as u64,
        cfg.seed,
    ]
}
