//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tokfilter::numerics::Matrix;
use tokfilter::transformer::{KvCache, Model, ModelConfig};

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn matvec64(m: &Matrix, x: &[f64]) -> Vec<f64> {
    (0..m.rows)
        .map(|r| (0..m.cols).map(|c| f64::from(m.data[r * m.cols + c]) * x[c]).sum())
        .collect()
}

/// Model with nonzero random biases, so the oracle exercises every term.
pub fn model_with_biases(cfg: ModelConfig, rng: &mut ChaCha8Rng) -> Model {
    let mut weights = Model::new(cfg).unwrap().weights().clone();
    for l in &mut weights.layers {
        for b in [&mut l.bq, &mut l.bk, &mut l.bv, &mut l.b1, &mut l.b2] {
            *b = random_vec(rng, b.len(), 0.3);
        }
    }
    Model::from_weights(cfg, weights).unwrap()
}

/// Dense-matrix attention in f64: `Wo concat_h(softmax(Q K^T / sqrt(d)) V) `
/// where the full key and value matrices are read out of the cache.
pub fn attention_oracle(model: &Model, layer: usize, x: &[f32], cache: &KvCache) -> Vec<f64> {
    let cfg = model.config();
    let w = &model.weights().layers[layer];
    let x64: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
    let q: Vec<f64> = matvec64(&w.wq, &x64).iter().zip(&w.bq).map(|(a, b)| a + f64::from(*b)).collect();
    let n = cache.len(layer);
    let dh = cfg.d_head;
    let mut concat = Vec::with_capacity(cfg.d_model);
    for h in 0..cfg.n_heads {
        let qh = &q[h * dh..(h + 1) * dh];
        let k: Vec<Vec<f64>> = (0..n).map(|j| cache.key(layer, h, j).iter().map(|&v| f64::from(v)).collect()).collect();
        let v: Vec<Vec<f64>> = (0..n).map(|j| cache.value(layer, h, j).iter().map(|&v| f64::from(v)).collect()).collect();
        let scores: Vec<f64> = k
            .iter()
            .map(|kj| qh.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        concat.extend((0..dh).map(|d| (0..n).map(|j| e[j] / z * v[j][d]).sum::<f64>()));
    }
    matvec64(&w.wo, &concat)
}
