//! Dense vector math and streaming statistics used by the engine.
//!
//! Model math runs in `f32`; reductions that feed statistics (dot products
//! inside cosine similarity, running moments) accumulate in `f64`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Cosine similarity of two equal-length vectors, clamped to `[-1, 1]`.
///
/// Zero-norm inputs are an error rather than a silent zero.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            context: "cosine_similarity",
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("zero-norm vector in cosine similarity"));
    }
    // sqrt(na * nb) rather than sqrt(na) * sqrt(nb): for a == b this is exact.
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(x: &[f32]) -> Vec<f32> {
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place(x: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    // f64 sum keeps long rows normalized to well under 1e-6
    let e: Vec<f64> = x.iter().map(|&v| f64::from(v - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    for (v, ei) in x.iter_mut().zip(e) {
        *v = (ei / sum) as f32;
    }
}

/// Layer normalization with population variance and affine `gain`/`bias`.
pub fn layer_norm(x: &[f32], gain: &[f32], bias: &[f32], eps: f32) -> Vec<f32> {
    debug_assert_eq!(x.len(), gain.len());
    debug_assert_eq!(x.len(), bias.len());
    let n = x.len() as f32;
    let mean = x.iter().sum::<f32>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| (v - mean) * inv * g + b)
        .collect()
}

/// tanh approximation of GELU.
pub fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Welford running mean and population variance.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningStat {
    count: u64,
    mean: f64,
    m2: f64,
}

impl RunningStat {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Chan et al. parallel merge.
    pub fn merge(&self, other: &RunningStat) -> RunningStat {
        if self.count == 0 {
            return *other;
        }
        if other.count == 0 {
            return *self;
        }
        let count = self.count + other.count;
        let (na, nb, n) = (self.count as f64, other.count as f64, count as f64);
        let delta = other.mean - self.mean;
        RunningStat {
            count,
            mean: self.mean + delta * nb / n,
            m2: self.m2 + other.m2 + delta * delta * na * nb / n,
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then_some(self.mean)
    }

    /// Population variance; `None` before the first sample.
    pub fn variance(&self) -> Option<f64> {
        (self.count > 0).then(|| self.m2 / self.count as f64)
    }
}

impl FromIterator<f64> for RunningStat {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = RunningStat::new();
        for x in iter {
            s.push(x);
        }
        s
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Entries drawn from N(0, std^2).
    pub fn gaussian(rows: usize, cols: usize, std: f32, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f32 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Matrix { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self * x`; adds `2 * rows * cols` to `flops` (one MAC = 2 FLOPs).
    pub fn matvec(&self, x: &[f32], flops: &mut u64) -> Vec<f32> {
        debug_assert_eq!(x.len(), self.cols);
        *flops += 2 * (self.rows * self.cols) as u64;
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }
}

/// Named random sub-streams derived from a single seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RngStream {
    Weights = 1,
    Synth = 2,
    TieBreak = 3,
}

pub fn seeded_rng(seed: u64, stream: RngStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

pub fn gaussian_vec(len: usize, std: f32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..len)
        .map(|_| {
            let z: f32 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

/// Index of the largest element; ties resolve to the lowest index.
pub fn argmax(x: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_pass(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        (mean, var)
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let expected = 32.0 / (14f64.sqrt() * 77f64.sqrt());
        let got = cosine_similarity(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert!((got - 0.974_631_846).abs() < 1e-9);
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn cosine_rejects_zero_norm() {
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::Degenerate(_))
        ));
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        assert_eq!(softmax(&[1000.0, 1000.0]), vec![0.5, 0.5]);
        let p = softmax(&[0.0, 3f32.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-6 && (p[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_examples() {
        let ones = vec![1.0; 4];
        let zeros = vec![0.0; 4];
        assert_eq!(layer_norm(&[3.0; 4], &ones, &zeros, 1e-5), vec![0.0; 4]);
        let out = layer_norm(&[1.0, -1.0], &[1.0, 1.0], &[0.0, 0.0], 1e-12);
        assert!((out[0] - 1.0).abs() < 1e-6 && (out[1] + 1.0).abs() < 1e-6);

        let mut rng = seeded_rng(7, RngStream::Synth);
        let x = gaussian_vec(64, 3.0, &mut rng);
        let out = layer_norm(&x, &[1.0; 64], &[0.0; 64], 1e-6);
        let (m, v) = two_pass(&out.iter().map(|&v| f64::from(v)).collect::<Vec<_>>());
        assert!(m.abs() < 1e-5, "mean {m}");
        assert!((v - 1.0).abs() < 1e-5, "var {v}");
    }

    #[test]
    fn running_stat_examples() {
        let mut s = RunningStat::new();
        assert_eq!(s.variance(), None);
        s.push(5.0);
        assert_eq!(s.count(), 1);
        assert_eq!(s.mean(), Some(5.0));

        let s: RunningStat = [1.0, 2.0, 3.0].into_iter().collect();
        assert!((s.mean().unwrap() - 2.0).abs() < 1e-15);
        assert!((s.variance().unwrap() - 2.0 / 3.0).abs() < 1e-15);

        let s: RunningStat = std::iter::repeat_n(0.7, 50).collect();
        assert_eq!(s.variance(), Some(0.0));
    }

    #[test]
    fn running_stat_matches_two_pass_on_10k() {
        let mut rng = seeded_rng(11, RngStream::Synth);
        let xs: Vec<f64> = gaussian_vec(10_000, 2.5, &mut rng)
            .into_iter()
            .map(|v| f64::from(v) + 10.0)
            .collect();
        let s: RunningStat = xs.iter().copied().collect();
        let (m, v) = two_pass(&xs);
        assert!(((s.mean().unwrap() - m) / m).abs() < 1e-9);
        assert!(((s.variance().unwrap() - v) / v).abs() < 1e-9);
    }

    #[test]
    fn matvec_counts_flops() {
        let m = Matrix::identity(3);
        let mut flops = 0;
        assert_eq!(m.matvec(&[1.0, 2.0, 3.0], &mut flops), vec![1.0, 2.0, 3.0]);
        assert_eq!(flops, 18);
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
    }

    proptest! {
        #[test]
        fn cosine_self_is_exactly_one(v in prop::collection::vec(-100.0f32..100.0, 1..32)) {
            prop_assume!(v.iter().any(|&x| x != 0.0));
            prop_assert_eq!(cosine_similarity(&v, &v).unwrap(), 1.0);
        }

        #[test]
        fn cosine_power_of_two_scaling(v in prop::collection::vec(-100.0f32..100.0, 1..32), k in -8i32..8) {
            prop_assume!(v.iter().any(|&x| x.abs() > 1e-3));
            let c = 2f32.powi(k);
            let pos: Vec<f32> = v.iter().map(|x| x * c).collect();
            let neg: Vec<f32> = v.iter().map(|x| -x * c).collect();
            prop_assert_eq!(cosine_similarity(&v, &pos).unwrap(), 1.0);
            prop_assert_eq!(cosine_similarity(&v, &neg).unwrap(), -1.0);
        }

        #[test]
        fn cosine_general_scaling(v in prop::collection::vec(-100.0f32..100.0, 1..32), c in 0.01f32..100.0) {
            prop_assume!(v.iter().any(|&x| x.abs() > 1e-3));
            let pos: Vec<f32> = v.iter().map(|x| x * c).collect();
            prop_assert!((cosine_similarity(&v, &pos).unwrap() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn softmax_shift_invariant(v in prop::collection::vec(-20.0f32..20.0, 1..32), shift in -50.0f32..50.0) {
            let a = softmax(&v);
            let shifted: Vec<f32> = v.iter().map(|x| x + shift).collect();
            let b = softmax(&shifted);
            let sum: f32 = a.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!(*x >= 0.0);
                // shifted logits are rounded to f32 again
                prop_assert!((x - y).abs() < 2e-5);
            }
        }

        #[test]
        fn running_stat_matches_brute_force(xs in prop::collection::vec(-1e3f64..1e3, 1..200)) {
            let s: RunningStat = xs.iter().copied().collect();
            let (m, v) = two_pass(&xs);
            let scale = xs.iter().map(|x| x.abs()).fold(1.0, f64::max);
            prop_assert!((s.mean().unwrap() - m).abs() <= 1e-9 * scale);
            prop_assert!((s.variance().unwrap() - v).abs() <= 1e-9 * scale * scale);
        }

        #[test]
        fn running_stat_merge_equals_concat(
            xs in prop::collection::vec(-1e3f64..1e3, 0..100),
            ys in prop::collection::vec(-1e3f64..1e3, 0..100),
        ) {
            let a: RunningStat = xs.iter().copied().collect();
            let b: RunningStat = ys.iter().copied().collect();
            let all: RunningStat = xs.iter().chain(&ys).copied().collect();
            let merged = a.merge(&b);
            prop_assert_eq!(merged.count(), all.count());
            if all.count() > 0 {
                let scale = xs.iter().chain(&ys).map(|x| x.abs()).fold(1.0, f64::max);
                prop_assert!((merged.mean().unwrap() - all.mean().unwrap()).abs() <= 1e-9 * scale);
                prop_assert!((merged.variance().unwrap() - all.variance().unwrap()).abs() <= 1e-9 * scale * scale);
            }
        }
    }
}
