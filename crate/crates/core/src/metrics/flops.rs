//! Analytic FLOP accounting of the skippable attention path.
//!
//! Conventions: a multiply-accumulate is 2 FLOPs; softmax costs 5 FLOPs per
//! element. Only work that a skip can avoid (Q projection, scores, softmax,
//! value mixing, output projection) plus the filter's own overhead is
//! counted; K/V projection, LayerNorm and FFN run either way.

use serde::{Deserialize, Serialize};

use crate::transformer::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsModel {
    pub qkv_proj_flops: u64,
    pub o_proj_flops: u64,
    /// Score + value-mix FLOPs per cached position (all heads).
    pub per_position_flops: u64,
    /// Softmax FLOPs per cached position (all heads).
    pub softmax_per_position: u64,
    /// Cost of one filter decision.
    pub filter_overhead_flops: u64,
}

impl FlopsModel {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model as u64;
        let (h, dh) = (cfg.n_heads as u64, cfg.d_head as u64);
        FlopsModel {
            // Only the query projection is skippable; K/V feed the decision.
            qkv_proj_flops: 2 * d * d,
            o_proj_flops: 2 * d * d,
            per_position_flops: 4 * h * dh,
            softmax_per_position: 5 * h,
            filter_overhead_flops: filter_overhead(h, dh),
        }
    }

    /// FLOPs of the attention path of one token attending over `cache_len`
    /// positions.
    pub fn attention_flops(&self, cache_len: usize) -> u64 {
        let l = cache_len as u64;
        self.qkv_proj_flops
            + self.o_proj_flops
            + (self.per_position_flops + self.softmax_per_position) * l
    }

    /// Net saving of one decision: the attention path when skipped, minus the
    /// filter overhead (charged on every filtered decision, skip or keep).
    pub fn flops_saved(&self, skipped: bool, cache_len: usize, filtered: bool) -> i64 {
        let gross = if skipped { self.attention_flops(cache_len) as i64 } else { 0 };
        let overhead = if filtered { self.filter_overhead_flops as i64 } else { 0 };
        gross - overhead
    }
}

/// Per decision, for keys and values each: per-head cosine (dot + two
/// squared norms = 6 * d_head, plus sqrt and divide = 3), per-head anchor
/// update (3 * d_head) and across-head mean/variance (4 * n_heads). Fusion,
/// variance smoothing and the comparison add 12.
fn filter_overhead(n_heads: u64, d_head: u64) -> u64 {
    2 * n_heads * (6 * d_head + 3) + 2 * n_heads * 3 * d_head + 2 * 4 * n_heads + 12
}

/// Running FLOP totals of a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsLedger {
    /// What the same decisions cost if every token had been attended
    /// (filter overhead included, as a shadow-filtered dense run).
    pub dense: u64,
    /// Work actually performed on the attention path plus overhead.
    pub executed: u64,
    /// Sum of per-decision net savings.
    pub saved: i64,
    /// Sum of filter overhead.
    pub overhead: u64,
}

impl FlopsLedger {
    /// `dense == executed + saved + overhead`.
    pub fn is_conserved(&self) -> bool {
        self.dense as i128 == self.executed as i128 + self.saved as i128 + self.overhead as i128
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> ModelConfig {
        ModelConfig { n_layers: 1, n_heads: 1, d_model: 1, d_head: 1, d_ff: 1, vocab_size: 2, max_seq: 4, seed: 0 }
    }

    #[test]
    fn keep_costs_only_overhead() {
        let m = FlopsModel::new(&ModelConfig::default());
        assert_eq!(m.flops_saved(false, 17, true), -(m.filter_overhead_flops as i64));
        assert_eq!(m.flops_saved(false, 17, false), 0);
    }

    #[test]
    fn unit_model_closed_form() {
        // q 2 + o 2 + (score/mix 4 + softmax 5) * 1 = 13 gross;
        // overhead 2*(6+3) + 2*3 + 8 + 12 = 44.
        let m = FlopsModel::new(&unit());
        assert_eq!(m.attention_flops(1), 13);
        assert_eq!(m.filter_overhead_flops, 44);
        assert_eq!(m.flops_saved(true, 1, true), 13 - 44);
    }

    #[test]
    fn forced_skip_schedule_matches_closed_form() {
        let cfg = ModelConfig::default();
        let m = FlopsModel::new(&cfg);
        let (d, h, dh) = (64u64, 4u64, 16u64);
        // Skip every token at cache lengths 1..=n: sum is n*(4d^2 - ovh) + (4 h dh + 5 h) n(n+1)/2.
        let n = 50u64;
        let total: i64 = (1..=n as usize).map(|l| m.flops_saved(true, l, true)).sum();
        let ovh = 2 * h * (6 * dh + 3) + 6 * h * dh + 8 * h + 12;
        let expect = n as i64 * (4 * d * d) as i64 - (n * ovh) as i64 + ((4 * h * dh + 5 * h) * n * (n + 1) / 2) as i64;
        assert_eq!(total, expect);
    }

    #[test]
    fn savings_grow_with_cache_length() {
        let m = FlopsModel::new(&ModelConfig::default());
        for l in 1..100 {
            assert!(m.flops_saved(true, l + 1, true) > m.flops_saved(true, l, true));
        }
    }
}
