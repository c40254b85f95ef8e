//! Token filtering: per-sequence anchors, head-wise similarity, variance-aware
//! key/value fusion and the per-token skip decision.
//!
//! A decision is split in two phases so a batch can share one threshold per
//! layer: [`FilterState::evaluate`] scores one sequence's token and updates
//! that sequence's anchors, then [`FilterState::commit`] runs once per layer
//! per step (the step barrier) and folds every sequence's outcome into the
//! layer's variance estimate, counters and threshold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::cosine_similarity;
use crate::policy::{
    layer_plan, update_threshold, AnchorMode, Fusion, FusionFormula, PruneConfig,
    SkipRatioEstimator, VarianceMode, WarmupFeedback,
};
use crate::transformer::{Heads, ModelConfig};

/// Added to both head variances before inversion.
pub const VARIANCE_EPS: f64 = 1e-6;

/// Fused similarity of one token against its sequence's anchors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScore {
    pub s_k: f64,
    pub s_v: f64,
    pub var_k: f64,
    pub var_v: f64,
    /// Weight of the key similarity in `s_kv`.
    pub alpha: f64,
    pub s_kv: f64,
}

/// Moves `anchor` toward `current`: `anchor + (1 - gamma) * (current - anchor)`.
///
/// Algebraically `gamma * anchor + (1 - gamma) * current`; this form leaves
/// the anchor bit-identical when `current == anchor`.
pub fn update_anchor(anchor: &mut [f32], current: &[f32], gamma: f64) {
    debug_assert_eq!(anchor.len(), current.len());
    let w = 1.0 - gamma;
    for (a, &c) in anchor.iter_mut().zip(current) {
        let a64 = f64::from(*a);
        *a = (a64 + w * (f64::from(c) - a64)) as f32;
    }
}

/// Folds the `n`-th observation (1-based) into an exact running mean.
pub fn update_mean_anchor(anchor: &mut [f32], current: &[f32], n: u64) {
    let w = 1.0 / n as f64;
    for (a, &c) in anchor.iter_mut().zip(current) {
        let a64 = f64::from(*a);
        *a = (a64 + w * (f64::from(c) - a64)) as f32;
    }
}

/// Across-head summary of per-head cosine similarities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadSimilarity {
    pub mean: f64,
    /// Population variance across heads.
    pub variance: f64,
    /// Some head had a zero-norm vector and contributed similarity 0.
    pub degenerate: bool,
}

pub fn head_similarity(anchors: &[Vec<f32>], currents: &[Vec<f32>]) -> Result<HeadSimilarity> {
    if anchors.len() != currents.len() || anchors.is_empty() {
        return Err(Error::Dimension {
            context: "head_similarity",
            expected: anchors.len(),
            actual: currents.len(),
        });
    }
    let mut degenerate = false;
    let mut sims = Vec::with_capacity(anchors.len());
    for (a, c) in anchors.iter().zip(currents) {
        match cosine_similarity(a, c) {
            Ok(s) => sims.push(s),
            Err(Error::Degenerate(_)) => {
                degenerate = true;
                sims.push(0.0);
            }
            Err(e) => return Err(e),
        }
    }
    let n = sims.len() as f64;
    let mean = sims.iter().sum::<f64>() / n;
    let variance = sims.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    Ok(HeadSimilarity {
        mean,
        variance,
        degenerate,
    })
}

/// Weight of the key similarity given both head variances.
pub fn fusion_alpha(var_k: f64, var_v: f64, formula: FusionFormula) -> f64 {
    let a = var_k + VARIANCE_EPS;
    let b = var_v + VARIANCE_EPS;
    // (1/a) / (1/a + 1/b) == b / (a + b)
    match formula {
        FusionFormula::Text => b / (a + b),
        FusionFormula::LiteralEq2 => a / (a + b),
    }
}

/// Variance-weighted combination of key and value similarity.
pub fn fuse(
    s_k: f64,
    s_v: f64,
    var_k: f64,
    var_v: f64,
    fusion: Fusion,
    formula: FusionFormula,
) -> SimilarityScore {
    let alpha = match fusion {
        Fusion::Kv => fusion_alpha(var_k, var_v, formula),
        Fusion::KeyOnly => 1.0,
        Fusion::ValueOnly => 0.0,
    };
    // s_v + alpha * (s_k - s_v) stays inside [min, max] under rounding.
    let s_kv = match alpha {
        1.0 => s_k,
        0.0 => s_v,
        _ => s_v + alpha * (s_k - s_v),
    };
    SimilarityScore {
        s_k,
        s_v,
        var_k,
        var_v,
        alpha,
        s_kv,
    }
}

/// Bytes held by anchors: one key and one value vector per head, per
/// filtered layer, per sequence, stored as f32.
pub fn anchor_memory_bytes(config: &ModelConfig, tail_layer_count: usize, sequences: usize) -> u64 {
    (tail_layer_count * config.n_heads * config.d_head * 2 * 4 * sequences) as u64
}

/// Outcome of scoring one token at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub layer: usize,
    pub seq: usize,
    pub score: SimilarityScore,
    pub tau: f64,
    /// Index of this step among the layer's decode steps.
    pub step_index: u64,
    /// The decision was evaluated but not enacted.
    pub shadow: bool,
    /// `s_kv > tau`, regardless of whether it was enacted.
    pub would_skip: bool,
    pub skip: bool,
    pub degenerate: bool,
    fresh_var_k: f64,
    fresh_var_v: f64,
}

#[derive(Debug, Clone)]
struct AnchorSet {
    k: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    observed: u64,
}

/// Controller and statistics of one layer.
#[derive(Debug, Clone)]
pub struct LayerFilter {
    pub layer: usize,
    pub in_scope: bool,
    pub target: f64,
    tau: f64,
    frozen: bool,
    var_k: Option<f64>,
    var_v: Option<f64>,
    eligible_count: u64,
    skip_count: u64,
    step_index: u64,
    estimator: SkipRatioEstimator,
    anchors: Vec<AnchorSet>,
}

impl LayerFilter {
    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn eligible_count(&self) -> u64 {
        self.eligible_count
    }

    pub fn skip_count(&self) -> u64 {
        self.skip_count
    }

    pub fn step_index(&self) -> u64 {
        self.step_index
    }

    /// Running head-variance estimates used by the next fusion.
    pub fn variances(&self) -> Option<(f64, f64)> {
        self.var_k.zip(self.var_v)
    }

    /// Skip ratio seen by the threshold controller.
    pub fn feedback_ratio(&self) -> f64 {
        self.estimator.ratio()
    }

    /// Actual skip ratio, `skip_count / eligible_count` (0 when empty).
    pub fn skip_ratio(&self) -> f64 {
        if self.eligible_count == 0 {
            0.0
        } else {
            self.skip_count as f64 / self.eligible_count as f64
        }
    }
}

/// Filter state of a whole session: one [`LayerFilter`] per layer, anchors
/// per (layer, sequence).
#[derive(Debug, Clone)]
pub struct FilterState {
    n_heads: usize,
    d_head: usize,
    config: PruneConfig,
    layers: Vec<LayerFilter>,
}

impl FilterState {
    pub fn new(
        n_layers: usize,
        n_heads: usize,
        d_head: usize,
        n_seqs: usize,
        config: &PruneConfig,
    ) -> Result<Self> {
        config.validate()?;
        let plan = layer_plan(n_layers, config)?;
        let empty = AnchorSet {
            k: vec![vec![0.0; d_head]; n_heads],
            v: vec![vec![0.0; d_head]; n_heads],
            observed: 0,
        };
        let layers = plan
            .into_iter()
            .map(|b| LayerFilter {
                layer: b.layer,
                in_scope: b.in_scope,
                target: b.target_ratio,
                tau: config.tau_init,
                frozen: false,
                var_k: None,
                var_v: None,
                eligible_count: 0,
                skip_count: 0,
                step_index: 0,
                estimator: SkipRatioEstimator::new(config.estimator, config.gamma),
                anchors: if b.in_scope { vec![empty.clone(); n_seqs] } else { Vec::new() },
            })
            .collect();
        Ok(FilterState {
            n_heads,
            d_head,
            config: config.clone(),
            layers,
        })
    }

    pub fn config(&self) -> &PruneConfig {
        &self.config
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_seqs(&self) -> usize {
        self.layers.iter().map(|l| l.anchors.len()).max().unwrap_or(0)
    }

    pub fn layer(&self, layer: usize) -> &LayerFilter {
        &self.layers[layer]
    }

    pub fn layers(&self) -> &[LayerFilter] {
        &self.layers
    }

    pub fn in_scope(&self, layer: usize) -> bool {
        self.layers.get(layer).is_some_and(|l| l.in_scope)
    }

    pub fn tail_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| l.in_scope).count()
    }

    /// Bytes actually allocated for anchors.
    pub fn anchor_bytes(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| (l.anchors.len() * 2 * self.n_heads * self.d_head * 4) as u64)
            .sum()
    }

    /// Pins a layer's threshold; the controller no longer moves it.
    /// `f64::INFINITY` disables skipping on that layer.
    pub fn freeze_threshold(&mut self, layer: usize, tau: f64) {
        let l = &mut self.layers[layer];
        l.tau = tau;
        l.frozen = true;
    }

    pub fn anchors_initialized(&self, layer: usize, seq: usize) -> bool {
        self.layers
            .get(layer)
            .and_then(|l| l.anchors.get(seq))
            .is_some_and(|a| a.observed > 0)
    }

    pub fn anchors(&self, layer: usize, seq: usize) -> Option<(&Heads, &Heads)> {
        let a = self.layers.get(layer)?.anchors.get(seq)?;
        Some((&a.k, &a.v))
    }

    fn check_shapes(&self, k: &[Vec<f32>], v: &[Vec<f32>]) -> Result<()> {
        for heads in [k, v] {
            if heads.len() != self.n_heads {
                return Err(Error::Dimension {
                    context: "filter heads",
                    expected: self.n_heads,
                    actual: heads.len(),
                });
            }
            if let Some(h) = heads.iter().find(|h| h.len() != self.d_head) {
                return Err(Error::Dimension {
                    context: "filter head dim",
                    expected: self.d_head,
                    actual: h.len(),
                });
            }
        }
        Ok(())
    }

    fn anchor_set(&mut self, layer: usize, seq: usize) -> Result<&mut AnchorSet> {
        let l = self
            .layers
            .get_mut(layer)
            .filter(|l| l.in_scope)
            .ok_or(Error::LayerNotFiltered { layer })?;
        let n = l.anchors.len();
        l.anchors.get_mut(seq).ok_or(Error::Dimension {
            context: "filter sequence index",
            expected: n,
            actual: seq,
        })
    }

    fn absorb(&mut self, layer: usize, seq: usize, k: &[Vec<f32>], v: &[Vec<f32>]) -> Result<()> {
        let mode = self.config.anchor_mode;
        let gamma = self.config.gamma;
        let set = self.anchor_set(layer, seq)?;
        set.observed += 1;
        if set.observed == 1 {
            set.k = k.to_vec();
            set.v = v.to_vec();
            return Ok(());
        }
        let n = set.observed;
        for (anchor, cur) in set.k.iter_mut().zip(k).chain(set.v.iter_mut().zip(v)) {
            match mode {
                AnchorMode::Ema => update_anchor(anchor, cur, gamma),
                AnchorMode::ExactMean => update_mean_anchor(anchor, cur, n),
            }
        }
        Ok(())
    }

    /// Folds a token into the anchors without scoring it (prefill).
    pub fn observe(&mut self, layer: usize, seq: usize, k: &[Vec<f32>], v: &[Vec<f32>]) -> Result<()> {
        self.check_shapes(k, v)?;
        self.absorb(layer, seq, k, v)
    }

    /// Scores a token against the sequence's anchors, then folds it into them.
    ///
    /// With `enact == false` the decision is computed but never enacted
    /// (dense runs). During warm-up every decision is a shadow decision.
    /// Layer counters and the threshold only change in [`commit`](Self::commit).
    pub fn evaluate(
        &mut self,
        layer: usize,
        seq: usize,
        k: &[Vec<f32>],
        v: &[Vec<f32>],
        enact: bool,
    ) -> Result<Decision> {
        self.check_shapes(k, v)?;
        let set = self.anchor_set(layer, seq)?;
        if set.observed == 0 {
            return Err(Error::Precondition(format!(
                "anchors of layer {layer}, sequence {seq} have not observed any token"
            )));
        }
        let hk = head_similarity(&set.k, k)?;
        let hv = head_similarity(&set.v, v)?;

        let cfg = &self.config;
        let l = &self.layers[layer];
        let blend = |state: Option<f64>, fresh: f64| match (cfg.variance_mode, state) {
            (VarianceMode::Instant, _) | (VarianceMode::Ema, None) => fresh,
            (VarianceMode::Ema, Some(s)) => cfg.gamma * s + (1.0 - cfg.gamma) * fresh,
        };
        let var_k = blend(l.var_k, hk.variance);
        let var_v = blend(l.var_v, hv.variance);
        let score = fuse(hk.mean, hv.mean, var_k, var_v, cfg.fusion, cfg.fusion_formula);

        let would_skip = score.s_kv > l.tau;
        let shadow = !enact || l.step_index < cfg.warmup_steps;
        let decision = Decision {
            layer,
            seq,
            score,
            tau: l.tau,
            step_index: l.step_index,
            shadow,
            would_skip,
            skip: would_skip && !shadow,
            degenerate: hk.degenerate || hv.degenerate,
            fresh_var_k: hk.variance,
            fresh_var_v: hv.variance,
        };
        self.absorb(layer, seq, k, v)?;
        Ok(decision)
    }

    /// Step barrier for one layer: updates the variance estimates, counters,
    /// skip-ratio estimator and threshold from this step's decisions.
    pub fn commit(&mut self, layer: usize, decisions: &[Decision]) -> Result<()> {
        if decisions.is_empty() {
            return Ok(());
        }
        let cfg = self.config.clone();
        let l = self
            .layers
            .get_mut(layer)
            .filter(|l| l.in_scope)
            .ok_or(Error::LayerNotFiltered { layer })?;
        let n = decisions.len() as f64;
        let fresh_k = decisions.iter().map(|d| d.fresh_var_k).sum::<f64>() / n;
        let fresh_v = decisions.iter().map(|d| d.fresh_var_v).sum::<f64>() / n;
        let fold = |state: Option<f64>, fresh: f64| match state {
            None => fresh,
            Some(s) => cfg.gamma * s + (1.0 - cfg.gamma) * fresh,
        };
        match cfg.variance_mode {
            VarianceMode::Ema => {
                l.var_k = Some(fold(l.var_k, fresh_k));
                l.var_v = Some(fold(l.var_v, fresh_v));
            }
            VarianceMode::Instant => {
                l.var_k = Some(fresh_k);
                l.var_v = Some(fresh_v);
            }
        }

        let skips = decisions.iter().filter(|d| d.skip).count();
        let hits = decisions
            .iter()
            .filter(|d| {
                if d.shadow && cfg.warmup_feedback == WarmupFeedback::Shadow {
                    d.would_skip
                } else {
                    d.skip
                }
            })
            .count();
        l.eligible_count += decisions.len() as u64;
        l.skip_count += skips as u64;
        l.step_index += 1;
        l.estimator.observe(hits, decisions.len());
        if !l.frozen {
            l.tau = update_threshold(l.tau, l.estimator.ratio(), l.target, cfg.eta);
        }
        Ok(())
    }

    /// Single-sequence decision: [`evaluate`](Self::evaluate) followed by
    /// [`commit`](Self::commit).
    pub fn skip_decision(
        &mut self,
        layer: usize,
        seq: usize,
        k: &[Vec<f32>],
        v: &[Vec<f32>],
    ) -> Result<(bool, SimilarityScore)> {
        let d = self.evaluate(layer, seq, k, v, true)?;
        self.commit(layer, std::slice::from_ref(&d))?;
        Ok((d.skip, d.score))
    }
}
