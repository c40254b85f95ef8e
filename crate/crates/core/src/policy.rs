//! Layer selection and budget control.
//!
//! A global pruning budget is concentrated on a subset of layers (the last
//! `tail_fraction` of the stack by default) whose per-layer target is inflated
//! so the whole model still meets the global budget. Each filtered layer then
//! tracks its target with a proportional threshold controller.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which layers are eligible for pruning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Focus {
    Tail,
    Head,
    Uniform,
}

/// Which similarity feeds the skip decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Kv,
    KeyOnly,
    ValueOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    /// `anchor <- gamma * anchor + (1 - gamma) * current`
    Ema,
    /// Exact incremental mean of every previous token.
    ExactMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// Use the current step's across-head variance directly.
    Instant,
    /// Smooth the across-head variance over steps with factor `gamma`.
    Ema,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmupFeedback {
    /// Thresholds adapt to the decisions that would have been taken.
    Shadow,
    /// Thresholds adapt to the actual (always zero) warm-up skip ratio.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheOnSkip {
    Drop,
    Keep,
}

/// How `alpha` (the weight of the key similarity) is derived from the two
/// head variances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionFormula {
    /// Lower-variance side gets the larger weight: alpha = var_k^-1 / (var_k^-1 + var_v^-1).
    Text,
    /// alpha = var_v^-1 / (var_k^-1 + var_v^-1), applied to the key similarity.
    LiteralEq2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Cumulative,
    Ema,
}

macro_rules! keyword_enum {
    ($ty:ident { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub const NAMES: &'static [&'static str] = &[$($name),+];

            pub fn as_str(&self) -> &'static str {
                match self { $($ty::$variant => $name),+ }
            }
        }

        impl FromStr for $ty {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    other => Err(format!(
                        "unknown value `{other}` (expected one of: {})",
                        Self::NAMES.join(", ")
                    )),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

keyword_enum!(Focus { Tail => "tail", Head => "head", Uniform => "uniform" });
keyword_enum!(Fusion { Kv => "kv", KeyOnly => "key_only", ValueOnly => "value_only" });
keyword_enum!(AnchorMode { Ema => "ema", ExactMean => "exact_mean" });
keyword_enum!(VarianceMode { Instant => "instant", Ema => "ema" });
keyword_enum!(WarmupFeedback { Shadow => "shadow", Literal => "literal" });
keyword_enum!(CacheOnSkip { Drop => "drop", Keep => "keep" });
keyword_enum!(FusionFormula { Text => "text", LiteralEq2 => "literal_eq2" });
keyword_enum!(Estimator { Cumulative => "cumulative", Ema => "ema" });

/// Pruning policy. Field names double as config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub p_global: f64,
    pub tail_fraction: f64,
    pub gamma: f64,
    pub eta: f64,
    pub warmup_steps: u64,
    pub tau_init: f64,
    pub focus: Focus,
    pub fusion: Fusion,
    pub anchor_mode: AnchorMode,
    pub variance_mode: VarianceMode,
    pub warmup_feedback: WarmupFeedback,
    pub cache_on_skip: CacheOnSkip,
    pub fusion_formula: FusionFormula,
    pub estimator: Estimator,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            p_global: 0.25,
            tail_fraction: 0.5,
            gamma: 0.9,
            eta: 0.01,
            warmup_steps: 16,
            tau_init: 0.9,
            focus: Focus::Tail,
            fusion: Fusion::Kv,
            anchor_mode: AnchorMode::Ema,
            variance_mode: VarianceMode::Ema,
            warmup_feedback: WarmupFeedback::Shadow,
            cache_on_skip: CacheOnSkip::Drop,
            fusion_formula: FusionFormula::Text,
            estimator: Estimator::Cumulative,
        }
    }
}

impl PruneConfig {
    pub const KEYS: &'static [&'static str] = &[
        "p_global",
        "tail_fraction",
        "gamma",
        "eta",
        "warmup_steps",
        "tau_init",
        "focus",
        "fusion",
        "anchor_mode",
        "variance_mode",
        "warmup_feedback",
        "cache_on_skip",
        "fusion_formula",
        "estimator",
    ];

    /// Sets one field from its textual form. `Y` and `y` are accepted as
    /// aliases of `tail_fraction`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
        }
        fn word<T: FromStr<Err = String>>(key: &str, value: &str) -> Result<T> {
            value.trim().parse().map_err(|e| Error::config(key, e))
        }
        let value = value.trim();
        match key.trim() {
            "p_global" => self.p_global = num(key, value)?,
            "tail_fraction" | "Y" | "y" => self.tail_fraction = num("tail_fraction", value)?,
            "gamma" => self.gamma = num(key, value)?,
            "eta" => self.eta = num(key, value)?,
            "warmup_steps" => self.warmup_steps = num(key, value)?,
            "tau_init" => self.tau_init = num(key, value)?,
            "focus" => self.focus = word(key, value)?,
            "fusion" => self.fusion = word(key, value)?,
            "anchor_mode" => self.anchor_mode = word(key, value)?,
            "variance_mode" => self.variance_mode = word(key, value)?,
            "warmup_feedback" => self.warmup_feedback = word(key, value)?,
            "cache_on_skip" => self.cache_on_skip = word(key, value)?,
            "fusion_formula" => self.fusion_formula = word(key, value)?,
            "estimator" => self.estimator = word(key, value)?,
            other => return Err(Error::config(other, "unknown key")),
        }
        Ok(())
    }

    /// Current value of a field in the textual form accepted by [`set`](Self::set).
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "p_global" => self.p_global.to_string(),
            "tail_fraction" | "Y" | "y" => self.tail_fraction.to_string(),
            "gamma" => self.gamma.to_string(),
            "eta" => self.eta.to_string(),
            "warmup_steps" => self.warmup_steps.to_string(),
            "tau_init" => self.tau_init.to_string(),
            "focus" => self.focus.to_string(),
            "fusion" => self.fusion.to_string(),
            "anchor_mode" => self.anchor_mode.to_string(),
            "variance_mode" => self.variance_mode.to_string(),
            "warmup_feedback" => self.warmup_feedback.to_string(),
            "cache_on_skip" => self.cache_on_skip.to_string(),
            "fusion_formula" => self.fusion_formula.to_string(),
            "estimator" => self.estimator.to_string(),
            _ => return None,
        })
    }

    /// Applies a flat `key = value` text (one pair per line, `#` comments)
    /// on top of `self`.
    pub fn apply_kv_text(&mut self, text: &str) -> Result<()> {
        for (key, value) in parse_kv_lines(text)? {
            self.set(&key, &value)?;
        }
        Ok(())
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = PruneConfig::default();
        cfg.apply_kv_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv_text(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).unwrap_or_default()))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_global) {
            return Err(Error::config("p_global", "must lie in [0, 1]"));
        }
        if !(self.tail_fraction > 0.0 && self.tail_fraction <= 1.0) {
            return Err(Error::config("tail_fraction", "must lie in (0, 1]"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config("gamma", "must lie in (0, 1)"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config("eta", "must be a positive finite number"));
        }
        if !self.tau_init.is_finite() {
            return Err(Error::config("tau_init", "must be finite"));
        }
        if per_layer_target_unchecked(self) > 1.0 + 1e-12 {
            return Err(Error::config(
                "p_global",
                format!(
                    "per-layer target p_global / tail_fraction = {} exceeds 1",
                    self.p_global / self.tail_fraction
                ),
            ));
        }
        Ok(())
    }
}

/// Splits `key = value` lines; blank lines and `#` comments are ignored.
pub fn parse_kv_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config(
                format!("line {}", i + 1),
                format!("expected `key = value`, got `{line}`"),
            )
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Per-layer pruning budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerBudget {
    pub layer: usize,
    pub target_ratio: f64,
    pub in_scope: bool,
}

/// Number of layers in a `fraction`-sized head or tail set (ceiling rule).
pub fn selected_count(n_layers: usize, fraction: f64) -> usize {
    let raw = (fraction * n_layers as f64 - 1e-9).ceil();
    (raw.max(0.0) as usize).min(n_layers)
}

/// Layers eligible for pruning under `focus`.
pub fn select_layers(n_layers: usize, focus: Focus, tail_fraction: f64) -> BTreeSet<usize> {
    let k = selected_count(n_layers, tail_fraction);
    match focus {
        Focus::Tail => (n_layers - k..n_layers).collect(),
        Focus::Head => (0..k).collect(),
        Focus::Uniform => (0..n_layers).collect(),
    }
}

fn per_layer_target_unchecked(cfg: &PruneConfig) -> f64 {
    match cfg.focus {
        Focus::Uniform => cfg.p_global,
        Focus::Tail | Focus::Head => cfg.p_global / cfg.tail_fraction,
    }
}

/// Target skip ratio of every selected layer: `p_global / tail_fraction` for
/// head/tail focus, `p_global` for uniform.
pub fn per_layer_target(cfg: &PruneConfig) -> Result<f64> {
    let t = per_layer_target_unchecked(cfg);
    if t > 1.0 + 1e-12 {
        return Err(Error::config(
            "p_global",
            format!("per-layer target {t} exceeds 1"),
        ));
    }
    Ok(t.min(1.0))
}

/// Budget of every layer. A layer whose target is zero is out of scope: it
/// never skips and carries no filter overhead.
pub fn layer_plan(n_layers: usize, cfg: &PruneConfig) -> Result<Vec<LayerBudget>> {
    let target = per_layer_target(cfg)?;
    let selected = select_layers(n_layers, cfg.focus, cfg.tail_fraction);
    Ok((0..n_layers)
        .map(|layer| {
            let in_scope = target > 0.0 && selected.contains(&layer);
            LayerBudget {
                layer,
                target_ratio: if in_scope { target } else { 0.0 },
                in_scope,
            }
        })
        .collect())
}

/// Proportional threshold feedback: `tau + eta * (current - target)`,
/// clamped to `[-1, 1 + eta]`.
pub fn update_threshold(tau: f64, rho_current: f64, rho_target: f64, eta: f64) -> f64 {
    (tau + eta * (rho_current - rho_target)).clamp(-1.0, 1.0 + eta)
}

/// Running estimate of a layer's skip ratio.
#[derive(Debug, Clone, PartialEq)]
pub enum SkipRatioEstimator {
    Cumulative { hits: f64, total: u64 },
    Ema { gamma: f64, value: f64 },
}

impl SkipRatioEstimator {
    pub fn new(kind: Estimator, gamma: f64) -> Self {
        match kind {
            Estimator::Cumulative => SkipRatioEstimator::Cumulative { hits: 0.0, total: 0 },
            Estimator::Ema => SkipRatioEstimator::Ema { gamma, value: 0.0 },
        }
    }

    /// Records one step. `hits` skip indicators were observed out of `n`
    /// sequences.
    pub fn observe(&mut self, hits: usize, n: usize) {
        if n == 0 {
            return;
        }
        match self {
            SkipRatioEstimator::Cumulative { hits: h, total } => {
                *h += hits as f64;
                *total += n as u64;
            }
            SkipRatioEstimator::Ema { gamma, value } => {
                let x = hits as f64 / n as f64;
                *value = *gamma * *value + (1.0 - *gamma) * x;
            }
        }
    }

    /// Current ratio; zero before any observation.
    pub fn ratio(&self) -> f64 {
        match *self {
            SkipRatioEstimator::Cumulative { total: 0, .. } => 0.0,
            SkipRatioEstimator::Cumulative { hits, total } => hits / total as f64,
            SkipRatioEstimator::Ema { value, .. } => value,
        }
    }
}
