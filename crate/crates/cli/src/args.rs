//! Flag sets shared by several subcommands. Flag names mirror the config
//! keys with `_` replaced by `-`.

use std::path::{Path, PathBuf};

use clap::Args;
use tokfilter::{ModelConfig, PruneConfig};

#[derive(Debug, Clone, Default, Args)]
pub struct PruneArgs {
    /// Flat `key = value` pruning config; flags override it.
    #[arg(long, visible_alias = "prune-config", value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub p_global: Option<String>,
    /// Fraction of layers the policy may prune (`Y`).
    #[arg(long, visible_alias = "y")]
    pub tail_fraction: Option<String>,
    #[arg(long)]
    pub gamma: Option<String>,
    #[arg(long)]
    pub eta: Option<String>,
    #[arg(long)]
    pub warmup_steps: Option<String>,
    #[arg(long)]
    pub tau_init: Option<String>,
    /// tail | head | uniform
    #[arg(long)]
    pub focus: Option<String>,
    /// kv | key_only | value_only
    #[arg(long)]
    pub fusion: Option<String>,
    /// ema | exact_mean
    #[arg(long)]
    pub anchor_mode: Option<String>,
    /// instant | ema
    #[arg(long)]
    pub variance_mode: Option<String>,
    /// shadow | literal
    #[arg(long)]
    pub warmup_feedback: Option<String>,
    /// drop | keep
    #[arg(long)]
    pub cache_on_skip: Option<String>,
    /// text | literal_eq2
    #[arg(long)]
    pub fusion_formula: Option<String>,
    /// cumulative | ema
    #[arg(long)]
    pub estimator: Option<String>,
}

impl PruneArgs {
    fn overrides(&self) -> [(&'static str, &Option<String>); 14] {
        [
            ("p_global", &self.p_global),
            ("tail_fraction", &self.tail_fraction),
            ("gamma", &self.gamma),
            ("eta", &self.eta),
            ("warmup_steps", &self.warmup_steps),
            ("tau_init", &self.tau_init),
            ("focus", &self.focus),
            ("fusion", &self.fusion),
            ("anchor_mode", &self.anchor_mode),
            ("variance_mode", &self.variance_mode),
            ("warmup_feedback", &self.warmup_feedback),
            ("cache_on_skip", &self.cache_on_skip),
            ("fusion_formula", &self.fusion_formula),
            ("estimator", &self.estimator),
        ]
    }

    /// Config file (if any) with flag overrides applied, not yet validated.
    pub fn unvalidated(&self) -> anyhow::Result<PruneConfig> {
        let mut cfg = PruneConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_kv_text(&read_text(path)?)?;
        }
        for (key, value) in self.overrides() {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        Ok(cfg)
    }

    pub fn resolve(&self) -> anyhow::Result<PruneConfig> {
        let cfg = self.unvalidated()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    /// Flat `key = value` model config; flags override it.
    #[arg(long, value_name = "PATH")]
    pub model_config: Option<PathBuf>,
    #[arg(long)]
    pub n_layers: Option<String>,
    #[arg(long)]
    pub n_heads: Option<String>,
    #[arg(long)]
    pub d_model: Option<String>,
    #[arg(long)]
    pub d_head: Option<String>,
    #[arg(long)]
    pub d_ff: Option<String>,
    #[arg(long)]
    pub vocab_size: Option<String>,
    #[arg(long)]
    pub max_seq: Option<String>,
    /// Seed of every random stream (weights, synthesis, tie-breaks).
    #[arg(long)]
    pub seed: Option<String>,
}

impl ModelArgs {
    pub fn resolve(&self) -> anyhow::Result<ModelConfig> {
        let mut cfg = ModelConfig::default();
        if let Some(path) = &self.model_config {
            cfg.apply_kv_text(&read_text(path)?)?;
        }
        let overrides = [
            ("n_layers", &self.n_layers),
            ("n_heads", &self.n_heads),
            ("d_model", &self.d_model),
            ("d_head", &self.d_head),
            ("d_ff", &self.d_ff),
            ("vocab_size", &self.vocab_size),
            ("max_seq", &self.max_seq),
            ("seed", &self.seed),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn read_text(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).map_err(|e| anyhow::Error::new(e).context(format!("reading {}", path.display())))
}
