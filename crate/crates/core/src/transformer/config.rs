use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::parse_kv_lines;

/// Shape of the toy decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 8,
            n_heads: 4,
            d_model: 64,
            d_head: 16,
            d_ff: 128,
            vocab_size: 256,
            max_seq: 512,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub const KEYS: &'static [&'static str] = &[
        "n_layers",
        "n_heads",
        "d_model",
        "d_head",
        "d_ff",
        "vocab_size",
        "max_seq",
        "seed",
    ];

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::config(
                "d_model",
                format!(
                    "must equal n_heads * d_head = {}",
                    self.n_heads * self.d_head
                ),
            ));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parse = |v: &str| -> Result<u64> {
            v.trim()
                .parse()
                .map_err(|_| Error::config(key, format!("cannot parse `{v}`")))
        };
        let n = parse(value)?;
        match key.trim() {
            "n_layers" => self.n_layers = n as usize,
            "n_heads" => self.n_heads = n as usize,
            "d_model" => self.d_model = n as usize,
            "d_head" => self.d_head = n as usize,
            "d_ff" => self.d_ff = n as usize,
            "vocab_size" => self.vocab_size = n as usize,
            "max_seq" => self.max_seq = n as usize,
            "seed" => self.seed = n,
            other => return Err(Error::config(other, "unknown key")),
        }
        Ok(())
    }

    pub fn apply_kv_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_kv_lines(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        cfg.apply_kv_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
