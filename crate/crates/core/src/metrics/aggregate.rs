//! Per-layer and global summaries of a decision stream.

use std::io::Write;

use serde::Serialize;

use super::mass::MassLost;
use crate::error::Result;
use crate::report::StepReport;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSummary {
    /// `None` for the global row.
    pub layer: Option<usize>,
    /// Decisions taken (every decode token, in scope or not).
    pub eligible: u64,
    pub skipped: u64,
    pub skip_ratio: f64,
    pub mean_s_kv: Option<f64>,
    pub s_kv_p10: Option<f64>,
    pub s_kv_p50: Option<f64>,
    pub s_kv_p90: Option<f64>,
    pub mean_alpha: Option<f64>,
    pub mass_lost: Option<f64>,
    pub flops_saved: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub layers: Vec<LayerSummary>,
    pub global: LayerSummary,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

fn mean(x: &[f64]) -> Option<f64> {
    (!x.is_empty()).then(|| x.iter().sum::<f64>() / x.len() as f64)
}

fn summarize<'a>(layer: Option<usize>, reports: impl Iterator<Item = &'a StepReport>, mass_lost: Option<f64>) -> LayerSummary {
    let (mut eligible, mut skipped, mut flops) = (0u64, 0u64, 0i64);
    let mut s = Vec::new();
    let mut alpha = Vec::new();
    for r in reports {
        eligible += 1;
        skipped += u64::from(r.skipped);
        flops += r.flops_saved;
        if let Some(sc) = r.score {
            s.push(sc.s_kv);
            alpha.push(sc.alpha);
        }
    }
    let mut sorted = s.clone();
    sorted.sort_by(f64::total_cmp);
    LayerSummary {
        layer,
        eligible,
        skipped,
        skip_ratio: if eligible == 0 { 0.0 } else { skipped as f64 / eligible as f64 },
        mean_s_kv: mean(&s),
        s_kv_p10: quantile(&sorted, 0.1),
        s_kv_p50: quantile(&sorted, 0.5),
        s_kv_p90: quantile(&sorted, 0.9),
        mean_alpha: mean(&alpha),
        mass_lost,
        flops_saved: flops,
    }
}

/// Groups reports by layer. The global skip ratio divides skipped decisions
/// by all decisions across every layer, so out-of-scope layers dilute it.
pub fn aggregate(reports: &[StepReport], n_layers: usize, mass: Option<&MassLost>) -> Summary {
    let n_layers = n_layers.max(reports.iter().map(|r| r.layer + 1).max().unwrap_or(0));
    let layers = (0..n_layers)
        .map(|l| {
            let m = mass.and_then(|m| m.per_layer.get(l).copied());
            summarize(Some(l), reports.iter().filter(|r| r.layer == l), m)
        })
        .collect();
    Summary {
        layers,
        global: summarize(None, reports.iter(), mass.map(|m| m.global)),
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn layer_name(l: Option<usize>) -> String {
    l.map_or_else(|| "all".to_string(), |l| l.to_string())
}

impl Summary {
    pub fn rows(&self) -> impl Iterator<Item = &LayerSummary> {
        self.layers.iter().chain(std::iter::once(&self.global))
    }

    pub const SUMMARY_COLUMNS: &'static [&'static str] =
        &["layer", "eligible", "skipped", "skip_ratio", "mean_s_kv", "mean_alpha", "mass_lost", "flops_saved"];

    pub const AGGREGATE_COLUMNS: &'static [&'static str] = &[
        "layer", "eligible", "skipped", "skip_ratio", "mean_s_kv", "s_kv_p10", "s_kv_p50", "s_kv_p90", "mean_alpha",
        "mass_lost", "flops_saved",
    ];

    /// Replay summary: one row per layer, then the `all` row.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(Self::SUMMARY_COLUMNS)?;
        for r in self.rows() {
            csv.write_record([
                layer_name(r.layer),
                r.eligible.to_string(),
                r.skipped.to_string(),
                r.skip_ratio.to_string(),
                opt(r.mean_s_kv),
                opt(r.mean_alpha),
                opt(r.mass_lost),
                r.flops_saved.to_string(),
            ])?;
        }
        csv.flush()?;
        Ok(())
    }

    /// Like [`write_csv`](Self::write_csv) with S_KV quantiles added.
    pub fn write_aggregate_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(Self::AGGREGATE_COLUMNS)?;
        for r in self.rows() {
            csv.write_record([
                layer_name(r.layer),
                r.eligible.to_string(),
                r.skipped.to_string(),
                r.skip_ratio.to_string(),
                opt(r.mean_s_kv),
                opt(r.s_kv_p10),
                opt(r.s_kv_p50),
                opt(r.s_kv_p90),
                opt(r.mean_alpha),
                opt(r.mass_lost),
                r.flops_saved.to_string(),
            ])?;
        }
        csv.flush()?;
        Ok(())
    }
}
