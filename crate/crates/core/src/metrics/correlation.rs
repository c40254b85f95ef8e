//! Rank and linear correlation between token similarity and the attention
//! the token later receives.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;

use super::mass::FutureMass;
use crate::error::{Error, Result};
use crate::report::StepReport;
use crate::trace::Trace;

/// Minimum pairs for a coefficient to be reported.
pub const MIN_PAIRS: usize = 8;

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n != y.len() || n < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; ties share their average rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() {
        return None;
    }
    pearson(&ranks(x), &ranks(y))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationEntry {
    pub layer: usize,
    pub head: usize,
    pub n: usize,
    pub spearman: f64,
    pub pearson: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorrelationReport {
    pub entries: Vec<CorrelationEntry>,
}

impl CorrelationReport {
    pub fn mean_spearman(&self) -> Option<f64> {
        let n = self.entries.len();
        (n > 0).then(|| self.entries.iter().map(|e| e.spearman).sum::<f64>() / n as f64)
    }

    pub fn mean_abs_spearman(&self) -> Option<f64> {
        let n = self.entries.len();
        (n > 0).then(|| self.entries.iter().map(|e| e.spearman.abs()).sum::<f64>() / n as f64)
    }

    /// Columns: layer, head, n, spearman, pearson.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["layer", "head", "n", "spearman", "pearson"])?;
        for e in &self.entries {
            csv.serialize(e)?;
        }
        csv.flush()?;
        Ok(())
    }
}

/// Pairs each scored report's `s_kv` with the future attention its token
/// receives, per (layer, head). Tokens without later queries are left out.
pub fn correlation_with_mass(mass: &FutureMass, reports: &[StepReport]) -> Result<CorrelationReport> {
    let mut pairs: BTreeMap<(usize, usize), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in reports {
        let Some(s) = r.s_kv() else { continue };
        if mass.mass(r.seq, r.layer, r.step).is_none() {
            return Err(Error::Precondition(format!(
                "report (seq {}, step {}, layer {}) has no matching trace event",
                r.seq, r.step, r.layer
            )));
        }
        for head in 0..mass.n_heads() {
            if let Some(m) = mass.head_mass(r.seq, r.layer, head, r.step) {
                let e = pairs.entry((r.layer, head)).or_default();
                e.0.push(s);
                e.1.push(m);
            }
        }
    }
    let entries = pairs
        .into_iter()
        .filter(|(_, (x, _))| x.len() >= MIN_PAIRS)
        .filter_map(|((layer, head), (x, y))| {
            Some(CorrelationEntry {
                layer,
                head,
                n: x.len(),
                spearman: spearman(&x, &y)?,
                pearson: pearson(&x, &y)?,
            })
        })
        .collect();
    Ok(CorrelationReport { entries })
}

pub fn correlation(trace: &Trace, reports: &[StepReport]) -> Result<CorrelationReport> {
    correlation_with_mass(&FutureMass::from_trace(trace)?, reports)
}
