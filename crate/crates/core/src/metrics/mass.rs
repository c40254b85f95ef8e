//! Attention mass lost: how much future attention the skipped tokens would
//! have received, read from recorded ground-truth rows.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::report::StepReport;
use crate::trace::Trace;

#[derive(Debug, Clone, Default)]
struct Column {
    /// `sums[head][t]`: attention later queries assign to position `t`.
    sums: Vec<Vec<f64>>,
    /// Number of later queries per position.
    later: Vec<u32>,
}

/// Future attention mass per (sequence, layer, head, position).
///
/// For position `t` this is the mean, over queries at positions `t' > t`,
/// of the weight the recorded row of `t'` assigns to `t`. Positions with no
/// later query have mass 0.
#[derive(Debug, Clone)]
pub struct FutureMass {
    n_heads: usize,
    columns: BTreeMap<(usize, usize), Column>,
}

impl FutureMass {
    pub fn from_trace(trace: &Trace) -> Result<Self> {
        let h = trace.header.n_heads;
        let n = trace.header.n_steps;
        let mut columns: BTreeMap<(usize, usize), Column> = BTreeMap::new();
        for e in &trace.events {
            let rows = e.attn.as_ref().ok_or_else(|| {
                Error::MissingAttention(format!("event (seq {}, step {}, layer {}) has no attn rows", e.seq, e.step, e.layer))
            })?;
            let col = columns.entry((e.seq, e.layer)).or_insert_with(|| Column {
                sums: vec![vec![0.0; n]; h],
                later: vec![0; n],
            });
            for (hi, row) in rows.iter().enumerate() {
                for (t, &p) in row.iter().enumerate().take(e.step) {
                    col.sums[hi][t] += f64::from(p);
                }
            }
            for c in col.later.iter_mut().take(e.step) {
                *c += 1;
            }
        }
        Ok(FutureMass { n_heads: h, columns })
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    fn column(&self, seq: usize, layer: usize, step: usize) -> Option<&Column> {
        self.columns.get(&(seq, layer)).filter(|c| step < c.later.len())
    }

    /// Mass of one head; `None` when the position is unknown or no later
    /// query exists.
    pub fn head_mass(&self, seq: usize, layer: usize, head: usize, step: usize) -> Option<f64> {
        let c = self.column(seq, layer, step)?;
        let later = c.later[step];
        (later > 0).then(|| c.sums[head][step] / f64::from(later))
    }

    /// Head-averaged mass; 0 when no later query exists.
    pub fn mass(&self, seq: usize, layer: usize, step: usize) -> Option<f64> {
        let c = self.column(seq, layer, step)?;
        let later = c.later[step];
        if later == 0 {
            return Some(0.0);
        }
        let total: f64 = c.sums.iter().map(|s| s[step]).sum();
        Some(total / f64::from(later) / self.n_heads as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MassLost {
    /// Per layer: skipped decisions' mass over all decisions' mass.
    pub per_layer: Vec<f64>,
    /// Summed over every layer before dividing.
    pub global: f64,
}

/// Fraction of future attention mass that fell on skipped decisions.
///
/// Every report is a decision; layers outside the pruning scope contribute
/// to the denominators only.
pub fn attention_mass_lost(reports: &[StepReport], mass: &FutureMass, n_layers: usize) -> Result<MassLost> {
    let mut num = vec![0.0; n_layers];
    let mut den = vec![0.0; n_layers];
    for r in reports {
        let m = mass.mass(r.seq, r.layer, r.step).ok_or_else(|| {
            Error::Precondition(format!(
                "report (seq {}, step {}, layer {}) has no matching trace event",
                r.seq, r.step, r.layer
            ))
        })?;
        if r.layer >= n_layers {
            return Err(Error::Precondition(format!("report layer {} >= {n_layers}", r.layer)));
        }
        den[r.layer] += m;
        if r.skipped {
            num[r.layer] += m;
        }
    }
    let ratio = |n: f64, d: f64| if d > 0.0 { (n / d).clamp(0.0, 1.0) } else { 0.0 };
    Ok(MassLost {
        per_layer: num.iter().zip(&den).map(|(&n, &d)| ratio(n, d)).collect(),
        global: ratio(num.iter().sum(), den.iter().sum()),
    })
}
