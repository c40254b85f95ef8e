//! Offline replay of a trace through the filter and threshold controller.
//!
//! Events run in the order the live engine produces them: prefill events
//! first (observed by the anchors), then decode steps, each step layer by
//! layer with every sequence's decision collected before the layer's
//! controller commits. Decode steps of different sequences are aligned by
//! their ordinal, not their position, so prompts of unequal length line up
//! as they do in a live batch.

use std::collections::BTreeMap;

use super::Trace;
use crate::error::{Error, Result};
use crate::filter::FilterState;
use crate::metrics::aggregate::{aggregate, Summary};
use crate::metrics::flops::{FlopsLedger, FlopsModel};
use crate::metrics::mass::{attention_mass_lost, FutureMass, MassLost};
use crate::numerics::{dot, softmax_in_place};
use crate::policy::{CacheOnSkip, PruneConfig};
use crate::report::StepReport;
use crate::transformer::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplayOptions {
    /// Enact skips. `false` replays densely: decisions are shadow only.
    pub enact: bool,
    /// Recompute attention rows from recorded queries and keys.
    pub verify_attention: bool,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        ReplayOptions {
            enact: true,
            verify_attention: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReplayOutput {
    pub reports: Vec<StepReport>,
    pub summary: Summary,
    pub mass_lost: Option<MassLost>,
    pub ledger: FlopsLedger,
    /// Final threshold per layer.
    pub taus: Vec<f64>,
    /// Largest deviation between recorded and recomputed attention, when
    /// verification was requested and queries were recorded.
    pub attention_max_error: Option<f64>,
}

/// Model shape implied by a trace, for FLOP accounting.
pub fn trace_model_config(trace: &Trace) -> ModelConfig {
    let h = &trace.header;
    ModelConfig {
        n_layers: h.n_layers,
        n_heads: h.n_heads,
        d_model: h.n_heads * h.d_head,
        d_head: h.d_head,
        max_seq: h.n_steps.max(1),
        ..ModelConfig::default()
    }
}

pub fn replay(trace: &Trace, config: &PruneConfig, options: ReplayOptions) -> Result<ReplayOutput> {
    trace.validate()?;
    let h = &trace.header;
    let mut filter = FilterState::new(h.n_layers, h.n_heads, h.d_head, h.n_seqs, config)?;
    let flops = FlopsModel::new(&trace_model_config(trace));
    let mut ledger = FlopsLedger::default();
    let mut cache_len = vec![vec![0usize; h.n_layers]; h.n_seqs];

    // A sequence without prefill events uses its first position as prefill.
    let mut has_prefill = vec![false; h.n_seqs];
    let mut first_step = vec![usize::MAX; h.n_seqs];
    for e in &trace.events {
        has_prefill[e.seq] |= e.prefill;
        first_step[e.seq] = first_step[e.seq].min(e.step);
    }
    let is_prefill = |i: usize| {
        let e = &trace.events[i];
        e.prefill || (!has_prefill[e.seq] && e.step == first_step[e.seq])
    };

    // ordinal -> layer -> event indices (in sequence order)
    let mut decode: BTreeMap<usize, BTreeMap<usize, Vec<usize>>> = BTreeMap::new();
    let mut ordinal = vec![(usize::MAX, 0usize); h.n_seqs];
    for (i, e) in trace.events.iter().enumerate() {
        if is_prefill(i) {
            filter_observe(&mut filter, &mut cache_len, trace, i)?;
            continue;
        }
        let (last_step, n) = &mut ordinal[e.seq];
        if *last_step != e.step {
            if *last_step != usize::MAX {
                *n += 1;
            }
            *last_step = e.step;
        }
        decode.entry(*n).or_default().entry(e.layer).or_default().push(i);
    }

    let mut reports = Vec::new();
    for layers in decode.values() {
        for (&layer, events) in layers {
            let in_scope = filter.in_scope(layer);
            let mut pending = Vec::new();
            for &i in events {
                let e = &trace.events[i];
                let decision = if in_scope {
                    if !filter.anchors_initialized(layer, e.seq) {
                        return Err(Error::Precondition(format!(
                            "sequence {} reaches layer {layer} decoding before any prefill",
                            e.seq
                        )));
                    }
                    Some(filter.evaluate(layer, e.seq, &e.k, &e.v, options.enact)?)
                } else {
                    None
                };
                let skip = decision.as_ref().is_some_and(|d| d.skip);
                let len = &mut cache_len[e.seq][layer];
                let l = *len + 1;
                if !skip || config.cache_on_skip == CacheOnSkip::Keep {
                    *len += 1;
                }
                let overhead = if in_scope { flops.filter_overhead_flops } else { 0 };
                let gross = flops.attention_flops(l);
                let saved = flops.flops_saved(skip, l, in_scope);
                ledger.dense += gross + overhead;
                ledger.executed += if skip { 0 } else { gross } + overhead;
                ledger.overhead += overhead;
                ledger.saved += saved;
                reports.push(StepReport {
                    seq: e.seq,
                    step: e.step,
                    layer,
                    in_scope,
                    score: decision.as_ref().map(|d| d.score),
                    tau: decision.as_ref().map(|d| d.tau),
                    step_index: decision.as_ref().map(|d| d.step_index),
                    shadow: decision.as_ref().is_some_and(|d| d.shadow),
                    would_skip: decision.as_ref().is_some_and(|d| d.would_skip),
                    skipped: skip,
                    degenerate: decision.as_ref().is_some_and(|d| d.degenerate),
                    cache_len: l,
                    flops_saved: saved,
                });
                pending.extend(decision);
            }
            filter.commit(layer, &pending).or_else(|e| if in_scope { Err(e) } else { Ok(()) })?;
        }
    }
    reports.sort_by_key(|r| (r.seq, r.step, r.layer));

    let mass_lost = if trace.has_attention() {
        let fm = FutureMass::from_trace(trace)?;
        Some(attention_mass_lost(&reports, &fm, h.n_layers)?)
    } else {
        None
    };
    let summary = aggregate(&reports, h.n_layers, mass_lost.as_ref());
    let attention_max_error = if options.verify_attention { verify_attention(trace) } else { None };
    Ok(ReplayOutput {
        reports,
        summary,
        mass_lost,
        ledger,
        taus: filter.layers().iter().map(|l| l.tau()).collect(),
        attention_max_error,
    })
}

fn filter_observe(filter: &mut FilterState, cache_len: &mut [Vec<usize>], trace: &Trace, i: usize) -> Result<()> {
    let e = &trace.events[i];
    if filter.in_scope(e.layer) {
        filter.observe(e.layer, e.seq, &e.k, &e.v)?;
    }
    cache_len[e.seq][e.layer] += 1;
    Ok(())
}

/// Recomputes each attention row as `softmax(q . k_j / sqrt(d_head))` over
/// the recorded keys of positions `0..=step` and returns the largest
/// elementwise deviation. `None` when any event lacks a query or row.
pub fn verify_attention(trace: &Trace) -> Option<f64> {
    let d = trace.header.d_head;
    let scale = 1.0 / (d as f32).sqrt();
    let mut keys: BTreeMap<(usize, usize), Vec<&Vec<Vec<f32>>>> = BTreeMap::new();
    let mut worst = 0.0f64;
    for e in &trace.events {
        let (q, rows) = (e.q.as_ref()?, e.attn.as_ref()?);
        let ks = keys.entry((e.seq, e.layer)).or_default();
        ks.push(&e.k);
        for (hi, row) in rows.iter().enumerate() {
            let mut fresh: Vec<f32> = ks.iter().map(|k| dot(&q[hi], &k[hi]) * scale).collect();
            softmax_in_place(&mut fresh);
            if fresh.len() != row.len() {
                return Some(f64::INFINITY);
            }
            for (a, b) in fresh.iter().zip(row) {
                worst = worst.max(f64::from((a - b).abs()));
            }
        }
    }
    Some(worst)
}
