//! Generation session: caches, filter state and the block forward pass with
//! its skip path.

use std::collections::BTreeMap;

use super::{Heads, KvCache, Model};
use crate::error::{Error, Result};
use crate::filter::{Decision, FilterState};
use crate::metrics::flops::{FlopsLedger, FlopsModel};
use crate::policy::{CacheOnSkip, PruneConfig};
use crate::report::StepReport;
use crate::trace::{Trace, TraceEvent, TraceHeader, TraceSource, TRACE_FORMAT_VERSION};

/// How a block treats the attention sublayer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockMode {
    /// Always attend; the filter still scores tokens in shadow.
    Dense,
    /// Attend unless the filter decides to skip.
    Filtered,
    /// Skip the attention sublayer; the filter is not consulted.
    ForcedSkip,
    /// Attend; the filter is not consulted.
    ForcedKeep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Prefill,
    Decode,
}

#[derive(Debug, Clone)]
pub struct BlockOutput {
    pub hidden: Vec<f32>,
    /// Residual stream after the attention sublayer, before the FFN.
    pub after_attention: Vec<f32>,
    pub skipped: bool,
    /// Present for decode-phase calls.
    pub report: Option<StepReport>,
}

#[derive(Debug, Clone)]
pub struct DecodeOutput {
    /// Prompt followed by generated tokens, per sequence.
    pub tokens: Vec<Vec<u32>>,
    pub reports: Vec<StepReport>,
    pub ledger: FlopsLedger,
    pub trace: Option<Trace>,
}

struct Recorder {
    // Dense caches, so ground-truth rows exist for skipped tokens too.
    caches: Vec<KvCache>,
    events: Vec<TraceEvent>,
}

/// One generation over a batch of independent sequences.
///
/// Anchors are per sequence; thresholds are per layer and shared, updated by
/// [`commit_layer`](Self::commit_layer) once every sequence has passed the
/// layer in the current step.
pub struct Session<'m> {
    model: &'m Model,
    prune: PruneConfig,
    filter: FilterState,
    caches: Vec<KvCache>,
    recorder: Option<Recorder>,
    flops_model: FlopsModel,
    ledger: FlopsLedger,
    pending: Vec<Vec<Decision>>,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m Model, prune: &PruneConfig, n_seqs: usize, record: bool) -> Result<Self> {
        let c = model.config();
        let filter = FilterState::new(c.n_layers, c.n_heads, c.d_head, n_seqs, prune)?;
        let fresh = || {
            (0..n_seqs)
                .map(|_| KvCache::new(c.n_layers, c.n_heads, c.d_head, c.max_seq))
                .collect::<Vec<_>>()
        };
        Ok(Session {
            model,
            prune: prune.clone(),
            filter,
            caches: fresh(),
            recorder: record.then(|| Recorder {
                caches: fresh(),
                events: Vec::new(),
            }),
            flops_model: FlopsModel::new(c),
            ledger: FlopsLedger::default(),
            pending: vec![Vec::new(); c.n_layers],
        })
    }

    pub fn filter(&self) -> &FilterState {
        &self.filter
    }

    pub fn filter_mut(&mut self) -> &mut FilterState {
        &mut self.filter
    }

    pub fn cache(&self, seq: usize) -> &KvCache {
        &self.caches[seq]
    }

    pub fn ledger(&self) -> FlopsLedger {
        self.ledger
    }

    pub fn flops_model(&self) -> &FlopsModel {
        &self.flops_model
    }

    /// One pre-norm block: attention sublayer (or its skip path) then FFN.
    pub fn block_forward(
        &mut self,
        layer: usize,
        seq: usize,
        step: usize,
        hidden: &[f32],
        mode: BlockMode,
        phase: Phase,
    ) -> Result<BlockOutput> {
        let model = self.model;
        let cfg = model.config();
        if layer >= cfg.n_layers {
            return Err(Error::Precondition(format!("layer {layer} >= n_layers {}", cfg.n_layers)));
        }
        let x = model.pre_attention_norm(layer, hidden);
        let (k, v) = model.project_kv(layer, &x);
        self.record(layer, seq, step, &x, &k, &v, phase)?;

        let in_scope = self.filter.in_scope(layer);
        let consult = phase == Phase::Decode
            && in_scope
            && matches!(mode, BlockMode::Dense | BlockMode::Filtered);
        let mut decision = None;
        let skip = match phase {
            Phase::Prefill => {
                if in_scope {
                    self.filter.observe(layer, seq, &k, &v)?;
                }
                false
            }
            Phase::Decode if consult => {
                let d = self.filter.evaluate(layer, seq, &k, &v, mode == BlockMode::Filtered)?;
                let skip = d.skip;
                decision = Some(d);
                skip
            }
            Phase::Decode => mode == BlockMode::ForcedSkip,
        };

        let cache = &mut self.caches[seq];
        let cache_len = cache.len(layer) + 1;
        let mut attn_flops = 0;
        let after_attention = if skip {
            if self.prune.cache_on_skip == CacheOnSkip::Keep {
                cache.append(layer, &k, &v)?;
            }
            hidden.to_vec()
        } else {
            cache.append(layer, &k, &v)?;
            let attn = model.attention_forward(layer, &x, cache, &mut attn_flops)?;
            hidden.iter().zip(&attn).map(|(h, a)| h + a).collect()
        };
        let ffn = model.ffn(layer, &after_attention);
        let out: Vec<f32> = after_attention.iter().zip(&ffn).map(|(h, f)| h + f).collect();

        let report = (phase == Phase::Decode).then(|| {
            let fm = &self.flops_model;
            let overhead = if consult { fm.filter_overhead_flops } else { 0 };
            let saved = fm.flops_saved(skip, cache_len, consult);
            self.ledger.dense += fm.attention_flops(cache_len) + overhead;
            self.ledger.executed += attn_flops + overhead;
            self.ledger.overhead += overhead;
            self.ledger.saved += saved;
            StepReport {
                seq,
                step,
                layer,
                in_scope,
                score: decision.as_ref().map(|d| d.score),
                tau: decision.as_ref().map(|d| d.tau),
                step_index: decision.as_ref().map(|d| d.step_index),
                shadow: decision.as_ref().is_some_and(|d| d.shadow),
                would_skip: decision.as_ref().is_some_and(|d| d.would_skip),
                skipped: skip,
                degenerate: decision.as_ref().is_some_and(|d| d.degenerate),
                cache_len,
                flops_saved: saved,
            }
        });
        if let Some(d) = decision {
            self.pending[layer].push(d);
        }
        Ok(BlockOutput {
            hidden: out,
            after_attention,
            skipped: skip,
            report,
        })
    }

    /// Step barrier for `layer`: folds every pending decision into the
    /// layer's controller.
    pub fn commit_layer(&mut self, layer: usize) -> Result<()> {
        let pending = std::mem::take(&mut self.pending[layer]);
        if pending.is_empty() {
            return Ok(());
        }
        self.filter.commit(layer, &pending)
    }

    #[allow(clippy::too_many_arguments)]
    fn record(&mut self, layer: usize, seq: usize, step: usize, x: &[f32], k: &Heads, v: &Heads, phase: Phase) -> Result<()> {
        let Some(rec) = self.recorder.as_mut() else {
            return Ok(());
        };
        let mut scratch = 0;
        let q = self.model.project_q(layer, x, &mut scratch);
        rec.caches[seq].append(layer, k, v)?;
        let attn = self.model.attention_weights(layer, &q, &rec.caches[seq], &mut scratch);
        rec.events.push(TraceEvent {
            seq,
            step,
            layer,
            prefill: phase == Phase::Prefill,
            k: k.clone(),
            v: v.clone(),
            q: Some(q),
            attn: Some(attn),
        });
        Ok(())
    }

    fn forward_token(&mut self, seq: usize, token: u32, pos: usize, mode: BlockMode, phase: Phase) -> Result<(Vec<f32>, Vec<StepReport>)> {
        let mut h = self.model.embed(token, pos)?;
        let mut reports = Vec::new();
        for layer in 0..self.model.config().n_layers {
            let out = self.block_forward(layer, seq, pos, &h, mode, phase)?;
            reports.extend(out.report);
            h = out.hidden;
        }
        Ok((h, reports))
    }

    /// Greedy generation of `n_steps` tokens per sequence.
    ///
    /// Prompt tokens run as prefill (anchors observe them, nothing is
    /// skipped); the first generated token comes from the last prompt
    /// position and each further token from one decode step.
    pub fn decode(&mut self, prompts: &[Vec<u32>], n_steps: usize, mode: BlockMode) -> Result<DecodeOutput> {
        let cfg = *self.model.config();
        if prompts.len() != self.caches.len() {
            return Err(Error::Precondition(format!(
                "{} prompts for a session of {} sequences",
                prompts.len(),
                self.caches.len()
            )));
        }
        for p in prompts {
            if p.is_empty() {
                return Err(Error::Precondition("empty prompt".into()));
            }
            if p.len() + n_steps > cfg.max_seq {
                return Err(Error::SequenceLength {
                    cached: p.len() + n_steps,
                    max_seq: cfg.max_seq,
                });
            }
        }
        let mut tokens: Vec<Vec<u32>> = prompts.to_vec();
        let mut reports = Vec::new();
        if n_steps > 0 {
            let mut hidden = Vec::with_capacity(prompts.len());
            for (seq, prompt) in prompts.iter().enumerate() {
                let mut last = Vec::new();
                for (pos, &t) in prompt.iter().enumerate() {
                    last = self.forward_token(seq, t, pos, mode, Phase::Prefill)?.0;
                }
                tokens[seq].push(self.model.greedy_token(&last));
                hidden.push(last);
            }
            for _ in 1..n_steps {
                for (seq, h) in hidden.iter_mut().enumerate() {
                    let pos = tokens[seq].len() - 1;
                    *h = self.model.embed(tokens[seq][pos], pos)?;
                }
                for layer in 0..cfg.n_layers {
                    for (seq, h) in hidden.iter_mut().enumerate() {
                        let pos = tokens[seq].len() - 1;
                        let out = self.block_forward(layer, seq, pos, h, mode, Phase::Decode)?;
                        reports.extend(out.report);
                        *h = out.hidden;
                    }
                    self.commit_layer(layer)?;
                }
                for (seq, h) in hidden.iter().enumerate() {
                    tokens[seq].push(self.model.greedy_token(h));
                }
            }
        }
        reports.sort_by_key(|r| (r.seq, r.step, r.layer));
        let trace = self.take_trace(prompts, n_steps);
        Ok(DecodeOutput {
            tokens,
            reports,
            ledger: self.ledger,
            trace,
        })
    }

    fn take_trace(&mut self, prompts: &[Vec<u32>], n_steps: usize) -> Option<Trace> {
        let rec = self.recorder.as_mut()?;
        let cfg = self.model.config();
        let positions = if n_steps == 0 {
            0
        } else {
            prompts.iter().map(|p| p.len() + n_steps - 1).max().unwrap_or(0)
        };
        let mut params = BTreeMap::new();
        params.insert("model_seed".to_string(), cfg.seed.to_string());
        params.insert("prompt_len".to_string(), prompts[0].len().to_string());
        let mut trace = Trace::new(TraceHeader {
            format_version: TRACE_FORMAT_VERSION,
            n_layers: cfg.n_layers,
            n_heads: cfg.n_heads,
            d_head: cfg.d_head,
            n_seqs: prompts.len(),
            n_steps: positions,
            source: TraceSource::ToyModel,
            generator_params: params,
        });
        trace.events = std::mem::take(&mut rec.events);
        trace.sort_events();
        Some(trace)
    }
}

/// Convenience wrapper: one session, one call.
pub fn decode(
    model: &Model,
    prune: &PruneConfig,
    prompts: &[Vec<u32>],
    n_steps: usize,
    mode: BlockMode,
    record: bool,
) -> Result<DecodeOutput> {
    let mut session = Session::new(model, prune, prompts.len(), record)?;
    session.decode(prompts, n_steps, mode)
}
