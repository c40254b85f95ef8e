//! NDJSON trace format.
//!
//! The first line is a header object (`"kind": "header"`), every following
//! line is an event (`"kind": "event"`) ordered by `(seq, step, layer)`.
//! `attn`, when present, holds one row per head over positions `0..=step`.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRACE_FORMAT_VERSION: u32 = 1;

/// Tolerance on attention-row normalization.
pub const ATTN_SUM_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceSource {
    ToyModel,
    Synthetic,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format_version: u32,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    #[serde(default = "one")]
    pub n_seqs: usize,
    /// Token positions per sequence.
    pub n_steps: usize,
    pub source: TraceSource,
    #[serde(default)]
    pub generator_params: BTreeMap<String, String>,
}

fn one() -> usize {
    1
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: usize,
    pub step: usize,
    pub layer: usize,
    /// Prompt token: observed by the filter but never a decision.
    #[serde(default, skip_serializing_if = "is_false")]
    pub prefill: bool,
    pub k: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    /// Per-head query, when available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<Vec<f32>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attn: Option<Vec<Vec<f32>>>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line {
    Header(TraceHeader),
    Event(TraceEvent),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn new(header: TraceHeader) -> Self {
        Trace {
            header,
            events: Vec::new(),
        }
    }

    pub fn sort_events(&mut self) {
        self.events.sort_by_key(|e| (e.seq, e.step, e.layer));
    }

    pub fn has_attention(&self) -> bool {
        !self.events.is_empty() && self.events.iter().all(|e| e.attn.is_some())
    }

    /// Checks dimensions, ordering and attention-row normalization.
    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        let err = |i: usize, reason: String| Error::Trace {
            line: i + 2,
            reason,
        };
        let mut prev: Option<(usize, usize, usize)> = None;
        for (i, e) in self.events.iter().enumerate() {
            let key = (e.seq, e.step, e.layer);
            if prev.is_some_and(|p| p >= key) {
                return Err(err(i, format!("event {key:?} out of (seq, step, layer) order")));
            }
            prev = Some(key);
            if e.layer >= h.n_layers || e.seq >= h.n_seqs || e.step >= h.n_steps {
                return Err(err(i, format!("event {key:?} outside header dimensions")));
            }
            for (name, heads) in [("k", Some(&e.k)), ("v", Some(&e.v)), ("q", e.q.as_ref())] {
                let Some(heads) = heads else { continue };
                if heads.len() != h.n_heads || heads.iter().any(|x| x.len() != h.d_head) {
                    return Err(err(i, format!("`{name}` must be {} x {}", h.n_heads, h.d_head)));
                }
                if heads.iter().flatten().any(|x| !x.is_finite()) {
                    return Err(err(i, format!("`{name}` has non-finite entries")));
                }
            }
            if let Some(rows) = &e.attn {
                if rows.len() != h.n_heads {
                    return Err(err(i, format!("`attn` must have {} rows", h.n_heads)));
                }
                for row in rows {
                    if row.len() != e.step + 1 {
                        return Err(err(i, format!("`attn` rows must span {} positions", e.step + 1)));
                    }
                    if row.iter().any(|&p| p.is_nan() || p < 0.0) {
                        return Err(err(i, "`attn` has negative entries".into()));
                    }
                    let s: f64 = row.iter().map(|&p| f64::from(p)).sum();
                    if (s - 1.0).abs() > ATTN_SUM_TOL {
                        return Err(err(i, format!("`attn` row sums to {s}")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn write_ndjson<W: Write>(&self, mut w: W) -> Result<()> {
        let to_io = |e: serde_json::Error| Error::Io(e.into());
        serde_json::to_writer(&mut w, &Line::Header(self.header.clone())).map_err(to_io)?;
        w.write_all(b"\n")?;
        for e in &self.events {
            // Avoid cloning the (large) event: serialize through a borrowed wrapper.
            serde_json::to_writer(&mut w, &EventRef::Event(e)).map_err(to_io)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_ndjson<R: BufRead>(r: R) -> Result<Trace> {
        let mut header = None;
        let mut events = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::Trace {
                line: lineno,
                reason: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(&line).map_err(|e| Error::Trace {
                line: lineno,
                reason: e.to_string(),
            })?;
            match (parsed, header.is_some()) {
                (Line::Header(h), false) => {
                    if h.format_version != TRACE_FORMAT_VERSION {
                        return Err(Error::Trace {
                            line: lineno,
                            reason: format!("unsupported format_version {}", h.format_version),
                        });
                    }
                    header = Some(h);
                }
                (Line::Event(e), true) => events.push(e),
                (Line::Header(_), true) => {
                    return Err(Error::Trace { line: lineno, reason: "duplicate header".into() })
                }
                (Line::Event(_), false) => {
                    return Err(Error::Trace { line: lineno, reason: "event before header".into() })
                }
            }
        }
        let header = header.ok_or(Error::Trace { line: 1, reason: "missing header".into() })?;
        let trace = Trace { header, events };
        trace.validate()?;
        Ok(trace)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_ndjson(std::io::BufWriter::new(f))
    }

    pub fn load(path: &std::path::Path) -> Result<Trace> {
        let f = std::fs::File::open(path)?;
        Trace::read_ndjson(std::io::BufReader::new(f))
    }
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum EventRef<'a> {
    Event(&'a TraceEvent),
}
