//! Per-decision telemetry and its NDJSON stream format.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::SimilarityScore;

/// One (sequence, step, layer) decode decision.
///
/// Layers outside the pruning scope still produce a report (so global ratios
/// count them) but carry no score or threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub seq: usize,
    /// Token position within the sequence.
    pub step: usize,
    pub layer: usize,
    pub in_scope: bool,
    #[serde(flatten, default, skip_serializing_if = "Option::is_none")]
    pub score: Option<SimilarityScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    /// The layer's decode-step counter when the decision was taken.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_index: Option<u64>,
    pub shadow: bool,
    pub would_skip: bool,
    pub skipped: bool,
    #[serde(default)]
    pub degenerate: bool,
    /// Number of positions the token's attention would span.
    pub cache_len: usize,
    pub flops_saved: i64,
}

impl StepReport {
    pub fn s_kv(&self) -> Option<f64> {
        self.score.map(|s| s.s_kv)
    }
}

pub fn write_ndjson<W: Write>(mut w: W, reports: &[StepReport]) -> Result<()> {
    for r in reports {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Io(e.into()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ndjson<R: BufRead>(r: R) -> Result<Vec<StepReport>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rep = serde_json::from_str(&line).map_err(|e| Error::Trace {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(rep);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(score: Option<SimilarityScore>) -> StepReport {
        StepReport {
            seq: 0,
            step: 7,
            layer: 3,
            in_scope: score.is_some(),
            score,
            tau: score.map(|_| 0.82),
            step_index: score.map(|_| 4),
            shadow: false,
            would_skip: true,
            skipped: true,
            degenerate: false,
            cache_len: 8,
            flops_saved: 1234,
        }
    }

    #[test]
    fn ndjson_round_trip_with_and_without_score() {
        let score = SimilarityScore { s_k: 0.9, s_v: 0.8, var_k: 0.01, var_v: 0.02, alpha: 0.66, s_kv: 0.87 };
        let reports = vec![sample(Some(score)), sample(None)];
        let mut buf = Vec::new();
        write_ndjson(&mut buf, &reports).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let first = text.lines().next().unwrap();
        for key in ["\"seq\"", "\"step\"", "\"layer\"", "\"s_k\"", "\"s_v\"", "\"var_k\"", "\"var_v\"", "\"alpha\"", "\"s_kv\"", "\"tau\"", "\"shadow\"", "\"skipped\"", "\"flops_saved\""] {
            assert!(first.contains(key), "missing {key} in {first}");
        }
        assert!(!text.lines().nth(1).unwrap().contains("s_kv"));
        assert_eq!(read_ndjson(&buf[..]).unwrap(), reports);
    }

    #[test]
    fn malformed_line_reports_position() {
        let err = read_ndjson("\n{not json}\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Trace { line: 2, .. }));
    }
}
