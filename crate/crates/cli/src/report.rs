//! Merging CSV outputs of several runs.

use std::path::{Path, PathBuf};

use crate::{output, UsageError};

#[derive(clap::Args)]
pub struct ReportArgs {
    /// CSV files with identical headers.
    #[arg(long, num_args = 1.., required = true, value_name = "CSV")]
    pub inputs: Vec<PathBuf>,
    /// Merged table; stdout when omitted.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Long-format table (`source,row,key,metric,value`).
    #[arg(long, value_name = "PATH")]
    pub long: Option<PathBuf>,
}

/// Columns that identify a row rather than measure it.
const ID_COLUMNS: &[&str] = &["source", "cell", "layer", "head", "seq", "step", "status"];

pub struct Table {
    pub source: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

pub fn read_table(path: &Path) -> anyhow::Result<Table> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
    let bad = |e: csv::Error| {
        let line = e.position().map(|p| p.line()).unwrap_or(0);
        UsageError(format!("{}: malformed CSV at line {line}: {e}", path.display()))
    };
    let header: Vec<String> = reader.headers().map_err(bad)?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in reader.records() {
        rows.push(rec.map_err(bad)?.iter().map(String::from).collect());
    }
    let source = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(Table { source, header, rows })
}

/// One input passes through unchanged; several inputs are stacked under a
/// leading `source` column naming each file.
pub fn merge(tables: &[Table]) -> Result<(Vec<String>, Vec<Vec<String>>), UsageError> {
    let first = &tables[0];
    for t in &tables[1..] {
        if t.header != first.header {
            return Err(UsageError(format!(
                "schema mismatch: `{}` has columns [{}], `{}` has [{}]",
                t.source,
                t.header.join(","),
                first.source,
                first.header.join(",")
            )));
        }
    }
    if tables.len() == 1 {
        return Ok((first.header.clone(), first.rows.clone()));
    }
    let mut header = vec!["source".to_string()];
    header.extend(first.header.iter().cloned());
    let rows = tables
        .iter()
        .flat_map(|t| {
            t.rows.iter().map(|r| {
                let mut row = vec![t.source.clone()];
                row.extend(r.iter().cloned());
                row
            })
        })
        .collect();
    Ok((header, rows))
}

/// Plot-ready rows: every numeric, non-identifier cell becomes
/// `(source, row, key, metric, value)`, where `key` joins the identifier
/// columns as `name=value` pairs.
pub fn long_format(tables: &[Table]) -> Vec<[String; 5]> {
    let mut out = Vec::new();
    for t in tables {
        let ids: Vec<usize> = (0..t.header.len())
            .filter(|&c| {
                ID_COLUMNS.contains(&t.header[c].as_str())
                    || t.rows.iter().any(|r| !r[c].is_empty() && r[c].parse::<f64>().is_err())
            })
            .collect();
        for (i, r) in t.rows.iter().enumerate() {
            let key = ids.iter().map(|&c| format!("{}={}", t.header[c], r[c])).collect::<Vec<_>>().join(";");
            for (c, value) in r.iter().enumerate() {
                if ids.contains(&c) || value.is_empty() {
                    continue;
                }
                out.push([t.source.clone(), i.to_string(), key.clone(), t.header[c].clone(), value.clone()]);
            }
        }
    }
    out
}

pub fn run(a: &ReportArgs) -> anyhow::Result<()> {
    let tables = a.inputs.iter().map(|p| read_table(p)).collect::<anyhow::Result<Vec<_>>>()?;
    let (header, rows) = merge(&tables)?;
    let mut w = csv::Writer::from_writer(output(a.out.as_deref())?);
    w.write_record(&header)?;
    for r in &rows {
        w.write_record(r)?;
    }
    w.flush()?;
    if let Some(path) = &a.long {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["source", "row", "key", "metric", "value"])?;
        for r in long_format(&tables) {
            w.write_record(&r)?;
        }
        w.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(source: &str, header: &[&str], rows: &[&[&str]]) -> Table {
        Table {
            source: source.into(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: rows.iter().map(|r| r.iter().map(|s| s.to_string()).collect()).collect(),
        }
    }

    #[test]
    fn single_input_is_identity() {
        let t = table("a", &["layer", "skip_ratio"], &[&["0", "0.5"]]);
        let (h, rows) = merge(std::slice::from_ref(&t)).unwrap();
        assert_eq!(h, t.header);
        assert_eq!(rows, t.rows);
    }

    #[test]
    fn two_inputs_gain_source_column() {
        let a = table("tail", &["layer", "mass_lost"], &[&["all", "0.1"]]);
        let b = table("head", &["layer", "mass_lost"], &[&["all", "0.3"]]);
        let (h, rows) = merge(&[a, b]).unwrap();
        assert_eq!(h, vec!["source", "layer", "mass_lost"]);
        assert_eq!(rows[1], vec!["head", "all", "0.3"]);
    }

    #[test]
    fn mismatched_headers_are_rejected() {
        let a = table("a", &["layer", "x"], &[]);
        let b = table("b", &["layer", "y"], &[]);
        assert!(merge(&[a, b]).is_err());
    }

    #[test]
    fn long_format_splits_ids_and_metrics() {
        let t = table("run", &["cell", "focus", "skip_ratio", "mass_lost"], &[&["0", "tail", "0.25", ""]]);
        let long = long_format(&[t]);
        assert_eq!(long.len(), 1);
        assert_eq!(long[0], ["run", "0", "cell=0;focus=tail", "skip_ratio", "0.25"].map(String::from));
    }
}
