//! Cartesian policy grids over one trace.

use std::path::PathBuf;

use tokfilter::trace::{replay, ReplayOptions, Trace};

use crate::args::PruneArgs;
use crate::{output, UsageError};

#[derive(clap::Args)]
pub struct SweepArgs {
    #[arg(long, value_name = "PATH")]
    pub trace: PathBuf,
    /// Axes as `key=v1,v2;key=v1,...` over pruning config keys.
    #[arg(long)]
    pub grid: String,
    /// Output CSV; stdout when omitted.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Largest accepted number of grid cells.
    #[arg(long, default_value_t = 1000)]
    pub max_cells: usize,
    /// Base policy the grid overrides.
    #[command(flatten)]
    pub prune: PruneArgs,
}

pub type Grid = Vec<(String, Vec<String>)>;

pub fn parse_grid(text: &str) -> Result<Grid, UsageError> {
    let mut axes: Grid = Vec::new();
    for part in text.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (key, values) = part
            .split_once('=')
            .ok_or_else(|| UsageError(format!("grid: expected `key=values`, got `{part}`")))?;
        let key = key.trim();
        let key = if key == "Y" || key == "y" { "tail_fraction" } else { key };
        if !tokfilter::PruneConfig::KEYS.contains(&key) {
            return Err(UsageError(format!("grid: unknown key `{key}`")));
        }
        if axes.iter().any(|(k, _)| k == key) {
            return Err(UsageError(format!("grid: key `{key}` given twice")));
        }
        let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
        if values.iter().any(String::is_empty) {
            return Err(UsageError(format!("grid: empty value in `{part}`")));
        }
        // Type-check each value against the default config.
        for v in &values {
            tokfilter::PruneConfig::default()
                .set(key, v)
                .map_err(|_| UsageError(format!("grid: bad value `{v}` for `{key}`")))?;
        }
        axes.push((key.to_string(), values));
    }
    if axes.is_empty() {
        return Err(UsageError("grid: no axes".into()));
    }
    Ok(axes)
}

/// Every combination, first axis varying slowest.
pub fn cells(grid: &Grid) -> Vec<Vec<&str>> {
    let mut out: Vec<Vec<&str>> = vec![Vec::new()];
    for (_, values) in grid {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                values.iter().map(move |v| {
                    let mut c = prefix.clone();
                    c.push(v.as_str());
                    c
                })
            })
            .collect();
    }
    out
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn run(a: &SweepArgs) -> anyhow::Result<()> {
    let grid = parse_grid(&a.grid)?;
    let size: usize = grid.iter().map(|(_, v)| v.len()).product();
    if size > a.max_cells {
        return Err(UsageError(format!("grid has {size} cells, above --max-cells {}", a.max_cells)).into());
    }
    let base = a.prune.unvalidated()?;
    let trace = Trace::load(&a.trace)?;

    let mut csv = csv::Writer::from_writer(output(a.out.as_deref())?);
    let mut header = vec!["cell".to_string()];
    header.extend(grid.iter().map(|(k, _)| k.clone()));
    header.extend(
        ["status", "eligible", "skipped", "skip_ratio", "mean_s_kv", "mean_alpha", "mass_lost", "flops_saved"]
            .map(String::from),
    );
    csv.write_record(&header)?;
    for (i, cell) in cells(&grid).into_iter().enumerate() {
        let mut cfg = base.clone();
        for ((key, _), value) in grid.iter().zip(&cell) {
            cfg.set(key, value)?;
        }
        let mut row = vec![i.to_string()];
        row.extend(cell.iter().map(|v| v.to_string()));
        match cfg.validate() {
            Err(e) => {
                row.push(format!("invalid: {e}"));
                row.extend(std::iter::repeat_n(String::new(), 7));
            }
            Ok(()) => {
                let g = replay(&trace, &cfg, ReplayOptions::default())?.summary.global;
                row.extend([
                    "ok".to_string(),
                    g.eligible.to_string(),
                    g.skipped.to_string(),
                    g.skip_ratio.to_string(),
                    opt(g.mean_s_kv),
                    opt(g.mean_alpha),
                    opt(g.mass_lost),
                    g.flops_saved.to_string(),
                ]);
            }
        }
        csv.write_record(&row)?;
    }
    csv.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_the_documented_grid() {
        let g = parse_grid("Y=0.4,0.5,0.6;gamma=0.8,0.9,0.95;p_global=0.2,0.33,0.5;focus=tail,head,uniform;fusion=kv,key_only,value_only").unwrap();
        assert_eq!(g.len(), 5);
        assert_eq!(g[0].0, "tail_fraction");
        assert_eq!(cells(&g).len(), 243);
    }

    #[test]
    fn cells_vary_last_axis_fastest() {
        let g = parse_grid("gamma=0.8,0.9;focus=tail,head").unwrap();
        let c = cells(&g);
        assert_eq!(c, vec![vec!["0.8", "tail"], vec!["0.8", "head"], vec!["0.9", "tail"], vec!["0.9", "head"]]);
    }

    #[test]
    fn rejects_bad_tokens() {
        for bad in ["gamma", "bogus=1", "gamma=0.9,", "focus=sideways", "gamma=1;gamma=2", ""] {
            assert!(parse_grid(bad).is_err(), "{bad}");
        }
    }
}
