//! `tokfilter` command-line driver.
//!
//! Exit status: 0 on success, 2 for configuration or usage errors, 1 for
//! runtime failures.

mod args;
mod report;
mod sweep;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use tokfilter::metrics::aggregate::aggregate;
use tokfilter::metrics::correlation::correlation_with_mass;
use tokfilter::metrics::mass::{attention_mass_lost, FutureMass};
use tokfilter::trace::{replay, synthesize, Pattern, ReplayOptions, SynthParams, Trace};
use tokfilter::transformer::{BlockMode, Session};
use tokfilter::Model;

use args::{ModelArgs, PruneArgs};

/// Error that maps to exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "tokfilter", version, about = "Token filtering for attention skipping: generate, synthesize, replay, sweep, report")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Greedy decoding on the toy model.
    Generate(GenerateArgs),
    /// Write a synthetic K/V trace.
    Synth(SynthArgs),
    /// Run a pruning policy over a recorded or synthetic trace.
    Replay(ReplayArgs),
    /// Replay a trace over a grid of policies.
    Sweep(sweep::SweepArgs),
    /// Merge CSV outputs into one comparison table.
    Report(report::ReportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Dense,
    Filtered,
}

#[derive(clap::Args)]
struct GenerateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    prune: PruneArgs,
    /// Prompt text; each UTF-8 byte is one token.
    #[arg(long, default_value = "Hello, world")]
    prompt_bytes: String,
    /// Tokens to generate.
    #[arg(long, default_value_t = 32)]
    steps: usize,
    #[arg(long, value_enum, default_value_t = Mode::Filtered)]
    mode: Mode,
    /// Write the dense ground-truth trace (NDJSON) here.
    #[arg(long, value_name = "PATH")]
    record: Option<PathBuf>,
    /// Write per-decision reports (NDJSON) here.
    #[arg(long, value_name = "PATH")]
    report: Option<PathBuf>,
    /// Write the per-layer summary CSV here instead of stdout.
    #[arg(long, value_name = "PATH")]
    summary: Option<PathBuf>,
}

#[derive(clap::Args)]
struct SynthArgs {
    /// repetitive | random | depth_concentrated
    #[arg(long)]
    pattern: Pattern,
    #[arg(long, default_value_t = 8)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 16)]
    d_head: usize,
    #[arg(long, default_value_t = 256)]
    steps: usize,
    #[arg(long, default_value_t = 1)]
    seqs: usize,
    #[arg(long, default_value_t = 1)]
    prefill: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    dictionary: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    repeat_prob: Option<f64>,
    #[arg(long)]
    salient_fraction: Option<f64>,
    #[arg(long)]
    salient_scale: Option<f64>,
    #[arg(long)]
    filler_scale: Option<f64>,
    #[arg(long)]
    layer_jitter: Option<f64>,
    #[arg(long)]
    t0: Option<f64>,
    #[arg(long)]
    decay: Option<f64>,
    #[arg(long)]
    query_scale: Option<f64>,
    #[arg(long)]
    key_noise: Option<f64>,
    #[arg(long)]
    value_noise: Option<f64>,
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct ReplayArgs {
    #[arg(long, value_name = "PATH")]
    trace: PathBuf,
    #[command(flatten)]
    prune: PruneArgs,
    /// Score every token but enact no skip.
    #[arg(long)]
    dense: bool,
    /// Write per-decision reports (NDJSON) here.
    #[arg(long, value_name = "PATH")]
    reports: Option<PathBuf>,
    /// Write the per-layer summary CSV here instead of stdout.
    #[arg(long, value_name = "PATH")]
    summary: Option<PathBuf>,
    /// Write per-(layer, head) similarity/attention correlations here.
    #[arg(long, value_name = "PATH")]
    correlation: Option<PathBuf>,
    /// Recompute attention rows from recorded queries and report the
    /// largest deviation; fails if it exceeds 1e-5.
    #[arg(long)]
    verify_attention: bool,
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

/// `path` or stdout.
fn output(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn generate(a: &GenerateArgs) -> anyhow::Result<()> {
    let model_cfg = a.model.resolve()?;
    let prune = a.prune.resolve()?;
    let prompt: Vec<u32> = a.prompt_bytes.bytes().map(u32::from).collect();
    if prompt.is_empty() {
        return Err(UsageError("--prompt-bytes must not be empty".into()).into());
    }
    if let Some(t) = prompt.iter().find(|&&t| t as usize >= model_cfg.vocab_size) {
        return Err(UsageError(format!("prompt byte {t} is outside vocab_size {}", model_cfg.vocab_size)).into());
    }
    let model = Model::new(model_cfg)?;
    let mut session = Session::new(&model, &prune, 1, a.record.is_some())?;
    let mode = match a.mode {
        Mode::Dense => BlockMode::Dense,
        Mode::Filtered => BlockMode::Filtered,
    };
    let out = session.decode(&[prompt], a.steps, mode)?;

    let mass = match &out.trace {
        Some(trace) => {
            trace.save(a.record.as_deref().expect("recording implies a path"))?;
            let fm = FutureMass::from_trace(trace)?;
            Some(attention_mass_lost(&out.reports, &fm, model_cfg.n_layers)?)
        }
        None => None,
    };
    if let Some(path) = &a.report {
        tokfilter::report::write_ndjson(create(path)?, &out.reports)?;
    }
    let summary = aggregate(&out.reports, model_cfg.n_layers, mass.as_ref());
    if a.summary.is_some() {
        summary.write_csv(output(a.summary.as_deref())?)?;
    }
    let tokens: Vec<String> = out.tokens[0].iter().map(u32::to_string).collect();
    let mut stdout = io::stdout().lock();
    writeln!(stdout, "{}", tokens.join(" "))?;
    if a.summary.is_none() {
        summary.write_csv(&mut stdout)?;
    }
    let l = out.ledger;
    eprintln!(
        "flops: dense {} executed {} saved {} overhead {}",
        l.dense, l.executed, l.saved, l.overhead
    );
    Ok(())
}

fn synth(a: &SynthArgs) -> anyhow::Result<()> {
    let d = SynthParams::default();
    let p = SynthParams {
        pattern: a.pattern,
        n_layers: a.layers,
        n_heads: a.heads,
        d_head: a.d_head,
        n_seqs: a.seqs,
        n_steps: a.steps,
        prefill: a.prefill,
        seed: a.seed,
        dictionary: a.dictionary.unwrap_or(d.dictionary),
        noise: a.noise.unwrap_or(d.noise),
        repeat_prob: a.repeat_prob.unwrap_or(d.repeat_prob),
        salient_fraction: a.salient_fraction.unwrap_or(d.salient_fraction),
        salient_scale: a.salient_scale.unwrap_or(d.salient_scale),
        filler_scale: a.filler_scale.unwrap_or(d.filler_scale),
        layer_jitter: a.layer_jitter.unwrap_or(d.layer_jitter),
        t0: a.t0.unwrap_or(d.t0),
        decay: a.decay.unwrap_or(d.decay),
        query_scale: a.query_scale,
        key_noise: a.key_noise.unwrap_or(d.key_noise),
        value_noise: a.value_noise.unwrap_or(d.value_noise),
    };
    synthesize(&p)?.save(&a.out)?;
    Ok(())
}

fn replay_cmd(a: &ReplayArgs) -> anyhow::Result<()> {
    let cfg = a.prune.resolve()?;
    let trace = Trace::load(&a.trace)?;
    let opts = ReplayOptions {
        enact: !a.dense,
        verify_attention: a.verify_attention,
    };
    let out = replay(&trace, &cfg, opts)?;
    if let Some(path) = &a.reports {
        tokfilter::report::write_ndjson(create(path)?, &out.reports)?;
    }
    if let Some(path) = &a.correlation {
        let fm = FutureMass::from_trace(&trace)?;
        correlation_with_mass(&fm, &out.reports)?.write_csv(create(path)?)?;
    }
    out.summary.write_csv(output(a.summary.as_deref())?)?;
    if a.verify_attention {
        match out.attention_max_error {
            Some(err) if err <= tokfilter::trace::ATTN_SUM_TOL => eprintln!("attention rows verified: max error {err:e}"),
            Some(err) => anyhow::bail!("recorded attention deviates from recomputed rows by {err:e}"),
            None => anyhow::bail!("trace has no recorded queries to verify against"),
        }
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate(a) => generate(&a),
        Command::Synth(a) => synth(&a),
        Command::Replay(a) => replay_cmd(&a),
        Command::Sweep(a) => sweep::run(&a),
        Command::Report(a) => report::run(&a),
    }
}

fn exit_status(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<tokfilter::Error>() {
            return if e.is_config() { 2 } else { 1 };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_status(&err))
        }
    }
}
