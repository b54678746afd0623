//! Command-line entry point.
//!
//! Flags override the config file, which overrides built-in defaults.
//! Exit codes: 0 success, 1 input error, 2 internal invariant violation.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use clap::Parser;
use kvfreeze_core::scheduler::schedule_table;
use kvfreeze_core::{
    replay, synth_trace, FrozenTier, MemoryTier, Model, ScaleMode, ScoreTrace, Session,
    StepMetrics, SynthKind,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chart::emit_chart;
use crate::config::{Mode, RunConfig};
use crate::error::Result;
use crate::metrics_file::{save_metrics, Summary};
use crate::passkey::run_passkey;
use crate::spill::SpillTier;
use crate::sweep::{format_table, run_sweep, SweepSource};
use crate::trace_file::{load_trace, save_trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Switch {
    On,
    Off,
}

/// `--top-k` value: a count or `all`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TopK(pub Option<usize>);

fn parse_top_k(s: &str) -> std::result::Result<TopK, String> {
    match s {
        "all" | "none" | "0" => Ok(TopK(None)),
        _ => s
            .parse()
            .map(|k| TopK(Some(k)))
            .map_err(|_| format!("invalid top-k {s:?}")),
    }
}

fn parse_history(s: &str) -> std::result::Result<u64, String> {
    match s {
        "inf" | "unbounded" => Ok(u64::MAX),
        _ => s
            .parse()
            .map_err(|_| format!("invalid history window {s:?}")),
    }
}

fn parse_scale(s: &str) -> std::result::Result<ScaleMode, String> {
    match s {
        "scaled" => Ok(ScaleMode::Scaled),
        "raw" => Ok(ScaleMode::Raw),
        _ => Err(format!("invalid scale mode {s:?}, expected scaled or raw")),
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "kvfreeze",
    version,
    about = "Soft-freeze KV-cache policy runner",
    allow_negative_numbers = true
)]
pub struct Cli {
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Generation steps, or synthetic trace length.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Sliding window of always-active recent tokens (K).
    #[arg(long)]
    pub window: Option<usize>,
    /// Relevance threshold; accepts inf and negative values.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Schedule divisor k in floor(sqrt(c)/k).
    #[arg(long)]
    pub softness: Option<f64>,
    /// Detection history window W, or inf.
    #[arg(long, value_parser = parse_history)]
    pub history_window: Option<u64>,
    /// Leading tokens that are never frozen.
    #[arg(long)]
    pub pinned: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Top-k cutoff, or all.
    #[arg(long, value_parser = parse_top_k)]
    pub top_k: Option<TopK>,
    #[arg(long)]
    pub top_p: Option<f64>,
    #[arg(long, value_enum)]
    pub recovery: Option<Switch>,
    /// Score trace to replay.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Metrics CSV output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// SVG chart output.
    #[arg(long)]
    pub svg: Option<PathBuf>,
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Largest count for schedule-table.
    #[arg(long)]
    pub max_c: Option<u64>,
    /// Synthetic trace for replay/sweep without --trace: stress, cold, needle, topic-shift.
    #[arg(long, value_parser = SynthKind::from_str)]
    pub synth: Option<SynthKind>,
    /// Writes the replayed or recorded score trace.
    #[arg(long)]
    pub emit_trace: Option<PathBuf>,
    #[arg(long)]
    pub prompt_len: Option<usize>,
    /// scaled or raw dot products in relevance scores.
    #[arg(long, value_parser = parse_scale)]
    pub scale_mode: Option<ScaleMode>,
    /// Keep frozen KV pairs in this file during generation.
    #[arg(long)]
    pub spill: Option<PathBuf>,
    /// Seed of the toy model's weights.
    #[arg(long)]
    pub model_seed: Option<u64>,
    /// Add wall-clock time to the metrics summary.
    #[arg(long)]
    pub timing: bool,
    #[arg(long, value_delimiter = ',')]
    pub grid_tau: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub grid_window: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub grid_softness: Vec<f64>,
    #[arg(long, value_delimiter = ',', value_parser = parse_history)]
    pub grid_history: Vec<u64>,
}

impl Cli {
    /// The effective configuration: file, then flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let r = &mut c.run;
        macro_rules! set {
            ($src:expr, $dst:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
        }
        set!(self.mode, r.mode);
        set!(self.steps, r.steps);
        set!(self.seed, r.seed);
        set!(self.max_c, r.max_c);
        set!(self.synth, r.synth);
        set!(self.prompt_len, r.prompt_len);
        if let Some(s) = self.recovery {
            r.recovery = s == Switch::On;
        }
        for (src, dst) in [
            (&self.trace, &mut r.trace),
            (&self.out, &mut r.out),
            (&self.svg, &mut r.svg),
            (&self.emit_trace, &mut r.emit_trace),
            (&self.spill, &mut r.spill),
        ] {
            if src.is_some() {
                dst.clone_from(src);
            }
        }
        r.timing |= self.timing;
        let p = &mut c.policy;
        set!(self.window, p.window_size);
        set!(self.tau, p.tau);
        set!(self.softness, p.softness);
        set!(self.history_window, p.history_window);
        set!(self.pinned, p.pinned_prefix);
        set!(self.scale_mode, p.scale_mode);
        set!(self.temperature, c.sampler.temperature);
        set!(self.top_p, c.sampler.top_p);
        if let Some(TopK(k)) = self.top_k {
            c.sampler.top_k = k;
        }
        set!(self.model_seed, c.model.seed);
        for (src, dst) in [
            (&self.grid_tau, &mut c.sweep.tau),
            (&self.grid_softness, &mut c.sweep.softness),
        ] {
            if !src.is_empty() {
                dst.clone_from(src);
            }
        }
        if !self.grid_window.is_empty() {
            c.sweep.window_size.clone_from(&self.grid_window);
        }
        if !self.grid_history.is_empty() {
            c.sweep.history_window.clone_from(&self.grid_history);
        }
        c.validate()?;
        Ok(c)
    }
}

/// The seeded prompt used by generate mode and generation sweeps.
pub fn default_prompt(cfg: &RunConfig) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
    rng.set_stream(1);
    let vocab = cfg.model.vocab_size as u32;
    (0..cfg.run.prompt_len)
        .map(|_| rng.random_range(0..vocab))
        .collect()
}

fn generate_with<T: FrozenTier>(
    cfg: &RunConfig,
    model: &Model,
    tier: T,
) -> Result<(Vec<StepMetrics>, Option<ScoreTrace>)> {
    let mut s = Session::with_tier(model, &default_prompt(cfg), cfg.session(), tier)?;
    if cfg.run.emit_trace.is_some() {
        s.record_scores();
    }
    let rows = (0..cfg.run.steps)
        .map(|_| s.advance())
        .collect::<kvfreeze_core::Result<Vec<_>>>()?;
    Ok((rows, s.recorded_trace()))
}

/// The trace replay and sweep operate on.
pub fn input_trace(cfg: &RunConfig) -> Result<ScoreTrace> {
    match &cfg.run.trace {
        Some(p) => load_trace(p),
        None => Ok(synth_trace(cfg.run.synth, cfg.run.steps, cfg.run.seed)),
    }
}

fn write_outputs(
    cfg: &RunConfig,
    rows: &[StepMetrics],
    summary: &Summary,
    title: &str,
) -> Result<()> {
    if let Some(p) = &cfg.run.out {
        save_metrics(p, rows, summary)?;
    }
    if let Some(p) = &cfg.run.svg {
        emit_chart(rows, title, p)?;
    }
    Ok(())
}

fn summary_text(s: &Summary, last: Option<&StepMetrics>) -> String {
    let mut out = String::new();
    if let Some(r) = last {
        out.push_str(&format!(
            "final_total={}\nfinal_active={}\n",
            r.total, r.active
        ));
    }
    out.push_str(&format!(
        "steps={}\nmean_compression={:.6}\nmax_compression={:.6}\nfinal_compression={:.6}\ntotal_freezes={}\ntotal_restores={}\nrecovery_actions={}\n",
        s.steps,
        s.mean_compression,
        s.max_compression,
        s.final_compression,
        s.total_freezes,
        s.total_restores,
        s.recovery_actions
    ));
    if let Some(t) = s.wall_clock_s {
        out.push_str(&format!("wall_clock_s={t:.3}\n"));
    }
    out
}

/// Runs the configured mode and returns what goes to stdout.
pub fn execute(cfg: &RunConfig) -> Result<String> {
    let started = Instant::now();
    let elapsed = |cfg: &RunConfig| cfg.run.timing.then(|| started.elapsed().as_secs_f64());
    match cfg.run.mode {
        Mode::ScheduleTable => {
            let mut out = String::from("c,d\n");
            for (c, d) in schedule_table(cfg.run.max_c, cfg.policy.softness) {
                out.push_str(&format!("{c},{d}\n"));
            }
            Ok(out)
        }
        Mode::Generate => {
            let model = Model::new(cfg.model)?;
            let (rows, trace) = match &cfg.run.spill {
                Some(p) => generate_with(cfg, &model, SpillTier::create(p, cfg.model.kv_shape())?)?,
                None => generate_with(cfg, &model, MemoryTier::default())?,
            };
            if let (Some(p), Some(t)) = (&cfg.run.emit_trace, &trace) {
                save_trace(p, t)?;
            }
            let summary = Summary::from_rows(&rows, elapsed(cfg));
            write_outputs(
                cfg,
                &rows,
                &summary,
                "Active KV cache size during generation",
            )?;
            Ok(summary_text(&summary, rows.last()))
        }
        Mode::Replay => {
            let trace = input_trace(cfg)?;
            if let Some(p) = &cfg.run.emit_trace {
                save_trace(p, &trace)?;
            }
            let stats = replay(&trace, &cfg.policy)?;
            let summary = Summary::from_rows(&stats.rows, elapsed(cfg));
            write_outputs(
                cfg,
                &stats.rows,
                &summary,
                "Active KV cache size during trace replay",
            )?;
            let mut out = summary_text(&summary, stats.rows.last());
            out.push_str(&format!("max_absence={}\n", stats.max_absence()));
            Ok(out)
        }
        Mode::Passkey => {
            let report = run_passkey(cfg)?;
            let summary = Summary::from_rows(&report.metrics, elapsed(cfg));
            write_outputs(
                cfg,
                &report.metrics,
                &summary,
                "Active KV cache size, passkey scenario",
            )?;
            Ok(format!("{report}\n"))
        }
        Mode::Sweep => {
            let rows = if cfg.sweep.generate {
                run_sweep(cfg, SweepSource::Generate)?
            } else {
                let trace = input_trace(cfg)?;
                run_sweep(cfg, SweepSource::Replay(&trace))?
            };
            Ok(format_table(&rows))
        }
    }
}

/// Parses `args` (program name first), runs, and returns the exit code.
pub fn run<O: Write, E: Write>(
    args: impl IntoIterator<Item = OsString>,
    out: &mut O,
    err: &mut E,
) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            let _ = writeln!(err, "{first}");
            return 1;
        }
    };
    match cli.resolve().and_then(|cfg| execute(&cfg)) {
        Ok(text) => {
            let _ = out.write_all(text.as_bytes());
            0
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_internal() {
                2
            } else {
                1
            }
        }
    }
}
