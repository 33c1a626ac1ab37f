//! Subcommands of the `catrec` binary. Each one is a plain function so the
//! integration tests can drive them without spawning processes.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use catrec::catalog::Catalog;
use catrec::corpus::{Sample, Split, Utterance};
use catrec::evaluation::{evaluate_random, EvalOptions, EvalReport, PreferenceSource};
use catrec::ingest::{ingest, load_data_dir, IngestOptions, CATALOG_FILE};
use catrec::model::{CheckpointMeta, Turn};
use catrec::scalar::{Dtype, Scalar};
use catrec::synthetic::{generate, SyntheticSpec};
use catrec::training::{run_training, TrainingConfig, TrainingOutcome};
use catrec::{AnyRecommender, Mode};
use catrec_service::{AppState, ServiceConfig};

#[derive(Debug, Parser)]
#[command(name = "catrec", version, about = "Explainable genre-preference movie recommender")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a small synthetic corpus (movies.csv + redial.jsonl).
    Synth(SynthArgs),
    /// Build catalog, splits and samples from corpus files.
    Ingest(IngestArgs),
    /// Train one mode and write a run directory.
    Train(TrainArgs),
    /// Score a checkpoint (or the random baseline) on a split.
    Evaluate(EvaluateArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Chat with a checkpoint in the terminal.
    Demo(DemoArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub conversations: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Corpus files split into train/validation/test.
    #[arg(long, required = true, num_args = 1..)]
    pub redial: Vec<PathBuf>,
    /// Corpus files kept whole as the test split.
    #[arg(long = "test-file", num_args = 1..)]
    pub test_files: Vec<PathBuf>,
    #[arg(long)]
    pub movielens: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Keep samples whose target is mentioned in the opening utterance.
    #[arg(long)]
    pub include_empty_history: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML training config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    /// Ingested data directory (overrides `data.dir`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Parent of the run directory (overrides `output.dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SourceArg {
    /// Whatever the checkpoint's mode implies.
    Auto,
    Model,
    GroundTruth,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Checkpoint directory; omit together with --random.
    #[arg(long, required_unless_present = "random")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    #[arg(long, value_enum, default_value_t = SourceArg::Auto)]
    pub source: SourceArg,
    /// Rank items already mentioned in the history last.
    #[arg(long)]
    pub exclude_mentioned: bool,
    /// Evaluate the uniform random scorer instead of a checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    pub random: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write `<out>.txt` and `<out>.kv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// TOML service config; flags and CATREC_* variables override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub catalog: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: catrec::Error| e.to_string())
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    s.parse().map_err(|e: catrec::Error| e.to_string())
}

pub fn run(cli: Cli) -> Result<()> {
    let stdout = std::io::stdout();
    match cli.command {
        Command::Synth(a) => synth(&a, &mut stdout.lock()),
        Command::Ingest(a) => ingest_cmd(&a, &mut stdout.lock()),
        Command::Train(a) => train(&a, &mut stdout.lock()).map(|_| ()),
        Command::Evaluate(a) => evaluate_cmd(&a, &mut stdout.lock()).map(|_| ()),
        Command::Serve(a) => serve(&a),
        Command::Demo(a) => {
            let model = load_model(&a.checkpoint, &a.catalog)?;
            demo(&model, a.k, std::io::stdin().lock(), &mut stdout.lock())
        }
    }
}

pub fn synth(a: &SynthArgs, out: &mut impl Write) -> Result<()> {
    let corpus = generate(&SyntheticSpec {
        conversations: a.conversations,
        seed: a.seed,
        ..SyntheticSpec::default()
    });
    let (movies, redial) = corpus.write_to(&a.out)?;
    writeln!(out, "wrote {} and {}", movies.display(), redial.display())?;
    Ok(())
}

pub fn ingest_cmd(a: &IngestArgs, out: &mut impl Write) -> Result<()> {
    let data = ingest(&IngestOptions {
        redial_files: a.redial.clone(),
        test_files: a.test_files.clone(),
        movielens: a.movielens.clone(),
        seed: a.seed,
        include_empty_history: a.include_empty_history,
    })?;
    data.write(&a.out)?;
    let r = &data.report;
    writeln!(out, "movielens rows loaded   {}", r.movielens.loaded)?;
    writeln!(out, "catalog items           {}", r.catalog.total)?;
    writeln!(out, "  without genres        {:.1}%", 100.0 * r.catalog.unmatched_fraction())?;
    writeln!(out, "conversations           {}", r.corpus.conversations)?;
    writeln!(out, "mentions                {}", r.corpus.mentions_total)?;
    for (split, n) in &r.samples.per_split {
        writeln!(out, "samples {split:<15} {n}")?;
    }
    writeln!(out, "written to {}", a.out.display())?;
    Ok(())
}

/// Trains and returns the run directory.
pub fn train(a: &TrainArgs, out: &mut impl Write) -> Result<PathBuf> {
    let mut cfg = match &a.config {
        Some(p) => TrainingConfig::load(p)?,
        None => TrainingConfig::default(),
    };
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    if let Some(d) = &a.data {
        cfg.data.dir = d.clone();
    }
    if let Some(o) = &a.out {
        cfg.output.dir = o.clone();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let (catalog, samples) = load_data_dir(&cfg.data.dir).with_context(|| format!("loading data from {}", cfg.data.dir.display()))?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let run_dir = cfg.output.dir.join(format!("{stamp}-{}-seed{}", cfg.mode, cfg.seed));
    std::fs::create_dir_all(&run_dir)?;
    std::fs::write(run_dir.join("config.toml"), cfg.to_toml_string())?;
    log::info!("training {} into {}", cfg.mode, run_dir.display());
    match Dtype::parse(&cfg.dtype) {
        Some(Dtype::F32) => train_as::<f32>(&cfg, &catalog, &samples, &run_dir, out)?,
        Some(Dtype::F64) => train_as::<f64>(&cfg, &catalog, &samples, &run_dir, out)?,
        None => bail!("unknown dtype {:?}", cfg.dtype),
    }
    writeln!(out, "run directory {}", run_dir.display())?;
    Ok(run_dir)
}

fn train_as<T: Scalar>(cfg: &TrainingConfig, catalog: &Catalog, samples: &[Sample], run_dir: &Path, out: &mut impl Write) -> Result<()> {
    let TrainingOutcome { model, stage1, reports } = run_training::<T>(cfg, catalog, samples)?;
    model.save(run_dir.join("model"))?;
    if let Some(s1) = stage1 {
        s1.save(run_dir.join("stage1"))?;
    }
    std::fs::write(run_dir.join("reports.json"), serde_json::to_string_pretty(&reports)? + "\n")?;
    for r in &reports {
        writeln!(
            out,
            "{:<8} {:>3} epochs, best epoch {:>3}, best val {} {:.4}, stopped by {:?}",
            r.stage,
            r.epochs.len(),
            r.best_epoch,
            r.loss,
            r.best_val_loss,
            r.stop_reason
        )?;
        for (k, v) in &r.metrics {
            writeln!(out, "         {k} {v:.2}")?;
        }
    }
    Ok(())
}

pub fn evaluate_cmd(a: &EvaluateArgs, out: &mut impl Write) -> Result<EvalReport> {
    let (catalog, samples) = load_data_dir(&a.data)?;
    let split: Vec<Sample> = samples.into_iter().filter(|s| s.split == a.split).collect();
    if split.is_empty() {
        bail!("no {} samples in {}", a.split.as_str(), a.data.display());
    }
    let opts = EvalOptions {
        exclude_mentioned: a.exclude_mentioned,
    };
    let mut report = if a.random {
        evaluate_random(&split, catalog.len(), a.seed, &opts, &|id| catalog.index_of(id))?
    } else {
        let dir = a.checkpoint.as_ref().expect("clap requires a checkpoint without --random");
        let model = AnyRecommender::load(dir, catalog)?;
        let source = match a.source {
            SourceArg::Auto => PreferenceSource::for_mode(model.mode()),
            SourceArg::Model => PreferenceSource::Model,
            SourceArg::GroundTruth => PreferenceSource::GroundTruth,
        };
        let mut r = model.evaluate(&split, source, &opts)?;
        r.metadata.insert("checkpoint".into(), dir.display().to_string());
        r
    };
    report.metadata.insert("split".into(), a.split.as_str().into());
    write!(out, "{}", report.to_table())?;
    if let Some(stem) = &a.out {
        report.write(stem)?;
    }
    Ok(report)
}

pub fn serve(a: &ServeArgs) -> Result<()> {
    let mut cfg = ServiceConfig::load(a.config.as_deref())?;
    if let Some(v) = &a.checkpoint {
        cfg.checkpoint = v.clone();
    }
    if let Some(v) = &a.catalog {
        cfg.catalog = v.clone();
    }
    if let Some(v) = &a.host {
        cfg.host = v.clone();
    }
    if let Some(v) = a.port {
        cfg.port = v;
    }
    if let Some(v) = a.k {
        cfg.k = v;
    }
    cfg.validate()?;
    let state = AppState::from_config(&cfg)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(catrec_service::serve(state, &cfg.host, cfg.port))?;
    Ok(())
}

/// A catalog path may name the file or the ingested data directory.
pub fn load_model(checkpoint: &Path, catalog: &Path) -> Result<AnyRecommender> {
    let file = if catalog.is_dir() { catalog.join(CATALOG_FILE) } else { catalog.to_path_buf() };
    let catalog = Catalog::load(&file)?;
    let meta = CheckpointMeta::read(checkpoint)?;
    if meta.encoder.is_none() {
        bail!("{} is an oracle checkpoint; it has no dialogue model to chat with", checkpoint.display());
    }
    Ok(AnyRecommender::load(checkpoint, catalog)?)
}

fn render_turn(turn: &Turn, out: &mut impl Write) -> std::io::Result<()> {
    let mut prefs: Vec<_> = turn.cat_pref.iter().collect();
    prefs.sort_by(|a, b| b.value.total_cmp(&a.value));
    for p in prefs.iter().take(5) {
        let bar = "#".repeat((p.value * 20.0).round() as usize);
        writeln!(out, "  {:<12} {:>3}% {bar}", p.category, catrec::explain::percent(p.value))?;
    }
    for (rank, r) in turn.top_k.iter().enumerate() {
        let year = r.year.map(|y| format!(" ({y})")).unwrap_or_default();
        writeln!(out, "  {:>2}. {}{year}  {:.4}", rank + 1, r.title, r.score)?;
    }
    writeln!(out, "  {}", turn.explanation)
}

/// Line-oriented chat loop. Plain lines are user messages; `/accept N`
/// records the N-th listed item as the system's suggestion, `/reset`
/// starts over, `/quit` ends.
pub fn demo(model: &AnyRecommender, k: usize, input: impl BufRead, out: &mut impl Write) -> Result<()> {
    let mut history: Vec<Utterance> = Vec::new();
    let mut last: Option<Turn> = None;
    writeln!(out, "type a message; /accept N, /reset, /quit")?;
    for line in input.lines() {
        let line = line?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        if text == "/quit" {
            break;
        }
        if text == "/reset" {
            history.clear();
            last = None;
            writeln!(out, "(new session)")?;
            continue;
        }
        if let Some(n) = text.strip_prefix("/accept") {
            let pick = n.trim().parse::<usize>().ok().and_then(|n| last.as_ref()?.top_k.get(n.checked_sub(1)?));
            match pick {
                Some(item) => {
                    history.push(Utterance::recommender(format!("@{}", item.redial_id)));
                    writeln!(out, "(recorded {})", item.title)?;
                }
                None => writeln!(out, "(no such item in the last list)")?,
            }
            continue;
        }
        history.push(Utterance::seeker(text));
        let turn = model.respond(&history, k)?;
        render_turn(&turn, out)?;
        last = Some(turn);
    }
    Ok(())
}
