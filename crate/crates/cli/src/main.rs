use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use kenet::config::{TrainConfig, Variant};
use kenet::corpus::ingest::{preprocess, IngestOptions, ReutersSplit};
use kenet::corpus::{load_dataset, DatasetFormat};
use kenet::experiments::{ablate, sweep, SweepAxis};
use kenet::head::write_predictions;
use kenet::knowledge::{
    retrieve_corpus_knowledge, FixtureBackend, RetrievalCache, RetrievalOptions, TagmeAnnotator, WikipediaPages,
};
use kenet::metrics::MetricsReport;
use kenet::model::Model;
use kenet::train::{evaluate, train, Split, TOP_K};
use kenet::visualize::visualize;

#[derive(Parser)]
#[command(name = "kenet", version, about = "Knowledge-enhanced multi-label text classification")]
struct Cli {
    /// Log filter, e.g. `info` or `kenet=debug`.
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a raw corpus distribution into JSON-lines form.
    Preprocess(PreprocessArgs),
    /// Print corpus statistics.
    Stats(DatasetArgs),
    /// Link entities and fetch knowledge text for every document.
    Retrieve(RetrieveArgs),
    /// Write a default training config.
    InitConfig(InitConfigArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Score a checkpoint on a split.
    Evaluate(EvaluateArgs),
    /// Train ablation variants next to the full model.
    Ablate(AblateArgs),
    /// One training run per value of a hyper-parameter.
    Sweep(SweepArgs),
    /// Export salience maps and label probabilities for one document.
    Visualize(VisualizeArgs),
}

#[derive(Args)]
struct DatasetArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    format: DatasetFormat,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitMode {
    Resplit,
    Modapte,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    raw: PathBuf,
    #[arg(long)]
    format: DatasetFormat,
    #[arg(long)]
    out: PathBuf,
    /// Reuters only: keep the ModApte partition or re-split the pool.
    #[arg(long, value_enum, default_value = "resplit")]
    reuters_split: SplitMode,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    #[arg(long, default_value_t = 13)]
    split_seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Fixture,
    Live,
}

#[derive(Args)]
struct RetrieveArgs {
    #[command(flatten)]
    data: DatasetArgs,
    /// Output directory for `knowledge.jsonl` and per-document records.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    cache: PathBuf,
    #[arg(long, value_enum, default_value = "live")]
    backend: Backend,
    /// Directory with `lexicon.jsonl` and `pages.jsonl` (fixture backend).
    #[arg(long, required_if_eq("backend", "fixture"))]
    fixture: Option<PathBuf>,
    #[arg(long, default_value_t = kenet::knowledge::DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = 4)]
    parallelism: usize,
    #[arg(long, default_value_t = 3)]
    attempts: usize,
    /// Minimum spacing between requests to one host (live backend).
    #[arg(long, default_value_t = 200)]
    min_interval_ms: u64,
    /// Re-fetch pages even when cached.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct InitConfigArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[arg(long)]
    knowledge: PathBuf,
    #[arg(long)]
    vectors: Option<PathBuf>,
    #[arg(long, default_value = "runs/default")]
    output_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    /// Fusion weight of the document branch; the knowledge branch gets the rest.
    #[arg(long)]
    beta_doc: Option<f64>,
}

impl Overrides {
    fn load(&self) -> Result<TrainConfig> {
        let mut c = TrainConfig::load(&self.config)?;
        if let Some(v) = &self.output_dir {
            c.output_dir = v.clone();
        }
        if let Some(v) = self.seed {
            c.train.seed = v;
        }
        if let Some(v) = self.max_epochs {
            c.train.max_epochs = v;
        }
        if let Some(v) = self.learning_rate {
            c.train.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            c.train.batch_size = v;
        }
        if self.threads.is_some() {
            c.train.threads = self.threads;
        }
        if let Some(b) = self.beta_doc {
            c.model.beta_doc = b;
            c.model.beta_know = 1.0 - b;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: Overrides,
    #[arg(long)]
    variant: Option<Variant>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Write per-document predictions as TSV.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    cfg: Overrides,
    /// Variant to train; repeatable. Defaults to every ablation.
    #[arg(long = "variant")]
    variants: Vec<Variant>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    cfg: Overrides,
    #[arg(long)]
    axis: SweepAxis,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<usize>,
}

#[derive(Args)]
struct VisualizeArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long = "doc")]
    doc_id: String,
    #[arg(long)]
    out: PathBuf,
}

fn print_metrics(r: &MetricsReport) {
    println!("{}", MetricsReport::TABLE_HEADER);
    println!("{}", r.table_row());
    println!("{}", r.to_json_line());
}

fn run_preprocess(a: PreprocessArgs) -> Result<()> {
    let reuters_split = match a.reuters_split {
        SplitMode::Modapte => ReutersSplit::ModApte,
        SplitMode::Resplit => ReutersSplit::Resplit {
            train_fraction: a.train_fraction,
            seed: a.split_seed,
        },
    };
    let ds = preprocess(&a.raw, a.format, &a.out, IngestOptions { reuters_split })?;
    println!("{}", serde_json::to_string(&ds.stats())?);
    Ok(())
}

fn run_retrieve(a: RetrieveArgs) -> Result<()> {
    let ds = load_dataset(&a.data.dataset, a.data.format)?;
    let corpus: Vec<_> = ds.train.into_iter().chain(ds.test).collect();
    let cache = RetrievalCache::open(&a.cache)?;
    let opts = RetrievalOptions {
        threshold: a.threshold,
        parallelism: a.parallelism,
        attempts: a.attempts,
        force: a.force,
    };
    let outcome = match a.backend {
        Backend::Fixture => {
            let dir = a.fixture.as_deref().context("--fixture is required")?;
            let fx = FixtureBackend::load(dir)?;
            retrieve_corpus_knowledge(&corpus, &fx, &fx, &cache, &a.out, &opts)?
        }
        Backend::Live => {
            let gap = Duration::from_millis(a.min_interval_ms);
            let annotator = TagmeAnnotator::from_env(gap)?;
            let pages = WikipediaPages::from_env(gap)?;
            retrieve_corpus_knowledge(&corpus, &annotator, &pages, &cache, &a.out, &opts)?
        }
    };
    println!("{}", outcome.summary);
    for (doc, err) in &outcome.summary.failures {
        eprintln!("fallback {doc}: {err}");
    }
    Ok(())
}

fn run_init_config(a: InitConfigArgs) -> Result<()> {
    let mut c = TrainConfig::new(a.data.dataset, a.data.format, a.knowledge);
    c.data.vectors = a.vectors;
    c.output_dir = a.output_dir;
    c.save(&a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut c = a.cfg.load()?;
    if let Some(v) = a.variant {
        c.model.variant = v;
    }
    let rec = train(&c)?;
    println!(
        "{} epochs (best {}), {} trainable parameters, {:.1}s",
        rec.epochs.len(),
        rec.best_epoch,
        rec.trainable_parameters,
        rec.wall_clock_secs
    );
    print_metrics(&rec.test_metrics);
    println!("checkpoint {} ({})", rec.checkpoint.display(), rec.checkpoint_hash);
    Ok(())
}

fn run_evaluate(a: EvaluateArgs) -> Result<()> {
    let cfg = TrainConfig::load(&a.config)?;
    let eval = evaluate(&a.checkpoint, &cfg, a.split)?;
    print_metrics(&eval.report);
    if let Some(path) = a.predictions {
        let model = Model::load(&a.checkpoint)?;
        write_predictions(&path, &eval.rows(&model, TOP_K))?;
    }
    Ok(())
}

fn run_ablate(a: AblateArgs) -> Result<()> {
    let cfg = a.cfg.load()?;
    let variants: Vec<Variant> = if a.variants.is_empty() {
        Variant::REPORT_ORDER.into_iter().filter(|v| *v != Variant::Full).collect()
    } else {
        a.variants
    };
    let report = ablate(&cfg, &variants)?;
    print!("{}", report.table());
    Ok(())
}

fn run_sweep(a: SweepArgs) -> Result<()> {
    let cfg = a.cfg.load()?;
    let report = sweep(&cfg, a.axis, &a.values)?;
    print!("{}", report.csv());
    Ok(())
}

fn run_visualize(a: VisualizeArgs) -> Result<()> {
    let cfg = TrainConfig::load(&a.config)?;
    let v = visualize(&a.checkpoint, &cfg, &a.doc_id, &a.out)?;
    for f in &v.files {
        println!("{}", f.display());
    }
    Ok(())
}

fn run_stats(a: DatasetArgs) -> Result<()> {
    if !Path::new(&a.dataset).is_dir() {
        bail!("{} is not a directory", a.dataset.display());
    }
    let ds = load_dataset(&a.dataset, a.format)?;
    println!("{}", serde_json::to_string(&ds.stats())?);
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match cli.command {
        Command::Preprocess(a) => run_preprocess(a),
        Command::Stats(a) => run_stats(a),
        Command::Retrieve(a) => run_retrieve(a),
        Command::InitConfig(a) => run_init_config(a),
        Command::Train(a) => run_train(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Ablate(a) => run_ablate(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Visualize(a) => run_visualize(a),
    }
}
