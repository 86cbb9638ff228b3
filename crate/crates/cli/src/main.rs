use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use cadrl::checkpoint::{EmbeddingCheckpoint, ModelCheckpoint};
use cadrl::config::RunConfig;
use cadrl::darl::{write_training_log, TRAINING_LOG_HEADER};
use cadrl::kg::{Dataset, DatasetStats, HELDOUT_FILE};
use cadrl::pipeline::{self, PipelineError, Prepared};
use cadrl::recommend::{export_paths, metrics_table, metrics_tsv};
use cadrl::selfcheck;
use cadrl::transe::TranseError;

const EMBEDDINGS: &str = "embeddings.json";
const MODEL: &str = "model.json";
const TRAIN_LOG: &str = "train_log.tsv";
const PATHS: &str = "paths.tsv";
const METRICS: &str = "metrics.tsv";
const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Parser)]
#[command(name = "cadrl", version, about = "Knowledge-graph path recommender with category-aware dual agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate raw TSVs and write a normalised dataset with its split.
    Ingest {
        /// Directory with entities.tsv, triples.tsv, categories.tsv and
        /// optionally interactions.tsv and heldout.tsv.
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic dataset (preset from the `synth` key).
    Synth(Common),
    /// Train TransE embeddings for the dataset in --dir.
    Pretrain(Common),
    /// Train the encoder and both agents from the pretrained embeddings.
    Train(Common),
    /// Beam-search recommendations with explanation paths.
    Recommend(Common),
    /// Score the exported recommendations against held-out purchases.
    Evaluate(Common),
    /// Finite-difference gradient checks on small fixtures.
    Gradcheck(Common),
}

#[derive(Args)]
struct Common {
    /// Working directory holding the dataset and every artifact.
    #[arg(long, default_value = ".")]
    dir: PathBuf,
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Root seed; overrides config.
    #[arg(long)]
    seed: Option<u64>,
    /// Parallel rollouts and inference; results may differ from one worker.
    #[arg(long)]
    workers: Option<usize>,
}

/// An error paired with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

const USAGE: u8 = 1;
const DATA: u8 = 2;
const DIVERGED: u8 = 3;

fn fail(code: u8, error: impl Into<anyhow::Error>) -> Failure {
    Failure { code, error: error.into() }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let code = if e.is_divergence() { DIVERGED } else { DATA };
        fail(code, e)
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::Ingest { input, common } => ingest(&input, &common),
        Command::Synth(c) => synth(&c),
        Command::Pretrain(c) => pretrain(&c),
        Command::Train(c) => train(&c),
        Command::Recommend(c) => recommend(&c),
        Command::Evaluate(c) => evaluate(&c),
        Command::Gradcheck(c) => gradcheck(&c),
    }
}

impl Common {
    /// Defaults, then the file, then `--set`, then `--seed` and `--workers`.
    fn resolve(&self, command: &str) -> Result<RunConfig, Failure> {
        let text = match &self.config {
            Some(p) => Some(fs::read_to_string(p).with_context(|| format!("reading config {}", p.display())).map_err(|e| fail(USAGE, e))?),
            None => None,
        };
        let mut overrides = Vec::new();
        for o in &self.overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| fail(USAGE, anyhow!("--set expects KEY=VALUE, got `{o}`")))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        if let Some(s) = self.seed {
            overrides.push(("seed".into(), s.to_string()));
        }
        if let Some(w) = self.workers {
            overrides.push(("workers".into(), w.to_string()));
        }
        let cfg = RunConfig::resolve(text.as_deref(), &overrides).map_err(|e| fail(USAGE, e))?;
        println!("cadrl {command} (seed {})", cfg.seed);
        for line in cfg.render().lines() {
            println!("  {line}");
        }
        Ok(cfg)
    }

    fn artifact(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Records the resolved configuration next to the command's outputs.
    fn record(&self, command: &str, cfg: &RunConfig) -> Outcome {
        let path = self.artifact(&format!("{command}.conf"));
        fs::write(&path, cfg.render()).with_context(|| format!("writing {}", path.display())).map_err(|e| fail(DATA, e))
    }

    fn require(&self, name: &str, producer: &str) -> Result<PathBuf, Failure> {
        let path = self.artifact(name);
        if path.exists() {
            Ok(path)
        } else {
            Err(fail(
                DATA,
                anyhow!("{} not found; run `cadrl {producer} --dir {}` first", path.display(), self.dir.display()),
            ))
        }
    }

    fn prepared(&self) -> Result<Prepared, Failure> {
        if !self.dir.join(HELDOUT_FILE).exists() {
            return Err(fail(
                DATA,
                anyhow!("no prepared dataset in {}; run `cadrl synth` or `cadrl ingest` first", self.dir.display()),
            ));
        }
        Ok(Prepared::new(Dataset::load(&self.dir).map_err(PipelineError::from)?)?)
    }
}

fn print_stats(stats: &DatasetStats) {
    println!("dataset");
    for (kind, n) in &stats.kinds {
        println!("  {:<22}{n}", format!("{}s", kind.as_str()));
    }
    println!("  {:<22}{}", "relations", stats.relations);
    println!("  {:<22}{}", "triples", stats.triples);
    println!("  {:<22}{}", "interactions", stats.interactions);
    println!("  {:<22}{}", "train interactions", stats.train_interactions);
    println!("  {:<22}{}", "test interactions", stats.test_interactions);
    println!("  {:<22}{}", "categories", stats.categories);
    if stats.duplicate_triples > 0 {
        println!("  {:<22}{}", "duplicates dropped", stats.duplicate_triples);
    }
}

fn ingest(input: &Path, c: &Common) -> Outcome {
    let cfg = c.resolve("ingest")?;
    let (ds, stats) = Dataset::ingest(input, cfg.split_ratio, cfg.stage_seed("split")).map_err(PipelineError::from)?;
    ds.save(&c.dir).map_err(PipelineError::from)?;
    c.record("ingest", &cfg)?;
    print_stats(&stats);
    println!("wrote {}", c.dir.display());
    Ok(())
}

fn synth(c: &Common) -> Outcome {
    let cfg = c.resolve("synth")?;
    let out = pipeline::synthesize(&cfg)?;
    out.dataset.save(&c.dir).map_err(PipelineError::from)?;
    c.record("synth", &cfg)?;
    print_stats(&out.dataset.stats());
    if !out.report.plant_distances.is_empty() {
        println!("  {:<22}{:?}", "planted distances", out.report.plant_distances);
    }
    println!("wrote {}", c.dir.display());
    Ok(())
}

fn pretrain(c: &Common) -> Outcome {
    let cfg = c.resolve("pretrain")?;
    let p = c.prepared()?;
    let t0 = Instant::now();
    let (table, history) = match pipeline::pretrain(&p, &cfg) {
        Ok(r) => r,
        Err(PipelineError::Transe(TranseError::Diverged { epoch, table, history })) => {
            let path = c.artifact("embeddings.diverged.json");
            EmbeddingCheckpoint::new(&cfg, p.fingerprint.clone(), *table, history)
                .save(&path)
                .map_err(PipelineError::from)?;
            return Err(fail(DIVERGED, anyhow!("TransE loss became non-finite in epoch {epoch}; last finite table saved to {}", path.display())));
        }
        Err(e) => return Err(e.into()),
    };
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        println!("transe: {} epochs, loss {first:.4} -> {last:.4} ({:.1?})", history.len(), t0.elapsed());
    }
    let path = c.artifact(EMBEDDINGS);
    EmbeddingCheckpoint::new(&cfg, p.fingerprint.clone(), table, history).save(&path).map_err(PipelineError::from)?;
    c.record("pretrain", &cfg)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn train(c: &Common) -> Outcome {
    let cfg = c.resolve("train")?;
    let p = c.prepared()?;
    let emb_path = c.require(EMBEDDINGS, "pretrain")?;
    let emb = EmbeddingCheckpoint::load(&emb_path, &cfg, &p.fingerprint).map_err(PipelineError::from)?;
    let t0 = Instant::now();
    println!("{TRAINING_LOG_HEADER}");
    let (store, outcome) = pipeline::train_model(&p, &emb.table, &cfg, |row| {
        println!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            row.epoch, row.mean_return_entity, row.mean_return_category, row.hit_rate, row.loss
        );
    })?;
    println!("trained {} episodes in {:.1?}", outcome.episodes, t0.elapsed());
    let log_path = c.artifact(TRAIN_LOG);
    let mut log = Vec::new();
    write_training_log(&mut log, &outcome.log).map_err(|e| fail(DATA, e))?;
    fs::write(&log_path, log).with_context(|| format!("writing {}", log_path.display())).map_err(|e| fail(DATA, e))?;
    let path = c.artifact(MODEL);
    ModelCheckpoint::new(&cfg, p.fingerprint.clone(), emb.table, &store).save(&path).map_err(PipelineError::from)?;
    c.record("train", &cfg)?;
    println!("wrote {} and {}", path.display(), log_path.display());
    Ok(())
}

fn load_model(c: &Common, cfg: &RunConfig, p: &Prepared) -> Result<ModelCheckpoint, Failure> {
    let path = c.require(MODEL, "train")?;
    Ok(ModelCheckpoint::load(&path, cfg, &p.fingerprint).map_err(PipelineError::from)?)
}

fn recommend(c: &Common) -> Outcome {
    let cfg = c.resolve("recommend")?;
    let p = c.prepared()?;
    let ck = load_model(c, &cfg, &p)?;
    let t0 = Instant::now();
    let lists = pipeline::recommend(&p, &ck, &cfg)?;
    let path = c.artifact(PATHS);
    export_paths(&lists, &p.dataset.kg, &p.dataset.assignment, &path).map_err(PipelineError::from)?;
    c.record("recommend", &cfg)?;
    let n: usize = lists.values().map(|l| l.items.len()).sum();
    println!("{n} recommendations for {} users in {:.1?}", lists.len(), t0.elapsed());
    println!("wrote {}", path.display());
    Ok(())
}

fn evaluate(c: &Common) -> Outcome {
    let cfg = c.resolve("evaluate")?;
    let p = c.prepared()?;
    // The model check catches paths left over from a differently configured run.
    load_model(c, &cfg, &p)?;
    let paths = c.require(PATHS, "recommend")?;
    let text = fs::read_to_string(&paths).with_context(|| format!("reading {}", paths.display())).map_err(|e| fail(DATA, e))?;
    let report = pipeline::evaluate_export(&p, &text, cfg.top_k)?;
    print!("{}", metrics_table(&report));
    let path = c.artifact(METRICS);
    fs::write(&path, metrics_tsv(&report, &p.dataset.kg)).with_context(|| format!("writing {}", path.display())).map_err(|e| fail(DATA, e))?;
    c.record("evaluate", &cfg)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn gradcheck(c: &Common) -> Outcome {
    let cfg = c.resolve("gradcheck")?;
    let t0 = Instant::now();
    let results = selfcheck::run_all(cfg.seed).map_err(|e| fail(DATA, e))?;
    let mut worst: f64 = 0.0;
    println!("{:<28}{:>14}{:>10}", "check", "max rel err", "coords");
    for r in &results {
        println!("{:<28}{:>14.3e}{:>10}", r.name, r.report.max_rel_error, r.report.coordinates_checked);
        worst = worst.max(r.report.max_rel_error);
    }
    println!("worst {worst:.3e} in {:.1?}", t0.elapsed());
    if worst.is_nan() || worst > GRADCHECK_TOLERANCE {
        return Err(fail(DIVERGED, anyhow!("gradient check exceeded {GRADCHECK_TOLERANCE:e}")));
    }
    Ok(())
}
