mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use onenet_core::eval::EvalReport;
use onenet_core::exemplar::{ExemplarPool, HashingEmbedder};
use onenet_core::kb::{load_alias_table, load_dataset, load_entity_store};
use onenet_core::llm::{CachedBackend, HttpBackend, LlmBackend, MockBackend, TemplateSet};
use onenet_core::pipeline::{load_decisions, Pipeline, PipelineError, StageBackends};
use onenet_core::MentionRecord;

use config::{BackendDef, ConfigError, Overrides, RunConfig, Stages};

#[derive(Parser)]
#[command(name = "onenet", version, about = "Few-shot entity linking with prompted language models")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, default_value = "onenet.toml")]
    config: PathBuf,
    /// Dataset JSONL, overriding `paths.dataset`.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Output directory, overriding `paths.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Mentions in flight during `link`.
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    /// Stages to switch off: erp, prior, context, exemplar.
    #[arg(long, global = true, value_delimiter = ',')]
    ablate: Vec<String>,
    /// Score abstentions as wrong predictions.
    #[arg(long, global = true)]
    strict_abstain: bool,
    /// Candidate cap per mention.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Weight of context similarity in exemplar scoring.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Exemplars per prompt.
    #[arg(long, global = true)]
    n: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Summarize every entity the dataset's candidate sets reference.
    Summarize,
    /// Distill a chain-of-thought exemplar pool from the training set.
    BuildPool,
    /// Link the dataset and write decisions.jsonl and manifest.json.
    Link,
    /// Score a decisions file against the dataset's gold labels.
    Eval {
        /// Defaults to `<out>/decisions.jsonl`.
        #[arg(long)]
        decisions: Option<PathBuf>,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) | Self::Usage(_) => 2,
            Self::Failed(_) => 1,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&cli.config)?;
    cfg.apply(&Overrides {
        dataset: cli.dataset,
        out: cli.out,
        seed: cli.seed,
        parallelism: cli.parallelism,
        ablate: cli.ablate,
        strict_abstain: cli.strict_abstain,
        k: cli.k,
        alpha: cli.alpha,
        n: cli.n,
    });
    let pipeline_cfg = cfg.pipeline_config()?;
    println!("config hash: {}", pipeline_cfg.hash());
    match cli.command {
        Command::Summarize => summarize(&cfg),
        Command::BuildPool => build_pool(&cfg),
        Command::Link => link(&cfg),
        Command::Eval { decisions } => eval(&cfg, decisions),
    }
}

fn build_backends(cfg: &RunConfig) -> Result<StageBackends, CliError> {
    let mut built: BTreeMap<&str, Arc<dyn LlmBackend>> = BTreeMap::new();
    let mut get = |name: &str| -> Result<Arc<dyn LlmBackend>, CliError> {
        if let Some((_, b)) = built.iter().find(|(n, _)| **n == name) {
            return Ok(b.clone());
        }
        let (key, def) = cfg
            .backends
            .get_key_value(name)
            .ok_or_else(|| usage(format!("undefined backend {name:?}")))?;
        let backend: Arc<dyn LlmBackend> = match def {
            BackendDef::Mock { script } => Arc::new(MockBackend::from_script_file(script).map_err(usage)?),
            BackendDef::Http { config } => Arc::new(HttpBackend::new(config.clone()).map_err(usage)?),
        };
        let backend: Arc<dyn LlmBackend> = match &cfg.paths.response_cache {
            Some(dir) => Arc::new(CachedBackend::new(backend, dir).map_err(usage)?),
            None => backend,
        };
        built.insert(key.as_str(), backend.clone());
        Ok(backend)
    };
    let mut stage = |s: &str| get(cfg.stages.resolve(s).expect("bindings checked"));
    Ok(StageBackends {
        summarize: stage(Stages::NAMES[0])?,
        filter: stage(Stages::NAMES[1])?,
        classifier: stage(Stages::NAMES[2])?,
        contextual: stage(Stages::NAMES[3])?,
        prior: stage(Stages::NAMES[4])?,
        judge: stage(Stages::NAMES[5])?,
    })
}

fn build_pipeline(cfg: &RunConfig) -> Result<Pipeline, CliError> {
    let backends = build_backends(cfg)?;
    let entities = cfg.paths.entities.as_ref().expect("checked");
    let store = load_entity_store(entities).map_err(usage)?;
    let templates = match &cfg.paths.templates {
        Some(dir) => TemplateSet::load_dir(dir).map_err(usage)?,
        None => TemplateSet::default(),
    };
    let mut pipeline = Pipeline::new(cfg.pipeline_config()?, Arc::new(store), templates, backends)
        .map_err(usage)?
        .with_summary_cache(cfg.summary_cache())
        .map_err(usage)?;
    if let Some(path) = &cfg.paths.aliases {
        let table = load_alias_table(path).map_err(usage)?;
        table.validate(pipeline.store()).map_err(usage)?;
        pipeline = pipeline.with_aliases(Arc::new(table));
    }
    Ok(pipeline)
}

fn dataset(path: &Path) -> Result<Vec<MentionRecord>, CliError> {
    load_dataset(path).map_err(usage)
}

fn summarize(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.check(&[("entities", &cfg.paths.entities), ("dataset", &cfg.paths.dataset)])?;
    let pipeline = build_pipeline(cfg)?;
    let records = dataset(cfg.paths.dataset.as_ref().expect("checked"))?;
    match pipeline.summarize_dataset(&records) {
        Ok((fresh, usage)) => {
            println!("{fresh} new summaries ({} calls, {} tokens)", usage.calls, usage.total());
            Ok(())
        }
        Err(e @ (PipelineError::Kb(_) | PipelineError::Config(_))) => Err(usage(e)),
        Err(e) => Err(CliError::Failed(e.to_string())),
    }
}

fn build_pool(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.check(&[("entities", &cfg.paths.entities), ("train", &cfg.paths.train)])?;
    let training = dataset(cfg.paths.train.as_ref().expect("checked"))?;
    if training.is_empty() {
        return Err(usage("training file has no records"));
    }
    let pipeline = build_pipeline(cfg)?;
    let build = pipeline.build_pool(&training).map_err(usage)?;
    let path = cfg.pool_path();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Failed(format!("{}: {e}", dir.display())))?;
    }
    build.pool.save(&path).map_err(|e| CliError::Failed(e.to_string()))?;
    if build.pool.is_empty() {
        log::warn!("no training record produced an exemplar; the pool is empty");
    }
    println!("kept {}/{} ({} failed), pool written to {}", build.pool.len(), build.total, build.failed, path.display());
    Ok(())
}

fn link(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.check(&[("entities", &cfg.paths.entities), ("dataset", &cfg.paths.dataset)])?;
    let mut pipeline = build_pipeline(cfg)?;
    let pool_path = cfg.pool_path();
    if pool_path.exists() {
        let embedder = HashingEmbedder::default();
        let pool = ExemplarPool::load(&pool_path, &embedder).map_err(usage)?;
        pipeline = pipeline.with_pool(pool, Box::new(embedder)).map_err(usage)?;
    } else {
        log::warn!("no exemplar pool at {}; linking zero-shot", pool_path.display());
    }
    let records = dataset(cfg.paths.dataset.as_ref().expect("checked"))?;
    let out = pipeline.link_batch(&records, cfg.pipeline.parallelism).map_err(usage)?;
    let dir = cfg.out_dir();
    out.write(&dir).map_err(|e| CliError::Failed(e.to_string()))?;
    let t = out.manifest.total;
    println!(
        "linked {}/{} mentions, {} errors, {} calls, {} tokens; wrote {}",
        out.manifest.decisions,
        out.manifest.mentions,
        out.manifest.errors,
        t.calls,
        t.total(),
        dir.display()
    );
    Ok(())
}

fn eval(cfg: &RunConfig, decisions: Option<PathBuf>) -> Result<(), CliError> {
    cfg.check(&[("dataset", &cfg.paths.dataset)])?;
    let path = decisions.unwrap_or_else(|| cfg.out_dir().join("decisions.jsonl"));
    if !path.exists() {
        return Err(usage(format!("decisions file {} does not exist", path.display())));
    }
    let decisions = load_decisions(&path).map_err(usage)?;
    let gold = dataset(cfg.paths.dataset.as_ref().expect("checked"))?;
    let report = EvalReport::build(&decisions, &gold, cfg.pipeline.strict_abstain).map_err(usage)?;
    print!("{}", report.to_table());
    let dir = cfg.out_dir();
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Failed(format!("{}: {e}", dir.display())))?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    let out = dir.join("report.json");
    std::fs::write(&out, json).map_err(|e| CliError::Failed(format!("{}: {e}", out.display())))?;
    Ok(())
}
