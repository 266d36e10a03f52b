//! Run configuration: one TOML file plus command-line overrides.
//!
//! ```toml
//! [paths]
//! entities = "entities.jsonl"
//! aliases = "aliases.tsv"        # optional when datasets list candidates
//! dataset = "dataset.jsonl"
//! train = "train.jsonl"          # build-pool only
//! templates = "templates"        # optional per-file overrides
//! out = "out"
//! pool = "out/pool.jsonl"        # default: <out>/pool.jsonl
//! summary_cache = "cache/sum"    # default: <out>/summaries
//! response_cache = "cache/resp"  # optional
//!
//! [pipeline]
//! k = 10
//! seed = 0
//! dataset_id = "case-study"
//! parallelism = 4
//! ablate = ["exemplar"]
//! strict_abstain = false
//! selector = { alpha = 0.5, n = 1 }
//!
//! [backends.local]
//! kind = "mock"
//! script = "mock.jsonl"
//!
//! [backends.remote]
//! kind = "http"
//! endpoint = "https://host/v1/chat/completions"
//! model = "some-model"
//!
//! [stages]
//! default = "local"
//! judge = "remote"
//! ```
//!
//! Relative paths resolve against the config file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use onenet_core::exemplar::SelectorConfig;
use onenet_core::llm::HttpConfig;
use onenet_core::pipeline::{Ablation, PipelineConfig, DEFAULT_K};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Read { path: String, message: String },
    #[error("bad config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub entities: Option<PathBuf>,
    pub aliases: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub pool: Option<PathBuf>,
    pub summary_cache: Option<PathBuf>,
    pub response_cache: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectorSection {
    pub alpha: f64,
    pub n: usize,
    pub categories: Vec<String>,
}

impl Default for SelectorSection {
    fn default() -> Self {
        let s = SelectorConfig::default();
        Self { alpha: s.alpha, n: s.n, categories: s.categories }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub k: usize,
    pub seed: u64,
    pub dataset_id: String,
    pub parallelism: usize,
    pub ablate: Vec<String>,
    pub strict_abstain: bool,
    pub context_word_budget: Option<usize>,
    pub max_new_tokens: Option<u32>,
    pub temperature: f64,
    pub selector: SelectorSection,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            seed: 0,
            dataset_id: String::new(),
            parallelism: 1,
            ablate: Vec::new(),
            strict_abstain: false,
            context_word_budget: None,
            max_new_tokens: None,
            temperature: 0.0,
            selector: SelectorSection::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendDef {
    Mock {
        script: PathBuf,
    },
    Http {
        #[serde(flatten)]
        config: HttpConfig,
    },
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Stages {
    pub default: Option<String>,
    pub summarize: Option<String>,
    pub filter: Option<String>,
    pub classifier: Option<String>,
    pub contextual: Option<String>,
    pub prior: Option<String>,
    pub judge: Option<String>,
}

impl Stages {
    pub const NAMES: [&'static str; 6] = ["summarize", "filter", "classifier", "contextual", "prior", "judge"];

    /// Backend name bound to `stage`, falling back to `default`.
    pub fn resolve(&self, stage: &str) -> Option<&str> {
        let own = match stage {
            "summarize" => &self.summarize,
            "filter" => &self.filter,
            "classifier" => &self.classifier,
            "contextual" => &self.contextual,
            "prior" => &self.prior,
            "judge" => &self.judge,
            _ => &None,
        };
        own.as_deref().or(self.default.as_deref())
    }
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub backends: BTreeMap<String, BackendDef>,
    #[serde(default)]
    pub stages: Stages,
}

/// Values given on the command line take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub parallelism: Option<usize>,
    pub ablate: Vec<String>,
    pub strict_abstain: bool,
    pub k: Option<usize>,
    pub alpha: Option<f64>,
    pub n: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        let p = &mut self.paths;
        for slot in [
            &mut p.entities,
            &mut p.aliases,
            &mut p.dataset,
            &mut p.train,
            &mut p.templates,
            &mut p.out,
            &mut p.pool,
            &mut p.summary_cache,
            &mut p.response_cache,
        ] {
            fix(slot);
        }
        for def in self.backends.values_mut() {
            if let BackendDef::Mock { script } = def {
                if script.is_relative() {
                    *script = base.join(&*script);
                }
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(d) = &o.dataset {
            self.paths.dataset = Some(d.clone());
        }
        if let Some(d) = &o.out {
            self.paths.out = Some(d.clone());
        }
        let p = &mut self.pipeline;
        if let Some(v) = o.seed {
            p.seed = v;
        }
        if let Some(v) = o.parallelism {
            p.parallelism = v;
        }
        if !o.ablate.is_empty() {
            p.ablate = o.ablate.clone();
        }
        p.strict_abstain |= o.strict_abstain;
        if let Some(v) = o.k {
            p.k = v;
        }
        if let Some(v) = o.alpha {
            p.selector.alpha = v;
        }
        if let Some(v) = o.n {
            p.selector.n = v;
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.paths.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn pool_path(&self) -> PathBuf {
        self.paths.pool.clone().unwrap_or_else(|| self.out_dir().join("pool.jsonl"))
    }

    pub fn summary_cache(&self) -> PathBuf {
        self.paths
            .summary_cache
            .clone()
            .unwrap_or_else(|| self.out_dir().join("summaries"))
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig, ConfigError> {
        let p = &self.pipeline;
        let ablation = Ablation::from_names(p.ablate.iter().map(String::as_str))
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let mut cfg = PipelineConfig {
            k: p.k,
            selector: SelectorConfig {
                alpha: p.selector.alpha,
                n: p.selector.n,
                categories: p.selector.categories.clone(),
            },
            seed: p.seed,
            dataset_id: p.dataset_id.clone(),
            ablation,
            context_word_budget: p.context_word_budget,
            ..PipelineConfig::default()
        };
        cfg.temperature = p.temperature;
        if let Some(m) = p.max_new_tokens {
            cfg.max_new_tokens = m;
        }
        cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }

    /// Checks that stage bindings name defined backends and that
    /// `required` paths are present and exist.
    pub fn check(&self, required: &[(&str, &Option<PathBuf>)]) -> Result<(), ConfigError> {
        if self.pipeline.parallelism == 0 {
            return Err(ConfigError::Invalid("parallelism must be at least 1".into()));
        }
        for stage in Stages::NAMES {
            let name = self
                .stages
                .resolve(stage)
                .ok_or_else(|| ConfigError::Invalid(format!("no backend bound to stage {stage:?}")))?;
            if !self.backends.contains_key(name) {
                return Err(ConfigError::Invalid(format!(
                    "stage {stage:?} uses undefined backend {name:?}"
                )));
            }
        }
        for def in self.backends.values() {
            if let BackendDef::Mock { script } = def {
                must_exist("mock script", script)?;
            }
        }
        for (what, path) in required {
            let path = path
                .as_ref()
                .ok_or_else(|| ConfigError::Invalid(format!("paths.{what} is not set")))?;
            must_exist(what, path)?;
        }
        if let Some(t) = &self.paths.templates {
            must_exist("templates", t)?;
        }
        Ok(())
    }
}

fn must_exist(what: &str, path: &Path) -> Result<(), ConfigError> {
    if path.exists() {
        Ok(())
    } else {
        Err(ConfigError::Invalid(format!("{what} path {} does not exist", path.display())))
    }
}
