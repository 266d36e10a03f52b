//! One mention through reduction, dual linking and consensus, and batch
//! runs over datasets.
//!
//! Batch runs are a pure function of dataset, configuration and backend
//! replies: entity summaries are computed once per distinct entity before
//! linking starts, and their cost is charged to the first mention (in input
//! order) that lists the entity. Wall-clock timings are kept apart from the
//! decisions so decision files stay byte-identical across reruns.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::erp::{identity_reduction, CandidateFilter, ErpError, ReductionReport, Summarizer};
use crate::exemplar::{
    select_exemplars, ContextEmbedder, ExemplarError, ExemplarPool, HashingEmbedder, MentionClassifier, PoolBuild, PoolBuilder,
    QueryFeatures, SelectorConfig,
};
use crate::hashing::digest_parts;
use crate::judger::{ConsensusOutcome, Judger};
use crate::kb::{is_marked, AliasTable, CandidateSet, Entity, EntityStore, KbError, MentionRecord};
use crate::linker::{CandidateView, Linker, LinkerError, LinkerOutput};
use crate::llm::{count_tokens, write_atomic, CallOptions, LlmBackend, TemplateSet, TokenUsage, DEFAULT_MAX_NEW_TOKENS};
use crate::par;

pub const DEFAULT_K: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Erp(#[from] ErpError),
    #[error(transparent)]
    Linker(#[from] LinkerError),
    #[error(transparent)]
    Exemplar(#[from] ExemplarError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("summary for {id:?} failed: {message}")]
    Summary { id: String, message: String },
}

/// Stages that can be switched off for ablation runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Skip yes/no filtering; every candidate reaches the linkers.
    pub no_erp: bool,
    /// Contextual channel only.
    pub no_prior: bool,
    /// Prior channel only.
    pub no_context: bool,
    /// Zero-shot contextual prompt.
    pub no_exemplar: bool,
}

impl Ablation {
    pub fn from_names<'a>(names: impl IntoIterator<Item = &'a str>) -> Result<Self, PipelineError> {
        let mut a = Self::default();
        for name in names {
            match name {
                "erp" => a.no_erp = true,
                "prior" => a.no_prior = true,
                "context" => a.no_context = true,
                "exemplar" => a.no_exemplar = true,
                other => {
                    return Err(PipelineError::Config(format!(
                        "unknown ablation {other:?} (expected erp, prior, context or exemplar)"
                    )))
                }
            }
        }
        Ok(a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Candidate cap per mention.
    pub k: usize,
    pub selector: SelectorConfig,
    pub seed: u64,
    /// Mixed into the candidate shuffle so datasets get independent orders.
    pub dataset_id: String,
    pub ablation: Ablation,
    /// Contexts longer than this many words are cut down around the mention.
    pub context_word_budget: Option<usize>,
    pub max_new_tokens: u32,
    pub temperature: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            selector: SelectorConfig::default(),
            seed: 0,
            dataset_id: String::new(),
            ablation: Ablation::default(),
            context_word_budget: None,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            temperature: 0.0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.k == 0 {
            return Err(PipelineError::Config("k must be at least 1".into()));
        }
        if self.ablation.no_context && self.ablation.no_prior {
            return Err(PipelineError::Config("cannot disable both linking channels".into()));
        }
        if self.context_word_budget == Some(0) {
            return Err(PipelineError::Config("context word budget must be positive".into()));
        }
        self.selector.validate()?;
        Ok(())
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        digest_parts(&[json.as_bytes()])
    }

    fn call_options(&self) -> CallOptions {
        CallOptions {
            max_new_tokens: self.max_new_tokens,
            temperature: self.temperature,
            seed: self.seed,
        }
    }
}

/// A backend per stage. Stages may share one backend.
#[derive(Clone)]
pub struct StageBackends {
    pub summarize: Arc<dyn LlmBackend>,
    pub filter: Arc<dyn LlmBackend>,
    pub classifier: Arc<dyn LlmBackend>,
    pub contextual: Arc<dyn LlmBackend>,
    pub prior: Arc<dyn LlmBackend>,
    pub judge: Arc<dyn LlmBackend>,
}

impl StageBackends {
    pub fn uniform(backend: Arc<dyn LlmBackend>) -> Self {
        Self {
            summarize: backend.clone(),
            filter: backend.clone(),
            classifier: backend.clone(),
            contextual: backend.clone(),
            prior: backend.clone(),
            judge: backend,
        }
    }

    pub fn ids(&self) -> StageBackendIds {
        StageBackendIds {
            summarize: self.summarize.id().to_string(),
            filter: self.filter.id().to_string(),
            classifier: self.classifier.id().to_string(),
            contextual: self.contextual.id().to_string(),
            prior: self.prior.id().to_string(),
            judge: self.judge.id().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageBackendIds {
    pub summarize: String,
    pub filter: String,
    pub classifier: String,
    pub contextual: String,
    pub prior: String,
    pub judge: String,
}

/// Per-stage token usage of one mention or a whole run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTokens {
    pub summarize: TokenUsage,
    pub filter: TokenUsage,
    pub classifier: TokenUsage,
    pub contextual: TokenUsage,
    pub prior: TokenUsage,
    pub judge: TokenUsage,
}

impl StageTokens {
    pub fn stages(&self) -> [(&'static str, TokenUsage); 6] {
        [
            ("summarize", self.summarize),
            ("filter", self.filter),
            ("classifier", self.classifier),
            ("contextual", self.contextual),
            ("prior", self.prior),
            ("judge", self.judge),
        ]
    }

    pub fn total(&self) -> TokenUsage {
        self.stages().into_iter().map(|(_, u)| u).sum()
    }
}

impl std::ops::AddAssign for StageTokens {
    fn add_assign(&mut self, o: Self) {
        self.summarize += o.summarize;
        self.filter += o.filter;
        self.classifier += o.classifier;
        self.contextual += o.contextual;
        self.prior += o.prior;
        self.judge += o.judge;
    }
}

/// Wall-clock milliseconds per stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub erp_ms: f64,
    pub exemplar_ms: f64,
    pub contextual_ms: f64,
    pub prior_ms: f64,
    pub judge_ms: f64,
    pub total_ms: f64,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkDecision {
    pub mention_id: String,
    pub mention: String,
    pub gold: Option<String>,
    /// Candidates before reduction.
    pub candidates: Vec<String>,
    /// Whether the gold id is among `candidates`; `None` without a gold label.
    pub gold_in_candidates: Option<bool>,
    pub reduction: ReductionReport,
    pub category: Option<String>,
    pub exemplars: Vec<String>,
    pub contextual: Option<LinkerOutput>,
    pub prior: Option<LinkerOutput>,
    pub consensus: ConsensusOutcome,
    pub final_id: Option<String>,
    pub tokens: StageTokens,
    /// Input tokens of one contextual prompt listing every original
    /// candidate with its full description and no exemplars.
    pub raw_prompt_tokens: u64,
    #[serde(skip)]
    pub timings: StageTimings,
}

impl LinkDecision {
    pub fn total_tokens(&self) -> TokenUsage {
        self.tokens.total()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentionFailure {
    pub index: usize,
    pub mention_id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub dataset_id: String,
    pub backends: StageBackendIds,
    pub mentions: usize,
    pub decisions: usize,
    pub errors: usize,
    pub failures: Vec<MentionFailure>,
    pub tokens: StageTokens,
    pub total: TokenUsage,
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub decisions: Vec<LinkDecision>,
    pub manifest: RunManifest,
}

impl BatchOutput {
    pub fn decisions_jsonl(&self) -> String {
        let mut out = String::new();
        for d in &self.decisions {
            out.push_str(&serde_json::to_string(d).expect("decision serializes"));
            out.push('\n');
        }
        out
    }

    /// Writes `decisions.jsonl`, `manifest.json` and `timings.jsonl` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(), PipelineError> {
        let dir = dir.as_ref();
        let io = |path: &Path| {
            let path = path.display().to_string();
            move |source| PipelineError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let p = dir.join(DECISIONS_FILE);
        write_atomic(&p, self.decisions_jsonl().as_bytes()).map_err(io(&p))?;
        let p = dir.join(MANIFEST_FILE);
        let manifest = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes") + "\n";
        write_atomic(&p, manifest.as_bytes()).map_err(io(&p))?;
        let mut timings = String::new();
        for d in &self.decisions {
            let line = serde_json::json!({ "mention_id": d.mention_id, "timings": d.timings });
            timings.push_str(&line.to_string());
            timings.push('\n');
        }
        let p = dir.join(TIMINGS_FILE);
        write_atomic(&p, timings.as_bytes()).map_err(io(&p))?;
        Ok(())
    }
}

pub const DECISIONS_FILE: &str = "decisions.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMINGS_FILE: &str = "timings.jsonl";

pub fn load_decisions(path: impl AsRef<Path>) -> Result<Vec<LinkDecision>, PipelineError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                PipelineError::Config(format!("{}:{}: bad decision: {e}", path.display(), i + 1))
            })
        })
        .collect()
}

/// Cuts a context to the sentences that mark the mention plus the first and
/// last sentences of their paragraphs, when it exceeds `budget` words.
pub fn guard_context(context: &str, mention: &str, budget: usize) -> String {
    if context.split_whitespace().count() <= budget {
        return context.to_string();
    }
    let mut kept: Vec<String> = Vec::new();
    for para in context.split('\n').filter(|p| !p.trim().is_empty()) {
        let sentences = split_sentences(para);
        let hits: Vec<usize> = (0..sentences.len())
            .filter(|&i| is_marked(sentences[i], mention))
            .collect();
        if hits.is_empty() {
            continue;
        }
        let last = sentences.len() - 1;
        let mut keep: Vec<usize> = hits;
        keep.push(0);
        keep.push(last);
        keep.sort_unstable();
        keep.dedup();
        kept.extend(keep.into_iter().map(|i| sentences[i].trim().to_string()));
    }
    if kept.is_empty() {
        // The mark spans a line break; cutting would drop it.
        return context.to_string();
    }
    kept.join(" ")
}

fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let bytes = text.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if matches!(b, b'.' | b'!' | b'?') && bytes.get(i + 1).is_none_or(|n| n.is_ascii_whitespace()) {
            out.push(&text[start..=i]);
            start = i + 1;
        }
    }
    if !text[start..].trim().is_empty() {
        out.push(&text[start..]);
    }
    out
}

type SummaryMap = HashMap<String, Result<String, String>>;

pub struct Pipeline {
    config: PipelineConfig,
    store: Arc<EntityStore>,
    aliases: Option<Arc<AliasTable>>,
    templates: TemplateSet,
    backends: StageBackends,
    pool: ExemplarPool,
    embedder: Box<dyn ContextEmbedder>,
    summarizer: Summarizer,
}

impl Pipeline {
    pub fn new(
        config: PipelineConfig,
        store: Arc<EntityStore>,
        templates: TemplateSet,
        backends: StageBackends,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        let embedder = HashingEmbedder::default();
        let summarizer = Summarizer::new(
            backends.summarize.clone(),
            templates.summarize.clone(),
            config.call_options(),
        );
        Ok(Self {
            pool: ExemplarPool::empty(&embedder),
            embedder: Box::new(embedder),
            config,
            store,
            aliases: None,
            templates,
            backends,
            summarizer,
        })
    }

    pub fn with_aliases(mut self, aliases: Arc<AliasTable>) -> Self {
        self.aliases = Some(aliases);
        self
    }

    pub fn with_pool(mut self, pool: ExemplarPool, embedder: Box<dyn ContextEmbedder>) -> Result<Self, PipelineError> {
        if pool.embedder != embedder.id() || pool.dim != embedder.dim() {
            return Err(ExemplarError::EmbedderMismatch {
                found: pool.embedder.clone(),
                found_dim: pool.dim,
                expected: embedder.id().to_string(),
                expected_dim: embedder.dim(),
            }
            .into());
        }
        self.pool = pool;
        self.embedder = embedder;
        Ok(self)
    }

    pub fn with_summary_cache(mut self, dir: impl Into<PathBuf>) -> Result<Self, PipelineError> {
        self.summarizer = self.summarizer.with_cache_dir(dir)?;
        Ok(self)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn store(&self) -> &EntityStore {
        &self.store
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.templates
    }

    pub fn backends(&self) -> &StageBackends {
        &self.backends
    }

    pub fn summarizer(&self) -> &Summarizer {
        &self.summarizer
    }

    pub fn linker_for<'a>(&'a self, backend: &'a dyn LlmBackend) -> Linker<'a> {
        Linker {
            backend,
            templates: &self.templates,
            options: self.config.call_options(),
            dataset_id: &self.config.dataset_id,
        }
    }

    pub fn classifier(&self) -> MentionClassifier<'_> {
        MentionClassifier {
            backend: self.backends.classifier.as_ref(),
            template: &self.templates.category,
            options: self.config.call_options(),
        }
    }

    pub fn embedder(&self) -> &dyn ContextEmbedder {
        self.embedder.as_ref()
    }

    /// Candidate ids for `record`, checked against the store.
    pub fn candidates(&self, record: &MentionRecord) -> Result<CandidateSet, PipelineError> {
        let set = record.candidate_set(self.aliases.as_deref(), Some(self.config.k));
        if let Some(missing) = set.ids.iter().find(|id| !self.store.contains(id)) {
            return Err(PipelineError::Kb(KbError::DanglingAlias {
                alias: set.alias.clone(),
                id: missing.clone(),
            }));
        }
        Ok(set)
    }

    fn entity(&self, id: &str) -> &Entity {
        self.store.get(id).expect("candidate ids are checked against the store")
    }

    /// Summaries for `ids`, computed in parallel; each id must be distinct.
    fn summarize_all(&self, ids: &[String]) -> Vec<(Result<String, String>, TokenUsage)> {
        par::map_ordered(ids, |id| match self.summarizer.summary_or_truncated(self.entity(id)) {
            Ok((s, u)) => (Ok(s), u),
            Err(e) => (Err(e.to_string()), TokenUsage::default()),
        })
    }

    /// Links one mention on its own, summarizing its candidates as needed.
    pub fn link_one(&self, record: &MentionRecord) -> Result<LinkDecision, PipelineError> {
        let candidates = self.candidates(record)?;
        let results = self.summarize_all(&candidates.ids);
        let usage = results.iter().map(|(_, u)| *u).sum();
        let map: SummaryMap = candidates.ids.iter().cloned().zip(results.into_iter().map(|(r, _)| r)).collect();
        self.link_prepared(record, candidates, &map, usage)
    }

    fn link_prepared(
        &self,
        record: &MentionRecord,
        candidates: CandidateSet,
        summaries: &SummaryMap,
        summarize_usage: TokenUsage,
    ) -> Result<LinkDecision, PipelineError> {
        let started = Instant::now();
        let ab = self.config.ablation;
        let mut tokens = StageTokens {
            summarize: summarize_usage,
            ..StageTokens::default()
        };
        let mut timings = StageTimings::default();
        let gold = record.gold.as_deref();
        let context = match self.config.context_word_budget {
            Some(b) => guard_context(&record.context, &record.mention, b),
            None => record.context.clone(),
        };
        let summary = |id: &str| -> Result<&str, PipelineError> {
            match summaries.get(id) {
                Some(Ok(s)) => Ok(s),
                Some(Err(m)) => Err(PipelineError::Summary { id: id.into(), message: m.clone() }),
                None => Err(PipelineError::Summary { id: id.into(), message: "not computed".into() }),
            }
        };

        let raw_prompt_tokens = if candidates.is_empty() {
            0
        } else {
            let full: Vec<CandidateView> = candidates
                .ids
                .iter()
                .map(|id| {
                    let e = self.entity(id);
                    CandidateView { id: e.id.clone(), title: e.title.clone(), text: e.description.clone() }
                })
                .collect();
            let linker = self.linker_for(self.backends.contextual.as_ref());
            count_tokens(&linker.contextual_prompt(&record.id, &record.mention, &context, &full, &[])?)
        };

        let base = |reduction: ReductionReport, consensus: ConsensusOutcome, tokens: StageTokens, timings: StageTimings| LinkDecision {
            mention_id: record.id.clone(),
            mention: record.mention.clone(),
            gold: record.gold.clone(),
            candidates: candidates.ids.clone(),
            gold_in_candidates: gold.map(|g| candidates.contains(g)),
            reduction,
            category: None,
            exemplars: Vec::new(),
            contextual: None,
            prior: None,
            final_id: consensus.result.clone(),
            consensus,
            tokens,
            raw_prompt_tokens,
            timings,
        };

        if candidates.is_empty() {
            log::warn!("{}: no candidates; abstaining", record.id);
            let consensus = Judger { backend: self.backends.judge.as_ref(), templates: &self.templates, options: self.config.call_options() }
                .judge(None, None, &record.mention, &context)?;
            return Ok(base(identity_reduction(&record.id, &candidates, gold), consensus, tokens, timings));
        }

        // Reduction.
        let t = Instant::now();
        let reduction = if ab.no_erp {
            identity_reduction(&record.id, &candidates, gold)
        } else {
            for id in &candidates.ids {
                summary(id)?;
            }
            let filter = CandidateFilter {
                backend: self.backends.filter.as_ref(),
                template: &self.templates.filter,
                instruction: &self.templates.instruction,
                options: self.config.call_options(),
            };
            let display = |e: &Entity| {
                let s = summaries.get(&e.id).and_then(|r| r.as_ref().ok()).map_or(e.description.as_str(), |s| s);
                format!("{}: {}", e.title, s)
            };
            let r = filter.reduce(&record.id, &record.mention, &context, &candidates, &self.store, display, gold)?;
            tokens.filter = r.usage;
            r.report
        };
        timings.erp_ms = ms(t.elapsed());

        let views = reduction
            .retained
            .iter()
            .map(|id| {
                let e = self.entity(id);
                Ok(CandidateView { id: e.id.clone(), title: e.title.clone(), text: summary(id)?.to_string() })
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;

        // Exemplar selection.
        let t = Instant::now();
        let mut category = None;
        let mut chosen = Vec::new();
        if !ab.no_context && !ab.no_exemplar && !self.pool.is_empty() {
            let (cat, u) = self.classifier().classify(&record.mention, &context, &self.config.selector.categories)?;
            tokens.classifier = u;
            let query = QueryFeatures { vector: self.embedder.embed(&context)?, category: cat.clone() };
            chosen = select_exemplars(&query, &self.pool.exemplars, &self.config.selector);
            category = Some(cat);
        }
        timings.exemplar_ms = ms(t.elapsed());

        // Dual linking.
        let contextual_linker = self.linker_for(self.backends.contextual.as_ref());
        let prior_linker = self.linker_for(self.backends.prior.as_ref());
        let timed = |f: &dyn Fn() -> Result<LinkerOutput, LinkerError>| {
            let t = Instant::now();
            let r = f();
            (r, ms(t.elapsed()))
        };
        let (c, p) = par::join(
            || {
                (!ab.no_context).then(|| {
                    timed(&|| contextual_linker.link_contextual(&record.id, &record.mention, &context, &views, &chosen))
                })
            },
            || (!ab.no_prior).then(|| timed(&|| prior_linker.link_prior(&record.id, &record.mention, &views))),
        );
        let contextual = match c {
            Some((r, t)) => {
                timings.contextual_ms = t;
                Some(r?)
            }
            None => None,
        };
        let prior = match p {
            Some((r, t)) => {
                timings.prior_ms = t;
                Some(r?)
            }
            None => None,
        };
        tokens.contextual = contextual.as_ref().map(|o| o.usage).unwrap_or_default();
        tokens.prior = prior.as_ref().map(|o| o.usage).unwrap_or_default();

        // Consensus.
        let t = Instant::now();
        let view_of = |out: &Option<LinkerOutput>| {
            out.as_ref()
                .and_then(|o| o.predicted.as_deref())
                .and_then(|id| views.iter().find(|v| v.id == id))
        };
        let judger = Judger {
            backend: self.backends.judge.as_ref(),
            templates: &self.templates,
            options: self.config.call_options(),
        };
        let consensus = judger.judge(view_of(&contextual), view_of(&prior), &record.mention, &context)?;
        tokens.judge = consensus.usage;
        timings.judge_ms = ms(t.elapsed());
        timings.total_ms = ms(started.elapsed());

        let mut d = base(reduction, consensus, tokens, timings);
        d.category = category;
        d.exemplars = chosen.iter().map(|e| e.id.clone()).collect();
        d.contextual = contextual;
        d.prior = prior;
        Ok(d)
    }

    /// Links every record with at most `parallelism` mentions in flight.
    /// Output order follows input order; failed mentions are listed in the
    /// manifest and left out of the decisions.
    pub fn link_batch(&self, records: &[MentionRecord], parallelism: usize) -> Result<BatchOutput, PipelineError> {
        if parallelism == 0 {
            return Err(PipelineError::Config("parallelism must be at least 1".into()));
        }
        par::with_workers(parallelism, || self.run_batch(records))
    }

    fn run_batch(&self, records: &[MentionRecord]) -> Result<BatchOutput, PipelineError> {
        let candidate_sets: Vec<Result<CandidateSet, PipelineError>> =
            records.iter().map(|r| self.candidates(r)).collect();

        // Each distinct entity is summarized once and charged to its first mention.
        let mut seen = HashSet::new();
        let mut unique = Vec::new();
        let mut owner = Vec::new();
        for (i, set) in candidate_sets.iter().enumerate() {
            if let Ok(set) = set {
                for id in &set.ids {
                    if seen.insert(id.clone()) {
                        unique.push(id.clone());
                        owner.push(i);
                    }
                }
            }
        }
        let results = self.summarize_all(&unique);
        let mut charged = vec![TokenUsage::default(); records.len()];
        let mut summaries = SummaryMap::new();
        for ((id, (r, u)), i) in unique.into_iter().zip(results).zip(owner) {
            charged[i] += u;
            summaries.insert(id, r);
        }

        let jobs: Vec<(usize, &MentionRecord)> = records.iter().enumerate().collect();
        let outcomes = par::map_ordered(&jobs, |&(i, rec)| match &candidate_sets[i] {
            Ok(set) => self.link_prepared(rec, set.clone(), &summaries, charged[i]),
            Err(e) => Err(PipelineError::Config(e.to_string())),
        });

        let mut decisions = Vec::new();
        let mut failures = Vec::new();
        // Summaries charged to a failed mention still count toward the run.
        let mut tokens = StageTokens::default();
        for (i, outcome) in outcomes.into_iter().enumerate() {
            match outcome {
                Ok(d) => {
                    tokens += d.tokens;
                    decisions.push(d);
                }
                Err(e) => {
                    log::warn!("mention {:?} failed: {e}", records[i].id);
                    tokens.summarize += charged[i];
                    failures.push(MentionFailure { index: i, mention_id: records[i].id.clone(), message: e.to_string() });
                }
            }
        }
        let manifest = RunManifest {
            config_hash: self.config.hash(),
            seed: self.config.seed,
            dataset_id: self.config.dataset_id.clone(),
            backends: self.backends.ids(),
            mentions: records.len(),
            decisions: decisions.len(),
            errors: failures.len(),
            failures,
            total: tokens.total(),
            tokens,
        };
        Ok(BatchOutput { decisions, manifest })
    }

    /// Distills a chain-of-thought pool from labelled `training` records with
    /// the contextual backend as teacher. Candidate summaries are computed
    /// first and their cost is included in the returned usage.
    pub fn build_pool(&self, training: &[MentionRecord]) -> Result<PoolBuild, PipelineError> {
        let mut seen = HashSet::new();
        let mut ids = Vec::new();
        for r in training {
            for id in self.candidates(r)?.ids {
                if seen.insert(id.clone()) {
                    ids.push(id);
                }
            }
        }
        let results = self.summarize_all(&ids);
        let summary_usage: TokenUsage = results.iter().map(|(_, u)| *u).sum();
        let summaries: HashMap<String, String> = ids
            .into_iter()
            .zip(results)
            .filter_map(|(id, (r, _))| r.ok().map(|s| (id, s)))
            .collect();
        let teacher = self.linker_for(self.backends.contextual.as_ref());
        let classifier = self.classifier();
        let builder = PoolBuilder {
            teacher: &teacher,
            classifier: &classifier,
            embedder: self.embedder.as_ref(),
            categories: &self.config.selector.categories,
        };
        let mut build = builder.build(training, |rec| {
            self.candidates(rec)
                .map_err(|e| LinkerError::UnknownEntity(e.to_string()))?
                .ids
                .iter()
                .map(|id| {
                    let e = self.entity(id);
                    let text = summaries.get(id).ok_or_else(|| LinkerError::UnknownEntity(id.clone()))?;
                    Ok(CandidateView { id: id.clone(), title: e.title.clone(), text: text.clone() })
                })
                .collect()
        });
        build.usage += summary_usage;
        Ok(build)
    }

    /// Summarizes every entity listed by `records`, returning how many
    /// summaries were newly computed.
    pub fn summarize_dataset(&self, records: &[MentionRecord]) -> Result<(usize, TokenUsage), PipelineError> {
        let mut seen = HashSet::new();
        let mut ids = Vec::new();
        for r in records {
            for id in self.candidates(r)?.ids {
                if seen.insert(id.clone()) {
                    ids.push(id);
                }
            }
        }
        let fresh: Vec<String> = ids
            .into_iter()
            .filter(|id| self.summarizer.cached(self.entity(id)).is_none())
            .collect();
        let results = par::map_ordered(&fresh, |id| self.summarizer.summarize(self.entity(id)));
        let mut usage = TokenUsage::default();
        for r in results {
            usage += r?.1;
        }
        Ok((fresh.len(), usage))
    }
}
