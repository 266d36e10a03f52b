//! Chain-of-thought exemplar pool and adaptive selection.
//!
//! An exemplar is scored against a test mention as
//! `alpha * cos(context_i, context_test) + (1 - alpha) * [category_i == category_test]`
//! and the top `n` exemplars go into the contextual prompt.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::hashing::fnv1a;
use crate::kb::MentionRecord;
use crate::linker::{CandidateView, Linker, LinkerError};
use crate::llm::{BackendError, CallOptions, LlmBackend, PromptTemplate, TemplateError, TokenUsage};
use crate::matching::word_occurrences;
use crate::par;

/// Label returned when a classifier reply names no configured category.
pub const OTHER_CATEGORY: &str = "other";

pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_EXEMPLARS: usize = 1;
pub const HASHING_DIM: usize = 1024;

/// Twelve top-level Wikipedia topic areas used by the mention classifier.
pub const DEFAULT_CATEGORIES: [&str; 12] = [
    "culture and the arts",
    "geography and places",
    "health and fitness",
    "history and events",
    "human activities",
    "mathematics and logic",
    "natural and physical sciences",
    "people and self",
    "philosophy and thinking",
    "religion and belief systems",
    "society and social sciences",
    "technology and applied sciences",
];

#[derive(Debug, thiserror::Error)]
pub enum ExemplarError {
    #[error("text has no words to embed")]
    EmptyText,
    #[error("invalid selector config: {0}")]
    Config(String),
    #[error("pool file {path}: {message}")]
    PoolFile { path: String, message: String },
    #[error("pool was built with embedder {found} (dim {found_dim}) but {expected} (dim {expected_dim}) is configured")]
    EmbedderMismatch {
        found: String,
        found_dim: usize,
        expected: String,
        expected_dim: usize,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorConfig {
    pub alpha: f64,
    pub n: usize,
    pub categories: Vec<String>,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            n: DEFAULT_EXEMPLARS,
            categories: DEFAULT_CATEGORIES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl SelectorConfig {
    pub fn validate(&self) -> Result<(), ExemplarError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(ExemplarError::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.n == 0 {
            return Err(ExemplarError::Config("n must be at least 1".into()));
        }
        if self.categories.is_empty() {
            return Err(ExemplarError::Config("category list is empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &self.categories {
            if !seen.insert(c.to_lowercase()) {
                return Err(ExemplarError::Config(format!("duplicate category {c:?}")));
            }
        }
        Ok(())
    }
}

/// Maps context text to a unit vector.
pub trait ContextEmbedder: Send + Sync {
    /// Name recorded in pool files; pools only load under the same id.
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>, ExemplarError>;
}

/// Term frequencies of lower-cased words hashed into `dim` buckets, L2-normalized.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self { dim: HASHING_DIM }
    }
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { dim: dim.max(1) }
    }

    pub fn bucket(&self, word: &str) -> usize {
        (fnv1a(word.as_bytes()) % self.dim as u64) as usize
    }
}

/// Lower-cased alphanumeric runs; `###` markers and punctuation drop out.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

impl ContextEmbedder for HashingEmbedder {
    fn id(&self) -> &str {
        "hashing-tf"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, ExemplarError> {
        let mut v = vec![0.0; self.dim];
        for w in words(text) {
            v[self.bucket(&w)] += 1.0;
        }
        normalize(v).ok_or(ExemplarError::EmptyText)
    }
}

/// Scales `v` to unit length; `None` for the zero vector.
pub fn normalize(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Some(v)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A solved example kept only because the teacher got it right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub id: String,
    pub mention: String,
    pub context: String,
    /// Candidate titles in the order the teacher saw them.
    pub candidates: Vec<String>,
    pub reasoning: String,
    pub answer: String,
    pub category: String,
    pub vector: Vec<f64>,
}

impl Exemplar {
    /// Question and answer as they appear in the contextual prompt.
    pub fn render_block(&self) -> String {
        let lines: Vec<String> = self
            .candidates
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{}. {t}", i + 1))
            .collect();
        format!(
            "Mention:{}, Context:{}, \n{}\nAnswer: {}",
            self.mention,
            self.context,
            lines.join("\n"),
            self.reasoning.trim()
        )
    }
}

/// Test-side features for scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryFeatures {
    pub vector: Vec<f64>,
    pub category: String,
}

/// `alpha * cos + (1 - alpha) * same_category`.
pub fn score_exemplar(test: &QueryFeatures, ex: &Exemplar, alpha: f64) -> f64 {
    let same = if ex.category == test.category { 1.0 } else { 0.0 };
    alpha * cosine(&test.vector, &ex.vector) + (1.0 - alpha) * same
}

/// Top `config.n` exemplars by score, ties broken by ascending id.
pub fn select_exemplars<'p>(
    test: &QueryFeatures,
    pool: &'p [Exemplar],
    config: &SelectorConfig,
) -> Vec<&'p Exemplar> {
    let mut scored: Vec<(f64, &Exemplar)> = pool
        .iter()
        .map(|ex| (score_exemplar(test, ex, config.alpha), ex))
        .collect();
    scored.sort_by(|a, b| match b.0.total_cmp(&a.0) {
        Ordering::Equal => a.1.id.cmp(&b.1.id),
        o => o,
    });
    scored.into_iter().take(config.n).map(|(_, ex)| ex).collect()
}

/// The configured category appearing earliest in `reply`, or [`OTHER_CATEGORY`].
pub fn pick_category(reply: &str, categories: &[String]) -> String {
    let lower = reply.to_lowercase();
    categories
        .iter()
        .filter_map(|c| word_occurrences(&lower, c).first().map(|r| (r.start, c)))
        // Earliest start; at the same start the longer name wins.
        .min_by(|a, b| a.0.cmp(&b.0).then_with(|| b.1.len().cmp(&a.1.len())))
        .map_or_else(|| OTHER_CATEGORY.to_string(), |(_, c)| c.clone())
}

pub struct MentionClassifier<'a> {
    pub backend: &'a dyn LlmBackend,
    pub template: &'a PromptTemplate,
    pub options: CallOptions,
}

impl MentionClassifier<'_> {
    pub fn classify(
        &self,
        mention: &str,
        context: &str,
        categories: &[String],
    ) -> Result<(String, TokenUsage), ExemplarError> {
        if categories.is_empty() {
            return Err(ExemplarError::Config("category list is empty".into()));
        }
        let listed = categories.join(", ");
        let prompt = self.template.render(&[
            ("categories", &listed),
            ("mention", mention),
            ("context", context),
        ])?;
        let result = self.backend.complete(&self.options.request(prompt))?;
        Ok((pick_category(&result.text, categories), TokenUsage::of(&result)))
    }
}

const POOL_FORMAT: &str = "onenet-exemplar-pool";
const POOL_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct PoolHeader {
    format: String,
    version: u32,
    embedder: String,
    dim: usize,
}

/// Exemplars plus the embedder that produced their vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarPool {
    pub embedder: String,
    pub dim: usize,
    pub exemplars: Vec<Exemplar>,
}

impl ExemplarPool {
    pub fn empty(embedder: &dyn ContextEmbedder) -> Self {
        Self {
            embedder: embedder.id().to_string(),
            dim: embedder.dim(),
            exemplars: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.exemplars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exemplars.is_empty()
    }

    /// JSONL: a header line, then one exemplar per line.
    pub fn to_jsonl(&self) -> String {
        let header = PoolHeader {
            format: POOL_FORMAT.into(),
            version: POOL_VERSION,
            embedder: self.embedder.clone(),
            dim: self.dim,
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for ex in &self.exemplars {
            out.push_str(&serde_json::to_string(ex).expect("exemplar serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ExemplarError> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()).map_err(|e| ExemplarError::PoolFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// Loads a pool, refusing one built with a different embedder.
    pub fn load(path: impl AsRef<Path>, embedder: &dyn ContextEmbedder) -> Result<Self, ExemplarError> {
        let path = path.as_ref();
        let err = |message: String| ExemplarError::PoolFile {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let Some((_, first)) = lines.next() else {
            return Err(err("missing header".into()));
        };
        let header: PoolHeader =
            serde_json::from_str(first).map_err(|e| err(format!("bad header: {e}")))?;
        if header.format != POOL_FORMAT || header.version != POOL_VERSION {
            return Err(err(format!("unsupported format {} v{}", header.format, header.version)));
        }
        if header.embedder != embedder.id() || header.dim != embedder.dim() {
            return Err(ExemplarError::EmbedderMismatch {
                found: header.embedder,
                found_dim: header.dim,
                expected: embedder.id().to_string(),
                expected_dim: embedder.dim(),
            });
        }
        let mut exemplars = Vec::new();
        for (i, line) in lines {
            let ex: Exemplar =
                serde_json::from_str(line).map_err(|e| err(format!("line {}: {e}", i + 1)))?;
            if ex.vector.len() != header.dim {
                return Err(err(format!("line {}: vector has dim {}", i + 1, ex.vector.len())));
            }
            let norm = ex.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(err(format!("line {}: vector norm {norm} is not 1", i + 1)));
            }
            exemplars.push(ex);
        }
        Ok(Self {
            embedder: header.embedder,
            dim: header.dim,
            exemplars,
        })
    }
}

/// Everything needed to distill a pool from labelled training mentions.
pub struct PoolBuilder<'a> {
    /// The strong model whose reasoning is distilled.
    pub teacher: &'a Linker<'a>,
    pub classifier: &'a MentionClassifier<'a>,
    pub embedder: &'a dyn ContextEmbedder,
    pub categories: &'a [String],
}

#[derive(Debug, Clone)]
pub struct PoolBuild {
    pub pool: ExemplarPool,
    pub total: usize,
    /// Records skipped because a call failed.
    pub failed: usize,
    pub usage: TokenUsage,
}

impl PoolBuilder<'_> {
    /// Queries the teacher with the exemplar-free contextual prompt for each
    /// record and keeps the reply only when it names the gold entity.
    /// `candidates` resolves a record to the entities shown to the teacher.
    pub fn build<F>(&self, training: &[MentionRecord], candidates: F) -> PoolBuild
    where
        F: Fn(&MentionRecord) -> Result<Vec<CandidateView>, LinkerError> + Sync,
    {
        let outcomes = par::map_ordered(training, |rec| self.distill_one(rec, &candidates));
        let mut pool = ExemplarPool::empty(self.embedder);
        let mut failed = 0;
        let mut usage = TokenUsage::default();
        for (rec, outcome) in training.iter().zip(outcomes) {
            match outcome {
                Ok((ex, u)) => {
                    usage += u;
                    pool.exemplars.extend(ex);
                }
                Err(e) => {
                    log::warn!("skipping training record {:?}: {e}", rec.id);
                    failed += 1;
                }
            }
        }
        PoolBuild {
            pool,
            total: training.len(),
            failed,
            usage,
        }
    }

    fn distill_one<F>(
        &self,
        rec: &MentionRecord,
        candidates: &F,
    ) -> Result<(Option<Exemplar>, TokenUsage), DistillError>
    where
        F: Fn(&MentionRecord) -> Result<Vec<CandidateView>, LinkerError>,
    {
        let gold = rec.gold.as_deref().ok_or(DistillError::NoGold)?;
        let views = candidates(rec)?;
        let out = self
            .teacher
            .link_contextual(&rec.id, &rec.mention, &rec.context, &views, &[])?;
        let mut usage = out.usage;
        if out.predicted.as_deref() != Some(gold) {
            return Ok((None, usage));
        }
        let (category, u) = self
            .classifier
            .classify(&rec.mention, &rec.context, self.categories)?;
        usage += u;
        let vector = self.embedder.embed(&rec.context)?;
        let titles = out
            .presented
            .iter()
            .map(|id| {
                views
                    .iter()
                    .find(|v| &v.id == id)
                    .map(|v| v.title.clone())
                    .unwrap_or_default()
            })
            .collect();
        Ok((
            Some(Exemplar {
                id: rec.id.clone(),
                mention: rec.mention.clone(),
                context: rec.context.clone(),
                candidates: titles,
                reasoning: out.raw_reply,
                answer: gold.to_string(),
                category,
                vector,
            }),
            usage,
        ))
    }
}

#[derive(Debug, thiserror::Error)]
enum DistillError {
    #[error("record has no gold entity")]
    NoGold,
    #[error(transparent)]
    Linker(#[from] LinkerError),
    #[error(transparent)]
    Exemplar(#[from] ExemplarError),
}
