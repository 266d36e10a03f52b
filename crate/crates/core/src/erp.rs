//! Entity reduction: one-sentence entity summaries and point-wise candidate filtering.

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::{Arc, OnceLock, RwLock};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::hashing::digest_parts;
use crate::kb::{is_marked, CandidateSet, Entity, EntityStore};
use crate::llm::{
    write_atomic, BackendError, CallOptions, LlmBackend, PromptTemplate, TemplateError, TokenUsage,
};
use crate::par;

/// Words kept when a summary cannot be produced.
pub const FALLBACK_SUMMARY_WORDS: usize = 50;

#[derive(Debug, thiserror::Error)]
pub enum ErpError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("entity {0:?} has an empty description")]
    EmptyDescription(String),
    #[error("summarizer returned an empty reply for {0:?}")]
    EmptySummary(String),
    #[error("context does not mark mention {0:?} with ###")]
    UnmarkedContext(String),
    #[error("candidate set is empty")]
    NoCandidates,
    #[error("unknown entity {0:?}")]
    UnknownEntity(String),
    #[error("summary cache at {path}: {message}")]
    Cache { path: String, message: String },
}

/// Outcome of the yes/no filter prompt for one candidate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub entity_id: String,
    pub keep: bool,
    pub raw_reply: String,
}

/// What reduction did to one mention's candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionReport {
    pub mention_id: String,
    pub original_size: usize,
    pub retained: Vec<String>,
    pub filtering_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_retained: Option<bool>,
    /// Every verdict was "no" and the full set was restored.
    pub fallback: bool,
    pub verdicts: Vec<FilterVerdict>,
}

/// Reduced candidates plus what it cost.
#[derive(Debug, Clone)]
pub struct Reduction {
    pub candidates: CandidateSet,
    pub report: ReductionReport,
    pub usage: TokenUsage,
}

/// Reads the reply's final standalone yes/no, case-insensitively.
/// `None` when neither word occurs.
pub fn parse_yes_no(reply: &str) -> Option<bool> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"(?i)\b(yes|no)\b").expect("static regex"));
    re.find_iter(reply)
        .last()
        .map(|m| m.as_str().eq_ignore_ascii_case("yes"))
}

/// Summaries keyed by entity id, in memory and optionally on disk
/// (one text file per id, named by the hex SHA-256 of the id).
pub struct Summarizer {
    backend: Arc<dyn LlmBackend>,
    template: PromptTemplate,
    options: CallOptions,
    dir: Option<PathBuf>,
    memory: RwLock<HashMap<String, String>>,
}

impl Summarizer {
    pub fn new(backend: Arc<dyn LlmBackend>, template: PromptTemplate, options: CallOptions) -> Self {
        Self {
            backend,
            template,
            options,
            dir: None,
            memory: RwLock::new(HashMap::new()),
        }
    }

    pub fn with_cache_dir(mut self, dir: impl Into<PathBuf>) -> Result<Self, ErpError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| ErpError::Cache {
            path: dir.display().to_string(),
            message: e.to_string(),
        })?;
        self.dir = Some(dir);
        Ok(self)
    }

    fn file_for(&self, id: &str) -> Option<PathBuf> {
        self.dir
            .as_ref()
            .map(|d| d.join(format!("{}.txt", digest_parts(&[id.as_bytes()]))))
    }

    /// A summary that is already known: on the entity, in memory, or on disk.
    pub fn cached(&self, entity: &Entity) -> Option<String> {
        if let Some(s) = &entity.summary {
            return Some(s.clone());
        }
        if let Some(s) = self.memory.read().expect("summary lock").get(&entity.id) {
            return Some(s.clone());
        }
        let text = fs::read_to_string(self.file_for(&entity.id)?).ok()?;
        let text = text.trim().to_string();
        if text.is_empty() {
            return None;
        }
        self.memory
            .write()
            .expect("summary lock")
            .insert(entity.id.clone(), text.clone());
        Some(text)
    }

    /// Summarizes `entity`, making no call when a summary is cached.
    pub fn summarize(&self, entity: &Entity) -> Result<(String, TokenUsage), ErpError> {
        match self.summarize_inner(entity)? {
            (Some(text), usage) => Ok((text, usage)),
            (None, _) => Err(ErpError::EmptySummary(entity.id.clone())),
        }
    }

    /// Like [`summarize`](Self::summarize) but an empty description or reply
    /// degrades to the description's first words. Backend errors still propagate.
    pub fn summary_or_truncated(&self, entity: &Entity) -> Result<(String, TokenUsage), ErpError> {
        let (text, usage) = match self.summarize_inner(entity) {
            Ok(r) => r,
            Err(ErpError::EmptyDescription(_)) => (None, TokenUsage::default()),
            Err(e) => return Err(e),
        };
        let text = text.unwrap_or_else(|| {
            log::warn!("summary unavailable for {:?}; truncating description", entity.id);
            truncate_words(&entity.description, FALLBACK_SUMMARY_WORDS, &entity.title)
        });
        Ok((text, usage))
    }

    fn summarize_inner(&self, entity: &Entity) -> Result<(Option<String>, TokenUsage), ErpError> {
        if let Some(s) = self.cached(entity) {
            return Ok((Some(s), TokenUsage::default()));
        }
        if entity.description.trim().is_empty() {
            return Err(ErpError::EmptyDescription(entity.id.clone()));
        }
        let prompt = self.template.render(&[
            ("mention", &entity.title),
            ("description", &entity.description),
        ])?;
        let result = self.backend.complete(&self.options.request(prompt))?;
        let usage = TokenUsage::of(&result);
        let text = result.text.trim().to_string();
        if text.is_empty() {
            return Ok((None, usage));
        }
        if let Some(path) = self.file_for(&entity.id) {
            write_atomic(&path, text.as_bytes()).map_err(|e| ErpError::Cache {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        }
        self.memory
            .write()
            .expect("summary lock")
            .insert(entity.id.clone(), text.clone());
        Ok((Some(text), usage))
    }
}

fn truncate_words(text: &str, n: usize, fallback: &str) -> String {
    let words: Vec<&str> = text.split_whitespace().take(n).collect();
    if words.is_empty() {
        fallback.to_string()
    } else {
        words.join(" ")
    }
}

/// Runs the point-wise filter prompt.
pub struct CandidateFilter<'a> {
    pub backend: &'a dyn LlmBackend,
    pub template: &'a PromptTemplate,
    pub instruction: &'a str,
    pub options: CallOptions,
}

impl CandidateFilter<'_> {
    /// One yes/no judgement; `display` is the entity text shown (summary or description).
    /// A reply with neither word keeps the candidate.
    pub fn filter_candidate(
        &self,
        mention: &str,
        context: &str,
        entity: &Entity,
        display: &str,
    ) -> Result<(FilterVerdict, TokenUsage), ErpError> {
        if !is_marked(context, mention) {
            return Err(ErpError::UnmarkedContext(mention.to_string()));
        }
        let candidate = format!("{}: {}", entity.title, display);
        let prompt = self.template.render(&[
            ("instruction", self.instruction),
            ("mention", mention),
            ("context", context),
            ("candidates", &candidate),
        ])?;
        let result = self.backend.complete(&self.options.request(prompt))?;
        let keep = parse_yes_no(&result.text).unwrap_or(true);
        Ok((
            FilterVerdict {
                entity_id: entity.id.clone(),
                keep,
                raw_reply: result.text.clone(),
            },
            TokenUsage::of(&result),
        ))
    }

    /// Filters every candidate independently, keeping survivors in input order.
    /// If nothing survives the full set is restored and the report says so.
    #[allow(clippy::too_many_arguments)]
    pub fn reduce<D>(
        &self,
        mention_id: &str,
        mention: &str,
        context: &str,
        candidates: &CandidateSet,
        store: &EntityStore,
        display: D,
        gold: Option<&str>,
    ) -> Result<Reduction, ErpError>
    where
        D: Fn(&Entity) -> String + Sync,
    {
        if candidates.is_empty() {
            return Err(ErpError::NoCandidates);
        }
        let entities = candidates
            .ids
            .iter()
            .map(|id| store.get(id).ok_or_else(|| ErpError::UnknownEntity(id.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        let results = par::map_ordered(&entities, |e| {
            self.filter_candidate(mention, context, e, &display(e))
        });
        let mut verdicts = Vec::with_capacity(results.len());
        let mut usage = TokenUsage::default();
        for r in results {
            let (v, u) = r?;
            usage += u;
            verdicts.push(v);
        }
        let mut retained: Vec<String> = verdicts
            .iter()
            .filter(|v| v.keep)
            .map(|v| v.entity_id.clone())
            .collect();
        let fallback = retained.is_empty();
        if fallback {
            log::info!("{mention_id}: filter rejected all {} candidates; keeping them all", candidates.len());
            retained = candidates.ids.clone();
        }
        let report = ReductionReport {
            mention_id: mention_id.to_string(),
            original_size: candidates.len(),
            filtering_rate: 1.0 - retained.len() as f64 / candidates.len() as f64,
            gold_retained: gold.map(|g| retained.iter().any(|id| id == g)),
            retained: retained.clone(),
            fallback,
            verdicts,
        };
        Ok(Reduction {
            candidates: CandidateSet {
                ids: retained,
                alias: candidates.alias.clone(),
            },
            report,
            usage,
        })
    }
}

/// Identity reduction, used when the filter stage is ablated.
pub fn identity_reduction(mention_id: &str, candidates: &CandidateSet, gold: Option<&str>) -> ReductionReport {
    ReductionReport {
        mention_id: mention_id.to_string(),
        original_size: candidates.len(),
        retained: candidates.ids.clone(),
        filtering_rate: 0.0,
        gold_retained: gold.map(|g| candidates.contains(g)),
        fallback: false,
        verdicts: Vec::new(),
    }
}
