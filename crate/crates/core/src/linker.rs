//! Contextual and prior linkers over a reduced candidate set.
//!
//! Both linkers present candidates as `<serial>. <title>: <summary>` lines,
//! serials from 1, in an order shuffled per mention. Replies are read with a
//! fixed cascade:
//!
//! 1. an explicit `-1.None` abstains;
//! 2. a serial in range picks that candidate (a `N. Title` pair that agrees
//!    with the presentation is preferred, else the last bare `N.`);
//! 3. otherwise the candidate title occurring first in the reply, with
//!    longer titles claiming their span before shorter ones;
//! 4. otherwise the reply is unparsed and the linker abstains.

use std::ops::Range;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::exemplar::Exemplar;
use crate::hashing::digest_u64;
use crate::kb::is_marked;
use crate::llm::{BackendError, CallOptions, LlmBackend, TemplateError, TemplateSet, TokenUsage};
use crate::matching::word_occurrences;

#[derive(Debug, thiserror::Error)]
pub enum LinkerError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("no candidates to link")]
    NoCandidates,
    #[error("context does not mark mention {0:?} with ###")]
    UnmarkedContext(String),
    #[error("unknown entity {0:?}")]
    UnknownEntity(String),
}

/// A candidate as the model sees it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateView {
    pub id: String,
    pub title: String,
    /// Summary, or the description when no summary exists.
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParseMethod {
    Serial,
    TitleOccurrence,
    NoneToken,
    Unparsed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkerOutput {
    /// `None` is an abstention.
    pub predicted: Option<String>,
    pub raw_reply: String,
    pub parse_method: ParseMethod,
    /// Candidate ids in the order they were presented.
    pub presented: Vec<String>,
    pub usage: TokenUsage,
}

/// Presentation order for one mention: a shuffle seeded by (dataset, mention, seed).
pub fn presentation_order(ids: &[String], dataset_id: &str, mention_id: &str, seed: u64) -> Vec<String> {
    let key = digest_u64(&[dataset_id.as_bytes(), mention_id.as_bytes(), &seed.to_le_bytes()]);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let mut order = ids.to_vec();
    order.shuffle(&mut rng);
    order
}

/// `1. Title: text` lines, one per candidate.
pub fn format_candidates(views: &[&CandidateView]) -> String {
    views
        .iter()
        .enumerate()
        .map(|(i, v)| format!("{}. {}: {}", i + 1, v.title, v.text))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Reads a reply against candidates listed as `(id, title)` in presentation order.
pub fn parse_reply(reply: &str, presented: &[(&str, &str)]) -> (Option<String>, ParseMethod) {
    static NONE: OnceLock<Regex> = OnceLock::new();
    static SERIAL: OnceLock<Regex> = OnceLock::new();
    let none = NONE.get_or_init(|| Regex::new(r"(?i)-\s*1\s*\.\s*none\b").expect("static regex"));
    let serial = SERIAL
        .get_or_init(|| Regex::new(r"(?:^|[^\w.\-])(\d{1,4})[ \t]*\.").expect("static regex"));

    if none.is_match(reply) {
        return (None, ParseMethod::NoneToken);
    }

    let lower = reply.to_lowercase();
    let mut paired = None;
    let mut bare = None;
    for cap in serial.captures_iter(reply) {
        let whole = cap.get(0).expect("group 0");
        if reply[whole.end()..].starts_with(|c: char| c.is_ascii_digit()) {
            continue; // a decimal like 2.5
        }
        let Ok(n) = cap[1].parse::<usize>() else { continue };
        if n == 0 || n > presented.len() {
            continue;
        }
        let (id, title) = presented[n - 1];
        bare = Some(id);
        let rest = reply[whole.end()..].trim_start_matches([' ', '\t', '"', '\'', '*']);
        if rest.to_lowercase().starts_with(&title.to_lowercase()) {
            paired = Some(id);
        }
    }
    if let Some(id) = paired.or(bare) {
        return (Some(id.to_string()), ParseMethod::Serial);
    }

    match first_title(&lower, presented) {
        Some(id) => (Some(id.to_string()), ParseMethod::TitleOccurrence),
        None => (None, ParseMethod::Unparsed),
    }
}

fn first_title<'a>(lower: &str, presented: &[(&'a str, &str)]) -> Option<&'a str> {
    let mut by_len: Vec<&(&str, &str)> = presented.iter().collect();
    by_len.sort_by_key(|b| std::cmp::Reverse(b.1.len()));
    let mut claimed: Vec<Range<usize>> = Vec::new();
    let mut best: Option<(usize, &str)> = None;
    for (id, title) in by_len {
        for occ in word_occurrences(lower, title) {
            if claimed.iter().any(|c| c.start < occ.end && occ.start < c.end) {
                continue;
            }
            if best.is_none_or(|(start, _)| occ.start < start) {
                best = Some((occ.start, id));
            }
            claimed.push(occ);
        }
    }
    best.map(|(_, id)| id)
}

/// Both linking perspectives, sharing a backend and prompt set.
pub struct Linker<'a> {
    pub backend: &'a dyn LlmBackend,
    pub templates: &'a TemplateSet,
    pub options: CallOptions,
    pub dataset_id: &'a str,
}

impl Linker<'_> {
    /// Links with context and chain-of-thought exemplars.
    pub fn link_contextual(
        &self,
        mention_id: &str,
        mention: &str,
        context: &str,
        candidates: &[CandidateView],
        exemplars: &[&Exemplar],
    ) -> Result<LinkerOutput, LinkerError> {
        if !is_marked(context, mention) {
            return Err(LinkerError::UnmarkedContext(mention.to_string()));
        }
        let prompt = self.contextual_prompt(mention_id, mention, context, candidates, exemplars)?;
        self.run(prompt, mention_id, candidates)
    }

    /// Links on prior knowledge alone: no context, no exemplars.
    pub fn link_prior(
        &self,
        mention_id: &str,
        mention: &str,
        candidates: &[CandidateView],
    ) -> Result<LinkerOutput, LinkerError> {
        let prompt = self.prior_prompt(mention_id, mention, candidates)?;
        self.run(prompt, mention_id, candidates)
    }

    pub fn contextual_prompt(
        &self,
        mention_id: &str,
        mention: &str,
        context: &str,
        candidates: &[CandidateView],
        exemplars: &[&Exemplar],
    ) -> Result<String, LinkerError> {
        let listed = self.listing(mention_id, candidates)?;
        let exemplar_text = if exemplars.is_empty() {
            String::new()
        } else {
            let blocks: Vec<String> = exemplars.iter().map(|e| e.render_block()).collect();
            self.templates
                .exemplar
                .render(&[("exemplars", &blocks.join("\n\n"))])?
        };
        Ok(self.templates.contextual.render(&[
            ("instruction", &self.templates.instruction),
            ("exemplars", &exemplar_text),
            ("mention", mention),
            ("context", context),
            ("candidates", &listed),
        ])?)
    }

    pub fn prior_prompt(
        &self,
        mention_id: &str,
        mention: &str,
        candidates: &[CandidateView],
    ) -> Result<String, LinkerError> {
        let listed = self.listing(mention_id, candidates)?;
        Ok(self
            .templates
            .prior
            .render(&[("mention", mention), ("candidates", &listed)])?)
    }

    fn ordered<'c>(&self, mention_id: &str, candidates: &'c [CandidateView]) -> Result<Vec<&'c CandidateView>, LinkerError> {
        if candidates.is_empty() {
            return Err(LinkerError::NoCandidates);
        }
        let ids: Vec<String> = candidates.iter().map(|c| c.id.clone()).collect();
        let order = presentation_order(&ids, self.dataset_id, mention_id, self.options.seed);
        Ok(order
            .iter()
            .map(|id| candidates.iter().find(|c| &c.id == id).expect("permutation of input"))
            .collect())
    }

    fn listing(&self, mention_id: &str, candidates: &[CandidateView]) -> Result<String, LinkerError> {
        Ok(format_candidates(&self.ordered(mention_id, candidates)?))
    }

    fn run(&self, prompt: String, mention_id: &str, candidates: &[CandidateView]) -> Result<LinkerOutput, LinkerError> {
        let ordered = self.ordered(mention_id, candidates)?;
        let result = self.backend.complete(&self.options.request(prompt))?;
        let pairs: Vec<(&str, &str)> = ordered.iter().map(|c| (c.id.as_str(), c.title.as_str())).collect();
        let (predicted, parse_method) = parse_reply(&result.text, &pairs);
        Ok(LinkerOutput {
            predicted,
            parse_method,
            presented: ordered.iter().map(|c| c.id.clone()).collect(),
            usage: TokenUsage::of(&result),
            raw_reply: result.text,
        })
    }
}
