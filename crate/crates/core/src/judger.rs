//! Consistency merge of the contextual and prior predictions.
//!
//! Agreeing predictions are returned as is. When exactly one side abstains
//! the other is returned. Only a genuine disagreement costs a model call: both
//! entities are shown as serials 1 (contextual) and 2 (prior) and the reply
//! is read with the linker cascade.

use serde::{Deserialize, Serialize};

use crate::linker::{format_candidates, parse_reply, CandidateView, LinkerError, ParseMethod};
use crate::llm::{CallOptions, LlmBackend, TemplateSet, TokenUsage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConsensusPath {
    Agreement,
    Merged,
    SingleSided,
    DoubleAbstain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusOutcome {
    pub result: Option<String>,
    pub path: ConsensusPath,
    /// Present exactly when `path` is `Merged`.
    pub merge_reply: Option<String>,
    /// The merge reply named neither entity and the contextual side was kept.
    #[serde(default)]
    pub merge_fallback: bool,
    pub usage: TokenUsage,
}

impl ConsensusOutcome {
    fn free(result: Option<String>, path: ConsensusPath) -> Self {
        Self {
            result,
            path,
            merge_reply: None,
            merge_fallback: false,
            usage: TokenUsage::default(),
        }
    }
}

pub struct Judger<'a> {
    pub backend: &'a dyn LlmBackend,
    pub templates: &'a TemplateSet,
    pub options: CallOptions,
}

impl Judger<'_> {
    pub fn judge(
        &self,
        e_context: Option<&CandidateView>,
        e_prior: Option<&CandidateView>,
        mention: &str,
        context: &str,
    ) -> Result<ConsensusOutcome, LinkerError> {
        match (e_context, e_prior) {
            (None, None) => Ok(ConsensusOutcome::free(None, ConsensusPath::DoubleAbstain)),
            (Some(one), None) | (None, Some(one)) => {
                Ok(ConsensusOutcome::free(Some(one.id.clone()), ConsensusPath::SingleSided))
            }
            (Some(c), Some(p)) if c.id == p.id => {
                Ok(ConsensusOutcome::free(Some(c.id.clone()), ConsensusPath::Agreement))
            }
            (Some(c), Some(p)) => {
                let prompt = self.merge_prompt(c, p, mention, context)?;
                let result = self.backend.complete(&self.options.request(prompt))?;
                let pairs = [(c.id.as_str(), c.title.as_str()), (p.id.as_str(), p.title.as_str())];
                let (picked, method) = parse_reply(&result.text, &pairs);
                let merge_fallback = picked.is_none();
                if merge_fallback {
                    let how = if method == ParseMethod::NoneToken { "rejected both" } else { "was unparsed" };
                    log::warn!("merge reply for {mention:?} {how}; keeping contextual prediction {:?}", c.id);
                }
                Ok(ConsensusOutcome {
                    result: Some(picked.unwrap_or_else(|| c.id.clone())),
                    path: ConsensusPath::Merged,
                    usage: TokenUsage::of(&result),
                    merge_reply: Some(result.text),
                    merge_fallback,
                })
            }
        }
    }

    pub fn merge_prompt(
        &self,
        e_context: &CandidateView,
        e_prior: &CandidateView,
        mention: &str,
        context: &str,
    ) -> Result<String, LinkerError> {
        let listed = format_candidates(&[e_context, e_prior]);
        Ok(self.templates.merge.render(&[
            ("instruction", &self.templates.instruction),
            ("mention", mention),
            ("context", context),
            ("candidates", &listed),
        ])?)
    }
}
