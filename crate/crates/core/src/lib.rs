//! Few-shot entity linking driven entirely by prompted LLM calls.
//!
//! A mention flows through three stages:
//!
//! 1. [`erp`] reduces the candidate set: entity descriptions are condensed
//!    into one-sentence summaries and each candidate is judged point-wise
//!    with a yes/no prompt.
//! 2. [`linker`] links the mention twice over the reduced set, once with the
//!    context and chain-of-thought exemplars picked by [`exemplar`], once
//!    from the model's prior knowledge with the context hidden.
//! 3. [`judger`] merges the two predictions, calling the model again only
//!    when they disagree.
//!
//! [`pipeline`] wires the stages together and runs datasets in batch,
//! [`eval`] scores the results, and [`llm`] provides the completion
//! contract, a deterministic scripted mock and an HTTP chat client.

pub mod erp;
pub mod eval;
pub mod exemplar;
pub mod judger;
pub mod kb;
pub mod linker;
pub mod llm;
pub mod par;
pub mod pipeline;

mod hashing;
mod matching;

pub use erp::{FilterVerdict, ReductionReport};
pub use eval::{ScoreReport, TokenReport};
pub use exemplar::{Exemplar, ExemplarPool, SelectorConfig};
pub use judger::{ConsensusOutcome, ConsensusPath};
pub use kb::{AliasTable, CandidateSet, Entity, EntityStore, MentionRecord};
pub use linker::{LinkerOutput, ParseMethod};
pub use llm::{CompletionRequest, CompletionResult, LlmBackend, MockBackend, PromptTemplate};
pub use pipeline::{LinkDecision, Pipeline, PipelineConfig};
