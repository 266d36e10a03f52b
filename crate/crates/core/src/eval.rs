//! Micro-F1, accuracy, reduction statistics and token accounting.
//!
//! Abstentions lower recall but are left out of the precision denominator,
//! unless strict mode counts them as wrong predictions.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::erp::ReductionReport;
use crate::kb::MentionRecord;
use crate::pipeline::LinkDecision;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("no decision for mention {0:?}")]
    MissingDecision(String),
    #[error("decision for {0:?} has no matching gold record")]
    UnexpectedDecision(String),
    #[error("duplicate decision for mention {0:?}")]
    DuplicateDecision(String),
    #[error("mention {0:?} has no gold entity")]
    MissingGold(String),
}

/// One scored mention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Judged<'a> {
    pub predicted: Option<&'a str>,
    pub gold: &'a str,
    /// Gold is among the original candidates.
    pub reachable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n_mentions: usize,
    pub n_predicted: usize,
    pub n_correct: usize,
    pub n_reachable: usize,
    pub normalized_accuracy: f64,
    pub unnormalized_accuracy: f64,
    pub strict: bool,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn micro_f1(items: &[Judged<'_>], strict: bool) -> ScoreReport {
    let n = items.len();
    let predicted = items.iter().filter(|j| j.predicted.is_some()).count();
    let correct = items.iter().filter(|j| j.predicted == Some(j.gold)).count();
    let reachable = items.iter().filter(|j| j.reachable).count();
    let reachable_correct = items
        .iter()
        .filter(|j| j.reachable && j.predicted == Some(j.gold))
        .count();
    let precision = ratio(correct, if strict { n } else { predicted });
    let recall = ratio(correct, n);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    ScoreReport {
        precision,
        recall,
        f1,
        n_mentions: n,
        n_predicted: predicted,
        n_correct: correct,
        n_reachable: reachable,
        normalized_accuracy: ratio(reachable_correct, reachable),
        unnormalized_accuracy: ratio(correct, n),
        strict,
    }
}

/// Aligns decisions to gold records by mention id and scores them.
pub fn score(decisions: &[LinkDecision], gold: &[MentionRecord], strict: bool) -> Result<ScoreReport, EvalError> {
    let mut by_id: HashMap<&str, &LinkDecision> = HashMap::new();
    for d in decisions {
        if by_id.insert(&d.mention_id, d).is_some() {
            return Err(EvalError::DuplicateDecision(d.mention_id.clone()));
        }
    }
    let mut items = Vec::with_capacity(gold.len());
    for rec in gold {
        let g = rec.gold.as_deref().ok_or_else(|| EvalError::MissingGold(rec.id.clone()))?;
        let d = by_id
            .remove(rec.id.as_str())
            .ok_or_else(|| EvalError::MissingDecision(rec.id.clone()))?;
        items.push(Judged {
            predicted: d.final_id.as_deref(),
            gold: g,
            reachable: d.candidates.iter().any(|c| c == g),
        });
    }
    if let Some(extra) = decisions.iter().find(|d| by_id.contains_key(d.mention_id.as_str())) {
        return Err(EvalError::UnexpectedDecision(extra.mention_id.clone()));
    }
    Ok(micro_f1(&items, strict))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErpStats {
    /// Share of labelled mentions whose gold survives reduction.
    pub recall: f64,
    pub filtering_rate: f64,
    pub avg_retained: f64,
    pub mentions: usize,
}

pub fn erp_stats(reports: &[ReductionReport]) -> ErpStats {
    let labelled: Vec<bool> = reports.iter().filter_map(|r| r.gold_retained).collect();
    let n = reports.len();
    let mean = |f: &dyn Fn(&ReductionReport) -> f64| {
        if n == 0 {
            0.0
        } else {
            reports.iter().map(f).sum::<f64>() / n as f64
        }
    };
    ErpStats {
        recall: ratio(labelled.iter().filter(|&&b| b).count(), labelled.len()),
        filtering_rate: mean(&|r| r.filtering_rate),
        avg_retained: mean(&|r| r.retained.len() as f64),
        mentions: n,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMean {
    pub stage: String,
    pub calls: u64,
    pub input_tokens: u64,
    /// Input tokens per call.
    pub mean_input_tokens: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenReport {
    pub stages: Vec<StageMean>,
    /// Sum of the per-call stage means, the input cost of one pass through
    /// every stage.
    pub framework_total: f64,
    /// Mean input tokens of a single prompt listing every original candidate
    /// with its full description.
    pub raw: f64,
    pub mentions: usize,
}

pub fn token_report(decisions: &[LinkDecision]) -> TokenReport {
    let names = crate::pipeline::StageTokens::default().stages().map(|(n, _)| n);
    let stages: Vec<StageMean> = names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let (calls, input) = decisions.iter().fold((0, 0), |(c, t), d| {
                let u = d.tokens.stages()[i].1;
                (c + u.calls, t + u.input_tokens)
            });
            StageMean {
                stage: name.to_string(),
                calls,
                input_tokens: input,
                mean_input_tokens: if calls == 0 { 0.0 } else { input as f64 / calls as f64 },
            }
        })
        .collect();
    let raw = if decisions.is_empty() {
        0.0
    } else {
        decisions.iter().map(|d| d.raw_prompt_tokens as f64).sum::<f64>() / decisions.len() as f64
    };
    TokenReport {
        framework_total: stages.iter().map(|s| s.mean_input_tokens).sum(),
        stages,
        raw,
        mentions: decisions.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub score: ScoreReport,
    pub erp: ErpStats,
    pub tokens: TokenReport,
}

impl EvalReport {
    pub fn build(decisions: &[LinkDecision], gold: &[MentionRecord], strict: bool) -> Result<Self, EvalError> {
        let reports: Vec<ReductionReport> = decisions.iter().map(|d| d.reduction.clone()).collect();
        Ok(Self {
            score: score(decisions, gold, strict)?,
            erp: erp_stats(&reports),
            tokens: token_report(decisions),
        })
    }

    pub fn to_table(&self) -> String {
        let s = &self.score;
        let mut out = String::new();
        let _ = writeln!(out, "{:<24}{:>10}", "metric", "value");
        let rows = [
            ("precision", s.precision),
            ("recall", s.recall),
            ("micro F1", s.f1),
            ("normalized accuracy", s.normalized_accuracy),
            ("unnormalized accuracy", s.unnormalized_accuracy),
            ("ERP recall", self.erp.recall),
            ("ERP filtering rate", self.erp.filtering_rate),
            ("ERP avg candidates", self.erp.avg_retained),
        ];
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<24}{v:>10.4}");
        }
        let _ = writeln!(
            out,
            "{:<24}{:>10}",
            "mentions (pred/correct)",
            format!("{}/{}/{}", s.n_mentions, s.n_predicted, s.n_correct)
        );
        let _ = writeln!(out, "\n{:<24}{:>10}{:>14}", "stage", "calls", "tokens/call");
        for st in &self.tokens.stages {
            let _ = writeln!(out, "{:<24}{:>10}{:>14.1}", st.stage, st.calls, st.mean_input_tokens);
        }
        let _ = writeln!(out, "{:<24}{:>10}{:>14.1}", "framework total", "", self.tokens.framework_total);
        let _ = writeln!(out, "{:<24}{:>10}{:>14.1}", "raw prompt", "", self.tokens.raw);
        out
    }
}
