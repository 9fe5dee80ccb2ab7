//! Ranking metrics for answer selection.
//!
//! Each question contributes one prediction (its highest-scoring candidate)
//! and has one gold candidate, so top-1 F1 coincides with top-1 accuracy. Ties always go to the earlier candidate.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::QuestionGroup;

/// Name of the generator behind [`random_baseline`], recorded in reports.
pub const BASELINE_RNG: &str = "ChaCha8";

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no questions to evaluate")]
    Empty,
    #[error("question {id}: {message}")]
    Invalid { id: String, message: String },
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Candidate scores for one question, in candidate order.
#[derive(Debug, Clone, PartialEq)]
pub struct QuestionScores {
    pub id: String,
    pub scores: Vec<f64>,
    pub gold: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionSet {
    pub questions: Vec<QuestionScores>,
}

impl PredictionSet {
    /// Pair each group with its scores; `scores[i]` must follow the
    /// candidate order of `groups[i]`.
    pub fn from_groups(groups: &[QuestionGroup], scores: Vec<Vec<f64>>) -> Result<Self> {
        let mut questions = Vec::with_capacity(groups.len());
        for (g, s) in groups.iter().zip(scores) {
            let id = format!("{}/{}", g.qid, g.translation);
            let gold = g.gold_index().ok_or_else(|| EvalError::Invalid {
                id: id.clone(),
                message: "no gold candidate".into(),
            })?;
            questions.push(QuestionScores { id, scores: s, gold });
        }
        let set = PredictionSet { questions };
        set.validate()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.questions.is_empty() {
            return Err(EvalError::Empty);
        }
        for q in &self.questions {
            let invalid = |message: &str| EvalError::Invalid {
                id: q.id.clone(),
                message: message.to_string(),
            };
            if q.scores.is_empty() {
                return Err(invalid("no candidates"));
            }
            if q.gold >= q.scores.len() {
                return Err(invalid("gold index out of range"));
            }
            if q.scores.iter().any(|s| !s.is_finite()) {
                return Err(invalid("non-finite score"));
            }
        }
        Ok(())
    }
}

/// 1-based position of `gold` after a stable descending sort of `scores`.
pub fn gold_rank(scores: &[f64], gold: usize) -> usize {
    let g = scores[gold];
    let above = scores.iter().filter(|&&s| s > g).count();
    let tied_before = scores[..gold].iter().filter(|&&s| s == g).count();
    above + tied_before + 1
}

/// Gold rank for every question, in input order.
pub fn rank_candidates(preds: &PredictionSet) -> Vec<usize> {
    preds
        .questions
        .iter()
        .map(|q| gold_rank(&q.scores, q.gold))
        .collect()
}

/// Index of the highest score; the lowest index wins ties.
pub fn select_answer(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Top-1 `(f1, precision, recall)`.
pub fn f1_top1(preds: &PredictionSet) -> Result<(f64, f64, f64)> {
    preds.validate()?;
    let hits = preds
        .questions
        .iter()
        .filter(|q| select_answer(&q.scores) == q.gold)
        .count() as f64;
    let precision = hits / preds.len() as f64;
    let recall = hits / preds.len() as f64;
    // Grouped so that equal precision and recall give back exactly that value.
    let f1 = if precision + recall > 0.0 {
        precision * (2.0 * recall / (precision + recall))
    } else {
        0.0
    };
    Ok((f1, precision, recall))
}

pub fn mrr(preds: &PredictionSet) -> Result<f64> {
    preds.validate()?;
    let total: f64 = rank_candidates(preds).iter().map(|&r| 1.0 / r as f64).sum();
    Ok(total / preds.len() as f64)
}

/// Binary F1 over individual candidates with `score >= threshold` taken as
/// positive. Reported as a diagnostic next to the top-1 numbers.
pub fn threshold_f1(preds: &PredictionSet, threshold: f64) -> Result<f64> {
    preds.validate()?;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for q in &preds.questions {
        for (i, &s) in q.scores.iter().enumerate() {
            match (s >= threshold, i == q.gold) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                (false, false) => {}
            }
        }
    }
    let denom = 2 * tp + fp + fneg;
    Ok(if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub mrr: f64,
    /// Candidate-level F1 at a 0.5 threshold.
    pub threshold_f1: f64,
    pub ranks: Vec<usize>,
}

impl EvalReport {
    /// Count of questions per gold rank.
    pub fn rank_histogram(&self) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        for &r in &self.ranks {
            *h.entry(r).or_insert(0) += 1;
        }
        h
    }
}

pub fn evaluate(preds: &PredictionSet) -> Result<EvalReport> {
    let (f1, precision, recall) = f1_top1(preds)?;
    Ok(EvalReport {
        n: preds.len(),
        f1,
        precision,
        recall,
        mrr: mrr(preds)?,
        threshold_f1: threshold_f1(preds, 0.5)?,
        ranks: rank_candidates(preds),
    })
}

/// Independent uniform `[0, 1)` scores for every candidate, drawn from a
/// [`BASELINE_RNG`] stream seeded with `seed` in group-then-candidate order.
pub fn random_baseline(groups: &[QuestionGroup], seed: u64) -> Result<PredictionSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = groups
        .iter()
        .map(|g| g.candidates.iter().map(|_| rng.gen::<f64>()).collect())
        .collect();
    PredictionSet::from_groups(groups, scores)
}
