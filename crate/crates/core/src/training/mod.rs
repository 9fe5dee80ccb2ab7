//! The optimizer and the early-stopping training loop.

mod checkpoint;
mod transfer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, Dtype, FORMAT_VERSION, MAGIC};
pub use transfer::{transfer_weights, TransferError, TransferReport};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{tokenize, QuestionGroup};
use crate::embeddings::{embed_sequence, EmbeddedSequence, EmbeddingMatrix};
use crate::evaluation::{self, EvalError, PredictionSet};
use crate::models::{round_to_f32, Model, ModelError};
use crate::tensor::{self, concat_all, Graph, ParameterSet, Tensor, TensorError};

/// Stabiliser added to the AdaGrad denominator.
pub const ADAGRAD_EPSILON: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("no probabilities to score")]
    EmptyBatch,
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("gradient for {0} does not match its parameter")]
    GradientMismatch(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Mean binary cross-entropy with probabilities clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    if probs.len() != labels.len() {
        return Err(TrainError::Config(format!(
            "{} probabilities but {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let labels: Vec<f64> = labels.iter().map(|&y| f64::from(y)).collect();
    Ok(tensor::bce_value(probs, &labels)?)
}

/// Accumulated squared gradients per parameter coordinate.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdaGradState {
    pub accumulated: ParameterSet,
    pub steps: u64,
}

/// `G += g^2; theta -= lr * g / (sqrt(G) + 1e-8)`, coordinate-wise.
pub fn adagrad_step(
    params: &mut ParameterSet,
    grads: &ParameterSet,
    state: &mut AdaGradState,
    learning_rate: f64,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| TrainError::GradientMismatch(name.to_string()))?;
        if g.shape() != p.shape() {
            return Err(TrainError::GradientMismatch(name.to_string()));
        }
        if let Some(acc) = state.accumulated.get(name) {
            if acc.shape() != p.shape() {
                return Err(TrainError::GradientMismatch(name.to_string()));
            }
        }
    }
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("checked above");
        if state.accumulated.get(name).is_none() {
            state
                .accumulated
                .insert(name, Tensor::zeros(p.shape())?)?;
        }
        let acc = state.accumulated.get_mut(name).expect("inserted");
        for ((theta, sq), &gi) in p.data_mut().iter_mut().zip(acc.data_mut()).zip(g.data()) {
            *sq += gi * gi;
            *theta -= learning_rate * gi / (sq.sqrt() + ADAGRAD_EPSILON);
        }
    }
    state.steps += 1;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// Parameters are rounded to `f32` after every update.
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            seed: 1,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(TrainError::Config(
                "patience, batch size and max epochs must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Tracks the best validation loss and how long it has gone unimproved.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Record a loss; true when it strictly beats every earlier one.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        match self.best {
            Some((_, best)) if loss >= best || loss.is_nan() => {
                self.stale += 1;
                false
            }
            _ => {
                self.best = Some((epoch, loss));
                self.stale = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// A question group with every text already embedded.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedGroup {
    pub id: String,
    pub question: EmbeddedSequence,
    pub candidates: Vec<EmbeddedSequence>,
    pub labels: Vec<u8>,
}

/// Tokenizes and embeds question groups with fixed maximum lengths.
#[derive(Debug, Clone, Copy)]
pub struct Featurizer<'a> {
    pub embeddings: &'a EmbeddingMatrix,
    pub max_question_len: usize,
    pub max_answer_len: usize,
}

impl<'a> Featurizer<'a> {
    pub const DEFAULT_QUESTION_LEN: usize = 30;
    pub const DEFAULT_ANSWER_LEN: usize = 60;

    pub fn new(embeddings: &'a EmbeddingMatrix) -> Self {
        Featurizer {
            embeddings,
            max_question_len: Self::DEFAULT_QUESTION_LEN,
            max_answer_len: Self::DEFAULT_ANSWER_LEN,
        }
    }

    pub fn question(&self, text: &str) -> EmbeddedSequence {
        embed_sequence(&tokenize(text), self.embeddings, self.max_question_len)
    }

    pub fn answer(&self, text: &str) -> EmbeddedSequence {
        embed_sequence(&tokenize(text), self.embeddings, self.max_answer_len)
    }

    pub fn prepare(&self, group: &QuestionGroup) -> PreparedGroup {
        PreparedGroup {
            id: format!("{}/{}", group.qid, group.translation),
            question: self.question(&group.question),
            candidates: group.candidates.iter().map(|c| self.answer(&c.text)).collect(),
            labels: group.labels(),
        }
    }

    pub fn prepare_all(&self, groups: &[QuestionGroup]) -> Vec<PreparedGroup> {
        groups.iter().map(|g| self.prepare(g)).collect()
    }
}

/// Inference-mode scores for every candidate of every group.
pub fn score_groups(model: &Model, groups: &[PreparedGroup]) -> Result<Vec<Vec<f64>>> {
    groups
        .iter()
        .map(|g| Ok(model.score_candidates(&g.question, &g.candidates)?))
        .collect()
}

pub fn predictions(model: &Model, groups: &[PreparedGroup]) -> Result<PredictionSet> {
    let scores = score_groups(model, groups)?;
    let questions = groups
        .iter()
        .zip(scores)
        .map(|(g, s)| evaluation::QuestionScores {
            id: g.id.clone(),
            scores: s,
            gold: g.labels.iter().position(|&l| l == 1).unwrap_or(usize::MAX),
        })
        .collect();
    Ok(PredictionSet { questions })
}

/// Mean BCE over every (question, candidate) pair of `groups`.
pub fn dataset_loss(model: &Model, groups: &[PreparedGroup]) -> Result<f64> {
    let scores = score_groups(model, groups)?;
    let probs: Vec<f64> = scores.into_iter().flatten().collect();
    let labels: Vec<u8> = groups.iter().flat_map(|g| g.labels.iter().copied()).collect();
    bce_loss(&probs, &labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when there is no validation data.
    pub val_loss: Option<f64>,
    pub val_f1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose weights were returned.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Run one optimizer step over `batch`, returning the batch loss.
fn train_batch(
    model: &mut Model,
    batch: &[(usize, usize)],
    groups: &[PreparedGroup],
    state: &mut AdaGradState,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let g = Graph::new();
    let vars = model.params().register(&g);
    let mut probs = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for &(gi, ci) in batch {
        let group = &groups[gi];
        probs.push(model.forward(&g, &vars, &group.question, &group.candidates[ci], Some(rng))?);
        labels.push(f64::from(group.labels[ci]));
    }
    let loss = concat_all(&probs, 0)?.bce(&labels)?;
    let value = loss.item()?;
    let grads = vars.gradients(&g.backward(loss)?)?;
    adagrad_step(model.params_mut(), &grads, state, cfg.learning_rate)?;
    if cfg.precision == Precision::F32 {
        let rounded = round_to_f32(model.params());
        *model.params_mut() = rounded;
    }
    Ok(value)
}

/// Fit `model` on shuffled mini-batches of (question, candidate) pairs with
/// AdaGrad, stopping once validation loss has not improved for
/// `cfg.patience` epochs. Returns the weights of the best validation epoch.
///
/// With no validation groups the training loss is monitored instead.
pub fn train(
    mut model: Model,
    train_groups: &[PreparedGroup],
    val_groups: &[PreparedGroup],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let pairs: Vec<(usize, usize)> = train_groups
        .iter()
        .enumerate()
        .flat_map(|(gi, g)| (0..g.candidates.len()).map(move |ci| (gi, ci)))
        .collect();
    if pairs.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdaGradState::default();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_params = model.params().clone();
    let mut history = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let mut order = pairs.clone();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let loss = train_batch(&mut model, batch, train_groups, &mut state, cfg, &mut rng)?;
            total += loss * batch.len() as f64;
        }
        let train_loss = total / pairs.len() as f64;

        let (val_loss, val_f1) = if val_groups.is_empty() {
            (None, None)
        } else {
            let preds = predictions(&model, val_groups)?;
            (
                Some(dataset_loss(&model, val_groups)?),
                Some(evaluation::f1_top1(&preds)?.0),
            )
        };
        log::info!(
            "epoch {epoch}: train loss {train_loss:.6}, val loss {}, val f1 {}",
            val_loss.map_or("-".into(), |v| format!("{v:.6}")),
            val_f1.map_or("-".into(), |v| format!("{v:.4}")),
        );
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_f1,
        });

        if stopper.observe(epoch, val_loss.unwrap_or(train_loss)) {
            best_params = model.params().clone();
        }
        if stopper.should_stop() {
            stopped_early = true;
            break;
        }
    }

    let best_epoch = stopper.best().map_or(history.len(), |(e, _)| e);
    model.set_params(best_params)?;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_examples() {
        assert!((bce_loss(&[0.5], &[1]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_loss(&[1.0 - 1e-7], &[1]).unwrap() < 1e-6);
        let expected = (-(0.9f64).ln() - (0.1f64).ln()) / 2.0;
        assert!((bce_loss(&[0.9, 0.9], &[1, 0]).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 1.20397).abs() < 1e-5);
        assert!(matches!(bce_loss(&[], &[]), Err(TrainError::EmptyBatch)));
        assert!(bce_loss(&[0.5], &[2]).is_err());
        // Exact 0 and 1 are clamped rather than producing infinities.
        assert!(bce_loss(&[0.0], &[1]).unwrap().is_finite());
    }

    fn single(value: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("theta", Tensor::scalar(value)).unwrap();
        p
    }

    #[test]
    fn adagrad_examples() {
        let mut params = single(1.0);
        let mut state = AdaGradState::default();
        adagrad_step(&mut params, &single(0.5), &mut state, 0.1).unwrap();
        let after_one = params.get("theta").unwrap().item().unwrap();
        assert!((after_one - 0.9).abs() < 1e-7);

        adagrad_step(&mut params, &single(0.5), &mut state, 0.1).unwrap();
        let after_two = params.get("theta").unwrap().item().unwrap();
        let second = after_one - after_two;
        assert!((second - 0.1 * 0.5 / 0.5f64.sqrt()).abs() < 1e-7);
        assert!((second - 0.0707).abs() < 1e-4);
        assert_eq!(state.steps, 2);
    }

    #[test]
    fn adagrad_zero_gradient_is_a_no_op() {
        let mut params = single(1.5);
        let mut state = AdaGradState::default();
        adagrad_step(&mut params, &single(0.0), &mut state, 0.1).unwrap();
        assert_eq!(params, single(1.5));
        assert_eq!(state.accumulated.get("theta").unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn adagrad_rejects_mismatched_gradients() {
        let mut params = single(1.0);
        let mut grads = ParameterSet::new();
        grads.insert("theta", Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
        let mut state = AdaGradState::default();
        assert!(adagrad_step(&mut params, &grads, &mut state, 0.1).is_err());
        assert!(adagrad_step(&mut params, &ParameterSet::new(), &mut state, 0.1).is_err());
    }

    #[test]
    fn early_stopping_on_rising_loss() {
        let mut stopper = EarlyStopping::new(10);
        let mut stopped_at = None;
        for epoch in 1..=50 {
            stopper.observe(epoch, epoch as f64);
            if stopper.should_stop() {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(11));
        assert_eq!(stopper.best(), Some((1, 1.0)));
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            patience: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
