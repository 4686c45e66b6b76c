//! Supervised upper-limit estimate: a linear scorer over concatenated
//! adjacent-word hidden states, trained with a pairwise hinge ranking loss
//! against gold-tree distances. The language model itself stays frozen.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activations::{word_hidden, ActivationError, SentenceActivations};
use crate::evaluation::{self, EvalError, EvalReport};
use crate::inducer::{build_tree, InduceError};
use crate::treebank::{gold_distances, GoldTree};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dimension mismatch: scorer expects {expected} per word, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("length mismatch: predicted {pred} distances, gold {gold}")]
    Length { pred: usize, gold: usize },
    #[error("no training sentence has three or more words")]
    NoInformativePairs,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Activation(#[from] ActivationError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Induce(#[from] InduceError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("scorer JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// `score(r, s) = weights . [r; s] + bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearScorer {
    pub layer: usize,
    pub seed: u64,
    #[serde(default)]
    pub trained_on: String,
    pub bias: f64,
    pub weights: Vec<f64>,
}

impl LinearScorer {
    pub fn zeros(hidden_dim: usize, layer: usize) -> Self {
        LinearScorer { layer, seed: 0, trained_on: String::new(), bias: 0.0, weights: vec![0.0; 2 * hidden_dim] }
    }

    pub fn hidden_dim(&self) -> usize {
        self.weights.len() / 2
    }

    pub fn score(&self, r: &[f64], s: &[f64]) -> Result<f64, TrainError> {
        let h = self.hidden_dim();
        for v in [r, s] {
            if v.len() != h {
                return Err(TrainError::Dimension { expected: h, got: v.len() });
            }
        }
        let (wr, ws) = self.weights.split_at(h);
        Ok(dot(wr, r) + dot(ws, s) + self.bias)
    }

    /// Distances between adjacent words of one sentence.
    pub fn distances(&self, words: &[Vec<f64>]) -> Result<Vec<f64>, TrainError> {
        words.windows(2).map(|p| self.score(&p[0], &p[1])).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let scorer: LinearScorer = serde_json::from_slice(&std::fs::read(path)?)?;
        if scorer.weights.is_empty() || !scorer.weights.len().is_multiple_of(2) {
            return Err(TrainError::Config(format!("scorer has {} weights", scorer.weights.len())));
        }
        if !scorer.bias.is_finite() || scorer.weights.iter().any(|w| !w.is_finite()) {
            return Err(TrainError::Config("scorer has non-finite parameters".into()));
        }
        Ok(scorer)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `sum_{i<j} max(0, 1 - sign(gold_i - gold_j) * (pred_i - pred_j))`, sign(0) = 0.
pub fn rank_loss(pred: &[f64], gold: &[f64]) -> Result<f64, TrainError> {
    Ok(rank_loss_with_grad(pred, gold)?.0)
}

/// Loss and its subgradient with respect to `pred` (zero on flat parts and kinks).
pub fn rank_loss_with_grad(pred: &[f64], gold: &[f64]) -> Result<(f64, Vec<f64>), TrainError> {
    if pred.len() != gold.len() {
        return Err(TrainError::Length { pred: pred.len(), gold: gold.len() });
    }
    let m = pred.len();
    let mut loss = 0.0;
    let mut grad = vec![0.0; m];
    for i in 0..m {
        for j in i + 1..m {
            let s = sign(gold[i] - gold[j]);
            let hinge = 1.0 - s * (pred[i] - pred[j]);
            if hinge > 0.0 {
                loss += hinge;
                grad[i] -= s;
                grad[j] += s;
            }
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub trials: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 16,
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            trials: 3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        let ok = self.epochs > 0
            && self.batch_size > 0
            && self.trials > 0
            && self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(TrainError::Config(format!("{self:?}")))
        }
    }
}

/// Word vectors of one sentence with the target distances between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub words: Vec<Vec<f64>>,
    pub gold: Vec<f64>,
}

/// Builds examples from activation records and their gold trees on `layer`.
pub fn examples_from_corpus(
    acts: &[SentenceActivations],
    golds: &[GoldTree],
    layer: usize,
) -> Result<Vec<Example>, TrainError> {
    let aligned = evaluation::align_gold(acts, golds)?;
    acts.iter()
        .zip(aligned)
        .map(|(a, g)| {
            Ok(Example { id: a.sentence_id.clone(), words: word_hidden(a, layer)?, gold: gold_distances(g).values })
        })
        .collect()
}

/// Mean per-sentence loss over `batch` and its gradient with respect to the
/// weights and the bias.
pub fn batch_objective(scorer: &LinearScorer, batch: &[&Example]) -> Result<(f64, Vec<f64>, f64), TrainError> {
    let h = scorer.hidden_dim();
    let mut grad_w = vec![0.0; 2 * h];
    let mut grad_b = 0.0;
    let mut loss = 0.0;
    for ex in batch {
        let pred = scorer.distances(&ex.words)?;
        let (l, g) = rank_loss_with_grad(&pred, &ex.gold)?;
        loss += l;
        for (i, gi) in g.iter().enumerate() {
            if *gi == 0.0 {
                continue;
            }
            let (left, right) = grad_w.split_at_mut(h);
            for (acc, x) in left.iter_mut().zip(&ex.words[i]) {
                *acc += gi * x;
            }
            for (acc, x) in right.iter_mut().zip(&ex.words[i + 1]) {
                *acc += gi * x;
            }
            grad_b += gi;
        }
    }
    let k = batch.len().max(1) as f64;
    grad_w.iter_mut().for_each(|g| *g /= k);
    Ok((loss / k, grad_w, grad_b / k))
}

/// Mean per-sentence rank loss of `scorer` over `examples`.
pub fn mean_rank_loss(scorer: &LinearScorer, examples: &[Example]) -> Result<f64, TrainError> {
    let refs: Vec<&Example> = examples.iter().collect();
    Ok(batch_objective(scorer, &refs)?.0)
}

/// Induces trees with the scorer's distances and scores them against `golds`
/// (aligned with `examples`).
pub fn evaluate_scorer(
    scorer: &LinearScorer,
    examples: &[Example],
    golds: &[GoldTree],
    labels: &[String],
) -> Result<EvalReport, TrainError> {
    let preds = examples
        .iter()
        .map(|ex| Ok(build_tree(ex.words.len(), &scorer.distances(&ex.words)?)?))
        .collect::<Result<Vec<_>, TrainError>>()?;
    Ok(evaluation::evaluate(&preds, golds, labels)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub validation_s_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// 1-based epoch whose parameters were returned.
    pub selected_epoch: usize,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grad).enumerate() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}

/// Mini-batch Adam on the mean per-sentence rank loss. Sentences with fewer
/// than three words carry no pairs and are skipped. With `validation`, the
/// parameters of the epoch with the best validation S-F1 are returned;
/// otherwise those of the last epoch.
pub fn train(
    examples: &[Example],
    layer: usize,
    config: &TrainConfig,
    validation: Option<(&[Example], &[GoldTree])>,
    trained_on: &str,
) -> Result<(LinearScorer, TrainLog), TrainError> {
    config.validate()?;
    let usable: Vec<&Example> = examples.iter().filter(|e| e.gold.len() >= 2).collect();
    let Some(first) = usable.first() else {
        return Err(TrainError::NoInformativePairs);
    };
    let h = first.words[0].len();
    for ex in &usable {
        if ex.gold.len() + 1 != ex.words.len() {
            return Err(TrainError::Length { pred: ex.words.len().saturating_sub(1), gold: ex.gold.len() });
        }
        if let Some(bad) = ex.words.iter().find(|w| w.len() != h) {
            return Err(TrainError::Dimension { expected: h, got: bad.len() });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params: Vec<f64> = (0..2 * h + 1).map(|_| rng.gen_range(-0.01..0.01)).collect();
    let mut adam = Adam::new(params.len());
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let no_labels: Vec<String> = Vec::new();

    let unpack = |params: &[f64]| LinearScorer {
        layer,
        seed: config.seed,
        trained_on: trained_on.to_string(),
        bias: params[2 * h],
        weights: params[..2 * h].to_vec(),
    };

    let mut log = TrainLog { epochs: Vec::new(), selected_epoch: config.epochs };
    let mut best: Option<(f64, Vec<f64>)> = None;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut steps = 0;
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| usable[i]).collect();
            let (loss, grad_w, grad_b) = batch_objective(&unpack(&params), &batch)?;
            let mut grad = grad_w;
            grad.push(grad_b);
            adam.step(&mut params, &grad, config);
            loss_sum += loss * batch.len() as f64;
            steps += 1;
        }
        let validation_s_f1 = match validation {
            Some((val, golds)) => Some(evaluate_scorer(&unpack(&params), val, golds, &no_labels)?.s_f1),
            None => None,
        };
        log::info!(
            "epoch {epoch}: {steps} steps, mean loss {:.4}{}",
            loss_sum / usable.len() as f64,
            validation_s_f1.map(|s| format!(", validation S-F1 {s:.2}")).unwrap_or_default()
        );
        if let Some(score) = validation_s_f1 {
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, params.clone()));
                log.selected_epoch = epoch;
            }
        }
        log.epochs.push(EpochLog { epoch, steps, mean_loss: loss_sum / usable.len() as f64, validation_s_f1 });
    }
    let chosen = best.map(|(_, p)| p).unwrap_or(params);
    Ok((unpack(&chosen), log))
}

/// Result of one seeded training run.
#[derive(Debug, Clone)]
pub struct Trial {
    pub scorer: LinearScorer,
    pub log: TrainLog,
    pub validation: Option<EvalReport>,
}

/// Trains `config.trials` scorers with seeds `seed, seed + 1, ...`.
pub fn train_trials(
    examples: &[Example],
    layer: usize,
    config: &TrainConfig,
    validation: Option<(&[Example], &[GoldTree])>,
    labels: &[String],
    trained_on: &str,
) -> Result<Vec<Trial>, TrainError> {
    (0..config.trials as u64)
        .map(|t| {
            let cfg = TrainConfig { seed: config.seed + t, ..config.clone() };
            let (scorer, log) = train(examples, layer, &cfg, validation, trained_on)?;
            let validation = match validation {
                Some((val, golds)) => Some(evaluate_scorer(&scorer, val, golds, labels)?),
                None => None,
            };
            Ok(Trial { scorer, log, validation })
        })
        .collect()
}
