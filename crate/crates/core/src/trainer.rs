//! Mini-batch training: sampled-softmax matching loss plus commitment loss,
//! Adam on network parameters and EMA on codebooks.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datasets::EvalQuery;
use crate::error::{Error, Result};
use crate::evaluator::{evaluate_system, System};
use crate::model::{softmax_nll, Arch, BatchOptions, Example, Model};
use crate::numeric::{adam_step, axpy, AdamState};
use crate::quantizer::{assignments_from, ema_update, CodebookState};

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub negatives_per_positive: usize,
    /// When false the commitment term is removed from the objective.
    pub commitment: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.25,
            negatives_per_positive: 50,
            commitment: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub l2_embedding: f64,
    pub dropout: f64,
    pub workers: usize,
    pub loss: LossConfig,
    pub freeze_codebooks: bool,
    /// Cutoff of the validation recall used for checkpoint selection.
    pub val_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            epochs: 10,
            batch_size: 256,
            seed: 0,
            l2_embedding: 1e-6,
            dropout: 0.1,
            workers: 1,
            loss: LossConfig::default(),
            freeze_codebooks: false,
            val_k: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be at least 1"));
        }
        if !(self.loss.lambda >= 0.0) {
            return Err(Error::config("model.lambda must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("train.dropout must lie in [0, 1)"));
        }
        if !(self.lr >= 0.0) || !(self.l2_embedding >= 0.0) {
            return Err(Error::config("train.lr and train.l2_embedding must be non-negative"));
        }
        if self.loss.negatives_per_positive == 0 {
            return Err(Error::config("train.negatives must be at least 1"));
        }
        Ok(())
    }
}

/// `n` distinct items drawn uniformly from `corpus \ positives`.
pub fn sample_negatives<R: Rng + ?Sized>(
    corpus: &[usize],
    positives: &HashSet<usize>,
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let pool: Vec<usize> = corpus.iter().copied().filter(|i| !positives.contains(i)).collect();
    if pool.len() < n {
        return Err(Error::Sampling(format!(
            "need {n} negatives but only {} items lie outside the positive set",
            pool.len()
        )));
    }
    Ok(sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect())
}

/// `−log(e^{y+} / (e^{y+} + Σ e^{y−}))`, max-shifted.
pub fn sampled_softmax_loss(y_pos: f64, y_negs: &[f64]) -> f64 {
    let mut y = Vec::with_capacity(y_negs.len() + 1);
    y.push(y_pos);
    y.extend_from_slice(y_negs);
    softmax_nll(&y).0
}

pub fn total_loss(match_loss: f64, commit_loss: f64, lambda: f64) -> f64 {
    match_loss + lambda * commit_loss
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub match_loss: f64,
    pub commit_loss: f64,
    pub total: f64,
    pub val_recall: Option<f64>,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,match_loss,commit_loss,total,val_recall@50";

pub fn train_log_csv(log: &[EpochLog]) -> String {
    let mut out = format!("{TRAIN_LOG_HEADER}\n");
    for e in log {
        let val = e.val_recall.map_or(String::new(), |v| v.to_string());
        let _ = writeln!(out, "{},{},{},{},{val}", e.epoch, e.match_loss, e.commit_loss, e.total);
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation recall.
    pub model: Model,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    /// Objective of every mini-batch in order.
    pub batch_losses: Vec<f64>,
}

/// One example per (user, training interaction): the positive is that
/// interaction, the history is the user's other training items in order.
pub fn training_examples(sequences: &[Vec<usize>]) -> Vec<(usize, Vec<usize>, usize)> {
    let mut out = Vec::new();
    for (user, seq) in sequences.iter().enumerate() {
        if seq.len() < 2 {
            continue;
        }
        for t in 0..seq.len() {
            let history: Vec<usize> = seq.iter().enumerate().filter(|(j, _)| *j != t).map(|(_, i)| *i).collect();
            out.push((user, history, seq[t]));
        }
    }
    out
}

/// Validation recall at `k` through the exhaustive oracle (or exact
/// two-tower retrieval for the baseline).
pub fn validation_recall(model: &Model, queries: &[EvalQuery], k: usize, workers: usize) -> Result<f64> {
    let report = match model.config.arch {
        Arch::SparCode => {
            let items = model.all_item_tokens()?;
            let system = System::Exhaustive {
                model,
                item_tokens: &items,
                serve_bias: model.trained_bias(),
            };
            evaluate_system(&system, queries, &[k], workers)?
        }
        Arch::TwoTower => {
            let items = model.item_embeddings()?;
            evaluate_system(&System::TwoTower { model, items: &items }, queries, &[k], workers)?
        }
    };
    Ok(report.metrics[0].recall)
}

pub fn train(
    mut model: Model,
    train_sequences: &[Vec<usize>],
    val_queries: &[EvalQuery],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut examples = training_examples(train_sequences);
    if examples.is_empty() {
        return Err(Error::EmptyInput("no user has at least two training interactions".into()));
    }
    let positives: Vec<HashSet<usize>> = train_sequences.iter().map(|s| s.iter().copied().collect()).collect();
    let corpus: Vec<usize> = (0..model.config.num_items).collect();
    let mut adam = AdamState::new(&model.params, cfg.lr);
    let lambda = cfg.loss.lambda;

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut batch_losses = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    for epoch in 1..=cfg.epochs {
        examples.shuffle(&mut rng);
        let (mut sum_match, mut sum_commit, mut sum_total, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for (b, chunk) in examples.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Example> = chunk
                .iter()
                .map(|(user, history, positive)| {
                    Ok(Example {
                        history: history.clone(),
                        positive: *positive,
                        negatives: sample_negatives(&corpus, &positives[*user], cfg.loss.negatives_per_positive, &mut rng)?,
                    })
                })
                .collect::<Result<_>>()?;
            if model.config.arch == Arch::SparCode && model.codebooks.is_none() {
                let tokens = model.batch_query_tokens(&batch)?;
                let refs: Vec<&[f64]> = tokens.iter().map(Vec::as_slice).collect();
                model.codebooks = Some(CodebookState::from_samples(
                    &refs,
                    model.config.num_books,
                    model.config.codebook_size,
                    model.config.gamma,
                    &mut rng,
                )?);
            }
            let opts = BatchOptions {
                lambda: cfg.loss.commitment.then_some(lambda),
                dropout: cfg.dropout,
                dropout_seed: (cfg.dropout > 0.0).then(|| rng.random()),
                workers: cfg.workers,
                signature: false,
            };
            let mut res = model.batch(&batch, &opts)?;
            let rows = &model.params.embedding.rows;
            let l2 = cfg.l2_embedding * rows.squared_norm();
            axpy(2.0 * cfg.l2_embedding, rows.data(), res.grads.embedding.rows.data_mut());
            let commit = if cfg.loss.commitment { res.commit_loss } else { 0.0 };
            let total = total_loss(res.match_loss, commit, lambda) + l2;
            if !total.is_finite() {
                return Err(Error::Numeric {
                    param: "loss".into(),
                    detail: format!(
                        "epoch {epoch} batch {b}: match={} commit={} l2={l2} over {} examples",
                        res.match_loss,
                        res.commit_loss,
                        batch.len()
                    ),
                });
            }
            adam_step(&mut model.params, &res.grads, &mut adam)?;
            if !cfg.freeze_codebooks {
                if let Some(cb) = model.codebooks.as_mut() {
                    let assignments = assignments_from(&res.quantized, cb);
                    ema_update(cb, &assignments)?;
                }
            }
            sum_match += res.match_loss;
            sum_commit += commit;
            sum_total += total;
            batches += 1;
            batch_losses.push(total);
        }
        let val_recall = if val_queries.is_empty() {
            None
        } else {
            Some(validation_recall(&model, val_queries, cfg.val_k, cfg.workers)?)
        };
        let n = batches as f64;
        log.push(EpochLog {
            epoch,
            match_loss: sum_match / n,
            commit_loss: sum_commit / n,
            total: sum_total / n,
            val_recall,
        });
        let score = val_recall.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s || val_recall.is_none()) {
            best = Some((score, epoch, model.clone()));
        }
    }
    let (best_epoch, model) = match best {
        Some((_, e, m)) => (e, m),
        None => (0, model),
    };
    Ok(TrainOutcome {
        model,
        best_epoch,
        log,
        batch_losses,
    })
}
