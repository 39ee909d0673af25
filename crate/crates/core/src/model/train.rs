//! Deterministic momentum-SGD training on the CTC loss.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Params};
use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::metrics::{self, DisparityRow};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    /// Epochs before the first validation check.
    pub epochs: usize,
    /// Hard cap; training fails if the targets are still unmet.
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Learning rate is multiplied by `lr_decay` once this fraction of `epochs` is done.
    pub decay_at: f64,
    pub lr_decay: f64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    /// Maximum macro-mean validation WER.
    pub max_validation_wer: f64,
    /// Require the reference accent to have the strictly lowest validation WER.
    pub require_reference_lowest: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 24,
            max_epochs: 40,
            batch_size: 16,
            learning_rate: 0.05,
            momentum: 0.9,
            decay_at: 0.6,
            lr_decay: 0.3,
            grad_clip: 5.0,
            max_validation_wer: 0.35,
            require_reference_lowest: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub history: Vec<EpochStats>,
    pub validation: DisparityRow,
}

/// Per-utterance WERs of greedy transcripts.
pub(crate) fn score(model: &Model, features: &[DMatrix<f64>], utterances: &[&Utterance]) -> Result<Vec<f64>> {
    features
        .par_iter()
        .zip(utterances.par_iter())
        .map(|(f, u)| {
            let hyp = Model::decode_logits(&model.forward_features(f, None).logits);
            metrics::wer(&hyp, &u.text)
        })
        .collect()
}

fn validation_row(
    model: &Model,
    features: &[DMatrix<f64>],
    utterances: &[&Utterance],
    accents: &[String],
) -> Result<DisparityRow> {
    let wers = score(model, features, utterances)?;
    let means = metrics::per_accent_mean(
        utterances.iter().zip(&wers).map(|(u, w)| (u.accent.as_str(), *w)),
        accents,
    )?;
    DisparityRow::from_means(means)
}

fn learning_rate(opts: &TrainOptions, epoch: usize) -> f64 {
    if (epoch as f64) < opts.decay_at * opts.epochs as f64 {
        opts.learning_rate
    } else {
        opts.learning_rate * opts.lr_decay
    }
}

/// Train a fresh model. `accents[0]` is the reference accent.
pub fn train(
    train_set: &[&Utterance],
    validation: &[&Utterance],
    accents: &[String],
    config: ModelConfig,
    opts: &TrainOptions,
) -> Result<(Model, TrainReport)> {
    if train_set.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if validation.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    if opts.batch_size == 0 || opts.epochs == 0 || opts.max_epochs < opts.epochs {
        return Err(Error::Config("invalid epoch or batch settings".into()));
    }
    let seed = config.seed;
    let mut model = Model::new(config)?;

    let raw_train: Vec<DMatrix<f64>> = train_set
        .par_iter()
        .map(|u| model.log_filterbank(&u.samples()))
        .collect::<Result<_>>()?;
    let (mean, std) = feature_moments(&raw_train);
    model.params.feature_mean = mean;
    model.params.feature_std = std;
    let train_feats: Vec<DMatrix<f64>> = raw_train.iter().map(|r| model.standardize(r)).collect();
    let val_feats: Vec<DMatrix<f64>> = validation
        .par_iter()
        .map(|u| model.features(&u.samples()))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7a1e);
    let mut velocity = model.params.zeros_like();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();

    for epoch in 0..opts.max_epochs {
        let lr = learning_rate(opts, epoch);
        order.shuffle(&mut rng);
        let mut total_loss = 0.0;
        for batch in order.chunks(opts.batch_size) {
            let results: Vec<(f64, Params)> = batch
                .par_iter()
                .map(|&i| model.loss_and_param_grad(&train_feats[i], &train_set[i].text))
                .collect::<Result<_>>()?;
            let mut grad = model.params.zeros_like();
            for (loss, g) in &results {
                total_loss += loss;
                for (acc, gi) in grad.trainable_mut().into_iter().zip(g.trainable()) {
                    *acc += gi;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let norm = grad
                .trainable()
                .iter()
                .map(|t| t.norm_squared())
                .sum::<f64>()
                .sqrt()
                * scale;
            if !norm.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient in epoch {epoch}")));
            }
            let clip = if norm > opts.grad_clip { opts.grad_clip / norm } else { 1.0 };
            for ((p, v), g) in model
                .params
                .trainable_mut()
                .into_iter()
                .zip(velocity.trainable_mut())
                .zip(grad.trainable())
            {
                *v *= opts.momentum;
                *v += g * (scale * clip);
                *p -= &*v * lr;
            }
        }
        let mean_loss = total_loss / train_set.len() as f64;
        log::info!("epoch {epoch}: lr {lr:.4} mean CTC loss {mean_loss:.4}");
        history.push(EpochStats {
            epoch,
            learning_rate: lr,
            mean_loss,
        });

        if epoch + 1 >= opts.epochs {
            let row = validation_row(&model, &val_feats, validation, accents)?;
            let reference_ok =
                !opts.require_reference_lowest || row.strict_minimum() == Some(accents[0].as_str());
            if row.mean_wer <= opts.max_validation_wer && reference_ok {
                return Ok((
                    model,
                    TrainReport {
                        epochs_run: epoch + 1,
                        history,
                        validation: row,
                    },
                ));
            }
            if epoch + 1 == opts.max_epochs {
                return Err(Error::NonConvergence(format!(
                    "after {} epochs: validation mean WER {:.3} (limit {:.3}), per accent {:?}, \
                     reference `{}` strictly lowest: {}",
                    epoch + 1,
                    row.mean_wer,
                    opts.max_validation_wer,
                    row.per_accent_mean_wer,
                    accents[0],
                    reference_ok
                )));
            }
        }
    }
    unreachable!("loop returns on the last epoch")
}

fn feature_moments(raw: &[DMatrix<f64>]) -> (DVector<f64>, DVector<f64>) {
    let f = raw[0].ncols();
    let mut sum: DVector<f64> = DVector::zeros(f);
    let mut sq: DVector<f64> = DVector::zeros(f);
    let mut n = 0usize;
    for m in raw {
        for row in m.row_iter() {
            for j in 0..f {
                sum[j] += row[j];
                sq[j] += row[j] * row[j];
            }
            n += 1;
        }
    }
    let mean = sum / n as f64;
    let std = DVector::from_fn(f, |j, _| {
        let var: f64 = sq[j] / n as f64 - mean[j] * mean[j];
        var.max(1e-8).sqrt()
    });
    (mean, std)
}
