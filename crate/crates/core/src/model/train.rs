use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use super::network::encode_input;
use super::{Classifier, ClassifierConfig, DuqConfig};
use crate::pool::TrainPair;
use crate::rng::{derive_seed, seeded};
use crate::{Error, Result, Sample};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 32, learning_rate: 0.02, momentum: 0.9, weight_decay: 5e-4, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    /// Fraction of pairs whose label matched the argmax during the epoch.
    pub train_acc: f64,
}

pub type TrainLog = Vec<EpochLog>;

/// Initializes a model from `config` and fits it on `pairs`.
pub fn train(
    pairs: &[TrainPair],
    samples: &[Sample],
    config: &ClassifierConfig,
    duq: Option<DuqConfig>,
    hyper: &TrainHyper,
) -> Result<(Classifier, TrainLog)> {
    let mut model = Classifier::new(config.clone(), duq)?;
    let log = fit(&mut model, pairs, samples, hyper)?;
    Ok((model, log))
}

/// Minibatch SGD with momentum over seeded shuffles of `pairs`.
///
/// Every pair is an independent example, so a sample with several labels is
/// seen once per label each epoch. Softmax models minimize cross-entropy with
/// dropout on the features; DUQ models minimize per-class binary
/// cross-entropy of the kernels and update class centroids by an
/// exponential moving average after every batch.
pub fn fit(model: &mut Classifier, pairs: &[TrainPair], samples: &[Sample], hyper: &TrainHyper) -> Result<TrainLog> {
    if hyper.epochs == 0 {
        return Ok(Vec::new());
    }
    if pairs.is_empty() {
        return Err(Error::Validation("no training pairs".into()));
    }
    if hyper.batch_size == 0 || !(hyper.learning_rate > 0.0) || !(0.0..1.0).contains(&hyper.momentum) {
        return Err(Error::Configuration(format!("invalid training hyperparameters {hyper:?}")));
    }
    let classes = model.config.classes;
    for p in pairs {
        let s = samples
            .get(p.id)
            .ok_or_else(|| Error::Validation(format!("pair refers to missing sample {}", p.id)))?;
        model.check_image(&s.image)?;
        if usize::from(p.label) >= classes {
            return Err(Error::Validation(format!("pair label {} outside [0, {classes})", p.label)));
        }
    }

    let n_params = model.params.len();
    let mut grad = vec![0.0; n_params];
    let mut velocity = vec![0.0; n_params];
    let mut ws = model.workspace();
    let mut input = vec![0.0; model.config.input_len()];
    let mut mask = vec![1.0; model.config.dense_width];
    let p_drop = model.config.dropout_p;
    let keep = 1.0 / (1.0 - p_drop);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut log = Vec::with_capacity(hyper.epochs);

    let embed = model.duq.as_ref().map(|d| d.config.embedding).unwrap_or(0);
    let mut class_counts = vec![0.0; classes];
    let mut class_sums = vec![0.0; classes * embed];

    for epoch in 0..hyper.epochs {
        let mut rng = seeded(derive_seed(hyper.seed, &[epoch as u64]));
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (batch_no, batch) in order.chunks(hyper.batch_size).enumerate() {
            grad.fill(0.0);
            class_counts.fill(0.0);
            class_sums.fill(0.0);
            let mut batch_loss = 0.0;
            for &pi in batch {
                let pair = pairs[pi];
                let label = usize::from(pair.label);
                encode_input(&samples[pair.id].image, &mut input);
                let mask_ref = if model.duq.is_none() && p_drop > 0.0 {
                    for m in mask.iter_mut() {
                        *m = if rng.random::<f64>() < p_drop { 0.0 } else { keep };
                    }
                    Some(mask.as_slice())
                } else {
                    None
                };
                batch_loss += model.example_loss_and_grad(&input, label, mask_ref, &mut ws, &mut grad);
                if model.duq.is_some() {
                    class_counts[label] += 1.0;
                    for (s, z) in class_sums[label * embed..(label + 1) * embed]
                        .iter_mut()
                        .zip(&ws.out[label * embed..(label + 1) * embed])
                    {
                        *s += z;
                    }
                    if duq_argmax(model, &ws) == label {
                        correct += 1;
                    }
                } else if argmax(&ws.out) == label {
                    correct += 1;
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: batch_no });
            }
            loss_sum += batch_loss;
            let scale = 1.0 / batch.len() as f64;
            for ((p, g), v) in model.params.iter_mut().zip(&grad).zip(velocity.iter_mut()) {
                let g = g * scale + hyper.weight_decay * *p;
                *v = hyper.momentum * *v + g;
                *p -= hyper.learning_rate * *v;
            }
            if let Some(state) = model.duq.as_mut() {
                let gamma = state.config.momentum;
                for c in 0..classes {
                    state.counts[c] = gamma * state.counts[c] + (1.0 - gamma) * class_counts[c];
                    for j in 0..embed {
                        let k = c * embed + j;
                        state.sums[k] = gamma * state.sums[k] + (1.0 - gamma) * class_sums[k];
                    }
                }
            }
        }
        if let Some(state) = &model.duq {
            if state.sums.iter().chain(&state.counts).any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: order.len() / hyper.batch_size });
            }
        }
        log.push(EpochLog {
            epoch,
            loss: loss_sum / pairs.len() as f64,
            train_acc: correct as f64 / pairs.len() as f64,
        });
    }
    Ok(log)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Class with the smallest centroid distance for the embeddings in `ws`.
fn duq_argmax(model: &Classifier, ws: &super::Workspace) -> usize {
    let state = model.duq.as_ref().expect("DUQ model");
    let m = state.config.embedding;
    let mut best = (0, f64::INFINITY);
    for c in 0..model.config.classes {
        let d: f64 = (0..m)
            .map(|j| {
                let e = ws.out[c * m + j] - state.sums[c * m + j] / state.counts[c];
                e * e
            })
            .sum();
        if d < best.1 {
            best = (c, d);
        }
    }
    best.0
}
