use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::{Classifier, Workspace};
use crate::rng::seeded;
use crate::{Error, Result, RgbImage};

/// Class probabilities: nonnegative and summing to one within 1e-6.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        let sum: f64 = p.iter().sum();
        if p.is_empty() || p.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!("not a probability vector (sum {sum})")));
        }
        Ok(Self(p))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest probability, ties to the lower index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate() {
            if v > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn entropy(&self) -> f64 {
        entropy(&self.0)
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| libm::exp(v - max)).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Shannon entropy in bits, with `0 log 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    let h: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| -v * libm::log2(v)).sum();
    h.max(0.0)
}

/// Softmax prediction with dropout disabled.
pub fn predict(model: &Classifier, image: &RgbImage) -> Result<ProbVector> {
    let mut ws = model.workspace();
    model.compute_features(image, &mut ws)?;
    model.softmax_from_features(&mut ws)
}

/// Mean of `passes` softmax outputs with dropout active on the features.
/// Deterministic for a given `seed`.
pub fn mc_dropout_predict(model: &Classifier, image: &RgbImage, passes: usize, seed: u64) -> Result<ProbVector> {
    let mut ws = model.workspace();
    model.compute_features(image, &mut ws)?;
    model.mc_dropout_from_features(&mut ws, passes, seed)
}

/// DUQ kernel values and their normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct DuqPrediction {
    pub kernels: Vec<f64>,
    pub probs: ProbVector,
    /// Kernel sum fell below 1e-30 and the distribution was floored to
    /// uniform.
    pub underflow: bool,
}

pub fn duq_predict(model: &Classifier, image: &RgbImage) -> Result<DuqPrediction> {
    let mut ws = model.workspace();
    model.compute_features(image, &mut ws)?;
    model.duq_from_features(&mut ws)
}

impl Classifier {
    pub fn softmax_from_features(&self, ws: &mut Workspace) -> Result<ProbVector> {
        if self.is_duq() {
            return Err(Error::Configuration("softmax prediction on a DUQ model".into()));
        }
        ws.mask.fill(1.0);
        self.softmax_head_forward(ws);
        Ok(ProbVector(softmax(&ws.out)))
    }

    /// Dropout passes over the feature vector already in `ws`; the trunk is
    /// deterministic, so only the output layer is re-evaluated.
    pub fn mc_dropout_from_features(&self, ws: &mut Workspace, passes: usize, seed: u64) -> Result<ProbVector> {
        let p = self.config.dropout_p;
        if p <= 0.0 {
            return Err(Error::Configuration("MC dropout needs dropout_p > 0".into()));
        }
        if passes == 0 {
            return Err(Error::Configuration("MC dropout needs at least one pass".into()));
        }
        let mut rng = seeded(seed);
        let keep = 1.0 / (1.0 - p);
        let stack = self.sample_passes(ws, passes, |mask| {
            for m in mask.iter_mut() {
                *m = if rng.random::<f64>() < p { 0.0 } else { keep };
            }
        })?;
        Ok(mean_of(&stack, self.config.classes))
    }

    /// Softmax outputs of one pass per mask produced by `fill_mask`.
    pub fn sample_passes(
        &self,
        ws: &mut Workspace,
        passes: usize,
        mut fill_mask: impl FnMut(&mut [f64]),
    ) -> Result<Vec<Vec<f64>>> {
        if self.is_duq() {
            return Err(Error::Configuration("dropout passes on a DUQ model".into()));
        }
        let mut out = Vec::with_capacity(passes);
        for _ in 0..passes {
            fill_mask(&mut ws.mask);
            self.softmax_head_forward(ws);
            out.push(softmax(&ws.out));
        }
        Ok(out)
    }

    pub fn duq_from_features(&self, ws: &mut Workspace) -> Result<DuqPrediction> {
        let state = self
            .duq
            .as_ref()
            .ok_or_else(|| Error::Configuration("DUQ prediction on a softmax model".into()))?;
        self.duq_head_forward(ws);
        let m = state.config.embedding;
        let denom = 2.0 * m as f64 * state.config.length_scale * state.config.length_scale;
        let kernels: Vec<f64> = (0..self.config.classes)
            .map(|c| {
                let dist: f64 = (0..m)
                    .map(|j| {
                        let d = ws.out[c * m + j] - state.sums[c * m + j] / state.counts[c];
                        d * d
                    })
                    .sum();
                libm::exp(-dist / denom)
            })
            .collect();
        let total: f64 = kernels.iter().sum();
        let (probs, underflow) = if total < 1e-30 {
            (ProbVector::uniform(kernels.len()), true)
        } else {
            (ProbVector(kernels.iter().map(|k| k / total).collect()), false)
        };
        Ok(DuqPrediction { kernels, probs, underflow })
    }
}

fn mean_of(stack: &[Vec<f64>], classes: usize) -> ProbVector {
    let mut mean = vec![0.0; classes];
    for p in stack {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    let t = stack.len() as f64;
    ProbVector(mean.into_iter().map(|v| v / t).collect())
}
