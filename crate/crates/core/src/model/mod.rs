//! Small convolutional classifier with reverse-mode gradients and three
//! prediction heads: softmax, MC-Dropout and a DUQ-style RBF head.
//!
//! Architecture: `[conv3x3 -> ReLU -> maxpool2x2]*` -> dense -> ReLU, whose
//! activations are the feature vector. The softmax head applies dropout to
//! the features and a linear layer to logits; the DUQ head maps features
//! through per-class matrices and scores the distance to class centroids.
//! The DUQ gradient penalty is not implemented.

mod network;
mod heads;
mod train;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};

use crate::rng::seeded;
use crate::{Error, Result};

pub use heads::{duq_predict, entropy, mc_dropout_predict, predict, softmax, DuqPrediction, ProbVector};
pub use network::{encode_input, Forward, Gradient, Workspace};
pub use train::{train, fit, EpochLog, TrainHyper, TrainLog};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ClassifierConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Output channels of each 3x3 conv block.
    pub conv_channels: Vec<usize>,
    pub dense_width: usize,
    /// Dropout on the feature vector before the output layer.
    pub dropout_p: f64,
    pub classes: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            height: 32,
            width: 32,
            conv_channels: vec![16, 32],
            dense_width: 64,
            dropout_p: 0.2,
            classes: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct DuqConfig {
    /// Embedding size per class (`m`).
    pub embedding: usize,
    pub length_scale: f64,
    /// Centroid EMA momentum.
    pub momentum: f64,
}

impl Default for DuqConfig {
    fn default() -> Self {
        Self { embedding: 32, length_scale: 0.1, momentum: 0.999 }
    }
}

/// Named contiguous slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> core::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Running centroid statistics of the DUQ head: `e_c = sums_c / counts_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct DuqState {
    pub config: DuqConfig,
    pub counts: Vec<f64>,
    pub sums: Vec<f64>,
}

impl DuqState {
    pub fn centroid(&self, c: usize) -> Vec<f64> {
        let m = self.config.embedding;
        self.sums[c * m..(c + 1) * m].iter().map(|v| v / self.counts[c]).collect()
    }

    /// All centroids, class-major.
    pub fn centroids(&self) -> Vec<f64> {
        (0..self.counts.len()).flat_map(|c| self.centroid(c)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    config: ClassifierConfig,
    layout: Vec<ParamBlock>,
    params: Vec<f64>,
    duq: Option<DuqState>,
    shapes: network::Shapes,
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.classes < 2 || self.dense_width == 0 {
            return Err(Error::Configuration("channels, dense width must be positive and classes >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Configuration(format!("dropout_p {} outside [0,1)", self.dropout_p)));
        }
        let (mut h, mut w) = (self.height, self.width);
        for (i, &c) in self.conv_channels.iter().enumerate() {
            if c == 0 {
                return Err(Error::Configuration(format!("conv block {i} has zero channels")));
            }
            if h < 2 || w < 2 {
                return Err(Error::Configuration(format!("input too small for conv block {i}")));
            }
            h /= 2;
            w /= 2;
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

impl Classifier {
    /// Seeded He-normal initialization, zero biases.
    pub fn new(config: ClassifierConfig, duq: Option<DuqConfig>) -> Result<Self> {
        config.validate()?;
        if let Some(d) = duq {
            if d.embedding == 0 || !(d.length_scale > 0.0) || !(d.momentum > 0.0 && d.momentum < 1.0) {
                return Err(Error::Configuration(format!("invalid DUQ head parameters {d:?}")));
            }
        }
        let layout = Self::layout_for(&config, duq.as_ref());
        let total = layout.last().map_or(0, |b| b.offset + b.len());
        let mut params = vec![0.0; total];
        let mut rng = seeded(config.seed);
        for block in &layout {
            if block.name.ends_with(".bias") {
                continue;
            }
            let fan_in: usize = block.shape[1..].iter().product();
            // linear output layers use unit gain, ReLU layers use 2
            let gain = if block.name == "output.weight" || block.name == "duq.weight" { 1.0 } else { 2.0 };
            let normal = Normal::new(0.0, libm::sqrt(gain / fan_in as f64)).expect("finite std");
            for p in &mut params[block.range()] {
                *p = normal.sample(&mut rng);
            }
        }
        let duq_state = duq.map(|d| {
            let n = config.classes;
            let init = Normal::new(0.0, 0.05).expect("finite std");
            // counts start at 13 with centroids drawn around zero
            let counts = vec![13.0; n];
            let sums = (0..n * d.embedding).map(|_| 13.0 * init.sample(&mut rng)).collect();
            DuqState { config: d, counts, sums }
        });
        let shapes = network::Shapes::new(&config, duq.as_ref());
        Ok(Self { config, layout, params, duq: duq_state, shapes })
    }

    /// Reassembles a model from stored parts, validating every length.
    pub fn from_parts(
        config: ClassifierConfig,
        params: Vec<f64>,
        duq: Option<DuqState>,
    ) -> Result<Self> {
        config.validate()?;
        let duq_cfg = duq.as_ref().map(|d| d.config);
        let layout = Self::layout_for(&config, duq_cfg.as_ref());
        let total = layout.last().map_or(0, |b| b.offset + b.len());
        if params.len() != total {
            return Err(Error::Validation(format!("expected {total} parameters, got {}", params.len())));
        }
        if let Some(d) = &duq {
            let m = d.config.embedding;
            if d.counts.len() != config.classes || d.sums.len() != config.classes * m {
                return Err(Error::Validation("DUQ centroid state has wrong shape".into()));
            }
        }
        let shapes = network::Shapes::new(&config, duq_cfg.as_ref());
        Ok(Self { config, layout, params, duq, shapes })
    }

    pub fn layout_for(config: &ClassifierConfig, duq: Option<&DuqConfig>) -> Vec<ParamBlock> {
        let mut blocks = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let b = ParamBlock { name, shape, offset };
            offset += b.len();
            blocks.push(b);
        };
        let mut cin = config.channels;
        let (mut h, mut w) = (config.height, config.width);
        for (i, &cout) in config.conv_channels.iter().enumerate() {
            push(format!("conv{i}.weight"), vec![cout, cin, 3, 3]);
            push(format!("conv{i}.bias"), vec![cout]);
            cin = cout;
            h /= 2;
            w /= 2;
        }
        let flat = cin * h * w;
        push("dense.weight".into(), vec![config.dense_width, flat]);
        push("dense.bias".into(), vec![config.dense_width]);
        match duq {
            None => {
                push("output.weight".into(), vec![config.classes, config.dense_width]);
                push("output.bias".into(), vec![config.classes]);
            }
            Some(d) => push("duq.weight".into(), vec![config.classes * d.embedding, config.dense_width]),
        }
        blocks
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn layout(&self) -> &[ParamBlock] {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn duq_state(&self) -> Option<&DuqState> {
        self.duq.as_ref()
    }

    pub fn is_duq(&self) -> bool {
        self.duq.is_some()
    }

    pub fn block(&self, name: &str) -> Option<&ParamBlock> {
        self.layout.iter().find(|b| b.name == name)
    }

    pub fn block_values(&self, name: &str) -> Option<&[f64]> {
        self.block(name).map(|b| &self.params[b.range()])
    }

    pub fn block_values_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let r = self.block(name)?.range();
        Some(&mut self.params[r])
    }

    pub fn workspace(&self) -> Workspace {
        Workspace::new(&self.shapes)
    }
}
