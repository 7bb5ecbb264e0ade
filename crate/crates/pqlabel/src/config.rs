//! TOML experiment configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use pqlabel_core::annotators::AnnotatorModel;
use pqlabel_core::clustering::FeatureMode;
use pqlabel_core::model::{ClassifierConfig, DuqConfig, TrainHyper};
use pqlabel_core::pool::{Condition, PoolConfig};
use pqlabel_core::quality::DEFAULT_RIDGE;
use pqlabel_core::shifts::{Corruption, SeverityTable, ShiftSpec, SuiteKind, ROTATION_ANGLES};

use crate::error::{Error, Result};

/// Prediction head evaluated in the report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Vanilla,
    McDropout,
    Duq,
}

impl Head {
    pub const ALL: [Head; 3] = [Head::Vanilla, Head::McDropout, Head::Duq];

    pub fn as_str(self) -> &'static str {
        match self {
            Head::Vanilla => "vanilla",
            Head::McDropout => "mc_dropout",
            Head::Duq => "duq",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Head::Vanilla => "Vanilla",
            Head::McDropout => "MC Dropout",
            Head::Duq => "DUQ",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|h| h.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown head {s:?}")))
    }

    /// Vanilla and MC dropout read the same trained softmax model.
    pub fn uses_duq_model(self) -> bool {
        self == Head::Duq
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Oriented gratings; see `pqlabel_core::synthetic`.
    Synthetic {
        #[serde(default = "default_data_seed")]
        seed: u64,
        #[serde(default = "default_train")]
        train: usize,
        #[serde(default = "default_test")]
        test: usize,
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_side")]
        side: usize,
        /// Label files override the simulated annotators when given.
        #[serde(default)]
        noisy_labels: Option<PathBuf>,
        #[serde(default)]
        human_labels: Option<PathBuf>,
        #[serde(default)]
        annotators: AnnotatorModel,
    },
    Cifar10 {
        train_files: Vec<PathBuf>,
        test_file: PathBuf,
        #[serde(default = "default_cifar_train")]
        train_count: usize,
        #[serde(default = "default_cifar_test")]
        test_count: usize,
        #[serde(default = "default_classes")]
        classes: usize,
        /// Single-label file for the noisy condition, e.g. an export of one
        /// CIFAR-10-N set.
        #[serde(default)]
        noisy_labels: Option<PathBuf>,
        /// Multi-annotator file for the human multi-label condition.
        #[serde(default)]
        human_labels: Option<PathBuf>,
        /// Name of the CIFAR-10-N set the noisy file was exported from;
        /// recorded in reports only.
        #[serde(default = "default_label_set")]
        label_set: String,
    },
}

fn default_data_seed() -> u64 {
    1
}
fn default_train() -> usize {
    5000
}
fn default_test() -> usize {
    1000
}
fn default_classes() -> usize {
    10
}
fn default_side() -> usize {
    32
}
fn default_cifar_train() -> usize {
    50000
}
fn default_cifar_test() -> usize {
    10000
}
fn default_label_set() -> String {
    "worst".into()
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic {
            seed: default_data_seed(),
            train: default_train(),
            test: default_test(),
            classes: default_classes(),
            side: default_side(),
            noisy_labels: None,
            human_labels: None,
            annotators: AnnotatorModel::default(),
        }
    }
}

impl DataConfig {
    pub fn classes(&self) -> usize {
        match self {
            DataConfig::Synthetic { classes, .. } | DataConfig::Cifar10 { classes, .. } => *classes,
        }
    }

    pub fn label_paths(&self) -> (Option<&Path>, Option<&Path>) {
        match self {
            DataConfig::Synthetic { noisy_labels, human_labels, .. }
            | DataConfig::Cifar10 { noisy_labels, human_labels, .. } => {
                (noisy_labels.as_deref(), human_labels.as_deref())
            }
        }
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DataConfig::Synthetic { noisy_labels, human_labels, .. } => {
                noisy_labels.iter_mut().chain(human_labels.iter_mut()).for_each(fix);
            }
            DataConfig::Cifar10 { train_files, test_file, noisy_labels, human_labels, .. } => {
                train_files.iter_mut().for_each(fix);
                fix(test_file);
                noisy_labels.iter_mut().chain(human_labels.iter_mut()).for_each(fix);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringConfig {
    pub features: FeatureMode,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self { features: FeatureMode::Pixel, max_iter: 300, tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftConfig {
    pub rotation_angles: Vec<f64>,
    pub corruptions: Vec<Corruption>,
    /// Per-type replacement of the five severity parameters.
    pub severity_overrides: BTreeMap<Corruption, [f64; 5]>,
    pub seed: u64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            rotation_angles: ROTATION_ANGLES.to_vec(),
            corruptions: Corruption::ALL.to_vec(),
            severity_overrides: BTreeMap::new(),
            seed: 0,
        }
    }
}

impl ShiftConfig {
    pub fn specs(&self, kind: SuiteKind) -> Vec<ShiftSpec> {
        match kind {
            SuiteKind::Rotation => self.rotation_angles.iter().map(|&angle| ShiftSpec::Rotation { angle }).collect(),
            SuiteKind::Corruption => self
                .corruptions
                .iter()
                .flat_map(|&kind| (1..=5).map(move |severity| ShiftSpec::Corruption { kind, severity }))
                .collect(),
        }
    }

    pub fn table(&self) -> Result<SeverityTable> {
        self.severity_overrides
            .iter()
            .try_fold(SeverityTable::default(), |t, (&k, &v)| t.with_override(k, v))
            .map_err(Error::from)
    }
}

/// Margins for the directional checks stamped in the report footer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcceptanceConfig {
    pub enabled: bool,
    /// Minimum entropy increase of noisy_single over clean (bits).
    pub noise_entropy_gap: f64,
    /// Minimum accuracy drop of noisy_single below clean.
    pub noise_accuracy_gap: f64,
    /// Minimum entropy reduction of pq_multi below noisy_single (bits).
    pub pq_entropy_gap: f64,
    /// Allowed accuracy shortfall of pq_multi below noisy_single.
    pub pq_accuracy_tolerance: f64,
    /// Epoch multiplier of the single rerun when a check fails; 0 disables.
    pub rerun_epoch_factor: usize,
}

impl Default for AcceptanceConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            noise_entropy_gap: 0.3,
            noise_accuracy_gap: 0.03,
            pq_entropy_gap: 0.15,
            pq_accuracy_tolerance: 0.01,
            rerun_epoch_factor: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub heads: Vec<Head>,
    pub conditions: Vec<Condition>,
    pub suites: Vec<SuiteKind>,
    pub data: DataConfig,
    pub ridge: f64,
    pub clustering: ClusteringConfig,
    pub pool: PoolConfig,
    /// Grow pool_frac until the pool's disagreement matches noisy_single.
    pub calibrate_pool: bool,
    pub model: ClassifierConfig,
    pub train: TrainHyper,
    pub duq: DuqConfig,
    /// Learning rate for DUQ models; the other hyperparameters follow `train`.
    pub duq_learning_rate: f64,
    pub mc_passes: usize,
    pub shifts: ShiftConfig,
    pub acceptance: AcceptanceConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
            seeds: vec![0, 1, 2],
            heads: Head::ALL.to_vec(),
            conditions: Condition::ALL.to_vec(),
            suites: vec![SuiteKind::Rotation, SuiteKind::Corruption],
            data: DataConfig::default(),
            ridge: DEFAULT_RIDGE,
            clustering: ClusteringConfig::default(),
            pool: PoolConfig::default(),
            calibrate_pool: false,
            model: ClassifierConfig::default(),
            train: TrainHyper::default(),
            duq: DuqConfig::default(),
            duq_learning_rate: 0.005,
            mc_passes: 20,
            shifts: ShiftConfig::default(),
            acceptance: AcceptanceConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; relative data paths resolve against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::input(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| e.context(path.display().to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data.resolve(base);
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key.path=value` overrides by editing the TOML tree, so every
    /// field can be set from the command line.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut tree: toml::Table = toml::from_str(&self.to_toml()).expect("own output parses");
        for item in overrides {
            let (key, raw) =
                item.split_once('=').ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
                Ok(mut t) => t.remove("v").expect("parsed key"),
                Err(_) => toml::Value::String(raw.to_string()),
            };
            let mut parts: Vec<&str> = key.split('.').collect();
            let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| Error::Config(format!("empty key in {item:?}")))?;
            let mut node = &mut tree;
            for p in parts {
                node = node
                    .entry(p)
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("{p} in {key} is not a table")))?;
            }
            node.insert(last.to_string(), value);
        }
        toml::Value::Table(tree).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads.is_empty() || self.conditions.is_empty() || self.suites.is_empty() {
            return bad("need at least one head, one condition and one suite".into());
        }
        if self.seeds.is_empty() {
            return bad("need at least one seed".into());
        }
        for (name, has_dups) in [
            ("seeds", has_duplicates(&self.seeds)),
            ("heads", has_duplicates(&self.heads)),
            ("conditions", has_duplicates(&self.conditions)),
            ("suites", has_duplicates(&self.suites)),
        ] {
            if has_dups {
                return bad(format!("{name} contain duplicates"));
            }
        }
        let classes = self.data.classes();
        if self.model.classes != classes {
            return bad(format!("model.classes = {} but the data has {classes} classes", self.model.classes));
        }
        match &self.data {
            DataConfig::Synthetic { train, test, side, annotators, .. } => {
                if *train < classes || *test == 0 {
                    return bad(format!("synthetic split {train}/{test} too small for {classes} classes"));
                }
                if self.model.height != *side || self.model.width != *side || self.model.channels != 3 {
                    return bad(format!("model input must be 3x{side}x{side} for the synthetic data"));
                }
                annotators.validate(classes)?;
            }
            DataConfig::Cifar10 { train_files, .. } => {
                if train_files.is_empty() {
                    return bad("cifar10 data needs at least one train file".into());
                }
                if (self.model.channels, self.model.height, self.model.width) != (3, 32, 32) {
                    return bad("model input must be 3x32x32 for CIFAR-10".into());
                }
            }
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return bad(format!("ridge {} must be nonnegative", self.ridge));
        }
        if self.mc_passes == 0 && self.heads.contains(&Head::McDropout) {
            return bad("mc_passes must be positive".into());
        }
        if !(self.duq_learning_rate > 0.0) {
            return bad("duq_learning_rate must be positive".into());
        }
        if self.shifts.rotation_angles.is_empty() && self.suites.contains(&SuiteKind::Rotation) {
            return bad("rotation suite has no angles".into());
        }
        if self.shifts.corruptions.is_empty() && self.suites.contains(&SuiteKind::Corruption) {
            return bad("corruption suite has no types".into());
        }
        for kind in &self.suites {
            for spec in self.shifts.specs(*kind) {
                spec.validate()?;
            }
        }
        self.shifts.table()?;
        self.pool.validate(classes)?;
        self.model.validate()?;
        Ok(())
    }

    /// SHA-256 over the canonical TOML with `output_dir` cleared, so the
    /// same experiment written elsewhere keeps its digest.
    pub fn digest(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let hash = Sha256::digest(canonical.to_toml().as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn has_duplicates<T: Ord + Clone>(v: &[T]) -> bool {
    let mut s = v.to_vec();
    s.sort();
    s.windows(2).any(|w| w[0] == w[1])
}
