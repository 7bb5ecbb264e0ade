//! Uncertain-pool construction, label replication and the four training
//! label conditions.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::clustering::{generate_labels, KMeansModel};
use crate::image::clean_labels;
use crate::{Error, Result, Sample};

/// Where a sample's labels came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Provenance {
    Clean,
    Generated,
    /// Read from an annotation file.
    Human,
    /// Produced by a simulated annotator model, never real annotations.
    Simulated,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Clean => "clean",
            Provenance::Generated => "generated",
            Provenance::Human => "human",
            Provenance::Simulated => "simulated",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Provenance::Clean),
            "generated" => Ok(Provenance::Generated),
            "human" => Ok(Provenance::Human),
            "simulated" => Ok(Provenance::Simulated),
            other => Err(Error::Validation(format!("unknown provenance {other:?}"))),
        }
    }
}

/// Ordered label lists keyed by sample id. Labels are kept exactly as read.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelFile {
    pub classes: usize,
    pub entries: BTreeMap<usize, Vec<u8>>,
    /// Tag given to labels built from this file.
    pub source: Provenance,
}

impl LabelFile {
    pub fn new(classes: usize) -> Self {
        Self::with_source(classes, Provenance::Human)
    }

    pub fn with_source(classes: usize, source: Provenance) -> Self {
        Self { classes, entries: BTreeMap::new(), source }
    }

    /// Inserts one entry, rejecting duplicates, empty lists and labels out
    /// of range.
    pub fn insert(&mut self, id: usize, labels: Vec<u8>) -> Result<()> {
        if labels.is_empty() {
            return Err(Error::Validation(format!("id {id} has no labels")));
        }
        if let Some(&l) = labels.iter().find(|&&l| usize::from(l) >= self.classes) {
            return Err(Error::Validation(format!("id {id}: label {l} outside [0, {})", self.classes)));
        }
        if self.entries.contains_key(&id) {
            return Err(Error::Validation(format!("duplicate id {id}")));
        }
        self.entries.insert(id, labels);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&[u8]> {
        self.entries.get(&id).map(Vec::as_slice)
    }

    /// Fails unless every sample id `0..n` has an entry and no entry points
    /// past the dataset.
    pub fn check_covers(&self, n: usize) -> Result<()> {
        if let Some((&id, _)) = self.entries.range(n..).next() {
            return Err(Error::Validation(format!("label id {id} does not exist in a dataset of {n}")));
        }
        if self.entries.len() != n {
            let missing = (0..n).find(|i| !self.entries.contains_key(i)).unwrap_or(0);
            return Err(Error::Validation(format!("no labels for sample {missing}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct PoolConfig {
    pub pool_frac: f64,
    pub multi_frac: f64,
    pub triple_frac: f64,
    pub k_max: usize,
    /// Seed of the K-means fit that backs label generation.
    pub seed: u64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self { pool_frac: 0.40, multi_frac: 0.10, triple_frac: 0.05, k_max: 3, seed: 0 }
    }
}

/// Sample counts per label multiplicity for a dataset of `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolPlan {
    pub pool: usize,
    pub triple: usize,
    pub double: usize,
    pub single: usize,
    pub clean: usize,
}

impl PoolConfig {
    pub fn validate(&self, classes: usize) -> Result<()> {
        let Self { pool_frac, multi_frac, triple_frac, k_max, .. } = *self;
        let ordered = 0.0 <= triple_frac && triple_frac <= multi_frac && multi_frac <= pool_frac && pool_frac <= 1.0;
        if !ordered {
            return Err(Error::Configuration(format!(
                "need 0 <= triple_frac <= multi_frac <= pool_frac <= 1, got {triple_frac}, {multi_frac}, {pool_frac}"
            )));
        }
        if k_max < 2 || k_max > classes {
            return Err(Error::Configuration(format!("k_max {k_max} outside 2..={classes}")));
        }
        Ok(())
    }

    pub fn plan(&self, n: usize) -> PoolPlan {
        let count = |f: f64| (libm::round(f * n as f64) as usize).min(n);
        let pool = count(self.pool_frac);
        let multi = count(self.multi_frac).min(pool);
        let triple = count(self.triple_frac).min(multi);
        PoolPlan { pool, triple, double: multi - triple, single: pool - multi, clean: n - pool }
    }
}

/// Per-sample label lists (index = sample id) with provenance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiLabelDataset {
    pub classes: usize,
    pub labels: Vec<Vec<u8>>,
    pub provenance: Vec<Provenance>,
}

impl MultiLabelDataset {
    pub fn from_clean(labels: &[u8], classes: usize) -> Self {
        Self {
            classes,
            labels: labels.iter().map(|&l| vec![l]).collect(),
            provenance: vec![Provenance::Clean; labels.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pair_count(&self) -> usize {
        self.labels.iter().map(Vec::len).sum()
    }
}

/// One (sample, label) training presentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TrainPair {
    pub id: usize,
    pub label: u8,
    pub replica: usize,
}

/// Produces `m` candidate labels for sample `id`.
pub trait Labeler {
    fn labels(&self, id: usize, m: usize) -> Result<Vec<u8>>;
}

/// Nearest-centroid labeler over precomputed clustering features.
pub struct CentroidLabeler<'a> {
    pub model: &'a KMeansModel,
    pub features: &'a [Vec<f64>],
}

impl Labeler for CentroidLabeler<'_> {
    fn labels(&self, id: usize, m: usize) -> Result<Vec<u8>> {
        let x = self
            .features
            .get(id)
            .ok_or_else(|| Error::Validation(format!("no clustering features for sample {id}")))?;
        generate_labels(x, self.model, m)
    }
}

impl<F: Fn(usize, usize) -> Result<Vec<u8>>> Labeler for F {
    fn labels(&self, id: usize, m: usize) -> Result<Vec<u8>> {
        self(id, m)
    }
}

/// Takes the top of `ranking` as the pool: the first `triple` samples get
/// `min(3, k_max)` generated labels, the next `double` get two and the rest
/// of the pool one. Pool samples lose their clean label; every other sample
/// keeps it.
pub fn build_pool(
    samples: &[Sample],
    ranking: &[usize],
    cfg: &PoolConfig,
    classes: usize,
    labeler: &dyn Labeler,
) -> Result<MultiLabelDataset> {
    cfg.validate(classes)?;
    let clean = clean_labels(samples)?;
    check_permutation(ranking, samples.len())?;
    let plan = cfg.plan(samples.len());
    let mut out = MultiLabelDataset::from_clean(&clean, classes);
    for (rank, &id) in ranking.iter().take(plan.pool).enumerate() {
        let m = if rank < plan.triple {
            cfg.k_max.min(3)
        } else if rank < plan.triple + plan.double {
            2
        } else {
            1
        };
        let labels = labeler.labels(id, m)?;
        if labels.len() != m || labels.iter().any(|&l| usize::from(l) >= classes) {
            return Err(Error::Validation(format!("labeler returned invalid labels for sample {id}")));
        }
        out.labels[id] = labels;
        out.provenance[id] = Provenance::Generated;
    }
    Ok(out)
}

fn check_permutation(ranking: &[usize], n: usize) -> Result<()> {
    if ranking.len() != n {
        return Err(Error::Validation(format!("ranking has {} ids for {n} samples", ranking.len())));
    }
    let mut seen = vec![false; n];
    for &id in ranking {
        if id >= n || core::mem::replace(&mut seen[id], true) {
            return Err(Error::Validation(format!("ranking is not a permutation (id {id})")));
        }
    }
    Ok(())
}

/// One pair per label entry, ordered by (id, replica).
pub fn replicate(mld: &MultiLabelDataset) -> Vec<TrainPair> {
    mld.labels
        .iter()
        .enumerate()
        .flat_map(|(id, ls)| ls.iter().enumerate().map(move |(replica, &label)| TrainPair { id, label, replica }))
        .collect()
}

/// Fraction of training pairs whose label differs from the clean label.
pub fn disagreement_rate(mld: &MultiLabelDataset, clean: &[u8]) -> f64 {
    let (mut wrong, mut total) = (0usize, 0usize);
    for (ls, &c) in mld.labels.iter().zip(clean) {
        total += ls.len();
        wrong += ls.iter().filter(|&&l| l != c).count();
    }
    if total == 0 {
        0.0
    } else {
        wrong as f64 / total as f64
    }
}

/// Training label condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Condition {
    Clean,
    NoisySingle,
    HumanMulti,
    PqMulti,
}

impl Condition {
    pub const ALL: [Condition; 4] =
        [Condition::Clean, Condition::NoisySingle, Condition::HumanMulti, Condition::PqMulti];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Clean => "clean",
            Condition::NoisySingle => "noisy_single",
            Condition::HumanMulti => "human_multi",
            Condition::PqMulti => "pq_multi",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Configuration(format!("unknown condition {s:?}")))
    }

    /// Row title used in rendered tables.
    pub fn title(self) -> &'static str {
        match self {
            Condition::Clean => "Clean",
            Condition::NoisySingle => "Human Noise",
            Condition::HumanMulti => "Human-based",
            Condition::PqMulti => "Perceptual quality-based",
        }
    }
}

/// Inputs a condition may draw on.
#[derive(Default)]
pub struct ConditionSources<'a> {
    pub noisy_single: Option<&'a LabelFile>,
    pub human_multi: Option<&'a LabelFile>,
    pub ranking: Option<&'a [usize]>,
    pub labeler: Option<&'a dyn Labeler>,
}

pub fn build_condition(
    condition: Condition,
    samples: &[Sample],
    classes: usize,
    sources: &ConditionSources<'_>,
    cfg: &PoolConfig,
) -> Result<MultiLabelDataset> {
    let missing = |what: &str| {
        Error::Configuration(format!("condition {} requires {what}", condition.as_str()))
    };
    let from_file = |file: &LabelFile, first_only: bool| -> Result<MultiLabelDataset> {
        file.check_covers(samples.len()).map_err(|e| e.context(condition.as_str()))?;
        let labels: Vec<Vec<u8>> = file
            .entries
            .values()
            .map(|ls| if first_only { vec![ls[0]] } else { ls.clone() })
            .collect();
        if let Some(l) = labels.iter().flatten().find(|&&l| usize::from(l) >= classes) {
            return Err(Error::Validation(format!("label {l} outside [0, {classes})")));
        }
        Ok(MultiLabelDataset { classes, provenance: vec![file.source; labels.len()], labels })
    };
    match condition {
        Condition::Clean => Ok(MultiLabelDataset::from_clean(&clean_labels(samples)?, classes)),
        Condition::NoisySingle => from_file(sources.noisy_single.ok_or_else(|| missing("a noisy label file"))?, true),
        Condition::HumanMulti => {
            from_file(sources.human_multi.ok_or_else(|| missing("a multi-annotator label file"))?, false)
        }
        Condition::PqMulti => {
            let ranking = sources.ranking.ok_or_else(|| missing("a quality ranking"))?;
            let labeler = sources.labeler.ok_or_else(|| missing("a fitted labeler"))?;
            build_pool(samples, ranking, cfg, classes, labeler)
        }
    }
}

/// Outcome of matching the pool's disagreement to a target rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub config: PoolConfig,
    pub dataset: MultiLabelDataset,
    pub rate: f64,
    pub target: f64,
    pub matched: bool,
}

/// Grows `pool_frac` in steps of 0.01 until the disagreement rate is within
/// 0.01 of `target` or the whole dataset is pooled. Returns the closest
/// configuration seen when no step matches.
pub fn calibrate_pool_frac(
    samples: &[Sample],
    ranking: &[usize],
    cfg: &PoolConfig,
    classes: usize,
    labeler: &dyn Labeler,
    target: f64,
) -> Result<Calibration> {
    let clean = clean_labels(samples)?;
    let mut best: Option<Calibration> = None;
    let mut step = 0usize;
    loop {
        let mut c = *cfg;
        c.pool_frac = (cfg.pool_frac + 0.01 * step as f64).min(1.0);
        let dataset = build_pool(samples, ranking, &c, classes, labeler)?;
        let rate = disagreement_rate(&dataset, &clean);
        let matched = (rate - target).abs() <= 0.01;
        let better = best.as_ref().is_none_or(|b| (rate - target).abs() < (b.rate - target).abs());
        if better || matched {
            best = Some(Calibration { config: c, dataset, rate, target, matched });
        }
        if matched || c.pool_frac >= 1.0 {
            break;
        }
        step += 1;
    }
    Ok(best.expect("loop runs at least once"))
}

/// Compact textual summary of a plan, used in logs.
pub fn describe_plan(plan: &PoolPlan) -> String {
    format!(
        "pool {} (3 labels: {}, 2 labels: {}, 1 label: {}), clean {}",
        plan.pool, plan.triple, plan.double, plan.single, plan.clean
    )
}
