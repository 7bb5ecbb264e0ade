//! Simulated multi-annotator labels for synthetic runs.
//!
//! A fixed fraction of samples is marked noisy. Each of the annotators errs
//! on a noisy sample independently with probability `q`, redrawn until at
//! least one of them errs; wrong labels are uniform over the other classes.
//! `q = 1 - (1 - noisy_frac)^(1/annotators)` is the per-annotator rate that
//! would produce the same noisy fraction without the conditioning.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::pool::{LabelFile, Provenance};
use crate::rng::{derive_seed, seeded};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct AnnotatorModel {
    pub annotators: usize,
    pub noisy_frac: f64,
    pub seed: u64,
}

impl Default for AnnotatorModel {
    fn default() -> Self {
        Self { annotators: 3, noisy_frac: 0.40, seed: 0 }
    }
}

/// Per-sample annotations, both tagged [`Provenance::Simulated`].
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedLabels {
    /// One label per sample: the first wrong annotation if any, otherwise
    /// the agreed label.
    pub worst: LabelFile,
    /// All annotations in annotator order.
    pub all: LabelFile,
    /// Ids whose annotations contain at least one error.
    pub noisy_ids: Vec<usize>,
}

impl AnnotatorModel {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.annotators == 0 {
            return Err(Error::Configuration("need at least one annotator".into()));
        }
        if !(0.0..=1.0).contains(&self.noisy_frac) {
            return Err(Error::Configuration(format!("noisy_frac {} outside [0, 1]", self.noisy_frac)));
        }
        if classes < 2 || classes > 256 {
            return Err(Error::Configuration(format!("cannot simulate noise over {classes} classes")));
        }
        Ok(())
    }

    pub fn error_rate(&self) -> f64 {
        1.0 - libm::pow(1.0 - self.noisy_frac, 1.0 / self.annotators as f64)
    }

    pub fn simulate(&self, clean: &[u8], classes: usize) -> Result<SimulatedLabels> {
        self.validate(classes)?;
        if let Some(&l) = clean.iter().find(|&&l| usize::from(l) >= classes) {
            return Err(Error::Validation(format!("clean label {l} outside [0, {classes})")));
        }
        let n = clean.len();
        let n_noisy = libm::round(self.noisy_frac * n as f64) as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seeded(self.seed));
        let mut noisy_ids: Vec<usize> = order[..n_noisy].to_vec();
        noisy_ids.sort_unstable();

        let q = self.error_rate();
        let mut worst = LabelFile::with_source(classes, Provenance::Simulated);
        let mut all = LabelFile::with_source(classes, Provenance::Simulated);
        let mut next_noisy = noisy_ids.iter().peekable();
        for (id, &truth) in clean.iter().enumerate() {
            let mut labels = alloc::vec![truth; self.annotators];
            if next_noisy.next_if_eq(&&id).is_some() {
                let mut rng = seeded(derive_seed(self.seed, &[id as u64]));
                let wrong: Vec<bool> = loop {
                    let draw: Vec<bool> = (0..self.annotators).map(|_| rng.random::<f64>() < q).collect();
                    if draw.iter().any(|&w| w) {
                        break draw;
                    }
                };
                for (label, w) in labels.iter_mut().zip(wrong) {
                    if w {
                        let offset = rng.random_range(1..classes) as u8;
                        *label = ((usize::from(truth) + usize::from(offset)) % classes) as u8;
                    }
                }
            }
            let single = labels.iter().copied().find(|&l| l != truth).unwrap_or(truth);
            worst.insert(id, alloc::vec![single])?;
            all.insert(id, labels)?;
        }
        Ok(SimulatedLabels { worst, all, noisy_ids })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pool::{disagreement_rate, MultiLabelDataset};
    use alloc::vec;

    fn clean(n: usize) -> Vec<u8> {
        (0..n).map(|i| (i % 10) as u8).collect()
    }

    fn to_mld(f: &LabelFile) -> MultiLabelDataset {
        let labels: Vec<Vec<u8>> = f.entries.values().cloned().collect();
        MultiLabelDataset { classes: f.classes, provenance: vec![f.source; labels.len()], labels }
    }

    #[test]
    fn worst_label_matches_noisy_fraction_exactly() {
        let c = clean(1000);
        let sim = AnnotatorModel { seed: 3, ..Default::default() }.simulate(&c, 10).unwrap();
        assert_eq!(sim.noisy_ids.len(), 400);
        assert_eq!(disagreement_rate(&to_mld(&sim.worst), &c), 0.4);
        for (&id, ls) in &sim.all.entries {
            let noisy = sim.noisy_ids.binary_search(&id).is_ok();
            assert_eq!(ls.iter().any(|&l| l != c[id]), noisy);
            assert_eq!(ls.len(), 3);
        }
        assert_eq!(sim.worst.source, Provenance::Simulated);
    }

    #[test]
    fn per_annotator_rate_is_near_q() {
        let c = clean(20000);
        let m = AnnotatorModel { seed: 5, ..Default::default() };
        let sim = m.simulate(&c, 10).unwrap();
        let c = &c;
        let wrong = sim.all.entries.iter().flat_map(|(&id, ls)| ls.iter().map(move |&l| l != c[id]));
        let rate = wrong.filter(|&w| w).count() as f64 / 60000.0;
        // conditioning on a noisy sample having an error inflates the count
        // to noisy_frac * E[errors | any error] / annotators
        let q = m.error_rate();
        let expected = 0.4 * (3.0 * q / 0.4) / 3.0;
        assert!((rate - expected).abs() < 0.01, "rate {rate} expected {expected}");
    }

    #[test]
    fn deterministic_and_validated() {
        let c = clean(50);
        let m = AnnotatorModel::default();
        assert_eq!(m.simulate(&c, 10).unwrap(), m.simulate(&c, 10).unwrap());
        assert!(AnnotatorModel { annotators: 0, ..m }.simulate(&c, 10).is_err());
        assert!(AnnotatorModel { noisy_frac: 1.5, ..m }.simulate(&c, 10).is_err());
        assert!(m.simulate(&[12], 10).is_err());
        let none = AnnotatorModel { noisy_frac: 0.0, ..m }.simulate(&c, 10).unwrap();
        assert!(none.worst.entries.iter().all(|(&id, ls)| ls == &vec![c[id]]));
    }
}
