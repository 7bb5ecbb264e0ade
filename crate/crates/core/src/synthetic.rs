//! Seeded oriented-grating dataset, a fast stand-in for CIFAR-10.
//!
//! Class `c` of `C` is a sinusoidal grating at `c * 180/C` degrees. Each
//! sample draws a random phase and a contrast in `[0.3, 1.0]`, and every
//! channel receives independent Gaussian pixel noise. Neighbouring classes
//! differ by the smallest orientation step, so nearest-centroid confusions
//! land on semantically adjacent labels.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::rng::{derive_seed, seeded};
use crate::{Error, Result, RgbImage, Sample};

/// Grating period in pixels.
pub const PERIOD_PX: f64 = 6.0;
pub const NOISE_SIGMA: f64 = 0.08;
pub const CONTRAST_RANGE: (f64, f64) = (0.3, 1.0);

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SyntheticSpec {
    pub seed: u64,
    pub samples: usize,
    pub classes: usize,
    pub side: usize,
}

/// Generates `spec.samples` samples with labels cycling `0..C`, so class
/// counts differ by at most one. Sample `i` depends only on `(seed, i)`.
pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    let SyntheticSpec { seed, samples, classes, side } = *spec;
    if classes == 0 || classes > 256 {
        return Err(Error::Validation(format!("class count {classes} outside 1..=256")));
    }
    if samples < classes {
        return Err(Error::Validation(format!("need n >= C, got n={samples}, C={classes}")));
    }
    if side < 8 {
        return Err(Error::Validation(format!("side must be >= 8, got {side}")));
    }
    (0..samples)
        .map(|i| {
            let label = (i % classes) as u8;
            let image = grating(derive_seed(seed, &[i as u64]), label, classes, side);
            Ok(Sample::new(i, image, Some(label)))
        })
        .collect()
}

fn grating(seed: u64, label: u8, classes: usize, side: usize) -> RgbImage {
    let mut rng = seeded(seed);
    let theta = f64::from(label) * core::f64::consts::PI / classes as f64;
    let phase = rng.random::<f64>() * 2.0 * core::f64::consts::PI;
    let contrast = CONTRAST_RANGE.0 + (CONTRAST_RANGE.1 - CONTRAST_RANGE.0) * rng.random::<f64>();
    let (s, c) = (libm::sin(theta), libm::cos(theta));
    let k = 2.0 * core::f64::consts::PI / PERIOD_PX;
    let centre = (side as f64 - 1.0) / 2.0;
    let plane = side * side;
    let mut base = Vec::with_capacity(plane);
    for y in 0..side {
        for x in 0..side {
            let (u, v) = (x as f64 - centre, y as f64 - centre);
            base.push(0.5 + 0.5 * contrast * libm::cos(k * (u * c + v * s) + phase));
        }
    }
    let mut planes = Vec::with_capacity(3 * plane);
    for _ in 0..3 {
        for &b in &base {
            let n: f64 = StandardNormal.sample(&mut rng);
            planes.push(b + NOISE_SIGMA * n);
        }
    }
    RgbImage::from_unit_planes(side, side, &planes).expect("dimensions are consistent")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64, samples: usize) -> SyntheticSpec {
        SyntheticSpec { seed, samples, classes: 10, side: 32 }
    }

    #[test]
    fn deterministic_given_seed() {
        assert_eq!(synthetic_dataset(&spec(1, 30)).unwrap(), synthetic_dataset(&spec(1, 30)).unwrap());
        assert_ne!(synthetic_dataset(&spec(1, 30)).unwrap(), synthetic_dataset(&spec(2, 30)).unwrap());
    }

    #[test]
    fn classes_are_balanced() {
        let d = synthetic_dataset(&spec(1, 100)).unwrap();
        let mut counts = [0usize; 10];
        for s in &d {
            counts[s.clean_label.unwrap() as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c == 10));
        let d = synthetic_dataset(&spec(1, 105)).unwrap();
        let mut counts = [0usize; 10];
        for s in &d {
            counts[s.clean_label.unwrap() as usize] += 1;
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1);
    }

    #[test]
    fn prefix_is_stable_when_growing() {
        let small = synthetic_dataset(&spec(9, 20)).unwrap();
        let big = synthetic_dataset(&spec(9, 40)).unwrap();
        assert_eq!(&big[..20], &small[..]);
    }

    #[test]
    fn preconditions() {
        assert!(synthetic_dataset(&SyntheticSpec { seed: 0, samples: 5, classes: 10, side: 32 }).is_err());
        assert!(synthetic_dataset(&SyntheticSpec { seed: 0, samples: 10, classes: 10, side: 7 }).is_err());
    }
}
