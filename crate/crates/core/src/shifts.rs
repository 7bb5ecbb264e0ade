//! Rotation and corruption transforms for the shifted evaluation suites.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::rng::{derive_seed, seeded};
use crate::{Error, Result, RgbImage, Sample};

/// Angles of the rotation suite, degrees.
pub const ROTATION_ANGLES: [f64; 12] =
    [15.0, 30.0, 45.0, 60.0, 75.0, 90.0, 105.0, 120.0, 135.0, 150.0, 165.0, 180.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Corruption {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    GaussianBlur,
    Contrast,
    Brightness,
    Pixelate,
}

impl Corruption {
    pub const ALL: [Corruption; 7] = [
        Corruption::GaussianNoise,
        Corruption::ShotNoise,
        Corruption::ImpulseNoise,
        Corruption::GaussianBlur,
        Corruption::Contrast,
        Corruption::Brightness,
        Corruption::Pixelate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Corruption::GaussianNoise => "gaussian_noise",
            Corruption::ShotNoise => "shot_noise",
            Corruption::ImpulseNoise => "impulse_noise",
            Corruption::GaussianBlur => "gaussian_blur",
            Corruption::Contrast => "contrast",
            Corruption::Brightness => "brightness",
            Corruption::Pixelate => "pixelate",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Configuration(format!("unknown corruption type {s:?}")))
    }

    /// Default severity-indexed parameter (severity 1..=5).
    pub fn parameter(self, severity: u8) -> Result<f64> {
        check_severity(severity)?;
        Ok(self.default_table()[usize::from(severity) - 1])
    }

    pub fn default_table(self) -> [f64; 5] {
        match self {
            Corruption::GaussianNoise => [0.04, 0.06, 0.08, 0.09, 0.10],
            Corruption::ShotNoise => [60.0, 25.0, 12.0, 5.0, 3.0],
            Corruption::ImpulseNoise => [0.01, 0.02, 0.03, 0.05, 0.07],
            Corruption::GaussianBlur => [0.4, 0.6, 0.8, 1.0, 1.2],
            Corruption::Contrast => [0.75, 0.5, 0.4, 0.3, 0.15],
            Corruption::Brightness => [0.05, 0.10, 0.15, 0.20, 0.25],
            Corruption::Pixelate => [1.33, 1.6, 2.0, 2.67, 4.0],
        }
    }

    /// Parameter value at which the deterministic corruptions are the
    /// identity.
    pub fn identity_parameter(self) -> Option<f64> {
        match self {
            Corruption::Contrast | Corruption::Pixelate => Some(1.0),
            Corruption::Brightness => Some(0.0),
            _ => None,
        }
    }

    fn is_stochastic(self) -> bool {
        matches!(self, Corruption::GaussianNoise | Corruption::ShotNoise | Corruption::ImpulseNoise)
    }
}

fn check_severity(severity: u8) -> Result<()> {
    if (1..=5).contains(&severity) {
        Ok(())
    } else {
        Err(Error::Configuration(format!("severity {severity} outside 1..=5")))
    }
}

/// Severity parameters with optional per-type overrides of the defaults.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SeverityTable {
    overrides: BTreeMap<Corruption, [f64; 5]>,
}

impl SeverityTable {
    pub fn with_override(mut self, kind: Corruption, values: [f64; 5]) -> Result<Self> {
        let ok = values.iter().all(|v| match kind {
            Corruption::GaussianNoise | Corruption::ImpulseNoise | Corruption::Brightness => v.is_finite(),
            Corruption::ShotNoise | Corruption::GaussianBlur | Corruption::Contrast => *v > 0.0 && v.is_finite(),
            Corruption::Pixelate => *v >= 1.0 && v.is_finite(),
        });
        if !ok || (kind == Corruption::ImpulseNoise && values.iter().any(|v| !(0.0..=1.0).contains(v))) {
            return Err(Error::Configuration(format!("invalid severity values for {}: {values:?}", kind.as_str())));
        }
        self.overrides.insert(kind, values);
        Ok(self)
    }

    pub fn parameter(&self, kind: Corruption, severity: u8) -> Result<f64> {
        check_severity(severity)?;
        let table = self.overrides.get(&kind).copied().unwrap_or_else(|| kind.default_table());
        Ok(table[usize::from(severity) - 1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ShiftSpec {
    Rotation { angle: f64 },
    Corruption { kind: Corruption, severity: u8 },
}

impl ShiftSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ShiftSpec::Rotation { angle } if !(angle > 0.0 && angle <= 180.0) => {
                Err(Error::Configuration(format!("rotation angle {angle} outside (0, 180]")))
            }
            ShiftSpec::Corruption { kind, severity } => kind.parameter(severity).map(|_| ()),
            _ => Ok(()),
        }
    }

    /// Stable text label, e.g. `rotation_15` or `contrast_3`.
    pub fn label(&self) -> String {
        match self {
            ShiftSpec::Rotation { angle } => format!("rotation_{angle}"),
            ShiftSpec::Corruption { kind, severity } => format!("{}_{severity}", kind.as_str()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SuiteKind {
    Rotation,
    Corruption,
}

impl SuiteKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SuiteKind::Rotation => "rotation",
            SuiteKind::Corruption => "corruption",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            SuiteKind::Rotation => "Rotations",
            SuiteKind::Corruption => "Corruptions",
        }
    }

    pub fn specs(self) -> Vec<ShiftSpec> {
        match self {
            SuiteKind::Rotation => ROTATION_ANGLES.iter().map(|&angle| ShiftSpec::Rotation { angle }).collect(),
            SuiteKind::Corruption => Corruption::ALL
                .iter()
                .flat_map(|&kind| (1..=5).map(move |severity| ShiftSpec::Corruption { kind, severity }))
                .collect(),
        }
    }
}

/// `(cos, sin)` with exact values on multiples of 90 degrees.
fn cos_sin(angle_deg: f64) -> (f64, f64) {
    let quarter = angle_deg / 90.0;
    if quarter == libm::round(quarter) {
        match (quarter as i64).rem_euclid(4) {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        let r = angle_deg.to_radians();
        (libm::cos(r), libm::sin(r))
    }
}

/// Counter-clockwise rotation (as displayed, y pointing down) about the image
/// centre with bilinear sampling. Samples falling outside the source are
/// replaced by the channel mean.
pub fn rotate(image: &RgbImage, angle_deg: f64) -> RgbImage {
    if angle_deg == 0.0 {
        return image.clone();
    }
    let (h, w) = (image.height(), image.width());
    let (cos, sin) = cos_sin(angle_deg);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = Vec::with_capacity(image.data().len());
    for c in 0..3 {
        let plane = image.channel(c);
        let mean = plane.iter().map(|&v| f64::from(v)).sum::<f64>() / plane.len() as f64;
        let px = |y: usize, x: usize| f64::from(plane[y * w + x]);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f64 - cx, y as f64 - cy);
                let sx = cx + u * cos - v * sin;
                let sy = cy + u * sin + v * cos;
                let value = if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f64 || sy > (h - 1) as f64 {
                    mean
                } else {
                    let (x0, y0) = (libm::floor(sx) as usize, libm::floor(sy) as usize);
                    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                    let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
                    let top = px(y0, x0) * (1.0 - fx) + px(y0, x1) * fx;
                    let bottom = px(y1, x0) * (1.0 - fx) + px(y1, x1) * fx;
                    top * (1.0 - fy) + bottom * fy
                };
                out.push(libm::round(value).clamp(0.0, 255.0) as u8);
            }
        }
    }
    RgbImage::new(h, w, out).expect("same dimensions")
}

/// Applies a corruption with the default severity table to `[0,1]` planar
/// values in place, without the final clamp.
pub fn corrupt_unclamped(
    planes: &mut [f64],
    height: usize,
    width: usize,
    kind: Corruption,
    severity: u8,
    seed: u64,
) -> Result<()> {
    corrupt_planes(planes, height, width, kind, kind.parameter(severity)?, seed)
}

/// Applies a corruption with an explicit parameter value.
pub fn corrupt_planes(
    planes: &mut [f64],
    height: usize,
    width: usize,
    kind: Corruption,
    param: f64,
    seed: u64,
) -> Result<()> {
    if planes.len() != 3 * height * width {
        return Err(Error::Validation(format!("{} plane values for a {height}x{width} image", planes.len())));
    }
    let mut rng = seeded(seed);
    let plane_len = height * width;
    match kind {
        Corruption::GaussianNoise => {
            for v in planes.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v += param * n;
            }
        }
        Corruption::ShotNoise => {
            for v in planes.iter_mut() {
                let rate = (*v * param).max(0.0);
                *v = if rate > 0.0 {
                    let d = Poisson::new(rate).map_err(|e| Error::Validation(format!("{e}")))?;
                    let k: f64 = d.sample(&mut rng);
                    k / param
                } else {
                    0.0
                };
            }
        }
        Corruption::ImpulseNoise => {
            for v in planes.iter_mut() {
                if rng.random::<f64>() < param {
                    *v = if rng.random::<bool>() { 1.0 } else { 0.0 };
                }
            }
        }
        Corruption::GaussianBlur => {
            for plane in planes.chunks_mut(plane_len) {
                gaussian_blur(plane, height, width, param);
            }
        }
        Corruption::Contrast => {
            for plane in planes.chunks_mut(plane_len) {
                let mean = plane.iter().sum::<f64>() / plane_len as f64;
                for v in plane.iter_mut() {
                    *v = mean + (*v - mean) * param;
                }
            }
        }
        Corruption::Brightness => {
            for v in planes.iter_mut() {
                *v += param;
            }
        }
        Corruption::Pixelate => {
            for plane in planes.chunks_mut(plane_len) {
                pixelate(plane, height, width, param);
            }
        }
    }
    Ok(())
}

pub fn corrupt(image: &RgbImage, kind: Corruption, severity: u8, seed: u64) -> Result<RgbImage> {
    corrupt_with(image, kind, kind.parameter(severity)?, seed)
}

pub fn corrupt_with(image: &RgbImage, kind: Corruption, param: f64, seed: u64) -> Result<RgbImage> {
    let mut planes = image.to_unit_planes();
    corrupt_planes(&mut planes, image.height(), image.width(), kind, param, seed)?;
    RgbImage::from_unit_planes(image.height(), image.width(), &planes)
}

fn gaussian_blur(plane: &mut [f64], h: usize, w: usize, sigma: f64) {
    let radius = libm::ceil(3.0 * sigma) as isize;
    let mut kernel: Vec<f64> =
        (-radius..=radius).map(|d| libm::exp(-((d * d) as f64) / (2.0 * sigma * sigma))).collect();
    let total: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= total;
    }
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * plane[y * w + crate::quality::mscn::reflect(x as isize + i as isize - radius, w)])
                .sum();
        }
    }
    for y in 0..h {
        for x in 0..w {
            plane[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * tmp[crate::quality::mscn::reflect(y as isize + i as isize - radius, h) * w + x])
                .sum();
        }
    }
}

/// Box-downsamples by `factor` then upsamples with nearest neighbour.
fn pixelate(plane: &mut [f64], h: usize, w: usize, factor: f64) {
    let nh = (libm::round(h as f64 / factor) as usize).clamp(1, h);
    let nw = (libm::round(w as f64 / factor) as usize).clamp(1, w);
    let mut small = vec![0.0; nh * nw];
    for sy in 0..nh {
        let (y0, y1) = (sy * h / nh, ((sy + 1) * h / nh).max(sy * h / nh + 1));
        for sx in 0..nw {
            let (x0, x1) = (sx * w / nw, ((sx + 1) * w / nw).max(sx * w / nw + 1));
            let mut s = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    s += plane[y * w + x];
                }
            }
            small[sy * nw + sx] = s / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    for y in 0..h {
        for x in 0..w {
            plane[y * w + x] = small[(y * nh / h) * nw + x * nw / w];
        }
    }
}

/// Applies one shift. Stochastic corruptions draw from `seed`.
pub fn apply_shift(image: &RgbImage, spec: &ShiftSpec, seed: u64) -> Result<RgbImage> {
    apply_shift_with(image, spec, seed, &SeverityTable::default())
}

pub fn apply_shift_with(image: &RgbImage, spec: &ShiftSpec, seed: u64, table: &SeverityTable) -> Result<RgbImage> {
    match *spec {
        ShiftSpec::Rotation { angle } => {
            if !(0.0..360.0).contains(&angle) {
                return Err(Error::Configuration(format!("rotation angle {angle} outside [0, 360)")));
            }
            Ok(rotate(image, angle))
        }
        ShiftSpec::Corruption { kind, severity } => corrupt_with(image, kind, table.parameter(kind, severity)?, seed),
    }
}

/// Per-image seed for a shift: depends on the suite seed, the spec's
/// position in its suite and the sample id.
pub fn shift_seed(seed: u64, spec_index: usize, sample_id: usize) -> u64 {
    derive_seed(seed, &[spec_index as u64, sample_id as u64])
}

/// Shifts every sample of `testset` under one spec; labels and ids carry
/// over unchanged.
pub fn shifted_set(
    testset: &[Sample],
    spec: &ShiftSpec,
    spec_index: usize,
    seed: u64,
    table: &SeverityTable,
) -> Result<Vec<Sample>> {
    spec.validate()?;
    testset
        .iter()
        .map(|s| {
            let stochastic = matches!(spec, ShiftSpec::Corruption { kind, .. } if kind.is_stochastic());
            let img_seed = if stochastic { shift_seed(seed, spec_index, s.id) } else { 0 };
            Ok(Sample { image: apply_shift_with(&s.image, spec, img_seed, table)?, quality_score: None, ..s.clone() })
        })
        .collect()
}

pub fn build_suite(testset: &[Sample], kind: SuiteKind, seed: u64) -> Result<Vec<(ShiftSpec, Vec<Sample>)>> {
    build_suite_with(testset, &kind.specs(), seed, &SeverityTable::default())
}

/// Shifted copies of `testset` for an explicit spec list.
pub fn build_suite_with(
    testset: &[Sample],
    specs: &[ShiftSpec],
    seed: u64,
    table: &SeverityTable,
) -> Result<Vec<(ShiftSpec, Vec<Sample>)>> {
    if testset.is_empty() {
        return Err(Error::Validation("empty test set".into()));
    }
    specs.iter().enumerate().map(|(i, spec)| Ok((*spec, shifted_set(testset, spec, i, seed, table)?))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(h: usize, w: usize, seed: u64) -> RgbImage {
        let mut rng = seeded(seed);
        RgbImage::new(h, w, (0..h * w * 3).map(|_| rng.random::<u8>()).collect()).unwrap()
    }

    #[test]
    fn identity_rotation() {
        let img = random_image(32, 32, 1);
        assert_eq!(rotate(&img, 0.0), img);
    }

    #[test]
    fn half_turn_twice_is_identity() {
        let img = random_image(32, 32, 2);
        assert_eq!(rotate(&rotate(&img, 180.0), 180.0), img);
        let odd = random_image(7, 9, 3);
        assert_eq!(rotate(&rotate(&odd, 180.0), 180.0), odd);
    }

    #[test]
    fn quarter_turn_is_index_permutation() {
        let img = random_image(16, 16, 4);
        let r = rotate(&img, 90.0);
        let n = 16;
        for c in 0..3 {
            for y in 0..n {
                for x in 0..n {
                    // counter-clockwise: output (y, x) reads source (x, n-1-y)
                    assert_eq!(r.get(c, y, x), img.get(c, x, n - 1 - y));
                }
            }
        }
    }

    #[test]
    fn rotation_fills_corners_with_mean() {
        let img = RgbImage::filled(16, 16, [200, 100, 0]);
        let r = rotate(&img, 45.0);
        assert_eq!(r, img);
    }

    #[test]
    fn brightness_on_flat_gray() {
        for s in 1..=5u8 {
            let mut planes = vec![0.5; 3 * 64];
            corrupt_unclamped(&mut planes, 8, 8, Corruption::Brightness, s, 0).unwrap();
            let offset = Corruption::Brightness.parameter(s).unwrap();
            assert!(planes.iter().all(|&v| (v - (0.5 + offset)).abs() < 1e-15));
        }
    }

    #[test]
    fn contrast_scales_deviation() {
        let img = random_image(16, 16, 5);
        let mut planes = img.to_unit_planes();
        let before = planes.clone();
        corrupt_unclamped(&mut planes, 16, 16, Corruption::Contrast, 5, 0).unwrap();
        let sd = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
        };
        for c in 0..3 {
            let r = c * 256..(c + 1) * 256;
            assert!((sd(&planes[r.clone()]) - 0.15 * sd(&before[r])).abs() < 1e-6);
        }
    }

    #[test]
    fn gaussian_noise_level() {
        let img = RgbImage::filled(32, 32, [128, 128, 128]);
        let out = corrupt(&img, Corruption::GaussianNoise, 3, 42).unwrap();
        let diffs: Vec<f64> =
            out.data().iter().zip(img.data()).map(|(&a, &b)| (f64::from(a) - f64::from(b)) / 255.0).collect();
        let m = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let sd = (diffs.iter().map(|d| (d - m).powi(2)).sum::<f64>() / diffs.len() as f64).sqrt();
        assert!((sd - 0.08).abs() < 0.05 * 0.08, "sd {sd}");
    }

    #[test]
    fn stochastic_corruptions_are_seeded() {
        let img = random_image(16, 16, 6);
        for kind in [Corruption::GaussianNoise, Corruption::ShotNoise, Corruption::ImpulseNoise] {
            assert_eq!(corrupt(&img, kind, 3, 1).unwrap(), corrupt(&img, kind, 3, 1).unwrap());
            assert_ne!(corrupt(&img, kind, 5, 1).unwrap(), corrupt(&img, kind, 5, 2).unwrap());
        }
    }

    #[test]
    fn unit_pixelate_is_identity() {
        let img = random_image(12, 12, 7);
        let mut planes = img.to_unit_planes();
        for p in planes.chunks_mut(144) {
            pixelate(p, 12, 12, 1.0);
        }
        assert_eq!(planes, img.to_unit_planes());
    }

    #[test]
    fn pixelate_makes_blocks() {
        let img = random_image(16, 16, 8);
        let out = corrupt(&img, Corruption::Pixelate, 5, 0).unwrap();
        for c in 0..3 {
            for by in 0..4 {
                for bx in 0..4 {
                    let v = out.get(c, by * 4, bx * 4);
                    for y in 0..4 {
                        for x in 0..4 {
                            assert_eq!(out.get(c, by * 4 + y, bx * 4 + x), v);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn blur_preserves_constant() {
        let img = RgbImage::filled(10, 10, [50, 60, 70]);
        assert_eq!(corrupt(&img, Corruption::GaussianBlur, 5, 0).unwrap(), img);
    }

    #[test]
    fn identity_parameters_leave_images_unchanged() {
        let img = random_image(12, 12, 9);
        for kind in Corruption::ALL {
            if let Some(p) = kind.identity_parameter() {
                assert_eq!(corrupt_with(&img, kind, p, 0).unwrap(), img, "{}", kind.as_str());
            }
        }
    }

    #[test]
    fn severity_overrides() {
        let t = SeverityTable::default().with_override(Corruption::Brightness, [0.0, 0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(t.parameter(Corruption::Brightness, 1).unwrap(), 0.0);
        assert_eq!(t.parameter(Corruption::Contrast, 5).unwrap(), 0.15);
        assert!(SeverityTable::default().with_override(Corruption::Pixelate, [0.5; 5]).is_err());
        assert!(t.parameter(Corruption::Contrast, 0).is_err());
    }

    #[test]
    fn unknown_corruption_and_severity() {
        assert!(matches!(Corruption::parse("fog"), Err(Error::Configuration(_))));
        assert!(Corruption::Contrast.parameter(0).is_err());
        assert!(Corruption::Contrast.parameter(6).is_err());
        assert!(ShiftSpec::Rotation { angle: 0.0 }.validate().is_err());
        assert!(ShiftSpec::Rotation { angle: 180.0 }.validate().is_ok());
    }

    #[test]
    fn suite_sizes_and_pairing() {
        let test: Vec<Sample> =
            (0..3).map(|i| Sample::new(i, random_image(16, 16, 10 + i as u64), Some(i as u8))).collect();
        let rot = build_suite(&test, SuiteKind::Rotation, 1).unwrap();
        let cor = build_suite(&test, SuiteKind::Corruption, 1).unwrap();
        assert_eq!(rot.len(), 12);
        assert_eq!(cor.len(), 35);
        for (spec, set) in rot.iter().chain(&cor) {
            assert_eq!(set.len(), test.len());
            for (a, b) in set.iter().zip(&test) {
                assert_eq!((a.id, a.clean_label), (b.id, b.clean_label));
                assert_eq!((a.image.height(), a.image.width()), (16, 16));
            }
            assert_ne!(set[0].image, test[0].image, "{}", spec.label());
        }
        assert!(build_suite(&[], SuiteKind::Rotation, 0).is_err());
    }
}
