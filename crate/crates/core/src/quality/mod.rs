//! Natural-scene-statistics quality features and the corpus-distance score
//! used to rank training samples by perceptual difficulty.
//!
//! Features follow the BRISQUE layout: at each of two dyadic scales a GGD
//! fit of the MSCN coefficients (shape, variance) followed by AGGD fits of
//! the four neighbour-product planes (shape, mean offset, left and right
//! variance). Instead of a trained quality regressor, the score is the
//! Mahalanobis distance of an image's features from the corpus feature
//! distribution, so larger means more atypical.

pub mod fit;
pub mod mscn;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::linalg::Cholesky;
use crate::{Error, GrayPlane, Result, RgbImage, Sample};

pub use fit::{fit_aggd, fit_ggd, AggdFit, GgdFit};
pub use mscn::{mscn, pairwise_products, PairwiseProducts};

pub const FEATURE_DIM: usize = 36;
pub const PER_SCALE: usize = 18;
pub const MIN_FEATURE_SIDE: usize = 16;
pub const DEFAULT_RIDGE: f64 = 1e-6;

const ORIENTATIONS: [&str; 4] = ["horizontal", "vertical", "diagonal", "anti-diagonal"];

/// Luminance `(0.299 R + 0.587 G + 0.114 B) / 255`, clamped to `[0,1]`.
pub fn to_luminance(image: &RgbImage) -> GrayPlane {
    let (r, g, b) = (image.channel(0), image.channel(1), image.channel(2));
    let values = r
        .iter()
        .zip(g)
        .zip(b)
        .map(|((&r, &g), &b)| {
            let y = (0.299 * f64::from(r) + 0.587 * f64::from(g) + 0.114 * f64::from(b)) / 255.0;
            y.clamp(0.0, 1.0)
        })
        .collect();
    GrayPlane { height: image.height(), width: image.width(), values }
}

/// 36-dimensional feature vector. Per scale: `[ggd_alpha, ggd_sigma2]` then
/// `(nu, eta, sigma_l2, sigma_r2)` for H, V, D1, D2.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityFeatures(pub [f64; FEATURE_DIM]);

impl QualityFeatures {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn ggd_alpha(&self, scale: usize) -> f64 {
        self.0[scale * PER_SCALE]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        let arr: [f64; FEATURE_DIM] = v.try_into().map_err(|_| {
            Error::Validation(format!("feature vector has {} values, expected {FEATURE_DIM}", v.len()))
        })?;
        Ok(Self(arr))
    }
}

/// Extracts the 36 features from a luminance plane of at least 16x16.
pub fn brisque_features(plane: &GrayPlane) -> Result<QualityFeatures> {
    if plane.height < MIN_FEATURE_SIDE || plane.width < MIN_FEATURE_SIDE {
        return Err(Error::Validation(format!(
            "feature extraction needs at least {MIN_FEATURE_SIDE}x{MIN_FEATURE_SIDE}, got {}x{}",
            plane.height, plane.width
        )));
    }
    let mut out = [0.0; FEATURE_DIM];
    let half = plane.downsample2();
    for (scale, p) in [plane, &half].into_iter().enumerate() {
        let ctx = |what: &str| format!("scale {}, {what}", scale + 1);
        let m = mscn(p)?;
        let ggd = fit_ggd(&m.values).map_err(|e| e.context(&ctx("mscn")))?;
        let base = scale * PER_SCALE;
        out[base] = ggd.alpha;
        out[base + 1] = ggd.sigma2;
        let products = pairwise_products(&m)?;
        for (o, plane) in products.planes().into_iter().enumerate() {
            let a = fit_aggd(&plane.values).map_err(|e| e.context(&ctx(ORIENTATIONS[o])))?;
            let at = base + 2 + 4 * o;
            out[at..at + 4].copy_from_slice(&[a.nu, a.eta, a.sigma_l2, a.sigma_r2]);
        }
    }
    Ok(QualityFeatures(out))
}

pub fn image_features(image: &RgbImage) -> Result<QualityFeatures> {
    brisque_features(&to_luminance(image))
}

/// Corpus feature mean and covariance; the regularized covariance is
/// factored once at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceModel {
    mean: Vec<f64>,
    covariance: Vec<f64>,
    ridge: f64,
    factor: Cholesky,
}

impl ReferenceModel {
    /// Builds a model from explicit parts. `covariance` is row-major `d x d`.
    pub fn from_parts(mean: Vec<f64>, covariance: Vec<f64>, ridge: f64) -> Result<Self> {
        let d = mean.len();
        if covariance.len() != d * d {
            return Err(Error::Validation(format!(
                "covariance has {} entries, expected {}",
                covariance.len(),
                d * d
            )));
        }
        if !(ridge >= 0.0) {
            return Err(Error::Validation(format!("ridge must be nonnegative, got {ridge}")));
        }
        for i in 0..d {
            for j in 0..i {
                let (a, b) = (covariance[i * d + j], covariance[j * d + i]);
                if (a - b).abs() > 1e-9 * (1.0 + a.abs().max(b.abs())) {
                    return Err(Error::Validation(format!("covariance not symmetric at ({i},{j})")));
                }
            }
        }
        let mut reg = covariance.clone();
        for i in 0..d {
            reg[i * d + i] += ridge;
        }
        let factor = Cholesky::factor(&reg, d)?;
        Ok(Self { mean, covariance, ridge, factor })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &[f64] {
        &self.covariance
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Mean and unbiased sample covariance of `corpus`, symmetrized.
pub fn fit_reference_model(corpus: &[QualityFeatures], ridge: f64) -> Result<ReferenceModel> {
    let rows: Vec<&[f64]> = corpus.iter().map(|f| f.as_slice()).collect();
    fit_reference_rows(&rows, ridge)
}

pub(crate) fn fit_reference_rows(rows: &[&[f64]], ridge: f64) -> Result<ReferenceModel> {
    if rows.len() < 2 {
        return Err(Error::InsufficientData { needed: 2, got: rows.len() });
    }
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut cov = vec![0.0; d * d];
    let mut centred = vec![0.0; d];
    for r in rows {
        for ((c, v), m) in centred.iter_mut().zip(r.iter()).zip(&mean) {
            *c = v - m;
        }
        for i in 0..d {
            let ci = centred[i];
            for j in 0..=i {
                cov[i * d + j] += ci * centred[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..=i {
            let v = cov[i * d + j] / (n - 1.0);
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    ReferenceModel::from_parts(mean, cov, ridge)
}

/// Mahalanobis distance `sqrt((f-μ)ᵀ (Σ + ridge I)⁻¹ (f-μ))`.
pub fn quality_score(features: &QualityFeatures, reference: &ReferenceModel) -> Result<f64> {
    score_vector(features.as_slice(), reference)
}

pub(crate) fn score_vector(f: &[f64], reference: &ReferenceModel) -> Result<f64> {
    if f.len() != reference.dim() {
        return Err(Error::Validation(format!(
            "feature vector has {} values, reference has {}",
            f.len(),
            reference.dim()
        )));
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite feature value".into()));
    }
    let diff: Vec<f64> = f.iter().zip(reference.mean()).map(|(a, b)| a - b).collect();
    let y = reference.factor.forward_substitute(&diff);
    Ok(libm::sqrt(crate::linalg::dot(&y, &y)))
}

/// Per-sample scoring outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample {
    pub id: usize,
    pub score: f64,
    /// `None` when extraction failed on a degenerate image; such samples are
    /// scored as the corpus maximum plus one.
    pub features: Option<QualityFeatures>,
}

/// Extracts features for every sample, fits the reference model on the
/// non-degenerate ones and scores the whole set.
pub fn score_dataset(samples: &[Sample], ridge: f64) -> Result<(ReferenceModel, Vec<ScoredSample>)> {
    let mut features = Vec::with_capacity(samples.len());
    for s in samples {
        match image_features(&s.image) {
            Ok(f) => features.push(Some(f)),
            Err(Error::Degenerate(_)) => features.push(None),
            Err(e) => return Err(e.context(&format!("sample {}", s.id))),
        }
    }
    let corpus: Vec<QualityFeatures> = features.iter().flatten().cloned().collect();
    let reference = fit_reference_model(&corpus, ridge)?;
    let scored = score_with_reference(samples, features, &reference)?;
    Ok((reference, scored))
}

/// Scores precomputed features against `reference`; `None` entries get the
/// maximum finite score plus one.
pub fn score_with_reference(
    samples: &[Sample],
    features: Vec<Option<QualityFeatures>>,
    reference: &ReferenceModel,
) -> Result<Vec<ScoredSample>> {
    if samples.len() != features.len() {
        return Err(Error::Validation(format!("{} samples but {} feature rows", samples.len(), features.len())));
    }
    let scores =
        features.iter().map(|f| f.as_ref().map(|f| quality_score(f, reference)).transpose()).collect::<Result<Vec<_>>>()?;
    let max = scores.iter().flatten().copied().fold(0.0, f64::max);
    Ok(samples
        .iter()
        .zip(features)
        .zip(scores)
        .map(|((s, f), score)| ScoredSample { id: s.id, score: score.unwrap_or(max + 1.0), features: f })
        .collect())
}

/// Ids by descending score, ties by ascending id.
pub fn rank_by_scores(scores: &[(usize, f64)]) -> Vec<usize> {
    let mut order: Vec<(usize, f64)> = scores.to_vec();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    order.into_iter().map(|(id, _)| id).collect()
}

pub fn rank_by_quality(scored: &[ScoredSample]) -> Vec<usize> {
    let pairs: Vec<(usize, f64)> = scored.iter().map(|s| (s.id, s.score)).collect();
    rank_by_scores(&pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    #[test]
    fn luminance_definition() {
        assert!(to_luminance(&RgbImage::filled(2, 2, [0, 0, 0])).values.iter().all(|&v| v == 0.0));
        assert!(to_luminance(&RgbImage::filled(2, 2, [255, 255, 255]))
            .values
            .iter()
            .all(|&v| (v - 1.0).abs() < 1e-15 && v <= 1.0));
        let red = to_luminance(&RgbImage::filled(1, 1, [255, 0, 0]));
        assert!((red.values[0] - 0.299).abs() < 1e-15);
    }

    #[test]
    fn constant_image_is_degenerate() {
        let err = image_features(&RgbImage::filled(32, 32, [90, 90, 90])).unwrap_err();
        assert!(matches!(err, Error::Degenerate(ref m) if m.contains("scale 1")));
    }

    #[test]
    fn small_plane_is_rejected() {
        assert!(matches!(
            brisque_features(&GrayPlane::constant(15, 32, 0.5)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn noise_image_gives_valid_layout() {
        let mut rng = seeded(3);
        let data = (0..32 * 32 * 3).map(|_| rng.random::<u8>()).collect();
        let f = image_features(&RgbImage::new(32, 32, data).unwrap()).unwrap();
        assert_eq!(f.0.len(), FEATURE_DIM);
        for scale in 0..2 {
            let b = scale * PER_SCALE;
            assert!((0.2..=10.0).contains(&f.0[b]));
            assert!(f.0[b + 1] >= 0.0);
            for o in 0..4 {
                let a = b + 2 + 4 * o;
                assert!((0.2..=10.0).contains(&f.0[a]));
                assert!(f.0[a + 2] >= 0.0 && f.0[a + 3] >= 0.0);
            }
        }
        assert!(f.0.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn identical_corpus_scores_zero() {
        let f = QualityFeatures([0.5; FEATURE_DIM]);
        let reference = fit_reference_model(&vec![f.clone(); 40], DEFAULT_RIDGE).unwrap();
        assert!(reference.covariance().iter().all(|&v| v == 0.0));
        assert_eq!(quality_score(&f, &reference).unwrap(), 0.0);
    }

    #[test]
    fn rank_deficient_without_ridge_errors() {
        let f = QualityFeatures([0.5; FEATURE_DIM]);
        let err = fit_reference_model(&vec![f; 40], 0.0).unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite { .. }));
    }

    #[test]
    fn tiny_corpus_is_insufficient() {
        let f = QualityFeatures([0.5; FEATURE_DIM]);
        assert!(matches!(
            fit_reference_model(&[f], DEFAULT_RIDGE),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn unit_step_under_identity_covariance() {
        let d = FEATURE_DIM;
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            cov[i * d + i] = 1.0;
        }
        let reference = ReferenceModel::from_parts(vec![0.0; d], cov, 0.0).unwrap();
        let mut f = [0.0; FEATURE_DIM];
        f[0] = 1.0;
        assert!((quality_score(&QualityFeatures(f), &reference).unwrap() - 1.0).abs() < 1e-15);
        let at_mean = QualityFeatures([0.0; FEATURE_DIM]);
        assert_eq!(quality_score(&at_mean, &reference).unwrap(), 0.0);
    }

    #[test]
    fn non_finite_features_are_rejected() {
        let f = QualityFeatures([0.5; FEATURE_DIM]);
        let reference = fit_reference_model(&vec![f; 3], DEFAULT_RIDGE).unwrap();
        let mut bad = [0.5; FEATURE_DIM];
        bad[7] = f64::NAN;
        assert!(quality_score(&QualityFeatures(bad), &reference).is_err());
    }

    #[test]
    fn ranking_rules() {
        assert_eq!(rank_by_scores(&[(0, 1.0), (1, 3.0), (2, 2.0)]), vec![1, 2, 0]);
        assert_eq!(rank_by_scores(&[(2, 1.0), (0, 1.0), (1, 1.0)]), vec![0, 1, 2]);
    }
}
