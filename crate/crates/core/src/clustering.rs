//! K-means (k-means++ seeding, Lloyd iterations) and nearest-centroid label
//! generation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::linalg::squared_distance;
use crate::quality::{image_features, to_luminance, QualityFeatures};
use crate::rng::seeded;
use crate::{Error, Result, Sample};

/// Feature space used for clustering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum FeatureMode {
    /// Flattened luminance plane.
    #[default]
    Pixel,
    /// Quality features standardized by corpus mean and deviation.
    Quality,
}

/// Clustering features for a whole dataset. Quality mode needs corpus
/// statistics, so extraction works on the full set.
pub fn extract_features(samples: &[Sample], mode: FeatureMode) -> Result<Vec<Vec<f64>>> {
    match mode {
        FeatureMode::Pixel => Ok(samples.iter().map(|s| to_luminance(&s.image).values).collect()),
        FeatureMode::Quality => {
            let feats = samples
                .iter()
                .map(|s| image_features(&s.image).map_err(|e| e.context(&format!("sample {}", s.id))))
                .collect::<Result<Vec<QualityFeatures>>>()?;
            Ok(standardize(feats.iter().map(|f| f.0.to_vec()).collect()))
        }
    }
}

/// Per-dimension z-scores with the population deviation; constant
/// dimensions map to zero.
pub fn standardize(mut rows: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    if rows.is_empty() {
        return rows;
    }
    let d = rows[0].len();
    let n = rows.len() as f64;
    for j in 0..d {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[j] - mean) * (r[j] - mean)).sum::<f64>() / n;
        let sd = libm::sqrt(var);
        for r in &mut rows {
            r[j] = if sd > 0.0 { (r[j] - mean) / sd } else { 0.0 };
        }
    }
    rows
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        Self { k, seed, max_iter: 300, tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansModel {
    pub centroids: Vec<Vec<f64>>,
    /// Class assigned to each centroid by [`label_centroids`].
    pub centroid_class: Option<Vec<u8>>,
    pub inertia: f64,
}

impl KMeansModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }

    /// Index of the nearest centroid, ties to the lower index.
    pub fn nearest(&self, x: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (j, c) in self.centroids.iter().enumerate() {
            let d = squared_distance(x, c);
            if d < best.1 {
                best = (j, d);
            }
        }
        best.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub model: KMeansModel,
    pub assignments: Vec<usize>,
    pub iterations: usize,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
}

pub fn kmeans_fit(points: &[Vec<f64>], params: &KMeansParams) -> Result<KMeansFit> {
    let k = params.k;
    let n = points.len();
    if k < 2 {
        return Err(Error::Validation(format!("k must be at least 2, got {k}")));
    }
    if n < k {
        return Err(Error::Validation(format!("need at least k={k} points, got {n}")));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d || p.iter().any(|v| !v.is_finite())) {
        return Err(Error::Validation("points must be finite with a common dimension".into()));
    }

    let mut rng = seeded(params.seed);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut assignments = vec![0usize; n];
    let mut history = Vec::new();
    let mut iterations = 0;

    loop {
        let inertia = assign(points, &centroids, &mut assignments);
        if let Some(&prev) = history.last() {
            debug_assert!(
                inertia <= prev * (1.0 + 1e-12) + 1e-12,
                "Lloyd inertia increased: {prev} -> {inertia}"
            );
        }
        history.push(inertia);
        if iterations >= params.max_iter {
            break;
        }
        iterations += 1;

        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut next: Vec<Vec<f64>> = sums
            .into_iter()
            .zip(&counts)
            .zip(&centroids)
            .map(|((s, &c), old)| {
                if c == 0 {
                    old.clone()
                } else {
                    s.into_iter().map(|v| v / c as f64).collect()
                }
            })
            .collect();
        reseed_empty(points, &assignments, &counts, &mut next);

        let shift = centroids
            .iter()
            .zip(&next)
            .map(|(a, b)| squared_distance(a, b))
            .fold(0.0, f64::max);
        centroids = next;
        if libm::sqrt(shift) < params.tol {
            let inertia = assign(points, &centroids, &mut assignments);
            history.push(inertia);
            break;
        }
    }
    let inertia = *history.last().expect("at least one assignment");
    Ok(KMeansFit {
        model: KMeansModel { centroids, centroid_class: None, inertia },
        assignments,
        iterations,
        inertia_history: history,
    })
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut crate::rng::Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..n)].clone());
    let mut dist: Vec<f64> = points.iter().map(|p| squared_distance(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points[pick].clone();
        for (dv, p) in dist.iter_mut().zip(points) {
            *dv = dv.min(squared_distance(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>], out: &mut [usize]) -> f64 {
    let mut inertia = 0.0;
    for (p, a) in points.iter().zip(out.iter_mut()) {
        let mut best = (0, f64::INFINITY);
        for (j, c) in centroids.iter().enumerate() {
            let d = squared_distance(p, c);
            if d < best.1 {
                best = (j, d);
            }
        }
        *a = best.0;
        inertia += best.1;
    }
    inertia
}

/// Moves each empty centroid onto the point farthest from its current
/// centroid. Points already used for reseeding are skipped.
fn reseed_empty(points: &[Vec<f64>], assignments: &[usize], counts: &[usize], centroids: &mut [Vec<f64>]) {
    let mut used: Vec<usize> = Vec::new();
    for j in 0..centroids.len() {
        if counts[j] != 0 {
            continue;
        }
        let mut far = (None, -1.0);
        for (i, (p, &a)) in points.iter().zip(assignments).enumerate() {
            if used.contains(&i) {
                continue;
            }
            let d = squared_distance(p, &centroids[a]);
            if d > far.1 {
                far = (Some(i), d);
            }
        }
        if let Some(i) = far.0 {
            centroids[j] = points[i].clone();
            used.push(i);
        }
    }
}

/// `k x C` counts of clean labels per cluster.
pub fn vote_matrix(assignments: &[usize], labels: &[u8], k: usize, classes: usize) -> Vec<Vec<usize>> {
    let mut votes = vec![vec![0usize; classes]; k];
    for (&a, &l) in assignments.iter().zip(labels) {
        votes[a][usize::from(l)] += 1;
    }
    votes
}

/// Distinct greedy assignment: repeatedly take the largest cell among
/// unassigned rows and columns; ties go to the lower row, then lower column.
pub fn greedy_assignment(votes: &[Vec<usize>]) -> Vec<u8> {
    let k = votes.len();
    let c = votes.first().map_or(0, Vec::len);
    let mut row_done = vec![false; k];
    let mut col_done = vec![false; c];
    let mut out = vec![0u8; k];
    for _ in 0..k.min(c) {
        let mut best: Option<(usize, usize, usize)> = None;
        for (i, row) in votes.iter().enumerate() {
            if row_done[i] {
                continue;
            }
            for (j, &v) in row.iter().enumerate() {
                if col_done[j] {
                    continue;
                }
                if best.is_none_or(|(_, _, b)| v > b) {
                    best = Some((i, j, v));
                }
            }
        }
        let (i, j, _) = best.expect("an unassigned cell remains");
        row_done[i] = true;
        col_done[j] = true;
        out[i] = j as u8;
    }
    out
}

/// Assigns a distinct class to every centroid from the clean-label vote
/// matrix of the fitted partition.
pub fn label_centroids(
    model: &mut KMeansModel,
    assignments: &[usize],
    clean_labels: &[u8],
    classes: usize,
) -> Result<()> {
    if model.k() != classes {
        return Err(Error::Configuration(format!(
            "label generation requires k = C, got k={} and C={classes}",
            model.k()
        )));
    }
    if assignments.len() != clean_labels.len() {
        return Err(Error::Validation("assignments and labels differ in length".into()));
    }
    if let Some(&bad) = clean_labels.iter().find(|&&l| usize::from(l) >= classes) {
        return Err(Error::Validation(format!("label {bad} outside [0, {classes})")));
    }
    let votes = vote_matrix(assignments, clean_labels, model.k(), classes);
    model.centroid_class = Some(greedy_assignment(&votes));
    Ok(())
}

/// Classes of the `m` nearest centroids, nearest first, distance ties by
/// lower centroid index.
pub fn generate_labels(x: &[f64], model: &KMeansModel, m: usize) -> Result<Vec<u8>> {
    let classes = model
        .centroid_class
        .as_ref()
        .ok_or_else(|| Error::Configuration("centroids have no class assignment".into()))?;
    if m == 0 || m > model.k() {
        return Err(Error::Validation(format!("label count {m} outside 1..={}", model.k())));
    }
    let mut order: Vec<(f64, usize)> =
        model.centroids.iter().enumerate().map(|(j, c)| (squared_distance(x, c), j)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(order.into_iter().take(m).map(|(_, j)| classes[j]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn line_points(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    fn inertia_of(points: &[Vec<f64>], assignment: &[usize], k: usize) -> f64 {
        let d = points[0].len();
        let mut total = 0.0;
        for c in 0..k {
            let members: Vec<&Vec<f64>> =
                points.iter().zip(assignment).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            let mean: Vec<f64> =
                (0..d).map(|j| members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64).collect();
            total += members.iter().map(|p| squared_distance(p, &mean)).sum::<f64>();
        }
        total
    }

    #[test]
    fn two_points_two_clusters() {
        let fit = kmeans_fit(&line_points(&[0.0, 10.0]), &KMeansParams::new(2, 1)).unwrap();
        let mut c: Vec<f64> = fit.model.centroids.iter().map(|c| c[0]).collect();
        c.sort_by(f64::total_cmp);
        assert_eq!(c, vec![0.0, 10.0]);
        assert_eq!(fit.model.inertia, 0.0);
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(
            kmeans_fit(&line_points(&[1.0, 2.0]), &KMeansParams::new(3, 0)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn recovers_three_blobs() {
        let mut rng = seeded(4);
        let centres = [(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)];
        let mut pts = vec![];
        let mut truth = vec![];
        for (b, &(cx, cy)) in centres.iter().enumerate() {
            for _ in 0..4 {
                let nx: f64 = StandardNormal.sample(&mut rng);
                let ny: f64 = StandardNormal.sample(&mut rng);
                pts.push(vec![cx + 0.1 * nx, cy + 0.1 * ny]);
                truth.push(b);
            }
        }
        let fit = kmeans_fit(&pts, &KMeansParams::new(3, 2)).unwrap();
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                assert_eq!(truth[i] == truth[j], fit.assignments[i] == fit.assignments[j]);
            }
        }
        assert!((fit.model.inertia - inertia_of(&pts, &fit.assignments, 3)).abs() < 1e-9);
    }

    #[test]
    fn six_points_reach_global_optimum() {
        let pts = vec![
            vec![0.0, 0.0],
            vec![0.4, 0.1],
            vec![0.2, 0.5],
            vec![3.0, 3.1],
            vec![3.6, 2.8],
            vec![2.9, 3.7],
        ];
        let mut best = f64::INFINITY;
        for mask in 1u32..(1 << 6) - 1 {
            let assignment: Vec<usize> = (0..6).map(|i| ((mask >> i) & 1) as usize).collect();
            best = best.min(inertia_of(&pts, &assignment, 2));
        }
        for seed in 0..5 {
            let fit = kmeans_fit(&pts, &KMeansParams::new(2, seed)).unwrap();
            assert!((fit.model.inertia - best).abs() < 1e-9);
        }
    }

    #[test]
    fn inertia_history_is_non_increasing() {
        let mut rng = seeded(8);
        let pts: Vec<Vec<f64>> = (0..300)
            .map(|_| (0..5).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let fit = kmeans_fit(&pts, &KMeansParams::new(6, 3)).unwrap();
        assert!(fit.inertia_history.len() >= 2);
        for w in fit.inertia_history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let mut rng = seeded(8);
        let pts: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..3).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let p = KMeansParams::new(4, 17);
        assert_eq!(kmeans_fit(&pts, &p).unwrap(), kmeans_fit(&pts, &p).unwrap());
    }

    #[test]
    fn greedy_vote_example() {
        assert_eq!(greedy_assignment(&[vec![5, 5], vec![0, 10]]), vec![0, 1]);
        // ties: lower centroid, then lower class
        assert_eq!(greedy_assignment(&[vec![3, 3], vec![3, 3]]), vec![0, 1]);
    }

    /// Straightforward re-implementation: collect all cells, sort by
    /// (votes desc, row asc, col asc), accept cells whose row and column are
    /// both free.
    fn greedy_oracle(votes: &[Vec<usize>]) -> Vec<u8> {
        let mut cells = vec![];
        for (i, r) in votes.iter().enumerate() {
            for (j, &v) in r.iter().enumerate() {
                cells.push((v, i, j));
            }
        }
        cells.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut out = vec![u8::MAX; votes.len()];
        let mut cols = vec![false; votes[0].len()];
        for (_, i, j) in cells {
            if out[i] == u8::MAX && !cols[j] {
                out[i] = j as u8;
                cols[j] = true;
            }
        }
        out
    }

    #[test]
    fn greedy_matches_oracle_on_random_matrices() {
        let mut rng = seeded(12);
        for _ in 0..500 {
            let k = rng.random_range(1..=4);
            let votes: Vec<Vec<usize>> =
                (0..k).map(|_| (0..k).map(|_| rng.random_range(0..6)).collect()).collect();
            assert_eq!(greedy_assignment(&votes), greedy_oracle(&votes));
        }
    }

    #[test]
    fn aligned_clusters_take_majority_label() {
        let mut model = KMeansModel { centroids: vec![vec![0.0]; 3], centroid_class: None, inertia: 0.0 };
        let assignments = [0, 0, 0, 1, 1, 2, 2, 2];
        let labels = [2, 2, 1, 0, 0, 1, 1, 2];
        label_centroids(&mut model, &assignments, &labels, 3).unwrap();
        assert_eq!(model.centroid_class, Some(vec![2, 0, 1]));
    }

    #[test]
    fn k_must_equal_classes() {
        let mut model = KMeansModel { centroids: vec![vec![0.0]; 3], centroid_class: None, inertia: 0.0 };
        assert!(matches!(
            label_centroids(&mut model, &[0, 1, 2], &[0, 1, 2], 4),
            Err(Error::Configuration(_))
        ));
    }

    fn toy_model() -> KMeansModel {
        KMeansModel {
            centroids: vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
            centroid_class: Some(vec![0, 1, 2]),
            inertia: 0.0,
        }
    }

    #[test]
    fn nearest_centroid_labels() {
        let m = toy_model();
        assert_eq!(generate_labels(&[0.9, 0.1], &m, 1).unwrap(), vec![1]);
        assert_eq!(generate_labels(&[0.0, 1.0], &m, 1).unwrap(), vec![2]);
        // distances²: 0.61, 0.41, 0.61 -> centroid 1, then the 0/2 tie to index 0
        let x = [0.6, 0.5];
        let d: Vec<f64> = m.centroids.iter().map(|c| squared_distance(&x, c)).collect();
        assert_eq!(d[0], d[2]);
        assert!(d[1] < d[0]);
        assert_eq!(generate_labels(&x, &m, 2).unwrap(), vec![1, 0]);
        assert_eq!(generate_labels(&x, &m, 3).unwrap(), vec![1, 0, 2]);
    }

    #[test]
    fn label_count_bounds() {
        let m = toy_model();
        assert!(generate_labels(&[0.0, 0.0], &m, 0).is_err());
        assert!(generate_labels(&[0.0, 0.0], &m, 4).is_err());
    }

    #[test]
    fn standardized_columns() {
        let rows = vec![vec![1.0, 5.0], vec![2.0, 5.0], vec![6.0, 5.0]];
        let z = standardize(rows);
        let mean: f64 = z.iter().map(|r| r[0]).sum::<f64>() / 3.0;
        let var: f64 = z.iter().map(|r| (r[0] - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        assert!(z.iter().all(|r| r[1] == 0.0));
    }
}
