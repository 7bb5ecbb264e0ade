//! Mean-subtracted contrast-normalized (MSCN) coefficients and their
//! neighbour products.

use alloc::format;
use alloc::vec::Vec;

use crate::{Error, GrayPlane, Result};

pub const WINDOW: usize = 7;
pub const WINDOW_SIGMA: f64 = 7.0 / 6.0;
/// Stabilizer added to the local deviation, for intensities in `[0,1]`.
pub const STABILIZER: f64 = 1.0 / 255.0;

const RADIUS: isize = (WINDOW / 2) as isize;

/// Normalized 7x7 Gaussian weights, row-major.
pub fn gaussian_window() -> [f64; WINDOW * WINDOW] {
    let mut w = [0.0; WINDOW * WINDOW];
    let mut total = 0.0;
    for dy in -RADIUS..=RADIUS {
        for dx in -RADIUS..=RADIUS {
            let r2 = (dy * dy + dx * dx) as f64;
            let v = libm::exp(-r2 / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA));
            w[((dy + RADIUS) as usize) * WINDOW + (dx + RADIUS) as usize] = v;
            total += v;
        }
    }
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Half-sample symmetric reflection: `-1 -> 0`, `n -> n-1`.
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// MSCN transform of `plane`.
///
/// The local mean is accumulated as `I + sum w (I_n - I)` and the local
/// variance as `sum w (I_n - mu)^2`, so a constant neighbourhood produces an
/// exactly zero coefficient.
pub fn mscn(plane: &GrayPlane) -> Result<GrayPlane> {
    let (h, w) = (plane.height, plane.width);
    if h < WINDOW || w < WINDOW {
        return Err(Error::Validation(format!(
            "mscn needs at least {WINDOW}x{WINDOW}, got {h}x{w}"
        )));
    }
    let weights = gaussian_window();
    let mut out = Vec::with_capacity(h * w);
    let mut neighbourhood = [0.0; WINDOW * WINDOW];
    for y in 0..h {
        for x in 0..w {
            let centre = plane.at(y, x);
            for dy in -RADIUS..=RADIUS {
                let yy = reflect(y as isize + dy, h);
                for dx in -RADIUS..=RADIUS {
                    let xx = reflect(x as isize + dx, w);
                    neighbourhood[((dy + RADIUS) as usize) * WINDOW + (dx + RADIUS) as usize] =
                        plane.at(yy, xx);
                }
            }
            let mut shift = 0.0;
            for (wk, v) in weights.iter().zip(&neighbourhood) {
                shift += wk * (v - centre);
            }
            let mu = centre + shift;
            let mut var = 0.0;
            for (wk, v) in weights.iter().zip(&neighbourhood) {
                let d = v - mu;
                var += wk * d * d;
            }
            out.push(-shift / (libm::sqrt(var) + STABILIZER));
        }
    }
    Ok(GrayPlane { height: h, width: w, values: out })
}

/// Neighbour products of an MSCN plane, in the order horizontal, vertical,
/// main diagonal, anti-diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseProducts {
    pub horizontal: GrayPlane,
    pub vertical: GrayPlane,
    pub diagonal: GrayPlane,
    pub anti_diagonal: GrayPlane,
}

impl PairwiseProducts {
    pub fn planes(&self) -> [&GrayPlane; 4] {
        [&self.horizontal, &self.vertical, &self.diagonal, &self.anti_diagonal]
    }
}

pub fn pairwise_products(m: &GrayPlane) -> Result<PairwiseProducts> {
    let (h, w) = (m.height, m.width);
    if h < 2 || w < 2 {
        return Err(Error::Validation(format!("pairwise products need 2x2, got {h}x{w}")));
    }
    let build = |ph: usize, pw: usize, f: &dyn Fn(usize, usize) -> f64| {
        let mut v = Vec::with_capacity(ph * pw);
        for y in 0..ph {
            for x in 0..pw {
                v.push(f(y, x));
            }
        }
        GrayPlane { height: ph, width: pw, values: v }
    };
    Ok(PairwiseProducts {
        horizontal: build(h, w - 1, &|y, x| m.at(y, x) * m.at(y, x + 1)),
        vertical: build(h - 1, w, &|y, x| m.at(y, x) * m.at(y + 1, x)),
        diagonal: build(h - 1, w - 1, &|y, x| m.at(y, x) * m.at(y + 1, x + 1)),
        // output column x corresponds to source column x + 1
        anti_diagonal: build(h - 1, w - 1, &|y, x| m.at(y, x + 1) * m.at(y + 1, x)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use alloc::vec;
    use rand::Rng;

    fn noise_plane(h: usize, w: usize, seed: u64) -> GrayPlane {
        let mut rng = seeded(seed);
        GrayPlane::new(h, w, (0..h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    /// Textbook MSCN: explicit window sum with mirrored indices.
    fn naive_mscn(p: &GrayPlane) -> Vec<f64> {
        let mut kernel = [[0.0f64; 7]; 7];
        let mut total = 0.0;
        for (i, row) in kernel.iter_mut().enumerate() {
            for (j, k) in row.iter_mut().enumerate() {
                let (dy, dx) = (i as f64 - 3.0, j as f64 - 3.0);
                *k = (-(dy * dy + dx * dx) / (2.0 * (7.0f64 / 6.0).powi(2))).exp();
                total += *k;
            }
        }
        let mirror = |i: i64, n: i64| -> usize {
            if i < 0 {
                (-i - 1) as usize
            } else if i >= n {
                (2 * n - i - 1) as usize
            } else {
                i as usize
            }
        };
        let mut out = vec![];
        for y in 0..p.height as i64 {
            for x in 0..p.width as i64 {
                let mut mu = 0.0;
                let mut m2 = 0.0;
                for i in 0..7i64 {
                    for j in 0..7i64 {
                        let v = p.at(mirror(y + i - 3, p.height as i64), mirror(x + j - 3, p.width as i64));
                        let k = kernel[i as usize][j as usize] / total;
                        mu += k * v;
                        m2 += k * v * v;
                    }
                }
                let sigma = (m2 - mu * mu).max(0.0).sqrt();
                out.push((p.at(y as usize, x as usize) - mu) / (sigma + 1.0 / 255.0));
            }
        }
        out
    }

    #[test]
    fn window_is_normalized_and_symmetric() {
        let w = gaussian_window();
        let s: f64 = w.iter().sum();
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(w[0], w[48]);
        assert_eq!(w[3], w[21]);
    }

    #[test]
    fn constant_plane_gives_exact_zeros() {
        for &c in &[0.0, 0.1, 0.5, 0.7384, 1.0] {
            let m = mscn(&GrayPlane::constant(9, 12, c)).unwrap();
            assert!(m.values.iter().all(|&v| v == 0.0), "value {c}");
        }
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let p = noise_plane(9, 9, 5);
        let fast = mscn(&p).unwrap();
        for (a, b) in fast.values.iter().zip(naive_mscn(&p)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn renormalizing_noise_is_near_unit_scale() {
        let p = noise_plane(64, 64, 11);
        let once = mscn(&p).unwrap();
        let twice = mscn(&once).unwrap();
        let n = twice.values.len() as f64;
        let mean = twice.values.iter().sum::<f64>() / n;
        let sd = (twice.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((sd - 1.0).abs() < 0.5, "stdev {sd}");
    }

    #[test]
    fn too_small_plane_is_rejected() {
        assert!(mscn(&GrayPlane::constant(6, 9, 0.5)).is_err());
    }

    #[test]
    fn products_of_ones_are_ones() {
        let p = pairwise_products(&GrayPlane::constant(4, 5, 1.0)).unwrap();
        for plane in p.planes() {
            assert!(plane.values.iter().all(|&v| v == 1.0));
        }
        assert_eq!((p.horizontal.height, p.horizontal.width), (4, 4));
        assert_eq!((p.vertical.height, p.vertical.width), (3, 5));
        assert_eq!((p.anti_diagonal.height, p.anti_diagonal.width), (3, 4));
    }

    #[test]
    fn checkerboard_product_signs() {
        let v = (0..36).map(|i| if (i / 6 + i % 6) % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let p = pairwise_products(&GrayPlane::new(6, 6, v).unwrap()).unwrap();
        assert!(p.horizontal.values.iter().all(|&v| v == -1.0));
        assert!(p.vertical.values.iter().all(|&v| v == -1.0));
        assert!(p.diagonal.values.iter().all(|&v| v == 1.0));
        assert!(p.anti_diagonal.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn products_match_loop_oracle() {
        let p = noise_plane(5, 5, 3);
        let prod = pairwise_products(&p).unwrap();
        let x = |i: usize, j: usize| p.values[i * 5 + j];
        let mut h = vec![];
        let mut v = vec![];
        let mut d1 = vec![];
        let mut d2 = vec![];
        for i in 0..5 {
            for j in 0..4 {
                h.push(x(i, j) * x(i, j + 1));
            }
        }
        for i in 0..4 {
            for j in 0..5 {
                v.push(x(i, j) * x(i + 1, j));
            }
        }
        for i in 0..4 {
            for j in 0..4 {
                d1.push(x(i, j) * x(i + 1, j + 1));
            }
            for j in 1..5 {
                d2.push(x(i, j) * x(i + 1, j - 1));
            }
        }
        assert_eq!(prod.horizontal.values, h);
        assert_eq!(prod.vertical.values, v);
        assert_eq!(prod.diagonal.values, d1);
        assert_eq!(prod.anti_diagonal.values, d2);
    }
}
