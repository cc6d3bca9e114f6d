//! Center-peaked priors blended into upscaled score maps: a Hann window
//! and a direction-aware Gaussian whose slow-decay axis follows the
//! motion direction, quantized into sectors so maps can be cached.

use std::collections::HashMap;
use std::sync::Arc;

use crate::geom::TAU;
use crate::nn::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PenaltyKind {
    Hann,
    DirectionalGaussian,
}

pub fn hann_window(n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![1.0; n];
    }
    (0..n)
        .map(|i| 0.5 * (1.0 - (TAU * i as f64 / (n - 1) as f64).cos()))
        .collect()
}

fn renormalize_max(t: &mut Tensor) {
    let max = t.max_value();
    if max > 0.0 {
        for v in t.data_mut() {
            *v /= max;
        }
    }
}

/// Outer product of 1D Hann windows, scaled so the peak is exactly 1
/// (for odd sides the peak is the center pixel).
pub fn hann_map(rows: usize, cols: usize) -> Tensor {
    let wr = hann_window(rows);
    let wc = hann_window(cols);
    let mut t = Tensor::zeros(&[rows, cols]);
    for r in 0..rows {
        for c in 0..cols {
            t.set2(r, c, wr[r] * wc[c]);
        }
    }
    renormalize_max(&mut t);
    t
}

/// Sector index of direction `phi` when the circle is split into `n`
/// equal sectors: floor(n*phi / 2pi) on phi wrapped to [0, 2pi).
pub fn sector_of(phi: f64, n: usize) -> usize {
    let wrapped = phi.rem_euclid(TAU);
    ((n as f64 * wrapped / TAU) as usize).min(n - 1)
}

pub fn sector_center(sector: usize, n: usize) -> f64 {
    TAU * (sector as f64 + 0.5) / n as f64
}

/// Anisotropic Gaussian centered on the map: standard deviation
/// `sigma_along` pixels along direction `phi`, `sigma_cross` across it.
/// Peak scaled to exactly 1 (the center pixel when sides are odd).
pub fn directional_gaussian(
    rows: usize,
    cols: usize,
    phi: f64,
    sigma_along: f64,
    sigma_cross: f64,
) -> Tensor {
    let (sin, cos) = phi.sin_cos();
    let ia = 1.0 / (sigma_along * sigma_along);
    let ic = 1.0 / (sigma_cross * sigma_cross);
    // Precision matrix R(phi) diag(1/sa^2, 1/sc^2) R(phi)^T.
    let qxx = cos * cos * ia + sin * sin * ic;
    let qyy = sin * sin * ia + cos * cos * ic;
    let qxy = sin * cos * (ia - ic);
    let cy = (rows as f64 - 1.0) / 2.0;
    let cx = (cols as f64 - 1.0) / 2.0;
    let mut t = Tensor::zeros(&[rows, cols]);
    for r in 0..rows {
        for c in 0..cols {
            let x = c as f64 - cx;
            let y = r as f64 - cy;
            let q = qxx * x * x + 2.0 * qxy * x * y + qyy * y * y;
            t.set2(r, c, (-0.5 * q).exp());
        }
    }
    renormalize_max(&mut t);
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum CacheKey {
    Hann { rows: usize, cols: usize },
    Gaussian { rows: usize, cols: usize, sector: usize },
}

/// Memoizes penalty maps per (size, kind, sector). Lookups within the
/// same sector return the identical shared allocation.
#[derive(Debug, Default)]
pub struct PenaltyCache {
    maps: HashMap<CacheKey, Arc<Tensor>>,
}

pub struct GaussianSpec {
    /// Direction of motion (radians); quantized to a sector center.
    pub phi: f64,
    /// Std deviations as fractions of sqrt(rows*cols).
    pub along_scale: f64,
    pub cross_scale: f64,
    pub sectors: usize,
}

impl PenaltyCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn hann(&mut self, rows: usize, cols: usize) -> Arc<Tensor> {
        self.maps
            .entry(CacheKey::Hann { rows, cols })
            .or_insert_with(|| Arc::new(hann_map(rows, cols)))
            .clone()
    }

    pub fn gaussian(&mut self, rows: usize, cols: usize, spec: &GaussianSpec) -> Arc<Tensor> {
        let sector = sector_of(spec.phi, spec.sectors);
        let key = CacheKey::Gaussian { rows, cols, sector };
        self.maps
            .entry(key)
            .or_insert_with(|| {
                let size = ((rows * cols) as f64).sqrt();
                Arc::new(directional_gaussian(
                    rows,
                    cols,
                    sector_center(sector, spec.sectors),
                    spec.along_scale * size,
                    spec.cross_scale * size,
                ))
            })
            .clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn hann_center_is_one_and_symmetric() {
        let m = hann_map(21, 21);
        assert_eq!(m.at2(10, 10), 1.0);
        for r in 0..21 {
            for c in 0..21 {
                assert!((m.at2(r, c) - m.at2(20 - r, 20 - c)).abs() < 1e-12);
                assert!((m.at2(r, c) - m.at2(c, r)).abs() < 1e-12);
                assert!((0.0..=1.0).contains(&m.at2(r, c)));
            }
        }
        // Edges of the window are zero.
        assert_eq!(m.at2(0, 5), 0.0);
    }

    #[test]
    fn hann_one_by_one_is_one() {
        assert_eq!(hann_map(1, 1).at2(0, 0), 1.0);
    }

    #[test]
    fn sector_hash_matches_direct_evaluation() {
        assert_eq!(sector_of(PI, 8), 4);
        assert_eq!(sector_of(0.0, 8), 0);
        assert_eq!(sector_of(-0.01, 8), 7); // wraps to just under 2pi
        assert_eq!(sector_of(TAU - 1e-12, 8), 7);
        // Within a sector the index is stable; one sector over it moves.
        assert_eq!(sector_of(0.3, 16), sector_of(0.3 + 0.01, 16));
        assert_ne!(sector_of(0.3, 16), sector_of(0.3 + TAU / 16.0, 16));
    }

    #[test]
    fn sector_center_lies_inside_its_sector() {
        for n in [4usize, 8, 16] {
            for k in 0..n {
                assert_eq!(sector_of(sector_center(k, n), n), k);
            }
        }
    }

    #[test]
    fn gaussian_center_is_one_and_along_beats_cross() {
        // Motion straight up: decay along +y slower than along +x.
        let g = directional_gaussian(41, 41, PI / 2.0, 10.0, 4.0);
        assert_eq!(g.at2(20, 20), 1.0);
        for dist in [3usize, 8, 15] {
            let along = g.at2(20 + dist, 20);
            let cross = g.at2(20, 20 + dist);
            assert!(along > cross, "dist {dist}: {along} vs {cross}");
        }
    }

    #[test]
    fn gaussian_matches_closed_form() {
        // phi = 0: axes separable, q = x^2/sa^2 + y^2/sc^2.
        let g = directional_gaussian(11, 11, 0.0, 3.0, 2.0);
        for (r, c) in [(5usize, 8usize), (2, 5), (3, 9)] {
            let x = c as f64 - 5.0;
            let y = r as f64 - 5.0;
            let want = (-0.5 * (x * x / 9.0 + y * y / 4.0)).exp();
            assert!((g.at2(r, c) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn cache_shares_within_sector_and_splits_across() {
        let mut cache = PenaltyCache::new();
        let spec = |phi| GaussianSpec {
            phi,
            along_scale: 0.25,
            cross_scale: 0.15,
            sectors: 16,
        };
        let a = cache.gaussian(33, 33, &spec(0.30));
        let b = cache.gaussian(33, 33, &spec(0.31));
        let c = cache.gaussian(33, 33, &spec(0.30 + TAU / 4.0));
        assert!(Arc::ptr_eq(&a, &b));
        assert!(!Arc::ptr_eq(&a, &c));
        // A quarter turn genuinely changes an anisotropic map.
        assert!(a.data().iter().zip(c.data()).any(|(x, y)| (x - y).abs() > 1e-6));
        // Different sizes never alias.
        let d = cache.gaussian(17, 17, &spec(0.30));
        assert!(!Arc::ptr_eq(&a, &d));
        // Hann maps cache too.
        let h1 = cache.hann(33, 33);
        let h2 = cache.hann(33, 33);
        assert!(Arc::ptr_eq(&h1, &h2));
    }
}
