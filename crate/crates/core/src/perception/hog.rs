//! Histograms of oriented gradients and their Bayesian pooling.

use std::f64::consts::PI;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::PerceptionError;
use crate::vine_gen::RasterImage;

const BLOCK_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HogDescriptor {
    pub cell_size: usize,
    pub bins: usize,
    pub cells_x: usize,
    pub cells_y: usize,
    /// Block-normalized histogram, blocks in row-major order.
    pub histogram: Vec<f64>,
    /// Raw per-cell orientation histograms, cells in row-major order.
    pub cell_histograms: Vec<Vec<f64>>,
}

impl HogDescriptor {
    pub fn len(&self) -> usize {
        self.histogram.len()
    }

    pub fn is_empty(&self) -> bool {
        self.histogram.is_empty()
    }

    /// Orientation histogram summed over all cells.
    pub fn orientation_histogram(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.bins];
        for cell in &self.cell_histograms {
            for (o, v) in out.iter_mut().zip(cell) {
                *o += v;
            }
        }
        out
    }

    fn block_shape(&self) -> (usize, usize) {
        (self.cells_x.min(2), self.cells_y.min(2))
    }

    /// L2 norm of each normalized block.
    pub fn block_norms(&self) -> Vec<f64> {
        let (bx, by) = self.block_shape();
        self.histogram.chunks(bx * by * self.bins).map(|b| b.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
    }
}

pub fn compute_hog(patch: &RasterImage, cell_size: usize, bins: usize) -> Result<HogDescriptor, PerceptionError> {
    if cell_size == 0 || bins == 0 {
        return Err(PerceptionError::InvalidConfig("cell size and bin count must be positive".into()));
    }
    if patch.width < cell_size || patch.height < cell_size {
        return Err(PerceptionError::PatchTooSmall { width: patch.width, height: patch.height, cell_size });
    }
    let (w, h) = (patch.width, patch.height);
    let cells_x = w / cell_size;
    let cells_y = h / cell_size;
    let mut cells = vec![vec![0.0; bins]; cells_x * cells_y];
    let at = |x: i64, y: i64| patch.get(x.clamp(0, w as i64 - 1) as usize, y.clamp(0, h as i64 - 1) as usize);
    for y in 0..cells_y * cell_size {
        for x in 0..cells_x * cell_size {
            let (xi, yi) = (x as i64, y as i64);
            let gx = at(xi + 1, yi) - at(xi - 1, yi);
            let gy = at(xi, yi + 1) - at(xi, yi - 1);
            let mag = gx.hypot(gy);
            if mag == 0.0 {
                continue;
            }
            let theta = gy.atan2(gx).rem_euclid(PI);
            let bin = ((theta / PI * bins as f64) as usize).min(bins - 1);
            cells[(y / cell_size) * cells_x + x / cell_size][bin] += mag;
        }
    }

    let (bx, by) = (cells_x.min(2), cells_y.min(2));
    let mut histogram = Vec::new();
    for y0 in 0..=cells_y - by {
        for x0 in 0..=cells_x - bx {
            let start = histogram.len();
            for cy in y0..y0 + by {
                for cx in x0..x0 + bx {
                    histogram.extend_from_slice(&cells[cy * cells_x + cx]);
                }
            }
            let block = &mut histogram[start..];
            let norm = (block.iter().map(|v| v * v).sum::<f64>() + BLOCK_EPS * BLOCK_EPS).sqrt();
            block.iter_mut().for_each(|v| *v /= norm);
        }
    }
    Ok(HogDescriptor { cell_size, bins, cells_x, cells_y, histogram, cell_histograms: cells })
}

/// Posterior predictive of descriptor entries.
#[derive(Clone, Debug, PartialEq)]
pub struct MpHog {
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
    /// Log marginal likelihood of the pooled descriptors, summed over entries.
    pub log_evidence: f64,
}

/// Pools descriptors under an independent Gaussian model per entry: prior
/// mean 0 and precision `alpha`, observation noise precision `beta`.
pub fn mp_hog(descriptors: &[HogDescriptor], alpha: f64, beta: f64) -> Result<MpHog, PerceptionError> {
    let first = descriptors.first().ok_or(PerceptionError::EmptyInput)?;
    if !(alpha >= 0.0 && alpha.is_finite() && beta > 0.0 && beta.is_finite()) {
        return Err(PerceptionError::InvalidConfig(format!("need alpha >= 0 and beta > 0, got {alpha}, {beta}")));
    }
    let dim = first.len();
    if let Some(d) = descriptors.iter().find(|d| d.len() != dim) {
        return Err(PerceptionError::DimensionMismatch { expected: dim, found: d.len() });
    }
    let n = descriptors.len() as f64;
    let precision = alpha + n * beta;
    let mut mean = DVector::zeros(dim);
    let mut log_evidence = 0.0;
    for i in 0..dim {
        let sum: f64 = descriptors.iter().map(|d| d.histogram[i]).sum();
        let sq: f64 = descriptors.iter().map(|d| d.histogram[i] * d.histogram[i]).sum();
        mean[i] = beta * sum / precision;
        log_evidence += -0.5 * n * (2.0 * PI).ln() + 0.5 * n * beta.ln() + 0.5 * alpha.ln() - 0.5 * precision.ln()
            - 0.5 * beta * sq
            + 0.5 * beta * beta * sum * sum / precision;
    }
    let variance = DVector::from_element(dim, 1.0 / beta + 1.0 / precision);
    Ok(MpHog { mean, variance, log_evidence })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn desc(values: Vec<f64>) -> HogDescriptor {
        HogDescriptor { cell_size: 8, bins: values.len(), cells_x: 1, cells_y: 1, histogram: values, cell_histograms: vec![] }
    }

    #[test]
    fn constant_patch_has_no_gradient() {
        let img = RasterImage::from_fn(16, 16, |_, _| 0.7).unwrap();
        let hog = compute_hog(&img, 8, 9).unwrap();
        assert!(hog.histogram.iter().all(|&v| v == 0.0));
        assert_eq!(hog.len(), 36);
    }

    #[test]
    fn vertical_step_votes_horizontal_gradient_bin() {
        // step between columns 7 and 8 of a two-cell patch
        let img = RasterImage::from_fn(16, 8, |x, _| if x >= 8 { 1.0 } else { 0.0 }).unwrap();
        let hog = compute_hog(&img, 8, 9).unwrap();
        assert_eq!((hog.cells_x, hog.cells_y), (2, 1));
        // columns 7 and 8 each see a central difference of 1 on all 8 rows
        assert_eq!(hog.cell_histograms[0][0], 8.0);
        assert_eq!(hog.cell_histograms[1][0], 8.0);
        let total: f64 = hog.cell_histograms.iter().flatten().sum();
        assert_eq!(total, 16.0);
    }

    #[test]
    fn small_patch_is_rejected() {
        let img = RasterImage::new(7, 20).unwrap();
        assert!(matches!(compute_hog(&img, 8, 9), Err(PerceptionError::PatchTooSmall { .. })));
    }

    #[test]
    fn block_norms_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let vals: Vec<f64> = (0..24 * 40).map(|_| rng.random::<f64>()).collect();
            let img = RasterImage::from_fn(24, 40, |x, y| vals[y * 24 + x]).unwrap();
            let hog = compute_hog(&img, 8, 9).unwrap();
            assert!(hog.block_norms().iter().all(|&n| n <= 1.0 + 1e-9));
            assert!(hog.histogram.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn quarter_turn_shifts_orientation_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 32;
        for _ in 0..10 {
            let vals: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
            let img = RasterImage::from_fn(n, n, |x, y| vals[y * n + x]).unwrap();
            let rot = RasterImage::from_fn(n, n, |x, y| vals[x * n + (n - 1 - y)]).unwrap();
            let a = compute_hog(&img, 8, 18).unwrap().orientation_histogram();
            let b = compute_hog(&rot, 8, 18).unwrap().orientation_histogram();
            let total: f64 = a.iter().sum();
            let diff: f64 = (0..18).map(|i| (a[i] - b[(i + 9) % 18]).abs()).sum();
            assert!(diff <= 0.05 * total, "{diff} vs {total}");
        }
    }

    #[test]
    fn conjugate_update_by_hand() {
        let out = mp_hog(&[desc(vec![1.0]), desc(vec![3.0])], 1.0, 1.0).unwrap();
        assert!((out.mean[0] - 4.0 / 3.0).abs() < 1e-15);
        assert!((out.variance[0] - (1.0 + 1.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn flat_prior_limits() {
        let h = vec![0.2, 0.5, 0.1];
        let one = mp_hog(&[desc(h.clone())], 1e-12, 1.0).unwrap();
        for i in 0..3 {
            assert!((one.mean[i] - h[i]).abs() < 1e-11);
        }
        let neg: Vec<f64> = h.iter().map(|v| -v).collect();
        let pair = mp_hog(&[desc(h), desc(neg)], 1e-12, 1.0).unwrap();
        assert!(pair.mean.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn evidence_matches_gaussian_marginal() {
        // one observation: x ~ N(0, 1/alpha + 1/beta)
        let (alpha, beta, x) = (2.0, 5.0, 0.3);
        let s2 = 1.0 / alpha + 1.0 / beta;
        let expect = -0.5 * (2.0 * PI * s2).ln() - x * x / (2.0 * s2);
        let out = mp_hog(&[desc(vec![x])], alpha, beta).unwrap();
        assert!((out.log_evidence - expect).abs() < 1e-12);
    }

    #[test]
    fn mismatched_dimensions() {
        let err = mp_hog(&[desc(vec![1.0]), desc(vec![1.0, 2.0])], 1.0, 1.0).unwrap_err();
        assert_eq!(err, PerceptionError::DimensionMismatch { expected: 1, found: 2 });
        assert_eq!(mp_hog(&[], 1.0, 1.0).unwrap_err(), PerceptionError::EmptyInput);
    }
}
