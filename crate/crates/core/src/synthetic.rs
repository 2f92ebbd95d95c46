//! Seeded synthetic weights and calibration activations.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ClaqError, Result};
use crate::kmeans::mix_seed;
use crate::tensor_store::{ModelWeights, WeightMatrix};

pub const DEFAULT_CALIB_SAMPLES: usize = 128;
const PROJECTIONS: [&str; 4] = ["q_proj", "k_proj", "v_proj", "o_proj"];

/// Laplace-bodied matrices with a few planted extreme entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub matrices: usize,
    pub rows: usize,
    pub cols: usize,
    /// Laplace scale of the body (also its mean magnitude).
    pub scale: f64,
    /// Fraction of columns that receive planted outliers.
    pub outlier_col_fraction: f64,
    /// Inclusive range of planted outliers per outlier column.
    pub outliers_per_col: (usize, usize),
    /// Planted magnitudes, in multiples of `scale`.
    pub magnitude: (f64, f64),
}

impl FixtureSpec {
    /// 8 matrices of 512x512 with about 7% outlier columns.
    pub fn heavy_tailed() -> Self {
        Self {
            matrices: 8,
            rows: 512,
            cols: 512,
            scale: 0.02,
            outlier_col_fraction: 0.07,
            outliers_per_col: (4, 12),
            magnitude: (15.0, 60.0),
        }
    }

    /// Same body, but every column carries exactly two planted outliers.
    pub fn uniform_outliers() -> Self {
        Self {
            outlier_col_fraction: 1.0,
            outliers_per_col: (2, 2),
            ..Self::heavy_tailed()
        }
    }

    pub fn with_shape(mut self, matrices: usize, rows: usize, cols: usize) -> Self {
        self.matrices = matrices;
        self.rows = rows;
        self.cols = cols;
        self
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.outliers_per_col;
        if self.matrices == 0 || self.rows == 0 || self.cols == 0 {
            return Err(ClaqError::Invalid("fixture shape must be non-empty".into()));
        }
        if !(self.scale > 0.0) || !(0.0..=1.0).contains(&self.outlier_col_fraction) {
            return Err(ClaqError::Invalid("fixture scale or outlier fraction out of range".into()));
        }
        if lo > hi || hi > self.rows || !(self.magnitude.0 > 0.0 && self.magnitude.0 <= self.magnitude.1) {
            return Err(ClaqError::Invalid("fixture outlier ranges are inconsistent".into()));
        }
        Ok(())
    }
}

fn laplace(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    let e: f64 = Exp1.sample(rng);
    if rng.random::<bool>() {
        e * scale
    } else {
        -e * scale
    }
}

/// Matrix name for position `i`: four projections per layer.
pub fn matrix_name(i: usize) -> String {
    format!("layers.{}.{}", i / PROJECTIONS.len(), PROJECTIONS[i % PROJECTIONS.len()])
}

pub fn synthetic_matrix(spec: &FixtureSpec, seed: u64, index: usize) -> Result<WeightMatrix> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, index as u64));
    let (rows, cols) = (spec.rows, spec.cols);
    let mut data: Vec<f64> = (0..rows * cols).map(|_| laplace(&mut rng, spec.scale)).collect();
    let n_cols = (spec.outlier_col_fraction * cols as f64).round() as usize;
    for c in sample(&mut rng, cols, n_cols.min(cols)).into_vec() {
        let (lo, hi) = spec.outliers_per_col;
        let n = rng.random_range(lo..=hi);
        for r in sample(&mut rng, rows, n).into_vec() {
            let m = rng.random_range(spec.magnitude.0..=spec.magnitude.1) * spec.scale;
            data[r * cols + c] = if rng.random::<bool>() { m } else { -m };
        }
    }
    WeightMatrix::new(matrix_name(index), rows, cols, data)
}

pub fn synthetic_model(spec: &FixtureSpec, seed: u64) -> Result<ModelWeights> {
    let matrices = (0..spec.matrices)
        .map(|i| synthetic_matrix(spec, seed, i))
        .collect::<Result<Vec<_>>>()?;
    let mut metadata = BTreeMap::new();
    metadata.insert("generator".to_string(), "synthetic".to_string());
    metadata.insert("seed".to_string(), seed.to_string());
    ModelWeights::new(matrices, metadata)
}

/// Correlated activations: a few shared latent factors, per-channel gains
/// and an occasional 5x heavy-tail burst. Rows are samples.
pub fn synthetic_calibration(seed: u64, stream: u64, samples: usize, dim: usize) -> Result<WeightMatrix> {
    if samples == 0 || dim == 0 {
        return Err(ClaqError::Invalid("calibration shape must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed ^ 0xCA1B, stream));
    const FACTORS: usize = 4;
    let loadings: Vec<f64> = (0..FACTORS * dim)
        .map(|_| 0.6 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let gains: Vec<f64> = (0..dim)
        .map(|_| if rng.random::<f64>() < 0.02 { 8.0 } else { 0.5 + rng.random::<f64>() })
        .collect();
    let mut data = Vec::with_capacity(samples * dim);
    for _ in 0..samples {
        let z: Vec<f64> = (0..FACTORS).map(|_| rng.sample(StandardNormal)).collect();
        let burst = if rng.random::<f64>() < 0.05 { 5.0 } else { 1.0 };
        for j in 0..dim {
            let shared: f64 = (0..FACTORS).map(|f| z[f] * loadings[f * dim + j]).sum();
            let own: f64 = rng.sample(StandardNormal);
            data.push(gains[j] * burst * (shared + own));
        }
    }
    WeightMatrix::new(format!("calib.{stream}"), samples, dim, data)
}

/// Parses `synthetic:<seed>`.
pub fn parse_synthetic(source: &str) -> Option<u64> {
    source.strip_prefix("synthetic:")?.parse().ok()
}
