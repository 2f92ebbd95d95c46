//! Column outlier ratios and the Outlier Order ranking.
//!
//! An element is an outlier when `|w| > S * mean(|W|)` with the mean taken
//! over the whole matrix. The ratio of a column is its outlier count divided
//! by the row count.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{ClaqError, Result};
use crate::tensor_store::{ModelWeights, WeightMatrix};

pub const DEFAULT_SCALE: f64 = 13.0;
pub const TOP_DECILE: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierProfile {
    pub ratios: Vec<f64>,
    pub counts: Vec<usize>,
    pub rows: usize,
    pub scale: f64,
    pub matrix_mean_abs: f64,
    /// Column indices by descending ratio, ties by ascending index.
    pub order: Vec<usize>,
}

impl OutlierProfile {
    pub fn cols(&self) -> usize {
        self.ratios.len()
    }

    pub fn threshold(&self) -> f64 {
        self.scale * self.matrix_mean_abs
    }

    pub fn total_outliers(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Outlier fraction over the whole matrix.
    pub fn matrix_ratio(&self) -> f64 {
        self.total_outliers() as f64 / (self.rows * self.cols()) as f64
    }
}

/// Outlier ratios per column of `w` at scale `S`.
pub fn outlier_ratio(w: &WeightMatrix, scale: f64) -> Result<OutlierProfile> {
    if !(scale > 0.0) {
        return Err(ClaqError::Invalid(format!("outlier scale must be > 0, got {scale}")));
    }
    let mean_abs = w.data().iter().map(|v| v.abs()).sum::<f64>() / w.len() as f64;
    let t = scale * mean_abs;
    let mut counts = vec![0usize; w.cols()];
    for row in w.data().chunks_exact(w.cols()) {
        for (c, v) in counts.iter_mut().zip(row) {
            if v.abs() > t {
                *c += 1;
            }
        }
    }
    let rows = w.rows();
    let ratios: Vec<f64> = counts.iter().map(|&c| c as f64 / rows as f64).collect();
    let order = outlier_order(&counts);
    Ok(OutlierProfile {
        ratios,
        counts,
        rows,
        scale,
        matrix_mean_abs: mean_abs,
        order,
    })
}

// Counts share the denominator, so ordering by count orders by ratio
// without floating-point ties.
fn outlier_order(counts: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    order
}

/// Number of columns selected by a fraction `f` of `cols`: `ceil(f * cols)`.
///
/// A small slack absorbs representation error, so 0.3 of 10 columns is 3.
pub fn selection_count(fraction: f64, cols: usize) -> usize {
    let raw = fraction * cols as f64;
    let n = (raw - 1e-9).ceil().max(0.0) as usize;
    n.min(cols)
}

/// Columns selected by a top-fraction cut of the Outlier Order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Ratio of the last selected column.
    pub threshold: f64,
    /// Selected column indices in Outlier Order.
    pub columns: Vec<usize>,
}

impl Selection {
    pub fn mask(&self, cols: usize) -> Vec<bool> {
        let mut m = vec![false; cols];
        for &c in &self.columns {
            m[c] = true;
        }
        m
    }
}

/// First `ceil(f * cols)` columns of the Outlier Order.
pub fn threshold_for_fraction(profile: &OutlierProfile, fraction: f64) -> Result<Selection> {
    if profile.cols() == 0 {
        return Err(ClaqError::Invalid("empty outlier profile".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(ClaqError::Invalid(format!(
            "selection fraction must be in (0, 1], got {fraction}"
        )));
    }
    Ok(select_top(profile, selection_count(fraction, profile.cols())))
}

/// First `count` columns of the Outlier Order (`count` may be 0).
pub fn select_top(profile: &OutlierProfile, count: usize) -> Selection {
    let columns: Vec<usize> = profile.order[..count.min(profile.cols())].to_vec();
    let threshold = columns.last().map_or(f64::INFINITY, |&c| profile.ratios[c]);
    Selection { threshold, columns }
}

/// Per-matrix summary behind the outlier distribution figures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixOutlierStats {
    pub matrix_name: String,
    pub cols: usize,
    pub total_outlier_fraction: f64,
    /// Share of all outliers held by the top 10% of columns (0 when there are none).
    pub top_decile_share: f64,
    pub max_rj: f64,
    #[serde(skip)]
    pub sorted_ratios: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerOutlierStats {
    pub layer: String,
    pub matrices: usize,
    pub outlier_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelOutlierStats {
    pub matrices: Vec<MatrixOutlierStats>,
    pub layers: Vec<LayerOutlierStats>,
}

pub fn matrix_stats(name: &str, profile: &OutlierProfile) -> MatrixOutlierStats {
    let total = profile.total_outliers();
    let top = selection_count(TOP_DECILE, profile.cols());
    let in_top: usize = profile.order[..top].iter().map(|&c| profile.counts[c]).sum();
    MatrixOutlierStats {
        matrix_name: name.to_string(),
        cols: profile.cols(),
        total_outlier_fraction: profile.matrix_ratio(),
        top_decile_share: if total == 0 {
            0.0
        } else {
            in_top as f64 / total as f64
        },
        max_rj: profile.order.first().map_or(0.0, |&c| profile.ratios[c]),
        sorted_ratios: profile.order.iter().map(|&c| profile.ratios[c]).collect(),
    }
}

/// Layer key of a tensor name: the `layers.N` prefix if present, else the name.
pub fn layer_key(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        if (*p == "layers" || *p == "h" || *p == "blocks")
            && i + 1 < parts.len()
            && parts[i + 1].parse::<usize>().is_ok()
        {
            return parts[..=i + 1].join(".");
        }
    }
    name.to_string()
}

pub fn model_outlier_stats(model: &ModelWeights, scale: f64) -> Result<ModelOutlierStats> {
    let mut matrices = Vec::with_capacity(model.matrices.len());
    // (layer, matrices, outliers, params) in first-seen order
    let mut layers: Vec<(String, usize, u64, u64)> = Vec::new();
    for w in &model.matrices {
        let profile = outlier_ratio(w, scale)?;
        matrices.push(matrix_stats(w.name(), &profile));
        let key = layer_key(w.name());
        let idx = match layers.iter().position(|l| l.0 == key) {
            Some(i) => i,
            None => {
                layers.push((key, 0, 0, 0));
                layers.len() - 1
            }
        };
        layers[idx].1 += 1;
        layers[idx].2 += profile.total_outliers() as u64;
        layers[idx].3 += w.len() as u64;
    }
    let layers = layers
        .into_iter()
        .map(|(layer, n, out, params)| LayerOutlierStats {
            layer,
            matrices: n,
            outlier_fraction: out as f64 / params as f64,
        })
        .collect();
    Ok(ModelOutlierStats { matrices, layers })
}

pub const MATRIX_CSV_HEADER: [&str; 5] = [
    "matrix_name",
    "cols",
    "total_outlier_fraction",
    "top_decile_share",
    "max_Rj",
];

impl ModelOutlierStats {
    pub fn write_matrix_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(MATRIX_CSV_HEADER).map_err(csv_err)?;
        for m in &self.matrices {
            w.write_record([
                m.matrix_name.clone(),
                m.cols.to_string(),
                m.total_outlier_fraction.to_string(),
                m.top_decile_share.to_string(),
                m.max_rj.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| ClaqError::io("csv", e))
    }

    pub fn write_layer_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "matrices", "outlier_fraction"])
            .map_err(csv_err)?;
        for l in &self.layers {
            w.write_record([
                l.layer.clone(),
                l.matrices.to_string(),
                l.outlier_fraction.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| ClaqError::io("csv", e))
    }

    /// One row per (matrix, rank) with the ratio at that rank.
    pub fn write_sorted_ratio_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["matrix_name", "rank", "ratio"]).map_err(csv_err)?;
        for m in &self.matrices {
            for (rank, r) in m.sorted_ratios.iter().enumerate() {
                w.write_record([m.matrix_name.clone(), rank.to_string(), r.to_string()])
                    .map_err(csv_err)?;
            }
        }
        w.flush().map_err(|e| ClaqError::io("csv", e))
    }
}

pub(crate) fn csv_err(e: csv::Error) -> ClaqError {
    ClaqError::Invalid(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile_from_ratios(ratios: &[f64]) -> OutlierProfile {
        let rows = 100;
        let counts: Vec<usize> = ratios.iter().map(|r| (r * rows as f64).round() as usize).collect();
        OutlierProfile {
            ratios: ratios.to_vec(),
            order: outlier_order(&counts),
            counts,
            rows,
            scale: 1.0,
            matrix_mean_abs: 1.0,
        }
    }

    #[test]
    fn counts_strictly_above_threshold() {
        // columns [1,1,1,1] and [1,1,1,9]; mean |W| = 2, t = 6
        let w = WeightMatrix::new(
            "w",
            4,
            2,
            vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 9.0],
        )
        .unwrap();
        let p = outlier_ratio(&w, 3.0).unwrap();
        assert_eq!(p.matrix_mean_abs, 2.0);
        assert_eq!(p.threshold(), 6.0);
        assert_eq!(p.ratios, vec![0.0, 0.25]);
        assert_eq!(p.order, vec![1, 0]);
    }

    #[test]
    fn huge_scale_and_constant_matrix_have_no_outliers() {
        let w = WeightMatrix::new("w", 2, 2, vec![1.0, -50.0, 3.0, 0.1]).unwrap();
        assert!(outlier_ratio(&w, 1e300).unwrap().ratios.iter().all(|&r| r == 0.0));
        let c = WeightMatrix::new("c", 3, 3, vec![0.7; 9]).unwrap();
        assert!(outlier_ratio(&c, 1.0).unwrap().ratios.iter().all(|&r| r == 0.0));
        let z = WeightMatrix::new("z", 2, 2, vec![0.0; 4]).unwrap();
        assert!(outlier_ratio(&z, 13.0).unwrap().ratios.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn rejects_non_positive_scale() {
        let w = WeightMatrix::new("w", 1, 1, vec![1.0]).unwrap();
        assert!(outlier_ratio(&w, 0.0).is_err());
        assert!(outlier_ratio(&w, f64::NAN).is_err());
    }

    #[test]
    fn selection_examples() {
        let mut r = vec![0.0; 10];
        r[0] = 0.5;
        r[1] = 0.1;
        let s = threshold_for_fraction(&profile_from_ratios(&r), 0.1).unwrap();
        assert_eq!(s.columns, vec![0]);
        assert_eq!(s.threshold, 0.5);

        let s = threshold_for_fraction(&profile_from_ratios(&[0.2; 10]), 0.3).unwrap();
        assert_eq!(s.columns, vec![0, 1, 2]);

        let r = [0.9, 0.8, 0.8, 0.7, 0.1, 0.0, 0.0, 0.0, 0.0, 0.0];
        let s = threshold_for_fraction(&profile_from_ratios(&r), 0.4).unwrap();
        let mut cols = s.columns.clone();
        cols.sort();
        assert_eq!(cols, vec![0, 1, 2, 3]);
        assert_eq!(s.threshold, 0.7);
    }

    #[test]
    fn selection_rejects_bad_fraction() {
        let p = profile_from_ratios(&[0.1, 0.2]);
        assert!(threshold_for_fraction(&p, 0.0).is_err());
        assert!(threshold_for_fraction(&p, 1.5).is_err());
    }

    #[test]
    fn selection_count_uses_ceil() {
        assert_eq!(selection_count(0.1, 1000), 100);
        assert_eq!(selection_count(0.3, 10), 3);
        assert_eq!(selection_count(0.01, 10), 1);
        assert_eq!(selection_count(1.0, 7), 7);
        assert_eq!(selection_count(0.025, 512), 13);
    }

    #[test]
    fn layer_keys() {
        assert_eq!(layer_key("layers.0.self_attn.o_proj.weight"), "layers.0");
        assert_eq!(layer_key("model.layers.31.mlp.up_proj.weight"), "model.layers.31");
        assert_eq!(layer_key("lm_head.weight"), "lm_head.weight");
    }

    #[test]
    fn single_outlier_column_owns_the_top_decile() {
        let rows = 10;
        let cols = 100;
        let mut data = vec![0.01; rows * cols];
        for r in 0..rows {
            data[r * cols + 37] = 50.0;
        }
        let w = WeightMatrix::new("w", rows, cols, data).unwrap();
        let p = outlier_ratio(&w, 13.0).unwrap();
        let s = matrix_stats("w", &p);
        assert_eq!(s.top_decile_share, 1.0);
        assert_eq!(s.max_rj, 1.0);
        assert_eq!(p.order[0], 37);
    }

    #[test]
    fn csv_header_is_stable() {
        let stats = ModelOutlierStats {
            matrices: vec![MatrixOutlierStats {
                matrix_name: "a".into(),
                cols: 4,
                total_outlier_fraction: 0.25,
                top_decile_share: 1.0,
                max_rj: 0.5,
                sorted_ratios: vec![0.5, 0.0],
            }],
            layers: vec![],
        };
        let mut buf = Vec::new();
        stats.write_matrix_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "matrix_name,cols,total_outlier_fraction,top_decile_share,max_Rj\na,4,0.25,1,0.5\n"
        );
    }
}
