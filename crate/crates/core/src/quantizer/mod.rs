//! Column-by-column quantization with outlier reservation and
//! Hessian-weighted error compensation.

mod hessian;

use half::f16;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alloc::{ColumnPlan, ModelAllocation};
use crate::error::{ClaqError, Result};
use crate::kmeans::{nearest, ClusterConfig};
use crate::tensor_store::{dequantize_tensor, ModelWeights, Outlier, PackedTensor, WeightMatrix};

pub use hessian::{
    cholesky_lower, compute_hessian, hessian_from_activations, HessianState, Square,
    DEFAULT_DAMP_RATIO,
};

/// Which column values the codebook is fit on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodebookSource {
    /// Values after earlier columns' error has been propagated.
    #[default]
    Updated,
    /// Values of the input matrix.
    Original,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantOptions {
    pub cluster: ClusterConfig,
    pub damp_ratio: f64,
    /// Process columns by descending Hessian diagonal instead of index order.
    pub act_order: bool,
    pub codebook_source: CodebookSource,
}

impl Default for QuantOptions {
    fn default() -> Self {
        Self {
            cluster: ClusterConfig::default(),
            damp_ratio: DEFAULT_DAMP_RATIO,
            act_order: false,
            codebook_source: CodebookSource::Updated,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BitHistogram {
    pub bits2: usize,
    pub bits3: usize,
    pub bits4: usize,
}

impl BitHistogram {
    pub fn of(bits: &[u8]) -> Self {
        let mut h = Self::default();
        for &b in bits {
            match b {
                2 => h.bits2 += 1,
                3 => h.bits3 += 1,
                _ => h.bits4 += 1,
            }
        }
        h
    }

    fn add(&mut self, o: &BitHistogram) {
        self.bits2 += o.bits2;
        self.bits3 += o.bits3;
        self.bits4 += o.bits4;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub frobenius: f64,
    pub relative: f64,
    /// `tr(ΔW H ΔWᵀ)`, present when a Hessian was supplied.
    pub proxy_loss: Option<f64>,
    pub outliers: usize,
    pub bit_histogram: BitHistogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    pub matrices: Vec<MatrixReport>,
    pub frobenius: f64,
    pub relative: f64,
    pub proxy_loss: Option<f64>,
    pub outliers: usize,
    pub bit_histogram: BitHistogram,
}

impl QuantReport {
    pub fn aggregate(matrices: Vec<MatrixReport>, weight_norm: f64) -> Self {
        let frob_sq: f64 = matrices.iter().map(|m| m.frobenius * m.frobenius).sum();
        let proxy = matrices
            .iter()
            .map(|m| m.proxy_loss)
            .sum::<Option<f64>>();
        let mut hist = BitHistogram::default();
        for m in &matrices {
            hist.add(&m.bit_histogram);
        }
        let frobenius = frob_sq.sqrt();
        Self {
            outliers: matrices.iter().map(|m| m.outliers).sum(),
            frobenius,
            relative: if weight_norm > 0.0 { frobenius / weight_norm } else { 0.0 },
            proxy_loss: proxy,
            bit_histogram: hist,
            matrices,
        }
    }
}

/// Error metrics of a packed tensor against the matrix it came from.
pub fn reconstruction_error(
    original: &WeightMatrix,
    packed: &PackedTensor,
    h: Option<&HessianState>,
) -> Result<MatrixReport> {
    if original.rows() != packed.rows() || original.cols() != packed.cols() {
        return Err(ClaqError::Shape(format!(
            "{}: original is {}x{}, packed is {}x{}",
            original.name(),
            original.rows(),
            original.cols(),
            packed.rows(),
            packed.cols()
        )));
    }
    let cols = original.cols();
    if let Some(h) = h {
        if h.dim != cols {
            return Err(ClaqError::Shape(format!(
                "{}: Hessian dimension {} != {cols} columns",
                original.name(),
                h.dim
            )));
        }
    }
    let deq = dequantize_tensor(packed);
    let delta: Vec<f64> = original
        .data()
        .iter()
        .zip(deq.data())
        .map(|(a, b)| a - b)
        .collect();
    let frobenius = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
    let norm = original.frobenius_norm();
    let proxy_loss = h.map(|h| {
        delta
            .chunks(cols)
            .map(|d| {
                (0..cols)
                    .map(|i| d[i] * h.h.row(i).iter().zip(d).map(|(a, b)| a * b).sum::<f64>())
                    .sum::<f64>()
            })
            .sum::<f64>()
    });
    Ok(MatrixReport {
        name: original.name().to_string(),
        rows: original.rows(),
        cols,
        frobenius,
        relative: if norm > 0.0 { frobenius / norm } else { 0.0 },
        proxy_loss,
        outliers: packed.outliers().len(),
        bit_histogram: BitHistogram::of(packed.precision_map()),
    })
}

/// Rows of the `k` smallest and `k` largest entries (ties by lower row),
/// returned in ascending row order.
pub fn reserve_positions(column: &[f64], k: usize) -> Vec<usize> {
    if k == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..column.len()).collect();
    order.sort_by(|&a, &b| column[a].total_cmp(&column[b]).then(a.cmp(&b)));
    let mut taken = vec![false; column.len()];
    for &r in &order[..k] {
        taken[r] = true;
    }
    order.sort_by(|&a, &b| column[b].total_cmp(&column[a]).then(a.cmp(&b)));
    let mut n = 0;
    for &r in &order {
        if n == k {
            break;
        }
        if !taken[r] {
            taken[r] = true;
            n += 1;
        }
    }
    (0..column.len()).filter(|&r| taken[r]).collect()
}

fn to_f16(v: f64, what: &str) -> Result<f16> {
    let h = f16::from_f64(v);
    if !h.is_finite() {
        return Err(ClaqError::Numerical(format!("{what} {v:e} overflows f16")));
    }
    Ok(h)
}

struct ColumnOut {
    codebook: Vec<f16>,
    indices: Vec<u8>,
    outliers: Vec<(usize, f16)>,
}

/// Quantize one column in place: `col` ends up holding the dequantized values.
fn quantize_column(
    col: &mut [f64],
    original: &[f64],
    bits: u8,
    pairs: usize,
    stream: u64,
    opts: &QuantOptions,
) -> Result<ColumnOut> {
    let rows = col.len();
    let reserved = reserve_positions(original, pairs);
    let mut is_reserved = vec![false; rows];
    for &r in &reserved {
        is_reserved[r] = true;
    }
    let source = match opts.codebook_source {
        CodebookSource::Updated => &*col,
        CodebookSource::Original => original,
    };
    let fit_values: Vec<f64> = (0..rows)
        .filter(|&r| !is_reserved[r])
        .map(|r| source[r])
        .collect();
    let centroids = if fit_values.is_empty() {
        vec![0.0; 1 << bits]
    } else {
        opts.cluster.fit(&fit_values, bits, stream)?.centroids
    };
    let mut codebook = centroids
        .iter()
        .map(|&c| to_f16(c, "centroid"))
        .collect::<Result<Vec<f16>>>()?;
    codebook.sort_by(|a, b| a.total_cmp(b));
    let book: Vec<f64> = codebook.iter().map(|c| c.to_f64()).collect();

    let mut indices = vec![0u8; rows];
    let mut outliers = Vec::with_capacity(reserved.len());
    for r in 0..rows {
        if is_reserved[r] {
            let v = to_f16(col[r], "outlier")?;
            outliers.push((r, v));
            col[r] = v.to_f64();
        } else {
            let q = nearest(col[r], &book);
            indices[r] = q as u8;
            col[r] = book[q];
        }
    }
    Ok(ColumnOut {
        codebook,
        indices,
        outliers,
    })
}

fn check_plan(w: &WeightMatrix, plan: &ColumnPlan) -> Result<()> {
    plan.validate(w.rows(), w.cols())
        .map_err(|e| ClaqError::Shape(format!("{}: {e}", w.name())))
}

/// Descending Hessian diagonal, ties by index.
fn activation_order(h: &HessianState) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..h.dim).collect();
    perm.sort_by(|&a, &b| h.h[(b, b)].total_cmp(&h.h[(a, a)]).then(a.cmp(&b)));
    perm
}

fn run(
    w: &WeightMatrix,
    plan: &ColumnPlan,
    h: Option<&HessianState>,
    opts: &QuantOptions,
) -> Result<PackedTensor> {
    check_plan(w, plan)?;
    let (rows, cols) = (w.rows(), w.cols());
    let original = w.columns();

    let permuted;
    let (order, h) = match h {
        Some(h) if h.dim != cols => {
            return Err(ClaqError::Shape(format!(
                "{}: Hessian dimension {} != {cols} columns",
                w.name(),
                h.dim
            )))
        }
        Some(h) if opts.act_order => {
            let perm = activation_order(h);
            permuted = h.permuted(&perm)?;
            (perm, Some(&permuted))
        }
        other => ((0..cols).collect(), other),
    };

    // working copy in processing order
    let mut work: Vec<Vec<f64>> = order.iter().map(|&c| original[c].clone()).collect();
    let mut outs: Vec<Option<ColumnOut>> = (0..cols).map(|_| None).collect();
    for j in 0..cols {
        let c = order[j];
        let (done, rest) = work.split_at_mut(j + 1);
        let col = &mut done[j];
        if col.iter().any(|v| !v.is_finite()) {
            return Err(ClaqError::Numerical(format!(
                "{}: column {c} became non-finite during compensation",
                w.name()
            )));
        }
        let before = col.clone();
        let out = quantize_column(col, &original[c], plan.bits[c], plan.reserve_pairs[c], c as u64, opts)?;
        if let Some(h) = h {
            let u = &h.inv_factor;
            let d = u[(j, j)];
            let err: Vec<f64> = before.iter().zip(col.iter()).map(|(a, q)| (a - q) / d).collect();
            for (off, target) in rest.iter_mut().enumerate() {
                let f = u[(j, j + 1 + off)];
                if f == 0.0 {
                    continue;
                }
                for (t, e) in target.iter_mut().zip(&err) {
                    *t -= e * f;
                }
            }
        }
        outs[c] = Some(out);
    }

    let mut codebooks = Vec::with_capacity(cols);
    let mut indices = Vec::with_capacity(rows * cols);
    let mut outliers = Vec::new();
    for (c, out) in outs.into_iter().enumerate() {
        let out = out.expect("every column is processed");
        codebooks.push(out.codebook);
        indices.extend_from_slice(&out.indices);
        outliers.extend(out.outliers.into_iter().map(|(r, v)| Outlier::new(r, c, v)));
    }
    PackedTensor::new(w.name(), rows, cols, plan.bits.clone(), codebooks, &indices, outliers)
}

/// Quantize with error compensation through `h`.
pub fn quantize_matrix(
    w: &WeightMatrix,
    plan: &ColumnPlan,
    h: &HessianState,
    opts: &QuantOptions,
) -> Result<(PackedTensor, MatrixReport)> {
    let packed = run(w, plan, Some(h), opts)?;
    let report = reconstruction_error(w, &packed, Some(h))?;
    Ok((packed, report))
}

/// Quantize every column independently, without compensation.
pub fn quantize_matrix_plain(
    w: &WeightMatrix,
    plan: &ColumnPlan,
    opts: &QuantOptions,
) -> Result<(PackedTensor, MatrixReport)> {
    let packed = run(w, plan, None, opts)?;
    let report = reconstruction_error(w, &packed, None)?;
    Ok((packed, report))
}

/// Quantize every matrix of a model under `alloc`. `hessians[i]` belongs to
/// `model.matrices[i]`; without Hessians the plain path is used.
pub fn quantize_model(
    model: &ModelWeights,
    alloc: &ModelAllocation,
    hessians: Option<&[HessianState]>,
    opts: &QuantOptions,
) -> Result<(Vec<PackedTensor>, QuantReport)> {
    if let Some(hs) = hessians {
        if hs.len() != model.matrices.len() {
            return Err(ClaqError::Shape(format!(
                "{} Hessians for {} matrices",
                hs.len(),
                model.matrices.len()
            )));
        }
    }
    let results = model
        .matrices
        .par_iter()
        .enumerate()
        .map(|(i, w)| {
            let plan = alloc.get(w.name()).ok_or_else(|| {
                ClaqError::Invalid(format!("allocation has no plan for {:?}", w.name()))
            })?;
            match hessians {
                Some(hs) => quantize_matrix(w, &plan.plan, &hs[i], opts),
                None => quantize_matrix_plain(w, &plan.plan, opts),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let norm = model
        .matrices
        .iter()
        .map(|m| m.frobenius_norm().powi(2))
        .sum::<f64>()
        .sqrt();
    let (packed, reports): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok((packed, QuantReport::aggregate(reports, norm)))
}
