//! Weight model, packed container types and size accounting.

pub mod bitpack;
mod container;
mod manifest;

use std::collections::BTreeMap;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{ClaqError, Result};

pub use container::{
    decode_packed, encode_packed, load_packed, save_packed, PackedLayout, PackedModel, MAGIC,
};
pub use manifest::{load_model, save_model, Dtype, ManifestEntry, ModelManifest};

/// Bits charged per stored codebook centroid (half precision).
pub const CODEBOOK_ENTRY_BITS: u64 = 16;
/// Bits charged per reserved outlier: 16-bit value plus 32-bit linear position.
pub const OUTLIER_BITS: u64 = 48;
/// Bits charged per column for its precision code.
pub const PRECISION_MAP_BITS_PER_COL: u64 = 2;

pub const SUPPORTED_BITS: [u8; 3] = [2, 3, 4];

pub fn check_bits(bits: u8) -> Result<()> {
    if SUPPORTED_BITS.contains(&bits) {
        Ok(())
    } else {
        Err(ClaqError::Invalid(format!(
            "bit-width {bits} not in {{2,3,4}}"
        )))
    }
}

/// Dense row-major weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl WeightMatrix {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if rows == 0 || cols == 0 {
            return Err(ClaqError::Shape(format!(
                "{name}: rows and cols must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(ClaqError::Shape(format!(
                "{name}: data length {} != {rows}x{cols}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ClaqError::NonFinite(name));
        }
        Ok(Self {
            name,
            rows,
            cols,
            data,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, col)).collect()
    }

    /// Column-major copy, one `Vec` per column.
    pub fn columns(&self) -> Vec<Vec<f64>> {
        (0..self.cols).map(|c| self.column(c)).collect()
    }

    pub fn from_columns(name: impl Into<String>, columns: &[Vec<f64>]) -> Result<Self> {
        let cols = columns.len();
        let rows = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != rows) {
            return Err(ClaqError::Shape("ragged columns".into()));
        }
        let mut data = vec![0.0; rows * cols];
        for (c, column) in columns.iter().enumerate() {
            for (r, &v) in column.iter().enumerate() {
                data[r * cols + c] = v;
            }
        }
        Self::new(name, rows, cols, data)
    }

    /// Same weights multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.name.clone(),
            self.rows,
            self.cols,
            self.data.iter().map(|v| v * factor).collect(),
        )
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Ordered collection of named matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelWeights {
    pub matrices: Vec<WeightMatrix>,
    pub metadata: BTreeMap<String, String>,
}

impl ModelWeights {
    pub fn new(matrices: Vec<WeightMatrix>, metadata: BTreeMap<String, String>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for m in &matrices {
            if !seen.insert(m.name()) {
                return Err(ClaqError::DuplicateName(m.name().to_string()));
            }
        }
        Ok(Self { matrices, metadata })
    }

    pub fn get(&self, name: &str) -> Option<&WeightMatrix> {
        self.matrices.iter().find(|m| m.name() == name)
    }

    pub fn param_count(&self) -> u64 {
        self.matrices.iter().map(|m| m.len() as u64).sum()
    }
}

/// A full-precision value kept outside the codebook.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outlier {
    pub row: u32,
    pub col: u32,
    pub value: f16,
}

impl Outlier {
    pub fn new(row: usize, col: usize, value: f16) -> Self {
        Self {
            row: row as u32,
            col: col as u32,
            value,
        }
    }
}

/// Codebooks, packed indices and sparse outlier overlay for one matrix.
///
/// Outliers are kept sorted by linear (row-major) position so two tensors
/// with the same content always serialize identically.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedTensor {
    name: String,
    rows: usize,
    cols: usize,
    precision_map: Vec<u8>,
    codebooks: Vec<Vec<f16>>,
    indices: Vec<u8>,
    column_offsets: Vec<usize>,
    outliers: Vec<Outlier>,
}

impl PackedTensor {
    /// Build from unpacked column-major indices (`indices[c * rows + r]`).
    pub fn new(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        precision_map: Vec<u8>,
        codebooks: Vec<Vec<f16>>,
        indices: &[u8],
        outliers: Vec<Outlier>,
    ) -> Result<Self> {
        let name = name.into();
        validate_header(&name, rows, cols, &precision_map, &codebooks)?;
        if indices.len() != rows * cols {
            return Err(ClaqError::Shape(format!(
                "{name}: {} indices for {rows}x{cols}",
                indices.len()
            )));
        }
        let mut writer = bitpack::BitWriter::with_capacity_bits(index_bits_for(rows, &precision_map) as usize);
        for (c, &bits) in precision_map.iter().enumerate() {
            for &q in &indices[c * rows..(c + 1) * rows] {
                if q >> bits != 0 {
                    return Err(ClaqError::IndexOutOfRange {
                        name,
                        col: c,
                        index: q,
                        bits,
                    });
                }
                writer.push(q, bits);
            }
        }
        Self::assemble(name, rows, cols, precision_map, codebooks, writer.finish(), outliers)
    }

    /// Build from an already packed index stream.
    pub fn from_packed(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        precision_map: Vec<u8>,
        codebooks: Vec<Vec<f16>>,
        packed_indices: Vec<u8>,
        outliers: Vec<Outlier>,
    ) -> Result<Self> {
        let name = name.into();
        validate_header(&name, rows, cols, &precision_map, &codebooks)?;
        let bits = index_bits_for(rows, &precision_map) as usize;
        if packed_indices.len() != bits.div_ceil(8) {
            return Err(ClaqError::Truncated(format!(
                "{name}: index stream has {} bytes, expected {}",
                packed_indices.len(),
                bits.div_ceil(8)
            )));
        }
        if !bits.is_multiple_of(8) {
            let tail = packed_indices[packed_indices.len() - 1] >> (bits % 8);
            if tail != 0 {
                return Err(ClaqError::Invalid(format!(
                    "{name}: nonzero padding bits after index stream"
                )));
            }
        }
        Self::assemble(name, rows, cols, precision_map, codebooks, packed_indices, outliers)
    }

    fn assemble(
        name: String,
        rows: usize,
        cols: usize,
        precision_map: Vec<u8>,
        codebooks: Vec<Vec<f16>>,
        indices: Vec<u8>,
        mut outliers: Vec<Outlier>,
    ) -> Result<Self> {
        outliers.sort_by_key(|o| o.row as u64 * cols as u64 + o.col as u64);
        for w in outliers.windows(2) {
            if (w[0].row, w[0].col) == (w[1].row, w[1].col) {
                return Err(ClaqError::Invalid(format!(
                    "{name}: duplicate outlier at ({}, {})",
                    w[0].row, w[0].col
                )));
            }
        }
        for o in &outliers {
            if o.row as usize >= rows || o.col as usize >= cols {
                return Err(ClaqError::Invalid(format!(
                    "{name}: outlier ({}, {}) out of bounds",
                    o.row, o.col
                )));
            }
            if !o.value.is_finite() {
                return Err(ClaqError::NonFinite(format!("{name} outlier")));
            }
        }
        let mut column_offsets = Vec::with_capacity(cols);
        let mut acc = 0usize;
        for &b in &precision_map {
            column_offsets.push(acc);
            acc += rows * b as usize;
        }
        Ok(Self {
            name,
            rows,
            cols,
            precision_map,
            codebooks,
            indices,
            column_offsets,
            outliers,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn precision_map(&self) -> &[u8] {
        &self.precision_map
    }

    pub fn codebooks(&self) -> &[Vec<f16>] {
        &self.codebooks
    }

    pub fn packed_indices(&self) -> &[u8] {
        &self.indices
    }

    pub fn outliers(&self) -> &[Outlier] {
        &self.outliers
    }

    pub fn param_count(&self) -> u64 {
        (self.rows * self.cols) as u64
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> u8 {
        let bits = self.precision_map[col];
        bitpack::read_bits(
            &self.indices,
            self.column_offsets[col] + row * bits as usize,
            bits,
        )
    }

    pub fn column_indices(&self, col: usize) -> Vec<u8> {
        (0..self.rows).map(|r| self.index(r, col)).collect()
    }

    pub fn index_bits(&self) -> u64 {
        index_bits_for(self.rows, &self.precision_map)
    }

    pub fn codebook_bits(&self) -> u64 {
        self.precision_map
            .iter()
            .map(|&b| (1u64 << b) * CODEBOOK_ENTRY_BITS)
            .sum()
    }
}

fn index_bits_for(rows: usize, precision_map: &[u8]) -> u64 {
    precision_map.iter().map(|&b| rows as u64 * b as u64).sum()
}

fn validate_header(
    name: &str,
    rows: usize,
    cols: usize,
    precision_map: &[u8],
    codebooks: &[Vec<f16>],
) -> Result<()> {
    if rows == 0 || cols == 0 {
        return Err(ClaqError::Shape(format!("{name}: empty shape {rows}x{cols}")));
    }
    if (rows as u64) * (cols as u64) > u32::MAX as u64 {
        return Err(ClaqError::Shape(format!(
            "{name}: {rows}x{cols} exceeds 32-bit position space"
        )));
    }
    if precision_map.len() != cols || codebooks.len() != cols {
        return Err(ClaqError::Shape(format!(
            "{name}: precision map / codebook count must equal cols ({cols})"
        )));
    }
    for (c, (&bits, book)) in precision_map.iter().zip(codebooks).enumerate() {
        check_bits(bits)?;
        if book.len() != 1usize << bits {
            return Err(ClaqError::Invalid(format!(
                "{name}: column {c} codebook has {} entries for {bits}-bit",
                book.len()
            )));
        }
        if book.iter().any(|v| !v.is_finite()) {
            return Err(ClaqError::NonFinite(format!("{name} codebook {c}")));
        }
        if book.windows(2).any(|w| w[0].to_f32() > w[1].to_f32()) {
            return Err(ClaqError::Invalid(format!(
                "{name}: column {c} codebook not ascending"
            )));
        }
    }
    Ok(())
}

/// Reconstruct weights: codebook lookup, then outliers override.
pub fn dequantize_tensor(t: &PackedTensor) -> WeightMatrix {
    let mut data = vec![0.0f64; t.rows * t.cols];
    for c in 0..t.cols {
        let book = &t.codebooks[c];
        for r in 0..t.rows {
            data[r * t.cols + c] = book[t.index(r, c) as usize].to_f64();
        }
    }
    for o in &t.outliers {
        data[o.row as usize * t.cols + o.col as usize] = o.value.to_f64();
    }
    WeightMatrix::new(t.name.clone(), t.rows, t.cols, data)
        .expect("validated packed tensor dequantizes to finite values")
}

/// Storage cost totals under the fixed cost model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub index_bits: u64,
    pub codebook_bits: u64,
    pub outlier_bits: u64,
    pub precision_map_bits: u64,
    pub param_count: u64,
    pub equivalent_bits_index_only: f64,
    pub equivalent_bits_total: f64,
    /// Index bits plus outlier bits per parameter (the "base + AP + OR" figure).
    pub equivalent_bits_attributed: f64,
}

impl SizeReport {
    pub fn from_totals(
        index_bits: u64,
        codebook_bits: u64,
        outlier_bits: u64,
        precision_map_bits: u64,
        param_count: u64,
    ) -> Self {
        let (index_only, total, attributed) = if param_count == 0 {
            (0.0, 0.0, 0.0)
        } else {
            let p = param_count as f64;
            (
                index_bits as f64 / p,
                (index_bits + codebook_bits + outlier_bits + precision_map_bits) as f64 / p,
                (index_bits + outlier_bits) as f64 / p,
            )
        };
        Self {
            index_bits,
            codebook_bits,
            outlier_bits,
            precision_map_bits,
            param_count,
            equivalent_bits_index_only: index_only,
            equivalent_bits_total: total,
            equivalent_bits_attributed: attributed,
        }
    }

    pub fn total_bits(&self) -> u64 {
        self.index_bits + self.codebook_bits + self.outlier_bits + self.precision_map_bits
    }

    /// Outlier bits per parameter.
    pub fn outlier_overhead(&self) -> f64 {
        if self.param_count == 0 {
            0.0
        } else {
            self.outlier_bits as f64 / self.param_count as f64
        }
    }
}

pub fn measure_size(tensors: &[PackedTensor]) -> SizeReport {
    let mut index_bits = 0;
    let mut codebook_bits = 0;
    let mut outlier_bits = 0;
    let mut pm_bits = 0;
    let mut params = 0;
    for t in tensors {
        index_bits += t.index_bits();
        codebook_bits += t.codebook_bits();
        outlier_bits += t.outliers.len() as u64 * OUTLIER_BITS;
        pm_bits += t.cols as u64 * PRECISION_MAP_BITS_PER_COL;
        params += t.param_count();
    }
    SizeReport::from_totals(index_bits, codebook_bits, outlier_bits, pm_bits, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn h(v: f32) -> f16 {
        f16::from_f32(v)
    }

    fn uniform_tensor(rows: usize, cols: usize, bits: u8) -> PackedTensor {
        let book: Vec<f16> = (0..1u32 << bits).map(|i| h(i as f32)).collect();
        PackedTensor::new(
            "t",
            rows,
            cols,
            vec![bits; cols],
            vec![book; cols],
            &vec![0; rows * cols],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn weight_matrix_rejects_bad_input() {
        assert!(WeightMatrix::new("a", 2, 2, vec![1.0; 3]).is_err());
        assert!(WeightMatrix::new("a", 0, 2, vec![]).is_err());
        assert!(matches!(
            WeightMatrix::new("a", 1, 2, vec![1.0, f64::NAN]),
            Err(ClaqError::NonFinite(_))
        ));
        assert!(WeightMatrix::new("a", 1, 1, vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn model_rejects_duplicate_names() {
        let a = WeightMatrix::new("a", 1, 1, vec![1.0]).unwrap();
        let err = ModelWeights::new(vec![a.clone(), a], BTreeMap::new()).unwrap_err();
        assert!(err.to_string().contains("duplicate name"));
    }

    #[test]
    fn all_zero_index_column_dequantizes_to_first_centroid() {
        let t = PackedTensor::new(
            "t",
            3,
            1,
            vec![2],
            vec![vec![h(-1.0), h(1.0), h(1.0), h(1.0)]],
            &[0, 0, 0],
            vec![],
        )
        .unwrap();
        assert_eq!(dequantize_tensor(&t).data(), &[-1.0, -1.0, -1.0]);
    }

    #[test]
    fn outlier_overrides_codebook_lookup() {
        let t = PackedTensor::new(
            "t",
            2,
            1,
            vec![2],
            vec![vec![h(0.0), h(1.0), h(2.0), h(3.0)]],
            &[1, 1],
            vec![Outlier::new(0, 0, h(7.5))],
        )
        .unwrap();
        assert_eq!(dequantize_tensor(&t).data(), &[7.5, 1.0]);
    }

    #[test]
    fn packed_tensor_validation() {
        let book = vec![h(0.0), h(1.0), h(2.0), h(3.0)];
        // index out of range for 2-bit
        assert!(matches!(
            PackedTensor::new("t", 1, 1, vec![2], vec![book.clone()], &[4], vec![]),
            Err(ClaqError::IndexOutOfRange { .. })
        ));
        // descending codebook
        let mut rev = book.clone();
        rev.reverse();
        assert!(PackedTensor::new("t", 1, 1, vec![2], vec![rev], &[0], vec![]).is_err());
        // wrong codebook length
        assert!(PackedTensor::new("t", 1, 1, vec![3], vec![book.clone()], &[0], vec![]).is_err());
        // duplicate and out-of-bounds outliers
        let dup = vec![Outlier::new(0, 0, h(1.0)), Outlier::new(0, 0, h(2.0))];
        assert!(PackedTensor::new("t", 1, 1, vec![2], vec![book.clone()], &[0], dup).is_err());
        let oob = vec![Outlier::new(1, 0, h(1.0))];
        assert!(PackedTensor::new("t", 1, 1, vec![2], vec![book], &[0], oob).is_err());
    }

    #[test]
    fn outliers_are_canonically_ordered() {
        let book = vec![h(0.0), h(1.0), h(2.0), h(3.0)];
        let a = PackedTensor::new(
            "t",
            2,
            2,
            vec![2, 2],
            vec![book.clone(), book.clone()],
            &[0; 4],
            vec![Outlier::new(1, 0, h(5.0)), Outlier::new(0, 1, h(6.0))],
        )
        .unwrap();
        let b = PackedTensor::new(
            "t",
            2,
            2,
            vec![2, 2],
            vec![book.clone(), book],
            &[0; 4],
            vec![Outlier::new(0, 1, h(6.0)), Outlier::new(1, 0, h(5.0))],
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.outliers()[0].col, 1);
    }

    #[test]
    fn uniform_two_bit_is_exactly_two_bits() {
        let r = measure_size(&[uniform_tensor(1024, 1024, 2)]);
        assert_eq!(r.equivalent_bits_index_only, 2.0);
        assert!(r.equivalent_bits_total >= r.equivalent_bits_index_only);
        assert_eq!(r.codebook_bits, 1024 * 4 * 16);
        assert_eq!(r.precision_map_bits, 2048);
    }

    #[test]
    fn ten_percent_four_bit_is_two_point_two() {
        let rows = 10;
        let cols = 1000;
        let mut pm = vec![2u8; cols];
        pm[..100].iter_mut().for_each(|b| *b = 4);
        let books = pm
            .iter()
            .map(|&b| (0..1u32 << b).map(|i| h(i as f32)).collect())
            .collect();
        let t = PackedTensor::new("t", rows, cols, pm, books, &vec![0; rows * cols], vec![])
            .unwrap();
        let r = measure_size(&[t]);
        assert!((r.equivalent_bits_index_only - 2.2).abs() < 1e-12);
    }

    #[test]
    fn five_percent_four_bit_plus_outliers_is_two_seventeen() {
        let n = 4096u64;
        let params = n * n;
        let four = (n as f64 * 0.05).round() as u64;
        let index_bits = n * (four * 4 + (n - four) * 2);
        let outliers = (0.07 * params as f64 / OUTLIER_BITS as f64).floor() as u64;
        let r = SizeReport::from_totals(index_bits, 0, outliers * OUTLIER_BITS, 0, params);
        assert!((r.equivalent_bits_index_only - 2.10).abs() < 0.001);
        assert!((r.outlier_overhead() - 0.07).abs() < 1e-4);
        assert!((r.equivalent_bits_attributed - 2.17).abs() < 0.002);
    }
}
