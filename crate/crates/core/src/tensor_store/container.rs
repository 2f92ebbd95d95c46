//! `CLAQPK01` packed container.
//!
//! Layout:
//!
//! | bytes              | content                                        |
//! |--------------------|------------------------------------------------|
//! | 0..8               | magic `CLAQPK01`                               |
//! | 8..12              | manifest length `n`, u32 little-endian         |
//! | 12..12+n           | JSON manifest                                  |
//! | zero padding       | up to the next multiple of 8                   |
//! | data section       | per tensor: codebook, index, outlier blobs     |
//!
//! Every blob starts at an 8-byte aligned offset (relative to the data
//! section, which is itself aligned); gaps are zero-filled. The file ends
//! with the last blob, no trailing padding.
//!
//! * codebook blob: per column in order, `2^b` f16 values, little-endian.
//! * index blob: LSB-first packed indices, column after column, `rows * b`
//!   bits per column with no inter-column padding.
//! * outlier blob: per outlier in row-major position order, the linear
//!   position `row * cols + col` as u32 LE followed by the f16 value LE.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use half::f16;
use serde::{Deserialize, Serialize};

use super::{Outlier, PackedTensor};
use crate::error::{ClaqError, Result};

pub const MAGIC: &[u8; 8] = b"CLAQPK01";
const MAGIC_FAMILY: &[u8; 6] = b"CLAQPK";
const HEADER_LEN: usize = 12;
const OUTLIER_RECORD_BYTES: usize = 6;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PackedModel {
    pub tensors: Vec<PackedTensor>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct BlobRef {
    offset: u64,
    len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    precision_map: Vec<u8>,
    outlier_count: usize,
    index_bits: u64,
    codebook: BlobRef,
    indices: BlobRef,
    outliers: BlobRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ContainerManifest {
    format: String,
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

/// Byte accounting of an encoded container.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PackedLayout {
    pub manifest_len: usize,
    /// Offset of the data section (header + manifest + alignment).
    pub data_start: usize,
    /// Bytes occupied by blobs, excluding alignment gaps.
    pub blob_bytes: usize,
    /// Zero bytes inserted between blobs for alignment.
    pub padding_bytes: usize,
    /// Unused bits in the final byte of each index blob, summed.
    pub index_tail_bits: u64,
    /// Precision-map entries recorded in the manifest.
    pub precision_map_entries: usize,
    pub file_len: usize,
}

fn align8(n: usize) -> usize {
    n.div_ceil(8) * 8
}

struct Blobs {
    codebook: Vec<u8>,
    indices: Vec<u8>,
    outliers: Vec<u8>,
}

fn blobs_of(t: &PackedTensor) -> Blobs {
    let mut codebook = Vec::with_capacity(t.codebook_bits() as usize / 8);
    for book in t.codebooks() {
        for v in book {
            codebook.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut outliers = Vec::with_capacity(t.outliers().len() * OUTLIER_RECORD_BYTES);
    for o in t.outliers() {
        let pos = o.row * t.cols() as u32 + o.col;
        outliers.extend_from_slice(&pos.to_le_bytes());
        outliers.extend_from_slice(&o.value.to_le_bytes());
    }
    Blobs {
        codebook,
        indices: t.packed_indices().to_vec(),
        outliers,
    }
}

/// Canonical offsets for a sequence of blob lengths.
fn place(cursor: &mut usize, len: usize) -> BlobRef {
    let offset = align8(*cursor);
    *cursor = offset + len;
    BlobRef {
        offset: offset as u64,
        len: len as u64,
    }
}

pub fn encode_packed(model: &PackedModel) -> Result<Vec<u8>> {
    let mut cursor = 0usize;
    let mut entries = Vec::with_capacity(model.tensors.len());
    let mut all_blobs = Vec::with_capacity(model.tensors.len());
    for t in &model.tensors {
        let blobs = blobs_of(t);
        entries.push(TensorEntry {
            name: t.name().to_string(),
            rows: t.rows(),
            cols: t.cols(),
            precision_map: t.precision_map().to_vec(),
            outlier_count: t.outliers().len(),
            index_bits: t.index_bits(),
            codebook: place(&mut cursor, blobs.codebook.len()),
            indices: place(&mut cursor, blobs.indices.len()),
            outliers: place(&mut cursor, blobs.outliers.len()),
        });
        all_blobs.push(blobs);
    }
    let manifest = ContainerManifest {
        format: String::from_utf8_lossy(MAGIC).into_owned(),
        metadata: model.metadata.clone(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&manifest)?;
    let manifest_len = u32::try_from(json.len())
        .map_err(|_| ClaqError::Invalid("manifest exceeds 4 GiB".into()))?;

    let data_start = align8(HEADER_LEN + json.len());
    let mut out = Vec::with_capacity(data_start + cursor);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&manifest_len.to_le_bytes());
    out.extend_from_slice(&json);
    out.resize(data_start, 0);
    for (entry, blobs) in manifest.tensors.iter().zip(&all_blobs) {
        for (r, bytes) in [
            (entry.codebook, &blobs.codebook),
            (entry.indices, &blobs.indices),
            (entry.outliers, &blobs.outliers),
        ] {
            out.resize(data_start + r.offset as usize, 0);
            out.extend_from_slice(bytes);
        }
    }
    Ok(out)
}

fn parse_manifest(bytes: &[u8]) -> Result<(ContainerManifest, usize, usize)> {
    if bytes.len() < 8 {
        return Err(ClaqError::Truncated("shorter than magic".into()));
    }
    if &bytes[..8] != MAGIC {
        if &bytes[..6] == MAGIC_FAMILY {
            return Err(ClaqError::UnsupportedVersion(
                String::from_utf8_lossy(&bytes[..8]).into_owned(),
            ));
        }
        return Err(ClaqError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(ClaqError::Truncated("missing manifest length".into()));
    }
    let manifest_len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let manifest_end = HEADER_LEN + manifest_len;
    if bytes.len() < manifest_end {
        return Err(ClaqError::Truncated("manifest runs past end of file".into()));
    }
    let manifest: ContainerManifest = serde_json::from_slice(&bytes[HEADER_LEN..manifest_end])?;
    if manifest.format.as_bytes() != MAGIC {
        return Err(ClaqError::UnsupportedVersion(manifest.format));
    }
    Ok((manifest, manifest_len, align8(manifest_end)))
}

/// Expected blob lengths for a manifest entry, checked against the refs.
fn check_entry(e: &TensorEntry, cursor: &mut usize) -> Result<()> {
    let codebook_len: usize = e.precision_map.iter().map(|&b| (1usize << b.min(8)) * 2).sum();
    let index_bits: u64 = e.precision_map.iter().map(|&b| e.rows as u64 * b as u64).sum();
    if index_bits != e.index_bits {
        return Err(ClaqError::Invalid(format!(
            "{}: index_bits {} disagrees with precision map ({index_bits})",
            e.name, e.index_bits
        )));
    }
    let expected = [
        place(cursor, codebook_len),
        place(cursor, (index_bits as usize).div_ceil(8)),
        place(cursor, e.outlier_count * OUTLIER_RECORD_BYTES),
    ];
    let found = [e.codebook, e.indices, e.outliers];
    if expected != found {
        return Err(ClaqError::Invalid(format!(
            "{}: blob offsets do not match canonical layout",
            e.name
        )));
    }
    Ok(())
}

pub fn decode_packed(bytes: &[u8]) -> Result<PackedModel> {
    let (manifest, _, data_start) = parse_manifest(bytes)?;
    let mut cursor = 0usize;
    for e in &manifest.tensors {
        check_entry(e, &mut cursor)?;
    }
    let end = data_start + cursor;
    if bytes.len() < end {
        return Err(ClaqError::Truncated(format!(
            "expected {end} bytes, found {}",
            bytes.len()
        )));
    }
    if bytes.len() > end {
        return Err(ClaqError::Invalid(format!(
            "{} trailing bytes after last blob",
            bytes.len() - end
        )));
    }
    let manifest_end = HEADER_LEN
        + u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    if bytes[manifest_end..data_start].iter().any(|&b| b != 0) {
        return Err(ClaqError::Invalid("nonzero manifest padding".into()));
    }

    let data = &bytes[data_start..];
    let slice = |r: BlobRef| &data[r.offset as usize..(r.offset + r.len) as usize];
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    let mut gap_start = 0usize;
    for e in &manifest.tensors {
        for r in [e.codebook, e.indices, e.outliers] {
            if data[gap_start..r.offset as usize].iter().any(|&b| b != 0) {
                return Err(ClaqError::Invalid(format!("{}: nonzero blob padding", e.name)));
            }
            gap_start = (r.offset + r.len) as usize;
        }

        let mut values = slice(e.codebook)
            .chunks_exact(2)
            .map(|c| f16::from_le_bytes([c[0], c[1]]));
        let codebooks: Vec<Vec<f16>> = e
            .precision_map
            .iter()
            .map(|&b| values.by_ref().take(1usize << b.min(8)).collect())
            .collect();

        let total = (e.rows as u64) * (e.cols as u64);
        let mut outliers = Vec::with_capacity(e.outlier_count);
        for rec in slice(e.outliers).chunks_exact(OUTLIER_RECORD_BYTES) {
            let pos = u32::from_le_bytes([rec[0], rec[1], rec[2], rec[3]]) as u64;
            if pos >= total {
                return Err(ClaqError::Invalid(format!(
                    "{}: outlier position {pos} out of bounds",
                    e.name
                )));
            }
            let cols = e.cols as u64;
            outliers.push(Outlier {
                row: (pos / cols) as u32,
                col: (pos % cols) as u32,
                value: f16::from_le_bytes([rec[4], rec[5]]),
            });
        }
        if outliers
            .windows(2)
            .any(|w| (w[0].row, w[0].col) >= (w[1].row, w[1].col))
        {
            return Err(ClaqError::Invalid(format!(
                "{}: outliers not in ascending position order",
                e.name
            )));
        }
        tensors.push(PackedTensor::from_packed(
            e.name.clone(),
            e.rows,
            e.cols,
            e.precision_map.clone(),
            codebooks,
            slice(e.indices).to_vec(),
            outliers,
        )?);
    }
    let mut seen = std::collections::HashSet::new();
    for t in &tensors {
        if !seen.insert(t.name()) {
            return Err(ClaqError::DuplicateName(t.name().to_string()));
        }
    }
    Ok(PackedModel {
        tensors,
        metadata: manifest.metadata,
    })
}

impl PackedLayout {
    /// Inspect an encoded container without materializing tensors.
    pub fn of(bytes: &[u8]) -> Result<Self> {
        let (manifest, manifest_len, data_start) = parse_manifest(bytes)?;
        let mut cursor = 0usize;
        let mut blob_bytes = 0usize;
        let mut index_tail_bits = 0u64;
        let mut precision_map_entries = 0usize;
        for e in &manifest.tensors {
            check_entry(e, &mut cursor)?;
            blob_bytes += (e.codebook.len + e.indices.len + e.outliers.len) as usize;
            index_tail_bits += e.indices.len * 8 - e.index_bits;
            precision_map_entries += e.precision_map.len();
        }
        Ok(Self {
            manifest_len,
            data_start,
            blob_bytes,
            padding_bytes: cursor - blob_bytes,
            index_tail_bits,
            precision_map_entries,
            file_len: bytes.len(),
        })
    }
}

pub fn save_packed(path: impl AsRef<Path>, model: &PackedModel) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_packed(model)?;
    fs::write(path, bytes).map_err(|e| ClaqError::io(path, e))
}

pub fn load_packed(path: impl AsRef<Path>) -> Result<PackedModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| ClaqError::io(path, e))?;
    decode_packed(&bytes)
}
