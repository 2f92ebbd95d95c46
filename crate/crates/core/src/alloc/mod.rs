//! Per-column precision and outlier-reservation planning.

mod fusion;
pub mod search;

use serde::{Deserialize, Serialize};

use crate::error::{ClaqError, Result};
use crate::outlier::{select_top, threshold_for_fraction, OutlierProfile, Selection};
use crate::tensor_store::{
    check_bits, SizeReport, CODEBOOK_ENTRY_BITS, OUTLIER_BITS, PRECISION_MAP_BITS_PER_COL,
};

pub use fusion::{
    equivalent_bits_of, plan_fusion, FusionSpec, MatrixPlan, MatrixProfile, ModelAllocation, Preset,
};
pub use search::{
    exhaustive_search, heuristic_search, Category, SearchConfig, SearchMatrix, SearchResult,
};

/// Candidate bit-widths `{high, low}` with `high > low`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitPair {
    pub high: u8,
    pub low: u8,
}

impl BitPair {
    pub fn new(high: u8, low: u8) -> Result<Self> {
        check_bits(high)?;
        check_bits(low)?;
        if high <= low {
            return Err(ClaqError::Invalid(format!(
                "bit pair needs high > low, got {{{high},{low}}}"
            )));
        }
        Ok(Self { high, low })
    }

    pub fn gap(&self) -> u8 {
        self.high - self.low
    }
}

/// Share of the outlier budget given to the top columns vs. the rest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrSplit {
    pub top: f64,
    pub rest: f64,
}

impl OrSplit {
    pub const SETTING_1: OrSplit = OrSplit { top: 0.19, rest: 0.81 };
    pub const SETTING_2: OrSplit = OrSplit { top: 0.28, rest: 0.72 };
    pub const SETTING_3: OrSplit = OrSplit { top: 0.37, rest: 0.63 };

    pub fn new(top: f64, rest: f64) -> Result<Self> {
        if !(top >= 0.0 && rest >= 0.0) || (top + rest - 1.0).abs() > 1e-9 {
            return Err(ClaqError::Invalid(format!(
                "outlier split must be non-negative and sum to 1, got ({top}, {rest})"
            )));
        }
        Ok(Self { top, rest })
    }

    pub fn setting(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Self::SETTING_1),
            2 => Ok(Self::SETTING_2),
            3 => Ok(Self::SETTING_3),
            _ => Err(ClaqError::Invalid(format!("no outlier split setting {n}"))),
        }
    }
}

impl Default for OrSplit {
    fn default() -> Self {
        Self::SETTING_2
    }
}

/// Column bit-widths from the Outlier Order: the top `fraction` of columns
/// get `pair.high`, the rest `pair.low`.
pub fn allocate_precision(
    profile: &OutlierProfile,
    pair: BitPair,
    fraction: f64,
) -> Result<(Vec<u8>, Selection)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(ClaqError::Invalid(format!(
            "high-precision fraction must be in [0, 1], got {fraction}"
        )));
    }
    let selection = if fraction == 0.0 {
        select_top(profile, 0)
    } else {
        threshold_for_fraction(profile, fraction)?
    };
    let mut bits = vec![pair.low; profile.cols()];
    for &c in &selection.columns {
        bits[c] = pair.high;
    }
    Ok((bits, selection))
}

/// Outlier reservation counts for one matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierBudget {
    /// `k_j`: the column keeps its `k_j` largest and `k_j` smallest values.
    pub pairs: Vec<usize>,
    /// Budgeted scalar count `N`.
    pub budget_scalars: usize,
    /// Pairs removed by the `2 k_j <= rows` clamp.
    pub clamped_pairs: usize,
    /// Ratio of the last column in the top group.
    pub threshold: f64,
}

impl OutlierBudget {
    pub fn reserved(&self) -> usize {
        2 * self.pairs.iter().sum::<usize>()
    }
}

/// Number of reservable scalars for a per-parameter bit budget.
pub fn outlier_scalars_for_budget(budget_bits_per_param: f64, params: u64) -> usize {
    let raw = budget_bits_per_param * params as f64 / OUTLIER_BITS as f64;
    (raw + 1e-9).floor().max(0.0) as usize
}

/// Spread `pairs` over `columns` (already in Outlier Order): every column
/// gets the even share, leftovers go to the earliest columns.
fn spread_pairs(pairs: usize, columns: &[usize], out: &mut [usize]) {
    if columns.is_empty() {
        return;
    }
    let base = pairs / columns.len();
    let extra = pairs % columns.len();
    for (i, &c) in columns.iter().enumerate() {
        out[c] = base + usize::from(i < extra);
    }
}

/// Split a per-parameter outlier budget between the top `top_fraction`
/// columns and the rest, in whole (largest, smallest) pairs.
pub fn allocate_outlier_budget(
    profile: &OutlierProfile,
    rows: usize,
    budget_bits_per_param: f64,
    split: OrSplit,
    top_fraction: f64,
) -> Result<OutlierBudget> {
    if !(budget_bits_per_param >= 0.0) || !budget_bits_per_param.is_finite() {
        return Err(ClaqError::Invalid(format!(
            "outlier budget must be >= 0, got {budget_bits_per_param}"
        )));
    }
    let split = OrSplit::new(split.top, split.rest)?;
    let cols = profile.cols();
    let top = threshold_for_fraction(profile, top_fraction)?;
    let n = outlier_scalars_for_budget(budget_bits_per_param, (rows * cols) as u64);

    let mut pairs = vec![0usize; cols];
    let rest_cols: Vec<usize> = profile.order[top.columns.len()..].to_vec();
    let n_top = (split.top * n as f64).round() as usize;
    let n_rest = n - n_top.min(n);
    if rest_cols.is_empty() {
        // every column is in the top group
        spread_pairs(n / 2, &top.columns, &mut pairs);
    } else {
        spread_pairs(n_top / 2, &top.columns, &mut pairs);
        spread_pairs(n_rest / 2, &rest_cols, &mut pairs);
    }

    let cap = rows / 2;
    let mut clamped = 0;
    for p in pairs.iter_mut() {
        if *p > cap {
            clamped += *p - cap;
            *p = cap;
        }
    }
    if clamped > 0 {
        log::warn!(
            "outlier budget exceeds column height; clamped {clamped} pairs to {cap} per column"
        );
    }
    Ok(OutlierBudget {
        pairs,
        budget_scalars: n,
        clamped_pairs: clamped,
        threshold: top.threshold,
    })
}

/// Per-column bit-widths and reservation pairs for one matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ColumnPlanJson", try_from = "ColumnPlanJson")]
pub struct ColumnPlan {
    pub bits: Vec<u8>,
    pub reserve_pairs: Vec<usize>,
    pub t_ap: Option<f64>,
    pub t_or: Option<f64>,
}

impl ColumnPlan {
    pub fn uniform(cols: usize, bits: u8) -> Self {
        Self {
            bits: vec![bits; cols],
            reserve_pairs: vec![0; cols],
            t_ap: None,
            t_or: None,
        }
    }

    pub fn cols(&self) -> usize {
        self.bits.len()
    }

    pub fn reserved(&self) -> usize {
        2 * self.reserve_pairs.iter().sum::<usize>()
    }

    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        if self.bits.len() != cols || self.reserve_pairs.len() != cols {
            return Err(ClaqError::Shape(format!(
                "plan covers {} / {} columns, matrix has {cols}",
                self.bits.len(),
                self.reserve_pairs.len()
            )));
        }
        for &b in &self.bits {
            check_bits(b)?;
        }
        if let Some(c) = self.reserve_pairs.iter().position(|&k| 2 * k > rows) {
            return Err(ClaqError::Shape(format!(
                "column {c} reserves {} of {rows} rows",
                2 * self.reserve_pairs[c]
            )));
        }
        Ok(())
    }

    /// Storage cost of a matrix quantized with this plan.
    pub fn size(&self, rows: usize) -> SizeReport {
        let index_bits = self.bits.iter().map(|&b| rows as u64 * b as u64).sum();
        let codebook_bits = self
            .bits
            .iter()
            .map(|&b| (1u64 << b) * CODEBOOK_ENTRY_BITS)
            .sum();
        SizeReport::from_totals(
            index_bits,
            codebook_bits,
            self.reserved() as u64 * OUTLIER_BITS,
            self.cols() as u64 * PRECISION_MAP_BITS_PER_COL,
            (rows * self.cols()) as u64,
        )
    }

    pub fn histogram(&self) -> [usize; 3] {
        let mut h = [0; 3];
        for &b in &self.bits {
            h[(b - 2) as usize] += 1;
        }
        h
    }
}

/// Run-length encoding as `[value, run]` pairs.
pub fn rle<T: Copy + PartialEq>(values: &[T]) -> Vec<(T, usize)> {
    let mut out: Vec<(T, usize)> = Vec::new();
    for &v in values {
        match out.last_mut() {
            Some((last, n)) if *last == v => *n += 1,
            _ => out.push((v, 1)),
        }
    }
    out
}

pub fn unrle<T: Copy>(runs: &[(T, usize)]) -> Vec<T> {
    runs.iter()
        .flat_map(|&(v, n)| std::iter::repeat_n(v, n))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ColumnPlanJson {
    bits_rle: Vec<(u8, usize)>,
    reserve_pairs_rle: Vec<(usize, usize)>,
    t_ap: Option<f64>,
    t_or: Option<f64>,
}

impl From<ColumnPlan> for ColumnPlanJson {
    fn from(p: ColumnPlan) -> Self {
        Self {
            bits_rle: rle(&p.bits),
            reserve_pairs_rle: rle(&p.reserve_pairs),
            t_ap: p.t_ap,
            t_or: p.t_or,
        }
    }
}

impl TryFrom<ColumnPlanJson> for ColumnPlan {
    type Error = String;

    fn try_from(j: ColumnPlanJson) -> std::result::Result<Self, String> {
        let bits = unrle(&j.bits_rle);
        let reserve_pairs = unrle(&j.reserve_pairs_rle);
        if bits.len() != reserve_pairs.len() {
            return Err("bits and reserve_pairs cover different column counts".into());
        }
        Ok(Self {
            bits,
            reserve_pairs,
            t_ap: j.t_ap,
            t_or: j.t_or,
        })
    }
}

/// Column plan for one matrix from AP and OR settings.
pub fn plan_columns(
    profile: &OutlierProfile,
    rows: usize,
    pair: BitPair,
    high_fraction: f64,
    or_budget: f64,
    split: OrSplit,
    top_fraction: f64,
) -> Result<ColumnPlan> {
    let (bits, sel) = allocate_precision(profile, pair, high_fraction)?;
    let (reserve_pairs, t_or) = if or_budget > 0.0 {
        let b = allocate_outlier_budget(profile, rows, or_budget, split, top_fraction)?;
        (b.pairs, Some(b.threshold))
    } else {
        (vec![0; profile.cols()], None)
    };
    Ok(ColumnPlan {
        bits,
        reserve_pairs,
        t_ap: (!sel.columns.is_empty()).then_some(sel.threshold),
        t_or,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Profile with distinct descending counts so the Outlier Order is 0, 1, 2, ...
    fn ranked_profile(cols: usize, rows: usize) -> OutlierProfile {
        let counts: Vec<usize> = (0..cols).map(|c| cols - c).collect();
        OutlierProfile {
            ratios: counts.iter().map(|&c| c as f64 / rows as f64).collect(),
            counts,
            rows,
            scale: 13.0,
            matrix_mean_abs: 1.0,
            order: (0..cols).collect(),
        }
    }

    #[test]
    fn ten_percent_at_four_bit() {
        let p = ranked_profile(1000, 2000);
        let pair = BitPair::new(4, 2).unwrap();
        let (bits, sel) = allocate_precision(&p, pair, 0.10).unwrap();
        assert_eq!(bits.iter().filter(|&&b| b == 4).count(), 100);
        assert_eq!(bits.iter().filter(|&&b| b == 2).count(), 900);
        assert_eq!(sel.columns, (0..100).collect::<Vec<_>>());
        let plan = ColumnPlan {
            bits,
            reserve_pairs: vec![0; 1000],
            t_ap: Some(sel.threshold),
            t_or: None,
        };
        assert!((plan.size(16).equivalent_bits_index_only - 2.2).abs() < 1e-12);

        let (bits, _) = allocate_precision(&p, pair, 0.05).unwrap();
        let plan = ColumnPlan { bits, ..ColumnPlan::uniform(1000, 2) };
        assert!((plan.size(16).equivalent_bits_index_only - 2.1).abs() < 1e-12);
    }

    #[test]
    fn fraction_boundaries() {
        let p = ranked_profile(10, 10);
        let pair = BitPair::new(3, 2).unwrap();
        assert_eq!(allocate_precision(&p, pair, 0.0).unwrap().0, vec![2; 10]);
        assert_eq!(allocate_precision(&p, pair, 1.0).unwrap().0, vec![3; 10]);
        assert!(allocate_precision(&p, pair, 1.1).is_err());
    }

    #[test]
    fn invalid_bit_pairs() {
        assert!(BitPair::new(2, 4).is_err());
        assert!(BitPair::new(3, 3).is_err());
        assert!(BitPair::new(8, 2).is_err());
        assert!(BitPair::new(4, 3).is_ok());
    }

    #[test]
    fn zero_budget_reserves_nothing() {
        let p = ranked_profile(10, 100);
        let b = allocate_outlier_budget(&p, 100, 0.0, OrSplit::SETTING_2, 0.1).unwrap();
        assert!(b.pairs.iter().all(|&k| k == 0));
        assert_eq!(b.budget_scalars, 0);
    }

    #[test]
    fn setting_two_split_by_hand() {
        // 10 columns x 100 rows; 0.192 bits/param -> N = floor(0.192*1000/48) = 4 ... scale up
        // budget giving N = 40: 40 * 48 / 1000 = 1.92 bits/param
        let p = ranked_profile(10, 100);
        let b = allocate_outlier_budget(&p, 100, 1.92, OrSplit::SETTING_2, 0.1).unwrap();
        assert_eq!(b.budget_scalars, 40);
        // top: round(0.28 * 40) = 11 -> 5 pairs -> 10 scalars in column 0
        // rest: 29 -> 14 pairs over 9 columns -> 1 each, the 5 highest-ratio get 2
        let reserved: Vec<usize> = b.pairs.iter().map(|k| 2 * k).collect();
        assert_eq!(reserved, vec![10, 4, 4, 4, 4, 4, 2, 2, 2, 2]);
        assert_eq!(b.reserved(), 38);
        assert!(b.reserved() <= 40);
    }

    #[test]
    fn paper_scale_budget_count() {
        assert_eq!(outlier_scalars_for_budget(0.07, 4096 * 4096), 24_466);
    }

    #[test]
    fn reservation_is_clamped_to_rows() {
        let p = ranked_profile(4, 6);
        // N = floor(20 * 24 / 48) = 10 scalars; top column would get 5 pairs... with 6 rows cap is 3
        let b = allocate_outlier_budget(&p, 6, 20.0, OrSplit::new(1.0, 0.0).unwrap(), 0.25).unwrap();
        assert!(b.pairs.iter().all(|&k| 2 * k <= 6));
        assert_eq!(b.pairs[0], 3);
        assert_eq!(b.clamped_pairs, 2);
    }

    #[test]
    fn split_must_sum_to_one() {
        assert!(OrSplit::new(0.5, 0.6).is_err());
        assert!(OrSplit::setting(4).is_err());
        assert_eq!(OrSplit::setting(3).unwrap(), OrSplit::SETTING_3);
    }

    #[test]
    fn plan_json_is_run_length_encoded() {
        let plan = ColumnPlan {
            bits: vec![4, 4, 2, 2, 2],
            reserve_pairs: vec![3, 1, 1, 1, 0],
            t_ap: Some(0.5),
            t_or: None,
        };
        let json = serde_json::to_string(&plan).unwrap();
        assert_eq!(
            json,
            r#"{"bits_rle":[[4,2],[2,3]],"reserve_pairs_rle":[[3,1],[1,3],[0,1]],"t_ap":0.5,"t_or":null}"#
        );
        let back: ColumnPlan = serde_json::from_str(&json).unwrap();
        assert_eq!(back, plan);
    }
}
