use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{plan_columns, BitPair, ColumnPlan, OrSplit};
use crate::error::{ClaqError, Result};
use crate::outlier::{outlier_ratio, OutlierProfile, DEFAULT_SCALE, TOP_DECILE};
use crate::tensor_store::{check_bits, ModelWeights, SizeReport};

/// Slack allowed on the achieved index-only bit increment.
const INCREMENT_SLACK: f64 = 0.005;

/// Named AP+OR configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "2.12")]
    P212,
    #[serde(rename = "2.24")]
    P224,
    #[serde(rename = "3.12")]
    P312,
    #[serde(rename = "3.23")]
    P323,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::P212, Preset::P224, Preset::P312, Preset::P323];

    pub fn label(self) -> &'static str {
        match self {
            Preset::P212 => "2.12",
            Preset::P224 => "2.24",
            Preset::P312 => "3.12",
            Preset::P323 => "3.23",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.label() == s)
            .ok_or_else(|| ClaqError::Invalid(format!("unknown preset {s:?}")))
    }

    pub fn spec(self) -> FusionSpec {
        let (base, increment, budget) = match self {
            Preset::P212 => (2, 0.05, 0.07),
            Preset::P224 => (2, 0.10, 0.13),
            Preset::P312 => (3, 0.05, 0.07),
            Preset::P323 => (3, 0.10, 0.13),
        };
        FusionSpec {
            base_bits: base,
            high_bits: 4,
            ap_increment: increment,
            or_budget: budget,
            split: OrSplit::SETTING_2,
            top_fraction: TOP_DECILE,
            scale: DEFAULT_SCALE,
        }
    }
}

/// AP increment (bits/param spent on wider columns) plus OR budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionSpec {
    pub base_bits: u8,
    pub high_bits: u8,
    pub ap_increment: f64,
    pub or_budget: f64,
    pub split: OrSplit,
    pub top_fraction: f64,
    pub scale: f64,
}

impl FusionSpec {
    /// `(base_bits, ap_increment, or_budget)` with 4-bit high columns and default split.
    pub fn custom(base_bits: u8, ap_increment: f64, or_budget: f64) -> Self {
        Self {
            base_bits,
            high_bits: 4,
            ap_increment,
            or_budget,
            split: OrSplit::SETTING_2,
            top_fraction: TOP_DECILE,
            scale: DEFAULT_SCALE,
        }
    }

    /// Fraction of columns that take the high bit-width.
    pub fn high_fraction(&self) -> f64 {
        if self.ap_increment == 0.0 {
            0.0
        } else {
            self.ap_increment / (self.high_bits - self.base_bits) as f64
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.base_bits)?;
        if !(self.ap_increment >= 0.0 && self.ap_increment.is_finite()) {
            return Err(ClaqError::Invalid(format!(
                "AP increment must be >= 0, got {}",
                self.ap_increment
            )));
        }
        if !(self.or_budget >= 0.0 && self.or_budget.is_finite()) {
            return Err(ClaqError::Invalid(format!(
                "OR budget must be >= 0, got {}",
                self.or_budget
            )));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(ClaqError::Invalid(format!("scale must be > 0, got {}", self.scale)));
        }
        if !(self.top_fraction > 0.0 && self.top_fraction <= 1.0) {
            return Err(ClaqError::Invalid(format!(
                "top fraction must be in (0, 1], got {}",
                self.top_fraction
            )));
        }
        OrSplit::new(self.split.top, self.split.rest)?;
        if self.ap_increment > 0.0 {
            BitPair::new(self.high_bits, self.base_bits)?;
            let gap = (self.high_bits - self.base_bits) as f64;
            if self.ap_increment > gap + 1e-12 {
                return Err(ClaqError::Infeasible(format!(
                    "AP increment {} exceeds the {}-bit gap between {} and {} bits",
                    self.ap_increment, gap, self.high_bits, self.base_bits
                )));
            }
        }
        Ok(())
    }

    fn pair(&self) -> BitPair {
        if self.high_bits > self.base_bits {
            BitPair { high: self.high_bits, low: self.base_bits }
        } else {
            BitPair { high: self.base_bits + 1, low: self.base_bits }
        }
    }
}

/// Outlier profile of one named matrix.
#[derive(Debug, Clone)]
pub struct MatrixProfile {
    pub name: String,
    pub rows: usize,
    pub profile: OutlierProfile,
}

impl MatrixProfile {
    pub fn of_model(model: &ModelWeights, scale: f64) -> Result<Vec<MatrixProfile>> {
        model
            .matrices
            .par_iter()
            .map(|m| {
                Ok(MatrixProfile {
                    name: m.name().to_string(),
                    rows: m.rows(),
                    profile: outlier_ratio(m, scale)?,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixPlan {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub plan: ColumnPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelAllocation {
    pub spec: FusionSpec,
    /// Column fraction implied by the AP increment before per-matrix rounding.
    pub high_fraction: f64,
    pub matrices: Vec<MatrixPlan>,
    pub achieved_index_only: f64,
    pub achieved_total: f64,
    pub achieved_attributed: f64,
}

impl ModelAllocation {
    pub fn get(&self, name: &str) -> Option<&MatrixPlan> {
        self.matrices.iter().find(|m| m.name == name)
    }
}

/// Number of high-precision columns for one matrix: nearest to the target
/// fraction, stepped down while the increment overshoots the slack.
fn high_column_count(spec: &FusionSpec, cols: usize) -> usize {
    if spec.ap_increment == 0.0 || cols == 0 {
        return 0;
    }
    let gap = (spec.high_bits - spec.base_bits) as f64;
    let mut n = ((spec.high_fraction() * cols as f64).round() as usize).min(cols);
    while n > 0 && gap * n as f64 / cols as f64 > spec.ap_increment + INCREMENT_SLACK {
        n -= 1;
    }
    n
}

/// Column plans for every matrix under one AP+OR configuration.
pub fn plan_fusion(profiles: &[MatrixProfile], spec: FusionSpec) -> Result<ModelAllocation> {
    spec.validate()?;
    let pair = spec.pair();
    let matrices = profiles
        .par_iter()
        .map(|m| {
            let cols = m.profile.cols();
            let n_high = high_column_count(&spec, cols);
            let fraction = n_high as f64 / cols.max(1) as f64;
            let plan = plan_columns(
                &m.profile,
                m.rows,
                pair,
                fraction,
                spec.or_budget,
                spec.split,
                spec.top_fraction,
            )?;
            Ok(MatrixPlan {
                name: m.name.clone(),
                rows: m.rows,
                cols,
                plan,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut alloc = ModelAllocation {
        spec,
        high_fraction: spec.high_fraction(),
        matrices,
        achieved_index_only: 0.0,
        achieved_total: 0.0,
        achieved_attributed: 0.0,
    };
    let size = equivalent_bits_of(&alloc);
    alloc.achieved_index_only = size.equivalent_bits_index_only;
    alloc.achieved_total = size.equivalent_bits_total;
    alloc.achieved_attributed = size.equivalent_bits_attributed;
    Ok(alloc)
}

/// Storage cost of the model an allocation would produce.
pub fn equivalent_bits_of(alloc: &ModelAllocation) -> SizeReport {
    let mut t = [0u64; 5];
    for m in &alloc.matrices {
        let s = m.plan.size(m.rows);
        t[0] += s.index_bits;
        t[1] += s.codebook_bits;
        t[2] += s.outlier_bits;
        t[3] += s.precision_map_bits;
        t[4] += s.param_count;
    }
    SizeReport::from_totals(t[0], t[1], t[2], t[3], t[4])
}
