//! Model-level search over which matrices take a 2&4 or 2&3 column mix.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ClaqError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchMatrix {
    pub name: String,
    pub params: u64,
    /// Matrix-level outlier ratio.
    pub outlier_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "2")]
    TwoBit,
    #[serde(rename = "2&3")]
    Mix23,
    #[serde(rename = "2&4")]
    Mix24,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub ps3: f64,
    pub ps4: f64,
    pub p3_grid: Vec<f64>,
    pub p4_grid: Vec<f64>,
    /// `None` means every prefix count.
    pub m3_grid: Option<Vec<usize>>,
    pub m4_grid: Option<Vec<usize>>,
    /// Average bits per parameter the model may use.
    pub target_bits: f64,
}

impl SearchConfig {
    pub fn default_grid() -> Vec<f64> {
        (1..=12).map(|i| i as f64 / 20.0).collect()
    }

    pub fn new(target_bits: f64) -> Self {
        Self {
            ps3: 3.0,
            ps4: 4.0,
            p3_grid: Self::default_grid(),
            p4_grid: Self::default_grid(),
            m3_grid: None,
            m4_grid: None,
            target_bits,
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        for (name, grid) in [("p3", &self.p3_grid), ("p4", &self.p4_grid)] {
            if grid.is_empty() {
                return Err(ClaqError::Invalid(format!("{name} grid is empty")));
            }
            if let Some(p) = grid.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
                return Err(ClaqError::Invalid(format!("{name} grid value {p} outside (0, 1]")));
            }
        }
        for (name, grid) in [("M3", &self.m3_grid), ("M4", &self.m4_grid)] {
            if let Some(g) = grid {
                if g.is_empty() {
                    return Err(ClaqError::Invalid(format!("{name} grid is empty")));
                }
                if let Some(m) = g.iter().find(|&&m| m > n) {
                    return Err(ClaqError::Invalid(format!(
                        "{name} grid value {m} exceeds {n} matrices"
                    )));
                }
            }
        }
        if !self.target_bits.is_finite() {
            return Err(ClaqError::Invalid("target bits must be finite".into()));
        }
        Ok(())
    }

    fn m_values(grid: &Option<Vec<usize>>, max: usize) -> Vec<usize> {
        match grid {
            Some(g) => {
                let mut v: Vec<usize> = g.iter().copied().filter(|&m| m <= max).collect();
                v.sort_unstable();
                v.dedup();
                v
            }
            None => (0..=max).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub m3: usize,
    pub m4: usize,
    pub p3: f64,
    pub p4: f64,
    pub or3: f64,
    pub or4: f64,
    pub ps_total: f64,
    pub achieved_bits: f64,
    /// Matrix names in ranked order (descending outlier ratio).
    pub ranking: Vec<String>,
    /// Category per matrix, in input order.
    pub categories: Vec<(String, Category)>,
}

#[allow(clippy::too_many_arguments)]
pub fn ps_total(or4: f64, ps4: f64, p4: f64, m4: usize, or3: f64, ps3: f64, p3: f64, m3: usize) -> f64 {
    or4 * ps4 * p4 * m4 as f64 + or3 * ps3 * p3 * m3 as f64
}

/// Extra index bits over the 2-bit baseline.
fn extra_bits(p4: f64, params4: u64, p3: f64, params3: u64) -> f64 {
    2.0 * p4 * params4 as f64 + p3 * params3 as f64
}

fn fits(extra: f64, allowance: f64) -> bool {
    extra <= allowance + 1e-9 * allowance.abs().max(1.0)
}

/// Descending outlier ratio; ties by input position.
pub fn rank(matrices: &[SearchMatrix]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..matrices.len()).collect();
    order.sort_by(|&a, &b| {
        matrices[b]
            .outlier_ratio
            .total_cmp(&matrices[a].outlier_ratio)
            .then(a.cmp(&b))
    });
    order
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    m3: usize,
    m4: usize,
    p3: f64,
    p4: f64,
    or3: f64,
    or4: f64,
    ps: f64,
    extra: f64,
}

/// Greater is better: higher score, then more 2&4 matrices, higher p4,
/// fewer 2&3 matrices, lower p3.
fn better(a: &Candidate, b: &Candidate) -> Ordering {
    a.ps.total_cmp(&b.ps)
        .then(a.m4.cmp(&b.m4))
        .then(a.p4.total_cmp(&b.p4))
        .then(b.m3.cmp(&a.m3))
        .then(b.p3.total_cmp(&a.p3))
}

fn pick(a: Option<Candidate>, b: Option<Candidate>) -> Option<Candidate> {
    match (a, b) {
        (Some(x), Some(y)) => Some(if better(&x, &y) == Ordering::Less { y } else { x }),
        (x, None) => x,
        (None, y) => y,
    }
}

fn mean(sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn finish(
    matrices: &[SearchMatrix],
    order: &[usize],
    best: Option<Candidate>,
    total_params: u64,
) -> Result<SearchResult> {
    let c = best.ok_or_else(|| {
        ClaqError::Infeasible("no grid combination fits the size budget".into())
    })?;
    let mut cats = vec![Category::TwoBit; matrices.len()];
    for &i in &order[..c.m4] {
        cats[i] = Category::Mix24;
    }
    for &i in &order[c.m4..c.m4 + c.m3] {
        cats[i] = Category::Mix23;
    }
    Ok(SearchResult {
        m3: c.m3,
        m4: c.m4,
        p3: c.p3,
        p4: c.p4,
        or3: c.or3,
        or4: c.or4,
        ps_total: c.ps,
        achieved_bits: 2.0 + c.extra / total_params.max(1) as f64,
        ranking: order.iter().map(|&i| matrices[i].name.clone()).collect(),
        categories: matrices
            .iter()
            .zip(cats)
            .map(|(m, c)| (m.name.clone(), c))
            .collect(),
    })
}

fn check_input(matrices: &[SearchMatrix], config: &SearchConfig) -> Result<u64> {
    if matrices.is_empty() {
        return Err(ClaqError::Invalid("no matrices to search over".into()));
    }
    if let Some(m) = matrices.iter().find(|m| !m.outlier_ratio.is_finite() || m.outlier_ratio < 0.0) {
        return Err(ClaqError::Invalid(format!(
            "matrix {:?} has outlier ratio {}",
            m.name, m.outlier_ratio
        )));
    }
    config.validate(matrices.len())?;
    Ok(matrices.iter().map(|m| m.params).sum())
}

/// Best grid point by precision score. Prefix sums make each point O(1);
/// M4 values are evaluated in parallel and reduced with a total order.
pub fn heuristic_search(matrices: &[SearchMatrix], config: &SearchConfig) -> Result<SearchResult> {
    let total = check_input(matrices, config)?;
    let n = matrices.len();
    let order = rank(matrices);
    let allowance = (config.target_bits - 2.0) * total as f64;

    let mut param_prefix = vec![0u64; n + 1];
    for (k, &i) in order.iter().enumerate() {
        param_prefix[k + 1] = param_prefix[k] + matrices[i].params;
    }
    let m4_values = SearchConfig::m_values(&config.m4_grid, n);

    let best = m4_values
        .par_iter()
        .map(|&m4| {
            let mut or4_sum = 0.0;
            for &i in &order[..m4] {
                or4_sum += matrices[i].outlier_ratio;
            }
            let or4 = mean(or4_sum, m4);
            let params4 = param_prefix[m4];
            let p4s: &[f64] = if m4 == 0 { &[0.0] } else { &config.p4_grid };
            let m3_values = SearchConfig::m_values(&config.m3_grid, n - m4);

            // or3 sums accumulated in the same order as a direct loop
            let mut or3_sums = vec![0.0; n - m4 + 1];
            let mut acc = 0.0;
            for (k, &i) in order[m4..].iter().enumerate() {
                acc += matrices[i].outlier_ratio;
                or3_sums[k + 1] = acc;
            }

            let mut best: Option<Candidate> = None;
            for &m3 in &m3_values {
                let or3 = mean(or3_sums[m3], m3);
                let params3 = param_prefix[m4 + m3] - params4;
                let p3s: &[f64] = if m3 == 0 { &[0.0] } else { &config.p3_grid };
                for &p4 in p4s {
                    for &p3 in p3s {
                        let extra = extra_bits(p4, params4, p3, params3);
                        if !fits(extra, allowance) {
                            continue;
                        }
                        let c = Candidate {
                            m3,
                            m4,
                            p3,
                            p4,
                            or3,
                            or4,
                            ps: ps_total(or4, config.ps4, p4, m4, or3, config.ps3, p3, m3),
                            extra,
                        };
                        best = pick(best, Some(c));
                    }
                }
            }
            best
        })
        .reduce(|| None, pick);
    finish(matrices, &order, best, total)
}

/// Direct enumeration of every grid point, recomputing each sum from scratch.
/// Slow; kept as a cross-check for `heuristic_search`.
pub fn exhaustive_search(matrices: &[SearchMatrix], config: &SearchConfig) -> Result<SearchResult> {
    let total = check_input(matrices, config)?;
    let n = matrices.len();
    let order = rank(matrices);
    let allowance = (config.target_bits - 2.0) * total as f64;
    let mut best: Option<Candidate> = None;
    for m4 in SearchConfig::m_values(&config.m4_grid, n) {
        for m3 in SearchConfig::m_values(&config.m3_grid, n - m4) {
            let top = &order[..m4];
            let mid = &order[m4..m4 + m3];
            let params4: u64 = top.iter().map(|&i| matrices[i].params).sum();
            let params3: u64 = mid.iter().map(|&i| matrices[i].params).sum();
            let mut s4 = 0.0;
            for &i in top {
                s4 += matrices[i].outlier_ratio;
            }
            let mut s3 = 0.0;
            for &i in mid {
                s3 += matrices[i].outlier_ratio;
            }
            let (or4, or3) = (mean(s4, m4), mean(s3, m3));
            let p4s = if m4 == 0 { vec![0.0] } else { config.p4_grid.clone() };
            let p3s = if m3 == 0 { vec![0.0] } else { config.p3_grid.clone() };
            for &p4 in &p4s {
                for &p3 in &p3s {
                    let extra = extra_bits(p4, params4, p3, params3);
                    if fits(extra, allowance) {
                        let ps = ps_total(or4, config.ps4, p4, m4, or3, config.ps3, p3, m3);
                        best = pick(best, Some(Candidate { m3, m4, p3, p4, or3, or4, ps, extra }));
                    }
                }
            }
        }
    }
    finish(matrices, &order, best, total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mats(ratios: &[f64], params: u64) -> Vec<SearchMatrix> {
        ratios
            .iter()
            .enumerate()
            .map(|(i, &r)| SearchMatrix {
                name: format!("m{i}"),
                params,
                outlier_ratio: r,
            })
            .collect()
    }

    #[test]
    fn tight_budget_is_all_two_bit() {
        let m = mats(&[0.01, 0.02, 0.03], 100);
        let r = heuristic_search(&m, &SearchConfig::new(2.0)).unwrap();
        assert_eq!((r.m3, r.m4), (0, 0));
        assert_eq!(r.ps_total, 0.0);
        assert!(r.categories.iter().all(|(_, c)| *c == Category::TwoBit));
        assert_eq!(r.achieved_bits, 2.0);
    }

    #[test]
    fn below_two_bits_is_infeasible() {
        let m = mats(&[0.01], 100);
        let err = heuristic_search(&m, &SearchConfig::new(1.9)).unwrap_err();
        assert!(matches!(err, ClaqError::Infeasible(_)));
    }

    #[test]
    fn hand_worked_small_case() {
        // two matrices, ratios 0.2 and 0.1, grid p in {0.5}, budget 2.5 bits
        // allowance = 0.5 * 200 = 100 extra bits
        // (M4=1,p4=.5): extra 100, PS = 0.2*4*0.5 = 0.4
        // (M3=2,p3=.5): extra 100, PS = 0.15*3*0.5*2 = 0.45
        // (M4=1,M3=1): extra 150 -> over
        let m = mats(&[0.1, 0.2], 100);
        let cfg = SearchConfig {
            p3_grid: vec![0.5],
            p4_grid: vec![0.5],
            ..SearchConfig::new(2.5)
        };
        let r = heuristic_search(&m, &cfg).unwrap();
        assert_eq!((r.m4, r.m3), (0, 2));
        assert!((r.ps_total - 0.45).abs() < 1e-12);
        assert_eq!(r.ranking, vec!["m1", "m0"]);
        assert!(r.achieved_bits <= 2.5 + 1e-12);
    }

    #[test]
    fn ties_prefer_more_four_bit_matrices() {
        // one matrix: M4=1,p4=0.375 and M3=1,p3=0.5 both score 1.5*r
        let m = mats(&[1.0], 8);
        let cfg = SearchConfig {
            p3_grid: vec![0.5],
            p4_grid: vec![0.375],
            ..SearchConfig::new(3.0)
        };
        let r = heuristic_search(&m, &cfg).unwrap();
        assert_eq!((r.m4, r.m3), (1, 0));
        assert_eq!(r.categories[0].1, Category::Mix24);
    }

    #[test]
    fn matches_exhaustive_on_small_grids() {
        let ratios = [0.013, 0.002, 0.03, 0.03, 0.007, 0.0, 0.021];
        let m: Vec<SearchMatrix> = ratios
            .iter()
            .enumerate()
            .map(|(i, &r)| SearchMatrix {
                name: format!("m{i}"),
                params: 1000 + 37 * i as u64,
                outlier_ratio: r,
            })
            .collect();
        for target in [2.0, 2.05, 2.1, 2.25, 2.5, 3.0] {
            let cfg = SearchConfig::new(target);
            assert_eq!(heuristic_search(&m, &cfg).unwrap(), exhaustive_search(&m, &cfg).unwrap());
        }
    }
}
