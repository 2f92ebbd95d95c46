//! One-dimensional K-Means codebooks.
//!
//! [`lloyd_cluster`] is the production path (k-means++ seeding followed by
//! Lloyd iterations). [`exact_cluster_1d`] solves the same objective
//! globally by dynamic programming over contiguous partitions of the sorted
//! data and is used to check the heuristic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ClaqError, Result};
use crate::tensor_store::check_bits;

pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_ORACLE_CAP: usize = 4096;

/// Sorted centroids for one column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub bits: u8,
    pub centroids: Vec<f64>,
    pub wcss: f64,
}

impl Codebook {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    #[default]
    Lloyd,
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
    pub solver: Solver,
    pub oracle_cap: usize,
    /// Cap on distinct centroids per column (codebooks are still `2^b` long).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_distinct: Option<usize>,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            solver: Solver::Lloyd,
            oracle_cap: DEFAULT_ORACLE_CAP,
            max_distinct: None,
        }
    }
}

impl ClusterConfig {
    /// Fit with the configured solver, using `stream` to decorrelate seeds
    /// between columns.
    pub fn fit(&self, values: &[f64], bits: u8, stream: u64) -> Result<Codebook> {
        let distinct = self.max_distinct.unwrap_or(usize::MAX);
        match self.solver {
            Solver::Lloyd => lloyd_cluster_limited(
                values,
                bits,
                distinct,
                mix_seed(self.seed, stream),
                self.max_iter,
                self.tol,
            ),
            Solver::Exact => exact_cluster_limited(values, bits, distinct, self.oracle_cap),
        }
    }
}

/// SplitMix64 finalizer over `seed + stream * golden`.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn check_values(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(ClaqError::Invalid("cannot cluster an empty column".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(ClaqError::NonFinite("clustering input".into()));
    }
    Ok(())
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

fn unique_sorted(sorted: &[f64]) -> Vec<f64> {
    let mut u = sorted.to_vec();
    u.dedup();
    u
}

/// Stretch `u` sorted centroids to `2^bits` entries.
///
/// Entry `q` is `centroids[q * u / k]`, which spreads duplicates evenly
/// (`{0, 10}` with k = 4 gives `[0, 0, 10, 10]`).
fn pad(centroids: &[f64], bits: u8) -> Vec<f64> {
    let k = 1usize << bits;
    let u = centroids.len();
    (0..k).map(|q| centroids[q * u / k]).collect()
}

/// Index of the nearest centroid; ties go to the lower index.
#[inline]
pub fn nearest(value: f64, centroids: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = (centroids[0] - value).abs();
    for (q, &c) in centroids.iter().enumerate().skip(1) {
        let d = (c - value).abs();
        if d < best_d {
            best = q;
            best_d = d;
        }
    }
    best
}

/// Nearest-centroid index for every value.
pub fn assign(values: &[f64], centroids: &[f64]) -> Result<Vec<u8>> {
    if centroids.is_empty() || centroids.len() > 256 {
        return Err(ClaqError::Invalid(format!(
            "codebook of {} centroids",
            centroids.len()
        )));
    }
    if values.iter().chain(centroids).any(|v| !v.is_finite()) {
        return Err(ClaqError::NonFinite("assignment input".into()));
    }
    Ok(values.iter().map(|&v| nearest(v, centroids) as u8).collect())
}

/// Sum of squared distances to the nearest centroid.
pub fn wcss_of(values: &[f64], centroids: &[f64]) -> f64 {
    values
        .iter()
        .map(|&v| {
            let d = v - centroids[nearest(v, centroids)];
            d * d
        })
        .sum()
}

/// D²-weighted draw; zero-distance points are never picked unless all are.
fn d2_sample(d2: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = d2.iter().sum();
    if total <= 0.0 {
        return rng.random_range(0..d2.len());
    }
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &d) in d2.iter().enumerate() {
        acc += d;
        if d > 0.0 && acc > target {
            return i;
        }
    }
    // rounding can leave `acc` just short of `target`
    d2.iter().rposition(|&d| d > 0.0).unwrap_or(0)
}

/// Greedy k-means++: each step draws `2 + ln k` candidates and keeps the
/// one that lowers the potential most.
fn kmeans_pp(values: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = values.len();
    let trials = 2 + (k as f64).ln() as usize;
    let mut centroids = Vec::with_capacity(k);
    centroids.push(values[rng.random_range(0..n)]);
    let mut d2: Vec<f64> = values
        .iter()
        .map(|&v| (v - centroids[0]) * (v - centroids[0]))
        .collect();
    let mut trial_d2 = vec![0.0; n];
    while centroids.len() < k {
        let mut best: Option<(f64, f64, Vec<f64>)> = None;
        for _ in 0..trials {
            let c = values[d2_sample(&d2, rng)];
            let mut potential = 0.0;
            for ((t, &d), &v) in trial_d2.iter_mut().zip(&d2).zip(values) {
                *t = d.min((v - c) * (v - c));
                potential += *t;
            }
            if best.as_ref().is_none_or(|b| potential < b.0) {
                best = Some((potential, c, trial_d2.clone()));
            }
        }
        let (_, c, next) = best.expect("at least one trial");
        centroids.push(c);
        d2 = next;
    }
    centroids
}

/// k-means++ seeded Lloyd clustering with `2^bits` centroids.
pub fn lloyd_cluster(
    values: &[f64],
    bits: u8,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<Codebook> {
    lloyd_cluster_limited(values, bits, 1 << bits, seed, max_iter, tol)
}

/// As [`lloyd_cluster`] but with at most `distinct` different centroids;
/// the result is padded to `2^bits` entries by duplication.
pub fn lloyd_cluster_limited(
    values: &[f64],
    bits: u8,
    distinct: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<Codebook> {
    check_values(values)?;
    check_bits(bits)?;
    let k = distinct.clamp(1, 1 << bits);
    let data = sorted(values);
    let unique = unique_sorted(&data);
    let found = if unique.len() <= k {
        unique
    } else {
        lloyd_k(&data, k, seed, max_iter, tol)
    };
    let centroids = pad(&found, bits);
    let wcss = wcss_of(&data, &centroids);
    Ok(Codebook {
        bits,
        centroids,
        wcss,
    })
}

/// Lloyd iterations on sorted data with more than `k` distinct values.
fn lloyd_k(data: &[f64], k: usize, seed: u64, max_iter: usize, tol: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(data, k, &mut rng);
    centroids.sort_by(f64::total_cmp);

    let mut labels = vec![0usize; data.len()];
    let mut sums = vec![0.0f64; k];
    let mut counts = vec![0usize; k];
    for _ in 0..max_iter {
        for (l, &v) in labels.iter_mut().zip(data) {
            *l = nearest(v, &centroids);
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        counts.iter_mut().for_each(|c| *c = 0);
        for (&l, &v) in labels.iter().zip(data) {
            sums[l] += v;
            counts[l] += 1;
        }
        let mut next: Vec<f64> = (0..k)
            .map(|q| {
                if counts[q] > 0 {
                    sums[q] / counts[q] as f64
                } else {
                    f64::NAN
                }
            })
            .collect();

        if counts.contains(&0) {
            // re-seed each empty cluster at the point farthest from its centroid
            let mut dist: Vec<f64> = labels
                .iter()
                .zip(data)
                .map(|(&l, &v)| (v - next[l]).abs())
                .collect();
            for q in 0..k {
                if counts[q] == 0 {
                    let (far, _) = dist
                        .iter()
                        .enumerate()
                        .fold((0, -1.0), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc });
                    next[q] = data[far];
                    dist[far] = 0.0;
                }
            }
        }

        next.sort_by(f64::total_cmp);
        let movement = centroids
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        centroids = next;
        if movement < tol {
            break;
        }
    }
    centroids
}

/// Globally optimal 1-D k-means (`2^bits` clusters) by dynamic programming.
pub fn exact_cluster_1d(values: &[f64], bits: u8) -> Result<Codebook> {
    exact_cluster_1d_capped(values, bits, DEFAULT_ORACLE_CAP)
}

pub fn exact_cluster_1d_capped(values: &[f64], bits: u8, cap: usize) -> Result<Codebook> {
    exact_cluster_limited(values, bits, 1 << bits, cap)
}

/// Exact solver with at most `distinct` different centroids, padded to
/// `2^bits` entries.
pub fn exact_cluster_limited(
    values: &[f64],
    bits: u8,
    distinct: usize,
    cap: usize,
) -> Result<Codebook> {
    check_bits(bits)?;
    let (found, _) = exact_cluster_k(values, distinct.clamp(1, 1 << bits), cap)?;
    let centroids = pad(&found, bits);
    let wcss = wcss_of(values, &centroids);
    Ok(Codebook {
        bits,
        centroids,
        wcss,
    })
}

/// Optimal clustering into at most `k` clusters for any `k >= 1`.
///
/// Returns the sorted distinct centroids (fewer than `k` when the data has
/// fewer distinct values) and the optimal WCSS.
pub fn exact_cluster_k(values: &[f64], k: usize, cap: usize) -> Result<(Vec<f64>, f64)> {
    check_values(values)?;
    if k == 0 {
        return Err(ClaqError::Invalid("zero clusters".into()));
    }
    if values.len() > cap {
        return Err(ClaqError::OracleCap {
            len: values.len(),
            cap,
        });
    }
    let data = sorted(values);
    let unique = unique_sorted(&data);
    if unique.len() <= k {
        return Ok((unique, 0.0));
    }
    let n = data.len();

    // prefix sums of centered data keep the segment costs well conditioned
    let shift = data.iter().sum::<f64>() / n as f64;
    let mut s1 = vec![0.0f64; n + 1];
    let mut s2 = vec![0.0f64; n + 1];
    for (i, &v) in data.iter().enumerate() {
        let x = v - shift;
        s1[i + 1] = s1[i] + x;
        s2[i + 1] = s2[i] + x * x;
    }
    // cost of data[a..b]
    let cost = |a: usize, b: usize| -> f64 {
        let m = (b - a) as f64;
        let s = s1[b] - s1[a];
        (s2[b] - s2[a] - s * s / m).max(0.0)
    };

    // best[c][i]: min cost of data[..i] split into c+1 clusters
    let mut best = vec![vec![f64::INFINITY; n + 1]; k];
    let mut split = vec![vec![0usize; n + 1]; k];
    for i in 1..=n {
        best[0][i] = cost(0, i);
    }
    for c in 1..k {
        for i in (c + 1)..=n {
            let mut bv = f64::INFINITY;
            let mut bj = c;
            for j in c..i {
                let v = best[c - 1][j] + cost(j, i);
                if v < bv {
                    bv = v;
                    bj = j;
                }
            }
            best[c][i] = bv;
            split[c][i] = bj;
        }
    }

    let mut centroids = vec![0.0; k];
    let mut end = n;
    for c in (0..k).rev() {
        let start = if c == 0 { 0 } else { split[c][end] };
        let seg = &data[start..end];
        centroids[c] = seg.iter().sum::<f64>() / seg.len() as f64;
        end = start;
    }
    centroids.sort_by(f64::total_cmp);
    let wcss = wcss_of(&data, &centroids);
    Ok((centroids, wcss))
}
