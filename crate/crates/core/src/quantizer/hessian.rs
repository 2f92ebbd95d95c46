use crate::error::{ClaqError, Result};
use crate::tensor_store::WeightMatrix;

pub const DEFAULT_DAMP_RATIO: f64 = 0.01;

/// Dense row-major square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Square {
    n: usize,
    data: Vec<f64>,
}

impl Square {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(ClaqError::Shape("matrix rows are not square".into()));
        }
        Ok(Self { n, data: rows.concat() })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Square) -> Square {
        let n = self.n;
        let mut out = Square::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let (src, dst) = (other.row(k), &mut out.data[i * n..(i + 1) * n]);
                for j in 0..n {
                    dst[j] += a * src[j];
                }
            }
        }
        out
    }

    pub fn is_diagonal(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| i == j || self[(i, j)] == 0.0))
    }

    /// Symmetric permutation `P A Pᵀ` where row `i` of the result is row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut p = Self::zeros(self.n);
        for (i, &pi) in perm.iter().enumerate() {
            for (j, &pj) in perm.iter().enumerate() {
                p[(i, j)] = self[(pi, pj)];
            }
        }
        p
    }
}

impl std::ops::Index<(usize, usize)> for Square {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.n + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Square {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.n + j]
    }
}

/// Lower Cholesky factor `L` with `L Lᵀ = a`.
pub fn cholesky_lower(a: &Square) -> Result<Square> {
    let n = a.dim();
    let mut l = Square::zeros(n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(ClaqError::Numerical(format!(
                "matrix is not positive definite (pivot {j} = {d:e})"
            )));
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Inverse of a lower-triangular matrix by forward substitution.
fn invert_lower(l: &Square) -> Square {
    let n = l.dim();
    let mut inv = Square::zeros(n);
    for c in 0..n {
        inv[(c, c)] = 1.0 / l[(c, c)];
        for i in c + 1..n {
            let mut s = 0.0;
            for k in c..i {
                s -= l[(i, k)] * inv[(k, c)];
            }
            inv[(i, c)] = s / l[(i, i)];
        }
    }
    inv
}

/// Damped calibration Hessian and the upper Cholesky factor of its inverse.
#[derive(Debug, Clone)]
pub struct HessianState {
    pub dim: usize,
    pub h: Square,
    pub damping: f64,
    /// Upper-triangular `U` with `Uᵀ U = H⁻¹`.
    pub inv_factor: Square,
}

impl HessianState {
    /// Build from an already-damped symmetric positive-definite matrix.
    pub fn from_matrix(h: Square, damping: f64) -> Result<Self> {
        let l = cholesky_lower(&h)?;
        let li = invert_lower(&l);
        // H⁻¹ = L⁻ᵀ L⁻¹
        let hinv = li.transpose().matmul(&li);
        let inv_factor = cholesky_lower(&hinv)?.transpose();
        Ok(Self {
            dim: h.dim(),
            h,
            damping,
            inv_factor,
        })
    }

    /// `H⁻¹` recovered from the cached factor.
    pub fn inverse(&self) -> Square {
        self.inv_factor.transpose().matmul(&self.inv_factor)
    }

    pub fn is_diagonal(&self) -> bool {
        self.h.is_diagonal()
    }

    /// Same Hessian with inputs reordered: position `i` holds input `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        Self::from_matrix(self.h.permuted(perm), self.damping)
    }
}

fn check_ratio(damp_ratio: f64) -> Result<()> {
    if !(damp_ratio > 0.0 && damp_ratio.is_finite()) {
        return Err(ClaqError::Invalid(format!(
            "damping ratio must be > 0, got {damp_ratio}"
        )));
    }
    Ok(())
}

fn damp(mut h: Square, damp_ratio: f64) -> Result<HessianState> {
    let n = h.dim();
    let mean_diag = (0..n).map(|i| h[(i, i)]).sum::<f64>() / n as f64;
    if !mean_diag.is_finite() {
        return Err(ClaqError::NonFinite("calibration Hessian".into()));
    }
    let lambda = damp_ratio * mean_diag;
    if lambda == 0.0 {
        // all-zero calibration carries no curvature information
        log::warn!("calibration inputs are all zero; using an identity Hessian");
        return HessianState::from_matrix(Square::identity(n), 0.0);
    }
    for i in 0..n {
        h[(i, i)] += lambda;
    }
    HessianState::from_matrix(h, lambda)
}

/// `H = 2 Σ x xᵀ + λI` with `λ = damp_ratio × mean(diag)`.
pub fn compute_hessian(calibration: &[Vec<f64>], dim: usize, damp_ratio: f64) -> Result<HessianState> {
    check_ratio(damp_ratio)?;
    if calibration.is_empty() {
        return Err(ClaqError::Invalid("calibration set is empty".into()));
    }
    if dim == 0 {
        return Err(ClaqError::Invalid("Hessian dimension must be > 0".into()));
    }
    let mut h = Square::zeros(dim);
    for (s, x) in calibration.iter().enumerate() {
        if x.len() != dim {
            return Err(ClaqError::Shape(format!(
                "calibration vector {s} has length {}, expected {dim}",
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ClaqError::NonFinite(format!("calibration vector {s}")));
        }
        accumulate(&mut h, x);
    }
    finish_outer(&mut h);
    damp(h, damp_ratio)
}

/// Calibration stored as a matrix whose rows are input vectors.
pub fn hessian_from_activations(x: &WeightMatrix, damp_ratio: f64) -> Result<HessianState> {
    check_ratio(damp_ratio)?;
    if x.rows() == 0 {
        return Err(ClaqError::Invalid("calibration set is empty".into()));
    }
    let dim = x.cols();
    let mut h = Square::zeros(dim);
    for r in 0..x.rows() {
        accumulate(&mut h, &x.data()[r * dim..(r + 1) * dim]);
    }
    finish_outer(&mut h);
    damp(h, damp_ratio)
}

/// Adds `2 x xᵀ` to the upper triangle.
fn accumulate(h: &mut Square, x: &[f64]) {
    let n = x.len();
    for i in 0..n {
        let xi = 2.0 * x[i];
        if xi == 0.0 {
            continue;
        }
        let row = &mut h.data[i * n..(i + 1) * n];
        for j in i..n {
            row[j] += xi * x[j];
        }
    }
}

fn finish_outer(h: &mut Square) {
    let n = h.dim();
    for i in 0..n {
        for j in 0..i {
            h[(i, j)] = h[(j, i)];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn basis_vectors_give_scaled_identity() {
        let d = 4;
        let calib: Vec<Vec<f64>> = (0..d)
            .map(|i| (0..d).map(|j| f64::from(u8::from(i == j))).collect())
            .collect();
        let h = compute_hessian(&calib, d, 0.01).unwrap();
        assert!((h.damping - 0.02).abs() < 1e-15);
        assert!(h.is_diagonal());
        for i in 0..d {
            assert!((h.h[(i, i)] - 2.02).abs() < 1e-15);
        }
    }

    #[test]
    fn single_vector_by_hand() {
        let h = compute_hessian(&[vec![1.0, 1.0]], 2, 0.01).unwrap();
        assert!((h.damping - 0.02).abs() < 1e-15);
        let expect = [[2.02, 2.0], [2.0, 2.02]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((h.h[(i, j)] - expect[i][j]).abs() < 1e-12);
            }
        }
        // inverse of [[a,b],[b,a]] is [[a,-b],[-b,a]] / (a² - b²)
        let det = 2.02 * 2.02 - 4.0;
        let inv = h.inverse();
        assert!(close(inv[(0, 0)], 2.02 / det, 1e-9));
        assert!(close(inv[(0, 1)], -2.0 / det, 1e-9));
    }

    #[test]
    fn empty_or_ragged_calibration_is_rejected() {
        assert!(compute_hessian(&[], 3, 0.01).is_err());
        assert!(compute_hessian(&[vec![1.0, 2.0]], 3, 0.01).is_err());
        assert!(compute_hessian(&[vec![1.0, f64::NAN]], 2, 0.01).is_err());
        assert!(compute_hessian(&[vec![1.0, 2.0]], 2, 0.0).is_err());
    }

    #[test]
    fn inverse_factor_is_upper_and_reproduces_inverse() {
        let calib: Vec<Vec<f64>> = (0..6)
            .map(|s| (0..5).map(|j| ((s * 7 + j * 3) % 11) as f64 - 5.0).collect())
            .collect();
        let h = compute_hessian(&calib, 5, 0.01).unwrap();
        for i in 0..5 {
            for j in 0..i {
                assert_eq!(h.inv_factor[(i, j)], 0.0);
            }
        }
        let prod = h.h.matmul(&h.inverse());
        for i in 0..5 {
            for j in 0..5 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((prod[(i, j)] - want).abs() < 1e-8, "{i},{j}: {}", prod[(i, j)]);
            }
        }
    }

    #[test]
    fn zero_calibration_falls_back_to_identity() {
        let h = compute_hessian(&[vec![0.0; 3]], 3, 0.01).unwrap();
        assert_eq!(h.h, Square::identity(3));
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = Square::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(cholesky_lower(&a), Err(ClaqError::Numerical(_))));
    }
}
