//! Small dense symmetric linear algebra, generic over the scalar type.
//!
//! Everything here operates on matrices of modest dimension (covariate
//! windows and group-time index sets), so plain `Vec`-backed storage and
//! textbook algorithms are sufficient.

use serde::{Deserialize, Serialize};

use crate::num::Scalar;

/// Dense symmetric matrix, stored in full row-major form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymMat<S> {
    n: usize,
    data: Vec<S>,
}

impl<S: Scalar> SymMat<S> {
    pub fn zeros(n: usize) -> Self {
        SymMat {
            n,
            data: vec![S::zero(); n * n],
        }
    }

    /// Builds from a full row-major buffer; the caller guarantees symmetry.
    pub fn from_raw(n: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), n * n);
        SymMat { n, data }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> S {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: S) {
        self.data[i * self.n + j] = v;
        self.data[j * self.n + i] = v;
    }

    pub fn add_to_diag(&mut self, v: S) {
        for i in 0..self.n {
            self.data[i * self.n + i] += v;
        }
    }

    pub fn trace(&self) -> S {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    /// Sample covariance (divisor n-1) of the given observation rows.
    /// With fewer than two rows the result is all zeros.
    pub fn covariance_of(rows: &[Vec<S>], dim: usize) -> Self {
        let mut cov = SymMat::zeros(dim);
        let n = rows.len();
        if n < 2 {
            return cov;
        }
        let nf = S::from_count(n);
        let mut mean = vec![S::zero(); dim];
        for r in rows {
            for (m, &v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= nf;
        }
        let denom = S::from_count(n - 1);
        for r in rows {
            for i in 0..dim {
                let di = r[i] - mean[i];
                for j in i..dim {
                    let dj = r[j] - mean[j];
                    cov.data[i * dim + j] += di * dj / denom;
                }
            }
        }
        for i in 0..dim {
            for j in 0..i {
                cov.data[i * dim + j] = cov.data[j * dim + i];
            }
        }
        cov
    }

    /// Cholesky factorization `A = L Lᵀ`. Returns `None` if the matrix is not
    /// positive definite.
    pub fn cholesky(&self) -> Option<Cholesky<S>> {
        let n = self.n;
        let mut l = vec![S::zero(); n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut sum = self.get(i, j);
                for k in 0..j {
                    sum -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if sum <= S::zero() || !sum.is_finite() {
                        return None;
                    }
                    l[i * n + i] = sum.sqrt();
                } else {
                    l[i * n + j] = sum / l[j * n + j];
                }
            }
        }
        Some(Cholesky { n, l })
    }

    /// Symmetric eigendecomposition by the cyclic Jacobi method.
    /// Returns `(eigenvalues, eigenvectors)` with eigenvectors as rows.
    pub fn jacobi_eigen(&self) -> (Vec<S>, Vec<Vec<S>>) {
        let n = self.n;
        let mut a = self.data.clone();
        let mut v = vec![S::zero(); n * n];
        for i in 0..n {
            v[i * n + i] = S::one();
        }
        let eps = S::epsilon() * S::from_count(n * n.max(1));
        let scale = self
            .data
            .iter()
            .fold(S::zero(), |acc, x| acc.max(x.abs()))
            .max(S::one());
        for _sweep in 0..100 {
            let mut off = S::zero();
            for i in 0..n {
                for j in (i + 1)..n {
                    off = off.max(a[i * n + j].abs());
                }
            }
            if off <= eps * scale {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a[p * n + q];
                    if apq.abs() <= eps * scale {
                        continue;
                    }
                    let app = a[p * n + p];
                    let aqq = a[q * n + q];
                    let theta = (aqq - app) / (S::from_count(2) * apq);
                    let t = {
                        let sign = if theta >= S::zero() { S::one() } else { -S::one() };
                        sign / (theta.abs() + (theta * theta + S::one()).sqrt())
                    };
                    let c = S::one() / (t * t + S::one()).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[k * n + p];
                        let akq = a[k * n + q];
                        a[k * n + p] = c * akp - s * akq;
                        a[k * n + q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p * n + k];
                        let aqk = a[q * n + k];
                        a[p * n + k] = c * apk - s * aqk;
                        a[q * n + k] = s * apk + c * aqk;
                    }
                    for k in 0..n {
                        let vpk = v[p * n + k];
                        let vqk = v[q * n + k];
                        v[p * n + k] = c * vpk - s * vqk;
                        v[q * n + k] = s * vpk + c * vqk;
                    }
                }
            }
        }
        let values = (0..n).map(|i| a[i * n + i]).collect();
        let vectors = (0..n).map(|i| v[i * n..(i + 1) * n].to_vec()).collect();
        (values, vectors)
    }

    /// Reconstructs `Σ λᵢ vᵢ vᵢᵀ` from an eigendecomposition.
    pub fn from_eigen(values: &[S], vectors: &[Vec<S>]) -> Self {
        let n = values.len();
        let mut m = SymMat::zeros(n);
        for i in 0..n {
            for j in i..n {
                let mut sum = S::zero();
                for (lam, vec) in values.iter().zip(vectors.iter()) {
                    sum += *lam * vec[i] * vec[j];
                }
                m.set(i, j, sum);
            }
        }
        m
    }

    pub fn quad_form(&self, x: &[S]) -> S {
        let mut total = S::zero();
        for i in 0..self.n {
            let row = self.row(i);
            let mut acc = S::zero();
            for (r, xj) in row.iter().zip(x.iter()) {
                acc += *r * *xj;
            }
            total += x[i] * acc;
        }
        total
    }

    pub fn matvec(&self, x: &[S]) -> Vec<S> {
        (0..self.n)
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(x.iter())
                    .map(|(a, b)| *a * *b)
                    .sum()
            })
            .collect()
    }
}

/// Lower-triangular Cholesky factor.
#[derive(Debug, Clone)]
pub struct Cholesky<S> {
    n: usize,
    l: Vec<S>,
}

impl<S: Scalar> Cholesky<S> {
    /// Solves `L y = b` in place.
    pub fn forward_solve(&self, b: &mut [S]) {
        let n = self.n;
        for i in 0..n {
            let mut sum = b[i];
            for k in 0..i {
                sum -= self.l[i * n + k] * b[k];
            }
            b[i] = sum / self.l[i * n + i];
        }
    }

    /// Solves `A x = b` where `A = L Lᵀ`.
    pub fn solve(&self, b: &[S]) -> Vec<S> {
        let n = self.n;
        let mut x = b.to_vec();
        self.forward_solve(&mut x);
        for i in (0..n).rev() {
            let mut sum = x[i];
            for k in (i + 1)..n {
                sum -= self.l[k * n + i] * x[k];
            }
            x[i] = sum / self.l[i * n + i];
        }
        x
    }
}

/// Solves the symmetric system `A x = b`, falling back to an eigenvalue
/// pseudo-inverse when `A` is not positive definite. The second return value
/// is true when the fallback was taken.
pub fn solve_sym_or_pinv<S: Scalar>(a: &SymMat<S>, b: &[S], rel_tol: S) -> (Vec<S>, bool) {
    if let Some(chol) = a.cholesky() {
        return (chol.solve(b), false);
    }
    let (values, vectors) = a.jacobi_eigen();
    let vmax = values.iter().fold(S::zero(), |acc, x| acc.max(x.abs()));
    let cut = vmax * rel_tol;
    let n = a.n();
    let mut x = vec![S::zero(); n];
    for (lam, vec) in values.iter().zip(vectors.iter()) {
        if lam.abs() <= cut {
            continue;
        }
        let proj: S = vec.iter().zip(b.iter()).map(|(v, bi)| *v * *bi).sum();
        for (xi, vi) in x.iter_mut().zip(vec.iter()) {
            *xi += proj / *lam * *vi;
        }
    }
    (x, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn cholesky_solves_spd_system() {
        let a = SymMat::from_raw(2, vec![4.0, 1.0, 1.0, 3.0]);
        let chol = a.cholesky().unwrap();
        let x = chol.solve(&[1.0, 2.0]);
        assert_relative_eq!(4.0 * x[0] + 1.0 * x[1], 1.0, epsilon = 1e-12);
        assert_relative_eq!(1.0 * x[0] + 3.0 * x[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = SymMat::from_raw(2, vec![1.0, 2.0, 2.0, 1.0]);
        assert!(a.cholesky().is_none());
    }

    #[test]
    fn jacobi_recovers_spectrum() {
        let a = SymMat::from_raw(3, vec![2.0, 1.0, 0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 2.0]);
        let (mut values, vectors) = a.jacobi_eigen();
        values.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let sqrt2 = std::f64::consts::SQRT_2;
        assert_relative_eq!(values[0], 2.0 - sqrt2, epsilon = 1e-10);
        assert_relative_eq!(values[1], 2.0, epsilon = 1e-10);
        assert_relative_eq!(values[2], 2.0 + sqrt2, epsilon = 1e-10);
        let _ = vectors;
    }

    #[test]
    fn eigen_reconstruction_round_trips() {
        let a = SymMat::from_raw(3, vec![5.0, 2.0, 1.0, 2.0, 4.0, 0.5, 1.0, 0.5, 3.0]);
        let (values, vectors) = a.jacobi_eigen();
        let back = SymMat::from_eigen(&values, &vectors);
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(back.get(i, j), a.get(i, j), epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn covariance_matches_hand_computation() {
        let rows = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 9.0]];
        let cov = SymMat::covariance_of(&rows, 2);
        assert_relative_eq!(cov.get(0, 0), 4.0, epsilon = 1e-12);
        assert_relative_eq!(cov.get(0, 1), 7.0, epsilon = 1e-12);
        assert_relative_eq!(cov.get(1, 1), 13.0, epsilon = 1e-12);
    }

    #[test]
    fn pinv_fallback_flags_singular() {
        let a = SymMat::from_raw(2, vec![1.0, 1.0, 1.0, 1.0]);
        let (x, fell_back) = solve_sym_or_pinv(&a, &[2.0, 2.0], 1e-12);
        assert!(fell_back);
        // Minimum-norm solution of the rank-1 system.
        assert_relative_eq!(x[0], 1.0, epsilon = 1e-10);
        assert_relative_eq!(x[1], 1.0, epsilon = 1e-10);
    }
}
