//! Null-restricted bootstrap Wald tests of effect homogeneity.
//!
//! Hypotheses are equality constraints `R τ = 0` built as adjacent
//! differences over a selected subset of (g, t) cells: all cells of one
//! cohort, all cells at one calendar time, or all cells at one lag
//! `e = t − g`. The observed statistic is
//! `W = (Rτ̂)' (RΣ̂R')⁻¹ (Rτ̂)`; the reference distribution comes from a
//! fresh block bootstrap recentered at the null projection
//! `τ̂₀ = τ̂ − R'(RR')⁻¹Rτ̂`, with the covariance held fixed. Because the
//! statistic depends on `R` only through its row space, any full-rank
//! re-parameterization of the constraints gives the identical test.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bootstrap::{resample_means, CovarianceEstimate};
use crate::estimator::{AttVector, GtIndex};
use crate::linalg::{solve_sym_or_pinv, SymMat};
use crate::panel::Period;
use crate::rng::StreamLabel;

/// Constraint family selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HypothesisKind {
    /// Equal effects across time within cohort `g`.
    FixedCohort(Period),
    /// Equal effects across cohorts at calendar time `t`.
    FixedTime(Period),
    /// Equal effects across cohorts at lag `e = t - g`.
    FixedLag(Period),
}

/// A built hypothesis: contrast matrix over a `GtIndex`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HypothesisSpec {
    /// `q x K` contrast rows.
    pub r: Vec<Vec<f64>>,
    pub q: usize,
    pub description: String,
}

#[derive(Debug, Error)]
pub enum HypothesisError {
    #[error("hypothesis `{0}` selects fewer than two cells")]
    TooFewCells(String),
    #[error("contrast matrix is invalid: {0}")]
    BadContrast(String),
    #[error("effect vector, covariance, and hypothesis do not share an index")]
    IndexMismatch,
    #[error("effect vector carries no block contributions")]
    NoBlockContributions,
    #[error("need at least 2 bootstrap replicates, got {0}")]
    TooFewReplicates(usize),
}

/// Test output. `p_value` is the bootstrap tail probability with ties
/// counted as extreme (conservative).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestResult {
    pub description: String,
    pub w_obs: f64,
    /// F-type statistic `W / q`, reported for reference.
    pub f_stat: f64,
    pub p_value: f64,
    pub q: usize,
    pub b: usize,
    pub seed: u64,
    /// Null-restricted effect vector `τ̂₀` with `Rτ̂₀ = 0`.
    pub tau_null: Vec<f64>,
    /// True when `RΣ̂R'` was inverted by pseudo-inverse.
    pub singular_contrast_covariance: bool,
}

/// Builds the adjacent-difference contrasts for one homogeneity family.
pub fn build_hypothesis(
    index: &GtIndex,
    kind: HypothesisKind,
) -> Result<HypothesisSpec, HypothesisError> {
    let (selected, description): (Vec<usize>, String) = match kind {
        HypothesisKind::FixedCohort(g) => (
            index
                .pairs()
                .iter()
                .enumerate()
                .filter(|(_, &(gg, _))| gg == g)
                .map(|(i, _)| i)
                .collect(),
            format!("equal effects over time for cohort {g}"),
        ),
        HypothesisKind::FixedTime(t) => (
            index
                .pairs()
                .iter()
                .enumerate()
                .filter(|(_, &(_, tt))| tt == t)
                .map(|(i, _)| i)
                .collect(),
            format!("equal effects across cohorts at time {t}"),
        ),
        HypothesisKind::FixedLag(e) => (
            index
                .pairs()
                .iter()
                .enumerate()
                .filter(|(_, &(g, t))| t - g == e)
                .map(|(i, _)| i)
                .collect(),
            format!("equal effects across cohorts at lag {e}"),
        ),
    };
    if selected.len() < 2 {
        return Err(HypothesisError::TooFewCells(description));
    }
    let k = index.k();
    let r = selected
        .windows(2)
        .map(|w| {
            let mut row = vec![0.0; k];
            row[w[0]] = 1.0;
            row[w[1]] = -1.0;
            row
        })
        .collect::<Vec<_>>();
    let q = r.len();
    Ok(HypothesisSpec { r, q, description })
}

impl HypothesisSpec {
    /// Builds a custom contrast matrix; rows must be nonzero, sum to zero,
    /// and be linearly independent.
    pub fn custom(r: Vec<Vec<f64>>, k: usize, description: String) -> Result<Self, HypothesisError> {
        if r.is_empty() {
            return Err(HypothesisError::BadContrast("no rows".into()));
        }
        for row in &r {
            if row.len() != k {
                return Err(HypothesisError::BadContrast(format!(
                    "row length {} does not match index size {k}",
                    row.len()
                )));
            }
            let sum: f64 = row.iter().sum();
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || sum.abs() > 1e-8 * norm {
                return Err(HypothesisError::BadContrast(
                    "rows must be nonzero equality contrasts summing to zero".into(),
                ));
            }
        }
        let gram = gram_matrix(&r);
        let (values, _) = gram.jacobi_eigen();
        let max = values.iter().copied().fold(0.0f64, f64::max);
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        if min <= 1e-10 * max {
            return Err(HypothesisError::BadContrast(
                "rows are linearly dependent".into(),
            ));
        }
        let q = r.len();
        Ok(HypothesisSpec { r, q, description })
    }
}

fn apply_r(r: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    r.iter()
        .map(|row| row.iter().zip(v.iter()).map(|(a, b)| a * b).sum())
        .collect()
}

fn gram_matrix(r: &[Vec<f64>]) -> SymMat<f64> {
    let q = r.len();
    let mut m = SymMat::zeros(q);
    for i in 0..q {
        for j in i..q {
            let dot: f64 = r[i].iter().zip(r[j].iter()).map(|(a, b)| a * b).sum();
            m.set(i, j, dot);
        }
    }
    m
}

/// `R Σ R'` as a dense symmetric matrix.
fn sandwich(r: &[Vec<f64>], sigma: &SymMat<f64>) -> SymMat<f64> {
    let q = r.len();
    let rows: Vec<Vec<f64>> = r.iter().map(|row| sigma.matvec(row)).collect();
    let mut m = SymMat::zeros(q);
    for i in 0..q {
        for j in i..q {
            let dot: f64 = r[i].iter().zip(rows[j].iter()).map(|(a, b)| a * b).sum();
            m.set(i, j, dot);
        }
    }
    m
}

/// Explicit inverse (or pseudo-inverse) columns of a small symmetric matrix.
/// Returns the columns plus whether the pseudo-inverse fallback was taken.
fn invert_columns(m: &SymMat<f64>) -> (Vec<Vec<f64>>, bool) {
    let q = m.n();
    let mut fell_back = false;
    let cols = (0..q)
        .map(|j| {
            let mut e = vec![0.0; q];
            e[j] = 1.0;
            let (x, fb) = solve_sym_or_pinv(m, &e, 1e-12);
            fell_back |= fb;
            x
        })
        .collect();
    (cols, fell_back)
}

fn quad_with_inverse(inv_cols: &[Vec<f64>], v: &[f64]) -> f64 {
    let q = v.len();
    let mut total = 0.0;
    for j in 0..q {
        let mut acc = 0.0;
        for i in 0..q {
            acc += inv_cols[j][i] * v[i];
        }
        total += v[j] * acc;
    }
    total
}

/// Runs the null-restricted bootstrap Wald test. The bootstrap here is a
/// fresh run (its own stream label and seed), independent of the one that
/// produced `sigma`; `sigma` itself is held fixed across replicates.
pub fn wald_test(
    att: &AttVector,
    sigma: &CovarianceEstimate,
    spec: &HypothesisSpec,
    b: usize,
    seed: u64,
) -> Result<TestResult, HypothesisError> {
    let k = att.index.k();
    if sigma.index != att.index || spec.r.iter().any(|row| row.len() != k) {
        return Err(HypothesisError::IndexMismatch);
    }
    if att.block_contributions.is_empty() {
        return Err(HypothesisError::NoBlockContributions);
    }
    if b < 2 {
        return Err(HypothesisError::TooFewReplicates(b));
    }

    // Null projection: τ̂₀ = τ̂ − R'(RR')⁻¹Rτ̂.
    let r_tau = apply_r(&spec.r, &att.values);
    let gram = gram_matrix(&spec.r);
    let (gram_inv, gram_pinv) = invert_columns(&gram);
    if gram_pinv {
        return Err(HypothesisError::BadContrast(
            "contrast rows are linearly dependent".into(),
        ));
    }
    let mut coeffs = vec![0.0; spec.q];
    for j in 0..spec.q {
        for i in 0..spec.q {
            coeffs[j] += gram_inv[j][i] * r_tau[i];
        }
    }
    let mut tau_null = att.values.clone();
    for (j, row) in spec.r.iter().enumerate() {
        for (v, rv) in tau_null.iter_mut().zip(row.iter()) {
            *v -= coeffs[j] * rv;
        }
    }

    // Observed statistic with the fixed covariance.
    let m = sandwich(&spec.r, &sigma.sigma);
    let (m_inv, singular) = invert_columns(&m);
    if singular {
        log::warn!("contrast covariance RΣR' is singular; using pseudo-inverse");
    }
    let w_obs = quad_with_inverse(&m_inv, &r_tau);

    // Fresh bootstrap, null-centered. Since Rτ̂₀ = 0, the recentered
    // contrast R(τ̂₀ + τ* − τ̂) reduces to R(τ* − τ̂).
    let replicates = resample_means(att, b, seed, StreamLabel::TestBootstrap);
    let mut n_extreme = 0usize;
    for rep in &replicates {
        let diff: Vec<f64> = rep
            .iter()
            .zip(att.values.iter())
            .map(|(a, b)| a - b)
            .collect();
        let rv = apply_r(&spec.r, &diff);
        let w = quad_with_inverse(&m_inv, &rv);
        if w >= w_obs {
            n_extreme += 1;
        }
    }

    Ok(TestResult {
        description: spec.description.clone(),
        w_obs,
        f_stat: w_obs / spec.q as f64,
        p_value: n_extreme as f64 / b as f64,
        q: spec.q,
        b,
        seed,
        tau_null,
        singular_contrast_covariance: singular,
    })
}

/// Significance marker at the 0.05 / 0.01 / 0.001 levels.
pub fn significance_stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}
