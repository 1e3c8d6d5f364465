//! Covariate-history distances: Mahalanobis and rank-based Mahalanobis
//! metrics over time-indexed windows, plus the unit-to-set averaging rule.
//!
//! A metric is fitted on the pool relevant to one cohort period (treated
//! cohort plus not-yet-treated units), whitening each unit's covariate
//! window with the inverse pooled covariance so that pairwise distances
//! reduce to Euclidean distances between whitened coordinates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::SymMat;
use crate::num::Scalar;
use crate::panel::{PanelDataset, Period};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Mahalanobis,
    RankMahalanobis,
}

impl std::str::FromStr for Metric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mahalanobis" => Ok(Metric::Mahalanobis),
            "rank" | "rank_mahalanobis" => Ok(Metric::RankMahalanobis),
            other => Err(format!("unknown metric `{other}`")),
        }
    }
}

/// Metric choice plus ridge regularization added to the covariance diagonal.
/// `ridge: None` selects the default `1e-6 * trace / dim`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceSpec {
    pub metric: Metric,
    pub ridge: Option<f64>,
}

impl Default for DistanceSpec {
    fn default() -> Self {
        DistanceSpec {
            metric: Metric::RankMahalanobis,
            ridge: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum DistanceError {
    #[error("unit {0} is not in the fitted pool")]
    UnknownUnit(usize),
    #[error("stratum is empty")]
    EmptyStratum,
    #[error("covariance is singular and no ridge was allowed")]
    SingularCovariance,
    #[error("no treated or no comparison entities")]
    EmptyMatrix,
}

/// Replaces each value by its average rank (1-based; ties share the mean
/// rank of their run).
pub fn average_ranks<S: Scalar>(values: &[S]) -> Vec<S> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("no NaN in ranks"));
    let mut ranks = vec![S::zero(); n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j (0-based) share mean rank
        let mean_rank = S::from_count(i + j + 2) / S::from_count(2);
        for &idx in &order[i..=j] {
            ranks[idx] = mean_rank;
        }
        i = j + 1;
    }
    ranks
}

/// Metric fitted on one pool: whitened window coordinates per unit.
#[derive(Debug, Clone)]
pub struct FittedMetric<S> {
    g: Period,
    index_of: BTreeMap<usize, usize>,
    coords: Vec<Vec<S>>,
}

impl<S: Scalar> FittedMetric<S> {
    /// Fits from raw windows keyed by unit id. `ridge = None` uses the
    /// default `1e-6 * trace / dim`; `Some(0)` forces an unregularized fit
    /// and fails on singular covariance.
    pub fn fit(
        g: Period,
        units: &[usize],
        windows: &[Vec<S>],
        metric: Metric,
        ridge: Option<S>,
    ) -> Result<Self, DistanceError> {
        assert_eq!(units.len(), windows.len());
        let n = units.len();
        let dim = windows.first().map(|w| w.len()).unwrap_or(0);
        assert!(dim >= 1, "window dimension must be at least 1");

        let transformed: Vec<Vec<S>> = match metric {
            Metric::Mahalanobis => windows.to_vec(),
            Metric::RankMahalanobis => {
                let mut cols: Vec<Vec<S>> = Vec::with_capacity(dim);
                for d in 0..dim {
                    let col: Vec<S> = windows.iter().map(|w| w[d]).collect();
                    cols.push(average_ranks(&col));
                }
                (0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect()
            }
        };

        let mut cov = SymMat::covariance_of(&transformed, dim);
        if metric == Metric::RankMahalanobis && n >= 2 {
            // Rescale each diagonal entry to the variance of untied ranks,
            // (n^2 - 1) / 12, per Rosenbaum's construction.
            let target = (S::from_count(n * n) - S::one()) / S::from_count(12);
            let scale: Vec<S> = (0..dim)
                .map(|i| {
                    let v = cov.get(i, i);
                    if v > S::zero() {
                        (target / v).sqrt()
                    } else {
                        S::zero()
                    }
                })
                .collect();
            let mut rescaled = SymMat::zeros(dim);
            for i in 0..dim {
                for j in i..dim {
                    rescaled.set(i, j, cov.get(i, j) * scale[i] * scale[j]);
                }
            }
            cov = rescaled;
        }

        let eps = match ridge {
            Some(e) => e,
            None => {
                S::from_f64(1e-6).unwrap() * cov.trace() / S::from_count(dim)
            }
        };
        cov.add_to_diag(eps);
        let chol = match cov.cholesky() {
            Some(c) => c,
            None if eps > S::zero() => return Err(DistanceError::SingularCovariance),
            None => {
                // Degenerate pool (e.g. all windows identical): fall back to
                // the identity whitening so all distances are zero or raw.
                let mut ident = SymMat::zeros(dim);
                ident.add_to_diag(S::one());
                ident.cholesky().unwrap()
            }
        };

        let coords: Vec<Vec<S>> = transformed
            .into_iter()
            .map(|w| {
                let mut v = w;
                chol.forward_solve(&mut v);
                v
            })
            .collect();
        let index_of = units.iter().enumerate().map(|(k, &u)| (u, k)).collect();
        Ok(FittedMetric {
            g,
            index_of,
            coords,
        })
    }

    pub fn g(&self) -> Period {
        self.g
    }

    fn coord(&self, unit: usize) -> Result<&[S], DistanceError> {
        self.index_of
            .get(&unit)
            .map(|&k| self.coords[k].as_slice())
            .ok_or(DistanceError::UnknownUnit(unit))
    }

    /// Mahalanobis distance `sqrt((v_i - v_j)' M (v_i - v_j))`.
    pub fn unit_distance(&self, i: usize, j: usize) -> Result<S, DistanceError> {
        let a = self.coord(i)?;
        let b = self.coord(j)?;
        Ok(euclid(a, b))
    }

    /// Average distance from `i` to the members of a stratum.
    pub fn unit_to_set_distance(&self, i: usize, stratum: &[usize]) -> Result<S, DistanceError> {
        if stratum.is_empty() {
            return Err(DistanceError::EmptyStratum);
        }
        let a = self.coord(i)?;
        let mut total = S::zero();
        for &k in stratum {
            total += euclid(a, self.coord(k)?);
        }
        Ok(total / S::from_count(stratum.len()))
    }
}

/// Fits a metric on a panel: windows `X_{t0..g-1}` for every unit in `pool`.
pub fn fit_metric(
    data: &PanelDataset,
    g: Period,
    pool: &[usize],
    spec: &DistanceSpec,
) -> Result<FittedMetric<f64>, DistanceError> {
    let windows: Vec<Vec<f64>> = pool.iter().map(|&u| data.covariate_window(u, g)).collect();
    FittedMetric::fit(g, pool, &windows, spec.metric, spec.ridge)
}

fn euclid<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (*x - *y) * (*x - *y))
        .sum::<S>()
        .sqrt()
}

/// A comparison entity: a raw unit or a pseudo-control stratum from the
/// previous matching level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ComparisonEntity {
    Unit(usize),
    PseudoControl { stratum: usize, members: Vec<usize> },
}

impl ComparisonEntity {
    pub fn members(&self) -> Vec<usize> {
        match self {
            ComparisonEntity::Unit(u) => vec![*u],
            ComparisonEntity::PseudoControl { members, .. } => members.clone(),
        }
    }
}

/// Distances from each treated unit (row) to each comparison entity
/// (column), conditioned on cohort period `g`.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    pub g: Period,
    pub treated: Vec<usize>,
    pub comparisons: Vec<ComparisonEntity>,
    values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn n_treated(&self) -> usize {
        self.treated.len()
    }

    pub fn n_comparisons(&self) -> usize {
        self.comparisons.len()
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.comparisons.len() + col]
    }

    pub fn from_values(
        g: Period,
        treated: Vec<usize>,
        comparisons: Vec<ComparisonEntity>,
        values: Vec<f64>,
    ) -> Self {
        assert_eq!(values.len(), treated.len() * comparisons.len());
        DistanceMatrix {
            g,
            treated,
            comparisons,
            values,
        }
    }
}

/// Builds the full treated-by-comparison distance matrix. Ordering follows
/// the input slices, so the result is deterministic in their order.
pub fn build_distance_matrix(
    metric: &FittedMetric<f64>,
    treated: &[usize],
    comparisons: &[ComparisonEntity],
) -> Result<DistanceMatrix, DistanceError> {
    if treated.is_empty() || comparisons.is_empty() {
        return Err(DistanceError::EmptyMatrix);
    }
    let member_lists: Vec<Vec<usize>> = comparisons.iter().map(|c| c.members()).collect();
    let mut values = Vec::with_capacity(treated.len() * comparisons.len());
    for &i in treated {
        for members in &member_lists {
            values.push(metric.unit_to_set_distance(i, members)?);
        }
    }
    Ok(DistanceMatrix::from_values(
        metric.g(),
        treated.to_vec(),
        comparisons.to_vec(),
        values,
    ))
}
