//! Group-time average treatment effect estimates from a nested design.
//!
//! For a cell (g, t), every level-`g` stratum contributes the difference
//! between its treated units' mean outcome at `t` and its comparison
//! members' mean outcome at `t`, where a comparison member must still be
//! untreated at `t` (`G_i > t`). Strata whose comparison side is exhausted
//! at large `t` are dropped from that cell and the weights renormalize.
//! Strata are weighted by their treated counts.
//!
//! Both the unadjusted contrast and the optional linear adjustment are
//! computed through a per-cell influence vector `c` with `τ̂ = Σ_i c_i Y_it`:
//! for the plain contrast, `c` holds the stratum weights directly; for the
//! linear adjustment, `c` is the weighted-least-squares influence of the
//! treatment coefficient in a regression of `Y_t` on treatment and the
//! cohort-`g` covariate window. Linearity in `Y` is what lets the estimate
//! decompose exactly into per-outermost-block contributions, which is the
//! contract the block bootstrap relies on.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::NestedDesign;
use crate::linalg::{solve_sym_or_pinv, SymMat};
use crate::panel::{PanelDataset, Period};

/// Ordered collection of (g, t) cells with `g <= t`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GtIndex {
    pairs: Vec<(Period, Period)>,
}

impl GtIndex {
    pub fn new(pairs: Vec<(Period, Period)>) -> Result<Self, EstimatorError> {
        let mut seen = std::collections::BTreeSet::new();
        for &(g, t) in &pairs {
            if g > t {
                return Err(EstimatorError::BadIndex(format!(
                    "cell ({g}, {t}) has t before adoption"
                )));
            }
            if !seen.insert((g, t)) {
                return Err(EstimatorError::BadIndex(format!(
                    "duplicate cell ({g}, {t})"
                )));
            }
        }
        if pairs.is_empty() {
            return Err(EstimatorError::BadIndex("no cells".into()));
        }
        Ok(GtIndex { pairs })
    }

    /// All cells `g <= t <= t_max` for the given cohorts.
    pub fn all_cells(cohorts: &[Period], t_max: Period) -> Self {
        let pairs = cohorts
            .iter()
            .flat_map(|&g| (g..=t_max).map(move |t| (g, t)))
            .collect();
        GtIndex { pairs }
    }

    pub fn pairs(&self) -> &[(Period, Period)] {
        &self.pairs
    }

    pub fn k(&self) -> usize {
        self.pairs.len()
    }

    pub fn position(&self, g: Period, t: Period) -> Option<usize> {
        self.pairs.iter().position(|&p| p == (g, t))
    }
}

/// Which within-stratum contrast to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adjustment {
    None,
    Linear,
}

impl std::str::FromStr for Adjustment {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Adjustment::None),
            "linear" => Ok(Adjustment::Linear),
            other => Err(format!("unknown adjustment `{other}`")),
        }
    }
}

/// Point estimates plus the exact per-outermost-block decomposition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttVector {
    pub index: GtIndex,
    pub values: Vec<f64>,
    /// `block_contributions[m][k]`: block m's linearized contribution to
    /// cell k. Row means over blocks reproduce `values` exactly, and rows
    /// carry the delta-method deviations of the weighted (ratio) estimator,
    /// so resampling rows and averaging mimics recomputing the estimator on
    /// resampled blocks.
    pub block_contributions: Vec<Vec<f64>>,
    /// Outermost stratum id backing each contribution row.
    pub block_ids: Vec<usize>,
    pub n_strata_used: Vec<usize>,
    pub n_strata_dropped: Vec<usize>,
}

impl AttVector {
    pub fn n_blocks(&self) -> usize {
        self.block_ids.len()
    }
}

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("bad cell index: {0}")]
    BadIndex(String),
    #[error("cell ({g}, {t}) has no stratum with an untreated comparison")]
    EmptyCell { g: Period, t: Period },
    #[error("unit {unit} has no outcome at period {period}")]
    MissingOutcome { unit: usize, period: Period },
    #[error("cohort {0} is not part of the design")]
    CohortNotInDesign(Period),
    #[error("design and panel disagree on the unit list")]
    DesignMismatch,
}

fn outcome_at(data: &PanelDataset, unit: usize, t: Period) -> Result<f64, EstimatorError> {
    data.outcome(unit, t)
        .ok_or(EstimatorError::MissingOutcome { unit, period: t })
}

/// Estimates ATT(g, t) for every cell in `index` from the nested design.
pub fn estimate_att(
    data: &PanelDataset,
    design: &NestedDesign,
    index: &GtIndex,
    adjust: Adjustment,
) -> Result<AttVector, EstimatorError> {
    if !design.matches_panel(data) {
        return Err(EstimatorError::DesignMismatch);
    }
    let outer = design.outermost_level();
    let block_ids: Vec<usize> = design.levels[&outer].clone();
    let block_row: BTreeMap<usize, usize> = block_ids
        .iter()
        .enumerate()
        .map(|(row, &id)| (id, row))
        .collect();
    let n1 = block_ids.len();

    let k = index.k();
    let mut values = vec![0.0; k];
    let mut contributions = vec![vec![0.0; k]; n1];
    let mut n_used = vec![0usize; k];
    let mut n_dropped = vec![0usize; k];

    for (cell, &(g, t)) in index.pairs().iter().enumerate() {
        if !design.config.cohorts.contains(&g) {
            return Err(EstimatorError::CohortNotInDesign(g));
        }
        if t > data.t_max() {
            return Err(EstimatorError::BadIndex(format!(
                "cell ({g}, {t}) lies beyond the panel horizon {}",
                data.t_max()
            )));
        }

        // Usable strata: level-g strata with a comparison member untreated
        // at t. Comparison membership is decided by adoption, not by which
        // side of the match a unit entered on.
        let mut used: Vec<CellStratum> = Vec::new();
        for s in design.strata_at(g) {
            let comparisons: Vec<usize> = s
                .members
                .iter()
                .copied()
                .filter(|&u| design.unit_cohorts[u].later_than(t))
                .collect();
            if comparisons.is_empty() {
                n_dropped[cell] += 1;
                continue;
            }
            used.push(CellStratum {
                stratum_id: s.id,
                treated: s.treated.clone(),
                comparisons,
            });
        }
        if used.is_empty() {
            return Err(EstimatorError::EmptyCell { g, t });
        }
        n_used[cell] = used.len();
        let total_treated: usize = used.iter().map(|c| c.treated.len()).sum();

        // Influence coefficients per unit; τ̂ = Σ c_u · Y_ut. The linear
        // path also yields per-unit scores c_u (Y_u − X_u'β̂) used below for
        // the resampling linearization.
        let (influence, scores): (BTreeMap<usize, f64>, Option<BTreeMap<usize, f64>>) =
            match adjust {
                Adjustment::None => {
                    let mut c = BTreeMap::new();
                    for cellstr in &used {
                        let w = cellstr.treated.len() as f64 / total_treated as f64;
                        for &u in &cellstr.treated {
                            c.insert(u, w / cellstr.treated.len() as f64);
                        }
                        for &u in &cellstr.comparisons {
                            c.insert(u, -w / cellstr.comparisons.len() as f64);
                        }
                    }
                    (c, None)
                }
                Adjustment::Linear => {
                    let (c, s) = linear_influence(data, g, t, &used)?;
                    (c, Some(s))
                }
            };

        let mut tau = 0.0;
        let mut local_rows = vec![0.0f64; n1]; // block totals a_j of the contrast
        let mut weight_rows = vec![0.0f64; n1]; // block shares p_j of treated weight
        let mut score_rows = vec![0.0f64; n1]; // block sums of WLS scores
        for cellstr in &used {
            let row = block_row[&design.outermost_ancestor(cellstr.stratum_id)];
            weight_rows[row] += cellstr.treated.len() as f64 / total_treated as f64;
            let mut local = 0.0;
            for &u in cellstr.treated.iter().chain(cellstr.comparisons.iter()) {
                if let Some(&c) = influence.get(&u) {
                    local += c * outcome_at(data, u, t)?;
                }
                if let Some(s) = &scores {
                    if let Some(&v) = s.get(&u) {
                        score_rows[row] += v;
                    }
                }
            }
            tau += local;
            local_rows[row] += local;
        }
        values[cell] = tau;

        // Variance-correct block rows. The estimate is a ratio of block
        // totals, τ̂ = Σ_j a_j / Σ_j p_j, so resampling blocks and averaging
        // raw contributions would add a spurious τ̂²·Var(p_j) term. Store the
        // delta-method linearization instead: deviation (a_j − p_j τ̂) for
        // the plain contrast, the per-block WLS score sum for the linear
        // adjustment. Rows are recentred so their mean is exactly τ̂.
        let dev = |row: usize| match &scores {
            None => local_rows[row] - weight_rows[row] * tau,
            Some(_) => score_rows[row],
        };
        let mean_dev: f64 = (0..n1).map(dev).sum::<f64>() / n1 as f64;
        for row in 0..n1 {
            contributions[row][cell] = tau + n1 as f64 * (dev(row) - mean_dev);
        }
    }

    Ok(AttVector {
        index: index.clone(),
        values,
        block_contributions: contributions,
        block_ids,
        n_strata_used: n_used,
        n_strata_dropped: n_dropped,
    })
}

/// Influence vector of the treatment coefficient in a weighted least squares
/// fit of `Y_t` on (intercept, treatment, covariate window at g), with full
/// matching weights: treated units weigh 1, comparisons weigh the stratum's
/// treated/comparison ratio, so the unadjusted limit is the same weighted
/// contrast as `Adjustment::None`.
///
/// Also returns each unit's score c_u (Y_u − X_u'β̂); per-block sums of the
/// scores are the first-order effect of leaving that block out, which is
/// what the block bootstrap needs.
fn linear_influence(
    data: &PanelDataset,
    g: Period,
    t: Period,
    used: &[CellStratum],
) -> Result<(BTreeMap<usize, f64>, BTreeMap<usize, f64>), EstimatorError> {
    let dim = 2 + data.window_dim(g);
    let mut rows: Vec<(usize, f64, Vec<f64>)> = Vec::new(); // (unit, weight, x)
    for cell in used {
        for &u in &cell.treated {
            let mut x = vec![1.0, 1.0];
            x.extend(data.covariate_window(u, g));
            rows.push((u, 1.0, x));
        }
        let w = cell.treated.len() as f64 / cell.comparisons.len() as f64;
        for &u in &cell.comparisons {
            let mut x = vec![1.0, 0.0];
            x.extend(data.covariate_window(u, g));
            rows.push((u, w, x));
        }
    }

    let mut a = SymMat::zeros(dim);
    for (_, w, x) in &rows {
        for i in 0..dim {
            for j in i..dim {
                let v = a.get(i, j) + w * x[i] * x[j];
                a.set(i, j, v);
            }
        }
    }
    // Tiny ridge on the covariate block only, to tolerate near-collinear
    // windows without touching the intercept/treatment contrast.
    let scale = (2..dim).map(|i| a.get(i, i)).fold(0.0f64, f64::max);
    if scale > 0.0 {
        for i in 2..dim {
            a.set(i, i, a.get(i, i) + 1e-10 * scale);
        }
    }
    let mut e_z = vec![0.0; dim];
    e_z[1] = 1.0;
    let (alpha, _fell_back) = solve_sym_or_pinv(&a, &e_z, 1e-12);

    // Fitted coefficients, for the per-unit scores.
    let mut xty = vec![0.0; dim];
    for (u, w, x) in &rows {
        let y = outcome_at(data, *u, t)?;
        for (acc, xi) in xty.iter_mut().zip(x.iter()) {
            *acc += w * xi * y;
        }
    }
    let (beta, _) = solve_sym_or_pinv(&a, &xty, 1e-12);

    let mut influence: BTreeMap<usize, f64> = BTreeMap::new();
    let mut scores: BTreeMap<usize, f64> = BTreeMap::new();
    for (u, w, x) in &rows {
        let proj: f64 = alpha.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
        let c = w * proj;
        *influence.entry(*u).or_insert(0.0) += c;
        let fitted: f64 = beta.iter().zip(x.iter()).map(|(b, xi)| b * xi).sum();
        *scores.entry(*u).or_insert(0.0) += c * (outcome_at(data, *u, t)? - fitted);
    }
    // Normalize so a pure treatment shift of Δ moves the estimate by Δ even
    // when the normal equations were solved by pseudo-inverse.
    // For a proper solve the treated influence sums to one exactly (it is
    // the Z row of A·α = e_Z); after a pseudo-inverse fallback it may not,
    // so rescale to keep treatment-shift equivariance.
    let treated_mass: f64 = rows
        .iter()
        .filter(|(_, _, x)| x[1] == 1.0)
        .map(|(u, _, _)| influence[u])
        .sum::<f64>();
    if treated_mass.abs() > 1e-12 && (treated_mass - 1.0).abs() > 1e-9 {
        for v in influence.values_mut() {
            *v /= treated_mass;
        }
        for v in scores.values_mut() {
            *v /= treated_mass;
        }
    }
    Ok((influence, scores))
}

/// One level-g stratum restricted to a (g, t) cell.
struct CellStratum {
    stratum_id: usize,
    treated: Vec<usize>,
    comparisons: Vec<usize>,
}

/// Unmatched difference in means between cohort g and the units still
/// untreated at t; baseline for bias comparisons. No block decomposition.
pub fn naive_att(data: &PanelDataset, index: &GtIndex) -> Result<AttVector, EstimatorError> {
    let k = index.k();
    let mut values = vec![0.0; k];
    for (cell, &(g, t)) in index.pairs().iter().enumerate() {
        let treated = data.cohort_units(g);
        let comparisons = data.pool_after(t);
        if treated.is_empty() || comparisons.is_empty() {
            return Err(EstimatorError::EmptyCell { g, t });
        }
        let mt: f64 = treated
            .iter()
            .map(|&u| outcome_at(data, u, t))
            .sum::<Result<f64, _>>()?
            / treated.len() as f64;
        let mc: f64 = comparisons
            .iter()
            .map(|&u| outcome_at(data, u, t))
            .sum::<Result<f64, _>>()?
            / comparisons.len() as f64;
        values[cell] = mt - mc;
    }
    Ok(AttVector {
        index: index.clone(),
        values,
        block_contributions: Vec::new(),
        block_ids: Vec::new(),
        n_strata_used: vec![0; k],
        n_strata_dropped: vec![0; k],
    })
}

/// Writes estimates (and, when given, standard errors with normal 95%
/// intervals) in the documented CSV layout.
pub fn write_att_csv<W: std::io::Write>(
    att: &AttVector,
    se: Option<&[f64]>,
    writer: W,
) -> Result<(), std::io::Error> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record([
        "g",
        "t",
        "estimate",
        "se",
        "ci_lo",
        "ci_hi",
        "n_strata_used",
        "n_strata_dropped",
    ])?;
    for (k, &(g, t)) in att.index.pairs().iter().enumerate() {
        let est = att.values[k];
        let (se_s, lo_s, hi_s) = match se {
            Some(s) => {
                let half = 1.959963984540054 * s[k];
                (
                    format!("{}", s[k]),
                    format!("{}", est - half),
                    format!("{}", est + half),
                )
            }
            None => (String::new(), String::new(), String::new()),
        };
        wtr.write_record([
            g.to_string(),
            t.to_string(),
            format!("{est}"),
            se_s,
            lo_s,
            hi_s,
            att.n_strata_used[k].to_string(),
            att.n_strata_dropped[k].to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
