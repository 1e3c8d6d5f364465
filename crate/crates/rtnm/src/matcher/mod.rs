//! Optimal full matching of treated units to comparison entities.
//!
//! A stratification partitions every treated unit and every comparison
//! entity into strata that are stars: either one treated unit with one or
//! more comparisons, or several treated units sharing a single comparison.
//! The objective is the sum of treated-to-comparison distances over the
//! pairs inside each stratum, and the solver is exact.
//!
//! Two solve paths share the same integer cost model (distances scaled by
//! 10^6 and perturbed with a seed-derived tie-break):
//!
//! * when ratio or size bounds are active, the problem is a min-cost
//!   circulation with degree lower bounds, solved by successive shortest
//!   paths;
//! * the unbounded default reduces to a minimum-weight edge cover, solved
//!   as a maximum-gain matching plus cheapest edges for uncovered vertices,
//!   which scales to panels with thousands of units per side.

mod flow;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distance::DistanceMatrix;
use crate::rng::{stream, StreamLabel};
use flow::MinCostFlow;

/// Fixed-point scale applied to distances before integer optimization.
pub const COST_SCALE: f64 = 1e6;

/// Multiplier separating scaled costs from tie-break perturbations. The
/// total perturbation across any solution stays below one scaled-cost unit,
/// so perturbation can only choose among cost-ties.
const TIE_MULTIPLIER: i64 = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchBounds {
    /// Minimum comparisons matched to each treated unit. Values above one
    /// force every stratum to be centered on a single treated unit.
    pub min_ratio: u32,
    /// Maximum members on the larger side of a stratum.
    pub max_ratio: Option<u32>,
    /// Maximum total stratum size (treated plus comparisons).
    pub max_stratum_size: Option<u32>,
}

impl Default for MatchBounds {
    fn default() -> Self {
        MatchBounds {
            min_ratio: 1,
            max_ratio: None,
            max_stratum_size: Some(10),
        }
    }
}

impl MatchBounds {
    pub fn unbounded() -> Self {
        MatchBounds {
            min_ratio: 1,
            max_ratio: None,
            max_stratum_size: None,
        }
    }

    fn validate(&self) -> Result<(), MatchError> {
        if self.min_ratio == 0 {
            return Err(MatchError::InvalidBounds("min_ratio must be at least 1".into()));
        }
        if let Some(mr) = self.max_ratio {
            if mr < self.min_ratio {
                return Err(MatchError::InvalidBounds(
                    "max_ratio is below min_ratio".into(),
                ));
            }
        }
        if let Some(ms) = self.max_stratum_size {
            if ms < self.min_ratio + 1 {
                return Err(MatchError::InvalidBounds(
                    "max_stratum_size leaves no room for min_ratio comparisons".into(),
                ));
            }
        }
        Ok(())
    }

    fn is_unbounded(&self) -> bool {
        self.min_ratio == 1 && self.max_ratio.is_none() && self.max_stratum_size.is_none()
    }

    /// Largest allowed degree on the bigger side of a star, capped by
    /// `fallback` when no bound is set.
    fn degree_cap(&self, fallback: usize) -> usize {
        let mut cap = fallback;
        if let Some(mr) = self.max_ratio {
            cap = cap.min(mr as usize);
        }
        if let Some(ms) = self.max_stratum_size {
            cap = cap.min(ms as usize - 1);
        }
        cap
    }
}

#[derive(Debug, Clone)]
pub struct FullMatchProblem {
    pub distances: DistanceMatrix,
    pub bounds: MatchBounds,
}

/// One stratum, in row/column indices of the distance matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchedStratum {
    pub treated: Vec<usize>,
    pub comparisons: Vec<usize>,
}

/// An exact cover of all treated rows and comparison columns by star strata.
#[derive(Debug, Clone, PartialEq)]
pub struct Stratification {
    pub strata: Vec<MatchedStratum>,
    /// Sum of within-stratum treated-to-comparison distances (unscaled).
    pub objective: f64,
}

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("no treated units or no comparison entities")]
    Empty,
    #[error("matching is infeasible: {0}")]
    Infeasible(String),
    #[error("invalid matching bounds: {0}")]
    InvalidBounds(String),
    #[error("distance too large for integer cost scaling")]
    CostOverflow,
    #[error("distances must be finite and nonnegative")]
    BadDistance,
}

/// Solves the full matching problem exactly. The seed only breaks ties
/// between solutions of equal cost.
pub fn solve_full_match(
    problem: &FullMatchProblem,
    seed: u64,
) -> Result<Stratification, MatchError> {
    let dm = &problem.distances;
    let bounds = &problem.bounds;
    bounds.validate()?;
    let nt = dm.n_treated();
    let nc = dm.n_comparisons();
    if nt == 0 || nc == 0 {
        return Err(MatchError::Empty);
    }

    check_feasible_counts(nt, nc, bounds)?;
    let costs = perturbed_costs(dm, seed)?;

    let edges = if bounds.is_unbounded() {
        edge_cover(nt, nc, &costs)
    } else {
        bounded_flow(nt, nc, bounds, &costs)?
    };
    decode_stars(dm, &costs, edges)
}

/// Counting feasibility check; for the networks built here (complete
/// bipartite) these conditions are also sufficient.
fn check_feasible_counts(nt: usize, nc: usize, bounds: &MatchBounds) -> Result<(), MatchError> {
    let mr = bounds.min_ratio as u64;
    let cap = bounds.degree_cap(nc.max(nt)) as u64;
    let (nt64, nc64) = (nt as u64, nc as u64);
    if mr > 1 {
        // Every stratum is one treated unit with mr..=cap comparisons.
        if nt64.saturating_mul(mr) > nc64 {
            return Err(MatchError::Infeasible(format!(
                "{nt} treated units need at least {} comparisons, have {nc}",
                nt64 * mr
            )));
        }
        if nc64 > nt64.saturating_mul(cap) {
            return Err(MatchError::Infeasible(format!(
                "{nc} comparisons exceed {nt} treated units times the ratio cap {cap}"
            )));
        }
    } else {
        if nc64 > nt64.saturating_mul(cap) || nt64 > nc64.saturating_mul(cap) {
            return Err(MatchError::Infeasible(format!(
                "sides of size {nt} and {nc} cannot be covered with stars of degree at most {cap}"
            )));
        }
    }
    Ok(())
}

/// Scaled integer costs with a seed-derived tie-break in the low bits.
/// Row-major `nt x nc`.
fn perturbed_costs(dm: &DistanceMatrix, seed: u64) -> Result<Vec<i64>, MatchError> {
    let nt = dm.n_treated();
    let nc = dm.n_comparisons();
    // Total perturbation over any solution (at most nt + nc edges) must stay
    // below TIE_MULTIPLIER so perturbed order refines the true cost order.
    let pert_range = ((TIE_MULTIPLIER - 1) as u64 / (nt + nc) as u64).max(1);
    let mut key_rng = stream(seed, StreamLabel::MatchTieBreak, 0);
    let key = rand::RngCore::next_u64(&mut key_rng);

    // Overflow guard: path costs accumulate over at most nt + nc selected
    // edges plus slack for potentials.
    let budget = i64::MAX / (4 * TIE_MULTIPLIER * (nt + nc + 4) as i64);
    let mut out = Vec::with_capacity(nt * nc);
    for r in 0..nt {
        for c in 0..nc {
            let d = dm.value(r, c);
            if !d.is_finite() || d < 0.0 {
                return Err(MatchError::BadDistance);
            }
            let scaled = (d * COST_SCALE).round();
            if scaled as i64 > budget {
                return Err(MatchError::CostOverflow);
            }
            let pert = (crate::rng::mix64(key ^ ((r as u64) << 32 | c as u64)) % pert_range) as i64;
            out.push(scaled as i64 * TIE_MULTIPLIER + pert);
        }
    }
    Ok(out)
}

/// Min-cost circulation with degree lower bounds. Node layout:
/// super-source, super-sink, source, sink, treated rows, comparison cols.
fn bounded_flow(
    nt: usize,
    nc: usize,
    bounds: &MatchBounds,
    costs: &[i64],
) -> Result<Vec<(usize, usize)>, MatchError> {
    let cap = bounds.degree_cap(nc.max(nt)) as i64;
    let (lo_t, hi_t) = (bounds.min_ratio as i64, cap);
    let (lo_c, hi_c) = if bounds.min_ratio > 1 {
        (1i64, 1i64)
    } else {
        (1i64, cap)
    };

    let ss = 0;
    let tt = 1;
    let s = 2;
    let t = 3;
    let treated = |r: usize| 4 + r;
    let comp = |c: usize| 4 + nt + c;
    let mut g = MinCostFlow::new(4 + nt + nc);

    for r in 0..nt {
        g.add_edge(s, treated(r), hi_t - lo_t, 0);
        g.add_edge(ss, treated(r), lo_t, 0);
    }
    g.add_edge(s, tt, nt as i64 * lo_t, 0);
    let mut pair_ids = vec![0usize; nt * nc];
    for r in 0..nt {
        for c in 0..nc {
            pair_ids[r * nc + c] = g.add_edge(treated(r), comp(c), 1, costs[r * nc + c]);
        }
    }
    for c in 0..nc {
        if hi_c > lo_c {
            g.add_edge(comp(c), t, hi_c - lo_c, 0);
        }
        g.add_edge(comp(c), tt, lo_c, 0);
    }
    g.add_edge(ss, t, nc as i64 * lo_c, 0);
    g.add_edge(t, s, i64::MAX / 4, 0);

    let need = nt as i64 * lo_t + nc as i64 * lo_c;
    let (flow, _cost) = g.run(ss, tt, need, vec![0; 4 + nt + nc]);
    if flow < need {
        return Err(MatchError::Infeasible(
            "degree bounds admit no feasible assignment".into(),
        ));
    }
    let mut edges = Vec::new();
    for r in 0..nt {
        for c in 0..nc {
            if g.flow_on(pair_ids[r * nc + c]) > 0 {
                edges.push((r, c));
            }
        }
    }
    Ok(edges)
}

/// Minimum-weight edge cover for the unbounded case: a maximum-gain matching
/// plus each uncovered vertex's cheapest edge.
fn edge_cover(nt: usize, nc: usize, costs: &[i64]) -> Vec<(usize, usize)> {
    // Cheapest incident edge per vertex.
    let mut row_min = vec![(i64::MAX, 0usize); nt];
    let mut col_min = vec![(i64::MAX, 0usize); nc];
    for r in 0..nt {
        for c in 0..nc {
            let v = costs[r * nc + c];
            if v < row_min[r].0 {
                row_min[r] = (v, c);
            }
            if v < col_min[c].0 {
                col_min[c] = (v, r);
            }
        }
    }

    // Matching an edge (r, c) saves gain = row_min + col_min - cost relative
    // to covering r and c separately; only positive gains can help.
    let mut gain_edges: Vec<(usize, usize, i64)> = Vec::new();
    for r in 0..nt {
        for c in 0..nc {
            let gain = row_min[r].0 + col_min[c].0 - costs[r * nc + c];
            if gain > 0 {
                gain_edges.push((r, c, gain));
            }
        }
    }

    let mut matched: Vec<(usize, usize)> = Vec::new();
    if !gain_edges.is_empty() {
        let source = 0;
        let sink = 1;
        let treated = |r: usize| 2 + r;
        let comp = |c: usize| 2 + nt + c;
        let n = 2 + nt + nc;
        let mut g = MinCostFlow::new(n);
        let mut has_row = vec![false; nt];
        let mut max_gain_col = vec![0i64; nc];
        for &(_, c, gain) in &gain_edges {
            max_gain_col[c] = max_gain_col[c].max(gain);
        }
        let mut ids = Vec::with_capacity(gain_edges.len());
        let mut has_col = vec![false; nc];
        for &(r, c, gain) in &gain_edges {
            if !has_row[r] {
                has_row[r] = true;
                g.add_edge(source, treated(r), 1, 0);
            }
            if !has_col[c] {
                has_col[c] = true;
                g.add_edge(comp(c), sink, 1, 0);
            }
            ids.push((r, c, g.add_edge(treated(r), comp(c), 1, -gain)));
        }
        // Potentials certifying nonnegative reduced costs on the -gain arcs.
        let mut potentials = vec![0i64; n];
        let mut sink_pot = 0i64;
        for c in 0..nc {
            if has_col[c] {
                potentials[comp(c)] = -max_gain_col[c];
                sink_pot = sink_pot.min(-max_gain_col[c]);
            }
        }
        potentials[sink] = sink_pot;
        g.run_negative_paths(source, sink, nt.min(nc) as i64, potentials);
        for &(r, c, id) in &ids {
            if g.flow_on(id) > 0 {
                matched.push((r, c));
            }
        }
    }

    let mut covered_r = vec![false; nt];
    let mut covered_c = vec![false; nc];
    for &(r, c) in &matched {
        covered_r[r] = true;
        covered_c[c] = true;
    }
    let mut edges: BTreeSet<(usize, usize)> = matched.into_iter().collect();
    for r in 0..nt {
        if !covered_r[r] {
            edges.insert((r, row_min[r].1));
        }
    }
    for c in 0..nc {
        if !covered_c[c] {
            edges.insert((col_min[c].1, c));
        }
    }
    edges.into_iter().collect()
}

/// Turns a degree-feasible edge set into star strata, dropping edges whose
/// both endpoints remain covered without them.
fn decode_stars(
    dm: &DistanceMatrix,
    costs: &[i64],
    mut edges: Vec<(usize, usize)>,
) -> Result<Stratification, MatchError> {
    let nt = dm.n_treated();
    let nc = dm.n_comparisons();
    let mut deg_t = vec![0usize; nt];
    let mut deg_c = vec![0usize; nc];
    for &(r, c) in &edges {
        deg_t[r] += 1;
        deg_c[c] += 1;
    }

    // Remove redundant edges (both endpoints of degree two or more), most
    // expensive first; at an optimum these can only be zero-cost ties.
    loop {
        let mut worst: Option<(i64, usize)> = None;
        for (k, &(r, c)) in edges.iter().enumerate() {
            if deg_t[r] >= 2 && deg_c[c] >= 2 {
                let cost = costs[r * nc + c];
                if worst.map_or(true, |(w, _)| cost > w) {
                    worst = Some((cost, k));
                }
            }
        }
        match worst {
            Some((_, k)) => {
                let (r, c) = edges.swap_remove(k);
                deg_t[r] -= 1;
                deg_c[c] -= 1;
            }
            None => break,
        }
    }

    let mut cols_of = vec![Vec::new(); nt];
    let mut rows_of = vec![Vec::new(); nc];
    for &(r, c) in &edges {
        cols_of[r].push(c);
        rows_of[c].push(r);
    }
    for v in cols_of.iter_mut() {
        v.sort_unstable();
    }
    for v in rows_of.iter_mut() {
        v.sort_unstable();
    }

    let mut strata = Vec::new();
    let mut objective = 0.0f64;
    let mut used_t = vec![false; nt];
    let mut used_c = vec![false; nc];
    // Comparison-centered stars first, then treated-centered ones.
    for c in 0..nc {
        if deg_c[c] >= 2 {
            for &r in &rows_of[c] {
                debug_assert_eq!(deg_t[r], 1, "non-star component survived decoding");
                used_t[r] = true;
                objective += dm.value(r, c);
            }
            used_c[c] = true;
            strata.push(MatchedStratum {
                treated: rows_of[c].clone(),
                comparisons: vec![c],
            });
        }
    }
    for r in 0..nt {
        if used_t[r] || deg_t[r] == 0 {
            continue;
        }
        for &c in &cols_of[r] {
            debug_assert_eq!(deg_c[c], 1, "non-star component survived decoding");
            used_c[c] = true;
            objective += dm.value(r, c);
        }
        used_t[r] = true;
        strata.push(MatchedStratum {
            treated: vec![r],
            comparisons: cols_of[r].clone(),
        });
    }

    if used_t.iter().any(|u| !u) || used_c.iter().any(|u| !u) {
        return Err(MatchError::Infeasible(
            "solver left a unit uncovered; this indicates an internal inconsistency".into(),
        ));
    }
    strata.sort_by_key(|s| s.treated[0]);
    Ok(Stratification { strata, objective })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distance::ComparisonEntity;
    use approx::assert_relative_eq;

    fn problem(nt: usize, nc: usize, values: Vec<f64>, bounds: MatchBounds) -> FullMatchProblem {
        let treated = (0..nt).collect();
        let comparisons = (0..nc).map(|c| ComparisonEntity::Unit(1000 + c)).collect();
        FullMatchProblem {
            distances: DistanceMatrix::from_values(1, treated, comparisons, values),
            bounds,
        }
    }

    fn assert_exact_cover(s: &Stratification, nt: usize, nc: usize) {
        let mut seen_t = vec![0usize; nt];
        let mut seen_c = vec![0usize; nc];
        for st in &s.strata {
            assert!(st.treated.len() == 1 || st.comparisons.len() == 1, "not a star");
            for &r in &st.treated {
                seen_t[r] += 1;
            }
            for &c in &st.comparisons {
                seen_c[c] += 1;
            }
        }
        assert!(seen_t.iter().all(|&k| k == 1));
        assert!(seen_c.iter().all(|&k| k == 1));
    }

    #[test]
    fn pairs_up_an_obvious_assignment() {
        let p = problem(2, 2, vec![0.0, 10.0, 10.0, 0.0], MatchBounds::unbounded());
        let s = solve_full_match(&p, 0).unwrap();
        assert_exact_cover(&s, 2, 2);
        assert_relative_eq!(s.objective, 0.0);
        assert_eq!(s.strata[0].treated, vec![0]);
        assert_eq!(s.strata[0].comparisons, vec![0]);
    }

    #[test]
    fn single_treated_absorbs_all_comparisons() {
        let p = problem(1, 3, vec![1.0, 2.0, 3.0], MatchBounds::unbounded());
        let s = solve_full_match(&p, 0).unwrap();
        assert_eq!(s.strata.len(), 1);
        assert_eq!(s.strata[0].comparisons, vec![0, 1, 2]);
        assert_relative_eq!(s.objective, 6.0, epsilon = 1e-9);
    }

    #[test]
    fn splits_comparisons_by_proximity() {
        let p = problem(
            2,
            3,
            vec![1.0, 5.0, 5.0, 5.0, 1.0, 1.0],
            MatchBounds::unbounded(),
        );
        let s = solve_full_match(&p, 0).unwrap();
        assert_exact_cover(&s, 2, 3);
        assert_relative_eq!(s.objective, 3.0, epsilon = 1e-9);
        assert_eq!(s.strata[0].comparisons, vec![0]);
        assert_eq!(s.strata[1].comparisons, vec![1, 2]);
    }

    #[test]
    fn comparison_centered_star_when_treated_outnumber() {
        let p = problem(3, 1, vec![1.0, 2.0, 3.0], MatchBounds::unbounded());
        let s = solve_full_match(&p, 0).unwrap();
        assert_eq!(s.strata.len(), 1);
        assert_eq!(s.strata[0].treated, vec![0, 1, 2]);
        assert_relative_eq!(s.objective, 6.0, epsilon = 1e-9);
    }

    #[test]
    fn min_ratio_forces_treated_centered_strata() {
        let p = problem(
            2,
            4,
            vec![0.0, 0.0, 9.0, 9.0, 9.0, 9.0, 0.0, 0.0],
            MatchBounds {
                min_ratio: 2,
                max_ratio: None,
                max_stratum_size: None,
            },
        );
        let s = solve_full_match(&p, 0).unwrap();
        assert_exact_cover(&s, 2, 4);
        assert_relative_eq!(s.objective, 0.0);
        assert_eq!(s.strata[0].comparisons, vec![0, 1]);
        assert_eq!(s.strata[1].comparisons, vec![2, 3]);
    }

    #[test]
    fn ratio_cap_can_make_matching_infeasible() {
        let p = problem(
            2,
            3,
            vec![1.0; 6],
            MatchBounds {
                min_ratio: 1,
                max_ratio: Some(1),
                max_stratum_size: None,
            },
        );
        assert!(matches!(
            solve_full_match(&p, 0),
            Err(MatchError::Infeasible(_))
        ));
    }

    #[test]
    fn min_ratio_infeasible_when_comparisons_short() {
        let p = problem(
            2,
            3,
            vec![1.0; 6],
            MatchBounds {
                min_ratio: 2,
                max_ratio: None,
                max_stratum_size: None,
            },
        );
        assert!(matches!(
            solve_full_match(&p, 0),
            Err(MatchError::Infeasible(_))
        ));
    }

    #[test]
    fn stratum_size_cap_spreads_comparisons() {
        // One treated unit is closest to everything, but a size cap of 2
        // forces one comparison to each treated unit.
        let p = problem(
            2,
            2,
            vec![1.0, 1.0, 10.0, 20.0],
            MatchBounds {
                min_ratio: 1,
                max_ratio: None,
                max_stratum_size: Some(2),
            },
        );
        let s = solve_full_match(&p, 0).unwrap();
        assert_exact_cover(&s, 2, 2);
        assert_relative_eq!(s.objective, 11.0, epsilon = 1e-9);
    }

    #[test]
    fn bounded_path_matches_unbounded_when_caps_slack() {
        let values = vec![
            0.3, 2.0, 1.7, 4.0, //
            2.5, 0.1, 3.0, 0.2, //
            1.1, 2.2, 0.4, 3.3,
        ];
        let loose = MatchBounds {
            min_ratio: 1,
            max_ratio: Some(4),
            max_stratum_size: None,
        };
        let s1 = solve_full_match(&problem(3, 4, values.clone(), loose), 7).unwrap();
        let s2 = solve_full_match(&problem(3, 4, values, MatchBounds::unbounded()), 7).unwrap();
        assert_relative_eq!(s1.objective, s2.objective, epsilon = 1e-9);
        assert_exact_cover(&s1, 3, 4);
        assert_exact_cover(&s2, 3, 4);
    }

    #[test]
    fn identical_seeds_give_identical_strata() {
        let values: Vec<f64> = (0..20).map(|k| ((k * 7) % 5) as f64).collect();
        let s1 = solve_full_match(&problem(4, 5, values.clone(), MatchBounds::default()), 42)
            .unwrap();
        let s2 =
            solve_full_match(&problem(4, 5, values, MatchBounds::default()), 42).unwrap();
        assert_eq!(s1.strata, s2.strata);
    }

    #[test]
    fn seeds_only_move_between_cost_ties() {
        // All distances equal: any exact cover has the same objective, so
        // different seeds must agree on cost even if strata differ.
        let values = vec![1.0; 12];
        let a = solve_full_match(&problem(3, 4, values.clone(), MatchBounds::unbounded()), 1)
            .unwrap();
        let b = solve_full_match(&problem(3, 4, values, MatchBounds::unbounded()), 2).unwrap();
        assert_relative_eq!(a.objective, b.objective, epsilon = 1e-9);
        assert_exact_cover(&a, 3, 4);
        assert_exact_cover(&b, 3, 4);
    }

    #[test]
    fn rejects_nonfinite_distances() {
        let p = problem(1, 2, vec![1.0, f64::NAN], MatchBounds::unbounded());
        assert!(matches!(solve_full_match(&p, 0), Err(MatchError::BadDistance)));
    }

    #[test]
    fn rejects_contradictory_bounds() {
        let p = problem(
            1,
            1,
            vec![0.0],
            MatchBounds {
                min_ratio: 3,
                max_ratio: Some(2),
                max_stratum_size: None,
            },
        );
        assert!(matches!(
            solve_full_match(&p, 0),
            Err(MatchError::InvalidBounds(_))
        ));
    }
}
