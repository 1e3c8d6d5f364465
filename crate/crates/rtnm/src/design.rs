//! Reverse-time nested matching: builds the nested design by matching
//! cohorts backward from the latest one, with each finished stratum acting
//! as a single pseudo-control at the next (earlier) level.
//!
//! At the latest analyzed cohort `G`, treated units `{G_i = G}` are matched
//! to the not-yet-treated pool `{G_i > G}`. Then for `g` walking backward,
//! the metric is refitted on the level-`g` pool, unit-to-stratum distances
//! average over stratum members, and full matching treats every level-`g+1`
//! stratum as one indivisible comparison entity. Because full matching
//! discards nobody, every stratum at level `g+1` is absorbed into exactly
//! one stratum at level `g`, which yields the nesting property, and every
//! outermost stratum spans all analyzed cohorts plus later/never-treated
//! comparisons.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distance::{
    build_distance_matrix, fit_metric, ComparisonEntity, DistanceError, DistanceSpec,
};
use crate::matcher::{solve_full_match, FullMatchProblem, MatchBounds, MatchError};
use crate::panel::{Cohort, PanelDataset, Period};
use crate::rng::mix64;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RtnmConfig {
    /// Analyzed cohort periods, ascending; the last one is matched first.
    pub cohorts: Vec<Period>,
    pub distance: DistanceSpec,
    pub bounds: MatchBounds,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum DesignError {
    #[error("cohort list is empty or not strictly ascending")]
    BadCohorts,
    #[error("cohort {0} has no units")]
    EmptyCohort(Period),
    #[error("no comparison units adopt after the latest analyzed cohort")]
    EmptyPool,
    #[error("cohort {0} is outside the panel's treatable range")]
    CohortOutOfRange(Period),
    #[error(transparent)]
    Distance(#[from] DistanceError),
    #[error("matching at cohort level {level}: {source}")]
    Match {
        level: Period,
        #[source]
        source: MatchError,
    },
}

/// One matched stratum in the nested design.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignStratum {
    pub id: usize,
    /// Cohort level `g` at which this stratum was formed.
    pub level: Period,
    /// Treated unit indices (`G_i = level`).
    pub treated: Vec<usize>,
    /// Ids of absorbed strata from the next-later level.
    pub child_strata: Vec<usize>,
    /// Comparison unit indices matched directly (rather than via a child
    /// stratum): the not-yet-treated pool at the latest level, plus any
    /// carried-forward singletons.
    pub comparison_units: Vec<usize>,
    /// All unit indices contained in this stratum, sorted.
    pub members: Vec<usize>,
    /// Id of the earlier-level stratum that absorbed this one; `None` for
    /// outermost strata.
    pub parent: Option<usize>,
}

/// The assembled design: strata per level plus parent links.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NestedDesign {
    pub config: RtnmConfig,
    /// Unit names, in panel order, for validating against a reloaded panel.
    pub unit_names: Vec<String>,
    pub unit_cohorts: Vec<Cohort>,
    /// Stratum ids per level.
    pub levels: BTreeMap<Period, Vec<usize>>,
    pub strata: Vec<DesignStratum>,
}

impl NestedDesign {
    /// Earliest analyzed cohort level.
    pub fn outermost_level(&self) -> Period {
        *self.config.cohorts.first().expect("nonempty cohorts")
    }

    pub fn strata_at(&self, level: Period) -> impl Iterator<Item = &DesignStratum> {
        self.levels
            .get(&level)
            .into_iter()
            .flatten()
            .map(move |&id| &self.strata[id])
    }

    /// Follows parent links up to the outermost containing stratum.
    pub fn outermost_ancestor(&self, mut id: usize) -> usize {
        while let Some(p) = self.strata[id].parent {
            id = p;
        }
        id
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("design serializes")
    }

    pub fn from_json_reader<R: std::io::Read>(reader: R) -> Result<Self, serde_json::Error> {
        serde_json::from_reader(reader)
    }

    /// Checks that the design's unit list matches a panel (same names in the
    /// same order), so indices can be shared.
    pub fn matches_panel(&self, data: &PanelDataset) -> bool {
        self.unit_names.len() == data.n_units()
            && self
                .unit_names
                .iter()
                .enumerate()
                .all(|(i, n)| n == data.unit_name(i))
    }
}

fn level_seed(seed: u64, g: Period) -> u64 {
    mix64(seed ^ ((g as u64) << 32))
}

/// Runs reverse-time nested matching over the configured cohorts.
pub fn run_rtnm(data: &PanelDataset, config: &RtnmConfig) -> Result<NestedDesign, DesignError> {
    let cohorts = &config.cohorts;
    if cohorts.is_empty() || cohorts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(DesignError::BadCohorts);
    }
    for &g in cohorts {
        if g < 1 || g > data.t_max() {
            return Err(DesignError::CohortOutOfRange(g));
        }
        if data.cohort_units(g).is_empty() {
            return Err(DesignError::EmptyCohort(g));
        }
    }
    let latest = *cohorts.last().unwrap();
    let initial_pool = data.pool_after(latest);
    if initial_pool.is_empty() {
        return Err(DesignError::EmptyPool);
    }

    let mut strata: Vec<DesignStratum> = Vec::new();
    let mut levels: BTreeMap<Period, Vec<usize>> = BTreeMap::new();
    // Comparison entities available to the current level: initially the
    // not-yet-treated pool as individual units; afterwards the strata formed
    // at the previous (later) level. Units left unabsorbed would be carried
    // forward as singletons, though full matching's exact cover leaves none.
    let mut entities: Vec<ComparisonEntity> =
        initial_pool.into_iter().map(ComparisonEntity::Unit).collect();

    for &g in cohorts.iter().rev() {
        let treated = data.cohort_units(g);
        // Metric pool: the treated cohort plus every unit inside the
        // available comparison entities (all have `G_i > g`).
        let mut pool: Vec<usize> = treated.clone();
        for e in &entities {
            pool.extend(e.members());
        }
        pool.sort_unstable();
        pool.dedup();

        let metric = fit_metric(data, g, &pool, &config.distance)?;
        let dm = build_distance_matrix(&metric, &treated, &entities)?;
        let solution = solve_full_match(
            &FullMatchProblem {
                distances: dm,
                bounds: config.bounds,
            },
            level_seed(config.seed, g),
        )
        .map_err(|source| DesignError::Match { level: g, source })?;

        let mut level_ids = Vec::with_capacity(solution.strata.len());
        for matched in &solution.strata {
            let id = strata.len();
            let treated_units: Vec<usize> =
                matched.treated.iter().map(|&r| treated[r]).collect();
            let mut child_strata = Vec::new();
            let mut comparison_units = Vec::new();
            let mut members: Vec<usize> = treated_units.clone();
            for &col in &matched.comparisons {
                match &entities[col] {
                    ComparisonEntity::Unit(u) => {
                        comparison_units.push(*u);
                        members.push(*u);
                    }
                    ComparisonEntity::PseudoControl { stratum, members: m } => {
                        child_strata.push(*stratum);
                        members.extend(m.iter().copied());
                    }
                }
            }
            members.sort_unstable();
            for &child in &child_strata {
                strata[child].parent = Some(id);
            }
            strata.push(DesignStratum {
                id,
                level: g,
                treated: treated_units,
                child_strata,
                comparison_units,
                members,
                parent: None,
            });
            level_ids.push(id);
        }
        entities = level_ids
            .iter()
            .map(|&id| ComparisonEntity::PseudoControl {
                stratum: id,
                members: strata[id].members.clone(),
            })
            .collect();
        levels.insert(g, level_ids);
    }

    Ok(NestedDesign {
        config: config.clone(),
        unit_names: (0..data.n_units())
            .map(|u| data.unit_name(u).to_string())
            .collect(),
        unit_cohorts: (0..data.n_units()).map(|u| data.adoption(u)).collect(),
        levels,
        strata,
    })
}

/// Checks the structural invariants of a nested design and reports every
/// violation found. An empty report means the design is well formed.
pub fn verify_nested(design: &NestedDesign) -> Vec<String> {
    let mut violations = Vec::new();
    let cohorts = &design.config.cohorts;
    if cohorts.is_empty() {
        return vec!["design has no cohort levels".into()];
    }
    let outer = design.outermost_level();

    // Disjointness within each level.
    for (&level, ids) in &design.levels {
        let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
        for &id in ids {
            for &u in &design.strata[id].members {
                if let Some(other) = seen.insert(u, id) {
                    violations.push(format!(
                        "level {level}: unit {u} appears in strata {other} and {id}"
                    ));
                }
            }
        }
    }

    for s in &design.strata {
        // Star shape and membership accounting.
        let n_comp_entities = s.child_strata.len() + s.comparison_units.len();
        if s.treated.is_empty() || n_comp_entities == 0 {
            violations.push(format!(
                "stratum {}: needs at least one treated unit and one comparison entity",
                s.id
            ));
        }
        if s.treated.len() > 1 && n_comp_entities > 1 {
            violations.push(format!(
                "stratum {}: several treated units with several comparison entities",
                s.id
            ));
        }
        let mut expect: BTreeSet<usize> = s.treated.iter().copied().collect();
        expect.extend(s.comparison_units.iter().copied());
        for &c in &s.child_strata {
            expect.extend(design.strata[c].members.iter().copied());
        }
        if expect.iter().copied().collect::<Vec<_>>() != s.members {
            violations.push(format!(
                "stratum {}: member list disagrees with treated/children/comparisons",
                s.id
            ));
        }

        // Nesting: non-outermost strata have exactly one parent one level
        // earlier, and are fully contained in it.
        if s.level == outer {
            if s.parent.is_some() {
                violations.push(format!("stratum {}: outermost stratum has a parent", s.id));
            }
        } else {
            match s.parent {
                None => violations.push(format!("stratum {}: missing parent link", s.id)),
                Some(p) => {
                    let parent = &design.strata[p];
                    let expected_level =
                        cohorts.iter().rev().find(|&&g| g < s.level).copied();
                    if expected_level != Some(parent.level) {
                        violations.push(format!(
                            "stratum {}: parent {p} is at level {}, expected the next earlier cohort",
                            s.id, parent.level
                        ));
                    }
                    if !parent.child_strata.contains(&s.id) {
                        violations.push(format!(
                            "stratum {}: parent {p} does not list it as a child",
                            s.id
                        ));
                    }
                    let pm: BTreeSet<usize> = parent.members.iter().copied().collect();
                    if !s.members.iter().all(|u| pm.contains(u)) {
                        violations.push(format!(
                            "stratum {}: not contained in its parent {p}",
                            s.id
                        ));
                    }
                }
            }
        }
    }

    // Coverage: every outermost stratum spans all analyzed cohorts and
    // contains at least one later/never-treated comparison unit.
    for s in design.strata.iter().filter(|s| s.level == outer && s.parent.is_none()) {
        let latest = *cohorts.last().unwrap();
        let mut have: BTreeSet<Period> = BTreeSet::new();
        let mut has_comparison = false;
        for &u in &s.members {
            match design.unit_cohorts[u] {
                Cohort::At(g) if cohorts.contains(&g) => {
                    have.insert(g);
                }
                c => {
                    if c.later_than(latest) {
                        has_comparison = true;
                    }
                }
            }
        }
        for &g in cohorts {
            if !have.contains(&g) {
                violations.push(format!(
                    "outermost stratum {}: no unit from cohort {g}",
                    s.id
                ));
            }
        }
        if !has_comparison {
            violations.push(format!(
                "outermost stratum {}: no later- or never-treated comparison unit",
                s.id
            ));
        }
    }

    // Exact cover at the outermost level: all analyzed treated units and all
    // units ever used as comparisons appear in exactly one outermost stratum.
    let mut covered: BTreeSet<usize> = BTreeSet::new();
    for s in design.strata.iter().filter(|s| s.level == outer) {
        covered.extend(s.members.iter().copied());
    }
    for (u, c) in design.unit_cohorts.iter().enumerate() {
        if let Cohort::At(g) = c {
            if cohorts.contains(g) && !covered.contains(&u) {
                violations.push(format!("treated unit {u} (cohort {g}) is not covered"));
            }
        }
    }
    for s in &design.strata {
        for &u in &s.comparison_units {
            if !covered.contains(&u) {
                violations.push(format!("comparison unit {u} dropped before the outermost level"));
            }
        }
    }

    violations
}
