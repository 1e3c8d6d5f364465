//! Panel data structures, CSV ingestion, and staggered-adoption validation.
//!
//! The canonical input is a long-format CSV with one row per (unit, period).
//! Adoption can be given either as a `first_treated` column (empty or `inf`
//! meaning never treated) or as a per-period 0/1 treatment flag, in which
//! case adoption is derived as the first flagged period. The derived
//! treatment path must be absorbing: once a unit is treated it stays treated.

use std::collections::BTreeMap;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Discrete period index. Periods `t0..=0` are pre-treatment; treatment can
/// start at `1..=t_max`.
pub type Period = i32;

/// Adoption label: the first treated period, or never treated in the study
/// window. `Never` sorts after every finite cohort.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cohort {
    At(Period),
    Never,
}

impl Cohort {
    pub fn period(&self) -> Option<Period> {
        match self {
            Cohort::At(g) => Some(*g),
            Cohort::Never => None,
        }
    }

    /// True when this unit is still untreated strictly after period `t`.
    pub fn later_than(&self, t: Period) -> bool {
        match self {
            Cohort::At(g) => *g > t,
            Cohort::Never => true,
        }
    }
}

impl PartialOrd for Cohort {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Cohort {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        match (self, other) {
            (Cohort::At(a), Cohort::At(b)) => a.cmp(b),
            (Cohort::At(_), Cohort::Never) => std::cmp::Ordering::Less,
            (Cohort::Never, Cohort::At(_)) => std::cmp::Ordering::Greater,
            (Cohort::Never, Cohort::Never) => std::cmp::Ordering::Equal,
        }
    }
}

impl std::fmt::Display for Cohort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Cohort::At(g) => write!(f, "{g}"),
            Cohort::Never => write!(f, "inf"),
        }
    }
}

/// Maps logical column roles to CSV column names.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PanelSchema {
    pub unit: String,
    pub period: String,
    #[serde(default)]
    pub outcome: Option<String>,
    #[serde(default)]
    pub first_treated: Option<String>,
    #[serde(default)]
    pub treatment_flag: Option<String>,
    pub covariates: Vec<String>,
}

impl PanelSchema {
    /// Schema with the default column names from the documented CSV layout.
    pub fn default_layout(covariates: Vec<String>) -> Self {
        PanelSchema {
            unit: "unit".into(),
            period: "period".into(),
            outcome: Some("outcome".into()),
            first_treated: Some("first_treated".into()),
            treatment_flag: None,
            covariates,
        }
    }
}

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("column `{0}` not found in header")]
    MissingColumn(String),
    #[error("row {row}: cannot parse `{value}` for column `{column}`")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },
    #[error("unbalanced panel: unit `{unit}` is missing period {period}")]
    MissingCell { unit: String, period: Period },
    #[error("duplicate row for unit `{unit}`, period {period}")]
    DuplicateRow { unit: String, period: Period },
    #[error("treatment reversal for unit `{unit}`: flag drops back to 0 at period {period}")]
    TreatmentReversal { unit: String, period: Period },
    #[error("unit `{unit}` is flagged treated in pre-period {period}")]
    PreperiodTreatment { unit: String, period: Period },
    #[error("unit `{unit}` has inconsistent first_treated values across rows")]
    InconsistentAdoption { unit: String },
    #[error("unit `{unit}` is missing outcome at period {period}")]
    MissingOutcome { unit: String, period: Period },
    #[error("unit `{unit}` is missing covariate `{covariate}` at period {period}")]
    MissingCovariate {
        unit: String,
        covariate: String,
        period: Period,
    },
    #[error("invalid time range [{t0}, {t_max}]: need t0 <= 0 and t_max >= 1")]
    BadTimeRange { t0: Period, t_max: Period },
    #[error("panel periods are not consecutive: {0:?} absent")]
    GapInPeriods(Period),
    #[error("panel is empty")]
    Empty,
}

/// Balanced unit-by-period panel of outcomes, covariates, and adoption
/// labels. Immutable after construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PanelDataset {
    unit_names: Vec<String>,
    t0: Period,
    t_max: Period,
    covariate_names: Vec<String>,
    /// `[unit * n_periods + period_index]`; `None` only in pre-periods.
    outcomes: Vec<Option<f64>>,
    /// `[(unit * n_periods + period_index) * n_cov + cov]`; NaN only allowed
    /// at the final period, which no covariate window reaches.
    covariates: Vec<f64>,
    adoption: Vec<Cohort>,
}

impl PanelDataset {
    pub fn n_units(&self) -> usize {
        self.unit_names.len()
    }

    pub fn t0(&self) -> Period {
        self.t0
    }

    pub fn t_max(&self) -> Period {
        self.t_max
    }

    pub fn n_periods(&self) -> usize {
        (self.t_max - self.t0 + 1) as usize
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn unit_name(&self, unit: usize) -> &str {
        &self.unit_names[unit]
    }

    pub fn unit_index(&self, name: &str) -> Option<usize> {
        self.unit_names.iter().position(|u| u == name)
    }

    pub fn adoption(&self, unit: usize) -> Cohort {
        self.adoption[unit]
    }

    fn period_index(&self, t: Period) -> usize {
        debug_assert!(t >= self.t0 && t <= self.t_max);
        (t - self.t0) as usize
    }

    pub fn outcome(&self, unit: usize, t: Period) -> Option<f64> {
        self.outcomes[unit * self.n_periods() + self.period_index(t)]
    }

    pub fn has_outcomes(&self) -> bool {
        self.outcomes.iter().any(|o| o.is_some())
    }

    pub fn covariate(&self, unit: usize, t: Period, cov: usize) -> f64 {
        let np = self.n_periods();
        self.covariates[(unit * np + self.period_index(t)) * self.n_covariates() + cov]
    }

    /// Derived treatment status `Z_it = 1{t >= G_i}`.
    pub fn treated_at(&self, unit: usize, t: Period) -> bool {
        match self.adoption[unit] {
            Cohort::At(g) => t >= g,
            Cohort::Never => false,
        }
    }

    /// Flattened covariate history `X_{t0..g-1}` in period-major,
    /// covariate-minor order. Windows for earlier cohorts are prefixes of
    /// windows for later ones.
    pub fn covariate_window(&self, unit: usize, g: Period) -> Vec<f64> {
        assert!(g >= 1 && g <= self.t_max, "cohort period out of range");
        let ncov = self.n_covariates();
        let mut window = Vec::with_capacity(((g - self.t0) as usize) * ncov);
        for t in self.t0..g {
            for c in 0..ncov {
                window.push(self.covariate(unit, t, c));
            }
        }
        window
    }

    /// Window length for cohort `g`.
    pub fn window_dim(&self, g: Period) -> usize {
        ((g - self.t0) as usize) * self.n_covariates()
    }

    /// Unit indices with `G_i = g`, ascending.
    pub fn cohort_units(&self, g: Period) -> Vec<usize> {
        (0..self.n_units())
            .filter(|&i| self.adoption[i] == Cohort::At(g))
            .collect()
    }

    /// Unit indices still untreated strictly after `t` (`G_i > t`), ascending.
    pub fn pool_after(&self, t: Period) -> Vec<usize> {
        (0..self.n_units())
            .filter(|&i| self.adoption[i].later_than(t))
            .collect()
    }

    /// Finite cohorts present in the data, ascending.
    pub fn finite_cohorts(&self) -> Vec<Period> {
        let mut set: Vec<Period> = self
            .adoption
            .iter()
            .filter_map(|c| c.period())
            .collect();
        set.sort_unstable();
        set.dedup();
        set
    }

    pub fn n_never_treated(&self) -> usize {
        self.adoption.iter().filter(|c| **c == Cohort::Never).count()
    }

    /// Builds a panel directly from memory; used by the simulator and tests.
    /// `outcomes[unit][period_index]`, `covariates[unit][period_index][cov]`.
    pub fn from_parts(
        unit_names: Vec<String>,
        t0: Period,
        t_max: Period,
        covariate_names: Vec<String>,
        outcomes: Vec<Vec<Option<f64>>>,
        covariates: Vec<Vec<Vec<f64>>>,
        adoption: Vec<Cohort>,
    ) -> Result<Self, PanelError> {
        if unit_names.is_empty() {
            return Err(PanelError::Empty);
        }
        if t0 > 0 || t_max < 1 {
            return Err(PanelError::BadTimeRange { t0, t_max });
        }
        let n_periods = (t_max - t0 + 1) as usize;
        let ncov = covariate_names.len();
        let mut flat_out = Vec::with_capacity(unit_names.len() * n_periods);
        let mut flat_cov = Vec::with_capacity(unit_names.len() * n_periods * ncov);
        for (u, name) in unit_names.iter().enumerate() {
            assert_eq!(outcomes[u].len(), n_periods);
            assert_eq!(covariates[u].len(), n_periods);
            for (p, o) in outcomes[u].iter().enumerate() {
                let t = t0 + p as Period;
                if t >= 1 && o.is_none() {
                    return Err(PanelError::MissingOutcome {
                        unit: name.clone(),
                        period: t,
                    });
                }
                flat_out.push(*o);
            }
            for row in &covariates[u] {
                assert_eq!(row.len(), ncov);
                flat_cov.extend_from_slice(row);
            }
            if let Cohort::At(g) = adoption[u] {
                if g <= 0 {
                    return Err(PanelError::PreperiodTreatment {
                        unit: name.clone(),
                        period: g,
                    });
                }
            }
        }
        Ok(PanelDataset {
            unit_names,
            t0,
            t_max,
            covariate_names,
            outcomes: flat_out,
            covariates: flat_cov,
            adoption,
        })
    }

    /// Loads and validates a long-format CSV.
    pub fn load_csv<R: io::Read>(reader: R, schema: &PanelSchema) -> Result<Self, PanelError> {
        if schema.first_treated.is_some() == schema.treatment_flag.is_some() {
            return Err(PanelError::Schema(
                "exactly one of `first_treated` and `treatment_flag` must be mapped".into(),
            ));
        }
        if schema.covariates.is_empty() {
            return Err(PanelError::Schema("at least one covariate is required".into()));
        }
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = rdr.headers()?.clone();
        let col = |name: &str| -> Result<usize, PanelError> {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| PanelError::MissingColumn(name.to_string()))
        };
        let unit_col = col(&schema.unit)?;
        let period_col = col(&schema.period)?;
        let outcome_col = schema.outcome.as_deref().map(col).transpose()?;
        let ft_col = schema.first_treated.as_deref().map(col).transpose()?;
        let flag_col = schema.treatment_flag.as_deref().map(col).transpose()?;
        let cov_cols: Vec<usize> = schema
            .covariates
            .iter()
            .map(|c| col(c))
            .collect::<Result<_, _>>()?;

        struct Row {
            outcome: Option<f64>,
            first_treated: Option<Cohort>,
            flag: Option<bool>,
            covs: Vec<f64>,
        }

        let mut cells: BTreeMap<String, BTreeMap<Period, Row>> = BTreeMap::new();
        for (idx, record) in rdr.records().enumerate() {
            let record = record?;
            let rownum = idx + 2; // 1-based, after the header
            let field = |c: usize| record.get(c).unwrap_or("").trim();
            let parse_f64 = |c: usize, name: &str| -> Result<Option<f64>, PanelError> {
                let v = field(c);
                if v.is_empty() {
                    return Ok(None);
                }
                v.parse::<f64>().map(Some).map_err(|_| PanelError::Parse {
                    row: rownum,
                    column: name.to_string(),
                    value: v.to_string(),
                })
            };
            let unit = field(unit_col).to_string();
            let period: Period =
                field(period_col)
                    .parse()
                    .map_err(|_| PanelError::Parse {
                        row: rownum,
                        column: schema.period.clone(),
                        value: field(period_col).to_string(),
                    })?;
            let outcome = match outcome_col {
                Some(c) => parse_f64(c, schema.outcome.as_deref().unwrap())?,
                None => None,
            };
            let first_treated = match ft_col {
                Some(c) => {
                    let v = field(c);
                    if v.is_empty() || v.eq_ignore_ascii_case("inf") {
                        Some(Cohort::Never)
                    } else {
                        let g: Period = v.parse().map_err(|_| PanelError::Parse {
                            row: rownum,
                            column: schema.first_treated.clone().unwrap(),
                            value: v.to_string(),
                        })?;
                        Some(Cohort::At(g))
                    }
                }
                None => None,
            };
            let flag = match flag_col {
                Some(c) => {
                    let v = field(c);
                    match v {
                        "0" => Some(false),
                        "1" => Some(true),
                        _ => {
                            return Err(PanelError::Parse {
                                row: rownum,
                                column: schema.treatment_flag.clone().unwrap(),
                                value: v.to_string(),
                            })
                        }
                    }
                }
                None => None,
            };
            let covs: Vec<f64> = cov_cols
                .iter()
                .zip(schema.covariates.iter())
                .map(|(&c, name)| {
                    parse_f64(c, name).map(|o| o.unwrap_or(f64::NAN))
                })
                .collect::<Result<_, _>>()?;
            let row = Row {
                outcome,
                first_treated,
                flag,
                covs,
            };
            if cells.entry(unit.clone()).or_default().insert(period, row).is_some() {
                return Err(PanelError::DuplicateRow { unit, period });
            }
        }
        if cells.is_empty() {
            return Err(PanelError::Empty);
        }

        let t0 = *cells.values().flat_map(|m| m.keys()).min().unwrap();
        let t_max = *cells.values().flat_map(|m| m.keys()).max().unwrap();
        if t0 > 0 || t_max < 1 {
            return Err(PanelError::BadTimeRange { t0, t_max });
        }
        let n_periods = (t_max - t0 + 1) as usize;
        let ncov = schema.covariates.len();

        let unit_names: Vec<String> = cells.keys().cloned().collect();
        let mut outcomes = Vec::with_capacity(unit_names.len() * n_periods);
        let mut covariates = Vec::with_capacity(unit_names.len() * n_periods * ncov);
        let mut adoption = Vec::with_capacity(unit_names.len());

        for unit in &unit_names {
            let rows = &cells[unit];
            let mut declared: Option<Cohort> = None;
            let mut first_flagged: Option<Period> = None;
            let mut last_flag = false;
            for t in t0..=t_max {
                let row = rows.get(&t).ok_or_else(|| PanelError::MissingCell {
                    unit: unit.clone(),
                    period: t,
                })?;
                if outcome_col.is_some() && t >= 1 && row.outcome.is_none() {
                    return Err(PanelError::MissingOutcome {
                        unit: unit.clone(),
                        period: t,
                    });
                }
                outcomes.push(row.outcome);
                for (c, v) in row.covs.iter().enumerate() {
                    if v.is_nan() && t < t_max {
                        return Err(PanelError::MissingCovariate {
                            unit: unit.clone(),
                            covariate: schema.covariates[c].clone(),
                            period: t,
                        });
                    }
                    covariates.push(*v);
                }
                if let Some(ft) = row.first_treated {
                    match declared {
                        None => declared = Some(ft),
                        Some(prev) if prev != ft => {
                            return Err(PanelError::InconsistentAdoption { unit: unit.clone() })
                        }
                        _ => {}
                    }
                }
                if let Some(flag) = row.flag {
                    if flag && t <= 0 {
                        return Err(PanelError::PreperiodTreatment {
                            unit: unit.clone(),
                            period: t,
                        });
                    }
                    if last_flag && !flag {
                        return Err(PanelError::TreatmentReversal {
                            unit: unit.clone(),
                            period: t,
                        });
                    }
                    if flag && first_flagged.is_none() {
                        first_flagged = Some(t);
                    }
                    last_flag = flag;
                }
            }
            let g = if flag_col.is_some() {
                match first_flagged {
                    Some(t) => Cohort::At(t),
                    None => Cohort::Never,
                }
            } else {
                let declared = declared.ok_or_else(|| PanelError::InconsistentAdoption {
                    unit: unit.clone(),
                })?;
                if let Cohort::At(g) = declared {
                    if g <= 0 {
                        return Err(PanelError::PreperiodTreatment {
                            unit: unit.clone(),
                            period: g,
                        });
                    }
                }
                declared
            };
            adoption.push(g);
        }

        Ok(PanelDataset {
            unit_names,
            t0,
            t_max,
            covariate_names: schema.covariates.clone(),
            outcomes,
            covariates,
            adoption,
        })
    }

    /// Writes the panel back out in the canonical long format
    /// (`unit,period,outcome,first_treated,<covariates...>`).
    pub fn write_csv<W: io::Write>(&self, writer: W) -> Result<(), PanelError> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec![
            "unit".to_string(),
            "period".to_string(),
            "outcome".to_string(),
            "first_treated".to_string(),
        ];
        header.extend(self.covariate_names.iter().cloned());
        wtr.write_record(&header)?;
        for u in 0..self.n_units() {
            for t in self.t0..=self.t_max {
                let mut record = vec![
                    self.unit_names[u].clone(),
                    t.to_string(),
                    self.outcome(u, t).map(|v| format!("{v}")).unwrap_or_default(),
                    match self.adoption[u] {
                        Cohort::At(g) => g.to_string(),
                        Cohort::Never => "inf".to_string(),
                    },
                ];
                for c in 0..self.n_covariates() {
                    let v = self.covariate(u, t, c);
                    record.push(if v.is_nan() { String::new() } else { format!("{v}") });
                }
                wtr.write_record(&record)?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}
