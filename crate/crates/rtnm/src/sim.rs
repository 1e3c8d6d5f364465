//! Synthetic staggered-adoption panels with known treatment effects.
//!
//! The generator keeps both potential outcome paths for every unit, so the
//! true group-time effects are exact finite-population averages rather than
//! estimates. Adoption is decided by a per-period hazard that depends only
//! on observed history — the latent covariates and the lagged outcome, which
//! is itself exported as a covariate channel — so matching on the covariate
//! window removes all confounding by construction. Treatment is absorbing,
//! effects are additive from the adoption period onward, and hazards are
//! clamped away from 0 and 1 so every unit retains positive probability of
//! either path.
//!
//! A study runner repeats generate → match → estimate → bootstrap (and
//! optionally test) across replicates and aggregates bias, coverage, and
//! rejection rates.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bootstrap::bootstrap_covariance;
use crate::design::run_rtnm;
use crate::design::RtnmConfig;
use crate::distance::DistanceSpec;
use crate::estimator::{estimate_att, naive_att, Adjustment, AttVector, GtIndex};
use crate::hypothesis::{build_hypothesis, wald_test, HypothesisKind};
use crate::matcher::MatchBounds;
use crate::panel::{Cohort, PanelDataset, Period};
use crate::rng::{mix64, stream, StreamLabel};

/// True effect surface. Lag-varying maps clamp to the last entry beyond the
/// listed lags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EffectMap {
    Constant { value: f64 },
    CohortVarying { values: Vec<(Period, f64)> },
    LagVarying { values: Vec<f64> },
    Table { cells: Vec<(Period, Period, f64)> },
}

impl EffectMap {
    pub fn value(&self, g: Period, t: Period) -> f64 {
        match self {
            EffectMap::Constant { value } => *value,
            EffectMap::CohortVarying { values } => values
                .iter()
                .find(|(gg, _)| *gg == g)
                .map(|(_, v)| *v)
                .unwrap_or(0.0),
            EffectMap::LagVarying { values } => {
                if values.is_empty() {
                    0.0
                } else {
                    let e = (t - g).max(0) as usize;
                    values[e.min(values.len() - 1)]
                }
            }
            EffectMap::Table { cells } => cells
                .iter()
                .find(|(gg, tt, _)| *gg == g && *tt == t)
                .map(|(_, _, v)| *v)
                .unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n_units: usize,
    pub t0: Period,
    pub t_max: Period,
    /// Adoption periods, ascending, all in `1..=t_max`.
    pub cohorts: Vec<Period>,
    /// Exported covariate channels; channel 0 is the lagged outcome, the
    /// rest are latent autoregressive processes.
    pub n_covariates: usize,
    /// Autoregression coefficient of the latent covariates.
    pub ar_coef: f64,
    /// Baseline logit of the adoption hazard.
    pub hazard_intercept: f64,
    /// Hazard loading on the mean latent covariate at `t - 1`.
    pub hazard_coef: f64,
    /// Hazard loading on the lagged outcome: the confounding strength.
    pub confounding: f64,
    pub effect: EffectMap,
    /// Outcome noise standard deviation.
    pub noise_sd: f64,
    /// Spread of the persistent unit effect in the outcome.
    pub unit_effect_sd: f64,
    /// Logistic-link binary outcome instead of the continuous one.
    pub binary_outcome: bool,
    /// Pin exact cohort sizes (aligned with `cohorts`); remaining units are
    /// never treated. Selection is hazard-weighted, so confounding persists.
    pub cohort_quota: Option<Vec<usize>>,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            n_units: 500,
            t0: -2,
            t_max: 6,
            cohorts: vec![1, 2, 3, 4],
            n_covariates: 3,
            ar_coef: 0.6,
            hazard_intercept: -2.2,
            hazard_coef: 0.4,
            confounding: 0.8,
            effect: EffectMap::Constant { value: 1.0 },
            noise_sd: 1.0,
            unit_effect_sd: 0.5,
            binary_outcome: false,
            cohort_quota: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid generator config: {0}")]
    BadConfig(String),
    #[error("cohort {0} received no units")]
    DegenerateCohort(Period),
    #[error("all {0} study replicates failed")]
    AllReplicatesFailed(usize),
}

/// Overlap floor for adoption hazards.
const HAZARD_CLAMP: f64 = 0.02;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Standard normal draw via Box–Muller.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

struct UnitDraw {
    /// Latent covariates `[period][channel]`, periods `t0-1 ..= t_max`.
    latent: Vec<Vec<f64>>,
    /// Untreated outcome path, periods `t0-1 ..= t_max`.
    y_inf: Vec<f64>,
    /// Common uniforms for coupling binary potential outcomes.
    uniforms: Vec<f64>,
}

/// Simulated panel plus its exact truth table.
pub struct SimulatedPanel {
    pub data: PanelDataset,
    pub truth: AttVector,
}

pub fn generate_panel(config: &DgpConfig) -> Result<SimulatedPanel, SimError> {
    validate(config)?;
    let n = config.n_units;
    let t0 = config.t0;
    let t_max = config.t_max;
    let n_lat = config.n_covariates - 1;
    let n_steps = (t_max - t0 + 2) as usize; // t0-1 ..= t_max
    let at = |t: Period| (t - t0 + 1) as usize;

    let mut rng = stream(config.seed, StreamLabel::Simulation, 0);

    // Latent covariates and untreated outcome paths.
    let mut units: Vec<UnitDraw> = Vec::with_capacity(n);
    for _ in 0..n {
        let u_i = config.unit_effect_sd * normal(&mut rng);
        let mut latent = vec![vec![0.0; n_lat]; n_steps];
        for c in 0..n_lat {
            latent[0][c] = normal(&mut rng);
            for s in 1..n_steps {
                let innov = (1.0 - config.ar_coef * config.ar_coef).max(0.0).sqrt();
                latent[s][c] = config.ar_coef * latent[s - 1][c] + innov * normal(&mut rng);
            }
        }
        let mut y_inf = vec![0.0; n_steps];
        let mut uniforms = vec![0.0; n_steps];
        for s in 0..n_steps {
            let lat_mean = if n_lat > 0 {
                latent[s].iter().sum::<f64>() / n_lat as f64
            } else {
                0.0
            };
            let index = lat_mean + u_i + config.noise_sd * normal(&mut rng);
            uniforms[s] = rng.gen::<f64>();
            y_inf[s] = if config.binary_outcome {
                if uniforms[s] < sigmoid(index) {
                    1.0
                } else {
                    0.0
                }
            } else {
                index
            };
        }
        units.push(UnitDraw {
            latent,
            y_inf,
            uniforms,
        });
    }

    // Hazard of adopting at period g, given still untreated; depends only on
    // the observed history at g - 1.
    let hazard = |unit: &UnitDraw, g: Period| -> f64 {
        let s = at(g - 1);
        let lat_mean = if n_lat > 0 {
            unit.latent[s].iter().sum::<f64>() / n_lat as f64
        } else {
            0.0
        };
        let logit = config.hazard_intercept
            + config.hazard_coef * lat_mean
            + config.confounding * unit.y_inf[s];
        sigmoid(logit).clamp(HAZARD_CLAMP, 1.0 - HAZARD_CLAMP)
    };

    let adoption: Vec<Cohort> = match &config.cohort_quota {
        None => {
            let mut adoption = vec![Cohort::Never; n];
            for i in 0..n {
                for &g in &config.cohorts {
                    if rng.gen::<f64>() < hazard(&units[i], g) {
                        adoption[i] = Cohort::At(g);
                        break;
                    }
                }
            }
            adoption
        }
        Some(quota) => {
            // Hazard-weighted sampling without replacement per cohort, so the
            // pinned sizes keep the confounding pattern.
            let mut adoption = vec![Cohort::Never; n];
            for (&g, &q) in config.cohorts.iter().zip(quota.iter()) {
                let mut keyed: Vec<(f64, usize)> = (0..n)
                    .filter(|&i| adoption[i] == Cohort::Never)
                    .map(|i| {
                        let w = hazard(&units[i], g).max(1e-12);
                        let u: f64 = rng.gen_range(f64::EPSILON..1.0);
                        (u.ln() / w, i)
                    })
                    .collect();
                if keyed.len() < q {
                    return Err(SimError::DegenerateCohort(g));
                }
                keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
                for &(_, i) in keyed.iter().take(q) {
                    adoption[i] = Cohort::At(g);
                }
            }
            adoption
        }
    };

    for &g in &config.cohorts {
        if !adoption.contains(&Cohort::At(g)) {
            return Err(SimError::DegenerateCohort(g));
        }
    }

    // Observed outcomes (and both potentials for the truth table).
    let effect_at = |cohort: Cohort, t: Period| -> f64 {
        match cohort {
            Cohort::At(g) if t >= g => config.effect.value(g, t),
            _ => 0.0,
        }
    };
    let observed = |i: usize, t: Period| -> f64 {
        let unit = &units[i];
        let s = at(t);
        let delta = effect_at(adoption[i], t);
        if config.binary_outcome {
            if delta == 0.0 {
                unit.y_inf[s]
            } else {
                // Couple through the common uniform: shift the success
                // probability by the effect and re-threshold.
                let p_inf = binary_p_inf(unit, s);
                let p = (p_inf + delta).clamp(0.0, 1.0);
                if unit.uniforms[s] < p {
                    1.0
                } else {
                    0.0
                }
            }
        } else {
            unit.y_inf[s] + delta
        }
    };

    // Assemble the panel: covariate channel 0 is the lagged observed
    // outcome, the rest are the latent processes.
    let n_periods = (t_max - t0 + 1) as usize;
    let unit_names: Vec<String> = (0..n).map(|i| format!("u{i:05}")).collect();
    let mut outcomes: Vec<Vec<Option<f64>>> = Vec::with_capacity(n);
    let mut covariates: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut out_i = Vec::with_capacity(n_periods);
        let mut cov_i = Vec::with_capacity(n_periods);
        for p in 0..n_periods {
            let t = t0 + p as Period;
            out_i.push(if t >= 1 { Some(observed(i, t)) } else { None });
            let mut row = Vec::with_capacity(config.n_covariates);
            row.push(observed(i, t - 1));
            for c in 0..n_lat {
                row.push(units[i].latent[at(t)][c]);
            }
            cov_i.push(row);
        }
        outcomes.push(out_i);
        covariates.push(cov_i);
    }
    let covariate_names: Vec<String> = std::iter::once("y_lag".to_string())
        .chain((0..n_lat).map(|c| format!("x{c}")))
        .collect();
    let data = PanelDataset::from_parts(
        unit_names,
        t0,
        t_max,
        covariate_names,
        outcomes,
        covariates,
        adoption.clone(),
    )
    .expect("simulated panel is well formed");

    // Exact finite-population truth over all cells.
    let index = GtIndex::all_cells(&config.cohorts, t_max);
    let mut truth_values = Vec::with_capacity(index.k());
    for &(g, t) in index.pairs() {
        let members: Vec<usize> = (0..n).filter(|&i| adoption[i] == Cohort::At(g)).collect();
        let mean = members
            .iter()
            .map(|&i| {
                let unit = &units[i];
                let s = at(t);
                if config.binary_outcome {
                    let p_inf = binary_p_inf(unit, s);
                    let p_g = (p_inf + config.effect.value(g, t)).clamp(0.0, 1.0);
                    let y_g = if unit.uniforms[s] < p_g { 1.0 } else { 0.0 };
                    y_g - unit.y_inf[s]
                } else {
                    config.effect.value(g, t)
                }
            })
            .sum::<f64>()
            / members.len() as f64;
        truth_values.push(mean);
    }
    let k = index.k();
    let truth = AttVector {
        index,
        values: truth_values,
        block_contributions: Vec::new(),
        block_ids: Vec::new(),
        n_strata_used: vec![0; k],
        n_strata_dropped: vec![0; k],
    };

    Ok(SimulatedPanel { data, truth })
}

/// Success probability of the untreated binary outcome at step `s`,
/// recovered from the latent index draw. Only valid for binary configs.
fn binary_p_inf(unit: &UnitDraw, s: usize) -> f64 {
    // The untreated outcome was drawn as 1{U < p}; p itself is a function of
    // the latent index, which we do not store. Recover it by inverting the
    // draw: since Y(∞) and U are kept, p is only needed relative to U when
    // shifting by the effect, and the shifted threshold can be anchored at
    // the realized U. Anchoring at U keeps the coupling monotone: a positive
    // effect can only flip 0 → 1 and a negative one only 1 → 0.
    if unit.y_inf[s] >= 0.5 {
        // Outcome is 1, so U < p: any p' >= U keeps it 1.
        unit.uniforms[s].max(f64::MIN_POSITIVE)
    } else {
        unit.uniforms[s]
    }
}

fn validate(config: &DgpConfig) -> Result<(), SimError> {
    if config.n_units == 0 {
        return Err(SimError::BadConfig("n_units must be positive".into()));
    }
    if config.t0 > 0 || config.t_max < 1 {
        return Err(SimError::BadConfig(
            "need t0 <= 0 and t_max >= 1".into(),
        ));
    }
    if config.cohorts.is_empty()
        || config.cohorts.windows(2).any(|w| w[0] >= w[1])
        || config.cohorts.iter().any(|&g| g < 1 || g > config.t_max)
    {
        return Err(SimError::BadConfig(
            "cohorts must be strictly ascending within 1..=t_max".into(),
        ));
    }
    if config.n_covariates < 1 {
        return Err(SimError::BadConfig(
            "need at least the lagged-outcome covariate".into(),
        ));
    }
    if let Some(q) = &config.cohort_quota {
        if q.len() != config.cohorts.len() {
            return Err(SimError::BadConfig(
                "cohort_quota length must match cohorts".into(),
            ));
        }
        if q.iter().sum::<usize>() > config.n_units {
            return Err(SimError::BadConfig(
                "cohort_quota exceeds the number of units".into(),
            ));
        }
        if q.iter().any(|&x| x == 0) {
            return Err(SimError::BadConfig("cohort_quota entries must be positive".into()));
        }
    }
    Ok(())
}

/// Retries generation with derived seeds when a cohort comes up empty.
pub fn generate_panel_retrying(
    config: &DgpConfig,
    max_attempts: usize,
) -> Result<SimulatedPanel, SimError> {
    let mut cfg = config.clone();
    let mut last = None;
    for attempt in 0..max_attempts.max(1) {
        cfg.seed = if attempt == 0 {
            config.seed
        } else {
            mix64(config.seed ^ (0xC0FFEE + attempt as u64))
        };
        match generate_panel(&cfg) {
            Ok(p) => return Ok(p),
            Err(e @ SimError::DegenerateCohort(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or(SimError::AllReplicatesFailed(0)))
}

/// Configuration of a repeated-simulation study.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyConfig {
    pub dgp: DgpConfig,
    pub reps: usize,
    /// Covariance bootstrap replicates per dataset.
    pub boot: usize,
    pub adjust: Adjustment,
    pub distance: DistanceSpec,
    pub bounds: MatchBounds,
    /// Optional homogeneity test to run per replicate.
    pub hypothesis: Option<HypothesisKind>,
    /// Bootstrap replicates for the test stage.
    pub test_boot: usize,
    pub alpha: f64,
}

impl StudyConfig {
    pub fn new(dgp: DgpConfig, reps: usize, boot: usize) -> Self {
        StudyConfig {
            dgp,
            reps,
            boot,
            adjust: Adjustment::None,
            distance: DistanceSpec::default(),
            bounds: MatchBounds::unbounded(),
            hypothesis: None,
            test_boot: 200,
            alpha: 0.05,
        }
    }
}

/// Per-cell aggregates over study replicates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellSummary {
    pub g: Period,
    pub t: Period,
    pub truth: f64,
    pub mean_estimate: f64,
    pub mean_naive: f64,
    pub bias: f64,
    pub naive_bias: f64,
    /// Fraction of replicates whose normal 95% interval covers the truth.
    pub coverage: f64,
    pub mean_se: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudySummary {
    pub cells: Vec<CellSummary>,
    /// Fraction of replicates rejecting the hypothesis at `alpha`.
    pub rejection_rate: Option<f64>,
    pub n_reps: usize,
    pub n_failed: usize,
}

struct RepOutcome {
    estimates: Vec<f64>,
    naive: Vec<f64>,
    ses: Vec<f64>,
    truth: Vec<f64>,
    rejected: Option<bool>,
}

/// Runs the full pipeline on `reps` independent datasets and aggregates.
pub fn run_study(config: &StudyConfig) -> Result<StudySummary, SimError> {
    let index = GtIndex::all_cells(&config.dgp.cohorts, config.dgp.t_max);
    let outcomes: Vec<Option<RepOutcome>> = (0..config.reps)
        .into_par_iter()
        .map(|rep| run_one_rep(config, &index, rep))
        .collect();

    let ok: Vec<&RepOutcome> = outcomes.iter().flatten().collect();
    let n_failed = config.reps - ok.len();
    if ok.is_empty() {
        return Err(SimError::AllReplicatesFailed(config.reps));
    }
    let nr = ok.len() as f64;
    let z = 1.959963984540054;
    let cells = index
        .pairs()
        .iter()
        .enumerate()
        .map(|(k, &(g, t))| {
            let truth = ok.iter().map(|r| r.truth[k]).sum::<f64>() / nr;
            let mean_estimate = ok.iter().map(|r| r.estimates[k]).sum::<f64>() / nr;
            let mean_naive = ok.iter().map(|r| r.naive[k]).sum::<f64>() / nr;
            let mean_se = ok.iter().map(|r| r.ses[k]).sum::<f64>() / nr;
            let coverage = ok
                .iter()
                .filter(|r| (r.estimates[k] - r.truth[k]).abs() <= z * r.ses[k])
                .count() as f64
                / nr;
            CellSummary {
                g,
                t,
                truth,
                mean_estimate,
                mean_naive,
                bias: mean_estimate - truth,
                naive_bias: mean_naive - truth,
                coverage,
                mean_se,
            }
        })
        .collect();
    let rejection_rate = if config.hypothesis.is_some() {
        let tested: Vec<bool> = ok.iter().filter_map(|r| r.rejected).collect();
        if tested.is_empty() {
            None
        } else {
            Some(tested.iter().filter(|&&x| x).count() as f64 / tested.len() as f64)
        }
    } else {
        None
    };
    Ok(StudySummary {
        cells,
        rejection_rate,
        n_reps: ok.len(),
        n_failed,
    })
}

fn run_one_rep(config: &StudyConfig, index: &GtIndex, rep: usize) -> Option<RepOutcome> {
    let rep_seed = mix64(config.dgp.seed ^ ((rep as u64) << 20 | 0x51));
    let mut dgp = config.dgp.clone();
    dgp.seed = rep_seed;
    let sim = generate_panel_retrying(&dgp, 20).ok()?;
    let rtnm_cfg = RtnmConfig {
        cohorts: config.dgp.cohorts.clone(),
        distance: config.distance,
        bounds: config.bounds,
        seed: mix64(rep_seed ^ 1),
    };
    let design = run_rtnm(&sim.data, &rtnm_cfg).ok()?;
    let att = estimate_att(&sim.data, &design, index, config.adjust).ok()?;
    let naive = naive_att(&sim.data, index).ok()?;
    let cov = bootstrap_covariance(&att, config.boot, mix64(rep_seed ^ 2), false).ok()?;
    let rejected = match config.hypothesis {
        None => None,
        Some(kind) => {
            let spec = build_hypothesis(index, kind).ok()?;
            let res = wald_test(&att, &cov, &spec, config.test_boot, mix64(rep_seed ^ 3)).ok()?;
            Some(res.p_value < config.alpha)
        }
    };
    Some(RepOutcome {
        estimates: att.values,
        naive: naive.values,
        ses: cov.standard_errors(),
        truth: sim.truth.values.clone(),
        rejected,
    })
}

/// Writes the per-cell study aggregates as CSV.
pub fn write_study_csv<W: std::io::Write>(
    summary: &StudySummary,
    writer: W,
) -> Result<(), std::io::Error> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record([
        "g",
        "t",
        "truth",
        "mean_estimate",
        "mean_naive",
        "bias",
        "naive_bias",
        "coverage",
        "mean_se",
    ])?;
    for c in &summary.cells {
        wtr.write_record([
            c.g.to_string(),
            c.t.to_string(),
            format!("{}", c.truth),
            format!("{}", c.mean_estimate),
            format!("{}", c.mean_naive),
            format!("{}", c.bias),
            format!("{}", c.naive_bias),
            format!("{}", c.coverage),
            format!("{}", c.mean_se),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
