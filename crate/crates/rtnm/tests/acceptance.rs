//! Acceptance gate: ten end-to-end criteria covering optimality, design
//! structure, estimator identities, bootstrap calibration, test size and
//! power, determinism, and scale. One PASS/FAIL line is printed per
//! criterion; the test fails if any criterion fails.
//!
//! This suite is slow by design (several simulation studies at n = 2,000 and
//! one panel with 9,627 units); expect minutes, not seconds.

mod common;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rtnm::bootstrap::{bootstrap_covariance, CovarianceEstimate};
use rtnm::design::{run_rtnm, verify_nested, RtnmConfig};
use rtnm::distance::{ComparisonEntity, DistanceMatrix, DistanceSpec};
use rtnm::estimator::{estimate_att, Adjustment, AttVector, GtIndex};
use rtnm::hypothesis::{build_hypothesis, wald_test, HypothesisKind, HypothesisSpec};
use rtnm::matcher::{solve_full_match, FullMatchProblem, MatchBounds};
use rtnm::panel::{Cohort, PanelDataset, Period};
use rtnm::sim::{generate_panel_retrying, run_study, DgpConfig, EffectMap, StudyConfig};

fn base_dgp(n_units: usize, seed: u64) -> DgpConfig {
    DgpConfig {
        n_units,
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
        seed,
    }
}

fn unconfounded(mut dgp: DgpConfig) -> DgpConfig {
    dgp.confounding = 0.0;
    dgp.hazard_coef = 0.0;
    dgp
}

fn rtnm_config(seed: u64) -> RtnmConfig {
    RtnmConfig {
        cohorts: vec![1, 2, 3, 4],
        distance: DistanceSpec::default(),
        bounds: MatchBounds::unbounded(),
        seed,
    }
}

/// Simulated panel → design → estimate → covariance, the shared per-rep
/// pipeline of the calibration criteria.
fn pipeline(
    dgp: &DgpConfig,
    adjust: Adjustment,
    boot: usize,
) -> Option<(PanelDataset, AttVector, CovarianceEstimate)> {
    let sim = generate_panel_retrying(dgp, 20).ok()?;
    let design = run_rtnm(&sim.data, &rtnm_config(dgp.seed ^ 0xD)).ok()?;
    let index = GtIndex::all_cells(&[1, 2, 3, 4], 6);
    let att = estimate_att(&sim.data, &design, &index, adjust).ok()?;
    let cov = bootstrap_covariance(&att, boot, dgp.seed ^ 0xB0, false).ok()?;
    Some((sim.data, att, cov))
}

/// The ten standing homogeneity hypotheses evaluated for size.
fn size_hypotheses() -> Vec<HypothesisKind> {
    vec![
        HypothesisKind::FixedCohort(1),
        HypothesisKind::FixedCohort(2),
        HypothesisKind::FixedCohort(3),
        HypothesisKind::FixedCohort(4),
        HypothesisKind::FixedTime(4),
        HypothesisKind::FixedTime(5),
        HypothesisKind::FixedTime(6),
        HypothesisKind::FixedLag(0),
        HypothesisKind::FixedLag(1),
        HypothesisKind::FixedLag(2),
    ]
}

struct Gate {
    failures: Vec<String>,
}

impl Gate {
    fn check(&mut self, number: usize, name: &str, outcome: Result<String, String>) {
        match outcome {
            Ok(detail) => println!("criterion {number:2}: PASS — {name} ({detail})"),
            Err(detail) => {
                println!("criterion {number:2}: FAIL — {name} ({detail})");
                self.failures.push(format!("{number}: {name}: {detail}"));
            }
        }
    }
}

fn criterion_1_matcher_oracle() -> Result<String, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut checked = 0usize;
    let regimes = [
        MatchBounds::unbounded(),
        MatchBounds::default(),
        MatchBounds {
            min_ratio: 2,
            max_ratio: None,
            max_stratum_size: None,
        },
        MatchBounds {
            min_ratio: 1,
            max_ratio: Some(2),
            max_stratum_size: None,
        },
    ];
    for case in 0..160 {
        let nt = rng.gen_range(1..=4);
        let nc = rng.gen_range(1..=(9 - nt).min(5));
        let values: Vec<f64> = (0..nt * nc)
            .map(|_| {
                if case % 2 == 0 {
                    rng.gen_range(0..6) as f64 * 0.5
                } else {
                    rng.gen_range(0.0..10.0)
                }
            })
            .collect();
        let bounds = regimes[case % regimes.len()];
        let oracle = common::brute_force_objective(nt, nc, &values, &bounds);
        let problem = FullMatchProblem {
            distances: DistanceMatrix::from_values(
                1,
                (0..nt).collect(),
                (0..nc).map(ComparisonEntity::Unit).collect(),
                values,
            ),
            bounds,
        };
        match (solve_full_match(&problem, rng.gen()), oracle) {
            (Ok(s), Some(expected)) => {
                if (s.objective - expected).abs() > 1e-9 {
                    return Err(format!(
                        "case {case}: solver {} vs oracle {expected}",
                        s.objective
                    ));
                }
                checked += 1;
            }
            (Err(_), None) => {}
            (Ok(_), None) => return Err(format!("case {case}: solver beat infeasible oracle")),
            (Err(e), Some(_)) => return Err(format!("case {case}: solver failed: {e}")),
        }
    }
    let elapsed = start.elapsed();
    if checked < 100 {
        return Err(format!("only {checked} feasible instances"));
    }
    if elapsed.as_secs() >= 10 {
        return Err(format!("took {elapsed:.2?}, budget 10 s"));
    }
    Ok(format!("{checked} instances exact in {elapsed:.2?}"))
}

fn criterion_2_nested_structure() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut total_violations = 0usize;
    for panel in 0..50 {
        let n = rng.gen_range(300..=2000);
        let dgp = base_dgp(n, 9000 + panel);
        let sim = generate_panel_retrying(&dgp, 20).map_err(|e| format!("panel {panel}: {e}"))?;
        let design = run_rtnm(&sim.data, &rtnm_config(panel))
            .map_err(|e| format!("panel {panel}: {e}"))?;
        let violations = verify_nested(&design);
        if !violations.is_empty() {
            total_violations += violations.len();
            eprintln!("panel {panel}: {}", violations.join("; "));
        }
    }
    if total_violations > 0 {
        Err(format!("{total_violations} structure violations"))
    } else {
        Ok("50 panels, zero violations".into())
    }
}

fn criterion_3_estimator_identity() -> Result<String, String> {
    let dgp = base_dgp(800, 31);
    let (data, att, _) = pipeline(&dgp, Adjustment::None, 2).ok_or("pipeline failed")?;
    // Block rows average back to the estimate.
    let n1 = att.n_blocks() as f64;
    let mut max_gap = 0.0f64;
    for (k, &v) in att.values.iter().enumerate() {
        let mean: f64 = att.block_contributions.iter().map(|r| r[k]).sum::<f64>() / n1;
        max_gap = max_gap.max((mean - v).abs());
    }
    if max_gap > 1e-10 {
        return Err(format!("block mean deviates by {max_gap:.3e}"));
    }

    // Injecting a known effect surface shifts each cell exactly.
    let delta = |g: Period, t: Period| 0.1 * g as f64 + 0.01 * t as f64;
    let n = data.n_units();
    let shifted = PanelDataset::from_parts(
        (0..n).map(|u| data.unit_name(u).to_string()).collect(),
        data.t0(),
        data.t_max(),
        data.covariate_names().to_vec(),
        (0..n)
            .map(|u| {
                (data.t0()..=data.t_max())
                    .map(|t| {
                        data.outcome(u, t).map(|y| match data.adoption(u) {
                            Cohort::At(g) if t >= g => y + delta(g, t),
                            _ => y,
                        })
                    })
                    .collect()
            })
            .collect(),
        (0..n)
            .map(|u| {
                (data.t0()..=data.t_max())
                    .map(|t| {
                        (0..data.covariate_names().len())
                            .map(|c| data.covariate(u, t, c))
                            .collect()
                    })
                    .collect()
            })
            .collect(),
        (0..n).map(|u| data.adoption(u)).collect(),
    )
    .map_err(|e| e.to_string())?;
    let design = run_rtnm(&shifted, &rtnm_config(dgp.seed ^ 0xD)).map_err(|e| e.to_string())?;
    let att2 = estimate_att(&shifted, &design, &att.index, Adjustment::None)
        .map_err(|e| e.to_string())?;
    let mut max_inj = 0.0f64;
    for (k, &(g, t)) in att.index.pairs().iter().enumerate() {
        max_inj = max_inj.max((att2.values[k] - att.values[k] - delta(g, t)).abs());
    }
    if max_inj > 1e-10 {
        return Err(format!("injection deviates by {max_inj:.3e}"));
    }
    Ok(format!(
        "block identity within {max_gap:.1e}, injection within {max_inj:.1e}"
    ))
}

fn criterion_4_bias_reduction() -> Result<String, String> {
    let start = Instant::now();
    let mut study = StudyConfig::new(base_dgp(2000, 404), 200, 10);
    study.adjust = Adjustment::Linear;
    let summary = run_study(&study).map_err(|e| e.to_string())?;
    if summary.n_failed > 10 {
        return Err(format!("{} replicates failed", summary.n_failed));
    }
    let k = summary.cells.len() as f64;
    let bias: f64 = summary.cells.iter().map(|c| c.bias.abs()).sum::<f64>() / k;
    let naive: f64 = summary.cells.iter().map(|c| c.naive_bias.abs()).sum::<f64>() / k;
    let elapsed = start.elapsed();
    if elapsed.as_secs() > 1200 {
        return Err(format!("took {elapsed:.1?}, budget 20 min"));
    }
    if bias <= 0.5 * naive {
        Ok(format!(
            "mean |bias| {bias:.4} vs naive {naive:.4} (ratio {:.2}) in {elapsed:.1?}",
            bias / naive
        ))
    } else {
        Err(format!(
            "mean |bias| {bias:.4} vs naive {naive:.4} (ratio {:.2})",
            bias / naive
        ))
    }
}

fn criterion_5_bootstrap_coverage() -> Result<String, String> {
    let mut dgp = unconfounded(base_dgp(2000, 505));
    dgp.effect = EffectMap::Constant { value: 2.0 };
    let study = StudyConfig::new(dgp, 200, 1000);
    let summary = run_study(&study).map_err(|e| e.to_string())?;
    if summary.n_failed > 10 {
        return Err(format!("{} replicates failed", summary.n_failed));
    }
    let mut lo = 1.0f64;
    let mut hi = 0.0f64;
    for cell in &summary.cells {
        lo = lo.min(cell.coverage);
        hi = hi.max(cell.coverage);
        if !(0.90..=0.99).contains(&cell.coverage) {
            return Err(format!(
                "cell ({}, {}) coverage {:.3} outside [0.90, 0.99]",
                cell.g, cell.t, cell.coverage
            ));
        }
    }
    Ok(format!("per-cell coverage in [{lo:.3}, {hi:.3}]"))
}

fn criterion_6_test_size_and_power() -> Result<String, String> {
    let hypotheses = size_hypotheses();
    let reps = 200usize;
    let test_boot = 500usize;

    // Size under a homogeneous effect surface.
    let mut rejections = vec![0usize; hypotheses.len()];
    let mut done = 0usize;
    for rep in 0..reps {
        let mut dgp = unconfounded(base_dgp(2000, 0));
        dgp.effect = EffectMap::Constant { value: 2.0 };
        dgp.seed = 60_000 + rep as u64;
        let Some((_, att, cov)) = pipeline(&dgp, Adjustment::None, 1000) else {
            continue;
        };
        done += 1;
        for (h, &kind) in hypotheses.iter().enumerate() {
            let spec = build_hypothesis(&att.index, kind).map_err(|e| e.to_string())?;
            let res = wald_test(&att, &cov, &spec, test_boot, dgp.seed ^ 0x7E57)
                .map_err(|e| e.to_string())?;
            if res.p_value < 0.05 {
                rejections[h] += 1;
            }
        }
    }
    if done < reps - 10 {
        return Err(format!("only {done} size replicates completed"));
    }
    let mut size_lo = 1.0f64;
    let mut size_hi = 0.0f64;
    for (h, &kind) in hypotheses.iter().enumerate() {
        let rate = rejections[h] as f64 / done as f64;
        size_lo = size_lo.min(rate);
        size_hi = size_hi.max(rate);
        if !(0.02..=0.10).contains(&rate) {
            return Err(format!("size {rate:.3} for {kind:?} outside [0.02, 0.10]"));
        }
    }

    // Power under a cohort-varying surface with gaps of several SEs.
    let power_hypotheses = [
        HypothesisKind::FixedTime(4),
        HypothesisKind::FixedTime(5),
        HypothesisKind::FixedTime(6),
        HypothesisKind::FixedLag(0),
        HypothesisKind::FixedLag(1),
        HypothesisKind::FixedLag(2),
    ];
    let mut power_rejections = vec![0usize; power_hypotheses.len()];
    let mut power_done = 0usize;
    for rep in 0..reps {
        let mut dgp = unconfounded(base_dgp(2000, 0));
        dgp.effect = EffectMap::CohortVarying {
            values: vec![(1, 1.0), (2, 1.5), (3, 2.0), (4, 2.5)],
        };
        dgp.seed = 70_000 + rep as u64;
        let Some((_, att, cov)) = pipeline(&dgp, Adjustment::None, 1000) else {
            continue;
        };
        power_done += 1;
        for (h, &kind) in power_hypotheses.iter().enumerate() {
            let spec = build_hypothesis(&att.index, kind).map_err(|e| e.to_string())?;
            let res = wald_test(&att, &cov, &spec, test_boot, dgp.seed ^ 0x7E57)
                .map_err(|e| e.to_string())?;
            if res.p_value < 0.05 {
                power_rejections[h] += 1;
            }
        }
    }
    if power_done < reps - 10 {
        return Err(format!("only {power_done} power replicates completed"));
    }
    let mut power_lo = 1.0f64;
    for (h, &kind) in power_hypotheses.iter().enumerate() {
        let rate = power_rejections[h] as f64 / power_done as f64;
        power_lo = power_lo.min(rate);
        if rate < 0.5 {
            return Err(format!("power {rate:.3} for {kind:?} below 0.5"));
        }
    }
    Ok(format!(
        "size in [{size_lo:.3}, {size_hi:.3}], min power {power_lo:.3}"
    ))
}

fn criterion_7_analytic_bootstrap() -> Result<String, String> {
    // Two blocks contributing 0 and 2: resample means {0, 1, 1, 2} are
    // equally likely, so the exact resampling variance is 0.5.
    let rows = vec![vec![0.0], vec![2.0]];
    let att = AttVector {
        index: GtIndex::all_cells(&[1], 1),
        values: vec![1.0],
        block_contributions: rows,
        block_ids: vec![0, 1],
        n_strata_used: vec![2],
        n_strata_dropped: vec![0],
    };
    let cov = bootstrap_covariance(&att, 10_000, 77, false).map_err(|e| e.to_string())?;
    let v = cov.sigma.get(0, 0);
    if (v - 0.5).abs() < 0.05 {
        Ok(format!("variance {v:.4} vs exact 0.5"))
    } else {
        Err(format!("variance {v:.4} vs exact 0.5"))
    }
}

fn criterion_8_test_algebra() -> Result<String, String> {
    // Hand example: two cells, estimate (1, 3), identity covariance, single
    // contrast 1 - (-1). Projection gives (2, 2) and W = (1-3)^2 / 2 = 2.
    let att = AttVector {
        index: GtIndex::all_cells(&[1], 2),
        values: vec![1.0, 3.0],
        block_contributions: vec![vec![0.0, 2.0], vec![2.0, 4.0]],
        block_ids: vec![0, 1],
        n_strata_used: vec![2, 2],
        n_strata_dropped: vec![0, 0],
    };
    let mut sigma = rtnm::SymMatrix::zeros(2);
    sigma.add_to_diag(1.0);
    let cov = CovarianceEstimate {
        index: att.index.clone(),
        sigma,
        b: 1000,
        seed: 0,
        generator: "fixed".into(),
        psd_repaired: false,
        replicates: None,
    };
    let spec = HypothesisSpec::custom(
        vec![vec![1.0, -1.0]],
        2,
        "hand example".into(),
    )
    .map_err(|e| e.to_string())?;
    let result = wald_test(&att, &cov, &spec, 100, 3).map_err(|e| e.to_string())?;
    if (result.w_obs - 2.0).abs() > 1e-10 {
        return Err(format!("W_obs {} vs 2", result.w_obs));
    }
    let proj_gap = (result.tau_null[0] - 2.0)
        .abs()
        .max((result.tau_null[1] - 2.0).abs());
    let restriction: f64 = result.tau_null[0] - result.tau_null[1];
    if proj_gap > 1e-10 || restriction.abs() > 1e-10 {
        return Err(format!("projection off by {proj_gap:.2e}"));
    }
    // Row rescaling leaves the statistic invariant.
    let scaled = HypothesisSpec::custom(
        vec![vec![17.0, -17.0]],
        2,
        "scaled".into(),
    )
    .map_err(|e| e.to_string())?;
    let result2 = wald_test(&att, &cov, &scaled, 100, 3).map_err(|e| e.to_string())?;
    if (result2.w_obs - result.w_obs).abs() > 1e-10 {
        return Err(format!(
            "row scaling moved W from {} to {}",
            result.w_obs, result2.w_obs
        ));
    }
    Ok("W_obs = 2 exact, projection and scaling within 1e-10".into())
}

fn criterion_9_determinism() -> Result<String, String> {
    let run_once = || -> Result<Vec<String>, String> {
        let dgp = base_dgp(600, 99);
        let sim = generate_panel_retrying(&dgp, 20).map_err(|e| e.to_string())?;
        let design = run_rtnm(&sim.data, &rtnm_config(17)).map_err(|e| e.to_string())?;
        let index = GtIndex::all_cells(&[1, 2, 3, 4], 6);
        let att = estimate_att(&sim.data, &design, &index, Adjustment::Linear)
            .map_err(|e| e.to_string())?;
        let cov = bootstrap_covariance(&att, 400, 5, true).map_err(|e| e.to_string())?;
        let spec = build_hypothesis(&index, HypothesisKind::FixedLag(1))
            .map_err(|e| e.to_string())?;
        let test = wald_test(&att, &cov, &spec, 300, 11).map_err(|e| e.to_string())?;
        let mut panel_csv = Vec::new();
        sim.data.write_csv(&mut panel_csv).map_err(|e| e.to_string())?;
        Ok(vec![
            String::from_utf8(panel_csv).unwrap(),
            design.to_json_string(),
            serde_json::to_string(&att).unwrap(),
            serde_json::to_string(&cov).unwrap(),
            serde_json::to_string(&test).unwrap(),
        ])
    };
    let a = run_once()?;
    let b = run_once()?;
    if a == b {
        Ok(format!("{} artifacts byte-identical", a.len()))
    } else {
        let stage = a.iter().zip(b.iter()).position(|(x, y)| x != y).unwrap();
        Err(format!("artifact {stage} differs between runs"))
    }
}

fn criterion_10_scale() -> Result<String, String> {
    let start = Instant::now();
    let dgp = DgpConfig {
        n_units: 237 + 360 + 302 + 838 + 7890,
        n_covariates: 9,
        cohort_quota: Some(vec![237, 360, 302, 838]),
        ..base_dgp(0, 1010)
    };
    let sim = generate_panel_retrying(&dgp, 5).map_err(|e| e.to_string())?;
    let design = run_rtnm(&sim.data, &rtnm_config(77)).map_err(|e| e.to_string())?;
    let index = GtIndex::all_cells(&[1, 2, 3, 4], 6);
    let att =
        estimate_att(&sim.data, &design, &index, Adjustment::None).map_err(|e| e.to_string())?;
    let cov = bootstrap_covariance(&att, 1000, 3, false).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    if att.values.iter().any(|v| !v.is_finite())
        || cov.standard_errors().iter().any(|s| !s.is_finite())
    {
        return Err("non-finite estimates at scale".into());
    }
    let violations = verify_nested(&design);
    if !violations.is_empty() {
        return Err(format!("{} structure violations at scale", violations.len()));
    }
    if elapsed.as_secs() >= 600 {
        return Err(format!("took {elapsed:.1?}, budget 10 min"));
    }
    Ok(format!(
        "{} units matched, estimated, and bootstrapped in {elapsed:.1?}",
        sim.data.n_units()
    ))
}

#[test]
fn acceptance_criteria() {
    let mut gate = Gate { failures: vec![] };
    gate.check(1, "matcher optimality vs brute force", criterion_1_matcher_oracle());
    gate.check(2, "nested structure on 50 simulated panels", criterion_2_nested_structure());
    gate.check(3, "estimator block identity and effect injection", criterion_3_estimator_identity());
    gate.check(4, "bias reduction vs naive on confounded panels", criterion_4_bias_reduction());
    gate.check(5, "bootstrap interval coverage", criterion_5_bootstrap_coverage());
    gate.check(6, "test size and power", criterion_6_test_size_and_power());
    gate.check(7, "two-block analytic bootstrap variance", criterion_7_analytic_bootstrap());
    gate.check(8, "test statistic algebra", criterion_8_test_algebra());
    gate.check(9, "pipeline determinism", criterion_9_determinism());
    gate.check(10, "full-scale panel within time budget", criterion_10_scale());
    assert!(
        gate.failures.is_empty(),
        "failed criteria:\n{}",
        gate.failures.join("\n")
    );
}
