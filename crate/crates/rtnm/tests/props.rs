//! Property-based invariants: metric axioms, matcher cover structure,
//! projection algebra, and p-value arithmetic.

use proptest::prelude::*;

use rtnm::bootstrap::bootstrap_covariance;
use rtnm::distance::{ComparisonEntity, DistanceMatrix, FittedMetric, Metric};
use rtnm::estimator::{AttVector, GtIndex};
use rtnm::hypothesis::{build_hypothesis, wald_test, HypothesisKind};
use rtnm::matcher::{solve_full_match, FullMatchProblem, MatchBounds};

fn windows_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (3usize..8, 1usize..4).prop_flat_map(|(n, dim)| {
        proptest::collection::vec(
            proptest::collection::vec(-100.0f64..100.0, dim..=dim),
            n..=n,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fitted_metric_is_a_metric(windows in windows_strategy(), rank in any::<bool>()) {
        let units: Vec<usize> = (0..windows.len()).collect();
        let metric = if rank { Metric::RankMahalanobis } else { Metric::Mahalanobis };
        let fitted = FittedMetric::fit(1, &units, &windows, metric, None).unwrap();
        let n = units.len();
        for i in 0..n {
            prop_assert!(fitted.unit_distance(i, i).unwrap().abs() < 1e-9);
            for j in 0..n {
                let dij = fitted.unit_distance(i, j).unwrap();
                let dji = fitted.unit_distance(j, i).unwrap();
                prop_assert!(dij >= 0.0);
                prop_assert!((dij - dji).abs() < 1e-9);
                for k in 0..n {
                    let dik = fitted.unit_distance(i, k).unwrap();
                    let dkj = fitted.unit_distance(k, j).unwrap();
                    prop_assert!(dij <= dik + dkj + 1e-9, "triangle violated");
                }
            }
        }
    }

    #[test]
    fn set_distance_is_the_member_mean(windows in windows_strategy()) {
        let units: Vec<usize> = (0..windows.len()).collect();
        let fitted =
            FittedMetric::fit(1, &units, &windows, Metric::Mahalanobis, None).unwrap();
        let stratum: Vec<usize> = units[1..].to_vec();
        let direct = fitted.unit_to_set_distance(0, &stratum).unwrap();
        let mean: f64 = stratum
            .iter()
            .map(|&k| fitted.unit_distance(0, k).unwrap())
            .sum::<f64>()
            / stratum.len() as f64;
        prop_assert!((direct - mean).abs() < 1e-9);
    }

    #[test]
    fn matcher_always_returns_an_exact_star_cover(
        nt in 1usize..5,
        nc in 1usize..6,
        raw in proptest::collection::vec(0.0f64..50.0, 30),
        seed in any::<u64>(),
        default_bounds in any::<bool>(),
    ) {
        let values: Vec<f64> = (0..nt * nc).map(|k| raw[k % raw.len()]).collect();
        let bounds = if default_bounds { MatchBounds::default() } else { MatchBounds::unbounded() };
        let problem = FullMatchProblem {
            distances: DistanceMatrix::from_values(
                1,
                (0..nt).collect(),
                (0..nc).map(ComparisonEntity::Unit).collect(),
                values.clone(),
            ),
            bounds,
        };
        let s = match solve_full_match(&problem, seed) {
            Ok(s) => s,
            Err(rtnm::matcher::MatchError::Infeasible(_)) => return Ok(()),
            Err(e) => return Err(TestCaseError::fail(format!("{e}"))),
        };
        let mut seen_t = vec![0usize; nt];
        let mut seen_c = vec![0usize; nc];
        let mut recomputed = 0.0;
        for st in &s.strata {
            prop_assert!(st.treated.len() == 1 || st.comparisons.len() == 1);
            prop_assert!(!st.treated.is_empty() && !st.comparisons.is_empty());
            for &r in &st.treated {
                seen_t[r] += 1;
                for &c in &st.comparisons {
                    recomputed += values[r * nc + c];
                }
            }
            for &c in &st.comparisons {
                seen_c[c] += 1;
            }
        }
        prop_assert!(seen_t.iter().all(|&k| k == 1), "treated cover broken");
        prop_assert!(seen_c.iter().all(|&k| k == 1), "comparison cover broken");
        prop_assert!((recomputed - s.objective).abs() < 1e-9);
    }

    #[test]
    fn wald_test_projection_and_pvalue_arithmetic(
        rows in proptest::collection::vec(
            proptest::collection::vec(-3.0f64..3.0, 4),
            4usize..10,
        ),
        seed in any::<u64>(),
    ) {
        let n1 = rows.len();
        let k = 4;
        let values: Vec<f64> = (0..k)
            .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n1 as f64)
            .collect();
        let att = AttVector {
            index: GtIndex::all_cells(&[1], 4),
            values: values.clone(),
            block_contributions: rows,
            block_ids: (0..n1).collect(),
            n_strata_used: vec![n1; k],
            n_strata_dropped: vec![0; k],
        };
        let cov = bootstrap_covariance(&att, 200, seed, false).unwrap();
        let spec = build_hypothesis(&att.index, HypothesisKind::FixedCohort(1)).unwrap();
        let b = 100usize;
        let result = match wald_test(&att, &cov, &spec, b, seed) {
            Ok(r) => r,
            // Degenerate covariance can make the quadratic form unusable.
            Err(e) => return Err(TestCaseError::reject(format!("{e}"))),
        };
        // The restricted vector satisfies every constraint.
        for row in &spec.r {
            let dot: f64 = row.iter().zip(result.tau_null.iter()).map(|(a, b)| a * b).sum();
            prop_assert!(dot.abs() < 1e-8, "R tau_null = {dot}");
        }
        prop_assert!(result.w_obs >= -1e-12);
        prop_assert!((0.0..=1.0).contains(&result.p_value));
        // Tail probability is a count over B replicates.
        let scaled = result.p_value * b as f64;
        prop_assert!((scaled - scaled.round()).abs() < 1e-9);
        prop_assert!((result.f_stat - result.w_obs / spec.q as f64).abs() < 1e-12);
    }
}
