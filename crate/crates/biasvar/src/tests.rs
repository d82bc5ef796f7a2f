use super::*;
use proptest::prelude::*;

fn pop(spec: PopulationSpec) -> Population {
    spec.validate().unwrap()
}

fn within(x: f64, want: f64, se: f64, z: f64) -> bool {
    (x - want).abs() <= z * se
}

#[test]
fn full_training_mse_matches_closed_form() {
    let p = pop(PopulationSpec::factor_model(8, 1.0, 0.7, 0.4, 1.5, 0.5, 2.0));
    let r = estimate_mse(&p, &UpdateRule::FullTraining, 5, 3, 20_000, 11).unwrap();
    let want = dist_sq(&p.spec.g_tr, &p.spec.g_star) + p.trace_tr() / 5.0;
    assert!(within(r.mse, want, r.mse_se, 3.0), "{} vs {want} ± {}", r.mse, r.mse_se);
    assert_eq!(r.var, 0.0);
    assert_eq!(r.bias, r.mse);
}

#[test]
fn target_only_mse_matches_closed_form() {
    let mut s = PopulationSpec::isotropic(6, 1.0, 1.0, 1.0, 1.0);
    s.sigma_star = Covariance::Diagonal(vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0]);
    let p = pop(s);
    for m in [1, 4, 16] {
        let r = estimate_mse(&p, &UpdateRule::TargetOnly, 4, m, 20_000, 12).unwrap();
        let want = p.trace_star() / m as f64;
        assert!(within(r.mse, want, r.mse_se, 3.0), "m={m}: {} vs {want}", r.mse);
        assert_eq!(r.bias, 0.0);
    }
}

#[test]
fn noiseless_matched_population_has_zero_error() {
    let p = pop(PopulationSpec::isotropic(8, 1.0, 0.0, 0.0, 0.0));
    let rules = [
        UpdateRule::FullTraining,
        UpdateRule::TargetOnly,
        UpdateRule::Global { k: 2 },
        UpdateRule::GroupWise { k: 3, groups: 4 },
    ];
    for r in estimate_many(&p, &rules, 6, 2, 50, 1).unwrap() {
        // The Gram-form objective carries cancellation error of order 1e-16.
        assert!(r.mse < 1e-24 && r.bias < 1e-12, "{}: {}", r.method, r.mse);
    }
}

#[test]
fn bound_values() {
    // n = k: a singleton feasible set.
    let b = subset_bound(1.0, 1.0, 1, 8, 8, 4);
    assert!((b - 2.0 * (2.0 * 2f64.ln()).sqrt()).abs() < 1e-12);
    // n = 8, k = 4, C = 1, σ = 1, m = 4: 2·√(2·ln 140).
    let b = subset_bound(1.0, 1.0, 1, 8, 4, 4);
    assert_eq!(format!("{b:.2}"), "6.29");
    assert!((subset_bound(1.0, 1.0, 3, 8, 4, 4) - 3.0 * b).abs() < 1e-12);
    // Large binomials stay finite.
    assert!(subset_bound(1.0, 1.0, 1, 10_000, 5_000, 1).is_finite());

    let p = pop(PopulationSpec::isotropic(4, 1.0, 0.5, 1.0, 4.0).with_clip(3.0));
    assert!((p.sigma() - 2.0).abs() < 1e-12);
    let g = variance_bound(&p, &UpdateRule::Global { k: 4 }, 8, 4).unwrap();
    assert!((g - 6.0 * b).abs() < 1e-9);
    assert_eq!(variance_bound(&p, &UpdateRule::FullTraining, 8, 4).unwrap(), 0.0);
    assert!((variance_bound(&p, &UpdateRule::TargetOnly, 8, 4).unwrap() - 4.0).abs() < 1e-12);
    let unclipped = pop(PopulationSpec::isotropic(4, 1.0, 0.5, 1.0, 4.0));
    assert!(variance_bound(&unclipped, &UpdateRule::Global { k: 2 }, 8, 4).is_err());
}

#[test]
fn infeasible_rules_are_rejected() {
    let p = pop(PopulationSpec::isotropic(4, 1.0, 0.5, 1.0, 1.0));
    assert!(estimate_mse(&p, &UpdateRule::Global { k: 9 }, 8, 2, 10, 1).is_err());
    assert!(estimate_mse(&p, &UpdateRule::Global { k: 0 }, 8, 2, 10, 1).is_err());
    assert!(estimate_mse(&p, &UpdateRule::GroupWise { k: 2, groups: 5 }, 8, 2, 10, 1).is_err());
    assert!(estimate_mse(&p, &UpdateRule::FullTraining, 8, 2, 0, 1).is_err());
    assert!(estimate_mse(&p, &UpdateRule::FullTraining, 8, 0, 10, 1).is_err());
}

#[test]
fn variance_stays_below_bound_on_a_grid() {
    let mut checked = 0;
    for (mis, var) in [(0.5, 1.0), (2.0, 0.5)] {
        let p = pop(PopulationSpec::isotropic(8, 1.0, mis, var, 1.0).with_clip(3.0));
        for (m, rule) in [
            (1, UpdateRule::Global { k: 2 }),
            (4, UpdateRule::Global { k: 3 }),
            (16, UpdateRule::GroupWise { k: 3, groups: 2 }),
        ] {
            let r = estimate_mse(&p, &rule, 6, m, 2_000, 13).unwrap();
            let bound = r.bound.unwrap();
            assert!(r.var <= bound + 3.0 * r.var_se, "{} m={m}: {} > {bound}", r.method, r.var);
            checked += 1;
        }
    }
    assert_eq!(checked, 6);
}

#[test]
fn bias_ordering_holds_per_trial() {
    let p = pop(PopulationSpec::factor_model(8, 1.0, 0.5, 1.0, 2.0, 0.5, 1.0));
    let rules = [
        UpdateRule::Global { k: 3 },
        UpdateRule::GroupWise { k: 3, groups: 2 },
        UpdateRule::GroupWise { k: 3, groups: 4 },
        UpdateRule::GroupWise { k: 3, groups: 8 },
        UpdateRule::Global { k: 6 },
        UpdateRule::FullTraining,
    ];
    for t in run_trials(&p, &rules, 6, 2, 300, 14).unwrap() {
        // Refinement never increases the best achievable error.
        for w in t[..4].windows(2) {
            assert!(w[1].inf <= w[0].inf + 1e-12);
        }
        // k = n is the full-training singleton.
        assert!((t[4].inf - t[5].inf).abs() < 1e-12);
        for o in &t {
            assert!(o.err + 1e-12 >= o.inf);
        }
    }
}

#[test]
fn descent_check_cases() {
    // Exact gradient on a matched quadratic: equality with zero residual.
    let mut s = PopulationSpec::isotropic(4, 2.0, 0.0, 1.0, 0.0);
    s.beta = 2.0;
    let p = pop(s);
    let c = descent_check(&p, &UpdateRule::TargetOnly, 4, 3, 0.5, 50, 1).unwrap();
    assert!(c.mse < 1e-24);
    assert!((c.expected_after - c.bound).abs() < 1e-12);
    assert!(c.expected_after.abs() < 1e-12);

    let mut s = PopulationSpec::isotropic(6, 1.0, 1.5, 1.0, 1.0);
    s.beta = 2.0;
    let p = pop(s);
    for rule in [UpdateRule::FullTraining, UpdateRule::Global { k: 2 }, UpdateRule::TargetOnly] {
        let c = descent_check(&p, &rule, 6, 3, 0.5, 5_000, 2).unwrap();
        assert!(c.holds(3.0), "{rule:?}: {} vs {}", c.expected_after, c.bound);
    }
    let c = descent_check(&p, &UpdateRule::FullTraining, 6, 3, 1e-9, 100, 3).unwrap();
    assert!((c.expected_after - c.loss_before).abs() < 1e-8);
    assert!((c.bound - c.loss_before).abs() < 1e-8);
    assert!(descent_check(&p, &UpdateRule::FullTraining, 6, 3, 0.6, 10, 3).is_err());
}

#[test]
fn sweep_with_one_rule_always_picks_it() {
    let p = pop(PopulationSpec::isotropic(4, 1.0, 0.5, 1.0, 1.0));
    let t = sweep_m(&p, &[UpdateRule::Global { k: 2 }], 4, &[1, 4, 16], 50, 1).unwrap();
    assert_eq!(t.transitions(), vec!["global".to_string()]);
    assert_eq!(t.wins("global"), 3);
    assert!(t.csv().starts_with("m,global,winner\n1,"));
}

#[test]
fn results_are_schedule_independent() {
    let p = pop(PopulationSpec::factor_model(8, 1.0, 0.5, 1.0, 2.0, 0.5, 1.0));
    let rules = regime_rules();
    let a = estimate_many(&p, &rules[..3], 8, 4, 400, 5).unwrap();
    let b = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| estimate_many(&p, &rules[..3], 8, 4, 400, 5).unwrap());
    assert_eq!(a, b);
    let row = a[1].csv_row();
    assert_eq!(row.split(',').count(), SimResult::CSV_HEADER.split(',').count());
}

#[test]
fn feasible_set_matches_blocks() {
    let fs = UpdateRule::GroupWise { k: 2, groups: 4 }.feasible_set(16).unwrap();
    assert_eq!(fs.partition.len(), 4);
    assert_eq!(fs.partition.ranges(2, 0), vec![8..12]);
    let g = UpdateRule::Global { k: 2 }.feasible_set(16).unwrap();
    assert_eq!(g.partition.len(), 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn prop_group_bias_never_exceeds_global(seed in 0u64..10_000, mis in 0.0f64..3.0, k in 1usize..6) {
        let p = pop(PopulationSpec::factor_model(8, 1.0, 0.3, mis, 1.0, 0.5, 1.0));
        let rules = [UpdateRule::Global { k }, UpdateRule::GroupWise { k, groups: 2 }, UpdateRule::GroupWise { k, groups: 8 }];
        for t in run_trials(&p, &rules, 6, 2, 8, seed).unwrap() {
            prop_assert!(t[1].inf <= t[0].inf + 1e-12);
            prop_assert!(t[2].inf <= t[1].inf + 1e-12);
        }
    }
}
