use crowdnav::eval::{eval_seeds, run_policy_eval, EvalPolicy, Evaluator};
use crowdnav::pedestrian::OrcaParams;
use crowdnav::scenario::ScenarioConfig;

fn success(policy: EvalPolicy, sc: &ScenarioConfig, cases: usize) -> f64 {
    let ev = Evaluator::new(policy, sc.clone(), OrcaParams::default(), None).unwrap();
    run_policy_eval(&ev, &eval_seeds(11, cases), None)
        .unwrap()
        .report
        .success_rate
}

#[test]
fn random_trails_orca_in_a_crowd() {
    let sc = ScenarioConfig {
        n_robots: 3,
        n_humans: 10,
        fov_deg: 360.0,
        ..Default::default()
    };
    let orca = success(EvalPolicy::Orca, &sc, 200);
    let random = success(EvalPolicy::Random, &sc, 200);
    println!("3 robots / 10 humans over 200 cases: orca {orca:.3}, random {random:.3}");
    assert!(random < orca, "random {random} vs orca {orca}");
}

#[test]
fn orca_succeeds_more_often_with_fewer_humans() {
    let crowd = |n_humans| ScenarioConfig {
        n_robots: 1,
        n_humans,
        ..Default::default()
    };
    let sparse = success(EvalPolicy::Orca, &crowd(2), 100);
    let dense = success(EvalPolicy::Orca, &crowd(10), 100);
    assert!(sparse > dense, "2 humans {sparse} vs 10 humans {dense}");
    assert!(sparse >= 0.5, "2 humans {sparse}");
}
