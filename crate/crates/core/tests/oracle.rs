mod common;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{enumerate, random_cohort, random_events};
use mstrial::cohort::{risk_sets, Cohort, EventDefinition};
use mstrial::linalg::{cholesky_lower, forward_substitute};
use mstrial::sim::{reference_scenario, ScenarioConfig};
use mstrial::stats::{analyze_stage, statistics_at, Weight};

fn data(rel: &str) -> String {
    format!("{}/../../data/{rel}", env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn statistics_match_enumeration_on_random_cohorts() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..200 {
        let cohort = random_cohort(&mut rng, case % 2 == 1);
        let events = random_events(&mut rng);
        let t = 1.0 + rng.random::<f64>() * 6.0;
        let (u, v) = statistics_at(&cohort, &events, &Weight::Unit, t).unwrap();
        let (uo, vo) = enumerate(&cohort, &events, t);
        for b in 0..events.len() {
            assert!((u[b] - uo[b]).abs() < 1e-12, "case {case}: U[{b}] {} vs {}", u[b], uo[b]);
            for c in 0..events.len() {
                assert!((v[(b, c)] - vo[b][c]).abs() < 1e-12, "case {case}: V[{b},{c}]");
            }
        }
    }
}

#[test]
fn four_patient_fixture_by_hand() {
    let cohort = Cohort::load(
        data("fixtures/four/transitions.csv"),
        Some(data("fixtures/four/roster.csv").as_ref()),
    )
    .unwrap();
    let events = [EventDefinition::pfs(), EventDefinition::os()];
    let (u, v) = statistics_at(&cohort, &events, &Weight::Unit, 10.0).unwrap();
    assert!((u[0] + 7.0 / 12.0).abs() < 1e-14);
    assert!((u[1] + 5.0 / 12.0).abs() < 1e-14);
    assert!((v[(0, 0)] - 17.0 / 144.0).abs() < 1e-14);
    assert!((v[(1, 1)] - 17.0 / 144.0).abs() < 1e-14);
    assert!(v[(0, 1)].abs() < 1e-14 && v[(1, 0)].abs() < 1e-14);

    let stage1 = analyze_stage(&cohort, &events, &Weight::Unit, 1, 0.0, 4.0).unwrap();
    assert!(stage1.rank_deficient);
    assert_eq!(stage1.rank, 1);
}

#[test]
fn risk_sets_match_hand_enumeration() {
    let cohort = Cohort::load(
        data("fixtures/risk3/transitions.csv"),
        Some(data("fixtures/risk3/roster.csv").as_ref()),
    )
    .unwrap();
    let events = [EventDefinition::pfs(), EventDefinition::os()];
    let snaps = risk_sets(&cohort, &events, 10.0);
    let mut reader = csv::Reader::from_path(data("fixtures/risk3/expected.csv")).unwrap();
    let mut rows = 0;
    for row in reader.records() {
        let row = row.unwrap();
        let s: f64 = row[0].parse().unwrap();
        let state: usize = row[2].parse().unwrap();
        let (y, y1): (usize, usize) = (row[3].parse().unwrap(), row[4].parse().unwrap());
        let snap = snaps.iter().find(|x| x.s == s).unwrap();
        let got = match &row[1] {
            "all" => (snap.at_risk[state], snap.at_risk_treated[state]),
            "PFS" => (snap.event_at_risk[0][state], snap.event_at_risk_treated[0][state]),
            "OS" => (snap.event_at_risk[1][state], snap.event_at_risk_treated[1][state]),
            other => panic!("unknown restriction {other}"),
        };
        assert_eq!(got, (y, y1), "s = {s}, {} state {state}", &row[1]);
        rows += 1;
    }
    assert_eq!(rows, 36);
    assert_eq!(snaps.len(), 4);
}

#[test]
fn cholesky_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    while checked < 100 {
        let d = rng.random_range(1..=4);
        let a = DMatrix::from_fn(d, d, |_, _| rng.random::<f64>() - 0.5);
        let dv = &a * a.transpose() + DMatrix::identity(d, d) * 0.05;
        let du = DVector::from_fn(d, |_, _| 2.0 * rng.random::<f64>() - 1.0);
        let z = forward_substitute(&cholesky_lower(&dv).unwrap(), &du);
        let direct = (du.transpose() * dv.clone().try_inverse().unwrap() * &du)[(0, 0)];
        assert!((z.norm_squared() - direct).abs() < 1e-10 * direct.max(1.0));
        let r = mstrial::stats::stage_statistic(&du, &dv).unwrap();
        assert!((r.statistic - z.norm_squared()).abs() < 1e-10 * direct.max(1.0));
        checked += 1;
    }
}

#[test]
fn cholesky_identity_on_simulated_stages() {
    let config = ScenarioConfig::from_json_file(data("scenarios/table2/s1_n250_P.json")).unwrap();
    let prepared = config.prepare().unwrap();
    let events = config.events.clone();
    for i in 0..20 {
        let cohort = prepared.simulate_cohort(i).unwrap();
        for (t0, t1) in [(0.0, 2.5), (2.5, 5.0)] {
            let r = analyze_stage(&cohort, &events, &Weight::Unit, 1, t0, t1).unwrap();
            let z = r.z.as_ref().expect("positive definite stage covariance");
            let z2: f64 = z.iter().map(|x| x * x).sum();
            assert!((z2 - r.statistic).abs() < 1e-10 * r.statistic.max(1.0));
        }
    }
}

#[test]
fn first_hitting_equals_all_entries_in_illness_death() {
    for scenario in 1..=3 {
        let mut config = ScenarioConfig::from_json_file(data("scenarios/table2/s1_n250_P.json")).unwrap();
        config.model = reference_scenario(scenario).unwrap();
        let prepared = config.prepare().unwrap();
        let fh = [EventDefinition::pfs(), EventDefinition::os()];
        let ae = [EventDefinition::all_entries(&[1, 2]), EventDefinition::all_entries(&[2])];
        for i in 0..10 {
            let cohort = prepared.simulate_cohort(i).unwrap();
            for t in [1.0, 2.5, 5.0] {
                let (u1, v1) = statistics_at(&cohort, &fh, &Weight::Unit, t).unwrap();
                let (u2, v2) = statistics_at(&cohort, &ae, &Weight::Unit, t).unwrap();
                assert!((u1 - u2).amax() < 1e-12);
                assert!((v1 - v2).amax() < 1e-12);
            }
        }
    }
}
