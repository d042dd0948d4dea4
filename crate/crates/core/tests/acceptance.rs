//! Acceptance checks against the published reference values. Prints one
//! PASS/FAIL line per criterion. Set MSTRIAL_ACCEPTANCE_STRICT=1 to turn any
//! failure into a nonzero exit.

mod common;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use mstrial::cohort::EventDefinition;
use mstrial::design::{design_power, planning_moments, required_sample_size, DesignFile, PlanningAssumptions};
use mstrial::dist::{chi2_cdf, ks_one_sample};
use mstrial::linalg::{cholesky_lower, forward_substitute};
use mstrial::model::illness_death;
use mstrial::sim::{compare_adaptive, reference_scenario, ScenarioConfig};
use mstrial::stats::{analyze_stage, invertibility_report, stage_statistic, statistics_at, Verdict, Weight};
use mstrial::{AccrualPlan, MultiStateModel, TransitionIntensity};

fn data(rel: &str) -> String {
    format!("{}/../../data/{rel}", env!("CARGO_MANIFEST_DIR"))
}

struct Outcome {
    pass: bool,
    details: String,
}

fn table2() -> Outcome {
    let table = [
        (250, "P", [0.0505, 0.0511, 0.0521]),
        (250, "OF", [0.0512, 0.0514, 0.0517]),
        (1000, "P", [0.0505, 0.0489, 0.0495]),
        (1000, "OF", [0.0506, 0.0500, 0.0505]),
    ];
    let mut pass = true;
    let mut cells = Vec::new();
    for (n, kind, targets) in table {
        for (k, &target) in targets.iter().enumerate() {
            let config =
                ScenarioConfig::from_json_file(data(&format!("scenarios/table2/s{}_n{n}_{kind}.json", k + 1)))
                    .unwrap();
            let (r, _) = config.prepare().unwrap().run();
            let tol = 3.0 * (target * (1.0 - target) / r.replicates as f64).sqrt();
            let ok = (r.rejection_rate - target).abs() <= tol;
            pass &= ok;
            cells.push(format!(
                "s{} n={n} {kind}: {:.4} vs {target}{}",
                k + 1,
                r.rejection_rate,
                if ok { "" } else { " (out)" }
            ));
        }
    }
    Outcome { pass, details: cells.join("; ") }
}

fn table3() -> Outcome {
    let cells = [
        ("s1_0.8_0.85_P", 620u64),
        ("s1_0.6_0.75_OF", 136),
        ("s2_0.7_0.8_P", 241),
        ("s3_0.6_0.85_OF", 117),
    ];
    let mut pass = true;
    let mut out = Vec::new();
    for (name, per_group) in cells {
        let config = ScenarioConfig::from_json_file(data(&format!("scenarios/table3/{name}.json"))).unwrap();
        let prepared = config.prepare().unwrap();
        let assumptions = PlanningAssumptions {
            model: prepared.truth.clone(),
            accrual: config.accrual.clone(),
            dropout_rate: None,
        };
        let m = planning_moments(&assumptions, &config.events, &config.design.analysis_times, &Weight::Unit)
            .unwrap();
        let total = required_sample_size(&m, &prepared.boundaries, 0.8).unwrap();
        let analytic = total.div_ceil(2);
        let size_ok = (analytic as f64 - per_group as f64).abs() <= 0.1 * per_group as f64;
        let (r, _) = prepared.run();
        let power_ok = (0.77..=0.83).contains(&r.rejection_rate);
        pass &= size_ok && power_ok;
        out.push(format!(
            "{name}: per-group n {analytic} vs {per_group}, simulated power {:.4} at n={}",
            r.rejection_rate, config.n
        ));
    }
    Outcome { pass, details: out.join("; ") }
}

fn table1() -> Outcome {
    let table = [
        [0.431, 0.241, 0.889, 0.745],
        [0.522, 0.189, 0.980, 0.694],
        [0.441, 0.235, 0.957, 0.772],
    ];
    let plan = AccrualPlan::new(3.0, 2.0);
    let mut worst: f64 = 0.0;
    for (k, row) in table.iter().enumerate() {
        let m = reference_scenario(k + 1).unwrap();
        let got = [
            m.expected_event_fraction(&[1, 2], 2.5, &plan).unwrap(),
            m.expected_event_fraction(&[2], 2.5, &plan).unwrap(),
            m.expected_event_fraction(&[1, 2], 5.0, &plan).unwrap(),
            m.expected_event_fraction(&[2], 5.0, &plan).unwrap(),
        ];
        for (g, t) in got.iter().zip(row) {
            worst = worst.max((g - t).abs());
        }
    }
    Outcome {
        pass: worst <= 0.002,
        details: format!("largest deviation over 12 fractions {worst:.5}"),
    }
}

fn case_study() -> Outcome {
    let file = DesignFile::from_json_file(data("designs/case_study.json")).unwrap();
    let power = design_power(&file.moments().unwrap(), &file.spec.boundaries().unwrap(), 480.0);
    let power_ok = (0.77..=0.83).contains(&power);

    let config = ScenarioConfig::from_json_file(data("scenarios/case_study_adaptive.json")).unwrap();
    let c = compare_adaptive(&config).unwrap();
    let gain_ok = c.power_difference + 3.0 * c.difference_se >= 0.0;
    let accrual = c.adaptive.mean_accrual_duration;
    let accrual_ok = (accrual - 24.87).abs() <= 1.0;
    Outcome {
        pass: power_ok && gain_ok && accrual_ok,
        details: format!(
            "analytic power at 480 {power:.4}; group-sequential {:.4}, adaptive {:.4}, difference {:+.4} (se {:.4}); adaptive mean accrual {accrual:.2} vs 24.87",
            c.group_sequential.rejection_rate, c.adaptive.rejection_rate, c.power_difference, c.difference_se
        ),
    }
}

fn null_distribution() -> Outcome {
    let mut config = ScenarioConfig::from_json_file(data("scenarios/table2/s1_n250_P.json")).unwrap();
    config.hazard_ratios.clear();
    config.n = 500;
    config.replicates = 5000;
    let prepared = config.prepare().unwrap();
    let events = config.events.clone();
    let pairs: Vec<(f64, f64)> = (0..config.replicates)
        .into_par_iter()
        .map(|i| {
            let cohort = prepared.simulate_cohort(i).unwrap();
            let s1 = analyze_stage(&cohort, &events, &Weight::Unit, 1, 0.0, 2.5).unwrap();
            let s2 = analyze_stage(&cohort, &events, &Weight::Unit, 2, 2.5, 5.0).unwrap();
            (s1.statistic, s2.statistic)
        })
        .collect();
    let first: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let second: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let ks1 = ks_one_sample(&first, |x| chi2_cdf(2, x));
    let ks2 = ks_one_sample(&second, |x| chi2_cdf(2, x));
    let corr = pearson(&first, &second);
    Outcome {
        pass: ks1.p_value > 0.01 && ks2.p_value > 0.01 && corr.abs() < 0.05,
        details: format!(
            "KS p stage 1 {:.3}, stage 2 {:.3}; correlation {corr:+.4}",
            ks1.p_value, ks2.p_value
        ),
    }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let cohort = common::random_cohort(&mut rng, case % 2 == 1);
        let events = common::random_events(&mut rng);
        let t = 1.0 + rng.random::<f64>() * 6.0;
        let (u, v) = statistics_at(&cohort, &events, &Weight::Unit, t).unwrap();
        let (uo, vo) = common::enumerate(&cohort, &events, t);
        for b in 0..events.len() {
            worst = worst.max((u[b] - uo[b]).abs());
            for c in 0..events.len() {
                worst = worst.max((v[(b, c)] - vo[b][c]).abs());
            }
        }
    }
    let enumeration_ok = worst <= 1e-12;

    let mut chol_worst: f64 = 0.0;
    for _ in 0..200 {
        let d = rng.random_range(1..=4);
        let a = nalgebra::DMatrix::from_fn(d, d, |_, _| rng.random::<f64>() - 0.5);
        let dv = &a * a.transpose() + nalgebra::DMatrix::identity(d, d) * 0.05;
        let du = nalgebra::DVector::from_fn(d, |_, _| 2.0 * rng.random::<f64>() - 1.0);
        let direct = (du.transpose() * dv.clone().try_inverse().unwrap() * &du)[(0, 0)];
        let z = forward_substitute(&cholesky_lower(&dv).unwrap(), &du);
        let s = stage_statistic(&du, &dv).unwrap().statistic;
        let scale = direct.max(1.0);
        chol_worst = chol_worst.max((z.norm_squared() - direct).abs() / scale);
        chol_worst = chol_worst.max((s - direct).abs() / scale);
    }
    let chol_ok = chol_worst <= 1e-10;

    let mut modes_worst: f64 = 0.0;
    let fh = [EventDefinition::pfs(), EventDefinition::os()];
    let ae = [EventDefinition::all_entries(&[1, 2]), EventDefinition::all_entries(&[2])];
    for scenario in 1..=3 {
        let mut config = ScenarioConfig::from_json_file(data("scenarios/table2/s1_n250_P.json")).unwrap();
        config.model = reference_scenario(scenario).unwrap();
        let prepared = config.prepare().unwrap();
        for i in 0..10 {
            let cohort = prepared.simulate_cohort(i).unwrap();
            for t in [1.0, 2.5, 5.0] {
                let (u1, v1) = statistics_at(&cohort, &fh, &Weight::Unit, t).unwrap();
                let (u2, v2) = statistics_at(&cohort, &ae, &Weight::Unit, t).unwrap();
                modes_worst = modes_worst.max((u1 - u2).amax()).max((v1 - v2).amax());
            }
        }
    }
    let modes_ok = modes_worst <= 1e-12;
    Outcome {
        pass: enumeration_ok && chol_ok && modes_ok,
        details: format!(
            "enumeration max diff {worst:.1e}; triangular solve max rel diff {chol_worst:.1e}; first-hitting vs all-entries max diff {modes_worst:.1e}"
        ),
    }
}

fn invertibility() -> Outcome {
    let m = illness_death((0.6, 1.0), (0.075, 1.0), (0.9, 1.0)).unwrap();
    let pfs_os = invertibility_report(&m, &[EventDefinition::pfs(), EventDefinition::os()])
        .unwrap()
        .verdict;
    let dup = invertibility_report(&m, &[EventDefinition::os(), EventDefinition::os()])
        .unwrap()
        .verdict;
    let pairs = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 1), (2, 3)];
    let four = MultiStateModel::new(
        4,
        pairs.iter().map(|&(a, b)| TransitionIntensity::new(a, b, 0.1, 1.0)).collect(),
    )
    .unwrap();
    let events = [EventDefinition::first_hitting(&[2, 3]), EventDefinition::first_hitting(&[1, 3])];
    let recurrent = invertibility_report(&four, &events).unwrap().verdict;
    Outcome {
        pass: pfs_os == Verdict::GuaranteedInvertible
            && dup == Verdict::ProvablySingular
            && recurrent == Verdict::GuaranteedInvertible,
        details: format!("PFS/OS {pfs_os:?}; duplicated OS {dup:?}; four-state {recurrent:?}"),
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("type I error under the null (12 cells)", table2),
        ("sample size and power (4 cells)", table3),
        ("expected event fractions", table1),
        ("case study design and adaptive extension", case_study),
        ("null distribution of stage statistics", null_distribution),
        ("statistics against brute-force enumeration", oracle_equivalence),
        ("invertibility verdicts", invertibility),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} criterion {} ({name}): {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.details,
            start.elapsed().as_secs_f64()
        );
    }
    println!("{} of {} criteria pass", criteria.len() - failed, criteria.len());
    if failed > 0 && std::env::var("MSTRIAL_ACCEPTANCE_STRICT").as_deref() == Ok("1") {
        std::process::exit(1);
    }
}
