use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

use mstrial::cohort::{Cohort, EventDefinition};
use mstrial::design::DesignFile;
use mstrial::stats::{analyze_stage, Weight};

fn data(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(rel)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mstrial"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &PathBuf) -> &str {
    p.to_str().unwrap()
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn design_reports_case_study_size() {
    let out = run(&["design", path(&data("designs/case_study.json"))]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    let n = v["required_n"].as_u64().unwrap();
    assert!((456..=504).contains(&n), "{n}");
    assert_eq!(v["planned_n"].as_u64(), Some(480));
    let power = v["power_at_planned_n"].as_f64().unwrap();
    assert!((0.77..=0.83).contains(&power));
}

#[test]
fn design_exit_codes() {
    let null = run(&["design", path(&data("designs/scenario1_null.json"))]);
    assert_eq!(null.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&null.stderr).contains("unreachable"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ \"analysis_times\": [1, ").unwrap();
    assert_eq!(run(&["design", bad.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(run(&["design", "/nonexistent/design.json"]).status.code(), Some(2));
}

#[test]
fn simulate_needs_a_seed() {
    let out = run(&["simulate", path(&data("scenarios/table2/s1_n250_P.json"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_single_replicate_detail() {
    let dir = tempfile::tempdir().unwrap();
    let detail = dir.path().join("detail.csv");
    let summary = dir.path().join("summary.csv");
    let scenario = data("scenarios/table2/s1_n250_P.json");
    let args = [
        "simulate",
        path(&scenario),
        "--seed",
        "9",
        "--replicates",
        "1",
        "--detail",
        detail.to_str().unwrap(),
        "--out",
        summary.to_str().unwrap(),
    ];
    let first = run(&args);
    assert_eq!(first.status.code(), Some(0));
    let text = std::fs::read_to_string(&detail).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert_eq!(std::fs::read_to_string(&summary).unwrap().lines().count(), 2);
    let again = run(&args);
    assert_eq!(first.stdout, again.stdout);
    assert_eq!(text, std::fs::read_to_string(&detail).unwrap());
}

#[test]
fn analyze_matches_library_composition() {
    let transitions = data("fixtures/four/transitions.csv");
    let roster = data("fixtures/four/roster.csv");
    let design = data("designs/fixture.json");
    let out = run(&[
        "analyze",
        "--cohort",
        path(&transitions),
        "--roster",
        path(&roster),
        "--design",
        path(&design),
        "--stage",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["result"]["rank_deficient"], Value::Bool(true));
    assert!(!v["warnings"].as_array().unwrap().is_empty());

    let cohort = Cohort::load(&transitions, Some(&roster)).unwrap();
    let file = DesignFile::from_json_file(&design).unwrap();
    let r = analyze_stage(&cohort, &file.events, &Weight::Unit, 1, 0.0, 4.0).unwrap();
    assert_eq!(v["result"]["statistic"].as_f64().unwrap(), r.statistic);
    assert_eq!(v["result"]["p_value"].as_f64().unwrap(), r.p_value);
    assert_eq!(file.events, vec![EventDefinition::pfs(), EventDefinition::os()]);
}

#[test]
fn analyze_second_stage_writes_ellipse() {
    let dir = tempfile::tempdir().unwrap();
    let plot = dir.path().join("ellipse.csv");
    let out = run(&[
        "analyze",
        "--cohort",
        path(&data("fixtures/four/transitions.csv")),
        "--roster",
        path(&data("fixtures/four/roster.csv")),
        "--design",
        path(&data("designs/fixture.json")),
        "--stage",
        "2",
        "--prior",
        "0.6",
        "--plot",
        plot.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    let level = v["level"].as_f64().unwrap();
    let p = v["result"]["p_value"].as_f64().unwrap();
    if let Some(e) = v.get("ellipse") {
        assert_eq!(e["rejects"].as_bool().unwrap(), p <= level);
        let csv = std::fs::read_to_string(&plot).unwrap();
        assert_eq!(csv.lines().next(), Some("x,y,series"));
        assert_eq!(csv.lines().filter(|l| l.ends_with(",boundary")).count(), 256);
    }
    assert_eq!(v["decision"]["rejected_at"].is_null(), p > level);
}

#[test]
fn combine_three_stage_example() {
    let out = run(&[
        "combine",
        "--design",
        path(&data("designs/three_stage.json")),
        "--p",
        "0.536,0.227,0.592",
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert!(json(&out)["rejected_at"].is_null());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no rejection"));
}

#[test]
fn inspect_reports_invertible_pfs_os() {
    let out = run(&["inspect", path(&data("designs/case_study.json"))]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(json(&out)["verdict"], "guaranteed_invertible");
}

#[test]
fn recalc_end_to_end_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let transitions = dir.path().join("t.csv");
    let roster = dir.path().join("r.csv");
    let sample = run(&[
        "sample",
        path(&data("scenarios/case_study_interim.json")),
        "--seed",
        "4",
        "--transitions",
        transitions.to_str().unwrap(),
        "--roster",
        roster.to_str().unwrap(),
        "--at",
        "18",
    ]);
    assert_eq!(sample.status.code(), Some(0));

    let design = data("designs/case_study.json");
    let recalc = |a_min: &str, a_max: &str, t: &PathBuf| {
        run(&[
            "recalc",
            "--cohort",
            t.to_str().unwrap(),
            "--roster",
            roster.to_str().unwrap(),
            "--design",
            path(&design),
            "--a-min",
            a_min,
            "--a-max",
            a_max,
        ])
    };
    let out = recalc("3", "30", &transitions);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["estimates"].as_array().unwrap().len(), 3);
    let a_add = v["a_add"].as_f64().unwrap();
    if v["stage1_rejected"] == Value::Bool(false) {
        assert!((3.0..=30.0).contains(&a_add));
        assert!(!v["outcome"]["trace"].as_array().unwrap().is_empty());
    }

    assert_eq!(recalc("30", "3", &transitions).status.code(), Some(2));

    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "patient_id,R,Z,Ctilde,from_state,to_state,s\n").unwrap();
    let empty_roster = dir.path().join("empty_roster.csv");
    std::fs::write(&empty_roster, "patient_id,R,Z,Ctilde\n").unwrap();
    let out = run(&[
        "recalc",
        "--cohort",
        empty.to_str().unwrap(),
        "--roster",
        empty_roster.to_str().unwrap(),
        "--design",
        path(&design),
        "--a-min",
        "3",
        "--a-max",
        "30",
    ]);
    assert_eq!(out.status.code(), Some(2));
}
