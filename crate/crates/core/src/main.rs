use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use mstrial::cohort::Cohort;
use mstrial::design::{
    accrual_recalc, combine_stages, design_power, required_sample_size, DesignFile, RecalcRule,
    RecalcSetting,
};
use mstrial::report::stage_report;
use mstrial::sim::{ReplicateOutcome, ScenarioConfig, SimMode};
use mstrial::stats::invertibility_report;
use mstrial::Error;

#[derive(Parser)]
#[command(name = "mstrial", version, about = "Group-sequential multi-state trial toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Boundaries, noncentralities, power and required sample size.
    Design {
        design: PathBuf,
    },
    /// Invertibility diagnostics for the design's events.
    Inspect {
        design: PathBuf,
    },
    /// Monte Carlo rejection rates for a scenario.
    Simulate {
        scenario: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        replicates: Option<usize>,
        /// One-row CSV summary.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-replicate CSV.
        #[arg(long)]
        detail: Option<PathBuf>,
    },
    /// Writes one simulated cohort of a scenario as CSV.
    Sample {
        scenario: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        replicate: usize,
        #[arg(long)]
        transitions: PathBuf,
        #[arg(long)]
        roster: PathBuf,
        /// Keep only what is observable at this calendar time.
        #[arg(long)]
        at: Option<f64>,
    },
    /// Stage statistic, decision and ellipse plot data for an observed cohort.
    Analyze {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        roster: Option<PathBuf>,
        #[arg(long)]
        design: PathBuf,
        #[arg(long, default_value_t = 1)]
        stage: usize,
        /// Calendar time of the analysis; the design's time by default.
        #[arg(long)]
        t: Option<f64>,
        /// p-values of the earlier stages.
        #[arg(long, value_delimiter = ',')]
        prior: Vec<f64>,
        /// Ellipse plot data as CSV.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Combines given stagewise p-values.
    Combine {
        #[arg(long)]
        design: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        p: Vec<f64>,
    },
    /// Interim estimates and accrual-extension decision.
    Recalc {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        roster: Option<PathBuf>,
        #[arg(long)]
        design: PathBuf,
        #[arg(long)]
        a_min: f64,
        #[arg(long)]
        a_max: f64,
        #[arg(long, default_value_t = 0.8)]
        target: f64,
        #[arg(long, default_value_t = 0.5)]
        floor: f64,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Convergence(_)
        | Error::NotPositiveDefinite { .. }
        | Error::SingularPlanning(_)
        | Error::UnreachablePower { .. } => 3,
        _ => 2,
    }
}

fn print_json<T: Serialize>(value: &T) -> mstrial::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

#[derive(Serialize)]
struct DesignReport {
    boundaries: mstrial::design::Boundaries,
    eta: Vec<f64>,
    drift_increments: Vec<Vec<f64>>,
    covariance_increments: Vec<Vec<Vec<f64>>>,
    target_power: f64,
    required_n: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    planned_n: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    power_at_planned_n: Option<f64>,
}

fn cmd_design(path: PathBuf) -> mstrial::Result<()> {
    let file = DesignFile::from_json_file(path)?;
    let boundaries = file.spec.boundaries()?;
    let moments = file.moments()?;
    let required_n = required_sample_size(&moments, &boundaries, file.target_power)?;
    let planned_n =
        (file.accrual.rate > 0.0).then(|| (file.accrual.rate * file.accrual.duration).round() as u64);
    print_json(&DesignReport {
        power_at_planned_n: planned_n.map(|n| design_power(&moments, &boundaries, n as f64)),
        boundaries,
        eta: moments.eta.clone(),
        drift_increments: moments.drift_increments.clone(),
        covariance_increments: moments.covariance_increments.clone(),
        target_power: file.target_power,
        required_n,
        planned_n,
    })
}

fn cmd_inspect(path: PathBuf) -> mstrial::Result<()> {
    let file = DesignFile::from_json_file(path)?;
    print_json(&invertibility_report(&file.model, &file.events)?)
}

fn detail_csv(outcomes: &[mstrial::Result<ReplicateOutcome>]) -> String {
    let mut out = String::from("replicate,rejected_at,accrual_duration,recruited,a_add,flagged,p1,p2,error\n");
    for (i, o) in outcomes.iter().enumerate() {
        match o {
            Ok(o) => {
                let p = |k: usize| o.stages.get(k).map_or(String::new(), |s| s.p_value.to_string());
                out += &format!(
                    "{},{},{},{},{},{},{},{},\n",
                    o.index,
                    o.rejected_at.map_or(String::new(), |r| r.to_string()),
                    o.accrual_duration,
                    o.recruited,
                    o.a_add.map_or(String::new(), |a| a.to_string()),
                    o.flagged,
                    p(0),
                    p(1),
                );
            }
            Err(e) => out += &format!("{i},,,,,,,,\"{e}\"\n"),
        }
    }
    out
}

fn cmd_simulate(
    path: PathBuf,
    seed: u64,
    replicates: Option<usize>,
    out: Option<PathBuf>,
    detail: Option<PathBuf>,
) -> mstrial::Result<()> {
    let mut config = ScenarioConfig::from_json_file(path)?;
    config.seed = seed;
    if let Some(r) = replicates {
        config.replicates = r;
    }
    let prepared = config.prepare()?;
    eprintln!("simulating {} replicates of n = {}", config.replicates, config.n);
    let (result, timing) = prepared.run();
    eprintln!(
        "done in {:.1} s ({:.2} ms per replicate)",
        timing.wall_seconds,
        1e3 * timing.seconds_per_replicate
    );
    if let Some(path) = out {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "n",
            "replicates",
            "seed",
            "mode",
            "rejection_rate",
            "standard_error",
            "stage_rates",
            "mean_accrual_duration",
            "flagged",
            "failed",
        ])?;
        w.write_record([
            config.n.to_string(),
            result.replicates.to_string(),
            seed.to_string(),
            match config.mode {
                SimMode::Fixed => "fixed".into(),
                SimMode::Adaptive(_) => "adaptive".to_string(),
            },
            result.rejection_rate.to_string(),
            result.standard_error.to_string(),
            result
                .stage_rejection_rates
                .iter()
                .map(f64::to_string)
                .collect::<Vec<_>>()
                .join(";"),
            result.mean_accrual_duration.to_string(),
            result.flagged.to_string(),
            result.failed.to_string(),
        ])?;
        w.flush()?;
    }
    if let Some(path) = detail {
        fs::write(path, detail_csv(&prepared.outcomes()))?;
    }
    print_json(&result)
}

fn cmd_sample(
    path: PathBuf,
    seed: u64,
    replicate: usize,
    transitions: PathBuf,
    roster: PathBuf,
    at: Option<f64>,
) -> mstrial::Result<()> {
    let mut config = ScenarioConfig::from_json_file(path)?;
    config.seed = seed;
    let cohort = config.prepare()?.simulate_cohort(replicate)?;
    let cohort = match at {
        Some(t) => Cohort::new(
            cohort
                .observe_at(t)
                .iter()
                .filter(|r| r.entry <= t)
                .map(|r| r.to_record())
                .collect(),
        ),
        None => cohort,
    };
    cohort.save(transitions, roster)?;
    eprintln!("wrote {} patients", cohort.len());
    Ok(())
}

fn load_cohort(cohort: PathBuf, roster: Option<PathBuf>) -> mstrial::Result<Cohort> {
    Cohort::load(cohort, roster.as_deref())
}

fn cmd_analyze(
    cohort: PathBuf,
    roster: Option<PathBuf>,
    design: PathBuf,
    stage: usize,
    t: Option<f64>,
    prior: Vec<f64>,
    plot: Option<PathBuf>,
) -> mstrial::Result<()> {
    let file = DesignFile::from_json_file(design)?;
    let cohort = load_cohort(cohort, roster)?;
    cohort.check_against(&file.model)?;
    let report = stage_report(&cohort, &file.events, &file.spec, stage, t, &prior)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    if let (Some(path), Some(e)) = (plot, &report.ellipse) {
        fs::write(path, e.to_csv())?;
    }
    print_json(&report)
}

fn cmd_combine(design: PathBuf, p: Vec<f64>) -> mstrial::Result<()> {
    let file = DesignFile::from_json_file(design)?;
    let b = file.spec.boundaries()?;
    let d = combine_stages(&p, &b)?;
    match d.rejected_at {
        Some(r) => eprintln!("rejected at stage {r}"),
        None => eprintln!("no rejection"),
    }
    print_json(&d)
}

fn cmd_recalc(
    cohort: PathBuf,
    roster: Option<PathBuf>,
    design: PathBuf,
    rule: RecalcRule,
) -> mstrial::Result<()> {
    rule.check()?;
    let file = DesignFile::from_json_file(design)?;
    let cohort = load_cohort(cohort, roster)?;
    if cohort.is_empty() {
        return Err(Error::EmptyCohort);
    }
    cohort.check_against(&file.model)?;
    let setting = RecalcSetting {
        planning: file.assumptions()?,
        events: file.events.clone(),
        boundaries: file.spec.boundaries()?,
        interim_time: file.spec.analysis_times[0],
    };
    let decision = accrual_recalc(&cohort, &setting, &rule)?;
    for w in &decision.warnings {
        eprintln!("warning: {w}");
    }
    print_json(&decision)
}

fn run(cli: Cli) -> mstrial::Result<()> {
    match cli.command {
        Command::Design { design } => cmd_design(design),
        Command::Inspect { design } => cmd_inspect(design),
        Command::Simulate {
            scenario,
            seed,
            replicates,
            out,
            detail,
        } => cmd_simulate(scenario, seed, replicates, out, detail),
        Command::Sample {
            scenario,
            seed,
            replicate,
            transitions,
            roster,
            at,
        } => cmd_sample(scenario, seed, replicate, transitions, roster, at),
        Command::Analyze {
            cohort,
            roster,
            design,
            stage,
            t,
            prior,
            plot,
        } => cmd_analyze(cohort, roster, design, stage, t, prior, plot),
        Command::Combine { design, p } => cmd_combine(design, p),
        Command::Recalc {
            cohort,
            roster,
            design,
            a_min,
            a_max,
            target,
            floor,
        } => cmd_recalc(
            cohort,
            roster,
            design,
            RecalcRule {
                target,
                floor,
                ..RecalcRule::new(a_min, a_max)
            },
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(_) => ExitCode::from(1),
    }
}
