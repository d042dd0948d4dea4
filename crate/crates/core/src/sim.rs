//! Monte Carlo trials: recruitment, patient paths, stagewise analyses and the
//! optional interim accrual extension.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{common_mode, Cohort, EventDefinition, PatientRecord};
use crate::design::{
    accrual_recalc, combine_stages, required_sample_size, Boundaries, DesignSpec, HazardRatio,
    PlanningAssumptions, RecalcRule, RecalcSetting,
};
use crate::error::{Error, Result};
use crate::model::{illness_death, AccrualPlan, Group, MultiStateModel};
use crate::stats::{analyze_stage, Weight};

/// Illness-death model with intensities `scale·shape·s^(shape−1)` per
/// transition, i.e. cumulative intensity `scale·s^shape`.
pub fn weibull_illness_death(
    onset: (f64, f64),
    death: (f64, f64),
    progressed_death: (f64, f64),
) -> Result<MultiStateModel> {
    let rate = |(scale, shape): (f64, f64)| (scale * shape, shape);
    illness_death(rate(onset), rate(death), rate(progressed_death))
}

/// The three Weibull illness-death scenarios of the simulation study (1-based).
pub fn reference_scenario(index: usize) -> Result<MultiStateModel> {
    match index {
        1 => weibull_illness_death((0.6, 1.0), (0.075, 1.0), (0.9, 1.0)),
        2 => weibull_illness_death((0.85, 1.3), (0.1, 1.3), (0.3, 1.3)),
        3 => weibull_illness_death((0.57, 1.5), (0.065, 0.5), (1.1, 0.85)),
        _ => Err(Error::arg(format!("no reference scenario {index}"))),
    }
}

/// Time-homogeneous lung cancer model (months) used for the adaptive case study.
pub fn case_study_model() -> MultiStateModel {
    illness_death((0.284, 1.0), (0.075, 1.0), (0.128, 1.0)).expect("valid model")
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SimMode {
    #[default]
    Fixed,
    /// Interim accrual extension after the first analysis.
    Adaptive(RecalcRule),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Control-group model.
    pub model: MultiStateModel,
    /// True treatment effects used to generate data.
    #[serde(default)]
    pub hazard_ratios: Vec<HazardRatio>,
    /// Effects assumed at planning, used by the adaptive rule as fallback.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planning_hazard_ratios: Option<Vec<HazardRatio>>,
    pub events: Vec<EventDefinition>,
    pub design: DesignSpec,
    pub accrual: AccrualPlan,
    /// Planned number of patients over the whole accrual period.
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout_rate: Option<f64>,
    #[serde(default)]
    pub mode: SimMode,
}

fn ratios(list: &[HazardRatio]) -> Vec<(usize, usize, f64)> {
    list.iter().map(|h| (h.from, h.to, h.delta)).collect()
}

/// Everything a replicate needs, validated once.
#[derive(Clone, Debug)]
pub struct PreparedScenario {
    pub config: ScenarioConfig,
    pub truth: MultiStateModel,
    pub planning: MultiStateModel,
    pub boundaries: Boundaries,
}

impl ScenarioConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let c: ScenarioConfig = serde_json::from_str(s)?;
        c.prepare()?;
        Ok(c)
    }

    pub fn from_json_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn prepare(&self) -> Result<PreparedScenario> {
        if self.replicates == 0 {
            return Err(Error::arg("at least one replicate is required"));
        }
        if self.n == 0 {
            return Err(Error::EmptyCohort);
        }
        self.accrual.check()?;
        for e in &self.events {
            e.check(Some(self.model.state_count()))?;
        }
        common_mode(&self.events)?;
        if let Some(k) = self.dropout_rate {
            if !(k >= 0.0 && k.is_finite()) {
                return Err(Error::arg("dropout rate must be nonnegative"));
            }
        }
        let boundaries = self.design.boundaries()?;
        let truth = self.model.with_hazard_ratios(&ratios(&self.hazard_ratios))?;
        let planning = match &self.planning_hazard_ratios {
            Some(r) => self.model.with_hazard_ratios(&ratios(r))?,
            None => truth.clone(),
        };
        if let SimMode::Adaptive(rule) = &self.mode {
            rule.check()?;
            if self.design.stages() != 2 {
                return Err(Error::arg("the adaptive rule needs a two-stage design"));
            }
            if self.design.analysis_times[0] >= self.accrual.duration {
                return Err(Error::arg("the interim must fall inside the accrual period"));
            }
        }
        Ok(PreparedScenario {
            config: self.clone(),
            truth,
            planning,
            boundaries,
        })
    }

    /// Patients per unit time implied by `n` and the accrual duration.
    pub fn accrual_rate(&self) -> f64 {
        self.n as f64 / self.accrual.duration
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageSummary {
    pub t: f64,
    pub statistic: f64,
    pub p_value: f64,
    pub rank_deficient: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReplicateOutcome {
    pub index: usize,
    pub rejected_at: Option<usize>,
    /// Stages analysed; later stages are skipped after a rejection.
    pub stages: Vec<StageSummary>,
    pub accrual_duration: f64,
    pub recruited: usize,
    /// Extension chosen at the interim in adaptive mode.
    pub a_add: Option<f64>,
    /// Some stage covariance was singular.
    pub flagged: bool,
}

impl ReplicateOutcome {
    pub fn rejected(&self) -> bool {
        self.rejected_at.is_some()
    }
}

fn replicate_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

struct PatientSource {
    rng: ChaCha8Rng,
    next: usize,
    horizon: f64,
    dropout: Option<Exp<f64>>,
}

impl PatientSource {
    fn new(rng: ChaCha8Rng, first: usize, horizon: f64, kappa: Option<f64>) -> Result<Self> {
        let dropout = match kappa {
            Some(k) if k > 0.0 => Some(Exp::new(k).map_err(|e| Error::arg(e.to_string()))?),
            _ => None,
        };
        Ok(Self {
            rng,
            next: first,
            horizon,
            dropout,
        })
    }

    /// Next patient recruited uniformly on `[start, start + length]`.
    fn draw(&mut self, model: &MultiStateModel, start: f64, length: f64) -> Result<PatientRecord> {
        let i = self.next;
        self.next += 1;
        let group = if i % 2 == 0 {
            Group::Control
        } else {
            Group::Treatment
        };
        let u: f64 = self.rng.random();
        let path = model.sample_path(group, self.horizon, &mut self.rng)?;
        let dropout = match &self.dropout {
            Some(d) => self.rng.sample(d),
            None => f64::INFINITY,
        };
        Ok(PatientRecord {
            id: format!("p{}", i + 1),
            entry: start + u * length,
            group,
            dropout,
            path,
        })
    }
}

fn summarize(r: &crate::stats::StageResult) -> StageSummary {
    StageSummary {
        t: r.t,
        statistic: r.statistic,
        p_value: r.p_value,
        rank_deficient: r.rank_deficient,
    }
}

/// Stagewise analyses with early stopping at the first rejection.
fn sequential_analysis(
    cohort: &Cohort,
    events: &[EventDefinition],
    boundaries: &Boundaries,
    times: &[f64],
) -> Result<(Option<usize>, Vec<StageSummary>)> {
    let mut stages = Vec::new();
    let mut p_values = Vec::new();
    let mut prev = 0.0;
    for (r, &t) in times.iter().enumerate() {
        let res = analyze_stage(cohort, events, &Weight::Unit, r + 1, prev, t)?;
        p_values.push(res.p_value.max(f64::MIN_POSITIVE));
        stages.push(summarize(&res));
        if let Some(stage) = combine_stages(&p_values, boundaries)?.rejected_at {
            return Ok((Some(stage), stages));
        }
        prev = t;
    }
    Ok((None, stages))
}

impl PreparedScenario {
    fn horizon(&self) -> f64 {
        let c = &self.config;
        let last = *c.design.analysis_times.last().expect("checked");
        match &c.mode {
            SimMode::Fixed => last,
            SimMode::Adaptive(rule) => {
                last.max(c.design.analysis_times[0] + rule.a_add_max + c.accrual.follow_up)
            }
        }
    }

    /// One simulated trial; the same index always gives the same outcome.
    pub fn run_replicate(&self, index: usize) -> Result<ReplicateOutcome> {
        match &self.config.mode {
            SimMode::Fixed => self.run_fixed(index),
            SimMode::Adaptive(rule) => self.run_two_phase(index, Some(rule)),
        }
    }

    /// Simulated cohort of `n` patients recruited uniformly over the accrual period.
    pub fn simulate_cohort(&self, index: usize) -> Result<Cohort> {
        let c = &self.config;
        let mut src = PatientSource::new(
            replicate_rng(c.seed, 2 * index as u64),
            0,
            self.horizon(),
            c.dropout_rate,
        )?;
        let patients = (0..c.n)
            .map(|_| src.draw(&self.truth, 0.0, c.accrual.duration))
            .collect::<Result<Vec<_>>>()?;
        Ok(Cohort::new(patients))
    }

    fn run_fixed(&self, index: usize) -> Result<ReplicateOutcome> {
        let c = &self.config;
        let cohort = self.simulate_cohort(index)?;
        let times = &c.design.analysis_times;
        let (rejected_at, stages) = sequential_analysis(&cohort, &c.events, &self.boundaries, times)?;
        let stop = rejected_at.map_or(f64::INFINITY, |r| times[r - 1]);
        let accrual_duration = c.accrual.duration.min(stop);
        let recruited = cohort
            .patients
            .iter()
            .filter(|p| p.entry <= accrual_duration)
            .count();
        Ok(ReplicateOutcome {
            index,
            rejected_at,
            flagged: stages.iter().any(|s| s.rank_deficient),
            stages,
            accrual_duration,
            recruited,
            a_add: None,
        })
    }

    /// Two recruitment phases split at the interim. Without a rule the
    /// second phase runs to the planned end of accrual.
    fn run_two_phase(&self, index: usize, rule: Option<&RecalcRule>) -> Result<ReplicateOutcome> {
        let c = &self.config;
        let t1 = c.design.analysis_times[0];
        let rate = c.accrual_rate();
        let horizon = self.horizon();
        let n1 = (rate * t1).round() as usize;
        let mut first = PatientSource::new(
            replicate_rng(c.seed, 2 * index as u64),
            0,
            horizon,
            c.dropout_rate,
        )?;
        let mut patients = (0..n1)
            .map(|_| first.draw(&self.truth, 0.0, t1))
            .collect::<Result<Vec<_>>>()?;
        let interim_cohort = Cohort::new(patients.clone());
        let stage1 = analyze_stage(&interim_cohort, &c.events, &Weight::Unit, 1, 0.0, t1)?;
        let p1 = stage1.p_value.max(f64::MIN_POSITIVE);
        let mut stages = vec![summarize(&stage1)];
        let first_look = combine_stages(&[p1], &self.boundaries)?;
        if first_look.rejected_at.is_some() {
            return Ok(ReplicateOutcome {
                index,
                rejected_at: Some(1),
                flagged: stage1.rank_deficient,
                stages,
                accrual_duration: t1,
                recruited: n1,
                a_add: Some(0.0),
            });
        }
        let (a_add, t_final) = match rule {
            None => (c.accrual.duration - t1, c.design.analysis_times[1]),
            Some(rule) => {
                let setting = RecalcSetting {
                    planning: PlanningAssumptions {
                        model: self.planning.clone(),
                        accrual: AccrualPlan {
                            rate,
                            ..c.accrual.clone()
                        },
                        dropout_rate: c.dropout_rate,
                    },
                    events: c.events.clone(),
                    boundaries: self.boundaries.clone(),
                    interim_time: t1,
                };
                let d = accrual_recalc(&interim_cohort, &setting, rule)?;
                (d.a_add, d.final_time)
            }
        };
        let n2 = (rate * a_add).round() as usize;
        let mut second = PatientSource::new(
            replicate_rng(c.seed, 2 * index as u64 + 1),
            n1,
            horizon,
            c.dropout_rate,
        )?;
        for _ in 0..n2 {
            patients.push(second.draw(&self.truth, t1, a_add)?);
        }
        let cohort = Cohort::new(patients);
        let stage2 = analyze_stage(&cohort, &c.events, &Weight::Unit, 2, t1, t_final)?;
        let p2 = stage2.p_value.max(f64::MIN_POSITIVE);
        stages.push(summarize(&stage2));
        let rejected_at = combine_stages(&[p1, p2], &self.boundaries)?.rejected_at;
        Ok(ReplicateOutcome {
            index,
            rejected_at,
            flagged: stage1.rank_deficient || stage2.rank_deficient,
            stages,
            accrual_duration: t1 + a_add,
            recruited: n1 + n2,
            a_add: Some(a_add),
        })
    }
}

/// Convenience wrapper around [`PreparedScenario::run_replicate`].
pub fn run_replicate(config: &ScenarioConfig, index: usize) -> Result<ReplicateOutcome> {
    config.prepare()?.run_replicate(index)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScenarioResult {
    pub replicates: usize,
    /// Replicates that produced an outcome.
    pub completed: usize,
    pub rejections: usize,
    pub rejection_rate: f64,
    pub standard_error: f64,
    pub stage_rejections: Vec<usize>,
    pub stage_rejection_rates: Vec<f64>,
    pub mean_accrual_duration: f64,
    pub mean_recruited: f64,
    /// Replicates with a singular stage covariance.
    pub flagged: usize,
    /// Replicates that failed, with the first error message.
    pub failed: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_error: Option<String>,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct RunTiming {
    pub wall_seconds: f64,
    pub seconds_per_replicate: f64,
}

fn aggregate(stages: usize, replicates: usize, outcomes: &[Result<ReplicateOutcome>]) -> ScenarioResult {
    let mut stage_rejections = vec![0usize; stages];
    let (mut completed, mut flagged, mut failed) = (0, 0, 0);
    let (mut accrual, mut recruited) = (0.0, 0.0);
    let mut first_error = None;
    for o in outcomes {
        match o {
            Ok(o) => {
                completed += 1;
                if let Some(r) = o.rejected_at {
                    stage_rejections[r - 1] += 1;
                }
                flagged += o.flagged as usize;
                accrual += o.accrual_duration;
                recruited += o.recruited as f64;
            }
            Err(e) => {
                failed += 1;
                first_error.get_or_insert_with(|| e.to_string());
            }
        }
    }
    let rejections: usize = stage_rejections.iter().sum();
    let denom = completed.max(1) as f64;
    let rate = rejections as f64 / denom;
    ScenarioResult {
        replicates,
        completed,
        rejections,
        rejection_rate: rate,
        standard_error: (rate * (1.0 - rate) / denom).sqrt(),
        stage_rejection_rates: stage_rejections.iter().map(|&k| k as f64 / denom).collect(),
        stage_rejections,
        mean_accrual_duration: accrual / denom,
        mean_recruited: recruited / denom,
        flagged,
        failed,
        first_error,
    }
}

impl PreparedScenario {
    /// Every replicate outcome in index order.
    pub fn outcomes(&self) -> Vec<Result<ReplicateOutcome>> {
        (0..self.config.replicates)
            .into_par_iter()
            .map(|i| self.run_replicate(i))
            .collect()
    }

    pub fn run(&self) -> (ScenarioResult, RunTiming) {
        let start = Instant::now();
        let outcomes = self.outcomes();
        let wall = start.elapsed().as_secs_f64();
        let res = aggregate(self.config.design.stages(), self.config.replicates, &outcomes);
        (
            res,
            RunTiming {
                wall_seconds: wall,
                seconds_per_replicate: wall / self.config.replicates as f64,
            },
        )
    }
}

pub fn run_scenario(config: &ScenarioConfig) -> Result<ScenarioResult> {
    Ok(config.prepare()?.run().0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub group_sequential: ScenarioResult,
    pub adaptive: ScenarioResult,
    /// Mean and standard error of the paired difference in rejection (adaptive − fixed).
    pub power_difference: f64,
    pub difference_se: f64,
}

/// Group-sequential and adaptive trials on common random numbers: both
/// share the interim cohort and draw later recruits from one stream.
pub fn compare_adaptive(config: &ScenarioConfig) -> Result<Comparison> {
    let prepared = config.prepare()?;
    let SimMode::Adaptive(rule) = &config.mode else {
        return Err(Error::arg("the comparison needs an adaptive scenario"));
    };
    if config.design.stages() != 2 {
        return Err(Error::arg("the comparison needs a two-stage design"));
    }
    let pairs: Vec<(Result<ReplicateOutcome>, Result<ReplicateOutcome>)> = (0..config.replicates)
        .into_par_iter()
        .map(|i| {
            (
                prepared.run_two_phase(i, None),
                prepared.run_two_phase(i, Some(rule)),
            )
        })
        .collect();
    let (gs, ad): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let diffs: Vec<f64> = gs
        .iter()
        .zip(&ad)
        .filter_map(|(a, b)| match (a, b) {
            (Ok(a), Ok(b)) => Some(b.rejected() as u8 as f64 - a.rejected() as u8 as f64),
            _ => None,
        })
        .collect();
    let k = diffs.len().max(1) as f64;
    let mean = diffs.iter().sum::<f64>() / k;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (k - 1.0).max(1.0);
    Ok(Comparison {
        group_sequential: aggregate(2, config.replicates, &gs),
        adaptive: aggregate(2, config.replicates, &ad),
        power_difference: mean,
        difference_se: (var / k).sqrt(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Calibration {
    pub n: usize,
    pub power: f64,
    pub standard_error: f64,
    /// Analytic sample size used to seed the search, when attainable.
    pub analytic_n: Option<u64>,
    /// Analytic and empirical sizes differ by more than 20%.
    pub discrepant: bool,
    /// `(n, empirical power)` in evaluation order.
    pub evaluations: Vec<(usize, f64)>,
}

pub const CALIBRATION_MIN_N: usize = 10;

/// Smallest `n` with empirical power at least `target`, by bisection with
/// common random numbers across candidate sizes.
pub fn calibrate_sample_size(
    template: &ScenarioConfig,
    target: f64,
    replicates: usize,
) -> Result<Calibration> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::arg("target power must lie in (0, 1)"));
    }
    let base = template.prepare()?;
    let assumptions = PlanningAssumptions {
        model: base.truth.clone(),
        accrual: template.accrual.clone(),
        dropout_rate: template.dropout_rate,
    };
    let analytic_n = crate::design::planning_moments(
        &assumptions,
        &template.events,
        &template.design.analysis_times,
        &Weight::Unit,
    )
    .and_then(|m| required_sample_size(&m, &base.boundaries, target))
    .ok();
    let mut evaluations = Vec::new();
    let power = |n: usize, evaluations: &mut Vec<(usize, f64)>| -> Result<ScenarioResult> {
        let cfg = ScenarioConfig {
            n,
            replicates,
            ..template.clone()
        };
        let r = run_scenario(&cfg)?;
        evaluations.push((n, r.rejection_rate));
        Ok(r)
    };
    let lo_bound = CALIBRATION_MIN_N;
    let hi_bound = crate::design::MAX_SAMPLE_SIZE as usize;
    let start = analytic_n.map_or(200, |n| (n as usize).clamp(lo_bound, hi_bound));
    let mut lo = (start / 2).max(lo_bound);
    let mut lo_res = power(lo, &mut evaluations)?;
    while lo > lo_bound && lo_res.rejection_rate >= target {
        lo = (lo / 2).max(lo_bound);
        lo_res = power(lo, &mut evaluations)?;
    }
    if lo_res.rejection_rate >= target {
        return Ok(Calibration {
            n: lo,
            power: lo_res.rejection_rate,
            standard_error: lo_res.standard_error,
            analytic_n,
            discrepant: analytic_n.is_some_and(|a| discrepant(a as usize, lo)),
            evaluations,
        });
    }
    let mut hi = (start.max(lo + 1) * 3 / 2).min(hi_bound);
    let mut hi_res = power(hi, &mut evaluations)?;
    while hi_res.rejection_rate < target {
        if hi >= hi_bound || hi_res.rejection_rate < lo_res.rejection_rate - 3.0 * lo_res.standard_error
        {
            return Err(Error::Convergence(format!(
                "empirical power does not reach {target}: {evaluations:?}"
            )));
        }
        lo = hi;
        lo_res = hi_res;
        hi = (hi * 2).min(hi_bound);
        hi_res = power(hi, &mut evaluations)?;
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        let r = power(mid, &mut evaluations)?;
        if r.rejection_rate >= target {
            hi = mid;
            hi_res = r;
        } else {
            lo = mid;
        }
    }
    Ok(Calibration {
        n: hi,
        power: hi_res.rejection_rate,
        standard_error: hi_res.standard_error,
        analytic_n,
        discrepant: analytic_n.is_some_and(|a| discrepant(a as usize, hi)),
        evaluations,
    })
}

fn discrepant(analytic: usize, empirical: usize) -> bool {
    (analytic as f64 - empirical as f64).abs() > 0.2 * empirical as f64
}
