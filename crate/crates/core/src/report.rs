//! Stage reports for an observed cohort and rejection-ellipse plot data.

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::Serialize;

use crate::cohort::{Cohort, EventDefinition};
use crate::design::{combine_stages, Boundaries, Decision, DesignSpec};
use crate::dist::chi2_isf;
use crate::error::{Error, Result};
use crate::linalg::cholesky_lower;
use crate::stats::{analyze_stage, StageResult, Weight};

pub const ELLIPSE_POINTS: usize = 256;

/// Rejection region of one stage on the `√n·ΔU` scale for two events.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EllipsePlotData {
    pub stage: usize,
    pub n: usize,
    /// Conditional stage level the p-value is compared with.
    pub level: f64,
    /// χ²₂ critical value at that level; infinite when the level is 0.
    pub critical: f64,
    pub observed: [f64; 2],
    /// The observed point lies on or outside the boundary.
    pub rejects: bool,
    pub boundary: Vec<[f64; 2]>,
}

impl EllipsePlotData {
    /// Plot data as `x,y,series` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,series\n");
        for p in &self.boundary {
            let _ = writeln!(out, "{},{},boundary", p[0], p[1]);
        }
        let _ = writeln!(out, "{},{},observed", self.observed[0], self.observed[1]);
        out
    }
}

/// Ellipse `{x : xᵀ(n·ΔV̂)⁻¹x = c}` with `c` the χ²₂ quantile at `level`.
pub fn ellipse_plot(stage: &StageResult, n: usize, level: f64) -> Result<EllipsePlotData> {
    if stage.du.len() != 2 {
        return Err(Error::arg("ellipse plots need exactly two events"));
    }
    if !(0.0..=1.0).contains(&level) {
        return Err(Error::arg(format!("level {level} is outside [0, 1]")));
    }
    let root_n = (n as f64).sqrt();
    let critical = if level > 0.0 { chi2_isf(2, level) } else { f64::INFINITY };
    let boundary = if critical.is_finite() {
        let l = cholesky_lower(&stage.dv_matrix())?;
        let radius = root_n * critical.sqrt();
        (0..ELLIPSE_POINTS)
            .map(|i| {
                let a = 2.0 * PI * i as f64 / ELLIPSE_POINTS as f64;
                let (c, s) = (a.cos(), a.sin());
                [
                    radius * l[(0, 0)] * c,
                    radius * (l[(1, 0)] * c + l[(1, 1)] * s),
                ]
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(EllipsePlotData {
        stage: stage.stage,
        n,
        level,
        critical,
        observed: [root_n * stage.du[0], root_n * stage.du[1]],
        rejects: stage.p_value <= level || stage.statistic >= critical,
        boundary,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageReport {
    pub result: StageResult,
    pub level: f64,
    pub decision: Decision,
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ellipse: Option<EllipsePlotData>,
}

/// Analyses stage `stage` (1-based) of `cohort` given the p-values of the
/// earlier stages.
pub fn stage_report(
    cohort: &Cohort,
    events: &[EventDefinition],
    design: &DesignSpec,
    stage: usize,
    t: Option<f64>,
    prior: &[f64],
) -> Result<StageReport> {
    let boundaries: Boundaries = design.boundaries()?;
    if stage == 0 || stage > design.stages() {
        return Err(Error::arg(format!(
            "stage {stage} is outside 1..={}",
            design.stages()
        )));
    }
    if prior.len() != stage - 1 {
        return Err(Error::arg(format!(
            "stage {stage} needs {} earlier p-values, got {}",
            stage - 1,
            prior.len()
        )));
    }
    let earlier = combine_stages(prior, &boundaries)?;
    if let Some(r) = earlier.rejected_at {
        return Err(Error::arg(format!("the trial already rejected at stage {r}")));
    }
    let level = earlier
        .next_level
        .ok_or_else(|| Error::arg("no stage left to analyse"))?;
    let t_prev = if stage == 1 {
        0.0
    } else {
        design.analysis_times[stage - 2]
    };
    let t_now = t.unwrap_or(design.analysis_times[stage - 1]);
    let result = analyze_stage(cohort, events, &Weight::Unit, stage, t_prev, t_now)?;
    let mut warnings = Vec::new();
    if result.rank_deficient {
        warnings.push(format!(
            "stage covariance has rank {} < {}; the statistic uses the pseudo-inverse",
            result.rank,
            events.len()
        ));
    }
    let mut p_values = prior.to_vec();
    p_values.push(result.p_value.max(f64::MIN_POSITIVE));
    let decision = combine_stages(&p_values, &boundaries)?;
    let n = cohort
        .patients
        .iter()
        .filter(|p| p.entry <= t_now)
        .count();
    let ellipse = if events.len() == 2 && result.z.is_some() {
        Some(ellipse_plot(&result, n, level)?)
    } else {
        None
    };
    Ok(StageReport {
        result,
        level,
        decision,
        warnings,
        ellipse,
    })
}
