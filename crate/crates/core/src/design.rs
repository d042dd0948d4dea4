//! Group-sequential design on top of the stagewise χ² statistics: boundaries
//! for the inverse normal combination, conditional levels, planning drift and
//! covariance, power, sample size, interim intensity estimates and the
//! accrual-extension rule.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::cohort::{common_mode, Cohort, EventDefinition, EventMode};
use crate::dist::{chi2_isf, chi2_isf_tails, chi2_sf, norm_cdf, norm_pdf, norm_quantile, norm_sf};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_lower, forward_substitute, to_rows, to_vec};
use crate::model::{AccrualPlan, Group, MultiStateModel, StateId, TransitionIntensity};
use crate::stats::{analyze_stage, invertibility_report, Verdict, Weight};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryFamily {
    Pocock,
    #[serde(alias = "obf")]
    ObrienFleming,
    /// Nominal one-sided level of the combined statistic at each stage.
    Custom(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub analysis_times: Vec<f64>,
    pub alpha: f64,
    pub boundary: BoundaryFamily,
    /// Inverse normal combination weights; equal when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

impl DesignSpec {
    pub fn new(analysis_times: Vec<f64>, alpha: f64, boundary: BoundaryFamily) -> Self {
        Self {
            analysis_times,
            alpha,
            boundary,
            weights: None,
        }
    }

    pub fn stages(&self) -> usize {
        self.analysis_times.len()
    }

    pub fn check(&self) -> Result<()> {
        if self.analysis_times.is_empty() {
            return Err(Error::arg("a design needs at least one analysis time"));
        }
        let mut prev = 0.0;
        for &t in &self.analysis_times {
            if !(t > prev && t.is_finite()) {
                return Err(Error::arg("analysis times must be positive and strictly increasing"));
            }
            prev = t;
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::arg("alpha must lie in (0, 1)"));
        }
        if let Some(w) = &self.weights {
            if w.len() != self.stages() || w.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                return Err(Error::arg("one positive weight per stage is required"));
            }
        }
        if let BoundaryFamily::Custom(levels) = &self.boundary {
            if levels.len() != self.stages() || levels.iter().any(|&l| !(0.0..1.0).contains(&l)) {
                return Err(Error::arg("one custom level in [0, 1) per stage is required"));
            }
        }
        Ok(())
    }

    /// Combination weights scaled to unit sum of squares.
    pub fn combination_weights(&self) -> Vec<f64> {
        let raw = self
            .weights
            .clone()
            .unwrap_or_else(|| vec![1.0; self.stages()]);
        let norm = raw.iter().map(|w| w * w).sum::<f64>().sqrt();
        raw.iter().map(|w| w / norm).collect()
    }

    pub fn boundaries(&self) -> Result<Boundaries> {
        self.check()?;
        sequential_boundaries(&self.boundary, self.alpha, &self.combination_weights())
    }
}

/// Critical values for `C_r = Σ_{k≤r} w_k Z_k / √W_r`, `W_r = Σ_{k≤r} w_k²`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Boundaries {
    pub alpha: f64,
    pub weights: Vec<f64>,
    /// Information fractions `W_r`.
    pub information: Vec<f64>,
    /// Critical values `c_r` of the normalised combined statistic.
    pub critical: Vec<f64>,
    /// The same thresholds on the partial-sum scale, `c_r √W_r`.
    pub cumulative: Vec<f64>,
    /// Nominal levels `1 − Φ(c_r)`.
    pub nominal_levels: Vec<f64>,
    /// Null probability of rejecting first at each stage.
    pub stage_alpha: Vec<f64>,
}

impl Boundaries {
    pub fn stages(&self) -> usize {
        self.critical.len()
    }

    fn from_critical(alpha: f64, weights: &[f64], critical: Vec<f64>) -> Self {
        let information: Vec<f64> = weights
            .iter()
            .scan(0.0, |acc, w| {
                *acc += w * w;
                Some(*acc)
            })
            .collect();
        let cumulative: Vec<f64> = critical
            .iter()
            .zip(&information)
            .map(|(c, w)| c * w.sqrt())
            .collect();
        let nominal_levels = critical.iter().map(|&c| norm_sf(c)).collect();
        let laws = vec![ZLaw::StandardNormal; critical.len()];
        let stage_alpha = crossing_probabilities(&laws, weights, &cumulative);
        Self {
            alpha,
            weights: weights.to_vec(),
            information,
            critical,
            cumulative,
            nominal_levels,
            stage_alpha,
        }
    }
}

/// Boundaries with null crossing probability `alpha`.
pub fn sequential_boundaries(
    family: &BoundaryFamily,
    alpha: f64,
    weights: &[f64],
) -> Result<Boundaries> {
    let m = weights.len();
    if m == 0 {
        return Err(Error::arg("at least one stage is required"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::arg("alpha must lie in (0, 1)"));
    }
    let norm = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
    let weights: Vec<f64> = weights.iter().map(|w| w / norm).collect();
    let total_info = 1.0;
    let info: Vec<f64> = weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w * w;
            Some(*acc)
        })
        .collect();
    let shape: Vec<f64> = match family {
        BoundaryFamily::Pocock => vec![1.0; m],
        BoundaryFamily::ObrienFleming => info.iter().map(|w| (total_info / w).sqrt()).collect(),
        BoundaryFamily::Custom(levels) => {
            if levels.len() != m {
                return Err(Error::arg("one custom level per stage is required"));
            }
            let critical: Vec<f64> = levels.iter().map(|&l| norm_quantile(1.0 - l)).collect();
            let b = Boundaries::from_critical(alpha, &weights, critical);
            let total: f64 = b.stage_alpha.iter().sum();
            if total > alpha + 1e-6 {
                return Err(Error::arg(format!(
                    "custom levels spend {total:.6}, more than alpha = {alpha}"
                )));
            }
            return Ok(b);
        }
    };
    let laws = vec![ZLaw::StandardNormal; m];
    let crossing = |c: f64| {
        let bounds: Vec<f64> = shape
            .iter()
            .zip(&info)
            .map(|(s, w)| c * s * w.sqrt())
            .collect();
        crossing_probabilities(&laws, &weights, &bounds).iter().sum::<f64>()
    };
    let (mut lo, mut hi) = (0.0, 40.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if crossing(mid) > alpha {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    let c = 0.5 * (lo + hi);
    let b = Boundaries::from_critical(alpha, &weights, shape.iter().map(|s| c * s).collect());
    let total: f64 = b.stage_alpha.iter().sum();
    if (total - alpha).abs() > 1e-6 {
        return Err(Error::Convergence(format!(
            "boundary search reached level {total}, target {alpha}"
        )));
    }
    Ok(b)
}

const Z_SPAN: f64 = 12.0;
const Z_STEP: f64 = 0.002;
const GRID_STEP: f64 = 0.01;

/// Law of a stagewise score `Z = Φ⁻¹(1 − p)`.
#[derive(Clone, Debug)]
pub enum ZLaw {
    StandardNormal,
    Tabulated(Arc<ZTable>),
}

/// `cdf` and `pdf` of `Φ⁻¹(F_d(S))` for `S ~ χ²_d(ncp)` on an even grid.
#[derive(Debug)]
pub struct ZTable {
    cdf: Vec<f64>,
    pdf: Vec<f64>,
}

fn z_grid_len() -> usize {
    (2.0 * Z_SPAN / Z_STEP).round() as usize + 1
}

/// `x(z)` with `F_d(x) = Φ(z)`, shared by every table of the same dimension.
fn quantile_grid(d: usize) -> Arc<Vec<f64>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Vec<f64>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(g) = cache.lock().expect("grid cache").get(&d) {
        return g.clone();
    }
    let xs: Vec<f64> = (0..z_grid_len())
        .map(|i| {
            let z = -Z_SPAN + i as f64 * Z_STEP;
            chi2_isf_tails(d, norm_sf(z), norm_cdf(z))
        })
        .collect();
    let g = Arc::new(xs);
    cache.lock().expect("grid cache").insert(d, g.clone());
    g
}

impl ZTable {
    fn new(d: usize, ncp: f64) -> Self {
        let xs = quantile_grid(d);
        let a = d as f64 / 2.0;
        let mean = ncp / 2.0;
        let k_lo = (mean - 12.0 * mean.sqrt() - 5.0).max(0.0).floor() as usize;
        let k_hi = (mean + 12.0 * mean.sqrt() + 40.0).ceil() as usize;
        let weights: Vec<f64> = (k_lo..=k_hi)
            .map(|k| (-mean + k as f64 * mean.ln() - ln_gamma(k as f64 + 1.0)).exp())
            .collect();
        let mut cdf = Vec::with_capacity(xs.len());
        let mut pdf = Vec::with_capacity(xs.len());
        for (i, &x) in xs.iter().enumerate() {
            let z = -Z_SPAN + i as f64 * Z_STEP;
            let y = x / 2.0;
            if !(y > 0.0) || !y.is_finite() {
                cdf.push(if y > 0.0 { 1.0 } else { 0.0 });
                pdf.push(0.0);
                continue;
            }
            let a0 = a + k_lo as f64;
            // P(a+k, y) by downward steps of the incomplete gamma recurrence
            let mut p = gamma_lr(a0, y);
            let mut term = (a0 * y.ln() - y - ln_gamma(a0 + 1.0)).exp();
            let mut ratio = (k_lo as f64 * y.ln() + ln_gamma(a) - ln_gamma(a0)).exp();
            let (mut c, mut r) = (0.0, 0.0);
            for (idx, w) in weights.iter().enumerate() {
                let ak = a0 + idx as f64;
                c += w * p.max(0.0);
                r += w * ratio;
                p -= term;
                term *= y / (ak + 1.0);
                ratio *= y / ak;
            }
            cdf.push(c.clamp(0.0, 1.0));
            pdf.push(norm_pdf(z) * r);
        }
        Self { cdf, pdf }
    }

    fn lookup(values: &[f64], z: f64, below: f64, above: f64) -> f64 {
        if z <= -Z_SPAN {
            return below;
        }
        if z >= Z_SPAN {
            return above;
        }
        let pos = (z + Z_SPAN) / Z_STEP;
        let i = (pos.floor() as usize).min(values.len() - 2);
        let frac = pos - i as f64;
        values[i] * (1.0 - frac) + values[i + 1] * frac
    }
}

impl ZLaw {
    /// Law of the stage score when `S ~ χ²_d(ncp)`.
    pub fn chi_square(d: usize, ncp: f64) -> Self {
        if ncp <= 0.0 {
            ZLaw::StandardNormal
        } else {
            ZLaw::Tabulated(Arc::new(ZTable::new(d, ncp)))
        }
    }

    pub fn cdf(&self, z: f64) -> f64 {
        match self {
            ZLaw::StandardNormal => norm_cdf(z),
            ZLaw::Tabulated(t) => ZTable::lookup(&t.cdf, z, 0.0, 1.0),
        }
    }

    pub fn sf(&self, z: f64) -> f64 {
        match self {
            ZLaw::StandardNormal => norm_sf(z),
            ZLaw::Tabulated(t) => 1.0 - ZTable::lookup(&t.cdf, z, 0.0, 1.0),
        }
    }

    pub fn pdf(&self, z: f64) -> f64 {
        match self {
            ZLaw::StandardNormal => norm_pdf(z),
            ZLaw::Tabulated(t) => ZTable::lookup(&t.pdf, z, 0.0, 0.0),
        }
    }
}

fn simpson_grid(lo: f64, hi: f64) -> (Vec<f64>, f64) {
    let mut n = ((hi - lo) / GRID_STEP).ceil().max(2.0) as usize;
    if n % 2 == 1 {
        n += 1;
    }
    let h = (hi - lo) / n as f64;
    ((0..=n).map(|i| lo + i as f64 * h).collect(), h)
}

fn simpson_weights(len: usize, h: f64) -> Vec<f64> {
    (0..len)
        .map(|i| {
            let w = if i == 0 || i == len - 1 {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            w * h / 3.0
        })
        .collect()
}

/// Probability of first crossing at each stage for independent stage scores
/// with the given laws, when stage `r` rejects once `Σ_{k≤r} w_k Z_k ≥ bounds[r]`.
pub fn crossing_probabilities(laws: &[ZLaw], weights: &[f64], bounds: &[f64]) -> Vec<f64> {
    let m = laws.len();
    let mut out = vec![0.0; m];
    if m == 0 {
        return out;
    }
    out[0] = laws[0].sf(bounds[0] / weights[0]);
    if m == 1 {
        return out;
    }
    let mut span = Z_SPAN * weights[0];
    let lo = -span;
    let hi = bounds[0].min(span);
    if hi <= lo {
        return out;
    }
    let (mut xs, mut h) = simpson_grid(lo, hi);
    let mut dens: Vec<f64> = xs
        .iter()
        .map(|&x| laws[0].pdf(x / weights[0]) / weights[0])
        .collect();
    for r in 1..m {
        let w = weights[r];
        let sw = simpson_weights(xs.len(), h);
        out[r] = xs
            .iter()
            .zip(&dens)
            .zip(&sw)
            .map(|((&x, &f), &q)| q * f * laws[r].sf((bounds[r] - x) / w))
            .sum();
        if r + 1 < m {
            span += Z_SPAN * w;
            let lo = xs[0] - Z_SPAN * w;
            let hi = bounds[r].min(span);
            if hi <= lo {
                break;
            }
            let (ys, hy) = simpson_grid(lo, hi);
            let next: Vec<f64> = ys
                .par_iter()
                .map(|&y| {
                    xs.iter()
                        .zip(&dens)
                        .zip(&sw)
                        .map(|((&x, &f), &q)| q * f * laws[r].pdf((y - x) / w))
                        .sum::<f64>()
                        / w
                })
                .collect();
            xs = ys;
            h = hy;
            dens = next;
        }
    }
    out
}

/// Outcome of combining the stagewise p-values observed so far.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Decision {
    /// Stage (1-based) at which the null hypothesis is rejected.
    pub rejected_at: Option<usize>,
    /// Normalised combined statistic `C_r` per observed stage.
    pub combined: Vec<f64>,
    /// Conditional stagewise level that applied at each observed stage.
    pub stage_levels: Vec<f64>,
    /// Conditional level for the next stage, if any remains.
    pub next_level: Option<f64>,
}

/// Level that `p_{r+1}` must reach given the partial sum `Σ_{k≤r} w_k Z_k`.
fn conditional_level(b: &Boundaries, stage: usize, partial: f64) -> f64 {
    let w = b.weights[stage];
    norm_sf((b.cumulative[stage] - partial) / w)
}

pub fn combine_stages(p_values: &[f64], b: &Boundaries) -> Result<Decision> {
    if p_values.len() > b.stages() {
        return Err(Error::arg(format!(
            "{} p-values for a {}-stage design",
            p_values.len(),
            b.stages()
        )));
    }
    let mut partial = 0.0;
    let mut combined = Vec::new();
    let mut stage_levels = Vec::new();
    let mut rejected_at = None;
    for (r, &p) in p_values.iter().enumerate() {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::arg(format!("p-value {p} is outside (0, 1]")));
        }
        let level = conditional_level(b, r, partial);
        stage_levels.push(level);
        partial += b.weights[r] * norm_quantile(1.0 - p);
        combined.push(partial / b.information[r].sqrt());
        if p <= level {
            rejected_at = Some(r + 1);
            break;
        }
    }
    let next = p_values.len();
    let next_level = (rejected_at.is_none() && next < b.stages())
        .then(|| conditional_level(b, next, partial));
    Ok(Decision {
        rejected_at,
        combined,
        stage_levels,
        next_level,
    })
}

/// `∫_{α₁}^{1} α₂(x) dx` for the first two stages, evaluated through
/// [`combine_stages`] on a grid of first-stage p-values.
pub fn conditional_error_mass(b: &Boundaries) -> Result<f64> {
    if b.stages() < 2 {
        return Ok(0.0);
    }
    let c1 = b.cumulative[0] / b.weights[0];
    let (zs, h) = simpson_grid(-Z_SPAN, c1);
    let sw = simpson_weights(zs.len(), h);
    let mut total = 0.0;
    let last = zs.len() - 1;
    for (i, (&z, &q)) in zs.iter().zip(&sw).enumerate() {
        // approach the first-stage boundary from the continuation side
        let z = if i == last { z - 1e-9 } else { z };
        let x = norm_sf(z);
        if x >= 1.0 {
            continue;
        }
        let level = combine_stages(&[x], b)?.next_level.unwrap_or(0.0);
        total += q * level * norm_pdf(z);
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanningAssumptions {
    /// Control intensities with treatment hazard ratios.
    pub model: MultiStateModel,
    pub accrual: AccrualPlan,
    /// Rate of exponential random dropout; none when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlanningMoments {
    pub times: Vec<f64>,
    /// Cumulative per-patient drift `θ(t_r)`.
    pub drift: Vec<Vec<f64>>,
    /// Cumulative limit of the covariance estimator `V(t_r)`.
    pub covariance: Vec<Vec<Vec<f64>>>,
    /// Cumulative covariance of `U` itself under the alternative.
    pub covariance_alternative: Vec<Vec<Vec<f64>>>,
    pub drift_increments: Vec<Vec<f64>>,
    pub covariance_increments: Vec<Vec<Vec<f64>>>,
    /// Per-patient noncentrality of each stage; multiply by `n`.
    pub eta: Vec<f64>,
}

impl PlanningMoments {
    pub fn dimension(&self) -> usize {
        self.drift.first().map_or(0, Vec::len)
    }
}

fn planning_grid(times: &[f64], accrual: f64, cells: usize) -> Vec<f64> {
    let t_max = *times.last().expect("nonempty times");
    let mut grid: Vec<f64> = (0..=cells).map(|i| t_max * i as f64 / cells as f64).collect();
    for &t in times {
        grid.push(t);
        if t - accrual > 0.0 {
            grid.push(t - accrual);
        }
    }
    grid.sort_by(f64::total_cmp);
    grid.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * t_max);
    grid
}

/// Expected drift and covariance of the statistic under the planning
/// alternative, per patient, at each analysis time.
pub fn planning_moments(
    assumptions: &PlanningAssumptions,
    events: &[EventDefinition],
    times: &[f64],
    weight: &Weight,
) -> Result<PlanningMoments> {
    let model = &assumptions.model;
    let plan = &assumptions.accrual;
    plan.check()?;
    let mode = common_mode(events)?;
    if times.is_empty() || times.windows(2).any(|w| w[1] <= w[0]) || times[0] <= 0.0 {
        return Err(Error::arg("analysis times must be positive and increasing"));
    }
    let report = invertibility_report(model, events)?;
    if report.verdict == Verdict::ProvablySingular {
        return Err(Error::SingularPlanning(report.notes.join("; ")));
    }
    let kappa = assumptions.dropout_rate.unwrap_or(0.0);
    if !(kappa >= 0.0) {
        return Err(Error::arg("dropout rate must be nonnegative"));
    }
    let d = events.len();
    let grid = planning_grid(times, plan.duration, 4000);
    // occupation tables per restriction and group: P(X(u) = j, T^R ≥ u)
    let mut restrictions: Vec<Option<Vec<StateId>>> = Vec::new();
    let mut slot = |r: Option<Vec<StateId>>| match restrictions.iter().position(|x| *x == r) {
        Some(i) => i,
        None => {
            restrictions.push(r);
            restrictions.len() - 1
        }
    };
    let event_slot: Vec<usize>;
    let mut pair_slot = vec![vec![0usize; d]; d];
    match mode {
        EventMode::FirstHitting => {
            event_slot = events.iter().map(|e| slot(Some(e.states.clone()))).collect();
            for b in 0..d {
                for c in b..d {
                    pair_slot[b][c] = slot(Some(events[b].union(&events[c]).states));
                }
            }
        }
        EventMode::AllEntries => {
            let s = slot(None);
            event_slot = vec![s; d];
            for row in pair_slot.iter_mut() {
                row.fill(s);
            }
        }
    }
    let tables: Vec<[Vec<Vec<f64>>; 2]> = restrictions
        .iter()
        .map(|r| -> Result<[Vec<Vec<f64>>; 2]> {
            let m = match r {
                Some(states) => model.with_absorbing(states)?,
                None => model.clone(),
            };
            Ok([
                m.occupation_table(Group::Control, &grid)?.probs,
                m.occupation_table(Group::Treatment, &grid)?.probs,
            ])
        })
        .collect::<Result<_>>()?;

    let rho = [plan.group_share(Group::Control), plan.group_share(Group::Treatment)];
    let survival: Vec<f64> = grid.iter().map(|u| (-kappa * u).exp()).collect();

    let mut drift = Vec::new();
    let mut cov_a = Vec::new();
    let mut cov_b = Vec::new();
    for &t in times {
        let clamp: Vec<f64> = grid
            .iter()
            .map(|u| ((t - u) / plan.duration).clamp(0.0, 1.0))
            .collect();
        // expected at-risk share of group g in state j at node i for restriction ri
        let y = |ri: usize, g: usize, j: StateId, i: usize| {
            rho[g] * tables[ri][g][i][j].max(0.0) * survival[i] * clamp[i]
        };
        let share = |ri: usize, j: StateId, i: usize| {
            let (y0, y1) = (y(ri, 0, j, i), y(ri, 1, j, i));
            if y0 + y1 > 0.0 {
                y1 / (y0 + y1)
            } else {
                0.0
            }
        };
        let mut theta = DVector::<f64>::zeros(d);
        let mut va = DMatrix::<f64>::zeros(d, d);
        let mut vb = DMatrix::<f64>::zeros(d, d);
        let last = grid.iter().position(|&u| u >= t).expect("t is a grid node");
        for TransitionIntensity {
            from: j,
            to: k,
            delta,
            ..
        } in model.transitions().iter().cloned()
        {
            let tr = model.transition(j, k)?;
            // trapezoid: node n carries half of each adjacent cell's ΔΛ
            let cells: Vec<f64> = (0..last)
                .map(|i| tr.cumulative(grid[i], grid[i + 1], Group::Control))
                .collect();
            for n in 0..=last {
                let left = if n > 0 { cells[n - 1] } else { 0.0 };
                let right = if n < last { cells[n] } else { 0.0 };
                let h = 0.5 * (left + right);
                if h == 0.0 {
                    continue;
                }
                let q = weight.value(j, k, t, grid[n]);
                for (e, ev) in events.iter().enumerate() {
                    if ev.contains(j) || !ev.contains(k) {
                        continue;
                    }
                    let ri = event_slot[e];
                    theta[e] -= h * (1.0 - delta) * q * (1.0 - share(ri, j, n)) * y(ri, 1, j, n);
                }
                for b in 0..d {
                    for c in b..d {
                        let (eb, ec) = (&events[b], &events[c]);
                        if !(eb.contains(k) && ec.contains(k)) || eb.contains(j) || ec.contains(j) {
                            continue;
                        }
                        let ru = pair_slot[b][c];
                        let (y0, y1) = (y(ru, 0, j, n), y(ru, 1, j, n));
                        let mu = share(ru, j, n);
                        let mb = share(event_slot[b], j, n);
                        let mc = share(event_slot[c], j, n);
                        let q2 = q * q;
                        va[(b, c)] += h
                            * q2
                            * (y0 + delta * y1)
                            * (mu * (1.0 - mb) * (1.0 - mc) + (1.0 - mu) * mb * mc);
                        vb[(b, c)] +=
                            h * q2 * (delta * y1 * (1.0 - mb) * (1.0 - mc) + y0 * mb * mc);
                    }
                }
            }
        }
        for b in 0..d {
            for c in 0..b {
                va[(b, c)] = va[(c, b)];
                vb[(b, c)] = vb[(c, b)];
            }
        }
        drift.push(theta);
        cov_a.push(va);
        cov_b.push(vb);
    }

    let mut drift_increments = Vec::new();
    let mut covariance_increments = Vec::new();
    let mut eta = Vec::new();
    for r in 0..times.len() {
        let (dth, dv) = if r == 0 {
            (drift[0].clone(), cov_a[0].clone())
        } else {
            (&drift[r] - &drift[r - 1], &cov_a[r] - &cov_a[r - 1])
        };
        let l = cholesky_lower(&dv).map_err(|e| {
            Error::SingularPlanning(format!("stage {} covariance increment: {e}", r + 1))
        })?;
        let z = forward_substitute(&l, &dth);
        eta.push(z.norm_squared());
        drift_increments.push(to_vec(&dth));
        covariance_increments.push(to_rows(&dv));
    }
    Ok(PlanningMoments {
        times: times.to_vec(),
        drift: drift.iter().map(to_vec).collect(),
        covariance: cov_a.iter().map(to_rows).collect(),
        covariance_alternative: cov_b.iter().map(to_rows).collect(),
        drift_increments,
        covariance_increments,
        eta,
    })
}

/// Overall rejection probability with `n` patients, by numerical integration.
pub fn design_power(moments: &PlanningMoments, b: &Boundaries, n: f64) -> f64 {
    let d = moments.dimension();
    let laws: Vec<ZLaw> = moments
        .eta
        .iter()
        .map(|&e| ZLaw::chi_square(d, n * e))
        .collect();
    crossing_probabilities(&laws, &b.weights, &b.cumulative)
        .iter()
        .sum::<f64>()
        .clamp(0.0, 1.0)
}

/// Monte Carlo power with its standard error, drawing the stage increments
/// as independent normals with the planning mean and covariance.
pub fn design_power_mc(
    moments: &PlanningMoments,
    b: &Boundaries,
    n: f64,
    draws: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let d = moments.dimension();
    let means: Vec<DVector<f64>> = moments
        .drift_increments
        .iter()
        .zip(&moments.covariance_increments)
        .map(|(th, v)| -> Result<DVector<f64>> {
            let l = cholesky_lower(&crate::linalg::from_rows(v))?;
            Ok(forward_substitute(&l, &DVector::from_vec(th.clone())) * n.sqrt())
        })
        .collect::<Result<_>>()?;
    let shards = 64usize;
    let per = draws.div_ceil(shards);
    let hits: usize = (0..shards)
        .into_par_iter()
        .map(|shard| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(shard as u64);
            let count = per.min(draws.saturating_sub(shard * per));
            let mut hits = 0usize;
            for _ in 0..count {
                let mut partial = 0.0;
                for (r, mean) in means.iter().enumerate() {
                    let s: f64 = (0..d)
                        .map(|i| {
                            let x: f64 = rng.sample(StandardNormal);
                            (x + mean[i]).powi(2)
                        })
                        .sum();
                    let p = chi2_sf(d, s).max(f64::MIN_POSITIVE);
                    partial += b.weights[r] * norm_quantile(1.0 - p);
                    if partial >= b.cumulative[r] {
                        hits += 1;
                        break;
                    }
                }
            }
            hits
        })
        .sum();
    let power = hits as f64 / draws as f64;
    Ok((power, (power * (1.0 - power) / draws as f64).sqrt()))
}

pub const MAX_SAMPLE_SIZE: u64 = 1_000_000;

/// Smallest `n` whose power reaches `target`.
pub fn required_sample_size(moments: &PlanningMoments, b: &Boundaries, target: f64) -> Result<u64> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::arg("target power must lie in (0, 1)"));
    }
    let power = |n: u64| design_power(moments, b, n as f64);
    let at_max = power(MAX_SAMPLE_SIZE);
    if at_max < target {
        return Err(Error::UnreachablePower {
            target,
            max_n: MAX_SAMPLE_SIZE,
            power_at_max: at_max,
        });
    }
    if power(1) >= target {
        return Ok(1);
    }
    let (mut lo, mut hi) = (1u64, MAX_SAMPLE_SIZE);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if power(mid) >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateEstimate {
    pub from: StateId,
    pub to: StateId,
    /// Observed transitions per group.
    pub events: [usize; 2],
    /// Time at risk in the origin state per group.
    pub exposure: [f64; 2],
    /// Occurrence/exposure rate per group; absent without exposure.
    pub rate: [Option<f64>; 2],
}

/// Occurrence/exposure estimates of homogeneous intensities from the data
/// visible at calendar time `t`.
pub fn estimate_intensities(cohort: &Cohort, model: &MultiStateModel, t: f64) -> Vec<RateEstimate> {
    let states = model.state_count();
    let mut exposure = vec![[0.0f64; 2]; states];
    let mut counts: HashMap<(StateId, StateId), [usize; 2]> = HashMap::new();
    for rec in cohort.observe_at(t) {
        let g = rec.group.index();
        for (state, a, b) in rec.sojourns() {
            if state < states {
                exposure[state][g] += b - a;
            }
        }
        for (j, k, _) in rec.transitions() {
            counts.entry((j, k)).or_default()[g] += 1;
        }
    }
    model
        .transitions()
        .iter()
        .map(|tr| {
            let ev = counts.get(&(tr.from, tr.to)).copied().unwrap_or_default();
            let ex = exposure[tr.from];
            let rate = [0, 1].map(|g| (ex[g] > 0.0).then(|| ev[g] as f64 / ex[g]));
            RateEstimate {
                from: tr.from,
                to: tr.to,
                events: ev,
                exposure: ex,
                rate,
            }
        })
        .collect()
}

fn threshold_08() -> f64 {
    0.8
}

fn threshold_05() -> f64 {
    0.5
}

fn tolerance_001() -> f64 {
    0.01
}

/// Bounds and thresholds of the accrual-extension rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecalcRule {
    pub a_add_min: f64,
    pub a_add_max: f64,
    #[serde(default = "threshold_08")]
    pub target: f64,
    #[serde(default = "threshold_05")]
    pub floor: f64,
    #[serde(default = "tolerance_001")]
    pub tolerance: f64,
}

impl RecalcRule {
    pub fn new(a_add_min: f64, a_add_max: f64) -> Self {
        Self {
            a_add_min,
            a_add_max,
            target: 0.8,
            floor: 0.5,
            tolerance: 0.01,
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.a_add_min >= 0.0 && self.a_add_min <= self.a_add_max) {
            return Err(Error::arg(format!(
                "need 0 <= a_add_min <= a_add_max, got {} and {}",
                self.a_add_min, self.a_add_max
            )));
        }
        Ok(())
    }
}

/// Chosen extension and which branch of the rule produced it (1 to 4).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RuleOutcome {
    pub a_add: f64,
    pub branch: u8,
    pub psi_min: f64,
    pub psi_max: f64,
    /// `(a_add, ψ)` evaluations in order.
    pub trace: Vec<(f64, f64)>,
}

/// Applies the four-branch extension rule to a conditional power function.
pub fn apply_rule(
    rule: &RecalcRule,
    mut psi: impl FnMut(f64) -> Result<f64>,
) -> Result<RuleOutcome> {
    rule.check()?;
    let mut trace = Vec::new();
    let mut eval = |a: f64, trace: &mut Vec<(f64, f64)>| -> Result<f64> {
        let v = psi(a)?;
        trace.push((a, v));
        Ok(v)
    };
    let psi_min = eval(rule.a_add_min, &mut trace)?;
    if psi_min >= rule.target {
        return Ok(RuleOutcome {
            a_add: rule.a_add_min,
            branch: 1,
            psi_min,
            psi_max: f64::NAN,
            trace,
        });
    }
    let psi_max = eval(rule.a_add_max, &mut trace)?;
    let (a_add, branch) = if psi_max >= rule.target {
        let (mut lo, mut hi) = (rule.a_add_min, rule.a_add_max);
        while hi - lo > rule.tolerance {
            let mid = 0.5 * (lo + hi);
            if eval(mid, &mut trace)? >= rule.target {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        (hi, 2)
    } else if psi_max >= rule.floor {
        (rule.a_add_max, 3)
    } else {
        (rule.a_add_min, 4)
    };
    Ok(RuleOutcome {
        a_add,
        branch,
        psi_min,
        psi_max,
        trace,
    })
}

/// Everything the interim recalculation needs besides the data.
#[derive(Clone, Debug)]
pub struct RecalcSetting {
    /// Planning model and accrual (with rate and follow-up).
    pub planning: PlanningAssumptions,
    pub events: Vec<EventDefinition>,
    pub boundaries: Boundaries,
    pub interim_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecalcDecision {
    pub p1: f64,
    pub stage1_rejected: bool,
    pub conditional_level: f64,
    pub estimates: Vec<RateEstimate>,
    /// Homogeneous model built from the estimates, used for conditional power.
    pub updated_model: MultiStateModel,
    pub warnings: Vec<String>,
    pub outcome: Option<RuleOutcome>,
    pub a_add: f64,
    pub accrual_end: f64,
    pub final_time: f64,
}

/// Homogeneous model from per-group estimates, falling back to the planning
/// values where an estimate is missing or zero.
pub fn model_from_estimates(
    planning: &MultiStateModel,
    estimates: &[RateEstimate],
    warnings: &mut Vec<String>,
) -> Result<MultiStateModel> {
    let mut transitions = Vec::new();
    for (tr, est) in planning.transitions().iter().zip(estimates) {
        let fallback = [tr.lambda, tr.lambda * tr.delta];
        let mut rates = [0.0; 2];
        for g in 0..2 {
            rates[g] = match est.rate[g] {
                Some(r) if r > 0.0 => r,
                _ => {
                    warnings.push(format!(
                        "no usable estimate for {} -> {} in group {g}; using the planning value",
                        tr.from, tr.to
                    ));
                    fallback[g]
                }
            };
        }
        transitions.push(
            TransitionIntensity::new(tr.from, tr.to, rates[0], 1.0).with_delta(rates[1] / rates[0]),
        );
    }
    MultiStateModel::new(planning.state_count(), transitions)
}

/// Conditional power of the final stage after extending accrual by `a_add`.
pub fn conditional_power(
    model: &MultiStateModel,
    setting: &RecalcSetting,
    recruited: usize,
    level: f64,
    a_add: f64,
) -> Result<f64> {
    if level <= 0.0 {
        return Ok(0.0);
    }
    let plan = &setting.planning.accrual;
    let t1 = setting.interim_time;
    let accrual_end = t1 + a_add;
    if accrual_end <= 0.0 {
        return Err(Error::arg("accrual must last a positive time"));
    }
    let assumptions = PlanningAssumptions {
        model: model.clone(),
        accrual: AccrualPlan {
            duration: accrual_end,
            ..plan.clone()
        },
        dropout_rate: setting.planning.dropout_rate,
    };
    let final_time = accrual_end + plan.follow_up;
    let moments = planning_moments(
        &assumptions,
        &setting.events,
        &[t1, final_time],
        &Weight::Unit,
    )?;
    let n = recruited as f64 + plan.rate * a_add;
    let d = setting.events.len();
    let critical = chi2_isf(d, level);
    Ok(crate::dist::NoncentralChiSquared::new(d, n * moments.eta[1]).sf(critical))
}

/// Interim analysis and accrual-extension decision at `setting.interim_time`.
pub fn accrual_recalc(cohort: &Cohort, setting: &RecalcSetting, rule: &RecalcRule) -> Result<RecalcDecision> {
    rule.check()?;
    let t1 = setting.interim_time;
    let stage = analyze_stage(cohort, &setting.events, &Weight::Unit, 1, 0.0, t1)?;
    let p1 = stage.p_value.max(f64::MIN_POSITIVE);
    let decision = combine_stages(&[p1], &setting.boundaries)?;
    let estimates = estimate_intensities(cohort, &setting.planning.model, t1);
    let mut warnings = Vec::new();
    if setting.planning.model.common_shape() != Some(1.0) {
        warnings.push("rates are estimated under a time-homogeneous model".into());
    }
    let updated_model = model_from_estimates(&setting.planning.model, &estimates, &mut warnings)?;
    if decision.rejected_at.is_some() {
        return Ok(RecalcDecision {
            p1,
            stage1_rejected: true,
            conditional_level: 0.0,
            estimates,
            updated_model,
            warnings,
            outcome: None,
            a_add: 0.0,
            accrual_end: t1,
            final_time: t1,
        });
    }
    let level = decision.next_level.unwrap_or(0.0);
    let recruited = cohort.patients.iter().filter(|p| p.entry <= t1).count();
    let outcome = apply_rule(rule, |a| {
        conditional_power(&updated_model, setting, recruited, level, a)
    })?;
    let a_add = outcome.a_add;
    let plan = &setting.planning.accrual;
    Ok(RecalcDecision {
        p1,
        stage1_rejected: false,
        conditional_level: level,
        estimates,
        updated_model,
        warnings,
        outcome: Some(outcome),
        a_add,
        accrual_end: t1 + a_add,
        final_time: t1 + a_add + plan.follow_up,
    })
}

/// A design file: sequential design plus planning assumptions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignFile {
    #[serde(flatten)]
    pub spec: DesignSpec,
    pub accrual: AccrualPlan,
    pub model: MultiStateModel,
    #[serde(default)]
    pub hazard_ratios: Vec<HazardRatio>,
    pub events: Vec<EventDefinition>,
    #[serde(default = "threshold_08")]
    pub target_power: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HazardRatio {
    pub from: StateId,
    pub to: StateId,
    pub delta: f64,
}

impl DesignFile {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let f: DesignFile = serde_json::from_str(s)?;
        f.spec.check()?;
        f.accrual.check()?;
        for e in &f.events {
            e.check(Some(f.model.state_count()))?;
        }
        common_mode(&f.events)?;
        f.planning_model()?;
        Ok(f)
    }

    pub fn from_json_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// The model with the file's hazard ratios applied.
    pub fn planning_model(&self) -> Result<MultiStateModel> {
        let ratios: Vec<_> = self
            .hazard_ratios
            .iter()
            .map(|h| (h.from, h.to, h.delta))
            .collect();
        self.model.with_hazard_ratios(&ratios)
    }

    pub fn assumptions(&self) -> Result<PlanningAssumptions> {
        Ok(PlanningAssumptions {
            model: self.planning_model()?,
            accrual: self.accrual.clone(),
            dropout_rate: self.dropout_rate,
        })
    }

    pub fn moments(&self) -> Result<PlanningMoments> {
        planning_moments(
            &self.assumptions()?,
            &self.events,
            &self.spec.analysis_times,
            &Weight::Unit,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::illness_death;

    fn equal(m: usize) -> Vec<f64> {
        vec![1.0 / (m as f64).sqrt(); m]
    }

    #[test]
    fn single_stage_threshold() {
        let b = sequential_boundaries(&BoundaryFamily::Pocock, 0.05, &[1.0]).unwrap();
        assert!((b.critical[0] - 1.6448536269514722).abs() < 1e-8);
    }

    #[test]
    fn two_stage_pocock_and_obf() {
        let p = sequential_boundaries(&BoundaryFamily::Pocock, 0.05, &equal(2)).unwrap();
        assert!((p.critical[0] - p.critical[1]).abs() < 1e-12);
        assert!((p.stage_alpha.iter().sum::<f64>() - 0.05).abs() < 1e-9);
        let o = sequential_boundaries(&BoundaryFamily::ObrienFleming, 0.05, &equal(2)).unwrap();
        assert!((o.critical[0] - o.critical[1] * 2f64.sqrt()).abs() < 1e-12);
        assert!((o.stage_alpha.iter().sum::<f64>() - 0.05).abs() < 1e-9);
    }

    #[test]
    fn conditional_error_adds_up() {
        for fam in [BoundaryFamily::Pocock, BoundaryFamily::ObrienFleming] {
            let b = sequential_boundaries(&fam, 0.05, &equal(2)).unwrap();
            let alpha1 = b.nominal_levels[0];
            let mass = conditional_error_mass(&b).unwrap();
            assert!((alpha1 + mass - 0.05).abs() < 1e-6, "{fam:?}: {}", alpha1 + mass);
        }
    }

    #[test]
    fn combine_examples() {
        let b = sequential_boundaries(&BoundaryFamily::Pocock, 0.05, &equal(2)).unwrap();
        let d = combine_stages(&[b.nominal_levels[0] / 2.0], &b).unwrap();
        assert_eq!(d.rejected_at, Some(1));
        let d = combine_stages(&[1.0], &b).unwrap();
        assert_eq!(d.rejected_at, None);
        assert_eq!(d.next_level, Some(0.0));
        assert!(combine_stages(&[0.0], &b).is_err());
        assert!(combine_stages(&[1.5], &b).is_err());
    }

    #[test]
    fn three_stage_example_does_not_reject() {
        let b = sequential_boundaries(&BoundaryFamily::ObrienFleming, 0.05, &equal(3)).unwrap();
        let d = combine_stages(&[0.536, 0.227, 0.592], &b).unwrap();
        assert_eq!(d.rejected_at, None);
        assert_eq!(d.stage_levels.len(), 3);
    }

    #[test]
    fn z_law_of_central_chi_square_is_normal() {
        // the tabulated law with a vanishing noncentrality must match Φ
        let t = ZLaw::Tabulated(Arc::new(ZTable::new(2, 1e-12)));
        for &z in &[-3.0, -1.0, 0.0, 0.7, 2.5] {
            assert!((t.cdf(z) - norm_cdf(z)).abs() < 1e-6);
            assert!((t.pdf(z) - norm_pdf(z)).abs() < 1e-6);
        }
    }

    #[test]
    fn z_law_matches_noncentral_tail() {
        let ncp = 9.0;
        let law = ZLaw::chi_square(2, ncp);
        let nc = crate::dist::NoncentralChiSquared::new(2, ncp);
        for &z in &[-1.0, 0.5, 1.6448536269514722, 3.0] {
            let x = chi2_isf(2, norm_sf(z));
            assert!((law.sf(z) - nc.sf(x)).abs() < 1e-6, "z = {z}");
        }
    }

    #[test]
    fn null_power_is_alpha() {
        let m = PlanningMoments {
            times: vec![1.0, 2.0],
            drift: vec![vec![0.0; 2]; 2],
            covariance: vec![],
            covariance_alternative: vec![],
            drift_increments: vec![vec![0.0; 2]; 2],
            covariance_increments: vec![],
            eta: vec![0.0, 0.0],
        };
        let b = sequential_boundaries(&BoundaryFamily::Pocock, 0.05, &equal(2)).unwrap();
        assert!((design_power(&m, &b, 500.0) - 0.05).abs() < 1e-9);
        assert!(matches!(
            required_sample_size(&m, &b, 0.8),
            Err(Error::UnreachablePower { .. })
        ));
    }

    #[test]
    fn null_alternative_has_no_drift() {
        let a = PlanningAssumptions {
            model: illness_death((0.6, 1.0), (0.075, 1.0), (0.9, 1.0)).unwrap(),
            accrual: AccrualPlan::new(3.0, 2.0),
            dropout_rate: None,
        };
        let events = [EventDefinition::pfs(), EventDefinition::os()];
        let m = planning_moments(&a, &events, &[2.5, 5.0], &Weight::Unit).unwrap();
        assert!(m.eta.iter().all(|&e| e == 0.0));
        assert!(m.drift_increments.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn rule_branches() {
        let rule = RecalcRule::new(3.0, 30.0);
        let r = apply_rule(&rule, |_| Ok(0.95)).unwrap();
        assert_eq!((r.a_add, r.branch), (3.0, 1));
        let r = apply_rule(&rule, |a| Ok(0.6 + 0.3 * (a - 3.0) / 27.0)).unwrap();
        assert_eq!(r.branch, 2);
        assert!((r.a_add - 21.0).abs() <= 0.01 + 1e-12);
        let r = apply_rule(&rule, |a| Ok(0.4 + 0.2 * (a - 3.0) / 27.0)).unwrap();
        assert_eq!((r.a_add, r.branch), (30.0, 3));
        let r = apply_rule(&rule, |_| Ok(0.2)).unwrap();
        assert_eq!((r.a_add, r.branch), (3.0, 4));
        assert!(apply_rule(&RecalcRule::new(5.0, 4.0), |_| Ok(0.0)).is_err());
    }

    #[test]
    fn occurrence_exposure() {
        use crate::cohort::PatientRecord;
        use crate::model::{Jump, PatientPath};
        let m = illness_death((0.3, 1.0), (0.1, 1.0), (0.2, 1.0)).unwrap();
        let rec = |id: &str, jumps: Vec<Jump>, dropout: f64| PatientRecord {
            id: id.into(),
            entry: 0.0,
            group: Group::Control,
            dropout,
            path: PatientPath::new(jumps),
        };
        let c = Cohort::new(vec![
            rec("a", vec![Jump { s: 4.0, to: 1 }], 20.0),
            rec("b", vec![Jump { s: 6.0, to: 1 }], 20.0),
        ]);
        let est = estimate_intensities(&c, &m, 100.0);
        assert_eq!(est[0].events, [2, 0]);
        assert_eq!(est[0].exposure[0], 10.0);
        assert_eq!(est[0].rate[0], Some(0.2));
        assert_eq!(est[0].rate[1], None);
        assert_eq!(est[2].rate[0], Some(0.0));
    }
}
