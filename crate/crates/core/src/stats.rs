//! Multivariate log-rank-type statistics for composite events, their
//! covariance estimate, stagewise χ² statistics and invertibility diagnostics.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::cohort::{common_mode, Cohort, EventDefinition, EventMode, ObservedRecord, RiskIndex};
use crate::dist::chi2_sf;
use crate::error::{Error, Result};
use crate::linalg::{cholesky_lower, forward_substitute, pinv_symmetric, quadratic_form};
use crate::model::{MultiStateModel, StateId};

pub const PINV_REL_TOL: f64 = 1e-10;

type WeightFn = dyn Fn(StateId, StateId, f64, f64) -> f64 + Send + Sync;

/// Transition weights `Q^{jk}(t, s)`.
#[derive(Clone, Default)]
pub enum Weight {
    #[default]
    Unit,
    /// Constant weight per transition; unlisted transitions get 1.
    PerTransition(HashMap<(StateId, StateId), f64>),
    /// Arbitrary `(from, to, t, s) -> weight`.
    Custom(Arc<WeightFn>),
}

impl fmt::Debug for Weight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Weight::Unit => write!(f, "Unit"),
            Weight::PerTransition(m) => f.debug_tuple("PerTransition").field(m).finish(),
            Weight::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl Weight {
    pub fn value(&self, from: StateId, to: StateId, t: f64, s: f64) -> f64 {
        match self {
            Weight::Unit => 1.0,
            Weight::PerTransition(m) => m.get(&(from, to)).copied().unwrap_or(1.0),
            Weight::Custom(f) => f(from, to, t, s),
        }
    }
}

fn state_count(records: &[ObservedRecord], events: &[EventDefinition]) -> usize {
    let mut n = 1;
    for r in records {
        for j in &r.jumps {
            n = n.max(j.to + 1);
        }
    }
    for e in events {
        for &s in &e.states {
            n = n.max(s + 1);
        }
    }
    n
}

/// `U(t)` and `V̂(t)` from the data visible at calendar time `t`.
pub fn statistics_at(
    cohort: &Cohort,
    events: &[EventDefinition],
    weight: &Weight,
    t: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if cohort.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let mode = common_mode(events)?;
    let records = cohort.observe_at(t);
    let d = events.len();
    let n = cohort.len() as f64;
    let states = state_count(&records, events);
    let mut u = DVector::<f64>::zeros(d);
    let mut v = DMatrix::<f64>::zeros(d, d);

    match mode {
        EventMode::FirstHitting => {
            let mut restrictions: Vec<Option<Vec<StateId>>> = Vec::new();
            let slot = |set: Vec<StateId>, list: &mut Vec<Option<Vec<StateId>>>| {
                let key = Some(set);
                match list.iter().position(|r| *r == key) {
                    Some(i) => i,
                    None => {
                        list.push(key);
                        list.len() - 1
                    }
                }
            };
            let event_slot: Vec<usize> = events
                .iter()
                .map(|e| slot(e.states.clone(), &mut restrictions))
                .collect();
            let mut pairs = Vec::new();
            for b in 0..d {
                for c in b..d {
                    let union = events[b].union(&events[c]).states;
                    let ui = slot(union.clone(), &mut restrictions);
                    pairs.push((b, c, union, ui));
                }
            }
            let index = RiskIndex::build(&records, states, restrictions);

            for rec in &records {
                let z = rec.z();
                for (e, event) in events.iter().enumerate() {
                    if let Some((j, k, s)) = rec.first_entry(&event.states) {
                        let p = index
                            .treated_share(event_slot[e], j, s)
                            .expect("event patient is in its own risk set");
                        u[e] += weight.value(j, k, t, s) * (z - p);
                    }
                }
                for (b, c, union, ui) in &pairs {
                    let Some((j, k, s)) = rec.first_entry(union) else {
                        continue;
                    };
                    if !(events[*b].contains(k) && events[*c].contains(k)) {
                        continue;
                    }
                    let pb = index.treated_share(event_slot[*b], j, s).expect("at risk");
                    let pc = index.treated_share(event_slot[*c], j, s).expect("at risk");
                    let pu = index.treated_share(*ui, j, s).expect("at risk");
                    let q = weight.value(j, k, t, s);
                    let term = q * q * (pu * (1.0 - pb) * (1.0 - pc) + (1.0 - pu) * pb * pc);
                    v[(*b, *c)] += term;
                }
            }
        }
        EventMode::AllEntries => {
            let index = RiskIndex::build(&records, states, vec![None]);
            for rec in &records {
                let z = rec.z();
                for (j, k, s) in rec.transitions() {
                    let mut share = None;
                    let mut p = || *share.get_or_insert_with(|| {
                        index.treated_share(0, j, s).expect("transitioning patient is at risk")
                    });
                    for (e, event) in events.iter().enumerate() {
                        if !event.contains(j) && event.contains(k) {
                            u[e] += weight.value(j, k, t, s) * (z - p());
                        }
                    }
                    for b in 0..d {
                        for c in b..d {
                            let (eb, ec) = (&events[b], &events[c]);
                            if eb.contains(k) && ec.contains(k) && !eb.contains(j) && !ec.contains(j)
                            {
                                let q = weight.value(j, k, t, s);
                                let pj = p();
                                v[(b, c)] += q * q * pj * (1.0 - pj);
                            }
                        }
                    }
                }
            }
        }
    }

    for b in 0..d {
        for c in 0..b {
            v[(b, c)] = v[(c, b)];
        }
    }
    Ok((u / n.sqrt(), v / n))
}

pub fn u_vector(
    cohort: &Cohort,
    events: &[EventDefinition],
    weight: &Weight,
    t: f64,
) -> Result<DVector<f64>> {
    Ok(statistics_at(cohort, events, weight, t)?.0)
}

pub fn covariance_hat(
    cohort: &Cohort,
    events: &[EventDefinition],
    weight: &Weight,
    t: f64,
) -> Result<DMatrix<f64>> {
    Ok(statistics_at(cohort, events, weight, t)?.1)
}

/// `(U(t_now) − U(t_prev), V̂(t_now) − V̂(t_prev))`.
pub fn stage_increment(
    cohort: &Cohort,
    events: &[EventDefinition],
    weight: &Weight,
    t_prev: f64,
    t_now: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if !(0.0 <= t_prev && t_prev < t_now) {
        return Err(Error::arg(format!(
            "stage increment needs 0 <= t_prev < t_now, got {t_prev} and {t_now}"
        )));
    }
    let (u1, v1) = statistics_at(cohort, events, weight, t_now)?;
    if t_prev == 0.0 {
        return Ok((u1, v1));
    }
    let (u0, v0) = statistics_at(cohort, events, weight, t_prev)?;
    Ok((u1 - u0, v1 - v0))
}

/// `L⁻¹ ΔU` with `L` the lower Cholesky factor of `ΔV̂`.
pub fn standardize_cholesky(du: &DVector<f64>, dv: &DMatrix<f64>) -> Result<DVector<f64>> {
    if dv.nrows() != du.len() || dv.ncols() != du.len() {
        return Err(Error::arg("dimension mismatch between increment vector and matrix"));
    }
    let l = cholesky_lower(dv)?;
    Ok(forward_substitute(&l, du))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageResult {
    pub stage: usize,
    pub t: f64,
    pub du: Vec<f64>,
    pub dv: Vec<Vec<f64>>,
    /// Cholesky-standardised increment, when `ΔV̂` is positive definite.
    pub z: Option<Vec<f64>>,
    pub statistic: f64,
    pub p_value: f64,
    pub rank: usize,
    pub rank_deficient: bool,
}

impl StageResult {
    pub fn du_vector(&self) -> DVector<f64> {
        DVector::from_vec(self.du.clone())
    }

    pub fn dv_matrix(&self) -> DMatrix<f64> {
        let d = self.du.len();
        DMatrix::from_fn(d, d, |i, j| self.dv[i][j])
    }
}

/// `S = ΔUᵀ ΔV̂⁺ ΔU` with its χ²_d p-value, `d` the number of events.
pub fn stage_statistic(du: &DVector<f64>, dv: &DMatrix<f64>) -> Result<StageResult> {
    let d = du.len();
    if d == 0 || dv.nrows() != d || dv.ncols() != d {
        return Err(Error::arg("stage statistic needs a nonempty d-vector and d×d matrix"));
    }
    if du.iter().chain(dv.iter()).any(|x| !x.is_finite()) {
        return Err(Error::arg("stage statistic inputs must be finite"));
    }
    let (pinv, rank) = pinv_symmetric(dv, PINV_REL_TOL);
    let statistic = quadratic_form(du, &pinv).max(0.0);
    let z = standardize_cholesky(du, dv).ok().map(|z| z.iter().copied().collect());
    Ok(StageResult {
        stage: 0,
        t: 0.0,
        du: du.iter().copied().collect(),
        dv: (0..d).map(|i| (0..d).map(|j| dv[(i, j)]).collect()).collect(),
        z,
        statistic,
        p_value: chi2_sf(d, statistic),
        rank,
        rank_deficient: rank < d,
    })
}

/// Stage `r` result from the data at `t_prev` and `t_now`.
pub fn analyze_stage(
    cohort: &Cohort,
    events: &[EventDefinition],
    weight: &Weight,
    stage: usize,
    t_prev: f64,
    t_now: f64,
) -> Result<StageResult> {
    let (du, dv) = stage_increment(cohort, events, weight, t_prev, t_now)?;
    let mut r = stage_statistic(&du, &dv)?;
    r.stage = stage;
    r.t = t_now;
    Ok(r)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    GuaranteedInvertible,
    NotGuaranteed,
    ProvablySingular,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::GuaranteedInvertible => "guaranteed-invertible",
            Verdict::NotGuaranteed => "not-guaranteed",
            Verdict::ProvablySingular => "provably-singular",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InvertibilityReport {
    pub mode: EventMode,
    /// Model transitions in the order used by the incidence vectors.
    pub transitions: Vec<(StateId, StateId)>,
    /// Incidence vector per event: 1 where the transition enters the event from outside.
    pub psi: Vec<Vec<u8>>,
    pub psi_rank: usize,
    /// Exact verdict for the all-entries covariance.
    pub psi_independent: bool,
    /// An exclusive transition per event with respect to all events.
    pub exclusive: Vec<Option<(StateId, StateId)>>,
    /// Every event has an exclusive transition.
    pub i1: bool,
    /// Invertibility follows by repeatedly removing events with exclusive transitions.
    pub i2: bool,
    /// Entry sets are connected through shared transitions.
    pub d1: bool,
    /// Each entering transition is shared by at most two events.
    pub d2: bool,
    /// Some row is strictly dominant.
    pub d3: bool,
    pub verdict: Verdict,
    pub notes: Vec<String>,
}

struct Structure<'a> {
    model: &'a MultiStateModel,
    transitions: Vec<(StateId, StateId)>,
    events: &'a [EventDefinition],
}

impl Structure<'_> {
    fn enters(&self, c: usize, (j, k): (StateId, StateId)) -> bool {
        !self.events[c].contains(j) && self.events[c].contains(k)
    }

    fn entry_set(&self, c: usize) -> Vec<(StateId, StateId)> {
        self.transitions.iter().copied().filter(|&w| self.enters(c, w)).collect()
    }

    fn exclusive(&self, c: usize, within: &[usize]) -> Option<(StateId, StateId)> {
        self.entry_set(c).into_iter().find(|&(j, k)| {
            within.iter().filter(|&&o| o != c).all(|&o| {
                self.events[o].contains(j) || !self.events[o].contains(k)
            })
        })
    }

    fn components(&self, within: &[usize]) -> Vec<Vec<usize>> {
        let mut seen = vec![false; self.events.len()];
        let mut out = Vec::new();
        for &start in within {
            if seen[start] {
                continue;
            }
            seen[start] = true;
            let mut comp = vec![start];
            let mut i = 0;
            while i < comp.len() {
                let a = comp[i];
                let ina = self.entry_set(a);
                for &b in within {
                    if !seen[b] && self.entry_set(b).iter().any(|w| ina.contains(w)) {
                        seen[b] = true;
                        comp.push(b);
                    }
                }
                i += 1;
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    fn d2(&self, within: &[usize]) -> bool {
        self.transitions.iter().all(|&w| {
            within.iter().filter(|&&c| self.enters(c, w)).count() <= 2
        })
    }

    /// Whether state `j` can be reached having entered `through` but never `avoid`.
    fn reachable_via(&self, j: StateId, through: &[StateId], avoid: &[StateId]) -> bool {
        let n = self.model.state_count();
        let mut seen = vec![[false; 2]; n];
        let start_flag = usize::from(through.contains(&0));
        if avoid.contains(&0) {
            return false;
        }
        seen[0][start_flag] = true;
        let mut stack = vec![(0, start_flag)];
        while let Some((s, flag)) = stack.pop() {
            if s == j && flag == 1 {
                return true;
            }
            for t in self.model.outgoing(s) {
                if avoid.contains(&t.to) {
                    continue;
                }
                let f = flag.max(usize::from(through.contains(&t.to)));
                if !seen[t.to][f] {
                    seen[t.to][f] = true;
                    stack.push((t.to, f));
                }
            }
        }
        false
    }

    fn d3(&self, within: &[usize]) -> bool {
        within.iter().any(|&c1| {
            if self.exclusive(c1, within).is_some() {
                return true;
            }
            within.iter().filter(|&&c2| c2 != c1).any(|&c2| {
                self.entry_set(c1)
                    .into_iter()
                    .filter(|&w| self.enters(c2, w))
                    .any(|(j, _)| {
                        self.reachable_via(j, &self.events[c2].states, &self.events[c1].states)
                    })
            })
        })
    }

    /// Sufficient conditions for positive-definite first-hitting increments.
    fn guaranteed(&self, within: &[usize], peeled: &mut bool) -> bool {
        if within.is_empty() {
            return true;
        }
        if within.len() == 1 {
            return !self.entry_set(within[0]).is_empty();
        }
        let excl: Vec<usize> = within
            .iter()
            .copied()
            .filter(|&c| self.exclusive(c, within).is_some())
            .collect();
        if excl.len() == within.len() {
            return true;
        }
        if !excl.is_empty() {
            *peeled = true;
            let rest: Vec<usize> = within.iter().copied().filter(|c| !excl.contains(c)).collect();
            return self.guaranteed(&rest, peeled);
        }
        let comps = self.components(within);
        if comps.len() > 1 {
            return comps.iter().all(|comp| self.guaranteed(comp, peeled));
        }
        self.d2(within) && self.d3(within)
    }
}

fn integer_rank(rows: &[Vec<u8>]) -> usize {
    let mut m: Vec<Vec<i128>> = rows
        .iter()
        .map(|r| r.iter().map(|&x| x as i128).collect())
        .collect();
    let cols = m.first().map_or(0, |r| r.len());
    let mut rank = 0;
    let mut prev_pivot: i128 = 1;
    for col in 0..cols {
        let Some(p) = (rank..m.len()).find(|&r| m[r][col] != 0) else {
            continue;
        };
        m.swap(rank, p);
        for r in (rank + 1)..m.len() {
            for c in (col + 1)..cols {
                m[r][c] = (m[rank][col] * m[r][c] - m[r][col] * m[rank][c]) / prev_pivot;
            }
            m[r][col] = 0;
        }
        prev_pivot = m[rank][col];
        rank += 1;
    }
    rank
}

/// Structural diagnostics for the invertibility of covariance increments.
pub fn invertibility_report(
    model: &MultiStateModel,
    events: &[EventDefinition],
) -> Result<InvertibilityReport> {
    let mode = common_mode(events)?;
    for e in events {
        e.check(Some(model.state_count()))?;
    }
    let s = Structure {
        model,
        transitions: model.transitions().iter().map(|t| (t.from, t.to)).collect(),
        events,
    };
    let d = events.len();
    let all: Vec<usize> = (0..d).collect();
    let psi: Vec<Vec<u8>> = (0..d)
        .map(|c| s.transitions.iter().map(|&w| u8::from(s.enters(c, w))).collect())
        .collect();
    let psi_rank = integer_rank(&psi);
    let psi_independent = psi_rank == d;
    let exclusive: Vec<_> = (0..d).map(|c| s.exclusive(c, &all)).collect();
    let i1 = exclusive.iter().all(Option::is_some);
    let mut peeled = false;
    let guaranteed = s.guaranteed(&all, &mut peeled);
    let i2 = guaranteed && peeled && !i1;
    let d1 = s.components(&all).len() == 1;
    let d2 = s.d2(&all);
    let d3 = s.d3(&all);

    let mut notes = Vec::new();
    let mut singular = false;
    for c in 0..d {
        if s.entry_set(c).is_empty() {
            notes.push(format!("event {c} cannot be entered from outside; its variance is zero"));
            singular = true;
        }
        for o in (c + 1)..d {
            if events[c].states == events[o].states {
                notes.push(format!("events {c} and {o} are the same set of states"));
                singular = true;
            }
        }
    }
    let verdict = match mode {
        EventMode::AllEntries => {
            if psi_independent {
                Verdict::GuaranteedInvertible
            } else {
                notes.push("incidence vectors are linearly dependent".into());
                Verdict::ProvablySingular
            }
        }
        EventMode::FirstHitting => {
            if singular {
                Verdict::ProvablySingular
            } else if guaranteed {
                Verdict::GuaranteedInvertible
            } else {
                Verdict::NotGuaranteed
            }
        }
    };
    Ok(InvertibilityReport {
        mode,
        transitions: s.transitions.clone(),
        psi,
        psi_rank,
        psi_independent,
        exclusive,
        i1,
        i2,
        d1,
        d2,
        d3,
        verdict,
        notes,
    })
}
