//! Markovian multi-state models with Weibull transition intensities.
//!
//! Intensities have the form `λ s^{γ-1}`, multiplied by `δ` for patients in
//! the treatment group. State 0 is the initial state of every patient.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::expm;

pub type StateId = usize;

/// Randomised treatment arm. `Treatment` corresponds to `Z = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    Control,
    Treatment,
}

impl Group {
    pub const BOTH: [Group; 2] = [Group::Control, Group::Treatment];

    pub fn from_z(z: u8) -> Result<Self> {
        match z {
            0 => Ok(Group::Control),
            1 => Ok(Group::Treatment),
            other => Err(Error::arg(format!("group indicator must be 0 or 1, got {other}"))),
        }
    }

    pub fn z(self) -> u8 {
        match self {
            Group::Control => 0,
            Group::Treatment => 1,
        }
    }

    pub fn index(self) -> usize {
        self.z() as usize
    }

    pub fn flipped(self) -> Self {
        match self {
            Group::Control => Group::Treatment,
            Group::Treatment => Group::Control,
        }
    }
}

fn one() -> f64 {
    1.0
}

fn is_one(x: &f64) -> bool {
    *x == 1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionIntensity {
    pub from: StateId,
    pub to: StateId,
    /// Scale `λ` of the control-group intensity.
    pub lambda: f64,
    /// Weibull shape `γ`.
    #[serde(default = "one")]
    pub gamma: f64,
    /// Hazard ratio applied to the treatment group.
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub delta: f64,
}

impl TransitionIntensity {
    pub fn new(from: StateId, to: StateId, lambda: f64, gamma: f64) -> Self {
        Self {
            from,
            to,
            lambda,
            gamma,
            delta: 1.0,
        }
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = delta;
        self
    }

    /// Group-specific scale, `δ^Z λ`.
    pub fn scale(&self, group: Group) -> f64 {
        match group {
            Group::Control => self.lambda,
            Group::Treatment => self.lambda * self.delta,
        }
    }

    pub fn rate_at(&self, s: f64, group: Group) -> f64 {
        if self.gamma == 1.0 {
            self.scale(group)
        } else {
            self.scale(group) * s.powf(self.gamma - 1.0)
        }
    }

    /// `∫_{s1}^{s2} λ^{jk}(u) du` in closed form.
    pub fn cumulative(&self, s1: f64, s2: f64, group: Group) -> f64 {
        if self.gamma == 1.0 {
            self.scale(group) * (s2 - s1)
        } else {
            self.scale(group) * (s2.powf(self.gamma) - s1.powf(self.gamma)) / self.gamma
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    states: usize,
    transitions: Vec<TransitionIntensity>,
}

/// An immutable multi-state model over states `0..states`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelFile", into = "ModelFile")]
pub struct MultiStateModel {
    states: usize,
    transitions: Vec<TransitionIntensity>,
    outgoing: Vec<Vec<usize>>,
    common_shape: Option<f64>,
}

impl TryFrom<ModelFile> for MultiStateModel {
    type Error = Error;
    fn try_from(f: ModelFile) -> Result<Self> {
        MultiStateModel::new(f.states, f.transitions)
    }
}

impl From<MultiStateModel> for ModelFile {
    fn from(m: MultiStateModel) -> Self {
        ModelFile {
            states: m.states,
            transitions: m.transitions,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ModelReport {
    pub absorbing: Vec<StateId>,
    pub reachable: Vec<StateId>,
    pub unreachable: Vec<StateId>,
    /// Whether every non-absorbing reachable state can reach an absorbing one.
    pub absorption_possible: bool,
}

impl MultiStateModel {
    pub fn new(states: usize, transitions: Vec<TransitionIntensity>) -> Result<Self> {
        let m = Self::build(states, transitions)?;
        if m.outgoing[0].is_empty() {
            return Err(Error::InvalidModel(
                "state 0 has no outgoing intensity".into(),
            ));
        }
        Ok(m)
    }

    fn build(states: usize, transitions: Vec<TransitionIntensity>) -> Result<Self> {
        if states == 0 {
            return Err(Error::InvalidModel("model needs at least one state".into()));
        }
        let mut seen = BTreeSet::new();
        let mut outgoing = vec![Vec::new(); states];
        for (idx, t) in transitions.iter().enumerate() {
            if t.from >= states || t.to >= states {
                return Err(Error::InvalidModel(format!(
                    "transition {} -> {} refers to a state outside 0..{}",
                    t.from, t.to, states
                )));
            }
            if t.from == t.to {
                return Err(Error::InvalidModel(format!("self-loop on state {}", t.from)));
            }
            if !seen.insert((t.from, t.to)) {
                return Err(Error::InvalidModel(format!(
                    "duplicate intensity {} -> {}",
                    t.from, t.to
                )));
            }
            for (name, v) in [("lambda", t.lambda), ("gamma", t.gamma), ("delta", t.delta)] {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::InvalidModel(format!(
                        "{name} of {} -> {} must be positive and finite, got {v}",
                        t.from, t.to
                    )));
                }
            }
            outgoing[t.from].push(idx);
        }
        let common_shape = match transitions.first() {
            Some(first) if transitions.iter().all(|t| t.gamma == first.gamma) => Some(first.gamma),
            None => Some(1.0),
            _ => None,
        };
        Ok(Self {
            states,
            transitions,
            outgoing,
            common_shape,
        })
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serialises")
    }

    pub fn state_count(&self) -> usize {
        self.states
    }

    pub fn transitions(&self) -> &[TransitionIntensity] {
        &self.transitions
    }

    pub fn outgoing(&self, state: StateId) -> impl Iterator<Item = &TransitionIntensity> {
        self.outgoing[state].iter().map(move |&i| &self.transitions[i])
    }

    pub fn is_absorbing(&self, state: StateId) -> bool {
        self.outgoing[state].is_empty()
    }

    pub fn transition_index(&self, from: StateId, to: StateId) -> Result<usize> {
        if from >= self.states {
            return Err(Error::InvalidState(from));
        }
        self.outgoing[from]
            .iter()
            .copied()
            .find(|&i| self.transitions[i].to == to)
            .ok_or(Error::UnknownTransition { from, to })
    }

    pub fn transition(&self, from: StateId, to: StateId) -> Result<&TransitionIntensity> {
        Ok(&self.transitions[self.transition_index(from, to)?])
    }

    /// Shape shared by every intensity, if any.
    pub fn common_shape(&self) -> Option<f64> {
        self.common_shape
    }

    pub fn validate(&self) -> ModelReport {
        let absorbing: Vec<_> = (0..self.states).filter(|&j| self.is_absorbing(j)).collect();
        let mut reach = vec![false; self.states];
        reach[0] = true;
        let mut stack = vec![0];
        while let Some(j) = stack.pop() {
            for t in self.outgoing(j) {
                if !reach[t.to] {
                    reach[t.to] = true;
                    stack.push(t.to);
                }
            }
        }
        // backward closure from absorbing states
        let mut leads = vec![false; self.states];
        for &a in &absorbing {
            leads[a] = true;
        }
        let mut changed = true;
        while changed {
            changed = false;
            for t in &self.transitions {
                if leads[t.to] && !leads[t.from] {
                    leads[t.from] = true;
                    changed = true;
                }
            }
        }
        let reachable: Vec<_> = (0..self.states).filter(|&j| reach[j]).collect();
        let unreachable: Vec<_> = (0..self.states).filter(|&j| !reach[j]).collect();
        let absorption_possible = reachable.iter().all(|&j| leads[j]);
        ModelReport {
            absorbing,
            reachable,
            unreachable,
            absorption_possible,
        }
    }

    /// The same model with every state of `states` made absorbing.
    pub fn with_absorbing(&self, states: &[StateId]) -> Result<Self> {
        for &s in states {
            if s >= self.states {
                return Err(Error::InvalidState(s));
            }
        }
        let kept = self
            .transitions
            .iter()
            .filter(|t| !states.contains(&t.from))
            .cloned()
            .collect();
        Self::build(self.states, kept)
    }

    /// Replaces the treatment-group hazard ratios, keyed by `(from, to)`.
    pub fn with_hazard_ratios(&self, ratios: &[(StateId, StateId, f64)]) -> Result<Self> {
        let mut transitions = self.transitions.clone();
        for &(from, to, delta) in ratios {
            let idx = self.transition_index(from, to)?;
            transitions[idx].delta = delta;
        }
        Self::new(self.states, transitions)
    }

    pub fn cumulative_intensity(
        &self,
        from: StateId,
        to: StateId,
        s1: f64,
        s2: f64,
        group: Group,
    ) -> Result<f64> {
        if !(0.0 <= s1 && s1 <= s2) {
            return Err(Error::arg(format!(
                "cumulative intensity needs 0 <= s1 <= s2, got [{s1}, {s2}]"
            )));
        }
        Ok(self.transition(from, to)?.cumulative(s1, s2, group))
    }

    /// Generator increment `∫_{s1}^{s2} A(u) du` for the given group.
    pub fn generator_increment(&self, s1: f64, s2: f64, group: Group) -> DMatrix<f64> {
        let mut g = DMatrix::<f64>::zeros(self.states, self.states);
        for t in &self.transitions {
            let c = t.cumulative(s1, s2, group);
            g[(t.from, t.to)] += c;
            g[(t.from, t.from)] -= c;
        }
        g
    }

    fn product_integral(&self, s1: f64, s2: f64, group: Group, steps: usize) -> DMatrix<f64> {
        // intensities with shape < 1 blow up at 0; grade the mesh there
        let grading = if s1 == 0.0 && self.transitions.iter().any(|t| t.gamma < 1.0) {
            4
        } else {
            1
        };
        let node = |i: usize| {
            if i == steps {
                s2
            } else {
                s1 + (s2 - s1) * (i as f64 / steps as f64).powi(grading)
            }
        };
        let mut p = DMatrix::<f64>::identity(self.states, self.states);
        for i in 0..steps {
            p = &p * expm(&self.generator_increment(node(i), node(i + 1), group));
        }
        p
    }

    /// Transition probability matrix `P(s1, s2)` with entries
    /// `P(X(s2) = k | X(s1) = j)`.
    pub fn transition_matrix(&self, s1: f64, s2: f64, group: Group) -> Result<DMatrix<f64>> {
        if !(0.0 <= s1 && s1 <= s2 && s2.is_finite()) {
            return Err(Error::arg(format!("invalid interval [{s1}, {s2}]")));
        }
        if s1 == s2 {
            return Ok(DMatrix::identity(self.states, self.states));
        }
        if self.common_shape.is_some() {
            // intensities are proportional to one another, so the generators commute
            return Ok(expm(&self.generator_increment(s1, s2, group)));
        }
        let mut steps = 1;
        let mut coarse = self.product_integral(s1, s2, group, steps);
        let mut previous: Option<DMatrix<f64>> = None;
        while steps <= 1 << 16 {
            let fine = self.product_integral(s1, s2, group, 2 * steps);
            let extrapolated = (&fine * 4.0 - &coarse) / 3.0;
            if let Some(prev) = &previous {
                if (&extrapolated - prev).abs().max() < 1e-10 {
                    return Ok(extrapolated);
                }
            }
            previous = Some(extrapolated);
            coarse = fine;
            steps *= 2;
        }
        Err(Error::Convergence(format!(
            "product integral on [{s1}, {s2}] did not settle within {} steps",
            1 << 17
        )))
    }

    /// `P(X(s) = j)` for a patient starting in state 0 at `s = 0`.
    pub fn state_occupation(&self, state: StateId, s: f64, group: Group) -> Result<f64> {
        if state >= self.states {
            return Err(Error::InvalidState(state));
        }
        let p = self.transition_matrix(0.0, s, group)?;
        Ok(p[(0, state)].clamp(0.0, 1.0))
    }

    /// Occupation distributions from state 0 at each point of an increasing grid
    /// that starts at 0.
    pub fn occupation_table(&self, group: Group, grid: &[f64]) -> Result<OccupationTable> {
        if grid.first().copied() != Some(0.0) {
            return Err(Error::arg("occupation grid must start at 0"));
        }
        let mut row = DVector::<f64>::zeros(self.states);
        row[0] = 1.0;
        let mut probs = Vec::with_capacity(grid.len());
        probs.push(row.iter().copied().collect::<Vec<_>>());
        let homogeneous = self.common_shape == Some(1.0);
        let mut cached: Option<(f64, DMatrix<f64>)> = None;
        for w in grid.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b < a {
                return Err(Error::arg("occupation grid must be nondecreasing"));
            }
            let step = if homogeneous {
                match &cached {
                    Some((len, m)) if (len - (b - a)).abs() <= 1e-14 * len.max(1.0) => m.clone(),
                    _ => {
                        let m = self.transition_matrix(a, b, group)?;
                        cached = Some((b - a, m.clone()));
                        m
                    }
                }
            } else {
                self.transition_matrix(a, b, group)?
            };
            row = step.transpose() * row;
            probs.push(row.iter().copied().collect());
        }
        Ok(OccupationTable {
            grid: grid.to_vec(),
            probs,
        })
    }

    /// `P(T^E <= s)` for the first entry into `event`.
    pub fn hitting_cdf(&self, event: &[StateId], s: f64, group: Group) -> Result<f64> {
        let absorbed = self.with_absorbing(event)?;
        let p = absorbed.transition_matrix(0.0, s, group)?;
        Ok(event.iter().map(|&k| p[(0, k)]).sum::<f64>().clamp(0.0, 1.0))
    }

    /// Expected share of recruited patients with an observed first entry into
    /// `event` by calendar time `t`, under uniform recruitment on `[0, a]` and
    /// the plan's allocation between groups.
    pub fn expected_event_fraction(
        &self,
        event: &[StateId],
        t: f64,
        plan: &AccrualPlan,
    ) -> Result<f64> {
        plan.check()?;
        if event.is_empty() || event.contains(&0) {
            return Err(Error::arg("event must be a nonempty set of states excluding 0"));
        }
        if t <= 0.0 {
            return Ok(0.0);
        }
        let absorbed = self.with_absorbing(event)?;
        let cells = 4000;
        let grid: Vec<f64> = (0..=cells).map(|i| t * i as f64 / cells as f64).collect();
        let lo = (t - plan.duration).max(0.0);
        let mut total = 0.0;
        for (group, share) in [
            (Group::Control, 1.0 - plan.allocation),
            (Group::Treatment, plan.allocation),
        ] {
            let table = absorbed.occupation_table(group, &grid)?;
            let cdf: Vec<f64> = table
                .probs
                .iter()
                .map(|p| event.iter().map(|&k| p[k]).sum())
                .collect();
            // ∫_{lo}^{t} F(v) dv with a partial first cell at lo
            let mut integral = 0.0;
            for i in 0..cells {
                let (a, b) = (grid[i], grid[i + 1]);
                if b <= lo {
                    continue;
                }
                let (fa, fb) = (cdf[i], cdf[i + 1]);
                let start = a.max(lo);
                let f_start = fa + (fb - fa) * (start - a) / (b - a);
                integral += 0.5 * (f_start + fb) * (b - start);
            }
            total += share * integral / plan.duration;
        }
        Ok(total)
    }

    /// Samples one patient path from state 0 on `[0, horizon]`.
    pub fn sample_path<R: Rng + ?Sized>(
        &self,
        group: Group,
        horizon: f64,
        rng: &mut R,
    ) -> Result<PatientPath> {
        if !(horizon > 0.0) {
            return Err(Error::arg(format!("horizon must be positive, got {horizon}")));
        }
        let mut jumps = Vec::new();
        let mut state = 0;
        let mut s = 0.0;
        loop {
            if self.is_absorbing(state) {
                break;
            }
            let target: f64 = rng.sample(Exp1);
            let Some(next) = self.jump_time(state, s, target, horizon, group)? else {
                break;
            };
            let u: f64 = rng.random();
            let to = self.pick_destination(state, next, group, u);
            jumps.push(Jump { s: next, to });
            state = to;
            s = next;
        }
        Ok(PatientPath { jumps })
    }

    /// Solves `Σ_k Λ^{jk}(s, x) = target` for `x`, or `None` past the horizon.
    fn jump_time(
        &self,
        state: StateId,
        s: f64,
        target: f64,
        horizon: f64,
        group: Group,
    ) -> Result<Option<f64>> {
        let out: Vec<&TransitionIntensity> = self.outgoing(state).collect();
        let total = |x: f64| out.iter().map(|t| t.cumulative(s, x, group)).sum::<f64>();
        if total(horizon) < target {
            return Ok(None);
        }
        if let Some(gamma) = self.common_shape {
            let c: f64 = out.iter().map(|t| t.scale(group)).sum();
            let x = if gamma == 1.0 {
                s + target / c
            } else {
                (s.powf(gamma) + gamma * target / c).powf(1.0 / gamma)
            };
            return Ok(Some(x.min(horizon)));
        }
        let rate = |x: f64| out.iter().map(|t| t.rate_at(x, group)).sum::<f64>();
        let (mut lo, mut hi) = (s, horizon);
        let mut x = 0.5 * (lo + hi);
        for _ in 0..400 {
            let f = total(x) - target;
            if f.abs() <= 1e-15 * target.max(1.0) {
                return Ok(Some(x));
            }
            if f > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            if hi - lo <= 1e-12 * hi.max(1e-300) {
                return Ok(Some(0.5 * (lo + hi)));
            }
            let r = rate(x);
            let newton = x - f / r;
            x = if r.is_finite() && r > 0.0 && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
        }
        Err(Error::Convergence(format!(
            "sojourn inversion from state {state} at s = {s} stalled in [{lo}, {hi}]"
        )))
    }

    fn pick_destination(&self, state: StateId, x: f64, group: Group, u: f64) -> StateId {
        let weights: Vec<(StateId, f64)> = if self.common_shape.is_some() {
            self.outgoing(state).map(|t| (t.to, t.scale(group))).collect()
        } else {
            self.outgoing(state).map(|t| (t.to, t.rate_at(x, group))).collect()
        };
        let sum: f64 = weights.iter().map(|w| w.1).sum();
        let mut acc = 0.0;
        for &(to, w) in &weights {
            acc += w / sum;
            if u < acc {
                return to;
            }
        }
        weights.last().expect("non-absorbing state").0
    }
}

/// Occupation probabilities from state 0 on a fixed grid: `probs[i][j] = P(X(grid[i]) = j)`.
#[derive(Clone, Debug)]
pub struct OccupationTable {
    pub grid: Vec<f64>,
    pub probs: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jump {
    pub s: f64,
    pub to: StateId,
}

/// Jump times and target states of one patient; the path starts in state 0.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PatientPath {
    pub jumps: Vec<Jump>,
}

impl PatientPath {
    pub fn new(jumps: Vec<Jump>) -> Self {
        Self { jumps }
    }

    /// State at `s` (right-continuous).
    pub fn state_at(&self, s: f64) -> StateId {
        self.jumps
            .iter()
            .take_while(|j| j.s <= s)
            .last()
            .map_or(0, |j| j.to)
    }

    /// Left limit `X(s-)`.
    pub fn state_before(&self, s: f64) -> StateId {
        self.jumps
            .iter()
            .take_while(|j| j.s < s)
            .last()
            .map_or(0, |j| j.to)
    }

    /// Transitions as `(from, to, s)` triples.
    pub fn transitions(&self) -> impl Iterator<Item = (StateId, StateId, f64)> + '_ {
        let mut from = 0;
        self.jumps.iter().map(move |j| {
            let t = (from, j.to, j.s);
            from = j.to;
            t
        })
    }

    /// Checks the path against a model: increasing times and known transitions.
    pub fn check(&self, model: &MultiStateModel) -> Result<()> {
        let mut prev = 0.0;
        for (from, to, s) in self.transitions() {
            if !(s > prev) {
                return Err(Error::arg(format!("jump times must be strictly increasing (s = {s})")));
            }
            model.transition_index(from, to)?;
            prev = s;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccrualPlan {
    /// Accrual duration `a`.
    pub duration: f64,
    /// Follow-up after the end of accrual.
    #[serde(default)]
    pub follow_up: f64,
    /// Patients recruited per time unit.
    #[serde(default)]
    pub rate: f64,
    /// Share of patients allocated to the treatment group.
    #[serde(default = "half")]
    pub allocation: f64,
}

fn half() -> f64 {
    0.5
}

impl AccrualPlan {
    pub fn new(duration: f64, follow_up: f64) -> Self {
        Self {
            duration,
            follow_up,
            rate: 0.0,
            allocation: 0.5,
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::arg("accrual duration must be positive"));
        }
        if !(self.follow_up >= 0.0) {
            return Err(Error::arg("follow-up must be nonnegative"));
        }
        if !(self.rate >= 0.0) {
            return Err(Error::arg("accrual rate must be nonnegative"));
        }
        if !(self.allocation > 0.0 && self.allocation < 1.0) {
            return Err(Error::arg("allocation must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn group_share(&self, group: Group) -> f64 {
        match group {
            Group::Control => 1.0 - self.allocation,
            Group::Treatment => self.allocation,
        }
    }
}

/// The illness-death model used for PFS/OS examples.
pub fn illness_death(
    (l01, g01): (f64, f64),
    (l02, g02): (f64, f64),
    (l12, g12): (f64, f64),
) -> Result<MultiStateModel> {
    MultiStateModel::new(
        3,
        vec![
            TransitionIntensity::new(0, 1, l01, g01),
            TransitionIntensity::new(0, 2, l02, g02),
            TransitionIntensity::new(1, 2, l12, g12),
        ],
    )
}
