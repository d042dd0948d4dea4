//! Trial data on the calendar and trial time scales, administrative
//! censoring, and the at-risk counts consumed by the test statistics.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Group, Jump, MultiStateModel, PatientPath, StateId};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventMode {
    /// Only the first entry into the event set counts.
    #[default]
    FirstHitting,
    /// Every transition into the event set counts.
    AllEntries,
}

/// A composite event: entry into any state of `states`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventDefinition {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub name: String,
    pub states: Vec<StateId>,
    #[serde(default)]
    pub mode: EventMode,
}

impl EventDefinition {
    pub fn new(states: &[StateId], mode: EventMode) -> Self {
        let mut states = states.to_vec();
        states.sort_unstable();
        states.dedup();
        Self {
            name: String::new(),
            states,
            mode,
        }
    }

    pub fn first_hitting(states: &[StateId]) -> Self {
        Self::new(states, EventMode::FirstHitting)
    }

    pub fn all_entries(states: &[StateId]) -> Self {
        Self::new(states, EventMode::AllEntries)
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn contains(&self, state: StateId) -> bool {
        self.states.contains(&state)
    }

    pub fn check(&self, state_count: Option<usize>) -> Result<()> {
        if self.states.is_empty() {
            return Err(Error::arg("event must contain at least one state"));
        }
        if self.contains(0) {
            return Err(Error::arg("the initial state 0 cannot be part of an event"));
        }
        if let Some(n) = state_count {
            if let Some(&bad) = self.states.iter().find(|&&s| s >= n) {
                return Err(Error::InvalidState(bad));
            }
        }
        Ok(())
    }

    pub fn union(&self, other: &EventDefinition) -> EventDefinition {
        let mut states = self.states.clone();
        states.extend_from_slice(&other.states);
        EventDefinition::new(&states, self.mode)
    }

    /// The illness-death PFS event `{1, 2}`.
    pub fn pfs() -> Self {
        Self::first_hitting(&[1, 2]).named("PFS")
    }

    /// The illness-death OS event `{2}`.
    pub fn os() -> Self {
        Self::first_hitting(&[2]).named("OS")
    }
}

/// Checks that a list of events is nonempty and uses a single mode.
pub fn common_mode(events: &[EventDefinition]) -> Result<EventMode> {
    let first = events.first().ok_or_else(|| Error::arg("at least one event is required"))?;
    if events.iter().any(|e| e.mode != first.mode) {
        return Err(Error::MixedEventModes);
    }
    for e in events {
        e.check(None)?;
    }
    Ok(first.mode)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    /// Calendar time of recruitment `R`.
    pub entry: f64,
    pub group: Group,
    /// Dropout time `C̃` on the trial time scale (`∞` if none).
    pub dropout: f64,
    pub path: PatientPath,
}

impl PatientRecord {
    /// Censoring time `C(t) = C̃ ∧ (t − R)₊`.
    pub fn censor_time(&self, t: f64) -> f64 {
        self.dropout.min((t - self.entry).max(0.0))
    }

    pub fn observe_at(&self, t: f64) -> ObservedRecord {
        let censor = self.censor_time(t);
        ObservedRecord {
            id: self.id.clone(),
            entry: self.entry,
            group: self.group,
            censor,
            jumps: self
                .path
                .jumps
                .iter()
                .copied()
                .filter(|j| j.s <= censor)
                .collect(),
        }
    }
}

/// A record as seen at one calendar time: jumps up to the censoring time.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservedRecord {
    pub id: String,
    pub entry: f64,
    pub group: Group,
    pub censor: f64,
    pub jumps: Vec<Jump>,
}

impl ObservedRecord {
    pub fn to_record(&self) -> PatientRecord {
        PatientRecord {
            id: self.id.clone(),
            entry: self.entry,
            group: self.group,
            dropout: self.censor,
            path: PatientPath::new(self.jumps.clone()),
        }
    }

    pub fn z(&self) -> f64 {
        self.group.z() as f64
    }

    /// Observed transitions as `(from, to, s)`.
    pub fn transitions(&self) -> impl Iterator<Item = (StateId, StateId, f64)> + '_ {
        let mut from = 0;
        self.jumps.iter().map(move |j| {
            let t = (from, j.to, j.s);
            from = j.to;
            t
        })
    }

    /// Sojourns `(state, start, end)` on `(start, end]` within `[0, censor]`.
    pub fn sojourns(&self) -> Vec<(StateId, f64, f64)> {
        let mut out = Vec::with_capacity(self.jumps.len() + 1);
        let mut state = 0;
        let mut start = 0.0;
        for j in &self.jumps {
            out.push((state, start, j.s));
            state = j.to;
            start = j.s;
        }
        if self.censor > start {
            out.push((state, start, self.censor));
        }
        out
    }

    /// First observed entry into `states`, with the transition that made it.
    pub fn first_entry(&self, states: &[StateId]) -> Option<(StateId, StateId, f64)> {
        self.transitions()
            .find(|&(from, to, _)| !states.contains(&from) && states.contains(&to))
    }

    pub fn hitting_time(&self, event: &EventDefinition) -> Option<f64> {
        self.first_entry(&event.states).map(|(_, _, s)| s)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub patients: Vec<PatientRecord>,
}

impl Cohort {
    pub fn new(patients: Vec<PatientRecord>) -> Self {
        Self { patients }
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn observe_at(&self, t: f64) -> Vec<ObservedRecord> {
        self.patients.iter().map(|p| p.observe_at(t)).collect()
    }

    /// The same cohort with treatment labels swapped.
    pub fn with_flipped_groups(&self) -> Self {
        let mut c = self.clone();
        for p in &mut c.patients {
            p.group = p.group.flipped();
        }
        c
    }

    /// Checks every path against a model.
    pub fn check_against(&self, model: &MultiStateModel) -> Result<()> {
        for p in &self.patients {
            p.path
                .check(model)
                .map_err(|e| Error::arg(format!("patient {}: {e}", p.id)))?;
        }
        Ok(())
    }

    /// Reads a transitions CSV plus an optional roster CSV.
    ///
    /// Patients listed in the roster come first, in roster order, followed by
    /// patients that only appear in the transitions file.
    pub fn load(transitions: impl AsRef<Path>, roster: Option<&Path>) -> Result<Self> {
        let t = std::fs::read_to_string(transitions)?;
        let r = match roster {
            Some(p) => Some(std::fs::read_to_string(p)?),
            None => None,
        };
        Self::from_csv_strs(&t, r.as_deref())
    }

    pub fn save(&self, transitions: impl AsRef<Path>, roster: impl AsRef<Path>) -> Result<()> {
        let (t, r) = self.to_csv_strings()?;
        std::fs::write(transitions, t)?;
        std::fs::write(roster, r)?;
        Ok(())
    }

    pub fn to_csv_strings(&self) -> Result<(String, String)> {
        let mut tw = csv::Writer::from_writer(Vec::new());
        let mut rw = csv::Writer::from_writer(Vec::new());
        for p in &self.patients {
            let ctilde = p.dropout.is_finite().then_some(p.dropout);
            rw.serialize(RosterRow {
                patient_id: p.id.clone(),
                entry: p.entry,
                z: p.group.z(),
                ctilde,
            })?;
            for (from, to, s) in p.path.transitions() {
                tw.serialize(TransitionRow {
                    patient_id: p.id.clone(),
                    entry: p.entry,
                    z: p.group.z(),
                    ctilde,
                    from_state: from,
                    to_state: to,
                    s,
                })?;
            }
        }
        // header rows must exist even for an empty file
        let finish = |w: csv::Writer<Vec<u8>>, header: &str| -> Result<String> {
            let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
            let text = String::from_utf8(bytes).expect("csv output is utf-8");
            Ok(if text.is_empty() { format!("{header}\n") } else { text })
        };
        Ok((
            finish(tw, "patient_id,R,Z,Ctilde,from_state,to_state,s")?,
            finish(rw, "patient_id,R,Z,Ctilde")?,
        ))
    }

    pub fn from_csv_strs(transitions: &str, roster: Option<&str>) -> Result<Self> {
        let mut order: Vec<String> = Vec::new();
        let mut by_id: HashMap<String, PatientRecord> = HashMap::new();

        if let Some(text) = roster {
            let mut rdr = csv::Reader::from_reader(text.as_bytes());
            let headers = rdr.headers()?.clone();
            for rec in rdr.records() {
                let rec = rec?;
                let line = rec.position().map_or(0, |p| p.line() as usize);
                let row: RosterRow = rec
                    .deserialize(Some(&headers))
                    .map_err(|e| Error::Parse { line, msg: e.to_string() })?;
                let patient = row.to_record(line)?;
                if by_id.contains_key(&patient.id) {
                    return Err(Error::Parse {
                        line,
                        msg: format!("patient {} listed twice in roster", patient.id),
                    });
                }
                order.push(patient.id.clone());
                by_id.insert(patient.id.clone(), patient);
            }
        }

        let mut rdr = csv::Reader::from_reader(transitions.as_bytes());
        let headers = rdr.headers()?.clone();
        let mut seen: HashSet<(String, u64)> = HashSet::new();
        let mut last_state: HashMap<String, StateId> = HashMap::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let row: TransitionRow = rec
                .deserialize(Some(&headers))
                .map_err(|e| Error::Parse { line, msg: e.to_string() })?;
            let parse_err = |msg: String| Error::Parse { line, msg };
            if !(row.s > 0.0 && row.s.is_finite()) {
                return Err(parse_err(format!("transition time must be positive, got {}", row.s)));
            }
            if !seen.insert((row.patient_id.clone(), row.s.to_bits())) {
                return Err(parse_err(format!(
                    "duplicate transition time {} for patient {}",
                    row.s, row.patient_id
                )));
            }
            let header = RosterRow {
                patient_id: row.patient_id.clone(),
                entry: row.entry,
                z: row.z,
                ctilde: row.ctilde,
            }
            .to_record(line)?;
            let patient = by_id.entry(row.patient_id.clone()).or_insert_with(|| {
                order.push(row.patient_id.clone());
                header.clone()
            });
            if patient.entry != header.entry
                || patient.group != header.group
                || patient.dropout != header.dropout
            {
                return Err(parse_err(format!(
                    "R, Z or Ctilde of patient {} differ from earlier rows",
                    row.patient_id
                )));
            }
            if let Some(prev) = patient.path.jumps.last() {
                if row.s <= prev.s {
                    return Err(parse_err(format!(
                        "transition times of patient {} are not increasing ({} after {})",
                        row.patient_id, row.s, prev.s
                    )));
                }
            }
            let current = last_state.get(&row.patient_id).copied().unwrap_or(0);
            if row.from_state != current {
                return Err(parse_err(format!(
                    "patient {} leaves state {} but is in state {}",
                    row.patient_id, row.from_state, current
                )));
            }
            if row.from_state == row.to_state {
                return Err(parse_err("from_state and to_state are equal".into()));
            }
            patient.path.jumps.push(Jump {
                s: row.s,
                to: row.to_state,
            });
            last_state.insert(row.patient_id.clone(), row.to_state);
        }

        let patients = order
            .into_iter()
            .map(|id| by_id.remove(&id).expect("ordered id present"))
            .collect();
        Ok(Cohort { patients })
    }
}

#[derive(Serialize, Deserialize)]
struct RosterRow {
    patient_id: String,
    #[serde(rename = "R")]
    entry: f64,
    #[serde(rename = "Z")]
    z: u8,
    #[serde(rename = "Ctilde")]
    ctilde: Option<f64>,
}

impl RosterRow {
    fn to_record(&self, line: usize) -> Result<PatientRecord> {
        let group = Group::from_z(self.z).map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        if !(self.entry >= 0.0 && self.entry.is_finite()) {
            return Err(Error::Parse {
                line,
                msg: format!("entry time R must be finite and nonnegative, got {}", self.entry),
            });
        }
        let dropout = self.ctilde.unwrap_or(f64::INFINITY);
        if !(dropout > 0.0) {
            return Err(Error::Parse {
                line,
                msg: format!("Ctilde must be positive, got {dropout}"),
            });
        }
        Ok(PatientRecord {
            id: self.patient_id.clone(),
            entry: self.entry,
            group,
            dropout,
            path: PatientPath::default(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct TransitionRow {
    patient_id: String,
    #[serde(rename = "R")]
    entry: f64,
    #[serde(rename = "Z")]
    z: u8,
    #[serde(rename = "Ctilde")]
    ctilde: Option<f64>,
    from_state: StateId,
    to_state: StateId,
    s: f64,
}

/// Counts of intervals `(a, b]` containing a query point.
#[derive(Clone, Debug, Default)]
struct IntervalCounter {
    starts: Vec<f64>,
    ends: Vec<f64>,
}

impl IntervalCounter {
    fn push(&mut self, a: f64, b: f64) {
        self.starts.push(a);
        self.ends.push(b);
    }

    fn finish(&mut self) {
        self.starts.sort_by(f64::total_cmp);
        self.ends.sort_by(f64::total_cmp);
    }

    /// `#{a < s ≤ b}`.
    fn count(&self, s: f64) -> usize {
        self.starts.partition_point(|&a| a < s) - self.ends.partition_point(|&b| b < s)
    }
}

/// At-risk counts `Y^{j→R}(t, s)` and their treatment-group parts for a fixed
/// calendar time and a list of restricting state sets.
///
/// Restriction `None` gives the unrestricted `Y^j`; a restriction `R` keeps a
/// patient only while `s ≤ T^R`.
#[derive(Clone, Debug)]
pub struct RiskIndex {
    restrictions: Vec<Option<Vec<StateId>>>,
    // [restriction][state][group]
    counters: Vec<Vec<[IntervalCounter; 2]>>,
}

impl RiskIndex {
    pub fn build(
        records: &[ObservedRecord],
        state_count: usize,
        restrictions: Vec<Option<Vec<StateId>>>,
    ) -> Self {
        let mut counters: Vec<Vec<[IntervalCounter; 2]>> = restrictions
            .iter()
            .map(|_| vec![Default::default(); state_count])
            .collect();
        for rec in records {
            let g = rec.group.index();
            let sojourns = rec.sojourns();
            for (ri, restriction) in restrictions.iter().enumerate() {
                let stop = match restriction {
                    None => f64::INFINITY,
                    Some(states) => rec
                        .first_entry(states)
                        .map_or(f64::INFINITY, |(_, _, s)| s),
                };
                for &(state, a, b) in &sojourns {
                    if a < stop && state < state_count {
                        counters[ri][state][g].push(a, b.min(stop));
                    }
                }
            }
        }
        for per_restriction in &mut counters {
            for per_state in per_restriction {
                for c in per_state {
                    c.finish();
                }
            }
        }
        Self {
            restrictions,
            counters,
        }
    }

    pub fn restriction_index(&self, restriction: Option<&[StateId]>) -> Option<usize> {
        self.restrictions
            .iter()
            .position(|r| r.as_deref() == restriction)
    }

    /// `(Y, Y^{Z=1})` at trial time `s` for restriction `ri` and state `j`.
    pub fn counts(&self, ri: usize, state: StateId, s: f64) -> (usize, usize) {
        let c = &self.counters[ri][state];
        let treated = c[1].count(s);
        (c[0].count(s) + treated, treated)
    }

    /// Treatment share `Y^{Z=1}/Y`, or `None` when nobody is at risk.
    pub fn treated_share(&self, ri: usize, state: StateId, s: f64) -> Option<f64> {
        let (y, y1) = self.counts(ri, state, s);
        (y > 0).then(|| y1 as f64 / y as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RiskSetSnapshot {
    pub s: f64,
    /// `Y^j` per state.
    pub at_risk: Vec<usize>,
    /// `Y^{j,Z=1}` per state.
    pub at_risk_treated: Vec<usize>,
    /// `Y^{j→E}` per event, then per state.
    pub event_at_risk: Vec<Vec<usize>>,
    /// `Y^{j→E,Z=1}` per event, then per state.
    pub event_at_risk_treated: Vec<Vec<usize>>,
}

/// At-risk counts at every distinct observed transition time at calendar `t`.
pub fn risk_sets(cohort: &Cohort, events: &[EventDefinition], t: f64) -> Vec<RiskSetSnapshot> {
    let records = cohort.observe_at(t);
    let mut state_count = 1;
    for r in &records {
        for j in &r.jumps {
            state_count = state_count.max(j.to + 1);
        }
    }
    for e in events {
        for &s in &e.states {
            state_count = state_count.max(s + 1);
        }
    }
    let mut restrictions = vec![None];
    restrictions.extend(events.iter().map(|e| Some(e.states.clone())));
    let index = RiskIndex::build(&records, state_count, restrictions);

    let mut times: Vec<f64> = records
        .iter()
        .flat_map(|r| r.jumps.iter().map(|j| j.s))
        .collect();
    times.sort_by(f64::total_cmp);
    times.dedup();

    times
        .into_iter()
        .map(|s| {
            let split = |ri: usize| -> (Vec<usize>, Vec<usize>) {
                (0..state_count).map(|j| index.counts(ri, j, s)).unzip()
            };
            let (at_risk, at_risk_treated) = split(0);
            let (event_at_risk, event_at_risk_treated) =
                (1..=events.len()).map(split).unzip();
            RiskSetSnapshot {
                s,
                at_risk,
                at_risk_treated,
                event_at_risk,
                event_at_risk_treated,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(entry: f64, dropout: f64, jumps: &[(f64, StateId)]) -> PatientRecord {
        PatientRecord {
            id: "p".into(),
            entry,
            group: Group::Treatment,
            dropout,
            path: PatientPath::new(jumps.iter().map(|&(s, to)| Jump { s, to }).collect()),
        }
    }

    #[test]
    fn administrative_censoring() {
        let obs = record(1.0, f64::INFINITY, &[(3.0, 1)]).observe_at(2.0);
        assert_eq!(obs.censor, 1.0);
        assert!(obs.jumps.is_empty());
        assert_eq!(obs.sojourns(), vec![(0, 0.0, 1.0)]);
    }

    #[test]
    fn dropout_dominates() {
        let obs = record(0.0, 2.0, &[(1.0, 1), (3.0, 2)]).observe_at(10.0);
        assert_eq!(obs.censor, 2.0);
        assert_eq!(obs.jumps, vec![Jump { s: 1.0, to: 1 }]);
    }

    #[test]
    fn not_yet_recruited() {
        let obs = record(2.6, f64::INFINITY, &[(0.1, 1)]).observe_at(2.5);
        assert_eq!(obs.censor, 0.0);
        assert!(obs.jumps.is_empty());
        assert!(obs.sojourns().is_empty());
    }

    #[test]
    fn observation_is_idempotent() {
        let r = record(0.5, 4.0, &[(1.0, 1), (3.0, 2)]);
        let once = r.observe_at(3.0);
        assert_eq!(once.to_record().observe_at(3.0), once);
    }

    #[test]
    fn hitting_times() {
        let obs = record(0.0, f64::INFINITY, &[(1.0, 1), (4.0, 2)]).observe_at(10.0);
        assert_eq!(obs.hitting_time(&EventDefinition::os()), Some(4.0));
        assert_eq!(obs.hitting_time(&EventDefinition::pfs()), Some(1.0));
        let censored = record(0.0, 0.5, &[(1.0, 1)]).observe_at(10.0);
        assert_eq!(censored.hitting_time(&EventDefinition::pfs()), None);
    }

    #[test]
    fn all_in_initial_state() {
        let patients: Vec<_> = (0..4)
            .map(|i| {
                let mut r = record(0.0, 1.0 + i as f64, &[]);
                r.id = i.to_string();
                r
            })
            .collect();
        let records = Cohort::new(patients).observe_at(10.0);
        let index = RiskIndex::build(&records, 3, vec![None]);
        assert_eq!(index.counts(0, 0, 0.5), (4, 4));
        assert_eq!(index.counts(0, 0, 1.0), (4, 4));
        assert_eq!(index.counts(0, 0, 1.5), (3, 3));
    }

    #[test]
    fn left_limit_convention() {
        let c = Cohort::new(vec![record(0.0, 5.0, &[(1.0, 1)])]);
        let records = c.observe_at(10.0);
        let index = RiskIndex::build(&records, 3, vec![None, Some(vec![1, 2])]);
        assert_eq!(index.counts(0, 0, 1.0).0, 1);
        assert_eq!(index.counts(0, 1, 1.0).0, 0);
        assert_eq!(index.counts(0, 1, 1.5).0, 1);
        assert_eq!(index.counts(0, 1, 5.0).0, 1);
        assert_eq!(index.counts(0, 1, 5.1).0, 0);
        assert_eq!(index.counts(1, 0, 1.0).0, 1);
        assert_eq!(index.counts(1, 0, 1.2).0, 0);
        assert_eq!(index.counts(1, 1, 2.0).0, 0);
    }

    #[test]
    fn csv_schema_example() {
        let t = "patient_id,R,Z,Ctilde,from_state,to_state,s\n1,0.5,1,,0,1,1.2\n";
        let c = Cohort::from_csv_strs(t, None).unwrap();
        assert_eq!(c.len(), 1);
        let p = &c.patients[0];
        assert_eq!(p.id, "1");
        assert_eq!(p.group, Group::Treatment);
        assert_eq!(p.dropout, f64::INFINITY);
        assert_eq!(p.path.jumps, vec![Jump { s: 1.2, to: 1 }]);
    }

    #[test]
    fn csv_rejections_carry_line_numbers() {
        let dup = "patient_id,R,Z,Ctilde,from_state,to_state,s\n1,0,0,,0,1,1.0\n1,0,0,,1,2,1.0\n";
        assert!(matches!(
            Cohort::from_csv_strs(dup, None),
            Err(Error::Parse { line: 3, .. })
        ));
        let backwards = "patient_id,R,Z,Ctilde,from_state,to_state,s\n1,0,0,,0,1,2.0\n1,0,0,,1,2,1.0\n";
        assert!(matches!(
            Cohort::from_csv_strs(backwards, None),
            Err(Error::Parse { line: 3, .. })
        ));
        let broken_chain = "patient_id,R,Z,Ctilde,from_state,to_state,s\n1,0,0,,0,1,1.0\n1,0,0,,0,2,2.0\n";
        assert!(Cohort::from_csv_strs(broken_chain, None).is_err());
        let bad_group = "patient_id,R,Z,Ctilde,from_state,to_state,s\n1,0,2,,0,1,1.0\n";
        assert!(matches!(
            Cohort::from_csv_strs(bad_group, None),
            Err(Error::Parse { line: 2, .. })
        ));
        let mismatch = "patient_id,R,Z,Ctilde,from_state,to_state,s\n1,0,0,,0,1,1.0\n1,0,1,,1,2,2.0\n";
        assert!(Cohort::from_csv_strs(mismatch, None).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let mut a = record(0.1, f64::INFINITY, &[(0.3, 1), (1.0 / 3.0, 2)]);
        a.id = "a".into();
        let mut b = record(2.0, 0.7, &[]);
        b.id = "b".into();
        b.group = Group::Control;
        let c = Cohort::new(vec![b, a]);
        let (t, r) = c.to_csv_strings().unwrap();
        let back = Cohort::from_csv_strs(&t, Some(&r)).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn mixed_modes_rejected() {
        let events = [EventDefinition::pfs(), EventDefinition::all_entries(&[2])];
        assert!(matches!(common_mode(&events), Err(Error::MixedEventModes)));
    }
}
