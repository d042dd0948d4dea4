//! Brute-force per-patient evaluation of the score statistics, shared by the
//! oracle and acceptance tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use mstrial::cohort::{Cohort, EventDefinition, EventMode, PatientRecord};
use mstrial::{Group, Jump, PatientPath, StateId};

struct Seen {
    z: f64,
    censor: f64,
    jumps: Vec<Jump>,
}

impl Seen {
    fn new(p: &PatientRecord, t: f64) -> Self {
        let censor = p.dropout.min((t - p.entry).max(0.0));
        Seen {
            z: p.group.z() as f64,
            censor,
            jumps: p.path.jumps.iter().copied().filter(|j| j.s <= censor).collect(),
        }
    }

    fn state_before(&self, s: f64) -> StateId {
        let mut state = 0;
        for j in &self.jumps {
            if j.s < s {
                state = j.to;
            }
        }
        state
    }

    fn moves(&self) -> Vec<(StateId, StateId, f64)> {
        let mut from = 0;
        self.jumps
            .iter()
            .map(|j| {
                let m = (from, j.to, j.s);
                from = j.to;
                m
            })
            .collect()
    }

    fn first_into(&self, set: &[StateId]) -> Option<(StateId, StateId, f64)> {
        self.moves().into_iter().find(|m| set.contains(&m.1))
    }

    fn at_risk(&self, j: StateId, s: f64, restriction: Option<&[StateId]>) -> bool {
        if !(s > 0.0 && s <= self.censor && self.state_before(s) == j) {
            return false;
        }
        match restriction {
            None => true,
            Some(set) => self.first_into(set).is_none_or(|(_, _, h)| s <= h),
        }
    }
}

fn share(all: &[Seen], j: StateId, s: f64, restriction: Option<&[StateId]>) -> f64 {
    let (mut y, mut y1) = (0.0, 0.0);
    for p in all {
        if p.at_risk(j, s, restriction) {
            y += 1.0;
            y1 += p.z;
        }
    }
    assert!(y > 0.0);
    y1 / y
}

/// Direct enumeration of `U(t)` and `V̂(t)` with unit weights.
pub fn enumerate(cohort: &Cohort, events: &[EventDefinition], t: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let all: Vec<Seen> = cohort.patients.iter().map(|p| Seen::new(p, t)).collect();
    let d = events.len();
    let mut u = vec![0.0; d];
    let mut v = vec![vec![0.0; d]; d];
    let first_hitting = events[0].mode == EventMode::FirstHitting;
    for p in &all {
        for b in 0..d {
            let eb = &events[b].states;
            if first_hitting {
                if let Some((j, _, s)) = p.first_into(eb) {
                    u[b] += p.z - share(&all, j, s, Some(eb));
                }
            } else {
                for (j, k, s) in p.moves() {
                    if !eb.contains(&j) && eb.contains(&k) {
                        u[b] += p.z - share(&all, j, s, None);
                    }
                }
            }
            for c in 0..d {
                let ec = &events[c].states;
                if first_hitting {
                    let mut union = eb.clone();
                    union.extend(ec.iter().filter(|x| !eb.contains(x)));
                    if let Some((j, k, s)) = p.first_into(&union) {
                        if eb.contains(&k) && ec.contains(&k) {
                            let pb = share(&all, j, s, Some(eb));
                            let pc = share(&all, j, s, Some(ec));
                            let pu = share(&all, j, s, Some(&union));
                            v[b][c] += pu * (1.0 - pb) * (1.0 - pc) + (1.0 - pu) * pb * pc;
                        }
                    }
                } else {
                    for (j, k, s) in p.moves() {
                        if eb.contains(&k) && ec.contains(&k) && !eb.contains(&j) && !ec.contains(&j) {
                            let q = share(&all, j, s, None);
                            v[b][c] += q * (1.0 - q);
                        }
                    }
                }
            }
        }
    }
    let n = cohort.len() as f64;
    (
        u.iter().map(|x| x / n.sqrt()).collect(),
        v.iter().map(|r| r.iter().map(|x| x / n).collect()).collect(),
    )
}

pub fn random_cohort(rng: &mut ChaCha8Rng, ties: bool) -> Cohort {
    let n = rng.random_range(1..=20);
    let snap = |x: f64| if ties { (x * 2.0).ceil() / 2.0 } else { x };
    let patients = (0..n)
        .map(|i| {
            let mut state = 0;
            let mut s = 0.0;
            let mut jumps = Vec::new();
            for _ in 0..rng.random_range(0..4) {
                s = snap(s + 0.05 + rng.random::<f64>() * 2.0);
                let mut to = rng.random_range(0..4);
                while to == state {
                    to = rng.random_range(0..4);
                }
                jumps.push(Jump { s, to });
                state = to;
            }
            PatientRecord {
                id: i.to_string(),
                entry: snap(rng.random::<f64>() * 3.0),
                group: if rng.random_bool(0.5) { Group::Treatment } else { Group::Control },
                dropout: if rng.random_bool(0.3) { snap(0.5 + rng.random::<f64>() * 5.0) } else { f64::INFINITY },
                path: PatientPath::new(jumps),
            }
        })
        .collect();
    Cohort::new(patients)
}

pub fn random_events(rng: &mut ChaCha8Rng) -> Vec<EventDefinition> {
    let mode = if rng.random_bool(0.5) { EventMode::FirstHitting } else { EventMode::AllEntries };
    (0..rng.random_range(1..=3))
        .map(|_| {
            let mut states: Vec<StateId> = (1..4).filter(|_| rng.random_bool(0.5)).collect();
            if states.is_empty() {
                states.push(rng.random_range(1..4));
            }
            EventDefinition::new(&states, mode)
        })
        .collect()
}
