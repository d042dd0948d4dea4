//! Design, simulation and analysis of group-sequential trials whose endpoints
//! are events in a Markovian multi-state model.

pub mod cohort;
pub mod design;
pub mod dist;
pub mod error;
pub mod linalg;
pub mod model;
pub mod report;
pub mod sim;
pub mod stats;

pub use error::{Error, Result};
pub use model::{AccrualPlan, Group, Jump, MultiStateModel, PatientPath, StateId, TransitionIntensity};
