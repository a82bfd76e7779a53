//! Demonstration data model: states, actions, trajectories and demonstration sets.
//!
//! Sets persist as line-delimited JSON, one trajectory record per line:
//!
//! ```text
//! {"version":1,"id":"t0","operator_id":"op","task_id":"nut","success":true,"horizon_limit":200,"states":[[..],..],"actions":[[..],..]}
//! ```
//!
//! Numbers are written in shortest round-trip form, so `load_set(save_set(x)) == x`
//! bit for bit.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RECORD_VERSION: u32 = 1;

/// Observation fed to policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateVector(Vec<f64>);

/// Command issued by a demonstrator or a policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionVector(Vec<f64>);

macro_rules! real_vector {
    ($name:ident, $what:literal) => {
        impl $name {
            /// Wraps `values`, rejecting non-finite entries.
            pub fn new(values: Vec<f64>) -> Result<Self> {
                if let Some(i) = values.iter().position(|v| !v.is_finite()) {
                    return Err(Error::validation(format!(
                        concat!($what, " entry {} is not finite ({})"),
                        i, values[i]
                    )));
                }
                Ok(Self(values))
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.0
            }

            pub fn len(&self) -> usize {
                self.0.len()
            }

            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }

            pub fn into_inner(self) -> Vec<f64> {
                self.0
            }

            pub(crate) fn from_unchecked(values: Vec<f64>) -> Self {
                debug_assert!(values.iter().all(|v| v.is_finite()));
                Self(values)
            }
        }

        impl std::ops::Index<usize> for $name {
            type Output = f64;
            fn index(&self, i: usize) -> &f64 {
                &self.0[i]
            }
        }
    };
}

real_vector!(StateVector, "state");
real_vector!(ActionVector, "action");

/// One (state, action) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub state: StateVector,
    pub action: ActionVector,
}

/// Ordered (state, action) pairs recorded by one operator on one task.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    id: String,
    operator_id: String,
    task_id: String,
    steps: Vec<Step>,
    success: bool,
    horizon_limit: usize,
}

impl Trajectory {
    pub fn new(
        id: impl Into<String>,
        operator_id: impl Into<String>,
        task_id: impl Into<String>,
        steps: Vec<Step>,
        success: bool,
        horizon_limit: usize,
    ) -> Result<Self> {
        let id = id.into();
        if horizon_limit == 0 {
            return Err(Error::validation(format!(
                "trajectory {id}: horizon_limit must be positive"
            )));
        }
        if steps.is_empty() {
            return Err(Error::validation(format!("trajectory {id}: no steps")));
        }
        if steps.len() > horizon_limit {
            return Err(Error::validation(format!(
                "trajectory {id}: {} steps exceed horizon_limit {horizon_limit}",
                steps.len()
            )));
        }
        let (sd, ad) = (steps[0].state.len(), steps[0].action.len());
        if sd == 0 || ad == 0 {
            return Err(Error::validation(format!(
                "trajectory {id}: zero-dimensional state or action"
            )));
        }
        if let Some(i) = steps.iter().position(|s| s.state.len() != sd || s.action.len() != ad) {
            return Err(Error::validation(format!(
                "trajectory {id}: step {i} has dims ({}, {}), expected ({sd}, {ad})",
                steps[i].state.len(),
                steps[i].action.len()
            )));
        }
        Ok(Self {
            id,
            operator_id: operator_id.into(),
            task_id: task_id.into(),
            steps,
            success,
            horizon_limit,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }
    pub fn operator_id(&self) -> &str {
        &self.operator_id
    }
    pub fn task_id(&self) -> &str {
        &self.task_id
    }
    pub fn steps(&self) -> &[Step] {
        &self.steps
    }
    pub fn success(&self) -> bool {
        self.success
    }
    pub fn horizon_limit(&self) -> usize {
        self.horizon_limit
    }
    pub fn len(&self) -> usize {
        self.steps.len()
    }
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
    pub fn state_dim(&self) -> usize {
        self.steps[0].state.len()
    }
    pub fn action_dim(&self) -> usize {
        self.steps[0].action.len()
    }
    pub fn states(&self) -> impl Iterator<Item = &StateVector> {
        self.steps.iter().map(|s| &s.state)
    }

    /// Copy keeping only the steps for which `keep` returns true. `None` if nothing is left.
    pub fn retain_steps(&self, mut keep: impl FnMut(usize, &Step) -> bool) -> Option<Trajectory> {
        let steps: Vec<Step> = self
            .steps
            .iter()
            .enumerate()
            .filter(|(i, s)| keep(*i, s))
            .map(|(_, s)| s.clone())
            .collect();
        if steps.is_empty() {
            return None;
        }
        Some(Trajectory {
            steps,
            ..self.clone_meta()
        })
    }

    /// Same trajectory with every action transformed by `f`.
    pub fn map_actions(&self, mut f: impl FnMut(&ActionVector) -> ActionVector) -> Trajectory {
        let steps = self
            .steps
            .iter()
            .map(|s| Step {
                state: s.state.clone(),
                action: f(&s.action),
            })
            .collect();
        Trajectory {
            steps,
            ..self.clone_meta()
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Trajectory {
        self.id = id.into();
        self
    }

    fn clone_meta(&self) -> Trajectory {
        Trajectory {
            id: self.id.clone(),
            operator_id: self.operator_id.clone(),
            task_id: self.task_id.clone(),
            steps: Vec::new(),
            success: self.success,
            horizon_limit: self.horizon_limit,
        }
    }
}

/// Named collection of trajectories for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct DemonstrationSet {
    name: String,
    task_id: String,
    trajectories: Vec<Trajectory>,
}

impl DemonstrationSet {
    /// Builds a set, checking task ids, dimensions and id uniqueness.
    pub fn new(name: impl Into<String>, task_id: impl Into<String>, trajectories: Vec<Trajectory>) -> Result<Self> {
        let set = Self {
            name: name.into(),
            task_id: task_id.into(),
            trajectories,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn empty(name: impl Into<String>, task_id: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            task_id: task_id.into(),
            trajectories: Vec::new(),
        }
    }

    fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        let dims = self.trajectories.first().map(|t| (t.state_dim(), t.action_dim()));
        for t in &self.trajectories {
            if t.task_id() != self.task_id {
                return Err(Error::validation(format!(
                    "trajectory {}: task_id {:?} does not match set task_id {:?}",
                    t.id(),
                    t.task_id(),
                    self.task_id
                )));
            }
            if Some((t.state_dim(), t.action_dim())) != dims {
                let (sd, ad) = dims.unwrap_or_default();
                return Err(Error::validation(format!(
                    "trajectory {}: dims ({}, {}) differ from set dims ({sd}, {ad})",
                    t.id(),
                    t.state_dim(),
                    t.action_dim()
                )));
            }
            if !ids.insert(t.id()) {
                return Err(Error::validation(format!("duplicate trajectory id {}", t.id())));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn task_id(&self) -> &str {
        &self.task_id
    }
    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }
    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
    pub fn into_trajectories(self) -> Vec<Trajectory> {
        self.trajectories
    }

    /// Total number of (state, action) pairs.
    pub fn pair_count(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    /// `(state_dim, action_dim)`, or `None` for an empty set.
    pub fn dims(&self) -> Option<(usize, usize)> {
        self.trajectories.first().map(|t| (t.state_dim(), t.action_dim()))
    }

    pub fn get(&self, id: &str) -> Option<&Trajectory> {
        self.trajectories.iter().find(|t| t.id() == id)
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Iterates every (state, action) pair in trajectory then step order.
    pub fn pairs(&self) -> impl Iterator<Item = &Step> {
        self.trajectories.iter().flat_map(|t| t.steps().iter())
    }
}

/// Trajectories of `a` followed by those of `b`.
///
/// An empty side imposes no task or dimension constraint.
pub fn union(a: &DemonstrationSet, b: &DemonstrationSet) -> Result<DemonstrationSet> {
    if b.is_empty() {
        return Ok(a.clone());
    }
    let task_id = if a.is_empty() { b.task_id() } else { a.task_id() };
    let mut trajectories = a.trajectories.clone();
    trajectories.extend(b.trajectories.iter().cloned());
    DemonstrationSet::new(a.name(), task_id, trajectories)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryRecord {
    version: u32,
    id: String,
    operator_id: String,
    task_id: String,
    success: bool,
    horizon_limit: usize,
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
}

impl From<&Trajectory> for TrajectoryRecord {
    fn from(t: &Trajectory) -> Self {
        TrajectoryRecord {
            version: RECORD_VERSION,
            id: t.id.clone(),
            operator_id: t.operator_id.clone(),
            task_id: t.task_id.clone(),
            success: t.success,
            horizon_limit: t.horizon_limit,
            states: t.steps.iter().map(|s| s.state.0.clone()).collect(),
            actions: t.steps.iter().map(|s| s.action.0.clone()).collect(),
        }
    }
}

impl TrajectoryRecord {
    fn into_trajectory(self) -> Result<Trajectory> {
        if self.version != RECORD_VERSION {
            return Err(Error::validation(format!(
                "trajectory {}: unsupported record version {}",
                self.id, self.version
            )));
        }
        if self.states.len() != self.actions.len() {
            return Err(Error::validation(format!(
                "trajectory {}: {} states but {} actions",
                self.id,
                self.states.len(),
                self.actions.len()
            )));
        }
        let id = self.id;
        let steps = self
            .states
            .into_iter()
            .zip(self.actions)
            .map(|(s, a)| {
                Ok(Step {
                    state: StateVector::new(s)?,
                    action: ActionVector::new(a)?,
                })
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::validation(format!("trajectory {id}: {e}")))?;
        Trajectory::new(
            id,
            self.operator_id,
            self.task_id,
            steps,
            self.success,
            self.horizon_limit,
        )
    }
}

/// Serialises one trajectory as a single record line (no trailing newline).
pub fn encode_trajectory(t: &Trajectory) -> String {
    serde_json::to_string(&TrajectoryRecord::from(t)).expect("record serialisation is infallible")
}

/// Parses one record line.
pub fn decode_trajectory(line: &str) -> Result<Trajectory> {
    let record: TrajectoryRecord = serde_json::from_str(line)?;
    record.into_trajectory()
}

/// Parses a whole record stream into a set called `name`.
pub fn parse_set(name: &str, text: &str) -> Result<DemonstrationSet> {
    let mut trajectories = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: TrajectoryRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        trajectories.push(record.into_trajectory()?);
    }
    let task_id = trajectories.first().map(|t| t.task_id().to_owned()).unwrap_or_default();
    DemonstrationSet::new(name, task_id, trajectories)
}

/// Serialises a set to the record stream format.
pub fn format_set(set: &DemonstrationSet) -> String {
    let mut out = String::new();
    for t in set.trajectories() {
        out.push_str(&encode_trajectory(t));
        out.push('\n');
    }
    out
}

/// Loads a set from `path`; the set is named after the file stem.
pub fn load_set(path: impl AsRef<Path>) -> Result<DemonstrationSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_set(&name, &text)
}

pub fn save_set(set: &DemonstrationSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in set.trajectories() {
        w.write_all(encode_trajectory(t).as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
