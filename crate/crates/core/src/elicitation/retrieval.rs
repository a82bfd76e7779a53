use crate::demo::{DemonstrationSet, StateVector};
use crate::error::{Error, Result};

fn l2(a: &StateVector, b: &StateVector) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean over `candidate_states` of the distance to the nearest state in each
/// base trajectory, minimised over trajectories. Earlier trajectories win ties.
pub fn retrieve_similar(base: &DemonstrationSet, candidate_states: &[StateVector]) -> Result<String> {
    let mut best: Option<(f64, &str)> = None;
    for traj in base.trajectories() {
        let total: f64 = candidate_states
            .iter()
            .map(|c| traj.states().map(|s| l2(c, s)).fold(f64::INFINITY, f64::min))
            .sum();
        let mean = if candidate_states.is_empty() {
            0.0
        } else {
            total / candidate_states.len() as f64
        };
        if best.is_none_or(|(b, _)| mean < b) {
            best = Some((mean, traj.id()));
        }
    }
    best.map(|(_, id)| id.to_owned())
        .ok_or_else(|| Error::validation("retrieval needs a non-empty base set"))
}
