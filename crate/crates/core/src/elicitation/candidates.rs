use serde::{Deserialize, Serialize};

use crate::compat::CompatibilityRecord;

/// A window of consecutive steps, inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateWindow {
    pub start_step: usize,
    pub end_step: usize,
    /// Mean of `1 − score` over the window.
    pub mean_incompatibility: f64,
}

impl CandidateWindow {
    pub fn len(&self) -> usize {
        self.end_step - self.start_step + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn overlaps(&self, other: &CandidateWindow) -> bool {
        self.start_step <= other.end_step && other.start_step <= self.end_step
    }
}

/// Greedy sliding-window selection: repeatedly take the window with the highest
/// mean incompatibility that is disjoint from earlier picks, preferring the
/// smaller start on ties. Records shorter than the window yield one truncated
/// window covering everything.
pub fn select_candidates(records: &[CompatibilityRecord], window_length: usize, count: usize) -> Vec<CandidateWindow> {
    let n = records.len();
    if n == 0 || window_length == 0 || count == 0 {
        return Vec::new();
    }
    let w = window_length.min(n);
    let bad: Vec<f64> = records.iter().map(|r| 1.0 - r.score).collect();
    let windows: Vec<CandidateWindow> = (0..=n - w)
        .map(|start| CandidateWindow {
            start_step: start,
            end_step: start + w - 1,
            mean_incompatibility: bad[start..start + w].iter().sum::<f64>() / w as f64,
        })
        .collect();
    let mut chosen: Vec<CandidateWindow> = Vec::new();
    while chosen.len() < count {
        let best = windows.iter().filter(|c| chosen.iter().all(|p| !p.overlaps(c))).fold(
            None::<&CandidateWindow>,
            |best, c| match best {
                Some(b) if b.mean_incompatibility >= c.mean_incompatibility => Some(b),
                _ => Some(c),
            },
        );
        match best {
            Some(b) => chosen.push(*b),
            None => break,
        }
    }
    chosen
}
