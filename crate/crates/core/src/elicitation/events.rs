use serde::{Deserialize, Serialize};

use super::{Decision, FeedbackCandidate, Indicator, Phase, SessionConfig};
use crate::compat::Thresholds;

/// Append-only session record. `t_ms` is the session's logical clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub seq: u64,
    pub t_ms: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventKind {
    Opened {
        session_id: String,
        operator_id: String,
        thresholds: Thresholds,
        config: SessionConfig,
        ensemble_fingerprint: String,
        /// Similarity used to pick retrieved base demonstrations.
        retrieval: String,
    },
    PromptShown {
        trajectory_id: String,
    },
    PhaseChanged {
        from: Phase,
        to: Phase,
    },
    StepScored {
        demo_index: usize,
        step: usize,
        state: Vec<f64>,
        action: Vec<f64>,
        novelty: f64,
        likelihood: f64,
        score: f64,
        indicator: Indicator,
    },
    DemoFinalized {
        demo_index: usize,
        decision: Decision,
        length: usize,
        zero_count: usize,
        success: bool,
        ensemble_fingerprint: String,
    },
    /// Actions superseded within one tick; only the latest of them was scored.
    ActionsCoalesced {
        demo_index: usize,
        step: usize,
        dropped: usize,
    },
    DemoDiscarded {
        demo_index: usize,
        length: usize,
        reason: String,
    },
    CandidatesEmitted {
        demo_index: usize,
        candidates: Vec<FeedbackCandidate>,
    },
    RetrainCompleted {
        accepted_count: usize,
        ensemble_fingerprint: String,
    },
}

impl SessionEvent {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("events serialise")
    }
}
