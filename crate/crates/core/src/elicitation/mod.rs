//! Active elicitation: an operator is shown prompts, demonstrates with a live
//! compatibility indicator, and is either accepted or shown the worst windows of
//! the attempt next to the most similar base demonstration.
//!
//! ```text
//! Prompting ─begin─▶ Demonstrating ─finalize(accepted)─▶ Demonstrating | Complete
//!                          ▲   └──finalize(rejected)─▶ Feedback
//!                          └────────────begin──────────────┘
//! ```

mod candidates;
mod events;
mod retrieval;

pub use candidates::{select_candidates, CandidateWindow};
pub use events::{EventKind, SessionEvent};
pub use retrieval::retrieve_similar;

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::compat::{assess, CompatibilityRecord, Thresholds};
use crate::demo::{union, ActionVector, DemonstrationSet, StateVector, Step, Trajectory};
use crate::error::{Error, Result};
use crate::policy::{train_ensemble, PolicyEnsemble, TrainConfig};
use crate::rng;

pub const RETRIEVAL_METRIC: &str = "raw-state-l2";
const PROMPT_STREAM: u64 = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub prompt_count: usize,
    pub reject_fraction: f64,
    pub candidate_count: usize,
    pub window_length: usize,
    /// Red iff `score <= cutoff`; `None` means red iff the score is exactly zero.
    pub live_red_cutoff: Option<f64>,
    pub target_demo_count: usize,
    pub batch_retrain: bool,
    /// Also retrain after every N accepted demos.
    pub retrain_every: Option<usize>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            prompt_count: 5,
            reject_fraction: 0.05,
            candidate_count: 3,
            window_length: 10,
            live_red_cutoff: None,
            target_demo_count: 10,
            batch_retrain: true,
            retrain_every: None,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.candidate_count == 0 || self.window_length == 0 {
            return Err(Error::validation(
                "candidate_count and window_length must be at least 1",
            ));
        }
        if !(self.reject_fraction > 0.0 && self.reject_fraction < 1.0) {
            return Err(Error::validation(format!(
                "reject_fraction must lie in (0, 1), got {}",
                self.reject_fraction
            )));
        }
        if self.target_demo_count == 0 {
            return Err(Error::validation("target_demo_count must be positive"));
        }
        if let Some(c) = self.live_red_cutoff {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::validation("live_red_cutoff must lie in [0, 1]"));
            }
        }
        if self.retrain_every == Some(0) {
            return Err(Error::validation("retrain_every must be positive"));
        }
        Ok(())
    }

    pub fn indicator(&self, score: f64) -> Indicator {
        let red = match self.live_red_cutoff {
            None => score == 0.0,
            Some(c) => score <= c,
        };
        if red {
            Indicator::Red
        } else {
            Indicator::Green
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Prompting,
    Demonstrating,
    Feedback,
    Complete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Indicator {
    Green,
    Red,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackCandidate {
    pub start_step: usize,
    pub end_step: usize,
    pub mean_incompatibility: f64,
    pub retrieved_base_trajectory_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LiveScore {
    pub indicator: Indicator,
    pub score: f64,
    pub novelty: f64,
    pub likelihood: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalizeOutcome {
    pub decision: Decision,
    pub length: usize,
    pub zero_count: usize,
    pub candidates: Vec<FeedbackCandidate>,
    /// The batch rule asks for a retrain now.
    pub retrain_due: bool,
}

/// Rejected iff the zero-score count strictly exceeds `reject_fraction × length`.
pub fn rejects(zero_count: usize, length: usize, reject_fraction: f64) -> bool {
    zero_count as f64 > reject_fraction * length as f64
}

/// One operator's elicitation session against a base set and ensemble snapshot.
#[derive(Debug, Clone)]
pub struct ElicitationSession {
    id: String,
    operator_id: String,
    phase: Phase,
    base: Arc<DemonstrationSet>,
    ensemble: Arc<PolicyEnsemble>,
    pending_ensemble: Option<Arc<PolicyEnsemble>>,
    thresholds: Thresholds,
    config: SessionConfig,
    prompts: Vec<String>,
    accepted: Vec<Trajectory>,
    rejected_count: usize,
    demo_index: usize,
    live_buffer: Vec<Step>,
    live_records: Vec<CompatibilityRecord>,
    candidates: Vec<FeedbackCandidate>,
    retrains: usize,
    clock_ms: u64,
    log: Vec<SessionEvent>,
}

impl ElicitationSession {
    /// Opens in `Prompting` with the first `prompt_count` trajectories of a
    /// seeded shuffle of the base set as prompts.
    pub fn open(
        id: impl Into<String>,
        operator_id: impl Into<String>,
        base: Arc<DemonstrationSet>,
        ensemble: Arc<PolicyEnsemble>,
        thresholds: Thresholds,
        config: SessionConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        thresholds.validate()?;
        if base.is_empty() {
            return Err(Error::validation("elicitation needs a non-empty base set"));
        }
        let mut order: Vec<usize> = (0..base.len()).collect();
        order.shuffle(&mut rng::stream(seed, PROMPT_STREAM));
        let prompts = order
            .into_iter()
            .take(config.prompt_count)
            .map(|i| base.trajectories()[i].id().to_owned())
            .collect();
        let mut s = Self {
            id: id.into(),
            operator_id: operator_id.into(),
            phase: Phase::Prompting,
            base,
            ensemble,
            pending_ensemble: None,
            thresholds,
            config,
            prompts,
            accepted: Vec::new(),
            rejected_count: 0,
            demo_index: 0,
            live_buffer: Vec::new(),
            live_records: Vec::new(),
            candidates: Vec::new(),
            retrains: 0,
            clock_ms: 0,
            log: Vec::new(),
        };
        s.emit(EventKind::Opened {
            session_id: s.id.clone(),
            operator_id: s.operator_id.clone(),
            thresholds: s.thresholds,
            config: s.config.clone(),
            ensemble_fingerprint: s.ensemble.fingerprint(),
            retrieval: RETRIEVAL_METRIC.to_owned(),
        });
        for p in s.prompts.clone() {
            s.emit(EventKind::PromptShown { trajectory_id: p });
        }
        Ok(s)
    }

    pub fn id(&self) -> &str {
        &self.id
    }
    pub fn operator_id(&self) -> &str {
        &self.operator_id
    }
    pub fn phase(&self) -> Phase {
        self.phase
    }
    pub fn prompts(&self) -> &[String] {
        &self.prompts
    }
    pub fn base(&self) -> &DemonstrationSet {
        &self.base
    }
    pub fn ensemble(&self) -> &Arc<PolicyEnsemble> {
        &self.ensemble
    }
    pub fn thresholds(&self) -> &Thresholds {
        &self.thresholds
    }
    pub fn config(&self) -> &SessionConfig {
        &self.config
    }
    pub fn accepted(&self) -> &[Trajectory] {
        &self.accepted
    }
    pub fn rejected_count(&self) -> usize {
        self.rejected_count
    }
    /// Number of demonstrations finalised so far.
    pub fn demo_index(&self) -> usize {
        self.demo_index
    }
    pub fn live_buffer(&self) -> &[Step] {
        &self.live_buffer
    }
    pub fn live_records(&self) -> &[CompatibilityRecord] {
        &self.live_records
    }
    /// Candidates of the most recent rejection.
    pub fn candidates(&self) -> &[FeedbackCandidate] {
        &self.candidates
    }
    pub fn events(&self) -> &[SessionEvent] {
        &self.log
    }
    pub fn clock_ms(&self) -> u64 {
        self.clock_ms
    }

    /// Advances the logical clock used to stamp events.
    pub fn advance_clock(&mut self, ms: u64) {
        self.clock_ms += ms;
    }

    fn emit(&mut self, kind: EventKind) {
        let seq = self.log.len() as u64;
        self.log.push(SessionEvent {
            seq,
            t_ms: self.clock_ms,
            kind,
        });
    }

    fn set_phase(&mut self, to: Phase) {
        let from = self.phase;
        self.phase = to;
        self.emit(EventKind::PhaseChanged { from, to });
    }

    fn expect_phase(&self, allowed: &[Phase], op: &str) -> Result<()> {
        if allowed.contains(&self.phase) {
            Ok(())
        } else {
            Err(Error::protocol(format!(
                "{op} is not allowed in phase {:?}",
                self.phase
            )))
        }
    }

    /// Prompting or Feedback → Demonstrating.
    pub fn begin_demonstration(&mut self) -> Result<()> {
        self.expect_phase(&[Phase::Prompting, Phase::Feedback], "begin")?;
        self.candidates.clear();
        self.set_phase(Phase::Demonstrating);
        Ok(())
    }

    /// Scores one pair against the current snapshot and appends it to the buffer.
    pub fn live_score(&mut self, state: StateVector, action: ActionVector) -> Result<LiveScore> {
        self.expect_phase(&[Phase::Demonstrating], "step")?;
        let a = assess(&self.ensemble, &state, &action, &self.thresholds)?;
        let indicator = self.config.indicator(a.score);
        let step = self.live_buffer.len();
        self.emit(EventKind::StepScored {
            demo_index: self.demo_index,
            step,
            state: state.as_slice().to_vec(),
            action: action.as_slice().to_vec(),
            novelty: a.novelty,
            likelihood: a.likelihood,
            score: a.score,
            indicator,
        });
        self.live_records.push(CompatibilityRecord {
            trajectory_id: self.live_trajectory_id(),
            step_index: step,
            novelty: a.novelty,
            likelihood: a.likelihood,
            score: a.score,
        });
        self.live_buffer.push(Step { state, action });
        Ok(LiveScore {
            indicator,
            score: a.score,
            novelty: a.novelty,
            likelihood: a.likelihood,
        })
    }

    /// Logs that `dropped` actions were superseded before the next scored step.
    pub fn note_coalesced(&mut self, dropped: usize) -> Result<()> {
        self.expect_phase(&[Phase::Demonstrating], "coalesce")?;
        self.emit(EventKind::ActionsCoalesced {
            demo_index: self.demo_index,
            step: self.live_buffer.len(),
            dropped,
        });
        Ok(())
    }

    fn live_trajectory_id(&self) -> String {
        format!("{}-d{:03}", self.id, self.demo_index)
    }

    /// Applies the rejection rule to the buffered demonstration.
    pub fn finalize_demo(&mut self, success: bool) -> Result<FinalizeOutcome> {
        self.expect_phase(&[Phase::Demonstrating], "finalize")?;
        if self.live_buffer.is_empty() {
            return Err(Error::protocol("finalize with an empty demonstration"));
        }
        let length = self.live_buffer.len();
        let zero_count = self.live_records.iter().filter(|r| r.score == 0.0).count();
        let rejected = rejects(zero_count, length, self.config.reject_fraction);
        let decision = if rejected {
            Decision::Rejected
        } else {
            Decision::Accepted
        };
        let horizon = self.base.trajectories()[0].horizon_limit().max(length);
        let traj = Trajectory::new(
            self.live_trajectory_id(),
            self.operator_id.clone(),
            self.base.task_id(),
            std::mem::take(&mut self.live_buffer),
            success,
            horizon,
        )?;
        let records = std::mem::take(&mut self.live_records);
        self.emit(EventKind::DemoFinalized {
            demo_index: self.demo_index,
            decision,
            length,
            zero_count,
            success,
            ensemble_fingerprint: self.ensemble.fingerprint(),
        });
        let mut outcome = FinalizeOutcome {
            decision,
            length,
            zero_count,
            candidates: Vec::new(),
            retrain_due: false,
        };
        if rejected {
            self.rejected_count += 1;
            let mut cands = Vec::new();
            for w in select_candidates(&records, self.config.window_length, self.config.candidate_count) {
                let states: Vec<StateVector> = traj.steps()[w.start_step..=w.end_step]
                    .iter()
                    .map(|s| s.state.clone())
                    .collect();
                cands.push(FeedbackCandidate {
                    start_step: w.start_step,
                    end_step: w.end_step,
                    mean_incompatibility: w.mean_incompatibility,
                    retrieved_base_trajectory_id: retrieve_similar(&self.base, &states)?,
                });
            }
            self.emit(EventKind::CandidatesEmitted {
                demo_index: self.demo_index,
                candidates: cands.clone(),
            });
            self.candidates = cands.clone();
            outcome.candidates = cands;
            self.demo_index += 1;
            self.set_phase(Phase::Feedback);
        } else {
            self.accepted.push(traj);
            self.demo_index += 1;
            let n = self.accepted.len();
            let complete = n >= self.config.target_demo_count;
            outcome.retrain_due =
                (self.config.batch_retrain && complete) || self.config.retrain_every.is_some_and(|k| n % k == 0);
            if complete {
                self.set_phase(Phase::Complete);
            }
        }
        self.apply_pending();
        Ok(outcome)
    }

    /// Drops the buffered demonstration, e.g. after an operator disconnect.
    pub fn discard_demo(&mut self, reason: &str) -> Result<usize> {
        self.expect_phase(&[Phase::Demonstrating], "discard")?;
        let length = self.live_buffer.len();
        self.live_buffer.clear();
        self.live_records.clear();
        self.emit(EventKind::DemoDiscarded {
            demo_index: self.demo_index,
            length,
            reason: reason.to_owned(),
        });
        self.apply_pending();
        Ok(length)
    }

    /// `base ∪ accepted`, the retraining input.
    pub fn training_set(&self) -> Result<DemonstrationSet> {
        if self.accepted.is_empty() {
            return Err(Error::validation(
                "retraining needs at least one accepted demonstration",
            ));
        }
        let new = DemonstrationSet::new(
            format!("{}-accepted", self.id),
            self.base.task_id(),
            self.accepted.clone(),
        )?;
        union(&self.base, &new)
    }

    /// Swaps in a retrained ensemble. Mid-demonstration the swap waits until
    /// the demonstration ends.
    pub fn install_ensemble(&mut self, ensemble: Arc<PolicyEnsemble>) -> Result<()> {
        let cfg = self.ensemble.config();
        if ensemble.config().input_dim != cfg.input_dim || ensemble.config().output_dim != cfg.output_dim {
            return Err(Error::validation("replacement ensemble has different dimensions"));
        }
        self.pending_ensemble = Some(ensemble);
        if self.live_buffer.is_empty() {
            self.apply_pending();
        }
        Ok(())
    }

    fn apply_pending(&mut self) {
        if let Some(e) = self.pending_ensemble.take() {
            self.ensemble = e;
            self.retrains += 1;
            self.emit(EventKind::RetrainCompleted {
                accepted_count: self.accepted.len(),
                ensemble_fingerprint: self.ensemble.fingerprint(),
            });
        }
    }

    pub fn retrain_count(&self) -> usize {
        self.retrains
    }

    /// Retrains on `base ∪ accepted` with the current architecture and size and installs the result.
    pub fn batch_retrain(&mut self, train_cfg: &TrainConfig) -> Result<Arc<PolicyEnsemble>> {
        let data = self.training_set()?;
        let e = Arc::new(train_ensemble(
            &data,
            self.ensemble.config(),
            train_cfg,
            self.ensemble.k(),
        )?);
        self.install_ensemble(e.clone())?;
        Ok(e)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::compat::tests::constant_ensemble;

    pub(crate) fn base_set(n: usize) -> DemonstrationSet {
        let trajs = (0..n)
            .map(|i| {
                let steps = (0..4)
                    .map(|k| Step {
                        state: StateVector::new(vec![i as f64 + k as f64 * 0.1]).unwrap(),
                        action: ActionVector::new(vec![0.0]).unwrap(),
                    })
                    .collect();
                Trajectory::new(format!("b{i}"), "base", "k", steps, true, 200).unwrap()
            })
            .collect();
        DemonstrationSet::new("base", "k", trajs).unwrap()
    }

    pub(crate) fn session(cfg: SessionConfig) -> ElicitationSession {
        let e = Arc::new(constant_ensemble(1, &[vec![0.0], vec![0.0]]));
        ElicitationSession::open("s", "op", Arc::new(base_set(30)), e, Thresholds::SQUARE_NUT, cfg, 1).unwrap()
    }

    fn push(s: &mut ElicitationSession, good: usize, bad: usize) {
        for i in 0..good + bad {
            let a = if i < good { 0.0 } else { 1.0 };
            s.live_score(
                StateVector::new(vec![0.0]).unwrap(),
                ActionVector::new(vec![a]).unwrap(),
            )
            .unwrap();
        }
    }

    #[test]
    fn prompts_are_seeded_and_distinct() {
        let s = session(SessionConfig::default());
        let mut p = s.prompts().to_vec();
        assert_eq!(p.len(), 5);
        p.sort();
        p.dedup();
        assert_eq!(p.len(), 5);
        assert_eq!(session(SessionConfig::default()).prompts(), s.prompts());
        let all = session(SessionConfig {
            prompt_count: 50,
            ..SessionConfig::default()
        });
        assert_eq!(all.prompts().len(), 30);
        let e = Arc::new(constant_ensemble(1, &[vec![0.0], vec![0.0]]));
        assert!(ElicitationSession::open(
            "x",
            "op",
            Arc::new(DemonstrationSet::empty("e", "k")),
            e,
            Thresholds::SQUARE_NUT,
            SessionConfig::default(),
            0
        )
        .is_err());
    }

    #[test]
    fn five_percent_boundary() {
        let mut s = session(SessionConfig::default());
        s.begin_demonstration().unwrap();
        push(&mut s, 190, 10);
        let out = s.finalize_demo(true).unwrap();
        assert_eq!((out.decision, out.zero_count), (Decision::Accepted, 10));
        assert_eq!(s.phase(), Phase::Demonstrating);

        push(&mut s, 189, 11);
        let out = s.finalize_demo(true).unwrap();
        assert_eq!(out.decision, Decision::Rejected);
        assert_eq!(out.candidates.len(), 3);
        assert_eq!(s.phase(), Phase::Feedback);
        // zero scores fill 189..=199; of the two all-red windows the earlier wins
        assert_eq!((out.candidates[0].start_step, out.candidates[0].end_step), (189, 198));
        assert_eq!(out.candidates[0].mean_incompatibility, 1.0);
    }

    #[test]
    fn short_demo_single_window() {
        let mut s = session(SessionConfig::default());
        s.begin_demonstration().unwrap();
        push(&mut s, 0, 8);
        let out = s.finalize_demo(false).unwrap();
        assert_eq!(out.decision, Decision::Rejected);
        assert_eq!(out.candidates.len(), 1);
        assert_eq!((out.candidates[0].start_step, out.candidates[0].end_step), (0, 7));
    }

    #[test]
    fn phase_gating_leaves_session_unchanged() {
        let mut s = session(SessionConfig::default());
        let before = s.events().len();
        let st = || StateVector::new(vec![0.0]).unwrap();
        let ac = || ActionVector::new(vec![0.0]).unwrap();
        assert!(matches!(s.live_score(st(), ac()), Err(Error::Protocol(_))));
        assert!(s.finalize_demo(true).is_err());
        assert_eq!(s.events().len(), before);
        s.begin_demonstration().unwrap();
        assert!(s.begin_demonstration().is_err());
        assert!(matches!(s.finalize_demo(true), Err(Error::Protocol(_))));
        // dimension errors do not touch the buffer either
        assert!(s.live_score(StateVector::new(vec![0.0, 1.0]).unwrap(), ac()).is_err());
        assert!(s.live_buffer().is_empty());
    }

    #[test]
    fn completes_at_target_and_flags_retrain() {
        let mut s = session(SessionConfig {
            target_demo_count: 2,
            ..SessionConfig::default()
        });
        s.begin_demonstration().unwrap();
        push(&mut s, 5, 0);
        assert!(!s.finalize_demo(true).unwrap().retrain_due);
        push(&mut s, 5, 0);
        assert!(s.finalize_demo(true).unwrap().retrain_due);
        assert_eq!(s.phase(), Phase::Complete);
        assert_eq!(s.accepted().len(), 2);
        assert!(s.begin_demonstration().is_err());
        assert_eq!(s.training_set().unwrap().len(), 32);
    }

    #[test]
    fn indicators_follow_scores() {
        let mut s = session(SessionConfig::default());
        s.begin_demonstration().unwrap();
        let st = StateVector::new(vec![0.0]).unwrap();
        let g = s.live_score(st.clone(), ActionVector::new(vec![0.0]).unwrap()).unwrap();
        assert_eq!((g.indicator, g.score), (Indicator::Green, 1.0));
        let r = s.live_score(st, ActionVector::new(vec![0.9]).unwrap()).unwrap();
        assert_eq!((r.indicator, r.score), (Indicator::Red, 0.0));
        let novel = Arc::new(constant_ensemble(1, &[vec![0.0], vec![1.0]]));
        let mut n = ElicitationSession::open(
            "n",
            "op",
            Arc::new(base_set(3)),
            novel,
            Thresholds::SQUARE_NUT,
            SessionConfig::default(),
            0,
        )
        .unwrap();
        n.begin_demonstration().unwrap();
        let x = n
            .live_score(
                StateVector::new(vec![0.0]).unwrap(),
                ActionVector::new(vec![9.0]).unwrap(),
            )
            .unwrap();
        assert_eq!((x.indicator, x.score), (Indicator::Green, 1.0));
    }

    #[test]
    fn pending_ensemble_waits_for_demo_end() {
        let mut s = session(SessionConfig::default());
        s.begin_demonstration().unwrap();
        push(&mut s, 3, 0);
        let other = Arc::new(constant_ensemble(1, &[vec![0.5], vec![0.5]]));
        let old = s.ensemble().fingerprint();
        s.install_ensemble(other.clone()).unwrap();
        assert_eq!(s.ensemble().fingerprint(), old);
        s.finalize_demo(true).unwrap();
        assert_eq!(s.ensemble().fingerprint(), other.fingerprint());
        assert_eq!(s.retrain_count(), 1);
        assert!(session(SessionConfig::default()).training_set().is_err());
    }

    #[test]
    fn discard_logs_and_clears() {
        let mut s = session(SessionConfig::default());
        s.begin_demonstration().unwrap();
        push(&mut s, 4, 0);
        assert_eq!(s.discard_demo("disconnect").unwrap(), 4);
        assert!(s.live_buffer().is_empty());
        assert!(matches!(
            s.events().last().unwrap().kind,
            EventKind::DemoDiscarded { length: 4, .. }
        ));
        assert_eq!(s.phase(), Phase::Demonstrating);
    }
}
