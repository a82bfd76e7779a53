//! One live session: the elicitation engine plus the server-side toy world the
//! operator drives, with per-tick action coalescing. Pure and synchronous; the
//! transport layer decides when ticks happen.

use elicit_core::demo::ActionVector;
use elicit_core::elicitation::{ElicitationSession, FinalizeOutcome, Phase};
use elicit_core::toyworld::{reset, step, WorldConfig, WorldState, ACTION_DIM};
use elicit_core::{rng, Error, Result};

use crate::protocol::ServerMessage;

#[derive(Debug)]
pub struct SessionRuntime {
    session: ElicitationSession,
    world_cfg: WorldConfig,
    seed: u64,
    tick_ms: u64,
    world: Option<WorldState>,
    applied_this_tick: bool,
    /// Latest buffered action and how many earlier ones it superseded.
    pending: Option<(ActionVector, usize)>,
}

impl SessionRuntime {
    pub fn new(session: ElicitationSession, world_cfg: WorldConfig, seed: u64, tick_ms: u64) -> Result<Self> {
        world_cfg.validate()?;
        if session.ensemble().config().input_dim != elicit_core::toyworld::STATE_DIM
            || session.ensemble().config().output_dim != ACTION_DIM
        {
            return Err(Error::Validation(
                "session policy must map toy-world states to toy-world actions".into(),
            ));
        }
        Ok(Self {
            session,
            world_cfg,
            seed,
            tick_ms,
            world: None,
            applied_this_tick: false,
            pending: None,
        })
    }

    pub fn session(&self) -> &ElicitationSession {
        &self.session
    }

    pub fn session_mut(&mut self) -> &mut ElicitationSession {
        &mut self.session
    }

    pub fn world(&self) -> Option<&WorldState> {
        self.world.as_ref()
    }

    pub fn world_config(&self) -> &WorldConfig {
        &self.world_cfg
    }

    fn phase_message(&self) -> ServerMessage {
        ServerMessage::Phase {
            phase: self.session.phase(),
            demo_index: self.session.demo_index(),
        }
    }

    fn tick_message(&self, world: &WorldState) -> ServerMessage {
        ServerMessage::Tick {
            demo_index: self.session.demo_index(),
            step: world.step_count,
            t_ms: self.session.clock_ms(),
            world: world.clone(),
        }
    }

    /// Episode seed of the current demonstration.
    pub fn episode_seed(&self) -> u64 {
        rng::derive(self.seed, self.session.demo_index() as u64)
    }

    fn fresh_world(&mut self) -> Result<WorldState> {
        let w = reset(&self.world_cfg, self.episode_seed())?;
        self.world = Some(w.clone());
        Ok(w)
    }

    pub fn begin(&mut self) -> Result<Vec<ServerMessage>> {
        self.session.begin_demonstration()?;
        self.applied_this_tick = false;
        self.pending = None;
        let w = self.fresh_world()?;
        Ok(vec![self.phase_message(), self.tick_message(&w)])
    }

    fn check_action(&self, action: &[f64]) -> Result<ActionVector> {
        if self.session.phase() != Phase::Demonstrating {
            return Err(Error::Protocol(format!(
                "actions are only accepted while demonstrating, phase is {:?}",
                self.session.phase()
            )));
        }
        if action.len() != ACTION_DIM {
            return Err(Error::Dimension {
                what: "action",
                expected: ACTION_DIM,
                got: action.len(),
            });
        }
        let world = self.world.as_ref().expect("a world exists while demonstrating");
        if world.step_count >= self.world_cfg.horizon {
            return Err(Error::Protocol(format!(
                "demonstration reached the horizon of {} steps; finalize it",
                self.world_cfg.horizon
            )));
        }
        ActionVector::new(action.to_vec())
    }

    fn apply(&mut self, action: ActionVector) -> Result<Vec<ServerMessage>> {
        let world = self.world.clone().expect("a world exists while demonstrating");
        self.session.advance_clock(self.tick_ms);
        let step_index = self.session.live_buffer().len();
        let live = self.session.live_score(world.observe(), action.clone())?;
        let (next, _) = step(&world, &action, &self.world_cfg)?;
        self.world = Some(next.clone());
        Ok(vec![
            ServerMessage::Compat {
                demo_index: self.session.demo_index(),
                step: step_index,
                t_ms: self.session.clock_ms(),
                indicator: live.indicator,
                score: live.score,
                novelty: live.novelty,
                likelihood: live.likelihood,
            },
            self.tick_message(&next),
        ])
    }

    /// Scores and executes one action immediately, bypassing coalescing.
    pub fn step_now(&mut self, action: &[f64]) -> Result<Vec<ServerMessage>> {
        let a = self.check_action(action)?;
        self.apply(a)
    }

    /// Stream entry point: the first action in a tick runs at once, later ones
    /// wait for the next tick and only the latest of them is kept.
    pub fn submit(&mut self, action: &[f64]) -> Result<Vec<ServerMessage>> {
        let a = self.check_action(action)?;
        if !self.applied_this_tick && self.pending.is_none() {
            self.applied_this_tick = true;
            return self.apply(a);
        }
        let superseded = self.pending.take().map_or(0, |(_, n)| n + 1);
        self.pending = Some((a, superseded));
        Ok(Vec::new())
    }

    fn flush_pending(&mut self) -> Result<Vec<ServerMessage>> {
        match self.pending.take() {
            Some((a, superseded)) => {
                if superseded > 0 {
                    self.session.note_coalesced(superseded)?;
                }
                // the world may have reached its horizon since buffering
                if self
                    .world
                    .as_ref()
                    .is_some_and(|w| w.step_count >= self.world_cfg.horizon)
                {
                    return Ok(Vec::new());
                }
                self.apply(a)
            }
            None => Ok(Vec::new()),
        }
    }

    /// Tick boundary: runs the buffered action, if any, and reports the world.
    pub fn tick(&mut self) -> Result<Vec<ServerMessage>> {
        if self.session.phase() != Phase::Demonstrating {
            self.applied_this_tick = false;
            return Ok(Vec::new());
        }
        let had_pending = self.pending.is_some();
        let mut out = self.flush_pending()?;
        self.applied_this_tick = had_pending;
        if out.is_empty() {
            if let Some(w) = &self.world {
                out.push(self.tick_message(w));
            }
        }
        Ok(out)
    }

    /// Ends the demonstration; success is read from the world.
    pub fn finalize(&mut self) -> Result<(FinalizeOutcome, Vec<ServerMessage>)> {
        if self.session.phase() != Phase::Demonstrating {
            return Err(Error::Protocol(format!(
                "finalize is not allowed in phase {:?}",
                self.session.phase()
            )));
        }
        let mut out = self.flush_pending()?;
        let success = self.world.as_ref().is_some_and(|w| w.is_success(&self.world_cfg));
        let demo_index = self.session.demo_index();
        let outcome = self.session.finalize_demo(success)?;
        self.world = None;
        self.applied_this_tick = false;
        out.push(ServerMessage::Decision {
            demo_index,
            success,
            outcome: outcome.clone(),
        });
        out.push(self.phase_message());
        // an accepted demo below the target goes straight on to the next one
        if self.session.phase() == Phase::Demonstrating {
            let w = self.fresh_world()?;
            out.push(self.tick_message(&w));
        }
        Ok((outcome, out))
    }

    /// Drops the buffered demonstration and restarts the same demonstration
    /// index from a fresh world. Outside `Demonstrating` this does nothing.
    pub fn restart_demo(&mut self, reason: &str) -> Result<Vec<ServerMessage>> {
        self.pending = None;
        self.applied_this_tick = false;
        if self.session.phase() != Phase::Demonstrating {
            return Ok(Vec::new());
        }
        self.session.discard_demo(reason)?;
        let w = self.fresh_world()?;
        Ok(vec![self.phase_message(), self.tick_message(&w)])
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use elicit_core::compat::Thresholds;
    use elicit_core::demo::{DemonstrationSet, StateVector, Step, Trajectory};
    use elicit_core::elicitation::{Decision, EventKind, Indicator, SessionConfig};
    use elicit_core::policy::{MlpConfig, MlpParameters, PolicyEnsemble};
    use elicit_core::toyworld::STATE_DIM;

    fn zero_policy() -> Arc<PolicyEnsemble> {
        let cfg = MlpConfig::new(STATE_DIM, ACTION_DIM).with_hidden([4]).with_dropout(0.0);
        let m = || MlpParameters::zeros(&cfg).unwrap();
        Arc::new(PolicyEnsemble::from_members(cfg.clone(), vec![m(), m()], vec![0, 1]).unwrap())
    }

    fn runtime() -> SessionRuntime {
        let steps = vec![
            Step {
                state: StateVector::new(vec![0.0; STATE_DIM]).unwrap(),
                action: ActionVector::new(vec![0.0; ACTION_DIM]).unwrap(),
            };
            5
        ];
        let t = Trajectory::new("b0", "op", "nut-on-peg", steps, true, 200).unwrap();
        let base = Arc::new(DemonstrationSet::new("base", "nut-on-peg", vec![t]).unwrap());
        let s = ElicitationSession::open(
            "s",
            "op",
            base,
            zero_policy(),
            Thresholds::SQUARE_NUT,
            SessionConfig {
                prompt_count: 1,
                ..SessionConfig::default()
            },
            9,
        )
        .unwrap();
        SessionRuntime::new(s, WorldConfig::default(), 9, 50).unwrap()
    }

    #[test]
    fn actions_outside_demonstrating_are_refused() {
        let mut r = runtime();
        assert!(matches!(r.submit(&[0.0, 0.0, 0.0]), Err(Error::Protocol(_))));
        assert!(matches!(r.finalize(), Err(Error::Protocol(_))));
        r.begin().unwrap();
        assert!(matches!(r.step_now(&[0.0, 0.0]), Err(Error::Dimension { .. })));
        assert!(r.step_now(&[f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn mean_action_is_green_and_world_advances() {
        let mut r = runtime();
        r.begin().unwrap();
        let out = r.step_now(&[0.0, 0.0, 0.0]).unwrap();
        match &out[0] {
            ServerMessage::Compat {
                indicator,
                score,
                step,
                t_ms,
                ..
            } => {
                assert_eq!((*indicator, *score, *step, *t_ms), (Indicator::Green, 1.0, 0, 50));
            }
            m => panic!("unexpected {m:?}"),
        }
        let bad = r.step_now(&[1.0, 1.0, 1.0]).unwrap();
        assert!(matches!(
            bad[0],
            ServerMessage::Compat {
                indicator: Indicator::Red,
                score: 0.0,
                ..
            }
        ));
        assert_eq!(r.world().unwrap().step_count, 2);
        assert_eq!(r.world().unwrap().robot_xy, [-0.75, -0.75]);
    }

    #[test]
    fn floods_coalesce_to_the_latest_action_per_tick() {
        let mut r = runtime();
        r.begin().unwrap();
        assert_eq!(r.submit(&[0.01, 0.0, 0.0]).unwrap().len(), 2);
        for dx in [0.02, 0.03, 0.04] {
            assert!(r.submit(&[dx, 0.0, 0.0]).unwrap().is_empty());
        }
        let out = r.tick().unwrap();
        assert_eq!(out[0].kind(), "compat");
        assert_eq!(r.session().live_buffer().len(), 2);
        assert_eq!(r.session().live_buffer()[1].action.as_slice(), &[0.04, 0.0, 0.0]);
        let coalesced: Vec<usize> = r
            .session()
            .events()
            .iter()
            .filter_map(|e| match e.kind {
                EventKind::ActionsCoalesced { dropped, .. } => Some(dropped),
                _ => None,
            })
            .collect();
        assert_eq!(coalesced, [2]);
        // the pending action used this tick; the next action waits again
        assert!(r.submit(&[0.0, 0.0, 0.0]).unwrap().is_empty());
        assert_eq!(r.tick().unwrap()[0].kind(), "compat");
        // an idle tick frees the next one
        assert_eq!(r.tick().unwrap()[0].kind(), "tick");
        assert_eq!(r.submit(&[0.0, 0.0, 0.0]).unwrap().len(), 2);
    }

    #[test]
    fn finalize_flushes_pending_then_decides() {
        let mut r = runtime();
        r.begin().unwrap();
        r.submit(&[0.0, 0.0, 0.0]).unwrap();
        r.submit(&[0.0, 0.0, 0.0]).unwrap();
        let (outcome, msgs) = r.finalize().unwrap();
        assert_eq!(outcome.length, 2);
        assert_eq!(outcome.decision, Decision::Accepted);
        let kinds: Vec<&str> = msgs.iter().map(|m| m.kind()).collect();
        assert_eq!(kinds, ["compat", "tick", "decision", "phase", "tick"]);
        // accepted below the target: the next demo starts on a new episode
        assert_eq!(r.session().phase(), Phase::Demonstrating);
        assert_eq!(r.world().unwrap().step_count, 0);
        assert_eq!(r.episode_seed(), rng::derive(9, 1));
        assert_eq!(r.step_now(&[0.0, 0.0, 0.0]).unwrap()[0].kind(), "compat");
    }

    #[test]
    fn disconnect_discards_and_restarts_the_same_demo() {
        let mut r = runtime();
        r.begin().unwrap();
        let start = r.world().unwrap().clone();
        r.step_now(&[0.05, 0.0, 0.0]).unwrap();
        let msgs = r.restart_demo("writer disconnected").unwrap();
        assert_eq!(msgs[0].kind(), "phase");
        assert_eq!(r.session().phase(), Phase::Demonstrating);
        assert!(r.session().live_buffer().is_empty());
        assert_eq!(r.world().unwrap(), &start);
        assert!(matches!(
            r.session().events().last().unwrap().kind,
            EventKind::DemoDiscarded { length: 1, .. }
        ));
    }

    #[test]
    fn horizon_is_enforced() {
        let mut r = runtime();
        r.world_cfg.horizon = 3;
        r.begin().unwrap();
        for _ in 0..3 {
            r.step_now(&[0.0, 0.0, 0.0]).unwrap();
        }
        assert!(matches!(r.step_now(&[0.0, 0.0, 0.0]), Err(Error::Protocol(_))));
        assert_eq!(r.finalize().unwrap().0.length, 3);
    }
}
