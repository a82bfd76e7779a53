use super::{reset, scripted_command, step, DemonstratorStyle, WorldConfig, WorldState, STATE_DIM};
use crate::demo::{ActionVector, StateVector};
use crate::error::{Error, Result};
use crate::policy::PolicyEnsemble;
use crate::rng;

/// Closed-loop decision maker.
pub trait Controller {
    fn act(&mut self, state: &WorldState, observation: &StateVector) -> Result<ActionVector>;
}

impl Controller for PolicyEnsemble {
    fn act(&mut self, _state: &WorldState, observation: &StateVector) -> Result<ActionVector> {
        self.predict_mean(observation)
    }
}

/// Noise-free scripted demonstrator used as a reference policy.
#[derive(Debug, Clone)]
pub struct ScriptedController {
    pub style: DemonstratorStyle,
    pub cfg: WorldConfig,
}

impl Controller for ScriptedController {
    fn act(&mut self, state: &WorldState, _observation: &StateVector) -> Result<ActionVector> {
        ActionVector::new(scripted_command(&self.style, state, &self.cfg).to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub success: bool,
    pub steps: usize,
    pub final_state: WorldState,
}

/// Runs until success or the horizon.
pub fn rollout(controller: &mut dyn Controller, cfg: &WorldConfig, episode_seed: u64) -> Result<Rollout> {
    let mut state = reset(cfg, episode_seed)?;
    for _ in 0..cfg.horizon {
        let action = controller.act(&state, &state.observe())?;
        let (next, ok) = step(&state, &action, cfg)?;
        state = next;
        if ok {
            return Ok(Rollout {
                success: true,
                steps: state.step_count,
                final_state: state,
            });
        }
    }
    Ok(Rollout {
        success: false,
        steps: state.step_count,
        final_state: state,
    })
}

/// Fraction of successful episodes; episode `i` uses seed `derive(seed, i)`.
pub fn evaluate_controller(
    controller: &mut dyn Controller,
    cfg: &WorldConfig,
    episodes: usize,
    seed: u64,
) -> Result<f64> {
    if episodes == 0 {
        return Err(Error::validation("evaluation needs at least one episode"));
    }
    let mut wins = 0;
    for i in 0..episodes {
        if rollout(controller, cfg, rng::derive(seed, i as u64))?.success {
            wins += 1;
        }
    }
    Ok(wins as f64 / episodes as f64)
}

pub fn evaluate_policy(ensemble: &PolicyEnsemble, cfg: &WorldConfig, episodes: usize, seed: u64) -> Result<f64> {
    let c = ensemble.config();
    if c.input_dim != STATE_DIM || c.output_dim != super::ACTION_DIM {
        return Err(Error::Dimension {
            what: "policy input",
            expected: STATE_DIM,
            got: c.input_dim,
        });
    }
    let mut policy = ensemble.clone();
    evaluate_controller(&mut policy, cfg, episodes, seed)
}
