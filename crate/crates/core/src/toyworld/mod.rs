//! A 2D nut-on-peg world: the robot reaches a nut, grasps it, carries it to a
//! fixed peg and releases it there.
//!
//! Observations are the 7-vector `[robot_x, robot_y, nut_x, nut_y, peg_x, peg_y, carrying]`
//! and actions are `(dx, dy, grasp)`.

mod demonstrator;
mod eval;

pub use demonstrator::{
    generate_corpus, scripted_command, scripted_demo, DemonstratorStyle, StyleKind, AXIS_TOLERANCE, BLEND, RELEASE_RAMP,
};
pub use eval::{evaluate_controller, evaluate_policy, rollout, Controller, Rollout, ScriptedController};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::demo::{ActionVector, StateVector};
use crate::error::{Error, Result};
use crate::policy::{MlpConfig, TrainConfig};
use crate::rng;

pub const STATE_DIM: usize = 7;
pub const ACTION_DIM: usize = 3;
pub const TASK_ID: &str = "nut-on-peg";
pub const ROBOT_START: [f64; 2] = [-0.8, -0.8];
pub const PEG: [f64; 2] = [0.6, 0.6];
pub const BOUND: f64 = 1.0;

const SPAWN_STREAM: u64 = 4;

/// Network used for toy-world experiments: the default architecture without dropout.
///
/// Dropout at rate 0.5 on 64-unit layers leaves closed-loop rollouts too
/// imprecise to grasp and release reliably.
pub fn desk_mlp_config() -> MlpConfig {
    MlpConfig::new(STATE_DIM, ACTION_DIM).with_dropout(0.0)
}

/// Toy-world network for toy-world shaped data, the plain default otherwise.
pub fn mlp_config_for(state_dim: usize, action_dim: usize) -> MlpConfig {
    if (state_dim, action_dim) == (STATE_DIM, ACTION_DIM) {
        desk_mlp_config()
    } else {
        MlpConfig::new(state_dim, action_dim)
    }
}

/// Training schedule for toy-world experiments: 200 epochs of 64-pair batches.
pub fn desk_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 64,
        eval_every: 50,
        seed,
        ..TrainConfig::default()
    }
}

/// Toy-world schedule for toy-world shaped data, the plain default otherwise.
pub fn train_config_for(state_dim: usize, action_dim: usize, seed: u64) -> TrainConfig {
    if (state_dim, action_dim) == (STATE_DIM, ACTION_DIM) {
        desk_train_config(seed)
    } else {
        TrainConfig::default().with_seed(seed)
    }
}

/// Axis-aligned box the nut spawns in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpawnRegion {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Default for SpawnRegion {
    fn default() -> Self {
        Self {
            min: [-0.3, -0.3],
            max: [0.2, 0.2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub horizon: usize,
    pub a_max: f64,
    pub grasp_radius: f64,
    pub success_radius: f64,
    pub spawn_region: SpawnRegion,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            horizon: 200,
            a_max: 0.05,
            grasp_radius: 0.05,
            success_radius: 0.05,
            spawn_region: SpawnRegion::default(),
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("a_max", self.a_max),
            ("grasp_radius", self.grasp_radius),
            ("success_radius", self.success_radius),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::validation(format!("{name} must be positive, got {v}")));
            }
        }
        if self.horizon == 0 {
            return Err(Error::validation("horizon must be positive"));
        }
        let r = &self.spawn_region;
        for axis in 0..2 {
            let (lo, hi) = (r.min[axis], r.max[axis]);
            if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo >= -BOUND && hi <= BOUND) {
                return Err(Error::validation(format!(
                    "spawn region axis {axis} must satisfy -1 <= min <= max <= 1"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub robot_xy: [f64; 2],
    pub nut_xy: [f64; 2],
    pub peg_xy: [f64; 2],
    pub carrying: bool,
    pub step_count: usize,
}

impl WorldState {
    pub fn observe(&self) -> StateVector {
        StateVector::from_unchecked(vec![
            self.robot_xy[0],
            self.robot_xy[1],
            self.nut_xy[0],
            self.nut_xy[1],
            self.peg_xy[0],
            self.peg_xy[1],
            if self.carrying { 1.0 } else { 0.0 },
        ])
    }

    pub fn is_success(&self, cfg: &WorldConfig) -> bool {
        !self.carrying && dist(self.nut_xy, self.peg_xy) <= cfg.success_radius
    }
}

pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub fn reset(cfg: &WorldConfig, episode_seed: u64) -> Result<WorldState> {
    cfg.validate()?;
    let mut r = rng::stream(episode_seed, SPAWN_STREAM);
    let region = cfg.spawn_region;
    let mut nut = [0.0; 2];
    for axis in 0..2 {
        let (lo, hi) = (region.min[axis], region.max[axis]);
        nut[axis] = if lo == hi { lo } else { r.random_range(lo..hi) };
    }
    Ok(WorldState {
        robot_xy: ROBOT_START,
        nut_xy: nut,
        peg_xy: PEG,
        carrying: false,
        step_count: 0,
    })
}

/// Advances one tick: move, carry, then grasp or release.
pub fn step(state: &WorldState, action: &ActionVector, cfg: &WorldConfig) -> Result<(WorldState, bool)> {
    if action.len() != ACTION_DIM {
        return Err(Error::Dimension {
            what: "action",
            expected: ACTION_DIM,
            got: action.len(),
        });
    }
    let mut next = state.clone();
    for axis in 0..2 {
        let v = action[axis].clamp(-cfg.a_max, cfg.a_max);
        next.robot_xy[axis] = (state.robot_xy[axis] + v).clamp(-BOUND, BOUND);
    }
    if next.carrying {
        next.nut_xy = next.robot_xy;
    }
    let grasp = action[2];
    if grasp > 0.0 {
        if !next.carrying && dist(next.robot_xy, next.nut_xy) <= cfg.grasp_radius {
            next.carrying = true;
            next.nut_xy = next.robot_xy;
        }
    } else {
        next.carrying = false;
    }
    next.step_count += 1;
    let success = next.is_success(cfg);
    Ok((next, success))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn act(v: [f64; 3]) -> ActionVector {
        ActionVector::new(v.to_vec()).unwrap()
    }

    fn at(robot: [f64; 2], nut: [f64; 2], carrying: bool) -> WorldState {
        WorldState {
            robot_xy: robot,
            nut_xy: nut,
            peg_xy: PEG,
            carrying,
            step_count: 0,
        }
    }

    #[test]
    fn reset_is_seeded() {
        let cfg = WorldConfig::default();
        assert_eq!(reset(&cfg, 5).unwrap(), reset(&cfg, 5).unwrap());
        let mut nuts: Vec<_> = (0..100).map(|s| reset(&cfg, s).unwrap().nut_xy).collect();
        nuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        nuts.dedup();
        assert!(nuts.len() >= 99);
        let s = reset(&cfg, 1).unwrap();
        assert_eq!((s.robot_xy, s.peg_xy, s.carrying), (ROBOT_START, PEG, false));
        let point = WorldConfig {
            spawn_region: SpawnRegion {
                min: [0.1, -0.2],
                max: [0.1, -0.2],
            },
            ..cfg
        };
        assert_eq!(reset(&point, 9).unwrap().nut_xy, [0.1, -0.2]);
    }

    #[test]
    fn velocity_is_clipped() {
        let cfg = WorldConfig::default();
        let (n, _) = step(&at([0.0, 0.0], [0.5, 0.5], false), &act([0.1, 0.0, -1.0]), &cfg).unwrap();
        assert_eq!(n.robot_xy, [0.05, 0.0]);
        let (n, _) = step(&at([0.99, -0.99], [0.5, 0.5], false), &act([1.0, -1.0, -1.0]), &cfg).unwrap();
        assert_eq!(n.robot_xy, [1.0, -1.0]);
        assert_eq!(n.step_count, 1);
    }

    #[test]
    fn grasp_carry_release() {
        let cfg = WorldConfig::default();
        let s = at([0.0, 0.0], [0.0, 0.0], false);
        let (s, ok) = step(&s, &act([0.0, 0.0, 1.0]), &cfg).unwrap();
        assert!(s.carrying && !ok);
        let (s, _) = step(&s, &act([0.03, 0.02, 1.0]), &cfg).unwrap();
        assert_eq!(s.nut_xy, s.robot_xy);
        let far = at([0.0, 0.0], [0.5, 0.0], false);
        let (far, _) = step(&far, &act([0.0, 0.0, 1.0]), &cfg).unwrap();
        assert!(!far.carrying);

        let near_peg = at([0.58, 0.6], [0.58, 0.6], true);
        let (done, ok) = step(&near_peg, &act([0.0, 0.0, -1.0]), &cfg).unwrap();
        assert!(ok && !done.carrying);
        // carrying at the peg is not a success
        let (_, ok) = step(&near_peg, &act([0.02, 0.0, 1.0]), &cfg).unwrap();
        assert!(!ok);
    }

    #[test]
    fn bad_inputs() {
        let cfg = WorldConfig::default();
        let s = reset(&cfg, 0).unwrap();
        assert!(matches!(
            step(&s, &ActionVector::new(vec![0.0, 0.0]).unwrap(), &cfg),
            Err(Error::Dimension { .. })
        ));
        assert!(WorldConfig {
            a_max: 0.0,
            ..WorldConfig::default()
        }
        .validate()
        .is_err());
        assert!(WorldConfig {
            horizon: 0,
            ..WorldConfig::default()
        }
        .validate()
        .is_err());
    }
}
