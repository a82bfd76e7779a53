use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{reset, step, WorldConfig, WorldState, TASK_ID};
use crate::demo::{ActionVector, DemonstrationSet, Step, Trajectory};
use crate::error::{Error, Result};
use crate::rng;

/// Residual below which the leading axis counts as reached.
pub const AXIS_TOLERANCE: f64 = 0.01;
/// Leading-axis error over which the trailing axis fades in.
pub const BLEND: f64 = 0.1;
/// Peg distance over which the grasp scalar falls from +1 to 0.
pub const RELEASE_RAMP: f64 = 0.1;
const NOISE_STREAM: u64 = 5;
const ATTEMPTS_PER_DEMO: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StyleKind {
    /// Moves along x first, then y.
    #[serde(alias = "a", alias = "A")]
    AcrossThenDown,
    /// Moves along y first, then x.
    #[serde(alias = "b", alias = "B")]
    DownThenAcross,
}

impl StyleKind {
    pub fn label(self) -> &'static str {
        match self {
            StyleKind::AcrossThenDown => "across-then-down",
            StyleKind::DownThenAcross => "down-then-across",
        }
    }

    pub fn parse(s: &str) -> Option<StyleKind> {
        match s {
            "across-then-down" | "a" | "A" => Some(StyleKind::AcrossThenDown),
            "down-then-across" | "b" | "B" => Some(StyleKind::DownThenAcross),
            _ => None,
        }
    }

    fn leading_axis(self) -> usize {
        match self {
            StyleKind::AcrossThenDown => 0,
            StyleKind::DownThenAcross => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemonstratorStyle {
    pub style: StyleKind,
    pub noise_std: f64,
    /// Largest commanded displacement per axis and step.
    #[serde(default = "default_speed")]
    pub speed: f64,
    /// Probability that an informed agent switches to the base profile after a rejection.
    pub resample_on_reject_prob: f64,
}

fn default_speed() -> f64 {
    1.0
}

impl DemonstratorStyle {
    pub fn new(style: StyleKind) -> Self {
        Self {
            style,
            noise_std: 0.005,
            speed: default_speed(),
            resample_on_reject_prob: 0.0,
        }
    }

    pub fn with_speed(mut self, speed: f64) -> Self {
        self.speed = speed;
        self
    }

    pub fn with_noise(mut self, noise_std: f64) -> Self {
        self.noise_std = noise_std;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::validation(format!(
                "noise_std must be finite and non-negative, got {}",
                self.noise_std
            )));
        }
        if !(self.speed.is_finite() && self.speed > 0.0) {
            return Err(Error::validation(format!("speed must be positive, got {}", self.speed)));
        }
        if !(0.0..=1.0).contains(&self.resample_on_reject_prob) {
            return Err(Error::validation("resample_on_reject_prob must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Noise-free waypoint command, piecewise linear in the state.
///
/// Positional error is clamped to `±speed` per axis and the world clips it to
/// the speed limit. The trailing axis is limited further by
/// `1 − |lead error| / BLEND`, so it only engages once the leading axis is
/// nearly reached. The grasp scalar is +1 on approach; while carrying it ramps
/// with the ∞-distance to the peg and turns non-positive once the peg is within
/// one step, which releases the nut on the peg.
pub fn scripted_command(style: &DemonstratorStyle, state: &WorldState, cfg: &WorldConfig) -> [f64; 3] {
    let target = if state.carrying { state.peg_xy } else { state.nut_xy };
    let d = [target[0] - state.robot_xy[0], target[1] - state.robot_xy[1]];
    let lead = style.style.leading_axis();
    let fade = (1.0 - (d[lead].abs() - AXIS_TOLERANCE).max(0.0) / BLEND).clamp(0.0, 1.0);
    let mut cmd = [0.0; 3];
    cmd[lead] = d[lead].clamp(-style.speed, style.speed);
    let trail = style.speed * fade;
    cmd[1 - lead] = d[1 - lead].clamp(-trail, trail);
    let reach = style.speed.min(cfg.a_max);
    cmd[2] = if state.carrying {
        ((d[0].abs().max(d[1].abs()) - reach) / RELEASE_RAMP).clamp(-1.0, 1.0)
    } else {
        1.0
    };
    cmd
}

/// One episode of the scripted demonstrator. The logged action is the noisy
/// command before the world clips it.
pub fn scripted_demo(style: &DemonstratorStyle, cfg: &WorldConfig, episode_seed: u64) -> Result<Trajectory> {
    style.validate()?;
    let mut state = reset(cfg, episode_seed)?;
    let mut noise_rng = rng::stream(episode_seed, NOISE_STREAM);
    let noise = Normal::new(0.0, style.noise_std).map_err(|e| Error::validation(e.to_string()))?;
    let mut steps = Vec::new();
    let mut success = false;
    while steps.len() < cfg.horizon {
        let cmd = scripted_command(style, &state, cfg);
        let noisy: Vec<f64> = cmd.iter().map(|c| c + noise.sample(&mut noise_rng)).collect();
        let action = ActionVector::new(noisy)?;
        let (next, ok) = step(&state, &action, cfg)?;
        steps.push(Step {
            state: state.observe(),
            action,
        });
        state = next;
        if ok {
            success = true;
            break;
        }
    }
    Trajectory::new(
        format!("{}-{episode_seed:016x}", style.style.label()),
        style.style.label(),
        TASK_ID,
        steps,
        success,
        cfg.horizon,
    )
}

/// Successful demonstrations for each `(style, count)` entry, in entry order.
/// Failed episodes are skipped; each entry gets at most 10× its count attempts.
pub fn generate_corpus(
    entries: &[(DemonstratorStyle, usize)],
    cfg: &WorldConfig,
    seed: u64,
) -> Result<DemonstrationSet> {
    let mut trajs = Vec::new();
    for (e, (style, count)) in entries.iter().enumerate() {
        if *count == 0 {
            return Err(Error::validation(format!("corpus entry {e} has zero count")));
        }
        let entry_seed = rng::derive(seed, e as u64);
        let mut kept = 0;
        let mut attempt = 0;
        while kept < *count {
            if attempt >= ATTEMPTS_PER_DEMO * count {
                return Err(Error::Generation(format!(
                    "entry {e} ({}) produced {kept} of {count} successful demos in {attempt} attempts",
                    style.style.label()
                )));
            }
            let t = scripted_demo(style, cfg, rng::derive(entry_seed, attempt as u64))?;
            attempt += 1;
            if t.success() {
                trajs.push(t.with_id(format!("{}-e{e}-{kept:03}", style.style.label())));
                kept += 1;
            }
        }
    }
    DemonstrationSet::new("corpus", TASK_ID, trajs)
}
