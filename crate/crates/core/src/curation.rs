//! Offline curation: filter a new operator's data by compatibility, merge it
//! with the base set, retrain and compare rollout success.

use serde::{Deserialize, Serialize};

use crate::compat::{assess, incompatible_fraction, score_trajectory, Thresholds};
use crate::demo::{union, DemonstrationSet};
use crate::error::{Error, Result};
use crate::policy::{train_ensemble, PolicyEnsemble, TrainConfig};
use crate::toyworld::{evaluate_policy, WorldConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// Drop individual pairs scoring at or below the cutoff.
    #[default]
    Pair,
    /// Drop whole trajectories whose zero-score fraction exceeds the limit.
    Trajectory,
}

impl Granularity {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pair" => Some(Granularity::Pair),
            "trajectory" => Some(Granularity::Trajectory),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub score_cutoff: f64,
    pub granularity: Granularity,
    pub trajectory_reject_fraction: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            score_cutoff: 0.0,
            granularity: Granularity::Pair,
            trajectory_reject_fraction: 0.05,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score_cutoff) {
            return Err(Error::validation(format!(
                "score_cutoff must lie in [0, 1], got {}",
                self.score_cutoff
            )));
        }
        if !(0.0..=1.0).contains(&self.trajectory_reject_fraction) {
            return Err(Error::validation(format!(
                "trajectory_reject_fraction must lie in [0, 1], got {}",
                self.trajectory_reject_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub kept_pairs: usize,
    pub dropped_pairs: usize,
    pub kept_trajectories: usize,
}

/// Removes incompatible data from `new_set` under a fixed ensemble.
pub fn filter_set(
    ensemble: &PolicyEnsemble,
    new_set: &DemonstrationSet,
    th: &Thresholds,
    cfg: &FilterConfig,
) -> Result<(DemonstrationSet, FilterStats)> {
    cfg.validate()?;
    th.validate()?;
    let mut kept = Vec::new();
    for traj in new_set.trajectories() {
        match cfg.granularity {
            Granularity::Pair => {
                let scores = traj
                    .steps()
                    .iter()
                    .map(|s| Ok(assess(ensemble, &s.state, &s.action, th)?.score))
                    .collect::<Result<Vec<f64>>>()?;
                if let Some(t) = traj.retain_steps(|i, _| scores[i] > cfg.score_cutoff) {
                    kept.push(t);
                }
            }
            Granularity::Trajectory => {
                let (records, _) = score_trajectory(ensemble, traj, th)?;
                if incompatible_fraction(&records) <= cfg.trajectory_reject_fraction {
                    kept.push(traj.clone());
                }
            }
        }
    }
    let kept_pairs: usize = kept.iter().map(|t| t.len()).sum();
    let stats = FilterStats {
        kept_pairs,
        dropped_pairs: new_set.pair_count() - kept_pairs,
        kept_trajectories: kept.len(),
    };
    let filtered = DemonstrationSet::new(new_set.name(), new_set.task_id(), kept)?;
    Ok((filtered, stats))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationReport {
    pub kept_pairs: usize,
    pub dropped_pairs: usize,
    pub kept_trajectories: usize,
    pub success_rate_before: f64,
    pub success_rate_after: f64,
    pub seeds: Vec<u64>,
    pub thresholds: Thresholds,
    pub filter: FilterConfig,
    pub base_policy_fingerprint: String,
    pub new_policy_fingerprint: String,
}

/// Rollout settings shared by the compared policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub world: WorldConfig,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            episodes: 50,
            seed: 0,
        }
    }
}

/// Trains on `base ∪ filter(new_set)` with the ensemble's architecture and size,
/// and evaluates both policies on the same episode seeds.
pub fn curate_and_retrain(
    base: &DemonstrationSet,
    new_set: &DemonstrationSet,
    ensemble: &PolicyEnsemble,
    th: &Thresholds,
    cfg: &FilterConfig,
    train_cfg: &TrainConfig,
    eval: &EvalSettings,
) -> Result<(PolicyEnsemble, CurationReport)> {
    let (filtered, stats) = filter_set(ensemble, new_set, th, cfg)?;
    let merged = union(base, &filtered)?;
    let retrained = train_ensemble(&merged, ensemble.config(), train_cfg, ensemble.k())?;
    let before = evaluate_policy(ensemble, &eval.world, eval.episodes, eval.seed)?;
    let after = evaluate_policy(&retrained, &eval.world, eval.episodes, eval.seed)?;
    let report = CurationReport {
        kept_pairs: stats.kept_pairs,
        dropped_pairs: stats.dropped_pairs,
        kept_trajectories: stats.kept_trajectories,
        success_rate_before: before,
        success_rate_after: after,
        seeds: vec![train_cfg.seed, eval.seed],
        thresholds: *th,
        filter: *cfg,
        base_policy_fingerprint: ensemble.fingerprint(),
        new_policy_fingerprint: retrained.fingerprint(),
    };
    Ok((retrained, report))
}
