//! Synthetic naive-versus-informed collection study with scripted operators.
//!
//! Per seed: a base operator's corpus trains the base ensemble; a second
//! operator then records demonstrations once without feedback (naive) and once
//! through an elicitation session (informed). After a rejection the informed
//! operator adopts the base operator's profile with probability
//! `resample_on_reject_prob`. Both data sets are merged with the base set,
//! retrained with the same seed and evaluated on the same episodes.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::compat::{regress_thresholds, Thresholds};
use crate::curation::{curate_and_retrain, EvalSettings, FilterConfig};
use crate::demo::{union, DemonstrationSet, Trajectory};
use crate::elicitation::{Decision, ElicitationSession, SessionConfig};
use crate::error::{Error, Result};
use crate::policy::{train_ensemble, MlpConfig, PolicyEnsemble, TrainConfig, DEFAULT_ENSEMBLE_SIZE};
use crate::rng;
use crate::toyworld::{
    desk_mlp_config, desk_train_config, evaluate_policy, generate_corpus, scripted_demo, DemonstratorStyle, StyleKind,
    WorldConfig, TASK_ID,
};

const SWITCH_STREAM: u64 = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum ThresholdSource {
    /// Grid regression on held-out base-profile versus new-profile demos.
    Regressed,
    Preset {
        name: String,
    },
    Explicit {
        lambda: f64,
        eta: f64,
    },
}

impl ThresholdSource {
    /// The thresholds named by a preset or explicit source; `None` when they must be regressed.
    pub fn fixed(&self) -> Result<Option<Thresholds>> {
        match self {
            ThresholdSource::Regressed => Ok(None),
            ThresholdSource::Explicit { lambda, eta } => Thresholds::new(*lambda, *eta).map(Some),
            ThresholdSource::Preset { name } => Thresholds::preset(name)
                .map(Some)
                .ok_or_else(|| Error::validation(format!("unknown threshold preset {name:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub seeds: Vec<u64>,
    pub base_count: usize,
    pub base_profile: DemonstratorStyle,
    pub new_profile: DemonstratorStyle,
    pub target_demo_count: usize,
    /// Informed attempts allowed per target demo before giving up.
    pub max_attempts_per_demo: usize,
    pub contrast_count: usize,
    pub thresholds: ThresholdSource,
    pub session: SessionConfig,
    pub world: WorldConfig,
    pub mlp: MlpConfig,
    pub train: TrainConfig,
    pub ensemble_size: usize,
    pub eval_episodes: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        let mut new_profile = DemonstratorStyle::new(StyleKind::DownThenAcross)
            .with_noise(0.01)
            .with_speed(0.03);
        new_profile.resample_on_reject_prob = 0.8;
        Self {
            seeds: vec![0, 1, 2],
            base_count: 30,
            base_profile: DemonstratorStyle::new(StyleKind::AcrossThenDown),
            new_profile,
            target_demo_count: 5,
            max_attempts_per_demo: 10,
            contrast_count: 5,
            thresholds: ThresholdSource::Regressed,
            session: SessionConfig::default(),
            world: WorldConfig::default(),
            mlp: desk_mlp_config(),
            train: desk_train_config(0),
            ensemble_size: DEFAULT_ENSEMBLE_SIZE,
            eval_episodes: 50,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::validation("study needs at least one seed"));
        }
        if self.base_count == 0 || self.target_demo_count == 0 || self.eval_episodes == 0 {
            return Err(Error::validation(
                "base_count, target_demo_count and eval_episodes must be positive",
            ));
        }
        if self.max_attempts_per_demo == 0 {
            return Err(Error::validation("max_attempts_per_demo must be positive"));
        }
        if self.ensemble_size < 2 {
            return Err(Error::validation("ensemble_size must be at least 2"));
        }
        if matches!(self.thresholds, ThresholdSource::Regressed) && self.contrast_count == 0 {
            return Err(Error::validation("regressed thresholds need contrast_count > 0"));
        }
        self.base_profile.validate()?;
        self.new_profile.validate()?;
        self.session.validate()?;
        self.world.validate()?;
        self.mlp.validate()?;
        self.train.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: StudyConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub thresholds: Thresholds,
    /// Accuracy of the threshold fit on the contrast demos, when regressed.
    pub threshold_fit_accuracy: Option<f64>,
    pub base_success: f64,
    pub naive_success: f64,
    pub informed_success: f64,
    pub naive_demos: usize,
    pub informed_accepted: usize,
    pub informed_rejected: usize,
    /// Informed attempts recorded with the new operator's own profile.
    pub informed_own_profile_attempts: usize,
    pub informed_own_profile_rejected: usize,
    pub base_mean_length: f64,
    pub naive_mean_length: f64,
    pub informed_mean_length: f64,
    pub base_fingerprint: String,
    pub naive_fingerprint: String,
    pub informed_fingerprint: String,
}

impl SeedResult {
    pub fn informed_rejection_rate(&self) -> f64 {
        let attempts = self.informed_accepted + self.informed_rejected;
        if attempts == 0 {
            0.0
        } else {
            self.informed_rejected as f64 / attempts as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (0 for fewer than two values).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        MeanStd { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyAggregate {
    pub base_success: MeanStd,
    pub naive_success: MeanStd,
    pub informed_success: MeanStd,
    pub informed_rejection_rate: MeanStd,
    pub base_mean_length: MeanStd,
    pub naive_mean_length: MeanStd,
    pub informed_mean_length: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub config: StudyConfig,
    pub per_seed: Vec<SeedResult>,
    pub aggregate: Option<StudyAggregate>,
    /// Set when a stage failed; `per_seed` then holds the seeds completed before it.
    pub failure: Option<String>,
}

impl StudyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// Aligned plain-text rendering.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let header = [
            "seed",
            "lambda",
            "eta",
            "base",
            "naive",
            "informed",
            "accepted",
            "rejected",
            "len_base",
            "len_naive",
            "len_informed",
        ];
        let mut rows: Vec<Vec<String>> = vec![header.iter().map(|h| h.to_string()).collect()];
        for r in &self.per_seed {
            rows.push(vec![
                r.seed.to_string(),
                format!("{:.4}", r.thresholds.lambda),
                format!("{:.4}", r.thresholds.eta),
                format!("{:.2}", r.base_success),
                format!("{:.2}", r.naive_success),
                format!("{:.2}", r.informed_success),
                r.informed_accepted.to_string(),
                r.informed_rejected.to_string(),
                format!("{:.1}", r.base_mean_length),
                format!("{:.1}", r.naive_mean_length),
                format!("{:.1}", r.informed_mean_length),
            ]);
        }
        if let Some(a) = &self.aggregate {
            let ms = |m: &MeanStd, p: usize| format!("{:.*}±{:.*}", p, m.mean, p, m.std);
            rows.push(vec![
                "mean".into(),
                String::new(),
                String::new(),
                ms(&a.base_success, 2),
                ms(&a.naive_success, 2),
                ms(&a.informed_success, 2),
                String::new(),
                String::new(),
                ms(&a.base_mean_length, 1),
                ms(&a.naive_mean_length, 1),
                ms(&a.informed_mean_length, 1),
            ]);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        for row in &rows {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(cell, w)| format!("{cell:>w$}", w = *w))
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        if let Some(f) = &self.failure {
            let _ = writeln!(out, "FAILED: {f}");
        }
        out
    }
}

fn mean_length(trajs: &[Trajectory]) -> f64 {
    if trajs.is_empty() {
        return 0.0;
    }
    trajs.iter().map(|t| t.len() as f64).sum::<f64>() / trajs.len() as f64
}

fn as_set(name: &str, trajs: Vec<Trajectory>) -> Result<DemonstrationSet> {
    DemonstrationSet::new(name, TASK_ID, trajs)
}

fn resolve_thresholds(cfg: &StudyConfig, ensemble: &PolicyEnsemble, seed: u64) -> Result<(Thresholds, Option<f64>)> {
    if let Some(th) = cfg.thresholds.fixed()? {
        return Ok((th, None));
    }
    let n = cfg.contrast_count;
    let compatible = generate_corpus(&[(cfg.base_profile, n)], &cfg.world, rng::derive(seed, 2))?;
    let incompatible = generate_corpus(&[(cfg.new_profile, n)], &cfg.world, rng::derive(seed, 3))?;
    let fit = regress_thresholds(
        ensemble,
        compatible.trajectories(),
        incompatible.trajectories(),
        cfg.session.reject_fraction,
    )?;
    Ok((fit.thresholds, Some(fit.accuracy)))
}

fn retrain(cfg: &StudyConfig, base: &DemonstrationSet, new: Vec<Trajectory>, seed: u64) -> Result<PolicyEnsemble> {
    let merged = union(base, &as_set("new", new)?)?;
    let tc = cfg.train.clone().with_seed(rng::derive(seed, 11));
    train_ensemble(&merged, &cfg.mlp, &tc, cfg.ensemble_size)
}

/// Runs every stage for one seed.
pub fn run_seed(cfg: &StudyConfig, seed: u64) -> Result<SeedResult> {
    let world = &cfg.world;
    let base =
        Arc::new(generate_corpus(&[(cfg.base_profile, cfg.base_count)], world, rng::derive(seed, 1))?.renamed("base"));
    let base_tc = cfg.train.clone().with_seed(rng::derive(seed, 10));
    let ensemble = Arc::new(train_ensemble(&base, &cfg.mlp, &base_tc, cfg.ensemble_size)?);
    let (thresholds, fit_accuracy) = resolve_thresholds(cfg, &ensemble, seed)?;
    let eval_seed = rng::derive(seed, 20);
    let base_success = evaluate_policy(&ensemble, world, cfg.eval_episodes, eval_seed)?;

    // naive: every demonstration is kept
    let naive_seed = rng::derive(seed, 4);
    let naive: Vec<Trajectory> = (0..cfg.target_demo_count)
        .map(|i| {
            scripted_demo(&cfg.new_profile, world, rng::derive(naive_seed, i as u64))
                .map(|t| t.with_id(format!("naive-{i:03}")))
        })
        .collect::<Result<_>>()?;
    let naive_ensemble = retrain(cfg, &base, naive.clone(), seed)?;
    let naive_success = evaluate_policy(&naive_ensemble, world, cfg.eval_episodes, eval_seed)?;

    // informed: demonstrations go through the session
    let session_cfg = SessionConfig {
        target_demo_count: cfg.target_demo_count,
        ..cfg.session.clone()
    };
    let mut session = ElicitationSession::open(
        format!("study-{seed}"),
        cfg.new_profile.style.label(),
        base.clone(),
        ensemble.clone(),
        thresholds,
        session_cfg,
        rng::derive(seed, 6),
    )?;
    let mut profile = cfg.new_profile;
    let mut switched = false;
    let mut switch_rng = rng::stream(seed, SWITCH_STREAM);
    let informed_seed = rng::derive(seed, 5);
    let max_attempts = cfg.max_attempts_per_demo * cfg.target_demo_count;
    let (mut own_attempts, mut own_rejected) = (0, 0);
    let mut attempt = 0;
    session.begin_demonstration()?;
    while session.accepted().len() < cfg.target_demo_count {
        if attempt >= max_attempts {
            return Err(Error::Generation(format!(
                "informed operator reached {} of {} accepted demos in {attempt} attempts",
                session.accepted().len(),
                cfg.target_demo_count
            )));
        }
        let demo = scripted_demo(&profile, world, rng::derive(informed_seed, attempt as u64))?;
        attempt += 1;
        for step in demo.steps() {
            session.live_score(step.state.clone(), step.action.clone())?;
        }
        let outcome = session.finalize_demo(demo.success())?;
        if !switched {
            own_attempts += 1;
        }
        if outcome.decision == Decision::Rejected {
            if !switched {
                own_rejected += 1;
                if switch_rng.random::<f64>() < cfg.new_profile.resample_on_reject_prob {
                    profile = DemonstratorStyle {
                        resample_on_reject_prob: cfg.new_profile.resample_on_reject_prob,
                        ..cfg.base_profile
                    };
                    switched = true;
                }
            }
            session.begin_demonstration()?;
        }
    }
    let informed: Vec<Trajectory> = session.accepted().to_vec();
    let informed_ensemble = retrain(cfg, &base, informed.clone(), seed)?;
    let informed_success = evaluate_policy(&informed_ensemble, world, cfg.eval_episodes, eval_seed)?;

    Ok(SeedResult {
        seed,
        thresholds,
        threshold_fit_accuracy: fit_accuracy,
        base_success,
        naive_success,
        informed_success,
        naive_demos: naive.len(),
        informed_accepted: informed.len(),
        informed_rejected: session.rejected_count(),
        informed_own_profile_attempts: own_attempts,
        informed_own_profile_rejected: own_rejected,
        base_mean_length: mean_length(base.trajectories()),
        naive_mean_length: mean_length(&naive),
        informed_mean_length: mean_length(&informed),
        base_fingerprint: ensemble.fingerprint(),
        naive_fingerprint: naive_ensemble.fingerprint(),
        informed_fingerprint: informed_ensemble.fingerprint(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilteringResult {
    pub seed: u64,
    pub thresholds: Thresholds,
    pub base_success: f64,
    /// Retrained on base plus every new demonstration.
    pub naive_success: f64,
    /// Retrained on base plus the new data that survived filtering.
    pub filtered_success: f64,
    pub new_demos: usize,
    pub kept_pairs: usize,
    pub dropped_pairs: usize,
}

/// Offline counterpart of [`run_seed`]: `new_count` successful demonstrations
/// of the new profile are either all kept or filtered under the base ensemble
/// before retraining. Base corpus, ensemble, thresholds, retraining seed and
/// evaluation episodes are those `run_seed` uses for the same seed.
pub fn run_filtering_seed(
    cfg: &StudyConfig,
    new_count: usize,
    filter: &FilterConfig,
    seed: u64,
) -> Result<FilteringResult> {
    cfg.validate()?;
    let world = &cfg.world;
    let base = generate_corpus(&[(cfg.base_profile, cfg.base_count)], world, rng::derive(seed, 1))?.renamed("base");
    let base_tc = cfg.train.clone().with_seed(rng::derive(seed, 10));
    let ensemble = train_ensemble(&base, &cfg.mlp, &base_tc, cfg.ensemble_size)?;
    let (thresholds, _) = resolve_thresholds(cfg, &ensemble, seed)?;
    let new = generate_corpus(&[(cfg.new_profile, new_count)], world, rng::derive(seed, 4))?.renamed("new");

    let naive = retrain(cfg, &base, new.trajectories().to_vec(), seed)?;
    let eval = EvalSettings {
        world: world.clone(),
        episodes: cfg.eval_episodes,
        seed: rng::derive(seed, 20),
    };
    let tc = cfg.train.clone().with_seed(rng::derive(seed, 11));
    let (_, report) = curate_and_retrain(&base, &new, &ensemble, &thresholds, filter, &tc, &eval)?;
    Ok(FilteringResult {
        seed,
        thresholds,
        base_success: report.success_rate_before,
        naive_success: evaluate_policy(&naive, world, eval.episodes, eval.seed)?,
        filtered_success: report.success_rate_after,
        new_demos: new.len(),
        kept_pairs: report.kept_pairs,
        dropped_pairs: report.dropped_pairs,
    })
}

pub fn aggregate(per_seed: &[SeedResult]) -> Option<StudyAggregate> {
    if per_seed.is_empty() {
        return None;
    }
    let col = |f: fn(&SeedResult) -> f64| MeanStd::of(&per_seed.iter().map(f).collect::<Vec<_>>());
    Some(StudyAggregate {
        base_success: col(|r| r.base_success),
        naive_success: col(|r| r.naive_success),
        informed_success: col(|r| r.informed_success),
        informed_rejection_rate: col(|r| r.informed_rejection_rate()),
        base_mean_length: col(|r| r.base_mean_length),
        naive_mean_length: col(|r| r.naive_mean_length),
        informed_mean_length: col(|r| r.informed_mean_length),
    })
}

/// Runs all seeds in order. A failing stage stops the run and is reported in
/// `failure` alongside the seeds that completed.
pub fn simulate_study(cfg: &StudyConfig) -> StudyReport {
    let mut per_seed = Vec::new();
    let mut failure = cfg.validate().err().map(|e| e.to_string());
    if failure.is_none() {
        for &seed in &cfg.seeds {
            match run_seed(cfg, seed) {
                Ok(r) => per_seed.push(r),
                Err(e) => {
                    failure = Some(format!("seed {seed}: {e}"));
                    break;
                }
            }
        }
    }
    StudyReport {
        config: cfg.clone(),
        aggregate: if failure.is_none() { aggregate(&per_seed) } else { None },
        per_seed,
        failure,
    }
}
