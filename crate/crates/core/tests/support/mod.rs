//! Independent oracles and criterion checks shared by integration tests and the
//! acceptance runner. Each check returns a short detail line on success.
#![allow(dead_code)]

use std::cell::Cell;
use std::sync::Arc;

use proptest::collection::vec;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};

use elicit_core::compat::{
    assess, build_map, regress_from_features, regress_thresholds, CompatibilityRecord, StepFeatures, Thresholds,
};
use elicit_core::demo::{ActionVector, DemonstrationSet, StateVector, Step, Trajectory};
use elicit_core::elicitation::{select_candidates, Decision, ElicitationSession, SessionConfig};
use elicit_core::policy::{gradient_check, MlpConfig, MlpParameters, PolicyEnsemble};
use elicit_core::rng;
use elicit_core::study::StudyConfig;

pub type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

pub fn runner(cases: u32) -> TestRunner {
    let config = Config {
        cases,
        failure_persistence: None,
        max_global_rejects: cases.max(1024),
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn run<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> std::result::Result<(), TestCaseError>,
) -> std::result::Result<(), String>
where
    S::Value: std::fmt::Debug,
{
    runner(cases).run(&strategy, test).map_err(|e| e.to_string())
}

/// Two one-unit members computing `s` and `−s` for a scalar state `s ≥ 0`:
/// novelty is `s`, the mean prediction is 0 and the MSE of action `a` is `a²`.
pub fn mirror_ensemble() -> PolicyEnsemble {
    let cfg = MlpConfig::new(1, 1)
        .with_hidden([1])
        .with_layer_norm(false)
        .with_dropout(0.0);
    let member = |sign: f64| {
        let mut p = MlpParameters::zeros(&cfg).unwrap();
        p.hidden[0].dense.weight[[0, 0]] = 1.0;
        p.output.weight[[0, 0]] = sign;
        p
    };
    PolicyEnsemble::from_members(cfg.clone(), vec![member(1.0), member(-1.0)], vec![0, 1]).unwrap()
}

/// Members that ignore the state and output fixed vectors.
pub fn constant_ensemble(state_dim: usize, outputs: &[Vec<f64>]) -> PolicyEnsemble {
    let cfg = MlpConfig::new(state_dim, outputs[0].len())
        .with_hidden([2])
        .with_layer_norm(false)
        .with_dropout(0.0);
    let members = outputs
        .iter()
        .map(|o| {
            let mut p = MlpParameters::zeros(&cfg).unwrap();
            for (b, v) in p.output.bias.iter_mut().zip(o) {
                *b = *v;
            }
            p
        })
        .collect();
    PolicyEnsemble::from_members(cfg, members, (0..outputs.len() as u64).collect()).unwrap()
}

pub fn state(v: &[f64]) -> StateVector {
    StateVector::new(v.to_vec()).unwrap()
}

pub fn action(v: &[f64]) -> ActionVector {
    ActionVector::new(v.to_vec()).unwrap()
}

pub fn trajectory(id: &str, pairs: &[(Vec<f64>, Vec<f64>)]) -> Trajectory {
    let steps = pairs
        .iter()
        .map(|(s, a)| Step {
            state: state(s),
            action: action(a),
        })
        .collect();
    Trajectory::new(id, "op", "task", steps, true, pairs.len().max(1)).unwrap()
}

/// The score written out branch by branch, from analytically known features.
pub fn oracle_score(novelty: f64, mse: f64, th: &Thresholds) -> f64 {
    if novelty >= th.eta {
        1.0
    } else if mse >= th.lambda {
        0.0
    } else {
        1.0 - mse / th.lambda
    }
}

pub fn check_score_formula(cases: u32) -> Check {
    let e = mirror_ensemble();
    let branches = [Cell::new(0usize), Cell::new(0), Cell::new(0)];
    let strategy = (0.0..0.3f64, -1.5..1.5f64, 0.01..2.0f64, 0.001..0.25f64);
    run(cases, strategy, |(s, a, lambda, eta)| {
        prop_assume!((s - eta).abs() > 1e-9);
        let th = Thresholds::new(lambda, eta).unwrap();
        let got = assess(&e, &state(&[s]), &action(&[a]), &th).unwrap();
        let mse = a * a;
        prop_assert!((got.novelty - s).abs() <= 1e-12, "novelty {} vs {s}", got.novelty);
        prop_assert!((got.likelihood + mse).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&got.score));
        let want = oracle_score(s, mse, &th);
        if s >= eta {
            branches[0].set(branches[0].get() + 1);
            prop_assert_eq!(got.score, 1.0);
        } else if mse >= lambda {
            branches[1].set(branches[1].get() + 1);
            prop_assert_eq!(got.score, 0.0);
        } else {
            branches[2].set(branches[2].get() + 1);
        }
        prop_assert!((got.score - want).abs() <= 1e-12, "score {} vs {want}", got.score);
        Ok(())
    })?;
    let [n, z, l] = branches.map(|c| c.get());
    ensure!(n > 0 && z > 0 && l > 0, "a branch was never exercised ({n}, {z}, {l})");
    Ok(format!("{cases} cases: novel {n}, saturated {z}, linear {l}"))
}

pub const OPERATING_POINTS: [(&str, f64, f64); 3] = [
    ("square-nut", 0.4, 0.05),
    ("round-nut", 0.35, 0.05),
    ("hammer-placement", 0.35, 0.06),
];

pub fn check_operating_points() -> Check {
    let e = mirror_ensemble();
    let set = DemonstrationSet::new(
        "probe",
        "task",
        vec![trajectory("t", &[(vec![0.0], vec![0.1]), (vec![0.2], vec![0.9])])],
    )
    .unwrap();
    for (name, lambda, eta) in OPERATING_POINTS {
        let want = Thresholds { lambda, eta };
        ensure!(Thresholds::preset(name) == Some(want), "preset {name} differs");
        let cfg = StudyConfig::from_json(&format!(
            r#"{{"thresholds": {{"source": "preset", "name": "{name}"}}}}"#
        ))
        .map_err(|e| e.to_string())?;
        let loaded = cfg.thresholds.fixed().map_err(|e| e.to_string())?;
        ensure!(loaded == Some(want), "config for {name} resolved to {loaded:?}");
        let explicit: Thresholds = serde_json::from_str(&format!(r#"{{"lambda": {lambda}, "eta": {eta}}}"#)).unwrap();
        ensure!(explicit == want, "explicit thresholds for {name} differ");
        let map = build_map(&e, &set, &want).map_err(|e| e.to_string())?;
        let echoed = serde_json::to_value(map.thresholds).unwrap();
        ensure!(
            echoed["lambda"].as_f64() == Some(lambda) && echoed["eta"].as_f64() == Some(eta),
            "report echo for {name} is {echoed}"
        );
    }
    Ok("3 presets load and echo exactly".into())
}

pub fn gradient_configs() -> Vec<MlpConfig> {
    vec![
        MlpConfig::new(7, 3).with_hidden([16, 16]),
        MlpConfig::new(7, 3).with_hidden([16, 16]).with_layer_norm(false),
        MlpConfig::new(3, 2).with_hidden([8]),
        MlpConfig::new(5, 1).with_hidden([4, 12, 6]),
    ]
}

pub fn check_gradient_fidelity(seeds: u64) -> Check {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let cfg = &gradient_configs()[seed as usize % gradient_configs().len()];
        let err = gradient_check(cfg, seed).map_err(|e| e.to_string())?;
        ensure!(err < 1e-4, "seed {seed}: relative error {err:e}");
        worst = worst.max(err);
    }
    Ok(format!("{seeds} seeds, max relative error {worst:.2e}"))
}

fn boundary_base() -> Arc<DemonstrationSet> {
    let trajs = (0..5)
        .map(|k| trajectory(&format!("b{k}"), &vec![(vec![k as f64], vec![0.0]); 20]))
        .collect();
    Arc::new(DemonstrationSet::new("base", "task", trajs).unwrap())
}

/// Decision for a 200-step demo with `bad` zero-score steps spread through it.
pub fn boundary_decision(bad: usize) -> (Decision, usize, usize) {
    let e = Arc::new(constant_ensemble(1, &[vec![0.0], vec![0.0]]));
    let mut s = ElicitationSession::open(
        "boundary",
        "op",
        boundary_base(),
        e,
        Thresholds::SQUARE_NUT,
        SessionConfig::default(),
        0,
    )
    .unwrap();
    s.begin_demonstration().unwrap();
    for i in 0..200 {
        let a = if i % 18 == 5 && i / 18 < bad { 1.0 } else { 0.05 };
        s.live_score(state(&[i as f64 / 200.0]), action(&[a])).unwrap();
    }
    let out = s.finalize_demo(true).unwrap();
    (out.decision, out.zero_count, out.candidates.len())
}

pub fn check_rejection_boundary() -> Check {
    let (d10, z10, c10) = boundary_decision(10);
    let (d11, z11, c11) = boundary_decision(11);
    ensure!(z10 == 10 && z11 == 11, "zero counts {z10}, {z11}");
    ensure!(d10 == Decision::Accepted, "10/200 gave {d10:?}");
    ensure!(d11 == Decision::Rejected, "11/200 gave {d11:?}");
    ensure!(c10 == 0 && c11 == 3, "candidate counts {c10}, {c11}");
    Ok("10/200 accepted, 11/200 rejected with 3 candidates".into())
}

/// Exhaustive search over key-ordered tuples of pairwise disjoint windows.
/// Windows are keyed by (larger integer sum, then smaller start); the answer
/// is the lexicographically best tuple, a longer tuple beating its own prefix.
/// Returns `(start, end, sum)` per window.
pub fn brute_force_windows(bad: &[u32], window: usize, count: usize) -> Vec<(usize, usize, u32)> {
    let n = bad.len();
    if n == 0 || window == 0 || count == 0 {
        return Vec::new();
    }
    let w = window.min(n);
    let wins: Vec<(usize, usize, u32)> = (0..=n - w)
        .map(|s| (s, s + w - 1, bad[s..s + w].iter().sum()))
        .collect();
    fn ahead(a: &(usize, usize, u32), b: &(usize, usize, u32)) -> bool {
        a.2 > b.2 || (a.2 == b.2 && a.0 < b.0)
    }
    fn better(cand: &[(usize, usize, u32)], best: &[(usize, usize, u32)]) -> bool {
        for (c, b) in cand.iter().zip(best) {
            if c != b {
                return ahead(c, b);
            }
        }
        cand.len() > best.len()
    }
    /// A prefix that already loses to `best` cannot extend to a winner.
    fn losing(cur: &[(usize, usize, u32)], best: &[(usize, usize, u32)]) -> bool {
        for (c, b) in cur.iter().zip(best) {
            if c != b {
                return ahead(b, c);
            }
        }
        false
    }
    fn dfs(
        wins: &[(usize, usize, u32)],
        count: usize,
        cur: &mut Vec<(usize, usize, u32)>,
        best: &mut Vec<(usize, usize, u32)>,
    ) {
        if losing(cur, best) {
            return;
        }
        let mut extended = false;
        if cur.len() < count {
            for c in wins {
                let fits = cur.last().is_none_or(|l| ahead(l, c)) && cur.iter().all(|p| c.1 < p.0 || p.1 < c.0);
                if fits {
                    extended = true;
                    cur.push(*c);
                    dfs(wins, count, cur, best);
                    cur.pop();
                }
            }
        }
        if !extended && better(cur, best) {
            *best = cur.clone();
        }
    }
    let mut best = Vec::new();
    dfs(&wins, count, &mut Vec::new(), &mut best);
    best
}

fn quarter_records(quarters: &[u32]) -> Vec<CompatibilityRecord> {
    quarters
        .iter()
        .enumerate()
        .map(|(i, &q)| CompatibilityRecord {
            trajectory_id: "t".into(),
            step_index: i,
            novelty: 0.0,
            likelihood: 0.0,
            score: q as f64 / 4.0,
        })
        .collect()
}

pub fn check_window_oracle(cases: u32) -> Check {
    let strategy = (1..=100usize).prop_flat_map(|n| (vec(0..=4u32, n), 1..=12usize, 1..=3usize));
    run(cases, strategy, |(quarters, w, count)| {
        let greedy = select_candidates(&quarter_records(&quarters), w, count);
        let bad: Vec<u32> = quarters.iter().map(|q| 4 - q).collect();
        let oracle = brute_force_windows(&bad, w, count);
        prop_assert_eq!(greedy.len(), oracle.len());
        let wl = w.min(quarters.len()) as f64;
        for (g, (start, end, sum)) in greedy.iter().zip(&oracle) {
            prop_assert_eq!((g.start_step, g.end_step), (*start, *end));
            prop_assert!((g.mean_incompatibility - *sum as f64 / (4.0 * wl)).abs() < 1e-12);
        }
        Ok(())
    })?;
    Ok(format!("{cases} sequences agree with exhaustive search"))
}

/// Incompatible iff more than `reject_fraction` of steps are familiar with MSE ≥ λ.
fn oracle_incompatible(steps: &[StepFeatures], lambda: f64, eta: f64, reject_fraction: f64) -> bool {
    let mut zero = 0usize;
    for f in steps {
        if f.novelty < eta && f.mse >= lambda {
            zero += 1;
        }
    }
    (zero as f64) > reject_fraction * (steps.len() as f64)
}

/// Best accuracy over a grid `factor` times finer than the coarse search, spanning the same range.
pub fn fine_grid_accuracy(
    compatible: &[Vec<StepFeatures>],
    incompatible: &[Vec<StepFeatures>],
    reject_fraction: f64,
    factor: usize,
) -> f64 {
    let all: Vec<StepFeatures> = compatible.iter().chain(incompatible).flatten().copied().collect();
    let nov_lo = all.iter().map(|f| f.novelty).fold(f64::INFINITY, f64::min);
    let nov_hi = all.iter().map(|f| f.novelty).fold(f64::NEG_INFINITY, f64::max);
    let max_mse = all.iter().map(|f| f.mse).fold(0.0, f64::max);
    let r = if max_mse > 0.0 { max_mse } else { 1.0 };
    let lambdas: Vec<f64> = {
        let n = 49 * factor + 1;
        (0..n)
            .map(|i| 1e-3 * r * 10f64.powf(4.0 * i as f64 / (n - 1) as f64))
            .collect()
    };
    let mut cell = (nov_hi - nov_lo) / 49.0;
    if cell <= 0.0 {
        cell = nov_hi.abs().max(1e-9) * 0.02;
    }
    let etas: Vec<f64> = (1..=50 * factor)
        .map(|j| nov_lo + j as f64 * cell / factor as f64)
        .collect();
    let total = (compatible.len() + incompatible.len()) as f64;
    let mut best = 0usize;
    for &lambda in &lambdas {
        for &eta in &etas {
            let correct = compatible
                .iter()
                .filter(|t| !oracle_incompatible(t, lambda, eta, reject_fraction))
                .count()
                + incompatible
                    .iter()
                    .filter(|t| oracle_incompatible(t, lambda, eta, reject_fraction))
                    .count();
            best = best.max(correct);
        }
    }
    best as f64 / total
}

/// Labelled corpora whose separating region is wider than one coarse cell on both axes:
/// familiar-step MSE stays below `a`, the other style's familiar MSE lies in
/// `[b, 2b]` with `b ≥ 1.5a`, and high-novelty steps sit at least 0.1 above the familiar ones.
/// `duplicates` incompatible trajectories are copied onto the compatible side, which no
/// threshold pair can separate.
pub fn margin_corpus(seed: u64, duplicates: usize) -> (Vec<Vec<StepFeatures>>, Vec<Vec<StepFeatures>>) {
    use rand::Rng as _;
    let mut r = rng::stream(seed, 0);
    let a: f64 = r.random_range(0.01..0.2);
    let b = a * r.random_range(1.5..4.0);
    let nov_familiar: f64 = r.random_range(0.02..0.3);
    let nov_novel = nov_familiar + r.random_range(0.1..0.5);
    let len = 16;
    let traj = |bad_fraction: f64, r: &mut rng::Rng| -> Vec<StepFeatures> {
        (0..len)
            .map(|_| {
                let roll: f64 = r.random();
                if roll < 0.2 {
                    StepFeatures {
                        novelty: r.random_range(nov_novel..nov_novel + 0.3),
                        mse: r.random_range(0.0..2.0 * b),
                    }
                } else if roll < 0.2 + bad_fraction {
                    StepFeatures {
                        novelty: r.random_range(0.0..nov_familiar),
                        mse: r.random_range(b..2.0 * b),
                    }
                } else {
                    StepFeatures {
                        novelty: r.random_range(0.0..nov_familiar),
                        mse: r.random_range(0.0..a),
                    }
                }
            })
            .collect()
    };
    let n_comp = r.random_range(3..7);
    let n_inc = r.random_range(3..7);
    let mut compatible: Vec<Vec<StepFeatures>> = (0..n_comp).map(|_| traj(0.0, &mut r)).collect();
    let incompatible: Vec<Vec<StepFeatures>> = (0..n_inc)
        .map(|_| {
            // at least 2 familiar bad steps of 16 beats the 5% rule
            let mut t = traj(r.random_range(0.25..0.6), &mut r);
            t[0] = StepFeatures { novelty: 0.0, mse: b };
            t[1] = StepFeatures {
                novelty: nov_familiar * 0.5,
                mse: 1.5 * b,
            };
            t
        })
        .collect();
    for i in 0..duplicates.min(incompatible.len()) {
        compatible.push(incompatible[i].clone());
    }
    (compatible, incompatible)
}

pub fn check_regression_oracle(corpora: u64) -> Check {
    let rf = 0.05;
    for seed in 0..corpora {
        let duplicates = (seed % 3) as usize;
        let (comp, inc) = margin_corpus(seed, duplicates);
        let coarse = regress_from_features(&comp, &inc, rf).map_err(|e| e.to_string())?;
        let fine = fine_grid_accuracy(&comp, &inc, rf, 10);
        ensure!(
            coarse.accuracy == fine,
            "corpus {seed}: coarse {} vs fine {fine}",
            coarse.accuracy
        );
        let ideal = 1.0 - duplicates as f64 / (comp.len() + inc.len()) as f64;
        ensure!(
            (fine - ideal).abs() < 1e-12,
            "corpus {seed}: fine {fine} vs ideal {ideal}"
        );
        if duplicates == 0 {
            ensure!(
                coarse.accuracy == 1.0,
                "separable corpus {seed} scored {}",
                coarse.accuracy
            );
        }
    }
    let scaled = check_regression_scaling()?;
    Ok(format!("{corpora} corpora match the 10x oracle; {scaled}"))
}

/// Doubling every action quadruples the MSE axis, so the fit scales λ by 4 and
/// keeps η and the accuracy.
pub fn check_regression_scaling() -> Check {
    let e = mirror_ensemble();
    let (comp, inc) = margin_corpus(99, 1);
    let to_traj = |side: &str, k: usize, steps: &[StepFeatures], scale: f64| {
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = steps
            .iter()
            .map(|f| (vec![f.novelty], vec![scale * f.mse.sqrt()]))
            .collect();
        trajectory(&format!("{side}{k}"), &pairs)
    };
    let build = |scale: f64| {
        let c: Vec<Trajectory> = comp
            .iter()
            .enumerate()
            .map(|(k, t)| to_traj("c", k, t, scale))
            .collect();
        let i: Vec<Trajectory> = inc.iter().enumerate().map(|(k, t)| to_traj("i", k, t, scale)).collect();
        regress_thresholds(&e, &c, &i, 0.05).unwrap()
    };
    let (one, two) = (build(1.0), build(2.0));
    ensure!(
        one.accuracy == two.accuracy,
        "accuracy {} vs {}",
        one.accuracy,
        two.accuracy
    );
    ensure!(one.thresholds.eta == two.thresholds.eta, "eta moved");
    let ratio = two.thresholds.lambda / one.thresholds.lambda;
    ensure!((ratio - 4.0).abs() < 1e-9, "lambda ratio {ratio}");
    Ok(format!("doubled actions keep accuracy {}", one.accuracy))
}
