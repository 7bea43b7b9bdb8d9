use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{mrsan_social_score, success_rate, EpisodeSummary, SocialScoreWeights};
use crate::env::{reset_with, Observation};
use crate::episode_log::EpisodeTrace;
use crate::error::{Error, Result};
use crate::kinematics::LocalAction;
use crate::marl::{episode_seed, ActionMode, Model, PolicyRunner};
use crate::pedestrian::{orca_velocity, OrcaAgent, OrcaParams};
use crate::scenario::{wrap_angle, KinematicLimits, PublicState, ScenarioConfig};

/// Mixed into run seeds so evaluation cases never coincide with training episodes.
const EVAL_SEED_SALT: u64 = 0xe7a1_5eed_0000_0000;
const RANDOM_POLICY_SALT: u64 = 0x7a2d_0000_0000_0001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EvalPolicy {
    /// Learned policy with centralized critics.
    Samarl,
    /// Learned policy whose critics saw only the robot's own features.
    SamarlPpo,
    /// Every robot runs reciprocal collision avoidance on what it sees.
    Orca,
    Random,
}

impl EvalPolicy {
    pub const ALL: [EvalPolicy; 4] = [Self::Samarl, Self::SamarlPpo, Self::Orca, Self::Random];

    pub fn name(self) -> &'static str {
        match self {
            Self::Samarl => "samarl",
            Self::SamarlPpo => "samarl-ppo",
            Self::Orca => "orca",
            Self::Random => "random",
        }
    }

    pub fn is_learned(self) -> bool {
        matches!(self, Self::Samarl | Self::SamarlPpo)
    }
}

impl fmt::Display for EvalPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvalPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                Error::Usage(format!(
                    "unknown policy {s:?} (samarl, samarl-ppo, orca, random)"
                ))
            })
    }
}

/// Command that makes a robot cover `target * dt` this step, as a velocity
/// held over the step would: the heading turns toward the target as far as
/// allowed and the acceleration supplies the rest of the displacement.
pub fn velocity_command(
    state: &PublicState,
    theta: f64,
    target: [f64; 2],
    dt: f64,
    limits: &KinematicLimits,
) -> LocalAction {
    let speed = target[0].hypot(target[1]);
    let heading = if speed > 1e-9 {
        target[1].atan2(target[0])
    } else {
        theta
    };
    let turn = wrap_angle(heading - theta).clamp(-limits.dtheta_max, limits.dtheta_max);
    let new_theta = wrap_angle(theta + turn);
    let v = state.speed();
    let ax = 2.0 * (target[0] - v * new_theta.cos()) / dt;
    let ay = 2.0 * (target[1] - v * new_theta.sin()) / dt;
    LocalAction::new(ax, ay, new_theta)
}

/// Baseline robot controller: ORCA over the agents in view.
pub fn orca_robot_action(
    obs: &Observation,
    orca: &OrcaParams,
    limits: &KinematicLimits,
    dt: f64,
) -> LocalAction {
    let me = &obs.self_state;
    let neighbors: Vec<PublicState> = obs.visible.iter().map(|a| a.state).collect();
    let v_cap = me.private.v_pref.min(limits.v_max);
    let target = orca_velocity(&OrcaAgent::from(me), &neighbors, orca, v_cap, dt);
    velocity_command(&me.public, me.private.theta, target, dt, limits)
}

/// Uniform acceleration in the box and a uniform turn within the cap.
pub fn random_action<R: Rng + ?Sized>(
    obs: &Observation,
    limits: &KinematicLimits,
    rng: &mut R,
) -> LocalAction {
    let ax = rng.random_range(-limits.a_max..=limits.a_max);
    let ay = rng.random_range(-limits.a_max..=limits.a_max);
    let turn = rng.random_range(-limits.dtheta_max..=limits.dtheta_max);
    LocalAction::new(ax, ay, wrap_angle(obs.self_state.private.theta + turn))
}

/// Scenario seeds of `n` evaluation cases.
pub fn eval_seeds(base: u64, n: usize) -> Vec<u64> {
    (0..n)
        .map(|i| episode_seed(base ^ EVAL_SEED_SALT, i as u64))
        .collect()
}

pub struct Evaluator {
    pub policy: EvalPolicy,
    pub scenario: ScenarioConfig,
    pub orca: OrcaParams,
    model: Option<Model>,
}

impl Evaluator {
    /// Learned policies need a checkpoint whose robot count and critic mode
    /// match; baselines take none.
    pub fn new(
        policy: EvalPolicy,
        scenario: ScenarioConfig,
        orca: OrcaParams,
        model: Option<Model>,
    ) -> Result<Self> {
        scenario.validate()?;
        match (&model, policy.is_learned()) {
            (None, true) => {
                return Err(Error::Checkpoint(format!(
                    "policy {policy} needs a checkpoint"
                )))
            }
            (Some(_), false) => {
                return Err(Error::Usage(format!("policy {policy} takes no checkpoint")))
            }
            (Some(m), true) => {
                let cfg = m.config();
                if cfg.n_robots != scenario.n_robots {
                    return Err(Error::Checkpoint(format!(
                        "checkpoint controls {} robots, scenario has {}",
                        cfg.n_robots, scenario.n_robots
                    )));
                }
                let want_single = policy == EvalPolicy::SamarlPpo;
                if cfg.single_agent != want_single {
                    return Err(Error::Checkpoint(format!(
                        "checkpoint was trained with single_agent = {}, which does not match policy {policy}",
                        cfg.single_agent
                    )));
                }
            }
            (None, false) => {}
        }
        Ok(Self {
            policy,
            scenario,
            orca,
            model,
        })
    }

    /// One deterministic episode. Learned policies act on their means.
    pub fn run_episode(&self, seed: u64) -> Result<EpisodeTrace> {
        let (mut world, mut obs) = reset_with(&self.scenario, self.orca, seed)?;
        let mut trace = EpisodeTrace::start(&world, seed);
        let mut runner = self
            .model
            .as_ref()
            .map(|m| PolicyRunner::new(m, &self.scenario, &obs));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ RANDOM_POLICY_SALT);
        let (limits, dt) = (self.scenario.limits, self.scenario.dt);
        while !world.status.is_terminal() {
            let hold = |o: &Observation| LocalAction::new(0.0, 0.0, o.self_state.private.theta);
            let actions: Vec<LocalAction> = match (self.policy, &mut runner) {
                (_, Some(r)) => {
                    let active: Vec<bool> = world.done.iter().map(|d| !d).collect();
                    let inputs = r.inputs();
                    let decisions = r.act(world.t, &active, &inputs, &mut ActionMode::Mean);
                    decisions
                        .iter()
                        .zip(&obs)
                        .map(|(d, o)| d.map_or_else(|| hold(o), |d| d.action))
                        .collect()
                }
                (EvalPolicy::Orca, None) => obs
                    .iter()
                    .map(|o| orca_robot_action(o, &self.orca, &limits, dt))
                    .collect(),
                _ => obs
                    .iter()
                    .map(|o| random_action(o, &limits, &mut rng))
                    .collect(),
            };
            let res = world.step(&actions)?;
            trace.record(&world, &res);
            if let Some(r) = &mut runner {
                r.observe(&res.observations);
            }
            obs = res.observations;
        }
        Ok(trace)
    }

    /// Runs every case in parallel; the output order follows `seeds`.
    pub fn run(&self, seeds: &[u64]) -> Result<Vec<EpisodeTrace>> {
        seeds.par_iter().map(|s| self.run_episode(*s)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: EvalPolicy,
    pub cases: usize,
    pub success_rate: f64,
    pub collision_rate: f64,
    pub timeout_rate: f64,
    /// Mean navigation time of robots that arrived; `None` if none did.
    pub mean_navigation_time: Option<f64>,
    pub mean_path_length: f64,
    pub mean_discomfort_fraction: f64,
    /// Weighted social score built on the proxy per-robot score.
    pub social_score_proxy: f64,
    pub weights: Vec<f64>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "policy,cases,success_rate,collision_rate,timeout_rate,\
mean_navigation_time,mean_path_length,mean_discomfort_fraction,social_score_proxy";

    pub fn from_summaries(
        policy: EvalPolicy,
        summaries: &[EpisodeSummary],
        weights: &SocialScoreWeights,
    ) -> Result<Self> {
        let sr = success_rate(summaries)?;
        let m = summaries.len() as f64;
        let frac =
            |f: fn(&EpisodeSummary) -> bool| summaries.iter().filter(|s| f(s)).count() as f64 / m;
        let robots: Vec<_> = summaries.iter().flat_map(|s| s.robots.iter()).collect();
        let arrived: Vec<f64> = robots
            .iter()
            .filter(|r| r.reached)
            .map(|r| r.navigation_time)
            .collect();
        let k = robots.len() as f64;
        Ok(Self {
            policy,
            cases: summaries.len(),
            success_rate: sr,
            collision_rate: frac(|s| s.collision),
            timeout_rate: frac(|s| s.timeout),
            mean_navigation_time: (!arrived.is_empty())
                .then(|| arrived.iter().sum::<f64>() / arrived.len() as f64),
            mean_path_length: robots.iter().map(|r| r.path_length).sum::<f64>() / k,
            mean_discomfort_fraction: robots.iter().map(|r| r.discomfort_fraction).sum::<f64>() / k,
            social_score_proxy: mrsan_social_score(summaries, weights)?,
            weights: weights.as_slice().to_vec(),
        })
    }

    pub fn csv_row(&self) -> String {
        let nav = self
            .mean_navigation_time
            .map_or(String::new(), |t| format!("{t:.6}"));
        format!(
            "{},{},{:.6},{:.6},{:.6},{},{:.6},{:.6},{:.6}",
            self.policy,
            self.cases,
            self.success_rate,
            self.collision_rate,
            self.timeout_rate,
            nav,
            self.mean_path_length,
            self.mean_discomfort_fraction,
            self.social_score_proxy
        )
    }

    pub fn csv(reports: &[EvalReport]) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in reports {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }

    /// Fixed-width table for terminals.
    pub fn table(reports: &[EvalReport]) -> String {
        let mut out = format!(
            "{:<11} {:>6} {:>8} {:>9} {:>8} {:>9} {:>8} {:>10} {:>12}\n",
            "policy",
            "cases",
            "success",
            "collision",
            "timeout",
            "nav_time",
            "path",
            "discomfort",
            "social*"
        );
        for r in reports {
            let nav = r
                .mean_navigation_time
                .map_or("n/a".to_string(), |t| format!("{t:.2}"));
            out.push_str(&format!(
                "{:<11} {:>6} {:>8.3} {:>9.3} {:>8.3} {:>9} {:>8.2} {:>10.3} {:>12.2}\n",
                r.policy.name(),
                r.cases,
                r.success_rate,
                r.collision_rate,
                r.timeout_rate,
                nav,
                r.mean_path_length,
                r.mean_discomfort_fraction,
                r.social_score_proxy
            ));
        }
        out.push_str("* social score is a documented proxy in [0, 100], not comparable with published numbers\n");
        out
    }
}

pub struct EvalOutcome {
    pub traces: Vec<EpisodeTrace>,
    pub summaries: Vec<EpisodeSummary>,
    pub report: EvalReport,
}

/// Evaluates one policy over `seeds` with equal robot weights. With `out`,
/// writes `logs/case_NNNN.jsonl`, `summaries.jsonl`, `report.csv` and
/// `report.txt` there.
pub fn run_policy_eval(
    evaluator: &Evaluator,
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<EvalOutcome> {
    if seeds.is_empty() {
        return Err(Error::Usage("no evaluation cases".into()));
    }
    let traces = evaluator.run(seeds)?;
    let summaries: Vec<EpisodeSummary> = traces.iter().map(EpisodeSummary::from_trace).collect();
    let weights = SocialScoreWeights::equal(evaluator.scenario.n_robots);
    let report = EvalReport::from_summaries(evaluator.policy, &summaries, &weights)?;
    if let Some(dir) = out {
        let logs = dir.join("logs");
        std::fs::create_dir_all(&logs).map_err(|e| Error::io(&logs, e))?;
        for (i, t) in traces.iter().enumerate() {
            t.write(&logs.join(format!("case_{i:04}.jsonl")))?;
        }
        let mut lines = String::new();
        for s in &summaries {
            lines.push_str(&serde_json::to_string(s)?);
            lines.push('\n');
        }
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write("summaries.jsonl", lines)?;
        write("report.csv", EvalReport::csv(std::slice::from_ref(&report)))?;
        write(
            "report.txt",
            EvalReport::table(std::slice::from_ref(&report)),
        )?;
    }
    Ok(EvalOutcome {
        traces,
        summaries,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::kinematics::{clamp_for_state, integrate};
    use crate::marl::ModelConfig;

    fn tiny_model(n_robots: usize, single_agent: bool) -> Model {
        let cfg = ModelConfig {
            n_robots,
            encoder: EncoderConfig {
                d_model: 8,
                heads: 2,
                layers: 1,
                history: 2,
            },
            hidden: 8,
            single_agent,
            ..Default::default()
        };
        Model::new(cfg, 1).unwrap()
    }

    #[test]
    fn policy_names_round_trip() {
        for p in EvalPolicy::ALL {
            assert_eq!(p.name().parse::<EvalPolicy>().unwrap(), p);
        }
        assert!(matches!(
            "cadrl".parse::<EvalPolicy>(),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn velocity_command_covers_reachable_displacement() {
        let limits = KinematicLimits::default();
        let s = PublicState {
            px: 0.0,
            py: 0.0,
            vx: 1.0,
            vy: 0.0,
            rho: 0.3,
        };
        let target = [1.0, 0.2];
        let raw = velocity_command(&s, 0.0, target, 0.25, &limits);
        let cmd = clamp_for_state(raw, &s, 0.0, 0.25, &limits);
        let (next, _) = integrate(&s, &cmd, 0.25, limits.v_max);
        assert!((next.px - target[0] * 0.25).abs() < 1e-12);
        assert!((next.py - target[1] * 0.25).abs() < 1e-12);
    }

    #[test]
    fn learned_policies_check_their_checkpoint() {
        let sc = ScenarioConfig {
            n_robots: 2,
            n_humans: 1,
            ..Default::default()
        };
        let orca = OrcaParams::default();
        let err = Evaluator::new(EvalPolicy::Samarl, sc.clone(), orca, None)
            .err()
            .unwrap();
        assert!(matches!(err, Error::Checkpoint(_)));
        let err = Evaluator::new(
            EvalPolicy::Samarl,
            sc.clone(),
            orca,
            Some(tiny_model(3, false)),
        )
        .err()
        .unwrap();
        assert!(matches!(err, Error::Checkpoint(_)));
        let err = Evaluator::new(
            EvalPolicy::SamarlPpo,
            sc.clone(),
            orca,
            Some(tiny_model(2, false)),
        )
        .err()
        .unwrap();
        assert!(matches!(err, Error::Checkpoint(_)));
        assert!(Evaluator::new(
            EvalPolicy::SamarlPpo,
            sc.clone(),
            orca,
            Some(tiny_model(2, true))
        )
        .is_ok());
        let err = Evaluator::new(EvalPolicy::Orca, sc, orca, Some(tiny_model(2, false)))
            .err()
            .unwrap();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn learned_episode_is_deterministic() {
        let sc = ScenarioConfig {
            n_robots: 2,
            n_humans: 2,
            t_k_max: 4,
            ..Default::default()
        };
        let ev = Evaluator::new(
            EvalPolicy::Samarl,
            sc,
            OrcaParams::default(),
            Some(tiny_model(2, false)),
        )
        .unwrap();
        let a = ev.run_episode(5).unwrap();
        let b = ev.run_episode(5).unwrap();
        assert_eq!(a.to_jsonl(), b.to_jsonl());
        assert!(a.status().is_terminal());
    }

    #[test]
    fn orca_clears_an_empty_world() {
        let sc = ScenarioConfig {
            n_robots: 3,
            n_humans: 0,
            ..Default::default()
        };
        let ev = Evaluator::new(EvalPolicy::Orca, sc, OrcaParams::default(), None).unwrap();
        let out = run_policy_eval(&ev, &eval_seeds(3, 40), None).unwrap();
        assert_eq!(out.report.success_rate, 1.0);
    }

    #[test]
    fn report_files_are_reproducible() {
        let sc = ScenarioConfig {
            n_robots: 1,
            n_humans: 3,
            ..Default::default()
        };
        let ev = Evaluator::new(EvalPolicy::Random, sc, OrcaParams::default(), None).unwrap();
        let seeds = eval_seeds(9, 6);
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        run_policy_eval(&ev, &seeds, Some(d1.path())).unwrap();
        run_policy_eval(&ev, &seeds, Some(d2.path())).unwrap();
        for f in [
            "report.csv",
            "report.txt",
            "summaries.jsonl",
            "logs/case_0005.jsonl",
        ] {
            let a = std::fs::read(d1.path().join(f)).unwrap();
            assert_eq!(a, std::fs::read(d2.path().join(f)).unwrap(), "{f}");
        }
        let text = std::fs::read_to_string(d1.path().join("logs/case_0002.jsonl")).unwrap();
        let offline = EpisodeSummary::from_trace(&EpisodeTrace::parse(&text).unwrap());
        let online: Vec<EpisodeSummary> =
            std::fs::read_to_string(d1.path().join("summaries.jsonl"))
                .unwrap()
                .lines()
                .map(|l| serde_json::from_str(l).unwrap())
                .collect();
        assert_eq!(offline, online[2]);
    }
}
