use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::losses::{gae, gae_discounted};
use super::model::{
    gaussian_log_prob, local_action_from_raw, rows_tensor, waypoint_feature, waypoint_from_raw,
    Model, LA_DIM, MA_DIM,
};
use crate::encoder::{build_input, EncoderInput, GoalFrame};
use crate::env::{macro_reward, reset_with, EpisodeStatus, HistoryBuffer, Observation};
use crate::error::Result;
use crate::kinematics::LocalAction;
use crate::nn::Graph;
use crate::pedestrian::OrcaParams;
use crate::scenario::{KinematicLimits, ScenarioConfig};

/// How raw actions are drawn from the actor Gaussians.
pub enum ActionMode<'r> {
    Sample(&'r mut ChaCha8Rng),
    Mean,
}

/// One robot's choice at one step.
#[derive(Debug, Clone, Copy)]
pub struct RobotDecision {
    /// Set at decision epochs: raw MA sample and its log-probability.
    pub ma: Option<([f64; MA_DIM], f64)>,
    pub la_raw: [f64; LA_DIM],
    pub la_logp: f64,
    pub action: LocalAction,
}

/// Decentralized execution of the hierarchical policy. Each robot reads
/// only its own history buffer.
pub struct PolicyRunner<'m> {
    model: &'m Model,
    pub histories: Vec<HistoryBuffer>,
    /// Current waypoint of each robot in world coordinates.
    pub waypoints: Vec<Option<[f64; 2]>>,
    n_humans: usize,
    macro_period: usize,
    limits: KinematicLimits,
}

fn draw<const K: usize>(mean: &[f64], log_std: &[f64], mode: &mut ActionMode) -> [f64; K] {
    let mut out = [0.0; K];
    for k in 0..K {
        out[k] = match mode {
            ActionMode::Mean => mean[k],
            ActionMode::Sample(rng) => {
                let e: f64 = rng.sample(StandardNormal);
                mean[k] + log_std[k].exp() * e
            }
        };
    }
    out
}

impl<'m> PolicyRunner<'m> {
    pub fn new(model: &'m Model, scenario: &ScenarioConfig, observations: &[Observation]) -> Self {
        let l = model.config().encoder.history;
        let histories = observations
            .iter()
            .map(|o| {
                let mut h = HistoryBuffer::new(l);
                h.push(o.clone());
                h
            })
            .collect();
        Self {
            model,
            histories,
            waypoints: vec![None; scenario.n_robots],
            n_humans: scenario.n_humans,
            macro_period: scenario.macro_period,
            limits: scenario.limits,
        }
    }

    pub fn observe(&mut self, observations: &[Observation]) {
        for (h, o) in self.histories.iter_mut().zip(observations) {
            h.push(o.clone());
        }
    }

    pub fn inputs(&self) -> Vec<EncoderInput> {
        let n = self.histories.len();
        self.histories
            .iter()
            .map(|h| build_input(h, n, self.n_humans))
            .collect()
    }

    fn frame(&self, robot: usize) -> GoalFrame {
        GoalFrame::of(self.histories[robot].latest().expect("non-empty history"))
    }

    /// Waypoint features of every robot in its own current frame.
    pub fn waypoint_features(&self) -> Vec<[f64; 2]> {
        (0..self.histories.len())
            .map(|i| {
                let f = self.frame(i);
                waypoint_feature(&f, self.waypoints[i].unwrap_or(f.origin))
            })
            .collect()
    }

    /// Decisions for the `active` robots at step `t`. A new waypoint is drawn
    /// at every `macro_period`-th step or when a robot has none yet.
    pub fn act(
        &mut self,
        t: usize,
        active: &[bool],
        inputs: &[EncoderInput],
        mode: &mut ActionMode,
    ) -> Vec<Option<RobotDecision>> {
        let arch = &self.model.arch;
        let store = &self.model.store;
        let robots: Vec<usize> = (0..active.len()).filter(|i| active[*i]).collect();
        let mut out = vec![None; active.len()];
        if robots.is_empty() {
            return out;
        }
        let n = robots.len();
        let mut g = Graph::new(store);
        let refs: Vec<&EncoderInput> = robots.iter().map(|i| &inputs[*i]).collect();
        let y = arch.actor_features(&mut g, &refs, &robots);
        let ma_mean = arch.ma_mean(&mut g, y, &robots);
        let epoch_start = t.is_multiple_of(self.macro_period);
        let mut ma = vec![None; n];
        for (k, &i) in robots.iter().enumerate() {
            if epoch_start || self.waypoints[i].is_none() {
                let ls = &store.value(arch.actor_set(i).ma.log_std).data;
                let mean = &g.value(ma_mean).data[k * MA_DIM..(k + 1) * MA_DIM];
                let raw: [f64; MA_DIM] = draw(mean, ls, mode);
                let lp = gaussian_log_prob(&raw, mean, ls);
                self.waypoints[i] = Some(waypoint_from_raw(&self.frame(i), raw));
                ma[k] = Some((raw, lp));
            }
        }
        let wp_rows: Vec<Vec<f64>> = robots
            .iter()
            .map(|i| waypoint_feature(&self.frame(*i), self.waypoints[*i].unwrap()).to_vec())
            .collect();
        let wp = g.input(rows_tensor(&wp_rows));
        let la_mean = arch.la_mean(&mut g, y, wp, &robots);
        for (k, &i) in robots.iter().enumerate() {
            let ls = &store.value(arch.actor_set(i).la.log_std).data;
            let mean = &g.value(la_mean).data[k * LA_DIM..(k + 1) * LA_DIM];
            let raw: [f64; LA_DIM] = draw(mean, ls, mode);
            let lp = gaussian_log_prob(&raw, mean, ls);
            let theta = self.histories[i].latest().unwrap().self_state.private.theta;
            let action = local_action_from_raw(&self.frame(i), theta, raw, &self.limits);
            out[i] = Some(RobotDecision {
                ma: ma[k],
                la_raw: raw,
                la_logp: lp,
                action,
            });
        }
        out
    }
}

/// Robot order seen by the critics when evaluating robot `i`: itself first,
/// then the others cyclically (only itself in single-agent mode).
pub fn rotated(i: usize, n: usize, single_agent: bool) -> Vec<usize> {
    if single_agent {
        vec![i]
    } else {
        (0..n).map(|k| (i + k) % n).collect()
    }
}

/// MA and LA critic values of every robot for the joint inputs of one step.
pub fn critic_values(
    model: &Model,
    inputs: &[EncoderInput],
    waypoints: &[[f64; 2]],
) -> (Vec<f64>, Vec<f64>) {
    let arch = &model.arch;
    let n = inputs.len();
    let single = arch.config.single_agent;
    let mut g = Graph::new(&model.store);
    let refs: Vec<&EncoderInput> = inputs.iter().collect();
    let feats = arch.critic_features(&mut g, &refs);
    let mut joint = Vec::new();
    let mut wp_rows = Vec::new();
    for i in 0..n {
        let order = rotated(i, n, single);
        joint.extend(order.iter().copied());
        wp_rows.push(
            order
                .iter()
                .flat_map(|j| waypoints[*j])
                .collect::<Vec<f64>>(),
        );
    }
    let wp = g.input(rows_tensor(&wp_rows));
    let v = arch.ma_value(&mut g, feats, &joint, n);
    let v2 = arch.la_value(&mut g, feats, &joint, wp, n);
    (g.value(v).data.clone(), g.value(v2).data.clone())
}

/// One local-action transition of one robot.
#[derive(Debug, Clone, PartialEq)]
pub struct LaSample {
    pub robot: usize,
    pub input: usize,
    /// Inputs of all robots at this step in the critic's rotated order.
    pub joint: Vec<usize>,
    /// Waypoint features matching `joint`, flattened.
    pub joint_waypoints: Vec<f64>,
    pub waypoint: [f64; 2],
    pub raw: [f64; LA_DIM],
    pub logp: f64,
    pub value: f64,
    pub reward: f64,
    pub done: bool,
    pub advantage: f64,
    pub ret: f64,
}

/// One decision epoch of one robot.
#[derive(Debug, Clone, PartialEq)]
pub struct MaSample {
    pub robot: usize,
    pub input: usize,
    pub joint: Vec<usize>,
    pub raw: [f64; MA_DIM],
    pub logp: f64,
    pub value: f64,
    /// Discounted sum of the realized LA rewards of the epoch.
    pub reward: f64,
    pub la_rewards: Vec<f64>,
    pub done: bool,
    pub advantage: f64,
    pub ret: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeStats {
    pub seed: u64,
    pub status: EpisodeStatus,
    pub steps: usize,
    /// Sum of every robot's rewards up to its own termination.
    pub total_reward: f64,
}

impl EpisodeStats {
    pub fn success(&self) -> bool {
        self.status == EpisodeStatus::AllSuccess
    }
}

/// Training data of several episodes (Algorithm-1 caches merged into one
/// buffer). Input indices refer to `inputs`.
#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    pub inputs: Vec<EncoderInput>,
    pub la: Vec<LaSample>,
    pub ma: Vec<MaSample>,
    pub episodes: Vec<EpisodeStats>,
}

impl RolloutBuffer {
    pub fn append(&mut self, mut other: RolloutBuffer) {
        let off = self.inputs.len();
        for s in &mut other.la {
            s.input += off;
            s.joint.iter_mut().for_each(|j| *j += off);
        }
        for s in &mut other.ma {
            s.input += off;
            s.joint.iter_mut().for_each(|j| *j += off);
        }
        self.inputs.append(&mut other.inputs);
        self.la.append(&mut other.la);
        self.ma.append(&mut other.ma);
        self.episodes.append(&mut other.episodes);
    }

    pub fn success_rate(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.episodes.iter().filter(|e| e.success()).count() as f64 / self.episodes.len() as f64
    }

    pub fn mean_episode_reward(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.episodes.iter().map(|e| e.total_reward).sum::<f64>() / self.episodes.len() as f64
    }
}

/// Discount settings used while collecting.
#[derive(Debug, Clone, Copy)]
pub struct RolloutParams {
    pub gamma: f64,
    pub gae_lambda: f64,
}

/// Runs one episode with a stochastic policy and fills its advantages.
pub fn collect_episode(
    model: &Model,
    scenario: &ScenarioConfig,
    orca: &OrcaParams,
    params: RolloutParams,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutBuffer> {
    let n = scenario.n_robots;
    let single = model.config().single_agent;
    let (mut world, obs) = reset_with(scenario, *orca, seed)?;
    let mut runner = PolicyRunner::new(model, scenario, &obs);
    let mut buf = RolloutBuffer::default();
    let mut la_seq: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut ma_seq: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut open_ma: Vec<Option<usize>> = vec![None; n];
    let mut total_reward = 0.0;
    let mut mode = ActionMode::Sample(rng);

    loop {
        let inputs = runner.inputs();
        let base = buf.inputs.len();
        let active: Vec<bool> = world.done.iter().map(|d| !d).collect();
        let decisions = runner.act(world.t, &active, &inputs, &mut mode);
        let wps = runner.waypoint_features();
        let (ma_v, la_v) = critic_values(model, &inputs, &wps);
        buf.inputs.extend(inputs);

        let mut actions = vec![LocalAction::new(0.0, 0.0, 0.0); n];
        for i in 0..n {
            let Some(dec) = decisions[i] else { continue };
            actions[i] = dec.action;
            let joint: Vec<usize> = rotated(i, n, single)
                .into_iter()
                .map(|j| base + j)
                .collect();
            if let Some((raw, logp)) = dec.ma {
                if let Some(k) = open_ma[i].take() {
                    buf.ma[k].reward = macro_reward(&buf.ma[k].la_rewards, scenario.gamma);
                }
                open_ma[i] = Some(buf.ma.len());
                ma_seq[i].push(buf.ma.len());
                buf.ma.push(MaSample {
                    robot: i,
                    input: base + i,
                    joint: joint.clone(),
                    raw,
                    logp,
                    value: ma_v[i],
                    reward: 0.0,
                    la_rewards: Vec::new(),
                    done: false,
                    advantage: 0.0,
                    ret: 0.0,
                });
            }
            la_seq[i].push(buf.la.len());
            buf.la.push(LaSample {
                robot: i,
                input: base + i,
                joint_waypoints: rotated(i, n, single).iter().flat_map(|j| wps[*j]).collect(),
                joint,
                waypoint: wps[i],
                raw: dec.la_raw,
                logp: dec.la_logp,
                value: la_v[i],
                reward: 0.0,
                done: false,
                advantage: 0.0,
                ret: 0.0,
            });
        }

        let res = world.step(&actions)?;
        let collided = res.status == EpisodeStatus::Collision;
        for i in 0..n {
            if !active[i] {
                continue;
            }
            let r = res.rewards[i];
            total_reward += r;
            let done = res.info.arrived[i] || collided;
            let s = *la_seq[i].last().unwrap();
            buf.la[s].reward = r;
            buf.la[s].done = done;
            let k = open_ma[i].unwrap();
            buf.ma[k].la_rewards.push(r);
            if done {
                buf.ma[k].done = true;
                buf.ma[k].reward = macro_reward(&buf.ma[k].la_rewards, scenario.gamma);
                open_ma[i] = None;
            }
        }
        runner.observe(&res.observations);
        if res.status.is_terminal() {
            break;
        }
    }

    // Timeout: truncated, not terminal. Close open epochs and bootstrap.
    let final_inputs = runner.inputs();
    let (boot_ma, boot_la) = critic_values(model, &final_inputs, &runner.waypoint_features());
    for i in 0..n {
        if let Some(k) = open_ma[i].take() {
            buf.ma[k].reward = macro_reward(&buf.ma[k].la_rewards, scenario.gamma);
        }
        if !la_seq[i].is_empty() {
            let idx = &la_seq[i];
            let r: Vec<f64> = idx.iter().map(|k| buf.la[*k].reward).collect();
            let v: Vec<f64> = idx.iter().map(|k| buf.la[*k].value).collect();
            let d: Vec<bool> = idx.iter().map(|k| buf.la[*k].done).collect();
            let (adv, ret) = gae(&r, &v, boot_la[i], params.gamma, params.gae_lambda, &d)?;
            for (j, k) in idx.iter().enumerate() {
                buf.la[*k].advantage = adv[j];
                buf.la[*k].ret = ret[j];
            }
        }
        if !ma_seq[i].is_empty() {
            let idx = &ma_seq[i];
            let r: Vec<f64> = idx.iter().map(|k| buf.ma[*k].reward).collect();
            let v: Vec<f64> = idx.iter().map(|k| buf.ma[*k].value).collect();
            let d: Vec<bool> = idx.iter().map(|k| buf.ma[*k].done).collect();
            let disc: Vec<f64> = idx
                .iter()
                .map(|k| params.gamma.powi(buf.ma[*k].la_rewards.len() as i32))
                .collect();
            let (adv, ret) = gae_discounted(&r, &v, boot_ma[i], &disc, params.gae_lambda, &d)?;
            for (j, k) in idx.iter().enumerate() {
                buf.ma[*k].advantage = adv[j];
                buf.ma[*k].ret = ret[j];
            }
        }
    }
    buf.episodes.push(EpisodeStats {
        seed,
        status: world.status,
        steps: world.t,
        total_reward,
    });
    Ok(buf)
}

/// Seed of the `index`-th episode stream derived from a run seed.
pub fn episode_seed(run_seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
    rng.set_stream(index);
    rng.random()
}

/// Collects one episode per seed against a frozen model. Episodes run in
/// parallel; the result is independent of scheduling.
pub fn collect_rollout(
    model: &Model,
    scenario: &ScenarioConfig,
    orca: &OrcaParams,
    params: RolloutParams,
    seeds: &[u64],
) -> Result<RolloutBuffer> {
    let parts: Vec<Result<RolloutBuffer>> = seeds
        .par_iter()
        .map(|&seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ac71_0000_0001);
            collect_episode(model, scenario, orca, params, seed, &mut rng)
        })
        .collect();
    let mut buf = RolloutBuffer::default();
    for p in parts {
        buf.append(p?);
    }
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::marl::model::ModelConfig;

    fn setup(n_robots: usize, macro_period: usize) -> (Model, ScenarioConfig) {
        let cfg = ModelConfig {
            n_robots,
            encoder: EncoderConfig {
                d_model: 8,
                heads: 2,
                layers: 1,
                history: 2,
            },
            hidden: 8,
            ..Default::default()
        };
        let scn = ScenarioConfig {
            n_robots,
            n_humans: 2,
            t_k_max: 3,
            macro_period,
            ..Default::default()
        };
        (Model::new(cfg, 0).unwrap(), scn)
    }

    const P: RolloutParams = RolloutParams {
        gamma: 0.99,
        gae_lambda: 0.95,
    };

    #[test]
    fn buffer_is_time_aligned() {
        let (m, scn) = setup(2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = collect_episode(&m, &scn, &OrcaParams::default(), P, 3, &mut rng).unwrap();
        let steps = b.episodes[0].steps;
        assert_eq!(b.inputs.len(), 2 * steps);
        for s in &b.la {
            assert_eq!(s.joint[0], s.input);
            assert_eq!(s.joint.len(), 2);
            assert!(b.inputs[s.input].robots.mask.iter().any(|m| *m == 1.0));
        }
        // Each robot's MA epochs cover its LA steps exactly.
        for i in 0..2 {
            let la = b.la.iter().filter(|s| s.robot == i).count();
            let ma: usize =
                b.ma.iter()
                    .filter(|s| s.robot == i)
                    .map(|s| s.la_rewards.len())
                    .sum();
            assert_eq!(la, ma);
            for s in b.ma.iter().filter(|s| s.robot == i) {
                assert!(s.la_rewards.len() <= 5 && !s.la_rewards.is_empty());
                assert!((s.reward - macro_reward(&s.la_rewards, scn.gamma)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn macro_period_one_resamples_every_step() {
        let (m, scn) = setup(1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = collect_episode(&m, &scn, &OrcaParams::default(), P, 4, &mut rng).unwrap();
        assert_eq!(b.ma.len(), b.la.len());
        assert!(b.ma.iter().all(|s| s.la_rewards.len() == 1));
    }

    #[test]
    fn truncated_epoch_sums_realized_steps() {
        // t_k_max = 3 epochs of 5 steps: at most 15 steps, every epoch <= 5.
        let (m, scn) = setup(1, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = collect_episode(&m, &scn, &OrcaParams::default(), P, 9, &mut rng).unwrap();
        let last = b.ma.last().unwrap();
        let oracle: f64 = last
            .la_rewards
            .iter()
            .enumerate()
            .map(|(k, r)| scn.gamma.powi(k as i32) * r)
            .sum();
        assert!((last.reward - oracle).abs() < 1e-12);
        assert!(b.episodes[0].steps <= 15);
    }

    #[test]
    fn collection_is_deterministic() {
        let (m, scn) = setup(2, 5);
        let seeds = [11, 12, 13];
        let a = collect_rollout(&m, &scn, &OrcaParams::default(), P, &seeds).unwrap();
        let b = collect_rollout(&m, &scn, &OrcaParams::default(), P, &seeds).unwrap();
        assert_eq!(a.la, b.la);
        assert_eq!(a.ma, b.ma);
        assert_eq!(a.episodes, b.episodes);
    }

    #[test]
    fn mean_mode_needs_no_rng_and_is_repeatable() {
        let (m, scn) = setup(2, 5);
        let run = || {
            let (mut w, obs) = reset_with(&scn, OrcaParams::default(), 5).unwrap();
            let mut r = PolicyRunner::new(&m, &scn, &obs);
            let mut trace = Vec::new();
            while !w.status.is_terminal() {
                let inputs = r.inputs();
                let active: Vec<bool> = w.done.iter().map(|d| !d).collect();
                let d = r.act(w.t, &active, &inputs, &mut ActionMode::Mean);
                let acts: Vec<LocalAction> = d
                    .iter()
                    .map(|x| x.map_or(LocalAction::new(0.0, 0.0, 0.0), |x| x.action))
                    .collect();
                trace.push(acts.clone());
                let res = w.step(&acts).unwrap();
                r.observe(&res.observations);
            }
            trace
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rotation_order() {
        assert_eq!(rotated(1, 3, false), vec![1, 2, 0]);
        assert_eq!(rotated(2, 3, true), vec![2]);
    }
}
