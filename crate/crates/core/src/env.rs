//! The decentralized, partially observable navigation environment: field of
//! view observations, the per-robot reward, termination and the step loop.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{clamp_for_state, integrate, integrate_human, LocalAction};
use crate::pedestrian::{human_policy, OrcaParams};
use crate::scenario::{
    generate_scenario, wrap_angle, AgentKind, AgentState, PublicState, ScenarioConfig,
};

/// Surface distance below which a pedestrian is considered disturbed.
pub const DISCOMFORT_DIST: f64 = 0.45;
pub const REWARD_ALL_SUCCESS: f64 = 5.0;
pub const REWARD_SUCCESS: f64 = 10.0;
pub const REWARD_COLLISION: f64 = -20.0;
pub const DISCOMFORT_FLOOR: f64 = -5.0;
pub const PROGRESS_GAIN: f64 = 2.0;
/// Collision and arrival are checked at this many points along each step.
pub const SUBSTEPS: usize = 4;
/// Slack on the field of view boundary so that agents exactly on it count as visible.
const FOV_BOUNDARY_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EpisodeStatus {
    Running,
    AllSuccess,
    Collision,
    Timeout,
}

impl EpisodeStatus {
    pub fn is_terminal(self) -> bool {
        self != EpisodeStatus::Running
    }
}

/// An agent seen by an observer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisibleAgent {
    pub id: usize,
    pub kind: AgentKind,
    pub state: PublicState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub self_state: AgentState,
    pub visible: Vec<VisibleAgent>,
    /// Indexed by agent id; `true` when that agent is in view. The observer's
    /// own entry is `false`.
    pub mask: Vec<bool>,
}

/// The last `len` observations of one robot, oldest first.
#[derive(Debug, Clone)]
pub struct HistoryBuffer {
    len: usize,
    frames: VecDeque<Observation>,
}

impl HistoryBuffer {
    pub fn new(len: usize) -> Self {
        assert!(len >= 1, "history length must be positive");
        Self {
            len,
            frames: VecDeque::with_capacity(len),
        }
    }

    pub fn push(&mut self, obs: Observation) {
        if self.frames.len() == self.len {
            self.frames.pop_front();
        }
        self.frames.push_back(obs);
    }

    pub fn capacity(&self) -> usize {
        self.len
    }

    /// Window of exactly `capacity` slots; missing early frames are `None`.
    pub fn window(&self) -> Vec<Option<&Observation>> {
        let pad = self.len - self.frames.len();
        (0..pad)
            .map(|_| None)
            .chain(self.frames.iter().map(Some))
            .collect()
    }

    pub fn latest(&self) -> Option<&Observation> {
        self.frames.back()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    /// Per robot: smallest surface distance to any human after the step.
    pub min_human_distance: Vec<f64>,
    /// Per robot: center distance to the goal after the step.
    pub goal_distances: Vec<f64>,
    pub collided: Vec<bool>,
    /// Robots that arrived during this step.
    pub arrived: Vec<bool>,
    /// Commands actually applied after clamping (done robots hold).
    pub applied: Vec<LocalAction>,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub rewards: Vec<f64>,
    pub observations: Vec<Observation>,
    pub status: EpisodeStatus,
    pub info: StepInfo,
}

#[derive(Debug, Clone)]
pub struct World {
    pub config: ScenarioConfig,
    pub orca: OrcaParams,
    pub agents: Vec<AgentState>,
    /// Local-action step index.
    pub t: usize,
    /// Decision epoch index.
    pub t_k: usize,
    /// Per robot: reached its goal (and braked).
    pub done: Vec<bool>,
    /// Per robot: collided during the last step.
    pub collided: Vec<bool>,
    pub status: EpisodeStatus,
}

/// Resets a world from `config` using `seed` for the scenario draw.
pub fn reset(config: &ScenarioConfig, seed: u64) -> Result<(World, Vec<Observation>)> {
    reset_with(config, OrcaParams::default(), seed)
}

pub fn reset_with(
    config: &ScenarioConfig,
    orca: OrcaParams,
    seed: u64,
) -> Result<(World, Vec<Observation>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let agents = generate_scenario(config, &mut rng)?;
    let world = World::from_agents(config.clone(), orca, agents)?;
    let obs = world.observe_all();
    Ok((world, obs))
}

impl World {
    /// Builds a world around an explicit agent list (robots first).
    pub fn from_agents(
        config: ScenarioConfig,
        orca: OrcaParams,
        agents: Vec<AgentState>,
    ) -> Result<Self> {
        config.validate()?;
        if agents.len() != config.n_agents() {
            return Err(Error::Config(format!(
                "expected {} agents, got {}",
                config.n_agents(),
                agents.len()
            )));
        }
        for (i, a) in agents.iter().enumerate() {
            let expect = if i < config.n_robots {
                AgentKind::Robot
            } else {
                AgentKind::Human
            };
            if a.id != i || a.kind != expect {
                return Err(Error::Config(format!(
                    "agent {i} has id {} kind {:?}",
                    a.id, a.kind
                )));
            }
        }
        let n = config.n_robots;
        Ok(Self {
            config,
            orca,
            agents,
            t: 0,
            t_k: 0,
            done: vec![false; n],
            collided: vec![false; n],
            status: EpisodeStatus::Running,
        })
    }

    pub fn n_robots(&self) -> usize {
        self.config.n_robots
    }

    pub fn robots(&self) -> &[AgentState] {
        &self.agents[..self.config.n_robots]
    }

    pub fn humans(&self) -> &[AgentState] {
        &self.agents[self.config.n_robots..]
    }

    /// Whether `target` lies in the field of view of `observer`.
    pub fn in_fov(&self, observer: &AgentState, target: &PublicState) -> bool {
        if self.config.fov_deg >= 360.0 {
            return true;
        }
        let dx = target.px - observer.public.px;
        let dy = target.py - observer.public.py;
        if dx == 0.0 && dy == 0.0 {
            return true;
        }
        let bearing = wrap_angle(dy.atan2(dx) - observer.private.theta);
        bearing.abs() <= 0.5 * self.config.fov_deg.to_radians() + FOV_BOUNDARY_SLACK
    }

    pub fn observe(&self, robot_id: usize) -> Observation {
        assert!(
            robot_id < self.config.n_robots,
            "robot id {robot_id} out of range"
        );
        let me = &self.agents[robot_id];
        let mut mask = vec![false; self.agents.len()];
        let mut visible = Vec::new();
        for other in &self.agents {
            if other.id == robot_id || !self.in_fov(me, &other.public) {
                continue;
            }
            mask[other.id] = true;
            visible.push(VisibleAgent {
                id: other.id,
                kind: other.kind,
                state: other.public,
            });
        }
        Observation {
            self_state: *me,
            visible,
            mask,
        }
    }

    pub fn observe_all(&self) -> Vec<Observation> {
        (0..self.config.n_robots).map(|i| self.observe(i)).collect()
    }

    /// Smallest surface distance from robot `i` to any human (infinite when
    /// there are no humans).
    pub fn min_human_distance(&self, robot_id: usize) -> f64 {
        let me = &self.agents[robot_id].public;
        self.humans()
            .iter()
            .map(|h| me.surface_distance(&h.public))
            .fold(f64::INFINITY, f64::min)
    }

    /// Advances every agent by one local-action step.
    pub fn step(&mut self, actions: &[LocalAction]) -> Result<StepResult> {
        if self.status.is_terminal() {
            return Err(Error::Usage(format!(
                "step called on a finished episode ({:?})",
                self.status
            )));
        }
        let n = self.config.n_robots;
        if actions.len() != n {
            return Err(Error::Usage(format!(
                "expected {n} actions, got {}",
                actions.len()
            )));
        }
        let before = self.clone();
        let dt = self.config.dt;
        let limits = self.config.limits;

        let mut next = self.agents.clone();
        let mut applied = Vec::with_capacity(n);
        for i in 0..n {
            let a = &self.agents[i];
            if self.done[i] {
                applied.push(LocalAction::new(0.0, 0.0, a.private.theta));
                continue;
            }
            let cmd = clamp_for_state(actions[i], &a.public, a.private.theta, dt, &limits);
            let (public, theta) = integrate(&a.public, &cmd, dt, limits.v_max);
            next[i].public = public;
            next[i].private.theta = theta;
            applied.push(cmd);
        }
        let human_states: Vec<PublicState> = self.humans().iter().map(|h| h.public).collect();
        for (k, h) in self.humans().iter().enumerate() {
            let others: Vec<PublicState> = human_states
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != k)
                .map(|(_, s)| *s)
                .collect();
            let target = human_policy(h, &others, &self.orca, dt);
            let moved = integrate_human(&h.public, target, h.private.v_pref, dt);
            next[n + k].public = moved;
            if moved.vx != 0.0 || moved.vy != 0.0 {
                next[n + k].private.theta = moved.vy.atan2(moved.vx);
            }
        }

        // Arrival along the step; arrived robots stop at the arrival point.
        let lerp = |a: &PublicState, b: &PublicState, s: f64| {
            [a.px + (b.px - a.px) * s, a.py + (b.py - a.py) * s]
        };
        let fractions: Vec<f64> = (1..=SUBSTEPS).map(|k| k as f64 / SUBSTEPS as f64).collect();
        let mut arrived = vec![false; n];
        let mut stop_at: Vec<Option<usize>> = vec![None; n];
        for i in 0..n {
            if self.done[i] {
                continue;
            }
            let goal = [self.agents[i].private.gx, self.agents[i].private.gy];
            let rho = self.agents[i].public.rho;
            for (k, &s) in fractions.iter().enumerate() {
                let p = lerp(&self.agents[i].public, &next[i].public, s);
                if (p[0] - goal[0]).hypot(p[1] - goal[1]) < rho {
                    stop_at[i] = Some(k);
                    arrived[i] = true;
                    break;
                }
            }
        }
        let position_at = |idx: usize, k: usize| -> [f64; 2] {
            let k = match stop_at.get(idx).copied().flatten() {
                Some(stop) if idx < n => k.min(stop),
                _ => k,
            };
            lerp(&self.agents[idx].public, &next[idx].public, fractions[k])
        };

        let mut collided = vec![false; n];
        for i in 0..n {
            for j in 0..self.agents.len() {
                if j == i || (j < n && j < i) {
                    continue;
                }
                let min_gap = self.agents[i].public.rho + self.agents[j].public.rho;
                let hit = (0..SUBSTEPS).any(|k| {
                    let a = position_at(i, k);
                    let b = position_at(j, k);
                    (a[0] - b[0]).hypot(a[1] - b[1]) < min_gap
                });
                if hit {
                    collided[i] = true;
                    if j < n {
                        collided[j] = true;
                    }
                }
            }
        }

        let stop_points: Vec<Option<[f64; 2]>> = (0..n)
            .map(|i| stop_at[i].map(|k| position_at(i, k)))
            .collect();
        for (i, stop) in stop_points.into_iter().enumerate() {
            if let Some(p) = stop {
                next[i].public.px = p[0];
                next[i].public.py = p[1];
                next[i].public.vx = 0.0;
                next[i].public.vy = 0.0;
            }
        }

        self.agents = next;
        for i in 0..n {
            self.done[i] |= arrived[i];
        }
        self.collided = collided;
        self.t += 1;
        self.t_k = self.t / self.config.macro_period;

        let rewards: Vec<f64> = (0..n).map(|i| reward(&before, self, i)).collect();

        self.status = if self.collided.iter().any(|&c| c) {
            EpisodeStatus::Collision
        } else if self.done.iter().all(|&d| d) {
            EpisodeStatus::AllSuccess
        } else if self.t >= self.config.horizon_steps() {
            EpisodeStatus::Timeout
        } else {
            EpisodeStatus::Running
        };

        let info = StepInfo {
            min_human_distance: (0..n).map(|i| self.min_human_distance(i)).collect(),
            goal_distances: self.robots().iter().map(|r| r.goal_distance()).collect(),
            collided: self.collided.clone(),
            arrived,
            applied,
        };
        Ok(StepResult {
            rewards,
            observations: self.observe_all(),
            status: self.status,
            info,
        })
    }
}

/// Which branch of the reward fired.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardBranch {
    AllSuccess,
    Success,
    Collision,
    Discomfort,
    Progress,
}

/// Reward inputs for one robot after a step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardInputs {
    pub all_at_goal: bool,
    pub at_goal: bool,
    pub collided: bool,
    /// Nearest human surface distance.
    pub human_distance: f64,
    pub goal_distance_before: f64,
    pub goal_distance_after: f64,
}

pub fn reward_branch(x: &RewardInputs) -> RewardBranch {
    if x.all_at_goal {
        RewardBranch::AllSuccess
    } else if x.at_goal {
        RewardBranch::Success
    } else if x.collided {
        RewardBranch::Collision
    } else if x.human_distance <= DISCOMFORT_DIST {
        RewardBranch::Discomfort
    } else {
        RewardBranch::Progress
    }
}

/// Piecewise reward, evaluated in the printed branch order.
pub fn reward_value(x: &RewardInputs) -> f64 {
    match reward_branch(x) {
        RewardBranch::AllSuccess => REWARD_ALL_SUCCESS,
        RewardBranch::Success => REWARD_SUCCESS,
        RewardBranch::Collision => REWARD_COLLISION,
        RewardBranch::Discomfort => (-1.0 / x.human_distance).max(DISCOMFORT_FLOOR),
        RewardBranch::Progress => PROGRESS_GAIN * (x.goal_distance_before - x.goal_distance_after),
    }
}

pub fn reward_inputs(before: &World, after: &World, robot_id: usize) -> RewardInputs {
    RewardInputs {
        all_at_goal: after.done.iter().all(|&d| d),
        at_goal: after.done[robot_id],
        collided: after.collided[robot_id],
        human_distance: after.min_human_distance(robot_id),
        goal_distance_before: before.agents[robot_id].goal_distance(),
        goal_distance_after: after.agents[robot_id].goal_distance(),
    }
}

pub fn reward(before: &World, after: &World, robot_id: usize) -> f64 {
    reward_value(&reward_inputs(before, after, robot_id))
}

/// Discounted sum of the local-action rewards inside one decision epoch.
pub fn macro_reward(la_rewards: &[f64], gamma: f64) -> f64 {
    let mut discount = 1.0;
    let mut total = 0.0;
    for r in la_rewards {
        total += discount * r;
        discount *= gamma;
    }
    total
}
