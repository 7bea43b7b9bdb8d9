//! Versioned JSON-lines episode logs.
//!
//! Line 1 is a `reset` record holding the initial state of every agent
//! (positions, velocities, radii, goals, preferred speeds, headings). Every
//! further line is a `step` record written after one local-action step:
//!
//! ```text
//! {"type":"reset","v":1,"seed":7,"dt":0.25,"horizon":100,"n_robots":1,"agents":[...]}
//! {"type":"step","v":1,"t":1,"states":[...],"actions":[...],"rewards":[...],
//!  "done":[...],"collided":[...],"status":"Running"}
//! ```
//!
//! `states` lists the public state of every agent (robots first, in id
//! order), `actions` the robot commands actually applied after clamping,
//! `done` the per-robot arrival flags and `status` the episode status after
//! the step. Floats are written in shortest round-trip form, so a parsed log
//! reproduces the in-memory trace bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{EpisodeStatus, StepResult, World};
use crate::error::{Error, Result};
use crate::kinematics::LocalAction;
use crate::scenario::{AgentState, PublicState};

pub const LOG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResetRecord {
    pub v: u32,
    pub seed: u64,
    pub dt: f64,
    /// Step budget before timeout.
    pub horizon: usize,
    pub n_robots: usize,
    pub agents: Vec<AgentState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub v: u32,
    pub t: usize,
    pub states: Vec<PublicState>,
    pub actions: Vec<LocalAction>,
    pub rewards: Vec<f64>,
    pub done: Vec<bool>,
    pub collided: Vec<bool>,
    pub status: EpisodeStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LogRecord {
    Reset(ResetRecord),
    Step(StepRecord),
}

/// One episode as recorded.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub reset: ResetRecord,
    pub steps: Vec<StepRecord>,
}

impl EpisodeTrace {
    /// Starts a trace from a freshly reset world.
    pub fn start(world: &World, seed: u64) -> Self {
        let reset = ResetRecord {
            v: LOG_VERSION,
            seed,
            dt: world.config.dt,
            horizon: world.config.horizon_steps(),
            n_robots: world.n_robots(),
            agents: world.agents.clone(),
        };
        Self {
            reset,
            steps: Vec::new(),
        }
    }

    /// Appends the step that produced `res`; `world` is the state after it.
    pub fn record(&mut self, world: &World, res: &StepResult) {
        self.steps.push(StepRecord {
            v: LOG_VERSION,
            t: world.t,
            states: world.agents.iter().map(|a| a.public).collect(),
            actions: res.info.applied.clone(),
            rewards: res.rewards.clone(),
            done: world.done.clone(),
            collided: world.collided.clone(),
            status: res.status,
        });
    }

    pub fn n_robots(&self) -> usize {
        self.reset.n_robots
    }

    pub fn n_agents(&self) -> usize {
        self.reset.agents.len()
    }

    pub fn status(&self) -> EpisodeStatus {
        self.steps
            .last()
            .map_or(EpisodeStatus::Running, |s| s.status)
    }

    /// Positions of agent `id` from reset through the last step.
    pub fn trajectory(&self, id: usize) -> Vec<[f64; 2]> {
        std::iter::once(self.reset.agents[id].public.position())
            .chain(self.steps.iter().map(|s| s.states[id].position()))
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let head = LogRecord::Reset(self.reset.clone());
        out.push_str(&serde_json::to_string(&head).expect("log records serialize"));
        out.push('\n');
        for s in &self.steps {
            out.push_str(
                &serde_json::to_string(&LogRecord::Step(s.clone())).expect("log records serialize"),
            );
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses and validates a log. Errors carry the 1-based line number.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, message: String| Error::LogParse { line, message };
        let mut reset: Option<ResetRecord> = None;
        let mut steps: Vec<StepRecord> = Vec::new();
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let rec: LogRecord = serde_json::from_str(raw).map_err(|e| bad(line, e.to_string()))?;
            match rec {
                LogRecord::Reset(r) => {
                    if reset.is_some() {
                        return Err(bad(line, "second reset record".into()));
                    }
                    if r.v != LOG_VERSION {
                        return Err(bad(line, format!("unsupported log version {}", r.v)));
                    }
                    if r.n_robots == 0 || r.n_robots > r.agents.len() {
                        return Err(bad(
                            line,
                            format!("{} robots among {} agents", r.n_robots, r.agents.len()),
                        ));
                    }
                    if r.agents.iter().enumerate().any(|(i, a)| a.id != i) {
                        return Err(bad(line, "agent ids must be 0..n in order".into()));
                    }
                    reset = Some(r);
                }
                LogRecord::Step(s) => {
                    let Some(r) = &reset else {
                        return Err(bad(line, "step record before reset".into()));
                    };
                    if s.v != LOG_VERSION {
                        return Err(bad(line, format!("unsupported log version {}", s.v)));
                    }
                    let expect_t = steps.len() + 1;
                    if s.t != expect_t {
                        return Err(bad(line, format!("expected t = {expect_t}, found {}", s.t)));
                    }
                    if steps.last().is_some_and(|p| p.status.is_terminal()) {
                        return Err(bad(line, "step after a terminal status".into()));
                    }
                    let n = r.n_robots;
                    let robot_lens = [
                        s.actions.len(),
                        s.rewards.len(),
                        s.done.len(),
                        s.collided.len(),
                    ];
                    if s.states.len() != r.agents.len() || robot_lens.iter().any(|l| *l != n) {
                        return Err(bad(
                            line,
                            "record sizes do not match the reset record".into(),
                        ));
                    }
                    steps.push(s);
                }
            }
        }
        let reset = reset.ok_or_else(|| bad(1, "empty log".into()))?;
        Ok(Self { reset, steps })
    }
}
