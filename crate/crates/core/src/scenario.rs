//! Domain types, scenario configuration and circle-crossing scenario generation.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum clearance between the surfaces of two agents at placement time.
pub const PLACEMENT_CLEARANCE: f64 = 0.2;
/// Rejection-sampling attempts per agent before giving up.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
/// Side length of the square box used to jitter antipodal goals.
pub const GOAL_JITTER_BOX: f64 = 1.0;

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    if theta > -PI && theta <= PI {
        return theta;
    }
    let r = theta.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// The part of an agent's state that other agents can observe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PublicState {
    pub px: f64,
    pub py: f64,
    pub vx: f64,
    pub vy: f64,
    pub rho: f64,
}

impl PublicState {
    pub fn position(&self) -> [f64; 2] {
        [self.px, self.py]
    }

    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }

    /// Center distance to another agent.
    pub fn center_distance(&self, other: &PublicState) -> f64 {
        (self.px - other.px).hypot(self.py - other.py)
    }

    /// Center distance minus the sum of radii; negative when overlapping.
    pub fn surface_distance(&self, other: &PublicState) -> f64 {
        self.center_distance(other) - self.rho - other.rho
    }

    pub fn is_finite(&self) -> bool {
        [self.px, self.py, self.vx, self.vy, self.rho]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// State known only to the agent itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivateState {
    pub gx: f64,
    pub gy: f64,
    pub v_pref: f64,
    /// Heading, kept wrapped to `(-pi, pi]`.
    pub theta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Robot,
    Human,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub id: usize,
    pub kind: AgentKind,
    #[serde(rename = "pub")]
    pub public: PublicState,
    #[serde(rename = "prv")]
    pub private: PrivateState,
}

impl AgentState {
    pub fn goal_distance(&self) -> f64 {
        (self.public.px - self.private.gx).hypot(self.public.py - self.private.gy)
    }

    pub fn is_robot(&self) -> bool {
        self.kind == AgentKind::Robot
    }
}

/// Robot actuation limits: acceleration cap, per-step rotation cap, minimum
/// turning radius and a speed cap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KinematicLimits {
    pub a_max: f64,
    pub dtheta_max: f64,
    pub r_min: f64,
    pub v_max: f64,
}

impl Default for KinematicLimits {
    fn default() -> Self {
        Self {
            a_max: 5.0,
            dtheta_max: PI / 12.0,
            r_min: 1.0,
            v_max: 2.0,
        }
    }
}

/// Everything needed to build and run one family of episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub n_robots: usize,
    pub n_humans: usize,
    pub circle_radius: f64,
    pub fov_deg: f64,
    pub dt: f64,
    pub t_k_max: usize,
    pub macro_period: usize,
    pub seed: u64,
    pub limits: KinematicLimits,
    pub human_radius: f64,
    pub robot_radius: f64,
    pub v_pref_range: (f64, f64),
    pub gamma: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_robots: 3,
            n_humans: 10,
            circle_radius: 5.0,
            fov_deg: 360.0,
            dt: 0.25,
            t_k_max: 20,
            macro_period: 5,
            seed: 0,
            limits: KinematicLimits::default(),
            human_radius: 0.3,
            robot_radius: 0.3,
            v_pref_range: (0.5, 1.5),
            gamma: 0.99,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.n_robots < 1 {
            return fail("n_robots must be at least 1");
        }
        if !(self.fov_deg > 0.0 && self.fov_deg <= 360.0) {
            return fail("fov_deg must lie in (0, 360]");
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return fail("dt must be positive");
        }
        if self.macro_period < 1 {
            return fail("macro_period must be at least 1");
        }
        if self.t_k_max < 1 {
            return fail("t_k_max must be at least 1");
        }
        if !(self.circle_radius > 0.0) {
            return fail("circle_radius must be positive");
        }
        if !(self.human_radius > 0.0 && self.robot_radius > 0.0) {
            return fail("agent radii must be positive");
        }
        let (lo, hi) = self.v_pref_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return fail("v_pref_range must satisfy 0 < min <= max");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return fail("gamma must lie in [0, 1]");
        }
        let l = &self.limits;
        if !(l.a_max > 0.0 && l.dtheta_max > 0.0 && l.r_min > 0.0 && l.v_max > 0.0) {
            return fail("kinematic limits must be positive");
        }
        Ok(())
    }

    /// Number of local-action steps before the episode times out.
    pub fn horizon_steps(&self) -> usize {
        self.t_k_max * self.macro_period
    }

    pub fn n_agents(&self) -> usize {
        self.n_robots + self.n_humans
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let config: ScenarioConfig =
            serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Draws a circle-crossing scenario. Robots get ids `0..n_robots`, humans
/// follow. Every agent starts on the circle with its goal near the antipode.
pub fn generate_scenario<R: Rng + ?Sized>(
    config: &ScenarioConfig,
    rng: &mut R,
) -> Result<Vec<AgentState>> {
    config.validate()?;
    let mut agents: Vec<AgentState> = Vec::with_capacity(config.n_agents());
    for id in 0..config.n_agents() {
        let (kind, rho) = if id < config.n_robots {
            (AgentKind::Robot, config.robot_radius)
        } else {
            (AgentKind::Human, config.human_radius)
        };
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let angle = rng.random_range(0.0..TAU);
            let (sx, sy) = (
                config.circle_radius * angle.cos(),
                config.circle_radius * angle.sin(),
            );
            let half = 0.5 * GOAL_JITTER_BOX;
            let gx = -sx + rng.random_range(-half..=half);
            let gy = -sy + rng.random_range(-half..=half);
            let clear = agents.iter().all(|other| {
                let min_gap = rho + other.public.rho + PLACEMENT_CLEARANCE;
                (sx - other.public.px).hypot(sy - other.public.py) > min_gap
                    && (gx - other.private.gx).hypot(gy - other.private.gy) > min_gap
            });
            if clear {
                placed = Some((sx, sy, gx, gy));
                break;
            }
        }
        let (sx, sy, gx, gy) = placed.ok_or(Error::ScenarioGeneration {
            agent: id,
            attempts: MAX_PLACEMENT_ATTEMPTS,
        })?;
        let (lo, hi) = config.v_pref_range;
        let v_pref = if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        };
        agents.push(AgentState {
            id,
            kind,
            public: PublicState {
                px: sx,
                py: sy,
                vx: 0.0,
                vy: 0.0,
                rho,
            },
            private: PrivateState {
                gx,
                gy,
                v_pref,
                theta: wrap_angle((gy - sy).atan2(gx - sx)),
            },
        });
    }
    Ok(agents)
}
