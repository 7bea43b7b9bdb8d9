use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderBatch, EncoderConfig, EncoderInput, GoalFrame};
use crate::error::{Error, Result};
use crate::kinematics::LocalAction;
use crate::nn::{Graph, Mlp, NamedArray, ParamId, ParamStore, Tensor, Var};
use crate::scenario::{wrap_angle, KinematicLimits};

/// Half-width of the waypoint box around the robot, in meters.
pub const WAYPOINT_BOX: f64 = 3.0;
pub const MA_DIM: usize = 2;
pub const LA_DIM: usize = 3;
pub const CHECKPOINT_VERSION: u32 = 1;

pub const ACTOR_GROUP: usize = 0;
pub const CRITIC_GROUP: usize = 1;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_robots: usize,
    pub encoder: EncoderConfig,
    pub hidden: usize,
    /// One actor parameter set for all robots.
    pub share_parameters: bool,
    /// Critics see only the evaluated robot's own features.
    pub single_agent: bool,
    /// Critics read the actors' encoder instead of their own copy.
    pub critic_uses_actor_encoder: bool,
    pub init_log_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_robots: 3,
            encoder: EncoderConfig::default(),
            hidden: 64,
            share_parameters: true,
            single_agent: false,
            critic_uses_actor_encoder: false,
            init_log_std: -0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.n_robots == 0 || self.hidden == 0 {
            return Err(Error::Config("n_robots and hidden must be positive".into()));
        }
        if !self.init_log_std.is_finite() {
            return Err(Error::Config("init_log_std must be finite".into()));
        }
        Ok(())
    }

    pub fn actor_sets(&self) -> usize {
        if self.share_parameters {
            1
        } else {
            self.n_robots
        }
    }

    /// Robots whose features enter a critic evaluated for one robot.
    pub fn critic_robots(&self) -> usize {
        if self.single_agent {
            1
        } else {
            self.n_robots
        }
    }
}

/// Diagonal Gaussian over raw (pre-squash) actions.
#[derive(Debug, Clone)]
pub struct GaussianHead {
    pub mlp: Mlp,
    pub log_std: ParamId,
    pub dim: usize,
}

impl GaussianHead {
    fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        dim: usize,
        init_log_std: f64,
        rng: &mut R,
    ) -> Self {
        let mlp = Mlp::new(
            store,
            &format!("{name}.mlp"),
            &[input, hidden, dim],
            ACTOR_GROUP,
            rng,
        );
        // Small output layer: the initial policy is close to the zero action.
        let w = mlp.layers.last().unwrap().w;
        store.value_mut(w).scale_assign(0.1);
        let log_std = store.add_const(format!("{name}.log_std"), dim, init_log_std, ACTOR_GROUP);
        Self { mlp, log_std, dim }
    }

    pub fn mean(&self, g: &mut Graph, x: Var) -> Var {
        self.mlp.forward(g, x)
    }

    /// Log-density of `raw` (`[B, 1, dim]`) under `N(mean, exp(log_std))`, `[B, 1, 1]`.
    pub fn log_prob(&self, g: &mut Graph, mean: Var, raw: Var) -> Var {
        let log_std = g.param(self.log_std);
        let diff = g.sub(raw, mean);
        let neg = g.neg(log_std);
        let inv = g.exp(neg);
        let z = g.mul(diff, inv);
        let z2 = g.square(z);
        let half = g.scale(z2, -0.5);
        let t = g.sub(half, log_std);
        let s = g.sum_cols(t);
        g.shift(s, -0.5 * self.dim as f64 * LN_2PI)
    }

    /// Differential entropy (identical for every state), `[1, 1, 1]`.
    pub fn entropy(&self, g: &mut Graph) -> Var {
        let log_std = g.param(self.log_std);
        let s = g.sum(log_std);
        g.shift(s, 0.5 * self.dim as f64 * (1.0 + LN_2PI))
    }
}

/// `log N(raw; mean, exp(log_std))` in plain arithmetic.
pub fn gaussian_log_prob(raw: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    raw.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((u, m), ls)| {
            let z = (u - m) * (-ls).exp();
            -0.5 * z * z - ls - 0.5 * LN_2PI
        })
        .sum()
}

/// `p_star` plus the MA and LA actor heads of one parameter set.
#[derive(Debug, Clone)]
pub struct ActorSet {
    pub encoder: Encoder,
    pub ma: GaussianHead,
    pub la: GaussianHead,
}

#[derive(Debug, Clone)]
pub struct CriticSet {
    /// `p̂_star`; `None` when the critics read the actor encoder.
    pub encoder: Option<Encoder>,
    pub ma: Mlp,
    pub la: Mlp,
}

#[derive(Debug, Clone)]
pub struct Architecture {
    pub config: ModelConfig,
    pub actors: Vec<ActorSet>,
    pub critics: CriticSet,
}

/// Parameters plus the layout that interprets them.
#[derive(Debug, Clone)]
pub struct Model {
    pub arch: Architecture,
    pub store: ParamStore,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    model: ModelConfig,
    arrays: Vec<NamedArray>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let d = config.encoder.d_model;
        let h = config.hidden;
        let actors = (0..config.actor_sets())
            .map(|k| {
                let name = format!("actor{k}");
                ActorSet {
                    encoder: Encoder::new(
                        &mut store,
                        &format!("{name}.encoder"),
                        config.encoder,
                        ACTOR_GROUP,
                        &mut rng,
                    ),
                    ma: GaussianHead::new(
                        &mut store,
                        &format!("{name}.ma"),
                        d,
                        h,
                        MA_DIM,
                        config.init_log_std,
                        &mut rng,
                    ),
                    la: GaussianHead::new(
                        &mut store,
                        &format!("{name}.la"),
                        d + MA_DIM,
                        h,
                        LA_DIM,
                        config.init_log_std,
                        &mut rng,
                    ),
                }
            })
            .collect();
        // With a shared encoder there is a single optimizer group.
        let critic_group = if config.critic_uses_actor_encoder {
            ACTOR_GROUP
        } else {
            CRITIC_GROUP
        };
        let encoder = (!config.critic_uses_actor_encoder).then(|| {
            Encoder::new(
                &mut store,
                "critic.encoder",
                config.encoder,
                CRITIC_GROUP,
                &mut rng,
            )
        });
        let k = config.critic_robots();
        let critics = CriticSet {
            encoder,
            ma: Mlp::new(
                &mut store,
                "critic.ma",
                &[k * d, h, 1],
                critic_group,
                &mut rng,
            ),
            la: Mlp::new(
                &mut store,
                "critic.la",
                &[k * (d + MA_DIM), h, 1],
                critic_group,
                &mut rng,
            ),
        };
        Ok(Self {
            arch: Architecture {
                config,
                actors,
                critics,
            },
            store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            model: self.arch.config,
            arrays: self.store.to_arrays(),
        };
        let text = serde_json::to_string(&ck)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(&text)
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::Checkpoint(format!("not valid JSON: {e}")))?;
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == CHECKPOINT_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Checkpoint(format!(
                    "unsupported checkpoint version {v}"
                )))
            }
            None => return Err(Error::Checkpoint("missing version field".into())),
        }
        let ck: Checkpoint = serde_json::from_value(value)
            .map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;
        let mut model = Model::new(ck.model, 0).map_err(|e| Error::Checkpoint(e.to_string()))?;
        model.store.load_arrays(&ck.arrays)?;
        Ok(model)
    }
}

impl Architecture {
    pub fn actor_set(&self, robot: usize) -> &ActorSet {
        if self.config.share_parameters {
            &self.actors[0]
        } else {
            &self.actors[robot]
        }
    }

    pub fn critic_encoder(&self) -> &Encoder {
        self.critics
            .encoder
            .as_ref()
            .unwrap_or(&self.actors[0].encoder)
    }

    /// Actor features `Y` for `inputs[k]` evaluated with robot `robots[k]`'s
    /// parameter set; rows stay in input order, `[n, 1, d]`.
    pub fn actor_features(&self, g: &mut Graph, inputs: &[&EncoderInput], robots: &[usize]) -> Var {
        assert_eq!(inputs.len(), robots.len());
        if self.config.share_parameters {
            let batch = EncoderBatch::stack(inputs.iter().copied());
            return self.actors[0].encoder.forward(g, &batch);
        }
        let mut parts = Vec::new();
        let mut order = Vec::with_capacity(inputs.len());
        for set in 0..self.actors.len() {
            let idx: Vec<usize> = (0..inputs.len()).filter(|k| robots[*k] == set).collect();
            if idx.is_empty() {
                continue;
            }
            let batch = EncoderBatch::stack(idx.iter().map(|k| inputs[*k]));
            parts.push(self.actors[set].encoder.forward(g, &batch));
            order.extend(idx);
        }
        let all = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat_rows_batch(&parts)
        };
        let mut inverse = vec![0; order.len()];
        for (pos, k) in order.iter().enumerate() {
            inverse[*k] = pos;
        }
        g.gather_rows(all, &inverse, [inputs.len(), 1])
    }

    /// Critic features for every input, `[n, 1, d]`.
    pub fn critic_features(&self, g: &mut Graph, inputs: &[&EncoderInput]) -> Var {
        let batch = EncoderBatch::stack(inputs.iter().copied());
        self.critic_encoder().forward(g, &batch)
    }

    /// MA critic on joint features: `joint` lists, per sample, rows of
    /// `features` in the evaluated robot's rotated order. `[n, 1, 1]`.
    pub fn ma_value(&self, g: &mut Graph, features: Var, joint: &[usize], n: usize) -> Var {
        let k = self.config.critic_robots();
        let d = self.config.encoder.d_model;
        let x = g.gather_rows(features, joint, [n, k]);
        let x = g.reshape(x, [n, 1, k * d]);
        self.critics.ma.forward(g, x)
    }

    /// LA critic on joint features and the matching waypoint features
    /// (`[n, 1, k * 2]`, same robot order). `[n, 1, 1]`.
    pub fn la_value(
        &self,
        g: &mut Graph,
        features: Var,
        joint: &[usize],
        waypoints: Var,
        n: usize,
    ) -> Var {
        let k = self.config.critic_robots();
        let d = self.config.encoder.d_model;
        let x = g.gather_rows(features, joint, [n, k]);
        let x = g.reshape(x, [n, 1, k * d]);
        let x = g.concat_cols(&[x, waypoints]);
        self.critics.la.forward(g, x)
    }

    /// MA head means for `y` rows evaluated with each robot's set, `[n, 1, 2]`.
    pub fn ma_mean(&self, g: &mut Graph, y: Var, robots: &[usize]) -> Var {
        self.per_set(g, y, robots, |set, g, x| set.ma.mean(g, x))
    }

    pub fn la_mean(&self, g: &mut Graph, y: Var, wp: Var, robots: &[usize]) -> Var {
        let x = g.concat_cols(&[y, wp]);
        self.per_set(g, x, robots, |set, g, x| set.la.mean(g, x))
    }

    pub fn ma_log_prob(&self, g: &mut Graph, mean: Var, raw: Var, robots: &[usize]) -> Var {
        self.per_set_pair(g, mean, raw, robots, |set, g, m, r| {
            set.ma.log_prob(g, m, r)
        })
    }

    pub fn la_log_prob(&self, g: &mut Graph, mean: Var, raw: Var, robots: &[usize]) -> Var {
        self.per_set_pair(g, mean, raw, robots, |set, g, m, r| {
            set.la.log_prob(g, m, r)
        })
    }

    /// Mean entropy of the MA and LA policies across parameter sets.
    pub fn entropies(&self, g: &mut Graph) -> (Var, Var) {
        let n = self.actors.len() as f64;
        let mut ma = self.actors[0].ma.entropy(g);
        let mut la = self.actors[0].la.entropy(g);
        for set in &self.actors[1..] {
            let e = set.ma.entropy(g);
            ma = g.add(ma, e);
            let e = set.la.entropy(g);
            la = g.add(la, e);
        }
        (g.scale(ma, 1.0 / n), g.scale(la, 1.0 / n))
    }

    fn per_set(
        &self,
        g: &mut Graph,
        x: Var,
        robots: &[usize],
        f: impl Fn(&ActorSet, &mut Graph, Var) -> Var,
    ) -> Var {
        if self.config.share_parameters {
            return f(&self.actors[0], g, x);
        }
        self.split_merge(g, &[x], robots, |set, g, xs| f(set, g, xs[0]))
    }

    fn per_set_pair(
        &self,
        g: &mut Graph,
        a: Var,
        b: Var,
        robots: &[usize],
        f: impl Fn(&ActorSet, &mut Graph, Var, Var) -> Var,
    ) -> Var {
        if self.config.share_parameters {
            return f(&self.actors[0], g, a, b);
        }
        self.split_merge(g, &[a, b], robots, |set, g, xs| f(set, g, xs[0], xs[1]))
    }

    /// Routes batch rows to their robot's parameter set and restores order.
    fn split_merge(
        &self,
        g: &mut Graph,
        xs: &[Var],
        robots: &[usize],
        f: impl Fn(&ActorSet, &mut Graph, &[Var]) -> Var,
    ) -> Var {
        let n = robots.len();
        let mut parts = Vec::new();
        let mut order = Vec::with_capacity(n);
        for set in 0..self.actors.len() {
            let idx: Vec<usize> = (0..n).filter(|k| robots[*k] == set).collect();
            if idx.is_empty() {
                continue;
            }
            let sub: Vec<Var> = xs
                .iter()
                .map(|x| g.gather_rows(*x, &idx, [idx.len(), 1]))
                .collect();
            parts.push(f(&self.actors[set], g, &sub));
            order.extend(idx);
        }
        let all = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat_rows_batch(&parts)
        };
        let mut inverse = vec![0; n];
        for (pos, k) in order.iter().enumerate() {
            inverse[*k] = pos;
        }
        g.gather_rows(all, &inverse, [n, 1])
    }
}

/// World waypoint from a raw MA sample, anchored at the frame origin.
pub fn waypoint_from_raw(frame: &GoalFrame, raw: [f64; 2]) -> [f64; 2] {
    let off = frame.rotate_out([WAYPOINT_BOX * raw[0].tanh(), WAYPOINT_BOX * raw[1].tanh()]);
    [frame.origin[0] + off[0], frame.origin[1] + off[1]]
}

/// Waypoint as seen from the robot's current goal frame, scaled to the box.
pub fn waypoint_feature(frame: &GoalFrame, waypoint: [f64; 2]) -> [f64; 2] {
    let p = frame.point_in(waypoint);
    [p[0] / WAYPOINT_BOX, p[1] / WAYPOINT_BOX]
}

/// Command from a raw LA sample: goal-frame acceleration scaled to `a_max`
/// and a heading change scaled to the per-step rotation cap.
pub fn local_action_from_raw(
    frame: &GoalFrame,
    theta: f64,
    raw: [f64; 3],
    limits: &KinematicLimits,
) -> LocalAction {
    let a = frame.rotate_out([limits.a_max * raw[0].tanh(), limits.a_max * raw[1].tanh()]);
    let dtheta = limits.dtheta_max * raw[2].tanh();
    LocalAction::new(a[0], a[1], wrap_angle(theta + dtheta))
}

impl<'s> Graph<'s> {
    /// Concatenates `[b_i, 1, d]` tensors along the batch axis.
    pub fn concat_rows_batch(&mut self, parts: &[Var]) -> Var {
        let d = self.shape(parts[0])[2];
        let reshaped: Vec<Var> = parts
            .iter()
            .map(|p| {
                let [b, r, c] = self.shape(*p);
                assert_eq!((r, c), (1, d));
                self.reshape(*p, [1, b, d])
            })
            .collect();
        let cat = self.concat_rows(&reshaped);
        let total = self.shape(cat)[1];
        self.reshape(cat, [total, 1, d])
    }
}

/// Stacks equal-width rows into `[n, 1, w]`.
pub(crate) fn rows_tensor(rows: &[Vec<f64>]) -> Tensor {
    let w = rows.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(rows.len() * w);
    for r in rows {
        data.extend_from_slice(r);
    }
    Tensor::from_vec([rows.len(), 1, w], data)
}
