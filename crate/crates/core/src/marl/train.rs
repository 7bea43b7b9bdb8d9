use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::losses::{actor_loss, critic_loss, normalize};
use super::model::{
    rows_tensor, Architecture, Model, ModelConfig, ACTOR_GROUP, CRITIC_GROUP, LA_DIM, MA_DIM,
};
use super::rollout::{collect_rollout, episode_seed, RolloutBuffer, RolloutParams};
use crate::encoder::EncoderInput;
use crate::env::EpisodeStatus;
use crate::error::{Error, Result};
use crate::eval::{eval_seeds, EvalPolicy, Evaluator};
use crate::nn::{clip_grad_norm, Adam, AdamConfig, Graph, Tensor, Var};
use crate::pedestrian::OrcaParams;
use crate::scenario::ScenarioConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    /// Trailing number of training episodes considered; with validation,
    /// the number of training episodes between checks.
    pub window: usize,
    /// Stop once the joint success rate reaches this value.
    pub success_rate: f64,
    /// When non-zero, judge the deterministic policy on this many
    /// validation cases instead of the stochastic training episodes.
    #[serde(default)]
    pub validation_cases: usize,
}

/// Base of the validation seeds, kept apart from evaluation bases.
pub const VALIDATION_SEED_BASE: u64 = 0x5a11_da7e_0000_0000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub value_clip: f64,
    pub entropy_coef: f64,
    pub lr: f64,
    pub ppo_epochs: usize,
    pub minibatch_count: usize,
    pub max_grad_norm: f64,
    /// Total training episodes.
    pub episodes: usize,
    pub episodes_per_update: usize,
    pub seed: u64,
    /// Checkpoint every this many updates (0: final checkpoint only).
    pub checkpoint_every: usize,
    pub early_stop: Option<EarlyStop>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            value_clip: 0.2,
            entropy_coef: 0.01,
            lr: 5e-4,
            ppo_epochs: 15,
            minibatch_count: 1,
            max_grad_norm: 10.0,
            episodes: 2000,
            episodes_per_update: 8,
            seed: 0,
            checkpoint_every: 0,
            early_stop: None,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return fail("gamma and gae_lambda must lie in [0, 1]");
        }
        if !(self.clip > 0.0 && self.value_clip > 0.0) {
            return fail("clip and value_clip must be positive");
        }
        if !(self.lr > 0.0) || !(self.max_grad_norm > 0.0) || !(self.entropy_coef >= 0.0) {
            return fail("lr and max_grad_norm must be positive, entropy_coef non-negative");
        }
        if self.ppo_epochs == 0 || self.minibatch_count == 0 || self.episodes_per_update == 0 {
            return fail("ppo_epochs, minibatch_count and episodes_per_update must be positive");
        }
        if let Some(es) = self.early_stop {
            if es.window == 0 || !(0.0..=1.0).contains(&es.success_rate) {
                return fail("early_stop needs a positive window and a rate in [0, 1]");
            }
        }
        self.model.validate()
    }

    pub fn rollout_params(&self) -> RolloutParams {
        RolloutParams {
            gamma: self.gamma,
            gae_lambda: self.gae_lambda,
        }
    }
}

/// Scenario plus trainer settings: the JSON accepted by `crowdnav train`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRun {
    pub scenario: ScenarioConfig,
    pub orca: OrcaParams,
    pub train: TrainConfig,
}

impl TrainRun {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let run: TrainRun = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        run.validate()?;
        Ok(run)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.train.validate()?;
        if self.train.model.n_robots != self.scenario.n_robots {
            return Err(Error::Config(format!(
                "model.n_robots ({}) must equal scenario.n_robots ({})",
                self.train.model.n_robots, self.scenario.n_robots
            )));
        }
        Ok(())
    }
}

/// Scalar terms of one loss evaluation.
pub struct LossTerms {
    pub total: Var,
    pub ma_actor: Var,
    pub la_actor: Var,
    pub ma_critic: Var,
    pub la_critic: Var,
    pub entropy: Var,
    pub la_new_logp: Var,
    pub ma_new_logp: Var,
}

/// Loss settings independent of the rollout.
#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    pub clip: f64,
    pub value_clip: f64,
    pub entropy_coef: f64,
}

impl From<&TrainConfig> for LossConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            clip: c.clip,
            value_clip: c.value_clip,
            entropy_coef: c.entropy_coef,
        }
    }
}

fn raw_tensor<const K: usize>(rows: impl Iterator<Item = [f64; K]>) -> Tensor {
    let data: Vec<f64> = rows.flat_map(|r| r.into_iter()).collect();
    Tensor::from_vec([data.len() / K, 1, K], data)
}

/// Full MAPPO objective on the selected samples: both clipped actor losses
/// (with entropy bonus) plus both clipped critic losses.
pub fn mappo_loss(
    g: &mut Graph,
    arch: &Architecture,
    buf: &RolloutBuffer,
    la: &[usize],
    ma: &[usize],
    la_adv: &[f64],
    ma_adv: &[f64],
    cfg: LossConfig,
) -> LossTerms {
    // Actor features, one row per distinct input.
    let mut actor_rows: HashMap<usize, usize> = HashMap::new();
    let mut actor_inputs: Vec<&EncoderInput> = Vec::new();
    let mut actor_robots = Vec::new();
    let robot_of: HashMap<usize, usize> = la
        .iter()
        .map(|k| (buf.la[*k].input, buf.la[*k].robot))
        .chain(ma.iter().map(|k| (buf.ma[*k].input, buf.ma[*k].robot)))
        .collect();
    for input in la
        .iter()
        .map(|k| buf.la[*k].input)
        .chain(ma.iter().map(|k| buf.ma[*k].input))
    {
        actor_rows.entry(input).or_insert_with(|| {
            actor_inputs.push(&buf.inputs[input]);
            actor_robots.push(robot_of[&input]);
            actor_inputs.len() - 1
        });
    }
    let y = arch.actor_features(g, &actor_inputs, &actor_robots);

    let la_robots: Vec<usize> = la.iter().map(|k| buf.la[*k].robot).collect();
    let la_rows: Vec<usize> = la.iter().map(|k| actor_rows[&buf.la[*k].input]).collect();
    let y_la = g.gather_rows(y, &la_rows, [la.len(), 1]);
    let wp = g.input(raw_tensor::<2>(la.iter().map(|k| buf.la[*k].waypoint)));
    let la_mean = arch.la_mean(g, y_la, wp, &la_robots);
    let la_raw = g.input(raw_tensor::<LA_DIM>(la.iter().map(|k| buf.la[*k].raw)));
    let la_logp = arch.la_log_prob(g, la_mean, la_raw, &la_robots);

    let ma_robots: Vec<usize> = ma.iter().map(|k| buf.ma[*k].robot).collect();
    let ma_rows: Vec<usize> = ma.iter().map(|k| actor_rows[&buf.ma[*k].input]).collect();
    let y_ma = g.gather_rows(y, &ma_rows, [ma.len(), 1]);
    let ma_mean = arch.ma_mean(g, y_ma, &ma_robots);
    let ma_raw = g.input(raw_tensor::<MA_DIM>(ma.iter().map(|k| buf.ma[*k].raw)));
    let ma_logp = arch.ma_log_prob(g, ma_mean, ma_raw, &ma_robots);

    let (ma_ent, la_ent) = arch.entropies(g);
    let la_old: Vec<f64> = la.iter().map(|k| buf.la[*k].logp).collect();
    let ma_old: Vec<f64> = ma.iter().map(|k| buf.ma[*k].logp).collect();
    let la_actor = actor_loss(
        g,
        la_logp,
        &la_old,
        la_adv,
        la_ent,
        cfg.clip,
        cfg.entropy_coef,
    );
    let ma_actor = actor_loss(
        g,
        ma_logp,
        &ma_old,
        ma_adv,
        ma_ent,
        cfg.clip,
        cfg.entropy_coef,
    );

    // Critic features, one row per distinct joint input.
    let mut critic_rows: HashMap<usize, usize> = HashMap::new();
    let mut critic_inputs: Vec<&EncoderInput> = Vec::new();
    for j in la
        .iter()
        .flat_map(|k| buf.la[*k].joint.iter())
        .chain(ma.iter().flat_map(|k| buf.ma[*k].joint.iter()))
    {
        critic_rows.entry(*j).or_insert_with(|| {
            critic_inputs.push(&buf.inputs[*j]);
            critic_inputs.len() - 1
        });
    }
    let feats = arch.critic_features(g, &critic_inputs);
    let la_joint: Vec<usize> = la
        .iter()
        .flat_map(|k| buf.la[*k].joint.iter().map(|j| critic_rows[j]))
        .collect();
    let la_wp: Vec<Vec<f64>> = la
        .iter()
        .map(|k| buf.la[*k].joint_waypoints.clone())
        .collect();
    let la_wp = g.input(rows_tensor(&la_wp));
    let la_v = arch.la_value(g, feats, &la_joint, la_wp, la.len());
    let ma_joint: Vec<usize> = ma
        .iter()
        .flat_map(|k| buf.ma[*k].joint.iter().map(|j| critic_rows[j]))
        .collect();
    let ma_v = arch.ma_value(g, feats, &ma_joint, ma.len());

    let la_old_v: Vec<f64> = la.iter().map(|k| buf.la[*k].value).collect();
    let la_ret: Vec<f64> = la.iter().map(|k| buf.la[*k].ret).collect();
    let ma_old_v: Vec<f64> = ma.iter().map(|k| buf.ma[*k].value).collect();
    let ma_ret: Vec<f64> = ma.iter().map(|k| buf.ma[*k].ret).collect();
    let la_critic = critic_loss(g, la_v, &la_old_v, &la_ret, cfg.value_clip);
    let ma_critic = critic_loss(g, ma_v, &ma_old_v, &ma_ret, cfg.value_clip);

    let a = g.add(ma_actor, la_actor);
    let c = g.add(ma_critic, la_critic);
    let total = g.add(a, c);
    let entropy = g.add(ma_ent, la_ent);
    LossTerms {
        total,
        ma_actor,
        la_actor,
        ma_critic,
        la_critic,
        entropy,
        la_new_logp: la_logp,
        ma_new_logp: ma_logp,
    }
}

/// Per-update diagnostics (one CSV row).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    pub update: usize,
    pub episodes: usize,
    pub mean_episode_reward: f64,
    pub success_rate: f64,
    pub ma_actor_loss: f64,
    pub la_actor_loss: f64,
    pub ma_critic_loss: f64,
    pub la_critic_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm_actor: f64,
    pub grad_norm_critic: f64,
}

impl UpdateStats {
    pub const CSV_HEADER: &'static str = "update,episodes,mean_episode_reward,success_rate,ma_actor_loss,\
la_actor_loss,ma_critic_loss,la_critic_loss,entropy,approx_kl,clip_fraction,grad_norm_actor,grad_norm_critic";

    pub fn csv_row(&self) -> String {
        let mut s = format!("{},{}", self.update, self.episodes);
        for v in [
            self.mean_episode_reward,
            self.success_rate,
            self.ma_actor_loss,
            self.la_actor_loss,
            self.ma_critic_loss,
            self.la_critic_loss,
            self.entropy,
            self.approx_kl,
            self.clip_fraction,
            self.grad_norm_actor,
            self.grad_norm_critic,
        ] {
            let _ = write!(s, ",{v:.6}");
        }
        s
    }
}

/// Contiguous split of `0..n` into `parts` chunks (never empty when n > 0).
fn chunks(n: usize, parts: usize) -> Vec<Vec<usize>> {
    let parts = parts.min(n).max(1);
    (0..parts)
        .map(|p| (p * n / parts..(p + 1) * n / parts).collect())
        .collect()
}

/// PPO update of every parameter on one buffer. Advantages are normalized
/// per buffer; gradients are clipped per optimizer group.
pub fn update(
    model: &mut Model,
    opt: &mut Adam,
    buf: &RolloutBuffer,
    cfg: &TrainConfig,
) -> Result<UpdateStats> {
    if buf.la.is_empty() || buf.ma.is_empty() {
        return Err(Error::Usage("update needs a non-empty buffer".into()));
    }
    let mut la_adv: Vec<f64> = buf.la.iter().map(|s| s.advantage).collect();
    let mut ma_adv: Vec<f64> = buf.ma.iter().map(|s| s.advantage).collect();
    normalize(&mut la_adv);
    normalize(&mut ma_adv);
    let la_chunks = chunks(buf.la.len(), cfg.minibatch_count);
    let ma_chunks = chunks(buf.ma.len(), cfg.minibatch_count);
    let n_groups = CRITIC_GROUP.max(ACTOR_GROUP) + 1;
    let mut stats = UpdateStats {
        episodes: buf.episodes.len(),
        mean_episode_reward: buf.mean_episode_reward(),
        success_rate: buf.success_rate(),
        ..Default::default()
    };
    let mut count = 0.0;
    for _ in 0..cfg.ppo_epochs {
        for (la, ma) in la_chunks.iter().zip(&ma_chunks) {
            let la_a: Vec<f64> = la.iter().map(|k| la_adv[*k]).collect();
            let ma_a: Vec<f64> = ma.iter().map(|k| ma_adv[*k]).collect();
            let mut g = Graph::new(&model.store);
            let terms = mappo_loss(
                &mut g,
                &model.arch,
                buf,
                la,
                ma,
                &la_a,
                &ma_a,
                LossConfig::from(cfg),
            );
            let total = g.value(terms.total).item();
            if !total.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss: ma_actor {} la_actor {} ma_critic {} la_critic {}",
                    g.value(terms.ma_actor).item(),
                    g.value(terms.la_actor).item(),
                    g.value(terms.ma_critic).item(),
                    g.value(terms.la_critic).item()
                )));
            }
            let new_lp = &g.value(terms.la_new_logp).data;
            let mut kl = 0.0;
            let mut clipped = 0.0;
            for (j, k) in la.iter().enumerate() {
                let d = new_lp[j] - buf.la[*k].logp;
                kl += -d;
                if (d.exp() - 1.0).abs() > cfg.clip {
                    clipped += 1.0;
                }
            }
            stats.approx_kl += kl / la.len() as f64;
            stats.clip_fraction += clipped / la.len() as f64;
            stats.ma_actor_loss += g.value(terms.ma_actor).item();
            stats.la_actor_loss += g.value(terms.la_actor).item();
            stats.ma_critic_loss += g.value(terms.ma_critic).item();
            stats.la_critic_loss += g.value(terms.la_critic).item();
            stats.entropy += g.value(terms.entropy).item();
            let mut grads = g.backward(terms.total).into_params();
            drop(g);
            if grads.iter().flatten().any(|t| !t.all_finite()) {
                return Err(Error::Diverged("non-finite gradient".into()));
            }
            let norms = clip_grad_norm(&model.store, &mut grads, n_groups, cfg.max_grad_norm);
            stats.grad_norm_actor += norms[ACTOR_GROUP];
            stats.grad_norm_critic += norms[CRITIC_GROUP];
            opt.step(&mut model.store, &grads);
            count += 1.0;
        }
    }
    for v in [
        &mut stats.ma_actor_loss,
        &mut stats.la_actor_loss,
        &mut stats.ma_critic_loss,
        &mut stats.la_critic_loss,
        &mut stats.entropy,
        &mut stats.approx_kl,
        &mut stats.clip_fraction,
        &mut stats.grad_norm_actor,
        &mut stats.grad_norm_critic,
    ] {
        *v /= count;
    }
    if !model.store.all_finite() {
        return Err(Error::Diverged("parameters became non-finite".into()));
    }
    Ok(stats)
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<UpdateStats>,
    pub episodes_run: usize,
    pub stopped_early: bool,
}

/// Run directory layout written by [`train`].
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn diagnostics(&self) -> PathBuf {
        self.root.join("diagnostics.csv")
    }
    pub fn checkpoint(&self, update: usize) -> PathBuf {
        self.root.join(format!("checkpoint_{update:05}.json"))
    }
    pub fn final_model(&self) -> PathBuf {
        self.root.join("model.json")
    }
}

/// Joint success of the mean-action policy on the validation cases.
pub fn validation_success(model: &Model, run: &TrainRun, cases: usize) -> Result<f64> {
    let policy = if model.config().single_agent {
        EvalPolicy::SamarlPpo
    } else {
        EvalPolicy::Samarl
    };
    let ev = Evaluator::new(policy, run.scenario.clone(), run.orca, Some(model.clone()))?;
    let seeds = eval_seeds(VALIDATION_SEED_BASE ^ run.train.seed, cases);
    let traces = ev.run(&seeds)?;
    Ok(traces
        .iter()
        .filter(|t| t.status() == EpisodeStatus::AllSuccess)
        .count() as f64
        / cases as f64)
}

/// Trains from scratch. With `out`, writes the config snapshot, appends
/// diagnostics after every update and stores checkpoints.
pub fn train(
    run: &TrainRun,
    out: Option<&Path>,
    mut on_update: impl FnMut(&UpdateStats),
) -> Result<TrainOutcome> {
    run.validate()?;
    let cfg = &run.train;
    let mut model = Model::new(cfg.model, cfg.seed)?;
    let mut opt = Adam::new(
        &model.store,
        AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
    );
    let dir = out.map(|p| RunDir {
        root: p.to_path_buf(),
    });
    let mut csv = None;
    if let Some(d) = &dir {
        std::fs::create_dir_all(&d.root).map_err(|e| Error::io(&d.root, e))?;
        let snapshot = serde_json::to_string_pretty(run)?;
        std::fs::write(d.config(), snapshot).map_err(|e| Error::io(d.config(), e))?;
        let path = d.diagnostics();
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{}", UpdateStats::CSV_HEADER).map_err(|e| Error::io(&path, e))?;
        csv = Some((f, path));
    }

    let mut history = Vec::new();
    let mut recent: std::collections::VecDeque<bool> = Default::default();
    let mut episodes_run = 0;
    let mut stopped_early = false;
    let mut update_idx = 0;
    while episodes_run < cfg.episodes {
        let n = cfg.episodes_per_update.min(cfg.episodes - episodes_run);
        let seeds: Vec<u64> = (0..n)
            .map(|k| episode_seed(cfg.seed, (episodes_run + k) as u64))
            .collect();
        let buf = collect_rollout(
            &model,
            &run.scenario,
            &run.orca,
            cfg.rollout_params(),
            &seeds,
        )?;
        episodes_run += n;
        let mut stats = update(&mut model, &mut opt, &buf, cfg)?;
        stats.update = update_idx;
        if let Some((f, path)) = &mut csv {
            writeln!(f, "{}", stats.csv_row()).map_err(|e| Error::io(path.as_path(), e))?;
        }
        on_update(&stats);
        history.push(stats);
        update_idx += 1;
        if let Some(d) = &dir {
            if cfg.checkpoint_every > 0 && update_idx % cfg.checkpoint_every == 0 {
                model.save(&d.checkpoint(update_idx))?;
            }
        }
        if let Some(es) = cfg.early_stop.filter(|es| es.validation_cases > 0) {
            if episodes_run / es.window > (episodes_run - n) / es.window
                && validation_success(&model, run, es.validation_cases)? >= es.success_rate
            {
                stopped_early = true;
                break;
            }
        } else if let Some(es) = cfg.early_stop {
            for e in &buf.episodes {
                recent.push_back(e.success());
                if recent.len() > es.window {
                    recent.pop_front();
                }
            }
            let rate = recent.iter().filter(|s| **s).count() as f64 / recent.len() as f64;
            if recent.len() == es.window && rate >= es.success_rate {
                stopped_early = true;
                break;
            }
        }
    }
    if let Some(d) = &dir {
        model.save(&d.final_model())?;
    }
    Ok(TrainOutcome {
        model,
        history,
        episodes_run,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::marl::rollout::collect_episode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_run(n_robots: usize) -> TrainRun {
        TrainRun {
            scenario: ScenarioConfig {
                n_robots,
                n_humans: 2,
                t_k_max: 4,
                ..Default::default()
            },
            orca: OrcaParams::default(),
            train: TrainConfig {
                episodes: 4,
                episodes_per_update: 2,
                ppo_epochs: 2,
                model: ModelConfig {
                    n_robots,
                    encoder: EncoderConfig {
                        d_model: 8,
                        heads: 2,
                        layers: 1,
                        history: 2,
                    },
                    hidden: 8,
                    ..Default::default()
                },
                ..Default::default()
            },
        }
    }

    fn buffer(run: &TrainRun, model: &Model) -> RolloutBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        collect_episode(
            model,
            &run.scenario,
            &run.orca,
            run.train.rollout_params(),
            1,
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn first_epoch_ratio_is_one() {
        let run = small_run(2);
        let model = Model::new(run.train.model, 0).unwrap();
        let buf = buffer(&run, &model);
        let la: Vec<usize> = (0..buf.la.len()).collect();
        let ma: Vec<usize> = (0..buf.ma.len()).collect();
        let mut g = Graph::new(&model.store);
        let t = mappo_loss(
            &mut g,
            &model.arch,
            &buf,
            &la,
            &ma,
            &vec![0.0; la.len()],
            &vec![0.0; ma.len()],
            LossConfig::from(&run.train),
        );
        for (k, lp) in g.value(t.la_new_logp).data.iter().enumerate() {
            assert!((lp - buf.la[k].logp).abs() < 1e-9);
        }
        for (k, lp) in g.value(t.ma_new_logp).data.iter().enumerate() {
            assert!((lp - buf.ma[k].logp).abs() < 1e-9);
        }
        // Stored values were produced by the same critics.
        let mut g = Graph::new(&model.store);
        let cfg = LossConfig {
            value_clip: 1e9,
            ..LossConfig::from(&run.train)
        };
        let t = mappo_loss(
            &mut g,
            &model.arch,
            &buf,
            &la,
            &ma,
            &vec![0.0; la.len()],
            &vec![0.0; ma.len()],
            cfg,
        );
        let mse: f64 = buf
            .la
            .iter()
            .map(|s| (s.value - s.ret).powi(2))
            .sum::<f64>()
            / la.len() as f64;
        assert!((g.value(t.la_critic).item() - mse).abs() < 1e-9);
    }

    #[test]
    fn zero_advantage_moves_actors_only_through_entropy() {
        let run = small_run(1);
        let model = Model::new(run.train.model, 0).unwrap();
        let buf = buffer(&run, &model);
        let la: Vec<usize> = (0..buf.la.len()).collect();
        let ma: Vec<usize> = (0..buf.ma.len()).collect();
        let mut g = Graph::new(&model.store);
        let t = mappo_loss(
            &mut g,
            &model.arch,
            &buf,
            &la,
            &ma,
            &vec![0.0; la.len()],
            &vec![0.0; ma.len()],
            LossConfig::from(&run.train),
        );
        let a = g.add(t.ma_actor, t.la_actor);
        let grads = g.backward(a);
        for id in model.store.ids() {
            let name = model.store.name(id);
            let Some(gr) = &grads.params()[id.0] else {
                continue;
            };
            let nz = gr.data.iter().any(|v| *v != 0.0);
            if name.ends_with("log_std") {
                assert!(gr.data.iter().all(|v| (*v + 0.01).abs() < 1e-12), "{name}");
            } else {
                assert!(!nz, "{name} moved without advantage");
            }
        }
    }

    #[test]
    fn single_transition_step_matches_manual_adam() {
        let run = small_run(1);
        let mut model = Model::new(run.train.model, 0).unwrap();
        let mut buf = buffer(&run, &model);
        buf.la.truncate(1);
        buf.ma.truncate(1);
        // Non-zero normalized advantage requires spread; one sample normalizes to 0.
        let mut g = Graph::new(&model.store);
        let t = mappo_loss(
            &mut g,
            &model.arch,
            &buf,
            &[0],
            &[0],
            &[0.0],
            &[0.0],
            LossConfig::from(&run.train),
        );
        let mut grads = g.backward(t.total).into_params();
        drop(g);
        clip_grad_norm(&model.store, &mut grads, 2, 10.0);
        let before = model.store.clone();
        let cfg = TrainConfig {
            ppo_epochs: 1,
            ..run.train
        };
        let mut opt = Adam::new(
            &model.store,
            AdamConfig {
                lr: cfg.lr,
                ..Default::default()
            },
        );
        update(&mut model, &mut opt, &buf, &cfg).unwrap();
        for id in model.store.ids() {
            let g = &grads[id.0];
            for (k, (a, b)) in model
                .store
                .value(id)
                .data
                .iter()
                .zip(&before.value(id).data)
                .enumerate()
            {
                let gv = g.as_ref().map_or(0.0, |t| t.data[k]);
                // First Adam step moves by lr * sign(g) (up to eps).
                let expect = if gv == 0.0 {
                    0.0
                } else {
                    -cfg.lr * gv / (gv.abs() + 1e-8)
                };
                assert!((a - b - expect).abs() < 1e-6, "{}", model.store.name(id));
            }
        }
    }

    #[test]
    fn train_writes_run_directory() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = small_run(1);
        run.train.checkpoint_every = 1;
        let out = train(&run, Some(dir.path()), |_| {}).unwrap();
        assert_eq!(out.history.len(), 2);
        let d = RunDir {
            root: dir.path().to_path_buf(),
        };
        let csv = std::fs::read_to_string(d.diagnostics()).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("update,episodes,mean_episode_reward,success_rate"));
        assert!(d.checkpoint(2).exists() && d.final_model().exists());
        let back = TrainRun::from_json_str(&std::fs::read_to_string(d.config()).unwrap()).unwrap();
        assert_eq!(back, run);
        let m = Model::load(&d.final_model()).unwrap();
        assert_eq!(m.store.to_arrays(), out.model.store.to_arrays());
    }

    #[test]
    fn training_is_deterministic() {
        let run = small_run(2);
        let a = train(&run, None, |_| {}).unwrap();
        let b = train(&run, None, |_| {}).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model.store.to_arrays(), b.model.store.to_arrays());
    }

    #[test]
    fn config_validation() {
        let mut run = small_run(2);
        run.train.model.n_robots = 3;
        assert!(matches!(run.validate(), Err(Error::Config(_))));
        assert!(TrainRun::from_json_str(r#"{"train": {"clip": 0.0}}"#).is_err());
        assert!(TrainRun::from_json_str(r#"{"bogus": 1}"#).is_err());
        assert!(TrainRun::from_json_str("{}").is_ok());
    }
}
