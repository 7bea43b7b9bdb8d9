//! Spatial-temporal transformer over a robot's observation history.
//!
//! Each robot sees two token streams per frame: robots (slot 0 is itself) and
//! humans. Every stream runs through a spatial block (attention + GCN over
//! the agents of one frame) and a temporal block (attention over one agent's
//! frames). The four outputs are fused by cross-modal attention and a
//! transformer layer, then mean-pooled into a single `d_model` vector `Y`.
//!
//! All token positions are expressed in the observer's goal-centric frame at
//! the latest observation: origin at the robot, +x toward its goal.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{HistoryBuffer, Observation};
use crate::nn::{Graph, Linear, Norm, ParamStore, Tensor, Var};
use crate::scenario::{wrap_angle, PublicState};

/// Per-token feature width.
pub const FEATURE_DIM: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub history: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            layers: 2,
            history: 5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(crate::Error::Config(format!(
                "d_model ({}) must be a positive multiple of heads ({})",
                self.d_model, self.heads
            )));
        }
        if self.layers == 0 || self.history == 0 {
            return Err(crate::Error::Config(
                "layers and history must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Token features for one stream of one robot's window, time-major:
/// token `t * agents + a` is agent slot `a` at frame `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamInput {
    pub agents: usize,
    pub frames: usize,
    pub features: Vec<f64>,
    pub mask: Vec<f64>,
}

impl StreamInput {
    pub fn empty(agents: usize, frames: usize) -> Self {
        Self {
            agents,
            frames,
            features: vec![0.0; agents * frames * FEATURE_DIM],
            mask: vec![0.0; agents * frames],
        }
    }

    pub fn tokens(&self) -> usize {
        self.agents * self.frames
    }

    fn set(&mut self, frame: usize, slot: usize, feat: [f64; FEATURE_DIM]) {
        let tok = frame * self.agents + slot;
        self.features[tok * FEATURE_DIM..(tok + 1) * FEATURE_DIM].copy_from_slice(&feat);
        self.mask[tok] = 1.0;
    }
}

/// Encoder input of one robot at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    pub robots: StreamInput,
    pub humans: StreamInput,
}

/// Goal-centric frame anchored at the observer's latest state.
#[derive(Debug, Clone, Copy)]
pub struct GoalFrame {
    pub origin: [f64; 2],
    pub angle: f64,
}

impl GoalFrame {
    pub fn of(obs: &Observation) -> Self {
        let s = &obs.self_state;
        let dx = s.private.gx - s.public.px;
        let dy = s.private.gy - s.public.py;
        let angle = if dx == 0.0 && dy == 0.0 {
            s.private.theta
        } else {
            dy.atan2(dx)
        };
        Self {
            origin: [s.public.px, s.public.py],
            angle,
        }
    }

    /// World vector into this frame's axes.
    pub fn rotate_in(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.angle.sin_cos();
        [c * v[0] + s * v[1], -s * v[0] + c * v[1]]
    }

    /// Frame vector back into world axes.
    pub fn rotate_out(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.angle.sin_cos();
        [c * v[0] - s * v[1], s * v[0] + c * v[1]]
    }

    pub fn point_in(&self, p: [f64; 2]) -> [f64; 2] {
        self.rotate_in([p[0] - self.origin[0], p[1] - self.origin[1]])
    }

    fn agent_features(&self, st: &PublicState) -> [f64; FEATURE_DIM] {
        let p = self.point_in(st.position());
        let v = self.rotate_in([st.vx, st.vy]);
        [p[0], p[1], v[0], v[1], st.rho, 0.0, 0.0, 0.0, 0.0, 0.0]
    }
}

/// Features of a robot's history window. Other robots occupy slots
/// `1..n_robots` in id order, humans occupy slots in id order; absent or
/// out-of-view agents are masked with zero features.
pub fn build_input(history: &HistoryBuffer, n_robots: usize, n_humans: usize) -> EncoderInput {
    let window = history.window();
    let latest = history
        .latest()
        .expect("history must hold at least one observation");
    build_input_from(&window, latest, n_robots, n_humans)
}

pub fn build_input_from(
    window: &[Option<&Observation>],
    latest: &Observation,
    n_robots: usize,
    n_humans: usize,
) -> EncoderInput {
    let frames = window.len();
    let frame = GoalFrame::of(latest);
    let me = latest.self_state.id;
    let mut robots = StreamInput::empty(n_robots, frames);
    let mut humans = StreamInput::empty(n_humans, frames);
    for (t, obs) in window.iter().enumerate() {
        let Some(obs) = obs else { continue };
        let s = &obs.self_state;
        let mut f = frame.agent_features(&s.public);
        f[5] = 1.0;
        f[6] = s.goal_distance();
        f[7] = s.private.v_pref;
        let rel = wrap_angle(s.private.theta - frame.angle);
        f[8] = rel.cos();
        f[9] = rel.sin();
        robots.set(t, 0, f);
        for v in &obs.visible {
            if v.id < n_robots {
                let slot = if v.id < me { v.id + 1 } else { v.id };
                robots.set(t, slot, frame.agent_features(&v.state));
            } else {
                humans.set(t, v.id - n_robots, frame.agent_features(&v.state));
            }
        }
    }
    EncoderInput { robots, humans }
}

/// A batch of one stream, stacked along the batch axis.
#[derive(Debug, Clone)]
pub struct StreamBatch {
    pub batch: usize,
    pub agents: usize,
    pub frames: usize,
    pub features: Tensor,
    pub mask: Vec<f64>,
}

impl StreamBatch {
    pub fn stack<'a>(parts: impl IntoIterator<Item = &'a StreamInput>) -> Self {
        let mut it = parts.into_iter().peekable();
        let first = it.peek().expect("empty batch");
        let (agents, frames) = (first.agents, first.frames);
        let mut feats = Vec::new();
        let mut mask = Vec::new();
        let mut batch = 0;
        for p in it {
            assert_eq!(
                (p.agents, p.frames),
                (agents, frames),
                "ragged stream batch"
            );
            feats.extend_from_slice(&p.features);
            mask.extend_from_slice(&p.mask);
            batch += 1;
        }
        Self {
            batch,
            agents,
            frames,
            features: Tensor::from_vec([batch, agents * frames, FEATURE_DIM], feats),
            mask,
        }
    }

    pub fn tokens(&self) -> usize {
        self.agents * self.frames
    }
}

#[derive(Debug, Clone)]
pub struct EncoderBatch {
    pub robots: StreamBatch,
    pub humans: StreamBatch,
}

impl EncoderBatch {
    pub fn stack<'a>(inputs: impl IntoIterator<Item = &'a EncoderInput> + Clone) -> Self {
        Self {
            robots: StreamBatch::stack(inputs.clone().into_iter().map(|i| &i.robots)),
            humans: StreamBatch::stack(inputs.into_iter().map(|i| &i.humans)),
        }
    }

    pub fn batch(&self) -> usize {
        self.robots.batch
    }
}

/// Sinusoidal encoding of the frame index, `[frames, d]` flattened.
pub fn positional_encoding(frames: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; frames * d];
    for t in 0..frames {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let x = t as f64 / rate;
            pe[t * d + i] = if i % 2 == 0 { x.sin() } else { x.cos() };
        }
    }
    pe
}

#[derive(Debug, Clone)]
pub struct Mha {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Mha {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        group: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            heads,
            q: Linear::new(store, &format!("{name}.q"), d, d, true, group, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, true, group, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, true, group, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, true, group, rng),
        }
    }
}

/// Output of [`multi_head_attention`]: projected result and per-head weights.
pub struct Attention {
    pub out: Var,
    pub weights: Vec<Var>,
}

/// Scaled dot-product attention of `x` over `context` (`[B, Rq, d]` and
/// `[B, Rk, d]`). `key_mask` is `[B, 1, Rk]` or `[B, Rq, Rk]`; masked keys get
/// zero weight and a query with no valid key attends to nothing (zero
/// before the output projection).
pub fn multi_head_attention(
    g: &mut Graph,
    p: &Mha,
    x: Var,
    context: Var,
    key_mask: &Tensor,
) -> Attention {
    let d = g.shape(x)[2];
    let dh = d / p.heads;
    let q = p.q.forward(g, x);
    let k = p.k.forward(g, context);
    let v = p.v.forward(g, context);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(p.heads);
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (qh, kh, vh) = if p.heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh),
                g.slice_cols(k, h * dh, dh),
                g.slice_cols(v, h * dh, dh),
            )
        };
        let s = g.bmm(qh, kh, true);
        let s = g.scale(s, scale);
        let w = g.masked_softmax(s, Some(key_mask));
        outs.push(g.bmm(w, vh, false));
        weights.push(w);
    }
    let cat = if outs.len() == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)
    };
    Attention {
        out: p.o.forward(g, cat),
        weights,
    }
}

#[derive(Debug, Clone)]
struct SpatialLayer {
    attn: Mha,
    gcn: Linear,
    gate: Linear,
    norm: Norm,
}

#[derive(Debug, Clone)]
struct TemporalLayer {
    attn: Mha,
    norm: Norm,
}

#[derive(Debug, Clone)]
pub struct SpatialBlock {
    embed: Linear,
    layers: Vec<SpatialLayer>,
}

#[derive(Debug, Clone)]
pub struct TemporalBlock {
    embed: Linear,
    layers: Vec<TemporalLayer>,
}

#[derive(Debug, Clone)]
pub struct Fusion {
    cross: Vec<Mha>,
    attn: Mha,
    norm1: Norm,
    ffn_in: Linear,
    ffn_out: Linear,
    norm2: Norm,
}

/// One encoder parameter set (`p_star` for actors or its critic copy).
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub spatial_robot: SpatialBlock,
    pub spatial_human: SpatialBlock,
    pub temporal_robot: TemporalBlock,
    pub temporal_human: TemporalBlock,
    pub fusion: Fusion,
}

/// An encoded token stream, `[B, tokens, d]`, with its token mask.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub y: Var,
    pub mask: Vec<f64>,
    pub tokens: usize,
    /// Attention weights of every layer and head, `[B', Rq, Rk]` each.
    pub attention: Vec<Var>,
}

impl SpatialBlock {
    fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cfg: &EncoderConfig,
        group: usize,
        rng: &mut R,
    ) -> Self {
        let d = cfg.d_model;
        let layers = (0..cfg.layers)
            .map(|l| SpatialLayer {
                attn: Mha::new(store, &format!("{name}.{l}.attn"), d, cfg.heads, group, rng),
                gcn: Linear::new(store, &format!("{name}.{l}.gcn"), d, d, true, group, rng),
                gate: Linear::new(
                    store,
                    &format!("{name}.{l}.gate"),
                    2 * d,
                    d,
                    true,
                    group,
                    rng,
                ),
                norm: Norm::new(store, &format!("{name}.{l}.norm"), d, group),
            })
            .collect();
        Self {
            embed: Linear::new(
                store,
                &format!("{name}.embed"),
                FEATURE_DIM,
                d,
                true,
                group,
                rng,
            ),
            layers,
        }
    }
}

impl TemporalBlock {
    fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cfg: &EncoderConfig,
        group: usize,
        rng: &mut R,
    ) -> Self {
        let d = cfg.d_model;
        let layers = (0..cfg.layers)
            .map(|l| TemporalLayer {
                attn: Mha::new(store, &format!("{name}.{l}.attn"), d, cfg.heads, group, rng),
                norm: Norm::new(store, &format!("{name}.{l}.norm"), d, group),
            })
            .collect();
        Self {
            embed: Linear::new(
                store,
                &format!("{name}.embed"),
                FEATURE_DIM,
                d,
                true,
                group,
                rng,
            ),
            layers,
        }
    }
}

fn embed(g: &mut Graph, lin: &Linear, s: &StreamBatch, d: usize) -> Var {
    let x = g.input(s.features.clone());
    let e = lin.forward(g, x);
    let pe = positional_encoding(s.frames, d);
    let mut rows = Vec::with_capacity(s.tokens() * d);
    for t in 0..s.frames {
        for _ in 0..s.agents {
            rows.extend_from_slice(&pe[t * d..(t + 1) * d]);
        }
    }
    let pe = g.input(Tensor::from_vec([1, s.tokens(), d], rows));
    g.add(e, pe)
}

fn apply_mask(g: &mut Graph, y: Var, mask: &[f64]) -> Var {
    let [b, r, _] = g.shape(y);
    let m = g.input(Tensor::from_vec([b, r, 1], mask.to_vec()));
    g.mul(y, m)
}

/// Zero-token stand-in for a stream with no agent slots.
fn placeholder(g: &mut Graph, b: usize, d: usize) -> Encoded {
    Encoded {
        y: g.input(Tensor::zeros([b, 0, d])),
        mask: Vec::new(),
        tokens: 0,
        attention: Vec::new(),
    }
}

/// Spatial stage for one stream: attention over the agents of each frame,
/// a GCN over the attention graph, a fusion gate, residual and norm.
/// Output tokens keep the input's time-major order.
pub fn spatial_block(g: &mut Graph, p: &SpatialBlock, s: &StreamBatch, d: usize) -> Encoded {
    let (b, a, l) = (s.batch, s.agents, s.frames);
    if a == 0 {
        return placeholder(g, b, d);
    }
    let mut attention = Vec::new();
    let mut e = embed(g, &p.embed, s, d);
    e = g.reshape(e, [b * l, a, d]);
    let key_mask = Tensor::from_vec([b * l, 1, a], s.mask.clone());
    let mut pair = vec![0.0; b * l * a * a];
    for n in 0..b * l {
        for i in 0..a {
            for j in 0..a {
                pair[(n * a + i) * a + j] = s.mask[n * a + i] * s.mask[n * a + j];
            }
        }
    }
    let pair = g.input(Tensor::from_vec([b * l, a, a], pair));
    let heads = p.layers.first().map_or(1, |l| l.attn.heads);
    for layer in &p.layers {
        let att = multi_head_attention(g, &layer.attn, e, e, &key_mask);
        let mut avg = att.weights[0];
        for w in &att.weights[1..] {
            avg = g.add(avg, *w);
        }
        let avg = g.scale(avg, 1.0 / heads as f64);
        attention.extend(att.weights);
        let avg_t = g.transpose(avg);
        let sym = g.add(avg, avg_t);
        let sym = g.mul(sym, pair);
        let adj = g.row_normalize(sym);
        let he = layer.gcn.forward(g, e);
        let gcn = g.bmm(adj, he, false);
        let gcn = g.relu(gcn);
        let both = g.concat_cols(&[att.out, gcn]);
        let gate = layer.gate.forward(g, both);
        let gate = g.sigmoid(gate);
        let ga = g.mul(gate, att.out);
        let one_minus = g.neg(gate);
        let one_minus = g.shift(one_minus, 1.0);
        let gb = g.mul(one_minus, gcn);
        let h = g.add(ga, gb);
        let h = g.add(h, e);
        let h = layer.norm.forward(g, h);
        e = apply_mask(g, h, &s.mask);
    }
    let y = g.reshape(e, [b, a * l, d]);
    Encoded {
        y,
        mask: s.mask.clone(),
        tokens: a * l,
        attention,
    }
}

/// Temporal stage for one stream: attention across each agent's frames.
/// Output tokens are agent-major: token `a * frames + t`.
pub fn temporal_block(g: &mut Graph, p: &TemporalBlock, s: &StreamBatch, d: usize) -> Encoded {
    let (b, a, l) = (s.batch, s.agents, s.frames);
    if a == 0 {
        return placeholder(g, b, d);
    }
    let mut attention = Vec::new();
    let e = embed(g, &p.embed, s, d);
    let mut idx = Vec::with_capacity(b * a * l);
    let mut mask = Vec::with_capacity(b * a * l);
    for bb in 0..b {
        for ag in 0..a {
            for t in 0..l {
                let src = bb * l * a + t * a + ag;
                idx.push(src);
                mask.push(s.mask[src]);
            }
        }
    }
    let mut e = g.gather_rows(e, &idx, [b * a, l]);
    let key_mask = Tensor::from_vec([b * a, 1, l], mask.clone());
    for layer in &p.layers {
        let att = multi_head_attention(g, &layer.attn, e, e, &key_mask);
        attention.extend(att.weights);
        let h = g.add(e, att.out);
        let h = layer.norm.forward(g, h);
        e = apply_mask(g, h, &mask);
    }
    let y = g.reshape(e, [b, a * l, d]);
    Encoded {
        y,
        mask,
        tokens: a * l,
        attention,
    }
}

/// Spatial encodings `(Y_HS, Y_RS)` of both streams.
pub fn spatial_encode(
    g: &mut Graph,
    enc: &Encoder,
    humans: &StreamBatch,
    robots: &StreamBatch,
) -> (Encoded, Encoded) {
    let d = enc.config.d_model;
    (
        spatial_block(g, &enc.spatial_human, humans, d),
        spatial_block(g, &enc.spatial_robot, robots, d),
    )
}

/// Temporal encodings `(Y_HT, Y_RT)` of both streams.
pub fn temporal_encode(
    g: &mut Graph,
    enc: &Encoder,
    humans: &StreamBatch,
    robots: &StreamBatch,
) -> (Encoded, Encoded) {
    let d = enc.config.d_model;
    (
        temporal_block(g, &enc.temporal_human, humans, d),
        temporal_block(g, &enc.temporal_robot, robots, d),
    )
}

/// Cross-modal fusion of the four streams (order RS, HS, RT, HT) followed
/// by a transformer layer and a masked mean over tokens: `[B, 1, d]`.
/// Streams with no tokens are skipped.
pub fn fuse(g: &mut Graph, p: &Fusion, streams: [&Encoded; 4]) -> Var {
    let live: Vec<(usize, &Encoded)> = streams
        .iter()
        .copied()
        .enumerate()
        .filter(|(_, s)| s.tokens > 0)
        .collect();
    let b = g.shape(live[0].1.y)[0];
    let total: usize = live.iter().map(|(_, s)| s.tokens).sum();
    let mut mask = Vec::with_capacity(b * total);
    for bb in 0..b {
        for (_, s) in &live {
            mask.extend_from_slice(&s.mask[bb * s.tokens..(bb + 1) * s.tokens]);
        }
    }
    let ys: Vec<Var> = live.iter().map(|(_, s)| s.y).collect();
    let fused = g.concat_rows(&ys);
    let key_mask = Tensor::from_vec([b, 1, total], mask.clone());
    let cross: Vec<Var> = live
        .iter()
        .map(|(m, s)| multi_head_attention(g, &p.cross[*m], s.y, fused, &key_mask).out)
        .collect();
    let c = g.concat_rows(&cross);
    let c = apply_mask(g, c, &mask);
    let att = multi_head_attention(g, &p.attn, c, c, &key_mask);
    let z = g.add(c, att.out);
    let z = p.norm1.forward(g, z);
    let f = p.ffn_in.forward(g, z);
    let f = g.relu(f);
    let f = p.ffn_out.forward(g, f);
    let z = g.add(z, f);
    let z = p.norm2.forward(g, z);
    g.masked_mean_rows(z, &mask)
}

impl Encoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        config: EncoderConfig,
        group: usize,
        rng: &mut R,
    ) -> Self {
        config.validate().expect("invalid encoder config");
        let d = config.d_model;
        let h = config.heads;
        let cfg = &config;
        let spatial_robot =
            SpatialBlock::new(store, &format!("{name}.spatial_robot"), cfg, group, rng);
        let spatial_human =
            SpatialBlock::new(store, &format!("{name}.spatial_human"), cfg, group, rng);
        let temporal_robot =
            TemporalBlock::new(store, &format!("{name}.temporal_robot"), cfg, group, rng);
        let temporal_human =
            TemporalBlock::new(store, &format!("{name}.temporal_human"), cfg, group, rng);
        let fusion = Fusion {
            cross: ["rs", "hs", "rt", "ht"]
                .iter()
                .map(|m| Mha::new(store, &format!("{name}.fusion.cross_{m}"), d, h, group, rng))
                .collect(),
            attn: Mha::new(store, &format!("{name}.fusion.attn"), d, h, group, rng),
            norm1: Norm::new(store, &format!("{name}.fusion.norm1"), d, group),
            ffn_in: Linear::new(
                store,
                &format!("{name}.fusion.ffn_in"),
                d,
                2 * d,
                true,
                group,
                rng,
            ),
            ffn_out: Linear::new(
                store,
                &format!("{name}.fusion.ffn_out"),
                2 * d,
                d,
                true,
                group,
                rng,
            ),
            norm2: Norm::new(store, &format!("{name}.fusion.norm2"), d, group),
        };
        Self {
            config,
            spatial_robot,
            spatial_human,
            temporal_robot,
            temporal_human,
            fusion,
        }
    }

    /// Fused feature `Y` for every batch entry: `[B, 1, d_model]`.
    pub fn forward(&self, g: &mut Graph, batch: &EncoderBatch) -> Var {
        let (hs, rs) = spatial_encode(g, self, &batch.humans, &batch.robots);
        let (ht, rt) = temporal_encode(g, self, &batch.humans, &batch.robots);
        fuse(g, &self.fusion, [&rs, &hs, &rt, &ht])
    }

    /// Convenience: `Y` of a single input as a plain vector.
    pub fn encode(&self, store: &ParamStore, input: &EncoderInput) -> Vec<f64> {
        let mut g = Graph::new(store);
        let y = self.forward(&mut g, &EncoderBatch::stack([input]));
        g.value(y).data.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::reset;
    use crate::scenario::ScenarioConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (ParamStore, Encoder) {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = EncoderConfig {
            d_model: 8,
            heads: 2,
            layers: 2,
            history: 3,
        };
        let enc = Encoder::new(&mut store, "enc", cfg, 0, &mut rng);
        (store, enc)
    }

    fn random_stream(
        rng: &mut ChaCha8Rng,
        agents: usize,
        frames: usize,
        p_visible: f64,
    ) -> StreamInput {
        let mut s = StreamInput::empty(agents, frames);
        for t in 0..frames {
            for a in 0..agents {
                if rng.random_bool(p_visible) {
                    let mut f = [0.0; FEATURE_DIM];
                    for v in &mut f {
                        *v = rng.random_range(-2.0..2.0);
                    }
                    s.set(t, a, f);
                }
            }
        }
        s
    }

    #[test]
    fn uniform_attention_for_equal_scores() {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mha = Mha::new(&mut store, "m", 4, 2, 0, &mut rng);
        for id in [mha.q.w, mha.k.w] {
            store.value_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::from_vec(
            [1, 3, 4],
            (0..12).map(|i| i as f64 * 0.1).collect(),
        ));
        let mask = Tensor::from_vec([1, 1, 3], vec![1.0, 1.0, 0.0]);
        let att = multi_head_attention(&mut g, &mha, x, x, &mask);
        for w in &att.weights {
            let w = g.value(*w);
            for r in 0..3 {
                assert!((w.at(0, r, 0) - 0.5).abs() < 1e-15);
                assert!((w.at(0, r, 1) - 0.5).abs() < 1e-15);
                assert_eq!(w.at(0, r, 2), 0.0);
            }
        }
    }

    #[test]
    fn single_valid_key_returns_its_value() {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mha = Mha::new(&mut store, "m", 4, 2, 0, &mut rng);
        let mut g = Graph::new(&store);
        let ctx = Tensor::from_vec([1, 2, 4], vec![0.3, -0.2, 0.5, 1.0, 9.0, 9.0, 9.0, 9.0]);
        let ctx = g.input(ctx);
        let q = g.input(Tensor::from_vec([1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]));
        let mask = Tensor::from_vec([1, 1, 2], vec![1.0, 0.0]);
        let att = multi_head_attention(&mut g, &mha, q, ctx, &mask);
        // Expected: o(v(ctx[0])).
        let first = g.slice_rows(ctx, 0, 1);
        let v = mha.v.forward(&mut g, first);
        let o = mha.o.forward(&mut g, v);
        for (a, b) in g.value(att.out).data.iter().zip(&g.value(o).data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn spatial_single_agent_adjacency_is_identity() {
        let (store, enc) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = StreamBatch::stack([&random_stream(&mut rng, 1, 1, 1.0)]);
        let mut g = Graph::new(&store);
        let out = spatial_block(&mut g, &enc.spatial_robot, &s, 8);
        for w in &out.attention {
            assert_eq!(g.value(*w).data, vec![1.0]);
        }
    }

    #[test]
    fn identical_agents_identical_rows() {
        let (store, enc) = tiny();
        let mut s = StreamInput::empty(2, 1);
        let f = [0.5, -1.0, 0.2, 0.1, 0.3, 0.0, 0.0, 0.0, 0.0, 0.0];
        s.set(0, 0, f);
        s.set(0, 1, f);
        let s = StreamBatch::stack([&s]);
        let mut g = Graph::new(&store);
        let out = spatial_block(&mut g, &enc.spatial_human, &s, 8);
        let y = g.value(out.y);
        for c in 0..8 {
            assert!((y.at(0, 0, c) - y.at(0, 1, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn temporal_masked_frames_get_zero_weight() {
        let (store, enc) = tiny();
        let mut s = StreamInput::empty(1, 3);
        s.set(1, 0, [1.0; FEATURE_DIM]);
        s.set(2, 0, [0.5; FEATURE_DIM]);
        let s = StreamBatch::stack([&s]);
        let mut g = Graph::new(&store);
        let out = temporal_block(&mut g, &enc.temporal_robot, &s, 8);
        for w in &out.attention {
            let w = g.value(*w);
            for r in 0..3 {
                assert_eq!(w.at(0, r, 0), 0.0);
                assert!((w.at(0, r, 1) + w.at(0, r, 2) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_frame_attends_to_itself() {
        let (store, enc) = tiny();
        let mut s = StreamInput::empty(2, 1);
        s.set(0, 0, [0.7; FEATURE_DIM]);
        s.set(0, 1, [-0.2; FEATURE_DIM]);
        let s = StreamBatch::stack([&s]);
        let mut g = Graph::new(&store);
        let out = temporal_block(&mut g, &enc.temporal_human, &s, 8);
        for w in &out.attention {
            assert_eq!(g.value(*w).data, vec![1.0, 1.0]);
        }
    }

    #[test]
    fn zero_streams_fuse_to_zero() {
        let (store, enc) = tiny();
        let mut g = Graph::new(&store);
        let mk = |g: &mut Graph, tokens: usize| Encoded {
            y: g.input(Tensor::zeros([2, tokens, 8])),
            mask: vec![1.0; 2 * tokens],
            tokens,
            attention: vec![],
        };
        let (a, b, c, d) = (mk(&mut g, 3), mk(&mut g, 2), mk(&mut g, 3), mk(&mut g, 2));
        let y = fuse(&mut g, &enc.fusion, [&a, &b, &c, &d]);
        assert_eq!(g.shape(y), [2, 1, 8]);
        assert!(g.value(y).data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn output_width_independent_of_agent_count() {
        let (store, enc) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (nr, nh) in [(1, 0), (1, 1), (3, 5)] {
            let input = EncoderInput {
                robots: random_stream(&mut rng, nr, 3, 1.0),
                humans: random_stream(&mut rng, nh, 3, 0.7),
            };
            let y = enc.encode(&store, &input);
            assert_eq!(y.len(), 8);
            assert!(y.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn goal_frame_round_trip() {
        let f = GoalFrame {
            origin: [1.0, 2.0],
            angle: 0.7,
        };
        let v = f.rotate_out(f.rotate_in([0.3, -1.1]));
        assert!((v[0] - 0.3).abs() < 1e-12 && (v[1] + 1.1).abs() < 1e-12);
    }

    #[test]
    fn features_are_goal_centric() {
        let cfg = ScenarioConfig {
            n_robots: 2,
            n_humans: 3,
            ..Default::default()
        };
        let (_, obs) = reset(&cfg, 5).unwrap();
        let mut h = HistoryBuffer::new(2);
        h.push(obs[0].clone());
        let input = build_input(&h, 2, 3);
        // Frame 0 is padding, frame 1 holds the reset observation.
        assert!(input.robots.mask[..2].iter().all(|m| *m == 0.0));
        let tok = 2; // frame 1, slot 0
        let f = &input.robots.features[tok * FEATURE_DIM..(tok + 1) * FEATURE_DIM];
        assert_eq!((f[0], f[1]), (0.0, 0.0));
        assert_eq!(f[5], 1.0);
        assert!((f[6] - obs[0].self_state.goal_distance()).abs() < 1e-12);
        // Heading points at the goal at reset.
        assert!((f[8] - 1.0).abs() < 1e-9);
        assert_eq!(input.humans.mask[3..], [1.0, 1.0, 1.0]);
    }

    proptest::proptest! {
        #[test]
        fn masked_attention_rows_sum_to_one(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::default();
            let mha = Mha::new(&mut store, "m", 4, 2, 0, &mut rng);
            let mut g = Graph::new(&store);
            let x = Tensor::from_vec([1, 3, 4], (0..12).map(|_| rng.random_range(-3.0..3.0)).collect());
            let x = g.input(x);
            let mut m = vec![0.0; 3];
            m[rng.random_range(0..3)] = 1.0;
            for v in &mut m { if rng.random_bool(0.5) { *v = 1.0; } }
            let mask = Tensor::from_vec([1, 1, 3], m.clone());
            let att = multi_head_attention(&mut g, &mha, x, x, &mask);
            for w in &att.weights {
                let w = g.value(*w);
                for r in 0..3 {
                    let s: f64 = (0..3).map(|c| w.at(0, r, c)).sum();
                    proptest::prop_assert!((s - 1.0).abs() < 1e-12);
                    for c in 0..3 {
                        if m[c] == 0.0 { proptest::prop_assert_eq!(w.at(0, r, c), 0.0); }
                    }
                }
            }
        }
    }
}
