use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        group: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add_weight(format!("{name}.w"), fan_in, fan_out, group, rng);
        let b = bias.then(|| store.add_const(format!("{name}.b"), fan_out, 0.0, group));
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let y = g.linear(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add(y, b)
            }
            None => y,
        }
    }
}

/// Layer normalization with learned gain and bias.
#[derive(Debug, Clone)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, group: usize) -> Self {
        Self {
            gain: store.add_const(format!("{name}.gain"), width, 1.0, group),
            bias: store.add_const(format!("{name}.bias"), width, 0.0, group),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.layer_norm(x);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let s = g.mul(n, gain);
        g.add(s, bias)
    }
}

/// Fully connected stack with `tanh` between layers and a linear output.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        group: usize,
        rng: &mut R,
    ) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, group, rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Var {
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, x);
            if i + 1 < self.layers.len() {
                x = g.tanh(x);
            }
        }
        x
    }
}
