//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation eagerly. [`Graph::backward`] walks the
//! tape once in reverse and only propagates into nodes that depend on a
//! parameter or on an explicit [`Graph::variable`].

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Linear {
        x: Var,
        w: Var,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Transpose(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Softmax(Var),
    LayerNorm {
        a: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        a: Var,
        start: usize,
    },
    SliceRows {
        a: Var,
        start: usize,
    },
    Reshape(Var),
    GatherRows {
        a: Var,
        idx: Vec<usize>,
    },
    RowNormalize {
        a: Var,
        sums: Vec<f64>,
    },
    SumCols(Var),
    MaskedMeanRows {
        a: Var,
        weights: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Min(Var, Var),
    Max(Var, Var),
    Clamp {
        a: Var,
        lo: f64,
        hi: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Row sums at or below this are treated as empty by [`Graph::row_normalize`].
pub const ROW_NORMALIZE_EPS: f64 = 1e-12;

const LAYER_NORM_EPS: f64 = 1e-5;

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients produced by one backward pass.
pub struct Grads {
    nodes: Vec<Option<Tensor>>,
    params: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }

    /// Per-parameter gradients indexed by [`ParamId`]; `None` when unused.
    pub fn params(&self) -> &[Option<Tensor>] {
        &self.params
    }

    pub fn into_params(self) -> Vec<Option<Tensor>> {
        self.params
    }
}

fn broadcast_shape(a: [usize; 3], b: [usize; 3]) -> [usize; 3] {
    let mut out = [0; 3];
    for d in 0..3 {
        out[d] = if a[d] == b[d] {
            a[d]
        } else if a[d] == 1 {
            b[d]
        } else if b[d] == 1 {
            a[d]
        } else {
            panic!("cannot broadcast {a:?} with {b:?}");
        };
    }
    out
}

#[inline]
fn bidx(shape: [usize; 3], b: usize, r: usize, c: usize) -> usize {
    let b = if shape[0] == 1 { 0 } else { b };
    let r = if shape[1] == 1 { 0 } else { r };
    let c = if shape[2] == 1 { 0 } else { c };
    (b * shape[1] + r) * shape[2] + c
}

fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect();
        return Tensor::from_vec(a.shape, data);
    }
    let shape = broadcast_shape(a.shape, b.shape);
    let mut data = Vec::with_capacity(shape.iter().product());
    for bb in 0..shape[0] {
        for r in 0..shape[1] {
            for c in 0..shape[2] {
                data.push(f(
                    a.data[bidx(a.shape, bb, r, c)],
                    b.data[bidx(b.shape, bb, r, c)],
                ));
            }
        }
    }
    Tensor::from_vec(shape, data)
}

/// Sums a gradient of broadcast shape back down to `shape`.
fn reduce_to(grad: &Tensor, shape: [usize; 3]) -> Tensor {
    if grad.shape == shape {
        return grad.clone();
    }
    let mut out = Tensor::zeros(shape);
    let gs = grad.shape;
    let mut i = 0;
    for b in 0..gs[0] {
        for r in 0..gs[1] {
            for c in 0..gs[2] {
                out.data[bidx(shape, b, r, c)] += grad.data[i];
                i += 1;
            }
        }
    }
    out
}

/// `out[i, :] += x[i, :] @ w` for `x: [m, k]`, `w: [k, n]`.
fn matmul_into(x: &[f64], w: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let xi = &x[i * k..(i + 1) * k];
        let oi = &mut out[i * n..(i + 1) * n];
        for (kk, &a) in xi.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let wk = &w[kk * n..(kk + 1) * n];
            for (o, &wv) in oi.iter_mut().zip(wk) {
                *o += a * wv;
            }
        }
    }
}

/// `out[i, j] += x[i, :] . y[j, :]` for `x: [m, k]`, `y: [n, k]`.
fn matmul_nt_into(x: &[f64], y: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let xi = &x[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(xi, &y[j * k..(j + 1) * k]);
        }
    }
}

/// Dot product with independent lanes so it vectorizes under strict FP.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    const LANES: usize = 8;
    let mut acc = [0.0; LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    acc.iter().sum::<f64>() + tail
}

/// `out[k, :] += x[:, k]^T @ y` for `x: [m, k]`, `y: [m, n]`.
fn matmul_tn_into(x: &[f64], y: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let xi = &x[i * k..(i + 1) * k];
        let yi = &y[i * n..(i + 1) * n];
        for (kk, &a) in xi.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let ok = &mut out[kk * n..(kk + 1) * n];
            for (o, &yv) in ok.iter_mut().zip(yi) {
                *o += a * yv;
            }
        }
    }
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_vec(a.shape, a.data.iter().map(|v| f(*v)).collect())
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 3] {
        self.nodes[v.0].value.shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient, e.g. for input-sensitivity checks.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.input(Tensor::scalar(value))
    }

    /// The parameter's node; created on first use and shared afterwards.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.store.value(id).clone(), Op::Param, true);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = zip_broadcast(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = zip_broadcast(self.value(a), self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = zip_broadcast(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = map(self.value(a), |x| x * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn shift(&mut self, a: Var, s: f64) -> Var {
        let out = map(self.value(a), |x| x + s);
        let ng = self.ng(a);
        self.push(out, Op::Shift(a), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `x: [B, R, K]` times a shared weight `w: [1, K, C]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Var {
        let [b, r, k] = self.shape(x);
        let [wb, wk, c] = self.shape(w);
        assert!(
            wb == 1 && wk == k,
            "linear: x {:?} w {:?}",
            self.shape(x),
            self.shape(w)
        );
        let mut out = Tensor::zeros([b, r, c]);
        matmul_into(
            &self.value(x).data,
            &self.value(w).data,
            &mut out.data,
            b * r,
            k,
            c,
        );
        let ng = self.ng(x) || self.ng(w);
        self.push(out, Op::Linear { x, w }, ng)
    }

    /// Batched matrix product; with `trans_b` the second operand is `[B, C, K]`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let [ba, r, k] = self.shape(a);
        let sb = self.shape(b);
        assert_eq!(ba, sb[0], "bmm batch mismatch");
        let c = if trans_b {
            assert_eq!(sb[2], k);
            sb[1]
        } else {
            assert_eq!(sb[1], k);
            sb[2]
        };
        let mut out = Tensor::zeros([ba, r, c]);
        let (av, bv) = (&self.value(a).data, &self.value(b).data);
        for i in 0..ba {
            let ai = &av[i * r * k..(i + 1) * r * k];
            let bi = &bv[i * k * c..(i + 1) * k * c];
            let oi = &mut out.data[i * r * c..(i + 1) * r * c];
            if trans_b {
                matmul_nt_into(ai, bi, oi, r, k, c);
            } else {
                matmul_into(ai, bi, oi, r, k, c);
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Bmm { a, b, trans_b }, ng)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Var {
        let out = transpose(self.value(a));
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |x| 1.0 / (1.0 + (-x).exp()));
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = map(self.value(a), f64::tanh);
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |x| x.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = map(self.value(a), f64::exp);
        let ng = self.ng(a);
        self.push(out, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = map(self.value(a), f64::ln);
        let ng = self.ng(a);
        self.push(out, Op::Log(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |x| x * x);
        let ng = self.ng(a);
        self.push(out, Op::Square(a), ng)
    }

    /// Softmax over the last axis. `mask` (1 keep, 0 drop) broadcasts over
    /// batch and rows; dropped entries get exactly zero weight and a row with
    /// nothing kept is all zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: Option<&Tensor>) -> Var {
        let x = self.value(a);
        let [b, r, c] = x.shape;
        if let Some(m) = mask {
            assert_eq!(m.shape[2], c, "softmax mask width");
        }
        let mut out = Tensor::zeros(x.shape);
        for bb in 0..b {
            for rr in 0..r {
                let off = (bb * r + rr) * c;
                let row = &x.data[off..off + c];
                let keep = |j: usize| mask.is_none_or(|m| m.data[bidx(m.shape, bb, rr, j)] > 0.5);
                let mut mx = f64::NEG_INFINITY;
                for (j, &v) in row.iter().enumerate() {
                    if keep(j) && v > mx {
                        mx = v;
                    }
                }
                if mx == f64::NEG_INFINITY {
                    continue;
                }
                let mut z = 0.0;
                for j in 0..c {
                    if keep(j) {
                        let e = (row[j] - mx).exp();
                        out.data[off + j] = e;
                        z += e;
                    }
                }
                for v in &mut out.data[off..off + c] {
                    *v /= z;
                }
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = x.shape[2];
        let rows = x.len() / c;
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        for i in 0..rows {
            let row = &x.data[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                xhat[i * c + j] = (row[j] - mean) * rs;
            }
        }
        let out = Tensor::from_vec(x.shape, xhat.clone());
        let ng = self.ng(a);
        self.push(out, Op::LayerNorm { a, xhat, rstd }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let [b, r, _] = self.shape(parts[0]);
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let s = self.shape(*p);
                assert_eq!((s[0], s[1]), (b, r), "concat_cols shape mismatch");
                s[2]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(b * r * total);
        for row in 0..b * r {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data[row * w..(row + 1) * w]);
            }
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(
            Tensor::from_vec([b, r, total], out),
            Op::ConcatCols(parts.to_vec()),
            ng,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let [b, _, c] = self.shape(parts[0]);
        let heights: Vec<usize> = parts
            .iter()
            .map(|p| {
                let s = self.shape(*p);
                assert_eq!((s[0], s[2]), (b, c), "concat_rows shape mismatch");
                s[1]
            })
            .collect();
        let total: usize = heights.iter().sum();
        let mut out = Vec::with_capacity(b * total * c);
        for bb in 0..b {
            for (p, &h) in parts.iter().zip(&heights) {
                out.extend_from_slice(&self.value(*p).data[bb * h * c..(bb + 1) * h * c]);
            }
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(
            Tensor::from_vec([b, total, c], out),
            Op::ConcatRows(parts.to_vec()),
            ng,
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        let [b, r, c] = x.shape;
        assert!(start + len <= c);
        let mut out = Vec::with_capacity(b * r * len);
        for row in 0..b * r {
            out.extend_from_slice(&x.data[row * c + start..row * c + start + len]);
        }
        let ng = self.ng(a);
        self.push(
            Tensor::from_vec([b, r, len], out),
            Op::SliceCols { a, start },
            ng,
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        let [b, r, c] = x.shape;
        assert!(start + len <= r);
        let mut out = Vec::with_capacity(b * len * c);
        for bb in 0..b {
            let off = (bb * r + start) * c;
            out.extend_from_slice(&x.data[off..off + len * c]);
        }
        let ng = self.ng(a);
        self.push(
            Tensor::from_vec([b, len, c], out),
            Op::SliceRows { a, start },
            ng,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: [usize; 3]) -> Var {
        let x = self.value(a);
        let out = Tensor::from_vec(shape, x.data.clone());
        let ng = self.ng(a);
        self.push(out, Op::Reshape(a), ng)
    }

    /// Treats `a` as a list of `B*R` rows and picks `idx` into shape `[.., .., C]`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize], shape: [usize; 2]) -> Var {
        let x = self.value(a);
        let c = x.shape[2];
        assert_eq!(shape[0] * shape[1], idx.len());
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&x.data[i * c..(i + 1) * c]);
        }
        let ng = self.ng(a);
        self.push(
            Tensor::from_vec([shape[0], shape[1], c], out),
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
            ng,
        )
    }

    /// Divides each row by its sum; rows summing to (near) zero become zero.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = x.shape[2];
        let rows = x.len() / c;
        let mut out = Tensor::zeros(x.shape);
        let mut sums = vec![0.0; rows];
        for i in 0..rows {
            let s: f64 = x.data[i * c..(i + 1) * c].iter().sum();
            sums[i] = s;
            if s > ROW_NORMALIZE_EPS {
                for j in 0..c {
                    out.data[i * c + j] = x.data[i * c + j] / s;
                }
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::RowNormalize { a, sums }, ng)
    }

    /// `[B, R, C] -> [B, R, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let [b, r, c] = x.shape;
        let out: Vec<f64> = x.data.chunks(c).map(|row| row.iter().sum()).collect();
        let ng = self.ng(a);
        self.push(Tensor::from_vec([b, r, 1], out), Op::SumCols(a), ng)
    }

    /// Mean over rows weighted by `mask: [B, R]` (1 keep, 0 drop), giving
    /// `[B, 1, C]`; a batch entry with no kept rows yields zeros.
    pub fn masked_mean_rows(&mut self, a: Var, mask: &[f64]) -> Var {
        let x = self.value(a);
        let [b, r, c] = x.shape;
        assert_eq!(mask.len(), b * r);
        let mut weights = vec![0.0; b * r];
        for bb in 0..b {
            let n: f64 = mask[bb * r..(bb + 1) * r].iter().sum();
            if n > 0.0 {
                for rr in 0..r {
                    weights[bb * r + rr] = mask[bb * r + rr] / n;
                }
            }
        }
        let mut out = Tensor::zeros([b, 1, c]);
        for bb in 0..b {
            for rr in 0..r {
                let w = weights[bb * r + rr];
                if w == 0.0 {
                    continue;
                }
                let row = &x.data[(bb * r + rr) * c..(bb * r + rr + 1) * c];
                for (o, v) in out.data[bb * c..(bb + 1) * c].iter_mut().zip(row) {
                    *o += w * v;
                }
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::MaskedMeanRows { a, weights }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data.iter().sum::<f64>() / x.len() as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Elementwise minimum of equally shaped tensors; ties route to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b));
        let out = zip_broadcast(self.value(a), self.value(b), f64::min);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Min(a, b), ng)
    }

    /// Elementwise maximum of equally shaped tensors; ties route to `a`.
    pub fn max(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b));
        let out = zip_broadcast(self.value(a), self.value(b), f64::max);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Max(a, b), ng)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = map(self.value(a), |x| x.clamp(lo, hi));
        let ng = self.ng(a);
        self.push(out, Op::Clamp { a, lo, hi }, ng)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape, 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let params = self
            .param_vars
            .iter()
            .map(|v| v.and_then(|v| grads[v.0].clone()))
            .collect();
        Grads {
            nodes: grads,
            params,
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot => *slot = Some(t),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, reduce_to(g, self.shape(*a)));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, reduce_to(g, self.shape(*b)));
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, reduce_to(g, self.shape(*a)));
                }
                if self.ng(*b) {
                    let mut gb = reduce_to(g, self.shape(*b));
                    gb.scale_assign(-1.0);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let ga = zip_broadcast(g, self.value(*b), |x, y| x * y);
                    self.accumulate(grads, *a, reduce_to(&ga, self.shape(*a)));
                }
                if self.ng(*b) {
                    let gb = zip_broadcast(g, self.value(*a), |x, y| x * y);
                    self.accumulate(grads, *b, reduce_to(&gb, self.shape(*b)));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, map(g, |x| x * s)),
            Op::Shift(a) | Op::Reshape(a) => {
                let mut t = g.clone();
                t.shape = self.shape(*a);
                self.accumulate(grads, *a, t);
            }
            Op::Linear { x, w } => {
                let [b, r, k] = self.shape(*x);
                let c = y.shape[2];
                if self.ng(*x) {
                    let mut gx = Tensor::zeros([b, r, k]);
                    matmul_nt_into(&g.data, &self.value(*w).data, &mut gx.data, b * r, c, k);
                    self.accumulate(grads, *x, gx);
                }
                if self.ng(*w) {
                    let mut gw = Tensor::zeros([1, k, c]);
                    matmul_tn_into(&self.value(*x).data, &g.data, &mut gw.data, b * r, k, c);
                    self.accumulate(grads, *w, gw);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let [bs, r, k] = self.shape(*a);
                let c = y.shape[2];
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                if self.ng(*a) {
                    let mut ga = Tensor::zeros([bs, r, k]);
                    for i in 0..bs {
                        let gi = &g.data[i * r * c..(i + 1) * r * c];
                        let bi = &bv[i * k * c..(i + 1) * k * c];
                        let oi = &mut ga.data[i * r * k..(i + 1) * r * k];
                        if *trans_b {
                            // b is [c, k]: ga = g @ b
                            matmul_into(gi, bi, oi, r, c, k);
                        } else {
                            // b is [k, c]: ga = g @ b^T
                            matmul_nt_into(gi, bi, oi, r, c, k);
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.ng(*b) {
                    let mut gb = Tensor::zeros(self.shape(*b));
                    for i in 0..bs {
                        let gi = &g.data[i * r * c..(i + 1) * r * c];
                        let ai = &av[i * r * k..(i + 1) * r * k];
                        let oi = &mut gb.data[i * k * c..(i + 1) * k * c];
                        if *trans_b {
                            // gb [c, k] = g^T @ a
                            matmul_tn_into(gi, ai, oi, r, c, k);
                        } else {
                            // gb [k, c] = a^T @ g
                            matmul_tn_into(ai, gi, oi, r, k, c);
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, transpose(g)),
            Op::Sigmoid(a) => {
                let t = Tensor::from_vec(
                    g.shape,
                    g.data
                        .iter()
                        .zip(&y.data)
                        .map(|(g, s)| g * s * (1.0 - s))
                        .collect(),
                );
                self.accumulate(grads, *a, t);
            }
            Op::Tanh(a) => {
                let t = Tensor::from_vec(
                    g.shape,
                    g.data
                        .iter()
                        .zip(&y.data)
                        .map(|(g, t)| g * (1.0 - t * t))
                        .collect(),
                );
                self.accumulate(grads, *a, t);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let t = Tensor::from_vec(
                    g.shape,
                    g.data
                        .iter()
                        .zip(&x.data)
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
                self.accumulate(grads, *a, t);
            }
            Op::Exp(a) => {
                let t = Tensor::from_vec(
                    g.shape,
                    g.data.iter().zip(&y.data).map(|(g, e)| g * e).collect(),
                );
                self.accumulate(grads, *a, t);
            }
            Op::Log(a) => {
                let x = self.value(*a);
                let t = Tensor::from_vec(
                    g.shape,
                    g.data.iter().zip(&x.data).map(|(g, x)| g / x).collect(),
                );
                self.accumulate(grads, *a, t);
            }
            Op::Square(a) => {
                let x = self.value(*a);
                let t = Tensor::from_vec(
                    g.shape,
                    g.data
                        .iter()
                        .zip(&x.data)
                        .map(|(g, x)| 2.0 * g * x)
                        .collect(),
                );
                self.accumulate(grads, *a, t);
            }
            Op::Softmax(a) => {
                let c = y.shape[2];
                let mut t = Tensor::zeros(y.shape);
                for (i, (yr, gr)) in y.data.chunks(c).zip(g.data.chunks(c)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..c {
                        t.data[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, t);
            }
            Op::LayerNorm { a, xhat, rstd } => {
                let c = y.shape[2];
                let mut t = Tensor::zeros(y.shape);
                for (i, rs) in rstd.iter().enumerate() {
                    let gr = &g.data[i * c..(i + 1) * c];
                    let xr = &xhat[i * c..(i + 1) * c];
                    let mg = gr.iter().sum::<f64>() / c as f64;
                    let mgx = gr.iter().zip(xr).map(|(g, x)| g * x).sum::<f64>() / c as f64;
                    for j in 0..c {
                        t.data[i * c + j] = rs * (gr[j] - mg - xr[j] * mgx);
                    }
                }
                self.accumulate(grads, *a, t);
            }
            Op::ConcatCols(parts) => {
                let total = y.shape[2];
                let rows = y.len() / total;
                let mut off = 0;
                for p in parts {
                    let w = self.shape(*p)[2];
                    if self.ng(*p) {
                        let mut t = Vec::with_capacity(rows * w);
                        for row in 0..rows {
                            t.extend_from_slice(&g.data[row * total + off..row * total + off + w]);
                        }
                        self.accumulate(grads, *p, Tensor::from_vec(self.shape(*p), t));
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let [b, total, c] = y.shape;
                let mut off = 0;
                for p in parts {
                    let h = self.shape(*p)[1];
                    if self.ng(*p) {
                        let mut t = Vec::with_capacity(b * h * c);
                        for bb in 0..b {
                            let s = (bb * total + off) * c;
                            t.extend_from_slice(&g.data[s..s + h * c]);
                        }
                        self.accumulate(grads, *p, Tensor::from_vec(self.shape(*p), t));
                    }
                    off += h;
                }
            }
            Op::SliceCols { a, start } => {
                let shape = self.shape(*a);
                let c = shape[2];
                let len = y.shape[2];
                let mut t = Tensor::zeros(shape);
                for row in 0..y.len() / len.max(1) {
                    t.data[row * c + start..row * c + start + len]
                        .copy_from_slice(&g.data[row * len..(row + 1) * len]);
                }
                self.accumulate(grads, *a, t);
            }
            Op::SliceRows { a, start } => {
                let shape = self.shape(*a);
                let [b, r, c] = shape;
                let len = y.shape[1];
                let mut t = Tensor::zeros(shape);
                for bb in 0..b {
                    let dst = (bb * r + start) * c;
                    t.data[dst..dst + len * c]
                        .copy_from_slice(&g.data[bb * len * c..(bb + 1) * len * c]);
                }
                self.accumulate(grads, *a, t);
            }
            Op::GatherRows { a, idx } => {
                let shape = self.shape(*a);
                let c = shape[2];
                let mut t = Tensor::zeros(shape);
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        t.data[i * c + j] += g.data[k * c + j];
                    }
                }
                self.accumulate(grads, *a, t);
            }
            Op::RowNormalize { a, sums } => {
                let c = y.shape[2];
                let mut t = Tensor::zeros(y.shape);
                for (i, &s) in sums.iter().enumerate() {
                    if s <= ROW_NORMALIZE_EPS {
                        continue;
                    }
                    let gr = &g.data[i * c..(i + 1) * c];
                    let yr = &y.data[i * c..(i + 1) * c];
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for j in 0..c {
                        t.data[i * c + j] = (gr[j] - dot) / s;
                    }
                }
                self.accumulate(grads, *a, t);
            }
            Op::SumCols(a) => {
                let shape = self.shape(*a);
                let c = shape[2];
                let mut t = Tensor::zeros(shape);
                for (i, gv) in g.data.iter().enumerate() {
                    for j in 0..c {
                        t.data[i * c + j] = *gv;
                    }
                }
                self.accumulate(grads, *a, t);
            }
            Op::MaskedMeanRows { a, weights } => {
                let shape = self.shape(*a);
                let [b, r, c] = shape;
                let mut t = Tensor::zeros(shape);
                for bb in 0..b {
                    for rr in 0..r {
                        let w = weights[bb * r + rr];
                        if w == 0.0 {
                            continue;
                        }
                        for j in 0..c {
                            t.data[(bb * r + rr) * c + j] = w * g.data[bb * c + j];
                        }
                    }
                }
                self.accumulate(grads, *a, t);
            }
            Op::Sum(a) => {
                let shape = self.shape(*a);
                self.accumulate(grads, *a, Tensor::full(shape, g.item()));
            }
            Op::Mean(a) => {
                let shape = self.shape(*a);
                let n = shape.iter().product::<usize>() as f64;
                self.accumulate(grads, *a, Tensor::full(shape, g.item() / n));
            }
            Op::Min(a, b) | Op::Max(a, b) => {
                let is_min = matches!(node.op, Op::Min(..));
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = Tensor::zeros(av.shape);
                let mut gb = Tensor::zeros(bv.shape);
                for i in 0..g.len() {
                    let pick_a = if is_min {
                        av.data[i] <= bv.data[i]
                    } else {
                        av.data[i] >= bv.data[i]
                    };
                    if pick_a {
                        ga.data[i] = g.data[i];
                    } else {
                        gb.data[i] = g.data[i];
                    }
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Clamp { a, lo, hi } => {
                let x = self.value(*a);
                let t = Tensor::from_vec(
                    g.shape,
                    g.data
                        .iter()
                        .zip(&x.data)
                        .map(|(g, x)| if x >= lo && x <= hi { *g } else { 0.0 })
                        .collect(),
                );
                self.accumulate(grads, *a, t);
            }
        }
    }
}

fn transpose(x: &Tensor) -> Tensor {
    let [b, r, c] = x.shape;
    let mut out = Tensor::zeros([b, c, r]);
    for bb in 0..b {
        for i in 0..r {
            for j in 0..c {
                out.data[(bb * c + j) * r + i] = x.data[(bb * r + i) * c + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 3]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of `d f / d inputs` for a graph builder `f`.
    fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
        let store = ParamStore::default();
        let eval = |vals: &[Tensor]| {
            let mut g = Graph::new(&store);
            let vars: Vec<Var> = vals.iter().map(|t| g.variable(t.clone())).collect();
            let out = f(&mut g, &vars);
            g.value(out).item()
        };
        let mut g = Graph::new(&store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out);
        let h = 1e-6;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads
                .of(vars[k])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape));
            for i in 0..t.len() {
                let mut plus = inputs.clone();
                plus[k].data[i] += h;
                let mut minus = inputs.clone();
                minus[k].data[i] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data[i];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                assert!(
                    err < 1e-6,
                    "input {k} elem {i}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    /// Weights the output by a fixed random tensor so every element matters.
    fn weighted(g: &mut Graph, y: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = rand_tensor(&mut rng, g.shape(y));
        let w = g.input(w);
        let p = g.mul(y, w);
        g.sum(p)
    }

    #[test]
    fn elementwise_ops_and_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, [2, 3, 4]);
        let b = rand_tensor(&mut rng, [1, 1, 4]);
        let c = rand_tensor(&mut rng, [2, 3, 1]);
        check(vec![a, b, c], |g, v| {
            let s = g.add(v[0], v[1]);
            let m = g.mul(s, v[2]);
            let d = g.sub(m, v[1]);
            let t = g.tanh(d);
            let sg = g.sigmoid(t);
            let e = g.exp(sg);
            let l = g.log(e);
            let q = g.square(l);
            let sc = g.scale(q, 0.7);
            let sh = g.shift(sc, 0.1);
            weighted(g, sh, 9)
        });
    }

    #[test]
    fn matrix_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, [2, 3, 4]);
        let w = rand_tensor(&mut rng, [1, 4, 5]);
        let y = rand_tensor(&mut rng, [2, 5, 3]);
        let z = rand_tensor(&mut rng, [2, 6, 5]);
        check(vec![x, w, y, z], |g, v| {
            let l = g.linear(v[0], v[1]);
            let b1 = g.bmm(l, v[2], false);
            let b2 = g.bmm(l, v[3], true);
            let t = g.transpose(b2);
            let b3 = g.bmm(t, b1, false);
            weighted(g, b3, 3)
        });
    }

    #[test]
    fn softmax_layer_norm_row_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, [2, 3, 4]);
        let mask = Tensor::from_vec([2, 1, 4], vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        check(vec![x], move |g, v| {
            let s = g.masked_softmax(v[0], Some(&mask));
            let ln = g.layer_norm(v[0]);
            let e = g.exp(v[0]);
            let rn = g.row_normalize(e);
            let a = g.add(s, ln);
            let b = g.add(a, rn);
            weighted(g, b, 4)
        });
    }

    #[test]
    fn structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_tensor(&mut rng, [2, 3, 2]);
        let b = rand_tensor(&mut rng, [2, 3, 3]);
        let c = rand_tensor(&mut rng, [2, 1, 5]);
        check(vec![a, b, c], |g, v| {
            let cc = g.concat_cols(&[v[0], v[1]]);
            let cr = g.concat_rows(&[cc, v[2]]);
            let sc = g.slice_cols(cr, 1, 3);
            let sr = g.slice_rows(sc, 1, 2);
            let rs = g.reshape(sr, [1, 4, 3]);
            let gr = g.gather_rows(rs, &[3, 0, 0, 2], [2, 2]);
            let sm = g.sum_cols(gr);
            let mm = g.masked_mean_rows(cr, &[1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0]);
            let s1 = weighted(g, sm, 5);
            let s2 = weighted(g, mm, 6);
            let m = g.mean(cr);
            let t = g.add(s1, s2);
            g.add(t, m)
        });
    }

    #[test]
    fn min_max_clamp() {
        let a = Tensor::from_vec([1, 1, 4], vec![0.3, -0.2, 1.5, 0.9]);
        let b = Tensor::from_vec([1, 1, 4], vec![0.1, 0.4, -0.7, 1.2]);
        check(vec![a, b], |g, v| {
            let mn = g.min(v[0], v[1]);
            let mx = g.max(v[0], v[1]);
            let cl = g.clamp(v[0], -0.5, 1.0);
            let s = g.add(mn, mx);
            let s = g.add(s, cl);
            weighted(g, s, 7)
        });
    }

    #[test]
    fn relu_away_from_kink() {
        let a = Tensor::from_vec([1, 2, 2], vec![0.5, -0.3, 0.2, -1.0]);
        check(vec![a], |g, v| {
            let r = g.relu(v[0]);
            weighted(g, r, 8)
        });
    }

    #[test]
    fn masked_softmax_zeroes_masked_and_empty_rows() {
        let store = ParamStore::default();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::from_vec(
            [1, 2, 3],
            vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0],
        ));
        let mask = Tensor::from_vec([1, 2, 3], vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let s = g.masked_softmax(x, Some(&mask));
        let v = g.value(s);
        assert_eq!(v.at(0, 0, 1), 0.0);
        assert!((v.at(0, 0, 0) + v.at(0, 0, 2) - 1.0).abs() < 1e-15);
        assert!(v.data[3..].iter().all(|x| *x == 0.0));
    }

    #[test]
    fn shared_param_accumulates() {
        let mut store = ParamStore::default();
        let id = store.add("w", Tensor::row(&[2.0]), 0);
        let mut g = Graph::new(&store);
        let a = g.param(id);
        let b = g.param(id);
        assert_eq!(a, b);
        let p = g.mul(a, b);
        let grads = g.backward(p);
        assert_eq!(grads.params()[0].as_ref().unwrap().data, vec![4.0]);
    }
}
