//! Minimal reverse-mode autodiff over row-major `f64` matrices.
//!
//! Every value is a 2-D matrix whose rows are tokens. A batch of images is
//! laid out as consecutive row segments; attention and pooling operate per
//! segment. The tape records ops in creation order, so the backward pass is
//! a single reverse sweep.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifies a trainable tensor: `(parameter group, index in group)`.
pub type ParamKey = (usize, usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRowVec(Var, Var),
    Add(Var, Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Array2<f64>, inv_std: Array1<f64> },
    Attention { qkv: Var, heads: usize, segments: Vec<(usize, usize)>, probs: Vec<Array2<f64>> },
    Gather { parts: Vec<(Var, usize)> },
    L2Normalize { x: Var, norms: Array1<f64> },
    MeanRows { x: Var, segments: Vec<(usize, usize)> },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    param: Option<ParamKey>,
}

/// Tape of recorded operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: std::collections::HashMap<ParamKey, Var>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
pub const LN_EPS: f64 = 1e-6;

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op, param: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; receives no gradient bookkeeping beyond its own slot.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Trainable tensor. Repeated calls with the same key return the same node.
    pub fn param(&mut self, key: ParamKey, value: &Array2<f64>) -> Var {
        if let Some(v) = self.param_vars.get(&key) {
            return *v;
        }
        let v = self.push(value.clone(), Op::Leaf);
        self.nodes[v.0].param = Some(key);
        self.param_vars.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `x + b` with `b` a `1 × n` row broadcast over every row of `x`.
    pub fn add_row_vec(&mut self, x: Var, b: Var) -> Var {
        let value = self.value(x) + self.value(b);
        self.push(value, Op::AddRowVec(x, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_row_vec(h, b)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(gelu);
        self.push(value, Op::Gelu(x))
    }

    /// Per-row layer normalization with learned `1 × d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mean = xv.sum_axis(Axis(1)) / d;
        let mut xhat = xv - &mean.view().insert_axis(Axis(1));
        let var = xhat.mapv(|v| v * v).sum_axis(Axis(1)) / d;
        let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
        xhat *= &inv_std.view().insert_axis(Axis(1));
        let value = &xhat * self.value(gamma) + self.value(beta);
        self.push(value, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    /// Multi-head self-attention from a fused `n × 3d` projection laid out as
    /// `[q | k | v]`. Tokens attend only within their own row segment.
    pub fn attention(&mut self, qkv: Var, heads: usize, segments: &[(usize, usize)]) -> Var {
        let qkv_v = self.value(qkv);
        let d = qkv_v.ncols() / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((qkv_v.nrows(), d));
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for &(start, len) in segments {
            for h in 0..heads {
                let q = qkv_v.slice(s![start..start + len, h * dh..(h + 1) * dh]);
                let k = qkv_v.slice(s![start..start + len, d + h * dh..d + (h + 1) * dh]);
                let v = qkv_v.slice(s![start..start + len, 2 * d + h * dh..2 * d + (h + 1) * dh]);
                let mut p = q.dot(&k.t()) * scale;
                softmax_rows(&mut p);
                out.slice_mut(s![start..start + len, h * dh..(h + 1) * dh]).assign(&p.dot(&v));
                probs.push(p);
            }
        }
        self.push(out, Op::Attention { qkv, heads, segments: segments.to_vec(), probs })
    }

    /// Builds a new matrix whose row `r` is row `parts[r].1` of `parts[r].0`.
    pub fn gather(&mut self, parts: Vec<(Var, usize)>) -> Var {
        let ncols = self.value(parts[0].0).ncols();
        let mut value = Array2::zeros((parts.len(), ncols));
        for (r, &(v, row)) in parts.iter().enumerate() {
            value.row_mut(r).assign(&self.value(v).row(row));
        }
        self.push(value, Op::Gather { parts })
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        self.gather(rows.iter().map(|&r| (x, r)).collect())
    }

    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let norms = xv.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(1e-12));
        let value = xv / &norms.view().insert_axis(Axis(1));
        self.push(value, Op::L2Normalize { x, norms })
    }

    /// One mean row per segment.
    pub fn mean_rows(&mut self, x: Var, segments: &[(usize, usize)]) -> Var {
        let xv = self.value(x);
        let mut value = Array2::zeros((segments.len(), xv.ncols()));
        for (i, &(start, len)) in segments.iter().enumerate() {
            let m = xv.slice(s![start..start + len, ..]).sum_axis(Axis(0)) / len as f64;
            value.row_mut(i).assign(&m);
        }
        self.push(value, Op::MeanRows { x, segments: segments.to_vec() })
    }

    /// Reverse sweep from the given seed gradients. Returns the gradient of
    /// every parameter node that was reached.
    pub fn backward(&self, seeds: &[(Var, Array2<f64>)]) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            accumulate(&mut grads[v.0], g.view());
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads[a.0], ga.view());
                    accumulate(&mut grads[b.0], gb.view());
                }
                Op::AddRowVec(x, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[b.0], gb.view());
                    accumulate(&mut grads[x.0], g.view());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.view());
                    accumulate(&mut grads[b.0], g.view());
                }
                Op::Gelu(x) => {
                    let mut gx = self.value(*x).mapv(gelu_grad);
                    gx *= &g;
                    accumulate(&mut grads[x.0], gx.view());
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let gbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let ggamma = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gxhat = &g * self.value(*gamma);
                    let d = xhat.ncols() as f64;
                    let mean_g = gxhat.sum_axis(Axis(1)) / d;
                    let mean_gx = (&gxhat * xhat).sum_axis(Axis(1)) / d;
                    let mut gx = gxhat;
                    Zip::from(gx.rows_mut())
                        .and(xhat.rows())
                        .and(&mean_g)
                        .and(&mean_gx)
                        .and(inv_std)
                        .for_each(|mut row, xh, &mg, &mgx, &is| {
                            Zip::from(&mut row).and(&xh).for_each(|v, &xhv| *v = is * (*v - mg - xhv * mgx));
                        });
                    accumulate(&mut grads[beta.0], gbeta.view());
                    accumulate(&mut grads[gamma.0], ggamma.view());
                    accumulate(&mut grads[x.0], gx.view());
                }
                Op::Attention { qkv, heads, segments, probs } => {
                    let qkv_v = self.value(*qkv);
                    let d = qkv_v.ncols() / 3;
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gqkv = Array2::zeros(qkv_v.raw_dim());
                    let mut p_iter = probs.iter();
                    for &(start, len) in segments {
                        for h in 0..*heads {
                            let p = p_iter.next().expect("attention cache");
                            let rows = start..start + len;
                            let qc = h * dh..(h + 1) * dh;
                            let kc = d + h * dh..d + (h + 1) * dh;
                            let vc = 2 * d + h * dh..2 * d + (h + 1) * dh;
                            let q = qkv_v.slice(s![rows.clone(), qc.clone()]);
                            let k = qkv_v.slice(s![rows.clone(), kc.clone()]);
                            let v = qkv_v.slice(s![rows.clone(), vc.clone()]);
                            let go = g.slice(s![rows.clone(), qc.clone()]);
                            let gv = p.t().dot(&go);
                            let gp = go.dot(&v.t());
                            let rowdot = (&gp * p).sum_axis(Axis(1));
                            let mut gs = gp - &rowdot.insert_axis(Axis(1));
                            gs *= p;
                            gs *= scale;
                            let gq = gs.dot(&k);
                            let gk = gs.t().dot(&q);
                            gqkv.slice_mut(s![rows.clone(), qc]).assign(&gq);
                            gqkv.slice_mut(s![rows.clone(), kc]).assign(&gk);
                            gqkv.slice_mut(s![rows, vc]).assign(&gv);
                        }
                    }
                    accumulate(&mut grads[qkv.0], gqkv.view());
                }
                Op::Gather { parts } => {
                    for (r, &(v, row)) in parts.iter().enumerate() {
                        let src = &self.nodes[v.0].value;
                        let slot = grads[v.0].get_or_insert_with(|| Array2::zeros(src.raw_dim()));
                        let mut target = slot.row_mut(row);
                        target += &g.row(r);
                    }
                }
                Op::L2Normalize { x, norms } => {
                    let y = &node.value;
                    let dots = (&g * y).sum_axis(Axis(1));
                    let mut gx = g - &(y * &dots.insert_axis(Axis(1)));
                    gx /= &norms.view().insert_axis(Axis(1));
                    accumulate(&mut grads[x.0], gx.view());
                }
                Op::MeanRows { x, segments } => {
                    let mut gx = Array2::zeros(self.value(*x).raw_dim());
                    for (i, &(start, len)) in segments.iter().enumerate() {
                        let row = g.row(i).mapv(|v| v / len as f64);
                        for r in start..start + len {
                            gx.row_mut(r).assign(&row);
                        }
                    }
                    accumulate(&mut grads[x.0], gx.view());
                }
            }
        }
        let mut out = Gradients::default();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Some(key), Some(g)) = (node.param, grads[idx].take()) {
                out.by_key.insert(key, g);
            }
        }
        out
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: ArrayView2<f64>) {
    match slot {
        Some(existing) => *existing += &g,
        None => *slot = Some(g.to_owned()),
    }
}

/// Parameter gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    by_key: std::collections::HashMap<ParamKey, Array2<f64>>,
}

impl Gradients {
    pub fn get(&self, key: ParamKey) -> Option<&Array2<f64>> {
        self.by_key.get(&key)
    }

    pub fn for_group(&self, group: usize, len: usize) -> Vec<Option<Array2<f64>>> {
        (0..len).map(|i| self.by_key.get(&(group, i)).cloned()).collect()
    }

    pub fn touches_group(&self, group: usize) -> bool {
        self.by_key.keys().any(|(g, _)| *g == group)
    }
}
