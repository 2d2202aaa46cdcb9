//! Minimal reverse-mode differentiation over row-major matrices.
//!
//! Only the operations the encoder forward pass needs are supported. Base
//! weights enter by shared reference and never receive gradients; leaves
//! created with [`Tape::param`] do.

use ndarray::{concatenate, s, Array1, Array2, Axis};

const LN_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<'w> {
    Leaf,
    /// `x · w + b`; gradient flows to `x` only.
    Linear {
        x: Var,
        w: &'w Array2<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: &'w Array1<f64>,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    Gelu {
        x: Var,
    },
    Add(Var, Var),
    ConcatRows(Var, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Array2<f64>>,
    },
}

struct Node<'w> {
    value: Array2<f64>,
    op: Op<'w>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape<'w> {
    nodes: Vec<Node<'w>>,
}

impl<'w> Tape<'w> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<f64>, op: Op<'w>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn linear(&mut self, x: Var, w: &'w Array2<f64>, b: &'w Array1<f64>) -> Var {
        let value = self.value(x).dot(w) + b;
        let needs = self.needs(x);
        self.push(value, Op::Linear { x, w }, needs)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: &'w Array1<f64>, beta: &'w Array1<f64>) -> Var {
        let input = self.value(x);
        let (rows, cols) = input.dim();
        let mut xhat = Array2::zeros((rows, cols));
        let mut inv_std = Array1::zeros(rows);
        for (r, row) in input.rows().into_iter().enumerate() {
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = inv;
            xhat.row_mut(r).assign(&row.mapv(|v| (v - mean) * inv));
        }
        let value = &xhat * gamma + beta;
        let needs = self.needs(x);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                xhat,
                inv_std,
            },
            needs,
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(gelu);
        let needs = self.needs(x);
        self.push(value, Op::Gelu { x }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), needs)
    }

    /// Stacks `top` above `bottom`.
    pub fn concat_rows(&mut self, top: Var, bottom: Var) -> Var {
        let value =
            concatenate(Axis(0), &[self.value(top).view(), self.value(bottom).view()]).expect("column counts agree");
        let needs = self.needs(top) || self.needs(bottom);
        self.push(value, Op::ConcatRows(top, bottom), needs)
    }

    /// Unmasked multi-head scaled dot-product attention. `q` is `T × H`,
    /// `k` and `v` are `S × H`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (t, h) = qv.dim();
        let dh = h / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((t, h));
        let mut probs = Vec::with_capacity(heads);
        for head in 0..heads {
            let cols = s![.., head * dh..(head + 1) * dh];
            let scores = qv.slice(cols).dot(&kv.slice(cols).t()) * scale;
            let p = softmax_rows(&scores);
            out.slice_mut(cols).assign(&p.dot(&vv.slice(cols)));
            probs.push(p);
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(out, Op::Attention { q, k, v, heads, probs }, needs)
    }

    /// Propagates `seeds` (gradients on chosen nodes) back through the tape.
    /// Returns the gradient of every node that needs one.
    pub fn backward(&self, seeds: &[(Var, Array2<f64>)]) -> Vec<Option<Array2<f64>>> {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            if self.needs(*v) {
                accumulate(&mut grads, *v, g.clone());
            }
        }
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                // leaves keep their gradient for the caller
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Linear { x, w } => {
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, g.dot(&w.t()));
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    xhat,
                    inv_std,
                } => {
                    if self.needs(*x) {
                        let n = xhat.ncols() as f64;
                        let dxhat = &g * *gamma;
                        let mut dx = Array2::zeros(g.raw_dim());
                        for r in 0..g.nrows() {
                            let dr = dxhat.row(r);
                            let xr = xhat.row(r);
                            let sum = dr.sum();
                            let dot = dr.dot(&xr);
                            let inv = inv_std[r];
                            for c in 0..g.ncols() {
                                dx[[r, c]] = inv / n * (n * dr[c] - sum - xr[c] * dot);
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Gelu { x } => {
                    let input = self.value(*x);
                    let mut dx = g;
                    dx.zip_mut_with(input, |d, &xv| *d *= gelu_grad(xv));
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::ConcatRows(top, bottom) => {
                    let split = self.value(*top).nrows();
                    if self.needs(*top) {
                        accumulate(&mut grads, *top, g.slice(s![..split, ..]).to_owned());
                    }
                    if self.needs(*bottom) {
                        accumulate(&mut grads, *bottom, g.slice(s![split.., ..]).to_owned());
                    }
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let dh = qv.ncols() / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Array2::zeros(qv.raw_dim());
                    let mut dk = Array2::zeros(kv.raw_dim());
                    let mut dv = Array2::zeros(vv.raw_dim());
                    for (head, p) in probs.iter().enumerate() {
                        let cols = s![.., head * dh..(head + 1) * dh];
                        let go = g.slice(cols);
                        dv.slice_mut(cols).assign(&p.t().dot(&go));
                        let dp = go.dot(&vv.slice(cols).t());
                        let mut ds = dp;
                        for r in 0..ds.nrows() {
                            let dot = ds.row(r).dot(&p.row(r));
                            for c in 0..ds.ncols() {
                                ds[[r, c]] = p[[r, c]] * (ds[[r, c]] - dot) * scale;
                            }
                        }
                        dq.slice_mut(cols).assign(&ds.dot(&kv.slice(cols)));
                        dk.slice_mut(cols).assign(&ds.t().dot(&qv.slice(cols)));
                    }
                    if self.needs(*q) {
                        accumulate(&mut grads, *q, dq);
                    }
                    if self.needs(*k) {
                        accumulate(&mut grads, *k, dk);
                    }
                    if self.needs(*v) {
                        accumulate(&mut grads, *v, dv);
                    }
                }
            }
        }
        grads
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}
