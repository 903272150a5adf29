//! Recorded gradient programs.
//!
//! A [`Program`] records every primitive applied during a forward pass
//! together with the intermediates its adjoint needs. [`Program::backward`]
//! replays the adjoints once, in reverse recording order, and yields exact
//! gradients for every leaf created with [`Program::param`].
//!
//! ```
//! use sparselab::autograd::Program;
//! use sparselab::tensor::Tensor;
//!
//! let mut p = Program::new();
//! let x = p.param(Tensor::scalar(3.0));
//! let y = p.mul(x, x).unwrap();
//! let grads = p.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```

use crate::error::{Error, Result};
use crate::tensor::{matmul_nt_into, matmul_tn_into, Tensor};

/// Variance floor used by [`Program::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded in a [`Program`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRowBroadcast(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Log(Var),
    Exp(Var),
    Sum(Var),
    Pick { x: Var, targets: Vec<usize> },
    SplitHeads { x: Var, batch: usize, heads: usize },
    MergeHeads { x: Var, batch: usize, heads: usize },
    MaskSte(Var),
    GroupScale { w: Var, a: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive applications.
pub struct Program {
    nodes: Vec<Node>,
    replayed: bool,
}

/// Gradients produced by one [`Program::backward`] replay.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zero-filled when `v` does not influence the output.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Default for Program {
    fn default() -> Self {
        Self::new()
    }
}

impl Program {
    pub fn new() -> Self {
        Program {
            nodes: Vec::new(),
            replayed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        value.check_finite()?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(value, op, needs_grad))
    }

    /// Trainable leaf; gradients are reported for it.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Constant leaf; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push_checked(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push_checked(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        self.push_checked(out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        self.push_checked(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).scale(s);
        self.push_checked(out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v + s);
        self.push_checked(out, Op::AddScalar(a), &[a])
    }

    /// Adds a 1-D `bias` of length `cols` to every row of `x`.
    pub fn add_row_broadcast(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if bv.ndim() != 1 || bv.len() != xv.cols() {
            return Err(Error::Shape(format!(
                "row broadcast of {:?} onto {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let c = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push_checked(out, Op::AddRowBroadcast(x, bias), &[x, bias])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        self.push_checked(out, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push_checked(out, Op::Reshape(x), &[x])
    }

    /// Gathers rows of `table` (V x d) for each id, giving `ids.len() x d`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.ndim() != 2 {
            return Err(Error::Shape("embedding table must be 2-D".into()));
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Shape(format!("token id {id} outside vocab {v}")));
            }
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor::from_parts(vec![ids.len(), d], data);
        self.push_checked(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Softmax over the last dimension with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = softmax_rows(self.value(x), false);
        self.push_checked(out, Op::Softmax(x), &[x])
    }

    /// Softmax over the last dimension where row `i` of each `s x s` block
    /// only sees columns `0..=i`. Hidden columns get probability exactly 0.
    pub fn causal_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (_, r, c) = xv.as_batched()?;
        if r != c {
            return Err(Error::Shape(format!(
                "causal softmax needs square blocks, got {:?}",
                xv.shape()
            )));
        }
        let out = softmax_rows(xv, true);
        self.push_checked(out, Op::Softmax(x), &[x])
    }

    /// Log-softmax over the last dimension via a stable log-sum-exp.
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(c) {
            let lse = log_sum_exp(row);
            data.extend(row.iter().map(|&v| v - lse));
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push_checked(out, Op::LogSoftmax(x), &[x])
    }

    /// Normalizes each row of `x` to zero mean and unit variance
    /// (variance floor [`LAYER_NORM_EPS`]), then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.len() != d || bv.len() != d || gv.ndim() != 1 || bv.ndim() != 1 {
            return Err(Error::Shape(format!(
                "layer norm over width {d} with gain {:?} and bias {:?}",
                gv.shape(),
                bv.shape()
            )));
        }
        let rows = xv.rows();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(d) {
            let mean = row.iter().fold(0.0, |a, &v| a + v) / d as f64;
            let var = row.iter().fold(0.0, |a, &v| a + (v - mean) * (v - mean)) / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(h * gv.data()[j] + bv.data()[j]);
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push_checked(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu);
        self.push_checked(out, Op::Gelu(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::NonFinite("log of a non-positive value".into()));
        }
        let out = xv.map(f64::ln);
        self.push_checked(out, Op::Log(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::exp);
        self.push_checked(out, Op::Exp(x), &[x])
    }

    /// Sum of all entries as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push_checked(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Picks `x[r, targets[r]]` for every row, giving a 1-D tensor.
    pub fn pick(&mut self, x: Var, targets: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if targets.len() != xv.rows() {
            return Err(Error::Shape(format!(
                "{} targets for {} rows",
                targets.len(),
                xv.rows()
            )));
        }
        let mut data = Vec::with_capacity(targets.len());
        for (r, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::Shape(format!("target {t} outside {c} classes")));
            }
            data.push(xv.data()[r * c + t]);
        }
        let out = Tensor::from_parts(vec![targets.len()], data);
        self.push_checked(
            out,
            Op::Pick {
                x,
                targets: targets.to_vec(),
            },
            &[x],
        )
    }

    /// `(batch*seq) x (heads*dh)` to `(batch*heads) x seq x dh`.
    pub fn split_heads(&mut self, x: Var, batch: usize, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        let out = split_heads(xv, batch, heads)?;
        self.push_checked(out, Op::SplitHeads { x, batch, heads }, &[x])
    }

    /// Inverse of [`Program::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        let out = merge_heads(xv, batch, heads)?;
        self.push_checked(out, Op::MergeHeads { x, batch, heads }, &[x])
    }

    /// Forward `w ⊙ mask`; the adjoint passes straight through to `w`
    /// (straight-through estimator).
    pub fn mask_ste(&mut self, w: Var, mask: &Tensor) -> Result<Var> {
        let out = self.value(w).mul(mask)?;
        self.push_checked(out, Op::MaskSte(w), &[w])
    }

    /// Multiplies entry `(r, c)` of `w` (R x C) by `a[r, c / (C / n)]`
    /// where `a` is R x n.
    pub fn group_scale(&mut self, w: Var, a: Var) -> Result<Var> {
        let out = crate::scaling::group_scale_tensor(self.value(w), self.value(a))?;
        self.push_checked(out, Op::GroupScale { w, a }, &[w, a])
    }

    /// Replays adjoints from `output` (a one-element tensor) back to every
    /// leaf. A program can be replayed once.
    pub fn backward(&mut self, output: Var) -> Result<Gradients> {
        if self.replayed {
            return Err(Error::Program(
                "gradients were already requested for this recording".into(),
            ));
        }
        if self.value(output).len() != 1 {
            return Err(Error::Program(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        self.replayed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(1.0));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut acc = |v: Var, t: Tensor| accumulate(&self.nodes, grads, v, t);
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (nb, r, k) = av.as_batched()?;
                let (_, _, c) = bv.as_batched()?;
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0; av.len()];
                    for bi in 0..nb {
                        matmul_nt_into(
                            &g.data()[bi * r * c..(bi + 1) * r * c],
                            &bv.data()[bi * k * c..(bi + 1) * k * c],
                            &mut da[bi * r * k..(bi + 1) * r * k],
                            r,
                            c,
                            k,
                        );
                    }
                    acc(*a, Tensor::from_parts(av.shape().to_vec(), da));
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0; bv.len()];
                    for bi in 0..nb {
                        matmul_tn_into(
                            &av.data()[bi * r * k..(bi + 1) * r * k],
                            &g.data()[bi * r * c..(bi + 1) * r * c],
                            &mut db[bi * k * c..(bi + 1) * k * c],
                            r,
                            k,
                            c,
                        );
                    }
                    acc(*b, Tensor::from_parts(bv.shape().to_vec(), db));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    acc(*a, g.mul(bv)?);
                }
                if self.nodes[b.0].needs_grad {
                    acc(*b, g.mul(av)?);
                }
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::AddRowBroadcast(x, bias) => {
                acc(*x, g.clone());
                if self.nodes[bias.0].needs_grad {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (o, &v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    acc(*bias, Tensor::from_parts(vec![c], db));
                }
            }
            Op::Transpose(x) => acc(*x, g.transpose()?),
            Op::Reshape(x) => acc(*x, g.reshape(self.value(*x).shape())?),
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let d = tv.cols();
                let mut dt = vec![0.0; tv.len()];
                for (r, &id) in ids.iter().enumerate() {
                    let src = &g.data()[r * d..(r + 1) * d];
                    for (o, &v) in dt[id * d..(id + 1) * d].iter_mut().zip(src) {
                        *o += v;
                    }
                }
                acc(*table, Tensor::from_parts(tv.shape().to_vec(), dt));
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(c).zip(g.data().chunks(c)) {
                    let dot = yr.iter().zip(gr).fold(0.0, |a, (&p, &q)| a + p * q);
                    dx.extend(yr.iter().zip(gr).map(|(&p, &q)| p * (q - dot)));
                }
                acc(*x, Tensor::from_parts(y.shape().to_vec(), dx));
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(c).zip(g.data().chunks(c)) {
                    let gsum = gr.iter().fold(0.0, |a, &v| a + v);
                    dx.extend(yr.iter().zip(gr).map(|(&ly, &q)| q - ly.exp() * gsum));
                }
                acc(*x, Tensor::from_parts(y.shape().to_vec(), dx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain);
                let d = gv.len();
                let mut dx = Vec::with_capacity(xhat.len());
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for (r, (gr, hr)) in g.data().chunks(d).zip(xhat.chunks(d)).enumerate() {
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * gv.data()[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gv.data()[j];
                        dx.push(rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h));
                    }
                }
                acc(*x, Tensor::from_parts(g.shape().to_vec(), dx));
                acc(*gain, Tensor::from_parts(vec![d], dgain));
                acc(*bias, Tensor::from_parts(vec![d], dbias));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                acc(*x, g.zip_map(xv, |q, v| q * gelu_grad(v))?);
            }
            Op::Log(x) => {
                let xv = self.value(*x);
                acc(*x, g.zip_map(xv, |q, v| q / v)?);
            }
            Op::Exp(x) => acc(*x, g.mul(&node.value)?),
            Op::Sum(x) => {
                let xv = self.value(*x);
                acc(*x, Tensor::filled(xv.shape(), g.item()));
            }
            Op::Pick { x, targets } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for (r, &t) in targets.iter().enumerate() {
                    dx[r * c + t] = g.data()[r];
                }
                acc(*x, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
            Op::SplitHeads { x, batch, heads } => acc(*x, merge_heads(g, *batch, *heads)?),
            Op::MergeHeads { x, batch, heads } => acc(*x, split_heads(g, *batch, *heads)?),
            Op::MaskSte(w) => acc(*w, g.clone()),
            Op::GroupScale { w, a } => {
                let (wv, av) = (self.value(*w), self.value(*a));
                if self.nodes[w.0].needs_grad {
                    acc(*w, crate::scaling::group_scale_tensor(g, av)?);
                }
                if self.nodes[a.0].needs_grad {
                    acc(*a, crate::scaling::group_scale_adjoint(g, wv, av)?);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match &mut grads[v.0] {
        slot @ None => *slot = Some(t),
        Some(existing) => {
            let sum = existing.add(&t).expect("adjoint shapes match their primal");
            *existing = sum;
        }
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
    let s = row.iter().fold(0.0, |a, &v| a + (v - m).exp());
    m + s.ln()
}

/// Row softmax of a tensor; with `causal`, row `i` of each square block is
/// restricted to columns `0..=i`.
pub fn softmax_rows(x: &Tensor, causal: bool) -> Tensor {
    let c = x.cols();
    let mut data = vec![0.0; x.len()];
    for (r, (row, out)) in x.data().chunks(c).zip(data.chunks_mut(c)).enumerate() {
        let visible = if causal { (r % c) + 1 } else { c };
        let row = &row[..visible];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let mut s = 0.0;
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - m).exp();
            s += *o;
        }
        for o in out[..visible].iter_mut() {
            *o /= s;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), data)
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

fn split_heads(x: &Tensor, batch: usize, heads: usize) -> Result<Tensor> {
    if x.ndim() != 2 || !x.rows().is_multiple_of(batch) || !x.cols().is_multiple_of(heads) {
        return Err(Error::Shape(format!(
            "cannot split {:?} into {batch} batches x {heads} heads",
            x.shape()
        )));
    }
    let (seq, d) = (x.rows() / batch, x.cols());
    let dh = d / heads;
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for t in 0..seq {
            let src = x.row(b * seq + t);
            for h in 0..heads {
                let dst = ((b * heads + h) * seq + t) * dh;
                out[dst..dst + dh].copy_from_slice(&src[h * dh..(h + 1) * dh]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![batch * heads, seq, dh], out))
}

fn merge_heads(x: &Tensor, batch: usize, heads: usize) -> Result<Tensor> {
    let (bh, seq, dh) = x.as_batched()?;
    if x.ndim() != 3 || bh != batch * heads {
        return Err(Error::Shape(format!(
            "cannot merge {:?} as {batch} batches x {heads} heads",
            x.shape()
        )));
    }
    let d = heads * dh;
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for h in 0..heads {
            for t in 0..seq {
                let src = ((b * heads + h) * seq + t) * dh;
                let dst = (b * seq + t) * d + h * dh;
                out[dst..dst + dh].copy_from_slice(&x.data()[src..src + dh]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![batch * seq, d], out))
}

/// Central-difference gradient of `f` at `params`, one coordinate at a time:
/// `(f(θ + h) − f(θ − h)) / 2h`.
pub fn finite_diff_grad<F>(mut f: F, params: &[Tensor], h: f64) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Program(format!("finite-difference step must be positive, got {h}")));
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for k in 0..params.len() {
        let shape = params[k].shape().to_vec();
        let mut grad = vec![0.0; params[k].len()];
        for (i, gi) in grad.iter_mut().enumerate() {
            let orig = params[k].data()[i];
            let mut plus = params[k].data().to_vec();
            plus[i] = orig + h;
            work[k] = Tensor::from_parts(shape.clone(), plus);
            let fp = f(&work)?;
            let mut minus = params[k].data().to_vec();
            minus[i] = orig - h;
            work[k] = Tensor::from_parts(shape.clone(), minus);
            let fm = f(&work)?;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite(format!(
                    "objective evaluated to {fp} / {fm} at coordinate {i} of input {k}"
                )));
            }
            *gi = (fp - fm) / (2.0 * h);
        }
        work[k] = params[k].clone();
        out.push(Tensor::from_parts(shape, grad));
    }
    Ok(out)
}

/// Elementwise `|a − b| ≤ atol + rtol·|b|` check; returns the first failing
/// flat index.
pub fn grads_close(a: &Tensor, b: &Tensor, rtol: f64, atol: f64) -> std::result::Result<(), String> {
    if a.shape() != b.shape() {
        return Err(format!("shape {:?} vs {:?}", a.shape(), b.shape()));
    }
    for (i, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
        if (x - y).abs() > atol + rtol * y.abs() {
            return Err(format!("index {i}: {x} vs {y}"));
        }
    }
    Ok(())
}
