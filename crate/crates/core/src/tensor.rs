//! Dense f64 tensors and a reverse-mode differentiation tape.
//!
//! The tape records primitive applications during the forward pass and
//! replays them in reverse topological order to accumulate gradients.
//! The primitive set is the minimum needed to run and differentiate the
//! toy transformers: matmul, add, elementwise nonlinearities, row softmax
//! and log-softmax, mask interpolation and scalar reductions.

use crate::error::{AblateError, Result};
use serde::{Deserialize, Serialize};

/// Row-major dense tensor of f64 values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(AblateError::ShapeMismatch {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn as_scalar(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Rows of a rank-2 tensor (rank-1 tensors count as a single row).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[1]
        } else {
            self.data.len()
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        let cols = self.cols();
        &mut self.data[r * cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(AblateError::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Plain (untaped) primitives. The tape wraps these same routines so the
// taped and untaped forward paths are bit-identical.
// ---------------------------------------------------------------------------

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("sub", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|x| x * c).collect(),
    }
}

/// `a @ b` for rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.rows() {
        return Err(AblateError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

/// `a @ b^T` for rank-2 tensors.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.cols() {
        return Err(AblateError::ShapeMismatch {
            op: "matmul_nt",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::matrix(m, n, out)
}

pub fn relu(a: &Tensor) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu_tanh(a: &Tensor) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a
            .data
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()))
            .collect(),
    }
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect(),
    }
}

/// Numerically stable softmax over the last dimension of a rank-2 tensor.
pub fn softmax_rows(a: &Tensor) -> Tensor {
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &a.data[i * n..(i + 1) * n];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[i * n..(i + 1) * n];
        let mut sum = 0.0;
        for (o, &x) in orow.iter_mut().zip(row) {
            *o = (x - mx).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    Tensor {
        shape: a.shape.clone(),
        data: out,
    }
}

pub fn log_softmax_rows(a: &Tensor) -> Tensor {
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &a.data[i * n..(i + 1) * n];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
        for (o, &x) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
            *o = x - lse;
        }
    }
    Tensor {
        shape: a.shape.clone(),
        data: out,
    }
}

/// Broadcast-add a `[1, n]` bias row to every row of `a`.
pub fn add_row(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.cols() || b.rows() != 1 {
        return Err(AblateError::ShapeMismatch {
            op: "add_row",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let n = a.cols();
    let mut out = a.data.clone();
    for i in 0..a.rows() {
        for j in 0..n {
            out[i * n + j] += b.data[j];
        }
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data: out,
    })
}

/// KL(p || q) in nats for two probability vectors.
pub fn kl_probs(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            acc += pi * (pi.ln() - qi.ln());
        }
    }
    acc
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Matmul(Var, Var),
    MatmulNt(Var, Var),
    Relu(Var),
    GeluTanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Sum(Var),
    /// `m * a + (1 - m) * b` with `m` a scalar.
    Lerp { m: Var, a: Var, b: Var },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Records primitive applications for reverse-mode differentiation.
///
/// Replaying the recorded ops forward reproduces the stored values
/// bit-identically because the tape calls the same untaped primitives.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    /// Record a constant input (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// Record a differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = add(self.value(a), self.value(b))?;
        let g = self.rg(&[a, b]);
        Ok(self.push(Op::Add(a, b), v, g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = sub(self.value(a), self.value(b))?;
        let g = self.rg(&[a, b]);
        Ok(self.push(Op::Sub(a, b), v, g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = mul(self.value(a), self.value(b))?;
        let g = self.rg(&[a, b]);
        Ok(self.push(Op::Mul(a, b), v, g))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul(self.value(a), self.value(b))?;
        let g = self.rg(&[a, b]);
        Ok(self.push(Op::Matmul(a, b), v, g))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul_nt(self.value(a), self.value(b))?;
        let g = self.rg(&[a, b]);
        Ok(self.push(Op::MatmulNt(a, b), v, g))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = relu(self.value(a));
        let g = self.rg(&[a]);
        self.push(Op::Relu(a), v, g)
    }

    pub fn gelu_tanh(&mut self, a: Var) -> Var {
        let v = gelu_tanh(self.value(a));
        let g = self.rg(&[a]);
        self.push(Op::GeluTanh(a), v, g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = sigmoid(self.value(a));
        let g = self.rg(&[a]);
        self.push(Op::Sigmoid(a), v, g)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        let g = self.rg(&[a]);
        self.push(Op::SoftmaxRows(a), v, g)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let v = log_softmax_rows(self.value(a));
        let g = self.rg(&[a]);
        self.push(Op::LogSoftmaxRows(a), v, g)
    }

    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = add_row(self.value(a), self.value(b))?;
        let g = self.rg(&[a, b]);
        Ok(self.push(Op::AddRow(a, b), v, g))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = scale(self.value(a), c);
        let g = self.rg(&[a]);
        self.push(Op::Scale(a, c), v, g)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let mut v = self.value(a).clone();
        for x in &mut v.data {
            *x += c;
        }
        let g = self.rg(&[a]);
        self.push(Op::AddConst(a), v, g)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).data.iter().sum());
        let g = self.rg(&[a]);
        self.push(Op::Sum(a), v, g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `m * a + (1 - m) * b` with scalar mask `m`.
    pub fn lerp(&mut self, m: Var, a: Var, b: Var) -> Result<Var> {
        if !self.value(m).is_scalar() {
            return Err(AblateError::ShapeMismatch {
                op: "lerp mask",
                lhs: self.value(m).shape.clone(),
                rhs: vec![1],
            });
        }
        same_shape("lerp", self.value(a), self.value(b))?;
        let mv = self.value(m).as_scalar();
        let av = self.value(a);
        let bv = self.value(b);
        let data = av
            .data
            .iter()
            .zip(&bv.data)
            .map(|(x, y)| mv * x + (1.0 - mv) * y)
            .collect();
        let v = Tensor {
            shape: av.shape.clone(),
            data,
        };
        let g = self.rg(&[m, a, b]);
        Ok(self.push(Op::Lerp { m, a, b }, v, g))
    }

    /// Mean squared error between `a` and a constant target.
    pub fn mse_to(&mut self, a: Var, target: Var) -> Result<Var> {
        let d = self.sub(a, target)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// KL(p || softmax(q_logits)) in nats, mean over rows; `p_rows` are
    /// probability rows treated as constants.
    pub fn kl_from_probs(&mut self, p_rows: Var, q_logits: Var) -> Result<Var> {
        let lsm = self.log_softmax_rows(q_logits);
        let cross = self.mul(p_rows, lsm)?;
        let s = self.sum(cross);
        let rows = self.value(q_logits).rows() as f64;
        let neg = self.scale(s, -1.0 / rows);
        // constant entropy term: sum p log p / rows
        let p = self.value(p_rows);
        let mut ent = 0.0;
        for &pi in &p.data {
            if pi > 0.0 {
                ent += pi * pi.ln();
            }
        }
        Ok(self.add_const(neg, ent / rows))
    }

    /// Reverse-mode gradient of a scalar `output` with respect to every
    /// recorded tensor on a path to it. Visits nodes in reverse order
    /// exactly once.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if !self.value(output).is_scalar() {
            return Err(AblateError::MetricRejected(format!(
                "backward requires a scalar output, got shape {:?}",
                self.value(output).shape
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=output.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[idx].requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.accumulate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn bump(&self, grads: &mut Vec<Option<Tensor>>, v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad && !matches!(self.nodes[v.0].op, Op::Leaf) {
            // Still propagate through non-grad interior nodes is unnecessary;
            // they can't lead to a grad-requiring leaf.
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (gi, di) in g.data.iter_mut().zip(&delta.data) {
                    *gi += di;
                }
            }
            None => grads[v.0] = Some(delta),
        }
    }

    fn accumulate(&self, idx: usize, g: &Tensor, grads: &mut Vec<Option<Tensor>>) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        match self.nodes[idx].op.clone() {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.bump(grads, a, g.clone());
                self.bump(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.bump(grads, a, g.clone());
                self.bump(grads, b, scale(g, -1.0));
            }
            Op::Mul(a, b) => {
                self.bump(grads, a, mul(g, val(b))?);
                self.bump(grads, b, mul(g, val(a))?);
            }
            Op::Matmul(a, b) => {
                // C = A B: dA = G B^T, dB = A^T G
                self.bump(grads, a, matmul_nt(g, val(b))?);
                let at_g = {
                    let av = val(a);
                    let (m, k) = (av.rows(), av.cols());
                    let n = g.cols();
                    let mut out = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av_ip = av.data[i * k + p];
                            if av_ip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                out[p * n + j] += av_ip * g.data[i * n + j];
                            }
                        }
                    }
                    Tensor::matrix(k, n, out)?
                };
                self.bump(grads, b, at_g);
            }
            Op::MatmulNt(a, b) => {
                // C = A B^T: dA = G B, dB = G^T A
                self.bump(grads, a, matmul(g, val(b))?);
                let gt_a = {
                    let av = val(a);
                    let (m, k) = (av.rows(), av.cols());
                    let n = g.cols();
                    let mut out = vec![0.0; n * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g.data[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                out[j * k + p] += gv * av.data[i * k + p];
                            }
                        }
                    }
                    Tensor::matrix(n, k, out)?
                };
                self.bump(grads, b, gt_a);
            }
            Op::Relu(a) => {
                let x = val(a);
                let data = g
                    .data
                    .iter()
                    .zip(&x.data)
                    .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                self.bump(
                    grads,
                    a,
                    Tensor {
                        shape: x.shape.clone(),
                        data,
                    },
                );
            }
            Op::GeluTanh(a) => {
                let x = val(a);
                let data = g
                    .data
                    .iter()
                    .zip(&x.data)
                    .map(|(&gi, &xi)| {
                        let u = GELU_C * (xi + 0.044715 * xi * xi * xi);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * xi * xi);
                        gi * (0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * du)
                    })
                    .collect();
                self.bump(
                    grads,
                    a,
                    Tensor {
                        shape: x.shape.clone(),
                        data,
                    },
                );
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                let data = g
                    .data
                    .iter()
                    .zip(&y.data)
                    .map(|(&gi, &yi)| gi * yi * (1.0 - yi))
                    .collect();
                self.bump(
                    grads,
                    a,
                    Tensor {
                        shape: y.shape.clone(),
                        data,
                    },
                );
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[idx].value;
                let (m, n) = (y.rows(), y.cols());
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    let yr = &y.data[i * n..(i + 1) * n];
                    let gr = &g.data[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(&yi, &gi)| yi * gi).sum();
                    for j in 0..n {
                        out[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.bump(
                    grads,
                    a,
                    Tensor {
                        shape: y.shape.clone(),
                        data: out,
                    },
                );
            }
            Op::LogSoftmaxRows(a) => {
                let y = &self.nodes[idx].value;
                let (m, n) = (y.rows(), y.cols());
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    let yr = &y.data[i * n..(i + 1) * n];
                    let gr = &g.data[i * n..(i + 1) * n];
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..n {
                        out[i * n + j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                self.bump(
                    grads,
                    a,
                    Tensor {
                        shape: y.shape.clone(),
                        data: out,
                    },
                );
            }
            Op::AddRow(a, b) => {
                self.bump(grads, a, g.clone());
                let n = g.cols();
                let mut col = vec![0.0; n];
                for i in 0..g.rows() {
                    for j in 0..n {
                        col[j] += g.data[i * n + j];
                    }
                }
                self.bump(grads, b, Tensor::matrix(1, n, col)?);
            }
            Op::Scale(a, c) => {
                self.bump(grads, a, scale(g, c));
            }
            Op::AddConst(a) => {
                self.bump(grads, a, g.clone());
            }
            Op::Sum(a) => {
                let x = val(a);
                let gv = g.as_scalar();
                self.bump(
                    grads,
                    a,
                    Tensor {
                        shape: x.shape.clone(),
                        data: vec![gv; x.len()],
                    },
                );
            }
            Op::Lerp { m, a, b } => {
                let mv = val(m).as_scalar();
                self.bump(grads, a, scale(g, mv));
                self.bump(grads, b, scale(g, 1.0 - mv));
                let dm: f64 = g
                    .data
                    .iter()
                    .zip(val(a).data.iter().zip(&val(b).data))
                    .map(|(&gi, (&ai, &bi))| gi * (ai - bi))
                    .sum();
                self.bump(grads, m, Tensor::scalar(dm));
            }
        }
        Ok(())
    }
}

/// Gradient buffers keyed by tape index.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the given shape when `v` is off every
    /// path to the output.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

/// Result of comparing an analytic gradient against central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Max over comparable coordinates of
    /// `|analytic - central| / (|analytic| + 1e-8)`.
    pub max_rel_err: f64,
    /// Coordinates where one-sided derivatives disagree (e.g. a relu kink);
    /// excluded from `max_rel_err`.
    pub non_comparable: Vec<usize>,
    /// True if any evaluation produced a non-finite value.
    pub non_finite: bool,
}

/// Check the analytic gradient of `f` at `point` against central finite
/// differences with the given step. `f` builds a scalar function of its
/// input variable on the provided tape.
pub fn check_gradients<F>(f: F, point: &Tensor, step: f64) -> GradCheck
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |t: &Tensor| -> f64 {
        let mut tape = Tape::new();
        let x = tape.constant(t.clone());
        match f(&mut tape, x) {
            Ok(out) => tape.value(out).as_scalar(),
            Err(_) => f64::NAN,
        }
    };

    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let analytic = match f(&mut tape, x) {
        Ok(out) => {
            let grads = match tape.backward(out) {
                Ok(g) => g,
                Err(_) => {
                    return GradCheck {
                        max_rel_err: f64::INFINITY,
                        non_comparable: vec![],
                        non_finite: true,
                    }
                }
            };
            grads.get_or_zeros(x, &point.shape)
        }
        Err(_) => {
            return GradCheck {
                max_rel_err: f64::INFINITY,
                non_comparable: vec![],
                non_finite: true,
            }
        }
    };

    let mut max_rel_err: f64 = 0.0;
    let mut non_comparable = Vec::new();
    let mut non_finite = !analytic.all_finite();
    let base = eval(point);
    if !base.is_finite() {
        non_finite = true;
    }
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data[i] += step;
        let mut minus = point.clone();
        minus.data[i] -= step;
        let fp = eval(&plus);
        let fm = eval(&minus);
        if !fp.is_finite() || !fm.is_finite() {
            non_finite = true;
            continue;
        }
        let fwd = (fp - base) / step;
        let bwd = (base - fm) / step;
        if (fwd - bwd).abs() > 1e-3 * (1.0 + fwd.abs() + bwd.abs()) {
            // one-sided derivatives disagree: nondifferentiable point
            non_comparable.push(i);
            continue;
        }
        let central = (fp - fm) / (2.0 * step);
        let rel = (analytic.data[i] - central).abs() / (analytic.data[i].abs() + 1e-8);
        max_rel_err = max_rel_err.max(rel);
    }
    GradCheck {
        max_rel_err,
        non_comparable,
        non_finite,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor { shape, data }
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let id = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(matmul(&a, &id).unwrap(), a);
    }

    #[test]
    fn matmul_shape_mismatch_names_shapes() {
        let a = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let b = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_symmetry() {
        let x = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let y = softmax_rows(&x);
        assert_eq!(y.data, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let x = rand_tensor(&mut rng, vec![3, 5]);
            let y = softmax_rows(&x);
            for i in 0..3 {
                let s: f64 = y.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!(y.row(i).iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn kl_identical_distributions_is_zero() {
        assert_eq!(kl_probs(&[0.5, 0.5], &[0.5, 0.5]), 0.0);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let out = tape.sum(sq);
        let grads = tape.backward(out).unwrap();
        assert_eq!(grads.get(x).unwrap().data, vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn kl_gradient_zero_at_matched_distributions() {
        let mut tape = Tape::new();
        let p = softmax_rows(&Tensor::matrix(1, 3, vec![0.3, -0.1, 0.5]).unwrap());
        let pc = tape.constant(p);
        let q = tape.leaf(Tensor::matrix(1, 3, vec![0.3, -0.1, 0.5]).unwrap());
        let loss = tape.kl_from_probs(pc, q).unwrap();
        assert!(tape.value(loss).as_scalar().abs() < 1e-12);
        let grads = tape.backward(loss).unwrap();
        for &g in &grads.get(q).unwrap().data {
            assert!(g.abs() < 1e-12, "grad {g}");
        }
    }

    #[test]
    fn gradcheck_sum_of_squares() {
        let point = Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap();
        let res = check_gradients(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                Ok(tape.sum(sq))
            },
            &point,
            1e-4,
        );
        assert!(res.max_rel_err < 1e-6, "{}", res.max_rel_err);
        assert!(res.non_comparable.is_empty());
    }

    #[test]
    fn gradcheck_log_softmax_component() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let point = rand_tensor(&mut rng, vec![1, 4]);
        let res = check_gradients(
            |tape, x| {
                let lsm = tape.log_softmax_rows(x);
                // pick out one component
                let mask = tape.constant(Tensor::matrix(1, 4, vec![0.0, 1.0, 0.0, 0.0]).unwrap());
                let picked = tape.mul(lsm, mask)?;
                Ok(tape.sum(picked))
            },
            &point,
            1e-4,
        );
        assert!(res.max_rel_err < 1e-4, "{}", res.max_rel_err);
    }

    #[test]
    fn gradcheck_flags_relu_kink() {
        let point = Tensor::matrix(1, 3, vec![1.0, 0.0, -1.0]).unwrap();
        let res = check_gradients(
            |tape, x| {
                let r = tape.relu(x);
                Ok(tape.sum(r))
            },
            &point,
            1e-4,
        );
        assert_eq!(res.non_comparable, vec![1]);
        assert!(res.max_rel_err < 1e-6);
    }

    #[test]
    fn gradcheck_all_primitives_random_points() {
        // 100 seeded points across the primitive set; 1e-4 relative tolerance.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..100 {
            let point = rand_tensor(&mut rng, vec![2, 3]);
            let w = rand_tensor(&mut rng, vec![3, 2]);
            let b = rand_tensor(&mut rng, vec![1, 2]);
            let prim = trial % 5;
            let res = check_gradients(
                |tape, x| {
                    let wc = tape.constant(w.clone());
                    let bc = tape.constant(b.clone());
                    let h = tape.matmul(x, wc)?;
                    let h = tape.add_row(h, bc)?;
                    let y = match prim {
                        0 => tape.softmax_rows(h),
                        1 => tape.log_softmax_rows(h),
                        2 => tape.gelu_tanh(h),
                        3 => tape.sigmoid(h),
                        _ => {
                            let s = tape.scale(h, 0.7);
                            tape.add_const(s, 0.3)
                        }
                    };
                    let sq = tape.mul(y, y)?;
                    Ok(tape.mean(sq))
                },
                &point,
                1e-4,
            );
            assert!(!res.non_finite);
            assert!(
                res.max_rel_err < 1e-4,
                "trial {trial}: rel err {}",
                res.max_rel_err
            );
        }
    }

    #[test]
    fn gradcheck_matmul_nt_and_lerp() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let point = rand_tensor(&mut rng, vec![2, 3]);
            let other = rand_tensor(&mut rng, vec![4, 3]);
            let donor = rand_tensor(&mut rng, vec![2, 4]);
            let res = check_gradients(
                |tape, x| {
                    let o = tape.constant(other.clone());
                    let s = tape.matmul_nt(x, o)?;
                    let m = tape.constant(Tensor::scalar(0.3));
                    let d = tape.constant(donor.clone());
                    let mixed = tape.lerp(m, s, d)?;
                    let sm = tape.softmax_rows(mixed);
                    let sq = tape.mul(sm, sm)?;
                    Ok(tape.mean(sq))
                },
                &point,
                1e-4,
            );
            assert!(res.max_rel_err < 1e-4, "{}", res.max_rel_err);
        }
    }

    #[test]
    fn lerp_mask_gradient() {
        // d/dm of sum(m*a + (1-m)*b) = sum(a - b)
        let mut tape = Tape::new();
        let m = tape.leaf(Tensor::scalar(0.4));
        let a = tape.constant(Tensor::matrix(1, 2, vec![3.0, 5.0]).unwrap());
        let b = tape.constant(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap());
        let y = tape.lerp(m, a, b).unwrap();
        let out = tape.sum(y);
        let grads = tape.backward(out).unwrap();
        assert!((grads.get(m).unwrap().as_scalar() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn forward_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&mut rng, vec![4, 4]);
        let b = rand_tensor(&mut rng, vec![4, 4]);
        let r1 = softmax_rows(&matmul(&a, &b).unwrap());
        let r2 = softmax_rows(&matmul(&a, &b).unwrap());
        assert_eq!(r1, r2);
    }
}
