use super::Tensor;
use crate::error::{Error, Result};

/// Below this norm a vector-neuron direction is treated as absent and the
/// feature passes through unchanged.
pub const VN_DEGENERATE_NORM: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kinds of recorded operations, used for fault injection and reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    MatMul,
    Add,
    Sub,
    Scale,
    AddRow,
    Relu,
    RowSoftmax,
    CrossEntropy,
    FrobeniusSq,
    Transpose,
    ConcatCols,
    Reshape,
    VnClip,
}

impl Primitive {
    pub const ALL: [Primitive; 13] = [
        Primitive::MatMul,
        Primitive::Add,
        Primitive::Sub,
        Primitive::Scale,
        Primitive::AddRow,
        Primitive::Relu,
        Primitive::RowSoftmax,
        Primitive::CrossEntropy,
        Primitive::FrobeniusSq,
        Primitive::Transpose,
        Primitive::ConcatCols,
        Primitive::Reshape,
        Primitive::VnClip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Scale => "scale",
            Primitive::AddRow => "add_row",
            Primitive::Relu => "relu",
            Primitive::RowSoftmax => "row_softmax",
            Primitive::CrossEntropy => "cross_entropy_loss",
            Primitive::FrobeniusSq => "frobenius_sq",
            Primitive::Transpose => "transpose",
            Primitive::ConcatCols => "concat_cols",
            Primitive::Reshape => "reshape",
            Primitive::VnClip => "vn_clip",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Relu(Var),
    RowSoftmax(Var),
    CrossEntropy { logits: Var, labels: Vec<usize> },
    FrobeniusSq(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    VnClip(Var, Var),
}

impl Op {
    fn primitive(&self) -> Option<Primitive> {
        Some(match self {
            Op::Leaf | Op::Constant => return None,
            Op::MatMul(..) => Primitive::MatMul,
            Op::Add(..) => Primitive::Add,
            Op::Sub(..) => Primitive::Sub,
            Op::Scale(..) => Primitive::Scale,
            Op::AddRow(..) => Primitive::AddRow,
            Op::Relu(..) => Primitive::Relu,
            Op::RowSoftmax(..) => Primitive::RowSoftmax,
            Op::CrossEntropy { .. } => Primitive::CrossEntropy,
            Op::FrobeniusSq(..) => Primitive::FrobeniusSq,
            Op::Transpose(..) => Primitive::Transpose,
            Op::ConcatCols(..) => Primitive::ConcatCols,
            Op::Reshape(..) => Primitive::Reshape,
            Op::VnClip(..) => Primitive::VnClip,
        })
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only tape. Inputs of a node always have smaller ids, so the tape is
/// acyclic and reverse id order is a valid backward schedule.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<Primitive>,
}

/// Gradients of a scalar loss with respect to every node reached by backward.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Corrupts the backward rule of one primitive (its gradient is halved).
    /// Only for exercising the self-check failure path.
    #[doc(hidden)]
    pub fn with_fault(fault: Option<Primitive>) -> Self {
        Self {
            nodes: Vec::new(),
            fault,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Distance of the recorded point from the nearest switching surface:
    /// the smallest `|x|` over relu inputs and the smallest `|⟨q, k̂⟩|` over
    /// clipped vectors. Infinite when the tape has neither.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match node.op {
                Op::Relu(a) => {
                    for &x in self.value(a).data() {
                        margin = margin.min(x.abs());
                    }
                }
                Op::VnClip(q, k) => {
                    let (qv, kv) = (self.value(q), self.value(k));
                    for_each_vector(qv.rows(), qv.cols() / 3, |idx| {
                        let kx = idx.map(|i| kv.data()[i]);
                        let n = dot(kx, kx).sqrt();
                        if n >= VN_DEGENERATE_NORM {
                            margin = margin.min((dot(idx.map(|i| qv.data()[i]), kx) / n).abs());
                        }
                    });
                }
                _ => {}
            }
        }
        margin
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).scale(factor);
        self.push(Op::Scale(a, factor), v)
    }

    /// `a + 1·row`: broadcasts a `[1, c]` bias over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.value(a).add_row(self.value(row))?;
        Ok(self.push(Op::AddRow(a, row), v))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).relu();
        self.push(Op::Relu(a), v)
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).row_softmax()?;
        Ok(self.push(Op::RowSoftmax(a), v))
    }

    /// Mean cross-entropy of `[rows, classes]` logits against one label per row.
    pub fn cross_entropy_loss(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        if x.shape().len() != 2 || x.rows() != labels.len() {
            return Err(Error::shape(
                "cross_entropy_loss",
                x.shape(),
                &[labels.len()],
            ));
        }
        let (rows, classes) = (x.rows(), x.cols());
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::shape("cross_entropy_loss label", &[bad], &[classes]));
        }
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &x.data()[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let v = Tensor::scalar(total / rows as f64);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            v,
        ))
    }

    pub fn frobenius_sq(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).frobenius_sq());
        self.push(Op::FrobeniusSq(a), v)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        Ok(self.push(Op::Transpose(a), v))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_cols(&values)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), v))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(Op::Reshape(a), v))
    }

    /// Vector-neuron ReLU on `[n, 3·b]` feature blocks laid out coordinate-major:
    /// the 3-vector of channel `c`, sample `s` is columns `s`, `b + s`, `2b + s`.
    ///
    /// Where `⟨q, k⟩ < 0` the component of `q` along `k` is removed; otherwise
    /// (or when `‖k‖ < VN_DEGENERATE_NORM`) `q` passes through.
    pub fn vn_clip(&mut self, q: Var, k: Var) -> Result<Var> {
        let (qv, kv) = (self.value(q), self.value(k));
        if qv.shape() != kv.shape() {
            return Err(Error::shape("vn_clip", qv.shape(), kv.shape()));
        }
        if qv.shape().len() != 2 || qv.cols() % 3 != 0 {
            return Err(Error::shape("vn_clip", qv.shape(), &[0, 3]));
        }
        let mut out = qv.data().to_vec();
        for_each_vector(qv.rows(), qv.cols() / 3, |idx| {
            let qx = idx.map(|i| qv.data()[i]);
            let kx = idx.map(|i| kv.data()[i]);
            let d = dot(qx, kx);
            let s = dot(kx, kx);
            if d < 0.0 && s.sqrt() >= VN_DEGENERATE_NORM {
                let f = d / s;
                for a in 0..3 {
                    out[idx[a]] = qx[a] - f * kx[a];
                }
            }
        });
        let v = Tensor::from_parts(qv.shape().to_vec(), out);
        Ok(self.push(Op::VnClip(q, k), v))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for id in (0..=loss.0).rev() {
            let Some(up) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let mut contributions = self.local_backward(node, &up)?;
            if node.op.primitive().is_some() && node.op.primitive() == self.fault {
                for (_, g) in contributions.iter_mut() {
                    *g = g.scale(0.5);
                }
            }
            for (input, g) in contributions {
                accumulate(&mut grads[input.0], g);
            }
            grads[id] = Some(up);
        }
        grads.resize(self.nodes.len(), None);
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn local_backward(&self, node: &Node, up: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| self.value(v);
        Ok(match &node.op {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul(a, b) => {
                let ga = up.matmul(&val(*b).transpose()?)?;
                let gb = val(*a).transpose()?.matmul(up)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Add(a, b) => vec![(*a, up.clone()), (*b, up.clone())],
            Op::Sub(a, b) => vec![(*a, up.clone()), (*b, up.scale(-1.0))],
            Op::Scale(a, f) => vec![(*a, up.scale(*f))],
            Op::AddRow(a, row) => {
                let c = up.cols();
                let mut sums = vec![0.0; c];
                for r in 0..up.rows() {
                    for (s, &u) in sums.iter_mut().zip(&up.data()[r * c..(r + 1) * c]) {
                        *s += u;
                    }
                }
                vec![
                    (*a, up.clone()),
                    (*row, Tensor::from_parts(vec![1, c], sums)),
                ]
            }
            Op::Relu(a) => {
                let x = val(*a);
                let data = x
                    .data()
                    .iter()
                    .zip(up.data())
                    .map(|(&xv, &u)| if xv > 0.0 { u } else { 0.0 })
                    .collect();
                vec![(*a, Tensor::from_parts(x.shape().to_vec(), data))]
            }
            Op::RowSoftmax(a) => {
                let y = &node.value;
                let c = y.cols();
                let mut data = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let ys = &y.data()[r * c..(r + 1) * c];
                    let us = &up.data()[r * c..(r + 1) * c];
                    let inner: f64 = ys.iter().zip(us).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        data[r * c + j] = ys[j] * (us[j] - inner);
                    }
                }
                vec![(*a, Tensor::from_parts(y.shape().to_vec(), data))]
            }
            Op::CrossEntropy { logits, labels } => {
                let mut g = val(*logits).row_softmax()?;
                let c = g.cols();
                let factor = up.item() / labels.len() as f64;
                let data = g.data_mut();
                for (r, &label) in labels.iter().enumerate() {
                    data[r * c + label] -= 1.0;
                }
                for v in data.iter_mut() {
                    *v *= factor;
                }
                vec![(*logits, g)]
            }
            Op::FrobeniusSq(a) => vec![(*a, val(*a).scale(2.0 * up.item()))],
            Op::Transpose(a) => vec![(*a, up.transpose()?)],
            Op::ConcatCols(parts) => {
                let rows = up.rows();
                let total = up.cols();
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let c = val(p).cols();
                    let mut data = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        data.extend_from_slice(
                            &up.data()[r * total + offset..r * total + offset + c],
                        );
                    }
                    out.push((p, Tensor::from_parts(vec![rows, c], data)));
                    offset += c;
                }
                out
            }
            Op::Reshape(a) => vec![(*a, up.reshape(val(*a).shape())?)],
            Op::VnClip(q, k) => {
                let (qv, kv) = (val(*q), val(*k));
                let mut gq = up.data().to_vec();
                let mut gk = vec![0.0; up.len()];
                for_each_vector(qv.rows(), qv.cols() / 3, |idx| {
                    let qx = idx.map(|i| qv.data()[i]);
                    let kx = idx.map(|i| kv.data()[i]);
                    let g = idx.map(|i| up.data()[i]);
                    let d = dot(qx, kx);
                    let s = dot(kx, kx);
                    if d < 0.0 && s.sqrt() >= VN_DEGENERATE_NORM {
                        // out = q - (d/s) k
                        let gk_dot = dot(g, kx);
                        for a in 0..3 {
                            gq[idx[a]] = g[a] - gk_dot / s * kx[a];
                            gk[idx[a]] = -(gk_dot * qx[a] / s + d * g[a] / s
                                - 2.0 * d * gk_dot * kx[a] / (s * s));
                        }
                    }
                });
                let shape = qv.shape().to_vec();
                vec![
                    (*q, Tensor::from_parts(shape.clone(), gq)),
                    (*k, Tensor::from_parts(shape, gk)),
                ]
            }
        })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        None => *slot = Some(g),
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Visits the flat indices of every 3-vector in a coordinate-major `[n, 3b]` block.
fn for_each_vector(rows: usize, batch: usize, mut f: impl FnMut([usize; 3])) {
    let cols = 3 * batch;
    for c in 0..rows {
        for s in 0..batch {
            let base = c * cols + s;
            f([base, base + batch, base + 2 * batch]);
        }
    }
}
