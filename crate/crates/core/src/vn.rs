//! Vector-neuron stack: lift `n` scalars to `n` 3-vectors, then apply channel
//! mixing layers and direction-predicting ReLUs.
//!
//! Batches are carried as coordinate-major `[n, 3b]` blocks (see
//! [`Graph::vn_clip`]); a single [`VNFeature`] is the `b = 1` case, an `n × 3`
//! matrix with one vector per row.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Archive, Graph, Tensor, Var};

/// `n × 3` matrix of vector neurons.
#[derive(Clone, Debug, PartialEq)]
pub struct VNFeature {
    v: Tensor,
}

impl VNFeature {
    pub fn new(v: Tensor) -> Result<Self> {
        if v.shape().len() != 2 || v.cols() != 3 {
            return Err(Error::shape("vn_feature", v.shape(), &[v.shape()[0], 3]));
        }
        if !v.is_finite() {
            return Err(Error::NonFinite("vn_feature"));
        }
        Ok(Self { v })
    }

    pub fn channels(&self) -> usize {
        self.v.rows()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.v
    }

    pub fn into_tensor(self) -> Tensor {
        self.v
    }

    /// Right action `v · Aᵀ`, i.e. `A` applied to every vector.
    pub fn act(&self, a: &[[f64; 3]; 3]) -> VNFeature {
        let at = Tensor::matrix(3, 3, (0..9).map(|k| a[k % 3][k / 3]).collect()).unwrap();
        VNFeature {
            v: self.v.matmul(&at).expect("n×3 · 3×3"),
        }
    }
}

/// Three `n × n` projection heads producing the x, y and z columns.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftHead {
    pub w_x: Tensor,
    pub w_y: Tensor,
    pub w_z: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VNLinear {
    /// `n_out × n_in`, acting on channels.
    pub w: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VNReLU {
    pub w_q: Tensor,
    pub w_k: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub enum VnLayer {
    Linear(VNLinear),
    Relu(VNReLU),
}

impl VnLayer {
    fn out_dim(&self) -> usize {
        match self {
            VnLayer::Linear(l) => l.w.rows(),
            VnLayer::Relu(r) => r.w_q.rows(),
        }
    }

    fn in_dim(&self) -> usize {
        match self {
            VnLayer::Linear(l) => l.w.cols(),
            VnLayer::Relu(r) => r.w_q.cols(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VnStack {
    pub lift: LiftHead,
    pub layers: Vec<VnLayer>,
}

fn square(t: &Tensor) -> Option<usize> {
    (t.shape().len() == 2 && t.rows() == t.cols()).then(|| t.rows())
}

impl LiftHead {
    pub fn new(w_x: Tensor, w_y: Tensor, w_z: Tensor) -> Result<Self> {
        let n = square(&w_x)
            .ok_or_else(|| Error::shape("lift_head", w_x.shape(), &[w_x.shape()[0]; 2]))?;
        for w in [&w_y, &w_z] {
            if w.shape() != [n, n] {
                return Err(Error::shape("lift_head", w_x.shape(), w.shape()));
            }
        }
        Ok(Self { w_x, w_y, w_z })
    }

    pub fn dim(&self) -> usize {
        self.w_x.rows()
    }
}

impl VNReLU {
    pub fn new(w_q: Tensor, w_k: Tensor) -> Result<Self> {
        if w_q.shape() != w_k.shape() || w_q.shape().len() != 2 {
            return Err(Error::shape("vn_relu", w_q.shape(), w_k.shape()));
        }
        Ok(Self { w_q, w_k })
    }
}

/// Entries drawn from `Normal(0, 1/fan_in)`.
fn init_weight(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let normal = Normal::new(0.0, (1.0 / cols as f64).sqrt()).expect("positive std");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

impl VnStack {
    /// `lift → VNLinear → VNReLU → VNLinear`, all `n → n`; with `vn = false`
    /// only the lift heads.
    pub fn init(rng: &mut impl Rng, n: usize, vn: bool) -> Result<Self> {
        if n == 0 {
            return Err(Error::BadConfig(
                "representation dimension must be positive".into(),
            ));
        }
        let lift = LiftHead {
            w_x: init_weight(rng, n, n),
            w_y: init_weight(rng, n, n),
            w_z: init_weight(rng, n, n),
        };
        let layers = if vn {
            vec![
                VnLayer::Linear(VNLinear {
                    w: init_weight(rng, n, n),
                }),
                VnLayer::Relu(VNReLU {
                    w_q: init_weight(rng, n, n),
                    w_k: init_weight(rng, n, n),
                }),
                VnLayer::Linear(VNLinear {
                    w: init_weight(rng, n, n),
                }),
            ]
        } else {
            vec![]
        };
        Self::new(lift, layers)
    }

    pub fn new(lift: LiftHead, layers: Vec<VnLayer>) -> Result<Self> {
        let mut dim = lift.dim();
        for layer in &layers {
            if layer.in_dim() != dim {
                return Err(Error::shape("vn_stack", &[dim], &[layer.in_dim()]));
            }
            dim = layer.out_dim();
        }
        Ok(Self { lift, layers })
    }

    pub fn input_dim(&self) -> usize {
        self.lift.dim()
    }

    pub fn output_channels(&self) -> usize {
        self.layers.last().map_or(self.lift.dim(), VnLayer::out_dim)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("vn/lift/x".to_string(), &self.lift.w_x),
            ("vn/lift/y".to_string(), &self.lift.w_y),
            ("vn/lift/z".to_string(), &self.lift.w_z),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                VnLayer::Linear(l) => out.push((format!("vn/{i}/linear"), &l.w)),
                VnLayer::Relu(r) => {
                    out.push((format!("vn/{i}/relu/q"), &r.w_q));
                    out.push((format!("vn/{i}/relu/k"), &r.w_k));
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.lift.w_x, &mut self.lift.w_y, &mut self.lift.w_z];
        for layer in self.layers.iter_mut() {
            match layer {
                VnLayer::Linear(l) => out.push(&mut l.w),
                VnLayer::Relu(r) => {
                    out.push(&mut r.w_q);
                    out.push(&mut r.w_k);
                }
            }
        }
        out
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let lift = LiftHead::new(
            a.require("vn/lift/x")?.clone(),
            a.require("vn/lift/y")?.clone(),
            a.require("vn/lift/z")?.clone(),
        )?;
        let mut layers = Vec::new();
        for i in 0.. {
            if let Some(w) = a.get(&format!("vn/{i}/linear")) {
                layers.push(VnLayer::Linear(VNLinear { w: w.clone() }));
            } else if let Some(q) = a.get(&format!("vn/{i}/relu/q")) {
                let k = a.require(&format!("vn/{i}/relu/k"))?;
                layers.push(VnLayer::Relu(VNReLU::new(q.clone(), k.clone())?));
            } else {
                break;
            }
        }
        Self::new(lift, layers)
    }

    /// Places the weights on `g`, as leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundVn {
        let params = self
            .named_params()
            .into_iter()
            .map(|(_, t)| {
                if trainable {
                    g.leaf(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect::<Vec<_>>();
        let kinds = self
            .layers
            .iter()
            .map(|l| matches!(l, VnLayer::Relu(_)))
            .collect();
        BoundVn {
            params,
            relu: kinds,
        }
    }
}

/// Graph handles for a [`VnStack`], in [`VnStack::named_params`] order.
#[derive(Clone, Debug)]
pub struct BoundVn {
    pub params: Vec<Var>,
    pub(crate) relu: Vec<bool>,
}

impl BoundVn {
    /// `z` is `[b, n]` (one row per sample); returns the `[n, 3b]` block.
    pub fn forward(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let mut v = record_lift(g, z, [self.params[0], self.params[1], self.params[2]])?;
        let mut next = 3;
        for &is_relu in &self.relu {
            if is_relu {
                v = record_vn_relu(g, self.params[next], self.params[next + 1], v)?;
                next += 2;
            } else {
                v = record_vn_linear(g, self.params[next], v)?;
                next += 1;
            }
        }
        Ok(v)
    }
}

pub fn record_lift(g: &mut Graph, z: Var, heads: [Var; 3]) -> Result<Var> {
    let zt = g.transpose(z)?;
    let cols = heads
        .iter()
        .map(|&w| g.matmul(w, zt))
        .collect::<Result<Vec<_>>>()?;
    g.concat_cols(&cols)
}

pub fn record_vn_linear(g: &mut Graph, w: Var, v: Var) -> Result<Var> {
    g.matmul(w, v)
}

pub fn record_vn_relu(g: &mut Graph, w_q: Var, w_k: Var, v: Var) -> Result<Var> {
    let q = g.matmul(w_q, v)?;
    let k = g.matmul(w_k, v)?;
    g.vn_clip(q, k)
}

fn row_input(z: &[f64]) -> Tensor {
    Tensor::from_parts(vec![1, z.len()], z.to_vec())
}

/// Column `k` of the output is `w_k · z`.
pub fn lift(z: &[f64], head: &LiftHead) -> Result<VNFeature> {
    if z.len() != head.dim() {
        return Err(Error::shape("lift", &[z.len()], &[head.dim()]));
    }
    let mut g = Graph::new();
    let zv = g.constant(row_input(z));
    let heads = [&head.w_x, &head.w_y, &head.w_z].map(|w| g.constant(w.clone()));
    let out = record_lift(&mut g, zv, heads)?;
    VNFeature::new(g.value(out).clone())
}

pub fn vn_linear(layer: &VNLinear, v: &VNFeature) -> Result<VNFeature> {
    VNFeature::new(layer.w.matmul(v.tensor())?)
}

pub fn vn_relu(layer: &VNReLU, v: &VNFeature) -> Result<VNFeature> {
    let mut g = Graph::new();
    let vv = g.constant(v.tensor().clone());
    let q = g.constant(layer.w_q.clone());
    let k = g.constant(layer.w_k.clone());
    let out = record_vn_relu(&mut g, q, k, vv)?;
    VNFeature::new(g.value(out).clone())
}

pub fn vn_forward(stack: &VnStack, z: &[f64]) -> Result<VNFeature> {
    if z.len() != stack.input_dim() {
        return Err(Error::shape("vn_forward", &[z.len()], &[stack.input_dim()]));
    }
    let mut g = Graph::new();
    let bound = stack.bind(&mut g, false);
    let zv = g.constant(row_input(z));
    let out = bound.forward(&mut g, zv)?;
    VNFeature::new(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_head(n: usize) -> LiftHead {
        LiftHead::new(
            Tensor::identity(n),
            Tensor::identity(n),
            Tensor::identity(n),
        )
        .unwrap()
    }

    #[test]
    fn lift_of_zero_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stack = VnStack::init(&mut rng, 4, true).unwrap();
        let v = lift(&[0.0; 4], &stack.lift).unwrap();
        assert!(v.tensor().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identity_heads_repeat_each_scalar() {
        let v = lift(&[1.0, 2.0], &identity_head(2)).unwrap();
        assert_eq!(v.tensor().data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn lift_dimension_checked() {
        assert!(matches!(
            lift(&[1.0], &identity_head(2)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn identity_linear_is_noop() {
        let v = lift(&[0.5, -1.5, 2.0], &identity_head(3)).unwrap();
        let out = vn_linear(
            &VNLinear {
                w: Tensor::identity(3),
            },
            &v,
        )
        .unwrap();
        assert_eq!(out, v);
        assert!(vn_linear(
            &VNLinear {
                w: Tensor::identity(2)
            },
            &v
        )
        .is_err());
    }

    #[test]
    fn relu_passes_positive_alignment() {
        // w_k = w_q ⇒ ⟨q, k⟩ = ‖q‖² ≥ 0
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = init_weight(&mut rng, 3, 3);
        let layer = VNReLU::new(w.clone(), w.clone()).unwrap();
        let v = VNFeature::new(init_weight(&mut rng, 3, 3)).unwrap();
        assert_eq!(
            vn_relu(&layer, &v).unwrap().tensor(),
            &w.matmul(v.tensor()).unwrap()
        );
    }

    #[test]
    fn relu_removes_antiparallel_q() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = init_weight(&mut rng, 3, 3);
        let layer = VNReLU::new(w.clone(), w.scale(-2.0)).unwrap();
        let v = VNFeature::new(init_weight(&mut rng, 3, 3)).unwrap();
        let out = vn_relu(&layer, &v).unwrap();
        assert!(out.tensor().data().iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn empty_stack_is_lift() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stack = VnStack::init(&mut rng, 4, false).unwrap();
        let z = [0.3, -0.1, 0.8, 1.2];
        assert_eq!(
            vn_forward(&stack, &z).unwrap(),
            lift(&z, &stack.lift).unwrap()
        );
    }

    #[test]
    fn archive_names_and_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let stack = VnStack::init(&mut rng, 5, true).unwrap();
        let names: Vec<String> = stack.named_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(
            names,
            [
                "vn/lift/x",
                "vn/lift/y",
                "vn/lift/z",
                "vn/0/linear",
                "vn/1/relu/q",
                "vn/1/relu/k",
                "vn/2/linear"
            ]
        );
        let mut a = Archive::new();
        for (n, t) in stack.named_params() {
            a.insert(n, t.clone());
        }
        assert_eq!(VnStack::from_archive(&a).unwrap(), stack);
    }

    #[test]
    fn init_variance_matches_fan_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = init_weight(&mut rng, 400, 25);
        let var = w.data().iter().map(|x| x * x).sum::<f64>() / w.len() as f64;
        assert!((var - 1.0 / 25.0).abs() < 0.2 / 25.0, "{var}");
    }
}
