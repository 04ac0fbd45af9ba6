//! Small multilayer perceptrons standing in for the frame encoder `f` and the
//! task decoder `g`, plus the bundle of all learnable parts.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::tensor::{Archive, Graph, Tensor, Var};
use crate::vn::{BoundVn, VnLayer, VnStack};

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `[fan_in, fan_out]`
    pub w: Tensor,
    /// `[1, fan_out]`
    pub b: Tensor,
}

impl Dense {
    pub fn new(w: Tensor, b: Tensor) -> Result<Self> {
        if w.shape().len() != 2 || b.shape() != [1, w.cols()] {
            return Err(Error::shape("dense", w.shape(), b.shape()));
        }
        Ok(Self { w, b })
    }

    /// He initialization: weights `Normal(0, 2/fan_in)`, zero bias.
    fn init(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Self {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let w = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
        Self {
            w: Tensor::from_parts(vec![fan_in, fan_out], w),
            b: Tensor::zeros(&[1, fan_out]),
        }
    }

    fn fan_in(&self) -> usize {
        self.w.rows()
    }

    fn fan_out(&self) -> usize {
        self.w.cols()
    }
}

/// Affine layers with ReLU between them and none after the last.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

impl Mlp {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::BadConfig("an MLP needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::shape("mlp", pair[0].w.shape(), pair[1].w.shape()));
            }
        }
        Ok(Self { layers })
    }

    fn init(rng: &mut impl Rng, widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::BadConfig(format!("bad layer widths {widths:?}")));
        }
        Self::new(
            widths
                .windows(2)
                .map(|w| Dense::init(rng, w[0], w[1]))
                .collect(),
        )
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").fan_out()
    }

    fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("{prefix}/{i}/w"), &l.w),
                    (format!("{prefix}/{i}/b"), &l.b),
                ]
            })
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.w, &mut l.b])
            .collect()
    }

    fn from_archive(a: &Archive, prefix: &str) -> Result<Self> {
        let mut layers = Vec::new();
        while let Some(w) = a.get(&format!("{prefix}/{}/w", layers.len())) {
            let b = a.require(&format!("{prefix}/{}/b", layers.len()))?;
            layers.push(Dense::new(w.clone(), b.clone())?);
        }
        Self::new(layers)
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundMlp {
        let mut place = |t: &Tensor| {
            if trainable {
                g.leaf(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        BoundMlp {
            layers: self
                .layers
                .iter()
                .map(|l| (place(&l.w), place(&l.b)))
                .collect(),
        }
    }

    /// Row-batched forward on plain values.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = bound.forward(&mut g, xv)?;
        Ok(g.value(out).clone())
    }
}

#[derive(Clone, Debug)]
pub struct BoundMlp {
    pub layers: Vec<(Var, Var)>,
}

impl BoundMlp {
    /// `x` is `[batch, fan_in]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let lin = g.matmul(h, w)?;
            h = g.add_row(lin, b)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub encoder_hidden: Vec<usize>,
    /// Representation dimension `n`.
    pub n_dim: usize,
    pub decoder_hidden: [usize; 3],
    pub classes: usize,
    /// Include the VN layers after the lift heads.
    pub vn: bool,
}

impl ModelConfig {
    pub fn new(input_dim: usize, classes: usize) -> Self {
        Self {
            input_dim,
            encoder_hidden: vec![128, 64],
            n_dim: 16,
            decoder_hidden: [64, 64, 32],
            classes,
            vn: true,
        }
    }
}

/// Frame encoder `f`: flattened pixels → `n` features.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder(pub Mlp);

/// Decoder `g`: three hidden ReLU layers then class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder(pub Mlp);

impl Encoder {
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut widths = vec![config.input_dim];
        widths.extend_from_slice(&config.encoder_hidden);
        widths.push(config.n_dim);
        Mlp::init(rng, &widths).map(Encoder)
    }

    pub fn output_dim(&self) -> usize {
        self.0.output_dim()
    }
}

impl Decoder {
    pub fn new(mlp: Mlp) -> Result<Self> {
        if mlp.layers().len() != 4 {
            return Err(Error::BadConfig(format!(
                "decoder needs 3 hidden layers and an output layer, got {} layers",
                mlp.layers().len()
            )));
        }
        Ok(Decoder(mlp))
    }

    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut widths = vec![config.n_dim];
        widths.extend_from_slice(&config.decoder_hidden);
        widths.push(config.classes);
        Self::new(Mlp::init(rng, &widths)?)
    }
}

/// Flattened pixels through the encoder.
pub fn encode(e: &Encoder, img: &Image) -> Result<Vec<f64>> {
    if img.pixels().len() != e.0.input_dim() {
        return Err(Error::shape(
            "encode",
            &[img.pixels().len()],
            &[e.0.input_dim()],
        ));
    }
    let x = Tensor::from_parts(vec![1, img.pixels().len()], img.pixels().to_vec());
    Ok(e.0.forward(&x)?.into_data())
}

pub fn decode(d: &Decoder, z: &[f64]) -> Result<Vec<f64>> {
    if z.len() != d.0.input_dim() {
        return Err(Error::shape("decode", &[z.len()], &[d.0.input_dim()]));
    }
    let x = Tensor::from_parts(vec![1, z.len()], z.to_vec());
    Ok(d.0.forward(&x)?.into_data())
}

/// Encoder, VN stack and decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: Encoder,
    pub vn: VnStack,
    pub decoder: Decoder,
}

/// Which parts of a [`Model`] receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub encoder: bool,
    pub vn: bool,
    pub decoder: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable {
        encoder: true,
        vn: true,
        decoder: true,
    };
}

#[derive(Clone, Debug)]
pub struct BoundModel {
    pub encoder: BoundMlp,
    pub vn: BoundVn,
    pub decoder: BoundMlp,
}

impl BoundModel {
    /// Every parameter handle in [`Model::named_params`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = self.encoder.vars();
        out.extend_from_slice(&self.vn.params);
        out.extend(self.decoder.vars());
        out
    }
}

impl Model {
    /// Deterministic in `rng`: encoder, then VN, then decoder.
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.classes == 0 || config.input_dim == 0 || config.n_dim == 0 {
            return Err(Error::BadConfig(format!(
                "dimensions must be positive: {config:?}"
            )));
        }
        let encoder = Encoder::init(config, rng)?;
        let vn = VnStack::init(rng, config.n_dim, config.vn)?;
        let decoder = Decoder::init(config, rng)?;
        Ok(Self {
            encoder,
            vn,
            decoder,
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.encoder.0.named_params("enc");
        out.extend(self.vn.named_params());
        out.extend(self.decoder.0.named_params("dec"));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.0.params_mut();
        out.extend(self.vn.params_mut());
        out.extend(self.decoder.0.params_mut());
        out
    }

    /// Parameter count per part, in `named_params` order.
    pub fn part_sizes(&self) -> (usize, usize, usize) {
        (
            self.encoder.0.layers().len() * 2,
            self.vn.named_params().len(),
            self.decoder.0.layers().len() * 2,
        )
    }

    pub fn trainable_mask(&self, t: Trainable) -> Vec<bool> {
        let (e, v, d) = self.part_sizes();
        std::iter::repeat_n(t.encoder, e)
            .chain(std::iter::repeat_n(t.vn, v))
            .chain(std::iter::repeat_n(t.decoder, d))
            .collect()
    }

    pub fn to_archive(&self, prefix: &str) -> Archive {
        let mut a = Archive::new();
        self.write_archive(prefix, &mut a);
        a
    }

    pub fn write_archive(&self, prefix: &str, a: &mut Archive) {
        for (name, t) in self.named_params() {
            a.insert(format!("{prefix}{name}"), t.clone());
        }
    }

    /// Reads `enc/…`, `vn/…`, `dec/…` entries (optionally under `prefix`).
    pub fn from_archive(a: &Archive, prefix: &str) -> Result<Self> {
        let scoped;
        let source = if prefix.is_empty() {
            a
        } else {
            let mut s = Archive::new();
            for (name, t) in a.iter() {
                if let Some(rest) = name.strip_prefix(prefix) {
                    s.insert(rest, t.clone());
                }
            }
            scoped = s;
            &scoped
        };
        let encoder = Encoder(Mlp::from_archive(source, "enc")?);
        let vn = VnStack::from_archive(source)?;
        let decoder = Decoder::new(Mlp::from_archive(source, "dec")?)?;
        if encoder.output_dim() != vn.input_dim() || decoder.0.input_dim() != encoder.output_dim() {
            return Err(Error::CorruptTensor(format!(
                "inconsistent dims: encoder {} vn {} decoder {}",
                encoder.output_dim(),
                vn.input_dim(),
                decoder.0.input_dim()
            )));
        }
        Ok(Self {
            encoder,
            vn,
            decoder,
        })
    }

    pub fn bind(&self, g: &mut Graph, t: Trainable) -> BoundModel {
        BoundModel {
            encoder: self.encoder.0.bind(g, t.encoder),
            vn: self.vn.bind(g, t.vn),
            decoder: self.decoder.0.bind(g, t.decoder),
        }
    }

    /// Reuses existing graph nodes (in [`Model::named_params`] order) as this
    /// model's parameters.
    pub fn rebind(&self, vars: &[Var]) -> Result<BoundModel> {
        let (e, v, d) = self.part_sizes();
        if vars.len() != e + v + d {
            return Err(Error::shape("rebind", &[e + v + d], &[vars.len()]));
        }
        let pairs = |s: &[Var]| s.chunks(2).map(|c| (c[0], c[1])).collect();
        Ok(BoundModel {
            encoder: BoundMlp {
                layers: pairs(&vars[..e]),
            },
            vn: BoundVn {
                params: vars[e..e + v].to_vec(),
                relu: self
                    .vn
                    .layers
                    .iter()
                    .map(|l| matches!(l, VnLayer::Relu(_)))
                    .collect(),
            },
            decoder: BoundMlp {
                layers: pairs(&vars[e + v..]),
            },
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.0.input_dim()
    }

    pub fn classes(&self) -> usize {
        self.decoder.0.output_dim()
    }

    pub fn n_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn has_vn_layers(&self) -> bool {
        !self.vn.layers.is_empty()
    }
}
