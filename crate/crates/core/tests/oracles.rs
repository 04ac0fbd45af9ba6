use home_equiv_core::data::Image;
use home_equiv_core::models::{decode, encode, Decoder, Encoder, Model, ModelConfig};
use home_equiv_core::tensor::{finite_diff_check, finite_diff_check_many, Tensor};
use home_equiv_core::vn::{lift, vn_forward, vn_linear, vn_relu, VNFeature, VnLayer, VnStack};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols)
            .map(|_| StandardNormal.sample(rng))
            .collect(),
    )
    .unwrap()
}

fn matmul_oracle(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; a.rows() * b.cols()];
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a.at(i, k) * b.at(k, j);
            }
            out[i * b.cols() + j] = s;
        }
    }
    out
}

/// Affine + ReLU per layer, none after the last; one scalar at a time.
fn mlp_oracle(layers: &[(Tensor, Tensor)], x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (l, (w, b)) in layers.iter().enumerate() {
        let mut next = vec![0.0; w.cols()];
        for (j, out) in next.iter_mut().enumerate() {
            let mut s = b.at(0, j);
            for (i, hi) in h.iter().enumerate() {
                s += hi * w.at(i, j);
            }
            *out = if l + 1 < layers.len() { s.max(0.0) } else { s };
        }
        h = next;
    }
    h
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let (m, k, n) = (
            rng.random_range(1..7),
            rng.random_range(1..7),
            rng.random_range(1..7),
        );
        let a = gaussian(&mut rng, m, k);
        let b = gaussian(&mut rng, k, n);
        let got = a.matmul(&b).unwrap();
        for (x, y) in got.data().iter().zip(matmul_oracle(&a, &b)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

fn random_image(rng: &mut impl Rng, w: usize, h: usize) -> Image {
    Image::new(w, h, (0..w * h).map(|_| rng.random::<f64>()).collect()).unwrap()
}

#[test]
fn encoder_and_decoder_match_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let config = ModelConfig::new(256, 4);
    let e = Encoder::init(&config, &mut rng).unwrap();
    let d = Decoder::init(&config, &mut rng).unwrap();
    let img = random_image(&mut rng, 16, 16);
    let pairs = |layers: &[home_equiv_core::models::Dense]| -> Vec<(Tensor, Tensor)> {
        layers.iter().map(|l| (l.w.clone(), l.b.clone())).collect()
    };
    let z = encode(&e, &img).unwrap();
    let want = mlp_oracle(&pairs(e.0.layers()), img.pixels());
    assert_eq!(z.len(), 16);
    for (a, b) in z.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
    let logits = decode(&d, &z).unwrap();
    let want = mlp_oracle(&pairs(d.0.layers()), &z);
    assert_eq!(logits.len(), 4);
    for (a, b) in logits.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn encode_rejects_wrong_image_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let e = Encoder::init(&ModelConfig::new(256, 4), &mut rng).unwrap();
    assert!(encode(&e, &random_image(&mut rng, 8, 8)).is_err());
}

#[test]
fn vn_forward_is_step_by_step_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let stack = VnStack::init(&mut rng, 6, true).unwrap();
    let z: Vec<f64> = (0..6).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut v: VNFeature = lift(&z, &stack.lift).unwrap();
    for layer in &stack.layers {
        v = match layer {
            VnLayer::Linear(l) => vn_linear(l, &v).unwrap(),
            VnLayer::Relu(r) => vn_relu(r, &v).unwrap(),
        };
    }
    let got = vn_forward(&stack, &z).unwrap();
    assert!(got.tensor().max_abs_diff(v.tensor()) < 1e-14);
}

#[test]
fn vn_relu_matches_projection_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let stack = VnStack::init(&mut rng, 5, true).unwrap();
    let VnLayer::Relu(relu) = &stack.layers[1] else {
        panic!("default stack has relu second")
    };
    let v = VNFeature::new(gaussian(&mut rng, 5, 3)).unwrap();
    let q = relu.w_q.matmul(v.tensor()).unwrap();
    let k = relu.w_k.matmul(v.tensor()).unwrap();
    let got = vn_relu(relu, &v).unwrap();
    for r in 0..5 {
        let d: f64 = (0..3).map(|c| q.at(r, c) * k.at(r, c)).sum();
        let s: f64 = (0..3).map(|c| k.at(r, c) * k.at(r, c)).sum();
        for c in 0..3 {
            let want = if d < 0.0 {
                q.at(r, c) - d / s * k.at(r, c)
            } else {
                q.at(r, c)
            };
            assert!((got.tensor().at(r, c) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn vn_stack_gradient() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stack = VnStack::init(&mut rng, 4, true).unwrap();
        let z = gaussian(&mut rng, 2, 4);
        let err = finite_diff_check(
            |g, x| {
                let bound = stack.bind(g, false);
                let v = bound.forward(g, x)?;
                Ok(g.frobenius_sq(v))
            },
            &z,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "seed {seed}: {err}");
    }
}

#[test]
fn end_to_end_cross_entropy_gradient() {
    let config = ModelConfig {
        input_dim: 9,
        encoder_hidden: vec![7],
        n_dim: 5,
        decoder_hidden: [6, 5, 4],
        classes: 3,
        vn: true,
    };
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::init(&config, &mut rng).unwrap();
        let x = gaussian(&mut rng, 4, 9);
        let weights: Vec<Tensor> = model
            .named_params()
            .into_iter()
            .map(|(_, t)| t.clone())
            .collect();
        let report = finite_diff_check_many(
            |g, v| {
                let bound = model.rebind(v)?;
                let xv = g.constant(x.clone());
                let z = bound.encoder.forward(g, xv)?;
                let logits = bound.decoder.forward(g, z)?;
                g.cross_entropy_loss(logits, &[0, 1, 2, 1])
            },
            &weights,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "seed {seed}: {report:?}");
    }
}
