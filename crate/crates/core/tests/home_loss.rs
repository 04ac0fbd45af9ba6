#![allow(clippy::needless_range_loop)] // index loops mirror the formulas

use home_equiv_core::geometry::{random_homography, Homography, HomographyBounds};
use home_equiv_core::home_loss::{home_loss, record_home_loss, NeighborGraph, ViewRepresentations};
use home_equiv_core::tensor::{Graph, Tensor};
use home_equiv_core::vn::VNFeature;
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

fn random_chain(rng: &mut impl Rng, views: usize) -> (Vec<Homography>, NeighborGraph) {
    let bounds = HomographyBounds::default();
    let homs: Vec<Homography> = (1..views)
        .map(|_| random_homography(rng, &bounds, 16, 16).unwrap().0)
        .collect();
    let graph = NeighborGraph::chain(&homs).unwrap();
    (homs, graph)
}

/// Σ_t Σ_i Σ_{j∈N(i)} Σ_r Σ_c (V_i[r][c] − Σ_k H_ji[c][k] V_j[r][k])².
fn oracle(reps: &[Vec<Tensor>], graph: &NeighborGraph) -> f64 {
    let mut total = 0.0;
    for views in reps {
        for i in 0..views.len() {
            for j in 0..views.len() {
                if !graph.neighbors(i).contains(&j) {
                    continue;
                }
                let h = graph.h(j, i).unwrap().matrix();
                for r in 0..views[i].rows() {
                    for c in 0..3 {
                        let mut moved = 0.0;
                        for k in 0..3 {
                            moved += h[c][k] * views[j].at(r, k);
                        }
                        let d = views[i].at(r, c) - moved;
                        total += d * d;
                    }
                }
            }
        }
    }
    total
}

fn features(reps: &[Vec<Tensor>]) -> ViewRepresentations {
    ViewRepresentations::new(
        reps.iter()
            .map(|v| {
                v.iter()
                    .map(|t| VNFeature::new(t.clone()).unwrap())
                    .collect()
            })
            .collect(),
    )
}

#[test]
fn matches_quadruple_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let views = rng.random_range(2..=4);
        let n = rng.random_range(1..=6);
        let t = rng.random_range(1..=3);
        let (_, graph) = random_chain(&mut rng, views);
        let reps: Vec<Vec<Tensor>> = (0..t)
            .map(|_| (0..views).map(|_| gaussian(&mut rng, n, 3)).collect())
            .collect();
        let got = home_loss(&features(&reps), &graph).unwrap();
        let want = oracle(&reps, &graph);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
}

/// `VN_{k+1} = VN_k · H_{k,k+1}ᵀ` along the chain 0–1–2.
fn fixed_point(rng: &mut impl Rng, graph: &NeighborGraph, n: usize) -> Vec<Tensor> {
    let moved = |v: &Tensor, h: &Homography| {
        VNFeature::new(v.clone())
            .unwrap()
            .act(h.matrix())
            .into_tensor()
    };
    let v0 = gaussian(rng, n, 3);
    let v1 = moved(&v0, graph.h(0, 1).unwrap());
    let v2 = moved(&v1, graph.h(1, 2).unwrap());
    vec![v0, v1, v2]
}

#[test]
fn constructed_fixed_point_has_zero_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let (_, graph) = random_chain(&mut rng, 3);
        assert_eq!(graph.neighbors(1).len(), 2);
        let reps = vec![fixed_point(&mut rng, &graph, 6)];
        let loss = home_loss(&features(&reps), &graph).unwrap();
        assert!(loss < 1e-18, "{loss}");
    }
}

#[test]
fn gradient_descent_reaches_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (_, graph) = random_chain(&mut rng, 3);
    let mut vars: Vec<Tensor> = (0..3).map(|_| gaussian(&mut rng, 4, 3)).collect();
    // Step below 1 / (largest Hessian eigenvalue bound).
    let lipschitz: f64 = graph
        .ordered_pairs()
        .iter()
        .map(|&(j, i)| {
            let m = graph.h(j, i).unwrap().matrix();
            2.0 * (1.0 + m.iter().flatten().map(|x| x * x).sum::<f64>())
        })
        .sum();
    let lr = 1.0 / lipschitz;
    let mut loss = f64::INFINITY;
    let mut steps = 0;
    while steps < 5000 {
        let mut g = Graph::new();
        let v: Vec<_> = vars.iter().map(|t| g.leaf(t.clone())).collect();
        let l = record_home_loss(&mut g, std::slice::from_ref(&v), &graph).unwrap();
        loss = g.value(l).item();
        if loss < 1e-8 {
            break;
        }
        let grads = g.backward(l).unwrap();
        for (t, var) in vars.iter_mut().zip(&v) {
            *t = t.sub(&grads.wrt(*var).scale(lr)).unwrap();
        }
        steps += 1;
    }
    eprintln!("loss {loss:.3e} after {steps} steps");
    assert!(loss < 1e-8, "loss {loss} after {steps} steps");
}
