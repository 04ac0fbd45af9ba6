//! Fast invariant suite behind `home-equiv selfcheck`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::Image;
use crate::error::Result;
use crate::geometry::{random_homography, Homography, HomographyBounds, PointH};
use crate::home_loss::{home_loss, record_frobenius_loss, NeighborGraph, ViewRepresentations};
use crate::models::{Model, ModelConfig};
use crate::tensor::{finite_diff_check_with_fault, Graph, Primitive, Tensor, Var};
use crate::trainer::record_joint_loss;
use crate::vn::{vn_linear, vn_relu, VNFeature, VNLinear, VNReLU};

const GRAD_TOL: f64 = 1e-6;
const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!(
            "{} {} ({})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

fn gaussian(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| StandardNormal.sample(rng)).collect(),
    )
    .unwrap()
}

/// Gaussian entries pushed at least `gap` away from zero.
fn away_from_zero(rng: &mut impl Rng, shape: &[usize], gap: f64) -> Tensor {
    gaussian(rng, shape).map(|x| if x >= 0.0 { x + gap } else { x - gap })
}

/// Haar-ish random rotation: Gram–Schmidt of a Gaussian matrix, sign-fixed
/// to determinant +1.
pub fn random_rotation(rng: &mut impl Rng) -> [[f64; 3]; 3] {
    loop {
        let mut cols = [[0.0; 3]; 3];
        for c in cols.iter_mut() {
            for x in c.iter_mut() {
                *x = StandardNormal.sample(rng);
            }
        }
        let dot = |a: &[f64; 3], b: &[f64; 3]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut ok = true;
        for i in 0..3 {
            for j in 0..i {
                let p = dot(&cols[i], &cols[j]);
                let cj = cols[j];
                for k in 0..3 {
                    cols[i][k] -= p * cj[k];
                }
            }
            let n = dot(&cols[i], &cols[i]).sqrt();
            if n < 1e-6 {
                ok = false;
                break;
            }
            cols[i].iter_mut().for_each(|x| *x /= n);
        }
        if !ok {
            continue;
        }
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = cols[j][i];
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if det < 0.0 {
            for row in r.iter_mut() {
                row[2] = -row[2];
            }
        }
        return r;
    }
}

type Probe = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// Scalar-valued probe exercising `p` on small random inputs.
fn primitive_probe(p: Primitive, rng: &mut impl Rng) -> (Vec<Tensor>, Probe) {
    let m = |rng: &mut ChaCha8Rng, s: &[usize]| gaussian(rng, s);
    let mut r = ChaCha8Rng::seed_from_u64(rng.random());
    let rng = &mut r;
    match p {
        Primitive::MatMul => (
            vec![m(rng, &[3, 4]), m(rng, &[4, 2])],
            Box::new(|g, v| {
                let y = g.matmul(v[0], v[1])?;
                Ok(g.frobenius_sq(y))
            }),
        ),
        Primitive::Add => (
            vec![m(rng, &[3, 4]), m(rng, &[3, 4])],
            Box::new(|g, v| {
                let y = g.add(v[0], v[1])?;
                Ok(g.frobenius_sq(y))
            }),
        ),
        Primitive::Sub => (
            vec![m(rng, &[3, 4]), m(rng, &[3, 4])],
            Box::new(|g, v| {
                let y = g.sub(v[0], v[1])?;
                Ok(g.frobenius_sq(y))
            }),
        ),
        Primitive::Scale => (
            vec![m(rng, &[3, 4])],
            Box::new(|g, v| {
                let y = g.scale(v[0], -1.7);
                Ok(g.frobenius_sq(y))
            }),
        ),
        Primitive::AddRow => (
            vec![m(rng, &[3, 4]), m(rng, &[1, 4])],
            Box::new(|g, v| {
                let y = g.add_row(v[0], v[1])?;
                Ok(g.frobenius_sq(y))
            }),
        ),
        Primitive::Relu => (
            vec![away_from_zero(rng, &[3, 4], 0.1)],
            Box::new(|g, v| {
                let y = g.relu(v[0]);
                Ok(g.frobenius_sq(y))
            }),
        ),
        Primitive::RowSoftmax => (
            vec![m(rng, &[3, 4]), m(rng, &[3, 4])],
            Box::new(|g, v| {
                let s = g.row_softmax(v[0])?;
                let y = g.sub(s, v[1])?;
                Ok(g.frobenius_sq(y))
            }),
        ),
        Primitive::CrossEntropy => (
            vec![m(rng, &[4, 3])],
            Box::new(|g, v| g.cross_entropy_loss(v[0], &[0, 2, 1, 2])),
        ),
        Primitive::FrobeniusSq => (
            vec![m(rng, &[3, 4])],
            Box::new(|g, v| Ok(g.frobenius_sq(v[0]))),
        ),
        Primitive::Transpose => (
            vec![m(rng, &[3, 4]), m(rng, &[3, 2])],
            Box::new(|g, v| {
                let t = g.transpose(v[0])?;
                let y = g.matmul(t, v[1])?;
                Ok(g.frobenius_sq(y))
            }),
        ),
        Primitive::ConcatCols => (
            vec![m(rng, &[3, 2]), m(rng, &[3, 3]), m(rng, &[5, 2])],
            Box::new(|g, v| {
                let c = g.concat_cols(&[v[0], v[1]])?;
                let y = g.matmul(c, v[2])?;
                Ok(g.frobenius_sq(y))
            }),
        ),
        Primitive::Reshape => (
            vec![m(rng, &[3, 4]), m(rng, &[2, 3])],
            Box::new(|g, v| {
                let r = g.reshape(v[0], &[6, 2])?;
                let y = g.matmul(r, v[1])?;
                Ok(g.frobenius_sq(y))
            }),
        ),
        Primitive::VnClip => {
            // Keep ⟨q, k⟩ away from the switching surface.
            let (q, k) = loop {
                let q = m(rng, &[4, 3]);
                let k = m(rng, &[4, 3]);
                let clear = (0..4).all(|r| {
                    let d: f64 = (0..3).map(|c| q.at(r, c) * k.at(r, c)).sum();
                    d.abs() > 0.2
                });
                if clear {
                    break (q, k);
                }
            };
            let w = m(rng, &[4, 3]);
            (
                vec![q, k, w],
                Box::new(|g, v| {
                    let c = g.vn_clip(v[0], v[1])?;
                    let y = g.sub(c, v[2])?;
                    Ok(g.frobenius_sq(y))
                }),
            )
        }
    }
}

fn chain_graph(rng: &mut impl Rng, views: usize) -> Result<NeighborGraph> {
    let bounds = HomographyBounds::default();
    let homs = (1..views)
        .map(|_| random_homography(rng, &bounds, 16, 16).map(|(h, _)| h))
        .collect::<Result<Vec<_>>>()?;
    NeighborGraph::chain(&homs)
}

/// Quadruple loop over views, neighbors, channels and coordinates.
#[allow(clippy::needless_range_loop)]
pub fn loss_oracle(reps: &[Vec<Tensor>], graph: &NeighborGraph) -> f64 {
    let mut total = 0.0;
    for views in reps {
        for i in 0..graph.n_views() {
            for &j in graph.neighbors(i) {
                let h = graph.h(j, i).unwrap().matrix();
                let (vi, vj) = (&views[i], &views[j]);
                for r in 0..vi.rows() {
                    for c in 0..3 {
                        let moved: f64 = (0..3).map(|k| h[c][k] * vj.at(r, k)).sum();
                        let d = vi.at(r, c) - moved;
                        total += d * d;
                    }
                }
            }
        }
    }
    total
}

struct Suite {
    fault: Option<Primitive>,
    results: Vec<CheckResult>,
}

impl Suite {
    fn record(&mut self, name: impl Into<String>, outcome: Result<(bool, String)>) {
        let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        self.results.push(CheckResult {
            name: name.into(),
            passed,
            detail,
        });
    }

    fn gradient(
        &mut self,
        name: String,
        xs: &[Tensor],
        f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>,
    ) {
        let fault = self.fault;
        let outcome = finite_diff_check_with_fault(fault, f, xs, STEP).map(|r| {
            (
                r.max_rel_error < GRAD_TOL,
                format!("max rel error {:.2e}", r.max_rel_error),
            )
        });
        self.record(name, outcome);
    }
}

fn equivariance_linear(rng: &mut ChaCha8Rng, trials: usize) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let layer = VNLinear {
            w: gaussian(rng, &[5, 4]),
        };
        let v = VNFeature::new(gaussian(rng, &[4, 3]))?;
        let a_t = gaussian(rng, &[3, 3]);
        let a: [[f64; 3]; 3] = std::array::from_fn(|r| std::array::from_fn(|c| a_t.at(r, c)));
        let lhs = vn_linear(&layer, &v.act(&a))?;
        let rhs = vn_linear(&layer, &v)?.act(&a);
        worst = worst.max(lhs.tensor().max_abs_diff(rhs.tensor()));
    }
    Ok((
        worst < 1e-10,
        format!("max deviation {worst:.2e} over {trials} actions"),
    ))
}

fn equivariance_relu(rng: &mut ChaCha8Rng, trials: usize) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let layer = VNReLU::new(gaussian(rng, &[4, 4]), gaussian(rng, &[4, 4]))?;
        let v = VNFeature::new(gaussian(rng, &[4, 3]))?;
        let r = random_rotation(rng);
        let lhs = vn_relu(&layer, &v.act(&r))?;
        let rhs = vn_relu(&layer, &v)?.act(&r);
        worst = worst.max(lhs.tensor().max_abs_diff(rhs.tensor()));
    }
    Ok((
        worst < 1e-9,
        format!("max deviation {worst:.2e} over {trials} rotations"),
    ))
}

fn geometry(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let bounds = HomographyBounds::default();
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let [a, b, c] = [0; 3].map(|_| random_homography(rng, &bounds, 16, 16).unwrap().0);
        let left = Homography::compose(&Homography::compose(&a, &b), &c);
        let right = Homography::compose(&a, &Homography::compose(&b, &c));
        worst = worst.max(left.max_abs_diff(&right));
        let round = Homography::compose(&a, &a.invert()?);
        worst = worst.max(round.max_abs_diff(&Homography::IDENTITY));
        let lr = Homography::compose(&b, &a);
        for _ in 0..10 {
            let p = PointH::new(
                rng.random_range(0.0..16.0),
                rng.random_range(0.0..16.0),
                1.0,
            );
            let direct = lr.apply(p).to_euclidean()?;
            let seq = b.apply(a.apply(p)).to_euclidean()?;
            worst = worst
                .max((direct.0 - seq.0).abs())
                .max((direct.1 - seq.1).abs());
        }
    }
    let img = Image::new(5, 4, (0..20).map(|k| k as f64 / 20.0).collect())?;
    let warped = crate::geometry::warp_image(&img, &Homography::IDENTITY)?;
    let warp_ok = warped == img;
    Ok((
        worst < 1e-9 && warp_ok,
        format!(
            "max deviation {worst:.2e}, identity warp {}",
            if warp_ok { "exact" } else { "differs" }
        ),
    ))
}

fn oracle(rng: &mut ChaCha8Rng, instances: usize) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let views = rng.random_range(2..=4);
        let n = rng.random_range(1..=6);
        let t = rng.random_range(1..=3);
        let graph = chain_graph(rng, views)?;
        let reps: Vec<Vec<Tensor>> = (0..t)
            .map(|_| (0..views).map(|_| gaussian(rng, &[n, 3])).collect())
            .collect();
        let feats = ViewRepresentations::new(
            reps.iter()
                .map(|vs| {
                    vs.iter()
                        .map(|v| VNFeature::new(v.clone()))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?,
        );
        let got = home_loss(&feats, &graph)?;
        let want = loss_oracle(&reps, &graph);
        worst = worst.max((got - want).abs() / want.abs().max(1.0));
    }
    Ok((
        worst < 1e-10,
        format!("max deviation {worst:.2e} over {instances} instances"),
    ))
}

fn fixed_point(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let graph = chain_graph(rng, 3)?;
    let base = gaussian(rng, &[5, 3]);
    let views: Vec<Tensor> = (0..3)
        .map(|i| {
            if i == 0 {
                return base.clone();
            }
            let m = graph_path(&graph, 0, i);
            VNFeature::new(base.clone())
                .unwrap()
                .act(m.matrix())
                .into_tensor()
        })
        .collect();
    let feats = ViewRepresentations::new(vec![views
        .into_iter()
        .map(VNFeature::new)
        .collect::<Result<Vec<_>>>()?]);
    let loss = home_loss(&feats, &graph)?;
    Ok((loss < 1e-18, format!("loss {loss:.2e}")))
}

/// Composite homography carrying view `from` into view `to` along the graph.
fn graph_path(graph: &NeighborGraph, from: usize, to: usize) -> Homography {
    let mut prev = vec![usize::MAX; graph.n_views()];
    let mut queue = std::collections::VecDeque::from([from]);
    prev[from] = from;
    while let Some(i) = queue.pop_front() {
        for &j in graph.neighbors(i) {
            if prev[j] == usize::MAX {
                prev[j] = i;
                queue.push_back(j);
            }
        }
    }
    let mut h = Homography::IDENTITY;
    let mut at = to;
    while at != from {
        let p = prev[at];
        h = Homography::compose(&h, graph.h(p, at).unwrap());
        at = p;
    }
    h
}

/// Runs every check. `fault` corrupts one backward rule to prove the
/// gradient checks can fail.
pub fn run_selfcheck(fault: Option<Primitive>) -> Vec<CheckResult> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f);
    let mut suite = Suite {
        fault,
        results: Vec::new(),
    };

    suite.record("equivariance/vn_linear", equivariance_linear(&mut rng, 200));
    suite.record("equivariance/vn_relu", equivariance_relu(&mut rng, 50));

    for p in Primitive::ALL {
        let (xs, f) = primitive_probe(p, &mut rng);
        suite.gradient(format!("gradient/{}", p.name()), &xs, &*f);
    }

    let graph = chain_graph(&mut rng, 3).expect("valid chain");
    let reps: Vec<Tensor> = (0..3).map(|_| gaussian(&mut rng, &[4, 6])).collect();
    let g2 = graph.clone();
    suite.gradient("gradient/home_loss".into(), &reps, &move |g, v| {
        record_frobenius_loss(g, v, &g2)
    });

    let config = ModelConfig {
        input_dim: 9,
        encoder_hidden: vec![6],
        n_dim: 4,
        decoder_hidden: [5, 5, 4],
        classes: 3,
        vn: true,
    };
    let model = Model::init(&config, &mut rng).expect("valid config");
    let images: Vec<Tensor> = (0..3).map(|_| gaussian(&mut rng, &[2, 9])).collect();
    let weights: Vec<Tensor> = model
        .named_params()
        .into_iter()
        .map(|(_, t)| t.clone())
        .collect();
    let m2 = model.clone();
    suite.gradient("gradient/joint_loss".into(), &weights, &move |g, v| {
        let bound = m2.rebind(v)?;
        record_joint_loss(g, &bound, &images, &[0, 2], &graph, 0.1)
    });

    suite.record("geometry/composition", geometry(&mut rng));
    suite.record("loss/oracle", oracle(&mut rng, 50));
    suite.record("loss/fixed_point", fixed_point(&mut rng));

    let elapsed = start.elapsed().as_secs_f64();
    suite.results.push(CheckResult {
        name: "runtime".into(),
        passed: elapsed < 30.0,
        detail: format!("{elapsed:.2} s"),
    });
    suite.results
}
