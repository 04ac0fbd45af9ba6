//! Frobenius equivariance loss over a neighbor graph of views, and the joint
//! objective `clf + α · fr`.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::geometry::Homography;
use crate::tensor::{Graph, Tensor, Var};
use crate::vn::VNFeature;

const INVERSE_TOLERANCE: f64 = 1e-8;

/// Views, adjacency sets and per-edge homographies. `h(j, i)` is `H_ji`,
/// mapping view `j` onto view `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborGraph {
    n_views: usize,
    neighbors: Vec<BTreeSet<usize>>,
    h: BTreeMap<(usize, usize), Homography>,
}

impl NeighborGraph {
    /// Builds from directed edges `(j, i, H_ji)`; each reverse edge is filled
    /// with the inverse.
    pub fn from_edges(n_views: usize, edges: &[(usize, usize, Homography)]) -> Result<Self> {
        let mut g = NeighborGraph {
            n_views,
            neighbors: vec![BTreeSet::new(); n_views],
            h: BTreeMap::new(),
        };
        for &(j, i, h_ji) in edges {
            if i >= n_views || j >= n_views {
                return Err(Error::GraphInvariantViolation(format!(
                    "edge ({j}, {i}) out of range for {n_views} views"
                )));
            }
            if i == j {
                return Err(Error::GraphInvariantViolation(format!(
                    "self-edge at view {i}"
                )));
            }
            let h_ij = h_ji.invert()?;
            g.h.insert((j, i), h_ji);
            g.h.insert((i, j), h_ij);
            g.neighbors[i].insert(j);
            g.neighbors[j].insert(i);
        }
        g.validate()?;
        Ok(g)
    }

    /// Chain graph where `order[k]` is the view at chain position `k` and
    /// `homs[k]` maps view `order[k]` onto view `order[k + 1]`.
    pub fn chain_with_order(order: &[usize], homs: &[Homography]) -> Result<Self> {
        if order.len() != homs.len() + 1 {
            return Err(Error::GraphInvariantViolation(format!(
                "{} chain positions need {} homographies, got {}",
                order.len(),
                order.len().saturating_sub(1),
                homs.len()
            )));
        }
        let mut seen = BTreeSet::new();
        if !order.iter().all(|v| seen.insert(*v)) {
            return Err(Error::GraphInvariantViolation(
                "repeated view in chain order".into(),
            ));
        }
        let edges: Vec<_> = homs
            .iter()
            .enumerate()
            .map(|(k, h)| (order[k], order[k + 1], *h))
            .collect();
        Self::from_edges(order.len(), &edges)
    }

    /// Chain over views `0..=homs.len()`, `homs[k]` mapping view `k` onto `k + 1`.
    pub fn chain(homs: &[Homography]) -> Result<Self> {
        let order: Vec<usize> = (0..=homs.len()).collect();
        Self::chain_with_order(&order, homs)
    }

    pub fn n_views(&self) -> usize {
        self.n_views
    }

    pub fn neighbors(&self, i: usize) -> &BTreeSet<usize> {
        &self.neighbors[i]
    }

    pub fn h(&self, j: usize, i: usize) -> Option<&Homography> {
        self.h.get(&(j, i))
    }

    /// Every `(i, j)` with `j ∈ N(i)`, in index order.
    pub fn ordered_pairs(&self) -> Vec<(usize, usize)> {
        (0..self.n_views)
            .flat_map(|i| self.neighbors[i].iter().map(move |&j| (i, j)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::GraphInvariantViolation(msg));
        if self.neighbors.len() != self.n_views {
            return bad("adjacency length differs from view count".into());
        }
        for i in 0..self.n_views {
            for &j in &self.neighbors[i] {
                if j == i {
                    return bad(format!("self-edge at view {i}"));
                }
                if !self.neighbors[j].contains(&i) {
                    return bad(format!("{j} ∈ N({i}) but {i} ∉ N({j})"));
                }
                let (Some(h_ji), Some(h_ij)) = (self.h(j, i), self.h(i, j)) else {
                    return bad(format!("missing homography for edge ({i}, {j})"));
                };
                let err = Homography::compose(h_ij, h_ji).max_abs_diff(&Homography::IDENTITY);
                if err > INVERSE_TOLERANCE {
                    return bad(format!(
                        "H_{i}{j}·H_{j}{i} deviates from identity by {err:e}"
                    ));
                }
            }
        }
        if self.h.len() != self.neighbors.iter().map(BTreeSet::len).sum::<usize>() {
            return bad("homography for a non-edge".into());
        }
        Ok(())
    }
}

/// `reps[t][i]` is the representation of view `i` at time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewRepresentations {
    pub reps: Vec<Vec<VNFeature>>,
}

impl ViewRepresentations {
    pub fn new(reps: Vec<Vec<VNFeature>>) -> Self {
        Self { reps }
    }

    fn check(&self, n_views: usize) -> Result<()> {
        let n = self
            .reps
            .first()
            .and_then(|views| views.first())
            .map(VNFeature::channels)
            .ok_or_else(|| Error::InconsistentShapes("no representations".into()))?;
        for (t, views) in self.reps.iter().enumerate() {
            if views.len() != n_views {
                return Err(Error::InconsistentShapes(format!(
                    "time {t} has {} views, graph has {n_views}",
                    views.len()
                )));
            }
            if let Some((i, v)) = views.iter().enumerate().find(|(_, v)| v.channels() != n) {
                return Err(Error::InconsistentShapes(format!(
                    "time {t} view {i} has {} channels, expected {n}",
                    v.channels()
                )));
            }
        }
        Ok(())
    }
}

/// `kron(Hᵀ, I_b)`: right-multiplying a coordinate-major `[n, 3b]` block by it
/// applies `H` to every channel vector of every sample.
pub fn coordinate_action(h: &Homography, batch: usize) -> Tensor {
    let m = h.matrix();
    let size = 3 * batch;
    let mut k = Tensor::zeros(&[size, size]);
    let data = k.data_mut();
    for r in 0..3 {
        for s in 0..3 {
            for b in 0..batch {
                // K[s·b + b', r·b + b] = H[r][s] δ(b, b')
                data[(s * batch + b) * size + r * batch + b] = m[r][s];
            }
        }
    }
    k
}

/// Records `Σ_i Σ_{j∈N(i)} ‖VN_iᵀ − H_ji·VN_jᵀ‖²_F` for one time index.
/// `views[i]` is an `[n, 3b]` coordinate-major block (b = 1 for a single
/// feature); the result sums over the `b` samples as well.
pub fn record_frobenius_loss(g: &mut Graph, views: &[Var], graph: &NeighborGraph) -> Result<Var> {
    if views.len() != graph.n_views() {
        return Err(Error::InconsistentShapes(format!(
            "{} views given, graph has {}",
            views.len(),
            graph.n_views()
        )));
    }
    let shape = g.value(views[0]).shape().to_vec();
    if shape.len() != 2 || !shape[1].is_multiple_of(3) {
        return Err(Error::InconsistentShapes(format!(
            "representation shape {shape:?}"
        )));
    }
    if let Some(v) = views.iter().find(|&&v| g.value(v).shape() != shape) {
        return Err(Error::InconsistentShapes(format!(
            "{:?} vs {shape:?}",
            g.value(*v).shape()
        )));
    }
    let batch = shape[1] / 3;
    let mut total: Option<Var> = None;
    for (i, j) in graph.ordered_pairs() {
        let h_ji = graph.h(j, i).expect("validated edge");
        let action = g.constant(coordinate_action(h_ji, batch));
        let moved = g.matmul(views[j], action)?;
        let diff = g.sub(views[i], moved)?;
        let term = g.frobenius_sq(diff);
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(0.0)),
    })
}

/// Frobenius loss summed over every time index, recorded on `g`.
pub fn record_home_loss(g: &mut Graph, reps: &[Vec<Var>], graph: &NeighborGraph) -> Result<Var> {
    graph.validate()?;
    let mut total: Option<Var> = None;
    for views in reps {
        let term = record_frobenius_loss(g, views, graph)?;
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    total.ok_or_else(|| Error::InconsistentShapes("no time indices".into()))
}

/// Value of the Frobenius loss.
pub fn home_loss(r: &ViewRepresentations, graph: &NeighborGraph) -> Result<f64> {
    graph.validate()?;
    r.check(graph.n_views())?;
    let mut g = Graph::new();
    let vars: Vec<Vec<Var>> = r
        .reps
        .iter()
        .map(|views| {
            views
                .iter()
                .map(|v| g.constant(v.tensor().clone()))
                .collect()
        })
        .collect();
    let loss = record_home_loss(&mut g, &vars, graph)?;
    Ok(g.value(loss).item())
}

/// `clf + α · fr`.
pub fn total_loss(clf: f64, fr: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(clf + alpha * fr)
}

pub fn record_total_loss(g: &mut Graph, clf: Var, fr: Var, alpha: f64) -> Result<Var> {
    check_alpha(alpha)?;
    let weighted = g.scale(fr, alpha);
    g.add(clf, weighted)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha < 0.0 || alpha.is_nan() {
        return Err(Error::NegativeAlpha(alpha));
    }
    Ok(())
}

/// Linear-chain neighbor graph from the edge homographies `(H_01, H_12, …)`.
pub fn build_chain_graph(homographies: &[Homography]) -> Result<NeighborGraph> {
    NeighborGraph::chain(homographies)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feature(rows: &[[f64; 3]]) -> VNFeature {
        VNFeature::new(Tensor::new(vec![rows.len(), 3], rows.concat()).unwrap()).unwrap()
    }

    #[test]
    fn chain_neighborhoods() {
        let h = Homography::translation(1.0, 2.0);
        let two = build_chain_graph(&[h]).unwrap();
        assert_eq!(
            two.neighbors(0).iter().copied().collect::<Vec<_>>(),
            vec![1]
        );
        assert_eq!(
            two.neighbors(1).iter().copied().collect::<Vec<_>>(),
            vec![0]
        );

        let three = build_chain_graph(&[h, h]).unwrap();
        let sets: Vec<Vec<usize>> = (0..3)
            .map(|i| three.neighbors(i).iter().copied().collect())
            .collect();
        assert_eq!(sets, vec![vec![1], vec![0, 2], vec![1]]);

        let four = build_chain_graph(&[h, h, h]).unwrap();
        assert!(four.h(0, 3).is_none() && four.h(0, 2).is_none() && four.h(3, 0).is_none());
    }

    #[test]
    fn self_edges_and_bad_chains_rejected() {
        let h = Homography::IDENTITY;
        assert!(NeighborGraph::from_edges(2, &[(0, 0, h)]).is_err());
        assert!(NeighborGraph::from_edges(2, &[(0, 2, h)]).is_err());
        assert!(NeighborGraph::chain_with_order(&[0, 1, 2], &[h]).is_err());
        assert!(NeighborGraph::chain_with_order(&[0, 0], &[h]).is_err());
    }

    #[test]
    fn identical_views_identity_h_zero_loss() {
        let g = build_chain_graph(&[Homography::IDENTITY]).unwrap();
        let v = feature(&[[1.0, 2.0, 3.0], [-1.0, 0.5, 2.0]]);
        let r = ViewRepresentations::new(vec![vec![v.clone(), v]]);
        assert_eq!(home_loss(&r, &g).unwrap(), 0.0);
    }

    #[test]
    fn known_value_two_views() {
        // H = translation by (1, 0): x' = x + z. VN_1 = [[0,0,1]] → H·VN_1ᵀ = (1,0,1)
        let g = build_chain_graph(&[Homography::translation(1.0, 0.0)]).unwrap();
        let v0 = feature(&[[0.0, 0.0, 1.0]]);
        let v1 = feature(&[[0.0, 0.0, 1.0]]);
        let r = ViewRepresentations::new(vec![vec![v0, v1]]);
        // term (1,0): v1 - H v0 = (0,0,1) - (1,0,1) → 1; term (0,1): v0 - H⁻¹ v1 = (0,0,1) - (-1,0,1) → 1
        assert_eq!(home_loss(&r, &g).unwrap(), 2.0);
    }

    #[test]
    fn inconsistent_shapes_rejected() {
        let g = build_chain_graph(&[Homography::IDENTITY]).unwrap();
        let a = feature(&[[1.0, 2.0, 3.0]]);
        let b = feature(&[[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]);
        let r = ViewRepresentations::new(vec![vec![a.clone(), b]]);
        assert!(matches!(
            home_loss(&r, &g),
            Err(Error::InconsistentShapes(_))
        ));
        let r = ViewRepresentations::new(vec![vec![a]]);
        assert!(matches!(
            home_loss(&r, &g),
            Err(Error::InconsistentShapes(_))
        ));
    }

    #[test]
    fn asymmetric_graph_rejected() {
        let mut g = build_chain_graph(&[Homography::IDENTITY]).unwrap();
        g.neighbors[1].clear();
        assert!(matches!(
            g.validate(),
            Err(Error::GraphInvariantViolation(_))
        ));
    }

    #[test]
    fn total_loss_arithmetic() {
        assert!((total_loss(1.0, 2.0, 0.1).unwrap() - 1.2).abs() < 1e-15);
        assert_eq!(total_loss(0.7, 5.0, 0.0).unwrap(), 0.7);
        assert_eq!(total_loss(0.0, 3.25, 1.0).unwrap(), 3.25);
        assert!(matches!(
            total_loss(1.0, 1.0, -0.5),
            Err(Error::NegativeAlpha(_))
        ));
    }

    #[test]
    fn coordinate_action_applies_h_per_sample() {
        let h = Homography::new([[1.0, 2.0, 3.0], [0.5, -1.0, 0.0], [0.1, 0.2, 1.0]]).unwrap();
        // two samples, one channel: s0 = (1, 2, 3), s1 = (-1, 0, 4)
        let block = Tensor::matrix(1, 6, vec![1.0, -1.0, 2.0, 0.0, 3.0, 4.0]).unwrap();
        let moved = block.matmul(&coordinate_action(&h, 2)).unwrap();
        for (s, p) in [[1.0, 2.0, 3.0], [-1.0, 0.0, 4.0]].iter().enumerate() {
            let q = h.apply(crate::geometry::PointH::new(p[0], p[1], p[2]));
            assert!((moved.at(0, s) - q.x).abs() < 1e-14);
            assert!((moved.at(0, 2 + s) - q.y).abs() < 1e-14);
            assert!((moved.at(0, 4 + s) - q.w).abs() < 1e-14);
        }
    }
}
