//! Communication graphs, random link-failure laws and spectral checks of
//! mean connectivity.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::sym_eigenvalues;
use crate::scalar::Scalar;

/// `λ₂(L̄)` at or below this value counts as disconnected on average.
pub const MEAN_CONNECTIVITY_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("edge ({0}, {1}) references a node outside 0..{2}")]
    NodeOutOfRange(usize, usize, usize),
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("link probability {0} outside (0, 1]")]
    InvalidProbability(f64),
    #[error("gossip law needs at least one base edge")]
    EmptyGossipBase,
    #[error("topology is not connected on average: lambda_2(mean Laplacian) = {0:e}")]
    NotMeanConnected(f64),
}

/// Simple undirected graph on nodes `0..num_nodes`. Edges are stored as
/// `(lo, hi)` pairs in insertion order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
}

impl Graph {
    pub fn new(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Self, NetworkError> {
        let mut out = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            if a >= num_nodes || b >= num_nodes {
                return Err(NetworkError::NodeOutOfRange(a, b, num_nodes));
            }
            if a == b {
                return Err(NetworkError::SelfLoop(a));
            }
            let e = (a.min(b), a.max(b));
            if out.contains(&e) {
                return Err(NetworkError::DuplicateEdge(e.0, e.1));
            }
            out.push(e);
        }
        Ok(Self {
            num_nodes,
            edges: out,
        })
    }

    pub fn complete(num_nodes: usize) -> Self {
        let edges: Vec<_> = (0..num_nodes)
            .flat_map(|a| ((a + 1)..num_nodes).map(move |b| (a, b)))
            .collect();
        Self {
            num_nodes,
            edges,
        }
    }

    pub fn path(num_nodes: usize) -> Self {
        let edges = (1..num_nodes).map(|b| (b - 1, b)).collect();
        Self {
            num_nodes,
            edges,
        }
    }

    pub fn ring(num_nodes: usize) -> Self {
        let mut g = Self::path(num_nodes);
        if num_nodes > 2 {
            g.edges.push((0, num_nodes - 1));
        }
        g
    }

    /// Five-node ring `0-1-2-3-4-0` with the chord `0-2`, so that node 2 (the
    /// third agent) can exchange messages with nodes 0 and 3.
    pub fn pentagon_with_chord() -> Self {
        let mut g = Self::ring(5);
        g.edges.push((0, 2));
        g
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn degree(&self, node: usize) -> usize {
        self.edges
            .iter()
            .filter(|&&(a, b)| a == node || b == node)
            .count()
    }

    pub fn max_degree(&self) -> usize {
        (0..self.num_nodes).map(|n| self.degree(n)).max().unwrap_or(0)
    }
}

/// Laplacian `L = D − A` of a (sub)graph, stored through its edge list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Laplacian {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
}

impl Laplacian {
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Edges present in this realization; neighbourhoods `Ωₙ(t)` are read
    /// off from here.
    pub fn active_edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn matrix<T: Scalar>(&self) -> DMatrix<T> {
        let mut l = DMatrix::zeros(self.num_nodes, self.num_nodes);
        for &(a, b) in &self.edges {
            l[(a, a)] += T::one();
            l[(b, b)] += T::one();
            l[(a, b)] -= T::one();
            l[(b, a)] -= T::one();
        }
        l
    }

    pub fn fiedler_value<T: Scalar>(&self) -> T {
        fiedler_value(&self.matrix::<T>())
    }
}

pub fn laplacian_of(graph: &Graph) -> Laplacian {
    Laplacian {
        num_nodes: graph.num_nodes,
        edges: graph.edges.clone(),
    }
}

/// Second-smallest eigenvalue of a symmetric Laplacian-like matrix, clamped
/// at zero. Returns zero for graphs with fewer than two nodes.
pub fn fiedler_value<T: Scalar>(lap: &DMatrix<T>) -> T {
    let eig = sym_eigenvalues(lap);
    eig.get(1).copied().unwrap_or_else(T::zero).max(T::zero())
}

/// Random link law applied independently at every time step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LinkLaw {
    /// Every base edge is always on.
    Static,
    /// Every base edge is on independently with probability `p`.
    Bernoulli { p: f64 },
    /// Exactly one base edge, chosen uniformly, is on.
    Gossip,
}

#[derive(Debug, Clone)]
pub struct TopologyModel {
    base: Graph,
    law: LinkLaw,
}

impl TopologyModel {
    pub fn new(base: Graph, law: LinkLaw) -> Result<Self, NetworkError> {
        match law {
            LinkLaw::Bernoulli { p } if !(p > 0.0 && p <= 1.0) => {
                return Err(NetworkError::InvalidProbability(p))
            }
            LinkLaw::Gossip if base.edges.is_empty() => return Err(NetworkError::EmptyGossipBase),
            _ => {}
        }
        Ok(Self { base, law })
    }

    pub fn base(&self) -> &Graph {
        &self.base
    }

    pub fn law(&self) -> LinkLaw {
        self.law
    }

    pub fn num_nodes(&self) -> usize {
        self.base.num_nodes
    }

    /// Exact expectation `E[L_t]`.
    pub fn mean_laplacian<T: Scalar>(&self) -> DMatrix<T> {
        let base = laplacian_of(&self.base).matrix::<T>();
        match self.law {
            LinkLaw::Static => base,
            LinkLaw::Bernoulli { p } => base * T::lit(p),
            // Each edge is active with probability 1/|E|.
            LinkLaw::Gossip => base / T::lit(self.base.edges.len() as f64),
        }
    }

    /// `λ₂(L̄)`, failing when the topology is not connected on average. A
    /// single node counts as connected and reports zero.
    pub fn validate_mean_connectivity<T: Scalar>(&self) -> Result<T, NetworkError> {
        if self.num_nodes() == 1 {
            return Ok(T::zero());
        }
        let l2 = fiedler_value(&self.mean_laplacian::<T>());
        if l2 <= T::lit(MEAN_CONNECTIVITY_TOL) {
            return Err(NetworkError::NotMeanConnected(l2.to_f64_lossy()));
        }
        Ok(l2)
    }

    /// One i.i.d. draw `L_t`.
    pub fn sample_laplacian<R: Rng + ?Sized>(&self, rng: &mut R) -> Laplacian {
        let mut lap = Laplacian {
            num_nodes: self.base.num_nodes,
            edges: Vec::with_capacity(self.base.edges.len()),
        };
        self.sample_into(rng, &mut lap);
        lap
    }

    /// Same draw as [`Self::sample_laplacian`], reusing `out`'s storage.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut Laplacian) {
        out.num_nodes = self.base.num_nodes;
        out.edges.clear();
        match self.law {
            LinkLaw::Static => out.edges.extend_from_slice(&self.base.edges),
            LinkLaw::Bernoulli { p } => {
                for &e in &self.base.edges {
                    if rng.random::<f64>() < p {
                        out.edges.push(e);
                    }
                }
            }
            LinkLaw::Gossip => {
                let k = rng.random_range(0..self.base.edges.len());
                out.edges.push(self.base.edges[k]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn path3() -> DMatrix<f64> {
        DMatrix::from_row_slice(3, 3, &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0])
    }

    #[test]
    fn graph_rejects_bad_edges() {
        assert_eq!(Graph::new(3, &[(0, 3)]), Err(NetworkError::NodeOutOfRange(0, 3, 3)));
        assert_eq!(Graph::new(3, &[(1, 1)]), Err(NetworkError::SelfLoop(1)));
        assert_eq!(
            Graph::new(3, &[(0, 1), (1, 0)]),
            Err(NetworkError::DuplicateEdge(0, 1))
        );
    }

    #[test]
    fn empty_graph_has_zero_laplacian() {
        let g = Graph::new(4, &[]).unwrap();
        assert!(laplacian_of(&g).matrix::<f64>().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn path_laplacian() {
        assert_eq!(laplacian_of(&Graph::path(3)).matrix::<f64>(), path3());
    }

    #[test]
    fn pentagon_fixture_laplacian() {
        let g = Graph::pentagon_with_chord();
        let l = laplacian_of(&g).matrix::<f64>();
        for n in 0..5 {
            assert_eq!(l[(n, n)], g.degree(n) as f64);
            assert_eq!(l.row(n).sum(), 0.0);
        }
        // Third agent talks to the first and fourth.
        assert_eq!(l[(2, 0)], -1.0);
        assert_eq!(l[(2, 3)], -1.0);
    }

    #[test]
    fn fiedler_values() {
        for n in 2..8 {
            let l2 = laplacian_of(&Graph::complete(n)).fiedler_value::<f64>();
            assert!((l2 - n as f64).abs() < 1e-10);
        }
        let two_edges = Graph::new(4, &[(0, 1), (2, 3)]).unwrap();
        assert!(laplacian_of(&two_edges).fiedler_value::<f64>() < 1e-12);
        assert!((laplacian_of(&Graph::path(3)).fiedler_value::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_laplacian_laws() {
        let sure = TopologyModel::new(Graph::path(3), LinkLaw::Bernoulli { p: 1.0 }).unwrap();
        assert_eq!(sure.mean_laplacian::<f64>(), path3());
        let half = TopologyModel::new(Graph::path(3), LinkLaw::Bernoulli { p: 0.5 }).unwrap();
        assert_eq!(half.mean_laplacian::<f64>(), path3() * 0.5);
        assert!((half.validate_mean_connectivity::<f64>().unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gossip_mean_matches_empirical_average() {
        let top = TopologyModel::new(Graph::complete(3), LinkLaw::Gossip).unwrap();
        let exact = top.mean_laplacian::<f64>();
        // Triangle: every edge w.p. 1/3 ⇒ diagonal 2/3, off-diagonal −1/3.
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 2.0 / 3.0 } else { -1.0 / 3.0 };
                assert!((exact[(i, j)] - e).abs() < 1e-15);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let draws = 100_000;
        let mut acc = DMatrix::<f64>::zeros(3, 3);
        for _ in 0..draws {
            acc += top.sample_laplacian(&mut rng).matrix::<f64>();
        }
        acc /= draws as f64;
        assert!((acc - exact).abs().max() < 0.01);
    }

    #[test]
    fn gossip_is_mean_connected_but_samples_are_not() {
        let top = TopologyModel::new(Graph::pentagon_with_chord(), LinkLaw::Gossip).unwrap();
        assert!(top.validate_mean_connectivity::<f64>().unwrap() > 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let l = top.sample_laplacian(&mut rng);
            assert_eq!(l.active_edges().len(), 1);
            assert!(l.fiedler_value::<f64>() < 1e-12);
        }
    }

    #[test]
    fn disconnected_base_is_not_mean_connected() {
        let g = Graph::new(4, &[(0, 1), (2, 3)]).unwrap();
        let top = TopologyModel::new(g, LinkLaw::Bernoulli { p: 0.3 }).unwrap();
        assert!(matches!(
            top.validate_mean_connectivity::<f64>(),
            Err(NetworkError::NotMeanConnected(_))
        ));
    }

    #[test]
    fn invalid_laws_rejected() {
        assert!(TopologyModel::new(Graph::path(3), LinkLaw::Bernoulli { p: 0.0 }).is_err());
        assert!(TopologyModel::new(Graph::path(3), LinkLaw::Bernoulli { p: 1.5 }).is_err());
        assert_eq!(
            TopologyModel::new(Graph::new(3, &[]).unwrap(), LinkLaw::Gossip).unwrap_err(),
            NetworkError::EmptyGossipBase
        );
    }

    #[test]
    fn static_law_returns_base() {
        let top = TopologyModel::new(Graph::pentagon_with_chord(), LinkLaw::Static).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = top.sample_laplacian(&mut rng);
        assert_eq!(l, laplacian_of(top.base()));
    }

    #[test]
    fn bernoulli_activation_frequency() {
        let p = 0.3;
        let top = TopologyModel::new(Graph::pentagon_with_chord(), LinkLaw::Bernoulli { p }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let draws = 100_000;
        let mut counts = vec![0usize; top.base().edges().len()];
        for _ in 0..draws {
            for e in top.sample_laplacian(&mut rng).active_edges() {
                let k = top.base().edges().iter().position(|b| b == e).unwrap();
                counts[k] += 1;
            }
        }
        for c in counts {
            assert!((c as f64 / draws as f64 - p).abs() < 0.01);
        }
    }

    #[test]
    fn mean_fiedler_dominates_average_sample_fiedler() {
        let top = TopologyModel::new(Graph::pentagon_with_chord(), LinkLaw::Bernoulli { p: 0.5 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let draws = 10_000;
        let avg: f64 = (0..draws)
            .map(|_| top.sample_laplacian(&mut rng).fiedler_value::<f64>())
            .sum::<f64>()
            / draws as f64;
        let mean_l2 = top.validate_mean_connectivity::<f64>().unwrap();
        assert!(mean_l2 >= avg - 0.02, "{mean_l2} vs {avg}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn sampled_laplacians_are_valid(seed in any::<u64>(), p in 0.05f64..=1.0, gossip in any::<bool>()) {
            let law = if gossip { LinkLaw::Gossip } else { LinkLaw::Bernoulli { p } };
            let top = TopologyModel::new(Graph::complete(5), law).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..160 {
                let l = top.sample_laplacian(&mut rng).matrix::<f64>();
                for i in 0..5 {
                    prop_assert!(l.row(i).sum().abs() < 1e-12);
                    for j in 0..5 {
                        if i != j {
                            prop_assert!(l[(i, j)] == 0.0 || l[(i, j)] == -1.0);
                        }
                    }
                }
                let eig = sym_eigenvalues(&l);
                prop_assert!(eig[0].abs() < 1e-10);
                let ones = nalgebra::DVector::from_element(5, 1.0 / 5f64.sqrt());
                prop_assert!((&l * ones).norm() < 1e-12);
            }
        }
    }
}
