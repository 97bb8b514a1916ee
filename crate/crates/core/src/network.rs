//! Oriented flow networks: incidence structure, cuts, spanning trees, and
//! spectral quantities of the graph Laplacian.
//!
//! Edges are ordered pairs `(tail, head)` of 0-based node indices. Flow on an
//! edge is positive in the tail-to-head direction. The incidence matrix `B` is
//! `n x m` with `+1` at the tail and `-1` at the head of each edge column, so
//! `B * lambda` is the net inflow vector produced by edge flows `lambda`.

use std::fmt;
use std::sync::OnceLock;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::util::DisjointSet;

/// Cut enumeration walks all 2^n - 2 nonempty proper node subsets; refuse
/// anything larger than this many nodes.
pub const CUT_NODE_LIMIT: usize = 16;

/// Default ceiling on the number of spanning trees we are willing to
/// enumerate explicitly.
pub const DEFAULT_TREE_LIMIT: u64 = 1_000_000;

/// Eigenvalues of B*B^T at or below this cutoff are treated as zero when
/// forming the pseudoinverse. For a connected graph the only structural zero
/// is the all-ones direction.
const EIGENVALUE_CUTOFF: f64 = 1e-9;

/// Edge capacity bound. `Infinite` is a distinguished value, never a large
/// float, so saturation arithmetic and "is this cut unbounded?" questions
/// stay exact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Capacity {
    Finite(f64),
    Infinite,
}

impl Capacity {
    pub fn is_infinite(self) -> bool {
        matches!(self, Capacity::Infinite)
    }

    /// The finite bound, if there is one.
    pub fn as_finite(self) -> Option<f64> {
        match self {
            Capacity::Finite(v) => Some(v),
            Capacity::Infinite => None,
        }
    }

    /// Capacity of edges in series-free aggregation: any infinite term makes
    /// the sum infinite.
    pub fn saturating_add(self, other: Capacity) -> Capacity {
        match (self, other) {
            (Capacity::Finite(a), Capacity::Finite(b)) => Capacity::Finite(a + b),
            _ => Capacity::Infinite,
        }
    }
}

impl fmt::Display for Capacity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Capacity::Finite(v) => write!(f, "{v}"),
            Capacity::Infinite => write!(f, "inf"),
        }
    }
}

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("network needs at least 2 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("network needs at least one edge")]
    NoEdges,
    #[error("edge {edge} is a self-loop on node {node}")]
    SelfLoop { edge: usize, node: usize },
    #[error("edge {edge} references node {node}, but the network has {nodes} nodes")]
    NodeOutOfRange { edge: usize, node: usize, nodes: usize },
    #[error("edges {first} and {second} connect the same node pair")]
    DuplicateEdge { first: usize, second: usize },
    #[error("{edges} edges but {capacities} capacities")]
    CapacityCountMismatch { edges: usize, capacities: usize },
    #[error("capacity of edge {edge} must be positive, got {value}")]
    NonPositiveCapacity { edge: usize, value: f64 },
    #[error("graph is not connected")]
    Disconnected,
    #[error("cut enumeration over {nodes} nodes exceeds the {limit}-node limit")]
    CutLimitExceeded { nodes: usize, limit: usize },
    #[error("{count:.0} spanning trees exceed the enumeration limit of {limit}")]
    TreeLimitExceeded { count: f64, limit: u64 },
}

/// A nonempty proper node subset `S` together with the edges crossing its
/// boundary, split by orientation: `positive_edges` leave `S` (tail inside),
/// `negative_edges` enter it (head inside).
#[derive(Debug, Clone)]
pub struct Cut {
    pub node_set: Vec<usize>,
    pub positive_edges: Vec<usize>,
    pub negative_edges: Vec<usize>,
    /// Sum of crossing-edge capacities, infinite if any crossing edge is.
    pub capacity: Capacity,
}

/// Edge-index set of one spanning tree, sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanningTree {
    pub edge_indices: Vec<usize>,
}

/// A connected oriented graph with per-edge capacity bounds. Immutable after
/// construction; the incidence matrix and Laplacian spectral data are
/// computed once up front.
#[derive(Debug, Clone)]
pub struct Network {
    node_count: usize,
    edges: Vec<(usize, usize)>,
    capacities: Vec<Capacity>,
    incidence: DMatrix<f64>,
    laplacian_pinv: DMatrix<f64>,
    algebraic_connectivity: f64,
    trees: OnceLock<Vec<SpanningTree>>,
}

impl Network {
    pub fn new(
        node_count: usize,
        edges: Vec<(usize, usize)>,
        capacities: Vec<Capacity>,
    ) -> Result<Self, NetworkError> {
        if node_count < 2 {
            return Err(NetworkError::TooFewNodes(node_count));
        }
        if edges.is_empty() {
            return Err(NetworkError::NoEdges);
        }
        if capacities.len() != edges.len() {
            return Err(NetworkError::CapacityCountMismatch {
                edges: edges.len(),
                capacities: capacities.len(),
            });
        }
        for (k, &(tail, head)) in edges.iter().enumerate() {
            if tail >= node_count || head >= node_count {
                return Err(NetworkError::NodeOutOfRange {
                    edge: k,
                    node: tail.max(head),
                    nodes: node_count,
                });
            }
            if tail == head {
                return Err(NetworkError::SelfLoop { edge: k, node: tail });
            }
            for (j, &(t2, h2)) in edges[..k].iter().enumerate() {
                if (t2, h2) == (tail, head) || (h2, t2) == (tail, head) {
                    return Err(NetworkError::DuplicateEdge { first: j, second: k });
                }
            }
        }
        for (k, cap) in capacities.iter().enumerate() {
            if let Capacity::Finite(v) = cap {
                if !(v.is_finite() && *v > 0.0) {
                    return Err(NetworkError::NonPositiveCapacity { edge: k, value: *v });
                }
            }
        }

        let mut dsu = DisjointSet::new(node_count);
        for &(tail, head) in &edges {
            dsu.union(tail, head);
        }
        if !dsu.is_single_component() {
            return Err(NetworkError::Disconnected);
        }

        let incidence = DMatrix::from_fn(node_count, edges.len(), |i, k| {
            let (tail, head) = edges[k];
            if i == tail {
                1.0
            } else if i == head {
                -1.0
            } else {
                0.0
            }
        });

        let laplacian = &incidence * incidence.transpose();
        let eigen = laplacian.symmetric_eigen();
        let mut sorted: Vec<f64> = eigen.eigenvalues.iter().copied().collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let algebraic_connectivity = sorted[1];

        let mut laplacian_pinv = DMatrix::zeros(node_count, node_count);
        for (idx, &val) in eigen.eigenvalues.iter().enumerate() {
            if val > EIGENVALUE_CUTOFF {
                let v = eigen.eigenvectors.column(idx);
                laplacian_pinv += (v * v.transpose()) / val;
            }
        }

        Ok(Network {
            node_count,
            edges,
            capacities,
            incidence,
            laplacian_pinv,
            algebraic_connectivity,
            trees: OnceLock::new(),
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn capacities(&self) -> &[Capacity] {
        &self.capacities
    }

    /// The n x m incidence matrix: +1 at each edge's tail, -1 at its head.
    pub fn incidence(&self) -> &DMatrix<f64> {
        &self.incidence
    }

    /// Moore-Penrose pseudoinverse of B*B^T. The kernel direction (all-ones)
    /// is annihilated; on zero-sum vectors this is a true inverse.
    pub fn laplacian_pinv(&self) -> &DMatrix<f64> {
        &self.laplacian_pinv
    }

    /// Second-smallest eigenvalue of B*B^T; positive exactly because the
    /// graph is connected.
    pub fn algebraic_connectivity(&self) -> f64 {
        self.algebraic_connectivity
    }

    /// All cuts: one per nonempty proper node subset, 2^n - 2 in total.
    pub fn cuts(&self) -> Result<Vec<Cut>, NetworkError> {
        if self.node_count > CUT_NODE_LIMIT {
            return Err(NetworkError::CutLimitExceeded {
                nodes: self.node_count,
                limit: CUT_NODE_LIMIT,
            });
        }
        let n = self.node_count;
        let mut cuts = Vec::with_capacity((1usize << n) - 2);
        for mask in 1..((1u32 << n) - 1) {
            let in_set = |i: usize| mask >> i & 1 == 1;
            let node_set: Vec<usize> = (0..n).filter(|&i| in_set(i)).collect();
            let mut positive_edges = Vec::new();
            let mut negative_edges = Vec::new();
            let mut capacity = Capacity::Finite(0.0);
            for (k, &(tail, head)) in self.edges.iter().enumerate() {
                let crossing = in_set(tail) != in_set(head);
                if !crossing {
                    continue;
                }
                if in_set(tail) {
                    positive_edges.push(k);
                } else {
                    negative_edges.push(k);
                }
                capacity = capacity.saturating_add(self.capacities[k]);
            }
            cuts.push(Cut {
                node_set,
                positive_edges,
                negative_edges,
                capacity,
            });
        }
        Ok(cuts)
    }

    /// Number of spanning trees by the matrix-tree theorem (determinant of a
    /// principal Laplacian minor). Exact for any count that fits in f64's
    /// integer range, which covers everything we would ever enumerate.
    pub fn spanning_tree_count(&self) -> f64 {
        let n = self.node_count;
        let minor = DMatrix::from_fn(n - 1, n - 1, |i, j| {
            let mut acc = 0.0;
            for k in 0..self.edges.len() {
                acc += self.incidence[(i + 1, k)] * self.incidence[(j + 1, k)];
            }
            acc
        });
        minor.determinant().round()
    }

    /// Explicit list of all spanning trees, cached after the first call.
    pub fn spanning_trees(&self) -> Result<&[SpanningTree], NetworkError> {
        self.spanning_trees_with_limit(DEFAULT_TREE_LIMIT)
    }

    pub fn spanning_trees_with_limit(&self, limit: u64) -> Result<&[SpanningTree], NetworkError> {
        let count = self.spanning_tree_count();
        if count > limit as f64 {
            return Err(NetworkError::TreeLimitExceeded { count, limit });
        }
        let trees = self.trees.get_or_init(|| {
            let mut out = Vec::with_capacity(count as usize);
            let mut chosen = Vec::with_capacity(self.node_count - 1);
            self.enumerate_trees(0, &mut chosen, &DisjointSet::new(self.node_count), &mut out);
            out
        });
        debug_assert_eq!(trees.len() as f64, count);
        Ok(trees)
    }

    /// Include/exclude recursion over edges; the union-find forbids cycles,
    /// so every acyclic (n-1)-subset, i.e. every spanning tree, is emitted
    /// exactly once.
    fn enumerate_trees(
        &self,
        idx: usize,
        chosen: &mut Vec<usize>,
        dsu: &DisjointSet,
        out: &mut Vec<SpanningTree>,
    ) {
        let need = self.node_count - 1 - chosen.len();
        if need == 0 {
            out.push(SpanningTree {
                edge_indices: chosen.clone(),
            });
            return;
        }
        if self.edges.len() - idx < need {
            return;
        }
        let (tail, head) = self.edges[idx];
        let mut with_edge = dsu.clone();
        if with_edge.union(tail, head) {
            chosen.push(idx);
            self.enumerate_trees(idx + 1, chosen, &with_edge, out);
            chosen.pop();
        }
        self.enumerate_trees(idx + 1, chosen, dsu, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use approx::assert_relative_eq;

    fn triangle() -> Network {
        // 3-cycle used throughout: edges (2,1), (3,2), (1,3) in 1-based labels.
        Network::new(
            3,
            vec![(1, 0), (2, 1), (0, 2)],
            vec![Capacity::Infinite, Capacity::Infinite, Capacity::Finite(4.0)],
        )
        .unwrap()
    }

    #[test]
    fn triangle_incidence_matches_hand_computation() {
        let net = triangle();
        let b = net.incidence();
        let expected = DMatrix::from_row_slice(3, 3, &[-1., 0., 1., 1., -1., 0., 0., 1., -1.]);
        assert_eq!(b, &expected);
        for k in 0..3 {
            assert_eq!(b.column(k).sum(), 0.0);
        }
    }

    #[test]
    fn single_edge_incidence() {
        let net = Network::new(2, vec![(0, 1)], vec![Capacity::Finite(1.0)]).unwrap();
        assert_eq!(net.incidence(), &DMatrix::from_row_slice(2, 1, &[1., -1.]));
    }

    #[test]
    fn constructor_rejects_bad_input() {
        assert!(matches!(
            Network::new(1, vec![], vec![]),
            Err(NetworkError::TooFewNodes(1))
        ));
        assert!(matches!(
            Network::new(2, vec![], vec![]),
            Err(NetworkError::NoEdges)
        ));
        assert!(matches!(
            Network::new(2, vec![(0, 0)], vec![Capacity::Infinite]),
            Err(NetworkError::SelfLoop { edge: 0, node: 0 })
        ));
        assert!(matches!(
            Network::new(2, vec![(0, 2)], vec![Capacity::Infinite]),
            Err(NetworkError::NodeOutOfRange { .. })
        ));
        assert!(matches!(
            Network::new(
                3,
                vec![(0, 1), (1, 0)],
                vec![Capacity::Infinite, Capacity::Infinite]
            ),
            Err(NetworkError::DuplicateEdge { first: 0, second: 1 })
        ));
        assert!(matches!(
            Network::new(2, vec![(0, 1)], vec![]),
            Err(NetworkError::CapacityCountMismatch { .. })
        ));
        assert!(matches!(
            Network::new(2, vec![(0, 1)], vec![Capacity::Finite(0.0)]),
            Err(NetworkError::NonPositiveCapacity { edge: 0, .. })
        ));
        assert!(matches!(
            Network::new(
                4,
                vec![(0, 1), (2, 3)],
                vec![Capacity::Infinite, Capacity::Infinite]
            ),
            Err(NetworkError::Disconnected)
        ));
    }

    #[test]
    fn triangle_cut_around_node_one() {
        let net = triangle();
        let cuts = net.cuts().unwrap();
        // mask 0b001 = {node 0}; edge 0 = (1,0) enters, edge 2 = (0,2) leaves.
        let cut = cuts.iter().find(|c| c.node_set == vec![0]).unwrap();
        assert_eq!(cut.positive_edges, vec![2]);
        assert_eq!(cut.negative_edges, vec![0]);
        assert_eq!(cut.capacity, Capacity::Infinite);
        assert_eq!(cuts.len(), 6);
    }

    #[test]
    fn cut_capacity_saturates_on_infinite_edges() {
        let net = Network::new(
            2,
            vec![(0, 1)],
            vec![Capacity::Infinite],
        )
        .unwrap();
        let cuts = net.cuts().unwrap();
        assert!(cuts.iter().all(|c| c.capacity.is_infinite()));

        let finite = Network::new(2, vec![(0, 1)], vec![Capacity::Finite(2.5)]).unwrap();
        for cut in finite.cuts().unwrap() {
            assert_eq!(cut.capacity, Capacity::Finite(2.5));
        }
    }

    #[test]
    fn cut_limit_enforced() {
        let n = CUT_NODE_LIMIT + 1;
        let edges: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
        let caps = vec![Capacity::Infinite; edges.len()];
        let net = Network::new(n, edges, caps).unwrap();
        assert!(matches!(
            net.cuts(),
            Err(NetworkError::CutLimitExceeded { .. })
        ));
    }

    #[test]
    fn triangle_has_three_spanning_trees() {
        let net = triangle();
        let trees = net.spanning_trees().unwrap();
        assert_eq!(trees.len(), 3);
        let sets: Vec<&[usize]> = trees.iter().map(|t| t.edge_indices.as_slice()).collect();
        assert!(sets.contains(&[0, 1].as_slice()));
        assert!(sets.contains(&[0, 2].as_slice()));
        assert!(sets.contains(&[1, 2].as_slice()));
    }

    #[test]
    fn tree_graph_has_single_spanning_tree() {
        let net = Network::new(
            3,
            vec![(0, 1), (1, 2)],
            vec![Capacity::Infinite, Capacity::Infinite],
        )
        .unwrap();
        assert_eq!(net.spanning_trees().unwrap().len(), 1);
        assert_eq!(net.spanning_tree_count(), 1.0);
    }

    #[test]
    fn complete_graph_on_four_nodes_has_sixteen_trees() {
        let mut edges = Vec::new();
        for i in 0..4 {
            for j in (i + 1)..4 {
                edges.push((i, j));
            }
        }
        let caps = vec![Capacity::Infinite; edges.len()];
        let net = Network::new(4, edges, caps).unwrap();
        assert_eq!(net.spanning_tree_count(), 16.0);
        assert_eq!(net.spanning_trees().unwrap().len(), 16);
    }

    #[test]
    fn tree_limit_enforced_without_enumerating() {
        let mut edges = Vec::new();
        for i in 0..4 {
            for j in (i + 1)..4 {
                edges.push((i, j));
            }
        }
        let caps = vec![Capacity::Infinite; edges.len()];
        let net = Network::new(4, edges, caps).unwrap();
        assert!(matches!(
            net.spanning_trees_with_limit(15),
            Err(NetworkError::TreeLimitExceeded { limit: 15, .. })
        ));
        // A generous limit still succeeds afterwards.
        assert_eq!(net.spanning_trees_with_limit(16).unwrap().len(), 16);
    }

    #[test]
    fn laplacian_pinv_of_triangle_scales_zero_sum_vectors() {
        // B*B^T of the 3-cycle acts as 3*I on zero-sum vectors.
        let net = triangle();
        let p = DVector::from_vec(vec![1.0, -1.0, 0.0]);
        let solved = net.laplacian_pinv() * &p;
        assert_relative_eq!(solved, p / 3.0, epsilon = 1e-12);

        let ones = DVector::from_element(3, 1.0);
        assert!((net.laplacian_pinv() * ones).amax() < 1e-12);
    }

    #[test]
    fn laplacian_pinv_of_single_edge() {
        let net = Network::new(2, vec![(0, 1)], vec![Capacity::Finite(1.0)]).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[0.25, -0.25, -0.25, 0.25]);
        assert_relative_eq!(net.laplacian_pinv(), &expected, epsilon = 1e-12);
    }

    #[test]
    fn algebraic_connectivity_examples() {
        assert_relative_eq!(triangle().algebraic_connectivity(), 3.0, epsilon = 1e-9);

        let edge = Network::new(2, vec![(0, 1)], vec![Capacity::Infinite]).unwrap();
        assert_relative_eq!(edge.algebraic_connectivity(), 2.0, epsilon = 1e-9);

        let path = Network::new(
            3,
            vec![(0, 1), (1, 2)],
            vec![Capacity::Infinite, Capacity::Infinite],
        )
        .unwrap();
        assert_relative_eq!(path.algebraic_connectivity(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn capacity_display_and_sum() {
        assert_eq!(Capacity::Infinite.to_string(), "inf");
        assert_eq!(Capacity::Finite(4.0).to_string(), "4");
        assert_eq!(
            Capacity::Finite(1.0).saturating_add(Capacity::Infinite),
            Capacity::Infinite
        );
        assert_eq!(
            Capacity::Finite(1.5).saturating_add(Capacity::Finite(2.0)),
            Capacity::Finite(3.5)
        );
    }
}
