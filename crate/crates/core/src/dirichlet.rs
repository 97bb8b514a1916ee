//! Tree-expansion solver for weighted graph Laplacian systems.
//!
//! For positive edge weights `h` and any edge vector `v`, the system
//! `(B * diag(h) * B^T) z = B v` is solved in closed form by
//! `z = X^T * diag(h)^{-1} * v`, where the m x n matrix `X` is assembled from
//! the spanning trees of the graph:
//!
//! * the weight of a tree is the product of its edge weights,
//! * entry `X[k][i]` sums, over the trees containing edge `k`, the weight of
//!   each tree in which node `i` lies on the tail side of `k` once `k` is
//!   removed from that tree,
//! * everything is normalized by the total tree weight.
//!
//! The defining contract is the residual identity above; it is what the test
//! suite enforces against an independent pseudoinverse oracle. All entries of
//! `X` lie in `[0, 1]`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::network::{Network, NetworkError, SpanningTree};
use crate::util::{DisjointSet, KahanSum};

#[derive(Debug, Error)]
pub enum DirichletError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("{edges} edges but {weights} weights")]
    WeightCountMismatch { edges: usize, weights: usize },
    #[error("edge weight {index} must be positive and finite, got {value}")]
    BadWeight { index: usize, value: f64 },
}

/// Positive, finite per-edge weights.
#[derive(Debug, Clone)]
pub struct EdgeWeights(Vec<f64>);

impl EdgeWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self, DirichletError> {
        for (index, &value) in weights.iter().enumerate() {
            if !(value.is_finite() && value > 0.0) {
                return Err(DirichletError::BadWeight { index, value });
            }
        }
        Ok(EdgeWeights(weights))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// The normalized tree-expansion matrix together with the normalizer.
#[derive(Debug, Clone)]
pub struct XMatrix {
    /// m x n; entries in [0, 1].
    pub entries: DMatrix<f64>,
    /// Total tree weight (sum over spanning trees of the edge-weight product).
    pub tree_weight_sum: f64,
}

/// Product of the weights of a tree's edges.
pub fn tree_weight(tree: &SpanningTree, weights: &EdgeWeights) -> f64 {
    tree.edge_indices
        .iter()
        .map(|&k| weights.as_slice()[k])
        .product()
}

/// True for the one topology with a hand-written closed form below: the
/// oriented 3-cycle with edges (2,1), (3,2), (1,3) in 1-based labels.
fn is_canonical_triangle(net: &Network) -> bool {
    net.node_count() == 3 && net.edges() == [(1, 0), (2, 1), (0, 2)]
}

/// Closed-form `X` for the canonical 3-cycle. Doubles as a regression oracle
/// for the enumerating path.
pub fn triangle_x(weights: &EdgeWeights) -> XMatrix {
    assert_eq!(weights.len(), 3, "triangle has exactly three edges");
    let [h1, h2, h3] = [
        weights.as_slice()[0],
        weights.as_slice()[1],
        weights.as_slice()[2],
    ];
    let hbar = h1 * h2 + h2 * h3 + h1 * h3;
    let entries = DMatrix::from_row_slice(
        3,
        3,
        &[
            0.0,
            h1 * h3 + h1 * h2,
            h1 * h2,
            h2 * h3,
            0.0,
            h2 * h3 + h1 * h2,
            h2 * h3 + h1 * h3,
            h1 * h3,
            0.0,
        ],
    ) / hbar;
    XMatrix {
        entries,
        tree_weight_sum: hbar,
    }
}

/// Assemble `X` for any connected network, dispatching to the closed form
/// when the topology allows it.
pub fn build_x(net: &Network, weights: &EdgeWeights) -> Result<XMatrix, DirichletError> {
    check_weights(net, weights)?;
    if is_canonical_triangle(net) {
        return Ok(triangle_x(weights));
    }
    build_x_by_enumeration(net, weights)
}

/// Assemble `X` by explicit spanning-tree enumeration, regardless of
/// topology. Compensated summation keeps the accumulations accurate when the
/// tree count is large.
pub fn build_x_by_enumeration(
    net: &Network,
    weights: &EdgeWeights,
) -> Result<XMatrix, DirichletError> {
    check_weights(net, weights)?;
    let trees = net.spanning_trees()?;
    let (n, m) = (net.node_count(), net.edge_count());

    let mut total = KahanSum::default();
    let mut sums = vec![KahanSum::default(); m * n];
    for tree in trees {
        let w = tree_weight(tree, weights);
        total.add(w);
        for &k in &tree.edge_indices {
            let tail_side = tail_component(net, tree, k);
            for i in 0..n {
                if tail_side[i] {
                    sums[k * n + i].add(w);
                }
            }
        }
    }
    let hbar = total.value();
    let entries = DMatrix::from_fn(m, n, |k, i| sums[k * n + i].value() / hbar);
    Ok(XMatrix {
        entries,
        tree_weight_sum: hbar,
    })
}

/// Solve `(B * diag(h) * B^T) z = B v` via the tree expansion.
pub fn solve_dirichlet(
    net: &Network,
    weights: &EdgeWeights,
    v: &DVector<f64>,
) -> Result<DVector<f64>, DirichletError> {
    assert_eq!(v.len(), net.edge_count(), "one entry of v per edge");
    let x = build_x(net, weights)?;
    let scaled = DVector::from_fn(v.len(), |k, _| v[k] / weights.as_slice()[k]);
    Ok(x.entries.transpose() * scaled)
}

fn check_weights(net: &Network, weights: &EdgeWeights) -> Result<(), DirichletError> {
    if weights.len() != net.edge_count() {
        return Err(DirichletError::WeightCountMismatch {
            edges: net.edge_count(),
            weights: weights.len(),
        });
    }
    Ok(())
}

/// Membership mask of the component containing `k`'s tail after removing `k`
/// from the tree.
fn tail_component(net: &Network, tree: &SpanningTree, k: usize) -> Vec<bool> {
    let n = net.node_count();
    let mut dsu = DisjointSet::new(n);
    for &e in &tree.edge_indices {
        if e != k {
            let (tail, head) = net.edges()[e];
            dsu.union(tail, head);
        }
    }
    let root = dsu.find(net.edges()[k].0);
    (0..n).map(|i| dsu.find(i) == root).collect()
}
