//! Static optimal flow: feasibility certificates and the dual Newton solver.
//!
//! Given a balanced supply vector `p`, the static problem picks the cheapest
//! flow with `B * lambda + p = 0`. Its optimality condition is a single
//! nonlinear equation in the node price vector `zeta`:
//!
//! ```text
//! Z(zeta) = B * grad_inverse(B^T zeta) + p = 0
//! ```
//!
//! which we solve by a damped Newton iteration whose Jacobian is the
//! state-dependent Laplacian `B * diag(h(zeta)) * B^T` with conjugate
//! curvature weights `h`. Prices are only determined up to a constant shift,
//! so every iterate is renormalized to zero mean.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::costs::{self, CostError, LegendreCost};
use crate::network::{Capacity, Network, NetworkError};
use crate::util::DisjointSet;

pub const DEFAULT_MAX_ITERATIONS: usize = 100;

/// How much slack a cut must keep, per the strict-feasibility margin used by
/// `check_cut_feasibility`: a scale-aware default.
pub fn default_feasibility_epsilon(net: &Network) -> f64 {
    let max_cap = net
        .capacities()
        .iter()
        .filter_map(|c| c.as_finite())
        .fold(0.0f64, f64::max);
    if max_cap > 0.0 {
        1e-6 * max_cap
    } else {
        1e-6
    }
}

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("supply must sum to zero, got {sum:e}")]
    Unbalanced { sum: f64 },
    #[error("supply has {got} entries for a {nodes}-node network")]
    SupplySizeMismatch { nodes: usize, got: usize },
    #[error("minimal flow norm is undefined when some edge capacity is infinite")]
    InfiniteCapacity,
    #[error("Newton iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Cost(#[from] CostError),
}

/// A node supply/demand vector constrained to sum to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SupplyVector(DVector<f64>);

impl SupplyVector {
    /// Accepts vectors whose entries sum to zero within `1e-10 * (1 + max |p_i|)`.
    pub fn new(p: DVector<f64>) -> Result<Self, OptimizerError> {
        let sum = p.sum();
        if sum.abs() > 1e-10 * (1.0 + p.amax()) {
            return Err(OptimizerError::Unbalanced { sum });
        }
        Ok(SupplyVector(p))
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.len() == 0
    }
}

/// Slack of one cut against the strict-feasibility margin.
#[derive(Debug, Clone)]
pub struct CutMargin {
    pub node_set: Vec<usize>,
    /// Net supply inside the cut.
    pub net_supply: f64,
    pub capacity: Capacity,
    /// `capacity - epsilon - |net_supply|`; negative means violated.
    pub margin: f64,
}

#[derive(Debug, Clone)]
pub struct FeasibilityReport {
    pub feasible: bool,
    pub epsilon: f64,
    /// Tightest finite-capacity cut, if any cut has finite capacity.
    pub worst_cut: Option<CutMargin>,
}

/// Check that every cut can carry its net supply with `epsilon` to spare.
/// Cuts of infinite capacity can always do so.
pub fn check_cut_feasibility(
    net: &Network,
    supply: &SupplyVector,
    epsilon: f64,
) -> Result<FeasibilityReport, OptimizerError> {
    check_supply_len(net, supply)?;
    let p = supply.as_vector();
    let mut worst: Option<CutMargin> = None;
    for cut in net.cuts()? {
        let Some(cap) = cut.capacity.as_finite() else {
            continue;
        };
        let net_supply: f64 = cut.node_set.iter().map(|&i| p[i]).sum();
        let margin = cap - epsilon - net_supply.abs();
        if worst.as_ref().is_none_or(|w| margin < w.margin) {
            worst = Some(CutMargin {
                node_set: cut.node_set,
                net_supply,
                capacity: cut.capacity,
                margin,
            });
        }
    }
    Ok(FeasibilityReport {
        feasible: worst.as_ref().is_none_or(|w| w.margin >= 0.0),
        epsilon,
        worst_cut: worst,
    })
}

/// Optimal value of `min ||diag(cap)^{-1} lambda||_inf` subject to
/// `B lambda + p = 0`: by cut duality it is the worst ratio of net cut supply
/// to cut capacity. Requires every capacity finite.
pub fn min_infnorm_flow_value(
    net: &Network,
    supply: &SupplyVector,
) -> Result<f64, OptimizerError> {
    check_supply_len(net, supply)?;
    if net.capacities().iter().any(|c| c.is_infinite()) {
        return Err(OptimizerError::InfiniteCapacity);
    }
    let p = supply.as_vector();
    let mut best = 0.0f64;
    for cut in net.cuts()? {
        let cap = cut.capacity.as_finite().expect("all capacities finite");
        let net_supply: f64 = cut.node_set.iter().map(|&i| p[i]).sum();
        best = best.max(net_supply.abs() / cap);
    }
    Ok(best)
}

/// True when the sub-network of infinite-capacity edges spans all nodes, in
/// which case every supply is routable regardless of magnitude.
pub fn check_spanning_tree_infinite(net: &Network) -> bool {
    let mut dsu = DisjointSet::new(net.node_count());
    for (k, &(tail, head)) in net.edges().iter().enumerate() {
        if net.capacities()[k].is_infinite() {
            dsu.union(tail, head);
        }
    }
    dsu.is_single_component()
}

/// Solution of the static problem at one supply vector.
#[derive(Debug, Clone)]
pub struct StaticSolution {
    /// Optimal edge flows, strictly inside every finite capacity bound.
    pub flow: DVector<f64>,
    /// Optimal node prices, normalized to zero mean.
    pub prices: DVector<f64>,
    /// `max(||grad(flow) - B^T prices||_inf, ||B flow + p||_inf)`.
    pub kkt_residual: f64,
    /// `|primal + dual|`; the dual objective's optimal value is the negative
    /// of the primal optimum, and this gap certifies both solutions at once.
    pub duality_gap: f64,
    pub iterations: usize,
}

/// Total transport cost of a flow vector.
pub fn primal_objective(
    costs: &[Box<dyn LegendreCost>],
    flow: &DVector<f64>,
) -> Result<f64, CostError> {
    assert_eq!(costs.len(), flow.len(), "one cost per edge");
    let mut total = 0.0;
    for (k, cost) in costs.iter().enumerate() {
        total += cost.value(flow[k])?;
    }
    Ok(total)
}

/// The dual objective `sum_k conjugate_k((B^T zeta)_k) + p . zeta`, a smooth
/// convex function of the prices whose gradient is `Z(zeta)`. Its minimum
/// equals minus the primal optimum.
pub fn dual_objective(
    net: &Network,
    costs: &[Box<dyn LegendreCost>],
    supply: &SupplyVector,
    zeta: &DVector<f64>,
) -> f64 {
    let z = net.incidence().transpose() * zeta;
    let mut total = supply.as_vector().dot(zeta);
    for (k, cost) in costs.iter().enumerate() {
        total += cost.conjugate(z[k]);
    }
    total
}

/// Newton residual `Z(zeta) = B * grad_inverse(B^T zeta) + p`.
fn residual(
    net: &Network,
    costs: &[Box<dyn LegendreCost>],
    p: &DVector<f64>,
    zeta: &DVector<f64>,
) -> DVector<f64> {
    let z = net.incidence().transpose() * zeta;
    net.incidence() * costs::gradient_inverse_all(costs, &z) + p
}

/// One damped Newton run from `zeta0`. The all-ones kernel of the Laplacian
/// is removed by a rank-one shift, which leaves zero-sum solutions untouched
/// because the right-hand side is zero-sum.
fn newton(
    net: &Network,
    costs: &[Box<dyn LegendreCost>],
    p: &DVector<f64>,
    tolerance: f64,
    max_iterations: usize,
    zeta0: &DVector<f64>,
) -> Result<(DVector<f64>, usize), (usize, f64)> {
    let n = net.node_count();
    let b = net.incidence();
    let bt = b.transpose();
    let mut zeta = zeta0.clone();
    remove_mean(&mut zeta);

    let mut res = residual(net, costs, p, &zeta);
    for iter in 0..max_iterations {
        let norm = res.amax();
        if norm <= tolerance {
            return Ok((zeta, iter));
        }
        let z = &bt * &zeta;
        let weights = costs::conjugate_second_all(costs, &z);
        let mut lap = DMatrix::zeros(n, n);
        for (k, &(tail, head)) in net.edges().iter().enumerate() {
            let h = weights[k];
            lap[(tail, tail)] += h;
            lap[(head, head)] += h;
            lap[(tail, head)] -= h;
            lap[(head, tail)] -= h;
        }
        // Rank-one shift of the all-ones kernel, scaled to the problem.
        let shift = lap.diagonal().sum() / n as f64;
        for i in 0..n {
            for j in 0..n {
                lap[(i, j)] += shift / n as f64;
            }
        }
        let Some(mut step) = lap.lu().solve(&(-&res)) else {
            return Err((iter, norm));
        };
        remove_mean(&mut step);

        // Backtracking on ||Z||^2 guards the barrier costs' curvature.
        let target = res.norm_squared();
        let mut alpha = 1.0;
        loop {
            let trial = &zeta + alpha * &step;
            let trial_res = residual(net, costs, p, &trial);
            if trial_res.norm_squared() <= (1.0 - 1e-4 * alpha) * target {
                zeta = trial;
                remove_mean(&mut zeta);
                res = trial_res;
                break;
            }
            alpha *= 0.5;
            if alpha < 1e-12 {
                return Err((iter, norm));
            }
        }
    }
    let norm = res.amax();
    if norm <= tolerance {
        Ok((zeta, max_iterations))
    } else {
        Err((max_iterations, norm))
    }
}

fn remove_mean(v: &mut DVector<f64>) {
    let mean = v.sum() / v.len() as f64;
    v.add_scalar_mut(-mean);
}

/// Solve the static problem from a cold start.
pub fn solve_static(
    net: &Network,
    costs: &[Box<dyn LegendreCost>],
    supply: &SupplyVector,
    tolerance: f64,
) -> Result<StaticSolution, OptimizerError> {
    solve_static_from(net, costs, supply, tolerance, None)
}

/// Solve the static problem, optionally warm-starting the price vector. If
/// the direct run stalls, restart with ten continuation steps that scale the
/// supply up from zero.
pub fn solve_static_from(
    net: &Network,
    costs: &[Box<dyn LegendreCost>],
    supply: &SupplyVector,
    tolerance: f64,
    warm_start: Option<&DVector<f64>>,
) -> Result<StaticSolution, OptimizerError> {
    check_supply_len(net, supply)?;
    assert_eq!(costs.len(), net.edge_count(), "one cost per edge");
    let p = supply.as_vector();
    let zero = DVector::zeros(net.node_count());
    let start = warm_start.unwrap_or(&zero);

    let direct = newton(net, costs, p, tolerance, DEFAULT_MAX_ITERATIONS, start);
    let (zeta, iterations) = match direct {
        Ok(ok) => ok,
        Err(_) => continuation(net, costs, p, tolerance)?,
    };

    let z = net.incidence().transpose() * &zeta;
    let flow = costs::gradient_inverse_all(costs, &z);
    let mut grad_gap = 0.0f64;
    for (k, cost) in costs.iter().enumerate() {
        grad_gap = grad_gap.max((cost.gradient(flow[k])? - z[k]).abs());
    }
    let balance = (net.incidence() * &flow + p).amax();
    let primal = primal_objective(costs, &flow)?;
    let dual = dual_objective(net, costs, supply, &zeta);

    Ok(StaticSolution {
        flow,
        prices: zeta,
        kkt_residual: grad_gap.max(balance),
        duality_gap: (primal + dual).abs(),
        iterations,
    })
}

fn continuation(
    net: &Network,
    costs: &[Box<dyn LegendreCost>],
    p: &DVector<f64>,
    tolerance: f64,
) -> Result<(DVector<f64>, usize), OptimizerError> {
    let mut zeta = DVector::zeros(net.node_count());
    let mut total_iterations = 0;
    for step in 1..=10 {
        let scaled = p * (step as f64 / 10.0);
        match newton(net, costs, &scaled, tolerance, DEFAULT_MAX_ITERATIONS, &zeta) {
            Ok((z, iters)) => {
                zeta = z;
                total_iterations += iters;
            }
            Err((iters, residual)) => {
                return Err(OptimizerError::NonConvergence {
                    iterations: total_iterations + iters,
                    residual,
                });
            }
        }
    }
    Ok((zeta, total_iterations))
}

fn check_supply_len(net: &Network, supply: &SupplyVector) -> Result<(), OptimizerError> {
    if supply.len() != net.node_count() {
        return Err(OptimizerError::SupplySizeMismatch {
            nodes: net.node_count(),
            got: supply.len(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costs::{LogCosBarrier, QuadraticCost};
    use approx::assert_relative_eq;

    fn triangle(caps: [Capacity; 3]) -> Network {
        Network::new(3, vec![(1, 0), (2, 1), (0, 2)], caps.to_vec()).unwrap()
    }

    fn unit_quadratic_costs() -> Vec<Box<dyn LegendreCost>> {
        (0..3)
            .map(|_| Box::new(QuadraticCost::new(1.0, 0.0).unwrap()) as Box<dyn LegendreCost>)
            .collect()
    }

    fn mixed_costs() -> Vec<Box<dyn LegendreCost>> {
        vec![
            Box::new(QuadraticCost::new(0.2, 2.0).unwrap()),
            Box::new(QuadraticCost::new(10.0, 0.0).unwrap()),
            Box::new(LogCosBarrier::new(0.1, 4.0).unwrap()),
        ]
    }

    fn supply(v: [f64; 3]) -> SupplyVector {
        SupplyVector::new(DVector::from_vec(v.to_vec())).unwrap()
    }

    #[test]
    fn supply_vector_enforces_balance() {
        assert!(SupplyVector::new(DVector::from_vec(vec![1.0, -1.0])).is_ok());
        assert!(matches!(
            SupplyVector::new(DVector::from_vec(vec![1.0, -0.9])),
            Err(OptimizerError::Unbalanced { .. })
        ));
        // Rounding-level imbalance passes.
        assert!(SupplyVector::new(DVector::from_vec(vec![1.0, -1.0 + 1e-12])).is_ok());
    }

    #[test]
    fn cut_feasibility_on_capacitated_triangle() {
        let net = triangle([Capacity::Finite(5.0); 3]);
        let report = check_cut_feasibility(&net, &supply([3.0, -3.0, 0.0]), 1e-6).unwrap();
        assert!(report.feasible);
        let worst = report.worst_cut.unwrap();
        // Any single-node cut around node 0 or 1 carries |3| over capacity 10.
        assert_relative_eq!(worst.margin, 10.0 - 1e-6 - 3.0, epsilon = 1e-12);

        let tight = check_cut_feasibility(&net, &supply([11.0, -11.0, 0.0]), 1e-6).unwrap();
        assert!(!tight.feasible);
        assert!(tight.worst_cut.unwrap().margin < 0.0);
    }

    #[test]
    fn infinite_cuts_are_always_feasible() {
        let net = triangle([Capacity::Infinite; 3]);
        let report = check_cut_feasibility(&net, &supply([100.0, -50.0, -50.0]), 1e-6).unwrap();
        assert!(report.feasible);
        assert!(report.worst_cut.is_none());
    }

    #[test]
    fn min_infnorm_matches_cut_ratio() {
        let net = triangle([Capacity::Finite(5.0); 3]);
        let value = min_infnorm_flow_value(&net, &supply([3.0, -3.0, 0.0])).unwrap();
        assert_relative_eq!(value, 0.3, epsilon = 1e-12);

        let two = Network::new(2, vec![(0, 1)], vec![Capacity::Finite(1.0)]).unwrap();
        let p = SupplyVector::new(DVector::from_vec(vec![0.5, -0.5])).unwrap();
        assert_relative_eq!(min_infnorm_flow_value(&two, &p).unwrap(), 0.5);

        let with_inf = triangle([
            Capacity::Infinite,
            Capacity::Finite(1.0),
            Capacity::Finite(1.0),
        ]);
        assert!(matches!(
            min_infnorm_flow_value(&with_inf, &supply([1.0, -1.0, 0.0])),
            Err(OptimizerError::InfiniteCapacity)
        ));
    }

    #[test]
    fn infinite_spanning_subgraph_detection() {
        let all_inf = triangle([Capacity::Infinite; 3]);
        assert!(check_spanning_tree_infinite(&all_inf));

        // Edges 1 and 2 infinite already span the three nodes.
        let spanning = triangle([
            Capacity::Infinite,
            Capacity::Infinite,
            Capacity::Finite(4.0),
        ]);
        assert!(check_spanning_tree_infinite(&spanning));

        let not_spanning = triangle([
            Capacity::Infinite,
            Capacity::Finite(4.0),
            Capacity::Finite(4.0),
        ]);
        assert!(!check_spanning_tree_infinite(&not_spanning));
    }

    #[test]
    fn quadratic_triangle_closed_form() {
        let net = triangle([Capacity::Infinite; 3]);
        let costs = unit_quadratic_costs();
        let sol = solve_static(&net, &costs, &supply([1.0, -1.0, 0.0]), 1e-12).unwrap();
        let zeta = DVector::from_vec(vec![-1.0 / 3.0, 1.0 / 3.0, 0.0]);
        let flow = DVector::from_vec(vec![2.0 / 3.0, -1.0 / 3.0, -1.0 / 3.0]);
        assert_relative_eq!(sol.prices, zeta, epsilon = 1e-10);
        assert_relative_eq!(sol.flow, flow, epsilon = 1e-10);
        assert!(sol.kkt_residual <= 1e-12);
        assert!(sol.duality_gap <= 1e-10);
    }

    #[test]
    fn zero_supply_gives_reference_flows() {
        let net = triangle([
            Capacity::Infinite,
            Capacity::Infinite,
            Capacity::Finite(4.0),
        ]);
        let costs = mixed_costs();
        // Flows at the cost minima (2, 0, 0) already balance p = (-2, 2, 0)
        // with zero prices; the solver must find exactly that.
        let sol = solve_static(&net, &costs, &supply([2.0, -2.0, 0.0]), 1e-12).unwrap();
        assert_relative_eq!(sol.flow, DVector::from_vec(vec![2.0, 0.0, 0.0]), epsilon = 1e-10);
        assert!(sol.prices.amax() <= 1e-10);
    }

    #[test]
    fn prices_are_normalized_to_zero_mean() {
        let net = triangle([
            Capacity::Infinite,
            Capacity::Infinite,
            Capacity::Finite(4.0),
        ]);
        let costs = mixed_costs();
        let sol = solve_static(&net, &costs, &supply([1.0, 2.0, -3.0]), 1e-11).unwrap();
        assert!(sol.prices.sum().abs() <= 1e-12);
        assert!(sol.kkt_residual <= 1e-11);
        assert!(sol.duality_gap <= 1e-8);
        // Flow on the barrier edge stays strictly inside its bound.
        assert!(sol.flow[2].abs() < 4.0);
    }

    #[test]
    fn warm_start_converges_faster_nearby() {
        let net = triangle([
            Capacity::Infinite,
            Capacity::Infinite,
            Capacity::Finite(4.0),
        ]);
        let costs = mixed_costs();
        let sol = solve_static(&net, &costs, &supply([1.0, 2.0, -3.0]), 1e-11).unwrap();
        let nearby = supply([1.01, 2.0, -3.01]);
        let warm =
            solve_static_from(&net, &costs, &nearby, 1e-11, Some(&sol.prices)).unwrap();
        assert!(warm.iterations <= sol.iterations);
        assert!(warm.kkt_residual <= 1e-11);
    }

    #[test]
    fn dual_objective_sign_convention() {
        let net = triangle([Capacity::Infinite; 3]);
        let costs = unit_quadratic_costs();
        let p = supply([1.0, -1.0, 0.0]);
        let zeta = DVector::from_vec(vec![-1.0 / 3.0, 1.0 / 3.0, 0.0]);
        let dual = dual_objective(&net, &costs, &p, &zeta);
        // Primal optimum is 1/3; the dual objective's minimum is its negative.
        assert_relative_eq!(dual, -1.0 / 3.0, epsilon = 1e-14);
        // At zero prices with reference-free quadratics the dual objective is 0.
        assert_eq!(
            dual_objective(&net, &costs, &p, &DVector::zeros(3)),
            0.0
        );
    }

    #[test]
    fn dual_objective_grows_away_from_optimum() {
        let net = triangle([Capacity::Infinite; 3]);
        let costs = unit_quadratic_costs();
        let p = supply([1.0, -1.0, 0.0]);
        let zeta = DVector::from_vec(vec![-1.0 / 3.0, 1.0 / 3.0, 0.0]);
        let base = dual_objective(&net, &costs, &p, &zeta);
        for dir in [[1.0, 0.0, -1.0], [0.3, -0.8, 0.5], [-1.0, 2.0, -1.0]] {
            let perturbed = &zeta + DVector::from_vec(dir.to_vec()) * 0.05;
            assert!(dual_objective(&net, &costs, &p, &perturbed) >= base - 1e-12);
        }
    }

    #[test]
    fn price_shift_invariance_of_flows() {
        let net = triangle([
            Capacity::Infinite,
            Capacity::Infinite,
            Capacity::Finite(4.0),
        ]);
        let costs = mixed_costs();
        let zeta = DVector::from_vec(vec![0.4, -1.0, 0.6]);
        let shifted = &zeta + DVector::from_element(3, 17.0);
        let z0 = net.incidence().transpose() * &zeta;
        let z1 = net.incidence().transpose() * &shifted;
        assert_relative_eq!(
            costs::gradient_inverse_all(&costs, &z0),
            costs::gradient_inverse_all(&costs, &z1),
            epsilon = 1e-12
        );
    }

    #[test]
    fn hard_supply_needs_continuation_but_solves() {
        // Demand close to the finite cut bound forces the barrier deep into
        // saturation; the cold Newton run may stall, continuation must not.
        let net = Network::new(
            2,
            vec![(0, 1)],
            vec![Capacity::Finite(4.0)],
        )
        .unwrap();
        let costs: Vec<Box<dyn LegendreCost>> =
            vec![Box::new(LogCosBarrier::new(0.1, 4.0).unwrap())];
        let p = SupplyVector::new(DVector::from_vec(vec![-3.999, 3.999])).unwrap();
        let sol = solve_static(&net, &costs, &p, 1e-10).unwrap();
        assert_relative_eq!(sol.flow[0], 3.999, epsilon = 1e-9);
        assert!(sol.flow[0] < 4.0);
    }

    #[test]
    fn infeasible_supply_reports_non_convergence() {
        // Demand past the barrier capacity has no optimal prices at all;
        // Newton and the continuation fallback must both give up cleanly.
        let net = Network::new(2, vec![(0, 1)], vec![Capacity::Finite(1.0)]).unwrap();
        let costs: Vec<Box<dyn LegendreCost>> =
            vec![Box::new(LogCosBarrier::new(0.1, 1.0).unwrap())];
        let p = SupplyVector::new(DVector::from_vec(vec![-1.5, 1.5])).unwrap();
        assert!(matches!(
            solve_static(&net, &costs, &p, 1e-10),
            Err(OptimizerError::NonConvergence { .. })
        ));
    }

    #[test]
    fn mismatched_supply_is_rejected() {
        let net = triangle([Capacity::Infinite; 3]);
        let p = SupplyVector::new(DVector::from_vec(vec![1.0, -1.0])).unwrap();
        assert!(matches!(
            solve_static(&net, &unit_quadratic_costs(), &p, 1e-9),
            Err(OptimizerError::SupplySizeMismatch { .. })
        ));
    }
}
