//! Price-based flow controllers.
//!
//! Both controllers steer a node price vector `zeta` and set edge flows
//! through the cost gradients. The key operator is
//!
//! ```text
//! Xi(zeta) = X(zeta)^T * H(zeta)^{-1} * B^T * (B B^T)^+
//! ```
//!
//! with `H(zeta) = diag(h)`, `h_k = conjugate_second((B^T zeta)_k)`: the
//! tree-expansion inverse of the state-dependent Laplacian
//! `L(zeta) = B H B^T`, in the sense that `L(zeta) * Xi(zeta) * y = y` for
//! every zero-mean `y`.
//!
//! * The feed-forward law `dzeta/dt = -Q * Xi * dp/dt` keeps an exactly
//!   optimal price trajectory optimal as the supply moves (`Q` is the
//!   zero-mean projector; `L Q = L`, so the projection costs nothing and
//!   pins the price average).
//! * The feedback law adds storage levels and the optimality residual
//!   `Z(zeta) = B grad_inverse(B^T zeta) + p`, and corrects flows by the
//!   storage imbalance, driving both to zero from any initial state.

use nalgebra::{DMatrix, DVector};

use crate::costs::{self, LegendreCost};
use crate::dirichlet::{self, DirichletError, EdgeWeights};
use crate::exosystem::HarmonicExo;
use crate::network::Network;
use crate::optimizer::SupplyVector;

/// Feedback controller parameters.
#[derive(Debug, Clone, Copy)]
pub struct ControllerConfig {
    /// Gain on the optimality residual; must be positive. The closed loop
    /// contracts at least at rate `min(algebraic connectivity, gain)`.
    pub gain: f64,
    /// Target value of the conserved price sum `sum(zeta)`.
    pub mean_pin: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            gain: 10.0,
            mean_pin: 0.0,
        }
    }
}

/// Conjugate curvature weights `h_k = conjugate_second((B^T zeta)_k)`.
pub fn conjugate_weights(
    net: &Network,
    costs: &[Box<dyn LegendreCost>],
    zeta: &DVector<f64>,
) -> EdgeWeights {
    let z = net.incidence().transpose() * zeta;
    EdgeWeights::new(costs::conjugate_second_all(costs, &z))
        .expect("conjugate curvature is strictly positive")
}

/// State-dependent Laplacian `L(zeta) = B * diag(h(zeta)) * B^T`.
pub fn state_laplacian(
    net: &Network,
    costs: &[Box<dyn LegendreCost>],
    zeta: &DVector<f64>,
) -> DMatrix<f64> {
    let weights = conjugate_weights(net, costs, zeta);
    let n = net.node_count();
    let mut lap = DMatrix::zeros(n, n);
    for (k, &(tail, head)) in net.edges().iter().enumerate() {
        let h = weights.as_slice()[k];
        lap[(tail, tail)] += h;
        lap[(head, head)] += h;
        lap[(tail, head)] -= h;
        lap[(head, tail)] -= h;
    }
    lap
}

/// Optimality residual `Z(zeta, p) = B * grad_inverse(B^T zeta) + p`.
/// Zero exactly on optimal price vectors for the supply `p`.
pub fn residual_z(
    net: &Network,
    costs: &[Box<dyn LegendreCost>],
    zeta: &DVector<f64>,
    supply: &SupplyVector,
) -> DVector<f64> {
    let z = net.incidence().transpose() * zeta;
    net.incidence() * costs::gradient_inverse_all(costs, &z) + supply.as_vector()
}

/// The operator `Xi(zeta)`; see the module docs. Annihilates constant
/// vectors and inverts `L(zeta)` on the zero-mean subspace.
pub fn xi_matrix(
    net: &Network,
    costs: &[Box<dyn LegendreCost>],
    zeta: &DVector<f64>,
) -> Result<DMatrix<f64>, DirichletError> {
    let weights = conjugate_weights(net, costs, zeta);
    let x = dirichlet::build_x(net, &weights)?;
    // X^T with columns divided by h, times B^T (B B^T)^+.
    let mut xt = x.entries.transpose();
    for (k, &h) in weights.as_slice().iter().enumerate() {
        for i in 0..xt.nrows() {
            xt[(i, k)] /= h;
        }
    }
    Ok(xt * net.incidence().transpose() * net.laplacian_pinv())
}

/// Subtract the mean from every entry: the projector `Q = I - 11^T/n`.
fn project_zero_mean(mut v: DVector<f64>) -> DVector<f64> {
    let mean = v.sum() / v.len() as f64;
    v.add_scalar_mut(-mean);
    v
}

/// Feed-forward price dynamics `dzeta/dt = -Q * Xi(zeta) * dp/dt`.
///
/// Initialized on an optimal price vector, this keeps the optimality
/// residual at zero along the whole supply trajectory.
pub fn feedforward_rhs(
    net: &Network,
    costs: &[Box<dyn LegendreCost>],
    exo: &HarmonicExo,
    zeta: &DVector<f64>,
    exo_state: &DVector<f64>,
) -> Result<DVector<f64>, DirichletError> {
    let xi = xi_matrix(net, costs, zeta)?;
    let p_dot = exo.output_derivative(exo_state);
    Ok(project_zero_mean(-(xi * p_dot)))
}

/// Flows commanded by the feed-forward controller: `grad_inverse(B^T zeta)`.
pub fn feedforward_output(
    net: &Network,
    costs: &[Box<dyn LegendreCost>],
    zeta: &DVector<f64>,
) -> DVector<f64> {
    let z = net.incidence().transpose() * zeta;
    costs::gradient_inverse_all(costs, &z)
}

/// Feedback price dynamics
/// `dzeta/dt = -Q * Xi(zeta) * (dp/dt + x + gain * Z(zeta, p))`.
pub fn feedback_rhs(
    net: &Network,
    costs: &[Box<dyn LegendreCost>],
    exo: &HarmonicExo,
    config: &ControllerConfig,
    zeta: &DVector<f64>,
    storage: &DVector<f64>,
    exo_state: &DVector<f64>,
) -> Result<DVector<f64>, DirichletError> {
    assert!(config.gain > 0.0, "feedback gain must be positive");
    let xi = xi_matrix(net, costs, zeta)?;
    let supply = exo.output(exo_state);
    let drive = exo.output_derivative(exo_state)
        + storage
        + config.gain * residual_z(net, costs, zeta, &supply);
    Ok(project_zero_mean(-(xi * drive)))
}

/// Flows commanded by the feedback controller:
/// `grad_inverse(B^T zeta) - B^T x`. The storage correction term drains
/// imbalances; capacity bounds hold once storages have leveled.
pub fn feedback_output(
    net: &Network,
    costs: &[Box<dyn LegendreCost>],
    zeta: &DVector<f64>,
    storage: &DVector<f64>,
) -> DVector<f64> {
    feedforward_output(net, costs, zeta) - net.incidence().transpose() * storage
}
