//! Optimal flow control for storage and distribution networks with
//! time-varying supply and demand.
//!
//! A network of storage nodes trades a commodity over capacity-limited
//! edges. Each edge has a strictly convex transport cost; node supplies
//! move continuously, generated by a bank of harmonic channels. This crate
//! provides:
//!
//! * the static optimal flow problem and its price-based dual
//!   ([`optimizer`]),
//! * a spanning-tree expansion for inverting weighted graph Laplacians
//!   ([`dirichlet`]),
//! * price dynamics that track the moving optimum, either by pure
//!   feed-forward or with storage feedback ([`control`]),
//! * a fixed-step closed-loop simulator with Lyapunov diagnostics
//!   ([`sim`]).
//!
//! Flows are driven by node price differences through the cost gradient
//! inverses, so capacity limits encoded as barrier costs are respected by
//! construction rather than by clipping.

pub mod control;
pub mod costs;
pub mod dirichlet;
pub mod exosystem;
pub mod network;
pub mod optimizer;
pub mod sim;
mod util;

pub use control::{
    feedback_output, feedback_rhs, feedforward_output, feedforward_rhs, residual_z,
    state_laplacian, xi_matrix, ControllerConfig,
};
pub use costs::{CostError, LegendreCost, LogCosBarrier, QuadraticCost};
pub use dirichlet::{build_x, solve_dirichlet, DirichletError, EdgeWeights, XMatrix};
pub use exosystem::{Channel, ExoError, HarmonicExo, PhaseReset};
pub use network::{Capacity, Cut, Network, NetworkError, SpanningTree};
pub use optimizer::{
    check_cut_feasibility, min_infnorm_flow_value, solve_static, solve_static_from,
    FeasibilityReport, OptimizerError, StaticSolution, SupplyVector,
};
pub use sim::{
    lyapunov_metrics, run_closed_loop, step_rk4, ControllerKind, Sample, SimError, SimOptions,
    Trajectory,
};
