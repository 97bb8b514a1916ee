//! Closed-loop simulation of the controlled network.
//!
//! Integrates the coupled storage / price / supply dynamics
//!
//! ```text
//! dx/dt    = B lambda + p      (storage levels)
//! dzeta/dt = controller law    (node prices)
//! dw/dt    = phasor rotation   (supply generator)
//! ```
//!
//! with classical fixed-step RK4. Phase resets are snapped to the step grid
//! and applied as discrete jumps between steps, so every integration
//! interval sees smooth dynamics. Recorded samples carry the Lyapunov pair
//! `(V, W)` and, when the static problem is solvable at that instant, the
//! distance of the commanded flows from the instantaneous optimum.

use nalgebra::DVector;

use crate::control::{self, ControllerConfig};
use crate::costs::LegendreCost;
use crate::dirichlet::DirichletError;
use crate::exosystem::HarmonicExo;
use crate::network::{Network, NetworkError};
use crate::optimizer::{self, SupplyVector};

/// Which price law drives the loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerKind {
    /// Pure feed-forward: exact on optimal initial prices, no correction.
    FeedForward,
    /// Storage- and residual-corrected law; converges from any start.
    Feedback,
}

/// Simulation horizon, step sizes and controller selection.
#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    pub controller: ControllerKind,
    pub config: ControllerConfig,
    /// Final time; must be a whole number of steps.
    pub t_end: f64,
    /// RK4 step.
    pub dt: f64,
    /// Sampling period for recorded output; must be a whole number of steps.
    pub record_every: f64,
    /// Newton tolerance for the per-sample reference solves.
    pub reference_tol: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            controller: ControllerKind::Feedback,
            config: ControllerConfig::default(),
            t_end: 10.0,
            dt: 1e-3,
            record_every: 1e-2,
            reference_tol: 1e-10,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("time step must be positive and finite, got {dt}")]
    BadTimeStep { dt: f64 },
    #[error("horizon {t_end} is not a whole number of steps of size {dt}")]
    HorizonOffGrid { t_end: f64, dt: f64 },
    #[error("recording period {record_every} is not a whole number of steps of size {dt}")]
    RecordingOffGrid { record_every: f64, dt: f64 },
    #[error("initial {name} has {got} entries, network has {expected} nodes")]
    StateSizeMismatch {
        name: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("network has {edges} edges but {costs} cost functions were given")]
    CostCountMismatch { edges: usize, costs: usize },
    #[error("supply generator drives {exo} nodes, network has {network}")]
    ExoNodeMismatch { network: usize, exo: usize },
    #[error("feedback gain must be positive, got {gain}")]
    NonPositiveGain { gain: f64 },
    #[error("state became non-finite at t = {t}")]
    NonFiniteState { t: f64 },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Dirichlet(#[from] DirichletError),
}

/// One classical RK4 step of `dy/dt = f(t, y)` from `t` to `t + dt`.
pub fn step_rk4<F>(f: &mut F, t: f64, state: &DVector<f64>, dt: f64) -> Result<DVector<f64>, SimError>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>, SimError>,
{
    let k1 = f(t, state)?;
    let k2 = f(t + 0.5 * dt, &(state + 0.5 * dt * &k1))?;
    let k3 = f(t + 0.5 * dt, &(state + 0.5 * dt * &k2))?;
    let k4 = f(t + dt, &(state + dt * &k3))?;
    Ok(state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
}

/// Lyapunov pair for the closed loop: `V = ||x - x_avg 1||^2 / 2` measures
/// storage imbalance around the conserved average, `W = ||Z||^2 / 2` the
/// optimality residual of the prices.
pub fn lyapunov_metrics(
    net: &Network,
    costs: &[Box<dyn LegendreCost>],
    x: &DVector<f64>,
    zeta: &DVector<f64>,
    supply: &SupplyVector,
    x_avg: f64,
) -> (f64, f64) {
    let centered = x.map(|xi| xi - x_avg);
    let v = 0.5 * centered.norm_squared();
    let z = control::residual_z(net, costs, zeta, supply);
    let w = 0.5 * z.norm_squared();
    (v, w)
}

/// One recorded instant of the closed loop.
#[derive(Debug, Clone)]
pub struct Sample {
    pub t: f64,
    pub x: DVector<f64>,
    pub zeta: DVector<f64>,
    /// Flows commanded by the active controller.
    pub lambda: DVector<f64>,
    /// Supply injected by the generator at this instant.
    pub supply: DVector<f64>,
    /// Storage imbalance `V`.
    pub storage_v: f64,
    /// Price residual `W`.
    pub residual_w: f64,
    /// `V + W`; decays exponentially under the feedback law.
    pub total_u: f64,
    /// `max |B^T x|`: zero exactly when all storages are level.
    pub balancing_residual: f64,
    /// `max |lambda - lambda_opt|` against the instantaneous static optimum,
    /// or `None` when that problem has no solution (e.g. infeasible supply).
    pub optimality_gap: Option<f64>,
}

/// Recorded closed-loop run.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub samples: Vec<Sample>,
    /// Phase-reset instants inside the horizon, snapped to the step grid.
    pub reset_times: Vec<f64>,
}

fn steps_on_grid(span: f64, dt: f64) -> Option<usize> {
    if !(span.is_finite() && span > 0.0) {
        return None;
    }
    let steps = (span / dt).round();
    if steps < 1.0 || (steps * dt - span).abs() > 1e-9 * span.abs().max(1.0) {
        return None;
    }
    Some(steps as usize)
}

/// Integrate the controlled network from `(x0, zeta0)` and record samples.
///
/// The initial prices are shifted so their mean equals `config.mean_pin`;
/// both control laws conserve the price sum, so the pin holds for the whole
/// run and never affects the commanded flows.
pub fn run_closed_loop(
    net: &Network,
    costs: &[Box<dyn LegendreCost>],
    exo: &HarmonicExo,
    opts: &SimOptions,
    x0: &DVector<f64>,
    zeta0: &DVector<f64>,
) -> Result<Trajectory, SimError> {
    let n = net.node_count();
    if !(opts.dt.is_finite() && opts.dt > 0.0) {
        return Err(SimError::BadTimeStep { dt: opts.dt });
    }
    let n_steps = steps_on_grid(opts.t_end, opts.dt).ok_or(SimError::HorizonOffGrid {
        t_end: opts.t_end,
        dt: opts.dt,
    })?;
    let stride = steps_on_grid(opts.record_every, opts.dt).ok_or(SimError::RecordingOffGrid {
        record_every: opts.record_every,
        dt: opts.dt,
    })?;
    if x0.len() != n {
        return Err(SimError::StateSizeMismatch {
            name: "storage",
            expected: n,
            got: x0.len(),
        });
    }
    if zeta0.len() != n {
        return Err(SimError::StateSizeMismatch {
            name: "price",
            expected: n,
            got: zeta0.len(),
        });
    }
    if costs.len() != net.edge_count() {
        return Err(SimError::CostCountMismatch {
            edges: net.edge_count(),
            costs: costs.len(),
        });
    }
    if exo.node_count() != n {
        return Err(SimError::ExoNodeMismatch {
            network: n,
            exo: exo.node_count(),
        });
    }
    if opts.controller == ControllerKind::Feedback && !(opts.config.gain > 0.0) {
        return Err(SimError::NonPositiveGain {
            gain: opts.config.gain,
        });
    }
    // Fail up front if the tree family behind Xi cannot be enumerated.
    net.spanning_trees()?;

    let exo = exo.snapped_to_grid(opts.dt);
    let exo_dim = exo.state_dim();
    let x_avg = x0.sum() / n as f64;

    // Pin the price mean; flows depend on zeta only through B^T zeta.
    let mut zeta = zeta0.clone();
    let shift = opts.config.mean_pin - zeta.sum() / n as f64;
    zeta.add_scalar_mut(shift);

    // Packed state [x; zeta; w].
    let mut state = DVector::zeros(2 * n + exo_dim);
    state.rows_mut(0, n).copy_from(x0);
    state.rows_mut(n, n).copy_from(&zeta);
    state.rows_mut(2 * n, exo_dim).copy_from(&exo.initial_state());

    let kind = opts.controller;
    let config = opts.config;
    let mut rhs = |t: f64, s: &DVector<f64>| -> Result<DVector<f64>, SimError> {
        // Guard every RK4 stage: a diverging loop (e.g. feedback chasing an
        // infeasible supply) must surface as an error, not poison the algebra.
        if !s.iter().all(|v| v.is_finite()) {
            return Err(SimError::NonFiniteState { t });
        }
        let x = s.rows(0, n).into_owned();
        let zeta = s.rows(n, n).into_owned();
        let w = s.rows(2 * n, exo_dim).into_owned();
        let (zeta_dot, lambda) = match kind {
            ControllerKind::FeedForward => (
                control::feedforward_rhs(net, costs, &exo, &zeta, &w)?,
                control::feedforward_output(net, costs, &zeta),
            ),
            ControllerKind::Feedback => (
                control::feedback_rhs(net, costs, &exo, &config, &zeta, &x, &w)?,
                control::feedback_output(net, costs, &zeta, &x),
            ),
        };
        let x_dot = net.incidence() * lambda + exo.output(&w).as_vector();
        let mut out = DVector::zeros(2 * n + exo_dim);
        out.rows_mut(0, n).copy_from(&x_dot);
        out.rows_mut(n, n).copy_from(&zeta_dot);
        out.rows_mut(2 * n, exo_dim).copy_from(&exo.derivative(&w));
        Ok(out)
    };

    let mut samples = Vec::with_capacity(n_steps / stride + 1);
    let mut warm: Option<DVector<f64>> = None;
    let mut record = |t: f64, s: &DVector<f64>, warm: &mut Option<DVector<f64>>| {
        let x = s.rows(0, n).into_owned();
        let zeta = s.rows(n, n).into_owned();
        let w = s.rows(2 * n, exo_dim).into_owned();
        let supply = exo.output(&w);
        let lambda = match kind {
            ControllerKind::FeedForward => control::feedforward_output(net, costs, &zeta),
            ControllerKind::Feedback => control::feedback_output(net, costs, &zeta, &x),
        };
        let (storage_v, residual_w) = lyapunov_metrics(net, costs, &x, &zeta, &supply, x_avg);
        let balancing_residual = (net.incidence().transpose() * &x).amax();
        let optimality_gap = match optimizer::solve_static_from(
            net,
            costs,
            &supply,
            opts.reference_tol,
            warm.as_ref(),
        ) {
            Ok(sol) => {
                let gap = (&lambda - &sol.flow).amax();
                *warm = Some(sol.prices);
                Some(gap)
            }
            Err(_) => None,
        };
        samples.push(Sample {
            t,
            x,
            zeta,
            lambda,
            supply: supply.as_vector().clone(),
            storage_v,
            residual_w,
            total_u: storage_v + residual_w,
            balancing_residual,
            optimality_gap,
        });
    };

    record(0.0, &state, &mut warm);
    for i in 0..n_steps {
        let t = i as f64 * opts.dt;
        let t_next = (i + 1) as f64 * opts.dt;
        state = step_rk4(&mut rhs, t, &state, opts.dt)?;
        if !state.iter().all(|v| v.is_finite()) {
            return Err(SimError::NonFiniteState { t: t_next });
        }
        // Snapped resets land exactly on step boundaries.
        let w = state.rows(2 * n, exo_dim).into_owned();
        let w = exo.apply_resets(&w, t, t_next);
        state.rows_mut(2 * n, exo_dim).copy_from(&w);
        if (i + 1) % stride == 0 {
            record(t_next, &state, &mut warm);
        }
    }

    let reset_times = exo
        .resets()
        .iter()
        .map(|r| r.time)
        .filter(|&t| t > 0.0 && t <= opts.t_end + 1e-12)
        .collect();
    Ok(Trajectory {
        samples,
        reset_times,
    })
}
