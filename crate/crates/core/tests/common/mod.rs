//! Shared fixtures, random instance generators, and independent oracles
//! for the integration suites.

// Each test target compiles its own copy and none uses every helper.
#![allow(dead_code)]

use dualflow::{
    Capacity, Channel, HarmonicExo, LegendreCost, LogCosBarrier, Network, PhaseReset,
    QuadraticCost, SupplyVector,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// The capacitated triangle used throughout: edges (1,0), (2,1), (0,2),
/// third edge soft-limited at 4.
pub fn reference_network() -> Network {
    Network::new(
        3,
        vec![(1, 0), (2, 1), (0, 2)],
        vec![Capacity::Infinite, Capacity::Infinite, Capacity::Finite(4.0)],
    )
    .unwrap()
}

pub fn reference_costs() -> Vec<Box<dyn LegendreCost>> {
    vec![
        Box::new(QuadraticCost::new(0.2, 2.0).unwrap()),
        Box::new(QuadraticCost::new(10.0, 0.0).unwrap()),
        Box::new(LogCosBarrier::new(0.1, 4.0).unwrap()),
    ]
}

pub fn reference_channels() -> Vec<Channel> {
    vec![
        Channel { amplitude: 2.0, frequency: 2.0, phase: 0.0 },
        Channel { amplitude: 4.0, frequency: 4.0, phase: 2.0 },
        Channel { amplitude: 4.0, frequency: 8.0, phase: 3.14 },
    ]
}

/// Reference supply generator with the scheduled phase change at t = 3.
pub fn reference_exo() -> HarmonicExo {
    HarmonicExo::new(
        reference_channels(),
        reference_network().incidence().clone(),
        vec![PhaseReset { time: 3.0, phases: vec![4.0, 6.0, 2.0] }],
    )
    .unwrap()
}

/// Same generator without the phase change.
pub fn reference_exo_no_reset() -> HarmonicExo {
    HarmonicExo::new(
        reference_channels(),
        reference_network().incidence().clone(),
        vec![],
    )
    .unwrap()
}

/// Random connected graph: a random spanning tree plus up to `extra`
/// additional edges, no duplicate node pairs, random orientations,
/// all capacities infinite.
pub fn random_connected_network(rng: &mut ChaCha8Rng, n: usize, extra: usize) -> Network {
    let edges = random_connected_edges(rng, n, extra);
    let caps = vec![Capacity::Infinite; edges.len()];
    Network::new(n, edges, caps).unwrap()
}

pub fn random_connected_edges(
    rng: &mut ChaCha8Rng,
    n: usize,
    extra: usize,
) -> Vec<(usize, usize)> {
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for i in 1..n {
        let j = rng.gen_range(0..i);
        if rng.gen_bool(0.5) {
            edges.push((i, j));
        } else {
            edges.push((j, i));
        }
    }
    let mut added = 0;
    let mut attempts = 0;
    while added < extra && attempts < 200 {
        attempts += 1;
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a == b || edges.iter().any(|&(x, y)| (x, y) == (a, b) || (x, y) == (b, a)) {
            continue;
        }
        edges.push((a, b));
        added += 1;
    }
    edges
}

/// Log-uniform edge weights in [0.1, 10].
pub fn random_weights(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    (0..m)
        .map(|_| {
            let log: f64 = rng.gen_range(0.1f64.ln()..10.0f64.ln());
            log.exp()
        })
        .collect()
}

/// Mean-removed random vector with entries of order `scale`.
pub fn random_zero_sum(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    let mut v = DVector::from_fn(n, |_, _| rng.gen_range(-scale..scale));
    let mean = v.sum() / n as f64;
    v.add_scalar_mut(-mean);
    v
}

/// A random problem instance that is feasible by construction: the supply
/// is the negated divergence of a witness flow kept strictly inside every
/// barrier capacity.
pub struct RandomInstance {
    pub net: Network,
    pub costs: Vec<Box<dyn LegendreCost>>,
    pub supply: SupplyVector,
    pub witness: DVector<f64>,
}

pub fn random_feasible_instance(rng: &mut ChaCha8Rng, n: usize, extra: usize) -> RandomInstance {
    let edges = random_connected_edges(rng, n, extra);
    let m = edges.len();
    let mut costs: Vec<Box<dyn LegendreCost>> = Vec::with_capacity(m);
    let mut caps = Vec::with_capacity(m);
    let mut witness = DVector::zeros(m);
    for k in 0..m {
        if rng.gen_bool(0.5) {
            let q = rng.gen_range(0.2..5.0);
            let r = rng.gen_range(-1.0..1.0);
            costs.push(Box::new(QuadraticCost::new(q, r).unwrap()));
            caps.push(Capacity::Infinite);
            witness[k] = rng.gen_range(-2.0..2.0);
        } else {
            let c = rng.gen_range(0.05..1.0);
            let cap = rng.gen_range(1.0..5.0);
            costs.push(Box::new(LogCosBarrier::new(c, cap).unwrap()));
            caps.push(Capacity::Finite(cap));
            // Strictly interior with margin, so an optimum exists and the
            // witness itself is a valid primal starting point.
            witness[k] = rng.gen_range(-0.5 * cap..0.5 * cap);
        }
    }
    let net = Network::new(n, edges, caps).unwrap();
    let supply = SupplyVector::new(-(net.incidence() * &witness)).unwrap();
    RandomInstance {
        net,
        costs,
        supply,
        witness,
    }
}

/// Eigendecomposition pseudoinverse of a symmetric matrix: an oracle
/// independent of both the tree expansion and the library's own pinv path.
pub fn sym_pinv(mat: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = mat.clone().symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(1.0);
    let mut out = DMatrix::zeros(mat.nrows(), mat.ncols());
    for (i, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev.abs() > 1e-12 * scale {
            let u = eig.eigenvectors.column(i);
            out += (u * u.transpose()) / ev;
        }
    }
    out
}

/// Primal oracle: projected gradient descent on the total edge cost over
/// the affine set of balanced flows, started at `start` (which must be
/// balanced and strictly inside every cost domain). Independent of the
/// dual Newton path. Returns the flow iterate.
pub fn primal_flow_oracle(
    net: &Network,
    costs: &[Box<dyn LegendreCost>],
    start: &DVector<f64>,
    max_iters: usize,
) -> DVector<f64> {
    let m = net.edge_count();
    let b = net.incidence();
    let null_proj = DMatrix::identity(m, m) - b.transpose() * net.laplacian_pinv() * b;
    let total = |lam: &DVector<f64>| -> Option<f64> {
        let mut sum = 0.0;
        for k in 0..m {
            sum += costs[k].value(lam[k]).ok()?;
        }
        Some(sum)
    };
    let mut lam = start.clone();
    let mut fval = total(&lam).expect("oracle start must be interior");
    for _ in 0..max_iters {
        let grad = DVector::from_fn(m, |k, _| {
            costs[k].gradient(lam[k]).expect("iterates stay interior")
        });
        let dir = &null_proj * &grad;
        if dir.amax() <= 1e-11 * (1.0 + grad.amax()) {
            break;
        }
        // Backtracking: out-of-domain trial points count as +infinity.
        let mut step = 1.0;
        loop {
            let trial = &lam - step * &dir;
            if let Some(ftrial) = total(&trial) {
                if ftrial < fval - 1e-4 * step * dir.norm_squared() {
                    lam = trial;
                    fval = ftrial;
                    break;
                }
            }
            step *= 0.5;
            if step < 1e-14 {
                return lam;
            }
        }
    }
    lam
}
