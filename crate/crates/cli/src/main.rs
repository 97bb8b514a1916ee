//! `dualflow`: scenario-driven front end for the network balancing library.

mod report;
mod scenario;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dualflow::control::conjugate_weights;
use dualflow::dirichlet::build_x;
use dualflow::optimizer::{check_spanning_tree_infinite, dual_objective, primal_objective};
use dualflow::{solve_static, Capacity, SimOptions, SupplyVector};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scenario::{ControllerChoice, InitPolicy, Scenario};

#[derive(Parser)]
#[command(
    name = "dualflow",
    version,
    about = "Balancing and optimal-routing control for storage networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the closed loop for one or more scenario files.
    Simulate(SimulateArgs),
    /// Solve the static routing problem for one supply vector.
    SolveStatic(SolveStaticArgs),
    /// Check cut capacity margins over a time grid.
    CheckFeasibility(CheckFeasibilityArgs),
    /// Report spanning-tree structure and the tree-expansion matrix.
    Trees(TreesArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario files; several run concurrently.
    #[arg(required = true)]
    scenarios: Vec<PathBuf>,
    /// Override the scenario horizon.
    #[arg(long)]
    t_end: Option<f64>,
    /// Override the integration step.
    #[arg(long)]
    dt: Option<f64>,
    /// Override the feedback gain.
    #[arg(long)]
    gain: Option<f64>,
    /// Override the controller kind.
    #[arg(long, value_enum)]
    controller: Option<ControllerChoice>,
    /// Override the initial-price policy.
    #[arg(long, value_enum)]
    init: Option<InitPolicy>,
    /// Override the recording stride.
    #[arg(long)]
    record_every: Option<f64>,
    /// Directory for output files (created if missing).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SolveStaticArgs {
    scenario: PathBuf,
    /// Evaluate the scenario's demand process at this time (default 0).
    #[arg(long, conflicts_with = "supply")]
    time: Option<f64>,
    /// Explicit balanced supply vector, comma separated.
    #[arg(long, allow_hyphen_values = true)]
    supply: Option<String>,
}

#[derive(Args)]
struct CheckFeasibilityArgs {
    scenario: PathBuf,
    /// Required slack between net cut supply and cut capacity.
    #[arg(long, default_value_t = 1e-6)]
    epsilon: f64,
    /// Sample times as start:end:count (default 0:t_end:101).
    #[arg(long)]
    time_grid: Option<String>,
}

#[derive(Args)]
struct TreesArgs {
    scenario: PathBuf,
    /// Node prices at which to weight trees, comma separated.
    #[arg(long, allow_hyphen_values = true, conflicts_with = "seed")]
    zeta: Option<String>,
    /// Draw random edge weights from this seed instead.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate(args) => cmd_simulate(&args),
        Command::SolveStatic(args) => cmd_solve_static(&args),
        Command::CheckFeasibility(args) => cmd_check_feasibility(&args),
        Command::Trees(args) => cmd_trees(&args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("error: {}", single_line(&message));
            ExitCode::FAILURE
        }
    }
}

fn single_line(message: &str) -> String {
    message.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn parse_vector(text: &str, expected: usize, flag: &str) -> Result<DVector<f64>, String> {
    let values: Vec<f64> = text
        .split(',')
        .map(|piece| {
            piece
                .trim()
                .parse::<f64>()
                .map_err(|e| format!("{flag}: {e} in {piece:?}"))
        })
        .collect::<Result<_, _>>()?;
    if values.len() != expected {
        return Err(format!(
            "{flag}: expected {expected} comma-separated values, found {}",
            values.len()
        ));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(format!("{flag}: values must be finite, found {bad}"));
    }
    Ok(DVector::from_vec(values))
}

/// 1-based node-set label like `S={1,3}`.
fn cut_label(node_set: &[usize]) -> String {
    let mut ids: Vec<usize> = node_set.iter().map(|&i| i + 1).collect();
    ids.sort_unstable();
    let body = ids
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(",");
    format!("S={{{body}}}")
}

fn capacity_text(cap: Capacity) -> String {
    match cap.as_finite() {
        Some(v) => v.to_string(),
        None => "inf".into(),
    }
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), String> {
    if let Some(dir) = &args.output {
        std::fs::create_dir_all(dir)
            .map_err(|e| format!("cannot create output directory {}: {e}", dir.display()))?;
    }
    let runs: Vec<Result<String, String>> = if args.scenarios.len() == 1 {
        vec![simulate_one(&args.scenarios[0], args)]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = args
                .scenarios
                .iter()
                .map(|path| scope.spawn(move || simulate_one(path, args)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err("simulation panicked".into())))
                .collect()
        })
    };
    let mut failures = Vec::new();
    for run in runs {
        match run {
            Ok(status) => println!("{status}"),
            Err(why) => failures.push(why),
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(failures.join("; "))
    }
}

fn simulate_one(path: &Path, args: &SimulateArgs) -> Result<String, String> {
    let mut sc = Scenario::load(path)?;
    if let Some(v) = args.t_end {
        sc.t_end = v;
    }
    if let Some(v) = args.dt {
        sc.dt = v;
        if args.record_every.is_none() && sc.record_every < v {
            sc.record_every = v;
        }
    }
    if let Some(v) = args.record_every {
        sc.record_every = v;
    }
    if let Some(v) = args.gain {
        sc.gain = v;
    }
    if let Some(v) = args.controller {
        sc.controller = v;
    }
    if let Some(v) = args.init {
        sc.init = v;
    }
    for (flag, value) in [
        ("--t-end", sc.t_end),
        ("--dt", sc.dt),
        ("--record-every", sc.record_every),
        ("--gain", sc.gain),
    ] {
        if !(value.is_finite() && value > 0.0) {
            return Err(format!("{flag}: must be positive and finite, found {value}"));
        }
    }

    let zeta0 = sc
        .initial_prices()
        .map_err(|e| format!("{}: {e}", path.display()))?;
    let options = SimOptions {
        controller: sc.controller.into(),
        config: sc.config(),
        t_end: sc.t_end,
        dt: sc.dt,
        record_every: sc.record_every,
        reference_tol: 1e-10,
    };
    let traj = dualflow::run_closed_loop(&sc.net, &sc.costs, &sc.exo, &options, &sc.x0, &zeta0)
        .map_err(|e| format!("{}: {e}", path.display()))?;

    let base = args.output.clone().unwrap_or_else(|| PathBuf::from("."));
    let traj_path = base.join(&sc.trajectory_name);
    let summary_path = base.join(&sc.summary_name);
    for target in [&traj_path, &summary_path] {
        if let Some(parent) = target.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)
                    .map_err(|e| format!("cannot create {}: {e}", parent.display()))?;
            }
        }
    }
    report::write_trajectory_csv(&traj_path, &traj)
        .map_err(|e| format!("cannot write {}: {e}", traj_path.display()))?;
    report::write_summary(&summary_path, &sc, &traj)
        .map_err(|e| format!("cannot write {}: {e}", summary_path.display()))?;

    let last = traj.samples.last().expect("non-empty trajectory");
    Ok(format!(
        "{}: {} samples -> {}, {} (final imbalance {:.3e})",
        path.display(),
        traj.samples.len(),
        traj_path.display(),
        summary_path.display(),
        last.balancing_residual
    ))
}

fn cmd_solve_static(args: &SolveStaticArgs) -> Result<(), String> {
    let sc = Scenario::load(&args.scenario)?;
    let (supply, label) = match &args.supply {
        Some(text) => {
            let values = parse_vector(text, sc.net.node_count(), "--supply")?;
            let supply = SupplyVector::new(values).map_err(|e| format!("--supply: {e}"))?;
            (supply, "explicit supply".to_string())
        }
        None => {
            let t = args.time.unwrap_or(0.0);
            if !t.is_finite() {
                return Err(format!("--time: must be finite, found {t}"));
            }
            let supply = sc.exo.output(&sc.exo.state_at(t));
            (supply, format!("supply at t = {t}"))
        }
    };

    let sol = solve_static(&sc.net, &sc.costs, &supply, 1e-12).map_err(|e| e.to_string())?;
    let primal = primal_objective(&sc.costs, &sol.flow)
        .map_err(|e| format!("optimal flow left the cost domain: {e}"))?;
    let dual = dual_objective(&sc.net, &sc.costs, &supply, &sol.prices);

    println!("static routing solution ({label})");
    println!("node supplies:");
    for (i, v) in supply.as_vector().iter().enumerate() {
        println!("  node {}: {}", i + 1, report::full(*v));
    }
    println!("edge flows:");
    for (k, (tail, head)) in sc.net.edges().iter().enumerate() {
        println!(
            "  edge {} ({} -> {}): {}",
            k + 1,
            tail + 1,
            head + 1,
            report::full(sol.flow[k])
        );
    }
    println!("node prices:");
    for (i, v) in sol.prices.iter().enumerate() {
        println!("  node {}: {}", i + 1, report::full(*v));
    }
    println!("kkt residual: {}", report::full(sol.kkt_residual));
    println!("primal objective: {}", report::full(primal));
    println!("dual objective: {}", report::full(dual));
    println!("duality gap: {}", report::full(sol.duality_gap));
    println!("newton iterations: {}", sol.iterations);
    Ok(())
}

fn cmd_check_feasibility(args: &CheckFeasibilityArgs) -> Result<(), String> {
    let sc = Scenario::load(&args.scenario)?;
    if !(args.epsilon.is_finite() && args.epsilon >= 0.0) {
        return Err(format!(
            "--epsilon: must be non-negative and finite, found {}",
            args.epsilon
        ));
    }
    let (start, end, count) = match &args.time_grid {
        Some(text) => parse_time_grid(text)?,
        None => (0.0, sc.t_end, 101),
    };
    let times: Vec<f64> = (0..count)
        .map(|i| {
            if count == 1 {
                start
            } else {
                start + (end - start) * i as f64 / (count - 1) as f64
            }
        })
        .collect();

    let cuts = sc.net.cuts().map_err(|e| e.to_string())?;
    let backbone = check_spanning_tree_infinite(&sc.net);

    struct Tightest {
        margin: f64,
        time: f64,
        net_supply: f64,
    }
    let mut finite_cuts: Vec<(usize, f64)> = Vec::new();
    for (ci, cut) in cuts.iter().enumerate() {
        if let Some(cap) = cut.capacity.as_finite() {
            finite_cuts.push((ci, cap));
        }
    }
    let mut worst_per_cut: Vec<Tightest> = Vec::with_capacity(finite_cuts.len());
    for _ in &finite_cuts {
        worst_per_cut.push(Tightest {
            margin: f64::INFINITY,
            time: times[0],
            net_supply: 0.0,
        });
    }
    for &t in &times {
        let p = sc.exo.output(&sc.exo.state_at(t));
        let p = p.as_vector();
        for (slot, &(ci, cap)) in finite_cuts.iter().enumerate() {
            let net_supply: f64 = cuts[ci].node_set.iter().map(|&i| p[i]).sum();
            let margin = cap - args.epsilon - net_supply.abs();
            if margin < worst_per_cut[slot].margin {
                worst_per_cut[slot] = Tightest {
                    margin,
                    time: t,
                    net_supply,
                };
            }
        }
    }

    println!("feasibility report: {}", args.scenario.display());
    println!(
        "backbone of unbounded edges spans every node: {}",
        if backbone { "PASS" } else { "FAIL" }
    );
    println!(
        "sampled {count} supply profiles for t in [{start}, {end}]"
    );
    let mut margins_ok = true;
    if finite_cuts.is_empty() {
        println!("every cut contains an unbounded edge; capacity margins: PASS");
    } else {
        println!("cut margins (epsilon {}):", args.epsilon);
        let mut overall: Option<(usize, f64)> = None;
        for (slot, &(ci, cap)) in finite_cuts.iter().enumerate() {
            let w = &worst_per_cut[slot];
            println!(
                "  {}: capacity {}, worst margin {} at t = {} (net supply {:.6e})",
                cut_label(&cuts[ci].node_set),
                cap,
                report::full(w.margin),
                w.time,
                w.net_supply
            );
            if overall.is_none_or(|(_, m)| w.margin < m) {
                overall = Some((slot, w.margin));
            }
        }
        let (slot, margin) = overall.expect("at least one finite cut");
        let (ci, _) = finite_cuts[slot];
        margins_ok = margin >= 0.0;
        println!(
            "capacity margins: {} (worst {} at cut {}, t = {})",
            if margins_ok { "PASS" } else { "FAIL" },
            report::full(margin),
            cut_label(&cuts[ci].node_set),
            worst_per_cut[slot].time
        );
    }
    println!(
        "overall: {}",
        if backbone && margins_ok { "PASS" } else { "FAIL" }
    );
    Ok(())
}

fn parse_time_grid(text: &str) -> Result<(f64, f64, usize), String> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 3 {
        return Err(format!("--time-grid: expected start:end:count, found {text:?}"));
    }
    let start: f64 = parts[0]
        .trim()
        .parse()
        .map_err(|e| format!("--time-grid start: {e}"))?;
    let end: f64 = parts[1]
        .trim()
        .parse()
        .map_err(|e| format!("--time-grid end: {e}"))?;
    let count: usize = parts[2]
        .trim()
        .parse()
        .map_err(|e| format!("--time-grid count: {e}"))?;
    if !start.is_finite() || !end.is_finite() || end < start {
        return Err(format!("--time-grid: need finite start <= end, found {text:?}"));
    }
    if count == 0 {
        return Err("--time-grid: count must be at least 1".into());
    }
    Ok((start, end, count))
}

fn cmd_trees(args: &TreesArgs) -> Result<(), String> {
    let sc = Scenario::load(&args.scenario)?;
    let trees = sc.net.spanning_trees().map_err(|e| e.to_string())?;
    println!(
        "{} spanning tree{}",
        trees.len(),
        if trees.len() == 1 { "" } else { "s" }
    );

    let weights = match (&args.zeta, args.seed) {
        (Some(text), None) => {
            let zeta = parse_vector(text, sc.net.node_count(), "--zeta")?;
            println!("edge weights (conjugate curvature at the given prices):");
            Some(conjugate_weights(&sc.net, &sc.costs, &zeta))
        }
        (None, Some(seed)) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw: Vec<f64> = (0..sc.net.edge_count())
                .map(|_| 10f64.powf(rng.gen_range(-1.0..1.0)))
                .collect();
            println!("edge weights (random, seed {seed}):");
            Some(
                dualflow::EdgeWeights::new(raw)
                    .expect("log-uniform draws are positive and finite"),
            )
        }
        (None, None) => None,
        (Some(_), Some(_)) => unreachable!("clap rejects --zeta with --seed"),
    };

    if let Some(weights) = weights {
        for (k, (tail, head)) in sc.net.edges().iter().enumerate() {
            println!(
                "  edge {} ({} -> {}, capacity {}): {}",
                k + 1,
                tail + 1,
                head + 1,
                capacity_text(sc.net.capacities()[k]),
                report::full(weights.as_slice()[k])
            );
        }
        let x = build_x(&sc.net, &weights).map_err(|e| e.to_string())?;
        println!(
            "tree-expansion matrix X ({} x {}, rows = edges, columns = nodes):",
            sc.net.edge_count(),
            sc.net.node_count()
        );
        for k in 0..sc.net.edge_count() {
            let row = (0..sc.net.node_count())
                .map(|i| report::full(x.entries[(k, i)]))
                .collect::<Vec<_>>()
                .join(" ");
            println!("  {row}");
        }
        println!("total tree weight: {}", report::full(x.tree_weight_sum));
    }
    Ok(())
}
