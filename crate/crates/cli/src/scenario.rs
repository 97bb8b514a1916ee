//! Scenario files: one TOML document describing a network, its edge costs,
//! the harmonic demand process, the controller, and the simulation horizon.
//! The bundled `scenarios/triangle.toml` is the normative example.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use dualflow::{
    solve_static, Capacity, Channel, ControllerConfig, ControllerKind, HarmonicExo, LegendreCost,
    LogCosBarrier, Network, PhaseReset, QuadraticCost,
};
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

/// One validation finding: where in the document, and what is wrong.
#[derive(Debug)]
pub struct Diagnostic {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

pub fn join_diagnostics(diags: &[Diagnostic]) -> String {
    diags
        .iter()
        .map(Diagnostic::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitPolicy {
    /// Start the price integrator at zero.
    Zeros,
    /// Start from the static optimum for the initial supply.
    Optimal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ControllerChoice {
    Feedforward,
    Feedback,
}

impl From<ControllerChoice> for ControllerKind {
    fn from(choice: ControllerChoice) -> Self {
        match choice {
            ControllerChoice::Feedforward => ControllerKind::FeedForward,
            ControllerChoice::Feedback => ControllerKind::Feedback,
        }
    }
}

/// A fully validated scenario, ready to run.
pub struct Scenario {
    pub source: PathBuf,
    pub net: Network,
    pub costs: Vec<Box<dyn LegendreCost>>,
    pub exo: HarmonicExo,
    pub controller: ControllerChoice,
    pub gain: f64,
    pub mean_pin: f64,
    pub init: InitPolicy,
    pub x0: DVector<f64>,
    pub t_end: f64,
    pub dt: f64,
    pub record_every: f64,
    /// Reset times exactly as written in the file, before grid snapping.
    pub requested_resets: Vec<f64>,
    pub trajectory_name: String,
    pub summary_name: String,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path)
            .map_err(|e| format!("{}: cannot read scenario: {e}", path.display()))?;
        let file: ScenarioFile = toml::from_str(&text)
            .map_err(|e| format!("{}: {}", path.display(), flatten_parse_error(&e)))?;
        file.validate(path)
            .map_err(|diags| format!("{}: {}", path.display(), join_diagnostics(&diags)))
    }

    pub fn config(&self) -> ControllerConfig {
        ControllerConfig {
            gain: self.gain,
            mean_pin: self.mean_pin,
        }
    }

    /// Initial prices per the init policy (possibly overridden by flags).
    pub fn initial_prices(&self) -> Result<DVector<f64>, String> {
        match self.init {
            InitPolicy::Zeros => Ok(DVector::zeros(self.net.node_count())),
            InitPolicy::Optimal => {
                let p0 = self.exo.output(&self.exo.initial_state());
                let sol = solve_static(&self.net, &self.costs, &p0, 1e-12)
                    .map_err(|e| format!("initial static solve failed: {e}"))?;
                Ok(sol.prices)
            }
        }
    }
}

/// Raw deserialized document, prior to validation.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    network: NetworkSection,
    costs: Vec<CostSpec>,
    exo: ExoSection,
    #[serde(default)]
    controller: ControllerSection,
    sim: SimSection,
    #[serde(default)]
    outputs: OutputsSection,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkSection {
    nodes: i64,
    /// 1-based `[tail, head]` pairs; positive flow runs tail to head.
    edges: Vec<[i64; 2]>,
    capacities: Vec<CapacitySpec>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CapacitySpec {
    Bound(f64),
    Word(String),
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum CostSpec {
    Quadratic {
        q: f64,
        #[serde(default)]
        r: f64,
    },
    Logcos {
        c: f64,
        capacity: f64,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExoSection {
    amplitudes: Vec<f64>,
    frequencies: Vec<f64>,
    phases: Vec<f64>,
    mixing: MixingSpec,
    #[serde(default)]
    resets: Vec<ResetSpec>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum MixingSpec {
    Named(String),
    Rows(Vec<Vec<f64>>),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ResetSpec {
    time: f64,
    phases: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ControllerSection {
    kind: String,
    gain: f64,
    init: String,
    mean_pin: f64,
}

impl Default for ControllerSection {
    fn default() -> Self {
        ControllerSection {
            kind: "feedback".into(),
            gain: 10.0,
            init: "zeros".into(),
            mean_pin: 0.0,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SimSection {
    x0: Vec<f64>,
    t_end: f64,
    dt: f64,
    record_every: Option<f64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct OutputsSection {
    trajectory: Option<String>,
    summary: Option<String>,
}

/// The toml crate renders parse errors across several lines with a source
/// excerpt; keep the location and message on one line.
fn flatten_parse_error(err: &toml::de::Error) -> String {
    let text = err.to_string();
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let location = lines.next().unwrap_or("parse error").to_string();
    match lines.last() {
        Some(detail) if detail != location => format!("{location}: {detail}"),
        _ => location,
    }
}


fn flag(diags: &mut Vec<Diagnostic>, path: &str, message: String) {
    diags.push(Diagnostic {
        path: path.to_string(),
        message,
    });
}

impl ScenarioFile {
    fn validate(self, source: &Path) -> Result<Scenario, Vec<Diagnostic>> {
        let mut diags: Vec<Diagnostic> = Vec::new();

        let nodes = self.network.nodes;
        if nodes < 2 {
            flag(&mut diags, "network.nodes", format!("need at least 2 nodes, found {nodes}"));
        }
        let n = nodes.max(2) as usize;

        if self.network.edges.is_empty() {
            flag(&mut diags, "network.edges", "at least one edge is required".into());
        }
        let mut edges = Vec::with_capacity(self.network.edges.len());
        for (k, pair) in self.network.edges.iter().enumerate() {
            let [tail, head] = *pair;
            let path = format!("network.edges[{}]", k + 1);
            if tail < 1 || tail > nodes || head < 1 || head > nodes {
                flag(&mut diags, &path, format!("node ids must lie in 1..={nodes}, found [{tail}, {head}]"));
                continue;
            }
            if tail == head {
                flag(&mut diags, &path, format!("self-loop at node {tail}"));
                continue;
            }
            edges.push((tail as usize - 1, head as usize - 1));
        }

        if self.network.capacities.len() != self.network.edges.len() {
            flag(&mut diags, 
                "network.capacities",
                format!(
                    "expected one entry per edge ({}), found {}",
                    self.network.edges.len(),
                    self.network.capacities.len()
                ),
            );
        }
        let mut capacities = Vec::with_capacity(self.network.capacities.len());
        for (k, spec) in self.network.capacities.iter().enumerate() {
            let path = format!("network.capacities[{}]", k + 1);
            match spec {
                CapacitySpec::Bound(v) if v.is_finite() && *v > 0.0 => {
                    capacities.push(Capacity::Finite(*v));
                }
                CapacitySpec::Bound(v) => {
                    flag(&mut diags, &path, format!("capacity must be positive and finite, found {v}"));
                }
                CapacitySpec::Word(w) if w.eq_ignore_ascii_case("inf") => {
                    capacities.push(Capacity::Infinite);
                }
                CapacitySpec::Word(w) => {
                    flag(&mut diags, &path, format!("expected a number or \"inf\", found {w:?}"));
                }
            }
        }

        if self.costs.len() != self.network.edges.len() {
            flag(&mut diags, 
                "costs",
                format!(
                    "expected one [[costs]] entry per edge ({}), found {}",
                    self.network.edges.len(),
                    self.costs.len()
                ),
            );
        }
        let mut costs: Vec<Box<dyn LegendreCost>> = Vec::with_capacity(self.costs.len());
        for (k, spec) in self.costs.iter().enumerate() {
            let path = format!("costs[{}]", k + 1);
            match spec {
                CostSpec::Quadratic { q, r } => match QuadraticCost::new(*q, *r) {
                    Ok(cost) => costs.push(Box::new(cost)),
                    Err(e) => flag(&mut diags, &path, e.to_string()),
                },
                CostSpec::Logcos { c, capacity } => match LogCosBarrier::new(*c, *capacity) {
                    Ok(cost) => costs.push(Box::new(cost)),
                    Err(e) => flag(&mut diags, &path, e.to_string()),
                },
            }
        }

        let channels = self.exo.amplitudes.len();
        for (name, values) in [
            ("exo.amplitudes", &self.exo.amplitudes),
            ("exo.frequencies", &self.exo.frequencies),
            ("exo.phases", &self.exo.phases),
        ] {
            if values.len() != channels {
                flag(&mut diags, 
                    name,
                    format!("expected {channels} entries to match exo.amplitudes, found {}", values.len()),
                );
            }
            if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
                flag(&mut diags, name, format!("entries must be finite, found {bad}"));
            }
        }
        if channels == 0 {
            flag(&mut diags, "exo.amplitudes", "at least one channel is required".into());
        }

        let mixing = match &self.exo.mixing {
            MixingSpec::Named(word) if word == "incidence" => {
                if channels != self.network.edges.len() {
                    flag(&mut diags, 
                        "exo.mixing",
                        format!(
                            "\"incidence\" drives one channel through each edge, so it needs {} channels, found {channels}",
                            self.network.edges.len()
                        ),
                    );
                    None
                } else {
                    // Deferred until the network is built below.
                    Some(None)
                }
            }
            MixingSpec::Named(word) => {
                flag(&mut diags, "exo.mixing", format!("expected \"incidence\" or a matrix of rows, found {word:?}"));
                None
            }
            MixingSpec::Rows(rows) => {
                let mut ok = rows.len() == n;
                if !ok {
                    flag(&mut diags, "exo.mixing", format!("expected {n} rows (one per node), found {}", rows.len()));
                }
                for (i, row) in rows.iter().enumerate() {
                    if row.len() != channels {
                        flag(&mut diags, 
                            "exo.mixing",
                            format!("row {} has {} entries, expected {channels}", i + 1, row.len()),
                        );
                        ok = false;
                    }
                }
                if ok {
                    let matrix = DMatrix::from_fn(n, channels, |i, j| rows[i][j]);
                    for j in 0..channels {
                        let column = matrix.column(j);
                        let total: f64 = column.sum();
                        if total.abs() > 1e-12 * (1.0 + column.amax()) {
                            flag(&mut diags, 
                                "exo.mixing",
                                format!(
                                    "column {} sums to {total:e}; each demand channel must add and \
                                     remove stock in equal measure (zero column sum) so that total \
                                     storage stays conserved",
                                    j + 1
                                ),
                            );
                        }
                    }
                    Some(Some(matrix))
                } else {
                    None
                }
            }
        };

        for (ri, reset) in self.exo.resets.iter().enumerate() {
            let path = format!("exo.resets[{}]", ri + 1);
            if reset.phases.len() != channels {
                flag(&mut diags, 
                    &path,
                    format!("expected {channels} phases (one per channel), found {}", reset.phases.len()),
                );
            }
            if !reset.time.is_finite() || reset.time <= 0.0 {
                flag(&mut diags, &path, format!("reset time must be positive and finite, found {}", reset.time));
            }
            if ri > 0 && reset.time <= self.exo.resets[ri - 1].time {
                flag(&mut diags, &path, "reset times must be strictly increasing".into());
            }
        }

        let controller = match self.controller.kind.as_str() {
            "feedback" => Some(ControllerChoice::Feedback),
            "feedforward" => Some(ControllerChoice::Feedforward),
            other => {
                flag(&mut diags, "controller.kind", format!("expected \"feedback\" or \"feedforward\", found {other:?}"));
                None
            }
        };
        let init = match self.controller.init.as_str() {
            "zeros" => Some(InitPolicy::Zeros),
            "optimal" => Some(InitPolicy::Optimal),
            other => {
                flag(&mut diags, "controller.init", format!("expected \"zeros\" or \"optimal\", found {other:?}"));
                None
            }
        };
        if !(self.controller.gain.is_finite() && self.controller.gain > 0.0) {
            flag(&mut diags, "controller.gain", format!("gain must be positive and finite, found {}", self.controller.gain));
        }
        if !self.controller.mean_pin.is_finite() {
            flag(&mut diags, "controller.mean_pin", format!("must be finite, found {}", self.controller.mean_pin));
        }

        if self.sim.x0.len() != n {
            flag(&mut diags, "sim.x0", format!("expected {n} entries (one per node), found {}", self.sim.x0.len()));
        }
        if let Some(bad) = self.sim.x0.iter().find(|v| !v.is_finite()) {
            flag(&mut diags, "sim.x0", format!("entries must be finite, found {bad}"));
        }
        for (name, value) in [
            ("sim.t_end", self.sim.t_end),
            ("sim.dt", self.sim.dt),
            ("sim.record_every", self.sim.record_every.unwrap_or(self.sim.dt)),
        ] {
            if !(value.is_finite() && value > 0.0) {
                flag(&mut diags, name, format!("must be positive and finite, found {value}"));
            }
        }
        for (name, value) in [
            ("outputs.trajectory", &self.outputs.trajectory),
            ("outputs.summary", &self.outputs.summary),
        ] {
            if let Some(text) = value {
                if text.is_empty() {
                    flag(&mut diags, name, "file name must not be empty".into());
                }
            }
        }

        if !diags.is_empty() {
            return Err(diags);
        }

        let net = match Network::new(n, edges, capacities) {
            Ok(net) => net,
            Err(e) => {
                flag(&mut diags, "network", e.to_string());
                return Err(diags);
            }
        };

        let mixing_matrix = match mixing {
            Some(Some(matrix)) => matrix,
            Some(None) => net.incidence().clone(),
            None => unreachable!("mixing diagnostics were recorded above"),
        };
        let channel_list: Vec<Channel> = (0..channels)
            .map(|k| Channel {
                amplitude: self.exo.amplitudes[k],
                frequency: self.exo.frequencies[k],
                phase: self.exo.phases[k],
            })
            .collect();
        let resets: Vec<PhaseReset> = self
            .exo
            .resets
            .iter()
            .map(|r| PhaseReset {
                time: r.time,
                phases: r.phases.clone(),
            })
            .collect();
        let exo = match HarmonicExo::new(channel_list, mixing_matrix, resets) {
            Ok(exo) => exo,
            Err(e) => {
                flag(&mut diags, "exo", e.to_string());
                return Err(diags);
            }
        };

        let stem = source
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "scenario".into());
        Ok(Scenario {
            source: source.to_path_buf(),
            net,
            costs,
            exo,
            controller: controller.expect("validated above"),
            gain: self.controller.gain,
            mean_pin: self.controller.mean_pin,
            init: init.expect("validated above"),
            x0: DVector::from_vec(self.sim.x0),
            t_end: self.sim.t_end,
            dt: self.sim.dt,
            record_every: self.sim.record_every.unwrap_or(self.sim.dt),
            requested_resets: self.exo.resets.iter().map(|r| r.time).collect(),
            trajectory_name: self
                .outputs
                .trajectory
                .unwrap_or_else(|| format!("{stem}_trajectory.csv")),
            summary_name: self
                .outputs
                .summary
                .unwrap_or_else(|| format!("{stem}_summary.txt")),
        })
    }
}
