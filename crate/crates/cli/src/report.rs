//! Output files for `simulate`: the trajectory CSV (data only, bit-stable
//! across identical runs) and a human-readable summary sidecar that carries
//! the run parameters and derived figures.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use dualflow::{Sample, Trajectory};

use crate::scenario::{ControllerChoice, InitPolicy, Scenario};

/// Full-precision rendering: 17 significant digits round-trip exactly.
pub fn full(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let first = traj
        .samples
        .first()
        .expect("a trajectory always contains its initial sample");
    let n = first.x.len();
    let m = first.lambda.len();

    let mut header = String::from("t");
    for (prefix, count) in [("x", n), ("zeta", n), ("lambda", m), ("p", n)] {
        for i in 1..=count {
            header.push_str(&format!(",{prefix}{i}"));
        }
    }
    header.push_str(",V,W,U,bal_res,opt_gap");
    writeln!(out, "{header}")?;

    for s in &traj.samples {
        write!(out, "{}", full(s.t))?;
        for block in [&s.x, &s.zeta, &s.lambda, &s.supply] {
            for v in block.iter() {
                write!(out, ",{}", full(*v))?;
            }
        }
        write!(
            out,
            ",{},{},{}",
            full(s.storage_v),
            full(s.residual_w),
            full(s.total_u)
        )?;
        write!(out, ",{}", full(s.balancing_residual))?;
        match s.optimality_gap {
            Some(gap) => writeln!(out, ",{}", full(gap))?,
            None => writeln!(out, ",nan")?,
        }
    }
    out.flush()
}

/// Slice the recorded samples into reset-free runs. A sample taken exactly at
/// a reset time reflects the post-reset state and therefore opens the next
/// run rather than closing the previous one.
pub fn split_at_resets<'a>(samples: &'a [Sample], resets: &[f64]) -> Vec<&'a [Sample]> {
    let mut segments = Vec::with_capacity(resets.len() + 1);
    let mut start = 0;
    for &reset in resets {
        let cut = samples[start..]
            .iter()
            .position(|s| s.t >= reset)
            .map(|offset| start + offset)
            .unwrap_or(samples.len());
        if cut > start {
            segments.push(&samples[start..cut]);
        }
        start = cut;
    }
    if start < samples.len() {
        segments.push(&samples[start..]);
    }
    segments
}

/// Least-squares slope of `ln U` against `t`; `None` when fewer than two
/// samples carry a usable (positive) U.
fn log_decay_rate(samples: &[Sample]) -> Option<f64> {
    let points: Vec<(f64, f64)> = samples
        .iter()
        .filter(|s| s.total_u > 1e-300)
        .map(|s| (s.t, s.total_u.ln()))
        .collect();
    if points.len() < 2 {
        return None;
    }
    let count = points.len() as f64;
    let mean_t = points.iter().map(|(t, _)| t).sum::<f64>() / count;
    let mean_u = points.iter().map(|(_, u)| u).sum::<f64>() / count;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (t, u) in &points {
        cov += (t - mean_t) * (u - mean_u);
        var += (t - mean_t) * (t - mean_t);
    }
    (var > 0.0).then(|| cov / var)
}

pub fn write_summary(path: &Path, scenario: &Scenario, traj: &Trajectory) -> io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let last = traj.samples.last().expect("non-empty trajectory");

    writeln!(out, "scenario: {}", scenario.source.display())?;
    writeln!(
        out,
        "network: {} nodes, {} edges",
        scenario.net.node_count(),
        scenario.net.edge_count()
    )?;
    let kind = match scenario.controller {
        ControllerChoice::Feedback => "feedback",
        ControllerChoice::Feedforward => "feedforward",
    };
    let init = match scenario.init {
        InitPolicy::Zeros => "zeros",
        InitPolicy::Optimal => "optimal",
    };
    writeln!(
        out,
        "controller: {kind}, gain {}, initial prices {init}, price mean pinned to {}",
        scenario.gain, scenario.mean_pin
    )?;
    writeln!(
        out,
        "horizon: t_end {}, dt {}, record every {}",
        scenario.t_end, scenario.dt, scenario.record_every
    )?;

    if scenario.requested_resets.is_empty() {
        writeln!(out, "phase resets: none")?;
    } else {
        for (requested, applied) in scenario.requested_resets.iter().zip(&traj.reset_times) {
            if requested == applied {
                writeln!(out, "phase reset: t = {requested} (already on the dt grid)")?;
            } else {
                writeln!(
                    out,
                    "phase reset: requested t = {requested}, applied t = {applied} (snapped to the dt grid)"
                )?;
            }
        }
        for requested in scenario
            .requested_resets
            .iter()
            .skip(traj.reset_times.len())
        {
            writeln!(out, "phase reset: t = {requested} (beyond the horizon, not applied)")?;
        }
    }

    writeln!(out, "samples recorded: {}", traj.samples.len())?;
    writeln!(
        out,
        "final storage imbalance |B^T x|_inf: {}",
        full(last.balancing_residual)
    )?;
    match last.optimality_gap {
        Some(gap) => writeln!(out, "final flow optimality gap: {}", full(gap))?,
        None => writeln!(
            out,
            "final flow optimality gap: unavailable (reference solve did not converge)"
        )?,
    }

    writeln!(out, "log-U decay fit per reset-free interval:")?;
    for segment in split_at_resets(&traj.samples, &traj.reset_times) {
        let t0 = segment.first().expect("segments are non-empty").t;
        let t1 = segment.last().expect("segments are non-empty").t;
        match log_decay_rate(segment) {
            Some(rate) => writeln!(
                out,
                "  t in [{t0}, {t1}]: rate {rate:.6e} per unit time ({} samples)",
                segment.len()
            )?,
            None => writeln!(
                out,
                "  t in [{t0}, {t1}]: flat (U below measurable range)"
            )?,
        }
    }
    out.flush()
}
