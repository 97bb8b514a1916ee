//! Harmonic supply/demand generator.
//!
//! Node injections are mixes of sinusoidal channels. Each channel is carried
//! by a rotating phasor pair `(s, c)` with `ds/dt = freq * c` and
//! `dc/dt = -freq * s`, so the generator state obeys a linear autonomous law
//! and the closed loop stays an ordinary ODE. The output is
//! `p_i = sum_k mixing[i][k] * amplitude_k * s_k`; zero column sums of the
//! mixing matrix make every output balanced.
//!
//! Scheduled phase resets model abrupt changes in the supply pattern: at a
//! reset the phasors are discontinuously re-initialized to a fresh phase
//! vector, evaluated at the reset time.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::optimizer::SupplyVector;

#[derive(Debug, Error)]
pub enum ExoError {
    #[error("channel {index} has a non-finite parameter {name} = {value}")]
    NonFiniteChannel {
        index: usize,
        name: &'static str,
        value: f64,
    },
    #[error("mixing matrix has {cols} columns for {channels} channels")]
    MixingShapeMismatch { cols: usize, channels: usize },
    #[error("mixing column {column} sums to {sum:e}; balanced supply and demand requires zero column sums")]
    UnbalancedMixingColumn { column: usize, sum: f64 },
    #[error("reset {index} carries {got} phases for {channels} channels")]
    ResetPhaseCountMismatch {
        index: usize,
        got: usize,
        channels: usize,
    },
    #[error("reset times must be finite and strictly increasing")]
    UnorderedResets,
}

/// One sinusoidal channel `amplitude * sin(frequency * t + phase)`.
#[derive(Debug, Clone, Copy)]
pub struct Channel {
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
}

/// Scheduled replacement of every channel phase at a point in time.
#[derive(Debug, Clone)]
pub struct PhaseReset {
    pub time: f64,
    pub phases: Vec<f64>,
}

/// Immutable generator description. The evolving state is owned by the
/// caller: a vector of interleaved phasor pairs `[s_0, c_0, s_1, c_1, ...]`.
#[derive(Debug, Clone)]
pub struct HarmonicExo {
    channels: Vec<Channel>,
    /// nodes x channels, zero column sums.
    mixing: DMatrix<f64>,
    resets: Vec<PhaseReset>,
}

impl HarmonicExo {
    pub fn new(
        channels: Vec<Channel>,
        mixing: DMatrix<f64>,
        resets: Vec<PhaseReset>,
    ) -> Result<Self, ExoError> {
        for (index, ch) in channels.iter().enumerate() {
            for (name, value) in [
                ("amplitude", ch.amplitude),
                ("frequency", ch.frequency),
                ("phase", ch.phase),
            ] {
                if !value.is_finite() {
                    return Err(ExoError::NonFiniteChannel { index, name, value });
                }
            }
        }
        if mixing.ncols() != channels.len() {
            return Err(ExoError::MixingShapeMismatch {
                cols: mixing.ncols(),
                channels: channels.len(),
            });
        }
        for k in 0..mixing.ncols() {
            let sum: f64 = mixing.column(k).sum();
            if sum.abs() > 1e-12 * (1.0 + mixing.column(k).amax()) * mixing.nrows() as f64 {
                return Err(ExoError::UnbalancedMixingColumn { column: k, sum });
            }
        }
        for (index, reset) in resets.iter().enumerate() {
            if reset.phases.len() != channels.len() {
                return Err(ExoError::ResetPhaseCountMismatch {
                    index,
                    got: reset.phases.len(),
                    channels: channels.len(),
                });
            }
            if !reset.time.is_finite() {
                return Err(ExoError::UnorderedResets);
            }
            if index > 0 && reset.time <= resets[index - 1].time {
                return Err(ExoError::UnorderedResets);
            }
        }
        Ok(HarmonicExo {
            channels,
            mixing,
            resets,
        })
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn mixing(&self) -> &DMatrix<f64> {
        &self.mixing
    }

    pub fn resets(&self) -> &[PhaseReset] {
        &self.resets
    }

    pub fn node_count(&self) -> usize {
        self.mixing.nrows()
    }

    /// Length of the phasor state vector: two entries per channel.
    pub fn state_dim(&self) -> usize {
        2 * self.channels.len()
    }

    /// Phasor state at `t = 0` (any reset scheduled at or before zero is
    /// honored).
    pub fn initial_state(&self) -> DVector<f64> {
        self.state_at(0.0)
    }

    /// Closed-form phasor state at time `t`, honoring every reset with
    /// `reset.time <= t`.
    pub fn state_at(&self, t: f64) -> DVector<f64> {
        let phases = self.active_phases(t);
        DVector::from_fn(self.state_dim(), |idx, _| {
            let k = idx / 2;
            let angle = self.channels[k].frequency * t + phases[k];
            if idx % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
    }

    fn active_phases(&self, t: f64) -> Vec<f64> {
        let mut phases: Vec<f64> = self.channels.iter().map(|c| c.phase).collect();
        for reset in &self.resets {
            if reset.time <= t {
                phases.clone_from(&reset.phases);
            } else {
                break;
            }
        }
        phases
    }

    /// Time derivative of the phasor state: each pair rotates at its
    /// channel frequency, so per-channel amplitude is conserved exactly.
    pub fn derivative(&self, state: &DVector<f64>) -> DVector<f64> {
        self.check_state(state);
        DVector::from_fn(self.state_dim(), |idx, _| {
            let k = idx / 2;
            let freq = self.channels[k].frequency;
            if idx % 2 == 0 {
                freq * state[2 * k + 1]
            } else {
                -freq * state[2 * k]
            }
        })
    }

    /// Node injections for a given phasor state. Balanced by construction.
    pub fn output(&self, state: &DVector<f64>) -> SupplyVector {
        self.check_state(state);
        let driven = DVector::from_fn(self.channels.len(), |k, _| {
            self.channels[k].amplitude * state[2 * k]
        });
        SupplyVector::new(&self.mixing * driven)
            .expect("zero mixing column sums keep the output balanced")
    }

    /// Time derivative of the output along the flow (resets excluded).
    pub fn output_derivative(&self, state: &DVector<f64>) -> DVector<f64> {
        self.check_state(state);
        let driven = DVector::from_fn(self.channels.len(), |k, _| {
            let ch = self.channels[k];
            ch.amplitude * ch.frequency * state[2 * k + 1]
        });
        &self.mixing * driven
    }

    /// Apply every reset scheduled in the window `(t_prev, t_next]`, in
    /// order. Returns the state unchanged if none fall inside.
    pub fn apply_resets(&self, state: &DVector<f64>, t_prev: f64, t_next: f64) -> DVector<f64> {
        self.check_state(state);
        let mut out = state.clone();
        for reset in &self.resets {
            if reset.time > t_prev && reset.time <= t_next {
                for (k, ch) in self.channels.iter().enumerate() {
                    let angle = ch.frequency * reset.time + reset.phases[k];
                    out[2 * k] = angle.sin();
                    out[2 * k + 1] = angle.cos();
                }
            }
        }
        out
    }

    /// Copy of this generator with every reset time rounded to the nearest
    /// multiple of `dt`, so a fixed-step integrator can apply resets exactly
    /// on step boundaries (time error at most `dt / 2`).
    pub fn snapped_to_grid(&self, dt: f64) -> HarmonicExo {
        let mut snapped = self.clone();
        for reset in &mut snapped.resets {
            reset.time = (reset.time / dt).round() * dt;
        }
        snapped
    }

    fn check_state(&self, state: &DVector<f64>) {
        assert_eq!(
            state.len(),
            self.state_dim(),
            "phasor state has two entries per channel"
        );
    }
}
