//! Per-edge transport cost families of Legendre type.
//!
//! Each cost is strictly convex and smooth on the open interval
//! `(-cap, cap)`, and its gradient maps that interval bijectively onto all of
//! the reals, blowing up at any finite boundary. The gradient inverse is
//! therefore total: every edge price maps to a strictly feasible flow, which
//! is what lets the price-driven controllers respect capacity bounds without
//! ever projecting.
//!
//! `conjugate` and `conjugate_second` are the convex conjugate and its second
//! derivative; the latter equals the derivative of `gradient_inverse` and is
//! the edge weight used by the tree-based Laplacian solves.

use std::fmt;

use nalgebra::DVector;
use thiserror::Error;

use crate::network::Capacity;

#[derive(Debug, Error)]
pub enum CostError {
    #[error("flow {flow} outside the open capacity interval (-{capacity}, {capacity})")]
    OutOfDomain { flow: f64, capacity: f64 },
    #[error("cost parameter {name} must be {requirement}, got {value}")]
    InvalidParameter {
        name: &'static str,
        requirement: &'static str,
        value: f64,
    },
}

pub trait LegendreCost: fmt::Debug + Send + Sync {
    /// Capacity bound of the edge this cost lives on.
    fn capacity(&self) -> Capacity;

    /// Cost of carrying `flow`; defined on the open interval `(-cap, cap)`.
    fn value(&self, flow: f64) -> Result<f64, CostError>;

    /// Marginal cost; strictly increasing, unbounded toward any finite
    /// capacity boundary.
    fn gradient(&self, flow: f64) -> Result<f64, CostError>;

    /// Inverse of `gradient`; total on the reals with range `(-cap, cap)`.
    fn gradient_inverse(&self, price: f64) -> f64;

    /// Convex conjugate, pinned so that the conjugate of a zero price equals
    /// minus the minimum cost.
    fn conjugate(&self, price: f64) -> f64;

    /// Second derivative of the conjugate = slope of `gradient_inverse`.
    /// Strictly positive everywhere.
    fn conjugate_second(&self, price: f64) -> f64;
}

/// `value(flow) = weight/2 * (flow - reference)^2` on an uncapacitated edge.
#[derive(Debug, Clone, Copy)]
pub struct QuadraticCost {
    weight: f64,
    reference: f64,
}

impl QuadraticCost {
    pub fn new(weight: f64, reference: f64) -> Result<Self, CostError> {
        if !(weight.is_finite() && weight > 0.0) {
            return Err(CostError::InvalidParameter {
                name: "weight",
                requirement: "finite and positive",
                value: weight,
            });
        }
        if !reference.is_finite() {
            return Err(CostError::InvalidParameter {
                name: "reference",
                requirement: "finite",
                value: reference,
            });
        }
        Ok(QuadraticCost { weight, reference })
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn reference(&self) -> f64 {
        self.reference
    }
}

impl LegendreCost for QuadraticCost {
    fn capacity(&self) -> Capacity {
        Capacity::Infinite
    }

    fn value(&self, flow: f64) -> Result<f64, CostError> {
        Ok(0.5 * self.weight * (flow - self.reference).powi(2))
    }

    fn gradient(&self, flow: f64) -> Result<f64, CostError> {
        Ok(self.weight * (flow - self.reference))
    }

    fn gradient_inverse(&self, price: f64) -> f64 {
        price / self.weight + self.reference
    }

    fn conjugate(&self, price: f64) -> f64 {
        price * price / (2.0 * self.weight) + self.reference * price
    }

    fn conjugate_second(&self, _price: f64) -> f64 {
        1.0 / self.weight
    }
}

/// Logarithmic barrier on a capacitated edge:
/// `value(flow) = -scale * a * ln(cos(flow / a))` with `a = 2*cap/pi`.
///
/// The gradient is `scale * tan(flow / a)`, so prices sweep the whole real
/// line while flows stay inside `(-cap, cap)`.
#[derive(Debug, Clone, Copy)]
pub struct LogCosBarrier {
    scale: f64,
    cap: f64,
    /// Precomputed `2*cap/pi`.
    a: f64,
}

impl LogCosBarrier {
    pub fn new(scale: f64, cap: f64) -> Result<Self, CostError> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(CostError::InvalidParameter {
                name: "scale",
                requirement: "finite and positive",
                value: scale,
            });
        }
        if !(cap.is_finite() && cap > 0.0) {
            return Err(CostError::InvalidParameter {
                name: "capacity",
                requirement: "finite and positive",
                value: cap,
            });
        }
        Ok(LogCosBarrier {
            scale,
            cap,
            a: 2.0 * cap / std::f64::consts::PI,
        })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    fn check_domain(&self, flow: f64) -> Result<(), CostError> {
        if flow.abs() < self.cap {
            Ok(())
        } else {
            Err(CostError::OutOfDomain {
                flow,
                capacity: self.cap,
            })
        }
    }
}

impl LegendreCost for LogCosBarrier {
    fn capacity(&self) -> Capacity {
        Capacity::Finite(self.cap)
    }

    fn value(&self, flow: f64) -> Result<f64, CostError> {
        self.check_domain(flow)?;
        Ok(-self.scale * self.a * (flow / self.a).cos().ln())
    }

    fn gradient(&self, flow: f64) -> Result<f64, CostError> {
        self.check_domain(flow)?;
        Ok(self.scale * (flow / self.a).tan())
    }

    fn gradient_inverse(&self, price: f64) -> f64 {
        // atan saturates at pi/2 for huge prices, and `a * atan` can then
        // round onto the capacity itself, which is outside the cost domain.
        // Pull such values to the nearest representable interior flow.
        let flow = self.a * (price / self.scale).atan();
        if flow >= self.cap {
            self.cap.next_down()
        } else if flow <= -self.cap {
            (-self.cap).next_up()
        } else {
            flow
        }
    }

    fn conjugate(&self, price: f64) -> f64 {
        let s = price / self.scale;
        self.a * (price * s.atan() - 0.5 * self.scale * (s * s).ln_1p())
    }

    fn conjugate_second(&self, price: f64) -> f64 {
        // Strictly positive for every finite price; the floor keeps that
        // true once price^2 overflows, so reciprocals downstream stay finite.
        (self.a * self.scale / (self.scale * self.scale + price * price))
            .max(f64::MIN_POSITIVE)
    }
}

/// Apply `gradient_inverse` edge-wise to a price vector.
pub fn gradient_inverse_all(
    costs: &[Box<dyn LegendreCost>],
    prices: &DVector<f64>,
) -> DVector<f64> {
    assert_eq!(costs.len(), prices.len(), "one cost per edge price");
    DVector::from_fn(costs.len(), |k, _| costs[k].gradient_inverse(prices[k]))
}

/// Apply `conjugate_second` edge-wise to a price vector.
pub fn conjugate_second_all(
    costs: &[Box<dyn LegendreCost>],
    prices: &DVector<f64>,
) -> Vec<f64> {
    assert_eq!(costs.len(), prices.len(), "one cost per edge price");
    (0..costs.len())
        .map(|k| costs[k].conjugate_second(prices[k]))
        .collect()
}
