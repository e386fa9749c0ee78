//! Generalization-gap estimates, consensus fits, and the closed-form
//! generalization-error bound evaluators.
//!
//! The four bound shapes (strongly convex, convex, non-convex, and the
//! improved non-convex form with the first-divergence argument) are
//! evaluated "up to constants": the absolute constants `c1`, `c2` (and the
//! consensus constant `c`) are caller-supplied inputs defaulting to 1, so
//! the meaningful checks are shapes and orderings, not absolute levels.
//! Every evaluator enforces the hypothesis `rho < rho* = beta/(8 sqrt(R))`.

use serde::{Deserialize, Serialize};

use crate::engine::{RunTrace, StabilityTrace};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Skewness below this threshold counts as zero (absorbs float noise from
/// the chi computation).
const CHI_ZERO_THRESHOLD: f64 = 1e-12;

/// Everything the bound evaluators need.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs<S> {
    /// Contraction constant of the aggregation rule.
    pub rho: S,
    /// Skewness of the virtual mixing matrix.
    pub chi: S,
    /// Spectral gap of the virtual mixing matrix.
    pub beta: S,
    /// Number of honest agents.
    pub honest: usize,
    /// Number of Byzantine agents (carried for reporting; the formulas use
    /// it only through rho in the analytic IOS case).
    pub byz: usize,
    /// Gradient norm bound M.
    pub m: S,
    /// Smoothness constant L.
    pub l: S,
    /// Strong convexity modulus mu.
    pub mu: S,
    /// Samples per agent Z.
    pub z: usize,
    /// Step-size offset k0.
    pub k0: S,
    /// Step-size scale of the improved non-convex schedule.
    pub a: S,
    pub c1: S,
    pub c2: S,
}

impl<S: Scalar> BoundInputs<S> {
    /// Inputs with every constant at 1 and the given spectral data.
    pub fn new(rho: S, chi: S, beta: S, honest: usize, z: usize) -> Self {
        BoundInputs {
            rho,
            chi,
            beta,
            honest,
            byz: 0,
            m: S::one(),
            l: S::one(),
            mu: S::one(),
            z,
            k0: S::lit(10.0),
            a: S::one(),
            c1: S::one(),
            c2: S::one(),
        }
    }

    pub fn rho_star(&self) -> S {
        self.beta / (S::lit(8.0) * S::from_usize(self.honest).unwrap().sqrt())
    }

    fn indicator(&self) -> S {
        if self.chi > S::lit(CHI_ZERO_THRESHOLD) {
            S::one()
        } else {
            S::zero()
        }
    }

    fn honest_s(&self) -> S {
        S::from_usize(self.honest).unwrap()
    }

    fn z_s(&self) -> S {
        S::from_usize(self.z).unwrap()
    }

    fn validate(&self) -> Result<()> {
        let rho_star = self.rho_star();
        if self.rho >= rho_star {
            return Err(Error::HypothesisViolated {
                rho: self.rho.to_f64().unwrap_or(f64::NAN),
                rho_star: rho_star.to_f64().unwrap_or(f64::NAN),
            });
        }
        if self.rho < S::zero() || self.chi < S::zero() {
            return Err(Error::InvalidConfig("rho and chi must be >= 0".into()));
        }
        if self.honest == 0 || self.z == 0 {
            return Err(Error::InvalidConfig("honest count and Z must be >= 1".into()));
        }
        Ok(())
    }
}

/// Strongly convex bound: constant in `k` apart from a vanishing
/// `ln(k+k0)/(k+k0-1)` transient that only appears for skewed mixing.
pub fn bound_strongly_convex<S: Scalar>(inputs: &BoundInputs<S>, k: S) -> Result<S> {
    inputs.validate()?;
    let BoundInputs {
        rho, chi, m, l, mu, k0, c1, c2, ..
    } = *inputs;
    let r = inputs.honest_s();
    let m2 = m * m;
    let two = S::lit(2.0);
    let four = S::lit(4.0);
    let transient =
        c2 * inputs.indicator() * m2 * l * (k + k0).ln() / (mu * mu * (k + k0 - S::one()));
    let sampling = two * m2 / (mu * inputs.z_s() * r);
    let contraction = four * c1 * rho * r * m2 / mu;
    let skew = two * c1 * chi * r.sqrt() * m2 / mu;
    Ok(transient + sampling + contraction + skew)
}

/// Convex bound: logarithmic growth in `k`.
pub fn bound_convex<S: Scalar>(inputs: &BoundInputs<S>, k: S) -> Result<S> {
    inputs.validate()?;
    let BoundInputs {
        rho, chi, m, l, k0, c1, c2, ..
    } = *inputs;
    let r = inputs.honest_s();
    let m2 = m * m;
    let two = S::lit(2.0);
    let four = S::lit(4.0);
    let constant = c2 * inputs.indicator() * m2 * l;
    let slope = two * m2 / (inputs.z_s() * r) + four * c1 * rho * r * m2 + two * c1 * chi * r.sqrt() * m2;
    Ok(constant + slope * (k + k0).ln())
}

/// Non-convex bound: linear growth in `k`.
pub fn bound_nonconvex<S: Scalar>(inputs: &BoundInputs<S>, k: S) -> Result<S> {
    inputs.validate()?;
    let BoundInputs {
        rho, chi, m, l, k0, c1, c2, ..
    } = *inputs;
    let r = inputs.honest_s();
    let m2 = m * m;
    let two = S::lit(2.0);
    let four = S::lit(4.0);
    let skew_slope = c2 * inputs.indicator() * m2 / l;
    let slope = two * m2 / (l * inputs.z_s() * r)
        + four * c1 * rho * r * m2 / l
        + two * c1 * chi * r.sqrt() * m2 / l;
    Ok((skew_slope + slope) * (k + k0))
}

/// The `Delta` aggregate of the improved non-convex bound.
pub fn nonconvex_delta<S: Scalar>(inputs: &BoundInputs<S>) -> S {
    let BoundInputs {
        rho, chi, m, l, a, c1, ..
    } = *inputs;
    let r = inputs.honest_s();
    let z = inputs.z_s();
    let m2 = m * m;
    let two = S::lit(2.0);
    let four = S::lit(4.0);
    two * a * m2 / (l * r) + four * a * c1 * rho * r * z * m2 / l + two * a * c1 * chi * r.sqrt() * z * m2 / l
}

/// Improved non-convex bound (first-divergence-time argument): sublinear
/// `(k+k0)^(a/(a+1))` growth. Assumes the caller's loss is within [0, 1].
pub fn bound_nonconvex_improved<S: Scalar>(inputs: &BoundInputs<S>, k: S) -> Result<S> {
    inputs.validate()?;
    if inputs.a <= S::zero() {
        return Err(Error::InvalidConfig("a must be > 0".into()));
    }
    let delta = nonconvex_delta(inputs);
    let indicator = inputs.indicator();
    if delta == S::zero() && indicator > S::zero() {
        return Err(Error::DeltaZero);
    }
    let BoundInputs { m, l, k0, a, c2, .. } = *inputs;
    let z = inputs.z_s();
    let m2 = m * m;
    let skew_term = if indicator > S::zero() {
        c2 * m2 / (l * delta)
    } else {
        S::zero()
    };
    let exponent = a / (a + S::one());
    let growth =
        (S::one() / z + S::one() / (a * z)) * delta.powf(S::one() / (a + S::one())) * (k + k0).powf(exponent);
    Ok(skew_term + growth)
}

/// Consensus decay bound `c M^2 / (k + k0)^2`.
pub fn consensus_bound<S: Scalar>(c: S, m: S, k: S, k0: S) -> S {
    c * m * m / ((k + k0) * (k + k0))
}

/// Fits the smallest constant `c` with `H^k <= c M^2 / (k+k0)^2` over the
/// recorded steps at or beyond `k_min`: the max of `H^k (k+k0)^2 / M^2`.
pub fn fit_consensus_constant<S: Scalar>(
    trace: &RunTrace<S>,
    m_hat: S,
    k0: S,
    k_min: u64,
) -> Result<S> {
    if m_hat <= S::zero() {
        return Err(Error::InvalidConfig("m_hat must be > 0".into()));
    }
    let mut best: Option<S> = None;
    for row in trace.rows.iter().filter(|r| r.k >= k_min) {
        let k = S::from_u64(row.k).unwrap();
        let value = row.h * (k + k0) * (k + k0) / (m_hat * m_hat);
        best = Some(match best {
            Some(b) if b >= value => b,
            _ => value,
        });
    }
    best.ok_or(Error::EmptyWindow)
}

/// Growth shapes for stability traces, as functions of `k + k0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GrowthModel<S> {
    Constant,
    Log,
    Linear,
    /// `(k + k0)^(a/(a+1))`, the improved non-convex shape.
    Power(S),
}

/// Least-squares fit of `delta^k` against a growth model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GrowthFit<S> {
    pub intercept: S,
    pub slope: S,
    /// Root-mean-square residual.
    pub residual: S,
}

/// Fits `delta^k ~ intercept + slope * g(k + k0)` by least squares, where
/// `g` is the model shape. Needs at least 10 recorded points.
pub fn fit_growth<S: Scalar>(
    stability: &StabilityTrace<S>,
    model: GrowthModel<S>,
    k0: S,
) -> Result<GrowthFit<S>> {
    let rows = &stability.rows;
    if rows.len() < 10 {
        return Err(Error::EmptyWindow);
    }
    let shape = |k: S| -> S {
        match model {
            GrowthModel::Constant => S::one(),
            GrowthModel::Log => (k + k0).ln(),
            GrowthModel::Linear => k + k0,
            GrowthModel::Power(a) => (k + k0).powf(a / (a + S::one())),
        }
    };
    let n = S::from_usize(rows.len()).unwrap();
    let points: Vec<(S, S)> = rows
        .iter()
        .map(|r| (shape(S::from_u64(r.k).unwrap()), r.delta))
        .collect();
    let (intercept, slope) = if matches!(model, GrowthModel::Constant) {
        let mean = points.iter().map(|&(_, y)| y).sum::<S>() / n;
        (mean, S::zero())
    } else {
        let sum_x = points.iter().map(|&(x, _)| x).sum::<S>();
        let sum_y = points.iter().map(|&(_, y)| y).sum::<S>();
        let sum_xx = points.iter().map(|&(x, _)| x * x).sum::<S>();
        let sum_xy = points.iter().map(|&(x, y)| x * y).sum::<S>();
        let denom = n * sum_xx - sum_x * sum_x;
        if denom.abs() <= S::epsilon() * (S::one() + sum_xx.abs()) {
            // degenerate regressor (e.g. constant shape); fall back to mean
            (sum_y / n, S::zero())
        } else {
            let slope = (n * sum_xy - sum_x * sum_y) / denom;
            let intercept = (sum_y - slope * sum_x) / n;
            (intercept, slope)
        }
    };
    let mse = points
        .iter()
        .map(|&(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum::<S>()
        / n;
    Ok(GrowthFit {
        intercept,
        slope,
        residual: mse.sqrt(),
    })
}

/// Seed-averaged generalization gap per recorded step.
#[derive(Clone, Debug, PartialEq)]
pub struct GapEstimate<S> {
    pub ks: Vec<u64>,
    /// Mean of (test loss - train loss) across traces.
    pub mean: Vec<S>,
    /// Standard error of that mean (0 for a single trace).
    pub stderr: Vec<S>,
}

impl<S: Scalar> GapEstimate<S> {
    pub fn at(&self, k: u64) -> Option<(S, S)> {
        self.ks
            .iter()
            .position(|&x| x == k)
            .map(|i| (self.mean[i], self.stderr[i]))
    }
}

/// Per-step test-minus-train loss, averaged across traces that share one
/// recording grid.
pub fn gen_gap<S: Scalar>(traces: &[RunTrace<S>]) -> Result<GapEstimate<S>> {
    let first = traces.first().ok_or(Error::EmptyWindow)?;
    let ks = first.ks();
    for t in traces {
        if t.ks() != ks {
            return Err(Error::GridMismatch);
        }
    }
    let n = S::from_usize(traces.len()).unwrap();
    let mut mean = Vec::with_capacity(ks.len());
    let mut stderr = Vec::with_capacity(ks.len());
    for i in 0..ks.len() {
        let gaps: Vec<S> = traces
            .iter()
            .map(|t| t.rows[i].test_loss - t.rows[i].train_loss)
            .collect();
        let mu = gaps.iter().copied().sum::<S>() / n;
        let se = if traces.len() > 1 {
            let var = gaps.iter().map(|&g| (g - mu) * (g - mu)).sum::<S>()
                / S::from_usize(traces.len() - 1).unwrap();
            (var / n).sqrt()
        } else {
            S::zero()
        };
        mean.push(mu);
        stderr.push(se);
    }
    Ok(GapEstimate { ks, mean, stderr })
}
