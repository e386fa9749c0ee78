//! Robust aggregation rules.
//!
//! Each honest agent aggregates its own half-step model with the messages
//! received from neighbors (honest half-steps and whatever the Byzantine
//! neighbors chose to send). Weighted averaging is the vulnerable baseline;
//! trimmed mean, IOS and SCC are the robust replacements.
//!
//! Weighted sums iterate entries in ascending sender id with the agent's own
//! vector merged at its own id. Agents aggregating the same multiset with the
//! same weights therefore produce bit-identical outputs, which keeps exact
//! consensus exact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::vector::ParamVector;

/// One received message.
#[derive(Clone, Debug, PartialEq)]
pub struct Message<S> {
    pub sender: usize,
    pub values: ParamVector<S>,
}

/// Trust weights over the inbound set; `own` plus one entry per message,
/// summing to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct InboundWeights<S> {
    pub own: S,
    pub per_message: Vec<S>,
}

/// Everything an agent has on hand when it aggregates: its own half-step
/// vector, the received messages, and optional trust weights.
#[derive(Clone, Debug, PartialEq)]
pub struct InboundSet<S> {
    pub own_id: usize,
    pub own: ParamVector<S>,
    pub messages: Vec<Message<S>>,
    pub weights: Option<InboundWeights<S>>,
}

impl<S: Scalar> InboundSet<S> {
    /// Uniform weights over own + messages.
    pub fn with_uniform_weights(
        own_id: usize,
        own: ParamVector<S>,
        messages: Vec<Message<S>>,
    ) -> Self {
        let w = S::one() / S::from_usize(messages.len() + 1).unwrap();
        let per_message = vec![w; messages.len()];
        InboundSet {
            own_id,
            own,
            messages,
            weights: Some(InboundWeights {
                own: w,
                per_message,
            }),
        }
    }

    fn check_dimensions(&self) -> Result<()> {
        let d = self.own.dim();
        for m in &self.messages {
            if m.values.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: m.values.dim(),
                });
            }
        }
        if let Some(w) = &self.weights {
            if w.per_message.len() != self.messages.len() {
                return Err(Error::DimensionMismatch {
                    expected: self.messages.len(),
                    got: w.per_message.len(),
                });
            }
        }
        Ok(())
    }

    fn weights(&self) -> Result<&InboundWeights<S>> {
        self.weights.as_ref().ok_or(Error::MissingWeights)
    }

    /// Entries as `(sender id, vector, weight)` sorted by sender id, with
    /// the own vector in place.
    fn weighted_entries(&self) -> Result<Vec<(usize, &ParamVector<S>, S)>> {
        let w = self.weights()?;
        let mut entries: Vec<(usize, &ParamVector<S>, S)> = Vec::with_capacity(self.messages.len() + 1);
        entries.push((self.own_id, &self.own, w.own));
        for (m, &weight) in self.messages.iter().zip(&w.per_message) {
            entries.push((m.sender, &m.values, weight));
        }
        entries.sort_by_key(|e| e.0);
        Ok(entries)
    }
}

/// Aggregation rule id plus parameters, as it appears in run configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum AggregationRule<S> {
    /// Plain weighted averaging (the attack-free baseline).
    #[serde(rename = "mean")]
    WeightedMean,
    /// Coordinate-wise trimmed mean dropping the `b` largest and smallest.
    TrimmedMean { b: usize },
    /// Iterative outlier scissor removing `q` messages.
    Ios { q: usize },
    /// Self-centered clipping with radius `tau`.
    Scc { tau: S },
}

impl<S: Scalar> AggregationRule<S> {
    pub fn aggregate(&self, inbound: &InboundSet<S>) -> Result<ParamVector<S>> {
        match *self {
            AggregationRule::WeightedMean => weighted_mean(inbound),
            AggregationRule::TrimmedMean { b } => trimmed_mean(inbound, b),
            AggregationRule::Ios { q } => ios(inbound, q),
            AggregationRule::Scc { tau } => scc(inbound, tau),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AggregationRule::WeightedMean => "mean",
            AggregationRule::TrimmedMean { .. } => "trimmed_mean",
            AggregationRule::Ios { .. } => "ios",
            AggregationRule::Scc { .. } => "scc",
        }
    }
}

/// Weighted average of own vector and all messages.
pub fn weighted_mean<S: Scalar>(inbound: &InboundSet<S>) -> Result<ParamVector<S>> {
    inbound.check_dimensions()?;
    let entries = inbound.weighted_entries()?;
    let mut acc = ParamVector::zeros(inbound.own.dim());
    for (_, vector, weight) in entries {
        acc.axpy(weight, vector);
    }
    Ok(acc)
}

/// Coordinate-wise trimmed mean: per coordinate drop the `b` largest and
/// `b` smallest among own + messages, then average the survivors
/// unweighted. Trust weights are deliberately ignored.
pub fn trimmed_mean<S: Scalar>(inbound: &InboundSet<S>, b: usize) -> Result<ParamVector<S>> {
    inbound.check_dimensions()?;
    let count = inbound.messages.len() + 1;
    if count <= 2 * b {
        return Err(Error::TooFewInputs { count, param: b });
    }
    let dim = inbound.own.dim();
    let kept = S::from_usize(count - 2 * b).unwrap();
    let mut out = Vec::with_capacity(dim);
    let mut column: Vec<S> = Vec::with_capacity(count);
    for i in 0..dim {
        column.clear();
        column.push(inbound.own.0[i]);
        column.extend(inbound.messages.iter().map(|m| m.values.0[i]));
        column.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite model entries"));
        let mut sum = S::zero();
        for &v in &column[b..count - b] {
            sum += v;
        }
        out.push(sum / kept);
    }
    Ok(ParamVector::from_vec(out))
}

/// Iterative outlier scissor. Starting from the trusted set
/// {own} + messages, repeat `q` times: take the weight-renormalized average
/// of the trusted set and drop the message (never own) farthest from it,
/// breaking distance ties toward the lowest sender id. Returns the
/// renormalized weighted average of the survivors.
pub fn ios<S: Scalar>(inbound: &InboundSet<S>, q: usize) -> Result<ParamVector<S>> {
    inbound.check_dimensions()?;
    if q >= inbound.messages.len() {
        return Err(Error::TooFewInputs {
            count: inbound.messages.len(),
            param: q,
        });
    }
    let mut trusted = inbound.weighted_entries()?;
    let own_id = inbound.own_id;
    for _ in 0..q {
        let average = renormalized_average(&trusted);
        let mut candidate: Option<(usize, S)> = None; // (position, distance)
        for (pos, (sender, vector, _)) in trusted.iter().enumerate() {
            if *sender == own_id {
                continue;
            }
            let dist = vector.distance(&average);
            // ascending sender order, so strict > keeps the lowest id on ties
            if candidate.is_none_or(|(_, best)| dist > best) {
                candidate = Some((pos, dist));
            }
        }
        let (pos, _) = candidate.expect("q < message count leaves a removable message");
        trusted.remove(pos);
    }
    Ok(renormalized_average(&trusted))
}

fn renormalized_average<S: Scalar>(entries: &[(usize, &ParamVector<S>, S)]) -> ParamVector<S> {
    let dim = entries[0].1.dim();
    let mut total = S::zero();
    let mut acc = ParamVector::zeros(dim);
    for &(_, vector, weight) in entries {
        total += weight;
        acc.axpy(weight, vector);
    }
    acc.scale_in_place(S::one() / total);
    acc
}

/// Self-centered clipping: each message is pulled into the ball of radius
/// `tau` around the own vector, then everything is weighted-averaged.
/// Zero-distance messages pass through unchanged. `tau = infinity` disables
/// clipping, `tau = 0` returns the own vector.
pub fn scc<S: Scalar>(inbound: &InboundSet<S>, tau: S) -> Result<ParamVector<S>> {
    inbound.check_dimensions()?;
    if tau < S::zero() {
        return Err(Error::InvalidConfig(format!(
            "clipping radius must be >= 0, got {tau}"
        )));
    }
    let weights = inbound.weights()?;
    let own = &inbound.own;
    let mut entries: Vec<(usize, ParamVector<S>, S)> =
        Vec::with_capacity(inbound.messages.len() + 1);
    entries.push((inbound.own_id, own.clone(), weights.own));
    for (m, &weight) in inbound.messages.iter().zip(&weights.per_message) {
        let dist = m.values.distance(own);
        let clipped = if dist > tau {
            let mut v = own.clone();
            v.axpy(tau / dist, &m.values.sub(own));
            v
        } else {
            m.values.clone()
        };
        entries.push((m.sender, clipped, weight));
    }
    entries.sort_by_key(|e| e.0);
    let mut acc = ParamVector::zeros(own.dim());
    for (_, vector, weight) in &entries {
        acc.axpy(*weight, vector);
    }
    Ok(acc)
}

/// Evaluates one side of the contraction inequality: with
/// `xhat = sum_m w_row[m] * honest[m]`, returns
/// `lhs = ||rule(own, all points) - xhat||` and
/// `spread = max_m ||honest[m] - xhat||`, so callers can assert
/// `lhs <= rho * spread`.
///
/// The rule aggregates with uniform trust weights over all points (the
/// agent cannot tell honest from Byzantine); `w_row` only defines the
/// virtual average. The first honest point doubles as the agent's own.
pub fn check_contraction<S: Scalar>(
    rule: &AggregationRule<S>,
    honest_points: &[ParamVector<S>],
    byz_points: &[ParamVector<S>],
    w_row: &[S],
) -> Result<(S, S)> {
    if honest_points.is_empty() {
        return Err(Error::InvalidConfig("need at least one honest point".into()));
    }
    if w_row.len() != honest_points.len() {
        return Err(Error::DimensionMismatch {
            expected: honest_points.len(),
            got: w_row.len(),
        });
    }
    let total: S = w_row.iter().copied().sum();
    if (total - S::one()).abs() > S::lit(1e-6) {
        return Err(Error::InvalidConfig(format!(
            "w_row sums to {total}, expected 1"
        )));
    }
    let dim = honest_points[0].dim();
    let mut xhat = ParamVector::zeros(dim);
    for (p, &w) in honest_points.iter().zip(w_row) {
        if p.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: p.dim(),
            });
        }
        xhat.axpy(w, p);
    }
    let messages: Vec<Message<S>> = honest_points
        .iter()
        .enumerate()
        .skip(1)
        .map(|(i, p)| Message {
            sender: i,
            values: p.clone(),
        })
        .chain(byz_points.iter().enumerate().map(|(j, p)| Message {
            sender: honest_points.len() + j,
            values: p.clone(),
        }))
        .collect();
    let inbound = InboundSet::with_uniform_weights(0, honest_points[0].clone(), messages);
    let aggregated = rule.aggregate(&inbound)?;
    let lhs = aggregated.distance(&xhat);
    let spread = honest_points
        .iter()
        .map(|p| p.distance(&xhat))
        .fold(S::zero(), S::max);
    Ok((lhs, spread))
}
