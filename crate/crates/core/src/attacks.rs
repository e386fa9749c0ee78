//! Byzantine message generators.
//!
//! A Byzantine agent fabricates one message per honest target and step. Its
//! view is the target's honest neighborhood: the half-step models
//! `x_m^{k+1/2}` of the target's honest neighbors. Messages are therefore
//! per-target; the same attacker can send different vectors to different
//! neighbors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::Message;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::vector::ParamVector;

/// What a Byzantine agent knows when fabricating a message for `target`.
#[derive(Debug)]
pub struct AttackContext<'a, S> {
    /// The honest agent this message is for.
    pub target: usize,
    /// Half-step models of the target's honest neighbors, ascending sender.
    pub honest_msgs: &'a [Message<S>],
    pub step: u64,
    pub dim: usize,
}

/// Attack selection as it appears in run configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackSpec<S> {
    None,
    /// i.i.d. entries from N(0, 900).
    Gaussian,
    /// Replay one fixed honest agent's messages verbatim.
    Duplicate { victim: Option<usize> },
    /// Honest neighborhood mean plus `r` coordinate-wise standard deviations.
    Alie { r: S },
    /// Negated honest neighborhood mean.
    #[serde(rename = "signflip")]
    SignFlip,
}

impl<S> AttackSpec<S> {
    pub fn is_none(&self) -> bool {
        matches!(self, AttackSpec::None)
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttackSpec::None => "none",
            AttackSpec::Gaussian => "gaussian",
            AttackSpec::Duplicate { .. } => "duplicate",
            AttackSpec::Alie { .. } => "alie",
            AttackSpec::SignFlip => "signflip",
        }
    }
}

/// Gaussian attack: every element i.i.d. normal with mean 0, variance 900.
pub fn gaussian_attack<S: Scalar, R: Rng + ?Sized>(
    ctx: &AttackContext<'_, S>,
    rng: &mut R,
) -> ParamVector<S> {
    let sigma = S::lit(30.0); // sqrt(900)
    ParamVector::from_vec(
        (0..ctx.dim)
            .map(|_| sigma * S::standard_normal(rng))
            .collect(),
    )
}

/// Sample-duplicating attack: replays the victim's half-step verbatim. The
/// victim is fixed for the whole run; all Byzantine agents use the same one.
pub fn duplicate_attack<S: Scalar>(
    ctx: &AttackContext<'_, S>,
    victim: usize,
) -> Result<ParamVector<S>> {
    ctx.honest_msgs
        .iter()
        .find(|m| m.sender == victim)
        .map(|m| m.values.clone())
        .ok_or(Error::VictimNotVisible {
            victim,
            target: ctx.target,
        })
}

fn neighborhood_mean<S: Scalar>(ctx: &AttackContext<'_, S>) -> ParamVector<S> {
    let mut mean = ParamVector::zeros(ctx.dim);
    if ctx.honest_msgs.is_empty() {
        return mean;
    }
    let inv = S::one() / S::from_usize(ctx.honest_msgs.len()).unwrap();
    for m in ctx.honest_msgs {
        mean.axpy(inv, &m.values);
    }
    mean
}

/// A-little-is-enough: honest neighborhood mean plus `r` times the
/// coordinate-wise population standard deviation. A single visible message
/// has zero deviation, so the mean comes back unchanged.
pub fn alie_attack<S: Scalar>(ctx: &AttackContext<'_, S>, r: S) -> ParamVector<S> {
    let mean = neighborhood_mean(ctx);
    if ctx.honest_msgs.is_empty() {
        return mean;
    }
    let inv = S::one() / S::from_usize(ctx.honest_msgs.len()).unwrap();
    let mut out = mean.clone();
    for i in 0..ctx.dim {
        let mut variance = S::zero();
        for m in ctx.honest_msgs {
            let d = m.values.0[i] - mean.0[i];
            variance += d * d;
        }
        out.0[i] += r * (variance * inv).sqrt();
    }
    out
}

/// Sign-flipping: -1 times the honest neighborhood mean.
pub fn sign_flip_attack<S: Scalar>(ctx: &AttackContext<'_, S>) -> ParamVector<S> {
    neighborhood_mean(ctx).scale(-S::one())
}
