//! Losses, gradients, datasets, and step-size schedules.
//!
//! Three loss families: softmax regression with squared-l2 regularization
//! (strongly convex, `mu = lambda`), plain softmax regression (convex), and
//! a one-hidden-layer tanh MLP (non-convex). Gradients are exact analytic
//! expressions; the test suites hold them against central finite
//! differences.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, StreamDomain};
use crate::scalar::Scalar;
use crate::vector::ParamVector;

/// One labeled sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample<S> {
    pub features: Vec<S>,
    pub label: usize,
}

/// A single agent's training shard. `agent` is the shard slot; the engine
/// maps slots onto honest agent ids in ascending order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalDataset<S> {
    pub agent: usize,
    pub samples: Vec<Sample<S>>,
}

/// Loss family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind<S> {
    /// Softmax cross-entropy plus `(lambda/2) ||x||^2`.
    StronglyConvexSoftmax { lambda: S },
    /// Plain softmax cross-entropy.
    Softmax,
    /// One hidden tanh layer of the given width, then softmax cross-entropy.
    Mlp { hidden: usize },
}

/// A loss family bound to a problem shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec<S> {
    pub kind: LossKind<S>,
    pub classes: usize,
    pub features: usize,
}

impl<S: Scalar> LossSpec<S> {
    pub fn new(kind: LossKind<S>, classes: usize, features: usize) -> Self {
        LossSpec {
            kind,
            classes,
            features,
        }
    }

    /// Model dimension: per-class weight plus bias for the softmax kinds,
    /// both layers (with biases) for the MLP.
    pub fn param_dim(&self) -> usize {
        match self.kind {
            LossKind::StronglyConvexSoftmax { .. } | LossKind::Softmax => {
                self.classes * (self.features + 1)
            }
            LossKind::Mlp { hidden } => {
                hidden * (self.features + 1) + self.classes * (hidden + 1)
            }
        }
    }

    /// Strong-convexity modulus; the l2 weight is its only source.
    pub fn mu(&self) -> Option<S> {
        match self.kind {
            LossKind::StronglyConvexSoftmax { lambda } => Some(lambda),
            _ => None,
        }
    }

    fn check_dims(&self, x: &ParamVector<S>, sample: &Sample<S>) -> Result<()> {
        if x.dim() != self.param_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.param_dim(),
                got: x.dim(),
            });
        }
        if sample.features.len() != self.features {
            return Err(Error::DimensionMismatch {
                expected: self.features,
                got: sample.features.len(),
            });
        }
        if sample.label >= self.classes {
            return Err(Error::InvalidConfig(format!(
                "label {} out of range for {} classes",
                sample.label, self.classes
            )));
        }
        Ok(())
    }

    /// Loss and exact gradient at `x` for one sample.
    pub fn loss_and_grad(&self, x: &ParamVector<S>, sample: &Sample<S>) -> Result<(S, ParamVector<S>)> {
        self.check_dims(x, sample)?;
        match self.kind {
            LossKind::StronglyConvexSoftmax { lambda } => {
                let (mut loss, mut grad) = self.softmax_loss_grad(x, sample);
                let half = S::lit(0.5);
                let norm2 = x.dot(x);
                loss += half * lambda * norm2;
                grad.axpy(lambda, x);
                Ok((loss, grad))
            }
            LossKind::Softmax => Ok(self.softmax_loss_grad(x, sample)),
            LossKind::Mlp { hidden } => Ok(self.mlp_loss_grad(x, sample, hidden)),
        }
    }

    /// Loss only (used by the trace metrics, where gradients are wasted).
    pub fn loss(&self, x: &ParamVector<S>, sample: &Sample<S>) -> Result<S> {
        self.check_dims(x, sample)?;
        match self.kind {
            LossKind::StronglyConvexSoftmax { lambda } => {
                let logits = self.softmax_logits(x, sample);
                let loss = cross_entropy(&logits, sample.label);
                Ok(loss + S::lit(0.5) * lambda * x.dot(x))
            }
            LossKind::Softmax => {
                let logits = self.softmax_logits(x, sample);
                Ok(cross_entropy(&logits, sample.label))
            }
            LossKind::Mlp { hidden } => {
                let (logits, _) = self.mlp_forward(x, sample, hidden);
                Ok(cross_entropy(&logits, sample.label))
            }
        }
    }

    /// Predicted class (argmax of logits).
    pub fn predict(&self, x: &ParamVector<S>, sample: &Sample<S>) -> Result<usize> {
        self.check_dims(x, sample)?;
        let logits = match self.kind {
            LossKind::StronglyConvexSoftmax { .. } | LossKind::Softmax => {
                self.softmax_logits(x, sample)
            }
            LossKind::Mlp { hidden } => self.mlp_forward(x, sample, hidden).0,
        };
        let mut best = 0;
        for c in 1..logits.len() {
            if logits[c] > logits[best] {
                best = c;
            }
        }
        Ok(best)
    }

    /// Mean of per-sample gradients over a batch.
    pub fn batch_grad(&self, x: &ParamVector<S>, batch: &[Sample<S>]) -> Result<ParamVector<S>> {
        if batch.is_empty() {
            return Err(Error::InvalidConfig("empty gradient batch".into()));
        }
        let mut acc = ParamVector::zeros(x.dim());
        let inv = S::one() / S::from_usize(batch.len()).unwrap();
        for sample in batch {
            let (_, grad) = self.loss_and_grad(x, sample)?;
            acc.axpy(inv, &grad);
        }
        Ok(acc)
    }

    /// Mean loss over a set of samples.
    pub fn mean_loss(&self, x: &ParamVector<S>, samples: &[Sample<S>]) -> Result<S> {
        if samples.is_empty() {
            return Err(Error::InvalidConfig("empty evaluation set".into()));
        }
        let mut total = S::zero();
        for sample in samples {
            total += self.loss(x, sample)?;
        }
        Ok(total / S::from_usize(samples.len()).unwrap())
    }

    /// Fraction of samples whose argmax prediction matches the label.
    pub fn accuracy(&self, x: &ParamVector<S>, samples: &[Sample<S>]) -> Result<S> {
        if samples.is_empty() {
            return Err(Error::InvalidConfig("empty evaluation set".into()));
        }
        let mut hits = 0usize;
        for sample in samples {
            if self.predict(x, sample)? == sample.label {
                hits += 1;
            }
        }
        Ok(S::from_usize(hits).unwrap() / S::from_usize(samples.len()).unwrap())
    }

    fn softmax_logits(&self, x: &ParamVector<S>, sample: &Sample<S>) -> Vec<S> {
        let stride = self.features + 1;
        (0..self.classes)
            .map(|c| {
                let row = &x.0[c * stride..(c + 1) * stride];
                let mut logit = row[self.features]; // bias
                for (w, &phi) in row[..self.features].iter().zip(&sample.features) {
                    logit += *w * phi;
                }
                logit
            })
            .collect()
    }

    fn softmax_loss_grad(&self, x: &ParamVector<S>, sample: &Sample<S>) -> (S, ParamVector<S>) {
        let stride = self.features + 1;
        let logits = self.softmax_logits(x, sample);
        let probs = softmax(&logits);
        let loss = cross_entropy(&logits, sample.label);
        let mut grad = ParamVector::zeros(x.dim());
        for (c, &prob) in probs.iter().enumerate() {
            let mut residual = prob;
            if c == sample.label {
                residual -= S::one();
            }
            let row = &mut grad.0[c * stride..(c + 1) * stride];
            for (g, &phi) in row[..self.features].iter_mut().zip(&sample.features) {
                *g = residual * phi;
            }
            row[self.features] = residual;
        }
        (loss, grad)
    }

    fn mlp_forward(&self, x: &ParamVector<S>, sample: &Sample<S>, hidden: usize) -> (Vec<S>, Vec<S>) {
        let in_stride = self.features + 1;
        let hid_stride = hidden + 1;
        let w2_offset = hidden * in_stride;
        let activations: Vec<S> = (0..hidden)
            .map(|j| {
                let row = &x.0[j * in_stride..(j + 1) * in_stride];
                let mut z = row[self.features];
                for (w, &phi) in row[..self.features].iter().zip(&sample.features) {
                    z += *w * phi;
                }
                z.tanh()
            })
            .collect();
        let logits: Vec<S> = (0..self.classes)
            .map(|c| {
                let row = &x.0[w2_offset + c * hid_stride..w2_offset + (c + 1) * hid_stride];
                let mut logit = row[hidden];
                for (w, &a) in row[..hidden].iter().zip(&activations) {
                    logit += *w * a;
                }
                logit
            })
            .collect();
        (logits, activations)
    }

    fn mlp_loss_grad(&self, x: &ParamVector<S>, sample: &Sample<S>, hidden: usize) -> (S, ParamVector<S>) {
        let in_stride = self.features + 1;
        let hid_stride = hidden + 1;
        let w2_offset = hidden * in_stride;
        let (logits, activations) = self.mlp_forward(x, sample, hidden);
        let probs = softmax(&logits);
        let loss = cross_entropy(&logits, sample.label);
        let mut grad = ParamVector::zeros(x.dim());
        let mut d_act = vec![S::zero(); hidden];
        for (c, &prob) in probs.iter().enumerate() {
            let mut residual = prob;
            if c == sample.label {
                residual -= S::one();
            }
            let w2_row = &x.0[w2_offset + c * hid_stride..w2_offset + (c + 1) * hid_stride];
            let g2_row = &mut grad.0[w2_offset + c * hid_stride..w2_offset + (c + 1) * hid_stride];
            for j in 0..hidden {
                g2_row[j] = residual * activations[j];
                d_act[j] += residual * w2_row[j];
            }
            g2_row[hidden] = residual;
        }
        for j in 0..hidden {
            // d tanh(z) = 1 - tanh(z)^2
            let dz = d_act[j] * (S::one() - activations[j] * activations[j]);
            let g1_row = &mut grad.0[j * in_stride..(j + 1) * in_stride];
            for (g, &phi) in g1_row[..self.features].iter_mut().zip(&sample.features) {
                *g = dz * phi;
            }
            g1_row[self.features] = dz;
        }
        (loss, grad)
    }
}

fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-ln softmax(logits)[label]`, computed in log-sum-exp form.
fn cross_entropy<S: Scalar>(logits: &[S], label: usize) -> S {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let total: S = logits.iter().map(|&l| (l - max).exp()).sum();
    max + total.ln() - logits[label]
}

/// Step-size families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule<S> {
    /// `1 / (mu (k + k0))` — paired with strongly convex losses.
    Sc { mu: S, k0: S },
    /// `1 / (k + k0)` — paired with convex losses.
    Cvx { k0: S },
    /// `a / (L (k + k0))` — paired with non-convex losses.
    Ncvx { a: S, l: S, k0: S },
    /// `s / (rate k + 1)` — the experiment schedule.
    ScaledInverse { s: S, rate: S },
}

impl<S: Scalar> StepSchedule<S> {
    pub fn step_size(&self, k: u64) -> S {
        let k = S::from_u64(k).unwrap();
        match *self {
            StepSchedule::Sc { mu, k0 } => S::one() / (mu * (k + k0)),
            StepSchedule::Cvx { k0 } => S::one() / (k + k0),
            StepSchedule::Ncvx { a, l, k0 } => a / (l * (k + k0)),
            StepSchedule::ScaledInverse { s, rate } => s / (rate * k + S::one()),
        }
    }

    pub fn k0(&self) -> Option<S> {
        match *self {
            StepSchedule::Sc { k0, .. }
            | StepSchedule::Cvx { k0 }
            | StepSchedule::Ncvx { k0, .. } => Some(k0),
            StepSchedule::ScaledInverse { .. } => None,
        }
    }
}

/// Synthetic Gaussian-mixture population: one spherical component per class,
/// class means at `separation` times a seeded random unit direction, noise
/// `noise` per coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec<S> {
    pub classes: usize,
    pub features: usize,
    /// Samples per honest agent.
    pub z: usize,
    pub honest_count: usize,
    pub test_count: usize,
    pub separation: S,
    pub noise: S,
    pub seed: u64,
}

/// Materialized synthetic data.
#[derive(Clone, Debug)]
pub struct SynthData<S> {
    pub train: Vec<LocalDataset<S>>,
    pub test: Vec<Sample<S>>,
}

/// Draws i.i.d. samples from the mixture and allocates them evenly and
/// uniformly at random across the honest agents, plus a held-out test set
/// from the same population. Deterministic in the spec (including its seed).
pub fn synth_dataset<S: Scalar>(spec: &SynthSpec<S>) -> Result<SynthData<S>> {
    if spec.classes == 0 || spec.features == 0 || spec.z == 0 || spec.honest_count == 0 {
        return Err(Error::InvalidConfig(
            "synthetic dataset needs positive classes/features/z/honest_count".into(),
        ));
    }
    let means = class_means(spec);

    let mut rng = stream(spec.seed, StreamDomain::SynthSamples, 0, 0);
    let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
        let label = (S::unit_uniform(rng) * S::from_usize(spec.classes).unwrap())
            .to_usize()
            .unwrap_or(0)
            .min(spec.classes - 1);
        let features = means[label]
            .iter()
            .map(|&m| m + spec.noise * S::standard_normal(rng))
            .collect();
        Sample { features, label }
    };

    let total = spec.z * spec.honest_count;
    let mut pool: Vec<Sample<S>> = (0..total).map(|_| draw(&mut rng)).collect();
    let test: Vec<Sample<S>> = (0..spec.test_count).map(|_| draw(&mut rng)).collect();

    // uniformly random allocation: Fisher-Yates with its own stream
    let mut alloc = stream(spec.seed, StreamDomain::SynthAlloc, 0, 0);
    for i in (1..pool.len()).rev() {
        let j = (S::unit_uniform(&mut alloc) * S::from_usize(i + 1).unwrap())
            .to_usize()
            .unwrap_or(0)
            .min(i);
        pool.swap(i, j);
    }
    let train = (0..spec.honest_count)
        .map(|slot| LocalDataset {
            agent: slot,
            samples: pool[slot * spec.z..(slot + 1) * spec.z].to_vec(),
        })
        .collect();
    Ok(SynthData { train, test })
}

/// Class means: `separation` times a seeded random unit direction each.
fn class_means<S: Scalar>(spec: &SynthSpec<S>) -> Vec<Vec<S>> {
    (0..spec.classes)
        .map(|c| {
            let mut rng = stream(spec.seed, StreamDomain::SynthMeans, c as u64, 0);
            let mut dir: Vec<S> = unit_direction(&mut rng, spec.features);
            for v in dir.iter_mut() {
                *v *= spec.separation;
            }
            dir
        })
        .collect()
}

/// One extra population draw, for stability-pair sample replacement.
pub fn synth_replacement<S: Scalar>(spec: &SynthSpec<S>, perturb_seed: u64) -> Sample<S> {
    let means = class_means(spec);
    let mut rng = stream(perturb_seed, StreamDomain::Replacement, 0, 0);
    let label = (S::unit_uniform(&mut rng) * S::from_usize(spec.classes).unwrap())
        .to_usize()
        .unwrap_or(0)
        .min(spec.classes - 1);
    let features = means[label]
        .iter()
        .map(|&m| m + spec.noise * S::standard_normal(&mut rng))
        .collect();
    Sample { features, label }
}

fn unit_direction<S: Scalar>(rng: &mut rand_chacha::ChaCha8Rng, dim: usize) -> Vec<S> {
    let mut dir: Vec<S> = (0..dim).map(|_| S::standard_normal(rng)).collect();
    let norm = dir.iter().map(|&v| v * v).sum::<S>().sqrt();
    if norm > S::zero() {
        for v in dir.iter_mut() {
            *v /= norm;
        }
    } else {
        dir[0] = S::one();
    }
    dir
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse("IDX file truncated".into()))
}

/// Loads an IDX image/label pair (the MNIST container format). Pixels are
/// scaled into [0, 1].
pub fn load_idx<S: Scalar>(images_path: &Path, labels_path: &Path) -> Result<Vec<Sample<S>>> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    parse_idx(&images, &labels)
}

/// IDX parsing on raw bytes; `load_idx` is the file-reading wrapper.
pub fn parse_idx<S: Scalar>(images: &[u8], labels: &[u8]) -> Result<Vec<Sample<S>>> {
    let magic = read_be_u32(images, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            got: magic,
        });
    }
    let magic = read_be_u32(labels, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_LABELS_MAGIC,
            got: magic,
        });
    }
    let n_images = read_be_u32(images, 4)? as usize;
    let rows = read_be_u32(images, 8)? as usize;
    let cols = read_be_u32(images, 12)? as usize;
    let n_labels = read_be_u32(labels, 4)? as usize;
    if n_images != n_labels {
        return Err(Error::LengthMismatch {
            images: n_images,
            labels: n_labels,
        });
    }
    let pixels = rows * cols;
    if images.len() < 16 + n_images * pixels || labels.len() < 8 + n_labels {
        return Err(Error::Parse("IDX file truncated".into()));
    }
    let scale = S::one() / S::lit(255.0);
    Ok((0..n_images)
        .map(|i| {
            let start = 16 + i * pixels;
            let features = images[start..start + pixels]
                .iter()
                .map(|&b| S::from_u8(b).unwrap() * scale)
                .collect();
            Sample {
                features,
                label: labels[8 + i] as usize,
            }
        })
        .collect())
}

/// Empirical bounds on the gradient norm (`M`) and smoothness (`L`):
/// the max gradient norm over probe points x samples, and the max gradient
/// difference ratio over random close pairs. Both are LOWER bounds of the
/// true constants; doubling `probes` never decreases them under the same
/// seed.
pub fn estimate_m_l<S: Scalar>(
    spec: &LossSpec<S>,
    samples: &[Sample<S>],
    probes: usize,
    seed: u64,
) -> Result<(S, S)> {
    if probes == 0 || samples.is_empty() {
        return Err(Error::InvalidConfig(
            "estimate_m_l needs probes >= 1 and a nonempty sample set".into(),
        ));
    }
    let dim = spec.param_dim();
    let mut m_hat = S::zero();
    let mut l_hat = S::zero();
    let pair_offset = S::lit(1e-3);
    for t in 0..probes {
        let mut rng = stream(seed, StreamDomain::Probes, t as u64, 0);
        let x = if t == 0 {
            ParamVector::zeros(dim)
        } else {
            ParamVector::from_vec((0..dim).map(|_| S::standard_normal(&mut rng)).collect())
        };
        let direction = unit_direction(&mut rng, dim);
        let mut y = x.clone();
        y.axpy(pair_offset, &ParamVector::from_vec(direction));
        let gap = x.distance(&y);
        for sample in samples {
            let (_, gx) = spec.loss_and_grad(&x, sample)?;
            m_hat = m_hat.max(gx.norm());
            let (_, gy) = spec.loss_and_grad(&y, sample)?;
            if gap > S::zero() {
                l_hat = l_hat.max(gx.distance(&gy) / gap);
            }
        }
    }
    Ok((m_hat, l_hat))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sc_spec(lambda: f64) -> LossSpec<f64> {
        LossSpec::new(LossKind::StronglyConvexSoftmax { lambda }, 3, 4)
    }

    fn random_sample(seed: u64, features: usize, classes: usize) -> Sample<f64> {
        let mut rng = stream(seed, StreamDomain::Probes, 1000, 0);
        Sample {
            features: (0..features).map(|_| f64::standard_normal(&mut rng)).collect(),
            label: (f64::unit_uniform(&mut rng) * classes as f64) as usize % classes,
        }
    }

    fn random_point(seed: u64, dim: usize) -> ParamVector<f64> {
        let mut rng = stream(seed, StreamDomain::Probes, 2000, 0);
        ParamVector::from_vec((0..dim).map(|_| f64::standard_normal(&mut rng)).collect())
    }

    /// Central finite differences, the gradient oracle.
    fn fd_grad(spec: &LossSpec<f64>, x: &ParamVector<f64>, sample: &Sample<f64>) -> ParamVector<f64> {
        let mut grad = ParamVector::zeros(x.dim());
        for i in 0..x.dim() {
            let h = 1e-5 * (1.0 + x.0[i].abs());
            let mut plus = x.clone();
            plus.0[i] += h;
            let mut minus = x.clone();
            minus.0[i] -= h;
            grad.0[i] =
                (spec.loss(&plus, sample).unwrap() - spec.loss(&minus, sample).unwrap()) / (2.0 * h);
        }
        grad
    }

    fn assert_grad_close(spec: &LossSpec<f64>, x: &ParamVector<f64>, sample: &Sample<f64>) {
        let (_, analytic) = spec.loss_and_grad(x, sample).unwrap();
        let numeric = fd_grad(spec, x, sample);
        let rel = analytic.distance(&numeric) / analytic.norm().max(1e-8);
        assert!(rel < 1e-5, "relative gradient error {rel}");
    }

    #[test]
    fn loss_at_zero_is_ln_classes() {
        let spec = sc_spec(1.0);
        let x = ParamVector::zeros(spec.param_dim());
        let sample = random_sample(1, 4, 3);
        let (loss, _) = spec.loss_and_grad(&x, &sample).unwrap();
        assert!((loss - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_lambda_matches_plain_softmax() {
        let sc = sc_spec(0.0);
        let plain = LossSpec::new(LossKind::Softmax, 3, 4);
        let x = random_point(3, sc.param_dim());
        let sample = random_sample(4, 4, 3);
        let (l1, g1) = sc.loss_and_grad(&x, &sample).unwrap();
        let (l2, g2) = plain.loss_and_grad(&x, &sample).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let specs = [
            sc_spec(0.7),
            LossSpec::new(LossKind::Softmax, 3, 4),
            LossSpec::new(LossKind::Mlp { hidden: 5 }, 3, 4),
        ];
        for (i, spec) in specs.iter().enumerate() {
            for trial in 0..10 {
                let seed = (i * 100 + trial) as u64;
                let x = random_point(seed, spec.param_dim());
                let sample = random_sample(seed + 1, 4, 3);
                assert_grad_close(spec, &x, &sample);
            }
        }
    }

    #[test]
    fn strong_convexity_inequality_holds() {
        let spec = sc_spec(0.5);
        let mu = spec.mu().unwrap();
        for trial in 0..50 {
            let x = random_point(trial, spec.param_dim());
            let y = random_point(trial + 500, spec.param_dim());
            let sample = random_sample(trial + 1000, 4, 3);
            let (fx, gx) = spec.loss_and_grad(&x, &sample).unwrap();
            let fy = spec.loss(&y, &sample).unwrap();
            let diff = y.sub(&x);
            let lower = fx + gx.dot(&diff) + 0.5 * mu * diff.dot(&diff);
            assert!(fy >= lower - 1e-9, "violated by {}", lower - fy);
        }
    }

    #[test]
    fn batch_grad_reduces_correctly() {
        let spec = sc_spec(0.3);
        let x = random_point(7, spec.param_dim());
        let s1 = random_sample(8, 4, 3);
        let (_, g1) = spec.loss_and_grad(&x, &s1).unwrap();

        // batch of one equals the single gradient
        let b1 = spec.batch_grad(&x, std::slice::from_ref(&s1)).unwrap();
        assert_eq!(b1, g1);

        // a sample repeated twice equals once
        let b2 = spec.batch_grad(&x, &[s1.clone(), s1.clone()]).unwrap();
        for i in 0..b2.dim() {
            assert!((b2.0[i] - g1.0[i]).abs() < 1e-12);
        }

        // five-sample batch equals the explicit average
        let batch: Vec<Sample<f64>> = (0..5).map(|t| random_sample(20 + t, 4, 3)).collect();
        let got = spec.batch_grad(&x, &batch).unwrap();
        let mut expected = ParamVector::zeros(x.dim());
        for s in &batch {
            let (_, g) = spec.loss_and_grad(&x, s).unwrap();
            expected.axpy(0.2, &g);
        }
        for i in 0..got.dim() {
            assert!((got.0[i] - expected.0[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn step_sizes_match_formulas() {
        let sc: StepSchedule<f64> = StepSchedule::Sc { mu: 1.0, k0: 10.0 };
        assert_eq!(sc.step_size(0), 0.1);

        let exp: StepSchedule<f64> = StepSchedule::ScaledInverse { s: 1.0, rate: 0.01 };
        assert_eq!(exp.step_size(0), 1.0);

        let ncvx: StepSchedule<f64> = StepSchedule::Ncvx { a: 1.0, l: 2.0, k0: 10.0 };
        assert_eq!(ncvx.step_size(0), 0.05);
    }

    #[test]
    fn step_sizes_are_non_increasing() {
        let schedules: Vec<StepSchedule<f64>> = vec![
            StepSchedule::Sc { mu: 0.5, k0: 3.0 },
            StepSchedule::Cvx { k0: 1.0 },
            StepSchedule::Ncvx { a: 2.0, l: 0.5, k0: 7.0 },
            StepSchedule::ScaledInverse { s: 0.015, rate: 0.01 },
        ];
        for schedule in schedules {
            let mut last = f64::INFINITY;
            for k in 0..200 {
                let alpha = schedule.step_size(k);
                assert!(alpha > 0.0);
                assert!(alpha <= last);
                last = alpha;
            }
        }
    }

    #[test]
    fn synth_dataset_allocates_evenly_and_deterministically() {
        let spec = SynthSpec {
            classes: 2,
            features: 5,
            z: 10,
            honest_count: 3,
            test_count: 7,
            separation: 3.0,
            noise: 1.0,
            seed: 42,
        };
        let data: SynthData<f64> = synth_dataset(&spec).unwrap();
        assert_eq!(data.train.len(), 3);
        assert!(data.train.iter().all(|d| d.samples.len() == 10));
        assert_eq!(data.test.len(), 7);

        let again = synth_dataset(&spec).unwrap();
        assert_eq!(data.train, again.train);
        assert_eq!(data.test, again.test);
    }

    #[test]
    fn separable_mixture_is_learnable() {
        let spec = SynthSpec {
            classes: 2,
            features: 8,
            z: 100,
            honest_count: 2,
            test_count: 400,
            separation: 6.0,
            noise: 1.0,
            seed: 5,
        };
        let data: SynthData<f64> = synth_dataset(&spec).unwrap();
        let loss = LossSpec::new(LossKind::Softmax, 2, 8);
        let mut x = ParamVector::zeros(loss.param_dim());
        let all: Vec<Sample<f64>> = data
            .train
            .iter()
            .flat_map(|d| d.samples.iter().cloned())
            .collect();
        // linear probe trained to convergence by plain gradient descent
        for _ in 0..400 {
            let g = loss.batch_grad(&x, &all).unwrap();
            x.axpy(-0.5, &g);
        }
        let acc = loss.accuracy(&x, &data.test).unwrap();
        assert!(acc > 0.95, "test accuracy {acc}");
    }

    fn idx_bytes(n: usize, rows: usize, cols: usize) -> (Vec<u8>, Vec<u8>) {
        let mut images = Vec::new();
        images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        images.extend_from_slice(&(n as u32).to_be_bytes());
        images.extend_from_slice(&(rows as u32).to_be_bytes());
        images.extend_from_slice(&(cols as u32).to_be_bytes());
        for i in 0..n * rows * cols {
            images.push((i % 256) as u8);
        }
        let mut labels = Vec::new();
        labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        labels.extend_from_slice(&(n as u32).to_be_bytes());
        for i in 0..n {
            labels.push((i % 10) as u8);
        }
        (images, labels)
    }

    #[test]
    fn idx_parses_well_formed_files() {
        let (images, labels) = idx_bytes(4, 2, 3);
        let samples: Vec<Sample<f64>> = parse_idx(&images, &labels).unwrap();
        assert_eq!(samples.len(), 4);
        assert!(samples.iter().all(|s| s.features.len() == 6));
        assert_eq!(samples[1].label, 1);
    }

    #[test]
    fn idx_scales_255_to_one() {
        let mut images = Vec::new();
        images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        images.extend_from_slice(&1u32.to_be_bytes());
        images.extend_from_slice(&1u32.to_be_bytes());
        images.extend_from_slice(&1u32.to_be_bytes());
        images.push(255);
        let mut labels = Vec::new();
        labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        labels.extend_from_slice(&1u32.to_be_bytes());
        labels.push(0);
        let samples: Vec<Sample<f64>> = parse_idx(&images, &labels).unwrap();
        assert_eq!(samples[0].features[0], 1.0);
    }

    #[test]
    fn idx_rejects_count_mismatch() {
        let (images, _) = idx_bytes(4, 2, 3);
        let (_, labels) = idx_bytes(5, 2, 3);
        assert!(matches!(
            parse_idx::<f64>(&images, &labels),
            Err(Error::LengthMismatch { images: 4, labels: 5 })
        ));
    }

    #[test]
    fn idx_rejects_bad_magic() {
        let (mut images, labels) = idx_bytes(2, 1, 1);
        images[3] = 9;
        assert!(matches!(
            parse_idx::<f64>(&images, &labels),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn m_estimate_respects_analytic_envelope() {
        // zero features: softmax residual norm is at most sqrt(2), plus the
        // regularizer contribution lambda * ||probe||
        let lambda = 0.3;
        let spec = LossSpec::new(LossKind::StronglyConvexSoftmax { lambda }, 3, 2);
        let samples: Vec<Sample<f64>> = (0..4)
            .map(|i| Sample {
                features: vec![0.0, 0.0],
                label: i % 3,
            })
            .collect();
        let probes = 25;
        let (m_hat, _) = estimate_m_l(&spec, &samples, probes, 11).unwrap();
        let mut max_probe_norm: f64 = 0.0;
        for t in 0..probes {
            let mut rng = stream(11, StreamDomain::Probes, t as u64, 0);
            let x = if t == 0 {
                ParamVector::zeros(spec.param_dim())
            } else {
                ParamVector::from_vec(
                    (0..spec.param_dim()).map(|_| f64::standard_normal(&mut rng)).collect(),
                )
            };
            max_probe_norm = max_probe_norm.max(x.norm());
        }
        assert!(m_hat <= 2.0f64.sqrt() + lambda * max_probe_norm + 1e-12);
        assert!(m_hat > 0.0);
    }

    #[test]
    fn constant_loss_has_zero_smoothness() {
        // single class, zero features, no regularizer: the loss is
        // identically zero and so is every gradient
        let spec = LossSpec::new(LossKind::Softmax, 1, 1);
        let samples = vec![Sample {
            features: vec![0.0],
            label: 0,
        }];
        let (m_hat, l_hat): (f64, f64) = estimate_m_l(&spec, &samples, 10, 3).unwrap();
        assert_eq!(m_hat, 0.0);
        assert_eq!(l_hat, 0.0);
    }

    #[test]
    fn m_estimate_is_monotone_in_probes() {
        let spec = sc_spec(0.2);
        let samples: Vec<Sample<f64>> = (0..5).map(|i| random_sample(i, 4, 3)).collect();
        let (m_small, _) = estimate_m_l(&spec, &samples, 10, 9).unwrap();
        let (m_large, _) = estimate_m_l(&spec, &samples, 20, 9).unwrap();
        assert!(m_large >= m_small);
    }
}
