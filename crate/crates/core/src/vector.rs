//! Flat model vectors exchanged between agents.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// A model vector `x` in `R^d`; the unit exchanged between agents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector<S>(pub Vec<S>);

impl<S: Scalar> ParamVector<S> {
    pub fn zeros(dim: usize) -> Self {
        ParamVector(vec![S::zero(); dim])
    }

    pub fn from_vec(values: Vec<S>) -> Self {
        ParamVector(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[S] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> S {
        self.0.iter().map(|&v| v * v).sum::<S>().sqrt()
    }

    /// Euclidean distance `||self - other||`.
    pub fn distance(&self, other: &Self) -> S {
        debug_assert_eq!(self.dim(), other.dim());
        self.0
            .iter()
            .zip(&other.0)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<S>()
            .sqrt()
    }

    pub fn dot(&self, other: &Self) -> S {
        debug_assert_eq!(self.dim(), other.dim());
        self.0.iter().zip(&other.0).map(|(&a, &b)| a * b).sum()
    }

    pub fn scale(&self, c: S) -> Self {
        ParamVector(self.0.iter().map(|&v| v * c).collect())
    }

    pub fn add(&self, other: &Self) -> Self {
        debug_assert_eq!(self.dim(), other.dim());
        ParamVector(self.0.iter().zip(&other.0).map(|(&a, &b)| a + b).collect())
    }

    pub fn sub(&self, other: &Self) -> Self {
        debug_assert_eq!(self.dim(), other.dim());
        ParamVector(self.0.iter().zip(&other.0).map(|(&a, &b)| a - b).collect())
    }

    /// `self += c * other`, in place.
    pub fn axpy(&mut self, c: S, other: &Self) {
        debug_assert_eq!(self.dim(), other.dim());
        for (a, &b) in self.0.iter_mut().zip(&other.0) {
            *a += c * b;
        }
    }

    pub fn scale_in_place(&mut self, c: S) {
        for a in self.0.iter_mut() {
            *a *= c;
        }
    }
}
