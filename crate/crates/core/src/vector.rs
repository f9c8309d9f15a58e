//! Vector containers shared by the sparsifiers, the problems and the harness.

use std::ops::{Deref, Index};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A non-empty vector of finite reals: gradients, models, scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Input("vector must have at least one entry".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!(
                "entry {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    /// Builds a vector without validating finiteness. Callers guarantee the
    /// contents were derived from finite inputs by finite arithmetic.
    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        debug_assert!(!values.is_empty());
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        assert!(len >= 1, "vector length must be at least 1");
        Self(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &DenseVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn dot(&self, other: &DenseVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub(crate) fn ensure_len(&self, what: &str, expected: usize) -> Result<()> {
        if self.len() != expected {
            return Err(Error::length_mismatch(what, expected, self.len()));
        }
        Ok(())
    }
}

impl Deref for DenseVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for DenseVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

/// Selection mask over the J coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Mask(Vec<bool>);

impl Mask {
    pub fn from_bools(selected: Vec<bool>) -> Self {
        Self(selected)
    }

    pub fn full(len: usize) -> Self {
        Self(vec![true; len])
    }

    pub(crate) fn from_indices(len: usize, indices: &[usize]) -> Self {
        let mut selected = vec![false; len];
        for &i in indices {
            selected[i] = true;
        }
        Self(selected)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&s| s).count()
    }

    pub fn is_selected(&self, index: usize) -> bool {
        self.0[index]
    }

    /// Selected indices in increasing order.
    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| s.then_some(i))
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }
}

impl Index<usize> for Mask {
    type Output = bool;

    fn index(&self, index: usize) -> &bool {
        &self.0[index]
    }
}

/// The (index, value) pairs a worker transmits in one round.
///
/// Indices are strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsePayload {
    entries: Vec<(usize, f64)>,
}

impl SparsePayload {
    /// Validates ordering and range against dimension `dim`.
    pub fn new(entries: Vec<(usize, f64)>, dim: usize) -> Result<Self> {
        for (pos, &(index, value)) in entries.iter().enumerate() {
            if index >= dim {
                return Err(Error::Input(format!(
                    "payload index {index} out of range for dimension {dim}"
                )));
            }
            if !value.is_finite() {
                return Err(Error::Input(format!(
                    "payload value at index {index} is not finite"
                )));
            }
            if pos > 0 && entries[pos - 1].0 >= index {
                return Err(Error::Input(
                    "payload indices must be strictly increasing".into(),
                ));
            }
        }
        Ok(Self { entries })
    }

    /// `mask ⊙ values`, keeping only the selected coordinates.
    pub fn masked(mask: &Mask, values: &DenseVector) -> Self {
        let entries = mask.support().map(|i| (i, values[i])).collect();
        Self { entries }
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|&(i, _)| i)
    }

    pub fn to_dense(&self, dim: usize) -> DenseVector {
        let mut out = vec![0.0; dim];
        for &(i, v) in &self.entries {
            out[i] = v;
        }
        DenseVector::from_vec_unchecked(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_and_empty() {
        assert!(DenseVector::new(vec![]).is_err());
        assert!(DenseVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(DenseVector::new(vec![f64::INFINITY]).is_err());
        assert!(DenseVector::new(vec![0.0, -2.5]).is_ok());
    }

    #[test]
    fn payload_validation() {
        assert!(SparsePayload::new(vec![(0, 1.0), (2, 3.0)], 3).is_ok());
        assert!(SparsePayload::new(vec![(2, 1.0), (1, 3.0)], 3).is_err());
        assert!(SparsePayload::new(vec![(1, 1.0), (1, 3.0)], 3).is_err());
        assert!(SparsePayload::new(vec![(3, 1.0)], 3).is_err());
    }

    #[test]
    fn masked_payload_round_trips_to_dense() {
        let v = DenseVector::new(vec![1.0, -2.0, 3.0]).unwrap();
        let mask = Mask::from_bools(vec![true, false, true]);
        let p = SparsePayload::masked(&mask, &v);
        assert_eq!(p.entries(), &[(0, 1.0), (2, 3.0)]);
        assert_eq!(p.to_dense(3).as_slice(), &[1.0, 0.0, 3.0]);
    }
}
