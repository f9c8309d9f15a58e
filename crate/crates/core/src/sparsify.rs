//! Per-worker sparsifiers: plain top-k selection, Top-k with error
//! accumulation, and the regularized RegTop-k variant.
//!
//! Every step consumes a borrowed [`WorkerState`] and returns the payload to
//! transmit together with the successor state. Nothing here holds shared
//! mutable state, so N workers can step concurrently as long as each state is
//! owned by a single thread.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vector::{DenseVector, Mask, SparsePayload};

/// Ordering used by every top-k selection in the crate: larger magnitude
/// first, equal magnitudes resolved towards the lower index.
pub(crate) fn magnitude_order(values: &[f64], a: usize, b: usize) -> Ordering {
    values[b]
        .abs()
        .total_cmp(&values[a].abs())
        .then_with(|| a.cmp(&b))
}

/// Indices of the `k` largest magnitudes in `values`, sorted increasingly.
pub(crate) fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    if k < values.len() {
        order.select_nth_unstable_by(k, |&a, &b| magnitude_order(values, a, b));
        order.truncate(k);
    }
    order.sort_unstable();
    order
}

fn check_k(k: usize, dim: usize) -> Result<()> {
    if k == 0 || k > dim {
        return Err(Error::Parameter(format!(
            "k must satisfy 1 <= k <= {dim}, got {k}"
        )));
    }
    Ok(())
}

/// Selects the `k` entries of largest magnitude.
pub fn top_k_select(x: &[f64], k: usize) -> Result<Mask> {
    check_k(k, x.len())?;
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::Input(format!("entry {i} is not finite")));
    }
    Ok(Mask::from_indices(x.len(), &top_k_indices(x, k)))
}

/// Memory a single worker carries between rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerState {
    /// Sparsification error, added to the next round's gradient.
    pub error: DenseVector,
    /// Mask chosen in the previous round.
    pub prev_mask: Option<Mask>,
    /// Accumulated gradient of the previous round.
    pub prev_accumulated: Option<DenseVector>,
    /// Aggregation weight of this worker.
    pub weight: f64,
    pub round: u64,
}

impl WorkerState {
    pub fn new(dim: usize, weight: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Parameter("dimension must be at least 1".into()));
        }
        if !(weight > 0.0 && weight <= 1.0) {
            return Err(Error::Parameter(format!(
                "worker weight must lie in (0, 1], got {weight}"
            )));
        }
        Ok(Self {
            error: DenseVector::zeros(dim),
            prev_mask: None,
            prev_accumulated: None,
            weight,
            round: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.error.len()
    }

    /// `ε + g`.
    pub fn accumulate(&self, gradient: &DenseVector) -> Result<DenseVector> {
        gradient.ensure_len("gradient", self.dim())?;
        let sum = self
            .error
            .iter()
            .zip(gradient.iter())
            .map(|(e, g)| e + g)
            .collect();
        Ok(DenseVector::from_vec_unchecked(sum))
    }

    /// Sends `mask ⊙ accumulated` and keeps the rest as the next error.
    fn commit(&self, accumulated: DenseVector, mask: Mask) -> (SparsePayload, WorkerState) {
        let payload = SparsePayload::masked(&mask, &accumulated);
        let error = accumulated
            .iter()
            .zip(mask.as_slice())
            .map(|(&a, &sent)| if sent { 0.0 } else { a })
            .collect();
        let next = WorkerState {
            error: DenseVector::from_vec_unchecked(error),
            prev_mask: Some(mask),
            prev_accumulated: Some(accumulated),
            weight: self.weight,
            round: self.round + 1,
        };
        (payload, next)
    }
}

/// Hyper-parameters of the RegTop-k regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegTopKParams {
    /// Scale of the tanh regularizer.
    pub mu: f64,
    /// Likelihood assigned to entries without information from the last round.
    pub c_unselected: f64,
    /// Exponent applied to |a_j| in the selection metric.
    pub y_exponent: f64,
    /// |ω·a_j| below this is treated as zero when forming the distortion.
    pub zero_tolerance: f64,
}

impl Default for RegTopKParams {
    fn default() -> Self {
        Self {
            mu: 0.5,
            c_unselected: 1.0,
            y_exponent: 1.0,
            zero_tolerance: 1e-12,
        }
    }
}

impl RegTopKParams {
    pub fn with_mu(mu: f64) -> Self {
        Self {
            mu,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::Parameter(format!(
                "mu must be positive, got {}",
                self.mu
            )));
        }
        if !(self.c_unselected > 0.0 && self.c_unselected <= 1.0) {
            return Err(Error::Parameter(format!(
                "c_unselected must lie in (0, 1], got {}",
                self.c_unselected
            )));
        }
        if !(self.y_exponent > 0.0 && self.y_exponent <= 1.0) {
            return Err(Error::Parameter(format!(
                "y_exponent must lie in (0, 1], got {}",
                self.y_exponent
            )));
        }
        if !(self.zero_tolerance > 0.0 && self.zero_tolerance.is_finite()) {
            return Err(Error::Parameter(format!(
                "zero_tolerance must be positive, got {}",
                self.zero_tolerance
            )));
        }
        Ok(())
    }
}

/// Per-entry posterior distortion.
///
/// `Uninformative` stands for the unbounded distortion of entries that were
/// not transmitted in the previous round (or whose current accumulated value
/// is numerically zero): the last aggregate says nothing about them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Distortion {
    Informative(f64),
    Uninformative,
}

impl Distortion {
    pub fn is_informative(&self) -> bool {
        matches!(self, Distortion::Informative(_))
    }

    pub fn value(&self) -> Option<f64> {
        match *self {
            Distortion::Informative(d) => Some(d),
            Distortion::Uninformative => None,
        }
    }
}

/// Distortion of the current accumulated gradient relative to the share of
/// the other workers in the last aggregate:
/// `Δ_j = (g_j^{t-1} − ω a_j^{t-1}) / (ω a_j^t)` on the previous support.
pub fn posterior_distortion(
    state: &WorkerState,
    prev_global: &DenseVector,
    accumulated: &DenseVector,
    params: &RegTopKParams,
) -> Result<Vec<Distortion>> {
    let (prev_mask, prev_acc) = match (&state.prev_mask, &state.prev_accumulated) {
        (Some(m), Some(a)) => (m, a),
        _ => {
            return Err(Error::State(
                "posterior distortion needs the previous round's mask and accumulated gradient"
                    .into(),
            ))
        }
    };
    let dim = state.dim();
    prev_global.ensure_len("previous aggregate", dim)?;
    accumulated.ensure_len("accumulated gradient", dim)?;
    let w = state.weight;

    let out = (0..dim)
        .map(|j| {
            let denom = w * accumulated[j];
            if prev_mask[j] && denom.abs() >= params.zero_tolerance {
                Distortion::Informative((prev_global[j] - w * prev_acc[j]) / denom)
            } else {
                Distortion::Uninformative
            }
        })
        .collect();
    Ok(out)
}

/// Selection metric `sign(a_j) |a_j|^y L_j` with
/// `L_j = tanh(|1 + Δ_j| / μ)` for informative entries and `C` otherwise.
pub fn regtopk_score(
    accumulated: &DenseVector,
    distortion: &[Distortion],
    params: &RegTopKParams,
) -> Result<DenseVector> {
    if distortion.len() != accumulated.len() {
        return Err(Error::length_mismatch(
            "distortion",
            accumulated.len(),
            distortion.len(),
        ));
    }
    let scores = accumulated
        .iter()
        .zip(distortion)
        .map(|(&a, d)| {
            let magnitude = if params.y_exponent == 1.0 {
                a.abs()
            } else {
                a.abs().powf(params.y_exponent)
            };
            let likelihood = match *d {
                Distortion::Informative(delta) => ((1.0 + delta).abs() / params.mu).tanh(),
                Distortion::Uninformative => params.c_unselected,
            };
            a.signum() * magnitude * likelihood
        })
        .map(|s| if s == 0.0 { 0.0 } else { s })
        .collect();
    Ok(DenseVector::from_vec_unchecked(scores))
}

/// One round of Top-k with error accumulation.
pub fn topk_step(
    state: &WorkerState,
    gradient: &DenseVector,
    k: usize,
) -> Result<(SparsePayload, WorkerState)> {
    check_k(k, state.dim())?;
    let accumulated = state.accumulate(gradient)?;
    let mask = Mask::from_indices(accumulated.len(), &top_k_indices(&accumulated, k));
    Ok(state.commit(accumulated, mask))
}

/// One round of RegTop-k.
///
/// Round 0 falls back to [`topk_step`]; later rounds need the aggregate the
/// server broadcast in the previous round.
pub fn regtopk_step(
    state: &WorkerState,
    gradient: &DenseVector,
    prev_global: Option<&DenseVector>,
    k: usize,
    params: &RegTopKParams,
) -> Result<(SparsePayload, WorkerState)> {
    params.validate()?;
    if state.round == 0 {
        return topk_step(state, gradient, k);
    }
    let prev_global = prev_global.ok_or_else(|| {
        Error::State(format!(
            "round {} requires the previous aggregated gradient",
            state.round
        ))
    })?;
    check_k(k, state.dim())?;
    let accumulated = state.accumulate(gradient)?;
    let distortion = posterior_distortion(state, prev_global, &accumulated, params)?;
    let scores = regtopk_score(&accumulated, &distortion, params)?;
    let mask = Mask::from_indices(accumulated.len(), &top_k_indices(&scores, k));
    Ok(state.commit(accumulated, mask))
}
