//! Synchronous-round simulator for distributed gradient descent with
//! sparsified uplinks.
//!
//! Every round each worker evaluates its local gradient at the shared model,
//! runs its sparsifier, and the server forms `g = Σ ω_n ĝ_n`, broadcasts it
//! and takes a plain SGD step. Worker steps run in parallel; aggregation is a
//! serial pass over the workers in index order so results do not depend on
//! the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problems::{
    generate_datasets, logistic_gradient, logistic_loss, logistic_toy_points, logistic_toy_start,
    weighted_optimum, GenConfig, GramStats, LinearDataset,
};
use crate::sparsify::{regtopk_step, topk_step, RegTopKParams, WorkerState};
use crate::vector::{DenseVector, Mask, SparsePayload};

/// Loss above which a run is declared divergent.
pub const DIVERGENCE_LOSS: f64 = 1e12;

/// Bits used to transmit one value.
pub const VALUE_BITS: u64 = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemSpec {
    LinearRegression(GenConfig),
    LogisticToy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sparsifier {
    None,
    Topk,
    Regtopk(RegTopKParams),
}

impl Sparsifier {
    pub fn name(&self) -> &'static str {
        match self {
            Sparsifier::None => "none",
            Sparsifier::Topk => "topk",
            Sparsifier::Regtopk(_) => "regtopk",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weights {
    Uniform,
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceLevel {
    GapOnly,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    pub sparsifier: Sparsifier,
    /// Entries each worker keeps per round. Ignored by [`Sparsifier::None`].
    pub k: usize,
    pub eta: f64,
    pub iterations: usize,
    pub weights: Weights,
    /// Seeds data generation; overrides the seed inside [`GenConfig`].
    pub seed: u64,
    pub trace_level: TraceLevel,
}

impl ExperimentConfig {
    pub fn workers(&self) -> usize {
        match &self.problem {
            ProblemSpec::LinearRegression(g) => g.workers,
            ProblemSpec::LogisticToy => 2,
        }
    }

    pub fn dim(&self) -> usize {
        match &self.problem {
            ProblemSpec::LinearRegression(g) => g.dim,
            ProblemSpec::LogisticToy => 2,
        }
    }

    /// Data generator settings with the experiment seed applied.
    pub fn gen_config(&self) -> Option<GenConfig> {
        match &self.problem {
            ProblemSpec::LinearRegression(g) => Some(GenConfig {
                seed: self.seed,
                ..g.clone()
            }),
            ProblemSpec::LogisticToy => None,
        }
    }

    pub fn resolved_weights(&self) -> Result<Vec<f64>> {
        let n = self.workers();
        let w = match &self.weights {
            Weights::Uniform => vec![1.0 / n as f64; n],
            Weights::Explicit(w) => {
                if w.len() != n {
                    return Err(Error::Parameter(format!(
                        "expected {n} aggregation weights, got {}",
                        w.len()
                    )));
                }
                w.clone()
            }
        };
        if w.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
            return Err(Error::Parameter(
                "aggregation weights must lie in (0, 1]".into(),
            ));
        }
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Parameter(format!(
                "aggregation weights must sum to 1, got {total}"
            )));
        }
        Ok(w)
    }

    /// Kept fraction `k/J` (1 for the dense baseline).
    pub fn sparsity(&self) -> f64 {
        match self.sparsifier {
            Sparsifier::None => 1.0,
            _ => self.k as f64 / self.dim() as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let ProblemSpec::LinearRegression(g) = &self.problem {
            g.validate()?;
        }
        let dim = self.dim();
        if self.sparsifier != Sparsifier::None && (self.k == 0 || self.k > dim) {
            return Err(Error::Parameter(format!(
                "k must satisfy 1 <= k <= {dim}, got {}",
                self.k
            )));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Parameter(format!(
                "eta must be positive, got {}",
                self.eta
            )));
        }
        if let Sparsifier::Regtopk(p) = &self.sparsifier {
            p.validate()?;
        }
        self.resolved_weights()?;
        Ok(())
    }
}

/// What one worker did in a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerTrace {
    pub accumulated: DenseVector,
    pub payload: SparsePayload,
    pub mask: Mask,
}

/// State after `t` rounds.
///
/// Trace 0 describes the initial model. Trace `t ≥ 1` carries the model
/// produced by round `t − 1` together with that round's communication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub t: usize,
    /// `‖θ^t − θ*‖`; absent when the problem has no closed-form optimum.
    pub delta: Option<f64>,
    pub loss: f64,
    /// Uplink bytes per worker for the round that produced this model.
    pub bytes_estimate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_worker: Option<Vec<WorkerTrace>>,
    /// Dense `Σ ω_n a_n`, what the server would see without sparsification.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aggregation_target: Option<DenseVector>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<DenseVector>,
}

/// `k (64 + ⌈log₂ J⌉) / 8`: values plus index bits, per worker.
pub fn bytes_per_worker(k: usize, dim: usize) -> f64 {
    let index_bits = if dim <= 1 {
        0
    } else {
        (usize::BITS - (dim - 1).leading_zeros()) as u64
    };
    (k as u64 * (VALUE_BITS + index_bits)) as f64 / 8.0
}

/// `Σ_n ω_n ĝ_n`, summed in worker order.
pub fn aggregate(payloads: &[SparsePayload], weights: &[f64], dim: usize) -> Result<DenseVector> {
    if payloads.len() != weights.len() {
        return Err(Error::length_mismatch(
            "weights",
            payloads.len(),
            weights.len(),
        ));
    }
    if dim == 0 {
        return Err(Error::Parameter("dimension must be at least 1".into()));
    }
    let mut out = vec![0.0; dim];
    for (payload, &w) in payloads.iter().zip(weights) {
        for &(i, v) in payload.entries() {
            if i >= dim {
                return Err(Error::Input(format!(
                    "payload index {i} out of range for dimension {dim}"
                )));
            }
            out[i] += w * v;
        }
    }
    Ok(DenseVector::from_vec_unchecked(out))
}

/// `θ − η g`
pub fn sgd_update(theta: &DenseVector, g: &DenseVector, eta: f64) -> Result<DenseVector> {
    g.ensure_len("gradient", theta.len())?;
    if eta.is_nan() || eta <= 0.0 {
        return Err(Error::Parameter(format!("eta must be positive, got {eta}")));
    }
    Ok(DenseVector::from_vec_unchecked(
        theta
            .iter()
            .zip(g.iter())
            .map(|(t, gi)| t - eta * gi)
            .collect(),
    ))
}

/// A problem instance ready to be optimized.
#[derive(Debug, Clone)]
pub enum Objective {
    Linear {
        stats: Vec<GramStats>,
        optimum: DenseVector,
        dim: usize,
    },
    Logistic {
        points: Vec<DenseVector>,
    },
}

impl Objective {
    /// Generates data (if any) for `cfg`.
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        match cfg.gen_config() {
            Some(gen) => Self::from_datasets(&generate_datasets(&gen)?, &cfg.resolved_weights()?),
            None => Ok(Objective::Logistic {
                points: logistic_toy_points(),
            }),
        }
    }

    pub fn from_datasets(datasets: &[LinearDataset], weights: &[f64]) -> Result<Self> {
        let optimum = weighted_optimum(datasets, weights)?;
        Ok(Objective::Linear {
            stats: datasets.iter().map(GramStats::new).collect(),
            dim: optimum.len(),
            optimum,
        })
    }

    pub fn workers(&self) -> usize {
        match self {
            Objective::Linear { stats, .. } => stats.len(),
            Objective::Logistic { points } => points.len(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Objective::Linear { dim, .. } => *dim,
            Objective::Logistic { points } => points[0].len(),
        }
    }

    pub fn optimum(&self) -> Option<&DenseVector> {
        match self {
            Objective::Linear { optimum, .. } => Some(optimum),
            Objective::Logistic { .. } => None,
        }
    }

    pub fn initial_model(&self) -> DenseVector {
        match self {
            Objective::Linear { dim, .. } => DenseVector::zeros(*dim),
            Objective::Logistic { .. } => logistic_toy_start(),
        }
    }

    pub fn local_gradient(&self, worker: usize, theta: &DenseVector) -> Result<DenseVector> {
        match self {
            Objective::Linear { stats, dim, .. } => {
                theta.ensure_len("model", *dim)?;
                Ok(DenseVector::from_vec_unchecked(
                    stats[worker].gradient(theta),
                ))
            }
            Objective::Logistic { points } => logistic_gradient(theta, &points[worker]),
        }
    }

    /// `Σ ω_n F_n(θ)`
    pub fn loss(&self, theta: &DenseVector, weights: &[f64]) -> Result<f64> {
        match self {
            Objective::Linear { stats, .. } => Ok(stats
                .iter()
                .zip(weights)
                .map(|(s, w)| w * s.loss(theta))
                .sum()),
            Objective::Logistic { points } => points
                .iter()
                .zip(weights)
                .map(|(x, w)| logistic_loss(theta, x).map(|l| w * l))
                .sum(),
        }
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RoundTrace>> {
    cfg.validate()?;
    let objective = Objective::build(cfg)?;
    run_with_objective(cfg, &objective)
}

/// Runs `cfg` against an already built objective (e.g. frozen datasets).
pub fn run_with_objective(
    cfg: &ExperimentConfig,
    objective: &Objective,
) -> Result<Vec<RoundTrace>> {
    cfg.validate()?;
    let weights = cfg.resolved_weights()?;
    let dim = objective.dim();
    if objective.workers() != weights.len() || dim != cfg.dim() {
        return Err(Error::Input(format!(
            "objective has {} workers of dimension {}, config expects {} of dimension {}",
            objective.workers(),
            dim,
            weights.len(),
            cfg.dim()
        )));
    }
    let full = cfg.trace_level == TraceLevel::Full;
    let bytes = match cfg.sparsifier {
        Sparsifier::None => (dim as u64 * VALUE_BITS) as f64 / 8.0,
        _ => bytes_per_worker(cfg.k, dim),
    };

    let mut states = weights
        .iter()
        .map(|&w| WorkerState::new(dim, w))
        .collect::<Result<Vec<_>>>()?;
    let mut theta = objective.initial_model();
    let mut prev_global: Option<DenseVector> = None;

    let delta_of = |theta: &DenseVector| objective.optimum().map(|opt| theta.distance(opt));
    let mut traces = Vec::with_capacity(cfg.iterations + 1);
    traces.push(RoundTrace {
        t: 0,
        delta: delta_of(&theta),
        loss: objective.loss(&theta, &weights)?,
        bytes_estimate: 0.0,
        per_worker: None,
        aggregation_target: None,
        model: full.then(|| theta.clone()),
    });

    for t in 1..=cfg.iterations {
        let stepped = states
            .par_iter()
            .enumerate()
            .map(|(n, state)| {
                let g = objective.local_gradient(n, &theta)?;
                match &cfg.sparsifier {
                    Sparsifier::None => {
                        let payload = SparsePayload::masked(&Mask::full(dim), &g);
                        let next = WorkerState {
                            prev_mask: Some(Mask::full(dim)),
                            prev_accumulated: Some(g),
                            round: state.round + 1,
                            ..state.clone()
                        };
                        Ok((payload, next))
                    }
                    Sparsifier::Topk => topk_step(state, &g, cfg.k),
                    Sparsifier::Regtopk(p) => {
                        regtopk_step(state, &g, prev_global.as_ref(), cfg.k, p)
                    }
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let (payloads, next_states): (Vec<_>, Vec<_>) = stepped.into_iter().unzip();
        states = next_states;

        let global = aggregate(&payloads, &weights, dim)?;
        theta = sgd_update(&theta, &global, cfg.eta)?;
        let loss = objective.loss(&theta, &weights)?;

        let (per_worker, aggregation_target) = if full {
            let mut target = vec![0.0; dim];
            let workers = payloads
                .into_iter()
                .zip(&states)
                .map(|(payload, s)| {
                    let accumulated = s.prev_accumulated.clone().expect("set by every step");
                    for (tj, aj) in target.iter_mut().zip(accumulated.iter()) {
                        *tj += s.weight * aj;
                    }
                    WorkerTrace {
                        accumulated,
                        payload,
                        mask: s.prev_mask.clone().expect("set by every step"),
                    }
                })
                .collect();
            (Some(workers), Some(DenseVector::from_vec_unchecked(target)))
        } else {
            (None, None)
        };

        traces.push(RoundTrace {
            t,
            delta: delta_of(&theta),
            loss,
            bytes_estimate: bytes,
            per_worker,
            aggregation_target,
            model: full.then(|| theta.clone()),
        });

        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(Error::Diverged {
                round: t,
                loss,
                trace: traces,
            });
        }
        prev_global = Some(global);
    }
    Ok(traces)
}

/// Mask agreement across workers for every communication round, as
/// `(t, overlap)`. Two workers: `|S_1 ∩ S_2| / k`. More workers: mean
/// pairwise Jaccard index. One worker: 1.
pub fn mask_overlap(traces: &[RoundTrace]) -> Result<Vec<(usize, f64)>> {
    traces
        .iter()
        .filter(|tr| tr.t > 0)
        .map(|tr| {
            let workers = tr.per_worker.as_ref().ok_or_else(|| {
                Error::State(format!(
                    "round {} has no per-worker data; run with trace_level = full",
                    tr.t
                ))
            })?;
            Ok((tr.t, overlap_of(workers.iter().map(|w| &w.mask).collect())))
        })
        .collect()
}

fn overlap_of(masks: Vec<&Mask>) -> f64 {
    let inter = |a: &Mask, b: &Mask| {
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .filter(|(x, y)| **x && **y)
            .count()
    };
    match masks.len() {
        0 | 1 => 1.0,
        2 => {
            let k = masks[0].count().max(1);
            inter(masks[0], masks[1]) as f64 / k as f64
        }
        n => {
            let mut total = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    let both = inter(masks[i], masks[j]);
                    let union = masks[i].count() + masks[j].count() - both;
                    total += if union == 0 {
                        1.0
                    } else {
                        both as f64 / union as f64
                    };
                }
            }
            total / (n * (n - 1) / 2) as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sparsity: f64,
    pub k: usize,
    pub mean_delta: f64,
}

/// `k = max(1, round(S J))`
pub fn k_for_sparsity(s: f64, dim: usize) -> Result<usize> {
    if !(s > 0.0 && s <= 1.0) {
        return Err(Error::Parameter(format!(
            "sparsity must lie in (0, 1], got {s}"
        )));
    }
    Ok(((s * dim as f64).round() as usize).clamp(1, dim))
}

/// Mean final optimality gap over `repeats` seeds (`base.seed + r`) for each
/// sparsity factor.
pub fn sparsity_sweep(
    base: &ExperimentConfig,
    sparsities: &[f64],
    repeats: usize,
) -> Result<Vec<SweepRow>> {
    if repeats == 0 {
        return Err(Error::Parameter("repeats must be at least 1".into()));
    }
    if !matches!(base.problem, ProblemSpec::LinearRegression(_)) {
        return Err(Error::Parameter(
            "sparsity sweeps need a problem with a known optimum".into(),
        ));
    }
    let dim = base.dim();
    let ks = sparsities
        .iter()
        .map(|&s| k_for_sparsity(s, dim))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = (0..ks.len())
        .flat_map(|i| (0..repeats).map(move |r| (i, r)))
        .collect();
    let finals = jobs
        .par_iter()
        .map(|&(i, r)| {
            let cfg = ExperimentConfig {
                k: ks[i],
                seed: base.seed.wrapping_add(r as u64),
                trace_level: TraceLevel::GapOnly,
                ..base.clone()
            };
            let traces = run_experiment(&cfg)?;
            Ok(traces.last().and_then(|t| t.delta).unwrap_or(f64::NAN))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(sparsities
        .iter()
        .zip(&ks)
        .enumerate()
        .map(|(i, (&s, &k))| SweepRow {
            sparsity: s,
            k,
            mean_delta: finals[i * repeats..(i + 1) * repeats].iter().sum::<f64>() / repeats as f64,
        })
        .collect())
}
