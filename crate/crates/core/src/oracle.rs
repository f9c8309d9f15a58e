//! Monte Carlo estimate of the exact MAP sparsification posterior on tiny
//! instances.
//!
//! A worker that knows its own accumulated gradient `a_local` models the
//! global accumulated gradient as `ω a_local + z + ξ`, where `z` is the share
//! of the other workers (known for some entries, drawn from a prior `p0` for
//! the rest) and `ξ` is an innovation term. The posterior probability that
//! entry `j` lands among the `k` largest magnitudes is estimated by counting
//! samples. The report compares the resulting top-k set with the one
//! RegTop-k picks from the same information.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Open01};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, Purpose};
use crate::sparsify::{
    posterior_distortion, regtopk_score, top_k_indices, top_k_select, RegTopKParams, WorkerState,
};
use crate::vector::{DenseVector, Mask};

/// Samples drawn per substream. Fixed so that estimates do not depend on the
/// number of threads.
pub const BATCH_SIZE: usize = 4096;

/// Lower bound on the per-entry scale when the innovation spread follows
/// the local gradient magnitude.
pub const SCALE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnovationFamily {
    /// `p(ξ) = (1/2μ) sech²(ξ/μ)`, the density whose CDF is `½(1 + tanh(ξ/μ))`.
    TanhSech2,
    /// Zero-mean normal with standard deviation `μ`.
    Gaussian,
}

/// Gaussian prior for the unknown entries of `z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    pub mean: f64,
    pub var: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnovationModel {
    pub family: InnovationFamily,
    pub mu: f64,
    /// Multiply the innovation by `max(|a_local_j|, SCALE_FLOOR)`.
    pub scale_with_gradient: bool,
    /// Prior for unknown `z` entries. `None` uses a zero-mean Gaussian whose
    /// variance is the empirical variance of the known entries, or 1 when
    /// that is unavailable or zero.
    pub p0: Option<GaussianPrior>,
}

impl InnovationModel {
    pub fn new(family: InnovationFamily, mu: f64) -> Self {
        Self {
            family,
            mu,
            scale_with_gradient: false,
            p0: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::Parameter(format!(
                "innovation scale mu must be positive, got {}",
                self.mu
            )));
        }
        if let Some(p0) = self.p0 {
            if !p0.mean.is_finite() || !(p0.var >= 0.0 && p0.var.is_finite()) {
                return Err(Error::Parameter(format!(
                    "invalid p0 (mean {}, var {})",
                    p0.mean, p0.var
                )));
            }
        }
        Ok(())
    }

    /// Density of the unit-scale innovation at `xi`.
    pub fn density(&self, xi: f64) -> f64 {
        let mu = self.mu;
        match self.family {
            InnovationFamily::TanhSech2 => {
                let t = (xi / mu).tanh();
                (1.0 - t * t) / (2.0 * mu)
            }
            InnovationFamily::Gaussian => {
                let r = xi / mu;
                (-0.5 * r * r).exp() / (mu * (2.0 * std::f64::consts::PI).sqrt())
            }
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.family {
            InnovationFamily::TanhSech2 => {
                let u: f64 = Open01.sample(rng);
                self.mu * (2.0 * u - 1.0).atanh()
            }
            InnovationFamily::Gaussian => {
                let n: f64 = rng.sample(rand_distr::StandardNormal);
                self.mu * n
            }
        }
    }

    fn resolved_prior(&self, z_known: &BTreeMap<usize, f64>) -> GaussianPrior {
        if let Some(p0) = self.p0 {
            return p0;
        }
        let n = z_known.len();
        let var = if n >= 2 {
            let mean = z_known.values().sum::<f64>() / n as f64;
            z_known.values().map(|z| (z - mean).powi(2)).sum::<f64>() / n as f64
        } else {
            0.0
        };
        GaussianPrior {
            mean: 0.0,
            var: if var > 0.0 { var } else { 1.0 },
        }
    }
}

/// Whether entry `j` of `a` is among its `k` largest magnitudes, with the
/// same tie rule as [`top_k_select`].
pub fn feasible_indicator(a: &[f64], j: usize, k: usize) -> Result<bool> {
    if j >= a.len() {
        return Err(Error::Parameter(format!(
            "index {j} out of range for dimension {}",
            a.len()
        )));
    }
    Ok(top_k_select(a, k)?[j])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorEstimate {
    pub samples: usize,
    /// Number of samples in which each entry was among the top k.
    pub counts: Vec<u64>,
    pub probabilities: Vec<f64>,
    pub standard_errors: Vec<f64>,
}

fn check_inputs(
    a_local: &DenseVector,
    z_known: &BTreeMap<usize, f64>,
    model: &InnovationModel,
    omega: f64,
    k: usize,
    samples: usize,
) -> Result<()> {
    model.validate()?;
    let dim = a_local.len();
    if k == 0 || k > dim {
        return Err(Error::Parameter(format!(
            "k must satisfy 1 <= k <= {dim}, got {k}"
        )));
    }
    if samples == 0 {
        return Err(Error::Parameter("samples must be at least 1".into()));
    }
    if !(omega > 0.0 && omega <= 1.0) {
        return Err(Error::Parameter(format!(
            "weight must lie in (0, 1], got {omega}"
        )));
    }
    for (&j, &z) in z_known {
        if j >= dim {
            return Err(Error::Input(format!(
                "known z index {j} out of range for dimension {dim}"
            )));
        }
        if !z.is_finite() {
            return Err(Error::Input(format!("known z at index {j} is not finite")));
        }
    }
    Ok(())
}

/// Estimates, for every entry, the probability that it belongs to the top
/// `k` of the global accumulated gradient.
pub fn mc_posterior(
    a_local: &DenseVector,
    z_known: &BTreeMap<usize, f64>,
    model: &InnovationModel,
    omega: f64,
    k: usize,
    samples: usize,
    seed: u64,
) -> Result<PosteriorEstimate> {
    check_inputs(a_local, z_known, model, omega, k, samples)?;
    let dim = a_local.len();
    let prior = model.resolved_prior(z_known);
    let p0 = Normal::new(prior.mean, prior.var.sqrt())
        .map_err(|e| Error::Parameter(format!("p0: {e}")))?;
    let scales: Vec<f64> = a_local
        .iter()
        .map(|&a| {
            if model.scale_with_gradient {
                a.abs().max(SCALE_FLOOR)
            } else {
                1.0
            }
        })
        .collect();
    let known: Vec<Option<f64>> = (0..dim).map(|j| z_known.get(&j).copied()).collect();

    let batches = samples.div_ceil(BATCH_SIZE);
    let counts = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = substream(seed, b as u64, Purpose::OracleBatch);
            let n = BATCH_SIZE.min(samples - b * BATCH_SIZE);
            let mut counts = vec![0u64; dim];
            let mut draw = vec![0.0; dim];
            for _ in 0..n {
                for j in 0..dim {
                    let z = match known[j] {
                        Some(z) => z,
                        None => p0.sample(&mut rng),
                    };
                    let xi = model.sample(&mut rng) * scales[j];
                    draw[j] = omega * a_local[j] + z + xi;
                }
                for j in top_k_indices(&draw, k) {
                    counts[j] += 1;
                }
            }
            counts
        })
        .reduce(
            || vec![0u64; dim],
            |mut acc, c| {
                for (a, c) in acc.iter_mut().zip(c) {
                    *a += c;
                }
                acc
            },
        );

    let total = samples as f64;
    let probabilities: Vec<f64> = counts.iter().map(|&c| c as f64 / total).collect();
    let standard_errors = probabilities
        .iter()
        .map(|&p| (p * (1.0 - p) / total).sqrt())
        .collect();
    Ok(PosteriorEstimate {
        samples,
        counts,
        probabilities,
        standard_errors,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub posterior: PosteriorEstimate,
    pub regtopk_scores: Vec<f64>,
    /// Top-k indices by estimated posterior probability, increasing.
    pub oracle_top_k: Vec<usize>,
    /// Top-k indices by RegTop-k score, increasing.
    pub regtopk_top_k: Vec<usize>,
    /// `|oracle ∩ regtopk| / k`.
    pub overlap: f64,
    /// Spearman correlation between posterior probability and score
    /// magnitude over the entries with known `z`. Absent when fewer than two
    /// entries are known or either ranking is constant.
    pub rank_correlation: Option<f64>,
}

/// RegTop-k scores for a worker whose previous round transmitted exactly the
/// entries with known `z` and whose accumulated gradient did not change.
pub fn regtopk_scores_from_known(
    a_local: &DenseVector,
    z_known: &BTreeMap<usize, f64>,
    params: &RegTopKParams,
    omega: f64,
) -> Result<DenseVector> {
    params.validate()?;
    let dim = a_local.len();
    let known: Vec<usize> = z_known.keys().copied().filter(|&j| j < dim).collect();
    let mut state = WorkerState::new(dim, omega)?;
    state.prev_mask = Some(Mask::from_indices(dim, &known));
    state.prev_accumulated = Some(a_local.clone());
    state.round = 1;
    let prev_global: Vec<f64> = (0..dim)
        .map(|j| omega * a_local[j] + z_known.get(&j).copied().unwrap_or(0.0))
        .collect();
    let prev_global = DenseVector::new(prev_global)?;
    let distortion = posterior_distortion(&state, &prev_global, a_local, params)?;
    regtopk_score(a_local, &distortion, params)
}

/// Runs the oracle and RegTop-k on the same information and compares their
/// top-k sets.
#[allow(clippy::too_many_arguments)]
pub fn ranking_agreement(
    a_local: &DenseVector,
    z_known: &BTreeMap<usize, f64>,
    model: &InnovationModel,
    params: &RegTopKParams,
    omega: f64,
    k: usize,
    samples: usize,
    seed: u64,
) -> Result<AgreementReport> {
    let posterior = mc_posterior(a_local, z_known, model, omega, k, samples, seed)?;
    let scores = regtopk_scores_from_known(a_local, z_known, params, omega)?;
    let oracle_top_k = top_k_indices(&posterior.probabilities, k);
    let regtopk_top_k = top_k_indices(&scores, k);
    let shared = oracle_top_k
        .iter()
        .filter(|j| regtopk_top_k.contains(j))
        .count();

    let known: Vec<usize> = z_known.keys().copied().collect();
    let p: Vec<f64> = known.iter().map(|&j| posterior.probabilities[j]).collect();
    let s: Vec<f64> = known.iter().map(|&j| scores[j].abs()).collect();

    Ok(AgreementReport {
        rank_correlation: spearman(&p, &s),
        overlap: shared as f64 / k as f64,
        oracle_top_k,
        regtopk_top_k,
        regtopk_scores: scores.into_vec(),
        posterior,
    })
}

/// Ranks starting at 1, ties receiving their average rank.
fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() < 2 || x.len() != y.len() {
        return None;
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dv(v: &[f64]) -> DenseVector {
        DenseVector::new(v.to_vec()).unwrap()
    }

    fn trapezoid(model: &InnovationModel, half_width: f64, steps: usize) -> f64 {
        let h = 2.0 * half_width / steps as f64;
        let mut sum = 0.5 * (model.density(-half_width) + model.density(half_width));
        for i in 1..steps {
            sum += model.density(-half_width + i as f64 * h);
        }
        sum * h
    }

    #[test]
    fn densities_integrate_to_one() {
        for family in [InnovationFamily::TanhSech2, InnovationFamily::Gaussian] {
            for mu in [0.1, 1.0, 3.0] {
                let m = InnovationModel::new(family, mu);
                let total = trapezoid(&m, 60.0 * mu, 200_000);
                assert!((total - 1.0).abs() < 1e-6, "{family:?} mu={mu}: {total}");
            }
        }
    }

    #[test]
    fn tanh_samples_follow_the_cdf() {
        let m = InnovationModel::new(InnovationFamily::TanhSech2, 0.7);
        let mut rng = substream(3, 0, Purpose::TestData);
        let n = 200_000;
        let below = (0..n).filter(|_| m.sample(&mut rng) <= 0.5).count() as f64 / n as f64;
        let cdf = 0.5 * (1.0 + (0.5f64 / 0.7).tanh());
        assert!((below - cdf).abs() < 5.0 * (cdf * (1.0 - cdf) / n as f64).sqrt());
    }

    #[test]
    fn feasible_indicator_examples() {
        assert!(feasible_indicator(&[3.0, 1.0], 0, 1).unwrap());
        assert!(!feasible_indicator(&[3.0, 1.0], 1, 1).unwrap());
        let a = [0.5, -2.0, 2.0, 1.0];
        let mask = top_k_select(&a, 2).unwrap();
        for j in 0..4 {
            assert_eq!(feasible_indicator(&a, j, 2).unwrap(), mask[j]);
        }
        assert!(feasible_indicator(&a, 4, 2).is_err());
    }

    #[test]
    fn single_entry_is_always_selected() {
        let m = InnovationModel::new(InnovationFamily::Gaussian, 1.0);
        let est = mc_posterior(&dv(&[0.3]), &BTreeMap::new(), &m, 0.5, 1, 1000, 1).unwrap();
        assert_eq!(est.probabilities, vec![1.0]);
    }

    #[test]
    fn probabilities_sum_to_k() {
        let m = InnovationModel::new(InnovationFamily::TanhSech2, 0.4);
        let z = BTreeMap::from([(1, 0.2), (3, -0.7)]);
        for samples in [1, 17, 5000, 9000] {
            let est = mc_posterior(
                &dv(&[1.0, -2.0, 0.5, 0.1, 3.0]),
                &z,
                &m,
                0.25,
                2,
                samples,
                9,
            )
            .unwrap();
            assert_eq!(est.counts.iter().sum::<u64>(), 2 * samples as u64);
        }
    }

    #[test]
    fn exchangeable_entries_are_symmetric() {
        let mut m = InnovationModel::new(InnovationFamily::TanhSech2, 0.5);
        m.scale_with_gradient = true;
        let est = mc_posterior(
            &dv(&[1.0, 1.0, 0.2]),
            &BTreeMap::new(),
            &m,
            0.5,
            1,
            40_000,
            5,
        )
        .unwrap();
        let se = (est.standard_errors[0].powi(2) + est.standard_errors[1].powi(2)).sqrt();
        assert!((est.probabilities[0] - est.probabilities[1]).abs() < 3.0 * se);
    }

    #[test]
    fn fixed_seed_reproduces() {
        let m = InnovationModel::new(InnovationFamily::Gaussian, 0.3);
        let a = dv(&[0.4, -1.0, 0.9]);
        let z = BTreeMap::from([(0, 0.1)]);
        let x = mc_posterior(&a, &z, &m, 0.5, 1, 10_000, 11).unwrap();
        let y = mc_posterior(&a, &z, &m, 0.5, 1, 10_000, 11).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn degenerate_innovation_matches_indicator() {
        let m = InnovationModel::new(InnovationFamily::TanhSech2, 1e-12);
        let a = dv(&[1.0, -3.0, 0.5, 2.0]);
        let z = BTreeMap::from([(0, 0.4), (1, 2.0), (2, -1.5), (3, 0.1)]);
        let est = mc_posterior(&a, &z, &m, 0.5, 2, 500, 2).unwrap();
        let global: Vec<f64> = (0..4).map(|j| 0.5 * a[j] + z[&j]).collect();
        for j in 0..4 {
            let expected = if feasible_indicator(&global, j, 2).unwrap() {
                1.0
            } else {
                0.0
            };
            assert_eq!(est.probabilities[j], expected);
        }
    }

    #[test]
    fn larger_local_entry_is_not_less_likely() {
        let mut m = InnovationModel::new(InnovationFamily::TanhSech2, 0.5);
        m.scale_with_gradient = true;
        let z = BTreeMap::from([(1, 0.3)]);
        let small = mc_posterior(&dv(&[0.8, 1.0, -0.6]), &z, &m, 0.5, 1, 40_000, 4).unwrap();
        let large = mc_posterior(&dv(&[1.6, 1.0, -0.6]), &z, &m, 0.5, 1, 40_000, 4).unwrap();
        let se = (small.standard_errors[0].powi(2) + large.standard_errors[0].powi(2)).sqrt();
        assert!(large.probabilities[0] >= small.probabilities[0] - 3.0 * se);
    }

    #[test]
    fn cancelled_entry_is_excluded_by_both() {
        let omega = 0.5;
        let a = dv(&[10.0, 1.0, 2.0, 3.0]);
        let z = BTreeMap::from([(0, -omega * 10.0), (1, 0.01), (2, -0.02), (3, 0.015)]);
        let m = InnovationModel::new(InnovationFamily::TanhSech2, 0.05);
        let params = RegTopKParams::with_mu(0.5);
        let report = ranking_agreement(&a, &z, &m, &params, omega, 3, 20_000, 8).unwrap();
        assert_eq!(report.oracle_top_k, vec![1, 2, 3]);
        assert_eq!(report.regtopk_top_k, vec![1, 2, 3]);
        assert_eq!(report.regtopk_scores[0], 0.0);
        assert_eq!(report.overlap, 1.0);
    }

    #[test]
    fn without_known_z_both_follow_magnitudes() {
        let mut m = InnovationModel::new(InnovationFamily::TanhSech2, 1.0);
        m.scale_with_gradient = true;
        let a = dv(&[2.0, -4.0, 1.0, 3.0]);
        let params = RegTopKParams::with_mu(0.5);
        let report =
            ranking_agreement(&a, &BTreeMap::new(), &m, &params, 0.5, 1, 40_000, 6).unwrap();
        assert_eq!(report.regtopk_scores, a.as_slice());
        let p = &report.posterior.probabilities;
        assert!(p[1] > p[3] && p[3] > p[0] && p[0] > p[2], "{p:?}");
        assert_eq!(report.oracle_top_k, report.regtopk_top_k);
        assert_eq!(report.rank_correlation, None);
    }

    #[test]
    fn full_selection_overlaps_completely() {
        let m = InnovationModel::new(InnovationFamily::Gaussian, 1.0);
        let z = BTreeMap::from([(0, 1.0), (2, -0.5)]);
        let report = ranking_agreement(
            &dv(&[1.0, 2.0, 3.0]),
            &z,
            &m,
            &RegTopKParams::default(),
            0.5,
            3,
            100,
            1,
        )
        .unwrap();
        assert_eq!(report.overlap, 1.0);
    }

    #[test]
    fn spearman_handles_ties_and_constants() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[2.0, 3.0]), None);
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn rejects_bad_parameters() {
        let m = InnovationModel::new(InnovationFamily::Gaussian, 1.0);
        let a = dv(&[1.0, 2.0]);
        let none = BTreeMap::new();
        assert!(mc_posterior(&a, &none, &m, 0.5, 0, 10, 0).is_err());
        assert!(mc_posterior(&a, &none, &m, 0.5, 1, 0, 0).is_err());
        assert!(mc_posterior(&a, &BTreeMap::from([(5, 1.0)]), &m, 0.5, 1, 10, 0).is_err());
        let bad = InnovationModel::new(InnovationFamily::Gaussian, 0.0);
        assert!(mc_posterior(&a, &none, &bad, 0.5, 1, 10, 0).is_err());
    }
}
