//! Objectives for the two experiment families: distributed least squares on
//! synthetic Gaussian data, and the two-point logistic toy.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, Purpose};
use crate::vector::DenseVector;

/// One worker's design matrix (rows are data points) and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDataset {
    dim: usize,
    x: Vec<f64>,
    y: Vec<f64>,
}

impl LinearDataset {
    /// `x` is row-major with `y.len()` rows of `dim` columns.
    pub fn new(dim: usize, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if dim == 0 || y.is_empty() {
            return Err(Error::Input(
                "dataset needs at least one row and one column".into(),
            ));
        }
        if x.len() != dim * y.len() {
            return Err(Error::length_mismatch(
                "design matrix",
                dim * y.len(),
                x.len(),
            ));
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::Input("dataset contains non-finite values".into()));
        }
        Ok(Self { dim, x, y })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.y.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> &[f64] {
        &self.y
    }

    pub fn features(&self) -> &[f64] {
        &self.x
    }

    fn design(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows(), self.dim, &self.x)
    }

    fn residuals(&self, theta: &DenseVector) -> Result<Vec<f64>> {
        theta.ensure_len("model", self.dim)?;
        Ok((0..self.rows())
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(theta.iter())
                    .map(|(x, t)| x * t)
                    .sum::<f64>()
                    - self.y[i]
            })
            .collect())
    }
}

/// Synthetic data generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub workers: usize,
    pub dim: usize,
    pub samples_per_worker: usize,
    /// Mean `U` of the per-worker means.
    pub mean_of_means: f64,
    /// Variance of the per-worker mean `u_n`.
    pub sigma2: f64,
    /// Variance of the ground truth `t_n` around `u_n`.
    pub h2: f64,
    /// Label noise variance.
    pub eps2: f64,
    /// Share one ground truth across workers and drop label noise.
    pub homogeneous: bool,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            workers: 20,
            dim: 100,
            samples_per_worker: 500,
            mean_of_means: 0.0,
            sigma2: 5.0,
            h2: 1.0,
            eps2: 0.5,
            homogeneous: false,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 || self.dim == 0 || self.samples_per_worker == 0 {
            return Err(Error::Parameter(
                "workers, dim and samples_per_worker must all be at least 1".into(),
            ));
        }
        for (name, v) in [
            ("sigma2", self.sigma2),
            ("h2", self.h2),
            ("eps2", self.eps2),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!(
                    "{name} must be a finite variance >= 0, got {v}"
                )));
            }
        }
        if !self.mean_of_means.is_finite() {
            return Err(Error::Parameter("mean_of_means must be finite".into()));
        }
        Ok(())
    }
}

/// Generated datasets together with the ground-truth models that labeled them.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub datasets: Vec<LinearDataset>,
    pub ground_truth: Vec<DenseVector>,
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn generate(cfg: &GenConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let (j, d) = (cfg.dim, cfg.samples_per_worker);
    let sigma = cfg.sigma2.sqrt();
    let h = cfg.h2.sqrt();
    let eps = if cfg.homogeneous {
        0.0
    } else {
        cfg.eps2.sqrt()
    };

    let truth_for = |n: usize| -> Vec<f64> {
        let u_n = cfg.mean_of_means
            + sigma * normal(&mut substream(cfg.seed, n as u64, Purpose::ModelMean));
        let mut rng = substream(cfg.seed, n as u64, Purpose::GroundTruth);
        (0..j).map(|_| u_n + h * normal(&mut rng)).collect()
    };
    let shared = cfg.homogeneous.then(|| truth_for(0));

    let mut datasets = Vec::with_capacity(cfg.workers);
    let mut ground_truth = Vec::with_capacity(cfg.workers);
    for n in 0..cfg.workers {
        let t = shared.clone().unwrap_or_else(|| truth_for(n));
        let mut frng = substream(cfg.seed, n as u64, Purpose::Features);
        let x: Vec<f64> = (0..d * j).map(|_| normal(&mut frng)).collect();
        let mut nrng = substream(cfg.seed, n as u64, Purpose::LabelNoise);
        let y = (0..d)
            .map(|i| {
                let clean: f64 = x[i * j..(i + 1) * j]
                    .iter()
                    .zip(&t)
                    .map(|(a, b)| a * b)
                    .sum();
                if eps == 0.0 {
                    clean
                } else {
                    clean + eps * normal(&mut nrng)
                }
            })
            .collect();
        datasets.push(LinearDataset::new(j, x, y)?);
        ground_truth.push(DenseVector::new(t)?);
    }
    Ok(SyntheticData {
        datasets,
        ground_truth,
    })
}

pub fn generate_datasets(cfg: &GenConfig) -> Result<Vec<LinearDataset>> {
    generate(cfg).map(|s| s.datasets)
}

/// `(1/D) ‖Xθ − y‖²`
pub fn linreg_loss(theta: &DenseVector, ds: &LinearDataset) -> Result<f64> {
    let r = ds.residuals(theta)?;
    Ok(r.iter().map(|v| v * v).sum::<f64>() / ds.rows() as f64)
}

/// `(2/D) Xᵀ(Xθ − y)`
pub fn linreg_gradient(theta: &DenseVector, ds: &LinearDataset) -> Result<DenseVector> {
    let r = ds.residuals(theta)?;
    let scale = 2.0 / ds.rows() as f64;
    let mut g = vec![0.0; ds.dim];
    for (i, ri) in r.iter().enumerate() {
        for (gj, xj) in g.iter_mut().zip(ds.row(i)) {
            *gj += xj * ri;
        }
    }
    for gj in &mut g {
        *gj *= scale;
    }
    Ok(DenseVector::from_vec_unchecked(g))
}

/// Sufficient statistics of one dataset: `XᵀX/D`, `Xᵀy/D`, `yᵀy/D`.
///
/// Evaluating loss and gradient through these costs O(J²) instead of O(DJ),
/// which is what makes the 20-worker, 2500-round runs cheap.
#[derive(Debug, Clone)]
pub struct GramStats {
    dim: usize,
    gram: Vec<f64>,
    xty: Vec<f64>,
    yty: f64,
}

impl GramStats {
    pub fn new(ds: &LinearDataset) -> Self {
        let (j, d) = (ds.dim, ds.rows() as f64);
        let mut gram = vec![0.0; j * j];
        let mut xty = vec![0.0; j];
        for i in 0..ds.rows() {
            let row = ds.row(i);
            for a in 0..j {
                xty[a] += row[a] * ds.y[i];
                for b in a..j {
                    gram[a * j + b] += row[a] * row[b];
                }
            }
        }
        for a in 0..j {
            for b in a..j {
                gram[a * j + b] /= d;
                gram[b * j + a] = gram[a * j + b];
            }
            xty[a] /= d;
        }
        let yty = ds.y.iter().map(|v| v * v).sum::<f64>() / d;
        Self {
            dim: j,
            gram,
            xty,
            yty,
        }
    }

    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let j = self.dim;
        (0..j)
            .map(|a| {
                let row = &self.gram[a * j..(a + 1) * j];
                let gt: f64 = row.iter().zip(theta).map(|(g, t)| g * t).sum();
                2.0 * (gt - self.xty[a])
            })
            .collect()
    }

    pub fn loss(&self, theta: &[f64]) -> f64 {
        let j = self.dim;
        let quad: f64 = (0..j)
            .map(|a| {
                let row = &self.gram[a * j..(a + 1) * j];
                theta[a] * row.iter().zip(theta).map(|(g, t)| g * t).sum::<f64>()
            })
            .sum();
        let lin: f64 = self.xty.iter().zip(theta).map(|(b, t)| b * t).sum();
        (quad - 2.0 * lin + self.yty).max(0.0)
    }
}

fn check_collection(datasets: &[LinearDataset]) -> Result<usize> {
    let first = datasets
        .first()
        .ok_or_else(|| Error::Input("at least one dataset is required".into()))?;
    let j = first.dim;
    if let Some(ds) = datasets.iter().find(|ds| ds.dim != j) {
        return Err(Error::length_mismatch("dataset dimension", j, ds.dim));
    }
    Ok(j)
}

fn solve_normal_equations(a: DMatrix<f64>, b: DVector<f64>) -> Result<DenseVector> {
    let b_norm = b.norm();
    let solution = match a.clone().cholesky() {
        Some(chol) => chol.solve(&b),
        None => {
            let qr = a.clone().col_piv_qr();
            let r = qr.r();
            let diag: Vec<f64> = r.diagonal().iter().map(|v| v.abs()).collect();
            let max = diag.iter().cloned().fold(0.0, f64::max);
            let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
            let cond = if min > 0.0 { max / min } else { f64::INFINITY };
            if cond.is_nan() || cond >= 1e14 {
                return Err(Error::Numerical(format!(
                    "normal equations are singular (condition estimate {cond:.3e})"
                )));
            }
            qr.solve(&b).ok_or_else(|| {
                Error::Numerical(format!(
                    "normal equations are singular (condition estimate {cond:.3e})"
                ))
            })?
        }
    };
    let residual = (&a * &solution - &b).norm();
    if residual.is_nan() || residual > 1e-8 * b_norm {
        return Err(Error::Numerical(format!(
            "normal equation residual {residual:.3e} exceeds tolerance (rhs norm {b_norm:.3e})"
        )));
    }
    DenseVector::new(solution.iter().copied().collect())
}

/// Least-squares minimizer of the pooled data:
/// `θ* = [Σ X_nᵀ X_n]⁻¹ Σ X_nᵀ y_n`.
pub fn global_optimum(datasets: &[LinearDataset]) -> Result<DenseVector> {
    let j = check_collection(datasets)?;
    let mut a = DMatrix::<f64>::zeros(j, j);
    let mut b = DVector::<f64>::zeros(j);
    for ds in datasets {
        let x = ds.design();
        a += x.transpose() * &x;
        b += x.transpose() * DVector::from_column_slice(&ds.y);
    }
    solve_normal_equations(a, b)
}

/// Minimizer of `Σ ω_n F_n(θ)`. Coincides with [`global_optimum`] for
/// uniform weights and equal dataset sizes.
pub fn weighted_optimum(datasets: &[LinearDataset], weights: &[f64]) -> Result<DenseVector> {
    let j = check_collection(datasets)?;
    if weights.len() != datasets.len() {
        return Err(Error::length_mismatch(
            "weights",
            datasets.len(),
            weights.len(),
        ));
    }
    let mut a = DMatrix::<f64>::zeros(j, j);
    let mut b = DVector::<f64>::zeros(j);
    for (ds, &w) in datasets.iter().zip(weights) {
        let x = ds.design();
        let s = w / ds.rows() as f64;
        a += (x.transpose() * &x) * s;
        b += (x.transpose() * DVector::from_column_slice(&ds.y)) * s;
    }
    solve_normal_equations(a, b)
}

/// `σ(−z) = 1/(1+e^z)` without overflow for large |z|.
fn sigmoid_neg(z: f64) -> f64 {
    if z >= 0.0 {
        let e = (-z).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + z.exp())
    }
}

/// Gradient of `log(1 + exp(−⟨θ, x⟩))`, i.e. `−σ(−⟨θ, x⟩) x`.
pub fn logistic_gradient(theta: &DenseVector, x: &DenseVector) -> Result<DenseVector> {
    x.ensure_len("logistic feature vector", theta.len())?;
    let s = sigmoid_neg(theta.dot(x));
    Ok(DenseVector::from_vec_unchecked(
        x.iter().map(|v| -s * v).collect(),
    ))
}

/// `log(1 + exp(−⟨θ, x⟩))`
pub fn logistic_loss(theta: &DenseVector, x: &DenseVector) -> Result<f64> {
    x.ensure_len("logistic feature vector", theta.len())?;
    let m = -theta.dot(x);
    Ok(m.max(0.0) + (-m.abs()).exp().ln_1p())
}

/// The two-worker logistic example: both points labeled 1, features
/// `[100, 1]` and `[-100, 1]`, starting from `θ = [0, 1]`.
pub fn logistic_toy_points() -> Vec<DenseVector> {
    vec![
        DenseVector::from_vec_unchecked(vec![100.0, 1.0]),
        DenseVector::from_vec_unchecked(vec![-100.0, 1.0]),
    ]
}

pub fn logistic_toy_start() -> DenseVector {
    DenseVector::from_vec_unchecked(vec![0.0, 1.0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dv(v: &[f64]) -> DenseVector {
        DenseVector::new(v.to_vec()).unwrap()
    }

    fn identity_dataset(j: usize, y: Vec<f64>) -> LinearDataset {
        let mut x = vec![0.0; j * j];
        for i in 0..j {
            x[i * j + i] = 1.0;
        }
        LinearDataset::new(j, x, y).unwrap()
    }

    fn small_cfg(seed: u64) -> GenConfig {
        GenConfig {
            workers: 3,
            dim: 4,
            samples_per_worker: 12,
            mean_of_means: 0.0,
            sigma2: 1.0,
            h2: 1.0,
            eps2: 0.5,
            homogeneous: false,
            seed,
        }
    }

    #[test]
    fn degenerate_variances_give_constant_truth() {
        let cfg = GenConfig {
            mean_of_means: 2.5,
            sigma2: 0.0,
            h2: 0.0,
            eps2: 0.0,
            ..small_cfg(1)
        };
        let data = generate(&cfg).unwrap();
        for t in &data.ground_truth {
            assert!(t.iter().all(|&v| v == 2.5));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_datasets(&small_cfg(42)).unwrap();
        let b = generate_datasets(&small_cfg(42)).unwrap();
        let c = generate_datasets(&small_cfg(43)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn homogeneous_mode_shares_truth_and_has_exact_labels() {
        let cfg = GenConfig {
            homogeneous: true,
            ..small_cfg(5)
        };
        let data = generate(&cfg).unwrap();
        let t0 = &data.ground_truth[0];
        for (ds, t) in data.datasets.iter().zip(&data.ground_truth) {
            assert_eq!(t, t0);
            assert!(linreg_loss(t, ds).unwrap() < 1e-24);
        }
        let opt = global_optimum(&data.datasets).unwrap();
        assert!(opt.distance(t0) < 1e-10);
        for ds in &data.datasets {
            let local = global_optimum(std::slice::from_ref(ds)).unwrap();
            assert!(local.distance(&opt) < 1e-10);
        }
    }

    #[test]
    fn validation_rejects_bad_configs() {
        assert!(generate(&GenConfig {
            workers: 0,
            ..small_cfg(0)
        })
        .is_err());
        assert!(generate(&GenConfig {
            sigma2: -1.0,
            ..small_cfg(0)
        })
        .is_err());
    }

    #[test]
    fn loss_identity_design() {
        let ds = identity_dataset(4, vec![0.0; 4]);
        let loss = linreg_loss(&dv(&[1.0, 0.0, 0.0, 0.0]), &ds).unwrap();
        assert_eq!(loss, 0.25);
    }

    #[test]
    fn loss_matches_naive_summation() {
        let ds = &generate_datasets(&small_cfg(9)).unwrap()[1];
        let theta = dv(&[0.3, -1.1, 2.0, 0.7]);
        // term-by-term oracle
        let mut naive = 0.0;
        for i in 0..ds.rows() {
            let mut pred = 0.0;
            for jj in 0..ds.dim() {
                pred += ds.features()[i * ds.dim() + jj] * theta[jj];
            }
            naive += (pred - ds.labels()[i]).powi(2);
        }
        naive /= ds.rows() as f64;
        let loss = linreg_loss(&theta, ds).unwrap();
        assert!((loss - naive).abs() <= 1e-12 * naive.max(1.0));
    }

    #[test]
    fn gradient_identity_design() {
        let ds = identity_dataset(4, vec![0.0; 4]);
        let theta = dv(&[1.0, -2.0, 0.5, 3.0]);
        let g = linreg_gradient(&theta, &ds).unwrap();
        for (gi, ti) in g.iter().zip(theta.iter()) {
            assert!((gi - 0.5 * ti).abs() < 1e-15);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let ds = &generate_datasets(&small_cfg(3)).unwrap()[0];
        let theta = dv(&[0.2, -0.4, 1.3, -2.2]);
        let g = linreg_gradient(&theta, ds).unwrap();
        let h = 1e-6;
        for j in 0..4 {
            let mut plus = theta.clone().into_vec();
            let mut minus = theta.clone().into_vec();
            plus[j] += h;
            minus[j] -= h;
            let fd = (linreg_loss(&dv(&plus), ds).unwrap() - linreg_loss(&dv(&minus), ds).unwrap())
                / (2.0 * h);
            assert!(
                (fd - g[j]).abs() <= 1e-5 * g[j].abs().max(1.0),
                "coord {j}: {fd} vs {}",
                g[j]
            );
        }
    }

    #[test]
    fn gram_stats_agree_with_direct_evaluation() {
        let ds = &generate_datasets(&small_cfg(11)).unwrap()[2];
        let stats = GramStats::new(ds);
        let theta = dv(&[0.5, 0.1, -0.3, 1.7]);
        let g_direct = linreg_gradient(&theta, ds).unwrap();
        let g_gram = stats.gradient(&theta);
        for (a, b) in g_direct.iter().zip(&g_gram) {
            assert!((a - b).abs() < 1e-10 * a.abs().max(1.0));
        }
        let l = linreg_loss(&theta, ds).unwrap();
        assert!((stats.loss(&theta) - l).abs() < 1e-10 * l.max(1.0));
    }

    #[test]
    fn optimum_of_identity_design_is_labels() {
        let ds = identity_dataset(3, vec![1.5, -2.0, 0.25]);
        let opt = global_optimum(&[ds]).unwrap();
        for (a, b) in opt.iter().zip([1.5, -2.0, 0.25]) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn optimum_zeroes_mean_gradient() {
        let data = generate_datasets(&small_cfg(21)).unwrap();
        let opt = global_optimum(&data).unwrap();
        let mut mean = [0.0; 4];
        for ds in &data {
            let g = linreg_gradient(&opt, ds).unwrap();
            for (m, v) in mean.iter_mut().zip(g.iter()) {
                *m += v / data.len() as f64;
            }
        }
        assert!(mean.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-8);
    }

    #[test]
    fn weighted_optimum_matches_pooled_for_uniform_weights() {
        let data = generate_datasets(&small_cfg(4)).unwrap();
        let a = global_optimum(&data).unwrap();
        let b = weighted_optimum(&data, &[1.0 / 3.0; 3]).unwrap();
        assert!(a.distance(&b) < 1e-12);
    }

    #[test]
    fn singular_system_reports_condition() {
        // two identical columns
        let ds =
            LinearDataset::new(2, vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0], vec![1.0, 2.0, 3.0]).unwrap();
        match global_optimum(&[ds]) {
            Err(Error::Numerical(msg)) => assert!(msg.contains("condition"), "{msg}"),
            other => panic!("expected numerical error, got {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_is_an_input_error() {
        let ds = identity_dataset(3, vec![0.0; 3]);
        assert!(matches!(
            linreg_loss(&dv(&[1.0]), &ds),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            linreg_gradient(&dv(&[1.0]), &ds),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn logistic_gradient_examples() {
        let x = dv(&[3.0, -2.0]);
        let g = logistic_gradient(&dv(&[0.0, 0.0]), &x).unwrap();
        assert_eq!(g.as_slice(), &[-1.5, 1.0]);

        let g = logistic_gradient(&dv(&[1e3, 0.0]), &dv(&[1.0, 1.0])).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-300));
        let g = logistic_gradient(&dv(&[-1e3, 0.0]), &dv(&[1.0, 1.0])).unwrap();
        assert_eq!(g.as_slice(), &[-1.0, -1.0]);

        let g = logistic_gradient(&logistic_toy_start(), &dv(&[100.0, 1.0])).unwrap();
        let factor = (-1.0f64).exp() / (1.0 + (-1.0f64).exp());
        assert!((g[0] + 100.0 * factor).abs() < 1e-12);
        assert!((g[1] + factor).abs() < 1e-15);
        assert!((factor - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn logistic_gradient_matches_central_differences() {
        let x = dv(&[1.5, -0.7, 2.0]);
        let theta = dv(&[0.3, 0.9, -0.2]);
        let g = logistic_gradient(&theta, &x).unwrap();
        let h = 1e-6;
        for j in 0..3 {
            let mut p = theta.clone().into_vec();
            let mut m = theta.clone().into_vec();
            p[j] += h;
            m[j] -= h;
            let fd = (logistic_loss(&dv(&p), &x).unwrap() - logistic_loss(&dv(&m), &x).unwrap())
                / (2.0 * h);
            assert!((fd - g[j]).abs() <= 1e-5 * g[j].abs().max(1e-3));
        }
    }

    #[test]
    fn logistic_loss_is_stable() {
        let x = dv(&[100.0, 1.0]);
        assert!(logistic_loss(&dv(&[-50.0, 0.0]), &x).unwrap().is_finite());
        assert!((logistic_loss(&dv(&[-50.0, 0.0]), &x).unwrap() - 5000.0).abs() < 1e-9);
        assert_eq!(logistic_loss(&dv(&[50.0, 0.0]), &x).unwrap(), 0.0);
    }
}
