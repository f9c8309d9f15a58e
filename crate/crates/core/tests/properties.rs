use proptest::prelude::*;
use regtopk::harness::{
    run_experiment, ExperimentConfig, ProblemSpec, Sparsifier, TraceLevel, Weights,
};
use regtopk::problems::GenConfig;
use regtopk::{
    posterior_distortion, regtopk_step, top_k_select, topk_step, DenseVector, Mask, RegTopKParams,
    WorkerState,
};

/// A worker state after at least one round: arbitrary error that is zero on
/// the previous mask, plus a previous accumulated gradient and aggregate.
#[derive(Debug, Clone)]
struct Case {
    state: WorkerState,
    gradient: DenseVector,
    prev_global: DenseVector,
    k: usize,
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        8 => -100.0..100.0f64,
        1 => Just(0.0),
        1 => -1e-3..1e-3f64,
    ]
}

fn case() -> impl Strategy<Value = Case> {
    (1usize..24)
        .prop_flat_map(|dim| {
            (
                Just(dim),
                1..=dim,
                prop::collection::vec(finite(), dim),
                prop::collection::vec(finite(), dim),
                prop::collection::vec(any::<bool>(), dim),
                prop::collection::vec(finite(), dim),
                prop::collection::vec(finite(), dim),
                prop_oneof![Just(1.0), 0.05..1.0f64],
                0u64..5,
            )
        })
        .prop_map(
            |(dim, k, error, gradient, mask, prev_acc, prev_global, weight, round)| {
                let mut state = WorkerState::new(dim, weight).unwrap();
                if round > 0 {
                    let error: Vec<f64> = error
                        .iter()
                        .zip(&mask)
                        .map(|(&e, &m)| if m { 0.0 } else { e })
                        .collect();
                    state.error = DenseVector::new(error).unwrap();
                    state.prev_mask = Some(Mask::from_bools(mask));
                    state.prev_accumulated = Some(DenseVector::new(prev_acc).unwrap());
                    state.round = round;
                }
                Case {
                    state,
                    gradient: DenseVector::new(gradient).unwrap(),
                    prev_global: DenseVector::new(prev_global).unwrap(),
                    k,
                }
            },
        )
}

fn check_step(
    c: &Case,
    payload: &regtopk::SparsePayload,
    next: &WorkerState,
) -> Result<(), TestCaseError> {
    let dim = c.state.dim();
    let accumulated: Vec<f64> = c
        .state
        .error
        .iter()
        .zip(c.gradient.iter())
        .map(|(e, g)| e + g)
        .collect();
    prop_assert_eq!(payload.len(), c.k);
    let dense = payload.to_dense(dim);
    let mask = next.prev_mask.as_ref().unwrap();
    prop_assert_eq!(mask.count(), c.k);
    for j in 0..dim {
        prop_assert_eq!(next.error[j] + dense[j], accumulated[j]);
        if mask[j] {
            prop_assert_eq!(next.error[j], 0.0);
            prop_assert_eq!(dense[j], accumulated[j]);
        } else {
            prop_assert_eq!(next.error[j], accumulated[j]);
        }
    }
    prop_assert_eq!(next.round, c.state.round + 1);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn error_feedback_identity(c in case(), mu in 0.01..5.0f64) {
        let (payload, next) = topk_step(&c.state, &c.gradient, c.k).unwrap();
        check_step(&c, &payload, &next)?;
        let params = RegTopKParams::with_mu(mu);
        let (payload, next) =
            regtopk_step(&c.state, &c.gradient, Some(&c.prev_global), c.k, &params).unwrap();
        check_step(&c, &payload, &next)?;
    }

    #[test]
    fn selection_is_scale_invariant(
        x in prop::collection::vec(finite(), 1..30),
        exponent in -20i32..20,
        scale in 0.001..1000.0f64,
        k_frac in 0.0..1.0f64,
    ) {
        let k = 1 + ((x.len() - 1) as f64 * k_frac) as usize;
        let base = top_k_select(&x, k).unwrap();
        // Powers of two scale exactly, so even ties must be preserved.
        let exact: Vec<f64> = x.iter().map(|v| v * 2f64.powi(exponent)).collect();
        prop_assert_eq!(&top_k_select(&exact, k).unwrap(), &base);
        // A general factor can perturb near-ties through rounding; compare
        // when the k-th and (k+1)-th magnitudes are clearly apart.
        let mut mags: Vec<f64> = x.iter().map(|v| v.abs()).collect();
        mags.sort_by(|p, q| q.total_cmp(p));
        if k == x.len() || mags[k - 1] > mags[k] * (1.0 + 1e-9) {
            let scaled: Vec<f64> = x.iter().map(|v| v * scale).collect();
            prop_assert_eq!(&top_k_select(&scaled, k).unwrap(), &base);
        }
    }

    #[test]
    fn full_selection_sends_everything(c in case(), mu in 0.01..5.0f64) {
        let dim = c.state.dim();
        let (payload, next) = topk_step(&c.state, &c.gradient, dim).unwrap();
        let accumulated = c.state.accumulate(&c.gradient).unwrap();
        prop_assert_eq!(payload.to_dense(dim), accumulated.clone());
        prop_assert!(next.error.iter().all(|&e| e == 0.0));
        let params = RegTopKParams::with_mu(mu);
        let (payload, next) =
            regtopk_step(&c.state, &c.gradient, Some(&c.prev_global), dim, &params).unwrap();
        prop_assert_eq!(payload.to_dense(dim), accumulated);
        prop_assert!(next.error.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn vanishing_mu_reduces_to_topk(c in case()) {
        prop_assume!(c.state.round > 0);
        let params = RegTopKParams::with_mu(1e-12);
        let accumulated = c.state.accumulate(&c.gradient).unwrap();
        let distortion =
            posterior_distortion(&c.state, &c.prev_global, &accumulated, &params).unwrap();
        prop_assume!(distortion
            .iter()
            .filter_map(|d| d.value())
            .all(|d| (1.0 + d).abs() >= 1e-6));
        let (_, plain) = topk_step(&c.state, &c.gradient, c.k).unwrap();
        let (_, reg) =
            regtopk_step(&c.state, &c.gradient, Some(&c.prev_global), c.k, &params).unwrap();
        prop_assert_eq!(plain.prev_mask, reg.prev_mask);
    }

    #[test]
    fn steps_are_deterministic(c in case(), mu in 0.01..5.0f64) {
        let params = RegTopKParams::with_mu(mu);
        let a = regtopk_step(&c.state, &c.gradient, Some(&c.prev_global), c.k, &params).unwrap();
        let b = regtopk_step(&c.state, &c.gradient, Some(&c.prev_global), c.k, &params).unwrap();
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn full_k_trajectories_match_dense(seed in 0u64..1000, workers in 1usize..5, dim in 1usize..7) {
        let cfg = |sparsifier| ExperimentConfig {
            problem: ProblemSpec::LinearRegression(GenConfig {
                workers,
                dim,
                samples_per_worker: 12,
                ..GenConfig::default()
            }),
            sparsifier,
            k: dim,
            eta: 0.01,
            iterations: 40,
            weights: Weights::Uniform,
            seed,
            trace_level: TraceLevel::Full,
        };
        let dense = run_experiment(&cfg(Sparsifier::None)).unwrap();
        for s in [Sparsifier::Topk, Sparsifier::Regtopk(RegTopKParams::default())] {
            let sparse = run_experiment(&cfg(s)).unwrap();
            for (a, b) in dense.iter().zip(&sparse) {
                prop_assert_eq!(&a.model, &b.model);
                prop_assert_eq!(a.loss.to_bits(), b.loss.to_bits());
            }
        }
    }
}
