use heightbev::bevgrid::GridSpec;
use heightbev::exec::Execution;
use heightbev::predictor::{
    backward, batch_forward, decode_one, fit, grad_check, init_embeddings, laplace_term, BatchSource, CellBatch,
    CellTarget, FitConfig, LossConfig, PredictorParams, GRAD_CHECK_RESOLUTION,
};
use heightbev::sampling::BevQueryGrid;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CHANNELS: usize = 5;

fn grid() -> GridSpec {
    GridSpec::ego_square(32)
}

fn random_batch(seed: u64, n: usize, layers: usize) -> CellBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let queries = (0..layers)
        .map(|_| {
            let f: Vec<f64> = (0..n * CHANNELS).map(|_| rng.random_range(0.0..1.0)).collect();
            BevQueryGrid::from_parts(CHANNELS, f, vec![2; n])
        })
        .collect();
    let targets = (0..n)
        .map(|k| CellTarget {
            occupied: k % 2 == 0,
            y: rng.random_range(-2.0..1.0),
            h: rng.random_range(0.5..3.0),
            weight: rng.random_range(1.0..2.0),
        })
        .collect();
    CellBatch { queries, targets, ranges: (0..n).map(|k| 3.0 + k as f64).collect(), grid: grid() }
}

/// Batches that do not depend on the parameters.
struct Fixed(Vec<CellBatch>);

impl BatchSource for Fixed {
    fn num_scenes(&self) -> usize {
        self.0.len()
    }
    fn batch(&self, _: &PredictorParams, scene: usize) -> CellBatch {
        self.0[scene].clone()
    }
}

fn small_fit(epochs: usize, lr: f64) -> FitConfig {
    FitConfig { epochs, lr, hidden: 8, layers: 2, seed: 5, ..FitConfig::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn laplace_term_is_smallest_at_sqrt2_residual(r in 0.01..5.0f64) {
        let best = std::f64::consts::SQRT_2 * r;
        let at = |s: f64| laplace_term(true, r, s.ln());
        for k in [0.5, 0.8, 0.95, 0.999, 1.001, 1.05, 1.3, 2.0] {
            prop_assert!(at(best * k) > at(best));
        }
    }

    #[test]
    fn decoded_heights_are_monotone(a in -0.5..1.5f64, b in -0.5..1.5f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let g = grid();
        let d = |v: f64| decode_one(&[v, v, 0.0, 0.0, 0.0], &g);
        prop_assert!(d(lo).y <= d(hi).y);
        prop_assert!(d(lo).h <= d(hi).h);
        prop_assert!(d(hi).y >= g.height_range.0 && d(hi).y <= g.height_range.1);
    }

    #[test]
    fn layer_recursion_matches_manual_unroll(seed in 0u64..1000, layers in 1usize..4) {
        let p = PredictorParams::random(layers, CHANNELS, 6, seed);
        let b = random_batch(seed + 1, 7, layers);
        let mut es = init_embeddings(7);
        for (l, q) in b.queries.iter().enumerate() {
            es = p.forward(&es, q, &b.ranges, l).unwrap();
        }
        prop_assert_eq!(batch_forward(&p, &b).unwrap(), es);
    }

    #[test]
    fn checkpoints_round_trip(seed in 0u64..1000, layers in 1usize..4, hidden in 1usize..12) {
        let p = PredictorParams::random(layers, CHANNELS, hidden, seed);
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf, seed, 3).unwrap();
        let (q, header) = PredictorParams::read_checkpoint(&buf[..]).unwrap();
        prop_assert_eq!(q, p);
        prop_assert_eq!((header.seed, header.epoch), (seed, 3));
    }

    #[test]
    fn weighting_is_linear_in_the_gradient(seed in 0u64..1000, factor in 0.5..4.0f64) {
        let p = PredictorParams::random(2, CHANNELS, 6, seed);
        let b = random_batch(seed, 6, 2);
        let mut scaled = b.clone();
        scaled.targets.iter_mut().for_each(|t| t.weight *= factor);
        // the segmentation term is unweighted, so switch it off
        let cfg = LossConfig { seg_weight: 0.0, ..LossConfig::default() };
        let (_, g) = backward(&p, &b, &cfg, false).unwrap();
        let (_, gs) = backward(&p, &scaled, &cfg, false).unwrap();
        for (a, c) in g.iter().zip(&gs) {
            prop_assert!((factor * a - c).abs() <= 1e-10 * c.abs().max(1.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn analytic_gradient_matches_differences(seed in 0u64..1000) {
        let mut p = PredictorParams::random(2, CHANNELS, 6, seed);
        // interior start: the clamps are inactive
        p.layers_mut()[0].b2[0] = -0.2;
        p.layers_mut()[0].b2[1] = -0.3;
        let err = grad_check(&p, &random_batch(seed, 8, 2), &LossConfig::default(), 1e-5).unwrap();
        prop_assert!(err < GRAD_CHECK_RESOLUTION, "{err}");
    }
}

#[test]
fn zero_step_keeps_the_initial_parameters() {
    let src = Fixed(vec![random_batch(1, 6, 2), random_batch(2, 6, 2)]);
    let cfg = small_fit(5, 0.0);
    let (p, log) = fit(&src, CHANNELS, &cfg, Execution::Parallel).unwrap();
    assert_eq!(p, PredictorParams::random(cfg.layers, CHANNELS, cfg.hidden, cfg.seed));
    assert_eq!(log.len(), 5);
    assert!(log.windows(2).all(|w| w[0].total_loss == w[1].total_loss));
}

#[test]
fn sequential_and_parallel_fits_agree_exactly() {
    let src = Fixed((0..4).map(|s| random_batch(s, 9, 2)).collect());
    let cfg = small_fit(20, 0.05);
    let (a, la) = fit(&src, CHANNELS, &cfg, Execution::Sequential).unwrap();
    let (b, lb) = fit(&src, CHANNELS, &cfg, Execution::Parallel).unwrap();
    assert_eq!(a, b);
    assert_eq!(la, lb);
}

#[test]
fn backtracking_never_logs_an_increase() {
    let src = Fixed((0..3).map(|s| random_batch(s, 12, 2)).collect());
    // a step this large overshoots without the safeguard
    let cfg = small_fit(60, 2.0);
    let (_, log) = fit(&src, CHANNELS, &cfg, Execution::Parallel).unwrap();
    assert!(log.windows(2).all(|w| w[1].total_loss <= w[0].total_loss));
    assert!(log.last().unwrap().total_loss < log[0].total_loss);
}

#[test]
fn fitting_an_empty_source_fails() {
    assert!(fit(&Fixed(Vec::new()), CHANNELS, &small_fit(3, 0.1), Execution::Sequential).is_err());
}
