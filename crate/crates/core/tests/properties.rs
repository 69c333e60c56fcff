mod common;

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{denoise_by_quadrature, ln_z, random_instance};
use qlse_core::crb::{fim_quantized, fim_unquantized, lambda_chi, FisherParams};
use qlse_core::ep::{EpOptions, EpRunner};
use qlse_core::harness::{run_monte_carlo, BitDepth, ExperimentConfig};
use qlse_core::metrics::{dnmse_db, nmse_db};
use qlse_core::model::{generate_truth, min_wrap_separation, steering, steering_matrix, ComplexMatrix, RowSet, TruthConfig};
use qlse_core::mvalse::{update_hyperparams, PosteriorGrid, PseudoObservations, SupportSolver};
use qlse_core::quantizer::{gaussian_combine, mmse_denoise_real, quantize_matrix, Measurements, QuantizerSpec};

fn random_rows(seed: u64, m: usize, n: usize) -> RowSet {
    RowSet::random(m, n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn complex_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> ComplexMatrix {
    ComplexMatrix::from_fn(rows, cols, |_, _| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn steering_is_two_pi_periodic(theta in -PI..PI, seed in any::<u64>(), m in 1usize..40) {
        let rows = random_rows(seed, m, 40);
        let a = steering(theta, &rows);
        let b = steering(theta + 2.0 * PI, &rows);
        for (x, y) in a.iter().zip(b.iter()) {
            prop_assert!((x - y).norm() <= 1e-12 * (1.0 + rows.n_full() as f64));
        }
    }

    #[test]
    fn truth_is_seeded_and_separated(seed in any::<u64>(), k in 1usize..6, l in 1usize..4, snr in -5.0f64..30.0) {
        let cfg = TruthConfig { n: 64, m: 40, k, l, snr_db: snr, row_policy: Default::default(), seed };
        let a = generate_truth(&cfg).unwrap();
        prop_assert_eq!(&a, &generate_truth(&cfg).unwrap());
        prop_assert!(k == 1 || min_wrap_separation(&a.truth.frequencies) > 2.0 * PI / 64.0);

        let summed = (0..l).map(|c| {
            (0..k).fold(nalgebra::DVector::zeros(40), |acc, j| acc + steering(a.truth.frequencies[j], &a.truth.rows) * a.truth.weights[(j, c)])
        });
        let norm_sq: f64 = summed.map(|col| col.norm_squared()).sum();
        let direct = (steering_matrix(&a.truth.frequencies, &a.truth.rows) * &a.truth.weights).norm();
        prop_assert!((norm_sq.sqrt() - direct).abs() <= 1e-10 * direct);
    }

    #[test]
    fn denoiser_never_increases_variance(bits in 1u32..=4, hr in 0.2f64..5.0, cell in any::<prop::sample::Index>(),
                                         m0 in -6.0f64..6.0, v0 in 1e-3f64..20.0, nv in 1e-3f64..20.0) {
        let spec = QuantizerSpec::uniform(bits, hr).unwrap();
        let (lo, hi) = spec.cell_bounds(cell.index(spec.cells()));
        let (mean, var) = mmse_denoise_real(lo, hi, m0, v0, nv);
        prop_assert!(mean.is_finite());
        prop_assert!(var > 0.0 && var <= v0, "var {} prior {}", var, v0);
    }

    #[test]
    fn cell_representatives_round_trip(bits in 1u32..=8, hr in 0.01f64..10.0) {
        let spec = QuantizerSpec::uniform(bits, hr).unwrap();
        for d in 0..spec.cells() {
            prop_assert_eq!(spec.quantize(spec.representative(d)), d);
        }
    }

    #[test]
    fn fine_quantizer_matches_gaussian_combination(y in -3.0f64..3.0, m0 in -3.0f64..3.0, v0 in 0.05f64..5.0, nv in 0.05f64..5.0) {
        let spec = QuantizerSpec::uniform(12, 10.0).unwrap();
        let cell = spec.quantize(y);
        let (lo, hi) = spec.cell_bounds(cell);
        let (qm, qv) = mmse_denoise_real(lo, hi, m0, v0, nv);
        let (am, av) = gaussian_combine(spec.representative(cell), m0, v0, nv);
        prop_assert!((qm - am).abs() < 1e-3 && (qv - av).abs() < 1e-3);
    }

    #[test]
    fn greedy_flips_climb_ln_z(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut state, obs) = random_instance(&mut rng);
        let mut solver = SupportSolver::new(&obs, &state);
        for _ in 0..4 * state.n() {
            let before = state.active().to_vec();
            let z0 = ln_z(&obs, &state, &before);
            let deltas: Vec<f64> = (0..state.n())
                .map(|k| if state.support()[k] { solver.delta_deactivate(k, &state) } else { solver.delta_activate(k, &state).delta })
                .collect();
            if solver.greedy(&mut state, 1) == 0 {
                break;
            }
            let flipped = (0..state.n()).find(|&k| state.support()[k] != before.contains(&k)).unwrap();
            let gain = ln_z(&obs, &state, state.active()) - z0;
            prop_assert!(gain > 0.0);
            prop_assert!((gain - deltas[flipped]).abs() < 1e-8);
        }
    }

    #[test]
    fn weight_covariances_stay_hermitian_pd(seed in any::<u64>(), flips in prop::collection::vec(0usize..8, 1..20)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut state, obs) = random_instance(&mut rng);
        let mut solver = SupportSolver::new(&obs, &state);
        for k in flips {
            let k = k % state.n();
            if !state.support()[k] && state.k_hat() >= obs.rows() {
                continue;
            }
            solver.apply_flip(k, &mut state);
            for l in 0..state.snapshots() {
                let c = state.covariance(l);
                prop_assert_eq!(c, &c.adjoint());
                if c.nrows() > 0 {
                    let min = c.clone().symmetric_eigenvalues().min();
                    prop_assert!(min > -1e-10, "min eigenvalue {}", min);
                }
            }
        }
    }

    #[test]
    fn fitted_moments_are_bounded(seed in any::<u64>(), n in 2usize..40, scale in 0.01f64..500.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coeffs: Vec<Complex64> = (0..n).map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * scale).collect();
        let post = PosteriorGrid::new(n).fit(&coeffs);
        prop_assert!(post.moments.iter().all(|m| m.norm() <= 1.0 + 1e-12));
    }

    #[test]
    fn von_mises_fit_reproduces_bessel_moments(mu in -PI..PI, log_kappa in (0.1f64).ln()..(500.0f64).ln()) {
        let kappa = log_kappa.exp();
        let n = 17;
        let mut coeffs = vec![Complex64::new(0.0, 0.0); n];
        coeffs[1] = Complex64::from_polar(kappa, mu);
        let post = PosteriorGrid::new(n).fit(&coeffs);
        for (order, m) in post.moments.iter().enumerate() {
            let exact = Complex64::from_polar(common::bessel_ratio_quadrature(order, kappa), order as f64 * mu);
            prop_assert!((m - exact).norm() < 1e-6);
        }
    }

    #[test]
    fn tau_ignores_snapshot_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut state, obs) = random_instance(&mut rng);
        let l = obs.snapshots();
        let perm: Vec<usize> = (0..l).rev().collect();
        let permuted = PseudoObservations::new(
            ComplexMatrix::from_fn(obs.rows(), l, |i, j| obs.y[(i, perm[j])]),
            DMatrix::from_fn(obs.rows(), l, |i, j| obs.noise_var[(i, perm[j])]),
        ).unwrap();
        let mut other = state.clone();
        let mut a = SupportSolver::new(&obs, &state);
        let mut b = SupportSolver::new(&permuted, &other);
        for k in 0..state.rows().len().min(3) {
            a.apply_flip(k, &mut state);
            b.apply_flip(k, &mut other);
        }
        update_hyperparams(&mut state);
        update_hyperparams(&mut other);
        prop_assert!((state.tau - other.tau).abs() <= 1e-12 * state.tau);
    }

    #[test]
    fn fim_is_symmetric_psd(seed in any::<u64>(), k in 1usize..4, l in 1usize..3, bits in 1u32..=4, sigma2 in 0.05f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = (0..k).map(|_| rng.random_range(-PI..PI)).collect();
        let g = DMatrix::from_fn(k, l, |_, _| rng.random_range(0.2..2.0));
        let phi = DMatrix::from_fn(k, l, |_, _| rng.random_range(-PI..PI));
        let p = FisherParams::new(theta, g, phi).unwrap();
        let rows = RowSet::random(16, 32, &mut rng).unwrap();
        let spec = QuantizerSpec::uniform(bits, 2.0).unwrap();
        for fim in [fim_quantized(&p, &rows, sigma2, &spec), fim_unquantized(&p, &rows, sigma2)] {
            prop_assert!((&fim - fim.transpose()).amax() <= 1e-12 * fim.amax());
            let min = fim.clone().symmetric_eigenvalues().min();
            prop_assert!(min >= -1e-10 * fim.trace());
        }
    }

    #[test]
    fn fisher_weight_is_bounded_and_peaks_at_threshold(sigma2 in 0.01f64..5.0, bits in 1u32..=3, hr in 0.3f64..3.0) {
        let spec = QuantizerSpec::uniform(bits, hr).unwrap();
        let cap = 2.0 / sigma2;
        let scan: Vec<(f64, f64)> = (0..=400)
            .map(|i| -2.0 * hr + 4.0 * hr * i as f64 / 400.0)
            .map(|x| (x, lambda_chi(Complex64::new(x, 0.0), sigma2, &spec).0))
            .collect();
        prop_assert!(scan.iter().all(|&(_, w)| w >= 0.0 && w <= cap * (1.0 + 1e-12)));
        let (best_x, _) = scan.iter().copied().fold((0.0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
        let nearest = spec.thresholds().iter().map(|t| (t - best_x).abs()).fold(f64::INFINITY, f64::min);
        let step = if bits == 1 { hr } else { 2.0 * hr / spec.cells() as f64 };
        prop_assert!(nearest <= 0.5 * step + 1e-2 * hr, "peak at {} is {} from a threshold", best_x, nearest);
    }

    #[test]
    fn metrics_ignore_snapshot_order(seed in any::<u64>(), rows in 1usize..12, cols in 2usize..5, scale in 0.1f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = complex_matrix(&mut rng, rows, cols);
        let est = &truth * Complex64::new(scale, 0.3) + complex_matrix(&mut rng, rows, cols) * Complex64::new(0.2, 0.0);
        let perm = |m: &ComplexMatrix| ComplexMatrix::from_fn(rows, cols, |i, j| m[(i, cols - 1 - j)]);
        let (n0, d0) = (nmse_db(&est, &truth).unwrap(), dnmse_db(&est, &truth).unwrap());
        prop_assert!((n0 - nmse_db(&perm(&est), &perm(&truth)).unwrap()).abs() < 1e-9);
        prop_assert!((d0 - dnmse_db(&perm(&est), &perm(&truth)).unwrap()).abs() < 1e-9);
        prop_assert!(d0 <= n0 + 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn denoiser_matches_quadrature(bits in 1u32..=3, cell in any::<prop::sample::Index>(), m0 in -3.0f64..3.0,
                                   v0 in 0.01f64..10.0, nv in 0.01f64..10.0) {
        let spec = QuantizerSpec::uniform(bits, 1.5).unwrap();
        let (lo, hi) = spec.cell_bounds(cell.index(spec.cells()));
        let (mean, var) = mmse_denoise_real(lo, hi, m0, v0, nv);
        let (em, ev) = denoise_by_quadrature(lo, hi, m0, v0, nv);
        prop_assert!((mean - em).abs() <= 1e-6 && (var - ev).abs() <= 1e-6, "({}, {}) vs ({}, {})", mean, var, em, ev);
    }

    #[test]
    fn ep_variances_stay_clipped_and_runs_repeat(seed in any::<u64>(), bits in 1u32..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = RowSet::random(12, 16, &mut rng).unwrap();
        let theta = [rng.random_range(-PI..PI)];
        let z = steering_matrix(&theta, &rows) * complex_matrix(&mut rng, 1, 2) + complex_matrix(&mut rng, 12, 2) * Complex64::new(0.3, 0.0);
        let data = Measurements::Quantized(quantize_matrix(&z, &QuantizerSpec::uniform(bits, 2.0).unwrap()));
        let opts = EpOptions { t_outer: 15, initial_ext_var: 1.0, ..EpOptions::default() };
        let mut runner = EpRunner::new(&data, 0.2, &rows, &opts).unwrap();
        while !runner.done() {
            runner.step().unwrap();
            let s = runner.state();
            for v in s.ext_var_a.iter().chain(s.ext_var_b.iter()) {
                prop_assert!(*v >= opts.var_floor && *v <= opts.var_cap);
            }
        }
        let first = runner.finish().unwrap();
        prop_assert!(first.trace.iter().all(|r| r.change_db.is_finite()));
        let second = qlse_core::ep::run_mvalse_ep(&data, 0.2, &rows, &opts).unwrap();
        prop_assert_eq!(&first.frequencies, &second.frequencies);
        prop_assert_eq!(&first.z_full, &second.z_full);
    }
}

#[test]
fn summaries_are_deterministic_and_gated() {
    let cfg = ExperimentConfig {
        n: 32,
        m: 24,
        k: 2,
        l: 2,
        snr_db: vec![5.0, 15.0],
        bits: vec![BitDepth::Analog, BitDepth::Bits(2)],
        trials: 4,
        seed: 9,
        ..ExperimentConfig::default()
    };
    let a = run_monte_carlo(&cfg).unwrap();
    let b = run_monte_carlo(&cfg).unwrap();
    assert_eq!(a.summaries, b.summaries);
    for s in &a.summaries {
        let group: Vec<_> = a.records_for(s.snr_db, s.bits).collect();
        let gated = group.iter().filter(|r| r.order_correct).count();
        assert_eq!(s.order_correct, gated);
        assert_eq!(s.freq_mse_db.is_some(), gated > 0);
        for r in &group {
            assert_eq!(r.freq_mse_db.is_some(), r.order_correct);
            if let (Some(n), Some(d)) = (r.nmse_db, r.dnmse_db) {
                assert!(d <= n + 1e-9);
            }
        }
    }
}
