//! Noncoherent initialization: frequencies are peeled one at a time from the
//! residual, each from the posterior with its weight marginalized out.

use num_complex::Complex64;

use super::{FreqPosterior, MvalseState, PosteriorGrid, PseudoObservations, SupportSolver};
use crate::error::Result;
use crate::model::RowSet;

/// Initial state for a cold start. Up to `N/2` components are peeled and
/// their posteriors stored; the returned support is empty.
pub fn init_noncoherent(obs: &PseudoObservations, rows: &RowSet) -> Result<MvalseState> {
    let n = rows.n_full();
    let m = rows.len();
    let snapshots = obs.snapshots();
    let rho = 0.5;

    let mut weighted_power = 0.0;
    let mut precision = 0.0;
    for (y, v) in obs.y.iter().zip(obs.noise_var.iter()) {
        weighted_power += y.norm_sqr() / v;
        precision += 1.0 / v;
    }
    let power = weighted_power / precision;
    let tau = (power / (rho * n as f64)).max(1e-12);

    let posts = vec![FreqPosterior::uniform(n); n];
    let mut state = MvalseState::new(rows.clone(), snapshots, posts, rho, tau)?;
    if power == 0.0 {
        return Ok(state);
    }

    // Per-snapshot harmonic-mean noise level and whitening weights.
    let mean_var: Vec<f64> = (0..snapshots)
        .map(|l| m as f64 / obs.noise_var.column(l).iter().map(|v| 1.0 / v).sum::<f64>())
        .collect();
    let grid = PosteriorGrid::new(n);
    let mut solver = SupportSolver::new(obs, &state);
    let mut residual = obs.y.clone();
    for k in 0..(n / 2).min(m) {
        if residual.iter().all(|r| r.norm_sqr() == 0.0) {
            break;
        }
        let mut coeffs = vec![Complex64::new(0.0, 0.0); n];
        for l in 0..snapshots {
            let scale = 2.0 / (mean_var[l] * (m as f64 + mean_var[l] / tau));
            let x: Vec<Complex64> = (0..m)
                .map(|i| residual[(i, l)] * (mean_var[l] / obs.noise_var[(i, l)]))
                .collect();
            for (i, &mi) in rows.indices().iter().enumerate() {
                for (j, &mj) in rows.indices().iter().enumerate().take(i) {
                    coeffs[mi - mj] += x[i] * x[j].conj() * scale;
                }
            }
        }
        let post = grid.fit(&coeffs);
        if post.is_uniform() {
            break;
        }
        state.set_posterior(k, post);
        solver.refresh_column(k, &state);
        let act = solver.delta_activate(k, &state);
        if act.v.iter().any(|&v| !(v > 0.0)) {
            break;
        }
        solver.apply_flip(k, &mut state);

        let a_s = state.active_steering();
        for l in 0..snapshots {
            let fitted = &a_s * state.weights(l);
            for i in 0..m {
                residual[(i, l)] = obs.y[(i, l)] - fitted[i];
            }
        }
    }
    state.clear_support();
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{steering, ComplexMatrix};
    use crate::special::wrap_distance;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_data_gives_uniform_posteriors() {
        let rows = RowSet::prefix(6, 10).unwrap();
        let obs = PseudoObservations::homoscedastic(ComplexMatrix::zeros(6, 2), 1.0).unwrap();
        let state = init_noncoherent(&obs, &rows).unwrap();
        assert!(state.posteriors().iter().all(|p| p.kappa == 0.0));
        assert_eq!(state.k_hat(), 0);
    }

    /// Oracle: peak of a zero-padded periodogram of the single snapshot.
    #[test]
    fn single_strong_tone_lands_near_periodogram_peak() {
        let n = 64;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows = RowSet::random(48, n, &mut rng).unwrap();
        let theta0 = -1.234;
        let a = steering(theta0, &rows);
        let y = ComplexMatrix::from_fn(48, 1, |i, _| {
            a[i] * 3.0 + Complex64::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05))
        });
        let obs = PseudoObservations::homoscedastic(y.clone(), 1e-3).unwrap();
        let state = init_noncoherent(&obs, &rows).unwrap();
        let first = state.posteriors()[0].mu;
        assert!(wrap_distance(first, theta0) < 2.0 * std::f64::consts::PI / (4.0 * n as f64));

        let grid = 1 << 16;
        let peak = (0..grid)
            .map(|g| {
                let t = -std::f64::consts::PI + 2.0 * std::f64::consts::PI * g as f64 / grid as f64;
                let s = steering(t, &rows);
                (t, s.dotc(&y.column(0)).norm())
            })
            .fold((0.0, 0.0), |a, b| if b.1 > a.1 { b } else { a })
            .0;
        assert!(wrap_distance(first, peak) < 2.0 * std::f64::consts::PI / (4.0 * n as f64));
    }

    #[test]
    fn deterministic() {
        let rows = RowSet::prefix(12, 16).unwrap();
        let y = ComplexMatrix::from_fn(12, 3, |i, l| Complex64::new((i * l) as f64 * 0.1, (i as f64).sin()));
        let obs = PseudoObservations::homoscedastic(y, 0.2).unwrap();
        assert_eq!(init_noncoherent(&obs, &rows).unwrap(), init_noncoherent(&obs, &rows).unwrap());
    }
}
