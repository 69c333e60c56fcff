//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use qlse_core::model::{ComplexMatrix, RowSet};
use qlse_core::mvalse::{FreqPosterior, MvalseState, PseudoObservations};

pub fn std_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// P(lo <= x + n < hi) for fixed x, n ~ N(0, s^2), computed on the side
/// that avoids cancellation.
pub fn cell_prob(x: f64, lo: f64, hi: f64, s: f64) -> f64 {
    let (a, b) = ((lo - x) / s, (hi - x) / s);
    if a > 0.0 {
        std_cdf(-a) - std_cdf(-b)
    } else {
        std_cdf(b) - std_cdf(a)
    }
}

pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, pieces: usize) -> f64 {
    let h = (b - a) / pieces as f64;
    (0..pieces)
        .map(|i| {
            let lo = a + i as f64 * h;
            quadrature::double_exponential::integrate(&f, lo, lo + h, 1e-15).integral
        })
        .sum()
}

/// Posterior mean and variance of `x ~ N(m0, v0)` given `x + n` in `[lo, hi)`.
pub fn denoise_by_quadrature(lo: f64, hi: f64, m0: f64, v0: f64, nv: f64) -> (f64, f64) {
    let (sd, s) = (v0.sqrt(), nv.sqrt());
    let log_f = |x: f64| -(x - m0).powi(2) / (2.0 * v0) + cell_prob(x, lo, hi, s).ln();
    // The posterior is log-concave with curvature at least 1/v0, so a window of
    // 15 prior deviations around its mode holds all of its mass.
    let (a0, b0) = (m0 - 40.0 * sd - 10.0 * s, m0 + 40.0 * sd + 10.0 * s);
    let grid = 20_000;
    let (mode, peak) = (0..=grid)
        .map(|i| a0 + (b0 - a0) * i as f64 / grid as f64)
        .map(|x| (x, log_f(x)))
        .fold((m0, f64::NEG_INFINITY), |acc, p| if p.1 > acc.1 { p } else { acc });
    let (a, b) = (mode - 15.0 * sd, mode + 15.0 * sd);
    let pieces = ((b - a) / (0.5 * sd.min(s))).ceil() as usize;
    let f = |x: f64| (log_f(x) - peak).exp();
    let z = integrate(f, a, b, pieces);
    let mean = integrate(|x| x * f(x), a, b, pieces) / z;
    let var = integrate(|x| (x - mean).powi(2) * f(x), a, b, pieces) / z;
    (mean, var)
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> (MvalseState, PseudoObservations) {
    let n = rng.random_range(2..=8);
    let m = rng.random_range(1..=n);
    let l = rng.random_range(1..=3);
    let rows = RowSet::random(m, n, rng).unwrap();
    let posts = (0..n)
        .map(|_| FreqPosterior::von_mises(rng.random_range(-PI..PI), rng.random_range(0.5..200.0), n))
        .collect();
    let state = MvalseState::new(rows, l, posts, rng.random_range(0.05..0.95), rng.random_range(0.2..3.0)).unwrap();
    let y = ComplexMatrix::from_fn(m, l, |_, _| Complex64::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)));
    let v = DMatrix::from_fn(m, l, |_, _| rng.random_range(0.1..2.0));
    (state, PseudoObservations::new(y, v).unwrap())
}

/// Per snapshot, the dense `J + I/tau` restricted to `support` and the matching `h`.
pub fn dense_system(obs: &PseudoObservations, state: &MvalseState, support: &[usize], l: usize) -> (DMatrix<Complex64>, DVector<Complex64>) {
    let a = state.steering_hat();
    let s = support.len();
    let inv: Vec<f64> = obs.noise_var.column(l).iter().map(|v| 1.0 / v).collect();
    let trace: f64 = inv.iter().sum();
    let sys = DMatrix::from_fn(s, s, |p, q| {
        if p == q {
            // Expected |a_k[m]|^2 is one, whatever the posterior spread.
            Complex64::new(trace + 1.0 / state.tau, 0.0)
        } else {
            (0..a.nrows()).map(|i| a[(i, support[p])].conj() * inv[i] * a[(i, support[q])]).sum()
        }
    });
    let h = DVector::from_fn(s, |p, _| (0..a.nrows()).map(|i| a[(i, support[p])].conj() * inv[i] * obs.y[(i, l)]).sum());
    (sys, h)
}

pub fn ln_z(obs: &PseudoObservations, state: &MvalseState, support: &[usize]) -> f64 {
    let s = support.len() as f64;
    let l_count = obs.snapshots() as f64;
    let mut total = s * ((state.rho / (1.0 - state.rho)).ln() - l_count * state.tau.ln());
    for l in 0..obs.snapshots() {
        let (sys, h) = dense_system(obs, state, support, l);
        let inv = sys.clone().try_inverse().unwrap();
        total += -sys.determinant().re.ln() + h.dotc(&(inv * &h)).re;
    }
    total
}

/// `I_n(kappa)/I_0(kappa)` by the trapezoid rule, which is spectrally accurate
/// for periodic integrands.
pub fn bessel_ratio_quadrature(n: usize, kappa: f64) -> f64 {
    let points = 20_000;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..points {
        let t = 2.0 * PI * i as f64 / points as f64;
        let w = (kappa * (t.cos() - 1.0)).exp();
        num += w * (n as f64 * t).cos();
        den += w;
    }
    num / den
}
