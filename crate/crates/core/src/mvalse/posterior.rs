//! Frequency posteriors of the form `q(theta) ∝ exp(Re{sum_n conj(c_n) e^{j n theta}})`
//! summarized by their trigonometric moments and a von Mises fit.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::special::{bessel_ratios, invert_bessel_ratio, wrap_angle};

/// Posterior of one frequency.
///
/// `moments[n] = E[exp(j n theta)]` for `n = 0..N`, so the expected full-length
/// steering vector is the moment vector itself.
#[derive(Debug, Clone, PartialEq)]
pub struct FreqPosterior {
    pub mu: f64,
    pub kappa: f64,
    pub moments: Vec<Complex64>,
}

impl FreqPosterior {
    pub fn uniform(n: usize) -> Self {
        let mut moments = vec![Complex64::new(0.0, 0.0); n.max(1)];
        moments[0] = Complex64::new(1.0, 0.0);
        Self { mu: 0.0, kappa: 0.0, moments }
    }

    /// Exact von Mises moments `I_n(kappa)/I_0(kappa) e^{j n mu}`.
    pub fn von_mises(mu: f64, kappa: f64, n: usize) -> Self {
        let ratios = bessel_ratios(kappa, n.max(1) - 1);
        let moments = ratios
            .iter()
            .enumerate()
            .map(|(i, r)| Complex64::from_polar(*r, i as f64 * mu))
            .collect();
        Self { mu: wrap_angle(mu), kappa, moments }
    }

    pub fn is_uniform(&self) -> bool {
        self.kappa == 0.0
    }

    /// Point estimate `arg E[e^{j theta}]`.
    pub fn theta_hat(&self) -> f64 {
        self.mu
    }
}

/// Grid size used for an `n`-sample signal: `2^ceil(log2(32 n))`.
pub fn grid_size(n: usize) -> usize {
    (32 * n.max(1)).next_power_of_two()
}

/// Points of the local window used once the posterior is too sharp for the
/// global grid.
const LOCAL_POINTS: usize = 161;
/// Half-width of the local window in posterior standard deviations.
const LOCAL_HALF_WIDTH: f64 = 12.0;
/// Switch to the local window when the posterior spread falls below this
/// many global grid spacings.
const REFINE_BELOW_SPACINGS: f64 = 2.0;

/// Evaluates gridded posteriors and extracts their moments.
pub struct PosteriorGrid {
    n: usize,
    size: usize,
    ifft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for PosteriorGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PosteriorGrid")
            .field("n", &self.n)
            .field("size", &self.size)
            .finish()
    }
}

impl PosteriorGrid {
    pub fn new(n: usize) -> Self {
        let size = grid_size(n);
        let ifft = FftPlanner::new().plan_fft_inverse(size);
        Self { n, size, ifft }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    fn spacing(&self) -> f64 {
        2.0 * PI / self.size as f64
    }

    /// Fits the posterior whose log-density is `Re{sum_n conj(c_n) e^{j n theta}}`.
    /// `coeffs[n]` is indexed by integer lag `n < N`; `coeffs[0]` only shifts the
    /// normalizer and is ignored.
    pub fn fit(&self, coeffs: &[Complex64]) -> FreqPosterior {
        assert!(coeffs.len() <= self.n, "coefficient lag exceeds signal length");
        let terms: Vec<(usize, Complex64)> = coeffs
            .iter()
            .enumerate()
            .skip(1)
            .filter(|(_, c)| c.re != 0.0 || c.im != 0.0)
            .map(|(n, c)| (n, c.conj()))
            .collect();
        if terms.is_empty() || terms.iter().any(|(_, c)| !c.re.is_finite() || !c.im.is_finite()) {
            return FreqPosterior::uniform(self.n);
        }

        let mut buf = vec![Complex64::new(0.0, 0.0); self.size];
        for &(n, c) in &terms {
            buf[n] = c;
        }
        self.ifft.process(&mut buf);
        let log_density: Vec<f64> = buf.iter().map(|z| z.re).collect();
        let (g_best, f_grid_max) = log_density
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (g, &f)| if f > acc.1 { (g, f) } else { acc });

        let h = self.spacing();
        let (mode, f_mode, curvature) = refine_mode(&terms, g_best as f64 * h, f_grid_max, h);
        let spread = if curvature > 0.0 { curvature.sqrt().recip() } else { f64::INFINITY };

        let moments = if spread < REFINE_BELOW_SPACINGS * h {
            self.local_moments(&terms, &log_density, mode, f_mode, spread)
        } else {
            self.global_moments(&log_density, f_grid_max)
        };
        summarize(moments)
    }

    fn global_moments(&self, log_density: &[f64], f_max: f64) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = log_density
            .iter()
            .map(|&f| Complex64::new((f - f_max).exp(), 0.0))
            .collect();
        self.ifft.process(&mut buf);
        let total = buf[0].re;
        buf.truncate(self.n);
        buf.iter().map(|z| z / total).collect()
    }

    /// Trapezoid rule on a fine window around the mode, plus whatever mass the
    /// global grid still sees outside that window.
    fn local_moments(
        &self,
        terms: &[(usize, Complex64)],
        log_density: &[f64],
        mode: f64,
        f_mode: f64,
        spread: f64,
    ) -> Vec<Complex64> {
        let half_width = (LOCAL_HALF_WIDTH * spread).min(PI);
        let step = 2.0 * half_width / (LOCAL_POINTS - 1) as f64;
        let mut acc = vec![Complex64::new(0.0, 0.0); self.n];
        for q in 0..LOCAL_POINTS {
            let offset = -half_width + q as f64 * step;
            let f = log_density_at(terms, mode + offset);
            let weight = (f - f_mode).exp() * step;
            if weight > 0.0 {
                accumulate_powers(&mut acc, offset, weight);
            }
        }
        let h = self.spacing();
        for (g, &f) in log_density.iter().enumerate() {
            let offset = wrap_angle(g as f64 * h - mode);
            if offset.abs() <= half_width {
                continue;
            }
            let weight = (f - f_mode).exp() * h;
            if weight > 1e-18 * acc[0].re {
                accumulate_powers(&mut acc, offset, weight);
            }
        }
        let total = acc[0].re;
        // Rotate back from offsets to absolute angles.
        let unit = Complex64::from_polar(1.0, mode);
        let mut rot = Complex64::new(1.0, 0.0);
        for m in acc.iter_mut() {
            *m = *m * rot / total;
            rot *= unit;
        }
        acc
    }
}

/// `acc[n] += weight * e^{j n offset}` for every `n`.
fn accumulate_powers(acc: &mut [Complex64], offset: f64, weight: f64) {
    let unit = Complex64::from_polar(1.0, offset);
    let mut z = Complex64::new(weight, 0.0);
    for a in acc.iter_mut() {
        *a += z;
        z *= unit;
    }
}

fn log_density_at(terms: &[(usize, Complex64)], theta: f64) -> f64 {
    terms
        .iter()
        .map(|&(n, c)| (c * Complex64::from_polar(1.0, n as f64 * theta)).re)
        .sum()
}

/// Newton iterations on the log-density starting from the best grid point.
/// Returns `(mode, log-density at mode, -second derivative)`.
fn refine_mode(terms: &[(usize, Complex64)], start: f64, f_start: f64, h: f64) -> (f64, f64, f64) {
    let derivs = |theta: f64| {
        let mut d = [0.0; 3];
        for &(n, c) in terms {
            let v = c * Complex64::from_polar(1.0, n as f64 * theta);
            let nf = n as f64;
            d[0] += v.re;
            d[1] -= nf * v.im;
            d[2] -= nf * nf * v.re;
        }
        d
    };
    let mut best = (start, f_start.max(derivs(start)[0]));
    let mut theta = start;
    let mut d = derivs(theta);
    for _ in 0..30 {
        if !(d[2] < 0.0) {
            break;
        }
        let step = (-d[1] / d[2]).clamp(-h, h);
        let next = theta + step;
        let dn = derivs(next);
        if dn[0] < d[0] - 1e-12 * d[0].abs().max(1.0) {
            break;
        }
        theta = next;
        d = dn;
        if d[0] >= best.1 {
            best = (theta, d[0]);
        }
        if step.abs() < 1e-15 * (1.0 + theta.abs()) {
            break;
        }
    }
    let curvature = -derivs(best.0)[2];
    (wrap_angle(best.0), best.1, curvature)
}

fn summarize(mut moments: Vec<Complex64>) -> FreqPosterior {
    moments[0] = Complex64::new(1.0, 0.0);
    for m in moments.iter_mut().skip(1) {
        let r = m.norm();
        if r > 1.0 {
            *m /= r;
        }
    }
    let first = moments.get(1).copied().unwrap_or_default();
    FreqPosterior {
        mu: first.arg(),
        kappa: invert_bessel_ratio(first.norm()),
        moments,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_sizes() {
        assert_eq!(grid_size(100), 4096);
        assert_eq!(grid_size(64), 2048);
        assert_eq!(grid_size(1), 32);
    }

    #[test]
    fn zero_coefficients_give_uniform() {
        let grid = PosteriorGrid::new(16);
        let post = grid.fit(&vec![Complex64::new(0.0, 0.0); 16]);
        assert!(post.is_uniform());
        assert_eq!(post.moments[0], Complex64::new(1.0, 0.0));
        assert!(post.moments[1..].iter().all(|m| m.norm() == 0.0));
    }

    #[test]
    fn von_mises_input_recovers_parameters() {
        let grid = PosteriorGrid::new(32);
        for &(mu, kappa) in &[(0.4, 0.1), (-2.0, 3.0), (3.0, 80.0), (1.0, 500.0)] {
            let mut coeffs = vec![Complex64::new(0.0, 0.0); 32];
            coeffs[1] = Complex64::from_polar(kappa, mu);
            let post = grid.fit(&coeffs);
            assert!((post.kappa - kappa).abs() / kappa < 1e-6, "{} vs {kappa}", post.kappa);
            assert!(wrap_angle(post.mu - mu).abs() < 1e-8);
            let exact = FreqPosterior::von_mises(mu, kappa, 32);
            for n in 0..=16 {
                assert!((post.moments[n] - exact.moments[n]).norm() < 1e-9);
            }
        }
    }

    /// A very sharp posterior goes through the local window; its moments must
    /// still match the von Mises closed form.
    #[test]
    fn sharp_posterior_uses_local_window() {
        let grid = PosteriorGrid::new(16);
        let (mu, kappa) = (0.123_456, 2.0e6);
        let mut coeffs = vec![Complex64::new(0.0, 0.0); 16];
        coeffs[1] = Complex64::from_polar(kappa, mu);
        let post = grid.fit(&coeffs);
        assert!((post.mu - mu).abs() < 1e-10);
        assert!((post.kappa - kappa).abs() / kappa < 1e-4);
        let exact = FreqPosterior::von_mises(mu, kappa, 16);
        for n in 0..16 {
            assert!((post.moments[n] - exact.moments[n]).norm() < 1e-10);
        }
    }

    #[test]
    fn moments_are_bounded() {
        let grid = PosteriorGrid::new(24);
        let coeffs: Vec<Complex64> = (0..24)
            .map(|n| Complex64::new((n as f64 * 0.7).sin() * 40.0, (n as f64).cos() * 25.0))
            .collect();
        let post = grid.fit(&coeffs);
        assert!(post.moments.iter().all(|m| m.norm() <= 1.0));
    }
}
