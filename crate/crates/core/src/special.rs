//! Scalar special functions: the standard normal density and tails,
//! moments of a Gaussian restricted to an interval, and the Bessel
//! ratios that parameterize von Mises distributions.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Beyond this standardized distance the interval moments switch to the
/// continued-fraction Mills ratio instead of differences of `erfc`.
pub const TAIL_CUTOFF: f64 = 8.0;

pub fn norm_pdf(x: f64) -> f64 {
    if x.is_infinite() {
        0.0
    } else {
        INV_SQRT_2PI * (-0.5 * x * x).exp()
    }
}

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Upper tail `1 - Phi(x)`, accurate for large positive `x`.
pub fn norm_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x * FRAC_1_SQRT_2)
}

/// Mills ratio `(1 - Phi(x)) / phi(x)` for `x >= 0`.
pub fn mills_ratio(x: f64) -> f64 {
    debug_assert!(x >= 0.0);
    if x.is_infinite() {
        return 0.0;
    }
    if x < TAIL_CUTOFF {
        return norm_sf(x) / norm_pdf(x);
    }
    // R(x) = 1/(x + 1/(x + 2/(x + 3/(x + ...)))), evaluated bottom-up.
    let mut tail = x;
    for n in (1..=80).rev() {
        tail = x + n as f64 / tail;
    }
    1.0 / tail
}

/// `x * phi(x)` with the limits at infinity taken as zero.
fn x_pdf(x: f64) -> f64 {
    if x.is_infinite() {
        0.0
    } else {
        x * norm_pdf(x)
    }
}

/// Moments of a standard normal variable restricted to `[alpha, beta)`.
///
/// With `Zc = Phi(beta) - Phi(alpha)`:
/// * `mean = (phi(alpha) - phi(beta)) / Zc`
/// * `edge = (alpha phi(alpha) - beta phi(beta)) / Zc`
///
/// so that the restricted variance is `1 + edge - mean^2`.
/// `pdf_gap = phi(alpha) - phi(beta)` is returned as well; it may underflow
/// to zero in the far tails where the two ratios stay finite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntervalMoments {
    pub mean: f64,
    pub edge: f64,
    pub pdf_gap: f64,
}

impl IntervalMoments {
    pub fn variance(&self) -> f64 {
        1.0 + self.edge - self.mean * self.mean
    }
}

pub fn interval_moments(alpha: f64, beta: f64) -> IntervalMoments {
    debug_assert!(alpha < beta, "empty interval [{alpha}, {beta})");
    if alpha >= 0.0 {
        upper_interval(alpha, beta)
    } else if beta <= 0.0 {
        let mirrored = upper_interval(-beta, -alpha);
        IntervalMoments {
            mean: -mirrored.mean,
            edge: mirrored.edge,
            pdf_gap: -mirrored.pdf_gap,
        }
    } else {
        let zc = 0.5 * (libm::erf(beta * FRAC_1_SQRT_2) - libm::erf(alpha * FRAC_1_SQRT_2));
        let pdf_gap = norm_pdf(alpha) - norm_pdf(beta);
        finish(alpha, beta, zc, pdf_gap)
    }
}

fn upper_interval(alpha: f64, beta: f64) -> IntervalMoments {
    let pdf_gap = norm_pdf(alpha) - norm_pdf(beta);
    if alpha < TAIL_CUTOFF {
        let zc = norm_sf(alpha) - norm_sf(beta);
        return finish(alpha, beta, zc, pdf_gap);
    }
    // Everything divided by phi(alpha), which may itself underflow.
    let ratio = if beta.is_infinite() {
        0.0
    } else {
        (-0.5 * (beta - alpha) * (beta + alpha)).exp()
    };
    let denom = mills_ratio(alpha) - ratio * mills_ratio(beta);
    let beta_term = if beta.is_infinite() { 0.0 } else { ratio * beta };
    if denom > 0.0 {
        IntervalMoments {
            mean: (1.0 - ratio) / denom,
            edge: (alpha - beta_term) / denom,
            pdf_gap,
        }
    } else {
        narrow_cell(alpha, beta, pdf_gap)
    }
}

fn finish(alpha: f64, beta: f64, zc: f64, pdf_gap: f64) -> IntervalMoments {
    if zc > 0.0 && zc.is_finite() {
        IntervalMoments {
            mean: pdf_gap / zc,
            edge: (x_pdf(alpha) - x_pdf(beta)) / zc,
            pdf_gap,
        }
    } else {
        narrow_cell(alpha, beta, pdf_gap)
    }
}

/// Uniform-on-the-cell approximation used only when the cell mass is lost
/// to rounding.
fn narrow_cell(alpha: f64, beta: f64, pdf_gap: f64) -> IntervalMoments {
    let mean = 0.5 * (alpha + beta);
    let var = (beta - alpha).powi(2) / 12.0;
    IntervalMoments {
        mean,
        edge: var + mean * mean - 1.0,
        pdf_gap,
    }
}

/// `I_n(kappa) / I_0(kappa)` for `n = 0..=max_order`.
///
/// Ratios of consecutive orders come from the backward recurrence
/// `I_v / I_{v-1} = 1 / (2v/kappa + I_{v+1} / I_v)`, which is stable.
pub fn bessel_ratios(kappa: f64, max_order: usize) -> Vec<f64> {
    let mut out = vec![0.0; max_order + 1];
    out[0] = 1.0;
    if max_order == 0 {
        return out;
    }
    if kappa <= 0.0 {
        return out;
    }
    if !kappa.is_finite() {
        out.iter_mut().for_each(|r| *r = 1.0);
        return out;
    }
    let start = max_order + 64 + (2.0 * kappa.min(1.0e5)).ceil() as usize;
    let mut consecutive = vec![0.0; max_order + 1];
    // Seed with a sharp bound on I_{v+1}/I_v; starting from zero would need
    // `start` well beyond kappa to converge.
    let top = start as f64 + 1.0;
    let mut r = kappa / (top - 0.5 + ((top + 0.5).powi(2) + kappa * kappa).sqrt());
    for v in (1..=start).rev() {
        r = 1.0 / (2.0 * v as f64 / kappa + r);
        if v <= max_order {
            consecutive[v] = r;
        }
    }
    for n in 1..=max_order {
        out[n] = out[n - 1] * consecutive[n];
    }
    out
}

/// Mean resultant length `A(kappa) = I_1(kappa) / I_0(kappa)`.
pub fn bessel_ratio_1(kappa: f64) -> f64 {
    if kappa <= 0.0 {
        return 0.0;
    }
    if kappa > 2.0e3 {
        let inv = 1.0 / kappa;
        return 1.0 - 0.5 * inv - 0.125 * inv * inv - 0.125 * inv.powi(3) - 25.0 / 128.0 * inv.powi(4);
    }
    bessel_ratios(kappa, 1)[1]
}

/// Largest concentration reported; resultant lengths closer to one than
/// rounding can resolve map here.
pub const KAPPA_MAX: f64 = 1.0e14;

/// Solves `A(kappa) = resultant` for `kappa >= 0`.
pub fn invert_bessel_ratio(resultant: f64) -> f64 {
    if !(resultant > 0.0) {
        return 0.0;
    }
    if resultant >= 1.0 {
        return KAPPA_MAX;
    }
    let r = resultant;
    // Rough inverse as a starting point.
    let mut kappa = if r < 0.53 {
        2.0 * r + r.powi(3) + 5.0 * r.powi(5) / 6.0
    } else if r < 0.85 {
        -0.4 + 1.39 * r + 0.43 / (1.0 - r)
    } else {
        1.0 / (r.powi(3) - 4.0 * r * r + 3.0 * r)
    };
    let mut lo: f64 = 0.0;
    let mut hi = KAPPA_MAX;
    for _ in 0..200 {
        let a = bessel_ratio_1(kappa);
        let f = a - r;
        if f.abs() <= 1e-15 {
            break;
        }
        if f > 0.0 {
            hi = hi.min(kappa);
        } else {
            lo = lo.max(kappa);
        }
        let deriv = 1.0 - a / kappa - a * a;
        let mut next = kappa - f / deriv;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = if hi < KAPPA_MAX { 0.5 * (lo + hi) } else { 2.0 * kappa.max(1.0) };
        }
        let step = (next - kappa).abs();
        kappa = next;
        if step <= 1e-10 * kappa.max(1e-300) {
            break;
        }
    }
    kappa.min(KAPPA_MAX)
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut t = (theta + PI).rem_euclid(two_pi) - PI;
    if t >= PI {
        t -= two_pi;
    }
    t
}

/// Wrap-around distance between two angles.
pub fn wrap_distance(a: f64, b: f64) -> f64 {
    wrap_angle(a - b).abs()
}
