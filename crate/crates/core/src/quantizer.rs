//! Scalar quantizers, entrywise quantization of complex data and the
//! componentwise MMSE denoiser that turns cell indices (or analog samples)
//! into Gaussian posterior moments.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{QlseError, Result};
use crate::model::ComplexMatrix;
use crate::special::interval_moments;

/// Thresholds `t_1 < ... < t_{D-1}` of a `D = 2^B` cell quantizer.
/// The outer cells are unbounded. Ties go to the upper cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizerSpec {
    thresholds: Vec<f64>,
    bits: u32,
}

impl QuantizerSpec {
    pub fn new(bits: u32, thresholds: Vec<f64>) -> Result<Self> {
        if bits == 0 || bits > 24 {
            return Err(QlseError::InvalidConfig(format!("unsupported bit depth {bits}")));
        }
        let expected = (1usize << bits) - 1;
        if thresholds.len() != expected {
            return Err(QlseError::InvalidConfig(format!(
                "{bits}-bit quantizer needs {expected} thresholds, got {}",
                thresholds.len()
            )));
        }
        if thresholds.iter().any(|t| !t.is_finite()) {
            return Err(QlseError::InvalidConfig("thresholds must be finite".into()));
        }
        if thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(QlseError::InvalidConfig(
                "thresholds must be strictly increasing".into(),
            ));
        }
        Ok(Self { thresholds, bits })
    }

    /// Uniform mid-rise quantizer: `2^bits` equal cells covering
    /// `[-half_range, half_range]`, outer cells saturating to infinity.
    /// One bit is the sign quantizer regardless of `half_range`.
    pub fn uniform(bits: u32, half_range: f64) -> Result<Self> {
        if bits == 0 {
            return Err(QlseError::InvalidConfig("bit depth must be at least 1".into()));
        }
        if bits == 1 {
            return Self::new(1, vec![0.0]);
        }
        if !(half_range > 0.0) || !half_range.is_finite() {
            return Err(QlseError::InvalidConfig(format!(
                "half range must be positive, got {half_range}"
            )));
        }
        let cells = 1usize << bits.min(24);
        let width = 2.0 * half_range / cells as f64;
        let thresholds = (1..cells)
            .map(|i| -half_range + i as f64 * width)
            .collect();
        Self::new(bits, thresholds)
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn cells(&self) -> usize {
        self.thresholds.len() + 1
    }

    /// Index `d` of the cell `[t_d, t_{d+1})` containing `a`.
    pub fn quantize(&self, a: f64) -> usize {
        self.thresholds.partition_point(|&t| t <= a)
    }

    /// `(t_d, t_{d+1})` with infinite outer edges.
    pub fn cell_bounds(&self, d: usize) -> (f64, f64) {
        let lo = if d == 0 { f64::NEG_INFINITY } else { self.thresholds[d - 1] };
        let hi = self.thresholds.get(d).copied().unwrap_or(f64::INFINITY);
        (lo, hi)
    }

    /// A finite point inside cell `d`.
    pub fn representative(&self, d: usize) -> f64 {
        let (lo, hi) = self.cell_bounds(d);
        match (lo.is_finite(), hi.is_finite()) {
            (true, true) => 0.5 * (lo + hi),
            (false, true) => hi - 1.0,
            (true, false) => lo + 1.0,
            (false, false) => 0.0,
        }
    }
}

/// Cell indices of the real and imaginary parts, `M x L` each.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedData {
    pub re_idx: DMatrix<usize>,
    pub im_idx: DMatrix<usize>,
    pub spec: QuantizerSpec,
}

impl QuantizedData {
    pub fn new(re_idx: DMatrix<usize>, im_idx: DMatrix<usize>, spec: QuantizerSpec) -> Result<Self> {
        if re_idx.shape() != im_idx.shape() {
            return Err(QlseError::Dimension(format!(
                "real indices {:?} vs imaginary indices {:?}",
                re_idx.shape(),
                im_idx.shape()
            )));
        }
        let cells = spec.cells();
        if let Some(bad) = re_idx.iter().chain(im_idx.iter()).find(|&&d| d >= cells) {
            return Err(QlseError::InvalidConfig(format!(
                "cell index {bad} out of range for a {}-bit quantizer",
                spec.bits()
            )));
        }
        Ok(Self { re_idx, im_idx, spec })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.re_idx.shape()
    }
}

pub fn quantize_matrix(x: &ComplexMatrix, spec: &QuantizerSpec) -> QuantizedData {
    QuantizedData {
        re_idx: x.map(|z| spec.quantize(z.re)),
        im_idx: x.map(|z| spec.quantize(z.im)),
        spec: spec.clone(),
    }
}

/// What module B observes: raw analog samples or quantizer cells.
#[derive(Debug, Clone, PartialEq)]
pub enum Measurements {
    Analog(ComplexMatrix),
    Quantized(QuantizedData),
}

impl Measurements {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            Measurements::Analog(y) => y.shape(),
            Measurements::Quantized(q) => q.shape(),
        }
    }
}

/// Posterior mean and variance of a real `x ~ N(m0, v0)` observed through
/// `x + n`, `n ~ N(0, noise_var)`, falling in `[lo, hi)`.
pub fn mmse_denoise_real(lo: f64, hi: f64, m0: f64, v0: f64, noise_var: f64) -> (f64, f64) {
    let (shift, reduction) = posterior_offsets(lo, hi, m0, v0, noise_var);
    (m0 + shift, v0 - reduction)
}

/// Posterior as `(mean - m0, v0 - var)`. Keeping the offsets separate lets
/// the extrinsic message be formed without cancellation when the cell barely
/// constrains the prior.
fn posterior_offsets(lo: f64, hi: f64, m0: f64, v0: f64, noise_var: f64) -> (f64, f64) {
    debug_assert!(v0 > 0.0 && noise_var > 0.0);
    let s2 = v0 + noise_var;
    let s = s2.sqrt();
    let cell = interval_moments((lo - m0) / s, (hi - m0) / s);
    // 1 - Var[y | cell] / s^2, which lies in [0, 1].
    let shrink = (cell.mean * cell.mean - cell.edge).clamp(0.0, 1.0);
    let reduction = (v0 * v0 / s2 * shrink).min(v0 * v0 / s2);
    (v0 / s * cell.mean, reduction)
}

/// Gaussian combination of the prior with an analog sample `y`.
pub fn gaussian_combine(y: f64, m0: f64, v0: f64, noise_var: f64) -> (f64, f64) {
    let precision = 1.0 / v0 + 1.0 / noise_var;
    let var = 1.0 / precision;
    (var * (m0 / v0 + y / noise_var), var)
}

/// Componentwise posterior of `z` under the circular prior `CN(mean, var)`
/// and complex noise variance `sigma2`.
/// Returns complex posterior means and the summed real/imaginary variances.
pub fn mmse_denoise_complex(
    data: &Measurements,
    prior_mean: &ComplexMatrix,
    prior_var: &DMatrix<f64>,
    sigma2: f64,
) -> Result<(ComplexMatrix, DMatrix<f64>)> {
    let shape = data.shape();
    if prior_mean.shape() != shape || prior_var.shape() != shape {
        return Err(QlseError::Dimension(format!(
            "data {:?}, prior mean {:?}, prior variance {:?}",
            shape,
            prior_mean.shape(),
            prior_var.shape()
        )));
    }
    if !(sigma2 > 0.0) {
        return Err(QlseError::InvalidConfig(format!("noise variance {sigma2} must be positive")));
    }
    let half_noise = 0.5 * sigma2;
    let mut mean = ComplexMatrix::zeros(shape.0, shape.1);
    let mut var = DMatrix::<f64>::zeros(shape.0, shape.1);
    for j in 0..shape.1 {
        for i in 0..shape.0 {
            let m0 = prior_mean[(i, j)];
            let half_v = 0.5 * prior_var[(i, j)];
            let ((re, vre), (im, vim)) = match data {
                Measurements::Analog(y) => {
                    let y = y[(i, j)];
                    (
                        gaussian_combine(y.re, m0.re, half_v, half_noise),
                        gaussian_combine(y.im, m0.im, half_v, half_noise),
                    )
                }
                Measurements::Quantized(q) => {
                    let (lo_r, hi_r) = q.spec.cell_bounds(q.re_idx[(i, j)]);
                    let (lo_i, hi_i) = q.spec.cell_bounds(q.im_idx[(i, j)]);
                    (
                        mmse_denoise_real(lo_r, hi_r, m0.re, half_v, half_noise),
                        mmse_denoise_real(lo_i, hi_i, m0.im, half_v, half_noise),
                    )
                }
            };
            mean[(i, j)] = Complex64::new(re, im);
            var[(i, j)] = vre + vim;
        }
    }
    Ok((mean, var))
}

/// Extrinsic message of the denoiser: posterior divided by the prior
/// `CN(prior_mean, prior_var)`, entrywise. Variances are floored at `floor`;
/// entries that would exceed `cap` become uninformative messages of variance
/// `cap` centred on the posterior mean.
///
/// Analog data returns `(y, sigma2)` exactly. For quantized data the
/// precision gain is formed from the variance reduction directly, so entries
/// the cell hardly constrains get a tiny precision instead of rounding noise.
pub fn denoise_extrinsic(
    data: &Measurements,
    prior_mean: &ComplexMatrix,
    prior_var: &DMatrix<f64>,
    sigma2: f64,
    floor: f64,
    cap: f64,
) -> Result<(ComplexMatrix, DMatrix<f64>)> {
    let shape = data.shape();
    if prior_mean.shape() != shape || prior_var.shape() != shape {
        return Err(QlseError::Dimension(format!(
            "data {:?}, prior mean {:?}, prior variance {:?}",
            shape,
            prior_mean.shape(),
            prior_var.shape()
        )));
    }
    if !(sigma2 > 0.0) {
        return Err(QlseError::InvalidConfig(format!("noise variance {sigma2} must be positive")));
    }
    let q = match data {
        Measurements::Analog(y) => {
            return Ok((y.clone(), DMatrix::from_element(shape.0, shape.1, sigma2)));
        }
        Measurements::Quantized(q) => q,
    };
    let half_noise = 0.5 * sigma2;
    let mut mean = ComplexMatrix::zeros(shape.0, shape.1);
    let mut var = DMatrix::<f64>::zeros(shape.0, shape.1);
    for j in 0..shape.1 {
        for i in 0..shape.0 {
            let m0 = prior_mean[(i, j)];
            let v0 = prior_var[(i, j)];
            let (lo_r, hi_r) = q.spec.cell_bounds(q.re_idx[(i, j)]);
            let (lo_i, hi_i) = q.spec.cell_bounds(q.im_idx[(i, j)]);
            let (shift_r, red_r) = posterior_offsets(lo_r, hi_r, m0.re, 0.5 * v0, half_noise);
            let (shift_i, red_i) = posterior_offsets(lo_i, hi_i, m0.im, 0.5 * v0, half_noise);
            let reduction = red_r + red_i;
            let post_var = v0 - reduction;
            let shift = Complex64::new(shift_r, shift_i);
            // post_mean / post_var - m0 / v0, and 1 / post_var - 1 / v0.
            let linear = (m0 * reduction + shift * v0) / (v0 * post_var);
            let precision = reduction / (v0 * post_var);
            if precision > 1.0 / cap && precision.is_finite() {
                let ext_var = (1.0 / precision).max(floor);
                mean[(i, j)] = linear * ext_var;
                var[(i, j)] = ext_var;
            } else {
                mean[(i, j)] = m0 + shift;
                var[(i, j)] = cap;
            }
        }
    }
    Ok((mean, var))
}
