//! Fisher information and Cramér–Rao bounds for the frequencies, under
//! quantized and unquantized observation models.
//!
//! Parameters are stacked as `[theta (K); vec(g) (K*L); vec(phi) (K*L)]`,
//! both matrices vectorized column-major, so `g[k][l]` sits at `K + l*K + k`
//! and `phi[k][l]` at `K + K*L + l*K + k`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{QlseError, Result};
use crate::model::{LineSpectralTruth, RowSet};
use crate::quantizer::QuantizerSpec;
use crate::special::interval_moments;

/// Above this condition number the bound is computed by pseudo-inverse.
pub const CONDITION_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct FisherParams {
    pub theta: Vec<f64>,
    /// `K x L` magnitudes.
    pub g: DMatrix<f64>,
    /// `K x L` phases.
    pub phi: DMatrix<f64>,
}

impl FisherParams {
    pub fn new(theta: Vec<f64>, g: DMatrix<f64>, phi: DMatrix<f64>) -> Result<Self> {
        let k = theta.len();
        if g.nrows() != k || phi.nrows() != k || g.ncols() != phi.ncols() {
            return Err(QlseError::Dimension(format!(
                "theta has {k} entries, g is {}x{}, phi is {}x{}",
                g.nrows(),
                g.ncols(),
                phi.nrows(),
                phi.ncols()
            )));
        }
        if g.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(QlseError::Domain("magnitudes must be finite and nonnegative".into()));
        }
        Ok(Self { theta, g, phi })
    }

    /// Polar split of complex weights.
    pub fn from_weights(theta: &[f64], weights: &DMatrix<Complex64>) -> Result<Self> {
        Self::new(theta.to_vec(), weights.map(|w| w.norm()), weights.map(|w| w.arg()))
    }

    pub fn from_truth(truth: &LineSpectralTruth) -> Result<Self> {
        Self::from_weights(&truth.frequencies, &truth.weights)
    }

    pub fn k(&self) -> usize {
        self.theta.len()
    }

    pub fn snapshots(&self) -> usize {
        self.g.ncols()
    }

    /// Length `(2L + 1) K` of the stacked parameter vector.
    pub fn dim(&self) -> usize {
        (2 * self.snapshots() + 1) * self.k()
    }

    pub fn g_index(&self, k: usize, l: usize) -> usize {
        self.k() + l * self.k() + k
    }

    pub fn phi_index(&self, k: usize, l: usize) -> usize {
        self.k() * (1 + self.snapshots()) + l * self.k() + k
    }

    /// Stacked parameter vector.
    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.dim());
        for k in 0..self.k() {
            v[k] = self.theta[k];
            for l in 0..self.snapshots() {
                v[self.g_index(k, l)] = self.g[(k, l)];
                v[self.phi_index(k, l)] = self.phi[(k, l)];
            }
        }
        v
    }

    /// Inverse of [`FisherParams::to_vector`] for the given shape. Magnitudes
    /// are not checked, so perturbed vectors are accepted.
    pub fn from_vector(v: &DVector<f64>, k: usize, l: usize) -> Self {
        let mut p = Self { theta: v.rows(0, k).iter().copied().collect(), g: DMatrix::zeros(k, l), phi: DMatrix::zeros(k, l) };
        for kk in 0..k {
            for ll in 0..l {
                p.g[(kk, ll)] = v[p.g_index(kk, ll)];
                p.phi[(kk, ll)] = v[p.phi_index(kk, ll)];
            }
        }
        p
    }
}

/// Noise-free entry at row offset `m` and snapshot `l`.
pub fn z_entry(params: &FisherParams, m: usize, l: usize) -> Complex64 {
    (0..params.k())
        .map(|k| Complex64::from_polar(params.g[(k, l)], m as f64 * params.theta[k] + params.phi[(k, l)]))
        .sum()
}

/// Gradients of the real and imaginary parts of [`z_entry`] with respect to
/// the stacked parameters.
pub fn partials(params: &FisherParams, m: usize, l: usize) -> (DVector<f64>, DVector<f64>) {
    let mut re = DVector::zeros(params.dim());
    let mut im = DVector::zeros(params.dim());
    let mf = m as f64;
    for k in 0..params.k() {
        let g = params.g[(k, l)];
        let (s, c) = (mf * params.theta[k] + params.phi[(k, l)]).sin_cos();
        re[k] = -mf * g * s;
        im[k] = mf * g * c;
        let gi = params.g_index(k, l);
        re[gi] = c;
        im[gi] = s;
        let pi = params.phi_index(k, l);
        re[pi] = -g * s;
        im[pi] = g * c;
    }
    (re, im)
}

/// Fisher weight of one real quantized measurement with mean `x` and
/// per-part noise variance `sigma2 / 2`.
fn real_weight(x: f64, sigma2: f64, spec: &QuantizerSpec) -> f64 {
    let scale = (0.5 * sigma2).sqrt();
    let total: f64 = (0..spec.cells())
        .map(|d| {
            let (lo, hi) = spec.cell_bounds(d);
            let im = interval_moments((lo - x) / scale, (hi - x) / scale);
            // pdf_gap^2 / Zc written without Zc, which can underflow.
            im.mean * im.pdf_gap
        })
        .sum();
    2.0 / sigma2 * total.clamp(0.0, 1.0)
}

/// Fisher weights of the real and imaginary parts of a quantized entry with
/// noise-free value `z` and complex noise variance `sigma2`.
pub fn lambda_chi(z: Complex64, sigma2: f64, spec: &QuantizerSpec) -> (f64, f64) {
    (real_weight(z.re, sigma2, spec), real_weight(z.im, sigma2, spec))
}

fn accumulate(fim: &mut DMatrix<f64>, grad: &DVector<f64>, weight: f64, support: &[usize]) {
    for &a in support {
        let ga = grad[a] * weight;
        for &b in support {
            fim[(a, b)] += ga * grad[b];
        }
    }
}

fn fim_with<F>(params: &FisherParams, rows: &RowSet, weights: F) -> DMatrix<f64>
where
    F: Fn(Complex64) -> (f64, f64),
{
    let k = params.k();
    let mut fim = DMatrix::zeros(params.dim(), params.dim());
    for l in 0..params.snapshots() {
        let support: Vec<usize> = (0..k)
            .chain((0..k).map(|kk| params.g_index(kk, l)))
            .chain((0..k).map(|kk| params.phi_index(kk, l)))
            .collect();
        for &m in rows.indices() {
            let (lambda, chi) = weights(z_entry(params, m, l));
            let (re, im) = partials(params, m, l);
            accumulate(&mut fim, &re, lambda, &support);
            accumulate(&mut fim, &im, chi, &support);
        }
    }
    fim
}

pub fn fim_quantized(params: &FisherParams, rows: &RowSet, sigma2: f64, spec: &QuantizerSpec) -> DMatrix<f64> {
    fim_with(params, rows, |z| lambda_chi(z, sigma2, spec))
}

pub fn fim_unquantized(params: &FisherParams, rows: &RowSet, sigma2: f64) -> DMatrix<f64> {
    let w = 2.0 / sigma2;
    fim_with(params, rows, |_| (w, w))
}

/// Frequency block of the inverse Fisher information.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyCrb {
    /// `K x K` top-left block of the full inverse.
    pub bound: DMatrix<f64>,
    pub condition: f64,
    /// Set when the pseudo-inverse path was taken.
    pub ill_conditioned: bool,
}

impl FrequencyCrb {
    pub fn trace(&self) -> f64 {
        self.bound.trace()
    }

    /// `10 log10` of the trace, on the same scale as the frequency MSE in dB.
    pub fn trace_db(&self) -> f64 {
        10.0 * self.trace().log10()
    }
}

pub fn crb_frequencies(fim: &DMatrix<f64>, k: usize) -> Result<FrequencyCrb> {
    let n = fim.nrows();
    if fim.ncols() != n || k > n {
        return Err(QlseError::Dimension(format!("FIM is {}x{}, frequency block {k}", n, fim.ncols())));
    }
    if fim.iter().any(|x| !x.is_finite()) {
        return Err(QlseError::Domain("FIM has non-finite entries".into()));
    }
    let sym = (fim + fim.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    let largest = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let smallest = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let condition = if smallest > 0.0 { largest / smallest } else { f64::INFINITY };
    if largest == 0.0 || smallest <= largest * f64::EPSILON * n as f64 {
        return Err(QlseError::SingularFim { condition });
    }
    if condition > CONDITION_LIMIT {
        let inv_vals = eig.eigenvalues.map(|v| if v > largest * f64::EPSILON * n as f64 { 1.0 / v } else { 0.0 });
        let q = &eig.eigenvectors;
        let block = DMatrix::from_fn(k, k, |a, b| (0..n).map(|i| q[(a, i)] * inv_vals[i] * q[(b, i)]).sum());
        return Ok(FrequencyCrb { bound: block, condition, ill_conditioned: true });
    }
    let inv = match sym.clone().cholesky() {
        Some(ch) => ch.inverse(),
        None => sym.try_inverse().ok_or(QlseError::SingularFim { condition })?,
    };
    Ok(FrequencyCrb { bound: inv.view((0, 0), (k, k)).into_owned(), condition, ill_conditioned: false })
}

/// Frequency bound for the given model; `None` selects unquantized data.
pub fn frequency_crb(params: &FisherParams, rows: &RowSet, sigma2: f64, spec: Option<&QuantizerSpec>) -> Result<FrequencyCrb> {
    let fim = match spec {
        Some(s) => fim_quantized(params, rows, sigma2, s),
        None => fim_unquantized(params, rows, sigma2),
    };
    crb_frequencies(&fim, params.k())
}
