//! Line spectral signal model: observed row sets, steering vectors,
//! synthetic ground truth and the array-angle mapping.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{QlseError, Result};
use crate::special::wrap_distance;

/// Complex matrix in column-major storage. Columns are snapshots.
pub type ComplexMatrix = DMatrix<Complex64>;

/// Resampling budget for the minimum-separation frequency draw.
pub const FREQUENCY_DRAW_BUDGET: usize = 10_000;

/// The ordered subset of time indices that are actually measured.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowSet {
    indices: Vec<usize>,
    n_full: usize,
}

impl RowSet {
    pub fn new(indices: Vec<usize>, n_full: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(QlseError::InvalidConfig("row set is empty".into()));
        }
        if indices.len() > n_full {
            return Err(QlseError::InvalidConfig(format!(
                "{} rows requested from a length-{n_full} signal",
                indices.len()
            )));
        }
        for pair in indices.windows(2) {
            if pair[0] >= pair[1] {
                return Err(QlseError::InvalidConfig(
                    "row indices must be strictly increasing".into(),
                ));
            }
        }
        if let Some(&last) = indices.last() {
            if last >= n_full {
                return Err(QlseError::InvalidConfig(format!(
                    "row index {last} outside 0..{n_full}"
                )));
            }
        }
        Ok(Self { indices, n_full })
    }

    /// Rows `0..m`.
    pub fn prefix(m: usize, n_full: usize) -> Result<Self> {
        Self::new((0..m).collect(), n_full)
    }

    /// `m` rows drawn uniformly without replacement, sorted.
    pub fn random<R: Rng + ?Sized>(m: usize, n_full: usize, rng: &mut R) -> Result<Self> {
        if m == 0 || m > n_full {
            return Err(QlseError::InvalidConfig(format!(
                "cannot draw {m} rows from {n_full}"
            )));
        }
        let mut idx = sample(rng, n_full, m).into_vec();
        idx.sort_unstable();
        Self::new(idx, n_full)
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn n_full(&self) -> usize {
        self.n_full
    }
}

/// `[exp(j m_1 theta), ..., exp(j m_M theta)]`.
pub fn steering(theta: f64, rows: &RowSet) -> DVector<Complex64> {
    DVector::from_iterator(
        rows.len(),
        rows.indices()
            .iter()
            .map(|&m| Complex64::from_polar(1.0, ((m as i64) as f64) * theta)),
    )
}

/// Steering matrix with one column per frequency.
pub fn steering_matrix(thetas: &[f64], rows: &RowSet) -> ComplexMatrix {
    let mut a = ComplexMatrix::zeros(rows.len(), thetas.len());
    for (k, &theta) in thetas.iter().enumerate() {
        a.set_column(k, &steering(theta, rows));
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RowPolicy {
    Prefix,
    #[default]
    Random,
}

/// Ground truth of one synthetic instance.
#[derive(Debug, Clone, PartialEq)]
pub struct LineSpectralTruth {
    /// Frequencies in `[-pi, pi)`.
    pub frequencies: Vec<f64>,
    /// `K x L` weights, one row per component.
    pub weights: ComplexMatrix,
    pub rows: RowSet,
    /// Complex noise variance per entry.
    pub noise_var: f64,
}

impl LineSpectralTruth {
    pub fn k(&self) -> usize {
        self.frequencies.len()
    }

    pub fn snapshots(&self) -> usize {
        self.weights.ncols()
    }

    /// Noiseless signal over the observed rows, `A_M(theta) W`.
    pub fn observed_signal(&self) -> ComplexMatrix {
        steering_matrix(&self.frequencies, &self.rows) * &self.weights
    }

    /// Noiseless signal over all `N` rows.
    pub fn full_signal(&self) -> ComplexMatrix {
        let full = RowSet::prefix(self.rows.n_full(), self.rows.n_full())
            .expect("full row set is always valid");
        steering_matrix(&self.frequencies, &full) * &self.weights
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthConfig {
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub l: usize,
    pub snr_db: f64,
    #[serde(default)]
    pub row_policy: RowPolicy,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub truth: LineSpectralTruth,
    /// Noiseless `Z_M`.
    pub clean: ComplexMatrix,
    /// `Z_M + N`, before any quantization.
    pub noisy: ComplexMatrix,
}

/// Draws a synthetic instance from the seed in `cfg`.
pub fn generate_truth(cfg: &TruthConfig) -> Result<SyntheticData> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    generate_truth_with_rng(cfg, None, &mut rng)
}

/// Like [`generate_truth`], but drawing from a caller-supplied generator and
/// optionally pinning the frequencies (the array-angle scenario).
pub fn generate_truth_with_rng<R: Rng + ?Sized>(
    cfg: &TruthConfig,
    fixed_frequencies: Option<&[f64]>,
    rng: &mut R,
) -> Result<SyntheticData> {
    if cfg.k == 0 && fixed_frequencies.is_none() {
        return Err(QlseError::InvalidConfig("K must be at least 1".into()));
    }
    if cfg.l == 0 {
        return Err(QlseError::InvalidConfig("L must be at least 1".into()));
    }
    if cfg.m == 0 || cfg.m > cfg.n {
        return Err(QlseError::InvalidConfig(format!(
            "need 1 <= M <= N, got M={} N={}",
            cfg.m, cfg.n
        )));
    }
    if !cfg.snr_db.is_finite() {
        return Err(QlseError::InvalidConfig("SNR must be finite".into()));
    }
    let rows = if cfg.m == cfg.n || matches!(cfg.row_policy, RowPolicy::Prefix) {
        RowSet::prefix(cfg.m, cfg.n)?
    } else {
        RowSet::random(cfg.m, cfg.n, rng)?
    };
    let frequencies = match fixed_frequencies {
        Some(f) => f.to_vec(),
        None => draw_separated_frequencies(cfg.k, cfg.n, rng)?,
    };
    let k = frequencies.len();

    let magnitude = Normal::new(1.0, 0.2).expect("valid normal parameters");
    let weights = ComplexMatrix::from_fn(k, cfg.l, |_, _| {
        let g: f64 = magnitude.sample(rng);
        let phase = rng.random_range(-PI..PI);
        Complex64::from_polar(g, phase)
    });

    let truth_rows = rows.clone();
    let clean = steering_matrix(&frequencies, &rows) * &weights;
    let unit_noise = ComplexMatrix::from_fn(cfg.m, cfg.l, |_, _| {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
    });
    let signal_norm = clean.norm();
    let noise_norm = unit_noise.norm();
    if signal_norm == 0.0 || noise_norm == 0.0 {
        return Err(QlseError::InvalidConfig("degenerate signal or noise draw".into()));
    }
    let sigma = signal_norm / (noise_norm * 10f64.powf(cfg.snr_db / 20.0));
    let noisy = &clean + unit_noise * Complex64::new(sigma, 0.0);

    Ok(SyntheticData {
        truth: LineSpectralTruth {
            frequencies,
            weights,
            rows: truth_rows,
            noise_var: sigma * sigma,
        },
        clean,
        noisy,
    })
}

/// Uniform draws on `[-pi, pi)` with whole-set rejection until every
/// pairwise wrap-around distance exceeds `2 pi / n`.
pub fn draw_separated_frequencies<R: Rng + ?Sized>(
    k: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let min_sep = 2.0 * PI / n as f64;
    for _ in 0..FREQUENCY_DRAW_BUDGET {
        let freqs: Vec<f64> = (0..k).map(|_| rng.random_range(-PI..PI)).collect();
        if min_wrap_separation(&freqs) > min_sep {
            return Ok(freqs);
        }
    }
    Err(QlseError::InvalidConfig(format!(
        "could not place {k} frequencies separated by 2pi/{n} within {FREQUENCY_DRAW_BUDGET} draws"
    )))
}

/// Smallest pairwise wrap-around distance (infinite for fewer than two).
pub fn min_wrap_separation(freqs: &[f64]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..freqs.len() {
        for j in i + 1..freqs.len() {
            best = best.min(wrap_distance(freqs[i], freqs[j]));
        }
    }
    best
}

/// Half-wavelength uniform linear array: `theta = pi sin(angle)`.
pub fn doa_to_freq(angle_deg: f64) -> Result<f64> {
    if !(angle_deg.abs() < 90.0) {
        return Err(QlseError::Domain(format!(
            "arrival angle {angle_deg} deg outside (-90, 90)"
        )));
    }
    Ok(PI * angle_deg.to_radians().sin())
}

pub fn freq_to_doa(theta: f64) -> Result<f64> {
    if !(theta.abs() <= PI) {
        return Err(QlseError::Domain(format!(
            "spatial frequency {theta} outside [-pi, pi]"
        )));
    }
    Ok((theta / PI).asin().to_degrees())
}
