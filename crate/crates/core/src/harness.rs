//! Monte-Carlo experiments: seeded synthetic trials, estimation, metrics and
//! Cramér–Rao overlays, aggregated per (SNR, bit depth) cell.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crb::{frequency_crb, FisherParams};
use crate::ep::{run_mvalse_ep, EpOptions, EstimateResult};
use crate::error::{QlseError, Result};
use crate::metrics::{dnmse_db, dnmse_rows_db, doa_mse_db, freq_mse_db, match_frequencies, nmse_db, order_correct};
use crate::model::{doa_to_freq, generate_truth_with_rng, RowPolicy, SyntheticData, TruthConfig};
use crate::quantizer::{quantize_matrix, Measurements, QuantizerSpec};

/// Reconstruction error (dB) above which a trial with the right order still
/// counts as a miss.
pub const ORDER_ERROR_LIMIT_DB: f64 = -10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "BitRepr", into = "BitRepr")]
pub enum BitDepth {
    Analog,
    Bits(u32),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum BitRepr {
    Bits(u32),
    Name(String),
}

impl TryFrom<BitRepr> for BitDepth {
    type Error = String;
    fn try_from(r: BitRepr) -> std::result::Result<Self, String> {
        match r {
            BitRepr::Bits(b) => Ok(BitDepth::Bits(b)),
            BitRepr::Name(s) => s.parse(),
        }
    }
}

impl From<BitDepth> for BitRepr {
    fn from(b: BitDepth) -> Self {
        match b {
            BitDepth::Analog => BitRepr::Name("analog".into()),
            BitDepth::Bits(b) => BitRepr::Bits(b),
        }
    }
}

impl FromStr for BitDepth {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("analog") {
            return Ok(BitDepth::Analog);
        }
        t.parse::<u32>()
            .map(BitDepth::Bits)
            .map_err(|_| format!("bit depth must be a positive integer or \"analog\", got {s:?}"))
    }
}

impl fmt::Display for BitDepth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BitDepth::Analog => f.write_str("analog"),
            BitDepth::Bits(b) => write!(f, "{b}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub l: usize,
    pub snr_db: Vec<f64>,
    pub bits: Vec<BitDepth>,
    pub trials: usize,
    pub seed: u64,
    pub row_policy: RowPolicy,
    /// Quantizer half range; defaults to three standard deviations of the
    /// real part of a `K`-component signal with unit-scale weights.
    pub half_range: Option<f64>,
    /// Initial A-side extrinsic variance; defaults to the design signal
    /// power `K` instead of the estimator's own default.
    pub initial_ext_var: Option<f64>,
    /// Fixed arrival angles in degrees; when set the frequencies are pinned.
    pub doa_angles: Option<Vec<f64>>,
    /// Debias with one scale per row instead of a single global scale.
    pub per_row_dnmse: bool,
    pub estimator: EpOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n: 100,
            m: 80,
            k: 3,
            l: 4,
            snr_db: vec![10.0],
            bits: vec![BitDepth::Bits(3)],
            trials: 50,
            seed: 0,
            row_policy: RowPolicy::Random,
            half_range: None,
            initial_ext_var: None,
            doa_angles: None,
            per_row_dnmse: false,
            estimator: EpOptions::default(),
        }
    }
}

impl ExperimentConfig {
    /// Every problem with the configuration, joined into one error.
    pub fn validate(&self) -> Result<()> {
        let mut problems: Vec<String> = Vec::new();
        if self.n == 0 {
            problems.push("n must be positive".into());
        }
        if self.m == 0 || self.m > self.n {
            problems.push(format!("m must lie in 1..=n, got m={} n={}", self.m, self.n));
        }
        if self.k == 0 {
            problems.push("k must be positive".into());
        }
        if self.l == 0 {
            problems.push("l must be positive".into());
        }
        if self.trials == 0 {
            problems.push("trials must be at least 1".into());
        }
        if self.snr_db.is_empty() {
            problems.push("snr_db must list at least one value".into());
        }
        if self.snr_db.iter().any(|s| !s.is_finite()) {
            problems.push("snr_db values must be finite".into());
        }
        if self.bits.is_empty() {
            problems.push("bits must list at least one depth".into());
        }
        for b in &self.bits {
            if let BitDepth::Bits(v) = b {
                if *v == 0 || *v > 16 {
                    problems.push(format!("bit depth {v} outside 1..=16"));
                }
            }
        }
        if let Some(h) = self.half_range {
            if !(h > 0.0 && h.is_finite()) {
                problems.push("half_range must be positive".into());
            }
        }
        if let Some(v) = self.initial_ext_var {
            if !(v > 0.0 && v.is_finite()) {
                problems.push("initial_ext_var must be positive".into());
            }
        }
        if let Some(angles) = &self.doa_angles {
            if angles.len() != self.k {
                problems.push(format!("{} doa_angles given for k={}", angles.len(), self.k));
            }
            if angles.iter().any(|a| !(a.abs() < 90.0)) {
                problems.push("doa_angles must lie strictly inside (-90, 90) degrees".into());
            }
        }
        if let Err(QlseError::InvalidConfig(msg)) = self.estimator.validate() {
            problems.push(msg);
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(QlseError::InvalidConfig(problems.join("; ")))
        }
    }

    pub fn quantizer(&self, bits: BitDepth) -> Result<Option<QuantizerSpec>> {
        match bits {
            BitDepth::Analog => Ok(None),
            BitDepth::Bits(b) => {
                let half = self.half_range.unwrap_or_else(|| 3.0 * (self.k as f64 / 2.0).sqrt());
                QuantizerSpec::uniform(b, half).map(Some)
            }
        }
    }

    pub fn estimator_options(&self) -> EpOptions {
        EpOptions {
            initial_ext_var: self.initial_ext_var.unwrap_or(self.k as f64),
            ..self.estimator
        }
    }

    fn fixed_frequencies(&self) -> Result<Option<Vec<f64>>> {
        self.doa_angles
            .as_ref()
            .map(|a| a.iter().map(|&d| doa_to_freq(d)).collect::<Result<Vec<_>>>())
            .transpose()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub snr_db: f64,
    pub bits: BitDepth,
    pub k_hat: Option<usize>,
    pub nmse_db: Option<f64>,
    pub dnmse_db: Option<f64>,
    /// Present exactly when `order_correct`.
    pub freq_mse_db: Option<f64>,
    pub doa_mse_db: Option<f64>,
    pub order_correct: bool,
    /// Mean posterior concentration of the components matched to the truth,
    /// when the order is right.
    pub mean_kappa: Option<f64>,
    pub crb_trace_db: Option<f64>,
    pub outer_iters: Option<usize>,
    pub converged: Option<bool>,
    pub runtime_ms: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub snr_db: f64,
    pub bits: BitDepth,
    pub trials: usize,
    pub failures: usize,
    pub order_correct: usize,
    pub p_order_correct: f64,
    /// Trial means of the dB values.
    pub mean_nmse_db: Option<f64>,
    pub mean_dnmse_db: Option<f64>,
    /// dB of the mean squared error over order-correct trials.
    pub freq_mse_db: Option<f64>,
    pub doa_mse_db: Option<f64>,
    /// dB of the mean frequency CRB trace.
    pub crb_trace_db: Option<f64>,
    pub mean_kappa: Option<f64>,
    pub mean_outer_iters: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub records: Vec<TrialRecord>,
    pub summaries: Vec<GroupSummary>,
}

impl ExperimentResult {
    pub fn summary(&self, snr_db: f64, bits: BitDepth) -> Option<&GroupSummary> {
        self.summaries.iter().find(|s| s.snr_db == snr_db && s.bits == bits)
    }

    pub fn records_for(&self, snr_db: f64, bits: BitDepth) -> impl Iterator<Item = &TrialRecord> {
        self.records.iter().filter(move |r| r.snr_db == snr_db && r.bits == bits)
    }
}

/// Generator of one trial: stream `trial` of the base seed.
pub fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

/// Synthetic instance of one trial. Every SNR and bit depth of a trial
/// shares the frequencies, weights and noise shape.
pub fn trial_data(cfg: &ExperimentConfig, trial: usize, snr_db: f64) -> Result<SyntheticData> {
    let truth_cfg = TruthConfig {
        n: cfg.n,
        m: cfg.m,
        k: cfg.k,
        l: cfg.l,
        snr_db,
        row_policy: cfg.row_policy,
        seed: cfg.seed,
    };
    let fixed = cfg.fixed_frequencies()?;
    generate_truth_with_rng(&truth_cfg, fixed.as_deref(), &mut trial_rng(cfg.seed, trial))
}

pub fn measurements(data: &SyntheticData, spec: Option<&QuantizerSpec>) -> Measurements {
    match spec {
        Some(s) => Measurements::Quantized(quantize_matrix(&data.noisy, s)),
        None => Measurements::Analog(data.noisy.clone()),
    }
}

fn run_trial(cfg: &ExperimentConfig, trial: usize, snr_db: f64, bits: BitDepth) -> TrialRecord {
    let mut record = TrialRecord {
        trial,
        seed: cfg.seed,
        snr_db,
        bits,
        k_hat: None,
        nmse_db: None,
        dnmse_db: None,
        freq_mse_db: None,
        doa_mse_db: None,
        order_correct: false,
        mean_kappa: None,
        crb_trace_db: None,
        outer_iters: None,
        converged: None,
        runtime_ms: 0.0,
        error: None,
    };
    let start = Instant::now();
    if let Err(e) = evaluate_trial(cfg, trial, snr_db, bits, &mut record) {
        record.error = Some(e.to_string());
    }
    record.runtime_ms = start.elapsed().as_secs_f64() * 1e3;
    record
}

fn evaluate_trial(cfg: &ExperimentConfig, trial: usize, snr_db: f64, bits: BitDepth, record: &mut TrialRecord) -> Result<()> {
    let data = trial_data(cfg, trial, snr_db)?;
    let spec = cfg.quantizer(bits)?;
    let truth = &data.truth;

    // Bounds are evaluated at the truth and do not depend on the estimate.
    match FisherParams::from_truth(truth).and_then(|p| frequency_crb(&p, &truth.rows, truth.noise_var, spec.as_ref())) {
        Ok(crb) => {
            if crb.ill_conditioned {
                log::warn!("trial {trial}: ill-conditioned FIM (condition {:e})", crb.condition);
            }
            record.crb_trace_db = Some(crb.trace_db());
        }
        Err(e) => log::warn!("trial {trial}: no CRB ({e})"),
    }

    let meas = measurements(&data, spec.as_ref());
    let est = run_mvalse_ep(&meas, truth.noise_var, &truth.rows, &cfg.estimator_options())?;
    score(cfg, &data, bits, &est, record)
}

fn score(cfg: &ExperimentConfig, data: &SyntheticData, bits: BitDepth, est: &EstimateResult, record: &mut TrialRecord) -> Result<()> {
    let truth = &data.truth;
    let full = truth.full_signal();
    let nmse = nmse_db(&est.z_full, &full)?;
    let dnmse = if cfg.per_row_dnmse { dnmse_rows_db(&est.z_full, &full)? } else { dnmse_db(&est.z_full, &full)? };
    record.k_hat = Some(est.k_hat);
    record.nmse_db = Some(nmse);
    record.dnmse_db = Some(dnmse);
    record.outer_iters = Some(est.outer_iters);
    record.converged = Some(est.converged);

    // One-bit data carry no amplitude, so the gate uses the debiased error.
    let gate_error = if bits == BitDepth::Bits(1) { dnmse } else { nmse };
    record.order_correct = order_correct(est.k_hat, truth.k(), gate_error, ORDER_ERROR_LIMIT_DB);
    if est.k_hat == truth.k() {
        let perm = match_frequencies(&est.frequencies, &truth.frequencies)?;
        let kappas: f64 = perm.iter().map(|&j| est.posteriors[j].kappa).sum();
        record.mean_kappa = Some(kappas / truth.k() as f64);
    }
    if record.order_correct {
        record.freq_mse_db = Some(freq_mse_db(&est.frequencies, &truth.frequencies)?);
        if cfg.doa_angles.is_some() {
            record.doa_mse_db = Some(doa_mse_db(&est.frequencies, &truth.frequencies)?);
        }
    }
    Ok(())
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

/// `10 log10` of the mean of linear powers given in dB.
fn power_mean_db(values: impl Iterator<Item = f64>) -> Option<f64> {
    mean(values.map(|db| 10f64.powf(db / 10.0))).map(|p| 10.0 * p.log10())
}

fn summarize(records: &[TrialRecord], snr_db: f64, bits: BitDepth) -> GroupSummary {
    let group: Vec<&TrialRecord> = records.iter().filter(|r| r.snr_db == snr_db && r.bits == bits).collect();
    let ok: Vec<&&TrialRecord> = group.iter().filter(|r| r.error.is_none()).collect();
    let correct = group.iter().filter(|r| r.order_correct).count();
    GroupSummary {
        snr_db,
        bits,
        trials: group.len(),
        failures: group.len() - ok.len(),
        order_correct: correct,
        p_order_correct: if group.is_empty() { 0.0 } else { correct as f64 / group.len() as f64 },
        mean_nmse_db: mean(ok.iter().filter_map(|r| r.nmse_db)),
        mean_dnmse_db: mean(ok.iter().filter_map(|r| r.dnmse_db)),
        freq_mse_db: power_mean_db(group.iter().filter_map(|r| r.freq_mse_db)),
        doa_mse_db: power_mean_db(group.iter().filter_map(|r| r.doa_mse_db)),
        crb_trace_db: power_mean_db(group.iter().filter_map(|r| r.crb_trace_db)),
        mean_kappa: mean(ok.iter().filter_map(|r| r.mean_kappa)),
        mean_outer_iters: mean(ok.iter().filter_map(|r| r.outer_iters.map(|t| t as f64))),
    }
}

/// Runs every (trial, SNR, bit depth) combination. Records come back ordered
/// by SNR, then bit depth, then trial, whatever the scheduling.
pub fn run_monte_carlo(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let jobs: Vec<(f64, BitDepth, usize)> = cfg
        .snr_db
        .iter()
        .flat_map(|&s| cfg.bits.iter().flat_map(move |&b| (0..cfg.trials).map(move |t| (s, b, t))))
        .collect();
    let records: Vec<TrialRecord> = jobs.par_iter().map(|&(s, b, t)| run_trial(cfg, t, s, b)).collect();
    let summaries = cfg
        .snr_db
        .iter()
        .flat_map(|&s| cfg.bits.iter().map(move |&b| (s, b)))
        .map(|(s, b)| summarize(&records, s, b))
        .collect();
    Ok(ExperimentResult { records, summaries })
}

/// Array scenario: frequencies pinned to the configured arrival angles.
pub fn run_doa(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    if cfg.doa_angles.is_none() {
        return Err(QlseError::InvalidConfig("doa_angles must be set for the array scenario".into()));
    }
    run_monte_carlo(cfg)
}

/// Runs `f` inside a pool of `threads` workers (all cores when `None`).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        builder = builder.num_threads(t);
    }
    let pool = builder.build().map_err(|e| QlseError::InvalidConfig(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}
