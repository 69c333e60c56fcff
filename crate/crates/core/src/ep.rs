//! Expectation propagation between the componentwise denoiser (module B) and
//! the line spectral solver (module A).

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{QlseError, Result};
use crate::model::{ComplexMatrix, RowSet};
use crate::mvalse::{run_inner, signal_posterior, FreqPosterior, InnerOptions, MvalseState, PseudoObservations};
use crate::quantizer::{denoise_extrinsic, Measurements};

/// Initial A-side extrinsic variance.
pub const INITIAL_EXT_VAR: f64 = 1.0e4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpOptions {
    pub t_outer: usize,
    pub inner_iters: usize,
    pub var_floor: f64,
    pub var_cap: f64,
    /// A-side extrinsic variance before the first iteration.
    pub initial_ext_var: f64,
    /// Stop once the relative change of the full reconstruction drops below this.
    pub convergence_tol: f64,
    pub inner_tol: f64,
    /// Weight of the new A-side extrinsic message; 1 disables damping.
    pub damping: f64,
    /// Carried for reproducibility records; the estimator itself draws no random numbers.
    pub seed: u64,
}

impl Default for EpOptions {
    fn default() -> Self {
        Self {
            t_outer: 120,
            inner_iters: 500,
            var_floor: 1e-11,
            var_cap: 1e11,
            initial_ext_var: INITIAL_EXT_VAR,
            convergence_tol: 1e-6,
            inner_tol: 1e-6,
            damping: 1.0,
            seed: 0,
        }
    }
}

impl EpOptions {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.t_outer < 1 {
            problems.push("t_outer must be at least 1");
        }
        if self.inner_iters < 1 {
            problems.push("inner_iters must be at least 1");
        }
        if !(self.var_floor > 0.0 && self.var_floor < self.var_cap && self.var_cap.is_finite()) {
            problems.push("need 0 < var_floor < var_cap < inf");
        }
        if !(self.initial_ext_var > 0.0 && self.initial_ext_var.is_finite()) {
            problems.push("initial_ext_var must be positive and finite");
        }
        if !(self.convergence_tol >= 0.0) || !(self.inner_tol >= 0.0) {
            problems.push("tolerances must be nonnegative");
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            problems.push("damping must lie in (0, 1]");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(QlseError::InvalidConfig(problems.join("; ")))
        }
    }
}

/// Gaussian message division for one entry.
///
/// Messages whose variance would exceed `cap` (including negative or infinite
/// precision) are uninformative: they get variance `cap` and are centred on
/// the posterior mean, so they carry no linear information either.
pub fn extrinsic(
    post_mean: Complex64,
    post_var: f64,
    cavity_mean: Complex64,
    cavity_var: f64,
    floor: f64,
    cap: f64,
) -> (Complex64, f64) {
    let precision = 1.0 / post_var - 1.0 / cavity_var;
    if !(precision > 1.0 / cap) || !precision.is_finite() {
        return (post_mean, cap);
    }
    let var = (1.0 / precision).max(floor);
    let mean = (post_mean / post_var - cavity_mean / cavity_var) * var;
    (mean, var)
}

/// Entrywise [`extrinsic`] over matrices.
pub fn extrinsic_matrix(
    post_mean: &ComplexMatrix,
    post_var: &DMatrix<f64>,
    cavity_mean: &ComplexMatrix,
    cavity_var: &DMatrix<f64>,
    floor: f64,
    cap: f64,
) -> (ComplexMatrix, DMatrix<f64>) {
    let mut mean = ComplexMatrix::zeros(post_mean.nrows(), post_mean.ncols());
    let mut var = DMatrix::zeros(post_mean.nrows(), post_mean.ncols());
    for idx in 0..post_mean.len() {
        let (m, v) = extrinsic(post_mean[idx], post_var[idx], cavity_mean[idx], cavity_var[idx], floor, cap);
        mean[idx] = m;
        var[idx] = v;
    }
    (mean, var)
}

/// Extrinsic messages of both modules.
#[derive(Debug, Clone, PartialEq)]
pub struct EpState {
    pub ext_mean_a: ComplexMatrix,
    pub ext_var_a: DMatrix<f64>,
    pub ext_mean_b: ComplexMatrix,
    pub ext_var_b: DMatrix<f64>,
    pub t: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuterRecord {
    pub iteration: usize,
    pub k_hat: usize,
    /// `20 log10` of the relative change of the full reconstruction, clamped to -300.
    pub change_db: f64,
    pub inner_sweeps: usize,
}

#[derive(Debug, Clone)]
pub struct EstimateResult {
    pub k_hat: usize,
    /// Frequency estimates sorted ascending; weights and posteriors follow this order.
    pub frequencies: Vec<f64>,
    /// `K_hat x L`.
    pub weights: ComplexMatrix,
    /// Per snapshot, `K_hat x K_hat`.
    pub covariances: Vec<ComplexMatrix>,
    /// Reconstruction over all `N` rows.
    pub z_full: ComplexMatrix,
    pub posteriors: Vec<FreqPosterior>,
    pub trace: Vec<OuterRecord>,
    pub outer_iters: usize,
    pub converged: bool,
    pub inner_state: MvalseState,
}

/// Step-wise driver of the EP loop.
#[derive(Debug, Clone)]
pub struct EpRunner<'a> {
    data: &'a Measurements,
    sigma2: f64,
    rows: RowSet,
    opts: EpOptions,
    state: EpState,
    pseudo: Option<PseudoObservations>,
    inner: Option<MvalseState>,
    z_full: Option<ComplexMatrix>,
    trace: Vec<OuterRecord>,
    converged: bool,
}

impl<'a> EpRunner<'a> {
    pub fn new(data: &'a Measurements, sigma2: f64, rows: &RowSet, opts: &EpOptions) -> Result<Self> {
        opts.validate()?;
        let (m, l) = data.shape();
        if m != rows.len() {
            return Err(QlseError::Dimension(format!("data has {m} rows but the row set has {}", rows.len())));
        }
        if l == 0 {
            return Err(QlseError::Dimension("data has no snapshots".into()));
        }
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(QlseError::Domain("sigma2 must be positive and finite".into()));
        }
        let state = EpState {
            ext_mean_a: ComplexMatrix::zeros(m, l),
            ext_var_a: DMatrix::from_element(m, l, opts.initial_ext_var),
            ext_mean_b: ComplexMatrix::zeros(m, l),
            ext_var_b: DMatrix::from_element(m, l, opts.var_cap),
            t: 0,
        };
        Ok(Self {
            data,
            sigma2,
            rows: rows.clone(),
            opts: *opts,
            state,
            pseudo: None,
            inner: None,
            z_full: None,
            trace: Vec::new(),
            converged: false,
        })
    }

    pub fn state(&self) -> &EpState {
        &self.state
    }

    /// Pseudo observations fed to module A in the latest iteration.
    pub fn pseudo_observations(&self) -> Option<&PseudoObservations> {
        self.pseudo.as_ref()
    }

    pub fn inner_state(&self) -> Option<&MvalseState> {
        self.inner.as_ref()
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn done(&self) -> bool {
        self.converged || self.state.t >= self.opts.t_outer
    }

    fn module_b(&self) -> Result<PseudoObservations> {
        let (mean, var) = denoise_extrinsic(
            self.data,
            &self.state.ext_mean_a,
            &self.state.ext_var_a,
            self.sigma2,
            self.opts.var_floor,
            self.opts.var_cap,
        )?;
        PseudoObservations::new(mean, var)
    }

    /// One outer iteration. Returns whether the loop has converged.
    pub fn step(&mut self) -> Result<bool> {
        if self.converged {
            return Ok(true);
        }
        let pseudo = self.module_b()?;
        if self.pseudo.as_ref() == Some(&pseudo) {
            // Module A would see exactly the same input again.
            self.converged = true;
            return Ok(true);
        }
        self.state.t += 1;
        self.state.ext_mean_b = pseudo.y.clone();
        self.state.ext_var_b = pseudo.noise_var.clone();

        let inner_opts = InnerOptions { max_sweeps: self.opts.inner_iters, tol: self.opts.inner_tol };
        let (inner, report) = run_inner(&pseudo, &self.rows, self.inner.take(), &inner_opts)?;
        let z_full = inner.reconstruct_full();
        let change = match &self.z_full {
            Some(prev) => relative_change(&z_full, prev),
            None => f64::INFINITY,
        };
        self.trace.push(OuterRecord {
            iteration: self.state.t,
            k_hat: inner.k_hat(),
            change_db: if change.is_finite() { (20.0 * change.log10()).max(-300.0) } else { 300.0 },
            inner_sweeps: report.sweeps,
        });

        let (z_post, v_post) = signal_posterior(&inner, self.opts.var_floor);
        let (mean, var) = extrinsic_matrix(
            &z_post,
            &v_post,
            &pseudo.y,
            &pseudo.noise_var,
            self.opts.var_floor,
            self.opts.var_cap,
        );
        let d = self.opts.damping;
        if d < 1.0 {
            self.state.ext_mean_a = mean * Complex64::new(d, 0.0) + &self.state.ext_mean_a * Complex64::new(1.0 - d, 0.0);
            self.state.ext_var_a = var * d + &self.state.ext_var_a * (1.0 - d);
        } else {
            self.state.ext_mean_a = mean;
            self.state.ext_var_a = var;
        }

        self.pseudo = Some(pseudo);
        self.inner = Some(inner);
        self.z_full = Some(z_full);
        self.converged = change < self.opts.convergence_tol;
        Ok(self.converged)
    }

    pub fn finish(self) -> Result<EstimateResult> {
        let inner = self
            .inner
            .ok_or_else(|| QlseError::Domain("no outer iteration has run".into()))?;
        let mut order: Vec<usize> = (0..inner.k_hat()).collect();
        let freqs = inner.frequencies();
        order.sort_by(|&a, &b| freqs[a].total_cmp(&freqs[b]));
        let w = inner.weight_matrix();
        let snapshots = inner.snapshots();
        let weights = ComplexMatrix::from_fn(order.len(), snapshots, |p, l| w[(order[p], l)]);
        let covariances = (0..snapshots)
            .map(|l| {
                let c = inner.covariance(l);
                ComplexMatrix::from_fn(order.len(), order.len(), |a, b| c[(order[a], order[b])])
            })
            .collect();
        let posteriors = order.iter().map(|&p| inner.posteriors()[inner.active()[p]].clone()).collect();
        Ok(EstimateResult {
            k_hat: inner.k_hat(),
            frequencies: order.iter().map(|&p| freqs[p]).collect(),
            weights,
            covariances,
            z_full: self.z_full.unwrap_or_else(|| inner.reconstruct_full()),
            posteriors,
            outer_iters: self.state.t,
            converged: self.converged,
            trace: self.trace,
            inner_state: inner,
        })
    }
}

fn relative_change(new: &ComplexMatrix, old: &ComplexMatrix) -> f64 {
    let diff = (new - old).norm();
    let scale = old.norm();
    if scale > 0.0 {
        diff / scale
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Runs the full EP estimator.
pub fn run_mvalse_ep(data: &Measurements, sigma2: f64, rows: &RowSet, opts: &EpOptions) -> Result<EstimateResult> {
    let mut runner = EpRunner::new(data, sigma2, rows, opts)?;
    while !runner.done() {
        runner.step()?;
    }
    runner.finish()
}
