//! Multi-snapshot variational line spectral estimation on a heteroscedastic
//! pseudo-linear model. This is module A of the EP loop.

mod init;
mod posterior;
mod support;

pub use init::init_noncoherent;
pub use posterior::{grid_size, FreqPosterior, PosteriorGrid};
pub use support::{compute_j_h, refresh_weights, Activation, SupportSolver};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{QlseError, Result};
use crate::model::{ComplexMatrix, RowSet};

/// Linear-Gaussian surrogate observations `y = A(theta) w + n`, `n ~ CN(0, diag(noise_var))`.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoObservations {
    pub y: ComplexMatrix,
    pub noise_var: DMatrix<f64>,
}

impl PseudoObservations {
    pub fn new(y: ComplexMatrix, noise_var: DMatrix<f64>) -> Result<Self> {
        if y.shape() != noise_var.shape() {
            return Err(QlseError::Dimension(format!(
                "observations are {:?} but variances are {:?}",
                y.shape(),
                noise_var.shape()
            )));
        }
        if noise_var.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(QlseError::Domain("noise variances must be finite and positive".into()));
        }
        Ok(Self { y, noise_var })
    }

    /// Homoscedastic observations with a single noise variance.
    pub fn homoscedastic(y: ComplexMatrix, noise_var: f64) -> Result<Self> {
        let v = DMatrix::from_element(y.nrows(), y.ncols(), noise_var);
        Self::new(y, v)
    }

    pub fn rows(&self) -> usize {
        self.y.nrows()
    }

    pub fn snapshots(&self) -> usize {
        self.y.ncols()
    }
}

/// Inverse noise variances and their per-snapshot sums.
#[derive(Debug, Clone)]
pub(crate) struct Precisions {
    pub inv: DMatrix<f64>,
    pub trace: Vec<f64>,
}

impl Precisions {
    pub fn new(obs: &PseudoObservations) -> Self {
        let inv = obs.noise_var.map(|v| 1.0 / v);
        let trace = inv.column_iter().map(|c| c.sum()).collect();
        Self { inv, trace }
    }
}

/// Variational state of the inner solver.
#[derive(Debug, Clone, PartialEq)]
pub struct MvalseState {
    rows: RowSet,
    support: Vec<bool>,
    active: Vec<usize>,
    /// Per snapshot, posterior mean of the active weights (in `active` order).
    pub(crate) weights: Vec<DVector<Complex64>>,
    /// Per snapshot, posterior covariance of the active weights.
    pub(crate) covariances: Vec<DMatrix<Complex64>>,
    posteriors: Vec<FreqPosterior>,
    /// Expected steering vectors over the observed rows, one column per component.
    steering_hat: ComplexMatrix,
    pub rho: f64,
    pub tau: f64,
}

impl MvalseState {
    /// State with an empty support and the given frequency posteriors.
    pub fn new(rows: RowSet, snapshots: usize, posteriors: Vec<FreqPosterior>, rho: f64, tau: f64) -> Result<Self> {
        let n = rows.n_full();
        if posteriors.len() != n || posteriors.iter().any(|p| p.moments.len() != n) {
            return Err(QlseError::Dimension(format!("expected {n} posteriors with {n} moments each")));
        }
        let mut steering_hat = ComplexMatrix::zeros(rows.len(), n);
        for (k, post) in posteriors.iter().enumerate() {
            for (i, &m) in rows.indices().iter().enumerate() {
                steering_hat[(i, k)] = post.moments[m];
            }
        }
        Ok(Self {
            rows,
            support: vec![false; n],
            active: Vec::new(),
            weights: vec![DVector::zeros(0); snapshots],
            covariances: vec![DMatrix::zeros(0, 0); snapshots],
            posteriors,
            steering_hat,
            rho,
            tau,
        })
    }

    pub fn n(&self) -> usize {
        self.support.len()
    }

    pub fn rows(&self) -> &RowSet {
        &self.rows
    }

    pub fn snapshots(&self) -> usize {
        self.weights.len()
    }

    pub fn k_hat(&self) -> usize {
        self.active.len()
    }

    pub fn support(&self) -> &[bool] {
        &self.support
    }

    /// Active component indices in activation order.
    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn position(&self, k: usize) -> Option<usize> {
        self.active.iter().position(|&a| a == k)
    }

    pub fn posteriors(&self) -> &[FreqPosterior] {
        &self.posteriors
    }

    pub fn steering_hat(&self) -> &ComplexMatrix {
        &self.steering_hat
    }

    pub fn weights(&self, l: usize) -> &DVector<Complex64> {
        &self.weights[l]
    }

    pub fn covariance(&self, l: usize) -> &DMatrix<Complex64> {
        &self.covariances[l]
    }

    /// Frequency point estimates of the active components.
    pub fn frequencies(&self) -> Vec<f64> {
        self.active.iter().map(|&k| self.posteriors[k].theta_hat()).collect()
    }

    /// Active weight means as a `K_hat x L` matrix.
    pub fn weight_matrix(&self) -> ComplexMatrix {
        ComplexMatrix::from_fn(self.k_hat(), self.snapshots(), |p, l| self.weights[l][p])
    }

    /// Replaces a frequency posterior and its expected steering column.
    pub fn set_posterior(&mut self, k: usize, post: FreqPosterior) {
        for (i, &m) in self.rows.indices().iter().enumerate() {
            self.steering_hat[(i, k)] = post.moments[m];
        }
        self.posteriors[k] = post;
    }

    pub fn clear_support(&mut self) {
        self.support.iter_mut().for_each(|s| *s = false);
        self.active.clear();
        self.weights.iter_mut().for_each(|w| *w = DVector::zeros(0));
        self.covariances.iter_mut().for_each(|c| *c = DMatrix::zeros(0, 0));
    }

    /// Expected steering matrix restricted to the active components.
    pub fn active_steering(&self) -> ComplexMatrix {
        self.steering_hat.select_columns(&self.active)
    }

    /// Reconstruction `A_N(theta_hat) W_hat` over all `N` rows.
    pub fn reconstruct_full(&self) -> ComplexMatrix {
        let n = self.n();
        let a_full = ComplexMatrix::from_fn(n, self.k_hat(), |i, p| self.posteriors[self.active[p]].moments[i]);
        a_full * self.weight_matrix()
    }

    fn weight_norm_sum(&self) -> f64 {
        self.weights.iter().map(|w| w.norm()).sum()
    }
}

/// `ln(rho / (1 - rho))`.
pub(crate) fn log_odds(rho: f64) -> f64 {
    rho.ln() - (1.0 - rho).ln()
}

/// Recomputes the posterior of active component `k` given the rest of the state.
pub fn update_frequency(
    k: usize,
    state: &MvalseState,
    obs: &PseudoObservations,
    grid: &PosteriorGrid,
) -> Result<FreqPosterior> {
    let p = state
        .position(k)
        .ok_or_else(|| QlseError::Domain(format!("component {k} is not active")))?;
    let a_s = state.active_steering();
    let a_k = a_s.column(p);
    let mut coeffs = vec![Complex64::new(0.0, 0.0); state.n()];
    for l in 0..obs.snapshots() {
        let w = &state.weights[l];
        let c = &state.covariances[l];
        let w_k = w[p];
        let c_kk = c[(p, p)];
        let fitted = &a_s * w;
        let cross = &a_s * c.column(p);
        for (i, &m) in state.rows.indices().iter().enumerate() {
            let residual = obs.y[(i, l)] - fitted[i] + a_k[i] * w_k;
            let corr = cross[i] - a_k[i] * c_kk;
            coeffs[m] += (residual * w_k.conj() - corr) * (2.0 / obs.noise_var[(i, l)]);
        }
    }
    Ok(grid.fit(&coeffs))
}

/// Closed-form ML updates of `rho` and `tau`; an empty support keeps both.
pub fn update_hyperparams(state: &mut MvalseState) {
    let k = state.k_hat();
    if k == 0 {
        return;
    }
    let n = state.n() as f64;
    let lo = 1.0 / n;
    state.rho = (k as f64 / n).clamp(lo, (1.0 - lo).max(lo));
    let energy: f64 = state
        .weights
        .iter()
        .zip(&state.covariances)
        .map(|(w, c)| w.norm_squared() + c.diagonal().iter().map(|d| d.re).sum::<f64>())
        .sum();
    state.tau = (energy / (state.snapshots() * k) as f64).max(1e-12);
}

/// Posterior mean and variance of the noiseless signal on the observed rows.
pub fn signal_posterior(state: &MvalseState, floor: f64) -> (ComplexMatrix, DMatrix<f64>) {
    let m = state.rows.len();
    let snapshots = state.snapshots();
    let mut z = ComplexMatrix::zeros(m, snapshots);
    let mut v = DMatrix::from_element(m, snapshots, floor);
    if state.k_hat() == 0 {
        return (z, v);
    }
    let a_s = state.active_steering();
    let a_sq = a_s.map(|a| a.norm_sqr());
    for l in 0..snapshots {
        let w = &state.weights[l];
        let c = &state.covariances[l];
        z.set_column(l, &(&a_s * w));
        let ac = &a_s * c;
        let w_norm2 = w.norm_squared();
        let trace_c: f64 = c.diagonal().iter().map(|d| d.re).sum();
        let own: DVector<f64> = DVector::from_fn(w.len(), |p, _| w[p].norm_sqr() + c[(p, p)].re);
        let own_part = &a_sq * own;
        for i in 0..m {
            let quad: f64 = (0..a_s.ncols()).map(|p| (ac[(i, p)] * a_s[(i, p)].conj()).re).sum();
            let var = quad + w_norm2 + trace_c - own_part[i];
            v[(i, l)] = var.max(floor);
        }
    }
    (z, v)
}

/// Options of the inner solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerOptions {
    pub max_sweeps: usize,
    pub tol: f64,
}

impl Default for InnerOptions {
    fn default() -> Self {
        Self { max_sweeps: 500, tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerReport {
    pub sweeps: usize,
    pub converged: bool,
    /// `sum_l ||w_l||` after each sweep.
    pub trace: Vec<f64>,
}

/// Runs the inner solver: each sweep does a greedy support search from the
/// empty support, the hyperparameter update and one pass of frequency updates.
pub fn run_inner(
    obs: &PseudoObservations,
    rows: &RowSet,
    warm_start: Option<MvalseState>,
    opts: &InnerOptions,
) -> Result<(MvalseState, InnerReport)> {
    if obs.rows() != rows.len() {
        return Err(QlseError::Dimension(format!(
            "observations have {} rows but the row set has {}",
            obs.rows(),
            rows.len()
        )));
    }
    let grid = PosteriorGrid::new(rows.n_full());
    let (mut state, mut prev) = match warm_start {
        Some(s) => {
            if s.rows != *rows || s.snapshots() != obs.snapshots() {
                return Err(QlseError::Dimension("warm start does not match observations".into()));
            }
            let prev = (s.support.clone(), s.weight_norm_sum());
            (s, Some(prev))
        }
        None => (init_noncoherent(obs, rows)?, None),
    };

    let mut report = InnerReport { sweeps: 0, converged: false, trace: Vec::new() };
    let budget = 4 * rows.n_full();
    for _ in 0..opts.max_sweeps.max(1) {
        state.clear_support();
        let mut solver = SupportSolver::new(obs, &state);
        solver.greedy(&mut state, budget);
        update_hyperparams(&mut state);
        for k in state.active.clone() {
            let post = update_frequency(k, &state, obs, &grid)?;
            state.set_posterior(k, post);
        }
        let norm = state.weight_norm_sum();
        report.sweeps += 1;
        report.trace.push(norm);
        if let Some((prev_support, prev_norm)) = &prev {
            let scale = norm.max(*prev_norm);
            let change = if scale > 0.0 { (norm - prev_norm).abs() / scale } else { 0.0 };
            if *prev_support == state.support && change < opts.tol {
                report.converged = true;
                break;
            }
        }
        prev = Some((state.support.clone(), norm));
    }
    refresh_weights(obs, &mut state);
    Ok((state, report))
}
