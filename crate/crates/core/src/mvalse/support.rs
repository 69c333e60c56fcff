//! Weight posterior and support search with rank-one updates.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use super::{log_odds, MvalseState, Precisions, PseudoObservations};
use crate::model::ComplexMatrix;

/// Gain of activating one component, with the new weight moments per snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Activation {
    pub delta: f64,
    pub u: Vec<Complex64>,
    pub v: Vec<f64>,
}

/// Dense `(J_l, h_l)` for every snapshot, over all `N` components.
pub fn compute_j_h(obs: &PseudoObservations, state: &MvalseState) -> Vec<(ComplexMatrix, DVector<Complex64>)> {
    let prec = Precisions::new(obs);
    let a = state.steering_hat();
    (0..obs.snapshots())
        .map(|l| {
            let inv = prec.inv.column(l);
            let scaled = ComplexMatrix::from_fn(a.nrows(), a.ncols(), |i, k| a[(i, k)] * inv[i]);
            let mut j = a.adjoint() * scaled;
            for k in 0..j.nrows() {
                j[(k, k)] = Complex64::new(prec.trace[l], 0.0);
            }
            let wy = DVector::from_fn(a.nrows(), |i, _| obs.y[(i, l)] * inv[i]);
            (j, a.adjoint() * wy)
        })
        .collect()
}

/// Recomputes the weight moments of the current support by direct inversion.
pub fn refresh_weights(obs: &PseudoObservations, state: &mut MvalseState) {
    if state.k_hat() == 0 {
        return;
    }
    let prec = Precisions::new(obs);
    let a_s = state.active_steering();
    let s = a_s.ncols();
    for l in 0..obs.snapshots() {
        let inv = prec.inv.column(l);
        let scaled = ComplexMatrix::from_fn(a_s.nrows(), s, |i, k| a_s[(i, k)] * inv[i]);
        let mut system = a_s.adjoint() * &scaled;
        for p in 0..s {
            system[(p, p)] = Complex64::new(prec.trace[l] + 1.0 / state.tau, 0.0);
        }
        let h = scaled.adjoint() * obs.y.column(l);
        let cov = match system.clone().cholesky() {
            Some(ch) => ch.inverse(),
            None => match system.try_inverse() {
                Some(inv) => inv,
                None => continue,
            },
        };
        let cov = hermitian_part(&cov);
        state.weights[l] = &cov * h;
        state.covariances[l] = cov;
    }
}

fn hermitian_part(c: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    let mut out = (c + c.adjoint()) * Complex64::new(0.5, 0.0);
    for p in 0..out.nrows() {
        out[(p, p)].im = 0.0;
    }
    out
}

/// Incremental solver for the weight posterior under support flips.
///
/// Keeps `h_l` for every component and the `J_l` rows of the active
/// components; the state's weight means and covariances are updated in place.
#[derive(Debug, Clone)]
pub struct SupportSolver<'a> {
    obs: &'a PseudoObservations,
    prec: Precisions,
    /// `N x L`.
    h: ComplexMatrix,
    /// For each active position and snapshot, the full `J_l` row.
    rows: Vec<Vec<DVector<Complex64>>>,
}

impl<'a> SupportSolver<'a> {
    /// Builds the solver for the state's current support. The state's weight
    /// moments must already be consistent with that support.
    pub fn new(obs: &'a PseudoObservations, state: &MvalseState) -> Self {
        let prec = Precisions::new(obs);
        let a = state.steering_hat();
        let mut h = ComplexMatrix::zeros(a.ncols(), obs.snapshots());
        for l in 0..obs.snapshots() {
            let wy = DVector::from_fn(a.nrows(), |i, _| obs.y[(i, l)] * prec.inv[(i, l)]);
            h.set_column(l, &a.ad_mul(&wy));
        }
        let mut solver = Self { obs, prec, h, rows: Vec::new() };
        solver.rows = state.active().iter().map(|&k| solver.j_rows(k, state)).collect();
        solver
    }

    fn j_rows(&self, k: usize, state: &MvalseState) -> Vec<DVector<Complex64>> {
        let a = state.steering_hat();
        (0..self.obs.snapshots())
            .map(|l| {
                let x = DVector::from_fn(a.nrows(), |i, _| a[(i, k)].conj() * self.prec.inv[(i, l)]);
                let mut row = a.tr_mul(&x);
                row[k] = Complex64::new(self.prec.trace[l], 0.0);
                row
            })
            .collect()
    }

    /// Refreshes cached quantities after component `k`'s steering column changed.
    pub fn refresh_column(&mut self, k: usize, state: &MvalseState) {
        let a = state.steering_hat();
        for l in 0..self.obs.snapshots() {
            let hk: Complex64 = (0..a.nrows())
                .map(|i| a[(i, k)].conj() * self.obs.y[(i, l)] * self.prec.inv[(i, l)])
                .sum();
            self.h[(k, l)] = hk;
        }
        for (p, &q) in state.active().iter().enumerate() {
            if q == k {
                self.rows[p] = self.j_rows(k, state);
                continue;
            }
            for l in 0..self.obs.snapshots() {
                let v: Complex64 = (0..a.nrows())
                    .map(|i| a[(i, q)].conj() * self.prec.inv[(i, l)] * a[(i, k)])
                    .sum();
                self.rows[p][l][k] = v;
            }
        }
    }

    pub fn h(&self) -> &ComplexMatrix {
        &self.h
    }

    fn j_column(&self, k: usize, l: usize) -> DVector<Complex64> {
        DVector::from_iterator(self.rows.len(), self.rows.iter().map(|r| r[l][k]))
    }

    /// Change of `ln Z` from activating inactive component `k`.
    pub fn delta_activate(&self, k: usize, state: &MvalseState) -> Activation {
        debug_assert!(!state.support()[k]);
        let tau = state.tau;
        let snapshots = self.obs.snapshots();
        let mut act = Activation {
            delta: log_odds(state.rho),
            u: Vec::with_capacity(snapshots),
            v: Vec::with_capacity(snapshots),
        };
        for l in 0..snapshots {
            let j = self.j_column(k, l);
            let cj = &state.covariances[l] * &j;
            let schur = self.prec.trace[l] + 1.0 / tau - j.dotc(&cj).re;
            if !(schur > 0.0) {
                act.delta = f64::NEG_INFINITY;
                act.u.push(Complex64::new(0.0, 0.0));
                act.v.push(0.0);
                continue;
            }
            let v = 1.0 / schur;
            let u = (self.h[(k, l)] - j.dotc(&state.weights[l])) * v;
            act.delta += (v / tau).ln() + u.norm_sqr() / v;
            act.u.push(u);
            act.v.push(v);
        }
        act
    }

    /// Change of `ln Z` from deactivating active component `k`.
    pub fn delta_deactivate(&self, k: usize, state: &MvalseState) -> f64 {
        let p = state.position(k).expect("component is not active");
        let tau = state.tau;
        let mut delta = -log_odds(state.rho);
        for l in 0..self.obs.snapshots() {
            let c_kk = state.covariances[l][(p, p)].re;
            delta -= (c_kk / tau).ln() + state.weights[l][p].norm_sqr() / c_kk;
        }
        delta
    }

    /// Flips component `k` and updates the weight moments by rank-one algebra.
    pub fn apply_flip(&mut self, k: usize, state: &mut MvalseState) {
        match state.position(k) {
            Some(p) => self.deactivate(k, p, state),
            None => {
                let act = self.delta_activate(k, state);
                self.activate(k, &act, state);
            }
        }
    }

    fn activate(&mut self, k: usize, act: &Activation, state: &mut MvalseState) {
        for l in 0..self.obs.snapshots() {
            let j = self.j_column(k, l);
            let c = &state.covariances[l] * &j;
            let (u, v) = (act.u[l], act.v[l]);
            let s = c.len();
            let old_c = &state.covariances[l];
            let mut cov = DMatrix::zeros(s + 1, s + 1);
            for a in 0..s {
                for b in 0..s {
                    cov[(a, b)] = old_c[(a, b)] + c[a] * c[b].conj() * v;
                }
                cov[(a, s)] = -c[a] * v;
                cov[(s, a)] = -c[a].conj() * v;
            }
            cov[(s, s)] = Complex64::new(v, 0.0);
            let old_w = &state.weights[l];
            let w = DVector::from_fn(s + 1, |a, _| if a < s { old_w[a] - c[a] * u } else { u });
            state.covariances[l] = hermitian_part(&cov);
            state.weights[l] = w;
        }
        state.support[k] = true;
        state.active.push(k);
        let rows = self.j_rows(k, state);
        self.rows.push(rows);
    }

    fn deactivate(&mut self, k: usize, p: usize, state: &mut MvalseState) {
        for l in 0..self.obs.snapshots() {
            let old_c = &state.covariances[l];
            let c_kk = old_c[(p, p)].re;
            let w_k = state.weights[l][p];
            let keep: Vec<usize> = (0..old_c.nrows()).filter(|&a| a != p).collect();
            let c = DVector::from_iterator(keep.len(), keep.iter().map(|&a| old_c[(a, p)]));
            let cov = DMatrix::from_fn(keep.len(), keep.len(), |a, b| {
                old_c[(keep[a], keep[b])] - c[a] * c[b].conj() / c_kk
            });
            let old_w = &state.weights[l];
            let w = DVector::from_fn(keep.len(), |a, _| old_w[keep[a]] - c[a] * (w_k / c_kk));
            state.covariances[l] = hermitian_part(&cov);
            state.weights[l] = w;
        }
        state.support[k] = false;
        state.active.remove(p);
        self.rows.remove(p);
    }

    /// Greedy ascent of `ln Z`: flips the component with the largest positive
    /// gain until no flip helps or the flip budget runs out. Components whose
    /// frequency posterior is uniform are never activated. Returns the flip count.
    pub fn greedy(&mut self, state: &mut MvalseState, budget: usize) -> usize {
        let m = state.rows().len();
        let mut flips = 0;
        while flips < budget {
            let mut best: Option<(usize, f64)> = None;
            for k in 0..state.n() {
                let delta = if state.support()[k] {
                    self.delta_deactivate(k, state)
                } else if state.k_hat() < m && !state.posteriors()[k].is_uniform() {
                    self.delta_activate(k, state).delta
                } else {
                    continue;
                };
                if best.is_none_or(|(_, d)| delta > d) {
                    best = Some((k, delta));
                }
            }
            match best {
                Some((k, delta)) if delta > 0.0 => {
                    self.apply_flip(k, state);
                    flips += 1;
                }
                _ => break,
            }
        }
        flips
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RowSet;
    use crate::mvalse::FreqPosterior;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn instance(seed: u64, n: usize, m: usize, l: usize) -> (MvalseState, PseudoObservations) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = RowSet::random(m, n, &mut rng).unwrap();
        let posts = (0..n)
            .map(|_| FreqPosterior::von_mises(rng.random_range(-3.0..3.0), rng.random_range(0.5..100.0), n))
            .collect();
        let rho = rng.random_range(0.1..0.9);
        let tau = rng.random_range(0.2..3.0);
        let state = MvalseState::new(rows, l, posts, rho, tau).unwrap();
        let y = ComplexMatrix::from_fn(m, l, |_, _| Complex64::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)));
        let v = DMatrix::from_fn(m, l, |_, _| rng.random_range(0.1..2.0));
        (state, PseudoObservations::new(y, v).unwrap())
    }

    /// `ln Z` up to a support-independent constant, by explicit inversion.
    fn ln_z(obs: &PseudoObservations, state: &MvalseState, support: &[usize]) -> f64 {
        let jh = compute_j_h(obs, state);
        let s = support.len();
        let l_count = obs.snapshots() as f64;
        let mut total = s as f64 * (log_odds(state.rho) - l_count * state.tau.ln());
        for (j, h) in &jh {
            let mut sys = DMatrix::from_fn(s, s, |a, b| j[(support[a], support[b])]);
            for a in 0..s {
                sys[(a, a)] += Complex64::new(1.0 / state.tau, 0.0);
            }
            let hs = DVector::from_fn(s, |a, _| h[support[a]]);
            let inv = sys.clone().try_inverse().unwrap();
            total += -sys.determinant().re.ln() + hs.dotc(&(inv * &hs)).re;
        }
        total
    }

    #[test]
    fn j_is_hermitian_with_trace_diagonal() {
        let (state, obs) = instance(1, 6, 5, 2);
        for (l, (j, _)) in compute_j_h(&obs, &state).iter().enumerate() {
            let tr: f64 = obs.noise_var.column(l).iter().map(|v| 1.0 / v).sum();
            assert!((j - j.adjoint()).norm() < 1e-12);
            for k in 0..6 {
                assert!((j[(k, k)].re - tr).abs() < 1e-12 && j[(k, k)].im == 0.0);
            }
        }
    }

    #[test]
    fn j_diagonal_homoscedastic() {
        let (state, _) = instance(2, 6, 5, 1);
        let obs = PseudoObservations::homoscedastic(ComplexMatrix::zeros(5, 1), 0.25).unwrap();
        let (j, _) = &compute_j_h(&obs, &state)[0];
        assert!((j[(3, 3)].re - 20.0).abs() < 1e-12);
    }

    #[test]
    fn j_entries_match_triple_product() {
        let (state, obs) = instance(3, 5, 4, 2);
        let jh = compute_j_h(&obs, &state);
        let a = state.steering_hat();
        #[allow(clippy::needless_range_loop)]
        for l in 0..2 {
            let sigma_inv = DMatrix::from_fn(4, 4, |i, k| if i == k { Complex64::new(1.0 / obs.noise_var[(i, l)], 0.0) } else { Complex64::new(0.0, 0.0) });
            let dense = a.adjoint() * &sigma_inv * a;
            for i in 0..5 {
                for k in 0..5 {
                    if i != k {
                        assert!((jh[l].0[(i, k)] - dense[(i, k)]).norm() < 1e-12);
                    }
                }
            }
            let h = a.adjoint() * &sigma_inv * obs.y.column(l);
            assert!((&jh[l].1 - h).norm() < 1e-12);
        }
    }

    #[test]
    fn activation_into_empty_support() {
        let (mut state, obs) = instance(4, 6, 5, 2);
        let mut solver = SupportSolver::new(&obs, &state);
        let act = solver.delta_activate(2, &state);
        for l in 0..2 {
            let tr: f64 = obs.noise_var.column(l).iter().map(|v| 1.0 / v).sum();
            let v = 1.0 / (tr + 1.0 / state.tau);
            assert!((act.v[l] - v).abs() < 1e-14);
            assert!((act.u[l] - solver.h()[(2, l)] * v).norm() < 1e-13);
        }
        solver.apply_flip(2, &mut state);
        for l in 0..2 {
            assert_eq!(state.weights(l).len(), 1);
            assert!((state.weights(l)[0] - act.u[l]).norm() < 1e-14);
            assert!((state.covariance(l)[(0, 0)].re - act.v[l]).abs() < 1e-14);
        }
    }

    #[test]
    fn deltas_match_direct_ln_z() {
        for seed in 0..20 {
            let (mut state, obs) = instance(100 + seed, 6, 5, 2);
            let mut solver = SupportSolver::new(&obs, &state);
            solver.apply_flip(1, &mut state);
            solver.apply_flip(4, &mut state);
            let base = ln_z(&obs, &state, &[1, 4]);
            let act = solver.delta_activate(0, &state);
            let direct = ln_z(&obs, &state, &[1, 4, 0]) - base;
            assert!((act.delta - direct).abs() < 1e-8, "activate {} vs {direct}", act.delta);
            let deact = solver.delta_deactivate(4, &state);
            let direct = ln_z(&obs, &state, &[1]) - base;
            assert!((deact - direct).abs() < 1e-8, "deactivate {deact} vs {direct}");
        }
    }

    #[test]
    fn activate_then_deactivate_is_exact_negative_and_round_trips() {
        let (mut state, obs) = instance(7, 7, 6, 3);
        let mut solver = SupportSolver::new(&obs, &state);
        solver.apply_flip(5, &mut state);
        solver.apply_flip(0, &mut state);
        let before = state.clone();
        let gain = solver.delta_activate(3, &state).delta;
        solver.apply_flip(3, &mut state);
        let loss = solver.delta_deactivate(3, &state);
        assert!((gain + loss).abs() < 1e-9);
        solver.apply_flip(3, &mut state);
        for l in 0..3 {
            assert!((state.weights(l) - before.weights(l)).norm() < 1e-8);
            assert!((state.covariance(l) - before.covariance(l)).norm() < 1e-8);
        }
    }

    #[test]
    fn rank_one_updates_match_direct_inversion() {
        let (mut state, obs) = instance(8, 8, 6, 2);
        let mut solver = SupportSolver::new(&obs, &state);
        for &k in &[3, 6, 1, 6, 0, 3, 7] {
            solver.apply_flip(k, &mut state);
            let mut direct = state.clone();
            refresh_weights(&obs, &mut direct);
            for l in 0..2 {
                assert!((state.weights(l) - direct.weights(l)).norm() < 1e-8);
                assert!((state.covariance(l) - direct.covariance(l)).norm() < 1e-8);
            }
        }
    }

    #[test]
    fn vanishing_rho_blocks_activation() {
        let (mut state, obs) = instance(9, 6, 5, 1);
        state.rho = 0.0;
        let solver = SupportSolver::new(&obs, &state);
        assert!((0..6).all(|k| solver.delta_activate(k, &state).delta == f64::NEG_INFINITY));
    }

    #[test]
    fn huge_tau_favours_deactivation_of_small_weights() {
        let (mut state, _) = instance(10, 6, 5, 1);
        let obs = PseudoObservations::homoscedastic(ComplexMatrix::from_element(5, 1, Complex64::new(1e-3, 0.0)), 1.0).unwrap();
        let mut solver = SupportSolver::new(&obs, &state);
        solver.apply_flip(2, &mut state);
        state.tau = 1e8;
        assert!(solver.delta_deactivate(2, &state) > 0.0);
    }

    #[test]
    fn greedy_reaches_local_maximum_within_budget() {
        let (mut state, obs) = instance(11, 8, 6, 2);
        let mut solver = SupportSolver::new(&obs, &state);
        let flips = solver.greedy(&mut state, 32);
        assert!(flips <= 32);
        for k in 0..8 {
            let d = if state.support()[k] {
                solver.delta_deactivate(k, &state)
            } else {
                solver.delta_activate(k, &state).delta
            };
            assert!(d <= 0.0 || state.k_hat() == 6);
        }
    }

    #[test]
    fn refresh_column_matches_rebuild() {
        let (mut state, obs) = instance(12, 7, 5, 2);
        let mut solver = SupportSolver::new(&obs, &state);
        solver.apply_flip(1, &mut state);
        solver.apply_flip(5, &mut state);
        state.set_posterior(3, FreqPosterior::von_mises(0.3, 12.0, 7));
        solver.refresh_column(3, &state);
        let rebuilt = SupportSolver::new(&obs, &state);
        assert!((solver.h() - rebuilt.h()).norm() < 1e-12);
        for p in 0..2 {
            for l in 0..2 {
                assert!((&solver.rows[p][l] - &rebuilt.rows[p][l]).norm() < 1e-12);
            }
        }
    }
}
