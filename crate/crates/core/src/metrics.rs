//! Reconstruction and frequency error metrics.

use itertools::Itertools;
use num_complex::Complex64;

use crate::error::{QlseError, Result};
use crate::model::{freq_to_doa, ComplexMatrix};
use crate::special::wrap_distance;

/// Stand-in for minus infinity in serialized records.
pub const DB_FLOOR: f64 = -300.0;

/// Largest model order matched by exhaustive search.
pub const EXHAUSTIVE_MATCH_LIMIT: usize = 6;

fn ratio_db(num: f64, den: f64) -> f64 {
    let r = num / den;
    if r > 0.0 {
        (20.0 * r.log10()).max(DB_FLOOR)
    } else {
        DB_FLOOR
    }
}

fn check_shapes(a: &ComplexMatrix, b: &ComplexMatrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(QlseError::Dimension(format!("estimate is {:?}, truth is {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `20 log10(||Z_hat - Z|| / ||Z||)`, clamped below at [`DB_FLOOR`].
pub fn nmse_db(z_hat: &ComplexMatrix, z_true: &ComplexMatrix) -> Result<f64> {
    check_shapes(z_hat, z_true)?;
    let den = z_true.norm();
    if den == 0.0 {
        return Err(QlseError::ZeroNorm);
    }
    Ok(ratio_db((z_hat - z_true).norm(), den))
}

/// NMSE after the best single complex rescaling of the estimate.
///
/// Uses the same `20 log10` scale as [`nmse_db`], so the value never exceeds it.
pub fn dnmse_db(z_hat: &ComplexMatrix, z_true: &ComplexMatrix) -> Result<f64> {
    check_shapes(z_hat, z_true)?;
    let den = z_true.norm();
    if den == 0.0 {
        return Err(QlseError::ZeroNorm);
    }
    let energy = z_hat.norm_squared();
    if energy == 0.0 {
        return Ok(0.0);
    }
    let c = z_hat.dotc(z_true) / energy;
    Ok(ratio_db((z_hat * c - z_true).norm(), den))
}

/// Variant of [`dnmse_db`] with one complex scale per row.
pub fn dnmse_rows_db(z_hat: &ComplexMatrix, z_true: &ComplexMatrix) -> Result<f64> {
    check_shapes(z_hat, z_true)?;
    let den = z_true.norm();
    if den == 0.0 {
        return Err(QlseError::ZeroNorm);
    }
    let mut err = 0.0;
    for i in 0..z_hat.nrows() {
        let h = z_hat.row(i);
        let t = z_true.row(i);
        let energy = h.norm_squared();
        let c = if energy > 0.0 { h.dotc(&t) / energy } else { Complex64::new(0.0, 0.0) };
        err += (h * c - t).norm_squared();
    }
    Ok(ratio_db(err.sqrt(), den))
}

/// Assignment `perm` with `est[perm[i]]` matched to `truth[i]`, minimizing the
/// total wrap-around distance.
pub fn match_frequencies(est: &[f64], truth: &[f64]) -> Result<Vec<usize>> {
    let k = truth.len();
    if est.len() != k {
        return Err(QlseError::Dimension(format!("{} estimates for {k} frequencies", est.len())));
    }
    let cost = |perm: &[usize]| -> f64 { perm.iter().enumerate().map(|(i, &j)| wrap_distance(est[j], truth[i])).sum() };
    if k <= EXHAUSTIVE_MATCH_LIMIT {
        let best = (0..k)
            .permutations(k)
            .map(|p| (cost(&p), p))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, p)| p)
            .unwrap_or_default();
        return Ok(best);
    }
    let matrix: Vec<f64> = (0..k).flat_map(|i| (0..k).map(move |j| (i, j))).map(|(i, j)| wrap_distance(est[j], truth[i])).collect();
    let (rows, cols) = lsap::solve(k, k, &matrix, false).map_err(|e| QlseError::Domain(format!("assignment failed: {e}")))?;
    let mut perm = vec![0; k];
    for (i, j) in rows.into_iter().zip(cols) {
        perm[i] = j;
    }
    Ok(perm)
}

/// `20 log10` of the 2-norm of matched wrap-around frequency errors.
pub fn freq_mse_db(est: &[f64], truth: &[f64]) -> Result<f64> {
    let perm = match_frequencies(est, truth)?;
    let sq: f64 = perm.iter().enumerate().map(|(i, &j)| wrap_distance(est[j], truth[i]).powi(2)).sum();
    Ok(ratio_db(sq.sqrt(), 1.0))
}

/// Like [`freq_mse_db`] but with errors measured in arrival angle (degrees),
/// after matching in the frequency domain.
pub fn doa_mse_db(est: &[f64], truth: &[f64]) -> Result<f64> {
    let perm = match_frequencies(est, truth)?;
    let mut sq = 0.0;
    for (i, &j) in perm.iter().enumerate() {
        sq += (freq_to_doa(est[j])? - freq_to_doa(truth[i])?).powi(2);
    }
    Ok(ratio_db(sq.sqrt(), 1.0))
}

/// Model order counts as correct when the order matches and the reconstruction
/// error is at most `max_error_db`.
pub fn order_correct(k_hat: usize, k: usize, error_db: f64, max_error_db: f64) -> bool {
    k_hat == k && error_db <= max_error_db
}
