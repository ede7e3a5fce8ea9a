//! Central finite differences against an analytic gradient.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Gradient magnitude below which relative error is measured against this
/// floor instead of the (vanishing) gradient itself.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub coords: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    /// `(coordinate, analytic, numeric)` at the largest error.
    pub worst: Option<(usize, f64, f64)>,
}

/// `n` distinct coordinates out of `len`, sorted, from a seeded draw.
pub fn sample_coordinates(len: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, len, n.min(len)).into_vec();
    picked.sort_unstable();
    picked
}

/// For each coordinate `i`, compares `analytic[i]` with
/// `(f(θ + h·e_i) − f(θ − h·e_i)) / 2h`. Relative error is
/// `|a − n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn finite_diff_check(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    params: &[f64],
    analytic: &[f64],
    h: f64,
    coords: &[usize],
) -> Result<FdReport> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::InvalidArgument(format!("finite difference step {h} outside [1e-7, 1e-3]")));
    }
    if analytic.len() != params.len() {
        return Err(Error::shape("finite_diff_check", format!("{} params, {} gradients", params.len(), analytic.len())));
    }
    if let Some(&bad) = coords.iter().find(|&&i| i >= params.len()) {
        return Err(Error::InvalidArgument(format!("coordinate {bad} out of range")));
    }
    let mut theta = params.to_vec();
    let mut report = FdReport {
        coords: coords.len(),
        max_rel_err: 0.0,
        mean_rel_err: 0.0,
        worst: None,
    };
    for &i in coords {
        let orig = theta[i];
        theta[i] = orig + h;
        let plus = f(&theta)?;
        theta[i] = orig - h;
        let minus = f(&theta)?;
        theta[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite { op: "finite_diff_check" });
        }
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
        report.mean_rel_err += err;
        if report.worst.is_none() || err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some((i, a, numeric));
        }
    }
    if !coords.is_empty() {
        report.mean_rel_err /= coords.len() as f64;
    }
    Ok(report)
}
