//! Spectral normalization by power iteration with a persisted left vector.

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

const SIGMA_FLOOR: f64 = 1e-12;

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Runs `n_iters` power-iteration updates of `u` (length = rows of the
/// `[rows, cols]` view of `w`) and returns the estimate `σ̂ = uᵀ W v`,
/// clamped below by `1e-12`.
pub fn estimate_sigma(w: &Tensor, u: &mut [f64], n_iters: usize) -> Result<f64> {
    let (rows, cols) = w.matrix_dims();
    if u.len() != rows {
        return Err(invalid("spectral_normalize", format!("u has length {}, expected {rows}", u.len())));
    }
    if n_iters == 0 {
        return Err(invalid("spectral_normalize", "n_iters must be >= 1"));
    }
    let wd = w.data();
    let mut v = vec![0.0; cols];
    let mut wv = vec![0.0; rows];
    for _ in 0..n_iters {
        v.iter_mut().for_each(|x| *x = 0.0);
        for (row, ui) in wd.chunks_exact(cols).zip(u.iter()) {
            for (vj, wij) in v.iter_mut().zip(row) {
                *vj += wij * ui;
            }
        }
        normalize(&mut v);
        for (o, row) in wv.iter_mut().zip(wd.chunks_exact(cols)) {
            *o = row.iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        u.copy_from_slice(&wv);
        normalize(u);
    }
    let sigma: f64 = u.iter().zip(&wv).map(|(a, b)| a * b).sum();
    Ok(sigma.max(SIGMA_FLOOR))
}

/// `w / σ̂` after `n_iters` power iterations; `u` is updated in place.
pub fn spectral_normalize(w: &Tensor, u: &mut [f64], n_iters: usize) -> Result<(Tensor, f64)> {
    let sigma = estimate_sigma(w, u, n_iters)?;
    Ok((w.map(|x| x / sigma), sigma))
}

/// `σ̂` from the current `u` without advancing it.
pub fn sigma_from(w: &Tensor, u: &[f64]) -> Result<f64> {
    let mut scratch = u.to_vec();
    estimate_sigma(w, &mut scratch, 1)
}
