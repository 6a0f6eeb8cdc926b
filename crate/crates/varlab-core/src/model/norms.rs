//! RMS and layer normalization: public single-vector ops plus the batched
//! forward/backward kernels the model uses internally.
//!
//! Row reductions run in f64 regardless of element type; elementwise results
//! are stored back in the working precision.

use crate::error::{Error, Result};
use crate::tensor::Element;
use alloc::vec;
use alloc::vec::Vec;

fn check_lens(label: &str, lens: &[usize]) -> Result<()> {
    if lens.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::invalid(format_args!("{label}: mismatched vector lengths {lens:?}")));
    }
    if lens[0] == 0 {
        return Err(Error::degenerate(format_args!("{label} of empty vector")));
    }
    Ok(())
}

/// `out_i = γ_i · h_i / √(Σ h_j² / d + ε)` — normalization by root mean
/// square alone, no centering.
pub fn rmsnorm<E: Element>(h: &[E], gamma: &[E], eps: f64) -> Result<Vec<E>> {
    check_lens("rmsnorm", &[h.len(), gamma.len()])?;
    if eps < 0.0 {
        return Err(Error::invalid("rmsnorm: eps must be >= 0"));
    }
    let mut out = vec![E::ZERO; h.len()];
    let mut rinv = [E::ZERO];
    rmsnorm_rows(h, h.len(), gamma, eps, &mut out, &mut rinv);
    Ok(out)
}

/// `out = γ·(h−μ)/√(σ²+ε) + β` with population variance σ².
pub fn layernorm<E: Element>(h: &[E], gamma: &[E], beta: &[E], eps: f64) -> Result<Vec<E>> {
    check_lens("layernorm", &[h.len(), gamma.len(), beta.len()])?;
    if eps < 0.0 {
        return Err(Error::invalid("layernorm: eps must be >= 0"));
    }
    let mut out = vec![E::ZERO; h.len()];
    let mut xhat = vec![E::ZERO; h.len()];
    let mut inv_std = [E::ZERO];
    layernorm_rows(h, h.len(), gamma, beta, eps, &mut out, &mut xhat, &mut inv_std);
    Ok(out)
}

/// Batched rmsnorm over rows of width `d`; stores the normalized output and
/// the per-row reciprocal RMS needed by the backward pass.
pub(crate) fn rmsnorm_rows<E: Element>(
    x: &[E],
    d: usize,
    gamma: &[E],
    eps: f64,
    normed: &mut [E],
    rinv: &mut [E],
) {
    for (row, (x_row, out_row)) in x.chunks(d).zip(normed.chunks_mut(d)).enumerate() {
        let mut ms = 0.0f64;
        for &v in x_row {
            let v = v.to_f64();
            ms += v * v;
        }
        let r = 1.0 / libm::sqrt(ms / d as f64 + eps);
        rinv[row] = E::from_f64(r);
        for j in 0..d {
            out_row[j] = E::from_f64(gamma[j].to_f64() * x_row[j].to_f64() * r);
        }
    }
}

/// Backward of [`rmsnorm_rows`]; accumulates into `dx` and `dgamma`.
///
/// With r = 1/√(ms+ε):  dx = r·(γ⊙dy) − (r³/d)·(Σ γ_j dy_j x_j)·x,
/// dγ = dy ⊙ x·r.
pub(crate) fn rmsnorm_rows_backward<E: Element>(
    x: &[E],
    d: usize,
    gamma: &[E],
    rinv: &[E],
    dy: &[E],
    dx: &mut [E],
    dgamma: &mut [E],
) {
    for (row, ((x_row, dy_row), dx_row)) in
        x.chunks(d).zip(dy.chunks(d)).zip(dx.chunks_mut(d)).enumerate()
    {
        let r = rinv[row].to_f64();
        let mut s = 0.0f64;
        for j in 0..d {
            s += gamma[j].to_f64() * dy_row[j].to_f64() * x_row[j].to_f64();
        }
        let k = r * r * r * s / d as f64;
        for j in 0..d {
            let xj = x_row[j].to_f64();
            let dyj = dy_row[j].to_f64();
            dx_row[j] = E::from_f64(dx_row[j].to_f64() + r * gamma[j].to_f64() * dyj - k * xj);
            dgamma[j] = E::from_f64(dgamma[j].to_f64() + dyj * xj * r);
        }
    }
}

/// Batched layernorm over rows of width `d`; stores the output, the
/// standardized rows x̂, and the per-row 1/√(σ²+ε).
pub(crate) fn layernorm_rows<E: Element>(
    x: &[E],
    d: usize,
    gamma: &[E],
    beta: &[E],
    eps: f64,
    normed: &mut [E],
    xhat: &mut [E],
    inv_std: &mut [E],
) {
    for (row, ((x_row, out_row), xh_row)) in
        x.chunks(d).zip(normed.chunks_mut(d)).zip(xhat.chunks_mut(d)).enumerate()
    {
        let mut sum = 0.0f64;
        for &v in x_row {
            sum += v.to_f64();
        }
        let mean = sum / d as f64;
        let mut var = 0.0f64;
        for &v in x_row {
            let c = v.to_f64() - mean;
            var += c * c;
        }
        var /= d as f64;
        let r = 1.0 / libm::sqrt(var + eps);
        inv_std[row] = E::from_f64(r);
        for j in 0..d {
            let xh = (x_row[j].to_f64() - mean) * r;
            xh_row[j] = E::from_f64(xh);
            out_row[j] = E::from_f64(gamma[j].to_f64() * xh + beta[j].to_f64());
        }
    }
}

/// Backward of [`layernorm_rows`]; accumulates into `dx`, `dgamma`, `dbeta`.
///
/// With g = γ⊙dy:  dx = (1/σ̃)·(g − mean(g) − x̂·mean(g⊙x̂)),
/// dγ = dy ⊙ x̂, dβ = dy.
pub(crate) fn layernorm_rows_backward<E: Element>(
    xhat: &[E],
    d: usize,
    gamma: &[E],
    inv_std: &[E],
    dy: &[E],
    dx: &mut [E],
    dgamma: &mut [E],
    dbeta: &mut [E],
) {
    for (row, ((xh_row, dy_row), dx_row)) in
        xhat.chunks(d).zip(dy.chunks(d)).zip(dx.chunks_mut(d)).enumerate()
    {
        let r = inv_std[row].to_f64();
        let mut mg = 0.0f64;
        let mut mgx = 0.0f64;
        for j in 0..d {
            let g = gamma[j].to_f64() * dy_row[j].to_f64();
            mg += g;
            mgx += g * xh_row[j].to_f64();
        }
        mg /= d as f64;
        mgx /= d as f64;
        for j in 0..d {
            let g = gamma[j].to_f64() * dy_row[j].to_f64();
            let xh = xh_row[j].to_f64();
            dx_row[j] = E::from_f64(dx_row[j].to_f64() + r * (g - mg - xh * mgx));
            dgamma[j] = E::from_f64(dgamma[j].to_f64() + dy_row[j].to_f64() * xh);
            dbeta[j] = E::from_f64(dbeta[j].to_f64() + dy_row[j].to_f64());
        }
    }
}
