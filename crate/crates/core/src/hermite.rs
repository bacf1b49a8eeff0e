//! Hermite polynomials, Hermite functions and Hermite zeros.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Largest order accepted by [`hermite_zeros`].
pub const MAX_ZERO_ORDER: usize = 200;

/// Physicists' Hermite polynomial `H_n(x)` by the three-term recurrence.
///
/// Values that would overflow are computed from the scaled recurrence and
/// rescaled at the end, so the result is `±inf` only when `H_n(x)` itself is
/// out of range.
pub fn hermite_1d(n: usize, x: f64) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let mut h0 = 1.0;
    let mut h1 = 2.0 * x;
    let mut log_scale = 0.0f64;
    for k in 1..n {
        let h2 = 2.0 * x * h1 - 2.0 * k as f64 * h0;
        h0 = h1;
        h1 = h2;
        let m = h1.abs().max(h0.abs());
        if m > 1e150 {
            h0 /= m;
            h1 /= m;
            log_scale += m.ln();
        }
    }
    if log_scale == 0.0 {
        h1
    } else {
        h1 * log_scale.exp()
    }
}

/// Normalized Hermite functions `ψ_0(x) … ψ_{n_max}(x)` with
/// `∫ψ_m ψ_n dx = δ_mn`. Stable for large `n` and `|x|`.
pub fn hermite_functions(n_max: usize, x: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n_max + 1);
    let g = (-0.5 * x * x).exp() * std::f64::consts::PI.powf(-0.25);
    out.push(g);
    if n_max == 0 {
        return out;
    }
    out.push(std::f64::consts::SQRT_2 * x * g);
    for k in 1..n_max {
        let kf = k as f64;
        let next = (2.0 / (kf + 1.0)).sqrt() * x * out[k] - (kf / (kf + 1.0)).sqrt() * out[k - 1];
        out.push(next);
    }
    out
}

/// Single normalized Hermite function `ψ_n(x)`.
pub fn hermite_function(n: usize, x: f64) -> f64 {
    hermite_functions(n, x)[n]
}

// h_n = H_n / sqrt(2^n n!) without the Gaussian; returns (h_{n-1}, h_n).
fn scaled_pair(n: usize, x: f64) -> (f64, f64) {
    let mut prev = 0.0;
    let mut cur = 1.0;
    for k in 0..n {
        let kf = k as f64;
        let next = (2.0 / (kf + 1.0)).sqrt() * x * cur - (kf / (kf + 1.0)).sqrt() * prev;
        prev = cur;
        cur = next;
    }
    (prev, cur)
}

/// Zeros of `H_n`, sorted ascending.
///
/// Eigenvalues of the symmetric Jacobi matrix of the recurrence, polished by
/// two Newton steps and symmetrized about the origin.
pub fn hermite_zeros(n: usize) -> Result<Vec<f64>> {
    if n == 0 || n > MAX_ZERO_ORDER {
        return Err(Error::InvalidParameter(format!(
            "Hermite zero order must be in 1..={MAX_ZERO_ORDER}, got {n}"
        )));
    }
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let off = (k as f64 / 2.0).sqrt();
        jacobi[(k - 1, k)] = off;
        jacobi[(k, k - 1)] = off;
    }
    let mut z: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
    z.sort_by(f64::total_cmp);
    let scale = (2.0 * n as f64).sqrt();
    for zi in &mut z {
        for _ in 0..2 {
            let (hm1, h) = scaled_pair(n, *zi);
            if hm1 != 0.0 {
                *zi -= h / (scale * hm1);
            }
        }
    }
    for i in 0..n / 2 {
        let r = 0.5 * (z[n - 1 - i] - z[i]);
        z[i] = -r;
        z[n - 1 - i] = r;
    }
    if n % 2 == 1 {
        z[n / 2] = 0.0;
    }
    Ok(z)
}
