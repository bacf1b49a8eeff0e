//! Uniform periodic coordinate grids and spectral differentiation.

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `n` points `x_k = −L + k·dx`, `dx = 2L/n`, on the periodic box `[−L, L)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub n: usize,
    pub half_width: f64,
}

impl Grid {
    pub fn new(n: usize, half_width: f64) -> Result<Self> {
        if n < 2 || !n.is_power_of_two() {
            return Err(Error::InvalidParameter(format!(
                "grid size must be a power of two ≥ 2, got {n}"
            )));
        }
        if !(half_width > 0.0) || !half_width.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "grid half-width must be positive, got {half_width}"
            )));
        }
        Ok(Self { n, half_width })
    }

    pub fn dx(&self) -> f64 {
        2.0 * self.half_width / self.n as f64
    }

    pub fn point(&self, k: usize) -> f64 {
        -self.half_width + k as f64 * self.dx()
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n).map(|k| self.point(k)).collect()
    }

    /// Angular wavenumbers in FFT order.
    pub fn wavenumbers(&self) -> Vec<f64> {
        let n = self.n as i64;
        let dk = PI / self.half_width;
        (0..n)
            .map(|k| if k < n / 2 { k } else { k - n } as f64 * dk)
            .collect()
    }

    pub fn same_as(&self, other: &Grid) -> bool {
        self.n == other.n && (self.half_width - other.half_width).abs() <= 1e-14 * self.half_width
    }

    /// `Σ conj(a) b dx`.
    pub fn inner(&self, a: &[Complex64], b: &[Complex64]) -> Complex64 {
        a.iter().zip(b).map(|(x, y)| x.conj() * y).sum::<Complex64>() * self.dx()
    }

    pub fn norm_sq(&self, a: &[Complex64]) -> f64 {
        a.iter().map(|v| v.norm_sqr()).sum::<f64>() * self.dx()
    }
}

/// Fraction of `|ψ̂|²` above three quarters of the Nyquist wavenumber.
pub fn spectral_tail(values: &[Complex64]) -> f64 {
    let n = values.len();
    let mut buf = values.to_vec();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let cut = 3 * n / 8;
    let mut total = 0.0;
    let mut tail = 0.0;
    for (k, v) in buf.iter().enumerate() {
        let kk = k.min(n - k);
        let e = v.norm_sqr();
        total += e;
        if kk > cut {
            tail += e;
        }
    }
    if total == 0.0 {
        0.0
    } else {
        tail / total
    }
}

/// `dψ/dx` by FFT on the periodic grid.
pub fn spectral_derivative(grid: &Grid, values: &[Complex64]) -> Result<Vec<Complex64>> {
    if values.len() != grid.n {
        return Err(Error::Dimension(format!(
            "{} samples on a {}-point grid",
            values.len(),
            grid.n
        )));
    }
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(grid.n);
    let inv = planner.plan_fft_inverse(grid.n);
    let mut buf = values.to_vec();
    fwd.process(&mut buf);
    let k = grid.wavenumbers();
    let scale = 1.0 / grid.n as f64;
    for (i, v) in buf.iter_mut().enumerate() {
        // the Nyquist mode has no well-defined derivative on a real grid
        let kk = if i == grid.n / 2 { 0.0 } else { k[i] };
        *v *= Complex64::new(0.0, kk * scale);
    }
    inv.process(&mut buf);
    Ok(buf)
}
