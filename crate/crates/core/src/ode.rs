//! Dormand-Prince 5(4) integrator with continuous (dense) output.
//!
//! Every accepted step keeps the coefficients of the fourth-order
//! interpolant, so a finished run can be evaluated anywhere in its time span
//! without re-integrating.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const C2: f64 = 0.2;
const C3: f64 = 0.3;
const C4: f64 = 0.8;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 0.2;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
// fifth-order weights; the seventh stage is evaluated at the new point (FSAL)
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

const SAFETY: f64 = 0.9;
// step ratio bounds and the stabilizing exponent of the controller
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
const BETA: f64 = 0.04;
const DEFAULT_MAX_STEPS: usize = 10_000_000;

/// A first-order system `y' = f(t, y)` over real state vectors.
pub trait OdeSystem {
    fn dim(&self) -> usize;
    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]);
}

/// Relative/absolute local error tolerance for the adaptive integrator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tolerance {
    pub rtol: f64,
    pub atol: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            rtol: 1e-10,
            atol: 1e-12,
        }
    }
}

impl Tolerance {
    pub fn new(rtol: f64, atol: f64) -> Self {
        Self { rtol, atol }
    }

    /// Relative tolerance `rtol` with the absolute tolerance kept 100x tighter.
    pub fn relative(rtol: f64) -> Self {
        Self {
            rtol,
            atol: rtol * 1e-2,
        }
    }

    pub fn scaled(self, factor: f64) -> Self {
        Self {
            rtol: self.rtol * factor,
            atol: self.atol * factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) || !self.rtol.is_finite() || !self.atol.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "tolerances must be positive and finite (rtol = {}, atol = {})",
                self.rtol, self.atol
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct DenseStep {
    t0: f64,
    h: f64,
    // five interpolation coefficient blocks, each `dim` long
    coeffs: Vec<f64>,
}

/// Continuous solution over `[t_start, t_end]`.
#[derive(Clone, Debug)]
pub struct DenseSolution {
    dim: usize,
    t_start: f64,
    y_start: Vec<f64>,
    steps: Vec<DenseStep>,
}

impl DenseSolution {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.steps.last().map_or(self.t_start, |s| s.t0 + s.h)
    }

    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn contains(&self, t: f64) -> bool {
        let span = (self.t_end() - self.t_start).abs().max(1.0);
        t >= self.t_start - 1e-12 * span && t <= self.t_end() + 1e-12 * span
    }

    /// Evaluates the interpolant at `t`, clamped to the integrated span.
    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        if self.steps.is_empty() {
            out.copy_from_slice(&self.y_start);
            return;
        }
        let idx = self
            .steps
            .partition_point(|s| s.t0 + s.h < t)
            .min(self.steps.len() - 1);
        let step = &self.steps[idx];
        let theta = ((t - step.t0) / step.h).clamp(0.0, 1.0);
        let theta1 = 1.0 - theta;
        let n = self.dim;
        let c = &step.coeffs;
        for i in 0..n {
            let r = |k: usize| c[k * n + i];
            out[i] = r(0) + theta * (r(1) + theta1 * (r(2) + theta * (r(3) + theta1 * r(4))));
        }
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(t, &mut out);
        out
    }

    /// Step boundaries `(t, y(t))`, starting with the initial point.
    pub fn nodes(&self) -> Vec<(f64, Vec<f64>)> {
        let n = self.dim;
        let mut out = Vec::with_capacity(self.steps.len() + 1);
        out.push((self.t_start, self.y_start.clone()));
        for s in &self.steps {
            let y1 = (0..n).map(|i| s.coeffs[i] + s.coeffs[n + i]).collect();
            out.push((s.t0 + s.h, y1));
        }
        out
    }

    /// Final state at `t_end`.
    pub fn final_state(&self) -> Vec<f64> {
        self.eval(self.t_end())
    }
}

/// Integrates `sys` from `t0` to `t1` (`t1 >= t0`) starting at `y0`.
pub fn integrate<S: OdeSystem + ?Sized>(
    sys: &S,
    t0: f64,
    y0: &[f64],
    t1: f64,
    tol: Tolerance,
) -> Result<DenseSolution> {
    integrate_with_limit(sys, t0, y0, t1, tol, DEFAULT_MAX_STEPS)
}

/// [`integrate`] with an explicit cap on attempted steps.
pub fn integrate_with_limit<S: OdeSystem + ?Sized>(
    sys: &S,
    t0: f64,
    y0: &[f64],
    t1: f64,
    tol: Tolerance,
    max_steps: usize,
) -> Result<DenseSolution> {
    tol.validate()?;
    let n = sys.dim();
    if y0.len() != n {
        return Err(Error::Dimension(format!(
            "initial state has {} components, system expects {n}",
            y0.len()
        )));
    }
    if !(t1 >= t0) || !t0.is_finite() || !t1.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "integration interval [{t0}, {t1}] must be finite and forward"
        )));
    }
    if let Some(i) = y0.iter().position(|v| !v.is_finite()) {
        return Err(Error::Integration {
            t: t0,
            reason: format!("initial state component {i} is not finite"),
        });
    }

    let mut solution = DenseSolution {
        dim: n,
        t_start: t0,
        y_start: y0.to_vec(),
        steps: Vec::new(),
    };
    if t1 == t0 {
        return Ok(solution);
    }

    let mut t = t0;
    let mut y = y0.to_vec();
    let mut k = vec![vec![0.0; n]; 8];
    let mut ytmp = vec![0.0; n];
    let mut ynew = vec![0.0; n];

    sys.rhs(t, &y, &mut k[1]);
    let mut h = initial_step(sys, t, &y, &k[1], t1 - t0, tol);
    let mut fac_old: f64 = 1e-4;
    let mut last_rejected = false;

    for _ in 0..max_steps {
        if t >= t1 {
            return Ok(solution);
        }
        let mut final_step = false;
        if t + 1.01 * h >= t1 {
            h = t1 - t;
            final_step = true;
        }
        if h <= 16.0 * f64::EPSILON * t.abs().max(1.0) {
            return Err(Error::Integration {
                t,
                reason: format!("step size underflow (h = {h:e})"),
            });
        }

        stage(sys, t + C2 * h, h, &y, &mut k, &[(1, A21)], &mut ytmp, 2);
        stage(sys, t + C3 * h, h, &y, &mut k, &[(1, A31), (2, A32)], &mut ytmp, 3);
        stage(sys, t + C4 * h, h, &y, &mut k, &[(1, A41), (2, A42), (3, A43)], &mut ytmp, 4);
        stage(
            sys,
            t + C5 * h,
            h,
            &y,
            &mut k,
            &[(1, A51), (2, A52), (3, A53), (4, A54)],
            &mut ytmp,
            5,
        );
        stage(
            sys,
            t + h,
            h,
            &y,
            &mut k,
            &[(1, A61), (2, A62), (3, A63), (4, A64), (5, A65)],
            &mut ytmp,
            6,
        );
        for i in 0..n {
            ynew[i] = y[i] + h * (A71 * k[1][i] + A73 * k[3][i] + A74 * k[4][i] + A75 * k[5][i] + A76 * k[6][i]);
        }
        sys.rhs(t + h, &ynew, &mut k[7]);

        let mut err = 0.0;
        let mut finite = true;
        for i in 0..n {
            let e = h
                * (E1 * k[1][i] + E3 * k[3][i] + E4 * k[4][i] + E5 * k[5][i] + E6 * k[6][i] + E7 * k[7][i]);
            let sc = tol.atol + tol.rtol * y[i].abs().max(ynew[i].abs());
            err += (e / sc).powi(2);
            finite &= ynew[i].is_finite() && k[7][i].is_finite();
        }
        if !finite {
            // shrink hard and retry; a genuinely singular right-hand side ends in underflow
            h *= FAC_MIN;
            last_rejected = true;
            continue;
        }
        let err = (err / n as f64).sqrt();
        let fac11 = err.powf(0.2 - 0.75 * BETA);

        if err <= 1.0 {
            solution.steps.push(DenseStep {
                t0: t,
                h,
                coeffs: dense_coefficients(h, &y, &ynew, &k),
            });
            t = if final_step { t1 } else { t + h };
            std::mem::swap(&mut y, &mut ynew);
            k.swap(1, 7);

            let fac = (fac11 / fac_old.powf(BETA) / SAFETY).clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
            fac_old = err.max(1e-4);
            let mut h_new = h / fac;
            if last_rejected {
                h_new = h_new.min(h);
            }
            h = h_new;
            last_rejected = false;
        } else {
            h /= (fac11 / SAFETY).min(1.0 / FAC_MIN);
            last_rejected = true;
        }
    }
    if t >= t1 {
        return Ok(solution);
    }
    Err(Error::Integration {
        t,
        reason: format!("exceeded {max_steps} steps"),
    })
}

#[allow(clippy::too_many_arguments)]
fn stage<S: OdeSystem + ?Sized>(
    sys: &S,
    t: f64,
    h: f64,
    y: &[f64],
    k: &mut [Vec<f64>],
    weights: &[(usize, f64)],
    ytmp: &mut [f64],
    target: usize,
) {
    for i in 0..y.len() {
        let mut acc = 0.0;
        for &(j, a) in weights {
            acc += a * k[j][i];
        }
        ytmp[i] = y[i] + h * acc;
    }
    sys.rhs(t, ytmp, &mut k[target]);
}

// k[1..=6] are the step stages and k[7] the derivative at the new point.
fn dense_coefficients(h: f64, y: &[f64], ynew: &[f64], k: &[Vec<f64>]) -> Vec<f64> {
    let n = y.len();
    let mut coeffs = vec![0.0; 5 * n];
    for i in 0..n {
        let ydiff = ynew[i] - y[i];
        let bspl = h * k[1][i] - ydiff;
        coeffs[i] = y[i];
        coeffs[n + i] = ydiff;
        coeffs[2 * n + i] = bspl;
        coeffs[3 * n + i] = ydiff - h * k[7][i] - bspl;
        coeffs[4 * n + i] =
            h * (D1 * k[1][i] + D3 * k[3][i] + D4 * k[4][i] + D5 * k[5][i] + D6 * k[6][i] + D7 * k[7][i]);
    }
    coeffs
}

fn initial_step<S: OdeSystem + ?Sized>(
    sys: &S,
    t: f64,
    y: &[f64],
    f0: &[f64],
    span: f64,
    tol: Tolerance,
) -> f64 {
    let n = y.len();
    let sc: Vec<f64> = y.iter().map(|v| tol.atol + tol.rtol * v.abs()).collect();
    let rms = |v: &[f64]| {
        (v.iter().zip(&sc).map(|(a, s)| (a / s).powi(2)).sum::<f64>() / n as f64).sqrt()
    };
    let d0 = rms(y);
    let d1 = rms(f0);
    let mut h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    h0 = h0.min(span);
    let y1: Vec<f64> = y.iter().zip(f0).map(|(a, b)| a + h0 * b).collect();
    let mut f1 = vec![0.0; n];
    sys.rhs(t + h0, &y1, &mut f1);
    let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| (a - b) / h0).collect();
    let d2 = rms(&diff);
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    (100.0 * h0).min(h1).min(span)
}

/// Adapter turning a closure into an [`OdeSystem`].
pub struct FnSystem<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(f64, &[f64], &mut [f64])> FnSystem<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(f64, &[f64], &mut [f64])> OdeSystem for FnSystem<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) {
        (self.f)(t, y, dy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oscillator() -> FnSystem<impl Fn(f64, &[f64], &mut [f64])> {
        FnSystem::new(2, |_t: f64, y: &[f64], d: &mut [f64]| {
            d[0] = y[1];
            d[1] = -y[0];
        })
    }

    #[test]
    fn harmonic_oscillator_tracks_cosine() {
        let sol = integrate(&oscillator(), 0.0, &[1.0, 0.0], 20.0, Tolerance::default()).unwrap();
        let mut worst: f64 = 0.0;
        for j in 0..=400 {
            let t = 0.05 * j as f64;
            let y = sol.eval(t);
            worst = worst.max((y[0] - t.cos()).abs()).max((y[1] + t.sin()).abs());
        }
        assert!(worst < 1e-9, "{worst:e}");
        assert_eq!(sol.t_end(), 20.0);
    }

    #[test]
    fn error_follows_tolerance() {
        let t_end = 10.0 * std::f64::consts::TAU;
        let mut errors = Vec::new();
        for rtol in [1e-6, 1e-8, 1e-10] {
            let sol = integrate(&oscillator(), 0.0, &[1.0, 0.0], t_end, Tolerance::relative(rtol)).unwrap();
            errors.push((sol.final_state()[0] - 1.0).abs());
        }
        assert!(errors[0] > errors[1] && errors[1] > errors[2], "{errors:?}");
        assert!(errors[2] < 1e-8);
    }

    #[test]
    fn dense_output_matches_nodes() {
        let sol = integrate(&oscillator(), 0.0, &[1.0, 0.0], 5.0, Tolerance::default()).unwrap();
        for (t, y) in sol.nodes() {
            let e = sol.eval(t);
            assert!((e[0] - y[0]).abs() < 1e-14 && (e[1] - y[1]).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_bad_input() {
        let sys = oscillator();
        assert!(integrate(&sys, 0.0, &[1.0], 1.0, Tolerance::default()).is_err());
        assert!(integrate(&sys, 1.0, &[1.0, 0.0], 0.0, Tolerance::default()).is_err());
        assert!(integrate(&sys, 0.0, &[f64::NAN, 0.0], 1.0, Tolerance::default()).is_err());
        assert!(integrate(&sys, 0.0, &[1.0, 0.0], 1.0, Tolerance::new(0.0, 1e-12)).is_err());
        assert!(integrate_with_limit(&sys, 0.0, &[1.0, 0.0], 100.0, Tolerance::default(), 3).is_err());
    }

    #[test]
    fn blow_up_is_reported() {
        let sys = FnSystem::new(1, |_t: f64, y: &[f64], d: &mut [f64]| d[0] = y[0] * y[0]);
        assert!(integrate(&sys, 0.0, &[1.0], 2.0, Tolerance::default()).is_err());
    }
}
