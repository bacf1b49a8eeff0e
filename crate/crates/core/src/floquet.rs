//! Hill equation `ü + W(t) u = 0` with a periodic coefficient: integration of
//! the complex solution, monodromy and Floquet exponents, stability charts,
//! the `ζ = exp(α + iτ)` scaling functions and the quasienergy ladder.

use std::f64::consts::{PI, TAU};
use std::io::{self, Write};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode::{self, DenseSolution, OdeSystem, Tolerance};

/// Half-width of the band `||trace| - 2| <= MARGINAL_BAND` classified as marginal.
pub const MARGINAL_BAND: f64 = 1e-8;

/// Uniformly sampled periodic function with trigonometric interpolation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PeriodicSamples {
    period: f64,
    values: Vec<f64>,
    #[serde(skip)]
    cos_coeffs: Vec<f64>,
    #[serde(skip)]
    sin_coeffs: Vec<f64>,
}

impl PeriodicSamples {
    /// `values[k]` is the function at `t = k * period / values.len()`.
    pub fn new(values: Vec<f64>, period: f64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidParameter("periodic samples are empty".into()));
        }
        if !(period > 0.0 && period.is_finite()) {
            return Err(Error::InvalidParameter(format!("period must be positive, got {period}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("periodic samples must be finite".into()));
        }
        let n = values.len();
        let harmonics = n / 2;
        let mut cos_coeffs = vec![0.0; harmonics + 1];
        let mut sin_coeffs = vec![0.0; harmonics + 1];
        for j in 0..=harmonics {
            let (mut c, mut s) = (0.0, 0.0);
            for (k, v) in values.iter().enumerate() {
                let arg = TAU * (j * k) as f64 / n as f64;
                c += v * arg.cos();
                s += v * arg.sin();
            }
            let weight = if j == 0 || (n % 2 == 0 && j == harmonics) {
                1.0 / n as f64
            } else {
                2.0 / n as f64
            };
            cos_coeffs[j] = weight * c;
            sin_coeffs[j] = weight * s;
        }
        Ok(Self {
            period,
            values,
            cos_coeffs,
            sin_coeffs,
        })
    }

    pub fn from_fn(f: impl Fn(f64) -> f64, n: usize, period: f64) -> Result<Self> {
        let values = (0..n).map(|k| f(period * k as f64 / n as f64)).collect();
        Self::new(values, period)
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, t: f64) -> f64 {
        let w = TAU / self.period;
        self.cos_coeffs
            .iter()
            .zip(&self.sin_coeffs)
            .enumerate()
            .map(|(j, (c, s))| {
                let arg = w * j as f64 * t;
                c * arg.cos() + s * arg.sin()
            })
            .sum()
    }

    pub fn derivative(&self, t: f64) -> f64 {
        let w = TAU / self.period;
        self.cos_coeffs
            .iter()
            .zip(&self.sin_coeffs)
            .enumerate()
            .map(|(j, (c, s))| {
                let k = w * j as f64;
                let arg = k * t;
                k * (s * arg.cos() - c * arg.sin())
            })
            .sum()
    }
}

/// How the periodic coefficient `W(t)` is built.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum HillMode {
    /// `W(t) = (Ω²/4)(a + 2 q_M cos Ωt)`.
    Quadrupole,
    /// `W(t) = λ(t) - 2ċ(t) - 4c(t)²` from sampled period data.
    Generalized {
        lambda: PeriodicSamples,
        c: PeriodicSamples,
    },
}

/// Trap drive coefficients.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HillParameters {
    pub a: f64,
    pub q_m: f64,
    /// Drive angular frequency Ω.
    pub drive: f64,
    pub mode: HillMode,
}

impl HillParameters {
    pub fn quadrupole(a: f64, q_m: f64, drive: f64) -> Result<Self> {
        let params = Self {
            a,
            q_m,
            drive,
            mode: HillMode::Quadrupole,
        };
        params.validate()?;
        Ok(params)
    }

    /// Generalized mode; both sample sets must span one drive period `2π/drive`.
    pub fn generalized(lambda: PeriodicSamples, c: PeriodicSamples, drive: f64) -> Result<Self> {
        let params = Self {
            a: 0.0,
            q_m: 0.0,
            drive,
            mode: HillMode::Generalized { lambda, c },
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.drive > 0.0 && self.drive.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "drive frequency must be positive, got {}",
                self.drive
            )));
        }
        if !self.a.is_finite() || !self.q_m.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "a and q_M must be finite (a = {}, q_M = {})",
                self.a, self.q_m
            )));
        }
        if let HillMode::Generalized { lambda, c } = &self.mode {
            let period = self.period();
            for (name, samples) in [("lambda", lambda), ("c", c)] {
                if ((samples.period() - period) / period).abs() > 1e-12 {
                    return Err(Error::InvalidParameter(format!(
                        "{name} samples have period {}, drive period is {period}",
                        samples.period()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn period(&self) -> f64 {
        TAU / self.drive
    }

    /// The control function `c(t)` (identically zero in quadrupole mode).
    pub fn control_c(&self, t: f64) -> f64 {
        match &self.mode {
            HillMode::Quadrupole => 0.0,
            HillMode::Generalized { c, .. } => c.value(t),
        }
    }
}

/// Periodic coefficient `W(t)` of the Hill equation.
pub fn hill_coefficient(t: f64, params: &HillParameters) -> f64 {
    match &params.mode {
        HillMode::Quadrupole => {
            let w = params.drive;
            0.25 * w * w * (params.a + 2.0 * params.q_m * (w * t).cos())
        }
        HillMode::Generalized { lambda, c } => {
            let cv = c.value(t);
            lambda.value(t) - 2.0 * c.derivative(t) - 4.0 * cv * cv
        }
    }
}

struct HillSystem<'a> {
    params: &'a HillParameters,
}

impl OdeSystem for HillSystem<'_> {
    fn dim(&self) -> usize {
        4
    }

    // state: [Re u, Im u, Re u̇, Im u̇]
    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) {
        let w = hill_coefficient(t, self.params);
        dy[0] = y[2];
        dy[1] = y[3];
        dy[2] = -w * y[0];
        dy[3] = -w * y[1];
    }
}

/// Continuous complex solution of the Hill equation.
#[derive(Clone, Debug)]
pub struct HillSolution {
    params: HillParameters,
    dense: DenseSolution,
    u0: Complex64,
    udot0: Complex64,
    node_times: Vec<f64>,
    node_phases: Vec<f64>,
}

impl HillSolution {
    /// Integrates from `t = 0` with `u(0) = u0`, `u̇(0) = udot0` up to `t_end`.
    pub fn solve(
        params: &HillParameters,
        u0: Complex64,
        udot0: Complex64,
        t_end: f64,
        tol: Tolerance,
    ) -> Result<Self> {
        params.validate()?;
        if !(t_end >= 0.0) {
            return Err(Error::InvalidParameter(format!("t_end must be non-negative, got {t_end}")));
        }
        let sys = HillSystem { params };
        let dense = ode::integrate(&sys, 0.0, &[u0.re, u0.im, udot0.re, udot0.im], t_end, tol)?;
        let mut solution = Self {
            params: params.clone(),
            dense,
            u0,
            udot0,
            node_times: Vec::new(),
            node_phases: Vec::new(),
        };
        solution.unwind_node_phases()?;
        Ok(solution)
    }

    /// The standard solution `u(0) = 1`, `u̇(0) = iω`.
    pub fn standard(params: &HillParameters, omega: f64, t_end: f64, tol: Tolerance) -> Result<Self> {
        Self::solve(params, Complex64::new(1.0, 0.0), Complex64::new(0.0, omega), t_end, tol)
    }

    fn unwind_node_phases(&mut self) -> Result<()> {
        let nodes = self.dense.nodes();
        self.node_times = Vec::with_capacity(nodes.len());
        self.node_phases = Vec::with_capacity(nodes.len());
        let mut phase = 0.0;
        let mut prev: Option<(f64, Complex64)> = None;
        for (t, y) in nodes {
            let u = Complex64::new(y[0], y[1]);
            if u.norm() == 0.0 || !u.norm().is_finite() {
                return Err(Error::BranchFailure { t });
            }
            match prev {
                None => phase = u.arg(),
                Some((tp, up)) => phase += phase_increment(|s| self.u(s), tp, up, t, u, 24)?,
            }
            self.node_times.push(t);
            self.node_phases.push(phase);
            prev = Some((t, u));
        }
        Ok(())
    }

    pub fn params(&self) -> &HillParameters {
        &self.params
    }

    pub fn t_end(&self) -> f64 {
        self.dense.t_end()
    }

    pub fn initial(&self) -> (Complex64, Complex64) {
        (self.u0, self.udot0)
    }

    /// ω with `u* u̇ - u̇* u = 2iω`, fixed by the initial data.
    pub fn omega(&self) -> f64 {
        (self.u0.conj() * self.udot0).im
    }

    pub fn contains(&self, t: f64) -> bool {
        self.dense.contains(t)
    }

    pub fn state(&self, t: f64) -> (Complex64, Complex64) {
        let mut y = [0.0; 4];
        self.dense.eval_into(t, &mut y);
        (Complex64::new(y[0], y[1]), Complex64::new(y[2], y[3]))
    }

    pub fn u(&self, t: f64) -> Complex64 {
        self.state(t).0
    }

    pub fn u_dot(&self, t: f64) -> Complex64 {
        self.state(t).1
    }

    /// Continuously unwound `arg u(t)`, starting from the principal value at `t = 0`.
    pub fn phase(&self, t: f64) -> Result<f64> {
        let k = self
            .node_times
            .partition_point(|&s| s <= t)
            .saturating_sub(1)
            .min(self.node_times.len() - 1);
        let (tk, phase_k) = (self.node_times[k], self.node_phases[k]);
        let u = self.u(t);
        if u.norm() == 0.0 {
            return Err(Error::BranchFailure { t });
        }
        if t == tk {
            return Ok(phase_k);
        }
        Ok(phase_k + phase_increment(|s| self.u(s), tk, self.u(tk), t, u, 24)?)
    }

    /// Unwound phase of the linear combination `c_re * Re-solution + c_im * Im-solution`.
    ///
    /// With `u = y₁ + i y₂` built from two real solutions, this tracks
    /// `c_re y₁(t) + c_im y₂(t)` over `[t0, t1]`.
    pub fn combination_winding(&self, c_re: Complex64, c_im: Complex64, t0: f64, t1: f64) -> Result<f64> {
        let eval = |s: f64| {
            let u = self.u(s);
            c_re * u.re + c_im * u.im
        };
        let mut total = 0.0;
        let mut tp = t0;
        let mut yp = eval(t0);
        for &tn in self.node_times.iter().filter(|&&s| s > t0 && s < t1).chain(std::iter::once(&t1)) {
            let yn = eval(tn);
            if yn.norm() == 0.0 {
                return Err(Error::BranchFailure { t: tn });
            }
            total += phase_increment(eval, tp, yp, tn, yn, 24)?;
            tp = tn;
            yp = yn;
        }
        Ok(total)
    }

    /// Samples `(u, u̇)` at `times` and measures the Wronskian drift.
    pub fn sample(&self, times: &[f64]) -> SolutionTrace {
        let omega = self.omega();
        let mut u = Vec::with_capacity(times.len());
        let mut u_dot = Vec::with_capacity(times.len());
        let mut drift: f64 = 0.0;
        for &t in times {
            let (ut, udt) = self.state(t);
            drift = drift.max(wronskian_residual(ut, udt, omega));
            u.push(ut);
            u_dot.push(udt);
        }
        SolutionTrace {
            times: times.to_vec(),
            u,
            u_dot,
            omega,
            wronskian_drift: drift,
        }
    }
}

/// `|u* u̇ - u̇* u - 2iω|`.
pub fn wronskian_residual(u: Complex64, u_dot: Complex64, omega: f64) -> f64 {
    let w = u.conj() * u_dot - u_dot.conj() * u;
    (w - Complex64::new(0.0, 2.0 * omega)).norm()
}

fn wrap(angle: f64) -> f64 {
    let mut a = angle % TAU;
    if a > PI {
        a -= TAU;
    } else if a <= -PI {
        a += TAU;
    }
    a
}

/// Phase change of a continuous complex curve between two points, refined by
/// bisection until every sub-increment is well below π.
fn phase_increment(
    f: impl Fn(f64) -> Complex64 + Copy,
    ta: f64,
    za: Complex64,
    tb: f64,
    zb: Complex64,
    depth: u32,
) -> Result<f64> {
    let d = wrap(zb.arg() - za.arg());
    if d.abs() < 0.5 {
        return Ok(d);
    }
    if depth == 0 {
        return Err(Error::BranchFailure { t: 0.5 * (ta + tb) });
    }
    let tm = 0.5 * (ta + tb);
    let zm = f(tm);
    if zm.norm() == 0.0 {
        return Err(Error::BranchFailure { t: tm });
    }
    Ok(phase_increment(f, ta, za, tm, zm, depth - 1)? + phase_increment(f, tm, zm, tb, zb, depth - 1)?)
}

/// Sampled complex Hill solution with its Wronskian check.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolutionTrace {
    pub times: Vec<f64>,
    pub u: Vec<Complex64>,
    pub u_dot: Vec<Complex64>,
    pub omega: f64,
    pub wronskian_drift: f64,
}

/// `count` equally spaced times on `[0, t_end]` (both ends included).
pub fn uniform_times(t_end: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![t_end],
        _ => (0..count).map(|k| t_end * k as f64 / (count - 1) as f64).collect(),
    }
}

/// Integrates `u(0) = 1`, `u̇(0) = iω` and samples it at `times` (sorted, non-negative).
pub fn integrate_hill(
    params: &HillParameters,
    omega: f64,
    times: &[f64],
    tol: Tolerance,
) -> Result<SolutionTrace> {
    if !omega.is_finite() {
        return Err(Error::InvalidParameter(format!("omega must be finite, got {omega}")));
    }
    if times.windows(2).any(|w| w[1] < w[0]) || times.first().is_some_and(|&t| t < 0.0) {
        return Err(Error::InvalidParameter("sample times must be sorted and non-negative".into()));
    }
    let t_end = times.last().copied().unwrap_or(0.0);
    let solution = HillSolution::standard(params, omega, t_end, tol)?;
    Ok(solution.sample(times))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stability {
    Stable,
    Marginal,
    Unstable,
}

impl Stability {
    pub fn classify(trace: f64) -> Self {
        let excess = trace.abs() - 2.0;
        if excess.abs() <= MARGINAL_BAND {
            Stability::Marginal
        } else if excess < 0.0 {
            Stability::Stable
        } else {
            Stability::Unstable
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Stability::Stable => "stable",
            Stability::Marginal => "marginal",
            Stability::Unstable => "unstable",
        }
    }
}

/// One-period monodromy and its Floquet exponent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FloquetResult {
    /// Rows `(y, ẏ)(T)` for the fundamental solutions `(1,0)` and `(0,1)` as columns.
    pub monodromy: [[f64; 2]; 2],
    pub trace: f64,
    pub determinant: f64,
    pub stability: Stability,
    /// Phase rate when stable or marginal, growth rate when unstable.
    pub mu: f64,
    pub period: f64,
}

impl FloquetResult {
    /// `ζ̇(0)/ζ(0)` of the Floquet solution with positive Wronskian (stable points only).
    pub fn floquet_slope(&self) -> Option<Complex64> {
        if self.stability != Stability::Stable {
            return None;
        }
        let (_, v) = positive_floquet_vector(&self.monodromy, self.trace);
        Some(v[1] / v[0])
    }

    /// `ω` such that `u(0) = 1`, `u̇(0) = iω` is the Floquet solution.
    ///
    /// Exists when the monodromy has equal diagonal entries, which holds for
    /// coefficients even about `t = 0` such as the quadrupole drive.
    pub fn floquet_omega(&self) -> Result<f64> {
        let slope = self.floquet_slope().ok_or(Error::NoPseudopotential { trace: self.trace })?;
        if slope.re.abs() > 1e-7 * slope.norm().max(1.0) {
            return Err(Error::InvalidParameter(format!(
                "Floquet solution has complex initial slope {slope}; no real omega"
            )));
        }
        Ok(slope.im)
    }
}

// eigenvector (v1, v2) of the monodromy for e^{±iθ} whose Wronskian Im(v1* v2) is positive,
// together with the signed angle.
fn positive_floquet_vector(m: &[[f64; 2]; 2], trace: f64) -> (f64, [Complex64; 2]) {
    let theta = rotation_angle(m, trace);
    let lambda = Complex64::from_polar(1.0, theta);
    let v = if m[0][1].abs() >= m[1][0].abs() {
        [Complex64::new(m[0][1], 0.0), lambda - m[0][0]]
    } else {
        [lambda - m[1][1], Complex64::new(m[1][0], 0.0)]
    };
    if (v[0].conj() * v[1]).im >= 0.0 {
        (theta, v)
    } else {
        (-theta, [v[0].conj(), v[1].conj()])
    }
}

// Angle θ ∈ [0, π] of the multipliers e^{±iθ}. sin²θ is taken from the off-diagonal
// form -M12 M21 - (M11 - M22)²/4, which stays accurate where arccos(trace/2) does not.
fn rotation_angle(m: &[[f64; 2]; 2], trace: f64) -> f64 {
    let sin_sq = -m[0][1] * m[1][0] - 0.25 * (m[0][0] - m[1][1]).powi(2);
    sin_sq.max(0.0).sqrt().atan2(0.5 * trace)
}

fn nearest_branch(angle: f64, winding: f64) -> f64 {
    angle + TAU * ((winding - angle) / TAU).round()
}

/// Integrates the fundamental real solutions over one period and classifies stability.
pub fn monodromy(params: &HillParameters, tol: Tolerance) -> Result<FloquetResult> {
    let period = params.period();
    // u = y1 + i y2 carries both fundamental solutions at once
    let solution = HillSolution::solve(
        params,
        Complex64::new(1.0, 0.0),
        Complex64::new(0.0, 1.0),
        period,
        tol,
    )?;
    let (u, ud) = solution.state(period);
    let m = [[u.re, u.im], [ud.re, ud.im]];
    let trace = m[0][0] + m[1][1];
    let determinant = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if !trace.is_finite() {
        return Err(Error::Integration {
            t: period,
            reason: "monodromy is not finite".into(),
        });
    }
    let stability = Stability::classify(trace);
    let mu = match stability {
        Stability::Stable => {
            let (angle, v) = positive_floquet_vector(&m, trace);
            let winding = solution.combination_winding(v[0], v[1], 0.0, period)?;
            nearest_branch(angle, winding) / period
        }
        Stability::Marginal => {
            let angle = rotation_angle(&m, trace);
            let winding = solution.phase(period)? - solution.phase(0.0)?;
            let plus = nearest_branch(angle, winding);
            let minus = nearest_branch(-angle, winding);
            let best = if (plus - winding).abs() <= (minus - winding).abs() { plus } else { minus };
            best / period
        }
        Stability::Unstable => {
            let half = 0.5 * trace.abs();
            let disc = (half * half - determinant).max(0.0).sqrt();
            (half + disc).ln() / period
        }
    };
    Ok(FloquetResult {
        monodromy: m,
        trace,
        determinant,
        stability,
        mu,
        period,
    })
}

/// Inclusive linear range `lo:hi:count`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanRange {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl ScanRange {
    pub fn new(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidParameter("scan range needs at least one point".into()));
        }
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidParameter(format!("scan range [{lo}, {hi}] must be finite")));
        }
        Ok(Self { lo, hi, count })
    }

    pub fn values(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![self.lo];
        }
        (0..self.count)
            .map(|k| self.lo + (self.hi - self.lo) * k as f64 / (self.count - 1) as f64)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellState {
    Stable,
    Marginal,
    Unstable,
    Failed,
}

impl CellState {
    pub fn as_str(&self) -> &'static str {
        match self {
            CellState::Stable => "stable",
            CellState::Marginal => "marginal",
            CellState::Unstable => "unstable",
            CellState::Failed => "failed",
        }
    }

    /// Graymap level: stable 255, failed 128, unstable and marginal 0.
    pub fn gray_level(&self) -> u8 {
        match self {
            CellState::Stable => 255,
            CellState::Failed => 128,
            CellState::Marginal | CellState::Unstable => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub a: f64,
    pub q_m: f64,
    pub trace: f64,
    pub mu: f64,
    pub state: CellState,
}

/// Stability raster over the `(a, q_M)` plane, row-major in `a`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityGrid {
    pub a_values: Vec<f64>,
    pub q_values: Vec<f64>,
    pub drive: f64,
    pub cells: Vec<GridCell>,
}

impl StabilityGrid {
    pub fn cell(&self, ia: usize, iq: usize) -> &GridCell {
        &self.cells[ia * self.q_values.len() + iq]
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "a,q_M,trace,mu,class")?;
        for c in &self.cells {
            writeln!(w, "{},{},{},{},{}", c.a, c.q_m, c.trace, c.mu, c.state.as_str())?;
        }
        Ok(())
    }

    /// Binary 8-bit graymap; columns follow `q_M`, the top row is the largest `a`.
    pub fn write_pgm<W: Write>(&self, mut w: W) -> io::Result<()> {
        let (rows, cols) = (self.a_values.len(), self.q_values.len());
        write!(w, "P5\n{cols} {rows}\n255\n")?;
        let mut bytes = Vec::with_capacity(rows * cols);
        for ia in (0..rows).rev() {
            for iq in 0..cols {
                bytes.push(self.cell(ia, iq).state.gray_level());
            }
        }
        w.write_all(&bytes)
    }
}

/// Rasterizes the stability chart; cells are independent and evaluated in parallel.
pub fn stability_scan(
    a_range: ScanRange,
    q_range: ScanRange,
    drive: f64,
    tol: Tolerance,
) -> Result<StabilityGrid> {
    HillParameters::quadrupole(0.0, 0.0, drive)?;
    tol.validate()?;
    let a_values = a_range.values();
    let q_values = q_range.values();
    let n_q = q_values.len();
    let cells = (0..a_values.len() * n_q)
        .into_par_iter()
        .map(|idx| {
            let (a, q_m) = (a_values[idx / n_q], q_values[idx % n_q]);
            let outcome = HillParameters::quadrupole(a, q_m, drive).and_then(|p| monodromy(&p, tol));
            match outcome {
                Ok(r) => GridCell {
                    a,
                    q_m,
                    trace: r.trace,
                    mu: r.mu,
                    state: match r.stability {
                        Stability::Stable => CellState::Stable,
                        Stability::Marginal => CellState::Marginal,
                        Stability::Unstable => CellState::Unstable,
                    },
                },
                Err(_) => GridCell {
                    a,
                    q_m,
                    trace: f64::NAN,
                    mu: f64::NAN,
                    state: CellState::Failed,
                },
            }
        })
        .collect();
    Ok(StabilityGrid {
        a_values,
        q_values,
        drive,
        cells,
    })
}

/// Locates `|trace| = 2` between `q_lo` (stable) and `q_hi` (unstable) at fixed `a`.
pub fn stability_edge(a: f64, q_lo: f64, q_hi: f64, drive: f64, tol: Tolerance, q_tol: f64) -> Result<f64> {
    let excess = |q: f64| -> Result<f64> {
        let r = monodromy(&HillParameters::quadrupole(a, q, drive)?, tol)?;
        Ok(r.trace.abs() - 2.0)
    };
    let (mut lo, mut hi) = (q_lo, q_hi);
    let (f_lo, f_hi) = (excess(lo)?, excess(hi)?);
    if f_lo.signum() == f_hi.signum() {
        return Err(Error::InvalidParameter(format!(
            "no stability edge bracketed in q_M ∈ [{q_lo}, {q_hi}]"
        )));
    }
    while hi - lo > q_tol {
        let mid = 0.5 * (lo + hi);
        if excess(mid)?.signum() == f_lo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// `α`, `β`, `τ` along a sampled solution `ζ = exp(α + iτ)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScalingTrace {
    pub times: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub tau: Vec<f64>,
}

impl ScalingTrace {
    pub fn zeta(&self, k: usize) -> Complex64 {
        Complex64::from_polar(self.alpha[k].exp(), self.tau[k])
    }
}

/// Splits `ζ` into modulus and unwound phase; `β = (α̇ - 4c)/2` uses `α̇ = Re(ζ̇/ζ)`.
pub fn scaling_parameters(trace: &SolutionTrace, c: impl Fn(f64) -> f64) -> Result<ScalingTrace> {
    let n = trace.times.len();
    let mut alpha = Vec::with_capacity(n);
    let mut beta = Vec::with_capacity(n);
    let mut tau: Vec<f64> = Vec::with_capacity(n);
    let mut prev_rate = 0.0;
    for k in 0..n {
        let (t, z, zd) = (trace.times[k], trace.u[k], trace.u_dot[k]);
        if z.norm() == 0.0 || !z.norm().is_finite() {
            return Err(Error::BranchFailure { t });
        }
        let log_rate = zd / z;
        alpha.push(z.norm().ln());
        beta.push(0.5 * (log_rate.re - 4.0 * c(t)));
        let arg = z.arg();
        let unwound = match tau.last() {
            None => arg,
            Some(&last) => {
                // trapezoid prediction of the phase picks the 2π branch
                let predicted = last + 0.5 * (t - trace.times[k - 1]) * (prev_rate + log_rate.im);
                arg + TAU * ((predicted - arg) / TAU).round()
            }
        };
        tau.push(unwound);
        prev_rate = log_rate.im;
    }
    Ok(ScalingTrace {
        times: trace.times.clone(),
        alpha,
        beta,
        tau,
    })
}

/// `ε_j = μ(2j + E₀)` for `j = 0..=j_max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuasienergySpectrum {
    pub mu: f64,
    pub e0: f64,
    pub levels: Vec<f64>,
}

impl QuasienergySpectrum {
    /// Phase a quasienergy state accumulates over one period `T`: `ε_j T / 2`.
    pub fn phase_per_period(&self, j: usize, period: f64) -> f64 {
        0.5 * self.levels[j] * period
    }
}

pub fn quasienergy_spectrum(mu: f64, e0: f64, j_max: usize) -> QuasienergySpectrum {
    QuasienergySpectrum {
        mu,
        e0,
        levels: (0..=j_max).map(|j| mu * (2.0 * j as f64 + e0)).collect(),
    }
}

/// Least-squares `E₀` from per-period phase lags `(n, Φ_n)` with `Φ_n = μT(2n + E₀)/2`.
///
/// Each lag may be given modulo 2π; it is unwound onto the ladder anchored at the
/// lowest supplied level before fitting.
pub fn fit_e0(mu: f64, period: f64, phases: &[(usize, f64)]) -> Result<f64> {
    if phases.is_empty() || mu == 0.0 {
        return Err(Error::InvalidParameter("need at least one phase and nonzero mu".into()));
    }
    let step = mu * period;
    let mut sorted = phases.to_vec();
    sorted.sort_by_key(|p| p.0);
    let (n0, phi0) = sorted[0];
    let mut sum = 0.0;
    for &(n, phi) in &sorted {
        let predicted = phi0 + step * (n - n0) as f64;
        let unwound = phi + TAU * ((predicted - phi) / TAU).round();
        sum += 2.0 * unwound / step - 2.0 * n as f64;
    }
    Ok(sum / sorted.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn coefficient_examples() {
        let p = HillParameters::quadrupole(1.0, 0.0, 2.0).unwrap();
        assert_abs_diff_eq!(hill_coefficient(0.0, &p), 1.0, epsilon = 1e-15);
        let zero = HillParameters::quadrupole(0.0, 0.0, 2.0).unwrap();
        for t in [0.0, 0.3, 7.1] {
            assert_eq!(hill_coefficient(t, &zero), 0.0);
        }
        let p = HillParameters::quadrupole(0.2, 0.1, 2.0).unwrap();
        assert_abs_diff_eq!(hill_coefficient(PI / 2.0, &p), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn coefficient_is_periodic() {
        let p = HillParameters::quadrupole(0.13, 0.37, 3.0).unwrap();
        for k in 0..20 {
            let t = 0.17 * k as f64;
            assert_abs_diff_eq!(
                hill_coefficient(t, &p),
                hill_coefficient(t + p.period(), &p),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn rejects_bad_drive() {
        assert!(HillParameters::quadrupole(0.0, 0.1, 0.0).is_err());
        assert!(HillParameters::quadrupole(0.0, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn trig_interpolation_reproduces_band_limited_functions() {
        let period = 2.0;
        let w = TAU / period;
        let f = |t: f64| 0.3 + 0.7 * (w * t).cos() - 0.2 * (3.0 * w * t).sin();
        let df = |t: f64| -0.7 * w * (w * t).sin() - 0.6 * w * (3.0 * w * t).cos();
        let s = PeriodicSamples::from_fn(f, 16, period).unwrap();
        for k in 0..13 {
            let t = 0.137 * k as f64;
            assert_abs_diff_eq!(s.value(t), f(t), epsilon = 1e-12);
            assert_abs_diff_eq!(s.derivative(t), df(t), epsilon = 1e-11);
        }
    }

    #[test]
    fn generalized_mode_matches_quadrupole_when_c_vanishes() {
        let drive = 2.0;
        let quad = HillParameters::quadrupole(0.1, 0.3, drive).unwrap();
        let period = quad.period();
        let lambda = PeriodicSamples::from_fn(|t| hill_coefficient(t, &quad), 8, period).unwrap();
        let c = PeriodicSamples::new(vec![0.0; 8], period).unwrap();
        let general = HillParameters::generalized(lambda, c, drive).unwrap();
        for k in 0..10 {
            let t = 0.31 * k as f64;
            assert_abs_diff_eq!(hill_coefficient(t, &general), hill_coefficient(t, &quad), epsilon = 1e-12);
        }
        let a = monodromy(&quad, Tolerance::default()).unwrap();
        let b = monodromy(&general, Tolerance::default()).unwrap();
        assert_abs_diff_eq!(a.trace, b.trace, epsilon = 1e-9);
    }

    #[test]
    fn generalized_coefficient_includes_control_terms() {
        let drive = 1.0;
        let period = TAU;
        let lambda = PeriodicSamples::new(vec![2.0; 4], period).unwrap();
        let c = PeriodicSamples::from_fn(|t| 0.1 * t.cos(), 8, period).unwrap();
        let p = HillParameters::generalized(lambda, c, drive).unwrap();
        let t: f64 = 0.4;
        let expected = 2.0 + 0.2 * t.sin() - 4.0 * (0.1 * t.cos()).powi(2);
        assert_abs_diff_eq!(hill_coefficient(t, &p), expected, epsilon = 1e-12);
    }

    #[test]
    fn generalized_mode_rejects_wrong_period() {
        let lambda = PeriodicSamples::new(vec![1.0; 4], 1.0).unwrap();
        let c = PeriodicSamples::new(vec![0.0; 4], 1.0).unwrap();
        assert!(HillParameters::generalized(lambda, c, 2.0).is_err());
    }

    #[test]
    fn harmonic_solution_is_exponential() {
        let omega = 0.7;
        let drive = 2.0;
        let a = 4.0 * omega * omega / (drive * drive);
        let p = HillParameters::quadrupole(a, 0.0, drive).unwrap();
        let times = uniform_times(20.0, 81);
        let trace = integrate_hill(&p, omega, &times, Tolerance::default()).unwrap();
        for (t, u) in trace.times.iter().zip(&trace.u) {
            let exact = Complex64::from_polar(1.0, omega * t);
            assert!((u - exact).norm() < 1e-9, "t = {t}: {u} vs {exact}");
        }
        assert_eq!(trace.u[0], Complex64::new(1.0, 0.0));
        assert_eq!(trace.u_dot[0], Complex64::new(0.0, omega));
    }

    #[test]
    fn free_solution_is_linear() {
        let p = HillParameters::quadrupole(0.0, 0.0, 2.0).unwrap();
        let trace = integrate_hill(&p, 1.3, &uniform_times(5.0, 11), Tolerance::default()).unwrap();
        for (t, u) in trace.times.iter().zip(&trace.u) {
            assert!((u - Complex64::new(1.0, 1.3 * t)).norm() < 1e-11);
        }
    }

    #[test]
    fn wronskian_drift_shrinks_with_tolerance() {
        let p = HillParameters::quadrupole(0.0, 0.4, 2.0).unwrap();
        let times = uniform_times(10.0 * p.period(), 200);
        let coarse = integrate_hill(&p, 1.0, &times, Tolerance::default()).unwrap();
        let fine = integrate_hill(&p, 1.0, &times, Tolerance::default().scaled(0.01)).unwrap();
        assert!(coarse.wronskian_drift < 1e-9, "drift {}", coarse.wronskian_drift);
        assert!(fine.wronskian_drift < coarse.wronskian_drift);
    }

    #[test]
    fn integration_rejects_unsorted_times() {
        let p = HillParameters::quadrupole(0.0, 0.4, 2.0).unwrap();
        assert!(integrate_hill(&p, 1.0, &[1.0, 0.5], Tolerance::default()).is_err());
    }

    #[test]
    fn free_particle_monodromy() {
        let p = HillParameters::quadrupole(0.0, 0.0, 2.0).unwrap();
        let r = monodromy(&p, Tolerance::default()).unwrap();
        let t = p.period();
        assert_abs_diff_eq!(r.monodromy[0][0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.monodromy[0][1], t, epsilon = 1e-12);
        assert_abs_diff_eq!(r.monodromy[1][0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.monodromy[1][1], 1.0, epsilon = 1e-12);
        assert_eq!(r.stability, Stability::Marginal);
        assert_abs_diff_eq!(r.mu, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_coefficient_monodromy_is_rotation() {
        let drive = 2.0;
        for a in [0.09, 0.25, 0.6] {
            let p = HillParameters::quadrupole(a, 0.0, drive).unwrap();
            let r = monodromy(&p, Tolerance::default()).unwrap();
            let w0 = drive * a.sqrt() / 2.0;
            let t = p.period();
            let (c, s) = ((w0 * t).cos(), (w0 * t).sin());
            let expected = [[c, s / w0], [-w0 * s, c]];
            for i in 0..2 {
                for j in 0..2 {
                    assert_abs_diff_eq!(r.monodromy[i][j], expected[i][j], epsilon = 1e-9);
                }
            }
            assert_abs_diff_eq!(r.trace, 2.0 * (w0 * t).cos(), epsilon = 1e-9);
            assert_eq!(r.stability, Stability::Stable);
        }
    }

    #[test]
    fn secular_frequency_beyond_principal_branch() {
        for a in [0.25, 1.0, 2.0] {
            let p = HillParameters::quadrupole(a, 0.0, 2.0).unwrap();
            let r = monodromy(&p, Tolerance::default()).unwrap();
            assert_abs_diff_eq!(r.mu, a.sqrt(), epsilon = 1e-9);
        }
    }

    #[test]
    fn mathieu_point_is_stable_at_two_tolerances() {
        let p = HillParameters::quadrupole(0.0, 0.4, 2.0).unwrap();
        let r1 = monodromy(&p, Tolerance::default()).unwrap();
        let r2 = monodromy(&p, Tolerance::default().scaled(0.01)).unwrap();
        assert_eq!(r1.stability, Stability::Stable);
        assert!(r1.trace.abs() < 2.0);
        assert_abs_diff_eq!(r1.trace, r2.trace, epsilon = 1e-8);
        assert_abs_diff_eq!(r1.determinant, 1.0, epsilon = 1e-9);
        // lowest-order secular approximation β ≈ q/√2
        assert!((r1.mu - 0.4 / 2f64.sqrt()).abs() < 0.01, "mu = {}", r1.mu);
    }

    #[test]
    fn unstable_growth_rate_matches_inverted_oscillator() {
        let p = HillParameters::quadrupole(-0.1, 0.0, 2.0).unwrap();
        let r = monodromy(&p, Tolerance::default()).unwrap();
        assert_eq!(r.stability, Stability::Unstable);
        assert_abs_diff_eq!(r.mu, 0.1f64.sqrt(), epsilon = 1e-9);
    }

    #[test]
    fn floquet_omega_gives_quasiperiodic_solution() {
        let p = HillParameters::quadrupole(0.0, 0.4, 2.0).unwrap();
        let r = monodromy(&p, Tolerance::default()).unwrap();
        let omega = r.floquet_omega().unwrap();
        assert!(omega > 0.0);
        let sol = HillSolution::standard(&p, omega, r.period, Tolerance::default()).unwrap();
        let (u, ud) = sol.state(r.period);
        let rho = Complex64::from_polar(1.0, r.mu * r.period);
        assert!((u - rho).norm() < 1e-9);
        assert!((ud - rho * Complex64::new(0.0, omega)).norm() < 1e-9);
    }

    #[test]
    fn scaling_of_unimodular_solution() {
        let omega = 0.8;
        let times = uniform_times(30.0, 301);
        let trace = SolutionTrace {
            u: times.iter().map(|&t| Complex64::from_polar(1.0, omega * t)).collect(),
            u_dot: times
                .iter()
                .map(|&t| Complex64::new(0.0, omega) * Complex64::from_polar(1.0, omega * t))
                .collect(),
            times: times.clone(),
            omega,
            wronskian_drift: 0.0,
        };
        let s = scaling_parameters(&trace, |_| 0.0).unwrap();
        for k in 0..times.len() {
            assert_abs_diff_eq!(s.alpha[k], 0.0, epsilon = 1e-14);
            assert_abs_diff_eq!(s.beta[k], 0.0, epsilon = 1e-14);
            assert_abs_diff_eq!(s.tau[k], omega * times[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn scaling_of_growing_solution() {
        let (sigma, omega) = (0.05, 1.1);
        let rate = Complex64::new(sigma, omega);
        let times = uniform_times(12.0, 121);
        let trace = SolutionTrace {
            u: times.iter().map(|&t| (rate * t).exp()).collect(),
            u_dot: times.iter().map(|&t| rate * (rate * t).exp()).collect(),
            times: times.clone(),
            omega,
            wronskian_drift: 0.0,
        };
        let s = scaling_parameters(&trace, |_| 0.0).unwrap();
        for k in 0..times.len() {
            assert_abs_diff_eq!(s.alpha[k], sigma * times[k], epsilon = 1e-12);
            assert_abs_diff_eq!(s.tau[k], omega * times[k], epsilon = 1e-12);
            assert_abs_diff_eq!(s.beta[k], sigma / 2.0, epsilon = 1e-14);
            assert!((s.zeta(k) - trace.u[k]).norm() < 1e-12 * trace.u[k].norm());
        }
    }

    #[test]
    fn scaling_rejects_zero_crossing() {
        let trace = SolutionTrace {
            times: vec![0.0, 1.0],
            u: vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)],
            u_dot: vec![Complex64::new(0.0, 1.0); 2],
            omega: 1.0,
            wronskian_drift: 0.0,
        };
        assert!(matches!(scaling_parameters(&trace, |_| 0.0), Err(Error::BranchFailure { t }) if t == 1.0));
    }

    #[test]
    fn scaling_phase_matches_floquet_exponent() {
        let p = HillParameters::quadrupole(0.0, 0.4, 2.0).unwrap();
        let r = monodromy(&p, Tolerance::default()).unwrap();
        let omega = r.floquet_omega().unwrap();
        let trace = integrate_hill(&p, omega, &uniform_times(r.period, 400), Tolerance::default()).unwrap();
        let s = scaling_parameters(&trace, |t| p.control_c(t)).unwrap();
        let advance = s.tau.last().unwrap() - s.tau[0];
        let diff = wrap(advance - r.mu * r.period);
        assert!(diff.abs() < 1e-6, "diff {diff}");
    }

    #[test]
    fn quasienergy_ladder() {
        let s = quasienergy_spectrum(0.5, 1.0, 2);
        assert_eq!(s.levels, vec![0.5, 1.5, 2.5]);
        let s = quasienergy_spectrum(0.37, 0.83, 9);
        for w in s.levels.windows(2) {
            assert_abs_diff_eq!(w[1] - w[0], 2.0 * 0.37, epsilon = 1e-15);
        }
    }

    #[test]
    fn e0_fit_unwinds_phases() {
        let (mu, period, e0) = (0.9, 3.0, 1.0);
        let phases: Vec<(usize, f64)> = (0..5)
            .map(|n| (n, wrap(0.5 * mu * period * (2.0 * n as f64 + e0))))
            .collect();
        assert_abs_diff_eq!(fit_e0(mu, period, &phases).unwrap(), e0, epsilon = 1e-12);
    }

    #[test]
    fn scan_is_deterministic_and_classifies() {
        let a = ScanRange::new(-0.1, 1.0, 3).unwrap();
        let q = ScanRange::new(0.0, 0.0, 1).unwrap();
        let g1 = stability_scan(a, q, 2.0, Tolerance::default()).unwrap();
        assert_eq!(g1.cell(0, 0).state, CellState::Unstable);
        assert_eq!(g1.cell(2, 0).state, CellState::Marginal);
        let a = ScanRange::new(0.3, 1.0, 2).unwrap();
        let g2 = stability_scan(a, q, 2.0, Tolerance::default()).unwrap();
        assert_eq!(g2.cell(0, 0).state, CellState::Stable);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let serial = pool.install(|| stability_scan(a, q, 2.0, Tolerance::default()).unwrap());
        assert_eq!(serial, g2);
    }

    #[test]
    fn pgm_layout() {
        let a = ScanRange::new(-0.1, 0.3, 2).unwrap();
        let q = ScanRange::new(0.0, 0.0, 1).unwrap();
        let g = stability_scan(a, q, 2.0, Tolerance::default()).unwrap();
        let mut buf = Vec::new();
        g.write_pgm(&mut buf).unwrap();
        assert_eq!(&buf[..], b"P5\n1 2\n255\n\xff\x00");
        let mut csv = Vec::new();
        g.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("a,q_M,trace,mu,class\n-0.1,0,"));
        assert!(text.trim_end().ends_with("stable"));
    }
}
