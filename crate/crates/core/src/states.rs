//! Exact quasienergy wavefunctions of the driven oscillator, the invariant
//! ladder operator and the pseudopotential reference states.

use std::io::Write;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::floquet::{FloquetResult, HillParameters, HillSolution, Stability};
use crate::grid::{spectral_derivative, spectral_tail, Grid};
pub use crate::hermite::{hermite_1d, hermite_function, hermite_functions};
use crate::ode::Tolerance;

/// Default number of grid points for sampled states.
pub const DEFAULT_GRID_POINTS: usize = 1024;
/// Default box half-width in units of the widest ground-state width.
pub const DEFAULT_GRID_WIDTHS: f64 = 12.0;

/// Mass, ħ and the complex Hill solution `u(t)` with `u(0) = 1`, `u̇(0) = iω`.
#[derive(Clone, Debug)]
pub struct OscillatorContext {
    pub mass: f64,
    pub hbar: f64,
    solution: Arc<HillSolution>,
}

impl OscillatorContext {
    pub fn new(solution: HillSolution, mass: f64, hbar: f64) -> Result<Self> {
        if !(mass > 0.0) || !(hbar > 0.0) || !mass.is_finite() || !hbar.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "mass and hbar must be positive (m = {mass}, hbar = {hbar})"
            )));
        }
        let (u0, _) = solution.initial();
        if (u0 - Complex64::new(1.0, 0.0)).norm() > 1e-14 {
            return Err(Error::InvalidParameter("u(0) must equal 1".into()));
        }
        if !(solution.omega() > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "omega must be positive, got {}",
                solution.omega()
            )));
        }
        Ok(Self {
            mass,
            hbar,
            solution: Arc::new(solution),
        })
    }

    /// Integrates the standard solution for `params` up to `t_end`.
    pub fn integrate(
        params: &HillParameters,
        omega: f64,
        mass: f64,
        hbar: f64,
        t_end: f64,
        tol: Tolerance,
    ) -> Result<Self> {
        if !(omega > 0.0) {
            return Err(Error::InvalidParameter(format!("omega must be positive, got {omega}")));
        }
        Self::new(HillSolution::standard(params, omega, t_end, tol)?, mass, hbar)
    }

    pub fn omega(&self) -> f64 {
        self.solution.omega()
    }

    pub fn solution(&self) -> &HillSolution {
        &self.solution
    }

    /// Static ground-state width `√(ħ/mω)`.
    pub fn ground_width(&self) -> f64 {
        (self.hbar / (self.mass * self.omega())).sqrt()
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !self.solution.contains(t) {
            return Err(Error::InvalidParameter(format!(
                "t = {t} lies outside the integrated span [0, {}]",
                self.solution.t_end()
            )));
        }
        Ok(())
    }

    /// Default grid: [`DEFAULT_GRID_POINTS`] points over ±12 ground widths,
    /// stretched by the largest `|u|` on `[0, t_end]`.
    pub fn default_grid(&self) -> Result<Grid> {
        let t_end = self.solution.t_end();
        let samples = 2048;
        let max_u = (0..=samples)
            .map(|k| self.solution.u(t_end * k as f64 / samples as f64).norm())
            .fold(1.0f64, f64::max);
        Grid::new(DEFAULT_GRID_POINTS, DEFAULT_GRID_WIDTHS * self.ground_width() * max_u)
    }
}

// Per-time quantities shared by every x and n.
struct Frame {
    scale: f64,
    chirp: f64,
    phase: f64,
}

impl OscillatorContext {
    fn frame(&self, t: f64) -> Result<Frame> {
        self.check_time(t)?;
        let (u, ud) = self.solution.state(t);
        let r = u.norm();
        if r == 0.0 || !r.is_finite() {
            return Err(Error::NodeCollapse { t });
        }
        let phase = self.solution.phase(t).map_err(|_| Error::NodeCollapse { t })?;
        Ok(Frame {
            scale: (self.mass * self.omega() / self.hbar).sqrt() / r,
            chirp: self.mass * (ud / u).re / (2.0 * self.hbar),
            phase,
        })
    }
}

fn shape(frame: &Frame, n_max: usize, x: f64) -> Vec<f64> {
    let xi = frame.scale * x;
    #[cfg(not(feature = "printed-pi-argument"))]
    {
        hermite_functions(n_max, xi)
    }
    #[cfg(feature = "printed-pi-argument")]
    {
        // Hermite argument with π under the root; the Gaussian keeps the standard width
        let arg = xi / std::f64::consts::PI.sqrt();
        let g = (-0.5 * xi * xi).exp() * std::f64::consts::PI.powf(-0.25);
        let mut norm = 1.0f64;
        (0..=n_max)
            .map(|n| {
                if n > 0 {
                    norm *= 2.0 * n as f64;
                }
                hermite_1d(n, arg) * g / norm.sqrt()
            })
            .collect()
    }
}

fn assemble(frame: &Frame, n: usize, x: f64, psi: f64) -> Complex64 {
    let angle = frame.chirp * x * x - (n as f64 + 0.5) * frame.phase;
    Complex64::from_polar(frame.scale.sqrt() * psi, angle)
}

/// Quasienergy wavefunction `φ_n(x, t)`.
pub fn phin(n: usize, x: f64, t: f64, ctx: &OscillatorContext) -> Result<Complex64> {
    let frame = ctx.frame(t)?;
    Ok(assemble(&frame, n, x, shape(&frame, n, x)[n]))
}

/// Ground quasienergy wavefunction `φ_0(x, t)`.
pub fn phi0(x: f64, t: f64, ctx: &OscillatorContext) -> Result<Complex64> {
    phin(0, x, t, ctx)
}

/// `φ_n(·, t)` sampled on a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WavefunctionSample {
    pub grid: Grid,
    pub values: Vec<Complex64>,
    pub time: f64,
    pub n: usize,
}

impl WavefunctionSample {
    pub fn norm_sq(&self) -> f64 {
        self.grid.norm_sq(&self.values)
    }

    /// `⟨self|other⟩`.
    pub fn inner(&self, other: &WavefunctionSample) -> Result<Complex64> {
        if !self.grid.same_as(&other.grid) {
            return Err(Error::Dimension("wavefunctions live on different grids".into()));
        }
        Ok(self.grid.inner(&self.values, &other.values))
    }

    /// L² distance `‖self − other‖`.
    pub fn distance(&self, other: &WavefunctionSample) -> Result<f64> {
        if !self.grid.same_as(&other.grid) {
            return Err(Error::Dimension("wavefunctions live on different grids".into()));
        }
        let diff: Vec<Complex64> = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(self.grid.norm_sq(&diff).sqrt())
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "x,re,im")?;
        for (x, v) in self.grid.points().iter().zip(&self.values) {
            writeln!(out, "{x:.17e},{:.17e},{:.17e}", v.re, v.im)?;
        }
        Ok(())
    }

    /// One JSON object keyed by `(n, t)`.
    pub fn jsonl_record(&self) -> String {
        let rec = serde_json::json!({
            "n": self.n,
            "t": self.time,
            "x": self.grid.points(),
            "re": self.values.iter().map(|v| v.re).collect::<Vec<_>>(),
            "im": self.values.iter().map(|v| v.im).collect::<Vec<_>>(),
        });
        serde_json::to_string(&rec).expect("sample serializes")
    }
}

/// `φ_0 … φ_{n_max}` at time `t` on `grid`.
pub fn sample_states(
    n_max: usize,
    t: f64,
    ctx: &OscillatorContext,
    grid: &Grid,
) -> Result<Vec<WavefunctionSample>> {
    let frame = ctx.frame(t)?;
    let columns: Vec<Vec<Complex64>> = grid
        .points()
        .par_iter()
        .map(|&x| {
            let psi = shape(&frame, n_max, x);
            (0..=n_max).map(|n| assemble(&frame, n, x, psi[n])).collect()
        })
        .collect();
    Ok((0..=n_max)
        .map(|n| WavefunctionSample {
            grid: *grid,
            values: columns.iter().map(|c| c[n]).collect(),
            time: t,
            n,
        })
        .collect())
}

/// `φ_n(·, t)` on `grid`.
pub fn sample_state(n: usize, t: f64, ctx: &OscillatorContext, grid: &Grid) -> Result<WavefunctionSample> {
    Ok(sample_states(n, t, ctx, grid)?.pop().expect("at least one state"))
}

/// Largest allowed spectral tail before a grid counts as under-resolved.
pub const SPECTRAL_TAIL_LIMIT: f64 = 1e-20;

/// Applies `C(t) = (i/√(2mħω))(u p − m u̇ x)` to a sampled state.
pub fn apply_ladder(sample: &WavefunctionSample, ctx: &OscillatorContext) -> Result<WavefunctionSample> {
    let t = sample.time;
    ctx.check_time(t)?;
    let tail = spectral_tail(&sample.values);
    if tail > SPECTRAL_TAIL_LIMIT {
        return Err(Error::Resolution(format!(
            "spectral tail {tail:e} exceeds {SPECTRAL_TAIL_LIMIT:e}; refine the grid"
        )));
    }
    let edge = sample.values[0].norm().max(sample.values[sample.grid.n - 1].norm());
    let peak = sample.values.iter().fold(0.0f64, |m, v| m.max(v.norm()));
    if edge > 1e-10 * peak.max(1e-300) {
        return Err(Error::Resolution(format!(
            "state reaches the box edge (|ψ| = {edge:e}); widen the grid"
        )));
    }
    let (u, ud) = ctx.solution.state(t);
    let d = spectral_derivative(&sample.grid, &sample.values)?;
    let pre = Complex64::new(0.0, 1.0 / (2.0 * ctx.mass * ctx.hbar * ctx.omega()).sqrt());
    let minus_i_hbar = Complex64::new(0.0, -ctx.hbar);
    let values = sample
        .grid
        .points()
        .iter()
        .zip(&sample.values)
        .zip(&d)
        .map(|((&x, &psi), &dpsi)| pre * (u * minus_i_hbar * dpsi - ctx.mass * ud * x * psi))
        .collect();
    Ok(WavefunctionSample {
        grid: sample.grid,
        values,
        time: t,
        n: sample.n.saturating_sub(1),
    })
}

/// `C(t) φ_n(·, t)` on `grid`; equals `√n φ_{n−1}`.
pub fn annihilation_action(
    n: usize,
    t: f64,
    ctx: &OscillatorContext,
    grid: &Grid,
) -> Result<WavefunctionSample> {
    apply_ladder(&sample_state(n, t, ctx, grid)?, ctx)
}

/// Static oscillator eigenstates of the secular frequency `ω_p = μ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoStates {
    pub omega_p: f64,
    pub mass: f64,
    pub hbar: f64,
    pub grid: Grid,
    /// `values[n]` holds `φ_pn` on the grid.
    pub values: Vec<Vec<f64>>,
}

impl PseudoStates {
    pub fn width(&self) -> f64 {
        (self.hbar / (self.mass * self.omega_p)).sqrt()
    }

    pub fn sample(&self, n: usize) -> Result<WavefunctionSample> {
        let v = self.values.get(n).ok_or_else(|| {
            Error::Dimension(format!("pseudo state {n} not built (n_max = {})", self.values.len() - 1))
        })?;
        Ok(WavefunctionSample {
            grid: self.grid,
            values: v.iter().map(|&r| Complex64::new(r, 0.0)).collect(),
            time: 0.0,
            n,
        })
    }
}

/// Builds `φ_p0 … φ_p{n_max}` with `ω_p` taken from a stable Floquet exponent.
pub fn pseudopotential_states(
    n_max: usize,
    floquet: &FloquetResult,
    mass: f64,
    hbar: f64,
    grid: &Grid,
) -> Result<PseudoStates> {
    if floquet.stability != Stability::Stable {
        return Err(Error::NoPseudopotential { trace: floquet.trace });
    }
    let omega_p = floquet.mu.abs();
    if !(omega_p > 0.0) {
        return Err(Error::NoPseudopotential { trace: floquet.trace });
    }
    let scale = (mass * omega_p / hbar).sqrt();
    let rows: Vec<Vec<f64>> = grid
        .points()
        .iter()
        .map(|&x| hermite_functions(n_max, scale * x).into_iter().map(|v| v * scale.sqrt()).collect())
        .collect();
    let values = (0..=n_max).map(|n| rows.iter().map(|r| r[n]).collect()).collect();
    Ok(PseudoStates {
        omega_p,
        mass,
        hbar,
        grid: *grid,
        values,
    })
}

/// `f_n(t) = ⟨φ_pn | φ_n(·, t)⟩`.
pub fn overlap_fn(n: usize, t: f64, ctx: &OscillatorContext, pseudo: &PseudoStates) -> Result<Complex64> {
    let p = pseudo.sample(n)?;
    let phi = sample_state(n, t, ctx, &pseudo.grid)?;
    p.inner(&phi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::floquet::monodromy;

    fn mathieu_ctx(t_periods: f64) -> OscillatorContext {
        let p = HillParameters::quadrupole(0.0, 0.4, 2.0).unwrap();
        let f = monodromy(&p, Tolerance::default()).unwrap();
        let omega = f.floquet_omega().unwrap();
        OscillatorContext::integrate(&p, omega, 1.0, 1.0, t_periods * p.period(), Tolerance::default()).unwrap()
    }

    #[test]
    fn ground_state_at_zero_is_static() {
        let p = HillParameters::quadrupole(1.0, 0.0, 2.0).unwrap();
        let ctx = OscillatorContext::integrate(&p, 1.0, 1.0, 1.0, 1.0, Tolerance::default()).unwrap();
        for x in [-1.3, 0.0, 0.4] {
            let v = phi0(x, 0.0, &ctx).unwrap();
            let expect = std::f64::consts::PI.powf(-0.25) * (-0.5 * x * x).exp();
            assert!((v - expect).norm() < 1e-14);
        }
    }

    #[test]
    fn constant_coefficient_modulus_is_static() {
        let p = HillParameters::quadrupole(1.0, 0.0, 2.0).unwrap();
        let ctx = OscillatorContext::integrate(&p, 1.0, 1.0, 1.0, 3.0, Tolerance::default()).unwrap();
        for t in [0.7, 2.9] {
            let a = phin(2, 0.8, t, &ctx).unwrap().norm();
            let b = phin(2, 0.8, 0.0, &ctx).unwrap().norm();
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[cfg(not(feature = "printed-pi-argument"))]
    #[test]
    fn gram_matrix_is_identity() {
        let ctx = mathieu_ctx(1.0);
        let grid = ctx.default_grid().unwrap();
        let states = sample_states(6, 1.3, &ctx, &grid).unwrap();
        for a in &states {
            for b in &states {
                let g = a.inner(b).unwrap();
                let expect = if a.n == b.n { 1.0 } else { 0.0 };
                assert!((g - expect).norm() < 1e-10, "({}, {}) {g}", a.n, b.n);
            }
        }
    }

    #[cfg(not(feature = "printed-pi-argument"))]
    #[test]
    fn ladder_lowers_by_one() {
        let ctx = mathieu_ctx(1.0);
        let grid = ctx.default_grid().unwrap();
        for t in [0.0, 0.9, 2.2] {
            let states = sample_states(4, t, &ctx, &grid).unwrap();
            let zero = apply_ladder(&states[0], &ctx).unwrap();
            assert!(zero.values.iter().all(|v| v.norm() < 1e-8));
            for n in 1..=4 {
                let lowered = apply_ladder(&states[n], &ctx).unwrap();
                let mut expect = states[n - 1].clone();
                expect.values.iter_mut().for_each(|v| *v *= (n as f64).sqrt());
                assert!(lowered.distance(&expect).unwrap() < 1e-8, "n = {n} t = {t}");
            }
        }
    }

    #[test]
    fn coarse_grid_is_rejected() {
        let ctx = mathieu_ctx(1.0);
        let grid = Grid::new(16, 12.0 * ctx.ground_width()).unwrap();
        match annihilation_action(5, 0.5, &ctx, &grid) {
            Err(Error::Resolution(_)) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pseudo_states_need_stability() {
        let p = HillParameters::quadrupole(-0.1, 0.0, 2.0).unwrap();
        let f = monodromy(&p, Tolerance::default()).unwrap();
        let grid = Grid::new(64, 10.0).unwrap();
        assert!(matches!(
            pseudopotential_states(2, &f, 1.0, 1.0, &grid),
            Err(Error::NoPseudopotential { .. })
        ));
    }

    #[test]
    fn overlap_is_bounded() {
        let ctx = mathieu_ctx(1.0);
        let p = HillParameters::quadrupole(0.0, 0.4, 2.0).unwrap();
        let f = monodromy(&p, Tolerance::default()).unwrap();
        let grid = ctx.default_grid().unwrap();
        let pseudo = pseudopotential_states(3, &f, 1.0, 1.0, &grid).unwrap();
        for n in 0..=3 {
            let v = overlap_fn(n, 1.1, &ctx, &pseudo).unwrap();
            assert!(v.norm() <= 1.0 + 1e-12);
        }
        assert!(overlap_fn(4, 0.0, &ctx, &pseudo).is_err());
    }
}
