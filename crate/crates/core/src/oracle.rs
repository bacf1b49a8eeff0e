//! Split-step Fourier solver for `iħ ψ_t = −ħ²/(2m) Δψ + V(t, x) ψ` on a
//! periodic box in one or two dimensions.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::floquet::{fit_e0, monodromy, HillParameters, Stability};
use crate::grid::Grid;
use crate::hagedorn::{PaulTrapPotential, PotentialModel};
use crate::ode::Tolerance;
use crate::states::{sample_states, OscillatorContext, WavefunctionSample};

/// Default boundary-mass limit for a valid run.
pub const BOUNDARY_LIMIT: f64 = 1e-8;
/// Fraction of the box treated as boundary on each side.
pub const BOUNDARY_FRACTION: f64 = 0.05;

/// Tensor-product grid with one or two axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub axes: Vec<Grid>,
}

impl GridSpec {
    pub fn new(axes: Vec<Grid>) -> Result<Self> {
        if axes.is_empty() || axes.len() > 2 {
            return Err(Error::Dimension(format!(
                "the oracle supports one or two dimensions, got {}",
                axes.len()
            )));
        }
        Ok(Self { axes })
    }

    pub fn one(grid: Grid) -> Self {
        Self { axes: vec![grid] }
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|g| g.n).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_volume(&self) -> f64 {
        self.axes.iter().map(Grid::dx).product()
    }

    /// Coordinates of flat index `i` (last axis fastest).
    pub fn point(&self, i: usize, out: &mut [f64]) {
        match self.axes.as_slice() {
            [g] => out[0] = g.point(i),
            [g0, g1] => {
                out[0] = g0.point(i / g1.n);
                out[1] = g1.point(i % g1.n);
            }
            _ => unreachable!("validated dimension"),
        }
    }

    fn same_as(&self, other: &GridSpec) -> bool {
        self.axes.len() == other.axes.len() && self.axes.iter().zip(&other.axes).all(|(a, b)| a.same_as(b))
    }

    fn in_boundary(&self, i: usize) -> bool {
        let mut x = [0.0; 2];
        self.point(i, &mut x);
        self.axes
            .iter()
            .enumerate()
            .any(|(d, g)| x[d].abs() >= (1.0 - BOUNDARY_FRACTION) * g.half_width)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolvedState {
    pub spec: GridSpec,
    pub values: Vec<Complex64>,
    pub time: f64,
    /// Probability within the outer 5% of the box.
    pub boundary_mass: f64,
}

impl EvolvedState {
    pub fn new(spec: GridSpec, values: Vec<Complex64>, time: f64) -> Result<Self> {
        if values.len() != spec.len() {
            return Err(Error::Dimension(format!(
                "{} amplitudes for {} grid points",
                values.len(),
                spec.len()
            )));
        }
        let mut s = Self {
            spec,
            values,
            time,
            boundary_mass: 0.0,
        };
        s.boundary_mass = s.measure_boundary();
        Ok(s)
    }

    pub fn from_fn(spec: GridSpec, time: f64, f: impl Fn(&[f64]) -> Complex64) -> Result<Self> {
        let mut x = [0.0; 2];
        let d = spec.axes.len();
        let values = (0..spec.len())
            .map(|i| {
                spec.point(i, &mut x);
                f(&x[..d])
            })
            .collect();
        Self::new(spec, values, time)
    }

    pub fn from_sample(sample: &WavefunctionSample) -> Result<Self> {
        Self::new(GridSpec::one(sample.grid), sample.values.clone(), sample.time)
    }

    fn measure_boundary(&self) -> f64 {
        let dv = self.spec.cell_volume();
        self.values
            .iter()
            .enumerate()
            .filter(|(i, _)| self.spec.in_boundary(*i))
            .map(|(_, v)| v.norm_sqr())
            .sum::<f64>()
            * dv
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum::<f64>() * self.spec.cell_volume()
    }

    pub fn distance(&self, other: &EvolvedState) -> Result<f64> {
        if !self.spec.same_as(&other.spec) {
            return Err(Error::Dimension("states live on different grids".into()));
        }
        let d: f64 = self.values.iter().zip(&other.values).map(|(a, b)| (a - b).norm_sqr()).sum();
        Ok((d * self.spec.cell_volume()).sqrt())
    }
}

/// `⟨a|b⟩` with the grid measure.
pub fn overlap(a: &EvolvedState, b: &EvolvedState) -> Result<Complex64> {
    if !a.spec.same_as(&b.spec) {
        return Err(Error::Dimension("states live on different grids".into()));
    }
    Ok(a.values.iter().zip(&b.values).map(|(x, y)| x.conj() * y).sum::<Complex64>() * a.spec.cell_volume())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleOptions {
    pub mass: f64,
    pub hbar: f64,
    /// Error out when the boundary mass exceeds this value.
    pub boundary_limit: f64,
    /// Boundary checks per run (at evenly spaced steps, plus the end).
    pub checkpoints: usize,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            mass: 1.0,
            hbar: 1.0,
            boundary_limit: BOUNDARY_LIMIT,
            checkpoints: 16,
        }
    }
}

struct Transform {
    fwd: Vec<Arc<dyn Fft<f64>>>,
    inv: Vec<Arc<dyn Fft<f64>>>,
}

impl Transform {
    fn new(spec: &GridSpec) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            fwd: spec.axes.iter().map(|g| planner.plan_fft_forward(g.n)).collect(),
            inv: spec.axes.iter().map(|g| planner.plan_fft_inverse(g.n)).collect(),
        }
    }

    fn apply(&self, spec: &GridSpec, data: &mut [Complex64], scratch: &mut Vec<Complex64>, forward: bool) {
        let plans = if forward { &self.fwd } else { &self.inv };
        match spec.axes.as_slice() {
            [_] => plans[0].process(data),
            [g0, g1] => {
                // rows are contiguous; columns go through a transpose
                plans[1].process(data);
                scratch.resize(data.len(), Complex64::default());
                transpose(data, scratch, g0.n, g1.n);
                plans[0].process(scratch);
                transpose(scratch, data, g1.n, g0.n);
            }
            _ => unreachable!("validated dimension"),
        }
    }
}

fn transpose(src: &[Complex64], dst: &mut [Complex64], rows: usize, cols: usize) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

fn kinetic_factor(spec: &GridSpec, dt: f64, opts: &OracleOptions) -> Vec<Complex64> {
    let ks: Vec<Vec<f64>> = spec.axes.iter().map(Grid::wavenumbers).collect();
    let norm = 1.0 / spec.len() as f64;
    let mut x = [0usize; 2];
    (0..spec.len())
        .map(|i| {
            let k2 = match ks.len() {
                1 => ks[0][i].powi(2),
                _ => {
                    x[0] = i / spec.axes[1].n;
                    x[1] = i % spec.axes[1].n;
                    ks[0][x[0]].powi(2) + ks[1][x[1]].powi(2)
                }
            };
            Complex64::from_polar(norm, -opts.hbar * k2 * dt / (2.0 * opts.mass))
        })
        .collect()
}

/// Strang splitting `K(dt/2) V(t + dt/2) K(dt/2)` over `steps` steps, with
/// the spectral kinetic factor `exp(−iħk²dt/2m)`.
pub fn split_step_evolve<V: PotentialModel + ?Sized>(
    v: &V,
    psi0: &EvolvedState,
    dt: f64,
    steps: usize,
    opts: &OracleOptions,
) -> Result<EvolvedState> {
    let spec = psi0.spec.clone();
    let dim = spec.axes.len();
    if v.dim() != dim {
        return Err(Error::Dimension(format!(
            "potential has {} coordinates, grid {dim}",
            v.dim()
        )));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidParameter(format!("time step must be positive, got {dt}")));
    }
    if !(opts.mass > 0.0) || !(opts.hbar > 0.0) {
        return Err(Error::InvalidParameter("mass and hbar must be positive".into()));
    }
    let transform = Transform::new(&spec);
    let full = kinetic_factor(&spec, dt, opts);
    let half = kinetic_factor(&spec, 0.5 * dt, opts);
    let n = spec.len();
    let mut points = vec![0.0; n * dim];
    for i in 0..n {
        spec.point(i, &mut points[i * dim..(i + 1) * dim]);
    }
    let mut psi = psi0.values.clone();
    let mut scratch = Vec::new();
    let t0 = psi0.time;
    let check_every = (steps / opts.checkpoints.max(1)).max(1);
    let monitor = |psi: &[Complex64], t: f64| -> Result<()> {
        let st = EvolvedState::new(spec.clone(), psi.to_vec(), t)?;
        if st.boundary_mass > opts.boundary_limit {
            return Err(Error::BoxTooSmall { mass: st.boundary_mass });
        }
        Ok(())
    };

    if steps > 0 {
        transform.apply(&spec, &mut psi, &mut scratch, true);
        for (p, k) in psi.iter_mut().zip(&half) {
            *p *= k;
        }
    }
    for step in 0..steps {
        transform.apply(&spec, &mut psi, &mut scratch, false);
        let tm = t0 + (step as f64 + 0.5) * dt;
        for (i, p) in psi.iter_mut().enumerate() {
            let vx = v.value(tm, &points[i * dim..(i + 1) * dim]);
            *p *= Complex64::from_polar(1.0, -vx * dt / opts.hbar);
        }
        let last = step + 1 == steps;
        if !last && (step + 1) % check_every == 0 {
            monitor(&psi, tm + 0.5 * dt)?;
        }
        transform.apply(&spec, &mut psi, &mut scratch, true);
        let kin = if last { &half } else { &full };
        for (p, k) in psi.iter_mut().zip(kin) {
            *p *= k;
        }
        if last {
            transform.apply(&spec, &mut psi, &mut scratch, false);
        }
    }
    let out = EvolvedState::new(spec, psi, t0 + steps as f64 * dt)?;
    if out.boundary_mass > opts.boundary_limit {
        return Err(Error::BoxTooSmall { mass: out.boundary_mass });
    }
    Ok(out)
}

/// Comparison of quasienergy states against oracle evolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuasienergyCheck {
    pub a: f64,
    pub q_m: f64,
    pub drive: f64,
    pub mu: f64,
    pub omega: f64,
    pub periods: usize,
    pub steps_per_period: usize,
    pub grid_points: usize,
    pub half_width: f64,
    /// `max_t ‖U φ_n(0) − φ_n(t)‖` per `n`, at every whole period.
    pub l2_errors: Vec<f64>,
    /// Per-period phase lag `−arg ⟨φ_n(0)|U(T) φ_n(0)⟩` per `n`.
    pub phase_lags: Vec<f64>,
    /// Moduli of the same overlaps.
    pub overlap_moduli: Vec<f64>,
    pub e0: f64,
}

/// Evolves `φ_0 … φ_{n_max}` at a stable operating point with the oracle and
/// compares against the exact quasienergy states after each period.
pub fn check_quasienergy_states(
    params: &HillParameters,
    n_max: usize,
    periods: usize,
    steps_per_period: usize,
    opts: &OracleOptions,
    tol: Tolerance,
) -> Result<QuasienergyCheck> {
    let (a, q_m) = match params.mode {
        crate::floquet::HillMode::Quadrupole => (params.a, params.q_m),
        _ => (f64::NAN, f64::NAN),
    };
    let floquet = monodromy(params, tol)?;
    if floquet.stability != Stability::Stable {
        return Err(Error::NoPseudopotential { trace: floquet.trace });
    }
    let omega = floquet.floquet_omega()?;
    let period = params.period();
    let periods = periods.max(1);
    let ctx = OscillatorContext::integrate(params, omega, opts.mass, opts.hbar, periods as f64 * period, tol)?;
    let grid = ctx.default_grid()?;
    let potential = PaulTrapPotential {
        params: params.clone(),
        mass: opts.mass,
    };
    let dt = period / steps_per_period as f64;
    let initial = sample_states(n_max, 0.0, &ctx, &grid)?;
    let mut l2_errors = vec![0.0f64; n_max + 1];
    let mut phase_lags = vec![0.0; n_max + 1];
    let mut overlap_moduli = vec![0.0; n_max + 1];
    let results: Vec<Result<(f64, f64, f64)>> = {
        use rayon::prelude::*;
        initial
            .par_iter()
            .map(|phi| {
                let start = EvolvedState::from_sample(phi)?;
                let mut psi = start.clone();
                let mut worst: f64 = 0.0;
                let mut first = Complex64::default();
                for k in 1..=periods {
                    psi = split_step_evolve(&potential, &psi, dt, steps_per_period, opts)?;
                    psi.time = k as f64 * period;
                    let exact = EvolvedState::from_sample(&crate::states::sample_state(phi.n, psi.time, &ctx, &grid)?)?;
                    worst = worst.max(psi.distance(&exact)?);
                    if k == 1 {
                        first = overlap(&start, &psi)?;
                    }
                }
                Ok((worst, -first.arg(), first.norm()))
            })
            .collect()
    };
    for (n, r) in results.into_iter().enumerate() {
        let (err, lag, modulus) = r?;
        l2_errors[n] = err;
        phase_lags[n] = lag.rem_euclid(std::f64::consts::TAU);
        overlap_moduli[n] = modulus;
    }
    let lags: Vec<(usize, f64)> = phase_lags.iter().copied().enumerate().collect();
    let e0 = fit_e0(floquet.mu, period, &lags)?;
    Ok(QuasienergyCheck {
        a,
        q_m,
        drive: params.drive,
        mu: floquet.mu,
        omega,
        periods,
        steps_per_period,
        grid_points: grid.n,
        half_width: grid.half_width,
        l2_errors,
        phase_lags,
        overlap_moduli,
        e0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hagedorn::{FreePotential, QuadraticPotential};

    #[test]
    fn harmonic_ground_state_is_stationary() {
        let w = 1.0;
        let spec = GridSpec::one(Grid::new(128, 10.0).unwrap());
        let psi0 = EvolvedState::from_fn(spec, 0.0, |x| {
            Complex64::new(std::f64::consts::PI.powf(-0.25) * (-0.5 * x[0] * x[0]).exp(), 0.0)
        })
        .unwrap();
        let v = QuadraticPotential::harmonic(1.0, w);
        let period = std::f64::consts::TAU / w;
        let steps = 4096 * 10;
        let out = split_step_evolve(&v, &psi0, 10.0 * period / steps as f64, steps, &OracleOptions::default()).unwrap();
        let ov = overlap(&psi0, &out).unwrap();
        assert!((ov.norm() - 1.0).abs() < 1e-10);
        let phase = Complex64::from_polar(1.0, ov.arg());
        let aligned: Vec<Complex64> = psi0.values.iter().map(|v| v * phase).collect();
        let aligned = EvolvedState::new(psi0.spec.clone(), aligned, out.time).unwrap();
        let d = out.distance(&aligned).unwrap();
        assert!(d < 1e-8, "{d}");
        // rounding accumulates at roughly 1e-16 per step
        let drift = (out.norm_sq() - psi0.norm_sq()).abs();
        assert!(drift < 1e-11, "{drift:e}");
    }

    #[test]
    fn norm_is_conserved_over_a_period() {
        let spec = GridSpec::one(Grid::new(1024, 40.0).unwrap());
        let psi0 = EvolvedState::from_fn(spec, 0.0, |x| {
            Complex64::from_polar(0.7 * (-0.5 * (x[0] - 1.0).powi(2)).exp(), 0.3 * x[0])
        })
        .unwrap();
        let v = crate::hagedorn::PaulTrapPotential {
            params: HillParameters::quadrupole(0.0, 0.4, 2.0).unwrap(),
            mass: 1.0,
        };
        let out = split_step_evolve(&v, &psi0, std::f64::consts::PI / 4096.0, 4096, &OracleOptions::default()).unwrap();
        let drift = (out.norm_sq() - psi0.norm_sq()).abs();
        assert!(drift < 1e-12, "{drift:e}");
    }

    #[test]
    fn free_gaussian_spreads() {
        let spec = GridSpec::one(Grid::new(512, 40.0).unwrap());
        let psi0 = EvolvedState::from_fn(spec, 0.0, |x| {
            Complex64::new(std::f64::consts::PI.powf(-0.25) * (-0.5 * x[0] * x[0]).exp(), 0.0)
        })
        .unwrap();
        let t: f64 = 2.0;
        let out = split_step_evolve(&FreePotential { dim: 1 }, &psi0, t / 200.0, 200, &OracleOptions::default()).unwrap();
        let exact = EvolvedState::from_fn(psi0.spec.clone(), t, |x| {
            let s = Complex64::new(1.0, t);
            std::f64::consts::PI.powf(-0.25) / s.sqrt() * (-x[0] * x[0] / (2.0 * s)).exp()
        })
        .unwrap();
        assert!(out.distance(&exact).unwrap() < 1e-8);
    }

    #[test]
    fn small_box_is_reported() {
        let spec = GridSpec::one(Grid::new(64, 2.0).unwrap());
        let psi0 = EvolvedState::from_fn(spec, 0.0, |x| Complex64::new((-0.5 * x[0] * x[0]).exp(), 0.0)).unwrap();
        let r = split_step_evolve(&FreePotential { dim: 1 }, &psi0, 0.01, 10, &OracleOptions::default());
        assert!(matches!(r, Err(Error::BoxTooSmall { .. })));
    }

    #[test]
    fn two_dimensional_norm() {
        let g = Grid::new(64, 8.0).unwrap();
        let spec = GridSpec::new(vec![g, g]).unwrap();
        let psi0 = EvolvedState::from_fn(spec, 0.0, |x| {
            Complex64::new((-(x[0] * x[0] + 2.0 * x[1] * x[1]) / 2.0).exp(), 0.0)
        })
        .unwrap();
        let v = QuadraticPotential::new(nalgebra::DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 2.0])).unwrap();
        let out = split_step_evolve(&v, &psi0, 0.01, 100, &OracleOptions::default()).unwrap();
        assert!((out.norm_sq() - psi0.norm_sq()).abs() < 1e-12 * psi0.norm_sq());
        assert!(GridSpec::new(vec![g, g, g]).is_err());
    }
}
