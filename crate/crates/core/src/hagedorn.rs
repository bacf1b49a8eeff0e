//! Semiclassical Gaussian-Hermite packets: classical trajectory, action and
//! the `A`, `B` width matrices, propagated as one coupled system.

use std::collections::HashMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::floquet::{hill_coefficient, HillParameters};
use crate::ode::{self, DenseSolution, OdeSystem, Tolerance};

/// Invariant drift accepted after propagation.
pub const INVARIANT_LIMIT: f64 = 1e-7;
/// Smallest eigenvalue of `A†A` accepted for the polar decomposition.
pub const EIGEN_FLOOR: f64 = 1e-14;

type CMat = DMatrix<Complex64>;

/// A smooth potential `V(t, x)` with gradient and Hessian.
pub trait PotentialModel: Sync {
    fn dim(&self) -> usize;
    fn value(&self, t: f64, x: &[f64]) -> f64;
    fn gradient(&self, t: f64, x: &[f64], out: &mut [f64]);
    fn hessian(&self, t: f64, x: &[f64]) -> DMatrix<f64>;
    /// True when `V` is at most quadratic in `x`, so packets evolve exactly.
    fn is_quadratic(&self) -> bool {
        false
    }
}

/// `V ≡ 0`.
#[derive(Clone, Copy, Debug)]
pub struct FreePotential {
    pub dim: usize,
}

impl PotentialModel for FreePotential {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, _t: f64, _x: &[f64]) -> f64 {
        0.0
    }
    fn gradient(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn hessian(&self, _t: f64, _x: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(self.dim, self.dim)
    }
    fn is_quadratic(&self) -> bool {
        true
    }
}

/// Static quadratic form `V = ½ xᵀ K x`.
#[derive(Clone, Debug)]
pub struct QuadraticPotential {
    pub k: DMatrix<f64>,
}

impl QuadraticPotential {
    pub fn new(k: DMatrix<f64>) -> Result<Self> {
        if !k.is_square() || k.nrows() == 0 {
            return Err(Error::Dimension("quadratic form must be a non-empty square matrix".into()));
        }
        if (&k - k.transpose()).amax() > 1e-12 * k.amax().max(1.0) {
            return Err(Error::InvalidParameter("quadratic form must be symmetric".into()));
        }
        Ok(Self { k })
    }

    /// One-dimensional `½ m ω² x²`.
    pub fn harmonic(mass: f64, omega: f64) -> Self {
        Self {
            k: DMatrix::from_element(1, 1, mass * omega * omega),
        }
    }
}

impl PotentialModel for QuadraticPotential {
    fn dim(&self) -> usize {
        self.k.nrows()
    }
    fn value(&self, _t: f64, x: &[f64]) -> f64 {
        let v = DVector::from_column_slice(x);
        0.5 * v.dot(&(&self.k * &v))
    }
    fn gradient(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        let g = &self.k * DVector::from_column_slice(x);
        out.copy_from_slice(g.as_slice());
    }
    fn hessian(&self, _t: f64, _x: &[f64]) -> DMatrix<f64> {
        self.k.clone()
    }
    fn is_quadratic(&self) -> bool {
        true
    }
}

/// The Paul-trap potential `½ m W(t) x²` in one dimension.
#[derive(Clone, Debug)]
pub struct PaulTrapPotential {
    pub params: HillParameters,
    pub mass: f64,
}

impl PotentialModel for PaulTrapPotential {
    fn dim(&self) -> usize {
        1
    }
    fn value(&self, t: f64, x: &[f64]) -> f64 {
        0.5 * self.mass * hill_coefficient(t, &self.params) * x[0] * x[0]
    }
    fn gradient(&self, t: f64, x: &[f64], out: &mut [f64]) {
        out[0] = self.mass * hill_coefficient(t, &self.params) * x[0];
    }
    fn hessian(&self, t: f64, _x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.mass * hill_coefficient(t, &self.params))
    }
    fn is_quadratic(&self) -> bool {
        true
    }
}

/// `V = ½ m ω² x² + λ x⁴` in one dimension.
#[derive(Clone, Copy, Debug)]
pub struct AnharmonicPotential {
    pub mass: f64,
    pub omega: f64,
    pub lambda: f64,
}

impl PotentialModel for AnharmonicPotential {
    fn dim(&self) -> usize {
        1
    }
    fn value(&self, _t: f64, x: &[f64]) -> f64 {
        let x2 = x[0] * x[0];
        0.5 * self.mass * self.omega * self.omega * x2 + self.lambda * x2 * x2
    }
    fn gradient(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        out[0] = self.mass * self.omega * self.omega * x[0] + 4.0 * self.lambda * x[0].powi(3);
    }
    fn hessian(&self, _t: f64, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.mass * self.omega * self.omega + 12.0 * self.lambda * x[0] * x[0])
    }
    fn is_quadratic(&self) -> bool {
        self.lambda == 0.0
    }
}

/// Compares gradient and Hessian against central differences at `count`
/// random points in `[−radius, radius]ⁿ` and times in `[0, t_max]`.
pub fn verify_potential<V: PotentialModel + ?Sized>(
    v: &V,
    seed: u64,
    count: usize,
    radius: f64,
    t_max: f64,
) -> Result<()> {
    let n = v.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = vec![0.0; n];
    let mut gp = vec![0.0; n];
    let mut gm = vec![0.0; n];
    for _ in 0..count {
        let t = if t_max > 0.0 { rng.gen_range(0.0..t_max) } else { 0.0 };
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-radius..=radius)).collect();
        v.gradient(t, &x, &mut g);
        let h = v.hessian(t, &x);
        if h.nrows() != n || h.ncols() != n {
            return Err(Error::Dimension(format!("Hessian is {}×{}, expected {n}×{n}", h.nrows(), h.ncols())));
        }
        if (&h - h.transpose()).amax() > 1e-12 * h.amax().max(1.0) {
            return Err(Error::InvalidParameter(format!("Hessian not symmetric at {x:?}")));
        }
        let mut xp = x.clone();
        for k in 0..n {
            let step = 1e-5 * x[k].abs().max(1.0);
            xp[k] = x[k] + step;
            let vp = v.value(t, &xp);
            v.gradient(t, &xp, &mut gp);
            xp[k] = x[k] - step;
            let vm = v.value(t, &xp);
            v.gradient(t, &xp, &mut gm);
            xp[k] = x[k];
            let fd = (vp - vm) / (2.0 * step);
            let scale = g[k].abs().max(v.value(t, &x).abs()).max(1.0);
            if (fd - g[k]).abs() > 1e-6 * scale {
                return Err(Error::InvalidParameter(format!(
                    "gradient component {k} = {} disagrees with difference {fd} at {x:?}",
                    g[k]
                )));
            }
            for i in 0..n {
                let fd = (gp[i] - gm[i]) / (2.0 * step);
                let scale = h[(i, k)].abs().max(g[i].abs()).max(1.0);
                if (fd - h[(i, k)]).abs() > 1e-6 * scale {
                    return Err(Error::InvalidParameter(format!(
                        "Hessian entry ({i}, {k}) = {} disagrees with difference {fd} at {x:?}",
                        h[(i, k)]
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Packet parameters at one time.
#[derive(Clone, Debug, PartialEq)]
pub struct PacketState {
    pub t: f64,
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    /// Classical action accumulated since the start of propagation.
    pub s: f64,
    pub a: CMat,
    pub b: CMat,
    /// `log det A` on the continuously tracked branch.
    pub log_det_a: Complex64,
    pub k: Vec<usize>,
    pub mass: f64,
    pub hbar: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvariantResiduals {
    /// Max-abs entry of `BA⁻¹ − (BA⁻¹)ᵀ`.
    pub symmetry: f64,
    /// Max-abs entry of `A†B + B†A − 2I`.
    pub normalization: f64,
}

impl InvariantResiduals {
    pub fn max(&self) -> f64 {
        self.symmetry.max(self.normalization)
    }
}

impl PacketState {
    /// Packet at `t = 0` with `S = 0` and the principal `log det A`.
    pub fn new(q: Vec<f64>, p: Vec<f64>, a: CMat, b: CMat, k: Vec<usize>, mass: f64, hbar: f64) -> Result<Self> {
        let n = q.len();
        if p.len() != n || k.len() != n || a.shape() != (n, n) || b.shape() != (n, n) || n == 0 {
            return Err(Error::Dimension(format!(
                "packet with {n} coordinates needs matching p, k, A and B"
            )));
        }
        if !(mass > 0.0) || !(hbar > 0.0) {
            return Err(Error::InvalidParameter("mass and hbar must be positive".into()));
        }
        let det = a.determinant();
        if det.norm() == 0.0 || !det.norm().is_finite() {
            return Err(Error::Decomposition("A is singular".into()));
        }
        let state = Self {
            t: 0.0,
            q,
            p,
            s: 0.0,
            a,
            b,
            log_det_a: det.ln(),
            k,
            mass,
            hbar,
        };
        let r = state.residuals()?;
        if r.max() > 1e-10 {
            return Err(Error::InvariantViolation(format!(
                "initial packet violates the matrix constraints (symmetry {:e}, normalization {:e})",
                r.symmetry, r.normalization
            )));
        }
        Ok(state)
    }

    /// Ground-state-shaped packet: `A = diag(1/√ω_j)`, `B = diag(√ω_j)` times `m`.
    pub fn gaussian(q: Vec<f64>, p: Vec<f64>, widths: &[f64], k: Vec<usize>, mass: f64, hbar: f64) -> Result<Self> {
        let n = q.len();
        if widths.len() != n {
            return Err(Error::Dimension("one frequency per coordinate".into()));
        }
        let mut a = CMat::zeros(n, n);
        let mut b = CMat::zeros(n, n);
        for (j, &w) in widths.iter().enumerate() {
            if !(w > 0.0) {
                return Err(Error::InvalidParameter(format!("frequency must be positive, got {w}")));
            }
            a[(j, j)] = Complex64::new(1.0 / (mass * w).sqrt(), 0.0);
            b[(j, j)] = Complex64::new((mass * w).sqrt(), 0.0);
        }
        Self::new(q, p, a, b, k, mass, hbar)
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn residuals(&self) -> Result<InvariantResiduals> {
        let n = self.dim();
        let ainv = self
            .a
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Decomposition("A is singular".into()))?;
        let c = &self.b * ainv;
        let symmetry = (&c - c.transpose()).iter().fold(0.0f64, |m, v| m.max(v.norm()));
        let norm = self.a.adjoint() * &self.b + self.b.adjoint() * &self.a - CMat::identity(n, n) * Complex64::new(2.0, 0.0);
        let normalization = norm.iter().fold(0.0f64, |m, v| m.max(v.norm()));
        Ok(InvariantResiduals { symmetry, normalization })
    }

    /// `e^{iS/ħ}`.
    pub fn action_phase(&self) -> Complex64 {
        Complex64::from_polar(1.0, self.s / self.hbar)
    }

    /// Same packet with a different multi-index.
    pub fn with_index(&self, k: Vec<usize>) -> Result<Self> {
        if k.len() != self.dim() {
            return Err(Error::Dimension("multi-index length must match the dimension".into()));
        }
        Ok(Self { k, ..self.clone() })
    }
}

/// Polar pieces of `A`: `U = A(A†A)^{-1/2}` and the real `(AA†)^{-1/2}`.
#[derive(Clone, Debug)]
pub struct PolarFactors {
    pub unitary: CMat,
    pub inv_left_modulus: DMatrix<f64>,
}

fn hermitian_inverse_sqrt(h: &CMat) -> Result<CMat> {
    let eig = SymmetricEigen::new(h.clone());
    let mut d = CMat::zeros(h.nrows(), h.ncols());
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        if !(l > EIGEN_FLOOR) {
            return Err(Error::Decomposition(format!(
                "A†A has eigenvalue {l:e} below {EIGEN_FLOOR:e}"
            )));
        }
        d[(i, i)] = Complex64::new(1.0 / l.sqrt(), 0.0);
    }
    Ok(&eig.eigenvectors * d * eig.eigenvectors.adjoint())
}

pub fn polar_factors(a: &CMat) -> Result<PolarFactors> {
    let right = hermitian_inverse_sqrt(&(a.adjoint() * a))?;
    let left = hermitian_inverse_sqrt(&(a * a.adjoint()))?;
    Ok(PolarFactors {
        unitary: a * right,
        inv_left_modulus: left.map(|v| v.re),
    })
}

// All multi-indices j ≤ k in an order where j − e_l precedes j.
fn lattice(k: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0; k.len()]];
    for (axis, &kmax) in k.iter().enumerate() {
        let current = out.clone();
        for level in 1..=kmax {
            for base in &current {
                let mut j = base.clone();
                j[axis] = level;
                out.push(j);
            }
        }
    }
    out.sort_by_key(|j| j.iter().sum::<usize>());
    out
}

/// `H_k(A; y)` by the multi-direction Hermite recursion with directions
/// `v_s = A(A†A)^{-1/2} e_s`.
///
/// The recursion reads `H_{j+e_l} = 2⟨v_l, y⟩ H_j − 2 Σ_r j_r (v̄_l·v̄_r) H_{j−e_r}`
/// with `⟨v, y⟩ = v†y`.
pub fn multivariate_hermite(a: &CMat, k: &[usize], y: &[f64]) -> Result<Complex64> {
    let n = a.nrows();
    if k.len() != n || y.len() != n || !a.is_square() {
        return Err(Error::Dimension("A, k and y must share the dimension".into()));
    }
    let polar = polar_factors(a)?;
    Ok(hermite_with_directions(&polar.unitary, k, y))
}

fn hermite_with_directions(v: &CMat, k: &[usize], y: &[f64]) -> Complex64 {
    let n = v.nrows();
    if k.iter().all(|&kj| kj == 0) {
        return Complex64::new(1.0, 0.0);
    }
    let proj: Vec<Complex64> = (0..n)
        .map(|l| (0..n).map(|r| v[(r, l)].conj() * y[r]).sum())
        .collect();
    let pair = DMatrix::from_fn(n, n, |l, r| (0..n).map(|i| v[(i, l)].conj() * v[(i, r)].conj()).sum::<Complex64>());
    let mut table: HashMap<Vec<usize>, Complex64> = HashMap::new();
    for j in lattice(k) {
        let value = match j.iter().position(|&c| c > 0) {
            None => Complex64::new(1.0, 0.0),
            Some(l) => {
                let mut prev = j.clone();
                prev[l] -= 1;
                let mut acc = 2.0 * proj[l] * table[&prev];
                for r in 0..n {
                    if prev[r] > 0 {
                        let mut pp = prev.clone();
                        pp[r] -= 1;
                        acc -= 2.0 * prev[r] as f64 * pair[(l, r)] * table[&pp];
                    }
                }
                acc
            }
        };
        table.insert(j, value);
    }
    table[k]
}

fn log_factorial(k: &[usize]) -> f64 {
    k.iter().map(|&kj| (1..=kj).map(|i| (i as f64).ln()).sum::<f64>()).sum()
}

/// Precomputed per-state data for fast evaluation on many points.
pub struct PacketEvaluator<'a> {
    state: &'a PacketState,
    polar: PolarFactors,
    ba_inv: CMat,
    log_prefactor: Complex64,
}

impl<'a> PacketEvaluator<'a> {
    pub fn new(state: &'a PacketState) -> Result<Self> {
        let r = state.residuals()?;
        if r.max() > INVARIANT_LIMIT {
            return Err(Error::InvariantViolation(format!(
                "symmetry residual {:e}, normalization residual {:e}",
                r.symmetry, r.normalization
            )));
        }
        let n = state.dim();
        let order: usize = state.k.iter().sum();
        let polar = polar_factors(&state.a)?;
        let ainv = state.a.clone().try_inverse().ok_or_else(|| Error::Decomposition("A is singular".into()))?;
        let log_prefactor = Complex64::new(
            -0.5 * order as f64 * 2f64.ln() - 0.25 * n as f64 * (PI * state.hbar).ln() - 0.5 * log_factorial(&state.k),
            0.0,
        ) - 0.5 * state.log_det_a;
        Ok(Self {
            state,
            polar,
            ba_inv: &state.b * ainv,
            log_prefactor,
        })
    }

    /// `Φ_k(x)` without the action phase.
    pub fn eval(&self, x: &[f64]) -> Complex64 {
        let s = self.state;
        let n = s.dim();
        let dx: Vec<f64> = x.iter().zip(&s.q).map(|(a, b)| a - b).collect();
        let mut quad = Complex64::new(0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                quad += dx[i] * self.ba_inv[(i, j)] * dx[j];
            }
        }
        let lin: f64 = s.p.iter().zip(&dx).map(|(a, b)| a * b).sum();
        let y: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| self.polar.inv_left_modulus[(i, j)] * dx[j]).sum::<f64>() / s.hbar.sqrt())
            .collect();
        let h = hermite_with_directions(&self.polar.unitary, &s.k, &y);
        let exponent = self.log_prefactor - quad / (2.0 * s.hbar) + Complex64::new(0.0, lin / s.hbar);
        h * exponent.exp()
    }
}

/// `Φ_k(A, B, q, p; x)`.
pub fn evaluate_packet(state: &PacketState, x: &[f64]) -> Result<Complex64> {
    if x.len() != state.dim() {
        return Err(Error::Dimension("point dimension must match the packet".into()));
    }
    Ok(PacketEvaluator::new(state)?.eval(x))
}

/// All `Φ_j` with `j ≤ k` (componentwise) at `x`, by the ladder recursion
/// `√(j_l+1) Φ_{j+e_l} = √(2/ħ) (A⁻¹(x−q))_l Φ_j − Σ_r (A⁻¹Ā)_{lr} √j_r Φ_{j−e_r}`.
///
/// Independent of the polar decomposition; used as a cross-check.
pub fn ladder_family(state: &PacketState, x: &[f64]) -> Result<HashMap<Vec<usize>, Complex64>> {
    let n = state.dim();
    let ainv = state.a.clone().try_inverse().ok_or_else(|| Error::Decomposition("A is singular".into()))?;
    let dx = DVector::from_iterator(n, x.iter().zip(&state.q).map(|(a, b)| Complex64::new(a - b, 0.0)));
    let z = &ainv * &dx * Complex64::new((2.0 / state.hbar).sqrt(), 0.0);
    let mix = &ainv * state.a.map(|v| v.conj());
    let ground = state.with_index(vec![0; n])?;
    let mut table = HashMap::new();
    for j in lattice(&state.k) {
        let value = match j.iter().position(|&c| c > 0) {
            None => evaluate_packet(&ground, x)?,
            Some(l) => {
                let mut prev = j.clone();
                prev[l] -= 1;
                let mut acc = z[l] * table[&prev];
                for r in 0..n {
                    if prev[r] > 0 {
                        let mut pp = prev.clone();
                        pp[r] -= 1;
                        acc -= mix[(l, r)] * (prev[r] as f64).sqrt() * table[&pp];
                    }
                }
                acc / (j[l] as f64).sqrt()
            }
        };
        table.insert(j, value);
    }
    Ok(table)
}

// ---------------------------------------------------------------------------
// propagation

struct PacketSystem<'a, V: ?Sized> {
    v: &'a V,
    n: usize,
    mass: f64,
}

// state layout: q(n) p(n) S A(re,im: 2n²) B(2n²) logdetA(2)
fn offsets(n: usize) -> (usize, usize, usize, usize, usize, usize) {
    let q = 0;
    let p = n;
    let s = 2 * n;
    let a = 2 * n + 1;
    let b = a + 2 * n * n;
    let l = b + 2 * n * n;
    (q, p, s, a, b, l)
}

fn unpack_matrix(y: &[f64], start: usize, n: usize) -> CMat {
    CMat::from_fn(n, n, |i, j| {
        let idx = start + 2 * (i * n + j);
        Complex64::new(y[idx], y[idx + 1])
    })
}

fn pack_matrix(m: &CMat, out: &mut [f64], start: usize) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..n {
            let idx = start + 2 * (i * n + j);
            out[idx] = m[(i, j)].re;
            out[idx + 1] = m[(i, j)].im;
        }
    }
}

impl<V: PotentialModel + ?Sized> OdeSystem for PacketSystem<'_, V> {
    fn dim(&self) -> usize {
        4 * self.n * self.n + 2 * self.n + 3
    }

    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) {
        let n = self.n;
        let (oq, op, os, oa, ob, ol) = offsets(n);
        let q = &y[oq..oq + n];
        let p = &y[op..op + n];
        for i in 0..n {
            dy[oq + i] = p[i] / self.mass;
        }
        let mut grad = vec![0.0; n];
        self.v.gradient(t, q, &mut grad);
        for i in 0..n {
            dy[op + i] = -grad[i];
        }
        let p2: f64 = p.iter().map(|v| v * v).sum();
        dy[os] = p2 / (2.0 * self.mass) - self.v.value(t, q);
        let a = unpack_matrix(y, oa, n);
        let b = unpack_matrix(y, ob, n);
        let i_over_m = Complex64::new(0.0, 1.0 / self.mass);
        let adot = &b * i_over_m;
        let h = self.v.hessian(t, q).map(|v| Complex64::new(0.0, v));
        let bdot = h * &a;
        pack_matrix(&adot, dy, oa);
        pack_matrix(&bdot, dy, ob);
        let ldot = match a.try_inverse() {
            Some(ainv) => (ainv * adot).trace(),
            None => Complex64::new(f64::NAN, f64::NAN),
        };
        dy[ol] = ldot.re;
        dy[ol + 1] = ldot.im;
    }
}

/// Dense packet evolution from a starting state.
pub struct PacketTrajectory {
    start: PacketState,
    dense: DenseSolution,
}

impl PacketTrajectory {
    pub fn t_start(&self) -> f64 {
        self.dense.t_start()
    }

    pub fn t_end(&self) -> f64 {
        self.dense.t_end()
    }

    /// Packet parameters at `t`.
    pub fn state(&self, t: f64) -> PacketState {
        let n = self.start.dim();
        let (oq, op, os, oa, ob, ol) = offsets(n);
        let y = self.dense.eval(t);
        PacketState {
            t,
            q: y[oq..oq + n].to_vec(),
            p: y[op..op + n].to_vec(),
            s: y[os],
            a: unpack_matrix(&y, oa, n),
            b: unpack_matrix(&y, ob, n),
            log_det_a: Complex64::new(y[ol], y[ol + 1]),
            k: self.start.k.clone(),
            mass: self.start.mass,
            hbar: self.start.hbar,
        }
    }

    /// Step-boundary states, for invariant and escape monitoring.
    pub fn node_states(&self) -> Vec<PacketState> {
        self.dense.nodes().into_iter().map(|(t, _)| self.state(t)).collect()
    }
}

/// Integrates `(q, p, S, A, B, log det A)` from `state0.t` to `t_end`.
///
/// Fails with an escape error when `|q|` exceeds `bound` and with an accuracy
/// error when the matrix invariants drift beyond [`INVARIANT_LIMIT`].
pub fn propagate_packet<V: PotentialModel + ?Sized>(
    v: &V,
    state0: &PacketState,
    t_end: f64,
    tol: Tolerance,
    bound: f64,
) -> Result<PacketTrajectory> {
    let n = state0.dim();
    if v.dim() != n {
        return Err(Error::Dimension(format!("potential has {} coordinates, packet {n}", v.dim())));
    }
    let sys = PacketSystem { v, n, mass: state0.mass };
    let (oq, op, os, oa, ob, ol) = offsets(n);
    let mut y0 = vec![0.0; sys.dim()];
    y0[oq..oq + n].copy_from_slice(&state0.q);
    y0[op..op + n].copy_from_slice(&state0.p);
    y0[os] = state0.s;
    pack_matrix(&state0.a, &mut y0, oa);
    pack_matrix(&state0.b, &mut y0, ob);
    y0[ol] = state0.log_det_a.re;
    y0[ol + 1] = state0.log_det_a.im;
    let dense = ode::integrate(&sys, state0.t, &y0, t_end, tol)?;
    let traj = PacketTrajectory {
        start: state0.clone(),
        dense,
    };
    let mut worst: f64 = 0.0;
    for (t, y) in traj.dense.nodes() {
        let qn = y[oq..oq + n].iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(qn <= bound) {
            return Err(Error::Escape { t, bound });
        }
    }
    for st in traj.node_states() {
        worst = worst.max(st.residuals()?.max());
    }
    if worst > INVARIANT_LIMIT {
        return Err(Error::Accuracy {
            drift: worst,
            limit: INVARIANT_LIMIT,
        });
    }
    Ok(traj)
}

/// Classical path `(q, p, S)` alone.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassicalPoint {
    pub t: f64,
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub s: f64,
}

struct ClassicalSystem<'a, V: ?Sized> {
    v: &'a V,
    mass: f64,
}

impl<V: PotentialModel + ?Sized> OdeSystem for ClassicalSystem<'_, V> {
    fn dim(&self) -> usize {
        2 * self.v.dim() + 1
    }

    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) {
        let n = self.v.dim();
        let (q, p) = (&y[..n], &y[n..2 * n]);
        let mut g = vec![0.0; n];
        self.v.gradient(t, q, &mut g);
        for i in 0..n {
            dy[i] = p[i] / self.mass;
            dy[n + i] = -g[i];
        }
        dy[2 * n] = p.iter().map(|v| v * v).sum::<f64>() / (2.0 * self.mass) - self.v.value(t, q);
    }
}

/// Dense classical trajectory with its action.
pub struct ClassicalTrajectory {
    n: usize,
    dense: DenseSolution,
}

impl ClassicalTrajectory {
    pub fn at(&self, t: f64) -> ClassicalPoint {
        let y = self.dense.eval(t);
        let n = self.n;
        ClassicalPoint {
            t,
            q: y[..n].to_vec(),
            p: y[n..2 * n].to_vec(),
            s: y[2 * n],
        }
    }

    pub fn t_end(&self) -> f64 {
        self.dense.t_end()
    }
}

/// Integrates `q̇ = p/m`, `ṗ = −∇V`, `Ṡ = p²/2m − V` from `t = 0`.
pub fn classical_trajectory<V: PotentialModel + ?Sized>(
    v: &V,
    q0: &[f64],
    p0: &[f64],
    mass: f64,
    t_end: f64,
    tol: Tolerance,
    bound: f64,
) -> Result<ClassicalTrajectory> {
    let n = v.dim();
    if q0.len() != n || p0.len() != n {
        return Err(Error::Dimension("initial point must match the potential".into()));
    }
    if !(mass > 0.0) {
        return Err(Error::InvalidParameter("mass must be positive".into()));
    }
    let sys = ClassicalSystem { v, mass };
    let mut y0 = q0.to_vec();
    y0.extend_from_slice(p0);
    y0.push(0.0);
    let dense = ode::integrate(&sys, 0.0, &y0, t_end, tol)?;
    for (t, y) in dense.nodes() {
        let qn = y[..n].iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(qn <= bound) {
            return Err(Error::Escape { t, bound });
        }
    }
    Ok(ClassicalTrajectory { n, dense })
}

struct WidthSystem<'a, V: ?Sized> {
    v: &'a V,
    path: &'a ClassicalTrajectory,
    mass: f64,
}

impl<V: PotentialModel + ?Sized> OdeSystem for WidthSystem<'_, V> {
    fn dim(&self) -> usize {
        4 * self.path.n * self.path.n
    }

    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) {
        let n = self.path.n;
        let a = unpack_matrix(y, 0, n);
        let b = unpack_matrix(y, 2 * n * n, n);
        let q = self.path.at(t).q;
        let adot = b * Complex64::new(0.0, 1.0 / self.mass);
        let bdot = self.v.hessian(t, &q).map(|v| Complex64::new(0.0, v)) * a;
        pack_matrix(&adot, dy, 0);
        pack_matrix(&bdot, dy, 2 * n * n);
    }
}

/// `A(t)`, `B(t)` sampled at requested times.
#[derive(Clone, Debug)]
pub struct WidthTrace {
    pub times: Vec<f64>,
    pub a: Vec<CMat>,
    pub b: Vec<CMat>,
}

/// Integrates `Ȧ = (i/m)B`, `Ḃ = iV_H(t, q(t))A` along a classical path.
pub fn propagate_ab<V: PotentialModel + ?Sized>(
    v: &V,
    path: &ClassicalTrajectory,
    a0: &CMat,
    b0: &CMat,
    mass: f64,
    times: &[f64],
    tol: Tolerance,
) -> Result<WidthTrace> {
    let n = path.n;
    if a0.shape() != (n, n) || b0.shape() != (n, n) {
        return Err(Error::Dimension("A and B must match the path dimension".into()));
    }
    let t_end = times.iter().copied().fold(0.0, f64::max);
    if t_end > path.t_end() * (1.0 + 1e-12) {
        return Err(Error::InvalidParameter(format!(
            "requested time {t_end} beyond the trajectory end {}",
            path.t_end()
        )));
    }
    let sys = WidthSystem { v, path, mass };
    let mut y0 = vec![0.0; 4 * n * n];
    pack_matrix(a0, &mut y0, 0);
    pack_matrix(b0, &mut y0, 2 * n * n);
    let dense = ode::integrate(&sys, 0.0, &y0, t_end, tol)?;
    let mut a = Vec::with_capacity(times.len());
    let mut b = Vec::with_capacity(times.len());
    let mut worst: f64 = 0.0;
    for &t in times {
        let y = dense.eval(t);
        let at = unpack_matrix(&y, 0, n);
        let bt = unpack_matrix(&y, 2 * n * n, n);
        let norm = at.adjoint() * &bt + bt.adjoint() * &at - CMat::identity(n, n) * Complex64::new(2.0, 0.0);
        worst = worst.max(norm.iter().fold(0.0f64, |m, v| m.max(v.norm())));
        if let Some(inv) = at.clone().try_inverse() {
            let c = &bt * inv;
            worst = worst.max((&c - c.transpose()).iter().fold(0.0f64, |m, v| m.max(v.norm())));
        }
        a.push(at);
        b.push(bt);
    }
    if worst > INVARIANT_LIMIT {
        return Err(Error::Accuracy {
            drift: worst,
            limit: INVARIANT_LIMIT,
        });
    }
    Ok(WidthTrace {
        times: times.to_vec(),
        a,
        b,
    })
}

/// One JSON line per state: `q`, `p`, `S`, flattened `A`, `B` and residuals.
pub fn trace_record(state: &PacketState) -> Result<String> {
    let r = state.residuals()?;
    let flat = |m: &CMat| -> (Vec<f64>, Vec<f64>) {
        let n = m.nrows();
        let mut re = Vec::with_capacity(n * n);
        let mut im = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                re.push(m[(i, j)].re);
                im.push(m[(i, j)].im);
            }
        }
        (re, im)
    };
    let (a_re, a_im) = flat(&state.a);
    let (b_re, b_im) = flat(&state.b);
    let rec = serde_json::json!({
        "t": state.t,
        "q": state.q,
        "p": state.p,
        "S": state.s,
        "A_re": a_re,
        "A_im": a_im,
        "B_re": b_re,
        "B_im": b_im,
        "symmetry_residual": r.symmetry,
        "normalization_residual": r.normalization,
    });
    Ok(serde_json::to_string(&rec).expect("record serializes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn hermite_low_orders() {
        let one = CMat::identity(1, 1);
        assert_eq!(multivariate_hermite(&one, &[0], &[0.7]).unwrap(), c(1.0, 0.0));
        assert!((multivariate_hermite(&one, &[1], &[0.7]).unwrap() - c(1.4, 0.0)).norm() < 1e-15);
        let h2 = multivariate_hermite(&one, &[2], &[0.7]).unwrap();
        assert!((h2 - c(4.0 * 0.49 - 2.0, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn singular_matrix_is_rejected() {
        let a = CMat::zeros(2, 2);
        assert!(matches!(multivariate_hermite(&a, &[1, 0], &[0.1, 0.2]), Err(Error::Decomposition(_))));
    }

    #[test]
    fn ground_packet_value() {
        let st = PacketState::gaussian(vec![0.0], vec![0.0], &[1.0], vec![0], 1.0, 0.3).unwrap();
        let x: f64 = 0.4;
        let v = evaluate_packet(&st, &[x]).unwrap();
        let expect = (PI * 0.3).powf(-0.25) * (-x * x / 0.6).exp();
        assert!((v - expect).norm() < 1e-14);
    }

    // A = G^{-1/2} U, B = (G + iH) A satisfies both constraints for real symmetric
    // G > 0, H and unitary U
    fn squeezed_2d() -> PacketState {
        let g_inv_sqrt = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, 0.2, 1.2]).map(|v| c(v, 0.0));
        let g = (&g_inv_sqrt * &g_inv_sqrt).try_inverse().unwrap();
        let h = CMat::from_row_slice(2, 2, &[c(0.0, 0.3), c(0.0, -0.1), c(0.0, -0.1), c(0.0, 0.2)]);
        let (ct, st) = (0.6f64.cos(), 0.6f64.sin());
        let u = CMat::from_row_slice(2, 2, &[c(ct, 0.0), c(-st, 0.0), c(st, 0.0), c(ct, 0.0)])
            * CMat::from_diagonal(&DVector::from_vec(vec![Complex64::from_polar(1.0, 0.4), Complex64::from_polar(1.0, -1.1)]));
        let a = g_inv_sqrt * u;
        let b = (g + h) * &a;
        PacketState::new(vec![0.2, -0.1], vec![0.5, 0.3], a, b, vec![0, 0], 1.0, 0.5).unwrap()
    }

    #[test]
    fn recursion_matches_ladder_family() {
        let st = squeezed_2d().with_index(vec![2, 2]).unwrap();
        let x = [0.35, -0.4];
        let family = ladder_family(&st, &x).unwrap();
        for (j, v) in &family {
            let direct = evaluate_packet(&st.with_index(j.clone()).unwrap(), &x).unwrap();
            assert!((direct - v).norm() < 1e-12 * v.norm().max(1.0), "{j:?}: {direct} vs {v}");
        }
    }

    #[test]
    fn free_widths_grow_linearly() {
        let v = FreePotential { dim: 1 };
        let st = PacketState::gaussian(vec![0.0], vec![1.0], &[2.0], vec![0], 1.0, 1.0).unwrap();
        let traj = propagate_packet(&v, &st, 3.0, Tolerance::default(), 1e6).unwrap();
        let s = traj.state(3.0);
        let expect = st.a[(0, 0)] + c(0.0, 1.0) * st.b[(0, 0)] * 3.0;
        assert!((s.a[(0, 0)] - expect).norm() < 1e-10);
        assert!((s.q[0] - 3.0).abs() < 1e-10);
        assert!((s.s - 1.5).abs() < 1e-10);
    }

    #[test]
    fn harmonic_ground_state_phase() {
        let w = 1.3;
        let v = QuadraticPotential::harmonic(1.0, w);
        let st = PacketState::gaussian(vec![0.0], vec![0.0], &[w], vec![0], 1.0, 1.0).unwrap();
        let traj = propagate_packet(&v, &st, 2.0, Tolerance::default(), 1e6).unwrap();
        let s = traj.state(2.0);
        let v0 = evaluate_packet(&st, &[0.3]).unwrap();
        let v1 = evaluate_packet(&s, &[0.3]).unwrap() * s.action_phase();
        let expect = v0 * Complex64::from_polar(1.0, -0.5 * w * 2.0);
        assert!((v1 - expect).norm() < 1e-9, "{v1} vs {expect}");
    }

    #[test]
    fn derivative_checks() {
        let a = AnharmonicPotential {
            mass: 1.0,
            omega: 1.0,
            lambda: 0.1,
        };
        verify_potential(&a, 1, 50, 2.0, 0.0).unwrap();
        let p = PaulTrapPotential {
            params: HillParameters::quadrupole(0.0, 0.4, 2.0).unwrap(),
            mass: 1.0,
        };
        verify_potential(&p, 2, 50, 2.0, 10.0).unwrap();
    }

    #[test]
    fn escape_is_reported() {
        let v = QuadraticPotential::harmonic(1.0, 1.0);
        let st = PacketState::gaussian(vec![5.0], vec![0.0], &[1.0], vec![0], 1.0, 1.0).unwrap();
        assert!(matches!(
            propagate_packet(&v, &st, 1.0, Tolerance::default(), 2.0),
            Err(Error::Escape { .. })
        ));
    }
}
