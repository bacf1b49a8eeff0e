//! Equilibrium configurations of N ions: the (μ, ν) potential family with its
//! Coulomb member, and the Calogero chain whose equilibria are Hermite zeros.
//!
//! Positions are passed as flat row-major slices of length `N·d`, ion `α`
//! occupying `x[α·d .. α·d + d]`.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::hermite::hermite_zeros;

/// One `C_{μν} V_{μν}` contribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionTerm {
    pub mu: f64,
    pub nu: f64,
    pub coeff: f64,
}

impl InteractionTerm {
    pub fn coulomb() -> Self {
        Self {
            mu: 0.0,
            nu: 0.5,
            coeff: 1.0,
        }
    }
}

/// Which pair interaction the Calogero model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalogeroForm {
    /// `g Σ (x_α − x_β)^{-2}`, the classic Calogero interaction.
    InverseSquare,
    /// `g Σ (x_α − x_β)^{2}`, the exponent as printed.
    Printed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrystalModel {
    /// `W = b s/2 + 2 a_c Σ C_{μν} V_{μν}`.
    Family { terms: Vec<InteractionTerm> },
    /// `W = b s/2 + a_c g Σ_{α≠β} (x_α − x_β)^{∓2}`, one dimension only.
    Calogero { g: f64, form: CalogeroForm },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrystalParameters {
    pub n: usize,
    pub d: usize,
    pub b: f64,
    pub a_c: f64,
    pub model: CrystalModel,
}

impl CrystalParameters {
    pub fn coulomb(n: usize, d: usize, b: f64, a_c: f64) -> Result<Self> {
        let p = Self {
            n,
            d,
            b,
            a_c,
            model: CrystalModel::Family {
                terms: vec![InteractionTerm::coulomb()],
            },
        };
        p.validate()?;
        Ok(p)
    }

    pub fn family(n: usize, d: usize, b: f64, a_c: f64, terms: Vec<InteractionTerm>) -> Result<Self> {
        let p = Self {
            n,
            d,
            b,
            a_c,
            model: CrystalModel::Family { terms },
        };
        p.validate()?;
        Ok(p)
    }

    pub fn calogero(n: usize, b: f64, a_c: f64, g: f64, form: CalogeroForm) -> Result<Self> {
        let p = Self {
            n,
            d: 1,
            b,
            a_c,
            model: CrystalModel::Calogero { g, form },
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidParameter("ion count must be at least 1".into()));
        }
        if !(1..=3).contains(&self.d) {
            return Err(Error::InvalidParameter(format!(
                "dimension must be 1, 2 or 3, got {}",
                self.d
            )));
        }
        if !self.b.is_finite() || !self.a_c.is_finite() {
            return Err(Error::InvalidParameter("b and a_c must be finite".into()));
        }
        match &self.model {
            CrystalModel::Family { terms } => {
                for t in terms {
                    if !(t.mu.is_finite() && t.nu.is_finite() && t.coeff.is_finite()) {
                        return Err(Error::InvalidParameter(format!("non-finite term {t:?}")));
                    }
                    if t.mu == t.nu && t.coeff != 0.0 {
                        return Err(Error::InvalidParameter(format!(
                            "C_{{μν}} must vanish for μ = ν (μ = ν = {})",
                            t.mu
                        )));
                    }
                }
            }
            CrystalModel::Calogero { g, .. } => {
                if self.d != 1 {
                    return Err(Error::InvalidParameter(
                        "the Calogero model is one-dimensional".into(),
                    ));
                }
                if !g.is_finite() {
                    return Err(Error::InvalidParameter("Calogero coupling must be finite".into()));
                }
            }
        }
        Ok(())
    }

    /// Checks the quantum lower bound `g > −ħ²/4m` for a Calogero coupling.
    pub fn check_calogero_bound(&self, hbar: f64, mass: f64) -> Result<()> {
        if let CrystalModel::Calogero { g, .. } = self.model {
            let bound = -hbar * hbar / (4.0 * mass);
            if g <= bound {
                return Err(Error::InvalidParameter(format!(
                    "Calogero coupling g = {g} must exceed {bound}"
                )));
            }
        }
        Ok(())
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n * self.d {
            return Err(Error::Dimension(format!(
                "expected {}×{} positions, got {} values",
                self.n,
                self.d,
                x.len()
            )));
        }
        Ok(())
    }

    // typical length scale, used for initial guesses and difference steps
    fn length_scale(&self) -> f64 {
        let b = self.b.abs().max(1e-300);
        let strength = match &self.model {
            CrystalModel::Family { terms } => {
                terms.iter().map(|t| t.coeff.abs()).sum::<f64>() * self.a_c.abs()
            }
            CrystalModel::Calogero { g, .. } => (g * self.a_c).abs(),
        };
        let l = if strength > 0.0 {
            (strength / b).cbrt()
        } else {
            1.0
        };
        if l.is_finite() && l > 0.0 {
            l
        } else {
            1.0
        }
    }
}

/// Relative coordinates `y = x − centroid` and the collective variable `s = Σ y²`.
pub fn collective_coordinates(x: &[f64], n: usize, d: usize) -> (Vec<f64>, f64) {
    let mut centroid = vec![0.0; d];
    for a in 0..n {
        for j in 0..d {
            centroid[j] += x[a * d + j];
        }
    }
    for c in &mut centroid {
        *c /= n as f64;
    }
    let mut y = x.to_vec();
    let mut s = 0.0;
    for a in 0..n {
        for j in 0..d {
            y[a * d + j] -= centroid[j];
            s += y[a * d + j] * y[a * d + j];
        }
    }
    (y, s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialTerms {
    pub total: f64,
    /// `V_{μν}` for each family term, or the bare Calogero pair sum.
    pub terms: Vec<f64>,
}

fn dist2(x: &[f64], d: usize, a: usize, b: usize) -> f64 {
    (0..d).map(|j| (x[a * d + j] - x[b * d + j]).powi(2)).sum()
}

fn check_pairs(x: &[f64], n: usize, d: usize) -> Result<()> {
    for a in 0..n {
        for b in a + 1..n {
            if dist2(x, d, a, b) == 0.0 {
                return Err(Error::Singularity {
                    first: a,
                    second: b,
                });
            }
        }
    }
    Ok(())
}

fn singular_terms(params: &CrystalParameters) -> bool {
    match &params.model {
        CrystalModel::Family { terms } => terms.iter().any(|t| t.coeff != 0.0 && t.nu < 1.0),
        CrystalModel::Calogero { form, .. } => *form == CalogeroForm::InverseSquare,
    }
}

// Σ_{α≠β} (r²)^{ν−1} over ordered pairs
fn pair_sum(x: &[f64], n: usize, d: usize, nu: f64) -> f64 {
    let mut sum = 0.0;
    for a in 0..n {
        for b in a + 1..n {
            sum += dist2(x, d, a, b).powf(nu - 1.0);
        }
    }
    2.0 * sum
}

/// Total potential `W` and its individual terms.
pub fn potential_terms(x: &[f64], params: &CrystalParameters) -> Result<PotentialTerms> {
    params.check_len(x)?;
    let (n, d) = (params.n, params.d);
    if singular_terms(params) {
        check_pairs(x, n, d)?;
    }
    let (_, s) = collective_coordinates(x, n, d);
    let mut total = 0.5 * params.b * s;
    let mut terms = Vec::new();
    match &params.model {
        CrystalModel::Family { terms: list } => {
            for t in list {
                if t.mu != 0.0 && s == 0.0 {
                    return Err(Error::Singularity {
                        first: 0,
                        second: 0,
                    });
                }
                let v = s.powf(-t.mu) * pair_sum(x, n, d, t.nu);
                total += 2.0 * params.a_c * t.coeff * v;
                terms.push(v);
            }
        }
        CrystalModel::Calogero { g, form } => {
            let v = match form {
                CalogeroForm::InverseSquare => pair_sum(x, n, 1, 0.0),
                CalogeroForm::Printed => pair_sum(x, n, 1, 2.0),
            };
            total += params.a_c * g * v;
            terms.push(v);
        }
    }
    Ok(PotentialTerms { total, terms })
}

/// Gradient `∂W/∂x_{αj}`, flattened like the positions. Zero at equilibrium.
pub fn equilibrium_residual(x: &[f64], params: &CrystalParameters) -> Result<Vec<f64>> {
    params.check_len(x)?;
    let (n, d) = (params.n, params.d);
    if singular_terms(params) {
        check_pairs(x, n, d)?;
    }
    let (y, s) = collective_coordinates(x, n, d);
    let mut grad: Vec<f64> = y.iter().map(|v| params.b * v).collect();
    match &params.model {
        CrystalModel::Family { terms } => {
            for t in terms {
                if t.coeff == 0.0 {
                    continue;
                }
                if t.mu != 0.0 {
                    if s == 0.0 {
                        return Err(Error::Singularity {
                            first: 0,
                            second: 0,
                        });
                    }
                    let v = s.powf(-t.mu) * pair_sum(x, n, d, t.nu);
                    let f = -4.0 * params.a_c * t.coeff * t.mu * v / s;
                    for (g, yv) in grad.iter_mut().zip(&y) {
                        *g += f * yv;
                    }
                }
                if t.nu != 1.0 {
                    let f = 8.0 * params.a_c * t.coeff * (t.nu - 1.0) * s.powf(-t.mu);
                    for a in 0..n {
                        for b in 0..n {
                            if a == b {
                                continue;
                            }
                            let w = dist2(x, d, a, b).powf(t.nu - 2.0);
                            for j in 0..d {
                                grad[a * d + j] += f * (x[a * d + j] - x[b * d + j]) * w;
                            }
                        }
                    }
                }
            }
        }
        CrystalModel::Calogero { g, form } => {
            let strength = params.a_c * g;
            for a in 0..n {
                for b in 0..n {
                    if a == b {
                        continue;
                    }
                    let r = x[a] - x[b];
                    grad[a] += match form {
                        CalogeroForm::InverseSquare => -4.0 * strength / (r * r * r),
                        CalogeroForm::Printed => 4.0 * strength * r,
                    };
                }
            }
        }
    }
    Ok(grad)
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Finite-difference Hessian of `W` from the analytic gradient, symmetrized.
pub fn hessian(x: &[f64], params: &CrystalParameters) -> Result<DMatrix<f64>> {
    params.check_len(x)?;
    let dim = x.len();
    let mut h = DMatrix::zeros(dim, dim);
    let mut xp = x.to_vec();
    let scale = params.length_scale();
    for k in 0..dim {
        let step = 1e-5 * x[k].abs().max(scale);
        xp[k] = x[k] + step;
        let gp = equilibrium_residual(&xp, params)?;
        xp[k] = x[k] - step;
        let gm = equilibrium_residual(&xp, params)?;
        xp[k] = x[k];
        for i in 0..dim {
            h[(i, k)] = (gp[i] - gm[i]) / (2.0 * step);
        }
    }
    Ok(0.5 * (&h + h.transpose()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrystalConfiguration {
    pub n: usize,
    pub d: usize,
    /// `N` rows of `d` coordinates.
    pub positions: Vec<Vec<f64>>,
    pub relative: Vec<Vec<f64>>,
    pub s: f64,
    /// Max-abs entry of the equilibrium residual.
    pub residual: f64,
    pub energy: f64,
    pub iterations: usize,
    pub seed: Option<u64>,
}

fn rows(x: &[f64], d: usize) -> Vec<Vec<f64>> {
    x.chunks(d).map(<[f64]>::to_vec).collect()
}

impl CrystalConfiguration {
    pub fn from_positions(x: &[f64], params: &CrystalParameters) -> Result<Self> {
        let residual = max_abs(&equilibrium_residual(x, params)?);
        let energy = potential_terms(x, params)?.total;
        let (y, s) = collective_coordinates(x, params.n, params.d);
        Ok(Self {
            n: params.n,
            d: params.d,
            positions: rows(x, params.d),
            relative: rows(&y, params.d),
            s,
            residual,
            energy,
            iterations: 0,
            seed: None,
        })
    }

    pub fn flat_positions(&self) -> Vec<f64> {
        self.positions.iter().flatten().copied().collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("configuration serializes")
    }

    /// Sorted coordinates of a 1D chain as one comma-separated line.
    pub fn write_csv_line<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut xs: Vec<f64> = self.positions.iter().map(|p| p[0]).collect();
        xs.sort_by(f64::total_cmp);
        let line: Vec<String> = xs.iter().map(|v| format!("{v:.17e}")).collect();
        writeln!(out, "{}", line.join(","))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Convergence threshold on the max-abs residual.
    pub tol: f64,
    pub max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iterations: 500,
        }
    }
}

// Removes the centroid from a direction, per coordinate.
fn project_out_translations(v: &mut [f64], n: usize, d: usize) {
    for j in 0..d {
        let mean = (0..n).map(|a| v[a * d + j]).sum::<f64>() / n as f64;
        for a in 0..n {
            v[a * d + j] -= mean;
        }
    }
}

fn search_direction(h: &DMatrix<f64>, g: &[f64], n: usize, d: usize) -> Vec<f64> {
    let dim = g.len();
    let eig = SymmetricEigen::new(h.clone());
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |m, l| m.max(l.abs()));
    let cutoff = 1e-9 * lmax.max(1e-300);
    let mut newton = vec![0.0; dim];
    let mut indefinite = false;
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let norm0: f64 = v.iter().map(|c| c * c).sum::<f64>();
        project_out_translations(&mut v, n, d);
        let norm1: f64 = v.iter().map(|c| c * c).sum::<f64>();
        if norm1 < 0.5 * norm0 {
            // translation mode
            continue;
        }
        if lam < -cutoff {
            indefinite = true;
            break;
        }
        if lam <= cutoff {
            continue;
        }
        let coef: f64 = eig.eigenvectors.column(k).iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / lam;
        for i in 0..dim {
            newton[i] -= coef * eig.eigenvectors[(i, k)];
        }
    }
    let mut p = if indefinite {
        g.iter().map(|v| -v / lmax.max(1e-300)).collect()
    } else {
        newton
    };
    project_out_translations(&mut p, n, d);
    p
}

/// Damped Newton descent on `W` from `init`.
///
/// The centroid of `init` is removed first, so translated starting points give
/// identical results.
pub fn solve_equilibrium(
    params: &CrystalParameters,
    init: &[f64],
    opts: SolverOptions,
) -> Result<CrystalConfiguration> {
    params.validate()?;
    params.check_len(init)?;
    let (n, d) = (params.n, params.d);
    if n == 1 {
        let origin = vec![0.0; d];
        return CrystalConfiguration::from_positions(&origin, params);
    }
    let (mut x, _) = collective_coordinates(init, n, d);
    if singular_terms(params) {
        check_pairs(&x, n, d)?;
    }
    let mut w = potential_terms(&x, params)?.total;
    let mut g = equilibrium_residual(&x, params)?;
    let mut res = max_abs(&g);
    let mut iterations = 0;
    while res >= opts.tol {
        if iterations >= opts.max_iterations {
            let mut best = CrystalConfiguration::from_positions(&x, params)?;
            best.iterations = iterations;
            return Err(Error::IterationLimit {
                iterations,
                residual: res,
                best: Box::new(best),
            });
        }
        iterations += 1;
        let h = hessian(&x, params)?;
        let mut p = search_direction(&h, &g, n, d);
        let mut slope: f64 = p.iter().zip(&g).map(|(a, b)| a * b).sum();
        if !(slope < 0.0) {
            p = g.iter().map(|v| -v).collect();
            project_out_translations(&mut p, n, d);
            slope = p.iter().zip(&g).map(|(a, b)| a * b).sum();
        }
        // keep a step from jumping ions through each other
        let pmax = max_abs(&p);
        let limit = 0.5 * params.length_scale().max(max_abs(&x));
        let mut alpha = if pmax > limit { limit / pmax } else { 1.0 };
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a + alpha * b).collect();
            if let (Ok(pt), Ok(gt)) = (potential_terms(&trial, params), equilibrium_residual(&trial, params)) {
                let rt = max_abs(&gt);
                let armijo = pt.total <= w + 1e-4 * alpha * slope;
                // near convergence W changes below rounding; accept on the gradient instead
                let flat = (pt.total - w).abs() <= 64.0 * f64::EPSILON * w.abs().max(1.0) && rt < res;
                if pt.total.is_finite() && (armijo || flat) {
                    x = trial;
                    w = pt.total;
                    g = gt;
                    res = rt;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            let mut best = CrystalConfiguration::from_positions(&x, params)?;
            best.iterations = iterations;
            return Err(Error::IterationLimit {
                iterations,
                residual: res,
                best: Box::new(best),
            });
        }
    }
    let mut out = CrystalConfiguration::from_positions(&x, params)?;
    out.iterations = iterations;
    Ok(out)
}

/// Random starting configuration, reproducible from `seed`.
pub fn random_init(params: &CrystalParameters, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = params.length_scale() * params.n as f64;
    (0..params.n * params.d)
        .map(|_| rng.gen_range(-half..half))
        .collect()
}

/// Solves from `count` random starts with seeds `seed, seed + 1, …`.
/// Results are ordered by start index.
pub fn multi_start(
    params: &CrystalParameters,
    seed: u64,
    count: usize,
    opts: SolverOptions,
) -> Vec<Result<CrystalConfiguration>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let s = seed.wrapping_add(i as u64);
            let init = random_init(params, s);
            solve_equilibrium(params, &init, opts).map(|mut c| {
                c.seed = Some(s);
                c
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalogeroEquilibrium {
    pub configuration: CrystalConfiguration,
    /// Scaled coordinates `ξ = κ x`, the Hermite zeros.
    pub xi: Vec<f64>,
    pub kappa: f64,
    /// Whether the residual check passed for the selected interaction form.
    pub consistent: bool,
}

/// Scale `κ` with `ξ = κ x`: `κ = (b / (2 a_c g))^{1/4}`.
pub fn calogero_scale(params: &CrystalParameters) -> Result<f64> {
    let CrystalModel::Calogero { g, .. } = params.model else {
        return Err(Error::InvalidParameter("not a Calogero model".into()));
    };
    let ratio = params.b / (2.0 * params.a_c * g);
    if !(ratio > 0.0) || !ratio.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "Calogero scale needs b / (a_c g) > 0, got b = {}, a_c = {}, g = {g}",
            params.b, params.a_c
        )));
    }
    Ok(ratio.powf(0.25))
}

/// Threshold for the Calogero residual check.
pub const CALOGERO_RESIDUAL_LIMIT: f64 = 1e-8;

/// Places the ions at the scaled Hermite zeros and checks the residual.
pub fn calogero_equilibrium(params: &CrystalParameters) -> Result<CalogeroEquilibrium> {
    params.validate()?;
    let kappa = calogero_scale(params)?;
    let xi = hermite_zeros(params.n)?;
    let x: Vec<f64> = xi.iter().map(|v| v / kappa).collect();
    let configuration = CrystalConfiguration::from_positions(&x, params)?;
    // residual in ξ units so the check does not depend on κ
    let consistent = configuration.residual / (params.b.abs() / kappa) < CALOGERO_RESIDUAL_LIMIT;
    Ok(CalogeroEquilibrium {
        configuration,
        xi,
        kappa,
        consistent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_gradient(x: &[f64], p: &CrystalParameters) -> Vec<f64> {
        let mut xp = x.to_vec();
        (0..x.len())
            .map(|k| {
                let h = 1e-6 * x[k].abs().max(1.0);
                xp[k] = x[k] + h;
                let wp = potential_terms(&xp, p).unwrap().total;
                xp[k] = x[k] - h;
                let wm = potential_terms(&xp, p).unwrap().total;
                xp[k] = x[k];
                (wp - wm) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn collective_examples() {
        let (y, s) = collective_coordinates(&[1.0, -1.0], 2, 1);
        assert_eq!(y, vec![1.0, -1.0]);
        assert_eq!(s, 2.0);
        let (y, s) = collective_coordinates(&[3.0, 1.0, 2.0], 1, 3);
        assert_eq!(y, vec![0.0; 3]);
        assert_eq!(s, 0.0);
    }

    #[test]
    fn coulomb_pair_value() {
        let p = CrystalParameters::coulomb(2, 1, 0.0, 1.0).unwrap();
        let t = potential_terms(&[1.0, -1.0], &p).unwrap();
        assert!((t.terms[0] - 1.0).abs() < 1e-15);
        let harmonic = CrystalParameters::family(2, 1, 1.0, 1.0, vec![]).unwrap();
        assert_eq!(potential_terms(&[1.0, -1.0], &harmonic).unwrap().total, 1.0);
    }

    #[test]
    fn coincident_ions_are_rejected() {
        let p = CrystalParameters::coulomb(3, 2, 1.0, 1.0).unwrap();
        let x = [0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        match potential_terms(&x, &p) {
            Err(Error::Singularity { first, second }) => assert_eq!((first, second), (1, 2)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn equal_exponents_need_zero_coefficient() {
        let t = InteractionTerm {
            mu: 1.0,
            nu: 1.0,
            coeff: 0.5,
        };
        assert!(CrystalParameters::family(3, 1, 1.0, 1.0, vec![t]).is_err());
    }

    #[test]
    fn gradient_matches_differences() {
        let terms = vec![
            InteractionTerm::coulomb(),
            InteractionTerm {
                mu: 1.0,
                nu: 2.0,
                coeff: 0.3,
            },
            InteractionTerm {
                mu: 0.5,
                nu: -0.5,
                coeff: 0.2,
            },
        ];
        let p = CrystalParameters::family(4, 3, 1.3, 0.7, terms).unwrap();
        let x = random_init(&p, 11);
        let g = equilibrium_residual(&x, &p).unwrap();
        let f = fd_gradient(&x, &p);
        for (a, b) in g.iter().zip(&f) {
            assert!((a - b).abs() < 1e-6 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn two_ion_separation() {
        let p = CrystalParameters::coulomb(2, 1, 1.0, 1.0).unwrap();
        let c = solve_equilibrium(&p, &[0.3, -0.1], SolverOptions::default()).unwrap();
        let sep = (c.positions[0][0] - c.positions[1][0]).abs();
        assert!((sep - 2.0).abs() < 1e-9, "{sep}");
        assert!(c.residual < 1e-10);
    }

    #[test]
    fn single_ion_sits_at_origin() {
        let p = CrystalParameters::coulomb(1, 3, 1.0, 1.0).unwrap();
        let c = solve_equilibrium(&p, &[1.0, 2.0, 3.0], SolverOptions::default()).unwrap();
        assert_eq!(c.positions, vec![vec![0.0; 3]]);
        assert_eq!(c.residual, 0.0);
    }

    #[test]
    fn planar_crystal_converges() {
        let p = CrystalParameters::coulomb(5, 2, 1.0, 1.0).unwrap();
        let c = solve_equilibrium(&p, &random_init(&p, 3), SolverOptions::default()).unwrap();
        assert!(c.residual < 1e-10);
        let h = hessian(&c.flat_positions(), &p).unwrap();
        let lmin = SymmetricEigen::new(h).eigenvalues.min();
        assert!(lmin > -1e-6, "{lmin}");
    }

    #[test]
    fn calogero_zeros_are_equilibria() {
        for n in [2, 3, 5, 8] {
            let p = CrystalParameters::calogero(n, 1.0, 1.0, 0.7, CalogeroForm::InverseSquare).unwrap();
            let eq = calogero_equilibrium(&p).unwrap();
            assert!(eq.consistent, "n = {n}: {}", eq.configuration.residual);
            let printed = CrystalParameters::calogero(n, 1.0, 1.0, 0.7, CalogeroForm::Printed).unwrap();
            assert!(!calogero_equilibrium(&printed).unwrap().consistent);
        }
    }

    #[test]
    fn iteration_limit_reports_best() {
        let p = CrystalParameters::coulomb(4, 1, 1.0, 1.0).unwrap();
        let opts = SolverOptions {
            tol: 1e-10,
            max_iterations: 1,
        };
        match solve_equilibrium(&p, &[-3.0, -1.0, 0.5, 4.0], opts) {
            Err(Error::IterationLimit { best, .. }) => assert_eq!(best.n, 4),
            other => panic!("{other:?}"),
        }
    }
}
