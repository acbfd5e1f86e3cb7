//! One-dimensional finite-difference solvers.
//!
//! * [`zakai_fd_solve`]: forward Zakai equation for the unnormalised density,
//!   explicit Euler–Maruyama in time, central differences in space,
//!   homogeneous Dirichlet boundaries.
//! * [`dual_backward_solve`]: backward complex dual equation
//!   `∂ₜu = −(Au + i rʲ Bʲu)`, `u_T = φ`, for coefficients free of `y`.
//!   Diffusion is implicit, the first-order and coupling terms explicit.
//!   Boundaries are homogeneous Neumann so that constants stay exact.
//! * [`ito_check`]: both sides of the Itô formula for `μ_t(u_t)` along a
//!   measure path, given `u` and its drift/diffusion integrands.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::export::csv_table;
use crate::measure::WeightedEnsemble;
use crate::model::{coercivity_1d, CoefficientSet, InitialLaw, TestFunction};
use crate::sde::{ObsDriver, ObservationPath, Series, TimeGrid};
use crate::stats::{pairwise_sum, pairwise_sum_complex};

/// Smallest admissible value of `g gᵀ` for the dual solver.
pub const COERCIVITY_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid1D {
    pub x_min: f64,
    pub x_max: f64,
    pub n_points: usize,
}

impl Grid1D {
    pub fn new(x_min: f64, x_max: f64, n_points: usize) -> Result<Self> {
        if n_points < 16 {
            return Err(Error::Configuration(format!("grid needs at least 16 points, got {n_points}")));
        }
        if !(x_max > x_min) || !x_min.is_finite() || !x_max.is_finite() {
            return Err(Error::Configuration(format!("invalid grid bounds [{x_min}, {x_max}]")));
        }
        Ok(Self { x_min, x_max, n_points })
    }

    pub fn spacing(&self) -> f64 {
        (self.x_max - self.x_min) / (self.n_points - 1) as f64
    }

    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        self.x_min + i as f64 * self.spacing()
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_points).map(|i| self.x(i)).collect()
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.x_min && x <= self.x_max
    }
}

/// Complex values on the nodes of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    pub grid: Grid1D,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl GridFunction {
    pub fn real(grid: Grid1D, re: Vec<f64>) -> Result<Self> {
        let im = vec![0.0; re.len()];
        Self::complex(grid, re, im)
    }

    pub fn complex(grid: Grid1D, re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        if re.len() != grid.n_points || im.len() != grid.n_points {
            return Err(Error::DimensionMismatch(format!(
                "{} / {} values for {} grid points",
                re.len(),
                im.len(),
                grid.n_points
            )));
        }
        if re.iter().chain(&im).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("grid function values".into()));
        }
        Ok(Self { grid, re, im })
    }

    pub fn from_values(grid: Grid1D, v: &[Complex64]) -> Result<Self> {
        Self::complex(grid, v.iter().map(|z| z.re).collect(), v.iter().map(|z| z.im).collect())
    }

    pub fn sample(grid: Grid1D, phi: &TestFunction) -> Result<Self> {
        Self::real(grid, grid.nodes().iter().map(|&x| phi.value(&[x])).collect())
    }

    #[inline]
    pub fn at(&self, i: usize) -> Complex64 {
        Complex64::new(self.re[i], self.im[i])
    }

    pub fn values(&self) -> Vec<Complex64> {
        (0..self.grid.n_points).map(|i| self.at(i)).collect()
    }

    /// Four-point Lagrange (cubic) interpolation; errors outside the grid.
    pub fn interpolate(&self, x: f64) -> Result<Complex64> {
        let g = &self.grid;
        if !g.contains(x) {
            return Err(Error::SupportCoverage(format!(
                "point {x} outside [{}, {}]",
                g.x_min, g.x_max
            )));
        }
        let s = (x - g.x_min) / g.spacing();
        let base = (s.floor() as isize - 1).clamp(0, g.n_points as isize - 4) as usize;
        let u = s - base as f64;
        // Nodes at offsets 0, 1, 2, 3 from `base`.
        let w = [
            -(u - 1.0) * (u - 2.0) * (u - 3.0) / 6.0,
            u * (u - 2.0) * (u - 3.0) / 2.0,
            -u * (u - 1.0) * (u - 3.0) / 2.0,
            u * (u - 1.0) * (u - 2.0) / 6.0,
        ];
        let mut out = Complex64::new(0.0, 0.0);
        for (k, wk) in w.iter().enumerate() {
            out += self.at(base + k) * wk;
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &GridFunction) -> f64 {
        (0..self.grid.n_points)
            .map(|i| (self.at(i) - other.at(i)).norm())
            .fold(0.0, f64::max)
    }

    /// CSV with columns `x, re, im`.
    pub fn to_csv(&self) -> String {
        let header = ["x", "re", "im"].map(String::from);
        csv_table(
            &header,
            (0..self.grid.n_points).map(|i| vec![self.grid.x(i), self.re[i], self.im[i]]),
        )
    }
}

/// Coefficients sampled on the grid at one `(t, y)`.
#[derive(Debug, Clone)]
struct NodeCoefficients {
    f: Vec<f64>,
    a: Vec<f64>,
    /// `(ḡ k⁺k)_j` per noise index, each of length `n_points`.
    g_proj: Vec<Vec<f64>>,
    /// `(h₂ᵀ k⁺k)_j`.
    h2_proj: Vec<Vec<f64>>,
}

fn require_1d(coeffs: &CoefficientSet) -> Result<()> {
    if coeffs.dims.d != 1 {
        return Err(Error::Unsupported(format!(
            "grid solvers are one-dimensional, model has d = {}",
            coeffs.dims.d
        )));
    }
    Ok(())
}

fn node_coefficients(coeffs: &CoefficientSet, t: f64, y: &[f64], proj: &crate::linalg::Matrix, grid: &Grid1D) -> Result<NodeCoefficients> {
    let dims = coeffs.dims;
    let lo = dims.l_obs;
    let n = grid.n_points;
    let mut nc = NodeCoefficients {
        f: vec![0.0; n],
        a: vec![0.0; n],
        g_proj: vec![vec![0.0; n]; lo],
        h2_proj: vec![vec![0.0; n]; lo],
    };
    let dims_l = dims.l;
    let mut f = [0.0];
    let mut g = vec![0.0; dims_l];
    let mut gb = vec![0.0; lo];
    let mut h2 = vec![0.0; lo];
    for i in 0..n {
        let x = [grid.x(i)];
        coeffs.f(t, &x, y, &mut f)?;
        coeffs.g(t, &x, y, &mut g)?;
        coeffs.g_bar(t, &x, y, &mut gb)?;
        coeffs.h2(t, &x, y, &mut h2)?;
        nc.f[i] = f[0];
        nc.a[i] = g.iter().map(|v| v * v).sum::<f64>() + gb.iter().map(|v| v * v).sum::<f64>();
        for j in 0..lo {
            let row = proj.row(j);
            // proj is symmetric, so row j equals column j.
            nc.g_proj[j][i] = gb.iter().zip(row).map(|(a, b)| a * b).sum();
            nc.h2_proj[j][i] = h2.iter().zip(row).map(|(a, b)| a * b).sum();
        }
    }
    Ok(nc)
}

/// Central first difference with zero values outside the grid.
fn d1_dirichlet(v: &[f64], h: f64, out: &mut [f64]) {
    let n = v.len();
    for i in 0..n {
        let left = if i == 0 { 0.0 } else { v[i - 1] };
        let right = if i + 1 == n { 0.0 } else { v[i + 1] };
        out[i] = (right - left) / (2.0 * h);
    }
}

fn d2_dirichlet(v: &[f64], h: f64, out: &mut [f64]) {
    let n = v.len();
    for i in 0..n {
        let left = if i == 0 { 0.0 } else { v[i - 1] };
        let right = if i + 1 == n { 0.0 } else { v[i + 1] };
        out[i] = (right - 2.0 * v[i] + left) / (h * h);
    }
}

/// `A*p = −∂(f p) + ½ ∂²(a p)` on the grid (Dirichlet).
pub fn adjoint_generator(coeffs: &CoefficientSet, t: f64, y: &[f64], grid: &Grid1D, p: &[f64]) -> Result<Vec<f64>> {
    require_1d(coeffs)?;
    let proj = coeffs.projection(t, y)?;
    let nc = node_coefficients(coeffs, t, y, &proj.proj, grid)?;
    Ok(apply_adjoint(&nc, grid.spacing(), p))
}

fn apply_adjoint(nc: &NodeCoefficients, h: f64, p: &[f64]) -> Vec<f64> {
    let n = p.len();
    let fp: Vec<f64> = (0..n).map(|i| nc.f[i] * p[i]).collect();
    let ap: Vec<f64> = (0..n).map(|i| nc.a[i] * p[i]).collect();
    let mut d1 = vec![0.0; n];
    let mut d2 = vec![0.0; n];
    d1_dirichlet(&fp, h, &mut d1);
    d2_dirichlet(&ap, h, &mut d2);
    (0..n).map(|i| -d1[i] + 0.5 * d2[i]).collect()
}

/// The forward generator with the same central differences,
/// `f D₁φ + ½ a D₂φ`, for values that vanish outside the grid.
pub fn generator_fd(coeffs: &CoefficientSet, t: f64, y: &[f64], grid: &Grid1D, phi: &[f64]) -> Result<Vec<f64>> {
    require_1d(coeffs)?;
    let proj = coeffs.projection(t, y)?;
    let nc = node_coefficients(coeffs, t, y, &proj.proj, grid)?;
    let h = grid.spacing();
    let n = phi.len();
    let mut d1 = vec![0.0; n];
    let mut d2 = vec![0.0; n];
    d1_dirichlet(phi, h, &mut d1);
    d2_dirichlet(phi, h, &mut d2);
    Ok((0..n).map(|i| nc.f[i] * d1[i] + 0.5 * nc.a[i] * d2[i]).collect())
}

/// Unnormalised densities on the grid at every time step.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityPath {
    pub grid: Grid1D,
    pub time: TimeGrid,
    pub p: Vec<Vec<f64>>,
}

impl DensityPath {
    /// `∫ φ p_n dx` by the trapezoid rule (end values vanish).
    pub fn integrate(&self, n: usize, phi: &TestFunction) -> f64 {
        let h = self.grid.spacing();
        let terms: Vec<f64> = self.p[n]
            .iter()
            .enumerate()
            .map(|(i, p)| p * phi.value(&[self.grid.x(i)]))
            .collect();
        pairwise_sum(&terms) * h
    }

    pub fn mass(&self, n: usize) -> f64 {
        pairwise_sum(&self.p[n]) * self.grid.spacing()
    }

    pub fn snapshot(&self, n: usize) -> Result<GridFunction> {
        GridFunction::real(self.grid, self.p[n].clone())
    }
}

/// Initial density of `X₀` on the nodes.
pub fn initial_density(law: &InitialLaw, grid: &Grid1D) -> Result<Vec<f64>> {
    grid.nodes().iter().map(|&x| law.density_1d(x)).collect()
}

/// Explicit finite-difference solution of the Zakai equation in density form.
///
/// `dt` is taken from the observation path and must satisfy
/// `dt ≤ h² / (2 max a)`; otherwise a configuration error is returned.
pub fn zakai_fd_solve(coeffs: &CoefficientSet, obs: &ObservationPath, p0: &[f64], grid: Grid1D) -> Result<DensityPath> {
    require_1d(coeffs)?;
    if p0.len() != grid.n_points {
        return Err(Error::DimensionMismatch("initial density does not match the grid".into()));
    }
    let driver = ObsDriver::new(coeffs, obs)?;
    let time = obs.grid;
    let h = grid.spacing();
    let n = grid.n_points;
    let lo = coeffs.dims.l_obs;
    let mut out = Vec::with_capacity(time.n_steps + 1);
    let mut p = p0.to_vec();
    p[0] = 0.0;
    p[n - 1] = 0.0;
    out.push(p.clone());
    let mut flux = vec![0.0; n];
    let mut d1 = vec![0.0; n];
    for step in 0..time.n_steps {
        let t = time.time(step);
        let nc = node_coefficients(coeffs, t, obs.at(step), &driver.proj[step], &grid)?;
        let a_max = nc.a.iter().copied().fold(0.0, f64::max);
        if time.dt > h * h / (2.0 * a_max) {
            return Err(Error::Configuration(format!(
                "explicit step dt = {} exceeds the stability bound h²/(2 max a) = {}",
                time.dt,
                h * h / (2.0 * a_max)
            )));
        }
        let mut next: Vec<f64> = apply_adjoint(&nc, h, &p).iter().zip(&p).map(|(ap, pi)| pi + ap * time.dt).collect();
        let dw = driver.dw_obs.row(step);
        for j in 0..lo {
            if dw[j] == 0.0 {
                continue;
            }
            for i in 0..n {
                flux[i] = p[i] * nc.g_proj[j][i];
            }
            d1_dirichlet(&flux, h, &mut d1);
            for i in 0..n {
                next[i] += (-d1[i] + nc.h2_proj[j][i] * p[i]) * dw[j];
            }
        }
        next[0] = 0.0;
        next[n - 1] = 0.0;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("grid density at step {}", step + 1)));
        }
        p = next;
        out.push(p.clone());
    }
    Ok(DensityPath { grid, time, p: out })
}

/// Backward dual solution: `u[n]` approximates `u(t_n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution {
    pub grid: Grid1D,
    pub time: TimeGrid,
    /// Frequency per step, `n_steps × l_obs`.
    pub r: Series,
    pub u: Vec<GridFunction>,
}

fn dual_checks(coeffs: &CoefficientSet, r: &Series, grid: &Grid1D, time: &TimeGrid) -> Result<()> {
    require_1d(coeffs)?;
    if !coeffs.y_free {
        return Err(Error::Unsupported(
            "the backward dual solver only handles coefficients that do not depend on y".into(),
        ));
    }
    if r.width != coeffs.dims.l_obs || r.len() != time.n_steps {
        return Err(Error::DimensionMismatch("frequency path does not match the model or time grid".into()));
    }
    let kappa = coercivity_1d(coeffs, time.horizon, grid.x_min, grid.x_max, grid.n_points)?;
    if kappa < COERCIVITY_FLOOR {
        return Err(Error::Unsupported(format!(
            "g gᵀ is not uniformly positive on the grid (sampled minimum {kappa})"
        )));
    }
    Ok(())
}

/// Tridiagonal solve (Thomas algorithm) with constant-in-time coefficients.
struct Tridiagonal {
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
}

impl Tridiagonal {
    /// `I − dt · ½ a D₂` with Neumann ghost nodes.
    fn implicit_diffusion(a: &[f64], h: f64, dt: f64) -> Self {
        let n = a.len();
        let c = 0.5 * dt / (h * h);
        let mut lower = vec![0.0; n];
        let mut diag = vec![0.0; n];
        let mut upper = vec![0.0; n];
        for i in 0..n {
            let k = c * a[i];
            diag[i] = 1.0 + 2.0 * k;
            if i == 0 {
                upper[i] = -2.0 * k;
            } else if i + 1 == n {
                lower[i] = -2.0 * k;
            } else {
                lower[i] = -k;
                upper[i] = -k;
            }
        }
        Self { lower, diag, upper }
    }

    fn solve(&self, rhs: &mut [f64]) {
        let n = rhs.len();
        let mut c = vec![0.0; n];
        let mut beta = self.diag[0];
        c[0] = self.upper[0] / beta;
        rhs[0] /= beta;
        for i in 1..n {
            beta = self.diag[i] - self.lower[i] * c[i - 1];
            c[i] = self.upper[i] / beta;
            rhs[i] = (rhs[i] - self.lower[i] * rhs[i - 1]) / beta;
        }
        for i in (0..n - 1).rev() {
            rhs[i] -= c[i] * rhs[i + 1];
        }
    }
}

/// Central first difference with homogeneous Neumann ends.
fn d1_neumann(v: &[f64], h: f64, out: &mut [f64]) {
    let n = v.len();
    out[0] = 0.0;
    out[n - 1] = 0.0;
    for i in 1..n - 1 {
        out[i] = (v[i + 1] - v[i - 1]) / (2.0 * h);
    }
}

fn d2_neumann(v: &[f64], h: f64, out: &mut [f64]) {
    let n = v.len();
    let h2 = h * h;
    out[0] = 2.0 * (v[1] - v[0]) / h2;
    out[n - 1] = 2.0 * (v[n - 2] - v[n - 1]) / h2;
    for i in 1..n - 1 {
        out[i] = (v[i + 1] - 2.0 * v[i] + v[i - 1]) / h2;
    }
}

fn dual_setup(coeffs: &CoefficientSet, t: f64, grid: &Grid1D) -> Result<NodeCoefficients> {
    // y-free: any observation value will do.
    let y = vec![0.0; coeffs.dims.d_obs];
    let proj = coeffs.projection(t, &y)?;
    node_coefficients(coeffs, t, &y, &proj.proj, grid)
}

fn dual_stability(nc: &NodeCoefficients, r: &[f64], h: f64, dt: f64) -> Result<()> {
    let speed = (0..nc.f.len())
        .map(|i| {
            nc.f[i].abs()
                + r.iter()
                    .enumerate()
                    .map(|(j, rj)| (rj * nc.g_proj[j][i]).abs())
                    .sum::<f64>()
        })
        .fold(0.0, f64::max);
    if dt * speed > h {
        return Err(Error::Configuration(format!(
            "dual step dt = {dt} violates the transport bound dt·max|speed| ≤ h (speed {speed}, h {h})"
        )));
    }
    Ok(())
}

/// Solves the complex dual equation backwards from `u_T = φ`.
pub fn dual_backward_solve(
    coeffs: &CoefficientSet,
    r: &Series,
    phi: &TestFunction,
    grid: Grid1D,
    time: TimeGrid,
) -> Result<DualSolution> {
    dual_checks(coeffs, r, &grid, &time)?;
    let n = grid.n_points;
    let h = grid.spacing();
    let dt = time.dt;
    let lo = coeffs.dims.l_obs;
    let mut u: Vec<Complex64> = grid.nodes().iter().map(|&x| Complex64::new(phi.value(&[x]), 0.0)).collect();
    let mut path = vec![GridFunction::from_values(grid, &u)?];
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    let mut d1r = vec![0.0; n];
    let mut d1i = vec![0.0; n];
    for step in (0..time.n_steps).rev() {
        let nc = dual_setup(coeffs, time.time(step), &grid)?;
        let rs = r.row(step);
        dual_stability(&nc, rs, h, dt)?;
        let tri = Tridiagonal::implicit_diffusion(&nc.a, h, dt);
        for i in 0..n {
            re[i] = u[i].re;
            im[i] = u[i].im;
        }
        d1_neumann(&re, h, &mut d1r);
        d1_neumann(&im, h, &mut d1i);
        let mut rhs = u.clone();
        for i in 0..n {
            let du = Complex64::new(d1r[i], d1i[i]);
            let mut b = Complex64::new(0.0, 0.0);
            for j in 0..lo {
                b += (du * nc.g_proj[j][i] + u[i] * nc.h2_proj[j][i]) * rs[j];
            }
            rhs[i] += (du * nc.f[i] + Complex64::i() * b) * dt;
        }
        let mut rr: Vec<f64> = rhs.iter().map(|z| z.re).collect();
        let mut ri: Vec<f64> = rhs.iter().map(|z| z.im).collect();
        tri.solve(&mut rr);
        tri.solve(&mut ri);
        for i in 0..n {
            u[i] = Complex64::new(rr[i], ri[i]);
        }
        path.push(GridFunction::from_values(grid, &u)?);
    }
    path.reverse();
    Ok(DualSolution {
        grid,
        time,
        r: r.clone(),
        u: path,
    })
}

/// The same scheme written as the coupled real system
/// `∂_τu¹ = Au¹ − rʲBʲu²`, `∂_τu² = Au² + rʲBʲu¹` (τ = T − t).
/// Returns `(u¹, u²)` per grid time.
pub fn dual_backward_solve_split(
    coeffs: &CoefficientSet,
    r: &Series,
    phi: &TestFunction,
    grid: Grid1D,
    time: TimeGrid,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    dual_checks(coeffs, r, &grid, &time)?;
    let n = grid.n_points;
    let h = grid.spacing();
    let dt = time.dt;
    let lo = coeffs.dims.l_obs;
    let mut u1: Vec<f64> = grid.nodes().iter().map(|&x| phi.value(&[x])).collect();
    let mut u2 = vec![0.0; n];
    let mut p1 = vec![u1.clone()];
    let mut p2 = vec![u2.clone()];
    let mut d1a = vec![0.0; n];
    let mut d1b = vec![0.0; n];
    for step in (0..time.n_steps).rev() {
        let nc = dual_setup(coeffs, time.time(step), &grid)?;
        let rs = r.row(step);
        dual_stability(&nc, rs, h, dt)?;
        let tri = Tridiagonal::implicit_diffusion(&nc.a, h, dt);
        d1_neumann(&u1, h, &mut d1a);
        d1_neumann(&u2, h, &mut d1b);
        let mut rhs1 = u1.clone();
        let mut rhs2 = u2.clone();
        for i in 0..n {
            let mut b1 = 0.0;
            let mut b2 = 0.0;
            for j in 0..lo {
                b1 += (d1a[i] * nc.g_proj[j][i] + u1[i] * nc.h2_proj[j][i]) * rs[j];
                b2 += (d1b[i] * nc.g_proj[j][i] + u2[i] * nc.h2_proj[j][i]) * rs[j];
            }
            rhs1[i] += (d1a[i] * nc.f[i] - b2) * dt;
            rhs2[i] += (d1b[i] * nc.f[i] + b1) * dt;
        }
        tri.solve(&mut rhs1);
        tri.solve(&mut rhs2);
        u1 = rhs1;
        u2 = rhs2;
        p1.push(u1.clone());
        p2.push(u2.clone());
    }
    p1.reverse();
    p2.reverse();
    Ok((p1, p2))
}

impl DualSolution {
    /// Drift integrand `Σ = −(A u + i rʲ Bʲ u)` on the grid at every step
    /// (Neumann differences, the last entry repeats the final frequency).
    pub fn sigma(&self, coeffs: &CoefficientSet) -> Result<Vec<GridFunction>> {
        let n = self.grid.n_points;
        let h = self.grid.spacing();
        let lo = coeffs.dims.l_obs;
        let mut out = Vec::with_capacity(self.u.len());
        let mut d1r = vec![0.0; n];
        let mut d1i = vec![0.0; n];
        let mut d2r = vec![0.0; n];
        let mut d2i = vec![0.0; n];
        for (step, u) in self.u.iter().enumerate() {
            let nc = dual_setup(coeffs, self.time.time(step), &self.grid)?;
            let rs = self.r.row(step.min(self.time.n_steps - 1));
            d1_neumann(&u.re, h, &mut d1r);
            d1_neumann(&u.im, h, &mut d1i);
            d2_neumann(&u.re, h, &mut d2r);
            d2_neumann(&u.im, h, &mut d2i);
            let vals: Vec<Complex64> = (0..n)
                .map(|i| {
                    let du = Complex64::new(d1r[i], d1i[i]);
                    let ddu = Complex64::new(d2r[i], d2i[i]);
                    let au = du * nc.f[i] + ddu * (0.5 * nc.a[i]);
                    let mut b = Complex64::new(0.0, 0.0);
                    for j in 0..lo {
                        b += (du * nc.g_proj[j][i] + u.at(i) * nc.h2_proj[j][i]) * rs[j];
                    }
                    -(au + Complex64::i() * b)
                })
                .collect();
            out.push(GridFunction::from_values(self.grid, &vals)?);
        }
        Ok(out)
    }
}

/// Grid-valued field with precomputed first and second differences.
#[derive(Debug, Clone)]
pub struct GridField {
    pub values: Vec<GridFunction>,
    d1: Vec<GridFunction>,
    d2: Vec<GridFunction>,
}

impl GridField {
    /// Differences use Neumann ends, matching the dual solver.
    pub fn new(values: Vec<GridFunction>) -> Result<Self> {
        let mut d1 = Vec::with_capacity(values.len());
        let mut d2 = Vec::with_capacity(values.len());
        for v in &values {
            let n = v.grid.n_points;
            let h = v.grid.spacing();
            let mut a = vec![0.0; n];
            let mut b = vec![0.0; n];
            let mut c = vec![0.0; n];
            let mut d = vec![0.0; n];
            d1_neumann(&v.re, h, &mut a);
            d1_neumann(&v.im, h, &mut b);
            d2_neumann(&v.re, h, &mut c);
            d2_neumann(&v.im, h, &mut d);
            d1.push(GridFunction::complex(v.grid, a, b)?);
            d2.push(GridFunction::complex(v.grid, c, d)?);
        }
        Ok(Self { values, d1, d2 })
    }
}

/// A time-indexed field `x ↦ u_n(x)` with first and second derivatives.
#[derive(Debug, Clone)]
pub enum FieldPath {
    Zero,
    /// The same test function at every time.
    Static(TestFunction),
    /// `scale[n] · φ`.
    Scaled { phi: TestFunction, scale: Vec<f64> },
    Grid(GridField),
}

/// Value, first and second derivative at one point.
pub type Jet = [Complex64; 3];

impl FieldPath {
    pub fn jet(&self, n: usize, x: f64) -> Result<Jet> {
        let zero = Complex64::new(0.0, 0.0);
        Ok(match self {
            FieldPath::Zero => [zero; 3],
            FieldPath::Static(phi) => real_jet(phi, x, 1.0),
            FieldPath::Scaled { phi, scale } => real_jet(phi, x, scale[n]),
            FieldPath::Grid(g) => [
                g.values[n].interpolate(x)?,
                g.d1[n].interpolate(x)?,
                g.d2[n].interpolate(x)?,
            ],
        })
    }

    /// The value alone, skipping derivatives.
    pub fn value(&self, n: usize, x: f64) -> Result<Complex64> {
        Ok(match self {
            FieldPath::Zero => Complex64::new(0.0, 0.0),
            FieldPath::Static(phi) => Complex64::new(phi.value(&[x]), 0.0),
            FieldPath::Scaled { phi, scale } => Complex64::new(scale[n] * phi.value(&[x]), 0.0),
            FieldPath::Grid(g) => g.values[n].interpolate(x)?,
        })
    }

    fn len(&self) -> Option<usize> {
        match self {
            FieldPath::Zero | FieldPath::Static(_) => None,
            FieldPath::Scaled { scale, .. } => Some(scale.len()),
            FieldPath::Grid(g) => Some(g.values.len()),
        }
    }
}

fn real_jet(phi: &TestFunction, x: f64, c: f64) -> Jet {
    let mut g = [0.0];
    let mut h = [0.0];
    phi.gradient(&[x], &mut g);
    phi.hessian(&[x], &mut h);
    [
        Complex64::new(c * phi.value(&[x]), 0.0),
        Complex64::new(c * g[0], 0.0),
        Complex64::new(c * h[0], 0.0),
    ]
}

/// `u`, its drift integrand `Σ` and diffusion integrands `Λʲ`.
#[derive(Debug, Clone)]
pub struct ItoIntegrands {
    pub u: FieldPath,
    pub sigma: FieldPath,
    pub lambda: Vec<FieldPath>,
}

impl ItoIntegrands {
    /// Static `u = φ` with vanishing integrands.
    pub fn static_field(phi: TestFunction, l_obs: usize) -> Self {
        Self {
            u: FieldPath::Static(phi),
            sigma: FieldPath::Zero,
            lambda: vec![FieldPath::Zero; l_obs],
        }
    }

    /// Largest defect of `u_n − u_0 − Σ_{m<n} Σ_m dt − Σ_{m<n} Λ_m·dW_m` over
    /// `points` and all grid times.
    pub fn consistency(&self, time: &TimeGrid, dw: &Series, points: &[f64]) -> Result<f64> {
        let mut worst = 0.0f64;
        for &x in points {
            let u0 = self.u.jet(0, x)?[0];
            let mut acc = Complex64::new(0.0, 0.0);
            for n in 0..time.n_steps {
                acc += self.sigma.jet(n, x)?[0] * time.dt;
                for (j, l) in self.lambda.iter().enumerate() {
                    acc += l.jet(n, x)?[0] * dw.row(n)[j];
                }
                let defect = self.u.jet(n + 1, x)?[0] - u0 - acc;
                worst = worst.max(defect.norm());
            }
        }
        Ok(worst)
    }
}

/// A measure path: particle ensembles or grid densities.
#[derive(Debug, Clone, Copy)]
pub enum MeasurePath<'a> {
    Particles(&'a [WeightedEnsemble]),
    Grid(&'a DensityPath),
}

impl MeasurePath<'_> {
    fn len(&self) -> usize {
        match self {
            MeasurePath::Particles(p) => p.len(),
            MeasurePath::Grid(g) => g.p.len(),
        }
    }

    /// Atoms `(x, weight)` at step `n`; grid weights are `p_i h` and may be
    /// slightly negative.
    fn atoms(&self, n: usize) -> Vec<(f64, f64)> {
        match self {
            MeasurePath::Particles(p) => {
                let w = p[n].weights();
                (0..p[n].len()).map(|i| (p[n].point(i)[0], w[i])).collect()
            }
            MeasurePath::Grid(g) => {
                let h = g.grid.spacing();
                g.p[n].iter().enumerate().map(|(i, v)| (g.grid.x(i), v * h)).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItoResidual {
    /// `μ_n(u_n) − μ_0(u_0)`.
    pub lhs: Vec<Complex64>,
    /// Accumulated `μ(Au + Σ + BʲΛʲ) dt`.
    pub drift: Vec<Complex64>,
    /// Accumulated `μ(Bʲu + Λʲ) dWʲ`.
    pub stochastic: Vec<Complex64>,
    pub residual: Vec<Complex64>,
}

impl ItoResidual {
    pub fn max_abs(&self) -> f64 {
        self.residual.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

/// Both sides of the Itô formula for `μ_t(u_t)`, with the observed part of
/// `dW̃` (`driver.dw_obs`) as the driving increment.
pub fn ito_check(
    coeffs: &CoefficientSet,
    obs: &ObservationPath,
    driver: &ObsDriver,
    mu: MeasurePath<'_>,
    integrands: &ItoIntegrands,
) -> Result<ItoResidual> {
    require_1d(coeffs)?;
    let time = driver.grid;
    let n_times = time.n_steps + 1;
    if mu.len() != n_times {
        return Err(Error::DimensionMismatch(format!(
            "measure path has {} entries for {n_times} grid times",
            mu.len()
        )));
    }
    for f in std::iter::once(&integrands.u)
        .chain(std::iter::once(&integrands.sigma))
        .chain(&integrands.lambda)
    {
        if let Some(len) = f.len() {
            if len < n_times {
                return Err(Error::DimensionMismatch(format!(
                    "integrand path has {len} entries for {n_times} grid times"
                )));
            }
        }
    }
    let lo = coeffs.dims.l_obs;
    if integrands.lambda.len() != lo {
        return Err(Error::DimensionMismatch("one Λ path per observation noise is required".into()));
    }
    let zero = Complex64::new(0.0, 0.0);
    let mut f = [0.0];
    let mut g = vec![0.0; coeffs.dims.l];
    let mut gb = vec![0.0; lo];
    let mut h2 = vec![0.0; lo];
    let mut gp = vec![0.0; lo];
    let mut hp = vec![0.0; lo];
    let mut values = Vec::with_capacity(n_times);
    let mut drift = vec![zero];
    let mut stochastic = vec![zero];
    for n in 0..n_times {
        let t = time.time(n);
        let y = obs.at(n);
        let atoms = mu.atoms(n);
        let mut val_terms = Vec::with_capacity(atoms.len());
        let mut drift_terms = Vec::with_capacity(atoms.len());
        let mut sto_terms = Vec::with_capacity(atoms.len());
        let proj = if n < time.n_steps { Some(&driver.proj[n]) } else { None };
        for &(x, w) in &atoms {
            if w == 0.0 {
                continue;
            }
            let u = integrands.u.jet(n, x)?;
            val_terms.push(u[0] * w);
            let Some(proj) = proj else { continue };
            coeffs.f(t, &[x], y, &mut f)?;
            coeffs.g(t, &[x], y, &mut g)?;
            coeffs.g_bar(t, &[x], y, &mut gb)?;
            coeffs.h2(t, &[x], y, &mut h2)?;
            let a = g.iter().map(|v| v * v).sum::<f64>() + gb.iter().map(|v| v * v).sum::<f64>();
            for j in 0..lo {
                gp[j] = (0..lo).map(|k| gb[k] * proj[(k, j)]).sum();
                hp[j] = (0..lo).map(|k| h2[k] * proj[(k, j)]).sum();
            }
            let au = u[1] * f[0] + u[2] * (0.5 * a);
            let sig = integrands.sigma.value(n, x)?;
            let mut d = au + sig;
            let mut s = zero;
            let dw = driver.dw_obs.row(n);
            for j in 0..lo {
                let lam = integrands.lambda[j].jet(n, x)?;
                let bu = u[1] * gp[j] + u[0] * hp[j];
                let blam = lam[1] * gp[j] + lam[0] * hp[j];
                d += blam;
                s += (bu + lam[0]) * dw[j];
            }
            drift_terms.push(d * (w * time.dt));
            sto_terms.push(s * w);
        }
        values.push(pairwise_sum_complex(&val_terms));
        if n < time.n_steps {
            let dsum = pairwise_sum_complex(&drift_terms);
            let ssum = pairwise_sum_complex(&sto_terms);
            if !(dsum.re.is_finite() && dsum.im.is_finite() && ssum.re.is_finite() && ssum.im.is_finite()) {
                return Err(Error::NonFinite(format!("Itô integrands at step {n}")));
            }
            drift.push(drift[n] + dsum);
            stochastic.push(stochastic[n] + ssum);
        }
    }
    let lhs: Vec<Complex64> = values.iter().map(|v| v - values[0]).collect();
    let residual = (0..n_times).map(|n| lhs[n] - drift[n] - stochastic[n]).collect();
    Ok(ItoResidual {
        lhs,
        drift,
        stochastic,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{self, obs_fn, state_fn};

    fn heat() -> CoefficientSet {
        let mut c = model::decoupled_kolmogorov().coeffs;
        c.f = state_fn(|_, _, _, o| o[0] = 0.0);
        c
    }

    #[test]
    fn grid_validation() {
        assert!(Grid1D::new(-1.0, 1.0, 15).is_err());
        assert!(Grid1D::new(1.0, -1.0, 32).is_err());
        let g = Grid1D::new(-8.0, 8.0, 401).unwrap();
        assert!((g.spacing() - 0.04).abs() < 1e-15);
        assert_eq!(g.x(400), 8.0);
    }

    #[test]
    fn cubic_interpolation_is_exact_on_cubics() {
        let g = Grid1D::new(-2.0, 2.0, 21).unwrap();
        let p = |x: f64| 1.0 - 2.0 * x + 0.5 * x * x - 0.3 * x * x * x;
        let f = GridFunction::real(g, g.nodes().iter().map(|&x| p(x)).collect()).unwrap();
        for x in [-2.0, -1.93, -0.41, 0.0, 1.07, 1.99, 2.0] {
            assert!((f.interpolate(x).unwrap().re - p(x)).abs() < 1e-12, "{x}");
        }
        assert!(matches!(f.interpolate(2.5), Err(Error::SupportCoverage(_))));
    }

    #[test]
    fn discrete_adjoint_identity() {
        let spec = model::correlated_bounded();
        let g = Grid1D::new(-8.0, 8.0, 321).unwrap();
        let p: Vec<f64> = g.nodes().iter().map(|x| (-x * x).exp()).collect();
        let phi: Vec<f64> = g.nodes().iter().map(|x| (-(x - 0.5) * (x - 0.5)).exp() * x.cos()).collect();
        let y = [0.2, -0.4];
        let ap = adjoint_generator(&spec.coeffs, 0.0, &y, &g, &p).unwrap();
        let aphi = generator_fd(&spec.coeffs, 0.0, &y, &g, &phi).unwrap();
        let lhs: f64 = ap.iter().zip(&phi).map(|(a, b)| a * b).sum::<f64>() * g.spacing();
        let rhs: f64 = p.iter().zip(&aphi).map(|(a, b)| a * b).sum::<f64>() * g.spacing();
        assert!((lhs - rhs).abs() < 1e-12, "{lhs} {rhs}");
    }

    #[test]
    fn explicit_stability_bound_is_enforced() {
        let spec = model::degenerate_k0().with_dt(1e-2);
        let g = Grid1D::new(-8.0, 8.0, 401).unwrap();
        let obs = crate::sde::simulate_joint(&spec, 0).unwrap().obs;
        let p0 = initial_density(&spec.initial, &g).unwrap();
        assert!(matches!(
            zakai_fd_solve(&spec.coeffs, &obs, &p0, g),
            Err(Error::Configuration(_))
        ));
    }

    #[test]
    fn constant_terminal_value_stays_constant() {
        let c = heat();
        let time = TimeGrid::new(1.0, 1e-2).unwrap();
        let g = Grid1D::new(-6.0, 6.0, 121).unwrap();
        let mut r = Series::zeros(time.n_steps, 1);
        r.values.iter_mut().enumerate().for_each(|(i, v)| *v = if i % 2 == 0 { 1.0 } else { -2.0 });
        let sol = dual_backward_solve(&c, &r, &TestFunction::constant(1, 1.0), g, time).unwrap();
        for u in &sol.u {
            assert!(u.re.iter().all(|v| (v - 1.0).abs() < 1e-13));
            assert!(u.im.iter().all(|v| v.abs() < 1e-13));
        }
    }

    #[test]
    fn imaginary_part_appears_only_before_terminal_time() {
        let spec = model::decoupled_classical();
        let time = TimeGrid::new(1.0, 1e-2).unwrap();
        let g = Grid1D::new(-8.0, 8.0, 161).unwrap();
        let mut r = Series::zeros(time.n_steps, 1);
        r.values.fill(1.0);
        let sol = dual_backward_solve(&spec.coeffs, &r, &TestFunction::tanh(1, 0, 1.0), g, time).unwrap();
        assert!(sol.u[time.n_steps].im.iter().all(|&v| v == 0.0));
        assert!(sol.u[0].im.iter().any(|v| v.abs() > 1e-3));
    }

    #[test]
    fn split_system_matches_complex_stepping() {
        let spec = model::decoupled_classical();
        let time = TimeGrid::new(1.0, 5e-3).unwrap();
        let g = Grid1D::new(-8.0, 8.0, 201).unwrap();
        let mut r = Series::zeros(time.n_steps, 1);
        for (n, v) in r.values.iter_mut().enumerate() {
            *v = if n < 100 { 2.0 } else { -1.0 };
        }
        let phi = TestFunction::gaussian_bump(vec![0.3], 1.0);
        let c = dual_backward_solve(&spec.coeffs, &r, &phi, g, time).unwrap();
        let (u1, u2) = dual_backward_solve_split(&spec.coeffs, &r, &phi, g, time).unwrap();
        for n in 0..=time.n_steps {
            for i in 0..g.n_points {
                assert!((c.u[n].re[i] - u1[n][i]).abs() < 1e-14);
                assert!((c.u[n].im[i] - u2[n][i]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn dual_rejects_unsupported_models() {
        let time = TimeGrid::new(1.0, 1e-2).unwrap();
        let g = Grid1D::new(-8.0, 8.0, 161).unwrap();
        let r = Series::zeros(time.n_steps, 3);
        let cb = model::correlated_bounded();
        assert!(matches!(
            dual_backward_solve(&cb.coeffs, &r, &TestFunction::constant(1, 1.0), g, time),
            Err(Error::Unsupported(_))
        ));
        let mut degenerate = heat();
        degenerate.g = state_fn(|_, _, _, o| o[0] = 0.0);
        degenerate.k = obs_fn(|_, _, o| o[0] = 1.0);
        let r = Series::zeros(time.n_steps, 1);
        assert!(matches!(
            dual_backward_solve(&degenerate, &r, &TestFunction::constant(1, 1.0), g, time),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn heat_density_conserves_mass() {
        let spec = model::degenerate_k0().with_dt(1e-3).with_horizon(0.5);
        let mut c = heat();
        c.g_bar = state_fn(|_, _, _, o| o[0] = 0.0);
        c.k = obs_fn(|_, _, o| o[0] = 0.0);
        let g = Grid1D::new(-8.0, 8.0, 321).unwrap();
        let obs = crate::sde::simulate_joint(&spec, 0).unwrap().obs;
        let p0: Vec<f64> = g
            .nodes()
            .iter()
            .map(|x| (-x * x / (2.0 * 0.01)).exp() / (0.1 * (2.0 * std::f64::consts::PI).sqrt()))
            .collect();
        let sol = zakai_fd_solve(&c, &obs, &p0, g).unwrap();
        let m0 = sol.mass(0);
        assert!((sol.mass(sol.time.n_steps) - m0).abs() < 1e-4);
    }

    #[test]
    fn consistency_of_scaled_field() {
        let time = TimeGrid::new(1.0, 1e-3).unwrap();
        let scale: Vec<f64> = time.times().iter().map(|t| (2.0 * t).sin() + 1.0).collect();
        let dscale: Vec<f64> = time.times().iter().map(|t| 2.0 * (2.0 * t).cos()).collect();
        let phi = TestFunction::cos(1, 0, 1.0);
        let it = ItoIntegrands {
            u: FieldPath::Scaled {
                phi: phi.clone(),
                scale,
            },
            sigma: FieldPath::Scaled { phi, scale: dscale },
            lambda: vec![FieldPath::Zero],
        };
        let dw = Series::zeros(time.n_steps, 1);
        let defect = it.consistency(&time, &dw, &[0.0, 0.7]).unwrap();
        assert!(defect < 5e-3, "{defect}");
    }
}
