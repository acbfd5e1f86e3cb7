//! Filtering problems: dimensions, coefficient functions, the second-order
//! generator, the first-order observation operators, test functions, and the
//! built-in benchmark scenarios.
//!
//! Signal and observation follow
//!
//! ```text
//! dX = f(t,X,Y) dt + g(t,X,Y) dV + ḡ(t,X,Y) dW
//! dY = [h₁(t,Y) + k(t,Y) h₂(t,X,Y)] dt + k(t,Y) dW
//! ```
//!
//! The observation drift is always assembled from `h₁`, `k` and `h₂`; there is
//! no way to store it separately.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::pinv::{pinv_oracle, DEFAULT_RANK_TOL};
use crate::rng::{self, Role};

/// `(t, x, y, out)`; matrix outputs are written row-major.
pub type StateFn = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `(t, y, out)` for coefficients that do not see the signal.
pub type ObsFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

pub fn state_fn<F>(f: F) -> StateFn
where
    F: Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
{
    Arc::new(f)
}

pub fn obs_fn<F>(f: F) -> ObsFn
where
    F: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
{
    Arc::new(f)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dimensions {
    /// Signal dimension.
    pub d: usize,
    /// Observation dimension.
    pub d_obs: usize,
    /// Signal-only noise dimension.
    pub l: usize,
    /// Observation noise dimension.
    pub l_obs: usize,
}

impl Dimensions {
    pub fn new(d: usize, d_obs: usize, l: usize, l_obs: usize) -> Result<Self> {
        if d == 0 || d_obs == 0 || l == 0 || l_obs == 0 {
            return Err(Error::InvalidInput(format!(
                "all dimensions must be at least 1 (got d={d}, d_obs={d_obs}, l={l}, l_obs={l_obs})"
            )));
        }
        Ok(Self { d, d_obs, l, l_obs })
    }
}

#[derive(Clone)]
pub struct CoefficientSet {
    pub dims: Dimensions,
    pub f: StateFn,
    pub g: StateFn,
    pub g_bar: StateFn,
    pub h1: ObsFn,
    pub h2: StateFn,
    pub k: ObsFn,
    /// True when no coefficient depends on `y`.
    pub y_free: bool,
    /// Declared bound on the coefficients and their first two x-derivatives.
    pub derivative_bound: Option<f64>,
    /// Number of bounded derivatives the author claims; recorded, not verified.
    pub smoothness_order: Option<usize>,
}

impl fmt::Debug for CoefficientSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientSet")
            .field("dims", &self.dims)
            .field("y_free", &self.y_free)
            .field("derivative_bound", &self.derivative_bound)
            .finish_non_exhaustive()
    }
}

fn check(name: &'static str, t: f64, x: &[f64], y: &[f64], out: &[f64]) -> Result<()> {
    if out.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::ModelEvaluation {
            name,
            t,
            x: x.to_vec(),
            y: y.to_vec(),
        })
    }
}

impl CoefficientSet {
    pub fn f(&self, t: f64, x: &[f64], y: &[f64], out: &mut [f64]) -> Result<()> {
        (self.f)(t, x, y, out);
        check("f", t, x, y, out)
    }

    pub fn g(&self, t: f64, x: &[f64], y: &[f64], out: &mut [f64]) -> Result<()> {
        (self.g)(t, x, y, out);
        check("g", t, x, y, out)
    }

    pub fn g_bar(&self, t: f64, x: &[f64], y: &[f64], out: &mut [f64]) -> Result<()> {
        (self.g_bar)(t, x, y, out);
        check("g_bar", t, x, y, out)
    }

    pub fn h1(&self, t: f64, y: &[f64], out: &mut [f64]) -> Result<()> {
        (self.h1)(t, y, out);
        check("h1", t, &[], y, out)
    }

    pub fn h2(&self, t: f64, x: &[f64], y: &[f64], out: &mut [f64]) -> Result<()> {
        (self.h2)(t, x, y, out);
        check("h2", t, x, y, out)
    }

    pub fn k_matrix(&self, t: f64, y: &[f64]) -> Result<Matrix> {
        let mut m = Matrix::zeros(self.dims.d_obs, self.dims.l_obs);
        (self.k)(t, y, m.as_mut_slice());
        check("k", t, &[], y, m.as_slice())?;
        Ok(m)
    }

    /// The observation drift `h₁ + k h₂`.
    pub fn h(&self, t: f64, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dims.d_obs];
        self.h1(t, y, &mut out)?;
        let mut h2 = vec![0.0; self.dims.l_obs];
        self.h2(t, x, y, &mut h2)?;
        let kh2 = self.k_matrix(t, y)?.matvec(&h2);
        for (o, v) in out.iter_mut().zip(kh2) {
            *o += v;
        }
        Ok(out)
    }

    /// `a = g gᵀ + ḡ ḡᵀ`, assembled on demand.
    pub fn diffusion(&self, t: f64, x: &[f64], y: &[f64]) -> Result<Matrix> {
        let dims = self.dims;
        let mut g = vec![0.0; dims.d * dims.l];
        let mut gb = vec![0.0; dims.d * dims.l_obs];
        self.g(t, x, y, &mut g)?;
        self.g_bar(t, x, y, &mut gb)?;
        Ok(diffusion_from(dims, &g, &gb))
    }

    /// `k`, `k⁺`, `k⁺k` and `I − k⁺k` at `(t, y)`.
    pub fn projection(&self, t: f64, y: &[f64]) -> Result<ObsProjection> {
        ObsProjection::from_k(self.k_matrix(t, y)?)
    }

    pub fn point(&self, t: f64, x: &[f64], y: &[f64]) -> Result<PointValues> {
        let dims = self.dims;
        let mut v = PointValues {
            f: vec![0.0; dims.d],
            g: vec![0.0; dims.d * dims.l],
            g_bar: vec![0.0; dims.d * dims.l_obs],
            h2: vec![0.0; dims.l_obs],
        };
        self.f(t, x, y, &mut v.f)?;
        self.g(t, x, y, &mut v.g)?;
        self.g_bar(t, x, y, &mut v.g_bar)?;
        self.h2(t, x, y, &mut v.h2)?;
        Ok(v)
    }
}

fn diffusion_from(dims: Dimensions, g: &[f64], gb: &[f64]) -> Matrix {
    let d = dims.d;
    let mut a = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..dims.l {
                s += g[i * dims.l + k] * g[j * dims.l + k];
            }
            for k in 0..dims.l_obs {
                s += gb[i * dims.l_obs + k] * gb[j * dims.l_obs + k];
            }
            a[(i, j)] = s;
        }
    }
    a
}

/// The pieces of `k` that the observation operators need at one `(t, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsProjection {
    pub k: Matrix,
    pub k_pinv: Matrix,
    /// `k⁺k`, projector onto the row space of `k`.
    pub proj: Matrix,
    /// `I − k⁺k`.
    pub orth: Matrix,
}

impl ObsProjection {
    pub fn from_k(k: Matrix) -> Result<Self> {
        let k_pinv = pinv_oracle(&k, DEFAULT_RANK_TOL)?;
        let proj = k_pinv.matmul(&k);
        let orth = Matrix::identity(k.cols()).sub(&proj);
        Ok(Self {
            k,
            k_pinv,
            proj,
            orth,
        })
    }

    /// True when the projector is the identity up to rounding.
    pub fn is_full(&self) -> bool {
        self.orth.max_abs() < 1e-12
    }
}

/// Coefficient values that depend on the signal, at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointValues {
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub g_bar: Vec<f64>,
    pub h2: Vec<f64>,
}

impl PointValues {
    /// `A φ` from the gradient and Hessian of φ.
    pub fn generator(&self, dims: Dimensions, grad: &[f64], hess: &[f64]) -> f64 {
        let a = diffusion_from(dims, &self.g, &self.g_bar);
        let mut out = 0.0;
        for i in 0..dims.d {
            out += self.f[i] * grad[i];
            for j in 0..dims.d {
                out += 0.5 * a[(i, j)] * hess[i * dims.d + j];
            }
        }
        out
    }

    /// Row vector `∇φ ḡ + φ h₂ᵀ` of length `l_obs`.
    pub fn observation_row(&self, dims: Dimensions, value: f64, grad: &[f64], out: &mut [f64]) {
        for j in 0..dims.l_obs {
            let mut s = value * self.h2[j];
            for i in 0..dims.d {
                s += grad[i] * self.g_bar[i * dims.l_obs + j];
            }
            out[j] = s;
        }
    }

    /// All `B^j φ`, i.e. the observation row multiplied by `k⁺k`.
    pub fn b_all(&self, dims: Dimensions, proj: &Matrix, value: f64, grad: &[f64], out: &mut [f64]) {
        let mut row = vec![0.0; dims.l_obs];
        self.observation_row(dims, value, grad, &mut row);
        let projected = proj.vecmat(&row);
        out.copy_from_slice(&projected);
    }
}

type ValueFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type VecFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// A twice-differentiable test function with analytic derivatives.
#[derive(Clone)]
pub struct TestFunction {
    name: String,
    dim: usize,
    value: ValueFn,
    gradient: VecFn,
    hessian: VecFn,
    bounded: bool,
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TestFunction")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("bounded", &self.bounded)
            .finish_non_exhaustive()
    }
}

impl TestFunction {
    pub fn custom<V, G, H>(name: impl Into<String>, dim: usize, bounded: bool, value: V, gradient: G, hessian: H) -> Self
    where
        V: Fn(&[f64]) -> f64 + Send + Sync + 'static,
        G: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        H: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            dim,
            value: Arc::new(value),
            gradient: Arc::new(gradient),
            hessian: Arc::new(hessian),
            bounded,
        }
    }

    /// A function of a single coordinate, given its first two derivatives.
    fn of_coordinate<F>(name: String, dim: usize, i: usize, bounded: bool, f: F) -> Self
    where
        F: Fn(f64) -> (f64, f64, f64) + Send + Sync + 'static,
    {
        let f = Arc::new(f);
        let (f1, f2) = (f.clone(), f.clone());
        Self::custom(
            name,
            dim,
            bounded,
            move |x| f(x[i]).0,
            move |x, out| {
                out.fill(0.0);
                out[i] = f1(x[i]).1;
            },
            move |x, out| {
                out.fill(0.0);
                out[i * dim + i] = f2(x[i]).2;
            },
        )
    }

    pub fn constant(dim: usize, c: f64) -> Self {
        Self::custom(
            if c == 1.0 { "one".to_string() } else { format!("const_{c}") },
            dim,
            true,
            move |_| c,
            |_, out| out.fill(0.0),
            |_, out| out.fill(0.0),
        )
    }

    pub fn coordinate(dim: usize, i: usize) -> Self {
        Self::of_coordinate(format!("x{}", i + 1), dim, i, false, |x| (x, 1.0, 0.0))
    }

    /// `x_i^p` for `p ≥ 0`.
    pub fn power(dim: usize, i: usize, p: i32) -> Self {
        Self::of_coordinate(format!("x{}_pow{p}", i + 1), dim, i, p == 0, move |x| {
            let pf = p as f64;
            let d1 = if p >= 1 { pf * x.powi(p - 1) } else { 0.0 };
            let d2 = if p >= 2 { pf * (pf - 1.0) * x.powi(p - 2) } else { 0.0 };
            (x.powi(p), d1, d2)
        })
    }

    pub fn sin(dim: usize, i: usize, freq: f64) -> Self {
        Self::of_coordinate(format!("sin{freq}"), dim, i, true, move |x| {
            let (s, c) = (freq * x).sin_cos();
            (s, freq * c, -freq * freq * s)
        })
    }

    pub fn cos(dim: usize, i: usize, freq: f64) -> Self {
        Self::of_coordinate(format!("cos{freq}"), dim, i, true, move |x| {
            let (s, c) = (freq * x).sin_cos();
            (c, -freq * s, -freq * freq * c)
        })
    }

    pub fn tanh(dim: usize, i: usize, scale: f64) -> Self {
        Self::of_coordinate(format!("tanh{scale}"), dim, i, true, move |x| {
            let th = (scale * x).tanh();
            let sech2 = 1.0 - th * th;
            (th, scale * sech2, -2.0 * scale * scale * th * sech2)
        })
    }

    /// `exp(−‖x − c‖² / (2 w²))`.
    pub fn gaussian_bump(center: Vec<f64>, width: f64) -> Self {
        let dim = center.len();
        let c1 = Arc::new(center);
        let (c2, c3) = (c1.clone(), c1.clone());
        let inv = 1.0 / (width * width);
        let value = move |x: &[f64], c: &[f64]| {
            let r2: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
            (-0.5 * r2 * inv).exp()
        };
        Self::custom(
            format!("bump{width}"),
            dim,
            true,
            move |x| value(x, &c1),
            move |x, out| {
                let v = value(x, &c2);
                for i in 0..x.len() {
                    out[i] = -(x[i] - c2[i]) * inv * v;
                }
            },
            move |x, out| {
                let v = value(x, &c3);
                let n = x.len();
                for i in 0..n {
                    for j in 0..n {
                        let di = x[i] - c3[i];
                        let dj = x[j] - c3[j];
                        let delta = if i == j { inv } else { 0.0 };
                        out[i * n + j] = (di * dj * inv * inv - delta) * v;
                    }
                }
            },
        )
    }

    /// `α a + β b`.
    pub fn combine(alpha: f64, a: &TestFunction, beta: f64, b: &TestFunction) -> Result<Self> {
        if a.dim != b.dim {
            return Err(Error::DimensionMismatch(format!(
                "cannot combine test functions of dimension {} and {}",
                a.dim, b.dim
            )));
        }
        let dim = a.dim;
        let (a1, a2, a3) = (a.clone(), a.clone(), a.clone());
        let (b1, b2, b3) = (b.clone(), b.clone(), b.clone());
        Ok(Self::custom(
            format!("{alpha}*{}+{beta}*{}", a.name, b.name),
            dim,
            a.bounded && b.bounded,
            move |x| alpha * a1.value(x) + beta * b1.value(x),
            move |x, out| {
                let mut tmp = vec![0.0; dim];
                a2.gradient(x, out);
                b2.gradient(x, &mut tmp);
                for (o, t) in out.iter_mut().zip(tmp) {
                    *o = alpha * *o + beta * t;
                }
            },
            move |x, out| {
                let mut tmp = vec![0.0; dim * dim];
                a3.hessian(x, out);
                b3.hessian(x, &mut tmp);
                for (o, t) in out.iter_mut().zip(tmp) {
                    *o = alpha * *o + beta * t;
                }
            },
        ))
    }

    /// Looks up a test function by name for configuration files.
    ///
    /// Known names: `one`, `x`, `x2`, `sin`, `cos`, `tanh`, `bump`.
    pub fn by_name(name: &str, dim: usize) -> Option<Self> {
        let tf = match name {
            "one" => Self::constant(dim, 1.0),
            "x" => Self::coordinate(dim, 0),
            "x2" => Self::power(dim, 0, 2),
            "sin" => Self::sin(dim, 0, 1.0),
            "cos" => Self::cos(dim, 0, 1.0),
            "tanh" => Self::tanh(dim, 0, 1.0),
            "bump" => Self::gaussian_bump(vec![0.0; dim], 1.0),
            _ => return None,
        };
        Some(tf.named(name))
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_bounded(&self) -> bool {
        self.bounded
    }

    #[inline]
    pub fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }

    #[inline]
    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        (self.gradient)(x, out)
    }

    #[inline]
    pub fn hessian(&self, x: &[f64], out: &mut [f64]) {
        (self.hessian)(x, out)
    }

    /// Largest central-difference mismatch of the gradient (vs. value) and the
    /// Hessian (vs. gradient) over `points`.
    pub fn derivative_mismatch(&self, points: &[Vec<f64>]) -> f64 {
        let n = self.dim;
        let step = 1e-5;
        let mut worst = 0.0f64;
        let mut grad = vec![0.0; n];
        let mut hess = vec![0.0; n * n];
        let mut gp = vec![0.0; n];
        let mut gm = vec![0.0; n];
        for p in points {
            self.gradient(p, &mut grad);
            self.hessian(p, &mut hess);
            for i in 0..n {
                let mut xp = p.clone();
                let mut xm = p.clone();
                xp[i] += step;
                xm[i] -= step;
                let fd = (self.value(&xp) - self.value(&xm)) / (2.0 * step);
                worst = worst.max((fd - grad[i]).abs());
                self.gradient(&xp, &mut gp);
                self.gradient(&xm, &mut gm);
                for j in 0..n {
                    let fd2 = (gp[j] - gm[j]) / (2.0 * step);
                    worst = worst.max((fd2 - hess[j * n + i]).abs());
                }
            }
        }
        worst
    }
}

/// `A_t φ` at `(t, x, y)`.
pub fn generator_apply(coeffs: &CoefficientSet, t: f64, x: &[f64], y: &[f64], phi: &TestFunction) -> Result<f64> {
    let dims = coeffs.dims;
    let pv = coeffs.point(t, x, y)?;
    let mut grad = vec![0.0; dims.d];
    let mut hess = vec![0.0; dims.d * dims.d];
    phi.gradient(x, &mut grad);
    phi.hessian(x, &mut hess);
    Ok(pv.generator(dims, &grad, &hess))
}

/// `B^j φ` at `(t, x, y)`, with `j` zero-based.
pub fn b_apply(coeffs: &CoefficientSet, j: usize, t: f64, x: &[f64], y: &[f64], phi: &TestFunction) -> Result<f64> {
    let dims = coeffs.dims;
    if j >= dims.l_obs {
        return Err(Error::InvalidInput(format!(
            "noise index {j} out of range for {} observation noises",
            dims.l_obs
        )));
    }
    let pv = coeffs.point(t, x, y)?;
    let proj = coeffs.projection(t, y)?;
    let mut grad = vec![0.0; dims.d];
    phi.gradient(x, &mut grad);
    let mut out = vec![0.0; dims.l_obs];
    pv.b_all(dims, &proj.proj, phi.value(x), &grad, &mut out);
    Ok(out[j])
}

/// Law of `(X₀, Y₀)`. The observation always starts from a fixed point.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialLaw {
    Gaussian { mean: Vec<f64>, std: Vec<f64>, y0: Vec<f64> },
    Point { x0: Vec<f64>, y0: Vec<f64> },
}

impl InitialLaw {
    pub fn y0(&self) -> &[f64] {
        match self {
            InitialLaw::Gaussian { y0, .. } | InitialLaw::Point { y0, .. } => y0,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::Gaussian { mean, .. } => mean.len(),
            InitialLaw::Point { x0, .. } => x0.len(),
        }
    }

    pub fn sample_x(&self, rng: &mut rng::StreamRng, out: &mut [f64]) {
        match self {
            InitialLaw::Gaussian { mean, std, .. } => {
                for i in 0..out.len() {
                    out[i] = mean[i] + std[i] * rng::normal(rng);
                }
            }
            InitialLaw::Point { x0, .. } => out.copy_from_slice(x0),
        }
    }

    /// Density of `X₀` in one dimension.
    pub fn density_1d(&self, x: f64) -> Result<f64> {
        match self {
            InitialLaw::Gaussian { mean, std, .. } if mean.len() == 1 => {
                let z = (x - mean[0]) / std[0];
                Ok((-0.5 * z * z).exp() / (std[0] * (2.0 * std::f64::consts::PI).sqrt()))
            }
            InitialLaw::Gaussian { .. } => Err(Error::Unsupported("grid densities are one-dimensional".into())),
            InitialLaw::Point { .. } => Err(Error::Unsupported("a point mass has no grid density".into())),
        }
    }

    /// Mean and standard deviation of the first coordinate.
    pub fn moments_1d(&self) -> (f64, f64) {
        match self {
            InitialLaw::Gaussian { mean, std, .. } => (mean[0], std[0]),
            InitialLaw::Point { x0, .. } => (x0[0], 0.0),
        }
    }
}

/// Matrices of a linear-Gaussian model with `h₁ = 0`, used by the
/// Kalman–Bucy reference filter.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussian {
    pub drift: Matrix,
    pub g: Matrix,
    pub g_bar: Matrix,
    pub h2: Matrix,
    pub k: Matrix,
    pub mean0: Vec<f64>,
    pub cov0: Matrix,
}

#[derive(Debug, Clone)]
pub struct ScenarioSpec {
    pub name: String,
    pub dims: Dimensions,
    pub coeffs: CoefficientSet,
    pub initial: InitialLaw,
    pub horizon: f64,
    pub dt: f64,
    pub n_particles: usize,
    pub n_replicas: usize,
    pub seed: u64,
    pub linear: Option<LinearGaussian>,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::Configuration(format!("horizon must be positive, got {}", self.horizon)));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Configuration(format!("dt must be positive, got {}", self.dt)));
        }
        steps_for(self.horizon, self.dt)?;
        if self.n_particles == 0 {
            return Err(Error::Configuration("n_particles must be at least 1".into()));
        }
        if self.initial.dim() != self.dims.d || self.initial.y0().len() != self.dims.d_obs {
            return Err(Error::DimensionMismatch("initial law does not match the model dimensions".into()));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        steps_for(self.horizon, self.dt).expect("validated scenario")
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    pub fn with_particles(mut self, n: usize) -> Self {
        self.n_particles = n;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_horizon(mut self, horizon: f64) -> Self {
        self.horizon = horizon;
        self
    }
}

/// Number of steps of size `dt` covering `horizon`, if `dt` divides it.
pub fn steps_for(horizon: f64, dt: f64) -> Result<usize> {
    let n = (horizon / dt).round();
    if n < 1.0 || ((n * dt - horizon).abs() > 1e-9 * horizon.max(1.0)) {
        return Err(Error::Configuration(format!("dt = {dt} does not divide the horizon T = {horizon}")));
    }
    Ok(n as usize)
}

fn scenario_defaults(name: &str, coeffs: CoefficientSet, initial: InitialLaw) -> ScenarioSpec {
    ScenarioSpec {
        name: name.to_string(),
        dims: coeffs.dims,
        coeffs,
        initial,
        horizon: 1.0,
        dt: 1e-3,
        n_particles: 10_000,
        n_replicas: 1,
        seed: 42,
        linear: None,
    }
}

/// `dX = −X dt + dV + ½ dW`, `dY = X dt + dW`.
pub fn linear_gaussian() -> ScenarioSpec {
    let dims = Dimensions::new(1, 1, 1, 1).unwrap();
    let coeffs = CoefficientSet {
        dims,
        f: state_fn(|_, x, _, o| o[0] = -x[0]),
        g: state_fn(|_, _, _, o| o[0] = 1.0),
        g_bar: state_fn(|_, _, _, o| o[0] = 0.5),
        h1: obs_fn(|_, _, o| o[0] = 0.0),
        h2: state_fn(|_, x, _, o| o[0] = x[0]),
        k: obs_fn(|_, _, o| o[0] = 1.0),
        y_free: true,
        derivative_bound: None,
        smoothness_order: None,
    };
    let initial = InitialLaw::Gaussian {
        mean: vec![0.5],
        std: vec![0.5],
        y0: vec![0.0],
    };
    let mut spec = scenario_defaults("linear_gaussian", coeffs, initial);
    let m = |v: f64| Matrix::new(1, 1, vec![v]).unwrap();
    spec.linear = Some(LinearGaussian {
        drift: m(-1.0),
        g: m(1.0),
        g_bar: m(0.5),
        h2: m(1.0),
        k: m(1.0),
        mean0: vec![0.5],
        cov0: m(0.25),
    });
    spec
}

/// Observation noise switched off: `k ≡ 0`, so `Y` carries no information.
pub fn degenerate_k0() -> ScenarioSpec {
    let dims = Dimensions::new(1, 1, 1, 1).unwrap();
    let coeffs = CoefficientSet {
        dims,
        f: state_fn(|_, x, _, o| o[0] = -x[0]),
        g: state_fn(|_, _, _, o| o[0] = 1.0),
        g_bar: state_fn(|_, _, _, o| o[0] = 0.5),
        h1: obs_fn(|_, y, o| o[0] = y[0].cos()),
        h2: state_fn(|_, x, _, o| o[0] = x[0].sin()),
        k: obs_fn(|_, _, o| o[0] = 0.0),
        y_free: false,
        derivative_bound: None,
        smoothness_order: None,
    };
    let initial = InitialLaw::Gaussian {
        mean: vec![0.5],
        std: vec![0.5],
        y0: vec![0.0],
    };
    scenario_defaults("degenerate_k0", coeffs, initial)
}

/// Bounded smooth coefficients with `ḡ ≠ 0` and a rank-one `2 × 3` matrix `k`.
pub fn correlated_bounded() -> ScenarioSpec {
    let dims = Dimensions::new(1, 2, 1, 3).unwrap();
    const U: [f64; 2] = [0.6, 0.8];
    const V: [f64; 3] = [0.48, 0.6, 0.64];
    let coeffs = CoefficientSet {
        dims,
        f: state_fn(|_, x, y, o| o[0] = -(x[0].tanh()) + 0.2 * y[0].cos()),
        g: state_fn(|_, x, _, o| o[0] = 0.9 + 0.1 * x[0].cos()),
        g_bar: state_fn(|_, x, _, o| {
            o[0] = 0.4 * x[0].cos();
            o[1] = 0.3;
            o[2] = 0.2 * x[0].sin();
        }),
        h1: obs_fn(|_, y, o| {
            o[0] = 0.5 * y[0].sin();
            o[1] = 0.3 * y[1].cos();
        }),
        h2: state_fn(|_, x, _, o| {
            o[0] = x[0].sin();
            o[1] = 0.5 * x[0].cos();
            o[2] = 0.3 * x[0].tanh();
        }),
        k: obs_fn(|_, y, o| {
            let s = 1.0 + 0.25 * y[0].sin();
            for i in 0..2 {
                for j in 0..3 {
                    o[i * 3 + j] = s * U[i] * V[j];
                }
            }
        }),
        y_free: false,
        derivative_bound: Some(2.0),
        smoothness_order: None,
    };
    let initial = InitialLaw::Gaussian {
        mean: vec![0.0],
        std: vec![0.5],
        y0: vec![0.0, 0.0],
    };
    scenario_defaults("correlated_bounded", coeffs, initial)
}

/// Coefficients independent of `y`, uniformly elliptic, `k = 1`.
pub fn decoupled_classical() -> ScenarioSpec {
    let dims = Dimensions::new(1, 1, 1, 1).unwrap();
    let coeffs = CoefficientSet {
        dims,
        f: state_fn(|_, x, _, o| o[0] = -(x[0].tanh())),
        g: state_fn(|_, _, _, o| o[0] = 1.0),
        g_bar: state_fn(|_, x, _, o| o[0] = 0.4 * x[0].cos()),
        h1: obs_fn(|_, _, o| o[0] = 0.0),
        h2: state_fn(|_, x, _, o| o[0] = 0.5 * x[0].sin()),
        k: obs_fn(|_, _, o| o[0] = 1.0),
        y_free: true,
        derivative_bound: Some(1.0),
        smoothness_order: None,
    };
    let initial = InitialLaw::Gaussian {
        mean: vec![0.0],
        std: vec![0.5],
        y0: vec![0.0],
    };
    let mut spec = scenario_defaults("decoupled_classical", coeffs, initial);
    spec.dt = 2e-3;
    spec
}

/// `decoupled_classical` with `ḡ = h₂ = 0`: the observation operators vanish
/// and the dual equation is the backward Kolmogorov equation.
pub fn decoupled_kolmogorov() -> ScenarioSpec {
    let mut spec = decoupled_classical();
    spec.name = "decoupled_kolmogorov".into();
    spec.coeffs.g_bar = state_fn(|_, _, _, o| o[0] = 0.0);
    spec.coeffs.h2 = state_fn(|_, _, _, o| o[0] = 0.0);
    spec
}

pub fn builtin_scenarios() -> Vec<ScenarioSpec> {
    vec![
        linear_gaussian(),
        degenerate_k0(),
        correlated_bounded(),
        decoupled_classical(),
        decoupled_kolmogorov(),
    ]
}

pub fn scenario(name: &str) -> Option<ScenarioSpec> {
    builtin_scenarios().into_iter().find(|s| s.name == name)
}

/// Sampled diagnostics for one coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientDiagnostics {
    pub name: &'static str,
    /// Largest difference quotient between nearby sampled points.
    pub lipschitz_max: f64,
    /// Largest `‖c‖ / (1 + ‖x‖ + ‖y‖)` at radius 100.
    pub growth_near: f64,
    /// The same ratio at radius 10⁴.
    pub growth_far: f64,
    /// Largest `‖c‖` inside the sample box.
    pub sup_near: f64,
    /// Largest `‖c‖` at radius 10⁴.
    pub sup_far: f64,
    /// Largest first or second x-derivative (finite differences) in the sample box.
    pub derivative_max: f64,
    pub linear_growth_ok: bool,
    pub bounded_ok: bool,
    pub derivative_bound_ok: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport {
    /// Half-width of the box the Lipschitz and derivative samples were drawn from.
    pub sample_box: f64,
    pub far_radius: f64,
    pub n_samples: usize,
    pub coefficients: Vec<CoefficientDiagnostics>,
    pub declared_bound: Option<f64>,
    pub declared_smoothness: Option<usize>,
}

impl AssumptionReport {
    pub fn linear_growth_ok(&self) -> bool {
        self.coefficients.iter().all(|c| c.linear_growth_ok)
    }

    pub fn bounded_ok(&self) -> bool {
        self.coefficients.iter().all(|c| c.bounded_ok)
    }

    pub fn derivative_bound_ok(&self) -> bool {
        self.coefficients.iter().all(|c| c.derivative_bound_ok)
    }

    pub fn lipschitz_ok(&self) -> bool {
        self.coefficients.iter().all(|c| c.lipschitz_max.is_finite())
    }

    pub fn all_ok(&self) -> bool {
        self.linear_growth_ok() && self.bounded_ok() && self.derivative_bound_ok() && self.lipschitz_ok()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Heuristic sampled check of the growth, Lipschitz and boundedness
/// conditions. A flag being clear means "no violation seen", nothing more.
pub fn check_assumptions(spec: &ScenarioSpec, n_samples: usize) -> Result<AssumptionReport> {
    if n_samples < 2 {
        return Err(Error::InvalidInput("need at least 2 samples".into()));
    }
    let dims = spec.dims;
    let c = &spec.coeffs;
    let horizon = spec.horizon;
    let sample_box = 10.0;
    let near_radius = 100.0;
    let far_radius = 1e4;
    let mut rng = rng::stream(spec.seed, 0, 0, Role::Custom(17));

    type Eval<'a> = Box<dyn Fn(f64, &[f64], &[f64]) -> Vec<f64> + 'a>;
    let evals: Vec<(&'static str, Eval)> = vec![
        ("f", Box::new(|t, x, y| {
            let mut o = vec![0.0; dims.d];
            (c.f)(t, x, y, &mut o);
            o
        })),
        ("g", Box::new(|t, x, y| {
            let mut o = vec![0.0; dims.d * dims.l];
            (c.g)(t, x, y, &mut o);
            o
        })),
        ("g_bar", Box::new(|t, x, y| {
            let mut o = vec![0.0; dims.d * dims.l_obs];
            (c.g_bar)(t, x, y, &mut o);
            o
        })),
        ("h1", Box::new(|t, _, y| {
            let mut o = vec![0.0; dims.d_obs];
            (c.h1)(t, y, &mut o);
            o
        })),
        ("h2", Box::new(|t, x, y| {
            let mut o = vec![0.0; dims.l_obs];
            (c.h2)(t, x, y, &mut o);
            o
        })),
        ("k", Box::new(|t, _, y| {
            let mut o = vec![0.0; dims.d_obs * dims.l_obs];
            (c.k)(t, y, &mut o);
            o
        })),
    ];

    let mut draw = |radius: f64, on_shell: bool| -> (f64, Vec<f64>, Vec<f64>) {
        let t = horizon * rng::uniform(&mut rng);
        let mut z: Vec<f64> = (0..dims.d + dims.d_obs).map(|_| rng::normal(&mut rng)).collect();
        if on_shell {
            let n = norm(&z).max(1e-300);
            z.iter_mut().for_each(|v| *v *= radius / n);
        } else {
            z.iter_mut().for_each(|v| *v = radius * (2.0 * rng::uniform(&mut rng) - 1.0));
        }
        let y = z.split_off(dims.d);
        (t, z, y)
    };

    let mut samples_box = Vec::with_capacity(n_samples);
    let mut samples_unit = Vec::with_capacity(n_samples);
    let mut samples_near = Vec::with_capacity(n_samples);
    let mut samples_far = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        samples_box.push(draw(sample_box, false));
        samples_unit.push(draw(1.0, false));
        samples_near.push(draw(near_radius, true));
        samples_far.push(draw(far_radius, true));
    }

    let growth = |v: &[f64], x: &[f64], y: &[f64]| norm(v) / (1.0 + norm(x) + norm(y));
    let mut coefficients = Vec::new();
    for (name, eval) in &evals {
        let mut lipschitz_max = 0.0f64;
        let mut derivative_max = 0.0f64;
        let step = 1e-4;
        for (t, x, y) in &samples_box {
            let base = eval(*t, x, y);
            let mut xp = x.clone();
            let mut yp = y.clone();
            let delta = 1e-3;
            xp.iter_mut().for_each(|v| *v += delta);
            yp.iter_mut().for_each(|v| *v += delta);
            let moved = eval(*t, &xp, &yp);
            let dist = delta * ((dims.d + dims.d_obs) as f64).sqrt();
            let diff: Vec<f64> = moved.iter().zip(&base).map(|(a, b)| a - b).collect();
            lipschitz_max = lipschitz_max.max(norm(&diff) / dist);
            for i in 0..dims.d {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += step;
                xm[i] -= step;
                let up = eval(*t, &xp, y);
                let dn = eval(*t, &xm, y);
                for ((u, m), b) in up.iter().zip(&dn).zip(&base) {
                    let d1 = (u - m) / (2.0 * step);
                    let d2 = (u - 2.0 * b + m) / (step * step);
                    derivative_max = derivative_max.max(d1.abs()).max(d2.abs());
                }
            }
        }
        let sup = |s: &[(f64, Vec<f64>, Vec<f64>)]| s.iter().map(|(t, x, y)| norm(&eval(*t, x, y))).fold(0.0, f64::max);
        let grow = |s: &[(f64, Vec<f64>, Vec<f64>)]| {
            s.iter()
                .map(|(t, x, y)| growth(&eval(*t, x, y), x, y))
                .fold(0.0, f64::max)
        };
        let growth_near = grow(&samples_near);
        let growth_far = grow(&samples_far);
        let sup_near = sup(&samples_unit).max(sup(&samples_box));
        let sup_far = sup(&samples_far);
        coefficients.push(CoefficientDiagnostics {
            name,
            lipschitz_max,
            growth_near,
            growth_far,
            sup_near,
            sup_far,
            derivative_max,
            linear_growth_ok: growth_far.is_finite() && growth_far <= 2.0 * growth_near + 1e-12,
            bounded_ok: sup_far.is_finite() && sup_far <= 10.0 * sup_near + 1e-12,
            derivative_bound_ok: match c.derivative_bound {
                Some(k) => derivative_max <= k && sup_near <= k && sup_far <= k,
                None => true,
            },
        });
    }
    Ok(AssumptionReport {
        sample_box,
        far_radius,
        n_samples,
        coefficients,
        declared_bound: c.derivative_bound,
        declared_smoothness: c.smoothness_order,
    })
}

/// Smallest sampled eigenvalue of `g gᵀ` over `[lo, hi]` in one dimension.
pub fn coercivity_1d(coeffs: &CoefficientSet, horizon: f64, lo: f64, hi: f64, n: usize) -> Result<f64> {
    let dims = coeffs.dims;
    if dims.d != 1 {
        return Err(Error::Unsupported("coercivity sampling is one-dimensional".into()));
    }
    let y = vec![0.0; dims.d_obs];
    let mut g = vec![0.0; dims.l];
    let mut worst = f64::INFINITY;
    for it in 0..n.max(2) {
        let x = lo + (hi - lo) * it as f64 / (n.max(2) - 1) as f64;
        for t in [0.0, 0.5 * horizon, horizon] {
            coeffs.g(t, &[x], &y, &mut g)?;
            worst = worst.min(g.iter().map(|v| v * v).sum());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_dim(f: StateFn, g: f64, g_bar: f64) -> CoefficientSet {
        CoefficientSet {
            dims: Dimensions::new(1, 1, 1, 1).unwrap(),
            f,
            g: state_fn(move |_, _, _, o| o[0] = g),
            g_bar: state_fn(move |_, _, _, o| o[0] = g_bar),
            h1: obs_fn(|_, _, o| o[0] = 0.0),
            h2: state_fn(|_, _, _, o| o[0] = 0.0),
            k: obs_fn(|_, _, o| o[0] = 1.0),
            y_free: true,
            derivative_bound: None,
            smoothness_order: None,
        }
    }

    #[test]
    fn generator_examples() {
        let c = one_dim(state_fn(|_, _, _, o| o[0] = 3.0), 0.7, 0.2);
        let v = generator_apply(&c, 0.0, &[1.3], &[0.0], &TestFunction::coordinate(1, 0)).unwrap();
        assert_eq!(v, 3.0);

        let c = one_dim(state_fn(|_, _, _, o| o[0] = 0.0), 1.0, 0.0);
        let v = generator_apply(&c, 0.0, &[-2.0], &[0.0], &TestFunction::power(1, 0, 2)).unwrap();
        assert_eq!(v, 1.0);

        let c = one_dim(state_fn(|_, x, _, o| o[0] = x[0]), 1.0, 1.0);
        let x = 0.7f64;
        let v = generator_apply(&c, 0.0, &[x], &[0.0], &TestFunction::sin(1, 0, 1.0)).unwrap();
        assert!((v - (x * x.cos() - x.sin())).abs() < 1e-15);
    }

    #[test]
    fn b_examples() {
        // k ≡ 0 collapses every B^j.
        let spec = degenerate_k0();
        for x in [-1.0, 0.3, 2.0] {
            let v = b_apply(&spec.coeffs, 0, 0.1, &[x], &[0.4], &TestFunction::sin(1, 0, 1.0)).unwrap();
            assert_eq!(v, 0.0);
        }

        // ḡ = 0, k = I, h₂ = c: multiplication by c_j.
        let mut c = one_dim(state_fn(|_, _, _, o| o[0] = 0.0), 1.0, 0.0);
        c.h2 = state_fn(|_, _, _, o| o[0] = 1.5);
        let phi = TestFunction::cos(1, 0, 1.0);
        let v = b_apply(&c, 0, 0.0, &[0.4], &[0.0], &phi).unwrap();
        assert!((v - 1.5 * 0.4f64.cos()).abs() < 1e-15);

        // ḡ = 1, k = 1, h₂ = x, φ = x² at x = 2: 4 + 8.
        let mut c = one_dim(state_fn(|_, _, _, o| o[0] = 0.0), 1.0, 1.0);
        c.h2 = state_fn(|_, x, _, o| o[0] = x[0]);
        let v = b_apply(&c, 0, 0.0, &[2.0], &[0.0], &TestFunction::power(1, 0, 2)).unwrap();
        assert!((v - 12.0).abs() < 1e-14);

        assert!(b_apply(&c, 1, 0.0, &[2.0], &[0.0], &TestFunction::power(1, 0, 2)).is_err());
    }

    #[test]
    fn non_finite_coefficient_reports_point() {
        let c = one_dim(state_fn(|_, x, _, o| o[0] = 1.0 / x[0] - f64::INFINITY), 1.0, 0.0);
        let err = generator_apply(&c, 0.5, &[2.0], &[1.0], &TestFunction::coordinate(1, 0)).unwrap_err();
        assert_eq!(
            err,
            Error::ModelEvaluation {
                name: "f",
                t: 0.5,
                x: vec![2.0],
                y: vec![1.0]
            }
        );
    }

    #[test]
    fn test_function_derivatives_match_differences() {
        let pts: Vec<Vec<f64>> = [-2.0, -0.3, 0.0, 0.8, 1.7].iter().map(|&v| vec![v]).collect();
        for phi in [
            TestFunction::sin(1, 0, 1.3),
            TestFunction::cos(1, 0, 0.7),
            TestFunction::tanh(1, 0, 1.0),
            TestFunction::gaussian_bump(vec![0.2], 0.8),
            TestFunction::power(1, 0, 3),
        ] {
            assert!(phi.derivative_mismatch(&pts) < 1e-5, "{}", phi.name());
        }
        let pts2 = vec![vec![0.1, -0.4], vec![1.0, 0.5]];
        assert!(TestFunction::gaussian_bump(vec![0.0, 0.3], 1.1).derivative_mismatch(&pts2) < 1e-5);
    }

    #[test]
    fn scenarios_by_name() {
        assert!(scenario("nope").is_none());
        let k0 = scenario("degenerate_k0").unwrap();
        assert_eq!(k0.coeffs.k_matrix(0.0, &[3.0]).unwrap(), Matrix::zeros(1, 1));
        assert!(scenario("linear_gaussian").unwrap().linear.is_some());
        for s in builtin_scenarios() {
            s.validate().unwrap();
        }
        let cb = correlated_bounded();
        let proj = cb.coeffs.projection(0.0, &[0.3, 0.1]).unwrap();
        assert!(!proj.is_full());
        assert!(proj.proj.max_abs_diff(&proj.proj.matmul(&proj.proj)) < 1e-14);
    }

    #[test]
    fn h_is_composed() {
        let cb = correlated_bounded();
        let (x, y) = ([0.4], [0.2, -0.1]);
        let h = cb.coeffs.h(0.0, &x, &y).unwrap();
        let mut h1 = vec![0.0; 2];
        let mut h2 = vec![0.0; 3];
        cb.coeffs.h1(0.0, &y, &mut h1).unwrap();
        cb.coeffs.h2(0.0, &x, &y, &mut h2).unwrap();
        let kh2 = cb.coeffs.k_matrix(0.0, &y).unwrap().matvec(&h2);
        for i in 0..2 {
            assert!((h[i] - h1[i] - kh2[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn validation_rejects_bad_steps() {
        assert!(steps_for(1.0, 0.3).is_err());
        assert_eq!(steps_for(1.0, 1e-3).unwrap(), 1000);
        let s = linear_gaussian().with_dt(0.3);
        assert!(matches!(s.validate(), Err(Error::Configuration(_))));
    }

    #[test]
    fn assumption_flags() {
        let lg = check_assumptions(&linear_gaussian(), 200).unwrap();
        assert!(lg.linear_growth_ok());
        assert!(!lg.bounded_ok());

        let cb = check_assumptions(&correlated_bounded(), 200).unwrap();
        assert!(cb.all_ok(), "{cb:?}");

        let mut quad = linear_gaussian();
        quad.coeffs.f = state_fn(|_, x, _, o| o[0] = x[0] * x[0]);
        let q = check_assumptions(&quad, 200).unwrap();
        assert!(!q.coefficients[0].linear_growth_ok);
        assert!(q.coefficients[1..].iter().all(|c| c.linear_growth_ok));
    }
}
