//! Euler–Maruyama path simulation.
//!
//! Two measures are involved. Under the original measure the pair `(X, Y)`
//! is simulated jointly. Under the reference measure the observation is an
//! autonomous diffusion `dY = h₁ dt + k dW̃`, and the signal is simulated
//! conditionally on a given observation path with drift `f − ḡh₂`, driven by
//! `(V, W̃)`. The part of `dW̃` visible through the observation is
//! `k⁺(dY − h₁dt)`; the remainder `(I − k⁺k) dξ` is drawn fresh per particle.

use crate::error::{Error, Result};
use crate::export::csv_table;
use crate::linalg::Matrix;
use crate::model::{CoefficientSet, Dimensions, ScenarioSpec};
use crate::rng::{self, Role, StreamRng};

/// Paths whose coordinates exceed this in absolute value count as exploded.
pub const EXPLOSION_GUARD: f64 = 1e12;

/// Particle id reserved for the "true" signal/observation path of a replica.
pub const TRUTH: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub horizon: f64,
    pub n_steps: usize,
    pub dt: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, dt: f64) -> Result<Self> {
        let n_steps = crate::model::steps_for(horizon, dt)?;
        Ok(Self {
            horizon,
            n_steps,
            dt: horizon / n_steps as f64,
        })
    }

    pub fn from_spec(spec: &ScenarioSpec) -> Result<Self> {
        Self::new(spec.horizon, spec.dt)
    }

    #[inline]
    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|n| self.time(n)).collect()
    }

    /// Grid with `factor` times larger steps over the same horizon.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.n_steps % factor != 0 {
            return Err(Error::Configuration(format!(
                "cannot coarsen {} steps by a factor of {factor}",
                self.n_steps
            )));
        }
        Ok(Self {
            horizon: self.horizon,
            n_steps: self.n_steps / factor,
            dt: self.dt * factor as f64,
        })
    }
}

/// Row-major time series: `len` rows of `width` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub width: usize,
    pub values: Vec<f64>,
}

impl Series {
    pub fn zeros(rows: usize, width: usize) -> Self {
        Self {
            width,
            values: vec![0.0; rows * width],
        }
    }

    #[inline]
    pub fn row(&self, n: usize) -> &[f64] {
        &self.values[n * self.width..(n + 1) * self.width]
    }

    #[inline]
    pub fn row_mut(&mut self, n: usize) -> &mut [f64] {
        &mut self.values[n * self.width..(n + 1) * self.width]
    }

    pub fn len(&self) -> usize {
        if self.width == 0 {
            0
        } else {
            self.values.len() / self.width
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BrownianPaths {
    /// Signal noise increments, `n_steps × l`.
    pub dv: Series,
    /// Observation noise increments, `n_steps × l_obs`.
    pub dw: Series,
}

/// Observation values on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationPath {
    pub grid: TimeGrid,
    pub y: Series,
}

impl ObservationPath {
    #[inline]
    pub fn at(&self, n: usize) -> &[f64] {
        self.y.row(n)
    }

    pub fn d_obs(&self) -> usize {
        self.y.width
    }

    /// Keeps every `factor`-th value.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        let grid = self.grid.coarsen(factor)?;
        let mut y = Series::zeros(grid.n_steps + 1, self.y.width);
        for n in 0..=grid.n_steps {
            y.row_mut(n).copy_from_slice(self.y.row(n * factor));
        }
        Ok(Self { grid, y })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub grid: TimeGrid,
    pub dims: Dimensions,
    /// `(n_steps + 1) × d`.
    pub x: Series,
    pub obs: ObservationPath,
    pub noise: BrownianPaths,
    /// Increments of `W̃ = W + ∫h₂ ds`, `n_steps × l_obs`.
    pub w_tilde: Series,
}

impl PathBundle {
    /// CSV with columns `t, x_1..x_d, y_1..y_{d'}`.
    pub fn to_csv(&self) -> String {
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.dims.d).map(|i| format!("x_{i}")));
        header.extend((1..=self.dims.d_obs).map(|i| format!("y_{i}")));
        let rows = (0..=self.grid.n_steps).map(|n| {
            let mut row = vec![self.grid.time(n)];
            row.extend_from_slice(self.x.row(n));
            row.extend_from_slice(self.obs.at(n));
            row
        });
        csv_table(&header, rows)
    }
}

fn guard(values: &[f64], step: usize) -> Result<()> {
    if values.iter().all(|v| v.is_finite() && v.abs() <= EXPLOSION_GUARD) {
        Ok(())
    } else {
        Err(Error::Explosion { step })
    }
}

fn add_matvec(m: &[f64], rows: usize, cols: usize, v: &[f64], out: &mut [f64]) {
    for i in 0..rows {
        let mut s = 0.0;
        for j in 0..cols {
            s += m[i * cols + j] * v[j];
        }
        out[i] += s;
    }
}

/// Joint Euler–Maruyama simulation of `(X, Y)` under the original measure.
///
/// Streams are keyed by `(spec.seed, replica, TRUTH)`.
pub fn simulate_joint(spec: &ScenarioSpec, replica: u64) -> Result<PathBundle> {
    spec.validate()?;
    let grid = TimeGrid::from_spec(spec)?;
    let dims = spec.dims;
    let c = &spec.coeffs;
    let n = grid.n_steps;
    let mut init_rng = rng::stream(spec.seed, replica, TRUTH, Role::InitialState);
    let mut v_rng = rng::stream(spec.seed, replica, TRUTH, Role::SignalNoise);
    let mut w_rng = rng::stream(spec.seed, replica, TRUTH, Role::ObservationNoise);

    let mut x = Series::zeros(n + 1, dims.d);
    let mut y = Series::zeros(n + 1, dims.d_obs);
    let mut dv = Series::zeros(n, dims.l);
    let mut dw = Series::zeros(n, dims.l_obs);
    let mut w_tilde = Series::zeros(n, dims.l_obs);
    spec.initial.sample_x(&mut init_rng, x.row_mut(0));
    y.row_mut(0).copy_from_slice(spec.initial.y0());

    let mut f = vec![0.0; dims.d];
    let mut g = vec![0.0; dims.d * dims.l];
    let mut gb = vec![0.0; dims.d * dims.l_obs];
    let mut h1 = vec![0.0; dims.d_obs];
    let mut h2 = vec![0.0; dims.l_obs];
    let mut k = vec![0.0; dims.d_obs * dims.l_obs];
    let mut xn = vec![0.0; dims.d];
    let mut yn = vec![0.0; dims.d_obs];
    for step in 0..n {
        let t = grid.time(step);
        xn.copy_from_slice(x.row(step));
        yn.copy_from_slice(y.row(step));
        c.f(t, &xn, &yn, &mut f)?;
        c.g(t, &xn, &yn, &mut g)?;
        c.g_bar(t, &xn, &yn, &mut gb)?;
        c.h1(t, &yn, &mut h1)?;
        c.h2(t, &xn, &yn, &mut h2)?;
        (c.k)(t, &yn, &mut k);
        rng::fill_normal(&mut v_rng, grid.dt, dv.row_mut(step));
        rng::fill_normal(&mut w_rng, grid.dt, dw.row_mut(step));

        let xo = x.row_mut(step + 1);
        for i in 0..dims.d {
            xo[i] = xn[i] + f[i] * grid.dt;
        }
        add_matvec(&g, dims.d, dims.l, dv.row(step), xo);
        add_matvec(&gb, dims.d, dims.l_obs, dw.row(step), xo);

        // Observation drift h₁ + k h₂, never stored on its own.
        let mut drift = h1.clone();
        add_matvec(&k, dims.d_obs, dims.l_obs, &h2, &mut drift);
        let yo = y.row_mut(step + 1);
        for i in 0..dims.d_obs {
            yo[i] = yn[i] + drift[i] * grid.dt;
        }
        add_matvec(&k, dims.d_obs, dims.l_obs, dw.row(step), yo);

        let wt = w_tilde.row_mut(step);
        for j in 0..dims.l_obs {
            wt[j] = dw.row(step)[j] + h2[j] * grid.dt;
        }
        guard(x.row(step + 1), step + 1)?;
        guard(y.row(step + 1), step + 1)?;
    }
    Ok(PathBundle {
        grid,
        dims,
        x,
        obs: ObservationPath { grid, y },
        noise: BrownianPaths { dv, dw },
        w_tilde,
    })
}

/// Observation path under the reference measure, `dY = h₁ dt + k dW̃` with
/// `W̃` a Brownian motion. Returns the path and the `W̃` increments.
pub fn simulate_reference_obs(spec: &ScenarioSpec, replica: u64) -> Result<(ObservationPath, Series)> {
    spec.validate()?;
    let grid = TimeGrid::from_spec(spec)?;
    let dims = spec.dims;
    let c = &spec.coeffs;
    let mut w_rng = rng::stream(spec.seed, replica, TRUTH, Role::Observation);
    let mut y = Series::zeros(grid.n_steps + 1, dims.d_obs);
    let mut dw = Series::zeros(grid.n_steps, dims.l_obs);
    y.row_mut(0).copy_from_slice(spec.initial.y0());
    let mut h1 = vec![0.0; dims.d_obs];
    let mut k = vec![0.0; dims.d_obs * dims.l_obs];
    let mut yn = vec![0.0; dims.d_obs];
    for step in 0..grid.n_steps {
        let t = grid.time(step);
        yn.copy_from_slice(y.row(step));
        c.h1(t, &yn, &mut h1)?;
        (c.k)(t, &yn, &mut k);
        rng::fill_normal(&mut w_rng, grid.dt, dw.row_mut(step));
        let yo = y.row_mut(step + 1);
        for i in 0..dims.d_obs {
            yo[i] = yn[i] + h1[i] * grid.dt;
        }
        add_matvec(&k, dims.d_obs, dims.l_obs, dw.row(step), yo);
        guard(y.row(step + 1), step + 1)?;
    }
    Ok((ObservationPath { grid, y }, dw))
}

/// Per-step quantities that depend only on the observation path.
#[derive(Debug, Clone)]
pub struct ObsDriver {
    pub grid: TimeGrid,
    pub dims: Dimensions,
    /// `k⁺k` at each step (row-major, `l_obs × l_obs`).
    pub proj: Vec<Matrix>,
    /// `I − k⁺k` at each step, `None` where it vanishes.
    pub orth: Vec<Option<Matrix>>,
    /// `k⁺` at each step.
    pub k_pinv: Vec<Matrix>,
    /// Observed part of `dW̃`: `k⁺(ΔY − h₁ dt)`, `n_steps × l_obs`.
    pub dw_obs: Series,
    /// Innovation-free increments `ΔN = ΔY − h₁ dt`, `n_steps × d_obs`.
    pub dn: Series,
}

impl ObsDriver {
    pub fn new(coeffs: &CoefficientSet, obs: &ObservationPath) -> Result<Self> {
        let dims = coeffs.dims;
        if obs.d_obs() != dims.d_obs {
            return Err(Error::DimensionMismatch(format!(
                "observation path has {} components, model expects {}",
                obs.d_obs(),
                dims.d_obs
            )));
        }
        if obs.y.len() != obs.grid.n_steps + 1 {
            return Err(Error::DimensionMismatch("observation path does not match its grid".into()));
        }
        let grid = obs.grid;
        let n = grid.n_steps;
        let mut proj = Vec::with_capacity(n);
        let mut orth = Vec::with_capacity(n);
        let mut k_pinv = Vec::with_capacity(n);
        let mut dw_obs = Series::zeros(n, dims.l_obs);
        let mut dn = Series::zeros(n, dims.d_obs);
        let mut h1 = vec![0.0; dims.d_obs];
        for step in 0..n {
            let t = grid.time(step);
            let y = obs.at(step);
            let p = coeffs.projection(t, y)?;
            coeffs.h1(t, y, &mut h1)?;
            let dn_row = dn.row_mut(step);
            for i in 0..dims.d_obs {
                dn_row[i] = obs.at(step + 1)[i] - y[i] - h1[i] * grid.dt;
            }
            let w = p.k_pinv.matvec(dn.row(step));
            dw_obs.row_mut(step).copy_from_slice(&w);
            let full = p.is_full();
            proj.push(p.proj);
            orth.push(if full { None } else { Some(p.orth) });
            k_pinv.push(p.k_pinv);
        }
        Ok(Self {
            grid,
            dims,
            proj,
            orth,
            k_pinv,
            dw_obs,
            dn,
        })
    }
}

/// Scratch buffers for one particle.
#[derive(Debug, Clone)]
pub struct StepScratch {
    f: Vec<f64>,
    g: Vec<f64>,
    gb: Vec<f64>,
    pub h2: Vec<f64>,
    dv: Vec<f64>,
    xi: Vec<f64>,
    pub dw: Vec<f64>,
}

impl StepScratch {
    pub fn new(dims: Dimensions) -> Self {
        Self {
            f: vec![0.0; dims.d],
            g: vec![0.0; dims.d * dims.l],
            gb: vec![0.0; dims.d * dims.l_obs],
            h2: vec![0.0; dims.l_obs],
            dv: vec![0.0; dims.l],
            xi: vec![0.0; dims.l_obs],
            dw: vec![0.0; dims.l_obs],
        }
    }
}

/// Random streams of one conditional particle.
#[derive(Debug, Clone)]
pub struct ParticleStreams {
    pub signal: StreamRng,
    pub orthogonal: StreamRng,
}

impl ParticleStreams {
    pub fn new(seed: u64, replica: u64, particle: u64) -> Self {
        Self {
            signal: rng::stream(seed, replica, particle, Role::SignalNoise),
            orthogonal: rng::stream(seed, replica, particle, Role::Orthogonal),
        }
    }
}

/// Advances one particle by one step under the reference measure.
///
/// Updates `x` in place, adds the log-weight increment
/// `h₂·dW̃ − ½|h₂|² dt` (left-point) to `log_w`, and leaves the `dW̃` used in
/// `scratch.dw`.
#[allow(clippy::too_many_arguments)]
pub fn conditional_step(
    coeffs: &CoefficientSet,
    driver: &ObsDriver,
    obs: &ObservationPath,
    step: usize,
    x: &mut [f64],
    log_w: &mut f64,
    streams: &mut ParticleStreams,
    s: &mut StepScratch,
) -> Result<()> {
    let dims = driver.dims;
    let dt = driver.grid.dt;
    let t = driver.grid.time(step);
    let y = obs.at(step);
    coeffs.f(t, x, y, &mut s.f)?;
    coeffs.g(t, x, y, &mut s.g)?;
    coeffs.g_bar(t, x, y, &mut s.gb)?;
    coeffs.h2(t, x, y, &mut s.h2)?;

    s.dw.copy_from_slice(driver.dw_obs.row(step));
    if let Some(orth) = &driver.orth[step] {
        rng::fill_normal(&mut streams.orthogonal, dt, &mut s.xi);
        let o = orth.matvec(&s.xi);
        for (w, v) in s.dw.iter_mut().zip(o) {
            *w += v;
        }
    }
    rng::fill_normal(&mut streams.signal, dt, &mut s.dv);

    let mut inc = 0.0;
    let mut sq = 0.0;
    for j in 0..dims.l_obs {
        inc += s.h2[j] * s.dw[j];
        sq += s.h2[j] * s.h2[j];
    }
    *log_w += inc - 0.5 * sq * dt;

    // Drift f − ḡh₂.
    for i in 0..dims.d {
        let mut drift = s.f[i];
        for j in 0..dims.l_obs {
            drift -= s.gb[i * dims.l_obs + j] * s.h2[j];
        }
        s.f[i] = drift;
    }
    for i in 0..dims.d {
        x[i] += s.f[i] * dt;
    }
    add_matvec(&s.g, dims.d, dims.l, &s.dv, x);
    add_matvec(&s.gb, dims.d, dims.l_obs, &s.dw, x);
    guard(x, step + 1)
}

/// One conditional signal path given an observation path.
///
/// Returns the `X` path (`(n_steps + 1) × d`) and the `dW̃` increments used.
pub fn simulate_signal_given_obs(
    spec: &ScenarioSpec,
    obs: &ObservationPath,
    replica: u64,
    particle: u64,
) -> Result<(Series, Series)> {
    let driver = ObsDriver::new(&spec.coeffs, obs)?;
    simulate_signal_with_driver(spec, obs, &driver, replica, particle)
}

pub fn simulate_signal_with_driver(
    spec: &ScenarioSpec,
    obs: &ObservationPath,
    driver: &ObsDriver,
    replica: u64,
    particle: u64,
) -> Result<(Series, Series)> {
    let dims = spec.dims;
    let n = driver.grid.n_steps;
    let mut streams = ParticleStreams::new(spec.seed, replica, particle);
    let mut init = rng::stream(spec.seed, replica, particle, Role::InitialState);
    let mut x_path = Series::zeros(n + 1, dims.d);
    let mut w_path = Series::zeros(n, dims.l_obs);
    let mut x = vec![0.0; dims.d];
    spec.initial.sample_x(&mut init, &mut x);
    x_path.row_mut(0).copy_from_slice(&x);
    let mut scratch = StepScratch::new(dims);
    let mut log_w = 0.0;
    for step in 0..n {
        conditional_step(&spec.coeffs, driver, obs, step, &mut x, &mut log_w, &mut streams, &mut scratch)?;
        x_path.row_mut(step + 1).copy_from_slice(&x);
        w_path.row_mut(step).copy_from_slice(&scratch.dw);
    }
    Ok((x_path, w_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{self, linear_gaussian, obs_fn, state_fn, InitialLaw};

    fn zero_model() -> ScenarioSpec {
        let mut s = linear_gaussian();
        s.coeffs.f = state_fn(|_, _, _, o| o[0] = 0.0);
        s.coeffs.g = state_fn(|_, _, _, o| o[0] = 0.0);
        s.coeffs.g_bar = state_fn(|_, _, _, o| o[0] = 0.0);
        s.coeffs.h2 = state_fn(|_, _, _, o| o[0] = 0.0);
        s.coeffs.k = obs_fn(|_, _, o| o[0] = 0.0);
        s.initial = InitialLaw::Point {
            x0: vec![1.0],
            y0: vec![2.0],
        };
        s.with_dt(1e-2)
    }

    #[test]
    fn zero_coefficients_give_constant_paths() {
        let b = simulate_joint(&zero_model(), 0).unwrap();
        assert!(b.x.values.iter().all(|&v| v == 1.0));
        assert!(b.obs.y.values.iter().all(|&v| v == 2.0));
    }

    #[test]
    fn deterministic_decay_matches_exponential() {
        let mut s = zero_model();
        s.coeffs.f = state_fn(|_, x, _, o| o[0] = -x[0]);
        let s = s.with_dt(1e-3);
        let b = simulate_joint(&s, 0).unwrap();
        let xt = b.x.row(b.grid.n_steps)[0];
        assert!((xt - (-1.0f64).exp()).abs() <= 5.0 * s.dt);
    }

    #[test]
    fn same_seed_same_bundle() {
        let s = model::correlated_bounded().with_dt(1e-2);
        assert_eq!(simulate_joint(&s, 3).unwrap(), simulate_joint(&s, 3).unwrap());
        assert_ne!(simulate_joint(&s, 3).unwrap(), simulate_joint(&s, 4).unwrap());
    }

    #[test]
    fn explosion_is_reported() {
        let mut s = zero_model();
        s.coeffs.f = state_fn(|_, x, _, o| o[0] = x[0] * x[0]);
        let s = s.with_dt(0.1).with_horizon(10.0);
        assert!(matches!(simulate_joint(&s, 0), Err(Error::Explosion { .. })));
    }

    #[test]
    fn invertible_k_round_trip() {
        let s = linear_gaussian().with_dt(1e-2);
        let b = simulate_joint(&s, 0).unwrap();
        let (_, w) = simulate_signal_given_obs(&s, &b.obs, 0, 0).unwrap();
        for (a, e) in w.values.iter().zip(&b.w_tilde.values) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_k_draws_fresh_increments() {
        let s = model::degenerate_k0().with_dt(1e-2);
        let b = simulate_joint(&s, 0).unwrap();
        let (_, w1) = simulate_signal_given_obs(&s, &b.obs, 0, 0).unwrap();
        let (_, w2) = simulate_signal_given_obs(&s, &b.obs, 0, 1).unwrap();
        assert_ne!(w1, w2);
        let driver = ObsDriver::new(&s.coeffs, &b.obs).unwrap();
        assert!(driver.dw_obs.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projected_increment_depends_only_on_observations() {
        let s = model::correlated_bounded().with_dt(1e-2);
        let b = simulate_joint(&s, 0).unwrap();
        let driver = ObsDriver::new(&s.coeffs, &b.obs).unwrap();
        let (_, w1) = simulate_signal_given_obs(&s, &b.obs, 0, 0).unwrap();
        let (_, w2) = simulate_signal_given_obs(&s.clone().with_seed(99), &b.obs, 5, 7).unwrap();
        for n in 0..b.grid.n_steps {
            let p1 = driver.proj[n].matvec(w1.row(n));
            let p2 = driver.proj[n].matvec(w2.row(n));
            for (a, c) in p1.iter().zip(&p2) {
                assert!((a - c).abs() < 1e-13);
            }
        }
        assert_ne!(w1, w2);
    }

    #[test]
    fn coarsened_observations_keep_every_nth_value() {
        let s = linear_gaussian().with_dt(1e-2);
        let b = simulate_joint(&s, 0).unwrap();
        let c = b.obs.coarsen(4).unwrap();
        assert_eq!(c.grid.n_steps, 25);
        assert_eq!(c.at(3), b.obs.at(12));
        assert!(b.obs.coarsen(3).is_err());
    }

    #[test]
    fn csv_has_expected_columns() {
        let b = simulate_joint(&model::correlated_bounded().with_dt(0.25), 0).unwrap();
        let csv = b.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "t,x_1,y_1,y_2");
        assert_eq!(lines.count(), 5);
    }
}
