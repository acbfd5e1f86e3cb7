//! Exponential test martingales and the pairing between the filter and the
//! backward dual equation.
//!
//! Everything here runs under the reference measure: observation paths come
//! from [`simulate_reference_obs`], particle weights are the likelihood
//! ratios accumulated by [`ks_filter`]. `θ` is driven by the observed part of
//! `dW̃`, `k⁺(ΔY − h₁ dt)`, so it is a functional of the observation path.

use std::fmt::Write;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::export::fmt_float;
use crate::filter::{ks_filter, FilterOptions, Record};
use crate::gridpde::{dual_backward_solve, initial_density, zakai_fd_solve, DualSolution, Grid1D};
use crate::measure::WeightedEnsemble;
use crate::model::{ScenarioSpec, StateFn, TestFunction};
use crate::sde::{simulate_reference_obs, simulate_signal_with_driver, ObsDriver, Series, TimeGrid, TRUTH};
use crate::stats::{complex_mean_se, mean_se, pairwise_sum, pairwise_sum_complex};

/// At most this many constant pieces per frequency.
pub const MAX_PIECES: usize = 4;
/// Fewer replicas than this give no statistical verdict.
pub const MIN_REPLICAS: usize = 100;

/// A piecewise-constant frequency `r: [0, T] → ℝ^{l_obs}` on equal pieces.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyChoice {
    pub label: String,
    /// One row of `l_obs` levels per piece.
    pub levels: Vec<Vec<f64>>,
}

impl FrequencyChoice {
    pub fn new(label: impl Into<String>, levels: Vec<Vec<f64>>) -> Result<Self> {
        if levels.is_empty() || levels.len() > MAX_PIECES {
            return Err(Error::InvalidInput(format!(
                "a frequency needs 1..={MAX_PIECES} pieces, got {}",
                levels.len()
            )));
        }
        let width = levels[0].len();
        if width == 0 || levels.iter().any(|l| l.len() != width) {
            return Err(Error::DimensionMismatch("frequency pieces must share one width".into()));
        }
        if levels.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("frequency levels must be finite".into()));
        }
        Ok(Self {
            label: label.into(),
            levels,
        })
    }

    pub fn zero(l_obs: usize) -> Self {
        Self {
            label: "0".into(),
            levels: vec![vec![0.0; l_obs]],
        }
    }

    pub fn constant(level: f64, l_obs: usize) -> Result<Self> {
        Self::new(format!("{level}"), vec![vec![level; l_obs]])
    }

    /// Parses labels such as `"0"`, `"-2"` or `"1,-1,2,0"`: comma-separated
    /// levels, one per piece, shared by every component.
    pub fn from_label(label: &str, l_obs: usize) -> Result<Self> {
        let levels = label
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map(|v| vec![v; l_obs])
                    .map_err(|_| Error::Configuration(format!("bad frequency label {label:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(label, levels)
    }

    pub fn width(&self) -> usize {
        self.levels[0].len()
    }

    pub fn sup_norm(&self) -> f64 {
        self.levels
            .iter()
            .map(|l| l.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Level at every step of `grid`; piece boundaries must fall on grid times.
    pub fn on_grid(&self, grid: &TimeGrid) -> Result<Series> {
        let p = self.levels.len();
        if grid.n_steps % p != 0 {
            return Err(Error::Configuration(format!(
                "{p} frequency pieces do not align with {} steps",
                grid.n_steps
            )));
        }
        let per = grid.n_steps / p;
        let mut out = Series::zeros(grid.n_steps, self.width());
        for n in 0..grid.n_steps {
            out.row_mut(n).copy_from_slice(&self.levels[n / per]);
        }
        Ok(out)
    }

    /// `k⁺k r` for a constant projection.
    pub fn projected(&self, proj: &crate::linalg::Matrix) -> Result<Self> {
        let levels = self.levels.iter().map(|l| proj.matvec(l)).collect();
        Self::new(format!("{}:projected", self.label), levels)
    }
}

/// The default probe family of frequencies.
pub fn default_frequencies() -> Vec<&'static str> {
    vec!["0", "1", "-2", "2,-1", "1,-1,2,-2"]
}

/// `θ` at every grid time.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaPath {
    pub values: Vec<Complex64>,
}

impl ThetaPath {
    pub fn last(&self) -> Complex64 {
        *self.values.last().expect("θ has at least one value")
    }
}

/// Closed form `θ_t = exp(i Σ r·dW + ½ Σ |r|² dt)` with left-point sums.
pub fn theta_path(r: &Series, grid: &TimeGrid, dw: &Series) -> Result<ThetaPath> {
    check_theta_inputs(r, grid, dw)?;
    let mut values = Vec::with_capacity(grid.n_steps + 1);
    values.push(Complex64::new(1.0, 0.0));
    let mut phase = 0.0;
    let mut quad = 0.0;
    for n in 0..grid.n_steps {
        let rn = r.row(n);
        phase += rn.iter().zip(dw.row(n)).map(|(a, b)| a * b).sum::<f64>();
        quad += rn.iter().map(|v| v * v).sum::<f64>() * grid.dt;
        values.push(Complex64::from_polar((0.5 * quad).exp(), phase));
    }
    Ok(ThetaPath { values })
}

/// Euler scheme for `dθ = i θ r·dW`, for comparison with the closed form.
pub fn theta_euler(r: &Series, grid: &TimeGrid, dw: &Series) -> Result<ThetaPath> {
    check_theta_inputs(r, grid, dw)?;
    let mut values = Vec::with_capacity(grid.n_steps + 1);
    let mut th = Complex64::new(1.0, 0.0);
    values.push(th);
    for n in 0..grid.n_steps {
        let inc: f64 = r.row(n).iter().zip(dw.row(n)).map(|(a, b)| a * b).sum();
        th += th * Complex64::new(0.0, inc);
        values.push(th);
    }
    Ok(ThetaPath { values })
}

fn check_theta_inputs(r: &Series, grid: &TimeGrid, dw: &Series) -> Result<()> {
    if r.len() != grid.n_steps || dw.len() != grid.n_steps || r.width != dw.width {
        return Err(Error::DimensionMismatch(format!(
            "frequency {}×{} and increments {}×{} on a grid of {} steps",
            r.len(),
            r.width,
            dw.len(),
            dw.width,
            grid.n_steps
        )));
    }
    Ok(())
}

/// One reference-measure replica: observed increments and recorded
/// unnormalised particle ensembles.
#[derive(Debug, Clone)]
pub struct ReferenceReplica {
    pub dw_obs: Series,
    pub ensembles: Vec<WeightedEnsemble>,
    pub stride: usize,
}

impl ReferenceReplica {
    pub fn initial(&self) -> &WeightedEnsemble {
        &self.ensembles[0]
    }

    pub fn terminal(&self) -> &WeightedEnsemble {
        self.ensembles.last().expect("at least two ensembles")
    }
}

/// Simulates `n_replicas` observation paths under the reference measure and
/// runs the particle filter on each, keeping every `stride`-th ensemble.
pub fn reference_replicas(spec: &ScenarioSpec, n_replicas: usize, stride: usize) -> Result<Vec<ReferenceReplica>> {
    spec.validate()?;
    let record = if stride >= spec.n_steps() {
        Record::Endpoints
    } else {
        Record::Stride(stride)
    };
    let stride = stride.min(spec.n_steps());
    (0..n_replicas as u64)
        .into_par_iter()
        .map(|r| {
            let (obs, _) = simulate_reference_obs(spec, r)?;
            let run = ks_filter(
                spec,
                &obs,
                r,
                FilterOptions {
                    record,
                    ..FilterOptions::default()
                },
            )?;
            Ok(ReferenceReplica {
                dw_obs: run.driver.dw_obs,
                ensembles: run.ensembles,
                stride,
            })
        })
        .collect()
}

/// `Σ wᵢ u(xᵢ)` with `u` interpolated from the grid.
pub fn pair_with_grid(ens: &WeightedEnsemble, u: &crate::gridpde::GridFunction) -> Result<Complex64> {
    if ens.dim() != 1 {
        return Err(Error::Unsupported("grid pairing is one-dimensional".into()));
    }
    let w = ens.weights();
    let mut terms = Vec::with_capacity(ens.len());
    for (i, wi) in w.iter().enumerate() {
        if *wi == 0.0 {
            continue;
        }
        terms.push(u.interpolate(ens.point(i)[0])? * wi);
    }
    Ok(pairwise_sum_complex(&terms))
}

/// Complex mean with the modulus of its componentwise standard errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplexEstimate {
    pub mean: Complex64,
    pub se_re: f64,
    pub se_im: f64,
}

impl ComplexEstimate {
    pub fn of(samples: &[Complex64]) -> Self {
        let (mean, se_re, se_im) = complex_mean_se(samples);
        Self { mean, se_re, se_im }
    }

    pub fn se(&self) -> f64 {
        self.se_re.hypot(self.se_im)
    }
}

/// Both sides of the duality pairing for one `(r, φ)`.
#[derive(Debug, Clone)]
pub struct DualRun {
    pub freq: FrequencyChoice,
    pub phi_label: String,
    pub u: DualSolution,
    /// `θ_T π_T(φ)` per replica.
    pub lhs_samples: Vec<Complex64>,
    /// `π₀(u₀)` per replica.
    pub rhs_samples: Vec<Complex64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualityGap {
    pub r_label: String,
    pub phi_label: String,
    pub lhs: ComplexEstimate,
    pub rhs: ComplexEstimate,
    /// `|mean lhs − mean rhs|`.
    pub gap: f64,
}

impl DualityGap {
    /// Combined standard error of the two means.
    pub fn se(&self) -> f64 {
        self.lhs.se().hypot(self.rhs.se())
    }

    /// `gap ≤ 3·SE + tolerance`.
    pub fn passes(&self, tolerance: f64) -> bool {
        self.gap <= 3.0 * self.se() + tolerance
    }
}

impl DualRun {
    pub fn gap(&self) -> DualityGap {
        let lhs = ComplexEstimate::of(&self.lhs_samples);
        let rhs = ComplexEstimate::of(&self.rhs_samples);
        DualityGap {
            r_label: self.freq.label.clone(),
            phi_label: self.phi_label.clone(),
            gap: (lhs.mean - rhs.mean).norm(),
            lhs,
            rhs,
        }
    }
}

/// Checks `Ẽ[θ_T π_T(φ)] = Ẽ[π₀(u₀)]` on precomputed replicas.
pub fn duality_run(
    spec: &ScenarioSpec,
    replicas: &[ReferenceReplica],
    freq: &FrequencyChoice,
    phi: &TestFunction,
    grid: Grid1D,
) -> Result<DualRun> {
    if replicas.len() < MIN_REPLICAS {
        return Err(Error::InvalidInput(format!(
            "{} replicas, at least {MIN_REPLICAS} are needed",
            replicas.len()
        )));
    }
    let time = TimeGrid::from_spec(spec)?;
    let r = freq.on_grid(&time)?;
    let u = dual_backward_solve(&spec.coeffs, &r, phi, grid, time)?;
    let pairs: Vec<(Complex64, Complex64)> = replicas
        .par_iter()
        .map(|rep| {
            let theta = theta_path(&r, &time, &rep.dw_obs)?.last();
            let pi_t = rep.terminal().integrate(phi)?;
            let rhs = pair_with_grid(rep.initial(), &u.u[0])?;
            Ok((theta * pi_t, rhs))
        })
        .collect::<Result<_>>()?;
    Ok(DualRun {
        freq: freq.clone(),
        phi_label: phi.name().to_string(),
        u,
        lhs_samples: pairs.iter().map(|p| p.0).collect(),
        rhs_samples: pairs.iter().map(|p| p.1).collect(),
    })
}

/// Simulates the replicas and returns the gap statistic for one `(r, φ)`.
pub fn duality_gap(
    spec: &ScenarioSpec,
    freq: &FrequencyChoice,
    phi: &TestFunction,
    n_replicas: usize,
    grid: Grid1D,
) -> Result<DualityGap> {
    let replicas = reference_replicas(spec, n_replicas, spec.n_steps())?;
    Ok(duality_run(spec, &replicas, freq, phi, grid)?.gap())
}

/// `θ_t π_t(u_t)` per replica at the recorded times.
pub fn theta_pi_u_samples(replicas: &[ReferenceReplica], run: &DualRun) -> Result<Vec<Vec<Complex64>>> {
    let time = run.u.time;
    replicas
        .par_iter()
        .map(|rep| {
            let theta = theta_path(&run.u.r, &time, &rep.dw_obs)?;
            rep.ensembles
                .iter()
                .enumerate()
                .map(|(k, e)| {
                    let n = (k * rep.stride).min(time.n_steps);
                    Ok(theta.values[n] * pair_with_grid(e, &run.u.u[n])?)
                })
                .collect()
        })
        .collect()
}

/// Per-interval z-statistics of mean increments.
#[derive(Debug, Clone, PartialEq)]
pub struct MartingaleTest {
    pub z_re: Vec<f64>,
    pub z_im: Vec<f64>,
    pub max_abs_z: f64,
}

impl MartingaleTest {
    pub fn passes(&self) -> bool {
        self.max_abs_z <= 3.0
    }
}

fn z_score(v: &[f64]) -> f64 {
    let (m, se) = mean_se(v);
    if m == 0.0 {
        0.0
    } else if se == 0.0 {
        f64::INFINITY
    } else {
        m / se
    }
}

/// `samples[replica][k]` is the process at the `k`-th recorded time; each
/// consecutive pair of recorded times is one interval.
pub fn martingale_test(samples: &[Vec<Complex64>]) -> Result<MartingaleTest> {
    if samples.len() < MIN_REPLICAS {
        return Err(Error::InvalidInput(format!(
            "{} replicas, at least {MIN_REPLICAS} are needed",
            samples.len()
        )));
    }
    let k = samples[0].len();
    if k < 2 || samples.iter().any(|s| s.len() != k) {
        return Err(Error::DimensionMismatch("every replica needs the same ≥ 2 recorded times".into()));
    }
    let mut z_re = Vec::with_capacity(k - 1);
    let mut z_im = Vec::with_capacity(k - 1);
    for i in 0..k - 1 {
        let re: Vec<f64> = samples.iter().map(|s| s[i + 1].re - s[i].re).collect();
        let im: Vec<f64> = samples.iter().map(|s| s[i + 1].im - s[i].im).collect();
        z_re.push(z_score(&re));
        z_im.push(z_score(&im));
    }
    let max_abs_z = z_re.iter().chain(&z_im).map(|z| z.abs()).fold(0.0, f64::max);
    Ok(MartingaleTest { z_re, z_im, max_abs_z })
}

/// Real samples as a complex process, for [`martingale_test`].
pub fn as_complex(samples: &[Vec<f64>]) -> Vec<Vec<Complex64>> {
    samples
        .iter()
        .map(|s| s.iter().map(|v| Complex64::new(*v, 0.0)).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalityTest {
    pub estimate: ComplexEstimate,
    /// Same statistic with `θ` driven by the full `dW̃` and the unprojected
    /// frequency; expected to be non-zero when `k` is rank-deficient.
    pub unprojected: ComplexEstimate,
}

impl OrthogonalityTest {
    pub fn z(&self) -> f64 {
        let e = &self.estimate;
        let zr = if e.mean.re == 0.0 { 0.0 } else { e.mean.re / e.se_re };
        let zi = if e.mean.im == 0.0 { 0.0 } else { e.mean.im / e.se_im };
        zr.abs().max(zi.abs())
    }

    /// `|estimate| ≤ 3·SE` componentwise.
    pub fn passes(&self) -> bool {
        self.z() <= 3.0
    }
}

/// Monte Carlo estimate of `Ẽ[θ_T ∫ κ_s (I − k⁺k) dW̃_s]`, with `κ` evaluated
/// along the signal path and `θ` driven by the observed increments.
pub fn orthogonality_test(
    spec: &ScenarioSpec,
    kappa: &StateFn,
    freq: &FrequencyChoice,
    n_replicas: usize,
) -> Result<OrthogonalityTest> {
    spec.validate()?;
    if n_replicas < MIN_REPLICAS {
        return Err(Error::InvalidInput(format!(
            "{n_replicas} replicas, at least {MIN_REPLICAS} are needed"
        )));
    }
    let dims = spec.dims;
    let time = TimeGrid::from_spec(spec)?;
    let r = freq.on_grid(&time)?;
    if r.width != dims.l_obs {
        return Err(Error::DimensionMismatch("frequency width must equal l_obs".into()));
    }
    let pairs: Vec<(Complex64, Complex64)> = (0..n_replicas as u64)
        .into_par_iter()
        .map(|rep| {
            let (obs, _) = simulate_reference_obs(spec, rep)?;
            let driver = ObsDriver::new(&spec.coeffs, &obs)?;
            let (x, w) = simulate_signal_with_driver(spec, &obs, &driver, rep, TRUTH)?;
            let mut integral = Vec::with_capacity(time.n_steps);
            let mut kv = vec![0.0; dims.l_obs];
            for n in 0..time.n_steps {
                let Some(orth) = &driver.orth[n] else { continue };
                (kappa)(time.time(n), x.row(n), obs.at(n), &mut kv);
                let ow = orth.matvec(w.row(n));
                integral.push(kv.iter().zip(&ow).map(|(a, b)| a * b).sum::<f64>());
            }
            let i_t = pairwise_sum(&integral);
            let theta = theta_path(&r, &time, &driver.dw_obs)?.last();
            let theta_full = theta_path(&r, &time, &w)?.last();
            Ok((theta * i_t, theta_full * i_t))
        })
        .collect::<Result<_>>()?;
    let a: Vec<Complex64> = pairs.iter().map(|p| p.0).collect();
    let b: Vec<Complex64> = pairs.iter().map(|p| p.1).collect();
    Ok(OrthogonalityTest {
        estimate: ComplexEstimate::of(&a),
        unprojected: ComplexEstimate::of(&b),
    })
}

/// One row of the particle-vs-grid comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeEntry {
    pub r_label: String,
    pub phi_label: String,
    pub particle: ComplexEstimate,
    pub grid: ComplexEstimate,
    pub diff: f64,
}

impl ProbeEntry {
    pub fn se(&self) -> f64 {
        self.particle.se().hypot(self.grid.se())
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.diff <= 3.0 * self.se() + tolerance
    }
}

/// Compares `Ẽ[θ_T π_T(φ)]` from the particle filter and from the grid Zakai
/// solver on the same reference-measure observation paths.
pub fn uniqueness_probe(
    spec: &ScenarioSpec,
    n_replicas: usize,
    phis: &[TestFunction],
    freqs: &[FrequencyChoice],
    grid: Grid1D,
) -> Result<Vec<ProbeEntry>> {
    spec.validate()?;
    if n_replicas < MIN_REPLICAS {
        return Err(Error::InvalidInput(format!(
            "{n_replicas} replicas, at least {MIN_REPLICAS} are needed"
        )));
    }
    let time = TimeGrid::from_spec(spec)?;
    let rs: Vec<Series> = freqs.iter().map(|f| f.on_grid(&time)).collect::<Result<_>>()?;
    let p0 = initial_density(&spec.initial, &grid)?;
    let opts = FilterOptions {
        record: Record::Endpoints,
        ..FilterOptions::default()
    };
    // Per replica: θ_T per frequency, particle and grid π_T(φ) per φ.
    type Row = (Vec<Complex64>, Vec<f64>, Vec<f64>);
    let rows: Vec<Row> = (0..n_replicas as u64)
        .into_par_iter()
        .map(|rep| {
            let (obs, _) = simulate_reference_obs(spec, rep)?;
            let run = ks_filter(spec, &obs, rep, opts)?;
            let dens = zakai_fd_solve(&spec.coeffs, &obs, &p0, grid)?;
            let thetas = rs
                .iter()
                .map(|r| Ok(theta_path(r, &time, &run.driver.dw_obs)?.last()))
                .collect::<Result<Vec<_>>>()?;
            let part = phis
                .iter()
                .map(|p| run.final_ensemble().integrate(p))
                .collect::<Result<Vec<_>>>()?;
            let gridv = phis.iter().map(|p| dens.integrate(time.n_steps, p)).collect();
            Ok((thetas, part, gridv))
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(freqs.len() * phis.len());
    for (fi, f) in freqs.iter().enumerate() {
        for (pi, phi) in phis.iter().enumerate() {
            let a: Vec<Complex64> = rows.iter().map(|row| row.0[fi] * row.1[pi]).collect();
            let b: Vec<Complex64> = rows.iter().map(|row| row.0[fi] * row.2[pi]).collect();
            let particle = ComplexEstimate::of(&a);
            let grid = ComplexEstimate::of(&b);
            out.push(ProbeEntry {
                r_label: f.label.clone(),
                phi_label: phi.name().to_string(),
                diff: (particle.mean - grid.mean).norm(),
                particle,
                grid,
            });
        }
    }
    Ok(out)
}

/// CSV with columns
/// `r_label, phi_label, lhs_re, lhs_im, rhs_re, rhs_im, gap, se_lhs, se_rhs, verdict`.
pub fn duality_report_csv(gaps: &[DualityGap], tolerance: f64) -> String {
    let mut out = String::from("r_label,phi_label,lhs_re,lhs_im,rhs_re,rhs_im,gap,se_lhs,se_rhs,verdict\n");
    for g in gaps {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            quote(&g.r_label),
            quote(&g.phi_label),
            fmt_float(g.lhs.mean.re),
            fmt_float(g.lhs.mean.im),
            fmt_float(g.rhs.mean.re),
            fmt_float(g.rhs.mean.im),
            fmt_float(g.gap),
            fmt_float(g.lhs.se()),
            fmt_float(g.rhs.se()),
            if g.passes(tolerance) { "pass" } else { "fail" }
        );
    }
    out
}

fn quote(s: &str) -> String {
    if s.contains(',') || s.contains('"') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
