//! Particle approximations of the unnormalised and normalised filters.
//!
//! Particles move under the reference measure given the observation path and
//! carry importance weights `Z̃`. The weighted ensemble at time `t` estimates
//! the unnormalised conditional distribution `π_t`; normalising it gives the
//! filter `ς_t`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::export::csv_table;
use crate::measure::{MassPath, WeightedEnsemble};
use crate::model::{CoefficientSet, Dimensions, ScenarioSpec, TestFunction};
use crate::rng::{self, Role};
use crate::sde::{conditional_step, ObsDriver, ObservationPath, ParticleStreams, Series, StepScratch, TimeGrid};
use crate::stats::pairwise_sum;

/// Below this many particles the step loop runs on the calling thread.
const PARALLEL_MIN: usize = 256;

/// `log Z̃` along one path: `Σ h₂·dW̃ − ½ Σ |h₂|² dt`, left-point.
pub fn ztilde_path(
    coeffs: &CoefficientSet,
    grid: &TimeGrid,
    x_path: &Series,
    obs: &ObservationPath,
    w_tilde: &Series,
) -> Result<Vec<f64>> {
    let dims = coeffs.dims;
    if x_path.len() != grid.n_steps + 1 || w_tilde.len() != grid.n_steps || w_tilde.width != dims.l_obs {
        return Err(Error::DimensionMismatch("paths do not share the time grid".into()));
    }
    let mut h2 = vec![0.0; dims.l_obs];
    let mut out = Vec::with_capacity(grid.n_steps + 1);
    let mut acc = 0.0;
    out.push(acc);
    for n in 0..grid.n_steps {
        coeffs.h2(grid.time(n), x_path.row(n), obs.at(n), &mut h2)?;
        let dw = w_tilde.row(n);
        let mut inc = 0.0;
        let mut sq = 0.0;
        for j in 0..dims.l_obs {
            inc += h2[j] * dw[j];
            sq += h2[j] * h2[j];
        }
        acc += inc - 0.5 * sq * grid.dt;
        out.push(acc);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Record {
    /// Keep the ensemble at every grid time.
    All,
    /// Keep only the initial and final ensembles.
    Endpoints,
    /// Keep every `k`-th grid time; `k` must divide the step count.
    Stride(usize),
}

impl Record {
    fn keeps(self, n: usize, n_steps: usize) -> bool {
        match self {
            Record::All => true,
            Record::Endpoints => n == 0 || n == n_steps,
            Record::Stride(k) => n % k == 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterOptions {
    /// Multinomial resampling when ESS drops below `ess_fraction · N`.
    pub resample: bool,
    pub ess_fraction: f64,
    pub record: Record,
}

impl Default for FilterOptions {
    fn default() -> Self {
        Self {
            resample: false,
            ess_fraction: 0.1,
            record: Record::All,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FilterRun {
    pub dims: Dimensions,
    pub coeffs: CoefficientSet,
    pub grid: TimeGrid,
    pub obs: ObservationPath,
    pub driver: ObsDriver,
    pub record: Record,
    /// Unnormalised ensembles (see [`FilterRun::ensemble`]).
    pub ensembles: Vec<WeightedEnsemble>,
    /// `π_t(1)` at every grid time.
    pub mass: MassPath,
    /// Effective sample size at every grid time.
    pub ess: Vec<f64>,
    /// Per particle: step at which it exploded, if it did.
    pub exploded: Vec<Option<usize>>,
    /// Steps after which the ensemble was resampled.
    pub resampled_at: Vec<usize>,
}

impl FilterRun {
    /// The unnormalised ensemble at grid step `n`, if it was recorded.
    pub fn ensemble(&self, n: usize) -> Option<&WeightedEnsemble> {
        match self.record {
            Record::All => self.ensembles.get(n),
            Record::Endpoints if n == 0 => self.ensembles.first(),
            Record::Endpoints if n == self.grid.n_steps => self.ensembles.last(),
            Record::Endpoints => None,
            Record::Stride(k) if n % k == 0 => self.ensembles.get(n / k),
            Record::Stride(_) => None,
        }
    }

    pub fn final_ensemble(&self) -> &WeightedEnsemble {
        self.ensembles.last().expect("a run always has ensembles")
    }

    fn require_all(&self) -> Result<()> {
        if self.record == Record::All {
            Ok(())
        } else {
            Err(Error::Configuration("this diagnostic needs ensembles at every grid time".into()))
        }
    }
}

struct Particle {
    x: Vec<f64>,
    log_w: f64,
    streams: ParticleStreams,
    scratch: StepScratch,
    exploded: Option<usize>,
}

/// Runs the weighted particle filter along `obs`.
///
/// Particle `i` of replica `r` draws from the streams keyed by
/// `(spec.seed, r, i)`, so the output does not depend on the thread count.
pub fn ks_filter(spec: &ScenarioSpec, obs: &ObservationPath, replica: u64, options: FilterOptions) -> Result<FilterRun> {
    spec.validate()?;
    let driver = ObsDriver::new(&spec.coeffs, obs)?;
    let dims = spec.dims;
    let n_part = spec.n_particles;
    let grid = obs.grid;
    let coeffs = &spec.coeffs;

    let mut particles: Vec<Particle> = (0..n_part as u64)
        .map(|i| {
            let mut init = rng::stream(spec.seed, replica, i, Role::InitialState);
            let mut x = vec![0.0; dims.d];
            spec.initial.sample_x(&mut init, &mut x);
            Particle {
                x,
                log_w: 0.0,
                streams: ParticleStreams::new(spec.seed, replica, i),
                scratch: StepScratch::new(dims),
                exploded: None,
            }
        })
        .collect();

    let log_n = (n_part as f64).ln();
    let snapshot = |ps: &[Particle], t: f64| -> Result<WeightedEnsemble> {
        let points: Vec<f64> = ps.iter().flat_map(|p| p.x.iter().copied()).collect();
        if ps.iter().all(|p| p.log_w < 500.0) {
            let w: Vec<f64> = ps.iter().map(|p| p.log_w.exp() / n_part as f64).collect();
            return WeightedEnsemble::new(dims.d, points, w, t);
        }
        let lw: Vec<f64> = ps.iter().map(|p| p.log_w - log_n).collect();
        WeightedEnsemble::from_log_weights(dims.d, points, &lw, t)
    };

    if let Record::Stride(k) = options.record {
        if k == 0 || grid.n_steps % k != 0 {
            return Err(Error::Configuration(format!(
                "recording stride {k} does not divide {} steps",
                grid.n_steps
            )));
        }
    }
    let mut ensembles = Vec::with_capacity(match options.record {
        Record::All => grid.n_steps + 1,
        Record::Endpoints => 2,
        Record::Stride(k) => grid.n_steps / k + 1,
    });
    let first = snapshot(&particles, 0.0)?;
    let mut mass = vec![first.mass()];
    let mut ess = vec![first.effective_sample_size()?];
    ensembles.push(first);
    let mut resampled_at = Vec::new();

    for step in 0..grid.n_steps {
        let advance = |p: &mut Particle| -> Result<()> {
            if p.exploded.is_some() {
                return Ok(());
            }
            match conditional_step(coeffs, &driver, obs, step, &mut p.x, &mut p.log_w, &mut p.streams, &mut p.scratch) {
                Ok(()) => Ok(()),
                Err(Error::Explosion { step }) => {
                    p.exploded = Some(step);
                    p.log_w = f64::NEG_INFINITY;
                    p.x.iter_mut().for_each(|v| *v = 0.0);
                    Ok(())
                }
                Err(e) => Err(e),
            }
        };
        if n_part >= PARALLEL_MIN {
            particles.par_iter_mut().try_for_each(advance)?;
        } else {
            particles.iter_mut().try_for_each(advance)?;
        }
        if particles.iter().all(|p| p.exploded.is_some()) {
            return Err(Error::AllParticlesExploded { n_particles: n_part });
        }

        let t = grid.time(step + 1);
        let ens = snapshot(&particles, t)?;
        let m = ens.mass();
        if !(m > 0.0) || !m.is_finite() {
            return Err(Error::DegenerateMeasure { mass: m });
        }
        let e = ens.effective_sample_size()?;
        mass.push(m);
        ess.push(e);

        if options.resample && e < options.ess_fraction * n_part as f64 && step + 1 < grid.n_steps {
            resample(&mut particles, &ens, spec.seed, replica, step as u64)?;
            resampled_at.push(step + 1);
            // The recorded ensemble keeps the pre-resampling weights.
        }
        if options.record.keeps(step + 1, grid.n_steps) {
            ensembles.push(ens);
        }
    }

    Ok(FilterRun {
        dims,
        coeffs: spec.coeffs.clone(),
        grid,
        obs: obs.clone(),
        driver,
        record: options.record,
        ensembles,
        mass: MassPath { values: mass },
        ess,
        exploded: particles.iter().map(|p| p.exploded).collect(),
        resampled_at,
    })
}

/// Multinomial resampling. Every offspring carries the current total mass
/// as its weight prefactor, so `π_t(1)` is unchanged.
fn resample(particles: &mut [Particle], ens: &WeightedEnsemble, seed: u64, replica: u64, step: u64) -> Result<()> {
    let w = ens.raw_weights();
    let total = pairwise_sum(w);
    let mut cdf = Vec::with_capacity(w.len());
    let mut acc = 0.0;
    for v in w {
        acc += v / total;
        cdf.push(acc);
    }
    let mut rng = rng::stream(seed, replica, step, Role::Resample);
    let ancestors: Vec<usize> = (0..particles.len())
        .map(|_| {
            let u = rng::uniform(&mut rng);
            cdf.partition_point(|c| *c < u).min(w.len() - 1)
        })
        .collect();
    let xs: Vec<Vec<f64>> = ancestors.iter().map(|&a| particles[a].x.clone()).collect();
    let log_mass = ens.mass().ln();
    for (p, x) in particles.iter_mut().zip(xs) {
        p.x = x;
        p.log_w = log_mass;
        p.exploded = None;
    }
    Ok(())
}

/// Normalised ensembles `ς_t = π_t / π_t(1)`.
pub fn ks_path(run: &FilterRun) -> Result<Vec<WeightedEnsemble>> {
    run.ensembles.iter().map(|e| e.normalize()).collect()
}

/// Per-particle evaluations shared by the residual computations.
struct Moments {
    /// Weighted sums per test function: `μ(φ)`, `μ(Aφ)` and `μ(∇φḡ + φh₂ᵀ)`.
    value: Vec<f64>,
    generator: Vec<f64>,
    obs_row: Vec<Vec<f64>>,
    /// `μ(h₂)`.
    h2: Vec<f64>,
}

fn moments(coeffs: &CoefficientSet, t: f64, y: &[f64], ens: &WeightedEnsemble, phis: &[TestFunction]) -> Result<Moments> {
    let dims = coeffs.dims;
    let lo = dims.l_obs;
    let n_phi = phis.len();
    // Per particle: [φ, Aφ, row(lo)] per test function, then h₂(lo).
    let width = n_phi * (2 + lo) + lo;
    let weights = ens.weights();
    let per: Vec<Result<Vec<f64>>> = (0..ens.len())
        .into_par_iter()
        .with_min_len(512)
        .map(|i| {
            let x = ens.point(i);
            let pv = coeffs.point(t, x, y)?;
            let w = weights[i];
            let mut out = vec![0.0; width];
            let mut grad = vec![0.0; dims.d];
            let mut hess = vec![0.0; dims.d * dims.d];
            let mut row = vec![0.0; lo];
            for (k, phi) in phis.iter().enumerate() {
                let v = phi.value(x);
                phi.gradient(x, &mut grad);
                phi.hessian(x, &mut hess);
                let base = k * (2 + lo);
                out[base] = w * v;
                out[base + 1] = w * pv.generator(dims, &grad, &hess);
                pv.observation_row(dims, v, &grad, &mut row);
                for j in 0..lo {
                    out[base + 2 + j] = w * row[j];
                }
            }
            for j in 0..lo {
                out[n_phi * (2 + lo) + j] = w * pv.h2[j];
            }
            Ok(out)
        })
        .collect();
    let per: Vec<Vec<f64>> = per.into_iter().collect::<Result<_>>()?;
    let mut col = vec![0.0; per.len()];
    let mut sums = vec![0.0; width];
    for (c, s) in sums.iter_mut().enumerate() {
        for (i, row) in per.iter().enumerate() {
            col[i] = row[c];
        }
        *s = pairwise_sum(&col);
    }
    let mut m = Moments {
        value: Vec::with_capacity(n_phi),
        generator: Vec::with_capacity(n_phi),
        obs_row: Vec::with_capacity(n_phi),
        h2: sums[n_phi * (2 + lo)..].to_vec(),
    };
    for k in 0..n_phi {
        let base = k * (2 + lo);
        m.value.push(sums[base]);
        m.generator.push(sums[base + 1]);
        m.obs_row.push(sums[base + 2..base + 2 + lo].to_vec());
    }
    Ok(m)
}

/// Discrete weak-form defect of a measure path.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualPath {
    pub name: String,
    /// `μ_t(φ)` at every grid time.
    pub values: Vec<f64>,
    /// Accumulated `dt` terms.
    pub drift: Vec<f64>,
    /// Accumulated observation-driven terms.
    pub stochastic: Vec<f64>,
    /// `values − values[0] − drift − stochastic`.
    pub residual: Vec<f64>,
}

impl ResidualPath {
    pub fn max_abs(&self) -> f64 {
        self.residual.iter().fold(0.0, |m, r| m.max(r.abs()))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Weak-form residual of an arbitrary unnormalised measure path against the
/// discrete Zakai identity.
pub fn zakai_residual_of(
    coeffs: &CoefficientSet,
    grid: &TimeGrid,
    obs: &ObservationPath,
    driver: &ObsDriver,
    path: &[WeightedEnsemble],
    phis: &[TestFunction],
) -> Result<Vec<ResidualPath>> {
    if path.len() != grid.n_steps + 1 {
        return Err(Error::DimensionMismatch(format!(
            "{} ensembles for {} grid times",
            path.len(),
            grid.n_steps + 1
        )));
    }
    let mut out: Vec<ResidualPath> = phis
        .iter()
        .map(|p| ResidualPath {
            name: p.name().to_string(),
            values: Vec::with_capacity(path.len()),
            drift: vec![0.0],
            stochastic: vec![0.0],
            residual: Vec::with_capacity(path.len()),
        })
        .collect();
    for n in 0..=grid.n_steps {
        let m = moments(coeffs, grid.time(n), obs.at(n), &path[n], phis)?;
        for (k, r) in out.iter_mut().enumerate() {
            r.values.push(m.value[k]);
            if n < grid.n_steps {
                let sto = dot(&m.obs_row[k], driver.dw_obs.row(n));
                if !sto.is_finite() || !m.generator[k].is_finite() {
                    return Err(Error::NonFinite(format!("stochastic integrand of `{}` at step {n}", r.name)));
                }
                let d = *r.drift.last().unwrap() + m.generator[k] * grid.dt;
                let s = *r.stochastic.last().unwrap() + sto;
                r.drift.push(d);
                r.stochastic.push(s);
            }
        }
    }
    for r in &mut out {
        let v0 = r.values[0];
        r.residual = (0..r.values.len())
            .map(|n| r.values[n] - v0 - r.drift[n] - r.stochastic[n])
            .collect();
    }
    Ok(out)
}

/// Zakai weak-form residual of a filter run, one path per test function.
pub fn zakai_residual(run: &FilterRun, phis: &[TestFunction]) -> Result<Vec<ResidualPath>> {
    run.require_all()?;
    zakai_residual_of(&run.coeffs, &run.grid, &run.obs, &run.driver, &run.ensembles, phis)
}

/// Residual of the normalised path against the discrete Kushner–Stratonovich
/// identity, with compensator `ς(h)` and correction `ς(φ)ς(h₂ᵀ)`.
pub fn ks_residual(run: &FilterRun, ks: &[WeightedEnsemble], phis: &[TestFunction]) -> Result<Vec<ResidualPath>> {
    let grid = &run.grid;
    if ks.len() != grid.n_steps + 1 {
        return Err(Error::DimensionMismatch("normalised path does not match the grid".into()));
    }
    let lo = run.dims.l_obs;
    let mut out: Vec<ResidualPath> = phis
        .iter()
        .map(|p| ResidualPath {
            name: p.name().to_string(),
            values: Vec::new(),
            drift: vec![0.0],
            stochastic: vec![0.0],
            residual: Vec::new(),
        })
        .collect();
    for n in 0..=grid.n_steps {
        let m = moments(&run.coeffs, grid.time(n), run.obs.at(n), &ks[n], phis)?;
        for (k, r) in out.iter_mut().enumerate() {
            r.values.push(m.value[k]);
            if n < grid.n_steps {
                // k⁺(ΔY − ς(h)dt) = k⁺ΔN − k⁺k ς(h₂) dt
                let proj_h2 = run.driver.proj[n].matvec(&m.h2);
                let innov: Vec<f64> = (0..lo)
                    .map(|j| run.driver.dw_obs.row(n)[j] - proj_h2[j] * grid.dt)
                    .collect();
                let row: Vec<f64> = (0..lo).map(|j| m.obs_row[k][j] - m.value[k] * m.h2[j]).collect();
                let sto = dot(&row, &innov);
                if !sto.is_finite() {
                    return Err(Error::NonFinite(format!("stochastic integrand of `{}` at step {n}", r.name)));
                }
                let d = *r.drift.last().unwrap() + m.generator[k] * grid.dt;
                let s = *r.stochastic.last().unwrap() + sto;
                r.drift.push(d);
                r.stochastic.push(s);
            }
        }
    }
    for r in &mut out {
        let v0 = r.values[0];
        r.residual = (0..r.values.len())
            .map(|n| r.values[n] - v0 - r.drift[n] - r.stochastic[n])
            .collect();
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MassScheme {
    Euler,
    /// Exponential update; stays positive for any step size.
    LogEuler,
}

/// Total-mass process driven by a normalised path:
/// `j_{n+1} = j_n (1 + ς_n(h₂ᵀ) k⁺ ΔN_n)`, `j_0 = 1`.
pub fn mass_process(
    coeffs: &CoefficientSet,
    obs: &ObservationPath,
    driver: &ObsDriver,
    ks: &[WeightedEnsemble],
    scheme: MassScheme,
) -> Result<MassPath> {
    let grid = &driver.grid;
    if ks.len() != grid.n_steps + 1 {
        return Err(Error::DimensionMismatch("normalised path does not match the grid".into()));
    }
    let dims = coeffs.dims;
    let mut j = vec![1.0];
    let mut h2 = vec![0.0; dims.l_obs];
    for n in 0..grid.n_steps {
        let ens = &ks[n];
        let w = ens.weights();
        let mut cols = vec![vec![0.0; ens.len()]; dims.l_obs];
        for i in 0..ens.len() {
            coeffs.h2(grid.time(n), ens.point(i), obs.at(n), &mut h2)?;
            for c in 0..dims.l_obs {
                cols[c][i] = w[i] * h2[c];
            }
        }
        let b: Vec<f64> = cols.iter().map(|c| pairwise_sum(c)).collect();
        let inc = dot(&b, driver.dw_obs.row(n));
        let prev = *j.last().unwrap();
        let next = match scheme {
            MassScheme::Euler => prev * (1.0 + inc),
            MassScheme::LogEuler => {
                let pb = driver.proj[n].matvec(&b);
                prev * (inc - 0.5 * dot(&pb, &pb) * grid.dt).exp()
            }
        };
        if !(next > 0.0) {
            return Err(Error::PositivityLoss { step: n + 1, value: next });
        }
        j.push(next);
    }
    Ok(MassPath { values: j })
}

/// Scales each normalised ensemble by the matching mass value.
pub fn reconstruct_pi(ks: &[WeightedEnsemble], mass: &MassPath) -> Result<Vec<WeightedEnsemble>> {
    if ks.len() != mass.values.len() {
        return Err(Error::DimensionMismatch("mass path does not match the ensemble path".into()));
    }
    ks.iter().zip(&mass.values).map(|(e, &m)| e.scaled(m)).collect()
}

/// CSV with columns `t, pi_mass, j_mass, ess, est_<name>...`, where the
/// estimates are normalised filter means.
pub fn filter_report_csv(run: &FilterRun, j: &MassPath, phis: &[TestFunction]) -> Result<String> {
    let mut header: Vec<String> = ["t", "pi_mass", "j_mass", "ess"].iter().map(|s| s.to_string()).collect();
    header.extend(phis.iter().map(|p| format!("est_{}", p.name())));
    let mut rows = Vec::new();
    for n in 0..=run.grid.n_steps {
        let Some(ens) = run.ensemble(n) else { continue };
        let mass = run.mass.values[n];
        let mut row = vec![run.grid.time(n), mass, j.values[n], run.ess[n]];
        for p in phis {
            row.push(ens.integrate(p)? / mass);
        }
        rows.push(row);
    }
    Ok(csv_table(&header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{self, obs_fn, state_fn};
    use crate::sde::{simulate_joint, simulate_reference_obs};

    fn small(spec: ScenarioSpec) -> ScenarioSpec {
        spec.with_dt(1e-2).with_particles(200)
    }

    #[test]
    fn constant_h2_log_weight_closed_form() {
        let mut s = small(model::linear_gaussian());
        s.coeffs.h2 = state_fn(|_, _, _, o| o[0] = 0.7);
        let b = simulate_joint(&s, 0).unwrap();
        let lz = ztilde_path(&s.coeffs, &b.grid, &b.x, &b.obs, &b.w_tilde).unwrap();
        let w_t: f64 = b.w_tilde.values.iter().sum();
        let expected = 0.7 * w_t - 0.5 * 0.49 * 1.0;
        assert!((lz[b.grid.n_steps] - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_h2_gives_unit_weights() {
        let mut s = small(model::linear_gaussian());
        s.coeffs.h2 = state_fn(|_, _, _, o| o[0] = 0.0);
        let b = simulate_joint(&s, 0).unwrap();
        let run = ks_filter(&s, &b.obs, 0, FilterOptions::default()).unwrap();
        for e in &run.ensembles {
            assert!(e.raw_weights().iter().all(|&w| w == 1.0 / 200.0));
        }
        let ks = ks_path(&run).unwrap();
        let j = mass_process(&run.coeffs, &run.obs, &run.driver, &ks, MassScheme::Euler).unwrap();
        assert!(j.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn degenerate_k_has_no_stochastic_term() {
        let s = small(model::degenerate_k0());
        let b = simulate_joint(&s, 0).unwrap();
        let run = ks_filter(&s, &b.obs, 0, FilterOptions::default()).unwrap();
        let r = zakai_residual(&run, &[TestFunction::sin(1, 0, 1.0), TestFunction::constant(1, 1.0)]).unwrap();
        for p in &r {
            assert!(p.stochastic.iter().all(|&v| v == 0.0));
        }
        let ks = ks_path(&run).unwrap();
        let j = mass_process(&run.coeffs, &run.obs, &run.driver, &ks, MassScheme::Euler).unwrap();
        assert!(j.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn normalised_path_has_unit_mass_and_matches_ratio() {
        let s = small(model::correlated_bounded());
        let b = simulate_joint(&s, 1).unwrap();
        let run = ks_filter(&s, &b.obs, 1, FilterOptions::default()).unwrap();
        let ks = ks_path(&run).unwrap();
        let phi = TestFunction::sin(1, 0, 1.0);
        for (p, q) in run.ensembles.iter().zip(&ks) {
            assert_eq!(q.mass(), 1.0);
            let ratio = p.integrate(&phi).unwrap() / p.mass();
            assert!((q.integrate(&phi).unwrap() - ratio).abs() < 1e-14);
        }
    }

    #[test]
    fn unit_mass_reconstruction_is_identity() {
        let s = small(model::linear_gaussian());
        let b = simulate_joint(&s, 0).unwrap();
        let run = ks_filter(&s, &b.obs, 0, FilterOptions::default()).unwrap();
        let ks = ks_path(&run).unwrap();
        let ones = MassPath {
            values: vec![1.0; ks.len()],
        };
        assert_eq!(reconstruct_pi(&ks, &ones).unwrap(), ks);
    }

    #[test]
    fn constant_mass_leaves_stochastic_term_unexplained() {
        // π(1) ≡ 2 misses the mass martingale term, so φ ≡ 1 shows a defect.
        let s = small(model::linear_gaussian());
        let b = simulate_joint(&s, 0).unwrap();
        let run = ks_filter(&s, &b.obs, 0, FilterOptions::default()).unwrap();
        let ks = ks_path(&run).unwrap();
        let twos = MassPath {
            values: vec![2.0; ks.len()],
        };
        let fake = reconstruct_pi(&ks, &twos).unwrap();
        let one = TestFunction::constant(1, 1.0);
        let bad = zakai_residual_of(&run.coeffs, &run.grid, &run.obs, &run.driver, &fake, &[one.clone()]).unwrap();
        let good = zakai_residual(&run, &[one]).unwrap();
        assert!(bad[0].max_abs() > 10.0 * good[0].max_abs());
    }

    #[test]
    fn parallel_and_serial_runs_agree() {
        let s = model::correlated_bounded().with_dt(1e-2).with_particles(1000);
        let b = simulate_joint(&s, 0).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let a = pool.install(|| ks_filter(&s, &b.obs, 0, FilterOptions::default()).unwrap());
        let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let c = pool1.install(|| ks_filter(&s, &b.obs, 0, FilterOptions::default()).unwrap());
        assert_eq!(a.ensembles, c.ensembles);
        assert_eq!(a.mass, c.mass);
    }

    #[test]
    fn resampling_preserves_mass() {
        let mut s = small(model::linear_gaussian());
        s.coeffs.h2 = state_fn(|_, x, _, o| o[0] = 4.0 * x[0]);
        let b = simulate_joint(&s, 0).unwrap();
        let opts = FilterOptions {
            resample: true,
            ess_fraction: 0.5,
            record: Record::All,
        };
        let run = ks_filter(&s, &b.obs, 0, opts).unwrap();
        assert!(!run.resampled_at.is_empty());
        let plain = ks_filter(&s, &b.obs, 0, FilterOptions::default()).unwrap();
        let step = run.resampled_at[0];
        assert!((run.mass.values[step] - plain.mass.values[step]).abs() < 1e-12 * plain.mass.values[step]);
    }

    #[test]
    fn endpoints_record_keeps_two_ensembles() {
        let s = small(model::linear_gaussian());
        let b = simulate_joint(&s, 0).unwrap();
        let opts = FilterOptions {
            record: Record::Endpoints,
            ..FilterOptions::default()
        };
        let run = ks_filter(&s, &b.obs, 0, opts).unwrap();
        assert_eq!(run.ensembles.len(), 2);
        assert!(run.ensemble(5).is_none());
        assert!(zakai_residual(&run, &[TestFunction::constant(1, 1.0)]).is_err());
        let full = ks_filter(&s, &b.obs, 0, FilterOptions::default()).unwrap();
        assert_eq!(run.final_ensemble(), full.final_ensemble());

        let n = s.n_steps();
        let strided = FilterOptions {
            record: Record::Stride(n / 4),
            ..FilterOptions::default()
        };
        let run = ks_filter(&s, &b.obs, 0, strided).unwrap();
        assert_eq!(run.ensembles.len(), 5);
        assert_eq!(run.ensemble(n / 2), full.ensemble(n / 2));
        assert!(run.ensemble(1).is_none());
        let bad = FilterOptions {
            record: Record::Stride(n + 1),
            ..FilterOptions::default()
        };
        assert!(ks_filter(&s, &b.obs, 0, bad).is_err());
    }

    #[test]
    fn positivity_loss_is_reported() {
        let mut s = model::linear_gaussian().with_dt(0.5).with_particles(50);
        s.coeffs.h2 = state_fn(|_, _, _, o| o[0] = 30.0);
        s.coeffs.k = obs_fn(|_, _, o| o[0] = 1.0);
        let mut found = false;
        for r in 0..20 {
            let (obs, _) = simulate_reference_obs(&s, r).unwrap();
            let run = ks_filter(&s, &obs, r, FilterOptions::default()).unwrap();
            let ks = ks_path(&run).unwrap();
            match mass_process(&run.coeffs, &run.obs, &run.driver, &ks, MassScheme::Euler) {
                Err(Error::PositivityLoss { .. }) => {
                    found = true;
                    assert!(mass_process(&run.coeffs, &run.obs, &run.driver, &ks, MassScheme::LogEuler).is_ok());
                }
                _ => {}
            }
        }
        assert!(found);
    }

    #[test]
    fn report_columns() {
        let s = small(model::linear_gaussian()).with_dt(0.25);
        let b = simulate_joint(&s, 0).unwrap();
        let run = ks_filter(&s, &b.obs, 0, FilterOptions::default()).unwrap();
        let ks = ks_path(&run).unwrap();
        let j = mass_process(&run.coeffs, &run.obs, &run.driver, &ks, MassScheme::Euler).unwrap();
        let csv = filter_report_csv(&run, &j, &[TestFunction::coordinate(1, 0)]).unwrap();
        assert!(csv.starts_with("t,pi_mass,j_mass,ess,est_x1\n"));
        assert_eq!(csv.lines().count(), 6);
    }
}
