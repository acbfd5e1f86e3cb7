//! The ten acceptance criteria, each a self-contained experiment with a
//! pass/fail verdict and the statistics behind it.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use filterlab_core::duality::{
    as_complex, default_frequencies, duality_report_csv, duality_run, martingale_test, orthogonality_test,
    reference_replicas, theta_pi_u_samples, uniqueness_probe, FrequencyChoice, ProbeEntry, ReferenceReplica,
};
use filterlab_core::export::fmt_float;
use filterlab_core::filter::{
    ks_filter, ks_path, mass_process, zakai_residual, FilterOptions, FilterRun, MassScheme, Record,
};
use filterlab_core::gridpde::{
    dual_backward_solve, ito_check, FieldPath, Grid1D, GridField, ItoIntegrands, MeasurePath,
};
use filterlab_core::kalman::kalman_bucy;
use filterlab_core::model::{self, ScenarioSpec, TestFunction};
use filterlab_core::pinv::{penrose_suite, SuiteConfig};
use filterlab_core::rng::{stream, uniform, Role};
use filterlab_core::sde::{simulate_joint, ObservationPath, TimeGrid};
use filterlab_core::stats::{mean_se, pairwise_sum};
use filterlab_core::error::{Error, Result};

use crate::report::{self, Table};
use crate::config::ExperimentConfig;

/// Tolerance added to `3·SE` for the duality and uniqueness tables.
pub const GRID_TOLERANCE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// Sizes stated by the criteria.
    #[default]
    Full,
    /// A few seconds per criterion; verdicts are not meaningful.
    Smoke,
}

/// Monte Carlo sizes for every criterion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sizes {
    pub pinv_trials: usize,
    pub collapse_particles: usize,
    pub collapse_prior: usize,
    pub kalman_particles: usize,
    pub kalman_bootstrap: usize,
    pub mass_replicas: usize,
    pub mass_particles: usize,
    pub residual_replicas: usize,
    /// Particles at the finest step; quartered with each coarsening.
    pub residual_particles: usize,
    pub ito_replicas: usize,
    pub ito_particles: usize,
    /// The dual-field family is cheap and noisier, so it gets its own sizes.
    pub ito_dual_replicas: usize,
    pub ito_dual_particles: usize,
    pub duality_replicas: usize,
    pub duality_particles: usize,
    pub duality_points: usize,
    pub martingale_replicas: usize,
    pub martingale_particles: usize,
    pub probe_replicas: usize,
    pub probe_particles: usize,
    pub probe_points: usize,
}

impl Sizes {
    pub fn of(scale: Scale) -> Self {
        match scale {
            Scale::Full => Self {
                pinv_trials: 1000,
                collapse_particles: 10_000,
                collapse_prior: 10_000,
                kalman_particles: 10_000,
                kalman_bootstrap: 200,
                mass_replicas: 20,
                mass_particles: 1000,
                residual_replicas: 20,
                residual_particles: 4000,
                ito_replicas: 12,
                ito_particles: 4000,
                ito_dual_replicas: 32,
                ito_dual_particles: 2000,
                duality_replicas: 10_000,
                duality_particles: 8,
                duality_points: 401,
                martingale_replicas: 10_000,
                martingale_particles: 8,
                probe_replicas: 2000,
                probe_particles: 64,
                probe_points: 201,
            },
            Scale::Smoke => Self {
                pinv_trials: 50,
                collapse_particles: 200,
                collapse_prior: 200,
                kalman_particles: 200,
                kalman_bootstrap: 20,
                mass_replicas: 2,
                mass_particles: 100,
                residual_replicas: 2,
                residual_particles: 320,
                ito_replicas: 2,
                ito_particles: 320,
                ito_dual_replicas: 2,
                ito_dual_particles: 320,
                duality_replicas: 100,
                duality_particles: 4,
                duality_points: 201,
                martingale_replicas: 100,
                martingale_particles: 4,
                probe_replicas: 100,
                probe_particles: 8,
                probe_points: 201,
            },
        }
    }
}

/// One named number behind a verdict.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Statistic {
    pub name: String,
    #[serde(serialize_with = "report::float17")]
    pub value: f64,
}

pub fn stat(name: impl Into<String>, value: f64) -> Statistic {
    Statistic {
        name: name.into(),
        value,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub id: u32,
    pub name: String,
    /// Library operation exercised.
    pub operation: String,
    /// The identity or property being checked.
    pub anchor: String,
    pub passed: bool,
    pub statistics: Vec<Statistic>,
    pub note: String,
}

/// A verdict plus any CSV tables it produced.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub verdict: Verdict,
    pub tables: Vec<Table>,
    pub elapsed: Duration,
}

struct Meta {
    name: &'static str,
    operation: &'static str,
    anchor: &'static str,
    budget_s: f64,
}

const META: [Meta; 10] = [
    Meta {
        name: "penrose_suite",
        operation: "pinv::penrose_suite",
        anchor: "Moore-Penrose identities and projector norm",
        budget_s: 30.0,
    },
    Meta {
        name: "degenerate_collapse",
        operation: "filter::ks_filter, filter::zakai_residual",
        anchor: "k = 0 filter equals the prior law",
        budget_s: 120.0,
    },
    Meta {
        name: "kalman_bucy_oracle",
        operation: "filter::ks_filter, kalman::kalman_bucy",
        anchor: "linear Gaussian filter equals Kalman-Bucy",
        budget_s: 120.0,
    },
    Meta {
        name: "mass_equivalence",
        operation: "filter::ks_path, filter::mass_process",
        anchor: "total mass process converts the normalised filter into the unnormalised one",
        budget_s: 120.0,
    },
    Meta {
        name: "zakai_weak_residual",
        operation: "filter::zakai_residual",
        anchor: "weak form of the Zakai equation",
        budget_s: 180.0,
    },
    Meta {
        name: "ito_formula",
        operation: "gridpde::ito_check",
        anchor: "Ito formula for measure-valued paths paired with random fields",
        budget_s: 120.0,
    },
    Meta {
        name: "duality_identity",
        operation: "duality::duality_run",
        anchor: "E[theta_T pi_T(phi)] = E[pi_0(u_0)] for the backward dual system",
        budget_s: 600.0,
    },
    Meta {
        name: "martingale_orthogonality",
        operation: "duality::martingale_test, duality::orthogonality_test",
        anchor: "martingale property and orthogonality to the unobserved noise",
        budget_s: 300.0,
    },
    Meta {
        name: "uniqueness_probe",
        operation: "duality::uniqueness_probe",
        anchor: "particle and grid solutions agree on the exponential test family",
        budget_s: 600.0,
    },
    Meta {
        name: "reproducibility",
        operation: "harness accept",
        anchor: "same seed gives byte-identical summaries for any worker count",
        budget_s: f64::INFINITY,
    },
];

pub const ALL: [u32; 10] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10];

pub fn criterion_name(id: u32) -> &'static str {
    META[(id - 1) as usize].name
}

/// Wall-clock budget of a criterion in seconds.
pub fn budget(id: u32) -> f64 {
    META[(id - 1) as usize].budget_s
}

/// Runs `f` and wraps its finding, or its error, into a timed verdict.
pub fn evaluate(
    id: u32,
    name: &str,
    operation: &str,
    anchor: &str,
    f: impl FnOnce() -> Result<Finding>,
) -> Outcome {
    let start = Instant::now();
    let (passed, statistics, note, tables) = match f() {
        Ok(b) => (b.passed, b.statistics, b.note, b.tables),
        Err(e) => (false, Vec::new(), format!("error: {e}"), Vec::new()),
    };
    Outcome {
        verdict: Verdict {
            id,
            name: name.to_string(),
            operation: operation.to_string(),
            anchor: anchor.to_string(),
            passed,
            statistics,
            note,
        },
        tables,
        elapsed: start.elapsed(),
    }
}

/// Runs criterion `id` (1–10). Errors become failed verdicts; no verdict is
/// ever missing.
pub fn run_criterion(id: u32, seed: u64, scale: Scale) -> Outcome {
    assert!((1..=10).contains(&id), "criterion {id} does not exist");
    let meta = &META[(id - 1) as usize];
    let sizes = Sizes::of(scale);
    evaluate(id, meta.name, meta.operation, meta.anchor, || match id {
        1 => penrose(seed, &sizes),
        2 => collapse(seed, &sizes),
        3 => kalman(seed, &sizes),
        4 => mass_equivalence(seed, &sizes),
        5 => weak_residual(seed, &sizes),
        6 => ito(seed, &sizes),
        7 => duality(seed, &sizes),
        8 => martingales(seed, &sizes),
        9 => probe(seed, &sizes),
        _ => reproducibility(seed),
    })
}

/// Result of one check before it becomes a [`Verdict`].
pub struct Finding {
    pub passed: bool,
    pub statistics: Vec<Statistic>,
    pub note: String,
    pub tables: Vec<Table>,
}

impl Finding {
    pub fn new(passed: bool, statistics: Vec<Statistic>, note: impl Into<String>) -> Self {
        Self {
            passed,
            statistics,
            note: note.into(),
            tables: Vec::new(),
        }
    }
}

fn phis(names: &[&str]) -> Vec<TestFunction> {
    names
        .iter()
        .map(|n| TestFunction::by_name(n, 1).expect("known test function"))
        .collect()
}

fn record_all() -> FilterOptions {
    FilterOptions::default()
}

fn endpoints() -> FilterOptions {
    FilterOptions {
        record: Record::Endpoints,
        ..FilterOptions::default()
    }
}

fn penrose(seed: u64, s: &Sizes) -> Result<Finding> {
    let config = SuiteConfig {
        trials: s.pinv_trials,
        ..SuiteConfig::default()
    };
    let report = penrose_suite(seed, config)?;
    let n = report.outcomes.len();
    let passed = report.n_passed();
    let stats = vec![
        stat("trials", n as f64),
        stat("passed", passed as f64),
        stat("rank_deficient", report.n_deficient() as f64),
        stat("worst_penrose_oracle", report.worst(|o| o.penrose_oracle)),
        stat("worst_penrose_minor", report.worst(|o| o.penrose_minor)),
        stat("worst_agreement", report.worst(|o| o.agreement)),
        stat("worst_projector_norm", report.worst(|o| o.projector_norm)),
    ];
    Ok(Finding::new(passed == n, stats, format!("{passed}/{n} trials satisfy every identity")))
}

/// `(mean, se)` of `π(φ)` from the terms `N·wᵢ·φ(xᵢ)`.
fn particle_mean_se(run: &FilterRun, n: usize, phi: &TestFunction) -> (f64, f64) {
    let ens = run.ensemble(n).expect("recorded step");
    let w = ens.weights();
    let terms: Vec<f64> = (0..ens.len())
        .map(|i| ens.len() as f64 * w[i] * phi.value(ens.point(i)))
        .collect();
    mean_se(&terms)
}

fn collapse(seed: u64, s: &Sizes) -> Result<Finding> {
    let spec = model::degenerate_k0()
        .with_dt(1e-3)
        .with_particles(s.collapse_particles)
        .with_seed(seed);
    let n = spec.n_steps();
    let truth = simulate_joint(&spec, 0)?;
    let run = ks_filter(&spec, &truth.obs, 0, record_all())?;
    let fs = phis(&["x", "sin", "tanh"]);
    // Independent prior sample: signal paths of other replicas.
    let prior: Vec<(f64, f64)> = (1..=s.collapse_prior as u64)
        .into_par_iter()
        .map(|r| {
            let b = simulate_joint(&spec, r)?;
            Ok((b.x.row(n / 2)[0], b.x.row(n)[0]))
        })
        .collect::<Result<_>>()?;
    let mut stats = Vec::new();
    let mut ok = true;
    for (k, step) in [n / 2, n].into_iter().enumerate() {
        let label = if k == 0 { "half" } else { "end" };
        for phi in &fs {
            let (pm, pse) = particle_mean_se(&run, step, phi);
            let vals: Vec<f64> = prior
                .iter()
                .map(|p| phi.value(&[if k == 0 { p.0 } else { p.1 }]))
                .collect();
            let (mm, mse) = mean_se(&vals);
            let se = pse.hypot(mse);
            let z = (pm - mm).abs() / se;
            ok &= z <= 3.0;
            stats.push(stat(format!("{}_{label}_filter", phi.name()), pm));
            stats.push(stat(format!("{}_{label}_prior", phi.name()), mm));
            stats.push(stat(format!("{}_{label}_z", phi.name()), z));
        }
    }
    let res = zakai_residual(&run, &fs)?;
    let sto = res
        .iter()
        .flat_map(|r| r.stochastic.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    stats.push(stat("max_abs_stochastic_term", sto));
    ok &= sto == 0.0;
    Ok(Finding::new(ok, stats, "filter vs independent prior Monte Carlo within 3 combined SE"))
}

fn weighted_moments(points: &[f64], w: &[f64]) -> (f64, f64) {
    let total = pairwise_sum(w);
    let m = pairwise_sum(&points.iter().zip(w).map(|(x, w)| x * w).collect::<Vec<_>>()) / total;
    let v = pairwise_sum(&points.iter().zip(w).map(|(x, w)| (x - m) * (x - m) * w).collect::<Vec<_>>()) / total;
    (m, v)
}

fn kalman(seed: u64, s: &Sizes) -> Result<Finding> {
    let spec = model::linear_gaussian()
        .with_dt(1e-3)
        .with_particles(s.kalman_particles)
        .with_seed(seed);
    let n = spec.n_steps();
    let truth = simulate_joint(&spec, 0)?;
    let run = ks_filter(&spec, &truth.obs, 0, endpoints())?;
    let ens = run.final_ensemble();
    let w = ens.weights();
    let (m, v) = weighted_moments(ens.points(), &w);
    let kb = kalman_bucy(spec.linear.as_ref().expect("linear scenario"), &truth.obs)?;
    let (km, kv) = (kb.mean.row(n)[0], kb.cov[n][(0, 0)]);
    let np = ens.len();
    let boot: Vec<(f64, f64)> = (0..s.kalman_bootstrap as u64)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream(seed, 0, b, Role::Bootstrap);
            let mut pts = Vec::with_capacity(np);
            let mut ws = Vec::with_capacity(np);
            for _ in 0..np {
                let i = ((uniform(&mut rng) * np as f64) as usize).min(np - 1);
                pts.push(ens.point(i)[0]);
                ws.push(w[i]);
            }
            weighted_moments(&pts, &ws)
        })
        .collect();
    let sd = |v: Vec<f64>| {
        let (mu, _) = mean_se(&v);
        let ss: Vec<f64> = v.iter().map(|x| (x - mu) * (x - mu)).collect();
        (pairwise_sum(&ss) / (v.len() as f64 - 1.0)).sqrt()
    };
    let se_m = sd(boot.iter().map(|b| b.0).collect());
    let se_v = sd(boot.iter().map(|b| b.1).collect());
    let ok = (m - km).abs() <= 3.0 * se_m + 0.05 && (v - kv).abs() <= 3.0 * se_v + 0.05;
    let stats = vec![
        stat("filter_mean", m),
        stat("kalman_mean", km),
        stat("bootstrap_se_mean", se_m),
        stat("filter_variance", v),
        stat("kalman_variance", kv),
        stat("bootstrap_se_variance", se_v),
    ];
    Ok(Finding::new(ok, stats, "|error| <= 3 bootstrap SE + 0.05 at T"))
}

/// Observation paths at the finest step, shared by every coarser step.
fn fine_observations(spec: &ScenarioSpec, replicas: usize) -> Result<Vec<ObservationPath>> {
    (0..replicas as u64)
        .into_par_iter()
        .map(|r| Ok(simulate_joint(spec, r)?.obs))
        .collect()
}

fn mass_equivalence(seed: u64, s: &Sizes) -> Result<Finding> {
    let base = model::linear_gaussian().with_seed(seed).with_dt(1e-3);
    let obs = fine_observations(&base, s.mass_replicas)?;
    let mut err = [0.0; 2];
    let mut worst_norm = 0.0f64;
    for (k, (dt, factor)) in [(1e-3, 1usize), (4e-3, 4)].into_iter().enumerate() {
        let spec = base.clone().with_dt(dt).with_particles(s.mass_particles);
        let per: Vec<(f64, f64)> = obs
            .iter()
            .enumerate()
            .map(|(r, o)| {
                let o = o.coarsen(factor)?;
                let run = ks_filter(&spec, &o, r as u64, record_all())?;
                let ks = ks_path(&run)?;
                let norm = ks.iter().fold(0.0f64, |m, e| m.max((e.mass() - 1.0).abs()));
                let j = mass_process(&spec.coeffs, &run.obs, &run.driver, &ks, MassScheme::Euler)?;
                let rel = j
                    .values
                    .iter()
                    .zip(&run.mass.values)
                    .fold(0.0f64, |m, (j, p)| m.max((j - p).abs() / p));
                Ok((rel, norm))
            })
            .collect::<Result<_>>()?;
        err[k] = mean_se(&per.iter().map(|p| p.0).collect::<Vec<_>>()).0;
        worst_norm = per.iter().fold(worst_norm, |m, p| m.max(p.1));
    }
    let ratio = err[1] / err[0];
    // A few ulps of a pairwise sum over the particles.
    let ok = worst_norm <= 1e-13 && err[0] <= 0.05 && (1.5..=3.0).contains(&ratio);
    let stats = vec![
        stat("max_normalised_mass_defect", worst_norm),
        stat("relative_error_dt_1e-3", err[0]),
        stat("relative_error_dt_4e-3", err[1]),
        stat("error_ratio", ratio),
    ];
    Ok(Finding::new(ok, stats, "mean over replicas of max_t |j - pi(1)| / pi(1)"))
}

/// Refinement levels: `(dt, coarsening factor, particle divisor)`. The
/// residuals of particle measures are dominated by Monte Carlo error, so the
/// particle count grows like `1/dt²` to keep it in step with a first-order
/// time error.
const LEVELS: [(f64, usize, usize); 3] = [(4e-3, 4, 16), (2e-3, 2, 4), (1e-3, 1, 1)];

fn weak_residual(seed: u64, s: &Sizes) -> Result<Finding> {
    let base = model::correlated_bounded().with_seed(seed).with_dt(1e-3);
    let obs = fine_observations(&base, s.residual_replicas)?;
    let fs = phis(&["sin", "tanh", "bump"]);
    // err[level][phi]
    let mut err = vec![vec![0.0; fs.len()]; LEVELS.len()];
    for (l, (dt, factor, div)) in LEVELS.into_iter().enumerate() {
        let spec = base.clone().with_dt(dt).with_particles(s.residual_particles / div);
        let mut per = vec![Vec::new(); fs.len()];
        for (r, o) in obs.iter().enumerate() {
            let run = ks_filter(&spec, &o.coarsen(factor)?, r as u64, record_all())?;
            for (k, res) in zakai_residual(&run, &fs)?.iter().enumerate() {
                per[k].push(res.max_abs());
            }
        }
        for k in 0..fs.len() {
            err[l][k] = mean_se(&per[k]).0;
        }
    }
    let mut stats = Vec::new();
    let mut ok = true;
    for (k, phi) in fs.iter().enumerate() {
        for (l, (dt, _, _)) in LEVELS.iter().enumerate() {
            stats.push(stat(format!("{}_max_residual_dt_{dt:e}", phi.name()), err[l][k]));
        }
        for l in 0..LEVELS.len() - 1 {
            let ratio = err[l][k] / err[l + 1][k];
            ok &= (1.2..=3.0).contains(&ratio);
            stats.push(stat(format!("{}_ratio_{}", phi.name(), l + 1), ratio));
        }
    }
    Ok(Finding::new(
        ok,
        stats,
        "mean over replicas of max_t |R(t)|; particles grow like 1/dt^2",
    ))
}

fn exp_decay(time: &TimeGrid, sign: f64) -> Vec<f64> {
    time.times().iter().map(|t| sign * (-t).exp()).collect()
}

fn ito(seed: u64, s: &Sizes) -> Result<Finding> {
    let levels = &LEVELS[1..];
    let corr = model::correlated_bounded().with_seed(seed).with_dt(1e-3);
    let dec = model::decoupled_classical().with_seed(seed).with_dt(1e-3);
    let corr_obs = fine_observations(&corr, s.ito_replicas)?;
    let dec_obs = fine_observations(&dec, s.ito_dual_replicas)?;
    let grid = Grid1D::new(-8.0, 8.0, 401)?;
    let tanh = TestFunction::by_name("tanh", 1).expect("known");
    let one = FrequencyChoice::constant(1.0, 1)?;
    let names = ["static", "time_scaled", "dual_field"];
    // err[level][family]
    let mut err = vec![[0.0; 3]; levels.len()];
    for (l, &(dt, factor, div)) in levels.iter().enumerate() {
        let cs = corr.clone().with_dt(dt).with_particles(s.ito_particles / div);
        let ds = dec.clone().with_dt(dt).with_particles(s.ito_dual_particles / div);
        let time = TimeGrid::from_spec(&cs)?;
        let lo = cs.dims.l_obs;
        let fixed = ItoIntegrands::static_field(TestFunction::by_name("sin", 1).expect("known"), lo);
        let scaled = ItoIntegrands {
            u: FieldPath::Scaled {
                phi: tanh.clone(),
                scale: exp_decay(&time, 1.0),
            },
            sigma: FieldPath::Scaled {
                phi: tanh.clone(),
                scale: exp_decay(&time, -1.0),
            },
            lambda: vec![FieldPath::Zero; lo],
        };
        let r = one.on_grid(&time)?;
        let sol = dual_backward_solve(&ds.coeffs, &r, &tanh, grid, time)?;
        let sigma = sol.sigma(&ds.coeffs)?;
        let dual = ItoIntegrands {
            u: FieldPath::Grid(GridField::new(sol.u.clone())?),
            sigma: FieldPath::Grid(GridField::new(sigma)?),
            lambda: vec![FieldPath::Zero; ds.dims.l_obs],
        };
        let mut per = [Vec::new(), Vec::new(), Vec::new()];
        for (rep, co) in corr_obs.iter().enumerate() {
            let run = ks_filter(&cs, &co.coarsen(factor)?, rep as u64, record_all())?;
            let mu = MeasurePath::Particles(&run.ensembles);
            per[0].push(ito_check(&cs.coeffs, &run.obs, &run.driver, mu, &fixed)?.max_abs());
            per[1].push(ito_check(&cs.coeffs, &run.obs, &run.driver, mu, &scaled)?.max_abs());
        }
        for (rep, dobs) in dec_obs.iter().enumerate() {
            let run = ks_filter(&ds, &dobs.coarsen(factor)?, rep as u64, record_all())?;
            let mu = MeasurePath::Particles(&run.ensembles);
            per[2].push(ito_check(&ds.coeffs, &run.obs, &run.driver, mu, &dual)?.max_abs());
        }
        for f in 0..3 {
            err[l][f] = mean_se(&per[f]).0;
        }
    }
    let mut stats = Vec::new();
    let mut ok = true;
    for (f, name) in names.iter().enumerate() {
        let ratio = err[0][f] / err[1][f];
        ok &= err[1][f] <= 0.05 && (1.2..=3.0).contains(&ratio);
        stats.push(stat(format!("{name}_residual_dt_2e-3"), err[0][f]));
        stats.push(stat(format!("{name}_residual_dt_1e-3"), err[1][f]));
        stats.push(stat(format!("{name}_ratio"), ratio));
    }
    Ok(Finding::new(ok, stats, "mean over replicas of max_t |Ito residual|"))
}

/// `[m − 6s, m + 6s]` from the pooled particle positions, widened to cover
/// every particle with a margin.
fn padded_domain(replicas: &[ReferenceReplica]) -> Result<Grid1D> {
    padded_domain_points(replicas, 401)
}

fn padded_domain_points(replicas: &[ReferenceReplica], n_points: usize) -> Result<Grid1D> {
    let xs: Vec<f64> = replicas
        .iter()
        .flat_map(|r| r.ensembles.iter().flat_map(|e| e.points().iter().copied()))
        .collect();
    let (m, _) = mean_se(&xs);
    let var = pairwise_sum(&xs.iter().map(|x| (x - m) * (x - m)).collect::<Vec<_>>()) / xs.len() as f64;
    let sd = var.sqrt();
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Grid1D::new((m - 6.0 * sd).min(lo - 0.5), (m + 6.0 * sd).max(hi + 0.5), n_points)
}

fn frequencies(l_obs: usize) -> Result<Vec<FrequencyChoice>> {
    default_frequencies()
        .into_iter()
        .map(|l| FrequencyChoice::from_label(l, l_obs))
        .collect()
}

fn duality(seed: u64, s: &Sizes) -> Result<Finding> {
    let fs = phis(&["one", "tanh", "bump", "cos"]);
    let mut gaps = Vec::new();
    let mut stats = Vec::new();
    for (prefix, spec, freqs) in [
        ("", model::decoupled_classical(), None),
        ("kolmogorov:", model::decoupled_kolmogorov(), Some(vec![FrequencyChoice::zero(1)])),
    ] {
        let spec = spec.with_seed(seed).with_particles(s.duality_particles);
        let freqs = match freqs {
            Some(f) => f,
            None => frequencies(spec.dims.l_obs)?,
        };
        let replicas = reference_replicas(&spec, s.duality_replicas, spec.n_steps())?;
        let grid = padded_domain_points(&replicas, s.duality_points)?;
        stats.push(stat(format!("{prefix}domain_lo"), grid.x_min));
        stats.push(stat(format!("{prefix}domain_hi"), grid.x_max));
        for f in &freqs {
            for phi in &fs {
                let mut g = duality_run(&spec, &replicas, f, phi, grid)?.gap();
                g.r_label = format!("{prefix}{}", g.r_label);
                gaps.push(g);
            }
        }
    }
    let ok = gaps.iter().all(|g| g.passes(GRID_TOLERANCE));
    let worst = gaps
        .iter()
        .map(|g| g.gap - 3.0 * g.se())
        .fold(f64::NEG_INFINITY, f64::max);
    stats.push(stat("rows", gaps.len() as f64));
    stats.push(stat("rows_passed", gaps.iter().filter(|g| g.passes(GRID_TOLERANCE)).count() as f64));
    stats.push(stat("max_gap", gaps.iter().map(|g| g.gap).fold(0.0, f64::max)));
    stats.push(stat("max_gap_minus_3se", worst));
    let mut body = Finding::new(ok, stats, "every |gap| <= 3 SE + 0.02; table in duality.csv");
    body.tables.push(Table::new("duality.csv", duality_report_csv(&gaps, GRID_TOLERANCE)));
    Ok(body)
}

fn martingales(seed: u64, s: &Sizes) -> Result<Finding> {
    let corr = model::correlated_bounded()
        .with_seed(seed)
        .with_particles(s.martingale_particles);
    let n = corr.n_steps();
    let reps = reference_replicas(&corr, s.martingale_replicas, n / 5)?;
    let times: Vec<f64> = (0..=5).map(|k| k as f64 * corr.horizon / 5.0).collect();
    let mass: Vec<Vec<f64>> = reps
        .iter()
        .map(|r| r.ensembles.iter().map(|e| e.mass()).collect())
        .collect();
    drop(reps);
    let positive = martingale_test(&as_complex(&mass))?;
    let drifted: Vec<Vec<f64>> = mass
        .iter()
        .map(|m| m.iter().zip(&times).map(|(v, t)| v + 0.1 * t).collect())
        .collect();
    let negative = martingale_test(&as_complex(&drifted))?;

    let dec = model::decoupled_classical()
        .with_seed(seed)
        .with_particles(s.martingale_particles);
    let reps = reference_replicas(&dec, s.martingale_replicas, dec.n_steps() / 5)?;
    let grid = padded_domain(&reps)?;
    let tanh = TestFunction::by_name("tanh", 1).expect("known");
    let run = duality_run(&dec, &reps, &FrequencyChoice::constant(1.0, 1)?, &tanh, grid)?;
    let dual = martingale_test(&theta_pi_u_samples(&reps, &run)?)?;
    drop(reps);

    let kappa = corr.coeffs.h2.clone();
    let orth = orthogonality_test(&corr, &kappa, &FrequencyChoice::constant(1.0, corr.dims.l_obs)?, s.martingale_replicas)?;

    let ok = positive.passes() && dual.passes() && negative.max_abs_z >= 5.0 && orth.passes();
    let stats = vec![
        stat("mass_max_abs_z", positive.max_abs_z),
        stat("theta_pi_u_max_abs_z", dual.max_abs_z),
        stat("injected_drift_max_abs_z", negative.max_abs_z),
        stat("orthogonality_z", orth.z()),
        stat("orthogonality_re", orth.estimate.mean.re),
        stat("orthogonality_im", orth.estimate.mean.im),
        stat("unprojected_control_re", orth.unprojected.mean.re),
        stat("unprojected_control_im", orth.unprojected.mean.im),
        stat("unprojected_control_se", orth.unprojected.se()),
    ];
    Ok(Finding::new(
        ok,
        stats,
        "positive controls |z| <= 3, injected drift |z| >= 5, orthogonality |z| <= 3",
    ))
}

fn probe_csv(entries: &[ProbeEntry]) -> String {
    let mut out = String::from("r_label,phi_label,particle_re,particle_im,grid_re,grid_im,diff,se,verdict\n");
    for e in entries {
        let row = [
            e.particle.mean.re,
            e.particle.mean.im,
            e.grid.mean.re,
            e.grid.mean.im,
            e.diff,
            e.se(),
        ]
        .map(fmt_float)
        .join(",");
        let verdict = if e.passes(GRID_TOLERANCE) { "pass" } else { "fail" };
        out.push_str(&format!("\"{}\",{},{row},{verdict}\n", e.r_label, e.phi_label));
    }
    out
}

fn probe(seed: u64, s: &Sizes) -> Result<Finding> {
    let spec = model::decoupled_classical()
        .with_seed(seed)
        .with_particles(s.probe_particles);
    let grid = Grid1D::new(-8.0, 8.0, s.probe_points)?;
    let fs = phis(&["one", "tanh", "bump"]);
    let entries = uniqueness_probe(&spec, s.probe_replicas, &fs, &frequencies(1)?, grid)?;
    let ok = entries.iter().all(|e| e.passes(GRID_TOLERANCE));
    let stats = vec![
        stat("rows", entries.len() as f64),
        stat("rows_passed", entries.iter().filter(|e| e.passes(GRID_TOLERANCE)).count() as f64),
        stat("max_diff", entries.iter().map(|e| e.diff).fold(0.0, f64::max)),
        stat(
            "max_diff_minus_3se",
            entries
                .iter()
                .map(|e| e.diff - 3.0 * e.se())
                .fold(f64::NEG_INFINITY, f64::max),
        ),
    ];
    let mut body = Finding::new(ok, stats, "every |particle - grid| <= 3 SE + 0.02; table in probe.csv");
    body.tables.push(Table::new("probe.csv", probe_csv(&entries)));
    Ok(body)
}

/// Summary text of an acceptance run over criteria 1–9 at smoke scale.
pub fn smoke_summary(seed: u64, workers: usize) -> Result<String> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Configuration(e.to_string()))?;
    let mut config = ExperimentConfig::default();
    config.seed = seed;
    config.accept.scale = Scale::Smoke;
    config.accept.criteria = (1..=9).collect();
    let outcomes: Vec<Outcome> = pool.install(|| {
        config
            .accept
            .criteria
            .iter()
            .map(|&id| run_criterion(id, seed, Scale::Smoke))
            .collect()
    });
    Ok(report::summary(&config, "accept", &outcomes))
}

fn reproducibility(seed: u64) -> Result<Finding> {
    let a = smoke_summary(seed, 1)?;
    let b = smoke_summary(seed, 4)?;
    let c = smoke_summary(seed, 4)?;
    let ok = a == b && b == c;
    let stats = vec![
        stat("summary_bytes", a.len() as f64),
        stat("workers_1_vs_4_identical", (a == b) as u8 as f64),
        stat("repeat_identical", (b == c) as u8 as f64),
    ];
    Ok(Finding::new(ok, stats, "smoke-scale accept over criteria 1-9, workers 1, 4 and 4 again"))
}
