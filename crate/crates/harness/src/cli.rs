//! Command-line entry point. Exit codes: 0 all verdicts pass, 1 a verdict
//! failed or a run could not complete, 2 invalid configuration or usage.

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use filterlab_core::duality::{
    as_complex, duality_report_csv, duality_run, martingale_test, orthogonality_test, reference_replicas,
    uniqueness_probe, FrequencyChoice,
};
use filterlab_core::error::{Error, Result};
use filterlab_core::export::{csv_table, fmt_float};
use filterlab_core::filter::{filter_report_csv, ks_filter, ks_path, mass_process, zakai_residual, FilterOptions, MassScheme};
use filterlab_core::gridpde::{initial_density, zakai_fd_solve};
use filterlab_core::model::ScenarioSpec;
use filterlab_core::pinv::{penrose_suite, SuiteConfig};
use filterlab_core::sde::simulate_joint;

use crate::acceptance::{evaluate, run_criterion, stat, Finding, Outcome, Scale, GRID_TOLERANCE};
use crate::config::{load_config, ConfigError, ExperimentConfig, ScenarioChoice, Solver};
use crate::report::{write_report, Table};

pub const WORKERS_ENV: &str = "FILTERLAB_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "filterlab", version, about = "Nonlinear filtering experiments")]
struct Cli {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for CSV tables and summary.json.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (falls back to FILTERLAB_WORKERS, then all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    scenario: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate joint signal/observation paths.
    Simulate,
    /// Run the particle filter with Zakai and mass diagnostics.
    Filter,
    /// Solve the Zakai equation on a 1-D grid.
    ZakaiGrid,
    /// Duality gap, martingale, orthogonality and uniqueness checks.
    Duality,
    /// Moore-Penrose property suite.
    PinvTest {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
    },
    /// Run the acceptance criteria.
    Accept {
        #[arg(long, value_enum)]
        scale: Option<ScaleArg>,
        /// Comma-separated criterion numbers.
        #[arg(long, value_delimiter = ',')]
        criteria: Option<Vec<u32>>,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum ScaleArg {
    Full,
    Smoke,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Filter => "filter",
            Command::ZakaiGrid => "zakai-grid",
            Command::Duality => "duality",
            Command::PinvTest { .. } => "pinv-test",
            Command::Accept { .. } => "accept",
        }
    }
}

fn resolve_workers(cli: Option<usize>, config: Option<usize>) -> std::result::Result<Option<usize>, ConfigError> {
    let env_err = |m: String| ConfigError {
        origin: WORKERS_ENV.into(),
        line: None,
        message: m,
    };
    if let Some(w) = cli.or(config) {
        return Ok(Some(w));
    }
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(0) | Err(_) => Err(env_err(format!("expected a positive integer, got `{v}`"))),
            Ok(w) => Ok(Some(w)),
        },
        Err(_) => Ok(None),
    }
}

fn build_config(cli: &Cli) -> std::result::Result<ExperimentConfig, ConfigError> {
    let mut config = match &cli.config {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(o) = &cli.out {
        config.out = o.display().to_string();
    }
    if let Some(s) = &cli.scenario {
        config.scenario = match &config.scenario {
            ScenarioChoice::Table(t) => {
                let mut t = t.clone();
                t.name = s.clone();
                ScenarioChoice::Table(t)
            }
            ScenarioChoice::Name(_) => ScenarioChoice::Name(s.clone()),
        };
    }
    if cli.workers == Some(0) {
        return Err(ConfigError {
            origin: "--workers".into(),
            line: None,
            message: "workers must be at least 1".into(),
        });
    }
    if let Command::Accept { scale, criteria } = &cli.command {
        if let Some(s) = scale {
            config.accept.scale = match s {
                ScaleArg::Full => Scale::Full,
                ScaleArg::Smoke => Scale::Smoke,
            };
        }
        if let Some(c) = criteria {
            config.accept.criteria = c.clone();
        }
    }
    config.validate().map_err(|(_, message)| ConfigError {
        origin: "command line".into(),
        line: None,
        message,
    })?;
    config.workers = resolve_workers(cli.workers, config.workers)?;
    Ok(config)
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let config = match build_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("configuration error: {e}");
            return 2;
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = config.workers {
        builder = builder.num_threads(w);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("cannot start worker pool: {e}");
            return 1;
        }
    };
    let outcomes = pool.install(|| run_command(&cli.command, &config));
    let out = PathBuf::from(&config.out);
    if let Err(e) = write_report(&out, &config, cli.command.name(), &outcomes) {
        eprintln!("cannot write report to {}: {e}", out.display());
        return 1;
    }
    let failed: Vec<&str> = outcomes
        .iter()
        .filter(|o| !o.verdict.passed)
        .map(|o| o.verdict.name.as_str())
        .collect();
    if failed.is_empty() {
        0
    } else {
        for name in failed {
            eprintln!("FAILED: {name}");
        }
        1
    }
}

pub fn verdict_line(o: &Outcome) -> String {
    format!(
        "{} [{}] {} ({:.1} s) {}",
        if o.verdict.passed { "PASS" } else { "FAIL" },
        o.verdict.id,
        o.verdict.name,
        o.elapsed.as_secs_f64(),
        o.verdict.note
    )
}

fn report(o: Outcome) -> Outcome {
    println!("{}", verdict_line(&o));
    let _ = std::io::stdout().flush();
    o
}

fn run_command(command: &Command, config: &ExperimentConfig) -> Vec<Outcome> {
    match command {
        Command::Simulate => vec![report(evaluate(1, "simulate", "sde::simulate_joint", "signal and observation SDEs", || {
            simulate(config)
        }))],
        Command::Filter => vec![report(evaluate(1, "filter", "filter::ks_filter, filter::zakai_residual", "weighted particle approximation of the Zakai equation", || {
            filter(config)
        }))],
        Command::ZakaiGrid => vec![report(evaluate(1, "zakai_grid", "gridpde::zakai_fd_solve", "Zakai equation in density form", || {
            zakai_grid(config)
        }))],
        Command::Duality => duality(config),
        Command::PinvTest { trials } => vec![report(evaluate(1, "penrose_suite", "pinv::penrose_suite", "Moore-Penrose identities and projector norm", || {
            pinv_test(config, *trials)
        }))],
        Command::Accept { .. } => config
            .accept
            .criteria
            .iter()
            .map(|&id| report(run_criterion(id, config.seed, config.accept.scale)))
            .collect(),
    }
}

fn spec_of(config: &ExperimentConfig) -> Result<ScenarioSpec> {
    config.spec().map_err(Error::Configuration)
}

fn simulate(config: &ExperimentConfig) -> Result<Finding> {
    let spec = spec_of(config)?;
    let n = spec.n_steps();
    let mut f = Finding::new(true, Vec::new(), format!("{} path(s) of `{}`", config.replicas, spec.name));
    let mut finals = Vec::new();
    for r in 0..config.replicas as u64 {
        let b = simulate_joint(&spec, r)?;
        finals.push(b.x.row(n)[0]);
        f.tables.push(Table::new(format!("paths_{r}.csv"), b.to_csv()));
    }
    f.statistics.push(stat("replicas", finals.len() as f64));
    f.statistics.push(stat("mean_final_x1", filterlab_core::stats::mean(&finals)));
    Ok(f)
}

fn filter(config: &ExperimentConfig) -> Result<Finding> {
    let spec = spec_of(config)?;
    let truth = simulate_joint(&spec, 0)?;
    let run = ks_filter(&spec, &truth.obs, 0, FilterOptions::default())?;
    let phis = config.test_functions();
    let ks = ks_path(&run)?;
    let j = mass_process(&spec.coeffs, &run.obs, &run.driver, &ks, MassScheme::Euler)?;
    let res = zakai_residual(&run, &phis)?;
    let exploded = run.exploded.iter().filter(|e| e.is_some()).count();
    let mut stats = vec![
        stat("particles", spec.n_particles as f64),
        stat("exploded", exploded as f64),
        stat("final_ess", *run.ess.last().expect("non-empty")),
        stat("final_mass", *run.mass.values.last().expect("non-empty")),
    ];
    for r in &res {
        let sto = r.stochastic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        stats.push(stat(format!("{}_max_residual", r.name), r.max_abs()));
        stats.push(stat(format!("{}_max_stochastic_term", r.name), sto));
    }
    let mut header = vec!["t".to_string()];
    for r in &res {
        header.push(format!("residual_{}", r.name));
        header.push(format!("stochastic_{}", r.name));
    }
    let rows = (0..=run.grid.n_steps).map(|n| {
        let mut row = vec![run.grid.time(n)];
        for r in &res {
            row.push(r.residual[n]);
            row.push(r.stochastic[n]);
        }
        row
    });
    let mut f = Finding::new(exploded == 0, stats, format!("`{}` with {} particles", spec.name, spec.n_particles));
    f.tables.push(Table::new("filter.csv", filter_report_csv(&run, &j, &phis)?));
    f.tables.push(Table::new("residual.csv", csv_table(&header, rows)));
    f.tables.push(Table::new("ensemble_T.csv", run.final_ensemble().to_csv()));
    Ok(f)
}

fn zakai_grid(config: &ExperimentConfig) -> Result<Finding> {
    let spec = spec_of(config)?;
    let grid = config.grid();
    let truth = simulate_joint(&spec, 0)?;
    let p0 = initial_density(&spec.initial, &grid)?;
    let dens = zakai_fd_solve(&spec.coeffs, &truth.obs, &p0, grid)?;
    let n = dens.time.n_steps;
    let mass: Vec<f64> = (0..=n).map(|k| dens.mass(k)).collect();
    let phis = config.test_functions();
    let mut stats = vec![stat("final_mass", mass[n])];
    for p in &phis {
        stats.push(stat(format!("grid_{}", p.name()), dens.integrate(n, p)));
    }
    if config.solver == Solver::Both {
        let run = ks_filter(
            &spec,
            &truth.obs,
            0,
            FilterOptions {
                record: filterlab_core::filter::Record::Endpoints,
                ..FilterOptions::default()
            },
        )?;
        for p in &phis {
            stats.push(stat(format!("particle_{}", p.name()), run.final_ensemble().integrate(p)?));
        }
    }
    let ok = mass.iter().all(|m| m.is_finite());
    let mut f = Finding::new(ok, stats, format!("{} points on [{}, {}]", grid.n_points, grid.x_min, grid.x_max));
    f.tables.push(Table::new("grid_T.csv", dens.snapshot(n)?.to_csv()));
    let rows = (0..=n).map(|k| vec![dens.time.time(k), mass[k]]);
    f.tables.push(Table::new("grid_mass.csv", csv_table(&["t".into(), "mass".into()], rows)));
    Ok(f)
}

fn pinv_test(config: &ExperimentConfig, trials: usize) -> Result<Finding> {
    let report = penrose_suite(
        config.seed,
        SuiteConfig {
            trials,
            ..SuiteConfig::default()
        },
    )?;
    let mut csv = String::from(
        "trial,rows,cols,rank,forced_deficient,penrose_oracle,penrose_minor,agreement,projector_norm,projector_idempotence,involution,verdict\n",
    );
    for (i, o) in report.outcomes.iter().enumerate() {
        let nums = [
            o.penrose_oracle,
            o.penrose_minor,
            o.agreement,
            o.projector_norm,
            o.projector_idempotence,
            o.involution,
        ]
        .map(fmt_float)
        .join(",");
        csv.push_str(&format!(
            "{i},{},{},{},{},{nums},{}\n",
            o.rows,
            o.cols,
            o.rank,
            o.forced_deficient,
            if report.passes(o) { "pass" } else { "fail" }
        ));
    }
    let n = report.outcomes.len();
    let passed = report.n_passed();
    let stats = vec![
        stat("trials", n as f64),
        stat("passed", passed as f64),
        stat("worst_agreement", report.worst(|o| o.agreement)),
    ];
    let mut f = Finding::new(passed == n, stats, format!("{passed}/{n} Penrose-identity passes"));
    f.tables.push(Table::new("pinv.csv", csv));
    Ok(f)
}

fn duality(config: &ExperimentConfig) -> Vec<Outcome> {
    let mut out = Vec::new();
    let spec = match spec_of(config) {
        Ok(s) => s,
        Err(e) => return vec![report(evaluate(1, "duality", "duality", "", || Err(e)))],
    };
    let n = spec.n_steps();
    let stride = if n % 5 == 0 { n / 5 } else { n };
    let lo = spec.dims.l_obs;
    let freqs: Result<Vec<FrequencyChoice>> = config
        .probe
        .frequencies
        .iter()
        .map(|l| FrequencyChoice::from_label(l, lo))
        .collect();
    let phis = config.test_functions();
    let grid = config.grid();
    let replicas = reference_replicas(&spec, config.replicas, stride);

    out.push(report(evaluate(1, "duality_gap", "duality::duality_run", "E[theta_T pi_T(phi)] = E[pi_0(u_0)]", || {
        let reps = replicas.as_ref().map_err(Clone::clone)?;
        let mut gaps = Vec::new();
        for f in freqs.as_ref().map_err(Clone::clone)? {
            for p in &phis {
                gaps.push(duality_run(&spec, reps, f, p, grid)?.gap());
            }
        }
        let ok = gaps.iter().all(|g| g.passes(GRID_TOLERANCE));
        let stats = vec![
            stat("rows", gaps.len() as f64),
            stat("max_gap", gaps.iter().map(|g| g.gap).fold(0.0, f64::max)),
        ];
        let mut f = Finding::new(ok, stats, "every |gap| <= 3 SE + 0.02");
        f.tables.push(Table::new("duality.csv", duality_report_csv(&gaps, GRID_TOLERANCE)));
        Ok(f)
    })));
    out.push(report(evaluate(2, "mass_martingale", "duality::martingale_test", "pi_t(1) is a martingale under the reference measure", || {
        let reps = replicas.as_ref().map_err(Clone::clone)?;
        let mass: Vec<Vec<f64>> = reps
            .iter()
            .map(|r| r.ensembles.iter().map(|e| e.mass()).collect())
            .collect();
        let t = martingale_test(&as_complex(&mass))?;
        Ok(Finding::new(t.passes(), vec![stat("max_abs_z", t.max_abs_z)], "max |z| <= 3"))
    })));
    drop(replicas);
    out.push(report(evaluate(3, "orthogonality", "duality::orthogonality_test", "theta is orthogonal to the unobserved noise", || {
        let f = freqs
            .as_ref()
            .map_err(Clone::clone)?
            .iter()
            .find(|f| f.sup_norm() > 0.0)
            .cloned()
            .unwrap_or(FrequencyChoice::constant(1.0, lo)?);
        let t = orthogonality_test(&spec, &spec.coeffs.h2, &f, config.replicas)?;
        let stats = vec![
            stat("z", t.z()),
            stat("unprojected_re", t.unprojected.mean.re),
            stat("unprojected_im", t.unprojected.mean.im),
        ];
        Ok(Finding::new(t.passes(), stats, format!("frequency `{}`", f.label)))
    })));
    if config.solver != Solver::Particle {
        out.push(report(evaluate(4, "uniqueness_probe", "duality::uniqueness_probe", "particle and grid solutions agree on the exponential test family", || {
            let entries = uniqueness_probe(&spec, config.replicas, &phis, freqs.as_ref().map_err(Clone::clone)?, grid)?;
            let ok = entries.iter().all(|e| e.passes(GRID_TOLERANCE));
            let stats = vec![
                stat("rows", entries.len() as f64),
                stat("max_diff", entries.iter().map(|e| e.diff).fold(0.0, f64::max)),
            ];
            Ok(Finding::new(ok, stats, "every |particle - grid| <= 3 SE + 0.02"))
        })));
    }
    out
}
