use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use filterlab_core::duality::FrequencyChoice;
use filterlab_core::filter::{ks_filter, zakai_residual, FilterOptions, Record};
use filterlab_core::gridpde::{
    dual_backward_solve, initial_density, ito_check, zakai_fd_solve, FieldPath, Grid1D, ItoIntegrands, MeasurePath,
};
use filterlab_core::model::{self, obs_fn, state_fn, InitialLaw, TestFunction};
use filterlab_core::sde::{simulate_joint, simulate_reference_obs, ObsDriver, TimeGrid};
use filterlab_core::stats::mean_se;

fn gaussian(x: f64, m: f64, v: f64) -> f64 {
    (-(x - m) * (x - m) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
}

#[test]
fn heat_kernel_spreads_without_losing_mass() {
    let mut spec = model::degenerate_k0().with_dt(5e-4).with_horizon(0.5);
    spec.coeffs.f = state_fn(|_, _, _, o| o[0] = 0.0);
    spec.coeffs.g_bar = state_fn(|_, _, _, o| o[0] = 0.0);
    spec.initial = InitialLaw::Gaussian {
        mean: vec![0.0],
        std: vec![0.1],
        y0: vec![0.0],
    };
    let grid = Grid1D::new(-8.0, 8.0, 321).unwrap();
    let obs = simulate_joint(&spec, 0).unwrap().obs;
    let p0 = initial_density(&spec.initial, &grid).unwrap();
    let sol = zakai_fd_solve(&spec.coeffs, &obs, &p0, grid).unwrap();
    let n = sol.time.n_steps;
    let leak = (sol.mass(n) - sol.mass(0)).abs();
    assert!(leak < 1e-4, "mass leak {leak}");
    let err = grid
        .nodes()
        .iter()
        .zip(&sol.p[n])
        .map(|(&x, p)| (p - gaussian(x, 0.0, 0.01 + 0.5)).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-3, "heat kernel error {err}");
}

/// Crank–Nicolson for `∂p = −f p' − f' p + ½ a p''` (non-conservative form),
/// dense LU, zero boundary values.
fn crank_nicolson(f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64, a: f64, grid: &Grid1D, p0: &[f64], dt: f64, steps: usize) -> Vec<f64> {
    let n = grid.n_points;
    let h = grid.spacing();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for i in 1..n - 1 {
        let x = grid.x(i);
        l[(i, i - 1)] = f(x) / (2.0 * h) + 0.5 * a / (h * h);
        l[(i, i)] = -df(x) - a / (h * h);
        l[(i, i + 1)] = -f(x) / (2.0 * h) + 0.5 * a / (h * h);
    }
    let id = DMatrix::<f64>::identity(n, n);
    let lhs = (&id - &l * (0.5 * dt)).lu();
    let rhs = &id + &l * (0.5 * dt);
    let mut p = DVector::from_column_slice(p0);
    p[0] = 0.0;
    p[n - 1] = 0.0;
    for _ in 0..steps {
        p = lhs.solve(&(&rhs * &p)).unwrap();
    }
    p.iter().copied().collect()
}

#[test]
fn degenerate_case_matches_fokker_planck_references() {
    // k = 0: the Zakai equation is the Fokker–Planck equation of the signal,
    // here an OU process with a = g² + ḡ² = 1.25. Both grid schemes are
    // second order in space, so their gap must shrink ~4x per halving of h.
    let m = 0.5 * (-1.0f64).exp();
    let v = 0.25 * (-2.0f64).exp() + 0.625 * (1.0 - (-2.0f64).exp());
    let mut gaps = Vec::new();
    for (points, dt) in [(321, 5e-4), (641, 1.25e-4)] {
        let spec = model::degenerate_k0().with_dt(dt);
        let grid = Grid1D::new(-8.0, 8.0, points).unwrap();
        let obs = simulate_joint(&spec, 3).unwrap().obs;
        let p0 = initial_density(&spec.initial, &grid).unwrap();
        let sol = zakai_fd_solve(&spec.coeffs, &obs, &p0, grid).unwrap();
        let n = sol.time.n_steps;
        let cn = crank_nicolson(|x| -x, |_| -1.0, 1.25, &grid, &p0, dt, n);
        gaps.push(sol.p[n].iter().zip(&cn).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        let vs_exact = grid
            .nodes()
            .iter()
            .zip(&sol.p[n])
            .map(|(&x, p)| (p - gaussian(x, m, v)).abs())
            .fold(0.0, f64::max);
        assert!(vs_exact < 1e-3, "FD vs exact OU density {vs_exact}");
    }
    assert!(gaps[1] < 2e-4, "{gaps:?}");
    assert!((3.0..=5.0).contains(&(gaps[0] / gaps[1])), "{gaps:?}");
}

#[test]
fn grid_and_particles_agree_on_correlated_scenario() {
    let spec = model::correlated_bounded().with_dt(5e-4).with_particles(20_000);
    let grid = Grid1D::new(-8.0, 8.0, 401).unwrap();
    let obs = simulate_joint(&spec, 1).unwrap().obs;
    let p0 = initial_density(&spec.initial, &grid).unwrap();
    let dens = zakai_fd_solve(&spec.coeffs, &obs, &p0, grid).unwrap();
    let opts = FilterOptions {
        record: Record::Endpoints,
        ..FilterOptions::default()
    };
    let run = ks_filter(&spec, &obs, 1, opts).unwrap();
    let ens = run.final_ensemble();
    let w = ens.weights();
    let n = dens.time.n_steps;
    for phi in [
        TestFunction::constant(1, 1.0),
        TestFunction::sin(1, 0, 1.0),
        TestFunction::tanh(1, 0, 1.0),
    ] {
        let terms: Vec<f64> = (0..ens.len())
            .map(|i| w[i] * ens.len() as f64 * phi.value(ens.point(i)))
            .collect();
        let (part, se) = mean_se(&terms);
        let g = dens.integrate(n, &phi);
        assert!((part - g).abs() <= 3.0 * se + 0.02, "{}: particle {part} ± {se}, grid {g}", phi.name());
    }
}

#[test]
fn backward_kolmogorov_matches_monte_carlo() {
    let base = model::decoupled_kolmogorov();
    let time = TimeGrid::new(base.horizon, base.dt).unwrap();
    let grid = Grid1D::new(-8.0, 8.0, 401).unwrap();
    let r = FrequencyChoice::zero(1).on_grid(&time).unwrap();
    for phi in [TestFunction::tanh(1, 0, 1.0), TestFunction::gaussian_bump(vec![0.5], 0.8)] {
        let sol = dual_backward_solve(&base.coeffs, &r, &phi, grid, time).unwrap();
        for x0 in [-1.0, 0.0, 0.7] {
            let mut spec = base.clone().with_particles(20_000);
            spec.initial = InitialLaw::Point {
                x0: vec![x0],
                y0: vec![0.0],
            };
            let (obs, _) = simulate_reference_obs(&spec, 0).unwrap();
            let opts = FilterOptions {
                record: Record::Endpoints,
                ..FilterOptions::default()
            };
            let run = ks_filter(&spec, &obs, 0, opts).unwrap();
            let ens = run.final_ensemble();
            let vals: Vec<f64> = (0..ens.len()).map(|i| phi.value(ens.point(i))).collect();
            let (mc, se) = mean_se(&vals);
            let u0 = sol.u[0].interpolate(x0).unwrap();
            assert!(
                (u0.re - mc).abs() <= 3.0 * se + 0.01,
                "{} at {x0}: grid {} vs MC {mc} ± {se}",
                phi.name(),
                u0.re
            );
            assert!(u0.im.abs() < 1e-15);
        }
    }
}

#[test]
fn dual_solver_converges_at_first_order_in_time() {
    let spec = model::decoupled_classical();
    let grid = Grid1D::new(-8.0, 8.0, 201).unwrap();
    let freq = FrequencyChoice::from_label("1,-1", 1).unwrap();
    let phi = TestFunction::gaussian_bump(vec![0.3], 1.0);
    let solve = |dt: f64| {
        let time = TimeGrid::new(1.0, dt).unwrap();
        let r = freq.on_grid(&time).unwrap();
        dual_backward_solve(&spec.coeffs, &r, &phi, grid, time).unwrap().u[0].clone()
    };
    let reference = solve(1.25e-3);
    let errs: Vec<f64> = [2e-2, 1e-2, 5e-3].iter().map(|&dt| solve(dt).max_abs_diff(&reference)).collect();
    for w in errs.windows(2) {
        let ratio = w[0] / w[1];
        assert!((1.5..=2.7).contains(&ratio), "errors {errs:?}");
    }
}

#[test]
fn static_ito_check_is_the_zakai_residual() {
    let spec = model::correlated_bounded().with_dt(1e-2).with_particles(500);
    let obs = simulate_joint(&spec, 2).unwrap().obs;
    let run = ks_filter(&spec, &obs, 2, FilterOptions::default()).unwrap();
    for phi in [TestFunction::sin(1, 0, 1.0), TestFunction::gaussian_bump(vec![0.0], 1.0)] {
        let z = zakai_residual(&run, std::slice::from_ref(&phi)).unwrap().remove(0);
        let it = ItoIntegrands::static_field(phi.clone(), spec.dims.l_obs);
        let ito = ito_check(&spec.coeffs, &obs, &run.driver, MeasurePath::Particles(&run.ensembles), &it).unwrap();
        for n in 0..z.residual.len() {
            assert!((ito.residual[n].re - z.residual[n]).abs() < 1e-12, "{} step {n}", phi.name());
            assert_eq!(ito.residual[n].im, 0.0);
        }
    }
}

#[test]
fn ito_check_on_grid_densities() {
    // Grid densities as the measure path, scaled test function as u.
    let spec = model::correlated_bounded().with_dt(5e-4).with_horizon(0.5);
    let grid = Grid1D::new(-8.0, 8.0, 401).unwrap();
    let obs = simulate_joint(&spec, 4).unwrap().obs;
    let p0 = initial_density(&spec.initial, &grid).unwrap();
    let dens = zakai_fd_solve(&spec.coeffs, &obs, &p0, grid).unwrap();
    let driver = ObsDriver::new(&spec.coeffs, &obs).unwrap();
    let times = dens.time.times();
    let phi = TestFunction::cos(1, 0, 1.0);
    let it = ItoIntegrands {
        u: FieldPath::Scaled {
            phi: phi.clone(),
            scale: times.iter().map(|t| 1.0 + t * t).collect(),
        },
        sigma: FieldPath::Scaled {
            phi,
            scale: times.iter().map(|t| 2.0 * t).collect(),
        },
        lambda: vec![FieldPath::Zero; spec.dims.l_obs],
    };
    let res = ito_check(&spec.coeffs, &obs, &driver, MeasurePath::Grid(&dens), &it).unwrap();
    assert!(res.max_abs() < 0.02, "{}", res.max_abs());
    assert_eq!(res.lhs[0], Complex64::new(0.0, 0.0));
}

#[test]
fn coupled_observation_noise_keeps_mass_when_h2_vanishes() {
    let mut spec = model::correlated_bounded().with_dt(5e-4).with_horizon(0.5);
    spec.coeffs.h2 = state_fn(|_, _, _, o| o.fill(0.0));
    spec.coeffs.k = obs_fn(|_, _, o| {
        o.copy_from_slice(&[0.6 * 0.48, 0.6 * 0.6, 0.6 * 0.64, 0.8 * 0.48, 0.8 * 0.6, 0.8 * 0.64]);
    });
    let grid = Grid1D::new(-8.0, 8.0, 401).unwrap();
    let (obs, _) = simulate_reference_obs(&spec, 0).unwrap();
    let p0 = initial_density(&spec.initial, &grid).unwrap();
    let dens = zakai_fd_solve(&spec.coeffs, &obs, &p0, grid).unwrap();
    let n = dens.time.n_steps;
    assert!((dens.mass(n) - dens.mass(0)).abs() < 1e-4);
}
