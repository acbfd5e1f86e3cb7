use filterlab_core::filter::{ks_filter, FilterOptions, Record};
use filterlab_core::kalman::kalman_bucy;
use filterlab_core::model::{linear_gaussian, TestFunction};
use filterlab_core::sde::simulate_joint;

#[test]
fn particle_filter_tracks_kalman_bucy() {
    let spec = linear_gaussian().with_dt(2e-3).with_particles(4000);
    let lin = spec.linear.clone().unwrap();
    let opts = FilterOptions {
        record: Record::Endpoints,
        ..FilterOptions::default()
    };
    for replica in 0..3 {
        let truth = simulate_joint(&spec, replica).unwrap();
        let kb = kalman_bucy(&lin, &truth.obs).unwrap();
        let run = ks_filter(&spec, &truth.obs, replica, opts).unwrap();
        let post = run.final_ensemble().normalize().unwrap();
        let x = TestFunction::coordinate(1, 0);
        let x2 = TestFunction::power(1, 0, 2);
        let m = post.integrate(&x).unwrap();
        let v = post.integrate(&x2).unwrap() - m * m;
        let n = truth.grid.n_steps;
        let (km, kv) = (kb.mean.row(n)[0], kb.cov[n][(0, 0)]);
        println!("replica {replica}: mean {m:.4} vs {km:.4}, var {v:.4} vs {kv:.4}, ess {:.0}", run.ess[n]);
        assert!((m - km).abs() < 0.1);
        assert!((v - kv).abs() < 0.05);
    }
}
