use nalgebra::DMatrix;
use proptest::prelude::*;

use filterlab_core::linalg::Matrix;
use filterlab_core::pinv::{
    penrose_residuals, penrose_suite, pinv_minor, pinv_oracle, projector, SuiteConfig, DEFAULT_DET_TOL,
    DEFAULT_RANK_TOL,
};

fn to_na(a: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(a.rows(), a.cols(), a.as_slice())
}

fn matrix() -> impl Strategy<Value = Matrix> {
    (1usize..=6, 1usize..=6).prop_flat_map(|(r, c)| {
        prop::collection::vec(-10.0f64..10.0, r * c).prop_map(move |v| Matrix::new(r, c, v).unwrap())
    })
}

/// Products of thin factors: rank strictly below `min(rows, cols)`.
fn deficient() -> impl Strategy<Value = Matrix> {
    (2usize..=6, 2usize..=6)
        .prop_flat_map(|(r, c)| (Just(r), Just(c), 0..r.min(c)))
        .prop_flat_map(|(r, c, k)| {
            (
                prop::collection::vec(-3.0f64..3.0, r * k),
                prop::collection::vec(-3.0f64..3.0, k * c),
            )
                .prop_map(move |(b, cc)| {
                    let b = Matrix::new(r, k, b).unwrap();
                    let cc = Matrix::new(k, c, cc).unwrap();
                    b.matmul(&cc)
                })
        })
}

#[test]
fn oracle_matches_nalgebra_on_rank_one() {
    // 4×2 rank-one matrix.
    let a = Matrix::new(4, 2, vec![1.0, -2.0, 0.5, -1.0, -3.0, 6.0, 2.0, -4.0]).unwrap();
    let ours = pinv_oracle(&a, DEFAULT_RANK_TOL).unwrap();
    let theirs = to_na(&a).pseudo_inverse(1e-10).unwrap();
    for i in 0..2 {
        for j in 0..4 {
            assert!((ours[(i, j)] - theirs[(i, j)]).abs() < 1e-13);
        }
    }
}

#[test]
fn thousand_trial_suite() {
    let report = penrose_suite(42, SuiteConfig::default()).unwrap();
    assert_eq!(report.n_passed(), 1000, "worst agreement {}", report.worst(|o| o.agreement));
    let frac = report.n_deficient() as f64 / 1000.0;
    assert!((0.25..=0.35).contains(&frac), "{frac}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn oracle_agrees_with_nalgebra(a in matrix()) {
        let ours = pinv_oracle(&a, DEFAULT_RANK_TOL).unwrap();
        let theirs = to_na(&a).pseudo_inverse(1e-9).unwrap();
        for i in 0..a.cols() {
            for j in 0..a.rows() {
                prop_assert!((ours[(i, j)] - theirs[(i, j)]).abs() <= 1e-8 * (1.0 + theirs[(i, j)].abs()));
            }
        }
    }

    #[test]
    fn both_constructions_satisfy_penrose(a in matrix()) {
        let o = pinv_oracle(&a, DEFAULT_RANK_TOL).unwrap();
        let (m, f) = pinv_minor(&a, DEFAULT_DET_TOL).unwrap();
        prop_assert!(penrose_residuals(&a, &o).max() <= 1e-9);
        prop_assert!(penrose_residuals(&a, &m).max() <= 1e-9);
        prop_assert!(m.max_abs_diff(&o) <= 1e-8);
        prop_assert!(f.f.matmul(&f.g).max_abs_diff(&a) <= 1e-9 * a.max_abs().max(1.0));
    }

    #[test]
    fn deficient_matrices(a in deficient()) {
        let o = pinv_oracle(&a, DEFAULT_RANK_TOL).unwrap();
        let (m, f) = pinv_minor(&a, DEFAULT_DET_TOL).unwrap();
        prop_assert!(f.rank < a.rows().min(a.cols()));
        prop_assert!(penrose_residuals(&a, &m).max() <= 1e-9);
        prop_assert!(m.max_abs_diff(&o) <= 1e-8 * o.max_abs().max(1.0));
    }

    #[test]
    fn projector_is_a_contraction(a in matrix()) {
        let p = projector(&a).unwrap();
        prop_assert!(p.spectral_norm() <= 1.0 + 1e-12);
        prop_assert!(p.matmul(&p).max_abs_diff(&p) <= 1e-10);
        prop_assert!(p.max_abs_diff(&p.transpose()) <= 1e-12);
    }

    #[test]
    fn pseudo_inverse_is_an_involution(a in matrix()) {
        let o = pinv_oracle(&a, DEFAULT_RANK_TOL).unwrap();
        let back = pinv_oracle(&o, DEFAULT_RANK_TOL).unwrap();
        prop_assert!(back.max_abs_diff(&a) <= 1e-8 * a.max_abs().max(1.0));
    }
}
