//! Moore–Penrose pseudo-inverse, computed two independent ways.
//!
//! [`pinv_oracle`] goes through a singular value decomposition and is the
//! robust path used by the filters. [`pinv_minor`] realises the explicit
//! construction through a full-rank factorization `A = FG` picked out by an
//! enumeration of all square minors, and returns `A⁺ = Gᵀ(FᵀAGᵀ)⁻¹Fᵀ`.
//!
//! # Minor enumeration
//!
//! Index 1 is a conventional "order 0" minor whose determinant is 0. Indices
//! 2, 3, … then run through the minors in lexicographic order on
//! `(order, row set, column set)`: all order-1 minors first, then order 2,
//! and so on up to `min(rows, cols)`. Row and column sets are strictly
//! increasing index tuples compared lexicographically, rows varying slowest.
//! The selected minor is the highest-indexed one whose determinant is
//! numerically non-zero; if there is none the matrix is zero and index 1 is
//! reported.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{jacobi_svd, qr_thin, upper_triangular_inverse, Matrix};
use crate::rng::{self, Role};

pub const DEFAULT_RANK_TOL: f64 = 1e-12;
pub const DEFAULT_DET_TOL: f64 = 1e-10;

/// Largest matrix (in either dimension) accepted by [`pinv_minor`].
pub const MINOR_DIM_LIMIT: usize = 8;

/// Full-rank factorization record produced by [`pinv_minor`].
#[derive(Debug, Clone, PartialEq)]
pub struct FullRankFactorization {
    pub rank: usize,
    /// `rows × rank`, equal to `A P₁`.
    pub f: Matrix,
    /// `rank × cols`, with `F G = A`.
    pub g: Matrix,
    /// 1-based position of the selected minor in the enumeration.
    pub minor_index: usize,
    /// Rows of the selected minor.
    pub row_selection: Vec<usize>,
    /// Columns `c₁ < … < c_r` of the selected minor.
    pub column_selection: Vec<usize>,
}

fn check_finite(a: &Matrix) -> Result<()> {
    if a.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput("matrix has non-finite entries".into()))
    }
}

/// Pseudo-inverse through the SVD. Singular values at or below
/// `rank_tol · σ_max · max(rows, cols)` are treated as zero.
pub fn pinv_oracle(a: &Matrix, rank_tol: f64) -> Result<Matrix> {
    check_finite(a)?;
    if !(rank_tol > 0.0) {
        return Err(Error::InvalidInput(format!("rank_tol must be positive, got {rank_tol}")));
    }
    let (rows, cols) = (a.rows(), a.cols());
    let mut out = Matrix::zeros(cols, rows);
    if rows == 0 || cols == 0 {
        return Ok(out);
    }
    let svd = jacobi_svd(a);
    let sigma_max = svd.singular_values[0];
    if sigma_max == 0.0 {
        return Ok(out);
    }
    let cutoff = rank_tol * sigma_max * rows.max(cols) as f64;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s <= cutoff {
            break;
        }
        let inv = 1.0 / s;
        for i in 0..cols {
            let vik = svd.v[(i, k)] * inv;
            if vik == 0.0 {
                continue;
            }
            for j in 0..rows {
                out[(i, j)] += vik * svd.u[(j, k)];
            }
        }
    }
    Ok(out)
}

/// Numerical rank as decided by the oracle path.
pub fn rank(a: &Matrix, rank_tol: f64) -> usize {
    if a.rows() == 0 || a.cols() == 0 {
        return 0;
    }
    let svd = jacobi_svd(a);
    let sigma_max = svd.singular_values[0];
    if sigma_max == 0.0 {
        return 0;
    }
    let cutoff = rank_tol * sigma_max * a.rows().max(a.cols()) as f64;
    svd.singular_values.iter().filter(|&&s| s > cutoff).count()
}

fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// Number of entries of the minor-determinant vector, including the
/// conventional order-0 entry.
pub fn minor_count(rows: usize, cols: usize) -> usize {
    1 + (1..=rows.min(cols))
        .map(|k| binomial(rows, k) * binomial(cols, k))
        .sum::<usize>()
}

/// All strictly increasing `k`-tuples drawn from `0..n`, in lexicographic order.
fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(binomial(n, k));
    if k > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] < n - k + i {
                idx[i] += 1;
                for j in i + 1..k {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// One entry of the enumeration.
#[derive(Debug, Clone, PartialEq)]
pub struct Minor {
    pub index: usize,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub determinant: f64,
}

/// Walks the minors of `a` in enumeration order (excluding the order-0 entry).
pub fn enumerate_minors(a: &Matrix) -> Vec<Minor> {
    let mut out = Vec::with_capacity(minor_count(a.rows(), a.cols()) - 1);
    let mut index = 1;
    for order in 1..=a.rows().min(a.cols()) {
        let col_sets = combinations(a.cols(), order);
        for rows in combinations(a.rows(), order) {
            for cols in &col_sets {
                index += 1;
                out.push(Minor {
                    index,
                    rows: rows.clone(),
                    cols: cols.clone(),
                    determinant: a.select(&rows, cols).determinant(),
                });
            }
        }
    }
    out
}

/// The determinant vector including the leading conventional 0.
pub fn minor_determinants(a: &Matrix) -> Vec<f64> {
    std::iter::once(0.0)
        .chain(enumerate_minors(a).into_iter().map(|m| m.determinant))
        .collect()
}

/// `|det M|` relative to Hadamard's bound `Π ‖row_i(M)‖`. Lies in `[0, 1]`.
fn relative_determinant(m: &Matrix) -> f64 {
    let bound: f64 = (0..m.rows())
        .map(|r| m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
        .product();
    if bound == 0.0 {
        0.0
    } else {
        m.determinant().abs() / bound
    }
}

/// Finds the highest-indexed minor that is numerically non-singular.
fn select_minor(a: &Matrix, det_tol: f64) -> Option<Minor> {
    let max_order = a.rows().min(a.cols());
    // Offsets of each order block, so the search can run from the top down.
    let mut block_start = vec![2usize; max_order + 2];
    for order in 1..=max_order {
        block_start[order + 1] = block_start[order] + binomial(a.rows(), order) * binomial(a.cols(), order);
    }
    for order in (1..=max_order).rev() {
        let row_sets = combinations(a.rows(), order);
        let col_sets = combinations(a.cols(), order);
        for (ri, rows) in row_sets.iter().enumerate().rev() {
            for (ci, cols) in col_sets.iter().enumerate().rev() {
                let sub = a.select(rows, cols);
                if relative_determinant(&sub) > det_tol {
                    return Some(Minor {
                        index: block_start[order] + ri * col_sets.len() + ci,
                        rows: rows.clone(),
                        cols: cols.clone(),
                        determinant: sub.determinant(),
                    });
                }
            }
        }
    }
    None
}

/// Pseudo-inverse through the minor-selected full-rank factorization.
///
/// `F = A P₁` keeps the minor's columns and `G = M⁻¹ A_R` solves the
/// selected rows, so `A = FG`.
///
/// A minor counts as non-zero when `|det M| > det_tol · Π‖row_i(M)‖`, which
/// keeps the decision invariant under rescaling of `a`.
pub fn pinv_minor(a: &Matrix, det_tol: f64) -> Result<(Matrix, FullRankFactorization)> {
    check_finite(a)?;
    if !(det_tol > 0.0) {
        return Err(Error::InvalidInput(format!("det_tol must be positive, got {det_tol}")));
    }
    if a.rows() > MINOR_DIM_LIMIT || a.cols() > MINOR_DIM_LIMIT {
        return Err(Error::MinorEnumerationTooLarge {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    let Some(minor) = select_minor(a, det_tol) else {
        let fact = FullRankFactorization {
            rank: 0,
            f: Matrix::zeros(a.rows(), 0),
            g: Matrix::zeros(0, a.cols()),
            minor_index: 1,
            row_selection: vec![],
            column_selection: vec![],
        };
        return Ok((Matrix::zeros(a.cols(), a.rows()), fact));
    };

    let r = minor.rows.len();
    // F = A P₁: the columns of the minor, in increasing order.
    let all_rows: Vec<usize> = (0..a.rows()).collect();
    let f = a.select(&all_rows, &minor.cols);
    // G is fixed by the selected rows: F_R G = A_R with F_R the minor itself.
    let all_cols: Vec<usize> = (0..a.cols()).collect();
    let m_inv = a
        .select(&minor.rows, &minor.cols)
        .inverse()
        .ok_or(Error::DegenerateSelection {
            minor_index: minor.index,
        })?;
    let g = m_inv.matmul(&a.select(&minor.rows, &all_cols));

    // Gᵀ(FᵀAGᵀ)⁻¹Fᵀ with A = FG equals G⁺F⁺. Evaluating it through thin QR
    // factors of F and Gᵀ avoids squaring the condition number:
    // F = Q₁R₁, Gᵀ = Q₂R₂  ⇒  A⁺ = Q₂ R₂⁻ᵀ R₁⁻¹ Q₁ᵀ.
    let degenerate = Error::DegenerateSelection {
        minor_index: minor.index,
    };
    let (q1, r1) = qr_thin(&f);
    let (q2, r2) = qr_thin(&g.transpose());
    let r1_inv = upper_triangular_inverse(&r1).ok_or(degenerate.clone())?;
    let r2_inv = upper_triangular_inverse(&r2).ok_or(degenerate.clone())?;
    let pinv = q2.matmul(&r2_inv.transpose()).matmul(&r1_inv).matmul(&q1.transpose());
    if !pinv.is_finite() {
        return Err(degenerate);
    }
    debug_assert_eq!(r1.rows(), r);
    Ok((
        pinv,
        FullRankFactorization {
            rank: r,
            f,
            g,
            minor_index: minor.index,
            row_selection: minor.rows,
            column_selection: minor.cols,
        },
    ))
}

/// The orthogonal projector `A⁺A` onto the row space of `a`.
pub fn projector(a: &Matrix) -> Result<Matrix> {
    Ok(pinv_oracle(a, DEFAULT_RANK_TOL)?.matmul(a))
}

/// Residuals of the four Penrose identities, each relative to the norm of the
/// matrix it should reproduce (or 1 when that norm vanishes).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenroseResiduals {
    pub a_ap_a: f64,
    pub ap_a_ap: f64,
    pub ap_a_symmetric: f64,
    pub a_ap_symmetric: f64,
}

impl PenroseResiduals {
    pub fn max(&self) -> f64 {
        self.a_ap_a
            .max(self.ap_a_ap)
            .max(self.ap_a_symmetric)
            .max(self.a_ap_symmetric)
    }
}

pub fn penrose_residuals(a: &Matrix, ap: &Matrix) -> PenroseResiduals {
    let rel = |diff: f64, scale: f64| diff / scale.max(1.0);
    let a_ap = a.matmul(ap);
    let ap_a = ap.matmul(a);
    PenroseResiduals {
        a_ap_a: rel(a_ap.matmul(a).max_abs_diff(a), a.max_abs()),
        ap_a_ap: rel(ap_a.matmul(ap).max_abs_diff(ap), ap.max_abs()),
        ap_a_symmetric: rel(ap_a.max_abs_diff(&ap_a.transpose()), ap_a.max_abs()),
        a_ap_symmetric: rel(a_ap.max_abs_diff(&a_ap.transpose()), a_ap.max_abs()),
    }
}

/// Settings of the randomized Penrose property suite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteConfig {
    pub trials: usize,
    pub max_dim: usize,
    /// Fraction of trials built as a product of thinner factors.
    pub rank_deficient_fraction: f64,
    /// Entries are drawn uniformly from `[-entry_range, entry_range]`.
    pub entry_range: f64,
    pub penrose_tol: f64,
    pub agreement_tol: f64,
    pub projector_tol: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            trials: 1000,
            max_dim: 6,
            rank_deficient_fraction: 0.3,
            entry_range: 1.0,
            penrose_tol: 1e-9,
            agreement_tol: 1e-8,
            projector_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
    pub forced_deficient: bool,
    pub penrose_oracle: f64,
    pub penrose_minor: f64,
    pub agreement: f64,
    pub projector_norm: f64,
    pub projector_idempotence: f64,
    pub involution: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub config: SuiteConfig,
    pub outcomes: Vec<TrialOutcome>,
}

impl SuiteReport {
    pub fn passes(&self, o: &TrialOutcome) -> bool {
        let c = &self.config;
        o.penrose_oracle <= c.penrose_tol
            && o.penrose_minor <= c.penrose_tol
            && o.agreement <= c.agreement_tol
            && o.projector_norm <= 1.0 + c.projector_tol
            && o.projector_idempotence <= 1e-10
    }

    pub fn n_passed(&self) -> usize {
        self.outcomes.iter().filter(|o| self.passes(o)).count()
    }

    pub fn n_deficient(&self) -> usize {
        self.outcomes.iter().filter(|o| o.forced_deficient).count()
    }

    pub fn worst(&self, f: impl Fn(&TrialOutcome) -> f64) -> f64 {
        self.outcomes.iter().map(f).fold(0.0, f64::max)
    }
}

/// Draws trial matrix `trial` of the suite. Rank-deficient trials are
/// products `B C` with an inner dimension below `min(rows, cols)`.
pub fn suite_matrix(seed: u64, trial: u64, config: &SuiteConfig) -> (Matrix, bool) {
    let mut rng = rng::stream(seed, trial, 0, Role::Matrix);
    let dim = |rng: &mut rng::StreamRng| 1 + (rng::uniform(rng) * config.max_dim as f64) as usize;
    let rows = dim(&mut rng).min(config.max_dim);
    let cols = dim(&mut rng).min(config.max_dim);
    let entries = |n: usize, rng: &mut rng::StreamRng| -> Vec<f64> {
        (0..n).map(|_| config.entry_range * (2.0 * rng::uniform(rng) - 1.0)).collect()
    };
    let deficient = rng::uniform(&mut rng) < config.rank_deficient_fraction;
    if deficient {
        let inner = (rng::uniform(&mut rng) * rows.min(cols) as f64) as usize;
        let b = Matrix::new(rows, inner, entries(rows * inner, &mut rng)).expect("shape");
        let c = Matrix::new(inner, cols, entries(inner * cols, &mut rng)).expect("shape");
        let mut a = b.matmul(&c);
        if inner > 0 {
            // Keep the entry range comparable to the full-rank trials.
            let s = config.entry_range / a.max_abs().max(f64::MIN_POSITIVE);
            a = a.scale(s.min(1.0));
        }
        (a, true)
    } else {
        (Matrix::new(rows, cols, entries(rows * cols, &mut rng)).expect("shape"), false)
    }
}

/// Runs both pseudo-inverse constructions over `config.trials` random
/// matrices and records every invariant.
pub fn penrose_suite(seed: u64, config: SuiteConfig) -> Result<SuiteReport> {
    if config.max_dim == 0 || config.max_dim > MINOR_DIM_LIMIT {
        return Err(Error::Configuration(format!(
            "max_dim must be in 1..={MINOR_DIM_LIMIT}, got {}",
            config.max_dim
        )));
    }
    let outcomes = (0..config.trials as u64)
        .into_par_iter()
        .map(|t| {
            let (a, forced) = suite_matrix(seed, t, &config);
            let oracle = pinv_oracle(&a, DEFAULT_RANK_TOL)?;
            let (minor, fact) = pinv_minor(&a, DEFAULT_DET_TOL)?;
            let p = oracle.matmul(&a);
            let back = pinv_oracle(&oracle, DEFAULT_RANK_TOL)?;
            Ok(TrialOutcome {
                rows: a.rows(),
                cols: a.cols(),
                rank: fact.rank,
                forced_deficient: forced,
                penrose_oracle: penrose_residuals(&a, &oracle).max(),
                penrose_minor: penrose_residuals(&a, &minor).max(),
                agreement: minor.max_abs_diff(&oracle),
                projector_norm: p.spectral_norm(),
                projector_idempotence: p.matmul(&p).max_abs_diff(&p),
                involution: back.max_abs_diff(&a) / a.max_abs().max(1.0),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SuiteReport { config, outcomes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_matrix_oracle() {
        let z = Matrix::zeros(2, 3);
        assert_eq!(pinv_oracle(&z, DEFAULT_RANK_TOL).unwrap(), Matrix::zeros(3, 2));
    }

    #[test]
    fn zero_matrix_minor_path() {
        let (p, fact) = pinv_minor(&Matrix::zeros(2, 3), DEFAULT_DET_TOL).unwrap();
        assert_eq!(p, Matrix::zeros(3, 2));
        assert_eq!(fact.rank, 0);
        assert_eq!(fact.minor_index, 1);
        assert_eq!((fact.f.rows(), fact.f.cols()), (2, 0));
        assert_eq!((fact.g.rows(), fact.g.cols()), (0, 3));
    }

    #[test]
    fn identity_is_self_inverse() {
        let i3 = Matrix::identity(3);
        assert_eq!(pinv_oracle(&i3, DEFAULT_RANK_TOL).unwrap(), i3);
        let (p, fact) = pinv_minor(&Matrix::identity(2), DEFAULT_DET_TOL).unwrap();
        assert_eq!(p, Matrix::identity(2));
        assert_eq!(fact.rank, 2);
        assert_eq!(fact.minor_index, minor_count(2, 2));
    }

    #[test]
    fn diagonal_inverts_nonzero_entries() {
        let a = Matrix::diag(&[2.0, 0.0]);
        let expected = Matrix::diag(&[0.5, 0.0]);
        assert_eq!(pinv_oracle(&a, DEFAULT_RANK_TOL).unwrap(), expected);
        let (p, fact) = pinv_minor(&a, DEFAULT_DET_TOL).unwrap();
        assert_eq!(p, expected);
        assert_eq!(fact.rank, 1);
    }

    #[test]
    fn non_finite_rejected() {
        let a = Matrix::from_rows(&[&[1.0, f64::NAN]]).unwrap();
        assert!(matches!(pinv_oracle(&a, 1e-12), Err(Error::InvalidInput(_))));
        assert!(matches!(pinv_minor(&a, 1e-10), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn minor_path_caps_dimension() {
        let a = Matrix::zeros(9, 2);
        assert!(matches!(
            pinv_minor(&a, 1e-10),
            Err(Error::MinorEnumerationTooLarge { .. })
        ));
        assert!(pinv_oracle(&a, 1e-12).is_ok());
    }

    #[test]
    fn enumeration_counts_and_order() {
        // 1 + 2·3 + C(2,2)·C(3,2)
        assert_eq!(minor_count(2, 3), 1 + 6 + 3);
        let a = Matrix::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]).unwrap();
        let minors = enumerate_minors(&a);
        assert_eq!(minors.len(), 9);
        assert_eq!(minors[0].index, 2);
        assert_eq!((minors[0].rows.clone(), minors[0].cols.clone()), (vec![0], vec![0]));
        assert_eq!((minors[5].rows.clone(), minors[5].cols.clone()), (vec![1], vec![2]));
        assert_eq!(minors[6].cols, vec![0, 1]);
        assert_eq!(minors[8].cols, vec![1, 2]);
        assert!((minors[8].determinant - (2.0 * 6.0 - 3.0 * 5.0)).abs() < 1e-14);
        let s = minor_determinants(&a);
        assert_eq!(s[0], 0.0);
        assert_eq!(s.len(), minor_count(2, 3));
    }

    #[test]
    fn selected_minor_is_highest_nonzero() {
        // Rank one: every order-2 minor vanishes, the last order-1 minor is a[1][2].
        let a = Matrix::from_rows(&[&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]]).unwrap();
        let (_, fact) = pinv_minor(&a, DEFAULT_DET_TOL).unwrap();
        assert_eq!(fact.rank, 1);
        assert_eq!(fact.minor_index, 7);
        assert_eq!(fact.row_selection, vec![1]);
        assert_eq!(fact.column_selection, vec![2]);
        assert!(fact.f.matmul(&fact.g).max_abs_diff(&a) < 1e-14);
    }

    #[test]
    fn projector_examples() {
        assert_eq!(projector(&Matrix::zeros(2, 2)).unwrap(), Matrix::zeros(2, 2));
        let full = Matrix::from_rows(&[&[2.0, 1.0], &[1.0, 3.0]]).unwrap();
        assert!(projector(&full).unwrap().max_abs_diff(&Matrix::identity(2)) < 1e-14);
        let e1 = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]).unwrap();
        assert_eq!(projector(&e1).unwrap(), e1);
    }

    #[test]
    fn discontinuity_witness() {
        for n in [1.0, 2.0, 4.0, 64.0, 1024.0, 1048576.0] {
            let a = Matrix::from_rows(&[&[1.0 / n]]).unwrap();
            assert_eq!(pinv_oracle(&a, DEFAULT_RANK_TOL).unwrap()[(0, 0)], n);
            assert_eq!(pinv_minor(&a, DEFAULT_DET_TOL).unwrap().0[(0, 0)], n);
        }
        let limit = Matrix::zeros(1, 1);
        assert_eq!(pinv_oracle(&limit, DEFAULT_RANK_TOL).unwrap()[(0, 0)], 0.0);
        assert_eq!(pinv_minor(&limit, DEFAULT_DET_TOL).unwrap().0[(0, 0)], 0.0);
    }

    #[test]
    fn rank_of_outer_product() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 4.0], &[-1.0, -2.0]]).unwrap();
        assert_eq!(rank(&a, DEFAULT_RANK_TOL), 1);
        assert_eq!(rank(&Matrix::identity(3), DEFAULT_RANK_TOL), 3);
    }

    #[test]
    fn small_suite_passes_and_is_reproducible() {
        let cfg = SuiteConfig {
            trials: 200,
            ..SuiteConfig::default()
        };
        let a = penrose_suite(7, cfg).unwrap();
        assert_eq!(a.n_passed(), 200);
        assert!(a.n_deficient() > 30);
        assert!(a.worst(|o| o.involution) < 1e-8);
        assert_eq!(a, penrose_suite(7, cfg).unwrap());
    }
}
