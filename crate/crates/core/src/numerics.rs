//! Dense linear-algebra kernels shared by the solvers.
//!
//! `vec` is column-major stacking everywhere, which is nalgebra's storage
//! order, so `vec(M)` is just the column slice of `M`.

use nalgebra::{Complex, DMatrix, DVector, Schur, SVD};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative Frobenius tolerance for symmetry checks.
pub const SYM_TOL: f64 = 1e-8;
/// Default margin for the Hurwitz test: abscissa must be below `-HURWITZ_MARGIN`.
pub const HURWITZ_MARGIN: f64 = 1e-9;
/// Operators with a larger condition estimate are treated as singular.
pub const MAX_CONDITION: f64 = 1e12;
/// Relative singular-value threshold used by [`lstsq`].
pub const LSTSQ_RCOND: f64 = 1e-10;

pub fn kron(a: &Mat, b: &Mat) -> Mat {
    a.kronecker(b)
}

pub fn vec(m: &Mat) -> Vector {
    Vector::from_column_slice(m.as_slice())
}

pub fn unvec(v: &[f64], rows: usize, cols: usize) -> Mat {
    assert_eq!(v.len(), rows * cols, "unvec length");
    Mat::from_column_slice(rows, cols, v)
}

/// Number of free entries of a symmetric n×n matrix.
pub fn hat_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Symmetric matrix packed as `[D11, 2D12, .., 2D1n, D22, 2D23, .., Dnn]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HatVector {
    pub entries: Vector,
    pub n: usize,
}

impl HatVector {
    pub fn from_entries(entries: Vector, n: usize) -> Result<Self> {
        if entries.len() != hat_len(n) {
            return Err(Error::Dimension(format!(
                "hat vector of length {} cannot encode a {n}x{n} matrix",
                entries.len()
            )));
        }
        Ok(Self { entries, n })
    }
}

/// Relative Frobenius asymmetry ‖M − Mᵀ‖ / max(1, ‖M‖).
pub fn asymmetry(m: &Mat) -> f64 {
    if !m.is_square() {
        return f64::INFINITY;
    }
    (m - m.transpose()).norm() / m.norm().max(1.0)
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Rejects matrices asymmetric beyond [`SYM_TOL`] and returns the symmetrized copy.
pub fn ingest_symmetric(m: &Mat, what: &str) -> Result<Mat> {
    let asym = asymmetry(m);
    if asym > SYM_TOL {
        return Err(Error::NotSymmetric {
            what: what.to_string(),
            asymmetry: asym,
        });
    }
    Ok(symmetrize(m))
}

pub fn hat(m: &Mat) -> Result<HatVector> {
    let m = ingest_symmetric(m, "hat argument")?;
    let n = m.nrows();
    let mut out = Vec::with_capacity(hat_len(n));
    for a in 0..n {
        out.push(m[(a, a)]);
        for b in a + 1..n {
            out.push(2.0 * m[(a, b)]);
        }
    }
    Ok(HatVector {
        entries: Vector::from_vec(out),
        n,
    })
}

pub fn unhat(v: &HatVector) -> Mat {
    unhat_slice(v.entries.as_slice(), v.n)
}

pub(crate) fn unhat_slice(v: &[f64], n: usize) -> Mat {
    let mut m = Mat::zeros(n, n);
    let mut k = 0;
    for a in 0..n {
        m[(a, a)] = v[k];
        k += 1;
        for b in a + 1..n {
            m[(a, b)] = 0.5 * v[k];
            m[(b, a)] = 0.5 * v[k];
            k += 1;
        }
    }
    m
}

/// Quadratic monomials `[x1², x1x2, .., x1xn, x2², .., xn²]`.
pub fn hat_state(x: &[f64]) -> Vector {
    let n = x.len();
    let mut out = Vec::with_capacity(hat_len(n));
    for a in 0..n {
        for b in a..n {
            out.push(x[a] * x[b]);
        }
    }
    Vector::from_vec(out)
}

pub fn eigenvalues(f: &Mat) -> Result<Vec<Complex<f64>>> {
    if !f.is_square() {
        return Err(Error::Dimension(format!(
            "eigenvalues of a {}x{} matrix",
            f.nrows(),
            f.ncols()
        )));
    }
    if f.nrows() == 0 {
        return Ok(Vec::new());
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::EigenNoConvergence);
    }
    let schur = Schur::try_new(f.clone(), f64::EPSILON, 10_000).ok_or(Error::EigenNoConvergence)?;
    Ok(schur.complex_eigenvalues().iter().copied().collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub spectral_abscissa: f64,
    pub is_hurwitz: bool,
    pub eigenvalues: Vec<Complex<f64>>,
}

pub fn stability_report(f: &Mat, margin: f64) -> Result<StabilityReport> {
    let eigenvalues = eigenvalues(f)?;
    let spectral_abscissa = eigenvalues
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(StabilityReport {
        spectral_abscissa,
        is_hurwitz: spectral_abscissa < -margin,
        eigenvalues,
    })
}

pub fn spectral_abscissa(f: &Mat) -> Result<f64> {
    Ok(stability_report(f, HURWITZ_MARGIN)?.spectral_abscissa)
}

fn condition_from_singular_values(sv: &Vector) -> f64 {
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solves `FᵀP + PF = −Rhs` through the Kronecker system
/// `(I⊗Fᵀ + Fᵀ⊗I) vec(P) = −vec(Rhs)` and symmetrizes the result.
pub fn solve_lyapunov(f: &Mat, rhs: &Mat) -> Result<Mat> {
    let n = f.nrows();
    if !f.is_square() || rhs.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "Lyapunov with F {:?} and Rhs {:?}",
            f.shape(),
            rhs.shape()
        )));
    }
    let eye = Mat::identity(n, n);
    let ft = f.transpose();
    let op = kron(&eye, &ft) + kron(&ft, &eye);
    let sv = op.singular_values();
    let condition = condition_from_singular_values(&sv);
    let singular = |condition: f64| -> Error {
        let closest_sum = eigenvalues(f)
            .ok()
            .and_then(|ev| {
                let mut best: Option<Complex<f64>> = None;
                for a in &ev {
                    for b in &ev {
                        let s = a + b;
                        if best.is_none_or(|c| s.norm() < c.norm()) {
                            best = Some(s);
                        }
                    }
                }
                best
            })
            .unwrap_or(Complex::new(f64::NAN, f64::NAN));
        Error::LyapunovSingular {
            condition,
            closest_sum,
        }
    };
    if !condition.is_finite() || condition > MAX_CONDITION {
        return Err(singular(condition));
    }
    let b = -vec(rhs);
    let sol = op.lu().solve(&b).ok_or_else(|| singular(condition))?;
    Ok(symmetrize(&unvec(sol.as_slice(), n, n)))
}

/// Inverse of a square matrix with a condition guard.
pub fn inverse(m: &Mat, what: &str) -> Result<Mat> {
    if !m.is_square() {
        return Err(Error::Dimension(format!("inverse of non-square {what}")));
    }
    let condition = condition_from_singular_values(&m.singular_values());
    if !condition.is_finite() || condition > MAX_CONDITION {
        return Err(Error::Singular(format!("{what} (condition {condition:.3e})")));
    }
    m.clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular(what.to_string()))
}

/// Right pseudo-inverse `C⁺ = Cᵀ(CCᵀ)⁻¹` of a full-row-rank matrix.
pub fn right_pinv(c: &Mat) -> Result<Mat> {
    if c.nrows() > c.ncols() || c.nrows() == 0 {
        return Err(Error::Dimension(format!(
            "right pseudo-inverse needs a wide matrix, got {:?}",
            c.shape()
        )));
    }
    let gram = c * c.transpose();
    let inv = inverse(&gram, "C·Cᵀ").map_err(|_| {
        let sv = c.singular_values();
        let tol = sv.max() * LSTSQ_RCOND;
        Error::RankDeficient {
            what: "output matrix".into(),
            rank: sv.iter().filter(|s| **s > tol).count(),
            cols: c.nrows(),
            sigma_min: sv.min(),
            sigma_max: sv.max(),
        }
    })?;
    Ok(c.transpose() * inv)
}

/// Least-squares solution together with its diagnostics.
#[derive(Debug, Clone)]
pub struct LstsqSolution {
    pub theta: Mat,
    pub rank: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Condition number of the column-equilibrated regressor.
    pub condition: f64,
    pub residual_norm: f64,
}

/// Minimizes ‖Hθ − Ξ‖_F by SVD of the column-equilibrated regressor.
pub fn lstsq(h: &Mat, xi: &Mat) -> Result<Mat> {
    lstsq_report(h, xi, "regressor").map(|s| s.theta)
}

pub fn lstsq_report(h: &Mat, xi: &Mat, what: &str) -> Result<LstsqSolution> {
    let (rows, cols) = h.shape();
    if xi.nrows() != rows {
        return Err(Error::Dimension(format!(
            "{what}: regressor has {rows} rows, right side {}",
            xi.nrows()
        )));
    }
    if rows < cols {
        return Err(Error::RankDeficient {
            what: format!("{what} (only {rows} rows)"),
            rank: rows,
            cols,
            sigma_min: 0.0,
            sigma_max: f64::NAN,
        });
    }
    let scales: Vec<f64> = h.column_iter().map(|c| c.norm()).collect();
    let mut hs = h.clone();
    for (k, s) in scales.iter().enumerate() {
        if *s > 0.0 {
            hs.column_mut(k).scale_mut(1.0 / s);
        }
    }
    let svd = SVD::new(hs, true, true);
    let sv = &svd.singular_values;
    let sigma_max = sv.max();
    let sigma_min = if scales.iter().any(|s| *s == 0.0 || !s.is_finite()) {
        0.0
    } else {
        sv.min()
    };
    let tol = sigma_max * LSTSQ_RCOND;
    let rank = if sigma_min == 0.0 {
        sv.iter().filter(|s| **s > tol).count().min(cols - 1)
    } else {
        sv.iter().filter(|s| **s > tol).count()
    };
    if rank < cols || !sigma_max.is_finite() {
        return Err(Error::RankDeficient {
            what: what.to_string(),
            rank,
            cols,
            sigma_min,
            sigma_max,
        });
    }
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let mut coeff = u.transpose() * xi;
    for (k, s) in sv.iter().enumerate() {
        coeff.row_mut(k).scale_mut(1.0 / s);
    }
    let mut theta = v_t.transpose() * coeff;
    for (k, s) in scales.iter().enumerate() {
        theta.row_mut(k).scale_mut(1.0 / s);
    }
    let residual_norm = (h * &theta - xi).norm();
    Ok(LstsqSolution {
        theta,
        rank,
        sigma_min,
        sigma_max,
        condition: sigma_max / sigma_min,
        residual_norm,
    })
}

/// Least squares with a single right-hand-side column.
pub(crate) fn lstsq_vec(h: &Mat, xi: &Vector, what: &str) -> Result<LstsqSolution> {
    let rhs = Mat::from_column_slice(xi.len(), 1, xi.as_slice());
    lstsq_report(h, &rhs, what)
}

/// Shortest text with 17 significant digits, which round-trips every f64.
pub fn format_f64(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:.16e}")
    }
}

/// Largest singular value.
pub fn norm2(m: &Mat) -> f64 {
    if m.is_empty() {
        0.0
    } else {
        m.singular_values().max()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;
    use proptest::prelude::*;

    fn mat_strategy(r: usize, c: usize) -> impl Strategy<Value = Mat> {
        proptest::collection::vec(-3.0f64..3.0, r * c).prop_map(move |v| Mat::from_vec(r, c, v))
    }

    fn sym_strategy(n: usize) -> impl Strategy<Value = Mat> {
        mat_strategy(n, n).prop_map(|m| symmetrize(&m))
    }

    /// Hurwitz matrix: shifted random matrix with abscissa pushed below −0.5.
    fn hurwitz_strategy(n: usize) -> impl Strategy<Value = Mat> {
        mat_strategy(n, n).prop_map(move |m| {
            let a = spectral_abscissa(&m).unwrap();
            m - Mat::identity(n, n) * (a + 0.5)
        })
    }

    #[test]
    fn kron_identity_and_scalar() {
        assert_eq!(kron(&Mat::identity(2, 2), &Mat::identity(2, 2)), Mat::identity(4, 4));
        let m = dmatrix![1.0, 2.0; 3.0, 4.0; 5.0, 6.0];
        assert_eq!(kron(&dmatrix![2.0], &m), &m * 2.0);
    }

    #[test]
    fn kron_vec_identity_example() {
        let a = dmatrix![1.0; 2.0];
        let c = dmatrix![3.0; 4.0];
        let b = Mat::identity(2, 2);
        let lhs = kron(&c.transpose(), &a.transpose()) * vec(&b);
        assert_relative_eq!(lhs[0], 11.0, epsilon = 1e-12);
    }

    #[test]
    fn hat_examples() {
        let h = hat(&Mat::identity(2, 2)).unwrap();
        assert_eq!(h.entries.as_slice(), &[1.0, 0.0, 1.0]);
        let h = hat(&dmatrix![1.0, 2.0; 2.0, 3.0]).unwrap();
        assert_eq!(h.entries.as_slice(), &[1.0, 4.0, 3.0]);
        assert!(hat(&dmatrix![1.0, 2.0; 0.0, 3.0]).is_err());
        assert!(HatVector::from_entries(Vector::zeros(4), 2).is_err());
    }

    #[test]
    fn lyapunov_examples() {
        let p = solve_lyapunov(&(-Mat::identity(3, 3)), &Mat::identity(3, 3)).unwrap();
        assert_relative_eq!(p, Mat::identity(3, 3) * 0.5, epsilon = 1e-14);

        let f = Mat::from_diagonal(&Vector::from_vec(vec![-3.0, -3.5, -2.0]));
        let rhs = Mat::from_diagonal(&Vector::from_vec(vec![1.0, 18.0, 1.0]));
        let p = solve_lyapunov(&f, &rhs).unwrap();
        let expect = Mat::from_diagonal(&Vector::from_vec(vec![1.0 / 6.0, 18.0 / 7.0, 0.25]));
        assert_relative_eq!(p, expect, epsilon = 1e-12);
        assert_relative_eq!(p[(1, 1)], 2.5714, epsilon = 1e-4);
    }

    #[test]
    fn lyapunov_singular_names_pair_sum() {
        let f = dmatrix![0.0, 1.0; -1.0, 0.0];
        match solve_lyapunov(&f, &Mat::identity(2, 2)) {
            Err(Error::LyapunovSingular { closest_sum, .. }) => assert!(closest_sum.norm() < 1e-8),
            other => panic!("expected singular operator, got {other:?}"),
        }
    }

    #[test]
    fn right_pinv_examples() {
        let c = dmatrix![1.0, 0.0];
        assert_eq!(right_pinv(&c).unwrap(), dmatrix![1.0; 0.0]);
        let c = dmatrix![0.0, 1.0, 1.0];
        assert_relative_eq!(right_pinv(&c).unwrap(), dmatrix![0.0; 0.5; 0.5], epsilon = 1e-15);
        assert!(matches!(
            right_pinv(&dmatrix![0.0, 0.0]),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn stability_examples() {
        let r = stability_report(&dmatrix![-2.0, 1.0; 0.0, -2.0], HURWITZ_MARGIN).unwrap();
        assert_relative_eq!(r.spectral_abscissa, -2.0, epsilon = 1e-12);
        assert!(r.is_hurwitz);
        let r = stability_report(&dmatrix![1.0, 1.0; 0.0, 2.0], HURWITZ_MARGIN).unwrap();
        assert_relative_eq!(r.spectral_abscissa, 2.0, epsilon = 1e-12);
        assert!(!r.is_hurwitz);
        let r = stability_report(&Mat::zeros(3, 3), 1e-15).unwrap();
        assert_eq!(r.spectral_abscissa, 0.0);
        assert!(!r.is_hurwitz);
        let mut bad = Mat::zeros(2, 2);
        bad[(0, 0)] = f64::NAN;
        assert!(matches!(stability_report(&bad, 0.0), Err(Error::EigenNoConvergence)));
    }

    #[test]
    fn lstsq_examples() {
        let xi = dmatrix![1.0, 2.0; 3.0, 4.0; 5.0, 6.0];
        assert_relative_eq!(lstsq(&Mat::identity(3, 3), &xi).unwrap(), xi, epsilon = 1e-14);

        let h = dmatrix![1.0, 2.0; 3.0, -1.0; 0.5, 4.0; 2.0, 2.0];
        let theta = dmatrix![0.7; -1.3];
        assert_relative_eq!(lstsq(&h, &(&h * &theta)).unwrap(), theta, epsilon = 1e-10);

        let dup = dmatrix![1.0, 1.0; 2.0, 2.0; 3.0, 3.0];
        match lstsq(&dup, &dmatrix![1.0; 2.0; 3.0]) {
            Err(Error::RankDeficient { rank, cols, .. }) => assert_eq!((rank, cols), (1, 2)),
            other => panic!("expected rank deficiency, got {other:?}"),
        }
        assert!(matches!(
            lstsq(&Mat::zeros(4, 2), &Mat::zeros(4, 1)),
            Err(Error::RankDeficient { .. })
        ));
    }

    proptest! {
        #[test]
        fn kron_vec_identity(a in mat_strategy(3, 1), c in mat_strategy(4, 1), b in mat_strategy(3, 4)) {
            let lhs = (kron(&c.transpose(), &a.transpose()) * vec(&b))[0];
            let rhs = (a.transpose() * &b * &c)[(0, 0)];
            prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()));
        }

        #[test]
        fn hat_round_trip(m in sym_strategy(4)) {
            let h = hat(&m).unwrap();
            prop_assert!((unhat(&h) - &m).norm() <= 1e-12);
            prop_assert!((hat(&unhat(&h)).unwrap().entries - &h.entries).norm() <= 1e-12);
        }

        #[test]
        fn hat_quadratic_form(m in sym_strategy(3), x in proptest::collection::vec(-2.0f64..2.0, 3)) {
            let xv = Vector::from_vec(x.clone());
            let q = (xv.transpose() * &m * &xv)[0];
            let d = hat_state(&x).dot(&hat(&m).unwrap().entries);
            prop_assert!((q - d).abs() <= 1e-10);
        }

        #[test]
        fn lyapunov_plug_back(f in hurwitz_strategy(4), rhs in sym_strategy(4)) {
            let p = solve_lyapunov(&f, &rhs).unwrap();
            let res = f.transpose() * &p + &p * &f + &rhs;
            prop_assert!(res.norm() <= 1e-8 * rhs.norm().max(1.0));
            prop_assert!(asymmetry(&p) == 0.0);
        }

        #[test]
        fn right_pinv_is_right_inverse(c in mat_strategy(2, 4)) {
            prop_assume!(c.singular_values().min() > 1e-3);
            let cp = right_pinv(&c).unwrap();
            prop_assert!((&c * cp - Mat::identity(2, 2)).norm() <= 1e-10);
        }

        #[test]
        fn lstsq_residual_orthogonal(h in mat_strategy(9, 4), xi in mat_strategy(9, 2)) {
            prop_assume!(h.singular_values().min() > 1e-3);
            let theta = lstsq(&h, &xi).unwrap();
            let normal = h.transpose() * (&h * theta - &xi);
            prop_assert!(normal.norm() <= 1e-8 * h.norm() * xi.norm().max(1.0));
        }
    }
}
