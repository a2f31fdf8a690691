//! Game types, closed-loop construction, coupled Riccati residuals and the
//! Nash certificate.

use crate::error::{Error, Result};
use crate::numerics::{
    asymmetry, ingest_symmetric, inverse, right_pinv, stability_report, symmetrize, Mat,
    HURWITZ_MARGIN, SYM_TOL,
};

#[derive(Debug, Clone, PartialEq)]
pub struct PlayerChannel {
    /// Input matrix, n×m_i.
    pub b: Mat,
    /// Output matrix, p_i×n.
    pub c: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGameSystem {
    pub a: Mat,
    pub players: Vec<PlayerChannel>,
}

impl LinearGameSystem {
    /// Checks shapes only; rank and other assumptions are reported by [`validate_game`].
    pub fn new(a: Mat, players: Vec<PlayerChannel>) -> Result<Self> {
        let n = a.nrows();
        if !a.is_square() || n == 0 {
            return Err(Error::Dimension(format!("A must be square, got {:?}", a.shape())));
        }
        if players.is_empty() {
            return Err(Error::Dimension("at least one player is required".into()));
        }
        for (i, p) in players.iter().enumerate() {
            if p.b.nrows() != n || p.b.ncols() == 0 {
                return Err(Error::Dimension(format!(
                    "B_{} is {:?}, expected {n}×m with m ≥ 1",
                    i + 1,
                    p.b.shape()
                )));
            }
            if p.c.ncols() != n || p.c.nrows() == 0 {
                return Err(Error::Dimension(format!(
                    "C_{} is {:?}, expected p×{n} with p ≥ 1",
                    i + 1,
                    p.c.shape()
                )));
            }
        }
        Ok(Self { a, players })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn num_players(&self) -> usize {
        self.players.len()
    }

    pub fn b(&self, i: usize) -> &Mat {
        &self.players[i].b
    }

    pub fn c(&self, i: usize) -> &Mat {
        &self.players[i].c
    }

    pub fn m(&self, i: usize) -> usize {
        self.players[i].b.ncols()
    }

    pub fn p(&self, i: usize) -> usize {
        self.players[i].c.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostParameters {
    pub q: Vec<Mat>,
    /// `r[i][j]` is m_j×m_j.
    pub r: Vec<Vec<Mat>>,
}

impl CostParameters {
    /// Symmetrizes every block after checking it is symmetric to [`SYM_TOL`].
    pub fn new(q: Vec<Mat>, r: Vec<Vec<Mat>>) -> Result<Self> {
        let q = q
            .iter()
            .enumerate()
            .map(|(i, m)| ingest_symmetric(m, &format!("Q_{}", i + 1)))
            .collect::<Result<Vec<_>>>()?;
        let r = r
            .iter()
            .enumerate()
            .map(|(i, row)| {
                row.iter()
                    .enumerate()
                    .map(|(j, m)| ingest_symmetric(m, &format!("R_{}{}", i + 1, j + 1)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { q, r })
    }

    /// Cost table with zero state weights, as used before any Q is known.
    pub fn with_zero_q(n: usize, r: Vec<Vec<Mat>>) -> Result<Self> {
        Self::new(vec![Mat::zeros(n, n); r.len()], r)
    }

    pub fn r_inv(&self, i: usize) -> Result<Mat> {
        inverse(&self.r[i][i], &format!("R_{}{}", i + 1, i + 1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackProfile {
    /// `k[i]` is m_i×p_i.
    pub k: Vec<Mat>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueProfile {
    pub x: Vec<Mat>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub are: f64,
    pub exist: f64,
    pub hurwitz_margin: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            are: 1e-6,
            exist: 1e-8,
            hurwitz_margin: HURWITZ_MARGIN,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NashCertificate {
    /// Frobenius norm of each player's coupled Riccati residual.
    pub residual_norms: Vec<f64>,
    /// ‖B_iᵀX_i(I − C_i⁺C_i)‖_F.
    pub existence_defects: Vec<f64>,
    /// ‖K_iC_i − R_ii⁻¹B_iᵀX_i‖_F.
    pub gain_defects: Vec<f64>,
    pub spectral_abscissa: f64,
    pub passed: bool,
}

/// Lists every violated dimension, rank, symmetry and definiteness condition.
pub fn validate_game(sys: &LinearGameSystem, costs: &CostParameters) -> Vec<String> {
    let mut out = Vec::new();
    let n = sys.n();
    let np = sys.num_players();
    if !sys.a.is_square() {
        out.push(format!("A is {:?}, not square", sys.a.shape()));
        return out;
    }
    for i in 0..np {
        let (b, c) = (sys.b(i), sys.c(i));
        let id = i + 1;
        if b.nrows() != n || b.ncols() == 0 {
            out.push(format!("B_{id} has shape {:?}, expected {n}×m", b.shape()));
        }
        if c.ncols() != n || c.nrows() == 0 {
            out.push(format!("C_{id} has shape {:?}, expected p×{n}", c.shape()));
            continue;
        }
        if c.nrows() >= n {
            out.push(format!("C_{id} has p = {} ≥ n = {n}", c.nrows()));
        }
        if right_pinv(c).is_err() {
            out.push(format!("C_{id} not full row rank"));
        }
    }
    if costs.q.len() != np {
        out.push(format!("{} state weights for {np} players", costs.q.len()));
    }
    for (i, q) in costs.q.iter().enumerate() {
        if q.shape() != (n, n) {
            out.push(format!("Q_{} has shape {:?}, expected {n}×{n}", i + 1, q.shape()));
        } else if asymmetry(q) > SYM_TOL {
            out.push(format!("Q_{} not symmetric", i + 1));
        }
    }
    if costs.r.len() != np {
        out.push(format!("R table has {} rows for {np} players", costs.r.len()));
        return out;
    }
    for (i, row) in costs.r.iter().enumerate() {
        if row.len() != np {
            out.push(format!("R row {} has {} entries for {np} players", i + 1, row.len()));
            continue;
        }
        for (j, r) in row.iter().enumerate() {
            let mj = sys.m(j);
            let tag = format!("R_{}{}", i + 1, j + 1);
            if r.shape() != (mj, mj) {
                out.push(format!("{tag} has shape {:?}, expected {mj}×{mj}", r.shape()));
                continue;
            }
            if asymmetry(r) > SYM_TOL {
                out.push(format!("{tag} not symmetric"));
                continue;
            }
            if i == j {
                let min_eig = symmetrize(r).symmetric_eigenvalues().min();
                if min_eig <= 0.0 {
                    out.push(format!("{tag} not positive definite"));
                }
            }
        }
    }
    out
}

/// Reports players whose C_iB_i vanishes, which makes the centralized gradient zero.
pub fn output_input_coupling_violations(sys: &LinearGameSystem) -> Vec<String> {
    (0..sys.num_players())
        .filter(|&i| (sys.c(i) * sys.b(i)).norm() == 0.0)
        .map(|i| format!("C_{0}B_{0} is zero", i + 1))
        .collect()
}

fn check_profile(sys: &LinearGameSystem, fb: &FeedbackProfile) -> Result<()> {
    if fb.k.len() != sys.num_players() {
        return Err(Error::Dimension(format!(
            "{} gains for {} players",
            fb.k.len(),
            sys.num_players()
        )));
    }
    for (i, k) in fb.k.iter().enumerate() {
        if k.shape() != (sys.m(i), sys.p(i)) {
            return Err(Error::Dimension(format!(
                "K_{} has shape {:?}, expected {}×{}",
                i + 1,
                k.shape(),
                sys.m(i),
                sys.p(i)
            )));
        }
    }
    Ok(())
}

fn check_values(sys: &LinearGameSystem, values: &ValueProfile) -> Result<()> {
    let n = sys.n();
    if values.x.len() != sys.num_players() {
        return Err(Error::Dimension(format!(
            "{} value matrices for {} players",
            values.x.len(),
            sys.num_players()
        )));
    }
    for (i, x) in values.x.iter().enumerate() {
        if x.shape() != (n, n) {
            return Err(Error::Dimension(format!("X_{} has shape {:?}", i + 1, x.shape())));
        }
    }
    Ok(())
}

fn check_costs(sys: &LinearGameSystem, costs: &CostParameters) -> Result<()> {
    let v = validate_game(sys, costs);
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::Dimension(v.join("; ")))
    }
}

/// State feedback F_j = K_jC_j for every player.
pub fn state_feedback(sys: &LinearGameSystem, fb: &FeedbackProfile) -> Result<Vec<Mat>> {
    check_profile(sys, fb)?;
    Ok((0..sys.num_players()).map(|j| &fb.k[j] * sys.c(j)).collect())
}

/// A − Σ B_iK_iC_i.
pub fn closed_loop(sys: &LinearGameSystem, fb: &FeedbackProfile) -> Result<Mat> {
    let f = state_feedback(sys, fb)?;
    Ok(closed_loop_state(sys, &f))
}

pub(crate) fn closed_loop_state(sys: &LinearGameSystem, f: &[Mat]) -> Mat {
    let mut acl = sys.a.clone();
    for (j, fj) in f.iter().enumerate() {
        acl -= sys.b(j) * fj;
    }
    acl
}

/// A − Σ B_jR_jj⁻¹B_jᵀX_j.
pub fn value_closed_loop(
    sys: &LinearGameSystem,
    costs: &CostParameters,
    values: &ValueProfile,
) -> Result<Mat> {
    check_values(sys, values)?;
    let mut acl = sys.a.clone();
    for j in 0..sys.num_players() {
        let b = sys.b(j);
        acl -= b * costs.r_inv(j)? * b.transpose() * &values.x[j];
    }
    Ok(acl)
}

/// Left side of player i's coupled Riccati equation.
pub fn are_residual(
    sys: &LinearGameSystem,
    costs: &CostParameters,
    values: &ValueProfile,
    i: usize,
) -> Result<Mat> {
    check_values(sys, values)?;
    check_costs(sys, costs)?;
    let x = &values.x;
    let xi = &x[i];
    let mut res = sys.a.transpose() * xi + xi * &sys.a + &costs.q[i];
    for j in 0..sys.num_players() {
        let b = sys.b(j);
        let rjj_inv = costs.r_inv(j)?;
        let s = b * &rjj_inv * b.transpose();
        if j == i {
            res -= xi * &s * xi;
        } else {
            res -= xi * &s * &x[j];
            res -= &x[j] * &s * xi;
            let g = &rjj_inv * b.transpose() * &x[j];
            res += g.transpose() * &costs.r[i][j] * g;
        }
    }
    Ok(res)
}

/// ‖B_iᵀX_i(I − C_i⁺C_i)‖_F.
pub fn existence_defect(sys: &LinearGameSystem, x: &Mat, i: usize) -> Result<f64> {
    let n = sys.n();
    let cp = right_pinv(sys.c(i))?;
    let proj = Mat::identity(n, n) - cp * sys.c(i);
    Ok((sys.b(i).transpose() * x * proj).norm())
}

pub fn verify_nash(
    sys: &LinearGameSystem,
    costs: &CostParameters,
    values: &ValueProfile,
    fb: &FeedbackProfile,
    tol: &Tolerances,
) -> Result<NashCertificate> {
    check_values(sys, values)?;
    check_profile(sys, fb)?;
    check_costs(sys, costs)?;
    let np = sys.num_players();
    let mut residual_norms = Vec::with_capacity(np);
    let mut existence_defects = Vec::with_capacity(np);
    let mut gain_defects = Vec::with_capacity(np);
    for i in 0..np {
        residual_norms.push(are_residual(sys, costs, values, i)?.norm());
        existence_defects.push(existence_defect(sys, &values.x[i], i)?);
        let implied = costs.r_inv(i)? * sys.b(i).transpose() * &values.x[i];
        gain_defects.push((&fb.k[i] * sys.c(i) - implied).norm());
    }
    let spectral_abscissa = stability_report(&closed_loop(sys, fb)?, tol.hurwitz_margin)
        .map(|r| r.spectral_abscissa)
        .unwrap_or(f64::NAN);
    let passed = residual_norms.iter().all(|r| *r <= tol.are)
        && existence_defects.iter().all(|d| *d <= tol.exist)
        && gain_defects.iter().all(|d| *d <= tol.exist)
        && spectral_abscissa < -tol.hurwitz_margin;
    Ok(NashCertificate {
        residual_norms,
        existence_defects,
        gain_defects,
        spectral_abscissa,
        passed,
    })
}

/// Trades cross weights against state weights without moving the equilibrium:
/// Q'_i = Q_i + Σ_{j≠i} F_jᵀΔR_ijF_j and R'_ij = R_ij − ΔR_ij.
pub fn generate_equivalent_costs(
    sys: &LinearGameSystem,
    costs: &CostParameters,
    values: &ValueProfile,
    fb: &FeedbackProfile,
    delta_r: &[Vec<Mat>],
) -> Result<CostParameters> {
    check_values(sys, values)?;
    check_costs(sys, costs)?;
    let f = state_feedback(sys, fb)?;
    let np = sys.num_players();
    if delta_r.len() != np || delta_r.iter().any(|row| row.len() != np) {
        return Err(Error::Dimension(format!("ΔR must be a {np}×{np} table")));
    }
    let mut q = costs.q.clone();
    let mut r = costs.r.clone();
    for i in 0..np {
        for j in 0..np {
            let d = &delta_r[i][j];
            if d.shape() != (sys.m(j), sys.m(j)) {
                return Err(Error::Dimension(format!(
                    "ΔR_{}{} has shape {:?}",
                    i + 1,
                    j + 1,
                    d.shape()
                )));
            }
            if i == j {
                if d.iter().any(|v| *v != 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "ΔR_{0}{0} must be zero; own-input weights are fixed",
                        i + 1
                    )));
                }
                continue;
            }
            let d = ingest_symmetric(d, &format!("ΔR_{}{}", i + 1, j + 1))?;
            q[i] += f[j].transpose() * &d * &f[j];
            r[i][j] -= d;
        }
    }
    CostParameters::new(q, r)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use nalgebra::dmatrix;

    pub fn va_system() -> LinearGameSystem {
        let b1 = dmatrix![1.0; 0.0];
        let b2 = dmatrix![0.0; 1.0];
        LinearGameSystem::new(
            dmatrix![1.0, 1.0; 0.0, 2.0],
            vec![
                PlayerChannel { c: b1.transpose(), b: b1 },
                PlayerChannel { c: b2.transpose(), b: b2 },
            ],
        )
        .unwrap()
    }

    pub fn va_r() -> Vec<Vec<Mat>> {
        vec![
            vec![dmatrix![1.0], dmatrix![2.0]],
            vec![dmatrix![0.5], dmatrix![1.0]],
        ]
    }

    pub fn vb_system() -> LinearGameSystem {
        let b1 = dmatrix![0.0; 1.0; 0.0];
        let b2 = dmatrix![0.0; 0.0; 1.0];
        LinearGameSystem::new(
            Mat::from_diagonal(&nalgebra::dvector![-3.0, 0.5, 4.0]),
            vec![
                PlayerChannel { c: b1.transpose(), b: b1 },
                PlayerChannel { c: b2.transpose(), b: b2 },
            ],
        )
        .unwrap()
    }

    pub fn unit_r(np: usize) -> Vec<Vec<Mat>> {
        (0..np)
            .map(|i| (0..np).map(|j| dmatrix![if i == j { 1.0 } else { 0.0 }]).collect())
            .collect()
    }

    pub fn scalar_system(a: f64) -> LinearGameSystem {
        // One player with a 2-state plant whose second state is decoupled and stable,
        // so that C = e1ᵀ satisfies p < n.
        LinearGameSystem::new(
            dmatrix![a, 0.0; 0.0, -1.0],
            vec![PlayerChannel { b: dmatrix![1.0; 0.0], c: dmatrix![1.0, 0.0] }],
        )
        .unwrap()
    }
}
