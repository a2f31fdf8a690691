//! Model-free pipeline: joint estimation of P_i and B_jᵀP_i from trajectory
//! data, input-matrix recovery, data-driven Newton stabilization and the
//! data-driven state-weight update.
//!
//! Every equation here is an integral identity along the logged trajectory:
//! for a symmetric P and any gains L_j,
//! `δ(xᵀPx) = ∫xᵀ(FᵀP + PF)x + 2Σ_j ∫(u_j + L_jx)ᵀB_jᵀPx` with
//! `F = A − Σ_j B_jL_j`, which turns each Lyapunov-type equation into a
//! least-squares problem over the data matrices.

use crate::error::{Error, Result, StageExt};
use crate::inverse_mb::{
    correct_value_matrix, feedback_error, gradient_step, InverseRecord, InverseTrace, Snapshot,
    SolverConfig,
};
use crate::model::{
    closed_loop_state, state_feedback, CostParameters, FeedbackProfile, LinearGameSystem,
    PlayerChannel, ValueProfile,
};
use crate::numerics::{
    hat, hat_len, inverse, kron, lstsq_vec, norm2, right_pinv, stability_report, symmetrize,
    unhat_slice, unvec, vec, Mat, Vector, HURWITZ_MARGIN,
};
use crate::stabilize::{implied_gain, SeedSign, SeedWeight};
use crate::trajectory::DataMatrices;

/// Joint estimate of P_i and the blocks B_jᵀP_i.
#[derive(Debug, Clone, PartialEq)]
pub struct MfEstimate {
    pub p: Mat,
    /// `btp[j]` is B_jᵀP_i, m_j×n.
    pub btp: Vec<Mat>,
    pub residual_norm: f64,
    pub condition: f64,
}

/// Output-side data of the game known to the model-free solver.
#[derive(Debug, Clone)]
pub struct KnownChannels<'a> {
    pub c: &'a [Mat],
    /// `r[i][j]`, m_j×m_j.
    pub r: &'a [Vec<Mat>],
}

/// Rows of ∫(u_j + L_jx)ᵀM x as a map of vec(M): I_xu_j + I_xx(I⊗L_jᵀ).
pub fn input_block(data: &DataMatrices, j: usize, l: &Mat) -> Result<Mat> {
    let n = data.n;
    let m = data.i_xu[j].ncols() / n;
    if l.shape() != (m, n) {
        return Err(Error::Dimension(format!(
            "gain for player {} has shape {:?}, expected {m}×{n}",
            j + 1,
            l.shape()
        )));
    }
    Ok(&data.i_xu[j] + &data.i_xx * kron(&Mat::identity(n, n), &l.transpose()))
}

fn regressor(data: &DataMatrices, gains: &[Mat]) -> Result<Mat> {
    let rows = data.intervals();
    let cols = data.unknowns();
    let mut h = Mat::zeros(rows, cols);
    let nh = data.delta_xx.ncols();
    h.columns_mut(0, nh).copy_from(&data.delta_xx);
    let mut off = nh;
    for (j, l) in gains.iter().enumerate() {
        let blk = input_block(data, j, l)? * -2.0;
        h.columns_mut(off, blk.ncols()).copy_from(&blk);
        off += blk.ncols();
    }
    Ok(h)
}

fn split_theta(theta: &[f64], n: usize, dims: &[usize]) -> (Mat, Vec<Mat>) {
    let nh = hat_len(n);
    let p = unhat_slice(&theta[..nh], n);
    let mut off = nh;
    let blocks = dims
        .iter()
        .map(|m| {
            let b = unvec(&theta[off..off + m * n], *m, n);
            off += m * n;
            b
        })
        .collect();
    (p, blocks)
}

fn check_channels(data: &DataMatrices, known: &KnownChannels, k_target: Option<&FeedbackProfile>) -> Result<()> {
    let np = data.i_xu.len();
    let dims = data.input_dims();
    if known.c.len() != np || known.r.len() != np {
        return Err(Error::Dimension(format!("data has {np} input blocks")));
    }
    for (i, c) in known.c.iter().enumerate() {
        if c.ncols() != data.n {
            return Err(Error::Dimension(format!("C_{} has {} columns", i + 1, c.ncols())));
        }
        if known.r[i].len() != np {
            return Err(Error::Dimension(format!("R row {} length", i + 1)));
        }
        for (j, r) in known.r[i].iter().enumerate() {
            if r.shape() != (dims[j], dims[j]) {
                return Err(Error::Dimension(format!("R_{}{} shape {:?}", i + 1, j + 1, r.shape())));
            }
        }
        if let Some(k) = k_target {
            if k.k[i].shape() != (dims[i], c.nrows()) {
                return Err(Error::Dimension(format!("K_{} shape {:?}", i + 1, k.k[i].shape())));
            }
        }
    }
    Ok(())
}

fn seed_weight(c: &Mat, n: usize, weight: SeedWeight) -> Mat {
    let w = c.transpose() * c;
    match weight {
        SeedWeight::OutputGram => w,
        SeedWeight::OutputGramPlusIdentity => w + Mat::identity(n, n),
    }
}

/// Data-driven seeding solve for player `i`.
///
/// `previous[j]` for j < i supplies the already estimated B_jᵀP_j, whose
/// feedback R_jj⁻¹B_jᵀP_j replaces the target law of player j.
#[allow(clippy::too_many_arguments)]
pub fn mf_seed_solve(
    data: &DataMatrices,
    known: &KnownChannels,
    k_target: &FeedbackProfile,
    i: usize,
    previous: &[MfEstimate],
    weight: SeedWeight,
    sign: SeedSign,
) -> Result<MfEstimate> {
    check_channels(data, known, Some(k_target))?;
    let n = data.n;
    let np = data.i_xu.len();
    if previous.len() < i {
        return Err(Error::InvalidArgument(format!(
            "seed solve for player {} needs the estimates of players 1..{}",
            i + 1,
            i
        )));
    }
    let gains = (0..np)
        .map(|j| {
            if j < i {
                let r_inv = inverse(&known.r[j][j], "R_jj")?;
                Ok(r_inv * &previous[j].btp[j])
            } else {
                Ok(&k_target.k[j] * &known.c[j])
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let h = regressor(data, &gains)?;
    let f = &k_target.k[i] * &known.c[i];
    let gain_term = f.transpose() * &known.r[i][i] * &f;
    let w = seed_weight(&known.c[i], n, weight);
    let rhs = match sign {
        SeedSign::Plus => w + gain_term,
        SeedSign::Printed => w - gain_term,
    };
    let xi = -(&data.i_xx * vec(&rhs));
    let sol = lstsq_vec(&h, &xi, &format!("seed regressor of player {}", i + 1))?;
    let (p, btp) = split_theta(sol.theta.as_slice(), n, &data.input_dims());
    Ok(MfEstimate {
        p,
        btp,
        residual_norm: sol.residual_norm,
        condition: sol.condition,
    })
}

/// B_j = ((B_jᵀP)P⁻¹)ᵀ for every block of one estimate.
pub fn estimate_b(est: &MfEstimate) -> Result<Vec<Mat>> {
    let p_inv = inverse(&est.p, "estimated P")?;
    let cond = norm2(&est.p) * norm2(&p_inv);
    if cond > 1e10 {
        return Err(Error::Singular(format!("estimated P (condition {cond:.3e})")));
    }
    Ok(est.btp.iter().map(|b| (b * &p_inv).transpose()).collect())
}

/// Data form of player i's Newton residual, one entry per interval.
///
/// `x` holds the latest value matrices: X_j^{(k+1)} for j < i, X_j^{(k)} otherwise.
pub fn mf_newton_residual(
    data: &DataMatrices,
    known: &KnownChannels,
    b_hat: &[Mat],
    x: &[Mat],
    i: usize,
) -> Result<Vector> {
    check_channels(data, known, None)?;
    let np = data.i_xu.len();
    let c = &known.c[i];
    let r = &known.r[i][i];
    let r_inv = inverse(r, "R_ii")?;
    let xi = &x[i];
    let f_hat = &r_inv * b_hat[i].transpose() * xi * right_pinv(c)? * c;
    let w = c.transpose() * c + f_hat.transpose() * r * &f_hat;
    let mut rx = &data.i_xx * vec(&w) + &data.delta_xx * hat(xi)?.entries;
    for j in 0..np {
        let l = if j == i {
            f_hat.clone()
        } else {
            inverse(&known.r[j][j], "R_jj")? * b_hat[j].transpose() * &x[j]
        };
        rx -= input_block(data, j, &l)? * vec(&(b_hat[j].transpose() * xi)) * 2.0;
    }
    Ok(rx)
}

/// Solves the data form of the Newton Lyapunov equation and returns X_i + P_i.
pub fn mf_newton_step(
    data: &DataMatrices,
    known: &KnownChannels,
    b_hat: &[Mat],
    x: &[Mat],
    rx: &Vector,
    i: usize,
) -> Result<Mat> {
    Ok(&x[i] + mf_newton_update(data, known, b_hat, x, rx, i)?)
}

fn mf_newton_update(
    data: &DataMatrices,
    known: &KnownChannels,
    b_hat: &[Mat],
    x: &[Mat],
    rx: &Vector,
    i: usize,
) -> Result<Mat> {
    let np = data.i_xu.len();
    let gains = (0..np)
        .map(|j| Ok(inverse(&known.r[j][j], "R_jj")? * b_hat[j].transpose() * &x[j]))
        .collect::<Result<Vec<_>>>()?;
    let h = regressor(data, &gains)?;
    let sol = lstsq_vec(&h, &(-rx), &format!("Newton regressor of player {}", i + 1))?;
    Ok(unhat_slice(&sol.theta.as_slice()[..hat_len(data.n)], data.n))
}

/// Norm of the least-squares fit of hat(R(X_i)) to the residual rows.
pub fn newton_criterion(data: &DataMatrices, rx: &Vector) -> Result<f64> {
    Ok(lstsq_vec(&data.i_qx, rx, "quadratic-state regressor")?.theta.norm())
}

/// Data form of the state-weight update for player i.
pub fn mf_update_cost_q(
    data: &DataMatrices,
    known: &KnownChannels,
    b_hat: &[Mat],
    values: &ValueProfile,
    fb: &FeedbackProfile,
    i: usize,
) -> Result<Mat> {
    check_channels(data, known, Some(fb))?;
    let np = data.i_xu.len();
    let xi = &values.x[i];
    let f: Vec<Mat> = (0..np).map(|j| &fb.k[j] * &known.c[j]).collect();
    let mut cross = Mat::zeros(data.n, data.n);
    for j in 0..np {
        cross += f[j].transpose() * &known.r[i][j] * &f[j];
    }
    let mut omega = -(&data.i_xx * vec(&cross)) - &data.delta_xx * hat(xi)?.entries;
    for j in 0..np {
        omega += input_block(data, j, &f[j])? * vec(&(b_hat[j].transpose() * xi)) * 2.0;
    }
    let sol = lstsq_vec(&data.i_qx, &omega, "quadratic-state regressor")?;
    Ok(unhat_slice(sol.theta.as_slice(), data.n))
}

#[derive(Debug, Clone)]
pub struct MfConfig {
    /// Residual threshold of the data-driven Newton loop.
    pub eps: f64,
    pub max_newton: usize,
    /// Stagnation stop: every update satisfies ‖P_i‖ ≤ step_tol·max(1, ‖X_i‖).
    pub step_tol: f64,
    pub seed_weight: SeedWeight,
    pub seed_sign: SeedSign,
    /// Update Q at every gradient iteration instead of once at the end.
    pub q_every_iteration: bool,
    pub solver: SolverConfig,
}

impl MfConfig {
    pub fn new(solver: SolverConfig) -> Self {
        Self {
            eps: 1e-6,
            max_newton: 100,
            step_tol: 1e-9,
            seed_weight: SeedWeight::OutputGramPlusIdentity,
            seed_sign: SeedSign::Plus,
            q_every_iteration: false,
            solver,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfNewtonRecord {
    pub k: usize,
    pub i: usize,
    pub criterion: f64,
    pub step_norm: f64,
}

#[derive(Debug, Clone)]
pub struct MfSolution {
    pub costs: CostParameters,
    pub values: ValueProfile,
    pub feedback: FeedbackProfile,
    pub b_hat: Vec<Mat>,
    pub seed: Vec<MfEstimate>,
    pub newton: Vec<MfNewtonRecord>,
    /// Values and gains at the end of the data-driven Newton loop.
    pub stabilized: (ValueProfile, FeedbackProfile),
    pub trace: InverseTrace,
    pub warnings: Vec<String>,
}

impl MfSolution {
    pub fn iterations(&self) -> usize {
        self.trace.records.len()
    }
}

/// Estimated game: the recovered input matrices with the known outputs.
/// The plant matrix is unknown and set to zero; only B and C are read.
fn estimated_system(b_hat: &[Mat], c: &[Mat]) -> Result<LinearGameSystem> {
    let n = c[0].ncols();
    LinearGameSystem::new(
        Mat::zeros(n, n),
        b_hat
            .iter()
            .zip(c)
            .map(|(b, c)| PlayerChannel { b: b.clone(), c: c.clone() })
            .collect(),
    )
}

/// Seeds all players and runs the data-driven Newton loop.
pub fn mf_stabilize(
    data: &DataMatrices,
    known: &KnownChannels,
    k_target: &FeedbackProfile,
    config: &MfConfig,
) -> Result<(Vec<MfEstimate>, Vec<Mat>, ValueProfile, Vec<MfNewtonRecord>)> {
    let np = data.i_xu.len();
    let mut seed: Vec<MfEstimate> = Vec::with_capacity(np);
    for i in 0..np {
        let est = mf_seed_solve(data, known, k_target, i, &seed, config.seed_weight, config.seed_sign)
            .stage("mf-seed")?;
        seed.push(est);
    }
    let b_hat = seed
        .iter()
        .enumerate()
        .map(|(j, est)| estimate_b(est).map(|bs| bs[j].clone()))
        .collect::<Result<Vec<_>>>()
        .stage("estimate-b")?;
    let mut x: Vec<Mat> = seed.iter().map(|e| e.p.clone()).collect();
    let mut records = Vec::new();
    let mut done = false;
    for k in 0..config.max_newton {
        let mut worst: f64 = 0.0;
        let mut stagnant = true;
        for i in 0..np {
            let rx = mf_newton_residual(data, known, &b_hat, &x, i).stage("mf-newton")?;
            let criterion = newton_criterion(data, &rx).stage("mf-newton")?;
            let p = mf_newton_update(data, known, &b_hat, &x, &rx, i).stage("mf-newton")?;
            let step_norm = p.norm();
            if !step_norm.is_finite() {
                return Err(Error::NewtonStep {
                    player: i + 1,
                    k,
                    reason: "non-finite update".into(),
                })
                .stage("mf-newton");
            }
            stagnant &= step_norm <= config.step_tol * x[i].norm().max(1.0);
            x[i] = symmetrize(&(&x[i] + p));
            worst = worst.max(criterion);
            records.push(MfNewtonRecord { k, i, criterion, step_norm });
        }
        if worst < config.eps || stagnant {
            done = true;
            break;
        }
    }
    if !done {
        let last = records.iter().rev().take(np).map(|r| r.criterion).fold(0.0, f64::max);
        return Err(Error::MaxIterations {
            what: "data-driven Newton".into(),
            cap: config.max_newton,
            last,
        })
        .stage("mf-newton");
    }
    Ok((seed, b_hat, ValueProfile { x }, records))
}

/// Full model-free pipeline over one batch of trajectory data.
///
/// `monitor`, when given, is only used to annotate the trace with the
/// closed-loop spectral abscissa of each iterate.
pub fn solve_inverse_model_free(
    data: &DataMatrices,
    known: &KnownChannels,
    k_target: &FeedbackProfile,
    config: &MfConfig,
    monitor: Option<&LinearGameSystem>,
) -> Result<MfSolution> {
    let np = data.i_xu.len();
    config.solver.validate(np)?;
    check_channels(data, known, Some(k_target))?;
    if !data.has_full_excitation() {
        return Err(Error::RankDeficient {
            what: "excitation regressor".into(),
            rank: data.excitation_rank,
            cols: data.unknowns(),
            sigma_min: f64::NAN,
            sigma_max: f64::NAN,
        })
        .stage("data");
    }
    let mut warnings = Vec::new();
    let (seed, b_hat, values0, newton) = mf_stabilize(data, known, k_target, config)?;
    for (i, est) in seed.iter().enumerate() {
        if est.p.symmetric_eigenvalues().min() <= 0.0 {
            warnings.push(format!("seed estimate P_{} is not positive definite", i + 1));
        }
    }
    let sys = estimated_system(&b_hat, known.c)?;
    let mut costs = CostParameters::with_zero_q(data.n, known.r.to_vec())?;
    let mut k = FeedbackProfile {
        k: (0..np)
            .map(|i| implied_gain(&sys, &costs, &values0.x[i], i))
            .collect::<Result<Vec<_>>>()?,
    };
    let stabilized = (values0.clone(), k.clone());
    let solver = &config.solver;
    let correct_all = |x: &mut Vec<Mat>, k: &FeedbackProfile, costs: &CostParameters| -> Result<()> {
        for i in 0..np {
            x[i] = correct_value_matrix(
                &sys,
                costs,
                &x[i],
                &k.k[i],
                i,
                solver.alpha[i],
                solver.correction_tol,
                solver.max_inner,
            )
            .stage("correct")?;
        }
        Ok(())
    };
    let update_q = |values: &ValueProfile, k: &FeedbackProfile| -> Result<Vec<Mat>> {
        (0..np)
            .map(|i| mf_update_cost_q(data, known, &b_hat, values, k, i))
            .collect::<Result<Vec<_>>>()
            .stage("mf-q")
    };
    let abscissa_of = |k: &FeedbackProfile| -> f64 {
        monitor
            .and_then(|m| state_feedback(m, k).ok().map(|f| closed_loop_state(m, &f)))
            .and_then(|acl| stability_report(&acl, HURWITZ_MARGIN).ok())
            .map_or(f64::NAN, |r| r.spectral_abscissa)
    };
    let mut x = values0.x;
    correct_all(&mut x, &k, &costs)?;
    let mut values = ValueProfile { x };
    if config.q_every_iteration {
        costs.q = update_q(&values, &k)?;
    }
    let mut trace = InverseTrace {
        stabilization: Default::default(),
        initial: solver.record_snapshots.then(|| Snapshot {
            x: values.x.clone(),
            k: k.k.clone(),
            q: costs.q.clone(),
        }),
        records: Vec::new(),
    };
    let mut s = 0;
    loop {
        let errors = (0..np)
            .map(|i| {
                feedback_error(&sys, &costs, &values.x[i], &k_target.k[i], i).map(|e| norm2(&(&e * e.transpose())))
            })
            .collect::<Result<Vec<_>>>()?;
        if errors.iter().zip(&solver.delta).all(|(e, d)| e <= d) {
            break;
        }
        if s >= solver.max_outer {
            return Err(Error::MaxIterations {
                what: "inverse gradient loop".into(),
                cap: solver.max_outer,
                last: errors.iter().copied().fold(0.0, f64::max),
            })
            .stage("gradient");
        }
        let mut next = Vec::with_capacity(np);
        for i in 0..np {
            next.push(
                gradient_step(&sys, &costs, &values.x[i], &k_target.k[i], i, solver.beta[i], solver.gradient_form)
                    .stage("gradient")?,
            );
        }
        k = FeedbackProfile {
            k: (0..np)
                .map(|i| implied_gain(&sys, &costs, &next[i], i))
                .collect::<Result<Vec<_>>>()?,
        };
        correct_all(&mut next, &k, &costs)?;
        values = ValueProfile { x: next };
        if config.q_every_iteration {
            costs.q = update_q(&values, &k)?;
        }
        let error_norms = (0..np)
            .map(|i| {
                feedback_error(&sys, &costs, &values.x[i], &k_target.k[i], i).map(|e| norm2(&(&e * e.transpose())))
            })
            .collect::<Result<Vec<_>>>()?;
        trace.records.push(InverseRecord {
            s,
            error_norms,
            spectral_abscissa: abscissa_of(&k),
            snapshot: solver.record_snapshots.then(|| Snapshot {
                x: values.x.clone(),
                k: k.k.clone(),
                q: costs.q.clone(),
            }),
        });
        s += 1;
    }
    if !config.q_every_iteration {
        costs.q = update_q(&values, &k)?;
    }
    Ok(MfSolution {
        costs,
        values,
        feedback: k,
        b_hat,
        seed,
        newton,
        stabilized,
        trace,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inverse_mb::{solve_inverse_model_based, update_cost_q, GradientForm};
    use crate::model::fixtures::*;
    use crate::stabilize::{newton_plant, newton_residual, newton_step, seed_values, StabilizeConfig};
    use crate::trajectory::{exact_data, make_noise, Noise, NoiseSpec};
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;

    fn vb_exact() -> (LinearGameSystem, FeedbackProfile, DataMatrices) {
        let sys = vb_system();
        let kd = FeedbackProfile { k: vec![dmatrix![4.0], dmatrix![6.0]] };
        let spec = NoiseSpec { amplitude: 4.0, num_terms: 5, freq_range: (-15.0, 15.0), seed: 5 };
        let noise: Vec<Noise> = (0..2).map(|j| make_noise(&spec.for_player(j), 1).unwrap()).collect();
        let data = exact_data(&sys, &kd, &noise, &[1.0; 3], 0.05, 30).unwrap();
        (sys, kd, data)
    }

    fn channels(sys: &LinearGameSystem) -> Vec<Mat> {
        sys.players.iter().map(|p| p.c.clone()).collect()
    }

    #[test]
    fn seed_matches_model_based_on_exact_data() {
        let (sys, kd, data) = vb_exact();
        let c = channels(&sys);
        let r = unit_r(2);
        let known = KnownChannels { c: &c, r: &r };
        let mut est = Vec::new();
        for i in 0..2 {
            let e = mf_seed_solve(&data, &known, &kd, i, &est, SeedWeight::OutputGramPlusIdentity, SeedSign::Plus)
                .unwrap();
            est.push(e);
        }
        let costs = CostParameters::with_zero_q(3, r.clone()).unwrap();
        let f = state_feedback(&sys, &kd).unwrap();
        let p = seed_values(&sys, &costs, &f, &SeedWeight::OutputGramPlusIdentity.matrices(&sys), SeedSign::Plus)
            .unwrap();
        for i in 0..2 {
            assert!((&est[i].p - &p.x[i]).norm() < 1e-6, "{}", (&est[i].p - &p.x[i]).norm());
            let b = estimate_b(&est[i]).unwrap();
            for j in 0..2 {
                assert!((&b[j] - sys.b(j)).norm() < 1e-6);
            }
        }
        assert_relative_eq!(est[0].p[(1, 1)], 18.0 / 7.0, epsilon = 1e-6);
    }

    #[test]
    fn estimate_b_identities() {
        let p = dmatrix![2.0, 0.3; 0.3, 1.0];
        let b = dmatrix![0.5; -1.0];
        let est = MfEstimate { p: p.clone(), btp: vec![b.transpose() * &p], residual_norm: 0.0, condition: 1.0 };
        assert!((&estimate_b(&est).unwrap()[0] - &b).norm() < 1e-10);
        let est = MfEstimate { p: Mat::identity(2, 2), btp: vec![dmatrix![1.0, 2.0]], residual_norm: 0.0, condition: 1.0 };
        assert_eq!(estimate_b(&est).unwrap()[0], dmatrix![1.0; 2.0]);
        let est = MfEstimate { p: Mat::zeros(2, 2), btp: vec![dmatrix![1.0, 2.0]], residual_norm: 0.0, condition: 1.0 };
        assert!(estimate_b(&est).is_err());
    }

    #[test]
    fn residual_and_step_match_model_based() {
        let (sys, _, data) = vb_exact();
        let c = channels(&sys);
        let r = unit_r(2);
        let known = KnownChannels { c: &c, r: &r };
        let costs = CostParameters::with_zero_q(3, r.clone()).unwrap();
        let b: Vec<Mat> = (0..2).map(|j| sys.b(j).clone()).collect();

        let zero = vec![Mat::zeros(3, 3); 2];
        let rx = mf_newton_residual(&data, &known, &b, &zero, 0).unwrap();
        assert!((rx - &data.i_xx * vec(&(c[0].transpose() * &c[0]))).norm() < 1e-12);

        let x = vec![
            Mat::from_diagonal(&nalgebra::dvector![0.2, 2.4, 0.3]),
            Mat::from_diagonal(&nalgebra::dvector![0.2, 0.25, 9.0]),
        ];
        for i in 0..2 {
            let a_i = newton_plant(&sys, &costs, &x, &x[..i], i).unwrap();
            let (_, rmat) = newton_residual(&sys, &costs, &x[i], &a_i, i).unwrap();
            let rx = mf_newton_residual(&data, &known, &b, &x, i).unwrap();
            let expect = &data.i_qx * hat(&rmat).unwrap().entries;
            assert!((&rx - expect).norm() <= 1e-8 * rx.norm().max(1.0));
            let mb = newton_step(&sys, &costs, &x[i], &a_i, &rmat, i, 0).unwrap();
            let mf = mf_newton_step(&data, &known, &b, &x, &rx, i).unwrap();
            assert!((mb - mf).norm() < 1e-4);
        }
        let rx = Vector::zeros(data.intervals());
        assert_eq!(mf_newton_step(&data, &known, &b, &x, &rx, 0).unwrap(), x[0]);
    }

    #[test]
    fn q_update_matches_model_based() {
        let (sys, kd, data) = vb_exact();
        let c = channels(&sys);
        let r = vec![vec![dmatrix![1.0], dmatrix![0.4]], vec![dmatrix![-0.3], dmatrix![2.0]]];
        let known = KnownChannels { c: &c, r: &r };
        let costs = CostParameters::with_zero_q(3, r.clone()).unwrap();
        let b: Vec<Mat> = (0..2).map(|j| sys.b(j).clone()).collect();
        let values = ValueProfile {
            x: vec![dmatrix![1.0, 0.2, 0.0; 0.2, 4.0, 0.1; 0.0, 0.1, 2.0], Mat::identity(3, 3) * 0.7],
        };
        for i in 0..2 {
            let mb = update_cost_q(&sys, &costs, &values, &kd, i).unwrap();
            let mf = mf_update_cost_q(&data, &known, &b, &values, &kd, i).unwrap();
            assert!((mb - mf).norm() < 1e-4);
        }
        let zero_v = ValueProfile { x: vec![Mat::zeros(3, 3); 2] };
        let zero_k = FeedbackProfile { k: vec![dmatrix![0.0]; 2] };
        let r0 = unit_r(2);
        let known0 = KnownChannels { c: &c, r: &r0 };
        assert!(mf_update_cost_q(&data, &known0, &b, &zero_v, &zero_k, 0).unwrap().norm() < 1e-12);
    }

    #[test]
    fn pipeline_matches_model_based_on_exact_data() {
        let (sys, kd, data) = vb_exact();
        let c = channels(&sys);
        let r = unit_r(2);
        let known = KnownChannels { c: &c, r: &r };
        let mut solver = SolverConfig::uniform(2, 0.45, 0.6);
        solver.alpha = vec![0.45, 0.9];
        let mut cfg = MfConfig::new(solver.clone());
        cfg.eps = 1e-9;
        let mf = solve_inverse_model_free(&data, &known, &kd, &cfg, Some(&sys)).unwrap();
        solver.stabilize = StabilizeConfig { weight: SeedWeight::OutputGramPlusIdentity, ..Default::default() };
        let mb = solve_inverse_model_based(&sys, &r, &kd, &solver).unwrap();
        for i in 0..2 {
            assert!((&mf.values.x[i] - &mb.values.x[i]).norm() < 1e-4);
            assert!((&mf.costs.q[i] - &mb.costs.q[i]).norm() < 1e-4);
        }
        assert_relative_eq!(mf.stabilized.1.k[0][(0, 0)], (1.0 + 5f64.sqrt()) / 2.0, epsilon = 1e-6);
        assert_eq!(mf.iterations(), mb.iterations());
        assert!(mf.trace.records.iter().all(|r| r.spectral_abscissa < 0.0));
    }

    #[test]
    fn printed_form_pipeline_on_exact_data() {
        let (sys, kd, data) = vb_exact();
        let c = channels(&sys);
        let r = unit_r(2);
        let known = KnownChannels { c: &c, r: &r };
        let mut solver = SolverConfig::uniform(2, 0.45, 0.6);
        solver.alpha = vec![0.45, 0.9];
        solver.gradient_form = GradientForm::PrintedScalar;
        let mf = solve_inverse_model_free(&data, &known, &kd, &MfConfig::new(solver), None).unwrap();
        assert_relative_eq!(mf.feedback.k[0][(0, 0)], 4.0, epsilon = 1e-3);
        assert_relative_eq!(mf.feedback.k[1][(0, 0)], 6.0, epsilon = 1e-3);
        assert!(mf.trace.records.iter().all(|r| r.spectral_abscissa.is_nan()));
    }

    #[test]
    fn zero_excitation_is_rejected() {
        let (sys, kd, _) = vb_exact();
        let data = exact_data(&sys, &kd, &[Noise::zero(1), Noise::zero(1)], &[0.0; 3], 0.05, 30).unwrap();
        let c = channels(&sys);
        let r = unit_r(2);
        let known = KnownChannels { c: &c, r: &r };
        assert!(matches!(
            mf_seed_solve(&data, &known, &kd, 0, &[], SeedWeight::OutputGramPlusIdentity, SeedSign::Plus),
            Err(Error::RankDeficient { .. })
        ));
        let cfg = MfConfig::new(SolverConfig::uniform(2, 0.45, 0.6));
        let err = solve_inverse_model_free(&data, &known, &kd, &cfg, None).unwrap_err();
        assert_eq!(err.stage(), Some("data"));
    }
}
