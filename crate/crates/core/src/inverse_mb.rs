//! Model-based inverse solver: existence correction, gradient loop toward the
//! target gains and the per-iteration state-weight update.

use crate::error::{Error, Result, StageExt};
use crate::model::{
    closed_loop_state, state_feedback, CostParameters, FeedbackProfile, LinearGameSystem,
    ValueProfile,
};
use crate::numerics::{norm2, right_pinv, stability_report, symmetrize, Mat, HURWITZ_MARGIN};
use crate::stabilize::{implied_gain, run_stabilization, NewtonTrace, StabilizeConfig};

/// Which expression drives the gradient update of X_i.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradientForm {
    /// B R⁻¹ e C⁺ᵀ + C⁺ eᵀ R⁻¹ Bᵀ, the gradient of trace(eᵀe) over symmetric X.
    #[default]
    Symmetric,
    /// Scalar C⁺ᵀ B R⁻¹ e + eᵀ R⁻¹ Bᵀ C⁺ subtracted from every entry of X.
    /// Only defined for single-input single-output channels.
    PrintedScalar,
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub delta: Vec<f64>,
    pub correction_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub gradient_form: GradientForm,
    /// Keep per-iteration X, K and Q in the trace.
    pub record_snapshots: bool,
    pub stabilize: StabilizeConfig,
}

impl SolverConfig {
    pub fn uniform(players: usize, alpha: f64, beta: f64) -> Self {
        Self {
            alpha: vec![alpha; players],
            beta: vec![beta; players],
            delta: vec![1e-6; players],
            correction_tol: 1e-12,
            max_outer: 100,
            max_inner: 10_000,
            gradient_form: GradientForm::Symmetric,
            record_snapshots: false,
            stabilize: StabilizeConfig::default(),
        }
    }

    pub fn validate(&self, players: usize) -> Result<()> {
        for (name, v) in [("alpha", &self.alpha), ("beta", &self.beta), ("delta", &self.delta)] {
            if v.len() != players {
                return Err(Error::InvalidArgument(format!(
                    "{name} has {} entries for {players} players",
                    v.len()
                )));
            }
            if v.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be strictly positive")));
            }
        }
        if !(self.correction_tol > 0.0) {
            return Err(Error::InvalidArgument("correction_tol must be strictly positive".into()));
        }
        if self.max_outer == 0 || self.max_inner == 0 {
            return Err(Error::InvalidArgument("iteration caps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub x: Vec<Mat>,
    pub k: Vec<Mat>,
    pub q: Vec<Mat>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InverseRecord {
    pub s: usize,
    /// ‖e_ie_iᵀ‖₂ per player after the update.
    pub error_norms: Vec<f64>,
    pub spectral_abscissa: f64,
    pub snapshot: Option<Snapshot>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InverseTrace {
    pub stabilization: NewtonTrace,
    /// State before the first gradient step, when snapshots are recorded.
    pub initial: Option<Snapshot>,
    pub records: Vec<InverseRecord>,
}

#[derive(Debug, Clone)]
pub struct InverseSolution {
    pub costs: CostParameters,
    pub values: ValueProfile,
    pub feedback: FeedbackProfile,
    pub trace: InverseTrace,
}

impl InverseSolution {
    pub fn iterations(&self) -> usize {
        self.trace.records.len()
    }
}

/// d = B_iᵀX − R_iiK_iC_i.
pub fn existence_residual(
    sys: &LinearGameSystem,
    costs: &CostParameters,
    x_i: &Mat,
    k_i: &Mat,
    i: usize,
) -> Mat {
    sys.b(i).transpose() * x_i - &costs.r[i][i] * k_i * sys.c(i)
}

/// Gradient of ‖d‖²_F over symmetric X: B_id + dᵀB_iᵀ.
pub fn correction_direction(
    sys: &LinearGameSystem,
    costs: &CostParameters,
    x_i: &Mat,
    k_i: &Mat,
    i: usize,
) -> Mat {
    let d = existence_residual(sys, costs, x_i, k_i, i);
    let bd = sys.b(i) * &d;
    &bd + bd.transpose()
}

/// Descends on ‖B_iᵀX − R_iiK_iC_i‖ until it drops to `tol`.
#[allow(clippy::too_many_arguments)]
pub fn correct_value_matrix(
    sys: &LinearGameSystem,
    costs: &CostParameters,
    x_i: &Mat,
    k_i: &Mat,
    i: usize,
    alpha: f64,
    tol: f64,
    max_inner: usize,
) -> Result<Mat> {
    let mut x = x_i.clone();
    let mut last = f64::INFINITY;
    for _ in 0..=max_inner {
        let d = existence_residual(sys, costs, &x, k_i, i);
        last = d.norm();
        if !last.is_finite() {
            break;
        }
        if last <= tol {
            return Ok(x);
        }
        let bd = sys.b(i) * &d;
        x -= (&bd + bd.transpose()) * alpha;
    }
    Err(Error::MaxIterations {
        what: format!("existence correction for player {}", i + 1),
        cap: max_inner,
        last,
    })
}

/// e_i = R_ii⁻¹B_iᵀX_iC_i⁺ − K_{i,d}.
pub fn feedback_error(
    sys: &LinearGameSystem,
    costs: &CostParameters,
    x_i: &Mat,
    k_target: &Mat,
    i: usize,
) -> Result<Mat> {
    Ok(implied_gain(sys, costs, x_i, i)? - k_target)
}

pub fn gradient_direction(
    sys: &LinearGameSystem,
    costs: &CostParameters,
    x_i: &Mat,
    k_target: &Mat,
    i: usize,
    form: GradientForm,
) -> Result<Mat> {
    let b = sys.b(i);
    if (sys.c(i) * b).norm() == 0.0 {
        return Err(Error::Assumption(format!(
            "C_{0}B_{0} is zero, so the gradient vanishes identically",
            i + 1
        )));
    }
    let e = feedback_error(sys, costs, x_i, k_target, i)?;
    let r_inv = costs.r_inv(i)?;
    let cp = right_pinv(sys.c(i))?;
    match form {
        GradientForm::Symmetric => {
            let g = b * &r_inv * &e * cp.transpose();
            Ok(&g + g.transpose())
        }
        GradientForm::PrintedScalar => {
            let first = cp.transpose() * b * &r_inv * &e;
            let second = e.transpose() * &r_inv * b.transpose() * &cp;
            let g = first + second;
            if g.shape() != (1, 1) {
                return Err(Error::InvalidArgument(format!(
                    "scalar gradient form needs a single output for player {}, got {}",
                    i + 1,
                    g.nrows()
                )));
            }
            let n = sys.n();
            Ok(Mat::from_element(n, n, g[(0, 0)]))
        }
    }
}

pub fn gradient_step(
    sys: &LinearGameSystem,
    costs: &CostParameters,
    x_i: &Mat,
    k_target: &Mat,
    i: usize,
    beta: f64,
    form: GradientForm,
) -> Result<Mat> {
    Ok(x_i - gradient_direction(sys, costs, x_i, k_target, i, form)? * beta)
}

/// Q_i = −Σ_j F_jᵀR_ijF_j − A_clᵀX̃_i − X̃_iA_cl with F_j = K_jC_j.
pub fn update_cost_q(
    sys: &LinearGameSystem,
    costs: &CostParameters,
    values: &ValueProfile,
    fb: &FeedbackProfile,
    i: usize,
) -> Result<Mat> {
    let f = state_feedback(sys, fb)?;
    let acl = closed_loop_state(sys, &f);
    let x = &values.x[i];
    let mut q = -(acl.transpose() * x) - x * &acl;
    for (j, fj) in f.iter().enumerate() {
        q -= fj.transpose() * &costs.r[i][j] * fj;
    }
    Ok(symmetrize(&q))
}

fn error_norm(e: &Mat) -> f64 {
    norm2(&(e * e.transpose()))
}

fn all_q(
    sys: &LinearGameSystem,
    costs: &CostParameters,
    values: &ValueProfile,
    fb: &FeedbackProfile,
) -> Result<Vec<Mat>> {
    (0..sys.num_players())
        .map(|i| update_cost_q(sys, costs, values, fb, i))
        .collect()
}

/// Seeds with the modified Newton method, then runs the gradient loop with
/// per-iteration correction until every ‖e_ie_iᵀ‖ ≤ δ_i.
pub fn solve_inverse_model_based(
    sys: &LinearGameSystem,
    r_init: &[Vec<Mat>],
    k_target: &FeedbackProfile,
    config: &SolverConfig,
) -> Result<InverseSolution> {
    let np = sys.num_players();
    config.validate(np)?;
    let costs0 = CostParameters::with_zero_q(sys.n(), r_init.to_vec())?;
    let problems = crate::model::validate_game(sys, &costs0);
    if !problems.is_empty() {
        return Err(Error::Assumption(problems.join("; ")));
    }
    let f_target = state_feedback(sys, k_target)?;
    let stab = run_stabilization(sys, &costs0, &f_target, &config.stabilize).stage("stabilize")?;
    let x0 = ValueProfile { x: stab.values.x.clone() };
    descend(sys, costs0, x0, stab.feedback, k_target, config, stab.trace)
}

/// Gradient loop from a given value tuple and its implied gains.
pub(crate) fn descend(
    sys: &LinearGameSystem,
    mut costs: CostParameters,
    start: ValueProfile,
    start_k: FeedbackProfile,
    k_target: &FeedbackProfile,
    config: &SolverConfig,
    stabilization: NewtonTrace,
) -> Result<InverseSolution> {
    let np = sys.num_players();
    let mut x = start.x;
    let mut k = start_k;
    for i in 0..np {
        x[i] = correct_value_matrix(
            sys,
            &costs,
            &x[i],
            &k.k[i],
            i,
            config.alpha[i],
            config.correction_tol,
            config.max_inner,
        )
        .stage("correct")?;
    }
    let mut values = ValueProfile { x };
    costs.q = all_q(sys, &costs, &values, &k)?;
    let mut trace = InverseTrace {
        stabilization,
        initial: config.record_snapshots.then(|| Snapshot {
            x: values.x.clone(),
            k: k.k.clone(),
            q: costs.q.clone(),
        }),
        records: Vec::new(),
    };
    let mut s = 0;
    loop {
        let errors = (0..np)
            .map(|i| feedback_error(sys, &costs, &values.x[i], &k_target.k[i], i).map(|e| error_norm(&e)))
            .collect::<Result<Vec<_>>>()?;
        if errors.iter().zip(&config.delta).all(|(e, d)| e <= d) {
            break;
        }
        if s >= config.max_outer {
            return Err(Error::MaxIterations {
                what: "inverse gradient loop".into(),
                cap: config.max_outer,
                last: errors.iter().copied().fold(0.0, f64::max),
            })
            .stage("gradient");
        }
        let mut next = Vec::with_capacity(np);
        for i in 0..np {
            next.push(
                gradient_step(
                    sys,
                    &costs,
                    &values.x[i],
                    &k_target.k[i],
                    i,
                    config.beta[i],
                    config.gradient_form,
                )
                .stage("gradient")?,
            );
        }
        k = FeedbackProfile {
            k: (0..np)
                .map(|i| implied_gain(sys, &costs, &next[i], i))
                .collect::<Result<Vec<_>>>()?,
        };
        let acl = closed_loop_state(sys, &state_feedback(sys, &k)?);
        let abscissa = stability_report(&acl, HURWITZ_MARGIN)
            .map(|r| r.spectral_abscissa)
            .unwrap_or(f64::NAN);
        if !(abscissa < 0.0) {
            return Err(Error::StabilityLost { s, abscissa }).stage("gradient");
        }
        for i in 0..np {
            next[i] = correct_value_matrix(
                sys,
                &costs,
                &next[i],
                &k.k[i],
                i,
                config.alpha[i],
                config.correction_tol,
                config.max_inner,
            )
            .stage("correct")?;
        }
        values = ValueProfile { x: next };
        costs.q = all_q(sys, &costs, &values, &k)?;
        let error_norms = (0..np)
            .map(|i| feedback_error(sys, &costs, &values.x[i], &k_target.k[i], i).map(|e| error_norm(&e)))
            .collect::<Result<Vec<_>>>()?;
        trace.records.push(InverseRecord {
            s,
            error_norms,
            spectral_abscissa: abscissa,
            snapshot: config.record_snapshots.then(|| Snapshot {
                x: values.x.clone(),
                k: k.k.clone(),
                q: costs.q.clone(),
            }),
        });
        s += 1;
    }
    Ok(InverseSolution {
        costs,
        values,
        feedback: k,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::*;
    use crate::model::{are_residual, verify_nash, PlayerChannel, Tolerances};
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;
    use proptest::prelude::*;

    fn diag(v: &[f64]) -> Mat {
        Mat::from_diagonal(&nalgebra::DVector::from_column_slice(v))
    }

    fn costs_va() -> CostParameters {
        CostParameters::with_zero_q(2, va_r()).unwrap()
    }

    #[test]
    fn correction_fixed_point_and_contract() {
        let sys = va_system();
        let costs = costs_va();
        let x = diag(&[3.0, 7.0]);
        let k = dmatrix![3.0];
        let out = correct_value_matrix(&sys, &costs, &x, &k, 0, 0.45, 1e-12, 10).unwrap();
        assert_eq!(out, x);

        let x = dmatrix![2.41421, 0.66138; 0.66138, 0.29578];
        let k = dmatrix![2.41421];
        let out = correct_value_matrix(&sys, &costs, &x, &k, 0, 0.45, 1e-12, 10_000).unwrap();
        assert!(existence_residual(&sys, &costs, &out, &k, 0).norm() <= 1e-12);
        assert_relative_eq!(out[(0, 0)], 2.41421, epsilon = 1e-12);
        assert_relative_eq!(out[(0, 1)], 0.0, epsilon = 1e-12);
        assert!(matches!(
            correct_value_matrix(&sys, &costs, &x, &k, 0, 0.45, 1e-12, 3),
            Err(Error::MaxIterations { .. })
        ));
    }

    #[test]
    fn correction_random_three_state() {
        let b = dmatrix![1.0; 0.5; -0.3];
        let c = dmatrix![1.0, 0.2, 0.0; 0.0, 1.0, 0.4];
        let sys = LinearGameSystem::new(
            -Mat::identity(3, 3),
            vec![PlayerChannel { b: b.clone(), c: c.clone() }],
        )
        .unwrap();
        let costs = CostParameters::with_zero_q(3, vec![vec![dmatrix![2.0]]]).unwrap();
        let x = dmatrix![2.0, 0.3, -0.1; 0.3, 1.5, 0.2; -0.1, 0.2, 1.0];
        let k = implied_gain(&sys, &costs, &x, 0).unwrap();
        let alpha = 0.4 / b.norm_squared();
        let out = correct_value_matrix(&sys, &costs, &x, &k, 0, alpha, 1e-10, 100_000).unwrap();
        assert!(existence_residual(&sys, &costs, &out, &k, 0).norm() <= 1e-10);
        assert_relative_eq!(implied_gain(&sys, &costs, &out, 0).unwrap(), k, epsilon = 1e-9);
    }

    #[test]
    fn feedback_error_examples() {
        let sys = va_system();
        let costs = costs_va();
        let e = feedback_error(&sys, &costs, &diag(&[3.0002, 8.9115]), &dmatrix![3.0], 0).unwrap();
        assert_relative_eq!(e[(0, 0)], 2e-4, epsilon = 1e-12);
        let e = feedback_error(&sys, &costs, &Mat::zeros(2, 2), &dmatrix![3.0], 0).unwrap();
        assert_eq!(e, dmatrix![-3.0]);
        let x = dmatrix![1.3, 0.2; 0.2, 0.7];
        let kd = dmatrix![3.0];
        let e1 = feedback_error(&sys, &costs, &x, &kd, 0).unwrap();
        let e2 = feedback_error(&sys, &costs, &(&x * 2.0), &kd, 0).unwrap();
        assert_relative_eq!(e2 + &kd, (e1 + &kd) * 2.0, epsilon = 1e-12);
    }

    #[test]
    fn gradient_zero_error_and_scalar_contraction() {
        let sys = va_system();
        let costs = costs_va();
        let x = diag(&[3.0, 1.0]);
        let out = gradient_step(&sys, &costs, &x, &dmatrix![3.0], 0, 0.6, GradientForm::Symmetric).unwrap();
        assert_eq!(out, x);

        let sys = scalar_system(0.3);
        let costs = CostParameters::with_zero_q(2, vec![vec![dmatrix![2.0]]]).unwrap();
        let kd = dmatrix![1.0];
        let beta = 0.5;
        let mut x = diag(&[5.0, 0.0]);
        let mut e_prev = feedback_error(&sys, &costs, &x, &kd, 0).unwrap()[(0, 0)];
        for _ in 0..5 {
            x = gradient_step(&sys, &costs, &x, &kd, 0, beta, GradientForm::Symmetric).unwrap();
            let e = feedback_error(&sys, &costs, &x, &kd, 0).unwrap()[(0, 0)];
            assert_relative_eq!(e, e_prev * (1.0 - 2.0 * beta / 4.0), epsilon = 1e-12);
            e_prev = e;
        }
    }

    #[test]
    fn gradient_requires_coupling() {
        let sys = LinearGameSystem::new(
            -Mat::identity(2, 2),
            vec![PlayerChannel { b: dmatrix![1.0; 0.0], c: dmatrix![0.0, 1.0] }],
        )
        .unwrap();
        let costs = CostParameters::with_zero_q(2, unit_r(1)).unwrap();
        assert!(matches!(
            gradient_direction(&sys, &costs, &Mat::identity(2, 2), &dmatrix![1.0], 0, GradientForm::Symmetric),
            Err(Error::Assumption(_))
        ));
    }

    #[test]
    fn q_update_examples() {
        let sys = va_system();
        let mut costs = CostParameters::with_zero_q(2, unit_r(2)).unwrap();
        let zero_v = ValueProfile { x: vec![Mat::zeros(2, 2); 2] };
        let zero_k = FeedbackProfile { k: vec![dmatrix![0.0]; 2] };
        assert_eq!(update_cost_q(&sys, &costs, &zero_v, &zero_k, 0).unwrap(), Mat::zeros(2, 2));

        costs.r = va_r();
        let values = ValueProfile { x: vec![diag(&[3.0, 1.3]), diag(&[0.4, 4.0])] };
        let fb = FeedbackProfile { k: vec![dmatrix![3.0], dmatrix![4.0]] };
        costs.q = (0..2).map(|i| update_cost_q(&sys, &costs, &values, &fb, i).unwrap()).collect();
        for i in 0..2 {
            assert!(are_residual(&sys, &costs, &values, i).unwrap().norm() <= 1e-8);
        }
    }

    #[test]
    fn scalar_loop_from_reference_start() {
        // From the reference corrected seed, the scalar form reproduces the
        // reference five-iteration values.
        let sys = va_system();
        let costs = costs_va();
        let start = ValueProfile { x: vec![diag(&[2.4142, 8.3255]), diag(&[1.0303, 4.3551])] };
        let k0 = FeedbackProfile { k: vec![dmatrix![2.4142], dmatrix![4.3551]] };
        let mut cfg = SolverConfig::uniform(2, 0.45, 0.6);
        cfg.alpha = vec![0.45, 0.9];
        cfg.delta = vec![1e-7; 2];
        cfg.gradient_form = GradientForm::PrintedScalar;
        let kd = FeedbackProfile { k: vec![dmatrix![3.0], dmatrix![4.0]] };
        let sol = descend(&sys, costs, start, k0, &kd, &cfg, NewtonTrace::default()).unwrap();
        assert_eq!(sol.iterations(), 5);
        assert_relative_eq!(sol.feedback.k[0][(0, 0)], 3.0002, epsilon = 1e-3);
        assert_relative_eq!(sol.values.x[0], diag(&[3.0002, 8.9115]), epsilon = 2e-3);
        assert_relative_eq!(sol.values.x[1], diag(&[0.6751, 3.9999]), epsilon = 2e-3);
        assert_relative_eq!(sol.costs.q[0], dmatrix![3.0007, -3.0; -3.0, 3.6456], epsilon = 5e-3);
        assert_relative_eq!(sol.costs.q[1], dmatrix![-1.8, -0.6751; -0.6751, -0.0005], epsilon = 5e-3);
    }

    #[test]
    fn single_player_inverse_lqr() {
        let sys = scalar_system(1.0);
        let kd = FeedbackProfile { k: vec![dmatrix![3.0]] };
        let mut cfg = SolverConfig::uniform(1, 0.4, 0.3);
        cfg.delta = vec![1e-12];
        let sol = solve_inverse_model_based(&sys, &unit_r(1), &kd, &cfg).unwrap();
        assert_relative_eq!(sol.feedback.k[0][(0, 0)], 3.0, epsilon = 1e-5);
        let cert = verify_nash(&sys, &sol.costs, &sol.values, &sol.feedback, &Tolerances::default()).unwrap();
        assert!(cert.residual_norms[0] <= 1e-8);
        assert!(cert.spectral_abscissa < 0.0);
    }

    #[test]
    fn target_already_reached_exits_at_zero() {
        let sys = va_system();
        let cfg = SolverConfig::uniform(2, 0.45, 0.6);
        let probe = solve_inverse_model_based(
            &sys,
            &unit_r(2),
            &FeedbackProfile { k: vec![dmatrix![3.0], dmatrix![4.0]] },
            &SolverConfig { max_outer: 1, ..cfg.clone() },
        );
        assert!(probe.is_err());
        let k0 = 1.0 + 2f64.sqrt();
        let k1 = 2.0 + 5f64.sqrt();
        let sol = solve_inverse_model_based(
            &sys,
            &unit_r(2),
            &FeedbackProfile { k: vec![dmatrix![k0], dmatrix![k1]] },
            &cfg,
        )
        .unwrap();
        assert_eq!(sol.iterations(), 0);
        assert!(verify_nash(&sys, &sol.costs, &sol.values, &sol.feedback, &Tolerances::default())
            .unwrap()
            .passed);
    }

    #[test]
    fn overshoot_reports_stability_loss() {
        let sys = va_system();
        let mut cfg = SolverConfig::uniform(2, 0.45, 100.0);
        cfg.alpha = vec![0.45, 0.9];
        let kd = FeedbackProfile { k: vec![dmatrix![3.0], dmatrix![4.0]] };
        let err = solve_inverse_model_based(&sys, &va_r(), &kd, &cfg).unwrap_err();
        assert!(matches!(err.root(), Error::StabilityLost { .. }), "{err}");
        assert!(err.to_string().contains("stability lost at s="));
    }

    fn sym(n: usize) -> impl Strategy<Value = Mat> {
        proptest::collection::vec(-2.0f64..2.0, n * n)
            .prop_map(move |v| symmetrize(&Mat::from_vec(n, n, v)))
    }

    proptest! {
        #[test]
        fn correction_keeps_feedback_error(x in sym(2), kd in -3.0f64..3.0) {
            let sys = va_system();
            let costs = costs_va();
            let k = implied_gain(&sys, &costs, &x, 0).unwrap();
            let before = feedback_error(&sys, &costs, &x, &dmatrix![kd], 0).unwrap();
            let out = correct_value_matrix(&sys, &costs, &x, &k, 0, 0.45, 1e-12, 10_000).unwrap();
            let after = feedback_error(&sys, &costs, &out, &dmatrix![kd], 0).unwrap();
            prop_assert!((before - after).norm() <= 1e-8);
        }

        #[test]
        fn gradient_preserves_symmetry(x in sym(2), kd in -3.0f64..3.0) {
            let sys = va_system();
            let costs = costs_va();
            for form in [GradientForm::Symmetric, GradientForm::PrintedScalar] {
                let out = gradient_step(&sys, &costs, &x, &dmatrix![kd], 0, 0.6, form).unwrap();
                prop_assert!((&out - out.transpose()).norm() <= 1e-12);
            }
        }
    }
}
