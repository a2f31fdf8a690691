//! Initial stabilizing value tuple: asynchronous Lyapunov seeding followed by
//! the N-input modified Newton iteration.

use crate::error::{Error, Result, StageExt};
use crate::model::{
    closed_loop_state, value_closed_loop, CostParameters, FeedbackProfile, LinearGameSystem,
    ValueProfile,
};
use crate::numerics::{right_pinv, solve_lyapunov, stability_report, symmetrize, Mat, HURWITZ_MARGIN};

/// Sign of the gain term in the seeding right-hand side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SeedSign {
    /// −(W_i + F_iᵀR_iiF_i); reproduces the reference seed values.
    #[default]
    Plus,
    /// −(W_i − F_iᵀR_iiF_i), the literal printed form.
    Printed,
}

/// State weight W_i used while seeding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SeedWeight {
    /// C_iᵀC_i.
    #[default]
    OutputGram,
    /// C_iᵀC_i + I, which keeps the seed positive definite.
    OutputGramPlusIdentity,
}

impl SeedWeight {
    pub fn matrices(self, sys: &LinearGameSystem) -> Vec<Mat> {
        let n = sys.n();
        (0..sys.num_players())
            .map(|i| {
                let c = sys.c(i);
                let w = c.transpose() * c;
                match self {
                    SeedWeight::OutputGram => w,
                    SeedWeight::OutputGramPlusIdentity => w + Mat::identity(n, n),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonRecord {
    pub k: usize,
    pub i: usize,
    /// trace(R(X_i)ᵀR(X_i)) before the update.
    pub residual_trace: f64,
    /// Abscissa of A − Σ B_jR_jj⁻¹B_jᵀX_j after the update.
    pub spectral_abscissa: f64,
    /// Step length actually taken.
    pub damping: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NewtonTrace {
    pub records: Vec<NewtonRecord>,
}

impl NewtonTrace {
    pub fn outer_iterations(&self) -> usize {
        self.records.iter().map(|r| r.k + 1).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
pub struct StabilizeConfig {
    pub eps: f64,
    pub max_outer: usize,
    pub sign: SeedSign,
    pub weight: SeedWeight,
    /// Maximum number of step halvings per Newton update.
    pub max_halvings: usize,
}

impl Default for StabilizeConfig {
    fn default() -> Self {
        Self {
            eps: 1e-10,
            max_outer: 100,
            sign: SeedSign::Plus,
            weight: SeedWeight::OutputGram,
            max_halvings: 30,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Stabilization {
    pub values: ValueProfile,
    pub feedback: FeedbackProfile,
    pub trace: NewtonTrace,
}

fn gain_term(sys: &LinearGameSystem, costs: &CostParameters, x: &Mat, j: usize) -> Result<Mat> {
    let b = sys.b(j);
    Ok(b * costs.r_inv(j)? * b.transpose() * x)
}

/// Solves the seeding Lyapunov equations in ascending player order.
pub fn seed_values(
    sys: &LinearGameSystem,
    costs: &CostParameters,
    f_profile: &[Mat],
    weights: &[Mat],
    sign: SeedSign,
) -> Result<ValueProfile> {
    let np = sys.num_players();
    if f_profile.len() != np || weights.len() != np {
        return Err(Error::Dimension(format!(
            "seeding needs {np} feedback and weight matrices"
        )));
    }
    let target = closed_loop_state(sys, f_profile);
    let rep = stability_report(&target, HURWITZ_MARGIN)?;
    if !rep.is_hurwitz {
        return Err(Error::Assumption(format!(
            "target profile is not stabilizing (spectral abscissa {:.6e})",
            rep.spectral_abscissa
        )));
    }
    let mut p: Vec<Mat> = Vec::with_capacity(np);
    for i in 0..np {
        let mut plant = sys.a.clone();
        for (j, fj) in f_profile.iter().enumerate().skip(i) {
            plant -= sys.b(j) * fj;
        }
        for (j, pj) in p.iter().enumerate() {
            plant -= gain_term(sys, costs, pj, j)?;
        }
        let gain = f_profile[i].transpose() * &costs.r[i][i] * &f_profile[i];
        let rhs = match sign {
            SeedSign::Plus => &weights[i] + gain,
            SeedSign::Printed => &weights[i] - gain,
        };
        p.push(solve_lyapunov(&plant, &rhs)?);
    }
    let values = ValueProfile { x: p };
    let rep = stability_report(&value_closed_loop(sys, costs, &values)?, HURWITZ_MARGIN)?;
    if !rep.is_hurwitz {
        return Err(Error::SeedNotStabilizing {
            abscissa: rep.spectral_abscissa,
            trace: Box::default(),
        });
    }
    Ok(values)
}

/// A_i = A − Σ_{j>i} B_jR_jj⁻¹B_jᵀX_j^{(k)} − Σ_{j<i} B_jR_jj⁻¹B_jᵀX_j^{(k+1)}.
pub fn newton_plant(
    sys: &LinearGameSystem,
    costs: &CostParameters,
    x_current: &[Mat],
    x_next_partial: &[Mat],
    i: usize,
) -> Result<Mat> {
    if x_next_partial.len() < i || x_current.len() != sys.num_players() {
        return Err(Error::Dimension("newton plant needs X_j^{(k+1)} for every j < i".into()));
    }
    let mut ai = sys.a.clone();
    for (j, xj) in x_next_partial.iter().enumerate().take(i) {
        ai -= gain_term(sys, costs, xj, j)?;
    }
    for (j, xj) in x_current.iter().enumerate().skip(i + 1) {
        ai -= gain_term(sys, costs, xj, j)?;
    }
    Ok(ai)
}

/// Returns (G_i, R(X_i)).
pub fn newton_residual(
    sys: &LinearGameSystem,
    costs: &CostParameters,
    x_i: &Mat,
    a_i: &Mat,
    i: usize,
) -> Result<(Mat, Mat)> {
    let n = sys.n();
    let (b, c) = (sys.b(i), sys.c(i));
    let r = &costs.r[i][i];
    let r_inv = costs.r_inv(i)?;
    let cp = right_pinv(c)?;
    let g = &r_inv * b.transpose() * x_i * (cp * c - Mat::identity(n, n));
    let rmat = c.transpose() * c + g.transpose() * r * &g + a_i.transpose() * x_i + x_i * a_i
        - x_i * b * &r_inv * b.transpose() * x_i;
    Ok((g, symmetrize(&rmat)))
}

fn own_closed_loop(
    sys: &LinearGameSystem,
    costs: &CostParameters,
    x_i: &Mat,
    a_i: &Mat,
    i: usize,
) -> Result<Mat> {
    Ok(a_i - gain_term(sys, costs, x_i, i)?)
}

/// Full Newton update X_i + P with (A_i − B_iR_ii⁻¹B_iᵀX_i)ᵀP + P(·) = −R(X_i).
pub fn newton_step(
    sys: &LinearGameSystem,
    costs: &CostParameters,
    x_i: &Mat,
    a_i: &Mat,
    rmat: &Mat,
    i: usize,
    k: usize,
) -> Result<Mat> {
    Ok(x_i + newton_direction(sys, costs, x_i, a_i, rmat, i, k)?)
}

fn newton_direction(
    sys: &LinearGameSystem,
    costs: &CostParameters,
    x_i: &Mat,
    a_i: &Mat,
    rmat: &Mat,
    i: usize,
    k: usize,
) -> Result<Mat> {
    let f = own_closed_loop(sys, costs, x_i, a_i, i)?;
    let rep = stability_report(&f, 0.0)?;
    if !rep.is_hurwitz {
        return Err(Error::NewtonStep {
            player: i + 1,
            k,
            reason: format!(
                "closed loop lost stability (spectral abscissa {:.6e})",
                rep.spectral_abscissa
            ),
        });
    }
    solve_lyapunov(&f, rmat).map_err(|e| Error::NewtonStep {
        player: i + 1,
        k,
        reason: e.to_string(),
    })
}

/// Output gain K_i = R_ii⁻¹B_iᵀX_iC_i⁺.
pub fn implied_gain(sys: &LinearGameSystem, costs: &CostParameters, x_i: &Mat, i: usize) -> Result<Mat> {
    Ok(costs.r_inv(i)? * sys.b(i).transpose() * x_i * right_pinv(sys.c(i))?)
}

/// Runs seeding and the modified Newton loop until every trace(RᵀR) < eps.
pub fn run_stabilization(
    sys: &LinearGameSystem,
    costs: &CostParameters,
    f_profile: &[Mat],
    config: &StabilizeConfig,
) -> Result<Stabilization> {
    let weights = config.weight.matrices(sys);
    let seed = seed_values(sys, costs, f_profile, &weights, config.sign).stage("seed")?;
    newton_from(sys, costs, seed, config)
}

/// Modified Newton loop from a given stabilizing tuple.
pub fn newton_from(
    sys: &LinearGameSystem,
    costs: &CostParameters,
    start: ValueProfile,
    config: &StabilizeConfig,
) -> Result<Stabilization> {
    let np = sys.num_players();
    let mut x = start.x;
    let mut trace = NewtonTrace::default();
    let mut converged = false;
    let mut last = f64::INFINITY;
    for k in 0..config.max_outer {
        let current = x.clone();
        let mut worst: f64 = 0.0;
        for i in 0..np {
            let a_i = newton_plant(sys, costs, &current, &x[..i], i)?;
            let (_, rmat) = newton_residual(sys, costs, &x[i], &a_i, i)?;
            let residual_trace = (rmat.transpose() * &rmat).trace();
            if !residual_trace.is_finite() {
                return Err(Error::NewtonStep {
                    player: i + 1,
                    k,
                    reason: "non-finite residual".into(),
                });
            }
            worst = worst.max(residual_trace);
            let p = newton_direction(sys, costs, &x[i], &a_i, &rmat, i, k).map_err(|e| {
                if let Error::NewtonStep { .. } = e {
                    e
                } else {
                    Error::NewtonStep { player: i + 1, k, reason: e.to_string() }
                }
            })?;
            let mut lambda = 1.0;
            let mut accepted = None;
            for _ in 0..=config.max_halvings {
                let cand = symmetrize(&(&x[i] + &p * lambda));
                let rep = stability_report(&own_closed_loop(sys, costs, &cand, &a_i, i)?, 0.0)?;
                if rep.is_hurwitz {
                    accepted = Some(cand);
                    break;
                }
                lambda *= 0.5;
            }
            x[i] = accepted.ok_or_else(|| Error::NewtonStep {
                player: i + 1,
                k,
                reason: "no damped step keeps the closed loop stable".into(),
            })?;
            let abscissa = stability_report(
                &value_closed_loop(sys, costs, &ValueProfile { x: x.clone() })?,
                HURWITZ_MARGIN,
            )?
            .spectral_abscissa;
            trace.records.push(NewtonRecord {
                k,
                i,
                residual_trace,
                spectral_abscissa: abscissa,
                damping: lambda,
            });
        }
        last = worst;
        if worst < config.eps {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::MaxIterations {
            what: "modified Newton".into(),
            cap: config.max_outer,
            last,
        });
    }
    let values = ValueProfile { x };
    let rep = stability_report(&value_closed_loop(sys, costs, &values)?, HURWITZ_MARGIN)?;
    if !rep.is_hurwitz {
        return Err(Error::SeedNotStabilizing {
            abscissa: rep.spectral_abscissa,
            trace: Box::new(trace),
        });
    }
    let k = (0..np)
        .map(|i| implied_gain(sys, costs, &values.x[i], i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Stabilization {
        values,
        feedback: FeedbackProfile { k },
        trace,
    })
}
