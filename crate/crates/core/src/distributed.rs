//! Star-network protocol: a coordinator sequences data-collection phases and
//! every agent estimates its own input matrix, solves for its value matrix by
//! gradient descent and evaluates its state weight from its own log only.
//!
//! Agents are in-process actors. Player-specific data is handed out wrapped
//! in [`Owned`], and every read goes through an [`AccessRegistry`] so a test
//! can assert that no agent ever touched another player's data.

use std::sync::Mutex;

use crate::error::{Error, Result, StageExt};
use crate::inverse_mf::{estimate_b, mf_seed_solve, mf_update_cost_q, KnownChannels};
use crate::model::{
    verify_nash, CostParameters, FeedbackProfile, LinearGameSystem, NashCertificate, Tolerances,
    ValueProfile,
};
use crate::numerics::{inverse, norm2, right_pinv, symmetrize, Mat};
use crate::stabilize::{SeedSign, SeedWeight};
use crate::trajectory::{
    assemble_data, make_noise, simulate, DataMatrices, Noise, NoiseSpec, Quadrature, TrajectoryLog,
};

/// A value that belongs to one player.
#[derive(Debug, Clone)]
pub struct Owned<T> {
    owner: usize,
    value: T,
}

impl<T> Owned<T> {
    pub fn new(owner: usize, value: T) -> Self {
        Self { owner, value }
    }

    pub fn owner(&self) -> usize {
        self.owner
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessRecord {
    pub reader: usize,
    pub owner: usize,
    pub item: &'static str,
}

/// Log of every read of player-owned data.
#[derive(Debug, Default)]
pub struct AccessRegistry {
    reads: Mutex<Vec<AccessRecord>>,
}

impl AccessRegistry {
    pub fn read<'a, T>(&self, reader: usize, item: &'static str, v: &'a Owned<T>) -> &'a T {
        self.reads.lock().expect("registry poisoned").push(AccessRecord {
            reader,
            owner: v.owner,
            item,
        });
        &v.value
    }

    pub fn records(&self) -> Vec<AccessRecord> {
        self.reads.lock().expect("registry poisoned").clone()
    }

    pub fn cross_reads(&self) -> Vec<AccessRecord> {
        self.records().into_iter().filter(|r| r.reader != r.owner).collect()
    }
}

/// One line of the exported protocol log. `agent` is 0 for the coordinator
/// and 1-based for players.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub phase: usize,
    pub agent: usize,
    pub action: &'static str,
    pub t_start: f64,
    pub t_end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Phase {
    pub index: usize,
    /// Player applying exploration noise, if any.
    pub noisy: Option<usize>,
    pub duration: f64,
}

/// Phase 0 runs everyone noise-free; phase i lets only player i explore.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinatorSchedule {
    pub phases: Vec<Phase>,
}

impl CoordinatorSchedule {
    pub fn new(players: usize, warmup: f64, phase_duration: f64) -> Result<Self> {
        if players == 0 || !(warmup >= 0.0) || !(phase_duration > 0.0) {
            return Err(Error::InvalidArgument(
                "schedule needs at least one player and positive phase durations".into(),
            ));
        }
        let mut phases = vec![Phase { index: 0, noisy: None, duration: warmup }];
        phases.extend((0..players).map(|i| Phase {
            index: i + 1,
            noisy: Some(i),
            duration: phase_duration,
        }));
        Ok(Self { phases })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleParams {
    pub x0: Vec<f64>,
    pub dt_fine: f64,
    pub warmup: f64,
    pub phase_duration: f64,
}

/// What agent i knows and computes. Every field is its own.
#[derive(Debug, Clone)]
pub struct AgentState {
    pub index: usize,
    c: Owned<Mat>,
    k_target: Owned<Mat>,
    r: Owned<Mat>,
    log: Option<Owned<TrajectoryLog>>,
    pub gamma: f64,
    pub b_hat: Option<Mat>,
    pub p: Option<Mat>,
    pub x: Option<Mat>,
}

impl AgentState {
    pub fn new(index: usize, c: Mat, k_target: Mat, r_ii: Mat, gamma: f64) -> Result<Self> {
        if k_target.shape() != (r_ii.nrows(), c.nrows()) || !r_ii.is_square() {
            return Err(Error::Dimension(format!(
                "agent {}: K is {:?}, R is {:?}, C is {:?}",
                index + 1,
                k_target.shape(),
                r_ii.shape(),
                c.shape()
            )));
        }
        Ok(Self {
            index,
            c: Owned::new(index, c),
            k_target: Owned::new(index, k_target),
            r: Owned::new(index, symmetrize(&r_ii)),
            log: None,
            gamma,
            b_hat: None,
            p: None,
            x: None,
        })
    }

    fn own<'a, T>(&self, reg: &AccessRegistry, item: &'static str, v: &'a Owned<T>) -> &'a T {
        reg.read(self.index, item, v)
    }

    /// Stores a log delivered by the coordinator. The owner tag is kept so a
    /// misrouted log shows up as a cross read.
    pub fn receive(&mut self, log: Owned<TrajectoryLog>) {
        self.log = Some(log);
    }

    fn target_state_gain(&self, reg: &AccessRegistry) -> Mat {
        self.own(reg, "K", &self.k_target) * self.own(reg, "C", &self.c)
    }
}

/// Drives the hidden plant through the schedule and returns each agent's
/// log of (x, u_i) together with the protocol messages.
pub fn run_schedule(
    sys: &LinearGameSystem,
    k_target: &FeedbackProfile,
    noise: &[NoiseSpec],
    params: &ScheduleParams,
) -> Result<(Vec<Owned<TrajectoryLog>>, Vec<Message>)> {
    let np = sys.num_players();
    if noise.len() != np {
        return Err(Error::Dimension(format!("{np} players need {np} noise specs")));
    }
    let schedule = CoordinatorSchedule::new(np, params.warmup, params.phase_duration)?;
    let mut x = params.x0.clone();
    let mut t = 0.0;
    let mut logs = Vec::with_capacity(np);
    let mut messages = Vec::new();
    for phase in &schedule.phases {
        let signals = (0..np)
            .map(|j| match phase.noisy {
                Some(i) if i == j => make_noise(&noise[j], sys.m(j)),
                _ => Ok(Noise::zero(sys.m(j))),
            })
            .collect::<Result<Vec<_>>>()?;
        let log = simulate(sys, k_target, &signals, &x, params.dt_fine, t, phase.duration)?;
        let t_end = *log.times.last().expect("simulation logs the initial state");
        messages.push(Message {
            phase: phase.index,
            agent: 0,
            action: "start-phase",
            t_start: t,
            t_end: t,
        });
        for j in 0..np {
            let action = if phase.noisy == Some(j) { "apply-noisy" } else { "apply-target" };
            messages.push(Message { phase: phase.index, agent: j + 1, action, t_start: t, t_end });
        }
        messages.push(Message {
            phase: phase.index,
            agent: 0,
            action: "stop-phase",
            t_start: t_end,
            t_end,
        });
        x = log.states.last().expect("non-empty log").clone();
        t = t_end;
        if let Some(i) = phase.noisy {
            logs.push(Owned::new(i, log.restrict(i)));
        }
    }
    Ok((logs, messages))
}

/// Assembles the agent's data matrices from its own log.
pub fn agent_data(agent: &AgentState, reg: &AccessRegistry, delta_t: f64, quadrature: Quadrature) -> Result<DataMatrices> {
    let log = agent
        .log
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("agent {} has no data", agent.index + 1)))?;
    assemble_data(agent.own(reg, "trajectory", log), delta_t, quadrature)
}

/// Joint estimate of P_i and B_iᵀP_i from the agent's own input block, then
/// B_i = ((B_iᵀP_i)P_i⁻¹)ᵀ.
pub fn agent_estimate(agent: &AgentState, reg: &AccessRegistry, data: &DataMatrices) -> Result<(Mat, Mat)> {
    if data.i_xu.len() != 1 {
        return Err(Error::Dimension("agent data must hold exactly one input block".into()));
    }
    let c = [agent.own(reg, "C", &agent.c).clone()];
    let r = [vec![agent.own(reg, "R", &agent.r).clone()]];
    let k = FeedbackProfile { k: vec![agent.own(reg, "K", &agent.k_target).clone()] };
    let known = KnownChannels { c: &c, r: &r };
    let est = mf_seed_solve(data, &known, &k, 0, &[], SeedWeight::OutputGramPlusIdentity, SeedSign::Plus)?;
    let b = estimate_b(&est)?.remove(0);
    Ok((est.p, b))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientOutcome {
    pub x: Mat,
    pub iterations: usize,
    pub error_norm: f64,
    /// ‖e eᵀ‖₂ after every step.
    pub error_history: Vec<f64>,
    /// Output gain R⁻¹B̂ᵀXC⁺ after every step.
    pub gain_history: Vec<Mat>,
}

/// X ← X − γ(eᵀR⁻¹Bᵀ + BR⁻¹e) with e = R⁻¹BᵀX − F_d, from X = 0, until
/// ‖e‖ ≤ tol or `max_iter` steps.
pub fn agent_gradient_solve(agent: &AgentState, reg: &AccessRegistry, max_iter: usize, tol: f64) -> Result<GradientOutcome> {
    let b = agent
        .b_hat
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("agent {} has no input estimate", agent.index + 1)))?;
    let n = b.nrows();
    let r_inv = inverse(agent.own(reg, "R", &agent.r), "R_ii")?;
    let f = agent.target_state_gain(reg);
    let mut x = Mat::zeros(n, n);
    let err = |x: &Mat| &r_inv * b.transpose() * x - &f;
    let mut e = err(&x);
    let c_pinv = right_pinv(agent.own(reg, "C", &agent.c))?;
    let mut iterations = 0;
    let mut error_history = Vec::new();
    let mut gain_history = Vec::new();
    while e.norm() > tol && iterations < max_iter {
        let d = e.transpose() * &r_inv * b.transpose() + b * &r_inv * &e;
        x -= d * agent.gamma;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged { t: iterations as f64, norm: f64::INFINITY });
        }
        e = err(&x);
        iterations += 1;
        error_history.push(norm2(&(&e * e.transpose())));
        gain_history.push(&r_inv * b.transpose() * &x * &c_pinv);
    }
    Ok(GradientOutcome { x, iterations, error_norm: e.norm(), error_history, gain_history })
}

/// Q_i from the agent's own log with R_ij = 0 for j ≠ i.
pub fn agent_update_q(agent: &AgentState, reg: &AccessRegistry, data: &DataMatrices, x: &Mat) -> Result<Mat> {
    let b = agent
        .b_hat
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("agent {} has no input estimate", agent.index + 1)))?;
    let c = [agent.own(reg, "C", &agent.c).clone()];
    let r = [vec![agent.own(reg, "R", &agent.r).clone()]];
    let k = FeedbackProfile { k: vec![agent.own(reg, "K", &agent.k_target).clone()] };
    let known = KnownChannels { c: &c, r: &r };
    mf_update_cost_q(data, &known, std::slice::from_ref(b), &ValueProfile { x: vec![x.clone()] }, &k, 0)
}

#[derive(Debug, Clone)]
pub struct DistributedConfig {
    pub gamma: Vec<f64>,
    pub max_iter: usize,
    pub error_tol: f64,
    pub delta_t: f64,
    pub quadrature: Quadrature,
    pub schedule: ScheduleParams,
    pub noise: Vec<NoiseSpec>,
}

impl DistributedConfig {
    /// Defaults of the reference protocol run: γ = 1, 30 iterations,
    /// ‖e‖ ≤ 1e−3, a 0.1 s warm-up and 1 s exploration phases.
    pub fn new(players: usize, n: usize, seed: u64) -> Self {
        let base = NoiseSpec { seed, ..Default::default() };
        Self {
            gamma: vec![1.0; players],
            max_iter: 30,
            error_tol: 1e-3,
            delta_t: 0.01,
            quadrature: Quadrature::Simpson,
            schedule: ScheduleParams { x0: vec![1.0; n], dt_fine: 1e-4, warmup: 0.1, phase_duration: 1.0 },
            noise: (0..players).map(|i| base.for_player(i)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentResult {
    pub index: usize,
    pub b_hat: Mat,
    pub p: Mat,
    pub x: Mat,
    pub k: Mat,
    pub q: Mat,
    pub r: Mat,
    pub iterations: usize,
    pub error_norm: f64,
    pub error_history: Vec<f64>,
    pub gain_history: Vec<Mat>,
}

#[derive(Debug)]
pub struct DistributedOutcome {
    pub agents: Vec<AgentResult>,
    pub messages: Vec<Message>,
    pub cross_reads: Vec<AccessRecord>,
    pub total_reads: usize,
}

impl DistributedOutcome {
    pub fn costs(&self) -> Result<CostParameters> {
        let np = self.agents.len();
        let r = self
            .agents
            .iter()
            .map(|a| {
                (0..np)
                    .map(|j| {
                        if j == a.index {
                            Ok(a.r.clone())
                        } else {
                            let m = self.agents[j].b_hat.ncols();
                            Ok(Mat::zeros(m, m))
                        }
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        CostParameters::new(self.agents.iter().map(|a| a.q.clone()).collect(), r)
    }

    pub fn values(&self) -> ValueProfile {
        ValueProfile { x: self.agents.iter().map(|a| a.x.clone()).collect() }
    }

    pub fn feedback(&self) -> FeedbackProfile {
        FeedbackProfile { k: self.agents.iter().map(|a| a.k.clone()).collect() }
    }

    /// Certificate of the assembled result on the true system.
    pub fn certificate(&self, sys: &LinearGameSystem, tol: &Tolerances) -> Result<NashCertificate> {
        verify_nash(sys, &self.costs()?, &self.values(), &self.feedback(), tol)
    }
}

/// Runs the full protocol on the hidden plant.
pub fn solve_distributed(
    sys: &LinearGameSystem,
    k_target: &FeedbackProfile,
    r_diag: &[Mat],
    config: &DistributedConfig,
) -> Result<DistributedOutcome> {
    let np = sys.num_players();
    if r_diag.len() != np || config.gamma.len() != np || k_target.k.len() != np {
        return Err(Error::Dimension(format!("{np} players need {np} R_ii, γ_i and K_i")));
    }
    let registry = AccessRegistry::default();
    let mut agents = (0..np)
        .map(|i| AgentState::new(i, sys.c(i).clone(), k_target.k[i].clone(), r_diag[i].clone(), config.gamma[i]))
        .collect::<Result<Vec<_>>>()?;
    let (logs, mut messages) =
        run_schedule(sys, k_target, &config.noise, &config.schedule).stage("collect")?;
    for log in logs {
        let owner = log.owner();
        agents[owner].receive(log);
    }
    let t_done = messages.last().map_or(0.0, |m| m.t_end);
    let phase_done = np + 1;
    let outcomes: Vec<Result<(AgentResult, Vec<Message>)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = agents
            .iter_mut()
            .map(|agent| {
                let registry = &registry;
                scope.spawn(move || run_agent(agent, registry, config, phase_done, t_done))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("agent thread panicked")).collect()
    });
    let mut results = Vec::with_capacity(np);
    for outcome in outcomes {
        let (res, msgs) = outcome?;
        results.push(res);
        messages.extend(msgs);
    }
    let total_reads = registry.records().len();
    Ok(DistributedOutcome {
        agents: results,
        messages,
        cross_reads: registry.cross_reads(),
        total_reads,
    })
}

fn run_agent(
    agent: &mut AgentState,
    reg: &AccessRegistry,
    config: &DistributedConfig,
    phase: usize,
    t: f64,
) -> Result<(AgentResult, Vec<Message>)> {
    let id = agent.index + 1;
    let msg = |action| Message { phase, agent: id, action, t_start: t, t_end: t };
    let mut messages = Vec::new();
    let data = agent_data(agent, reg, config.delta_t, config.quadrature).stage("agent-data")?;
    let (p, b) = agent_estimate(agent, reg, &data).stage("agent-estimate")?;
    messages.push(msg("estimate"));
    agent.p = Some(p.clone());
    agent.b_hat = Some(b.clone());
    let g = agent_gradient_solve(agent, reg, config.max_iter, config.error_tol).stage("agent-gradient")?;
    messages.push(msg("gradient"));
    agent.x = Some(g.x.clone());
    let q = agent_update_q(agent, reg, &data, &g.x).stage("agent-q")?;
    messages.push(msg("update-q"));
    let r = agent.own(reg, "R", &agent.r).clone();
    let c = agent.own(reg, "C", &agent.c);
    let k = inverse(&r, "R_ii")? * b.transpose() * &g.x * right_pinv(c)?;
    Ok((
        AgentResult {
            index: agent.index,
            b_hat: b,
            p,
            x: g.x,
            k,
            q,
            r,
            iterations: g.iterations,
            error_norm: g.error_norm,
            error_history: g.error_history,
            gain_history: g.gain_history,
        },
        messages,
    ))
}
