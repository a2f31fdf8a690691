//! Experiment runner behind the `invgame` binary.
//!
//! A run parses and validates the whole configuration before any numerics,
//! dispatches to one pipeline and writes `result.json`, `trace.csv` and the
//! mode-specific artifacts into the output directory. Floats are written with
//! 17 significant digits and nothing time-dependent goes into `result.json`,
//! so identical inputs give byte-identical results.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize, Serializer};
use serde_json::value::RawValue;

use crate::distributed::{solve_distributed, DistributedConfig, DistributedOutcome, ScheduleParams};
use crate::error::Error;
use crate::inverse_mb::{solve_inverse_model_based, GradientForm, InverseRecord, SolverConfig};
use crate::inverse_mf::{solve_inverse_model_free, KnownChannels, MfConfig};
use crate::model::{
    closed_loop, generate_equivalent_costs, output_input_coupling_violations, validate_game,
    verify_nash, CostParameters, FeedbackProfile, LinearGameSystem, NashCertificate, PlayerChannel,
    Tolerances, ValueProfile,
};
use crate::numerics::{format_f64, stability_report, Mat, HURWITZ_MARGIN};
use crate::stabilize::{SeedSign, SeedWeight, StabilizeConfig};
use crate::trajectory::{
    assemble_data, default_intervals, make_noise, simulate, NoiseSpec, Quadrature, TrajectoryLog,
};

/// Largest integrator step accepted with the default exploration band.
pub const MAX_DT_FINE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    SolveMb,
    SolveMf,
    SolveDist,
    VerifyNe,
    Family,
    Simulate,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::SolveMb => "solve-mb",
            Mode::SolveMf => "solve-mf",
            Mode::SolveDist => "solve-dist",
            Mode::VerifyNe => "verify-ne",
            Mode::Family => "family",
            Mode::Simulate => "simulate",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "invgame", version, about = "Inverse problem solver for LQ output-feedback games")]
pub struct Cli {
    #[arg(value_enum)]
    pub mode: Mode,
    /// Experiment file (TOML, or JSON when the extension is .json).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Noise seed; overrides the one in the config.
    #[arg(long, env = "INVGAME_SEED")]
    pub seed: Option<u64>,
}

/// Exit status of a run.
#[derive(Debug)]
pub enum Failure {
    Certificate(String),
    Config(String),
    Numerical(Error),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Certificate(_) => 1,
            Failure::Config(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Certificate(m) => write!(f, "certificate failed: {m}"),
            Failure::Config(m) => write!(f, "invalid config: {m}"),
            Failure::Numerical(e) => match e.stage() {
                Some(_) => write!(f, "numerical failure {e}"),
                None => write!(f, "numerical failure: {e}"),
            },
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Numerical(e)
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn invalid<T>(msg: impl Into<String>) -> Outcome<T> {
    Err(Failure::Config(msg.into()))
}

type Matrix = Vec<Vec<f64>>;

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum PerPlayer {
    One(f64),
    Many(Vec<f64>),
}

impl PerPlayer {
    fn expand(&self, players: usize, what: &str) -> Outcome<Vec<f64>> {
        match self {
            PerPlayer::One(v) => Ok(vec![*v; players]),
            PerPlayer::Many(v) if v.len() == players => Ok(v.clone()),
            PerPlayer::Many(v) => invalid(format!("{what} has {} entries for {players} players", v.len())),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemBlock {
    pub a: Matrix,
    pub b: Vec<Matrix>,
    pub c: Vec<Matrix>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetsBlock {
    pub k: Vec<Matrix>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostsBlock {
    /// `r[i][j]` is R_ij.
    pub r: Vec<Vec<Matrix>>,
    pub q: Option<Vec<Matrix>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolutionBlock {
    pub x: Vec<Matrix>,
    pub k: Vec<Matrix>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientFormName {
    Symmetric,
    PrintedScalar,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedSignName {
    Plus,
    Printed,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedWeightName {
    OutputGram,
    OutputGramPlusIdentity,
}

impl From<SeedWeightName> for SeedWeight {
    fn from(w: SeedWeightName) -> Self {
        match w {
            SeedWeightName::OutputGram => SeedWeight::OutputGram,
            SeedWeightName::OutputGramPlusIdentity => SeedWeight::OutputGramPlusIdentity,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverBlock {
    pub alpha: PerPlayer,
    pub beta: PerPlayer,
    pub delta: Option<PerPlayer>,
    pub correction_tol: Option<f64>,
    pub max_outer: Option<usize>,
    pub max_inner: Option<usize>,
    pub gradient_form: Option<GradientFormName>,
    pub seed_sign: Option<SeedSignName>,
    pub seed_weight: Option<SeedWeightName>,
    pub newton_eps: Option<f64>,
    pub newton_max_outer: Option<usize>,
    pub max_halvings: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFreeBlock {
    pub eps: Option<f64>,
    pub max_newton: Option<usize>,
    pub step_tol: Option<f64>,
    pub q_every_iteration: Option<bool>,
    pub seed_weight: Option<SeedWeightName>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributedBlock {
    pub gamma: Option<PerPlayer>,
    pub max_iter: Option<usize>,
    pub error_tol: Option<f64>,
    pub warmup: Option<f64>,
    pub phase_duration: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseBlock {
    pub amplitude: Option<f64>,
    pub num_terms: Option<usize>,
    pub freq_range: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuadratureName {
    Trapezoid,
    Simpson,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryBlock {
    pub x0: Option<Vec<f64>>,
    pub dt_fine: Option<f64>,
    pub delta_t: Option<f64>,
    /// Horizon T of the data run; defaults to 1.5 times the minimum number of intervals.
    pub duration: Option<f64>,
    pub quadrature: Option<QuadratureName>,
    pub seed: Option<u64>,
    pub noise: Option<NoiseBlock>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TolerancesBlock {
    pub are: Option<f64>,
    pub exist: Option<f64>,
    pub hurwitz_margin: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyBlock {
    /// Prior result file, relative to the config file.
    pub result: PathBuf,
    pub draws: Option<usize>,
    pub scale: Option<f64>,
    pub seed: Option<u64>,
    /// Explicit ΔR tables used instead of random draws.
    pub delta_r: Option<Vec<Vec<Vec<Matrix>>>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Option<Mode>,
    pub system: Option<SystemBlock>,
    pub targets: Option<TargetsBlock>,
    pub costs: Option<CostsBlock>,
    pub solution: Option<SolutionBlock>,
    pub solver: Option<SolverBlock>,
    pub model_free: Option<ModelFreeBlock>,
    pub distributed: Option<DistributedBlock>,
    pub trajectory: Option<TrajectoryBlock>,
    pub tolerances: Option<TolerancesBlock>,
    pub family: Option<FamilyBlock>,
}

impl ExperimentConfig {
    pub fn parse(text: &str, json: bool) -> Outcome<Self> {
        if json {
            serde_json::from_str(text).or_else(|e| invalid(e.to_string()))
        } else {
            toml::from_str(text).or_else(|e| invalid(e.to_string()))
        }
    }

    pub fn load(path: &Path) -> Outcome<Self> {
        let text = fs::read_to_string(path)
            .or_else(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        let json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        Self::parse(&text, json)
    }
}

fn to_mat(rows: &Matrix, what: &str) -> Outcome<Mat> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    if nr == 0 || nc == 0 {
        return invalid(format!("{what} is empty"));
    }
    if rows.iter().any(|r| r.len() != nc) {
        return invalid(format!("{what} has rows of different lengths"));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return invalid(format!("{what} has non-finite entries"));
    }
    Ok(Mat::from_fn(nr, nc, |a, b| rows[a][b]))
}

fn to_mats(list: &[Matrix], what: &str) -> Outcome<Vec<Mat>> {
    list.iter()
        .enumerate()
        .map(|(i, m)| to_mat(m, &format!("{what}_{}", i + 1)))
        .collect()
}

fn to_table(table: &[Vec<Matrix>], what: &str) -> Outcome<Vec<Vec<Mat>>> {
    table
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(j, m)| to_mat(m, &format!("{what}_{}{}", i + 1, j + 1)))
                .collect()
        })
        .collect()
}

fn require<'a, T>(block: &'a Option<T>, name: &str, mode: Mode) -> Outcome<&'a T> {
    block
        .as_ref()
        .ok_or_else(|| Failure::Config(format!("mode {} needs a [{name}] block", mode.name())))
}

fn system_of(cfg: &ExperimentConfig, mode: Mode) -> Outcome<LinearGameSystem> {
    let s = require(&cfg.system, "system", mode)?;
    if s.b.len() != s.c.len() {
        return invalid(format!("{} input matrices but {} output matrices", s.b.len(), s.c.len()));
    }
    let players = to_mats(&s.b, "B")?
        .into_iter()
        .zip(to_mats(&s.c, "C")?)
        .map(|(b, c)| PlayerChannel { b, c })
        .collect();
    LinearGameSystem::new(to_mat(&s.a, "A")?, players).or_else(|e| invalid(e.to_string()))
}

fn feedback_of(list: &[Matrix], sys: &LinearGameSystem) -> Outcome<FeedbackProfile> {
    let k = to_mats(list, "K")?;
    if k.len() != sys.num_players() {
        return invalid(format!("{} gains for {} players", k.len(), sys.num_players()));
    }
    for (i, ki) in k.iter().enumerate() {
        if ki.shape() != (sys.m(i), sys.p(i)) {
            return invalid(format!("K_{} is {:?}, expected {}×{}", i + 1, ki.shape(), sys.m(i), sys.p(i)));
        }
    }
    Ok(FeedbackProfile { k })
}

fn targets_of(cfg: &ExperimentConfig, sys: &LinearGameSystem, mode: Mode) -> Outcome<FeedbackProfile> {
    let fb = feedback_of(&require(&cfg.targets, "targets", mode)?.k, sys)?;
    let rep = stability_report(&closed_loop(sys, &fb)?, HURWITZ_MARGIN)?;
    if !rep.is_hurwitz {
        return invalid(format!(
            "target gains are not stabilizing (spectral abscissa {})",
            format_f64(rep.spectral_abscissa)
        ));
    }
    Ok(fb)
}

fn r_table_of(cfg: &ExperimentConfig, sys: &LinearGameSystem, mode: Mode) -> Outcome<Vec<Vec<Mat>>> {
    let r = to_table(&require(&cfg.costs, "costs", mode)?.r, "R")?;
    let np = sys.num_players();
    if r.len() != np || r.iter().any(|row| row.len() != np) {
        return invalid(format!("R must be a {np}×{np} table"));
    }
    let probe = CostParameters::with_zero_q(sys.n(), r.clone()).or_else(|e| invalid(e.to_string()))?;
    let issues = validate_game(sys, &probe);
    if !issues.is_empty() {
        return invalid(issues.join("; "));
    }
    Ok(r)
}

fn tolerances_of(cfg: &ExperimentConfig) -> Outcome<Tolerances> {
    let d = Tolerances::default();
    let t = cfg.tolerances.clone().unwrap_or_default();
    let tol = Tolerances {
        are: t.are.unwrap_or(d.are),
        exist: t.exist.unwrap_or(d.exist),
        hurwitz_margin: t.hurwitz_margin.unwrap_or(d.hurwitz_margin),
    };
    if [tol.are, tol.exist, tol.hurwitz_margin].iter().any(|v| !(*v >= 0.0)) {
        return invalid("tolerances must be non-negative");
    }
    Ok(tol)
}

fn solver_of(cfg: &ExperimentConfig, np: usize, mode: Mode) -> Outcome<SolverConfig> {
    let s = require(&cfg.solver, "solver", mode)?;
    let mut c = SolverConfig::uniform(np, 1.0, 1.0);
    c.alpha = s.alpha.expand(np, "alpha")?;
    c.beta = s.beta.expand(np, "beta")?;
    if let Some(d) = &s.delta {
        c.delta = d.expand(np, "delta")?;
    }
    c.correction_tol = s.correction_tol.unwrap_or(c.correction_tol);
    c.max_outer = s.max_outer.unwrap_or(c.max_outer);
    c.max_inner = s.max_inner.unwrap_or(c.max_inner);
    c.gradient_form = match s.gradient_form {
        Some(GradientFormName::PrintedScalar) => GradientForm::PrintedScalar,
        _ => GradientForm::Symmetric,
    };
    let d = StabilizeConfig::default();
    c.stabilize = StabilizeConfig {
        eps: s.newton_eps.unwrap_or(d.eps),
        max_outer: s.newton_max_outer.unwrap_or(d.max_outer),
        sign: match s.seed_sign {
            Some(SeedSignName::Printed) => SeedSign::Printed,
            _ => SeedSign::Plus,
        },
        weight: s.seed_weight.map_or(d.weight, Into::into),
        max_halvings: s.max_halvings.unwrap_or(d.max_halvings),
    };
    c.validate(np).or_else(|e| invalid(e.to_string()))?;
    Ok(c)
}

/// Trajectory settings shared by the data-driven modes.
#[derive(Debug, Clone)]
struct DataSettings {
    x0: Vec<f64>,
    dt_fine: f64,
    delta_t: f64,
    duration: Option<f64>,
    quadrature: Quadrature,
    noise: NoiseSpec,
}

fn data_settings_of(cfg: &ExperimentConfig, n: usize, seed_override: Option<u64>) -> Outcome<DataSettings> {
    let t = cfg.trajectory.clone().unwrap_or_default();
    let x0 = t.x0.unwrap_or_else(|| vec![1.0; n]);
    if x0.len() != n || x0.iter().any(|v| !v.is_finite()) {
        return invalid(format!("x0 must hold {n} finite entries"));
    }
    let dt_fine = t.dt_fine.unwrap_or(MAX_DT_FINE);
    if !(dt_fine > 0.0 && dt_fine <= MAX_DT_FINE) {
        return invalid(format!("dt_fine = {dt_fine} must lie in (0, {MAX_DT_FINE}]"));
    }
    let delta_t = t.delta_t.unwrap_or(0.01);
    let per = delta_t / dt_fine;
    if !(delta_t > 0.0) || (per - per.round()).abs() > 1e-6 * per || per.round() < 1.0 {
        return invalid(format!("delta_t = {delta_t} is not a multiple of dt_fine = {dt_fine}"));
    }
    if let Some(d) = t.duration {
        if !(d > 0.0 && d.is_finite()) {
            return invalid("duration must be positive");
        }
    }
    let mut noise = NoiseSpec { seed: seed_override.or(t.seed).unwrap_or(0), ..Default::default() };
    if let Some(nb) = t.noise {
        noise.amplitude = nb.amplitude.unwrap_or(noise.amplitude);
        noise.num_terms = nb.num_terms.unwrap_or(noise.num_terms);
        if let Some([lo, hi]) = nb.freq_range {
            noise.freq_range = (lo, hi);
        }
    }
    noise.validate().or_else(|e| invalid(e.to_string()))?;
    Ok(DataSettings {
        x0,
        dt_fine,
        delta_t,
        duration: t.duration,
        quadrature: match t.quadrature {
            Some(QuadratureName::Trapezoid) => Quadrature::Trapezoid,
            _ => Quadrature::Simpson,
        },
        noise,
    })
}

/// Serializes a float with 17 significant digits as a bare JSON number.
struct F(f64);

impl Serialize for F {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            RawValue::from_string(format_f64(self.0))
                .map_err(serde::ser::Error::custom)?
                .serialize(s)
        } else {
            s.serialize_str(&format_f64(self.0))
        }
    }
}

fn fv(v: &[f64]) -> Vec<F> {
    v.iter().map(|x| F(*x)).collect()
}

fn fm(m: &Mat) -> Vec<Vec<F>> {
    m.row_iter().map(|r| r.iter().map(|x| F(*x)).collect()).collect()
}

fn fms(ms: &[Mat]) -> Vec<Vec<Vec<F>>> {
    ms.iter().map(fm).collect()
}

fn ftable(t: &[Vec<Mat>]) -> Vec<Vec<Vec<Vec<F>>>> {
    t.iter().map(|row| fms(row)).collect()
}

#[derive(Serialize)]
struct CertificateJson {
    passed: bool,
    residual_norms: Vec<F>,
    existence_defects: Vec<F>,
    gain_defects: Vec<F>,
    spectral_abscissa: F,
    tolerances: TolerancesJson,
}

#[derive(Serialize)]
struct TolerancesJson {
    are: F,
    exist: F,
    hurwitz_margin: F,
}

fn cert_json(c: &NashCertificate, tol: &Tolerances) -> CertificateJson {
    CertificateJson {
        passed: c.passed,
        residual_norms: fv(&c.residual_norms),
        existence_defects: fv(&c.existence_defects),
        gain_defects: fv(&c.gain_defects),
        spectral_abscissa: F(c.spectral_abscissa),
        tolerances: TolerancesJson {
            are: F(tol.are),
            exist: F(tol.exist),
            hurwitz_margin: F(tol.hurwitz_margin),
        },
    }
}

#[derive(Serialize, Default)]
struct ResultJson {
    mode: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    players: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    q: Option<Vec<Vec<Vec<F>>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    r: Option<Vec<Vec<Vec<Vec<F>>>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    x: Option<Vec<Vec<Vec<F>>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    k: Option<Vec<Vec<Vec<F>>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    b_hat: Option<Vec<Vec<Vec<F>>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    certificate: Option<CertificateJson>,
    #[serde(skip_serializing_if = "Option::is_none")]
    iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stabilization_iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    newton_iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    agent_iterations: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    agent_errors: Option<Vec<F>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cross_agent_reads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<DataJson>,
    #[serde(skip_serializing_if = "Option::is_none")]
    draws: Option<Vec<DrawJson>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    failed_draws: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    warnings: Vec<String>,
}

#[derive(Serialize)]
struct DataJson {
    samples: usize,
    t_end: F,
    final_state: Vec<F>,
    intervals: usize,
    unknowns: usize,
    excitation_rank: usize,
}

#[derive(Serialize)]
struct DrawJson {
    index: usize,
    q: Vec<Vec<Vec<F>>>,
    r: Vec<Vec<Vec<Vec<F>>>>,
    certificate: CertificateJson,
}

#[derive(Serialize)]
struct MessageJson {
    phase: usize,
    agent: usize,
    action: &'static str,
    t_start: F,
    t_end: F,
}

/// Everything a run writes; the caller decides where.
pub struct Artifacts {
    pub result: String,
    pub trace: Option<String>,
    pub trajectory: Option<String>,
    pub messages: Option<String>,
    /// Set when the run finished but its certificate did not pass.
    pub certificate_failure: Option<String>,
}

fn result_string(r: &ResultJson) -> Outcome<String> {
    let mut s = serde_json::to_string_pretty(r).map_err(Error::from)?;
    s.push('\n');
    Ok(s)
}

fn trace_string(np: usize, rows: &[(usize, Vec<f64>, f64)]) -> Outcome<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["s".to_string()];
    header.extend((1..=np).map(|i| format!("e_{i}")));
    header.push("spectral_abscissa".into());
    w.write_record(&header).map_err(Error::from)?;
    for (s, e, a) in rows {
        let mut row = vec![s.to_string()];
        row.extend(e.iter().map(|v| format_f64(*v)));
        row.push(format_f64(*a));
        w.write_record(&row).map_err(Error::from)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn trace_rows(records: &[InverseRecord]) -> Vec<(usize, Vec<f64>, f64)> {
    records
        .iter()
        .map(|r| (r.s, r.error_norms.clone(), r.spectral_abscissa))
        .collect()
}

fn log_string(log: &TrajectoryLog) -> Outcome<String> {
    let mut buf = Vec::new();
    log.write_csv(&mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
}

fn certificate_check(passed: bool, what: &str) -> Option<String> {
    (!passed).then(|| what.to_string())
}

fn run_solve_mb(cfg: &ExperimentConfig) -> Outcome<Artifacts> {
    let mode = Mode::SolveMb;
    let sys = system_of(cfg, mode)?;
    let k_target = targets_of(cfg, &sys, mode)?;
    let r = r_table_of(cfg, &sys, mode)?;
    let solver = solver_of(cfg, sys.num_players(), mode)?;
    let tol = tolerances_of(cfg)?;
    let coupling = output_input_coupling_violations(&sys);
    if !coupling.is_empty() {
        return invalid(coupling.join("; "));
    }
    let sol = solve_inverse_model_based(&sys, &r, &k_target, &solver)?;
    let cert = verify_nash(&sys, &sol.costs, &sol.values, &sol.feedback, &tol)?;
    let result = ResultJson {
        mode: mode.name(),
        players: Some(sys.num_players()),
        q: Some(fms(&sol.costs.q)),
        r: Some(ftable(&sol.costs.r)),
        x: Some(fms(&sol.values.x)),
        k: Some(fms(&sol.feedback.k)),
        certificate: Some(cert_json(&cert, &tol)),
        iterations: Some(sol.iterations()),
        stabilization_iterations: Some(sol.trace.stabilization.outer_iterations()),
        ..Default::default()
    };
    Ok(Artifacts {
        result: result_string(&result)?,
        trace: Some(trace_string(sys.num_players(), &trace_rows(&sol.trace.records))?),
        trajectory: None,
        messages: None,
        certificate_failure: certificate_check(cert.passed, "Nash certificate of the model-based result"),
    })
}

fn data_run(sys: &LinearGameSystem, k_target: &FeedbackProfile, ds: &DataSettings) -> Outcome<TrajectoryLog> {
    let np = sys.num_players();
    let dims: Vec<usize> = (0..np).map(|j| sys.m(j)).collect();
    let duration = ds
        .duration
        .unwrap_or(default_intervals(sys.n(), &dims) as f64 * ds.delta_t);
    let noise = (0..np)
        .map(|j| make_noise(&ds.noise.for_player(j), sys.m(j)))
        .collect::<crate::Result<Vec<_>>>()?;
    Ok(simulate(sys, k_target, &noise, &ds.x0, ds.dt_fine, 0.0, duration)
        .map_err(|e| Error::Stage { stage: "simulate", source: Box::new(e) })?)
}

fn mf_config_of(cfg: &ExperimentConfig, solver: SolverConfig) -> Outcome<MfConfig> {
    let mut c = MfConfig::new(solver);
    let b = cfg.model_free.clone().unwrap_or_default();
    c.eps = b.eps.unwrap_or(c.eps);
    c.max_newton = b.max_newton.unwrap_or(c.max_newton);
    c.step_tol = b.step_tol.unwrap_or(c.step_tol);
    c.q_every_iteration = b.q_every_iteration.unwrap_or(c.q_every_iteration);
    if let Some(w) = b.seed_weight {
        c.seed_weight = w.into();
    }
    if !(c.eps > 0.0) || c.max_newton == 0 || !(c.step_tol >= 0.0) {
        return invalid("model_free: eps and max_newton must be positive, step_tol non-negative");
    }
    Ok(c)
}

fn run_solve_mf(cfg: &ExperimentConfig, seed: Option<u64>) -> Outcome<Artifacts> {
    let mode = Mode::SolveMf;
    let sys = system_of(cfg, mode)?;
    let k_target = targets_of(cfg, &sys, mode)?;
    let r = r_table_of(cfg, &sys, mode)?;
    let solver = solver_of(cfg, sys.num_players(), mode)?;
    let mut mf = mf_config_of(cfg, solver)?;
    mf.seed_sign = mf.solver.stabilize.sign;
    let tol = tolerances_of(cfg)?;
    let ds = data_settings_of(cfg, sys.n(), seed)?;
    let coupling = output_input_coupling_violations(&sys);
    if !coupling.is_empty() {
        return invalid(coupling.join("; "));
    }
    let log = data_run(&sys, &k_target, &ds)?;
    let data = assemble_data(&log, ds.delta_t, ds.quadrature)
        .map_err(|e| Error::Stage { stage: "data", source: Box::new(e) })?;
    let c: Vec<Mat> = sys.players.iter().map(|p| p.c.clone()).collect();
    let known = KnownChannels { c: &c, r: &r };
    let sol = solve_inverse_model_free(&data, &known, &k_target, &mf, Some(&sys))?;
    let cert = verify_nash(&sys, &sol.costs, &sol.values, &sol.feedback, &tol)?;
    let result = ResultJson {
        mode: mode.name(),
        players: Some(sys.num_players()),
        q: Some(fms(&sol.costs.q)),
        r: Some(ftable(&sol.costs.r)),
        x: Some(fms(&sol.values.x)),
        k: Some(fms(&sol.feedback.k)),
        b_hat: Some(fms(&sol.b_hat)),
        certificate: Some(cert_json(&cert, &tol)),
        iterations: Some(sol.iterations()),
        newton_iterations: Some(sol.newton.last().map_or(0, |r| r.k + 1)),
        seed: Some(ds.noise.seed),
        warnings: sol.warnings.clone(),
        ..Default::default()
    };
    Ok(Artifacts {
        result: result_string(&result)?,
        trace: Some(trace_string(sys.num_players(), &trace_rows(&sol.trace.records))?),
        trajectory: Some(log_string(&log)?),
        messages: None,
        certificate_failure: certificate_check(cert.passed, "Nash certificate of the model-free result on the true system"),
    })
}

fn dist_config_of(cfg: &ExperimentConfig, np: usize, ds: &DataSettings) -> Outcome<DistributedConfig> {
    let b = cfg.distributed.clone().unwrap_or_default();
    let mut c = DistributedConfig::new(np, ds.x0.len(), ds.noise.seed);
    if let Some(g) = &b.gamma {
        c.gamma = g.expand(np, "gamma")?;
    }
    c.max_iter = b.max_iter.unwrap_or(c.max_iter);
    c.error_tol = b.error_tol.unwrap_or(c.error_tol);
    c.delta_t = ds.delta_t;
    c.quadrature = ds.quadrature;
    c.schedule = ScheduleParams {
        x0: ds.x0.clone(),
        dt_fine: ds.dt_fine,
        warmup: b.warmup.unwrap_or(c.schedule.warmup),
        phase_duration: b.phase_duration.or(ds.duration).unwrap_or(c.schedule.phase_duration),
    };
    c.noise = (0..np).map(|i| ds.noise.for_player(i)).collect();
    if c.gamma.iter().any(|g| !(*g > 0.0)) || !(c.error_tol >= 0.0) || !(c.schedule.warmup >= 0.0) {
        return invalid("distributed: gamma must be positive, error_tol and warmup non-negative");
    }
    Ok(c)
}

fn dist_trace(out: &DistributedOutcome, sys: &LinearGameSystem) -> Vec<(usize, Vec<f64>, f64)> {
    let steps = out.agents.iter().map(|a| a.iterations).max().unwrap_or(0);
    (0..steps)
        .map(|s| {
            let pick = |a: &crate::distributed::AgentResult| s.min(a.iterations.saturating_sub(1));
            let errors = out
                .agents
                .iter()
                .map(|a| if a.iterations == 0 { 0.0 } else { a.error_history[pick(a)] })
                .collect();
            let k = FeedbackProfile {
                k: out
                    .agents
                    .iter()
                    .map(|a| if a.iterations == 0 { a.k.clone() } else { a.gain_history[pick(a)].clone() })
                    .collect(),
            };
            let abscissa = closed_loop(sys, &k)
                .and_then(|acl| stability_report(&acl, HURWITZ_MARGIN))
                .map_or(f64::NAN, |r| r.spectral_abscissa);
            (s, errors, abscissa)
        })
        .collect()
}

fn run_solve_dist(cfg: &ExperimentConfig, seed: Option<u64>) -> Outcome<Artifacts> {
    let mode = Mode::SolveDist;
    let sys = system_of(cfg, mode)?;
    let k_target = targets_of(cfg, &sys, mode)?;
    let r = r_table_of(cfg, &sys, mode)?;
    let tol = tolerances_of(cfg)?;
    let ds = data_settings_of(cfg, sys.n(), seed)?;
    let dc = dist_config_of(cfg, sys.num_players(), &ds)?;
    let r_diag: Vec<Mat> = (0..sys.num_players()).map(|i| r[i][i].clone()).collect();
    let out = solve_distributed(&sys, &k_target, &r_diag, &dc)?;
    let costs = out.costs()?;
    let cert = verify_nash(&sys, &costs, &out.values(), &out.feedback(), &tol)?;
    let mut messages = String::new();
    for m in &out.messages {
        let line = MessageJson { phase: m.phase, agent: m.agent, action: m.action, t_start: F(m.t_start), t_end: F(m.t_end) };
        messages.push_str(&serde_json::to_string(&line).map_err(Error::from)?);
        messages.push('\n');
    }
    let trace = dist_trace(&out, &sys);
    let result = ResultJson {
        mode: mode.name(),
        players: Some(sys.num_players()),
        q: Some(fms(&costs.q)),
        r: Some(ftable(&costs.r)),
        x: Some(fms(&out.values().x)),
        k: Some(fms(&out.feedback().k)),
        b_hat: Some(out.agents.iter().map(|a| fm(&a.b_hat)).collect()),
        certificate: Some(cert_json(&cert, &tol)),
        iterations: Some(trace.len()),
        agent_iterations: Some(out.agents.iter().map(|a| a.iterations).collect()),
        agent_errors: Some(out.agents.iter().map(|a| F(a.error_norm)).collect()),
        cross_agent_reads: Some(out.cross_reads.len()),
        seed: Some(ds.noise.seed),
        ..Default::default()
    };
    Ok(Artifacts {
        result: result_string(&result)?,
        trace: Some(trace_string(sys.num_players(), &trace)?),
        trajectory: None,
        messages: Some(messages),
        certificate_failure: if !out.cross_reads.is_empty() {
            Some(format!("{} cross-agent reads recorded", out.cross_reads.len()))
        } else {
            certificate_check(cert.passed, "Nash certificate of the assembled distributed result")
        },
    })
}

fn run_verify(cfg: &ExperimentConfig) -> Outcome<Artifacts> {
    let mode = Mode::VerifyNe;
    let sys = system_of(cfg, mode)?;
    let costs_block = require(&cfg.costs, "costs", mode)?;
    let r = r_table_of(cfg, &sys, mode)?;
    let q = to_mats(
        costs_block
            .q
            .as_ref()
            .ok_or_else(|| Failure::Config("verify-ne needs costs.q".into()))?,
        "Q",
    )?;
    let costs = CostParameters::new(q, r).or_else(|e| invalid(e.to_string()))?;
    let sol = require(&cfg.solution, "solution", mode)?;
    let values = ValueProfile { x: to_mats(&sol.x, "X")? };
    let fb = feedback_of(&sol.k, &sys)?;
    let tol = tolerances_of(cfg)?;
    let cert = verify_nash(&sys, &costs, &values, &fb, &tol).or_else(|e| invalid(e.to_string()))?;
    let result = ResultJson {
        mode: mode.name(),
        players: Some(sys.num_players()),
        certificate: Some(cert_json(&cert, &tol)),
        ..Default::default()
    };
    Ok(Artifacts {
        result: result_string(&result)?,
        trace: None,
        trajectory: None,
        messages: None,
        certificate_failure: certificate_check(cert.passed, "supplied tuple is not a certified equilibrium"),
    })
}

/// Fields of a prior `result.json` needed by `family`.
#[derive(Debug, Deserialize)]
struct PriorResult {
    q: Vec<Matrix>,
    r: Vec<Vec<Matrix>>,
    x: Vec<Matrix>,
    k: Vec<Matrix>,
}

fn random_delta(sys: &LinearGameSystem, rng: &mut ChaCha8Rng, scale: f64) -> Vec<Vec<Mat>> {
    let np = sys.num_players();
    (0..np)
        .map(|i| {
            (0..np)
                .map(|j| {
                    let m = sys.m(j);
                    if i == j {
                        return Mat::zeros(m, m);
                    }
                    let g = Mat::from_fn(m, m, |_, _| rng.random_range(-scale..=scale));
                    (&g + g.transpose()) * 0.5
                })
                .collect()
        })
        .collect()
}

fn run_family(cfg: &ExperimentConfig, config_dir: &Path, seed: Option<u64>) -> Outcome<Artifacts> {
    let mode = Mode::Family;
    let sys = system_of(cfg, mode)?;
    let fam = require(&cfg.family, "family", mode)?;
    let tol = tolerances_of(cfg)?;
    let path = config_dir.join(&fam.result);
    let text = fs::read_to_string(&path)
        .or_else(|e| invalid(format!("cannot read prior result {}: {e}", path.display())))?;
    let prior: PriorResult = serde_json::from_str(&text)
        .or_else(|e| invalid(format!("prior result {}: {e}", path.display())))?;
    let costs = CostParameters::new(to_mats(&prior.q, "Q")?, to_table(&prior.r, "R")?)
        .or_else(|e| invalid(e.to_string()))?;
    let values = ValueProfile { x: to_mats(&prior.x, "X")? };
    let fb = feedback_of(&prior.k, &sys)?;
    let np = sys.num_players();
    let draws: Vec<Vec<Vec<Mat>>> = match &fam.delta_r {
        Some(explicit) => explicit
            .iter()
            .enumerate()
            .map(|(d, t)| to_table(t, &format!("draw {} ΔR", d + 1)))
            .collect::<Outcome<_>>()?,
        None => {
            let scale = fam.scale.unwrap_or(1.0);
            if !(scale >= 0.0 && scale.is_finite()) {
                return invalid("family.scale must be non-negative");
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed.or(fam.seed).unwrap_or(0));
            (0..fam.draws.unwrap_or(10)).map(|_| random_delta(&sys, &mut rng, scale)).collect()
        }
    };
    for (d, t) in draws.iter().enumerate() {
        if t.len() != np || t.iter().any(|row| row.len() != np) {
            return invalid(format!("draw {}: ΔR must be a {np}×{np} table", d + 1));
        }
        for (i, row) in t.iter().enumerate() {
            for (j, m) in row.iter().enumerate() {
                if m.shape() != (sys.m(j), sys.m(j)) {
                    return invalid(format!("draw {}: ΔR_{}{} has shape {:?}", d + 1, i + 1, j + 1, m.shape()));
                }
            }
            if row[i].iter().any(|v| *v != 0.0) {
                return invalid(format!("draw {}: ΔR_{1}{1} must be zero", d + 1, i + 1));
            }
        }
    }
    let checked = std::thread::scope(|scope| {
        let handles: Vec<_> = draws
            .iter()
            .map(|delta| {
                let (sys, costs, values, fb, tol) = (&sys, &costs, &values, &fb, &tol);
                scope.spawn(move || -> crate::Result<(CostParameters, NashCertificate)> {
                    let c = generate_equivalent_costs(sys, costs, values, fb, delta)?;
                    let cert = verify_nash(sys, &c, values, fb, tol)?;
                    Ok((c, cert))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("draw thread panicked")).collect::<Vec<_>>()
    });
    let mut out = Vec::with_capacity(draws.len());
    let mut failed = Vec::new();
    for (d, res) in checked.into_iter().enumerate() {
        let (c, cert) = res?;
        if !cert.passed {
            failed.push(d + 1);
        }
        out.push(DrawJson { index: d + 1, q: fms(&c.q), r: ftable(&c.r), certificate: cert_json(&cert, &tol) });
    }
    let result = ResultJson {
        mode: mode.name(),
        players: Some(np),
        draws: Some(out),
        failed_draws: Some(failed.clone()),
        ..Default::default()
    };
    Ok(Artifacts {
        result: result_string(&result)?,
        trace: None,
        trajectory: None,
        messages: None,
        certificate_failure: (!failed.is_empty()).then(|| {
            format!(
                "draws {} fail verification",
                failed.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
            )
        }),
    })
}

fn run_simulate(cfg: &ExperimentConfig, seed: Option<u64>) -> Outcome<Artifacts> {
    let mode = Mode::Simulate;
    let sys = system_of(cfg, mode)?;
    let k_target = targets_of(cfg, &sys, mode)?;
    let ds = data_settings_of(cfg, sys.n(), seed)?;
    let log = data_run(&sys, &k_target, &ds)?;
    let data = assemble_data(&log, ds.delta_t, ds.quadrature)
        .map_err(|e| Error::Stage { stage: "data", source: Box::new(e) })?;
    let last = log.len() - 1;
    let result = ResultJson {
        mode: mode.name(),
        players: Some(sys.num_players()),
        seed: Some(ds.noise.seed),
        data: Some(DataJson {
            samples: log.len(),
            t_end: F(log.times[last]),
            final_state: fv(&log.states[last]),
            intervals: data.intervals(),
            unknowns: data.unknowns(),
            excitation_rank: data.excitation_rank,
        }),
        ..Default::default()
    };
    Ok(Artifacts {
        result: result_string(&result)?,
        trace: None,
        trajectory: Some(log_string(&log)?),
        messages: None,
        certificate_failure: None,
    })
}

/// Runs one mode on a parsed config and returns the artifacts.
pub fn execute(mode: Mode, cfg: &ExperimentConfig, config_dir: &Path, seed: Option<u64>) -> Outcome<Artifacts> {
    if let Some(m) = cfg.mode {
        if m != mode {
            return invalid(format!("config is for mode {}, invoked as {}", m.name(), mode.name()));
        }
    }
    match mode {
        Mode::SolveMb => run_solve_mb(cfg),
        Mode::SolveMf => run_solve_mf(cfg, seed),
        Mode::SolveDist => run_solve_dist(cfg, seed),
        Mode::VerifyNe => run_verify(cfg),
        Mode::Family => run_family(cfg, config_dir, seed),
        Mode::Simulate => run_simulate(cfg, seed),
    }
}

fn write_artifacts(dir: &Path, a: &Artifacts, wall_time: f64) -> Outcome<()> {
    let io = |e: std::io::Error| Failure::Numerical(Error::Stage { stage: "output", source: Box::new(Error::Io(e)) });
    fs::create_dir_all(dir).map_err(io)?;
    fs::write(dir.join("result.json"), &a.result).map_err(io)?;
    let files = [("trace.csv", &a.trace), ("trajectory.csv", &a.trajectory), ("messages.jsonl", &a.messages)];
    for (name, body) in files {
        if let Some(body) = body {
            fs::write(dir.join(name), body).map_err(io)?;
        }
    }
    let mut f = fs::File::create(dir.join("timing.json")).map_err(io)?;
    writeln!(f, "{{\"wall_time_s\": {}}}", format_f64(wall_time)).map_err(io)?;
    Ok(())
}

/// Full run: load, execute, write. Returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    let start = Instant::now();
    let outcome = ExperimentConfig::load(&cli.config).and_then(|cfg| {
        let dir = cli.config.parent().unwrap_or(Path::new("."));
        let a = execute(cli.mode, &cfg, dir, cli.seed)?;
        write_artifacts(&cli.out, &a, start.elapsed().as_secs_f64())?;
        match a.certificate_failure {
            Some(m) => Err(Failure::Certificate(m)),
            None => Ok(()),
        }
    });
    match outcome {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("invgame: {f}");
            f.code()
        }
    }
}
