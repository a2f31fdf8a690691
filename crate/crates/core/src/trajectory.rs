//! Noisy closed-loop simulation and the batch data matrices used by the
//! model-free equations.

use std::io::{Read, Write};

use nalgebra::DVector;
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{state_feedback, FeedbackProfile, LinearGameSystem};
use crate::numerics::{format_f64, hat_len, Mat, LSTSQ_RCOND};

/// Divergence guard on ‖x‖.
pub const OVERFLOW_GUARD: f64 = 1e12;

/// Exploration signal `amplitude · Σ sin(r_j t)` with frequencies drawn once.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub amplitude: f64,
    pub num_terms: usize,
    pub freq_range: (f64, f64),
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            amplitude: 100.0,
            num_terms: 1000,
            freq_range: (-500.0, 500.0),
            seed: 0,
        }
    }
}

impl NoiseSpec {
    /// Same spec with a seed derived for player `i`.
    pub fn for_player(&self, i: usize) -> Self {
        Self {
            seed: self
                .seed
                .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(i as u64 + 1)),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude >= 0.0) || !self.amplitude.is_finite() {
            return Err(Error::InvalidArgument("noise amplitude must be ≥ 0".into()));
        }
        let (lo, hi) = self.freq_range;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "noise frequency range [{lo}, {hi}] is empty"
            )));
        }
        Ok(())
    }
}

/// Sampled exploration signal for one player's input channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    pub amplitude: f64,
    /// Frequencies per input channel.
    pub freqs: Vec<Vec<f64>>,
}

impl Noise {
    pub fn zero(channels: usize) -> Self {
        Self {
            amplitude: 0.0,
            freqs: vec![Vec::new(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.freqs.len()
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        self.freqs
            .iter()
            .map(|fs| {
                if self.amplitude == 0.0 {
                    0.0
                } else {
                    self.amplitude * fs.iter().map(|r| (r * t).sin()).sum::<f64>()
                }
            })
            .collect()
    }
}

pub fn make_noise(spec: &NoiseSpec, channels: usize) -> Result<Noise> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dist = Uniform::new(spec.freq_range.0, spec.freq_range.1)
        .map_err(|e| Error::InvalidArgument(format!("noise frequency range: {e}")))?;
    let freqs = (0..channels)
        .map(|_| (0..spec.num_terms).map(|_| dist.sample(&mut rng)).collect())
        .collect();
    Ok(Noise {
        amplitude: spec.amplitude,
        freqs,
    })
}

/// States and inputs at every fine integration step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub dt_fine: f64,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// `inputs[k][j]` is u_j at step k.
    pub inputs: Vec<Vec<Vec<f64>>>,
    /// Input width m_j of every logged channel.
    pub input_dims: Vec<usize>,
}

impl TrajectoryLog {
    pub fn n(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Keeps the state and the inputs of player `j` only.
    pub fn restrict(&self, j: usize) -> TrajectoryLog {
        TrajectoryLog {
            dt_fine: self.dt_fine,
            times: self.times.clone(),
            states: self.states.clone(),
            inputs: self.inputs.iter().map(|u| vec![u[j].clone()]).collect(),
            input_dims: vec![self.input_dims[j]],
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.n()).map(|a| format!("x_{a}")));
        for (j, m) in self.input_dims.iter().enumerate() {
            header.extend((1..=*m).map(|c| format!("u_{}_{c}", j + 1)));
        }
        wr.write_record(&header)?;
        for k in 0..self.len() {
            let mut row = vec![format_f64(self.times[k])];
            row.extend(self.states[k].iter().map(|v| format_f64(*v)));
            for u in &self.inputs[k] {
                row.extend(u.iter().map(|v| format_f64(*v)));
            }
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads a log written by [`TrajectoryLog::write_csv`].
    pub fn read_csv<R: Read>(r: R) -> Result<TrajectoryLog> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers()?.clone();
        let bad = |msg: String| Error::InvalidArgument(format!("trajectory csv: {msg}"));
        if header.get(0) != Some("t") {
            return Err(bad("first column must be t".into()));
        }
        let n = header.iter().filter(|h| h.starts_with("x_")).count();
        let mut input_dims: Vec<usize> = Vec::new();
        for h in header.iter().skip(1 + n) {
            let parts: Vec<&str> = h.split('_').collect();
            let j: usize = match parts.as_slice() {
                ["u", j, _] => j.parse().map_err(|_| bad(format!("bad column {h}")))?,
                _ => return Err(bad(format!("bad column {h}"))),
            };
            if j == 0 || j > input_dims.len() + 1 {
                return Err(bad(format!("column {h} out of order")));
            }
            if j > input_dims.len() {
                input_dims.push(0);
            }
            input_dims[j - 1] += 1;
        }
        let mut log = TrajectoryLog {
            dt_fine: 0.0,
            times: Vec::new(),
            states: Vec::new(),
            inputs: Vec::new(),
            input_dims: input_dims.clone(),
        };
        for rec in rd.records() {
            let rec = rec?;
            let vals = rec
                .iter()
                .map(|s| s.trim().parse::<f64>().map_err(|_| bad(format!("bad number {s}"))))
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != header.len() {
                return Err(bad("ragged row".into()));
            }
            log.times.push(vals[0]);
            log.states.push(vals[1..1 + n].to_vec());
            let mut off = 1 + n;
            let mut us = Vec::with_capacity(input_dims.len());
            for m in &input_dims {
                us.push(vals[off..off + m].to_vec());
                off += m;
            }
            log.inputs.push(us);
        }
        if log.times.len() < 2 {
            return Err(bad("needs at least two rows".into()));
        }
        log.dt_fine = log.times[1] - log.times[0];
        Ok(log)
    }
}

fn rk4_step<F: Fn(f64, &DVector<f64>) -> DVector<f64>>(f: &F, t: f64, x: &DVector<f64>, h: f64) -> DVector<f64> {
    let k1 = f(t, x);
    let k2 = f(t + h / 2.0, &(x + &k1 * (h / 2.0)));
    let k3 = f(t + h / 2.0, &(x + &k2 * (h / 2.0)));
    let k4 = f(t + h, &(x + &k3 * h));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Integrates ẋ = Ax + ΣB_ju_j with u_j = −K_jC_jx + ω_j by fixed-step RK4,
/// starting at time `t0`.
pub fn simulate(
    sys: &LinearGameSystem,
    fb: &FeedbackProfile,
    noise: &[Noise],
    x0: &[f64],
    dt_fine: f64,
    t0: f64,
    duration: f64,
) -> Result<TrajectoryLog> {
    let np = sys.num_players();
    let n = sys.n();
    if noise.len() != np || x0.len() != n {
        return Err(Error::Dimension(format!(
            "simulation needs {np} noise signals and an initial state of length {n}"
        )));
    }
    for (j, w) in noise.iter().enumerate() {
        if w.channels() != sys.m(j) {
            return Err(Error::Dimension(format!(
                "noise for player {} has {} channels, input has {}",
                j + 1,
                w.channels(),
                sys.m(j)
            )));
        }
    }
    if !(dt_fine > 0.0) || !(duration >= 0.0) {
        return Err(Error::InvalidArgument("dt_fine must be positive and T non-negative".into()));
    }
    let f = state_feedback(sys, fb)?;
    let steps = (duration / dt_fine).round() as usize;
    let inputs_at = |t: f64, x: &DVector<f64>| -> Vec<DVector<f64>> {
        (0..np)
            .map(|j| DVector::from_vec(noise[j].eval(t)) - &f[j] * x)
            .collect()
    };
    let rhs = |t: f64, x: &DVector<f64>| -> DVector<f64> {
        let mut dx = &sys.a * x;
        for (j, u) in inputs_at(t, x).iter().enumerate() {
            dx += sys.b(j) * u;
        }
        dx
    };
    let mut log = TrajectoryLog {
        dt_fine,
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
        inputs: Vec::with_capacity(steps + 1),
        input_dims: (0..np).map(|j| sys.m(j)).collect(),
    };
    let mut x = DVector::from_column_slice(x0);
    for k in 0..=steps {
        let t = t0 + k as f64 * dt_fine;
        let norm = x.norm();
        if !(norm <= OVERFLOW_GUARD) {
            return Err(Error::Diverged { t, norm });
        }
        log.times.push(t);
        log.states.push(x.as_slice().to_vec());
        log.inputs
            .push(inputs_at(t, &x).into_iter().map(|u| u.as_slice().to_vec()).collect());
        if k < steps {
            x = rk4_step(&rhs, t, &x, dt_fine);
        }
    }
    Ok(log)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Quadrature {
    Trapezoid,
    /// Composite Simpson; needs an even number of fine steps per interval.
    #[default]
    Simpson,
}

/// Batch matrices over s intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrices {
    pub n: usize,
    /// s × n(n+1)/2.
    pub delta_xx: Mat,
    /// s × n².
    pub i_xx: Mat,
    /// Per player, s × n·m_j.
    pub i_xu: Vec<Mat>,
    /// s × n(n+1)/2.
    pub i_qx: Mat,
    /// Rank of [δxx, I_xu_1, .., I_xu_N].
    pub excitation_rank: usize,
}

impl DataMatrices {
    pub fn intervals(&self) -> usize {
        self.delta_xx.nrows()
    }

    pub fn input_dims(&self) -> Vec<usize> {
        self.i_xu.iter().map(|m| m.ncols() / self.n).collect()
    }

    /// Column count of the full regressor.
    pub fn unknowns(&self) -> usize {
        hat_len(self.n) + self.i_xu.iter().map(|m| m.ncols()).sum::<usize>()
    }

    pub fn has_full_excitation(&self) -> bool {
        self.excitation_rank == self.unknowns()
    }

    /// Only the rows and the input block of player `j`.
    pub fn restrict(&self, j: usize) -> DataMatrices {
        let mut out = self.clone();
        out.i_xu = vec![self.i_xu[j].clone()];
        out.excitation_rank = excitation_rank(&out.delta_xx, &out.i_xu);
        out
    }
}

/// Minimum number of intervals for inputs of widths `input_dims`.
pub fn min_intervals(n: usize, input_dims: &[usize]) -> usize {
    hat_len(n) + input_dims.iter().map(|m| m * n).sum::<usize>()
}

/// Default interval count: 1.5 times the minimum, rounded up.
pub fn default_intervals(n: usize, input_dims: &[usize]) -> usize {
    (3 * min_intervals(n, input_dims)).div_ceil(2)
}

fn excitation_rank(delta_xx: &Mat, i_xu: &[Mat]) -> usize {
    let cols = delta_xx.ncols() + i_xu.iter().map(|m| m.ncols()).sum::<usize>();
    let mut h = Mat::zeros(delta_xx.nrows(), cols);
    h.columns_mut(0, delta_xx.ncols()).copy_from(delta_xx);
    let mut off = delta_xx.ncols();
    for m in i_xu {
        h.columns_mut(off, m.ncols()).copy_from(m);
        off += m.ncols();
    }
    for mut c in h.column_iter_mut() {
        let nrm = c.norm();
        if nrm > 0.0 {
            c.scale_mut(1.0 / nrm);
        }
    }
    if h.nrows() == 0 || cols == 0 {
        return 0;
    }
    let sv = h.singular_values();
    let tol = sv.max() * LSTSQ_RCOND;
    sv.iter().filter(|s| **s > tol && sv.max() > 0.0).count()
}

fn outer_vec(x: &[f64], y: &[f64], out: &mut [f64]) {
    // vec(y xᵀ) in column-major order equals x ⊗ y.
    let m = y.len();
    for (k, xk) in x.iter().enumerate() {
        for (a, ya) in y.iter().enumerate() {
            out[k * m + a] = xk * ya;
        }
    }
}

fn hat_state_into(x: &[f64], out: &mut [f64]) {
    let n = x.len();
    let mut k = 0;
    for a in 0..n {
        for b in a..n {
            out[k] = x[a] * x[b];
            k += 1;
        }
    }
}

/// Builds δxx, I_xx, I_xu and I_qx from a fine-grid log.
pub fn assemble_data(log: &TrajectoryLog, delta_t: f64, quadrature: Quadrature) -> Result<DataMatrices> {
    let n = log.n();
    if n == 0 || log.len() < 2 {
        return Err(Error::InvalidArgument("trajectory log is empty".into()));
    }
    let ratio = delta_t / log.dt_fine;
    let per = ratio.round() as usize;
    if per == 0 || (ratio - per as f64).abs() > 1e-6 * ratio.max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "delta_t = {delta_t} is not a multiple of dt_fine = {}",
            log.dt_fine
        )));
    }
    if quadrature == Quadrature::Simpson && per % 2 == 1 {
        return Err(Error::InvalidArgument(format!(
            "Simpson quadrature needs an even number of fine steps per interval, got {per}"
        )));
    }
    let s = (log.len() - 1) / per;
    let dims = &log.input_dims;
    let need = min_intervals(n, dims);
    if s < need {
        return Err(Error::InvalidArgument(format!(
            "too few intervals: {s} available, at least {need} needed"
        )));
    }
    let h = log.dt_fine;
    let weights: Vec<f64> = (0..=per)
        .map(|k| match quadrature {
            Quadrature::Trapezoid => {
                if k == 0 || k == per {
                    h / 2.0
                } else {
                    h
                }
            }
            Quadrature::Simpson => {
                let w = if k == 0 || k == per {
                    1.0
                } else if k % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                w * h / 3.0
            }
        })
        .collect();
    let nh = hat_len(n);
    let mut delta_xx = Mat::zeros(s, nh);
    let mut i_xx = Mat::zeros(s, n * n);
    let mut i_qx = Mat::zeros(s, nh);
    let mut i_xu: Vec<Mat> = dims.iter().map(|m| Mat::zeros(s, n * m)).collect();
    let mut xx = vec![0.0; n * n];
    let mut hs = vec![0.0; nh];
    let mut hs_prev = vec![0.0; nh];
    let mut xu: Vec<Vec<f64>> = dims.iter().map(|m| vec![0.0; n * m]).collect();
    for l in 0..s {
        let start = l * per;
        hat_state_into(&log.states[start], &mut hs_prev);
        for (k, w) in weights.iter().enumerate() {
            let x = &log.states[start + k];
            outer_vec(x, x, &mut xx);
            hat_state_into(x, &mut hs);
            for (c, v) in xx.iter().enumerate() {
                i_xx[(l, c)] += w * v;
            }
            for (c, v) in hs.iter().enumerate() {
                i_qx[(l, c)] += w * v;
            }
            for (j, buf) in xu.iter_mut().enumerate() {
                outer_vec(x, &log.inputs[start + k][j], buf);
                for (c, v) in buf.iter().enumerate() {
                    i_xu[j][(l, c)] += w * v;
                }
            }
        }
        hat_state_into(&log.states[start + per], &mut hs);
        for c in 0..nh {
            delta_xx[(l, c)] = hs[c] - hs_prev[c];
        }
    }
    let excitation_rank = excitation_rank(&delta_xx, &i_xu);
    Ok(DataMatrices {
        n,
        delta_xx,
        i_xx,
        i_xu,
        i_qx,
        excitation_rank,
    })
}

/// Data matrices with closed-form integrals.
///
/// The sine excitation is generated by an oscillator exosystem, so the
/// augmented state z = [x; ξ] obeys ż = Mz and every interval Gram matrix
/// ∫ zzᵀ dτ follows from one block matrix exponential.
pub fn exact_data(
    sys: &LinearGameSystem,
    fb: &FeedbackProfile,
    noise: &[Noise],
    x0: &[f64],
    delta_t: f64,
    intervals: usize,
) -> Result<DataMatrices> {
    let np = sys.num_players();
    let n = sys.n();
    if noise.len() != np || x0.len() != n {
        return Err(Error::Dimension("exact data needs one noise per player and x0 of length n".into()));
    }
    let f = state_feedback(sys, fb)?;
    // Exosystem layout: per player, per channel, per frequency a (sin, cos) pair.
    let mut exo = Vec::new();
    for (j, w) in noise.iter().enumerate() {
        if w.channels() != sys.m(j) {
            return Err(Error::Dimension(format!("noise channels for player {}", j + 1)));
        }
        for (c, fs) in w.freqs.iter().enumerate() {
            for r in fs {
                exo.push((j, c, *r, w.amplitude));
            }
        }
    }
    let e = 2 * exo.len();
    let d = n + e;
    let mut m = Mat::zeros(d, d);
    m.view_mut((0, 0), (n, n)).copy_from(&sys.a);
    // Input maps u_j = U_j z.
    let mut u_maps: Vec<Mat> = (0..np).map(|j| Mat::zeros(sys.m(j), d)).collect();
    for j in 0..np {
        u_maps[j].view_mut((0, 0), (sys.m(j), n)).copy_from(&(-&f[j]));
    }
    for (q, (j, c, r, amp)) in exo.iter().enumerate() {
        let si = n + 2 * q;
        m[(si, si + 1)] = *r;
        m[(si + 1, si)] = -r;
        u_maps[*j][(*c, si)] += amp;
    }
    for j in 0..np {
        let bu = sys.b(j) * &u_maps[j];
        let mut top = m.rows_mut(0, n);
        top += bu;
    }
    let mut z = DVector::zeros(d);
    z.rows_mut(0, n).copy_from_slice(x0);
    for q in 0..exo.len() {
        z[n + 2 * q + 1] = 1.0;
    }
    let step = (&m * delta_t).exp();
    let nh = hat_len(n);
    let mut delta_xx = Mat::zeros(intervals, nh);
    let mut i_xx = Mat::zeros(intervals, n * n);
    let mut i_qx = Mat::zeros(intervals, nh);
    let mut i_xu: Vec<Mat> = (0..np).map(|j| Mat::zeros(intervals, n * sys.m(j))).collect();
    let mut van = Mat::zeros(2 * d, 2 * d);
    van.view_mut((0, 0), (d, d)).copy_from(&(-&m));
    van.view_mut((d, d), (d, d)).copy_from(&m.transpose());
    for l in 0..intervals {
        let zz = &z * z.transpose();
        van.view_mut((0, d), (d, d)).copy_from(&zz);
        let ex = (&van * delta_t).exp();
        let f22 = ex.view((d, d), (d, d));
        let g12 = ex.view((0, d), (d, d));
        let w = f22.transpose() * g12;
        let wxx = w.view((0, 0), (n, n)).clone_owned();
        let wxx = (&wxx + wxx.transpose()) * 0.5;
        for (c, v) in wxx.iter().enumerate() {
            i_xx[(l, c)] = *v;
        }
        let mut k = 0;
        for a in 0..n {
            for b in a..n {
                i_qx[(l, k)] = wxx[(a, b)];
                k += 1;
            }
        }
        for j in 0..np {
            // ∫ u_j xᵀ = U_j W Pxᵀ.
            let uw = &u_maps[j] * w.columns(0, n);
            for (c, v) in uw.iter().enumerate() {
                i_xu[j][(l, c)] = *v;
            }
        }
        let next = &step * &z;
        let x_prev: Vec<f64> = z.rows(0, n).iter().copied().collect();
        let x_next: Vec<f64> = next.rows(0, n).iter().copied().collect();
        let mut a = vec![0.0; nh];
        let mut b = vec![0.0; nh];
        hat_state_into(&x_prev, &mut a);
        hat_state_into(&x_next, &mut b);
        for c in 0..nh {
            delta_xx[(l, c)] = b[c] - a[c];
        }
        z = next;
        if !(z.norm() <= OVERFLOW_GUARD) {
            return Err(Error::Diverged {
                t: (l + 1) as f64 * delta_t,
                norm: z.norm(),
            });
        }
    }
    let excitation_rank = excitation_rank(&delta_xx, &i_xu);
    Ok(DataMatrices {
        n,
        delta_xx,
        i_xx,
        i_xu,
        i_qx,
        excitation_rank,
    })
}
