//! Parameter inference for the Goodwin oscillator
//!
//! du1/dt = a1/(1 + a2·u2^ρ) − α·u1,   du2/dt = k1·u1 − α·u2,   u(0) = (0, 0),
//!
//! with Gaussian observation noise and a standard normal prior on the log-parameters
//! w = log(a1, a2, k1, α). The posterior score comes from forward sensitivities: the ODE is
//! augmented with ∂u/∂(a1, a2, k1, α), eight extra states.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{forked_rng, seeded_rng, DenseMatrix, RandomStream};
use crate::samplers::{effective_sample_size, mala_sample, MalaConfig, MalaRun, PointSet, SamplerError};
use crate::targets::{ScoreTarget, TargetError};

pub const RHO: f64 = 10.0;
pub const NOISE: (f64, f64) = (0.1, 0.05);
pub const FULL_LEN: usize = 2400;
pub const DESK_DECIMATION: usize = 10;

#[derive(Debug, Error)]
pub enum GoodwinError {
    #[error("ODE solver exceeded {0} steps")]
    MaxStepsExceeded(usize),
    #[error("ODE step size underflow at t = {0}")]
    StepUnderflow(f64),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("malformed data file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GoodwinParams {
    pub a1: f64,
    pub a2: f64,
    pub k1: f64,
    pub alpha: f64,
    pub rho: f64,
}

impl GoodwinParams {
    pub fn ground_truth() -> Self {
        Self { a1: 1.0, a2: 3.0, k1: 1.0, alpha: 0.5, rho: RHO }
    }

    pub fn from_log(w: &[f64]) -> Self {
        Self { a1: w[0].exp(), a2: w[1].exp(), k1: w[2].exp(), alpha: w[3].exp(), rho: RHO }
    }

    pub fn to_log(&self) -> [f64; 4] {
        [self.a1.ln(), self.a2.ln(), self.k1.ln(), self.alpha.ln()]
    }

    fn as_array(&self) -> [f64; 4] {
        [self.a1, self.a2, self.k1, self.alpha]
    }

    /// u2^ρ and u2^(ρ−1); the integer exponent keeps the power well defined for tiny negative u2.
    fn powers(&self, u2: f64) -> (f64, f64) {
        if self.rho.fract() == 0.0 && self.rho.abs() < 64.0 {
            let r = self.rho as i32;
            (u2.powi(r), u2.powi(r - 1))
        } else {
            (u2.powf(self.rho), u2.powf(self.rho - 1.0))
        }
    }
}

pub fn goodwin_rhs(u: [f64; 2], p: &GoodwinParams) -> [f64; 2] {
    let (pr, _) = p.powers(u[1]);
    [p.a1 / (1.0 + p.a2 * pr) - p.alpha * u[0], p.k1 * u[0] - p.alpha * u[1]]
}

/// Right-hand side of the state plus sensitivity system; `y = [u1, u2, ∂u/∂a1, ∂u/∂a2, ∂u/∂k1, ∂u/∂α]`.
fn augmented_rhs(y: &[f64], p: &GoodwinParams, dy: &mut [f64]) {
    let (u1, u2) = (y[0], y[1]);
    let (pr, pr1) = p.powers(u2);
    let den = 1.0 + p.a2 * pr;
    dy[0] = p.a1 / den - p.alpha * u1;
    dy[1] = p.k1 * u1 - p.alpha * u2;
    let j12 = -p.a1 * p.a2 * p.rho * pr1 / (den * den);
    let forcing = [[1.0 / den, 0.0], [-p.a1 * pr / (den * den), 0.0], [0.0, u1], [-u1, -u2]];
    for (k, f) in forcing.iter().enumerate() {
        let (s1, s2) = (y[2 + 2 * k], y[3 + 2 * k]);
        dy[2 + 2 * k] = -p.alpha * s1 + j12 * s2 + f[0];
        dy[3 + 2 * k] = p.k1 * s1 - p.alpha * s2 + f[1];
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OdeSolverConfig {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for OdeSolverConfig {
    fn default() -> Self {
        Self { rtol: 1e-8, atol: 1e-10, max_steps: 100_000 }
    }
}

// Dormand–Prince 5(4) tableau, error weights and dense-output coefficients.
const C: [f64; 6] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A2: [f64; 1] = [1.0 / 5.0];
const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
const A5: [f64; 4] = [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0];
const A6: [f64; 5] = [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0];
const A7: [f64; 6] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0];
const E: [f64; 7] = [71.0 / 57600.0, 0.0, -71.0 / 16695.0, 71.0 / 1920.0, -17253.0 / 339200.0, 22.0 / 525.0, -1.0 / 40.0];
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

fn error_norm(err: &[f64], y0: &[f64], y1: &[f64], cfg: &OdeSolverConfig) -> f64 {
    let s: f64 = err
        .iter()
        .zip(y0.iter().zip(y1))
        .map(|(e, (a, b))| {
            let sc = cfg.atol + cfg.rtol * a.abs().max(b.abs());
            (e / sc).powi(2)
        })
        .sum();
    (s / err.len() as f64).sqrt()
}

/// Adaptive Dormand–Prince 5(4) from `(t0, y0)`, reporting the solution at each entry of
/// `times` (non-decreasing, ≥ t0) through the 4th-order continuous extension.
pub fn dopri5<F>(rhs: F, t0: f64, y0: &[f64], times: &[f64], cfg: &OdeSolverConfig) -> Result<DenseMatrix, GoodwinError>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    let n = y0.len();
    if !(cfg.rtol > 0.0 && cfg.atol > 0.0) {
        return Err(GoodwinError::InvalidInput("rtol and atol must be positive".into()));
    }
    if times.windows(2).any(|w| w[1] < w[0]) || times.first().is_some_and(|&t| t < t0) {
        return Err(GoodwinError::InvalidInput("output times must be non-decreasing and start at or after t0".into()));
    }
    let mut out = DenseMatrix::zeros(times.len(), n);
    let mut next = 0;
    while next < times.len() && times[next] == t0 {
        out.row_mut(next).copy_from_slice(y0);
        next += 1;
    }
    let Some(&t_end) = times.last() else {
        return Ok(out);
    };

    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    let mut t = t0;
    let mut y = y0.to_vec();
    let mut y_new = vec![0.0; n];
    let mut stage = vec![0.0; n];
    let mut err = vec![0.0; n];
    rhs(t, &y, &mut k[0]);

    // initial step from first- and second-derivative scales
    let mut h = {
        let sc: Vec<f64> = y.iter().map(|v| cfg.atol + cfg.rtol * v.abs()).collect();
        let rms = |v: &[f64]| (v.iter().zip(&sc).map(|(a, s)| (a / s).powi(2)).sum::<f64>() / n as f64).sqrt();
        let (d0, d1) = (rms(&y), rms(&k[0]));
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        let h0 = h0.min(t_end - t0);
        for i in 0..n {
            stage[i] = y[i] + h0 * k[0][i];
        }
        rhs(t + h0, &stage, &mut err);
        let d2 = err.iter().zip(&k[0]).zip(&sc).map(|((a, b), s)| ((a - b) / s).powi(2)).sum::<f64>();
        let d2 = (d2 / n as f64).sqrt() / h0;
        let h1 = if d1.max(d2) <= 1e-15 { (h0 * 1e-3).max(1e-6) } else { (0.01 / d1.max(d2)).powf(0.2) };
        (100.0 * h0).min(h1).min(t_end - t0)
    };

    let mut steps = 0;
    let mut last_rejected = false;
    while next < times.len() {
        if steps >= cfg.max_steps {
            return Err(GoodwinError::MaxStepsExceeded(cfg.max_steps));
        }
        steps += 1;
        let hits_end = t + h >= t_end;
        if hits_end {
            h = t_end - t;
        }
        if h <= 16.0 * f64::EPSILON * t.abs().max(1.0) {
            return Err(GoodwinError::StepUnderflow(t));
        }
        let rows: [&[f64]; 6] = [&A2, &A3, &A4, &A5, &A6, &A7];
        for (s, a) in rows.iter().enumerate() {
            for i in 0..n {
                let mut acc = 0.0;
                for (j, aj) in a.iter().enumerate() {
                    acc += aj * k[j][i];
                }
                stage[i] = y[i] + h * acc;
            }
            rhs(t + C[s] * h, &stage, &mut k[s + 1]);
        }
        // the last stage is evaluated at y_new (FSAL)
        y_new.copy_from_slice(&stage);
        for i in 0..n {
            err[i] = h * (0..7).map(|j| E[j] * k[j][i]).sum::<f64>();
        }
        let en = error_norm(&err, &y, &y_new, cfg);
        if !en.is_finite() {
            h *= 0.2;
            last_rejected = true;
            continue;
        }
        if en <= 1.0 {
            let t_new = if hits_end { t_end } else { t + h };
            while next < times.len() && times[next] <= t_new {
                let theta = (times[next] - t) / h;
                let th1 = 1.0 - theta;
                let row = out.row_mut(next);
                for i in 0..n {
                    let ydiff = y_new[i] - y[i];
                    let bspl = h * k[0][i] - ydiff;
                    let r4 = ydiff - h * k[6][i] - bspl;
                    let r5 = h * (0..7).map(|j| D[j] * k[j][i]).sum::<f64>();
                    row[i] = y[i] + theta * (ydiff + th1 * (bspl + theta * (r4 + th1 * r5)));
                }
                next += 1;
            }
            t = t_new;
            std::mem::swap(&mut y, &mut y_new);
            k.swap(0, 6);
            let fac = if en == 0.0 { 10.0 } else { (0.9 * en.powf(-0.2)).clamp(0.2, 10.0) };
            h *= if last_rejected { fac.min(1.0) } else { fac };
            last_rejected = false;
        } else {
            h *= (0.9 * en.powf(-0.2)).clamp(0.2, 1.0);
            last_rejected = true;
        }
    }
    Ok(out)
}

/// States (u1, u2) at `times` for the given parameters, starting from u(0) = (0, 0).
pub fn solve_goodwin(params: &GoodwinParams, times: &[f64], cfg: &OdeSolverConfig) -> Result<DenseMatrix, GoodwinError> {
    dopri5(
        |_, y, dy| {
            let f = goodwin_rhs([y[0], y[1]], params);
            dy.copy_from_slice(&f);
        },
        0.0,
        &[0.0, 0.0],
        times,
        cfg,
    )
}

/// States and sensitivities (10 columns) at `times`.
pub fn solve_goodwin_sensitivities(params: &GoodwinParams, times: &[f64], cfg: &OdeSolverConfig) -> Result<DenseMatrix, GoodwinError> {
    dopri5(|_, y, dy| augmented_rhs(y, params, dy), 0.0, &[0.0; 10], times, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoodwinData {
    pub times: Vec<f64>,
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
    pub noise: (f64, f64),
    pub seed: u64,
}

impl GoodwinData {
    pub fn full_times() -> Vec<f64> {
        (0..FULL_LEN).map(|i| 1.0 + 24.0 * i as f64 / (FULL_LEN - 1) as f64).collect()
    }

    /// Noisy observations of the ground-truth trajectory at 2400 times in [1, 25]; with
    /// `full == false` every tenth observation is kept (240 points).
    pub fn synthetic(seed: u64, full: bool) -> Result<Self, GoodwinError> {
        let times = Self::full_times();
        let cfg = OdeSolverConfig { rtol: 1e-12, atol: 1e-14, max_steps: 1_000_000 };
        let u = solve_goodwin(&GoodwinParams::ground_truth(), &times, &cfg)?;
        let mut rng = seeded_rng(seed);
        let mut data = Self { times: Vec::new(), y1: Vec::new(), y2: Vec::new(), noise: NOISE, seed };
        for (i, t) in times.iter().enumerate() {
            let e1: f64 = rng.sample(StandardNormal);
            let e2: f64 = rng.sample(StandardNormal);
            if full || i % DESK_DECIMATION == 0 {
                data.times.push(*t);
                data.y1.push(u[(i, 0)] + NOISE.0 * e1);
                data.y2.push(u[(i, 1)] + NOISE.1 * e2);
            }
        }
        Ok(data)
    }

    pub fn empty() -> Self {
        Self { times: Vec::new(), y1: Vec::new(), y2: Vec::new(), noise: NOISE, seed: 0 }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// CSV with columns t, y1, y2 after a `# seed=<seed>` comment line.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), GoodwinError> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "# seed={}", self.seed)?;
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(f);
        w.write_record(["t", "y1", "y2"])?;
        for i in 0..self.len() {
            w.write_record([self.times[i].to_string(), self.y1[i].to_string(), self.y2[i].to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self, GoodwinError> {
        let mut reader = BufReader::new(std::fs::File::open(path)?);
        let mut first = String::new();
        reader.read_line(&mut first)?;
        let seed = first
            .trim()
            .strip_prefix("# seed=")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| GoodwinError::Format("first line must be '# seed=<u64>'".into()))?;
        let mut data = Self { seed, ..Self::empty() };
        let mut r = csv::Reader::from_reader(reader);
        for rec in r.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64, GoodwinError> {
                rec.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| GoodwinError::Format(format!("bad field {i} in record {rec:?}")))
            };
            data.times.push(num(0)?);
            data.y1.push(num(1)?);
            data.y2.push(num(2)?);
        }
        Ok(data)
    }
}

/// Log posterior (up to a constant) over w = log(a1, a2, k1, α) and its gradient.
pub fn log_posterior_and_score(w: &[f64], data: &GoodwinData, cfg: &OdeSolverConfig) -> Result<(f64, [f64; 4]), GoodwinError> {
    if w.len() != 4 || !w.iter().all(|v| v.is_finite()) {
        return Err(GoodwinError::InvalidInput(format!("expected 4 finite log-parameters, got {w:?}")));
    }
    let mut logp = -0.5 * w.iter().map(|v| v * v).sum::<f64>();
    let mut score = [-w[0], -w[1], -w[2], -w[3]];
    if data.is_empty() {
        return Ok((logp, score));
    }
    let p = GoodwinParams::from_log(w);
    let sol = solve_goodwin_sensitivities(&p, &data.times, cfg)?;
    let (v1, v2) = (data.noise.0 * data.noise.0, data.noise.1 * data.noise.1);
    let mut grad = [0.0; 4];
    let (mut q1, mut q2) = (0.0, 0.0);
    for i in 0..data.len() {
        let row = sol.row(i);
        let r1 = data.y1[i] - row[0];
        let r2 = data.y2[i] - row[1];
        q1 += r1 * r1;
        q2 += r2 * r2;
        for (k, g) in grad.iter_mut().enumerate() {
            *g += r1 / v1 * row[2 + 2 * k] + r2 / v2 * row[3 + 2 * k];
        }
    }
    logp -= q1 / (2.0 * v1) + q2 / (2.0 * v2);
    // ∂/∂w_k = p_k · ∂/∂p_k
    for ((s, g), pk) in score.iter_mut().zip(grad).zip(p.as_array()) {
        *s += pk * g;
    }
    Ok((logp, score))
}

/// The Goodwin posterior as a score-only target on ℝ⁴ (log-parameters).
///
/// Parameters for which the ODE solver fails are treated as having zero density, so a
/// MALA proposal there is rejected.
#[derive(Debug, Clone)]
pub struct GoodwinTarget {
    pub data: Arc<GoodwinData>,
    pub cfg: OdeSolverConfig,
}

pub fn make_goodwin_target(data: GoodwinData, cfg: OdeSolverConfig) -> GoodwinTarget {
    GoodwinTarget { data: Arc::new(data), cfg }
}

impl ScoreTarget for GoodwinTarget {
    fn dim(&self) -> usize {
        4
    }

    fn score(&self, x: &[f64]) -> Result<Vec<f64>, TargetError> {
        log_posterior_and_score(x, &self.data, &self.cfg).map(|(_, s)| s.to_vec()).map_err(|e| TargetError::Evaluation(e.to_string()))
    }

    fn log_density_unnorm(&self, x: &[f64]) -> Result<f64, TargetError> {
        self.log_density_and_score(x).map(|(l, _)| l)
    }

    fn log_density_and_score(&self, x: &[f64]) -> Result<(f64, Vec<f64>), TargetError> {
        match log_posterior_and_score(x, &self.data, &self.cfg) {
            Ok((l, s)) => Ok((l, s.to_vec())),
            Err(GoodwinError::MaxStepsExceeded(_) | GoodwinError::StepUnderflow(_)) => Ok((f64::NEG_INFINITY, vec![0.0; 4])),
            Err(e) => Err(TargetError::Evaluation(e.to_string())),
        }
    }

    fn name(&self) -> String {
        format!("goodwin(n_obs={})", self.data.len())
    }
}

/// How the Goodwin MALA chains are started and screened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainProtocol {
    pub n_chains: usize,
    /// A chain whose final log posterior trails the best chain by more than this many nats is
    /// treated as trapped in a minor mode and rerun from a fresh prior draw. Infinity keeps every chain.
    pub restart_gap: f64,
    pub max_restart_rounds: usize,
}

impl Default for ChainProtocol {
    fn default() -> Self {
        Self { n_chains: 5, restart_gap: 100.0, max_restart_rounds: 20 }
    }
}

#[derive(Debug, Clone)]
pub struct ChainsOutput {
    /// Kept samples of all chains, in chain order.
    pub pooled: PointSet,
    pub runs: Vec<MalaRun>,
    /// Number of chain reruns triggered by the restart rule.
    pub restarts: usize,
}

fn run_chain(target: &GoodwinTarget, cfg: &MalaConfig, seed: u64, stream: u64) -> Result<MalaRun, SamplerError> {
    let mut rng: RandomStream = forked_rng(seed, stream);
    let init: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
    mala_sample(target, &MalaConfig { init, ..cfg.clone() }, &mut rng)
}

fn run_chains(target: &GoodwinTarget, cfg: &MalaConfig, seed: u64, streams: &[u64]) -> Result<Vec<MalaRun>, SamplerError> {
    std::thread::scope(|s| {
        let handles: Vec<_> = streams.iter().map(|&st| s.spawn(move || run_chain(target, cfg, seed, st))).collect();
        handles.into_iter().map(|h| h.join().expect("chain panicked")).collect()
    })
}

/// Independent MALA chains started from prior draws, run concurrently and pooled in chain order.
pub fn goodwin_mala(target: &GoodwinTarget, cfg: &MalaConfig, protocol: &ChainProtocol, seed: u64) -> Result<ChainsOutput, GoodwinError> {
    let n = protocol.n_chains;
    if n == 0 {
        return Err(GoodwinError::InvalidInput("need at least one chain".into()));
    }
    let streams: Vec<u64> = (0..n as u64).collect();
    let mut runs = run_chains(target, cfg, seed, &streams)?;
    let mut restarts = 0;
    let gap = protocol.restart_gap;
    if gap.is_finite() {
        for round in 1..=protocol.max_restart_rounds {
            let best = runs.iter().map(|r| r.final_log_density).fold(f64::NEG_INFINITY, f64::max);
            let trapped: Vec<usize> = (0..n).filter(|&c| runs[c].final_log_density < best - gap).collect();
            if trapped.is_empty() {
                break;
            }
            let streams: Vec<u64> = trapped.iter().map(|&c| (round * n + c) as u64).collect();
            for (c, run) in trapped.iter().zip(run_chains(target, cfg, seed, &streams)?) {
                runs[*c] = run;
            }
            restarts += trapped.len();
        }
    }
    let sets: Vec<PointSet> = runs.iter().map(|r| r.set.clone()).collect();
    let pooled = PointSet::concat(&sets).expect("at least one chain");
    Ok(ChainsOutput { pooled, runs, restarts })
}

/// One of the four inferred parameters, addressed by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoodwinParam {
    A1,
    A2,
    K1,
    Alpha,
}

impl GoodwinParam {
    pub const ALL: [GoodwinParam; 4] = [GoodwinParam::A1, GoodwinParam::A2, GoodwinParam::K1, GoodwinParam::Alpha];

    /// Position in the log-parameter vector w.
    pub fn index(self) -> usize {
        match self {
            GoodwinParam::A1 => 0,
            GoodwinParam::A2 => 1,
            GoodwinParam::K1 => 2,
            GoodwinParam::Alpha => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GoodwinParam::A1 => "a1",
            GoodwinParam::A2 => "a2",
            GoodwinParam::K1 => "k1",
            GoodwinParam::Alpha => "alpha",
        }
    }
}

impl std::fmt::Display for GoodwinParam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for GoodwinParam {
    type Err = GoodwinError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        GoodwinParam::ALL
            .into_iter()
            .find(|p| p.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| GoodwinError::InvalidInput(format!("unknown parameter '{s}' (expected a1, a2, k1 or alpha)")))
    }
}

/// Posterior means of the four parameters (not their logs) from one long MALA chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LongChainReference {
    pub means: [f64; 4],
    /// Monte Carlo standard errors based on the effective sample size of each coordinate.
    pub std_errors: [f64; 4],
    pub accept_rate: f64,
}

/// Reference values from a single chain started at the ground truth: 5000 adapted burn-in
/// steps from ε = 0.01, then `n_keep` kept samples.
pub fn long_chain_reference(target: &GoodwinTarget, n_keep: usize, seed: u64) -> Result<LongChainReference, GoodwinError> {
    if n_keep < 2 {
        return Err(GoodwinError::InvalidInput("the reference chain needs at least two samples".into()));
    }
    let cfg = MalaConfig { n_burn: 5000, n_keep, step_size: 0.01, init: GoodwinParams::ground_truth().to_log().to_vec(), ..Default::default() };
    let run = mala_sample(target, &cfg, &mut seeded_rng(seed))?;
    let mut means = [0.0; 4];
    let mut std_errors = [0.0; 4];
    for k in 0..4 {
        let v: Vec<f64> = run.set.points.row_iter().map(|w| w[k].exp()).collect();
        means[k] = crate::numerics::mean(&v);
        let ess = effective_sample_size(&v).max(1.0);
        std_errors[k] = crate::numerics::std_dev(&v) / ess.sqrt();
    }
    Ok(LongChainReference { means, std_errors, accept_rate: run.accept_rate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;

    fn rk4(params: &GoodwinParams, t_end: f64, h: f64) -> [f64; 2] {
        let mut u = [0.0, 0.0];
        let steps = (t_end / h).round() as usize;
        let add = |u: [f64; 2], k: [f64; 2], s: f64| [u[0] + s * k[0], u[1] + s * k[1]];
        for _ in 0..steps {
            let k1 = goodwin_rhs(u, params);
            let k2 = goodwin_rhs(add(u, k1, h / 2.0), params);
            let k3 = goodwin_rhs(add(u, k2, h / 2.0), params);
            let k4 = goodwin_rhs(add(u, k3, h), params);
            u = [u[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]), u[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])];
        }
        u
    }

    #[test]
    fn rhs_values() {
        let p = GoodwinParams::ground_truth();
        assert_eq!(goodwin_rhs([0.0, 0.0], &p), [1.0, 0.0]);
        assert_eq!(goodwin_rhs([1.0, 1.0], &p), [-0.25, 0.5]);
        let sat = goodwin_rhs([2.0, 1e3], &p);
        assert!((sat[0] + 0.5 * 2.0).abs() < 1e-20);
    }

    #[test]
    fn zero_forcing_stays_at_rest() {
        let p = GoodwinParams { a1: 0.0, ..GoodwinParams::ground_truth() };
        let u = solve_goodwin(&p, &[0.5, 3.0, 25.0], &OdeSolverConfig::default()).unwrap();
        assert!(u.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_fine_rk4() {
        let p = GoodwinParams::ground_truth();
        let u = solve_goodwin(&p, &[1.0], &OdeSolverConfig::default()).unwrap();
        let r = rk4(&p, 1.0, 1e-5);
        assert!((u[(0, 0)] - r[0]).abs() < 1e-7 && (u[(0, 1)] - r[1]).abs() < 1e-7, "{:?} vs {r:?}", u.row(0));
        let u = solve_goodwin(&p, &[7.3], &OdeSolverConfig::default()).unwrap();
        let r = rk4(&p, 7.3, 1e-4);
        assert!((u[(0, 0)] - r[0]).abs() < 1e-7 && (u[(0, 1)] - r[1]).abs() < 1e-7);
    }

    #[test]
    fn dense_output_matches_stepping_to_each_time() {
        let p = GoodwinParams::ground_truth();
        let cfg = OdeSolverConfig::default();
        let times = [0.0, 0.7, 2.25, 2.25, 9.1, 25.0];
        let all = solve_goodwin(&p, &times, &cfg).unwrap();
        for (i, &t) in times.iter().enumerate() {
            let one = solve_goodwin(&p, &[t], &cfg).unwrap();
            for c in 0..2 {
                assert!((all[(i, c)] - one[(0, c)]).abs() < 1e-7, "t={t}");
            }
        }
    }

    #[test]
    fn tolerance_controls_error() {
        let p = GoodwinParams::ground_truth();
        let reference = solve_goodwin(&p, &[25.0], &OdeSolverConfig { rtol: 1e-13, atol: 1e-15, max_steps: 1_000_000 }).unwrap();
        let mut pts = Vec::new();
        for tol in [1e-5, 1e-6, 1e-7, 1e-8] {
            let u = solve_goodwin(&p, &[25.0], &OdeSolverConfig { rtol: tol, atol: tol * 1e-2, max_steps: 1_000_000 }).unwrap();
            let e = (u[(0, 0)] - reference[(0, 0)]).abs().max((u[(0, 1)] - reference[(0, 1)]).abs());
            pts.push((tol.ln(), e.max(1e-16).ln()));
        }
        let n = pts.len() as f64;
        let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
        let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
        assert!((slope - 1.0).abs() <= 0.5, "log-log slope {slope}, points {pts:?}");
        let a = solve_goodwin(&p, &[25.0], &OdeSolverConfig { rtol: 1e-8, atol: 1e-10, max_steps: 100_000 }).unwrap();
        let b = solve_goodwin(&p, &[25.0], &OdeSolverConfig { rtol: 5e-9, atol: 5e-11, max_steps: 100_000 }).unwrap();
        assert!((a[(0, 0)] - b[(0, 0)]).abs() <= 10.0 * 1e-8 * a[(0, 0)].abs().max(1.0));
    }

    #[test]
    fn solver_errors() {
        let p = GoodwinParams::ground_truth();
        let tight = OdeSolverConfig { max_steps: 5, ..OdeSolverConfig::default() };
        assert!(matches!(solve_goodwin(&p, &[25.0], &tight), Err(GoodwinError::MaxStepsExceeded(5))));
        assert!(matches!(solve_goodwin(&p, &[2.0, 1.0], &OdeSolverConfig::default()), Err(GoodwinError::InvalidInput(_))));
        assert_eq!(solve_goodwin(&p, &[], &OdeSolverConfig::default()).unwrap().rows(), 0);
    }

    #[test]
    fn sensitivities_match_finite_differences() {
        let p = GoodwinParams { a1: 1.3, a2: 2.0, k1: 0.8, alpha: 0.6, rho: RHO };
        let cfg = OdeSolverConfig { rtol: 1e-11, atol: 1e-13, max_steps: 1_000_000 };
        let times = [2.0, 10.0, 20.0];
        let s = solve_goodwin_sensitivities(&p, &times, &cfg).unwrap();
        for k in 0..4 {
            let h = 1e-6;
            let mut plus = p.as_array();
            let mut minus = p.as_array();
            plus[k] += h;
            minus[k] -= h;
            let mk = |a: [f64; 4]| GoodwinParams { a1: a[0], a2: a[1], k1: a[2], alpha: a[3], rho: RHO };
            let up = solve_goodwin(&mk(plus), &times, &cfg).unwrap();
            let dn = solve_goodwin(&mk(minus), &times, &cfg).unwrap();
            for i in 0..times.len() {
                for c in 0..2 {
                    let fd = (up[(i, c)] - dn[(i, c)]) / (2.0 * h);
                    let an = s[(i, 2 + 2 * k + c)];
                    assert!((fd - an).abs() <= 1e-5 * an.abs().max(1e-2), "param {k} t={} state {c}: {an} vs {fd}", times[i]);
                }
            }
        }
    }

    #[test]
    fn empty_data_is_prior_only() {
        let w = [0.3, -1.2, 0.0, 2.0];
        let (lp, s) = log_posterior_and_score(&w, &GoodwinData::empty(), &OdeSolverConfig::default()).unwrap();
        assert!((lp + 0.5 * (0.09 + 1.44 + 4.0)).abs() < 1e-15);
        assert_eq!(s, [-0.3, 1.2, -0.0, -2.0]);
    }

    #[test]
    fn score_matches_finite_differences_at_prior_draws() {
        let data = GoodwinData::synthetic(1, false).unwrap();
        let cfg = OdeSolverConfig::default();
        let mut rng = seeded_rng(77);
        for _ in 0..20 {
            let w: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
            let (_, s) = log_posterior_and_score(&w, &data, &cfg).unwrap();
            for k in 0..4 {
                let h = 1e-5;
                let (mut a, mut b) = (w.clone(), w.clone());
                a[k] += h;
                b[k] -= h;
                let fd = (log_posterior_and_score(&a, &data, &cfg).unwrap().0 - log_posterior_and_score(&b, &data, &cfg).unwrap().0) / (2.0 * h);
                let scale = s.iter().fold(1.0f64, |m, v| m.max(v.abs()));
                assert!((fd - s[k]).abs() <= 1e-4 * scale, "w={w:?} k={k}: {} vs {fd}", s[k]);
            }
        }
    }

    #[test]
    fn likelihood_is_stationary_at_truth_on_noiseless_data() {
        let truth = GoodwinParams::ground_truth();
        let times = GoodwinData::full_times();
        let cfg = OdeSolverConfig::default();
        let u = solve_goodwin(&truth, &times, &cfg).unwrap();
        let data = GoodwinData { times, y1: (0..FULL_LEN).map(|i| u[(i, 0)]).collect(), y2: (0..FULL_LEN).map(|i| u[(i, 1)]).collect(), noise: NOISE, seed: 0 };
        let w = truth.to_log();
        let (_, s) = log_posterior_and_score(&w, &data, &cfg).unwrap();
        // the prior contributes exactly −w; what remains is the likelihood gradient
        let lik: Vec<f64> = s.iter().zip(&w).map(|(a, b)| a + b).collect();
        let norm = lik.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-3, "likelihood gradient {lik:?}");
    }

    #[test]
    fn synthetic_data_and_csv_round_trip() {
        let full = GoodwinData::synthetic(4, true).unwrap();
        let desk = GoodwinData::synthetic(4, false).unwrap();
        assert_eq!(full.len(), 2400);
        assert_eq!(desk.len(), 240);
        assert_eq!(desk.y1[3].to_bits(), full.y1[30].to_bits());
        assert_eq!(full.times[0], 1.0);
        assert_eq!(full.times[2399], 25.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("goodwin.csv");
        desk.write_csv(&path).unwrap();
        let back = GoodwinData::read_csv(&path).unwrap();
        assert_eq!(back, desk);
        assert_eq!(GoodwinData::synthetic(back.seed, false).unwrap(), back);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# seed=4\nt,y1,y2\n"));
    }

    #[test]
    fn target_smoke() {
        let t = make_goodwin_target(GoodwinData::synthetic(2, false).unwrap(), OdeSolverConfig::default());
        assert_eq!(t.dim(), 4);
        let s = t.score(&[0.0; 4]).unwrap();
        assert!(s.iter().all(|v| v.is_finite()));
        assert_eq!(t.log_density_and_score(&[0.1, 0.2, 0.3, 0.4]).unwrap(), t.log_density_and_score(&[0.1, 0.2, 0.3, 0.4]).unwrap());
        assert!(!t.has_sampler());
    }
}
