//! Optimizers for the Stein network: L-BFGS with a strong Wolfe line search and Adam.

use std::fmt;
use std::time::Instant;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{dot, RandomStream};
use crate::steinnet::{LossConfig, SteinData, SteinError, SteinNetwork};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("objective is not finite at the starting point")]
    NonFiniteObjective,
    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Stein(#[from] SteinError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LbfgsConfig {
    pub history_size: usize,
    pub max_iters: usize,
    pub wolfe_c1: f64,
    pub wolfe_c2: f64,
    pub grad_tol: f64,
    pub max_line_search_steps: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self { history_size: 10, max_iters: 500, wolfe_c1: 1e-4, wolfe_c2: 0.9, grad_tol: 1e-8, max_line_search_steps: 25 }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0 < self.wolfe_c1 && self.wolfe_c1 < self.wolfe_c2 && self.wolfe_c2 < 1.0) {
            return Err(TrainError::InvalidConfig("need 0 < c1 < c2 < 1".into()));
        }
        if self.history_size == 0 || self.max_line_search_steps == 0 {
            return Err(TrainError::InvalidConfig("history and line-search budget must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchSize {
    Full,
    Mini(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub iters: usize,
    pub batch_size: BatchSize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, iters: 10_000, batch_size: BatchSize::Mini(32) }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && !matches!(self.batch_size, BatchSize::Mini(0));
        if ok { Ok(()) } else { Err(TrainError::InvalidConfig("Adam needs lr > 0, β in [0, 1), eps > 0 and a positive batch".into())) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradientTolerance,
    LineSearchFailed,
    MaxIterations,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::GradientTolerance => "converged",
            StopReason::LineSearchFailed => "line_search_failed",
            StopReason::MaxIterations => "max_iters",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub final_loss: f64,
    pub iters_used: usize,
    /// ‖∇‖∞ at the returned point.
    pub grad_norm: f64,
    /// Loss after each iteration, starting with the initial value.
    pub loss_trace: Vec<f64>,
    pub wall_time: f64,
    pub status: StopReason,
    pub evaluations: usize,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

struct Trial {
    alpha: f64,
    f: f64,
    g: Vec<f64>,
    dphi: f64,
}

/// Minimizer of the cubic through (a, fa, ga) and (b, fb, gb), kept inside the
/// safeguarded interior of [a, b]; falls back to bisection.
fn cubic_step(a: f64, fa: f64, ga: f64, b: f64, fb: f64, gb: f64) -> f64 {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let margin = 0.1 * (hi - lo);
    let mid = 0.5 * (a + b);
    if !(fa.is_finite() && fb.is_finite() && ga.is_finite() && gb.is_finite()) {
        return mid;
    }
    let d1 = ga + gb - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - ga * gb;
    if disc < 0.0 {
        return mid;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let x = b - (b - a) * (gb + d2 - d1) / (gb - ga + 2.0 * d2);
    if x.is_finite() && x >= lo + margin && x <= hi - margin { x } else { mid }
}

/// Strong Wolfe line search along `p` (bracketing then zoom). Returns the accepted trial or
/// the best trial seen together with a failure flag.
#[allow(clippy::too_many_arguments)]
fn line_search<F>(obj: &mut F, x: &[f64], f0: f64, g0: &[f64], p: &[f64], alpha0: f64, cfg: &LbfgsConfig, evals: &mut usize) -> Result<(Option<Trial>, Option<Trial>), TrainError>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), TrainError>,
{
    let dphi0 = dot(g0, p);
    let (c1, c2) = (cfg.wolfe_c1, cfg.wolfe_c2);
    let mut xt = vec![0.0; x.len()];
    let mut budget = cfg.max_line_search_steps;
    let mut best: Option<Trial> = None;
    let mut eval = |alpha: f64, budget: &mut usize, evals: &mut usize| -> Result<Trial, TrainError> {
        *budget -= 1;
        *evals += 1;
        for i in 0..x.len() {
            xt[i] = x[i] + alpha * p[i];
        }
        let (f, g) = obj(&xt)?;
        let finite = f.is_finite() && g.iter().all(|v| v.is_finite());
        let f = if finite { f } else { f64::INFINITY };
        let dphi = if finite { dot(&g, p) } else { f64::NAN };
        Ok(Trial { alpha, f, g, dphi })
    };
    let keep_best = |t: &Trial, best: &mut Option<Trial>| {
        if t.f < f0 && best.as_ref().is_none_or(|b| t.f < b.f) {
            *best = Some(Trial { alpha: t.alpha, f: t.f, g: t.g.clone(), dphi: t.dphi });
        }
    };
    let sufficient = |t: &Trial| t.f <= f0 + c1 * t.alpha * dphi0;
    let curvature = |t: &Trial| t.dphi.abs() <= -c2 * dphi0;

    let mut prev = Trial { alpha: 0.0, f: f0, g: g0.to_vec(), dphi: dphi0 };
    let mut alpha = alpha0;
    let mut first = true;
    let (mut lo, mut hi);
    loop {
        if budget == 0 {
            return Ok((None, best));
        }
        let t = eval(alpha, &mut budget, evals)?;
        keep_best(&t, &mut best);
        if !sufficient(&t) || (!first && t.f >= prev.f) {
            lo = prev;
            hi = t;
            break;
        }
        if curvature(&t) {
            return Ok((Some(t), best));
        }
        if t.dphi >= 0.0 {
            lo = t;
            hi = prev;
            break;
        }
        first = false;
        alpha = (alpha * 2.0).max(alpha + 1e-3);
        if !alpha.is_finite() {
            return Ok((None, best));
        }
        prev = t;
    }
    // zoom: lo satisfies sufficient decrease with the lowest value so far
    loop {
        if budget == 0 || (hi.alpha - lo.alpha).abs() <= 1e-16 * lo.alpha.abs().max(1.0) {
            return Ok((None, best));
        }
        let a = cubic_step(lo.alpha, lo.f, lo.dphi, hi.alpha, hi.f, hi.dphi);
        let t = eval(a, &mut budget, evals)?;
        keep_best(&t, &mut best);
        if !sufficient(&t) || t.f >= lo.f {
            hi = t;
        } else {
            if curvature(&t) {
                return Ok((Some(t), best));
            }
            if t.dphi * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = t;
        }
    }
}

/// Limited-memory BFGS. Stops when ‖∇‖∞ ≤ `grad_tol`, when the line search fails (the best
/// point found is kept) or after `max_iters` iterations.
pub fn lbfgs_minimize<F>(mut obj: F, x0: &[f64], cfg: &LbfgsConfig) -> Result<(Vec<f64>, TrainReport), TrainError>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), TrainError>,
{
    cfg.validate()?;
    let start = Instant::now();
    let mut x = x0.to_vec();
    let (mut f, mut g) = obj(&x)?;
    let mut evals = 1;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(TrainError::NonFiniteObjective);
    }
    let mut trace = vec![f];
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();
    let mut status = StopReason::MaxIterations;
    let mut iters = 0;
    while iters < cfg.max_iters {
        if inf_norm(&g) <= cfg.grad_tol {
            status = StopReason::GradientTolerance;
            break;
        }
        // two-loop recursion
        let mut q = g.clone();
        let k = s_hist.len();
        let mut alphas = vec![0.0; k];
        for i in (0..k).rev() {
            alphas[i] = rho_hist[i] * dot(&s_hist[i], &q);
            q.iter_mut().zip(&y_hist[i]).for_each(|(qv, yv)| *qv -= alphas[i] * yv);
        }
        let gamma = if k > 0 { dot(&s_hist[k - 1], &y_hist[k - 1]) / dot(&y_hist[k - 1], &y_hist[k - 1]) } else { 1.0 };
        q.iter_mut().for_each(|v| *v *= gamma);
        for i in 0..k {
            let beta = rho_hist[i] * dot(&y_hist[i], &q);
            q.iter_mut().zip(&s_hist[i]).for_each(|(qv, sv)| *qv += (alphas[i] - beta) * sv);
        }
        let mut p: Vec<f64> = q.iter().map(|v| -v).collect();
        if dot(&p, &g) >= 0.0 {
            // not a descent direction: restart from steepest descent
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            p = g.iter().map(|v| -v).collect();
        }
        let alpha0 = if s_hist.is_empty() { (1.0f64).min(1.0 / g.iter().map(|v| v.abs()).sum::<f64>()) } else { 1.0 };
        let (accepted, best) = line_search(&mut obj, &x, f, &g, &p, alpha0, cfg, &mut evals)?;
        let trial = match accepted {
            Some(t) => {
                debug_assert!(t.f <= f + cfg.wolfe_c1 * t.alpha * dot(&g, &p), "sufficient decrease violated");
                debug_assert!(t.dphi.abs() <= -cfg.wolfe_c2 * dot(&g, &p), "curvature condition violated");
                t
            }
            None => {
                if let Some(b) = best {
                    x.iter_mut().zip(&p).for_each(|(xv, pv)| *xv += b.alpha * pv);
                    f = b.f;
                    g = b.g;
                    iters += 1;
                    trace.push(f);
                }
                status = StopReason::LineSearchFailed;
                break;
            }
        };
        let s: Vec<f64> = p.iter().map(|v| trial.alpha * v).collect();
        let y: Vec<f64> = trial.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        x.iter_mut().zip(&s).for_each(|(xv, sv)| *xv += sv);
        f = trial.f;
        g = trial.g;
        iters += 1;
        trace.push(f);
        let sy = dot(&s, &y);
        if sy > 1e-10 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if s_hist.len() == cfg.history_size {
                s_hist.remove(0);
                y_hist.remove(0);
                rho_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
            rho_hist.push(1.0 / sy);
        }
    }
    if status == StopReason::MaxIterations && inf_norm(&g) <= cfg.grad_tol {
        status = StopReason::GradientTolerance;
    }
    let report = TrainReport {
        final_loss: f,
        iters_used: iters,
        grad_norm: inf_norm(&g),
        loss_trace: trace,
        wall_time: start.elapsed().as_secs_f64(),
        status,
        evaluations: evals,
    };
    Ok((x, report))
}

/// Adam. With a mini-batch size, the objective receives a fresh index subset each step,
/// drawn without replacement from `0..n_data`.
pub fn adam_minimize<F>(mut obj: F, x0: &[f64], n_data: usize, cfg: &AdamConfig, rng: &mut RandomStream) -> Result<(Vec<f64>, TrainReport), TrainError>
where
    F: FnMut(&[f64], Option<&[usize]>) -> Result<(f64, Vec<f64>), TrainError>,
{
    cfg.validate()?;
    let start = Instant::now();
    let mut x = x0.to_vec();
    let mut m = vec![0.0; x.len()];
    let mut v = vec![0.0; x.len()];
    let mut trace = Vec::with_capacity(cfg.iters + 1);
    let mut evals = 0;
    let mut last_grad = vec![0.0; x.len()];
    let (mut b1t, mut b2t) = (1.0, 1.0);
    for _ in 0..cfg.iters {
        let batch = match cfg.batch_size {
            BatchSize::Mini(b) if b < n_data => Some(index::sample(rng, n_data, b).into_vec()),
            _ => None,
        };
        let (f, g) = obj(&x, batch.as_deref())?;
        evals += 1;
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteObjective);
        }
        trace.push(f);
        b1t *= cfg.beta1;
        b2t *= cfg.beta2;
        for i in 0..x.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1t);
            let vh = v[i] / (1.0 - b2t);
            x[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
        last_grad = g;
    }
    // final full-data evaluation so reports compare across optimizers
    let (f, g) = obj(&x, None)?;
    evals += 1;
    if f.is_finite() {
        last_grad = g;
    }
    trace.push(f);
    let report = TrainReport {
        final_loss: f,
        iters_used: cfg.iters,
        grad_norm: inf_norm(&last_grad),
        loss_trace: trace,
        wall_time: start.elapsed().as_secs_f64(),
        status: StopReason::MaxIterations,
        evaluations: evals,
    };
    Ok((x, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Lbfgs(LbfgsConfig),
    Adam(AdamConfig),
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Lbfgs(LbfgsConfig::default())
    }
}

/// Fits the network to the data by minimizing the regularized squared loss.
pub fn train_bsn(mut net: SteinNetwork, data: &SteinData, loss: &LossConfig, optimizer: &OptimizerConfig, rng: &mut RandomStream) -> Result<(SteinNetwork, TrainReport), TrainError> {
    if data.is_empty() {
        return Err(SteinError::EmptyData.into());
    }
    let x0 = net.params();
    let mut work = net.clone();
    let (x, report) = match optimizer {
        OptimizerConfig::Lbfgs(cfg) => lbfgs_minimize(
            |p| {
                work.set_params(p);
                match work.loss_and_gradient_with(data, loss) {
                    Ok(v) => Ok(v),
                    // lets the line search back off from a blown-up trial point
                    Err(SteinError::NonFiniteLoss) => Ok((f64::INFINITY, vec![f64::NAN; p.len()])),
                    Err(e) => Err(e.into()),
                }
            },
            &x0,
            cfg,
        )?,
        OptimizerConfig::Adam(cfg) => adam_minimize(
            |p, batch| {
                work.set_params(p);
                Ok(match batch {
                    Some(idx) => work.loss_and_gradient_with(&data.subset(idx), loss)?,
                    None => work.loss_and_gradient_with(data, loss)?,
                })
            },
            &x0,
            data.len(),
            cfg,
            rng,
        )?,
    };
    net.set_params(&x);
    Ok((net, report))
}
