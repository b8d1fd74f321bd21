//! Point sets for training and estimation: exact draws, MALA chains, Halton points and
//! regular grids.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{std_normal_inv_cdf, DenseMatrix, RandomStream};
use crate::targets::{sample, scores_of, GaussianTarget, ScoreTarget, TargetError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("non-finite log density at iteration {iteration}")]
    NonFiniteDensity { iteration: usize },
    #[error("grid of {points} points exceeds the budget of {budget}")]
    BudgetExceeded { points: u128, budget: usize },
    #[error("invalid sampler configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Target(#[from] TargetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Iid,
    Mala,
    /// Halton sequence pushed through the Gaussian inverse CDF.
    Qmc,
    Grid,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Iid => "iid",
            Provenance::Mala => "mala",
            Provenance::Qmc => "qmc",
            Provenance::Grid => "grid",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Provenance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "iid" => Ok(Provenance::Iid),
            "mala" => Ok(Provenance::Mala),
            "qmc" => Ok(Provenance::Qmc),
            "grid" => Ok(Provenance::Grid),
            other => Err(format!("unknown sampler '{other}' (expected iid, mala, qmc or grid)")),
        }
    }
}

/// Points together with the target's scores at those points.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    pub points: DenseMatrix,
    pub scores: DenseMatrix,
    pub provenance: Provenance,
}

impl PointSet {
    pub fn from_points(target: &dyn ScoreTarget, points: DenseMatrix, provenance: Provenance) -> Result<Self, SamplerError> {
        let scores = scores_of(target, &points)?;
        Ok(Self { points, scores, provenance })
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    /// Concatenates point sets row-wise; the provenance of the first set is kept.
    pub fn concat(sets: &[PointSet]) -> Option<PointSet> {
        let first = sets.first()?;
        let d = first.dim();
        let n: usize = sets.iter().map(PointSet::len).sum();
        let mut points = Vec::with_capacity(n * d);
        let mut scores = Vec::with_capacity(n * d);
        for s in sets {
            points.extend_from_slice(s.points.as_slice());
            scores.extend_from_slice(s.scores.as_slice());
        }
        Some(PointSet { points: DenseMatrix::from_row_major(n, d, points), scores: DenseMatrix::from_row_major(n, d, scores), provenance: first.provenance })
    }
}

pub fn iid_points(target: &dyn ScoreTarget, n: usize, rng: &mut RandomStream) -> Result<PointSet, SamplerError> {
    let points = sample(target, n, rng)?;
    PointSet::from_points(target, points, Provenance::Iid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MalaConfig {
    pub step_size: f64,
    pub n_burn: usize,
    pub n_keep: usize,
    pub thinning: usize,
    /// Starting point; empty means the origin.
    pub init: Vec<f64>,
    pub adapt_target_accept: f64,
    pub adapt: bool,
}

impl Default for MalaConfig {
    fn default() -> Self {
        Self { step_size: 0.5, n_burn: 2000, n_keep: 1000, thinning: 1, init: Vec::new(), adapt_target_accept: 0.574, adapt: true }
    }
}

impl MalaConfig {
    pub fn total_iterations(&self) -> usize {
        self.n_burn + self.n_keep * self.thinning
    }

    pub fn validate(&self, d: usize) -> Result<(), SamplerError> {
        let bad = |m: &str| Err(SamplerError::InvalidConfig(m.into()));
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return bad("step_size must be positive");
        }
        if self.thinning == 0 {
            return bad("thinning must be at least 1");
        }
        if !(self.adapt_target_accept > 0.0 && self.adapt_target_accept < 1.0) {
            return bad("adapt_target_accept must lie in (0, 1)");
        }
        if !self.init.is_empty() && self.init.len() != d {
            return Err(SamplerError::InvalidConfig(format!("init has length {}, target dimension is {d}", self.init.len())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MalaRun {
    pub set: PointSet,
    /// Acceptance rate over the post-burn-in iterations.
    pub accept_rate: f64,
    /// Step size after adaptation (the configured one when adaptation is off).
    pub step_size: f64,
    /// Unnormalized log density at the final state of the chain.
    pub final_log_density: f64,
}

struct State {
    x: Vec<f64>,
    log_p: f64,
    score: Vec<f64>,
}

/// log q(to | from) up to a constant, for the Langevin proposal N(from + ε²/2·s(from), ε²I).
fn log_q(to: &[f64], from: &State, eps: f64) -> f64 {
    let h = 0.5 * eps * eps;
    let r2: f64 = to.iter().zip(&from.x).zip(&from.score).map(|((t, x), s)| (t - x - h * s).powi(2)).sum();
    -r2 / (2.0 * eps * eps)
}

/// Evaluates a proposal; `None` means zero density (outside the support).
fn evaluate(target: &dyn ScoreTarget, x: Vec<f64>, iteration: usize) -> Result<Option<State>, SamplerError> {
    match target.log_density_and_score(&x) {
        Ok((log_p, score)) => {
            if log_p == f64::NEG_INFINITY {
                return Ok(None);
            }
            if !log_p.is_finite() || !score.iter().all(|s| s.is_finite()) {
                return Err(SamplerError::NonFiniteDensity { iteration });
            }
            Ok(Some(State { x, log_p, score }))
        }
        Err(TargetError::OutsideSupport) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Metropolis-adjusted Langevin chain. During burn-in (when `adapt` is set) log ε follows a
/// Robbins–Monro recursion toward the target acceptance probability, then stays fixed.
pub fn mala_sample(target: &dyn ScoreTarget, cfg: &MalaConfig, rng: &mut RandomStream) -> Result<MalaRun, SamplerError> {
    let d = target.dim();
    cfg.validate(d)?;
    let init = if cfg.init.is_empty() { vec![0.0; d] } else { cfg.init.clone() };
    let mut cur = evaluate(target, init, 0)?.ok_or(SamplerError::NonFiniteDensity { iteration: 0 })?;
    let mut log_eps = cfg.step_size.ln();
    let mut kept = Vec::with_capacity(cfg.n_keep * d);
    let mut kept_scores = Vec::with_capacity(cfg.n_keep * d);
    let mut accepted_after_burn = 0usize;
    let mut proposal = vec![0.0; d];

    for it in 0..cfg.total_iterations() {
        let eps = log_eps.exp();
        let h = 0.5 * eps * eps;
        for ((p, x), s) in proposal.iter_mut().zip(&cur.x).zip(&cur.score) {
            let xi: f64 = rng.sample(StandardNormal);
            *p = x + h * s + eps * xi;
        }
        let u: f64 = rng.random();
        let accept_prob = match evaluate(target, proposal.clone(), it + 1)? {
            Some(prop) => {
                let log_alpha = prop.log_p - cur.log_p + log_q(&cur.x, &prop, eps) - log_q(&prop.x, &cur, eps);
                let a = log_alpha.exp().min(1.0);
                if u < a {
                    cur = prop;
                    if it >= cfg.n_burn {
                        accepted_after_burn += 1;
                    }
                }
                a
            }
            None => 0.0,
        };
        if it < cfg.n_burn {
            if cfg.adapt {
                let gain = 1.0 / (it as f64 + 1.0).powf(0.6);
                log_eps += gain * (accept_prob - cfg.adapt_target_accept);
            }
        } else if (it - cfg.n_burn + 1) % cfg.thinning == 0 {
            kept.extend_from_slice(&cur.x);
            kept_scores.extend_from_slice(&cur.score);
        }
    }
    let post = cfg.n_keep * cfg.thinning;
    let set = PointSet {
        points: DenseMatrix::from_row_major(cfg.n_keep, d, kept),
        scores: DenseMatrix::from_row_major(cfg.n_keep, d, kept_scores),
        provenance: Provenance::Mala,
    };
    Ok(MalaRun {
        set,
        accept_rate: if post > 0 { accepted_after_burn as f64 / post as f64 } else { f64::NAN },
        step_size: log_eps.exp(),
        final_log_density: cur.log_p,
    })
}

/// Effective sample size of a scalar chain, using Geyer's initial positive sequence.
pub fn effective_sample_size(chain: &[f64]) -> f64 {
    let n = chain.len();
    if n < 4 {
        return n as f64;
    }
    let m = crate::numerics::mean(chain);
    let c: Vec<f64> = chain.iter().map(|x| x - m).collect();
    let acov = |lag: usize| c[..n - lag].iter().zip(&c[lag..]).map(|(a, b)| a * b).sum::<f64>() / n as f64;
    let c0 = acov(0);
    if c0 == 0.0 {
        return n as f64;
    }
    let mut tau = -1.0;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = (acov(lag) + acov(lag + 1)) / c0;
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        lag += 2;
    }
    (n as f64 / tau.max(1e-12)).min(n as f64)
}

pub const MAX_HALTON_DIM: usize = 50;

fn first_primes(k: usize) -> Vec<u64> {
    let mut primes = Vec::with_capacity(k);
    let mut c = 2u64;
    while primes.len() < k {
        if primes.iter().take_while(|&&p| p * p <= c).all(|&p| c % p != 0) {
            primes.push(c);
        }
        c += 1;
    }
    primes
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut out = 0.0;
    while i > 0 {
        out += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    out
}

/// The first `n` Halton points in (0, 1)^d (index 0 is skipped so no coordinate is zero).
pub fn halton_points(n: usize, d: usize) -> Result<DenseMatrix, SamplerError> {
    if d == 0 || d > MAX_HALTON_DIM {
        return Err(SamplerError::InvalidConfig(format!("Halton dimension must be in 1..={MAX_HALTON_DIM}, got {d}")));
    }
    let bases = first_primes(d);
    let mut out = DenseMatrix::zeros(n, d);
    for i in 0..n {
        for (v, &b) in out.row_mut(i).iter_mut().zip(&bases) {
            *v = radical_inverse(i as u64 + 1, b);
        }
    }
    Ok(out)
}

/// Halton points mapped through the inverse CDF of a diagonal Gaussian.
pub fn qmc_points(target: &GaussianTarget, n: usize) -> Result<PointSet, SamplerError> {
    let mut u = halton_points(n, target.mean.len())?;
    let sd = target.std_devs();
    for i in 0..n {
        for ((v, m), s) in u.row_mut(i).iter_mut().zip(&target.mean).zip(&sd) {
            *v = m + s * std_normal_inv_cdf(*v);
        }
    }
    PointSet::from_points(target, u, Provenance::Qmc)
}

pub const GRID_BUDGET: usize = 1 << 22;

/// Regular lattice over ∏[μ_k − 5σ_k, μ_k + 5σ_k], last coordinate varying fastest.
pub fn grid_points(n_per_dim: usize, target: &GaussianTarget) -> Result<PointSet, SamplerError> {
    let d = target.mean.len();
    let total = (n_per_dim as u128).checked_pow(d as u32).unwrap_or(u128::MAX);
    if n_per_dim == 0 || total > GRID_BUDGET as u128 {
        return Err(SamplerError::BudgetExceeded { points: total, budget: GRID_BUDGET });
    }
    let n = total as usize;
    let axes: Vec<Vec<f64>> = target
        .mean
        .iter()
        .zip(target.std_devs())
        .map(|(m, s)| {
            if n_per_dim == 1 {
                return vec![*m];
            }
            let (lo, hi) = (m - 5.0 * s, m + 5.0 * s);
            (0..n_per_dim).map(|i| lo + (hi - lo) * i as f64 / (n_per_dim - 1) as f64).collect()
        })
        .collect();
    let mut points = DenseMatrix::zeros(n, d);
    for r in 0..n {
        let mut rem = r;
        for k in (0..d).rev() {
            points[(r, k)] = axes[k][rem % n_per_dim];
            rem /= n_per_dim;
        }
    }
    PointSet::from_points(target, points, Provenance::Grid)
}
