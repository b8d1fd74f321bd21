//! Monte Carlo and Bayesian quadrature baselines.
//!
//! The RBF kernel is `λ·exp(−‖x−x'‖²/(2l²))` throughout; every closed-form kernel mean
//! embedding below is derived for that convention. The Matérn-1/2 kernel is
//! `λ·exp(−|x−x'|/l)` and only has an embedding in one dimension.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{self, dot, erfc, DenseMatrix, JitterPolicy, NumericsError};
use crate::targets::{normalizer, GaussianTarget, TruncatedGaussian1D};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("no closed-form kernel mean embedding for {0}")]
    EmbeddingUnavailable(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

pub fn mc_estimate(values: &[f64]) -> Result<McEstimate, BaselineError> {
    if values.len() < 2 {
        return Err(BaselineError::TooFewSamples { needed: 2, got: values.len() });
    }
    let n = values.len();
    Ok(McEstimate { mean: numerics::mean(values), std_error: numerics::std_dev(values) / (n as f64).sqrt(), n })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RbfKernel {
    pub lengthscale: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Matern12Kernel {
    pub lengthscale: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Rbf,
    Matern12,
}

impl std::str::FromStr for KernelFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rbf" => Ok(Self::Rbf),
            "matern12" => Ok(Self::Matern12),
            other => Err(format!("unknown kernel '{other}' (expected rbf or matern12)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kernel {
    Rbf(RbfKernel),
    Matern12(Matern12Kernel),
}

impl Kernel {
    pub fn new(family: KernelFamily, lengthscale: f64, amplitude: f64) -> Self {
        match family {
            KernelFamily::Rbf => Kernel::Rbf(RbfKernel { lengthscale, amplitude }),
            KernelFamily::Matern12 => Kernel::Matern12(Matern12Kernel { lengthscale, amplitude }),
        }
    }

    pub fn family(&self) -> KernelFamily {
        match self {
            Kernel::Rbf(_) => KernelFamily::Rbf,
            Kernel::Matern12(_) => KernelFamily::Matern12,
        }
    }

    pub fn lengthscale(&self) -> f64 {
        match self {
            Kernel::Rbf(k) => k.lengthscale,
            Kernel::Matern12(k) => k.lengthscale,
        }
    }

    pub fn amplitude(&self) -> f64 {
        match self {
            Kernel::Rbf(k) => k.amplitude,
            Kernel::Matern12(k) => k.amplitude,
        }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            Kernel::Rbf(k) => {
                let r2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                k.amplitude * (-r2 / (2.0 * k.lengthscale * k.lengthscale)).exp()
            }
            Kernel::Matern12(k) => {
                let r = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                k.amplitude * (-r / k.lengthscale).exp()
            }
        }
    }
}

/// Integration measures with closed-form kernel embeddings.
#[derive(Debug, Clone, PartialEq)]
pub enum BqMeasure {
    Gaussian(GaussianTarget),
    /// Independent truncated Gaussians, one per coordinate.
    TruncatedProduct(Vec<TruncatedGaussian1D>),
}

impl BqMeasure {
    pub fn dim(&self) -> usize {
        match self {
            BqMeasure::Gaussian(g) => g.mean.len(),
            BqMeasure::TruncatedProduct(f) => f.len(),
        }
    }
}

/// Π[k(·, x)] for the RBF kernel under a diagonal Gaussian.
pub fn kme_rbf_gaussian(kernel: &RbfKernel, pi: &GaussianTarget, x: &[f64]) -> f64 {
    let l2 = kernel.lengthscale * kernel.lengthscale;
    let mut out = kernel.amplitude;
    for ((xk, mu), var) in x.iter().zip(&pi.mean).zip(&pi.variance_diag) {
        let s = l2 + var;
        out *= (l2 / s).sqrt() * (-(xk - mu) * (xk - mu) / (2.0 * s)).exp();
    }
    out
}

/// ΠΠ̄[k] for the RBF kernel under a diagonal Gaussian.
pub fn initial_error_rbf_gaussian(kernel: &RbfKernel, pi: &GaussianTarget) -> f64 {
    let l2 = kernel.lengthscale * kernel.lengthscale;
    kernel.amplitude * pi.variance_diag.iter().map(|v| (l2 / (l2 + 2.0 * v)).sqrt()).product::<f64>()
}

/// Π[k(·, x)] for the RBF kernel under a one-dimensional truncated Gaussian.
///
/// The kernel is a scaled Gaussian density in y, so the product with π is another
/// Gaussian N(μ̃, σ̃²) times the constant C = N(x; μ, σ² + l²).
pub fn kme_rbf_truncated(kernel: &RbfKernel, pi: &TruncatedGaussian1D, x: f64) -> f64 {
    let (l, mu, sigma) = (kernel.lengthscale, pi.mu, pi.sigma);
    let (l2, s2) = (l * l, sigma * sigma);
    let tot = s2 + l2;
    let mu_t = (mu * l2 + x * s2) / tot;
    let sigma_t = (s2 * l2 / tot).sqrt();
    let c = (2.0 * std::f64::consts::PI * tot).powf(-0.5) * (-(mu - x) * (mu - x) / (2.0 * tot)).exp();
    let z_t = normalizer(pi.a, pi.b, mu_t, sigma_t);
    kernel.amplitude * l * (2.0 * std::f64::consts::PI).sqrt() * c * z_t / pi.normalizer()
}

/// e^{c}·e^{t²}·erfc(t) without overflow; the asymptotic series takes over for large t.
fn exp_erfc(c: f64, t: f64) -> f64 {
    if t < 26.0 {
        return (t * t + c).exp() * erfc(t);
    }
    let u = 1.0 / (2.0 * t * t);
    let series = 1.0 - u * (1.0 - 3.0 * u * (1.0 - 5.0 * u * (1.0 - 7.0 * u * (1.0 - 9.0 * u))));
    c.exp() * series / (t * std::f64::consts::PI.sqrt())
}

/// Π[k(·, x)] for the unit-amplitude Matérn-1/2 kernel exp(−|x−x'|/l) under N(0, 1):
///
/// ½e^{(2xl+1)/(2l²)}·erfc((x+1/l)/√2) + ½e^{(1−2xl)/(2l²)}·(erf((x−1/l)/√2) + 1).
pub fn kme_matern12_gaussian(l: f64, x: f64) -> f64 {
    let c = -0.5 * x * x;
    let inv = 1.0 / l;
    0.5 * exp_erfc(c, (x + inv) / numerics::SQRT_2) + 0.5 * exp_erfc(c, (inv - x) / numerics::SQRT_2)
}

/// Matérn-1/2 embedding under N(μ, σ²): rescaling y = μ + σz maps it to the standard case.
pub fn kme_matern12_normal(kernel: &Matern12Kernel, mu: f64, sigma: f64, x: f64) -> f64 {
    kernel.amplitude * kme_matern12_gaussian(kernel.lengthscale / sigma, (x - mu) / sigma)
}

/// Kernel mean embedding Π[k(·, x)], or `EmbeddingUnavailable`.
pub fn kernel_mean_embedding(kernel: &Kernel, measure: &BqMeasure, x: &[f64]) -> Result<f64, BaselineError> {
    match (kernel, measure) {
        (Kernel::Rbf(k), BqMeasure::Gaussian(g)) => Ok(kme_rbf_gaussian(k, g, x)),
        (Kernel::Rbf(k), BqMeasure::TruncatedProduct(factors)) => {
            let unit = RbfKernel { lengthscale: k.lengthscale, amplitude: 1.0 };
            Ok(k.amplitude * factors.iter().zip(x).map(|(f, &xk)| kme_rbf_truncated(&unit, f, xk)).product::<f64>())
        }
        (Kernel::Matern12(k), BqMeasure::Gaussian(g)) if g.mean.len() == 1 => {
            Ok(kme_matern12_normal(k, g.mean[0], g.variance_diag[0].sqrt(), x[0]))
        }
        (Kernel::Matern12(_), BqMeasure::Gaussian(g)) => {
            Err(BaselineError::EmbeddingUnavailable(format!("matern12 kernel in d={}", g.mean.len())))
        }
        (Kernel::Matern12(_), BqMeasure::TruncatedProduct(_)) => {
            Err(BaselineError::EmbeddingUnavailable("matern12 kernel under a truncated measure".into()))
        }
    }
}

/// ΠΠ̄[k] when it has a closed form (RBF under a Gaussian).
pub fn initial_error(kernel: &Kernel, measure: &BqMeasure) -> Option<f64> {
    match (kernel, measure) {
        (Kernel::Rbf(k), BqMeasure::Gaussian(g)) => Some(initial_error_rbf_gaussian(k, g)),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BqPosterior {
    pub mean: f64,
    pub variance: Option<f64>,
    pub kernel: Kernel,
    pub n: usize,
}

impl BqPosterior {
    pub fn std(&self) -> Option<f64> {
        self.variance.map(f64::sqrt)
    }
}

/// Gram matrix K_ij = k(x_i, x_j), rows filled in parallel.
pub fn kernel_matrix(kernel: &Kernel, points: &DenseMatrix, workers: usize) -> DenseMatrix {
    let n = points.rows();
    let mut k = DenseMatrix::zeros(n, n);
    let rows_per = n.div_ceil(workers.max(1)).max(1);
    std::thread::scope(|s| {
        for (c, block) in k.as_mut_slice().chunks_mut(rows_per * n.max(1)).enumerate() {
            s.spawn(move || {
                for (r, row) in block.chunks_mut(n).enumerate() {
                    let xi = points.row(c * rows_per + r);
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = kernel.eval(xi, points.row(j));
                    }
                }
            });
        }
    });
    k
}

/// Zero-mean GP posterior mean, kept as the weights K⁻¹f.
#[derive(Debug, Clone)]
pub struct GpInterpolant {
    pub kernel: Kernel,
    pub points: DenseMatrix,
    pub weights: Vec<f64>,
}

impl GpInterpolant {
    pub fn fit(kernel: Kernel, points: &DenseMatrix, f: &[f64], workers: usize) -> Result<Self, BaselineError> {
        check_data(points, f)?;
        let mut k = kernel_matrix(&kernel, points, workers);
        let chol = k.cholesky(JitterPolicy::default())?;
        Ok(Self { kernel, points: points.clone(), weights: chol.solve(f) })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let kx: Vec<f64> = self.points.row_iter().map(|xi| self.kernel.eval(x, xi)).collect();
        dot(&kx, &self.weights)
    }
}

fn check_data(points: &DenseMatrix, f: &[f64]) -> Result<(), BaselineError> {
    if points.rows() != f.len() {
        return Err(BaselineError::InvalidData(format!("{} points but {} values", points.rows(), f.len())));
    }
    if f.is_empty() {
        return Err(BaselineError::TooFewSamples { needed: 1, got: 0 });
    }
    Ok(())
}

/// BQ posterior over Π[f] with a zero prior mean.
pub fn bq_posterior(kernel: &Kernel, measure: &BqMeasure, points: &DenseMatrix, f: &[f64], workers: usize) -> Result<BqPosterior, BaselineError> {
    check_data(points, f)?;
    if points.cols() != measure.dim() {
        return Err(BaselineError::InvalidData(format!("points have {} columns, measure has dimension {}", points.cols(), measure.dim())));
    }
    let z = points.row_iter().map(|x| kernel_mean_embedding(kernel, measure, x)).collect::<Result<Vec<_>, _>>()?;
    let mut k = kernel_matrix(kernel, points, workers);
    let chol = k.cholesky(JitterPolicy::default())?;
    let mean = dot(&z, &chol.solve(f));
    let variance = initial_error(kernel, measure).map(|ie| (ie - chol.inv_quad(&z)).max(0.0));
    Ok(BqPosterior { mean, variance, kernel: *kernel, n: f.len() })
}

/// GP log marginal likelihood −½fᵀK⁻¹f − ½log det K − n/2·log 2π.
pub fn gp_log_likelihood(kernel: &Kernel, points: &DenseMatrix, f: &[f64]) -> Result<f64, BaselineError> {
    check_data(points, f)?;
    let mut k = kernel_matrix(kernel, points, 1);
    let chol = k.cholesky(JitterPolicy::default())?;
    let n = f.len() as f64;
    Ok(-0.5 * chol.inv_quad(f) - 0.5 * chol.log_det() - n * numerics::LN_SQRT_2PI)
}

/// Candidate hyperparameters; the best grid cell is refined by coordinate descent.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperGrid {
    pub lengthscales: Vec<f64>,
    pub amplitudes: Vec<f64>,
    /// Halvings of the log step during refinement.
    pub refine_steps: usize,
    /// Fit on at most this many leading points.
    pub max_points: usize,
}

impl HyperGrid {
    /// 25 lengthscales over [1e-2, 1e2]·(median pairwise distance), 9 amplitudes over
    /// [1e-2, 1e2]·var(f).
    pub fn default_for(points: &DenseMatrix, f: &[f64]) -> Self {
        let max_points = 512;
        let m = points.rows().min(max_points);
        let med = median_pairwise_distance(points, m).max(1e-8);
        let v = numerics::variance(&f[..m.min(f.len())]).max(1e-12);
        Self { lengthscales: numerics::logspace(1e-2 * med, 1e2 * med, 25), amplitudes: numerics::logspace(1e-2 * v, 1e2 * v, 9), refine_steps: 3, max_points }
    }
}

fn median_pairwise_distance(points: &DenseMatrix, m: usize) -> f64 {
    let mut d = Vec::with_capacity(m * m.saturating_sub(1) / 2);
    for i in 0..m {
        for j in 0..i {
            let r2: f64 = points.row(i).iter().zip(points.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            d.push(r2.sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    *d.select_nth_unstable_by(mid, f64::total_cmp).1
}

fn ratio(grid: &[f64]) -> f64 {
    if grid.len() < 2 {
        return 1.0;
    }
    (grid[grid.len() - 1] / grid[0]).powf(1.0 / (grid.len() - 1) as f64)
}

/// Maximizes the GP log marginal likelihood over (lengthscale, amplitude); ties go to the larger lengthscale.
pub fn fit_gp_hyperparams(family: KernelFamily, points: &DenseMatrix, f: &[f64], grid: &HyperGrid, workers: usize) -> Result<Kernel, BaselineError> {
    check_data(points, f)?;
    if f.len() < 2 {
        return Err(BaselineError::TooFewSamples { needed: 2, got: f.len() });
    }
    if grid.lengthscales.is_empty() || grid.amplitudes.is_empty() {
        return Err(BaselineError::InvalidData("empty hyperparameter grid".into()));
    }
    let m = points.rows().min(grid.max_points.max(2));
    let sub = DenseMatrix::from_row_major(m, points.cols(), points.as_slice()[..m * points.cols()].to_vec());
    let fs = &f[..m];

    let cells: Vec<(f64, f64)> = grid.lengthscales.iter().flat_map(|&l| grid.amplitudes.iter().map(move |&a| (l, a))).collect();
    let lls = parallel_map(&cells, workers, |&(l, a)| gp_log_likelihood(&Kernel::new(family, l, a), &sub, fs));
    let mut best: Option<(f64, f64, f64)> = None;
    let mut last_err = None;
    for (&(l, a), ll) in cells.iter().zip(lls) {
        match ll {
            Ok(ll) => {
                if best.is_none_or(|(bl, _, bll)| ll > bll || (ll == bll && l > bl)) {
                    best = Some((l, a, ll));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    let Some((mut l, mut a, mut best_ll)) = best else {
        return Err(last_err.expect("non-empty grid"));
    };

    let (mut rl, mut ra) = (ratio(&grid.lengthscales), ratio(&grid.amplitudes));
    for _ in 0..grid.refine_steps {
        rl = rl.sqrt();
        ra = ra.sqrt();
        for (axis, r) in [(0, rl), (1, ra)] {
            if r <= 1.0 {
                continue;
            }
            for step in [r, 1.0 / r] {
                let (tl, ta) = if axis == 0 { (l * step, a) } else { (l, a * step) };
                if let Ok(ll) = gp_log_likelihood(&Kernel::new(family, tl, ta), &sub, fs) {
                    if ll > best_ll {
                        (l, a, best_ll) = (tl, ta, ll);
                    }
                }
            }
        }
    }
    Ok(Kernel::new(family, l, a))
}

fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let per = items.len().div_ceil(workers.max(1)).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(per).map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<R>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}
