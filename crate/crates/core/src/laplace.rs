//! Generalized Gauss–Newton Laplace approximation over network parameters, with the
//! marginal on θ0 as the integral posterior.

use thiserror::Error;

use crate::numerics::{DenseMatrix, JitterPolicy, NumericsError};
use crate::steinnet::{SteinData, SteinError, SteinNetwork};

#[derive(Debug, Error)]
pub enum LaplaceError {
    #[error("noise-scale grid is empty")]
    EmptyGrid,
    #[error("reference value is zero; relative error undefined")]
    ZeroReference,
    #[error("scale parameters must be positive and finite (sigma={sigma}, sigma0={sigma0})")]
    InvalidScale { sigma: f64, sigma0: f64 },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Stein(#[from] SteinError),
}

/// A model with scalar output whose parameter vector starts with the integral θ0.
pub trait LaplaceModel {
    fn n_params_total(&self) -> usize;
    /// Full parameter vector with θ0 first.
    fn theta(&self) -> Vec<f64>;
    /// f_i − g(x_i).
    fn residuals(&self, data: &SteinData, workers: usize) -> Result<Vec<f64>, LaplaceError>;
    /// Row i holds ∇θ g(x_i).
    fn theta_jacobian(&self, data: &SteinData, workers: usize) -> Result<DenseMatrix, LaplaceError>;
}

impl LaplaceModel for SteinNetwork {
    fn n_params_total(&self) -> usize {
        SteinNetwork::n_params_total(self)
    }

    fn theta(&self) -> Vec<f64> {
        self.params()
    }

    fn residuals(&self, data: &SteinData, workers: usize) -> Result<Vec<f64>, LaplaceError> {
        if data.is_empty() {
            return Ok(Vec::new());
        }
        Ok(self.eval_batch(data, workers)?.iter().zip(&data.f).map(|(g, f)| f - g).collect())
    }

    fn theta_jacobian(&self, data: &SteinData, workers: usize) -> Result<DenseMatrix, LaplaceError> {
        if data.is_empty() {
            return Ok(DenseMatrix::zeros(0, self.n_params_total()));
        }
        Ok(SteinNetwork::theta_jacobian(self, data, workers)?)
    }
}

/// The constant model g ≡ θ0; its posterior is the conjugate Gaussian-mean posterior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasOnlyModel {
    pub theta_0: f64,
}

impl BiasOnlyModel {
    /// Minimizer of (1/n)Σ(f_i − θ0)² + λθ0².
    pub fn fit_map(data: &SteinData, lambda: f64) -> Self {
        let mean = if data.is_empty() { 0.0 } else { data.f.iter().sum::<f64>() / data.len() as f64 };
        Self { theta_0: mean / (1.0 + lambda) }
    }
}

impl LaplaceModel for BiasOnlyModel {
    fn n_params_total(&self) -> usize {
        1
    }

    fn theta(&self) -> Vec<f64> {
        vec![self.theta_0]
    }

    fn residuals(&self, data: &SteinData, _workers: usize) -> Result<Vec<f64>, LaplaceError> {
        Ok(data.f.iter().map(|f| f - self.theta_0).collect())
    }

    fn theta_jacobian(&self, data: &SteinData, _workers: usize) -> Result<DenseMatrix, LaplaceError> {
        Ok(DenseMatrix::from_row_major(data.len(), 1, vec![1.0; data.len()]))
    }
}

/// Weight decay λ of the training loss that corresponds to a N(0, σ0²I) prior under
/// Gaussian noise σ: (1/n)Σr² + λ‖θ‖² ∝ −log posterior with λ = σ²/(nσ0²).
pub fn lambda_for_prior(sigma: f64, sigma0: f64, n: usize) -> f64 {
    sigma * sigma / (n.max(1) as f64 * sigma0 * sigma0)
}

/// σ⁻² Σ ∇θg(x_i) ∇θg(x_i)ᵀ.
pub fn ggn_hessian(model: &dyn LaplaceModel, data: &SteinData, sigma: f64, workers: usize) -> Result<DenseMatrix, LaplaceError> {
    let p = model.n_params_total();
    if data.is_empty() {
        return Ok(DenseMatrix::zeros(p, p));
    }
    let mut h = model.theta_jacobian(data, workers)?.gram();
    h.scale(1.0 / (sigma * sigma));
    Ok(h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaplacePosterior {
    pub theta_map: Vec<f64>,
    pub sigma: f64,
    pub sigma0: f64,
    pub theta0_mean: f64,
    pub theta0_var: f64,
    /// Laplace approximation of log p(D | σ, σ0).
    pub log_evidence: f64,
}

impl LaplacePosterior {
    pub fn theta0_std(&self) -> f64 {
        self.theta0_var.sqrt()
    }
}

/// Curvature information kept between (σ, σ0) pairs: JᵀJ when there are at least as many
/// points as parameters, otherwise the n × n kernel of the non-θ0 Jacobian columns.
#[derive(Debug, Clone)]
enum Curvature {
    Primal(DenseMatrix),
    Dual { kernel: DenseMatrix, j0: Vec<f64> },
}

/// Precomputed pieces shared by every (σ, σ0) pair: the curvature, the residuals and θ.
#[derive(Debug, Clone)]
pub struct LaplaceFit {
    curvature: Curvature,
    pub residuals: Vec<f64>,
    pub theta_map: Vec<f64>,
}

impl LaplaceFit {
    pub fn new(model: &dyn LaplaceModel, data: &SteinData, workers: usize) -> Result<Self, LaplaceError> {
        let p = model.n_params_total();
        let residuals = model.residuals(data, workers)?;
        let theta_map = model.theta();
        if data.is_empty() {
            return Ok(Self::from_gram(DenseMatrix::zeros(p, p), residuals, theta_map));
        }
        Ok(Self::from_jacobian(&model.theta_jacobian(data, workers)?, residuals, theta_map))
    }

    /// From the n × p Jacobian of the outputs with respect to θ (θ0 first).
    pub fn from_jacobian(jacobian: &DenseMatrix, residuals: Vec<f64>, theta_map: Vec<f64>) -> Self {
        let (n, p) = (jacobian.rows(), jacobian.cols());
        if n >= p {
            return Self::from_gram(jacobian.gram(), residuals, theta_map);
        }
        let j0: Vec<f64> = jacobian.row_iter().map(|r| r[0]).collect();
        let mut rest = DenseMatrix::zeros(p - 1, n);
        for (i, r) in jacobian.row_iter().enumerate() {
            for (k, v) in r[1..].iter().enumerate() {
                rest[(k, i)] = *v;
            }
        }
        Self { curvature: Curvature::Dual { kernel: rest.gram(), j0 }, residuals, theta_map }
    }

    /// From JᵀJ directly.
    pub fn from_gram(gram: DenseMatrix, residuals: Vec<f64>, theta_map: Vec<f64>) -> Self {
        Self { curvature: Curvature::Primal(gram), residuals, theta_map }
    }

    pub fn n(&self) -> usize {
        self.residuals.len()
    }

    /// Root-mean-square residual, floored at 1e-8.
    pub fn residual_sigma(&self) -> f64 {
        residual_sigma(&self.residuals)
    }

    /// Posterior for the given scales. Σ⁻¹ = JᵀJ/σ² + I/σ0², factored once; the same factor
    /// gives the θ0 marginal and the evidence
    ///
    /// log p(D|σ,σ0) ≈ −n/2·log(2πσ²) − Σr²/(2σ²) − ‖θ‖²/(2σ0²) − ½·log det(I + σ0²JᵀJ/σ²),
    ///
    /// which is log p(D|θ) + log p(θ) + (p/2)·log 2π − ½·log det Σ⁻¹ with the standard
    /// normalizer (2πσ0²)^(−p/2) for the prior.
    ///
    /// With fewer points than parameters the n × n form is used instead. Writing J = [j0 Jφ]
    /// and M = σ²I + σ0²JφJφᵀ, the θ0 marginal precision is 1/σ0² + j0ᵀM⁻¹j0 and
    /// det(I + σ0²JᵀJ/σ²) = det(M)·(1 + σ0²·j0ᵀM⁻¹j0)/σ²ⁿ.
    pub fn posterior(&self, sigma: f64, sigma0: f64) -> Result<LaplacePosterior, LaplaceError> {
        if !(sigma > 0.0 && sigma0 > 0.0 && sigma.is_finite() && sigma0.is_finite()) {
            return Err(LaplaceError::InvalidScale { sigma, sigma0 });
        }
        let p = self.theta_map.len();
        let (s2, s02) = (sigma * sigma, sigma0 * sigma0);
        let (theta0_var, log_det) = match &self.curvature {
            Curvature::Primal(gram) => {
                let mut a = gram.clone();
                a.scale(1.0 / s2);
                a.add_to_diag(1.0 / s02);
                let chol = a.cholesky(JitterPolicy::default())?;
                let mut e0 = vec![0.0; p];
                e0[0] = 1.0;
                let y = chol.solve_lower(&e0);
                (y.iter().map(|v| v * v).sum::<f64>(), chol.log_det() + p as f64 * s02.ln())
            }
            Curvature::Dual { kernel, j0 } => {
                let mut m = kernel.clone();
                m.scale(s02);
                m.add_to_diag(s2);
                let chol = m.cholesky(JitterPolicy::default())?;
                let q = chol.inv_quad(j0);
                (1.0 / (1.0 / s02 + q), chol.log_det() - j0.len() as f64 * s2.ln() + (s02 * q).ln_1p())
            }
        };
        let n = self.n() as f64;
        let rss: f64 = self.residuals.iter().map(|r| r * r).sum();
        let theta_sq: f64 = self.theta_map.iter().map(|t| t * t).sum();
        let log_evidence = -0.5 * n * (2.0 * std::f64::consts::PI * s2).ln() - rss / (2.0 * s2) - theta_sq / (2.0 * s02) - 0.5 * log_det;
        Ok(LaplacePosterior { theta_map: self.theta_map.clone(), sigma, sigma0, theta0_mean: self.theta_map[0], theta0_var, log_evidence })
    }

    /// Maximizes the evidence over the grid; ties go to the larger σ0.
    pub fn tune(&self, grid: &NoiseGrid) -> Result<(f64, f64), LaplaceError> {
        if grid.sigma.is_empty() || grid.sigma0.is_empty() {
            return Err(LaplaceError::EmptyGrid);
        }
        let mut best: Option<(f64, f64, f64)> = None;
        for &s in &grid.sigma {
            for &s0 in &grid.sigma0 {
                let ev = self.posterior(s, s0)?.log_evidence;
                let better = match best {
                    None => true,
                    Some((e, _, b0)) => ev > e || (ev == e && s0 > b0),
                };
                if better {
                    best = Some((ev, s, s0));
                }
            }
        }
        let (_, s, s0) = best.expect("grid is non-empty");
        Ok((s, s0))
    }
}

/// Candidate values for the observation noise σ and the prior scale σ0.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseGrid {
    pub sigma: Vec<f64>,
    pub sigma0: Vec<f64>,
}

impl NoiseGrid {
    /// σ fixed, σ0 over nine log-spaced values in [1e-2, 1e2].
    pub fn with_sigma(sigma: f64) -> Self {
        Self { sigma: vec![sigma], sigma0: crate::numerics::logspace(1e-2, 1e2, 9) }
    }
}

pub fn residual_sigma(residuals: &[f64]) -> f64 {
    if residuals.is_empty() {
        return 1e-8;
    }
    let ms = residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64;
    ms.sqrt().max(1e-8)
}

pub fn laplace_posterior(model: &dyn LaplaceModel, data: &SteinData, sigma: f64, sigma0: f64) -> Result<LaplacePosterior, LaplaceError> {
    LaplaceFit::new(model, data, 1)?.posterior(sigma, sigma0)
}

pub fn tune_noise_scales(model: &dyn LaplaceModel, data: &SteinData, grid: &NoiseGrid) -> Result<(f64, f64), LaplaceError> {
    if grid.sigma.is_empty() || grid.sigma0.is_empty() {
        return Err(LaplaceError::EmptyGrid);
    }
    LaplaceFit::new(model, data, 1)?.tune(grid)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationStat {
    pub abs_rel_error: f64,
    pub posterior_std: f64,
    pub gamma: f64,
}

/// γ = (|estimate − reference| / |reference|) / posterior_std.
pub fn calibration(estimate: f64, reference: f64, posterior_std: f64) -> Result<CalibrationStat, LaplaceError> {
    if reference == 0.0 {
        return Err(LaplaceError::ZeroReference);
    }
    let abs_rel_error = (estimate - reference).abs() / reference.abs();
    Ok(CalibrationStat { abs_rel_error, posterior_std, gamma: abs_rel_error / posterior_std })
}
