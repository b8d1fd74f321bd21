//! Integration measures known through their score ∇ log π, an (optionally unnormalized)
//! log density and, when possible, an exact sampler.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::numerics::{
    std_normal_cdf, std_normal_interval, std_normal_inv_cdf, std_normal_inv_sf, std_normal_sf,
    DenseMatrix, RandomStream, LN_SQRT_2PI,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TargetError {
    #[error("point lies outside the support of the target")]
    OutsideSupport,
    #[error("target has no exact sampler")]
    NoSampler,
    #[error("target exposes no log density")]
    NoDensity,
    #[error("dimension mismatch: target has dimension {expected}, point has {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid target parameters: {0}")]
    InvalidParameters(String),
    #[error("target evaluation failed: {0}")]
    Evaluation(String),
}

/// Support of a target: all of ℝ^d or a (possibly half-infinite) box.
#[derive(Debug, Clone, PartialEq)]
pub enum Support {
    AllSpace,
    Box { lower: Vec<f64>, upper: Vec<f64> },
}

impl Support {
    /// Open-interior test; points on a face are not interior.
    pub fn is_interior(&self, x: &[f64]) -> bool {
        match self {
            Support::AllSpace => x.iter().all(|v| v.is_finite()),
            Support::Box { lower, upper } => {
                x.iter().zip(lower.iter().zip(upper)).all(|(&v, (&a, &b))| v > a && v < b)
            }
        }
    }

    /// Closed-set membership.
    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Support::AllSpace => x.iter().all(|v| !v.is_nan()),
            Support::Box { lower, upper } => {
                x.iter().zip(lower.iter().zip(upper)).all(|(&v, (&a, &b))| v >= a && v <= b)
            }
        }
    }
}

/// A distribution π on ℝ^d exposed through ∇ log π.
pub trait ScoreTarget: Send + Sync {
    fn dim(&self) -> usize;

    fn support(&self) -> Support {
        Support::AllSpace
    }

    /// ∇ₓ log π(x). Errors with `OutsideSupport` unless `x` is interior.
    fn score(&self, x: &[f64]) -> Result<Vec<f64>, TargetError>;

    /// log π(x) up to an additive constant (exact when [`ScoreTarget::is_normalized`]).
    fn log_density_unnorm(&self, _x: &[f64]) -> Result<f64, TargetError> {
        Err(TargetError::NoDensity)
    }

    /// Whether `log_density_unnorm` is the normalized log density.
    fn is_normalized(&self) -> bool {
        false
    }

    /// Log density and score in one call; targets with an expensive shared computation override this.
    fn log_density_and_score(&self, x: &[f64]) -> Result<(f64, Vec<f64>), TargetError> {
        Ok((self.log_density_unnorm(x)?, self.score(x)?))
    }

    fn has_sampler(&self) -> bool {
        false
    }

    /// One exact draw written into `out` (length `dim`).
    fn sample_into(&self, _rng: &mut RandomStream, _out: &mut [f64]) -> Result<(), TargetError> {
        Err(TargetError::NoSampler)
    }

    fn name(&self) -> String;
}

fn check_dim(expected: usize, x: &[f64]) -> Result<(), TargetError> {
    if x.len() != expected {
        return Err(TargetError::DimensionMismatch { expected, got: x.len() });
    }
    Ok(())
}

/// `n` iid draws as an `n × d` matrix.
pub fn sample(target: &dyn ScoreTarget, n: usize, rng: &mut RandomStream) -> Result<DenseMatrix, TargetError> {
    let d = target.dim();
    if !target.has_sampler() {
        return Err(TargetError::NoSampler);
    }
    let mut out = DenseMatrix::zeros(n, d);
    for i in 0..n {
        target.sample_into(rng, out.row_mut(i))?;
    }
    Ok(out)
}

/// Scores of every row of `points`, as an `n × d` matrix.
pub fn scores_of(target: &dyn ScoreTarget, points: &DenseMatrix) -> Result<DenseMatrix, TargetError> {
    let mut out = DenseMatrix::zeros(points.rows(), points.cols());
    for i in 0..points.rows() {
        let s = target.score(points.row(i))?;
        out.row_mut(i).copy_from_slice(&s);
    }
    Ok(out)
}

/// Diagonal-covariance Gaussian N(mean, diag(variance)).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTarget {
    pub mean: Vec<f64>,
    pub variance_diag: Vec<f64>,
}

impl GaussianTarget {
    pub fn new(mean: Vec<f64>, variance_diag: Vec<f64>) -> Result<Self, TargetError> {
        if mean.len() != variance_diag.len() || mean.is_empty() {
            return Err(TargetError::InvalidParameters("mean and variance must have equal, non-zero length".into()));
        }
        if variance_diag.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(TargetError::InvalidParameters("variances must be positive".into()));
        }
        Ok(Self { mean, variance_diag })
    }

    pub fn standard(d: usize) -> Self {
        Self { mean: vec![0.0; d], variance_diag: vec![1.0; d] }
    }

    pub fn std_devs(&self) -> Vec<f64> {
        self.variance_diag.iter().map(|v| v.sqrt()).collect()
    }
}

impl ScoreTarget for GaussianTarget {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn score(&self, x: &[f64]) -> Result<Vec<f64>, TargetError> {
        check_dim(self.dim(), x)?;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(TargetError::OutsideSupport);
        }
        Ok(x.iter().zip(&self.mean).zip(&self.variance_diag).map(|((xi, m), v)| -(xi - m) / v).collect())
    }

    fn log_density_unnorm(&self, x: &[f64]) -> Result<f64, TargetError> {
        check_dim(self.dim(), x)?;
        Ok(x.iter()
            .zip(&self.mean)
            .zip(&self.variance_diag)
            .map(|((xi, m), v)| -0.5 * (xi - m) * (xi - m) / v - 0.5 * v.ln() - LN_SQRT_2PI)
            .sum())
    }

    fn is_normalized(&self) -> bool {
        true
    }

    fn has_sampler(&self) -> bool {
        true
    }

    fn sample_into(&self, rng: &mut RandomStream, out: &mut [f64]) -> Result<(), TargetError> {
        for ((o, m), v) in out.iter_mut().zip(&self.mean).zip(&self.variance_diag) {
            let z: f64 = rng.sample(StandardNormal);
            *o = m + v.sqrt() * z;
        }
        Ok(())
    }

    fn name(&self) -> String {
        format!("gaussian(d={})", self.dim())
    }
}

/// N(μ, σ²) restricted to [a, b]; one side may be infinite.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedGaussian1D {
    pub mu: f64,
    pub sigma: f64,
    pub a: f64,
    pub b: f64,
}

impl TruncatedGaussian1D {
    pub fn new(mu: f64, sigma: f64, a: f64, b: f64) -> Result<Self, TargetError> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(TargetError::InvalidParameters("sigma must be positive".into()));
        }
        if !(a < b) {
            return Err(TargetError::InvalidParameters("truncation requires a < b".into()));
        }
        let t = Self { mu, sigma, a, b };
        if !(t.normalizer() > 0.0) {
            return Err(TargetError::InvalidParameters("truncation interval carries no mass".into()));
        }
        Ok(t)
    }

    /// Z(a, b, μ, σ) = Φ((b−μ)/σ) − Φ((a−μ)/σ).
    pub fn normalizer(&self) -> f64 {
        normalizer(self.a, self.b, self.mu, self.sigma)
    }

    fn draw(&self, rng: &mut RandomStream) -> f64 {
        let alpha = (self.a - self.mu) / self.sigma;
        let beta = (self.b - self.mu) / self.sigma;
        let u: f64 = rng.random();
        let z = if alpha > 0.0 {
            // upper tail: invert the survival function to keep precision
            let (qa, qb) = (std_normal_sf(alpha), std_normal_sf(beta));
            std_normal_inv_sf(qa - u * (qa - qb))
        } else {
            let (pa, pb) = (std_normal_cdf(alpha), std_normal_cdf(beta));
            std_normal_inv_cdf(pa + u * (pb - pa))
        };
        (self.mu + self.sigma * z).clamp(self.a, self.b)
    }
}

/// Z(a, b, μ, σ), the Gaussian mass of [a, b].
pub fn normalizer(a: f64, b: f64, mu: f64, sigma: f64) -> f64 {
    std_normal_interval((a - mu) / sigma, (b - mu) / sigma)
}

impl ScoreTarget for TruncatedGaussian1D {
    fn dim(&self) -> usize {
        1
    }

    fn support(&self) -> Support {
        Support::Box { lower: vec![self.a], upper: vec![self.b] }
    }

    fn score(&self, x: &[f64]) -> Result<Vec<f64>, TargetError> {
        check_dim(1, x)?;
        if !self.support().is_interior(x) {
            return Err(TargetError::OutsideSupport);
        }
        Ok(vec![-(x[0] - self.mu) / (self.sigma * self.sigma)])
    }

    fn log_density_unnorm(&self, x: &[f64]) -> Result<f64, TargetError> {
        check_dim(1, x)?;
        if !self.support().contains(x) {
            return Err(TargetError::OutsideSupport);
        }
        let z = (x[0] - self.mu) / self.sigma;
        Ok(-0.5 * z * z - LN_SQRT_2PI - self.sigma.ln() - self.normalizer().ln())
    }

    fn is_normalized(&self) -> bool {
        true
    }

    fn has_sampler(&self) -> bool {
        true
    }

    fn sample_into(&self, rng: &mut RandomStream, out: &mut [f64]) -> Result<(), TargetError> {
        out[0] = self.draw(rng);
        Ok(())
    }

    fn name(&self) -> String {
        format!("truncated_gaussian(mu={},sigma={},a={},b={})", self.mu, self.sigma, self.a, self.b)
    }
}

/// Finite Gaussian mixture on ℝ, optionally truncated to [a, b].
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture1D {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    pub truncation: Option<(f64, f64)>,
}

impl GaussianMixture1D {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, variances: Vec<f64>, truncation: Option<(f64, f64)>) -> Result<Self, TargetError> {
        let k = weights.len();
        if k == 0 || means.len() != k || variances.len() != k {
            return Err(TargetError::InvalidParameters("mixture component arrays must be non-empty and equal length".into()));
        }
        if weights.iter().any(|w| !(*w > 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-10 {
            return Err(TargetError::InvalidParameters("mixture weights must be positive and sum to one".into()));
        }
        if variances.iter().any(|v| !(*v > 0.0)) {
            return Err(TargetError::InvalidParameters("mixture variances must be positive".into()));
        }
        if let Some((a, b)) = truncation {
            if !(a < b) {
                return Err(TargetError::InvalidParameters("truncation requires a < b".into()));
            }
        }
        Ok(Self { weights, means, variances, truncation })
    }

    fn bounds(&self) -> (f64, f64) {
        self.truncation.unwrap_or((f64::NEG_INFINITY, f64::INFINITY))
    }

    /// Per-component truncated masses w_k·Z_k.
    fn component_masses(&self) -> Vec<f64> {
        let (a, b) = self.bounds();
        self.weights
            .iter()
            .zip(self.means.iter().zip(&self.variances))
            .map(|(w, (m, v))| w * normalizer(a, b, *m, v.sqrt()))
            .collect()
    }

    /// Component log terms log(w_k φ_k(x)), and log of total mass on the support.
    fn log_terms(&self, x: f64) -> Vec<f64> {
        self.weights
            .iter()
            .zip(self.means.iter().zip(&self.variances))
            .map(|(w, (m, v))| w.ln() - 0.5 * (x - m) * (x - m) / v - 0.5 * v.ln() - LN_SQRT_2PI)
            .collect()
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl ScoreTarget for GaussianMixture1D {
    fn dim(&self) -> usize {
        1
    }

    fn support(&self) -> Support {
        match self.truncation {
            Some((a, b)) => Support::Box { lower: vec![a], upper: vec![b] },
            None => Support::AllSpace,
        }
    }

    fn score(&self, x: &[f64]) -> Result<Vec<f64>, TargetError> {
        check_dim(1, x)?;
        if !self.support().is_interior(x) {
            return Err(TargetError::OutsideSupport);
        }
        let lt = self.log_terms(x[0]);
        let lse = log_sum_exp(&lt);
        let s = lt
            .iter()
            .zip(self.means.iter().zip(&self.variances))
            .map(|(l, (m, v))| (l - lse).exp() * (-(x[0] - m) / v))
            .sum();
        Ok(vec![s])
    }

    fn log_density_unnorm(&self, x: &[f64]) -> Result<f64, TargetError> {
        check_dim(1, x)?;
        if !self.support().contains(x) {
            return Err(TargetError::OutsideSupport);
        }
        let mass: f64 = self.component_masses().iter().sum();
        Ok(log_sum_exp(&self.log_terms(x[0])) - mass.ln())
    }

    fn is_normalized(&self) -> bool {
        true
    }

    fn has_sampler(&self) -> bool {
        true
    }

    fn sample_into(&self, rng: &mut RandomStream, out: &mut [f64]) -> Result<(), TargetError> {
        let masses = self.component_masses();
        let total: f64 = masses.iter().sum();
        let u: f64 = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut k = masses.len() - 1;
        for (i, m) in masses.iter().enumerate() {
            acc += m;
            if u < acc {
                k = i;
                break;
            }
        }
        let (a, b) = self.bounds();
        let comp = TruncatedGaussian1D { mu: self.means[k], sigma: self.variances[k].sqrt(), a, b };
        out[0] = comp.draw(rng);
        Ok(())
    }

    fn name(&self) -> String {
        format!("gaussian_mixture(k={})", self.weights.len())
    }
}

/// Independent one-dimensional factors stacked into a d-dimensional target.
#[derive(Clone)]
pub struct ProductTarget {
    factors: Vec<Arc<dyn ScoreTarget>>,
}

impl ProductTarget {
    pub fn new(factors: Vec<Arc<dyn ScoreTarget>>) -> Result<Self, TargetError> {
        if factors.is_empty() || factors.iter().any(|f| f.dim() != 1) {
            return Err(TargetError::InvalidParameters("product factors must be one-dimensional".into()));
        }
        Ok(Self { factors })
    }

    pub fn factors(&self) -> &[Arc<dyn ScoreTarget>] {
        &self.factors
    }
}

impl ScoreTarget for ProductTarget {
    fn dim(&self) -> usize {
        self.factors.len()
    }

    fn support(&self) -> Support {
        let mut lower = Vec::new();
        let mut upper = Vec::new();
        let mut bounded = false;
        for f in &self.factors {
            match f.support() {
                Support::AllSpace => {
                    lower.push(f64::NEG_INFINITY);
                    upper.push(f64::INFINITY);
                }
                Support::Box { lower: l, upper: u } => {
                    bounded = true;
                    lower.push(l[0]);
                    upper.push(u[0]);
                }
            }
        }
        if bounded {
            Support::Box { lower, upper }
        } else {
            Support::AllSpace
        }
    }

    fn score(&self, x: &[f64]) -> Result<Vec<f64>, TargetError> {
        check_dim(self.dim(), x)?;
        let mut out = Vec::with_capacity(x.len());
        for (f, xi) in self.factors.iter().zip(x) {
            out.extend(f.score(std::slice::from_ref(xi))?);
        }
        Ok(out)
    }

    fn log_density_unnorm(&self, x: &[f64]) -> Result<f64, TargetError> {
        check_dim(self.dim(), x)?;
        let mut s = 0.0;
        for (f, xi) in self.factors.iter().zip(x) {
            s += f.log_density_unnorm(std::slice::from_ref(xi))?;
        }
        Ok(s)
    }

    fn is_normalized(&self) -> bool {
        self.factors.iter().all(|f| f.is_normalized())
    }

    fn has_sampler(&self) -> bool {
        self.factors.iter().all(|f| f.has_sampler())
    }

    fn sample_into(&self, rng: &mut RandomStream, out: &mut [f64]) -> Result<(), TargetError> {
        for (f, o) in self.factors.iter().zip(out.iter_mut()) {
            f.sample_into(rng, std::slice::from_mut(o))?;
        }
        Ok(())
    }

    fn name(&self) -> String {
        format!("product(d={})", self.dim())
    }
}

/// Per-input distributions of the wind-farm thrust model: one Gaussian, five left-truncated
/// Gaussians and a truncated three-component mixture for wind direction.
pub fn wind_farm_inputs() -> ProductTarget {
    let f: Vec<Arc<dyn ScoreTarget>> = vec![
        Arc::new(GaussianTarget::new(vec![1.33], vec![0.1]).expect("valid")),
        Arc::new(TruncatedGaussian1D::new(0.38, 0.001f64.sqrt(), 0.0, f64::INFINITY).expect("valid")),
        Arc::new(TruncatedGaussian1D::new(4e-3, 1e-4, 0.0, f64::INFINITY).expect("valid")),
        Arc::new(TruncatedGaussian1D::new(0.1, 0.003f64.sqrt(), 0.0, f64::INFINITY).expect("valid")),
        Arc::new(
            GaussianMixture1D::new(
                vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
                vec![0.0, 22.5, 33.75],
                vec![50.0, 40.0, 8.0],
                Some((0.0, 45.0)),
            )
            .expect("valid"),
        ),
        Arc::new(TruncatedGaussian1D::new(100.0, 0.5f64.sqrt(), 0.0, f64::INFINITY).expect("valid")),
        Arc::new(TruncatedGaussian1D::new(100.0, 0.1f64.sqrt(), 0.0, f64::INFINITY).expect("valid")),
    ];
    ProductTarget::new(f).expect("all factors are one-dimensional")
}

/// Wraps a closure pair as a score-only target (no sampler).
pub struct FnTarget<S, L>
where
    S: Fn(&[f64]) -> Result<Vec<f64>, TargetError> + Send + Sync,
    L: Fn(&[f64]) -> Result<f64, TargetError> + Send + Sync,
{
    pub dim: usize,
    pub score_fn: S,
    pub log_density_fn: Option<L>,
    pub label: String,
}

impl<S, L> ScoreTarget for FnTarget<S, L>
where
    S: Fn(&[f64]) -> Result<Vec<f64>, TargetError> + Send + Sync,
    L: Fn(&[f64]) -> Result<f64, TargetError> + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, x: &[f64]) -> Result<Vec<f64>, TargetError> {
        check_dim(self.dim, x)?;
        (self.score_fn)(x)
    }

    fn log_density_unnorm(&self, x: &[f64]) -> Result<f64, TargetError> {
        check_dim(self.dim, x)?;
        match &self.log_density_fn {
            Some(f) => f(x),
            None => Err(TargetError::NoDensity),
        }
    }

    fn name(&self) -> String {
        self.label.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{integrate_piecewise, seeded_rng, std_normal_pdf};

    fn mixture() -> GaussianMixture1D {
        GaussianMixture1D::new(vec![0.5, 0.5], vec![-1.0, 1.0], vec![1.0, 1.0], None).unwrap()
    }

    #[test]
    fn gaussian_score() {
        let t = GaussianTarget::standard(1);
        assert_eq!(t.score(&[2.0]).unwrap(), vec![-2.0]);
    }

    #[test]
    fn truncated_interior_score_is_untruncated() {
        let t = TruncatedGaussian1D::new(1.0, 2.0, 0.0, f64::INFINITY).unwrap();
        assert_eq!(t.score(&[3.0]).unwrap(), vec![-0.5]);
    }

    #[test]
    fn score_on_boundary_is_error() {
        let t = TruncatedGaussian1D::new(0.0, 1.0, 0.0, f64::INFINITY).unwrap();
        assert_eq!(t.score(&[0.0]), Err(TargetError::OutsideSupport));
        assert_eq!(t.log_density_unnorm(&[-1.0]), Err(TargetError::OutsideSupport));
    }

    #[test]
    fn mixture_symmetric_score_vanishes() {
        let t = mixture();
        let s = t.score(&[0.0]).unwrap()[0];
        let h = 1e-5;
        let fd = (t.log_density_unnorm(&[h]).unwrap() - t.log_density_unnorm(&[-h]).unwrap()) / (2.0 * h);
        assert!(s.abs() < 1e-15);
        assert!(fd.abs() < 1e-10);
    }

    #[test]
    fn log_density_values() {
        let g = GaussianTarget::standard(1);
        assert!((g.log_density_unnorm(&[0.0]).unwrap() + 0.918_938_533_204_672_7).abs() < 1e-12);
        let m = mixture();
        // 0.5 φ(−1) + 0.5 φ(1) = φ(1)
        let direct = std_normal_pdf(1.0).ln();
        assert!((m.log_density_unnorm(&[0.0]).unwrap() - direct).abs() < 1e-14);
        assert!((direct - 0.241_970_724_519_143_37f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mixture_density_integrates_to_one() {
        let m = GaussianMixture1D::new(vec![0.2, 0.3, 0.5], vec![0.0, 22.5, 33.75], vec![50.0, 40.0, 8.0], Some((0.0, 45.0))).unwrap();
        let total = integrate_piecewise(|x| m.log_density_unnorm(&[x]).unwrap().exp(), 0.0, 45.0, &[], 64, 20);
        assert!((total - 1.0).abs() < 1e-10);
        let free = mixture();
        let total = integrate_piecewise(|x| free.log_density_unnorm(&[x]).unwrap().exp(), -15.0, 15.0, &[], 64, 20);
        assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn finite_difference_scores() {
        let targets: Vec<Box<dyn ScoreTarget>> = vec![
            Box::new(GaussianTarget::new(vec![0.3, -1.0], vec![2.0, 0.5]).unwrap()),
            Box::new(TruncatedGaussian1D::new(0.5, 1.5, -1.0, 3.0).unwrap()),
            Box::new(mixture()),
            Box::new(wind_farm_inputs()),
        ];
        let mut rng = seeded_rng(5);
        for t in &targets {
            let d = t.dim();
            let mut checked = 0;
            while checked < 100 {
                let mut x = vec![0.0; d];
                t.sample_into(&mut rng, &mut x).unwrap();
                if !t.support().is_interior(&x) {
                    continue;
                }
                let s = t.score(&x).unwrap();
                for j in 0..d {
                    let h = 1e-5 * x[j].abs().max(1e-2);
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[j] += h;
                    xm[j] -= h;
                    if !t.support().is_interior(&xp) || !t.support().is_interior(&xm) {
                        continue;
                    }
                    let fd = (t.log_density_unnorm(&xp).unwrap() - t.log_density_unnorm(&xm).unwrap()) / (2.0 * h);
                    let scale = s[j].abs().max(1.0);
                    assert!((fd - s[j]).abs() <= 1e-6 * scale, "{}: fd={fd} s={}", t.name(), s[j]);
                }
                checked += 1;
            }
        }
    }

    #[test]
    fn product_score_is_concatenation() {
        let p = wind_farm_inputs();
        let mut rng = seeded_rng(9);
        let mut x = vec![0.0; p.dim()];
        p.sample_into(&mut rng, &mut x).unwrap();
        let joint = p.score(&x).unwrap();
        let parts: Vec<f64> = p.factors().iter().zip(&x).flat_map(|(f, xi)| f.score(&[*xi]).unwrap()).collect();
        assert_eq!(joint, parts);
    }

    #[test]
    fn sample_means() {
        let mut rng = seeded_rng(1);
        let n = 1_000_000;
        let g = sample(&GaussianTarget::standard(1), n, &mut rng).unwrap();
        let m = g.as_slice().iter().sum::<f64>() / n as f64;
        assert!(m.abs() <= 0.004);
        let tg = TruncatedGaussian1D::new(0.0, 1.0, 0.0, f64::INFINITY).unwrap();
        let s = sample(&tg, n, &mut rng).unwrap();
        let m = s.as_slice().iter().sum::<f64>() / n as f64;
        // half-normal mean by quadrature of x φ(x) on [0, 40]
        let oracle = 2.0 * integrate_piecewise(|x| x * std_normal_pdf(x), 0.0, 40.0, &[], 64, 20);
        assert!((oracle - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-12);
        assert!((m - oracle).abs() <= 0.004);
    }

    #[test]
    fn empty_sample_and_no_sampler() {
        let mut rng = seeded_rng(0);
        assert_eq!(sample(&GaussianTarget::standard(3), 0, &mut rng).unwrap().rows(), 0);
        let score_only = FnTarget {
            dim: 2,
            score_fn: |x: &[f64]| Ok(x.iter().map(|v| -v).collect()),
            log_density_fn: None::<fn(&[f64]) -> Result<f64, TargetError>>,
            label: "score-only".into(),
        };
        assert_eq!(sample(&score_only, 3, &mut rng).unwrap_err(), TargetError::NoSampler);
    }

    #[test]
    fn deep_truncation_sampling_stays_in_support() {
        let t = TruncatedGaussian1D::new(0.0, 1.0, 8.0, f64::INFINITY).unwrap();
        let mut rng = seeded_rng(2);
        let s = sample(&t, 10_000, &mut rng).unwrap();
        assert!(s.as_slice().iter().all(|&x| x >= 8.0 && x.is_finite()));
        let m = s.as_slice().iter().sum::<f64>() / 10_000.0;
        // mean of N(0,1) truncated to [8, ∞) is φ(8)/Q(8) ≈ 8.1211
        let exact = std_normal_pdf(8.0) / std_normal_sf(8.0);
        assert!((m - exact).abs() < 0.01);
    }

    #[test]
    fn score_mean_vanishes_under_sampling() {
        let mut rng = seeded_rng(77);
        let n = 100_000;
        let targets: Vec<Box<dyn ScoreTarget>> = vec![Box::new(GaussianTarget::new(vec![1.0, 2.0], vec![0.5, 3.0]).unwrap()), Box::new(mixture())];
        for t in &targets {
            let pts = sample(t.as_ref(), n, &mut rng).unwrap();
            let sc = scores_of(t.as_ref(), &pts).unwrap();
            for j in 0..t.dim() {
                let col: Vec<f64> = (0..n).map(|i| sc[(i, j)]).collect();
                let m = crate::numerics::mean(&col);
                let sd = crate::numerics::std_dev(&col);
                assert!(m.abs() <= 5.0 * sd / (n as f64).sqrt(), "{} coord {j}: {m}", t.name());
            }
        }
    }
}
