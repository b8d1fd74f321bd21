//! Stein networks: g(x) = θ0 + ∇·(m u)(x) + (m(x)ᵀ∇log π(x))ᵀ u(x), with u an MLP.
//!
//! The network is evaluated in batches. Each point carries d+1 channels through the MLP:
//! the primal activation and one tangent per input coordinate, which gives u(x) and its
//! input Jacobian in a single pass of matrix products. Parameter gradients come from one
//! reverse sweep over the same buffers.

mod activation;
mod io;

pub use activation::Activation;
pub use io::{read_weights, weights_from_bytes, weights_to_bytes, write_weights};


use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{gemm, pairwise_sum, DenseMatrix, RandomStream};
use crate::targets::{ScoreTarget, TargetError};

/// Number of points evaluated together; the reduction order over chunks is fixed.
pub const CHUNK_SIZE: usize = 256;

#[derive(Debug, Error)]
pub enum SteinError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("loss is not finite (scores may be exploding; a scaled m may help)")]
    NonFiniteLoss,
    #[error("density-scaled m needs normalized log-density values for every point")]
    DensityRequired,
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("dataset is empty")]
    EmptyData,
    #[error("weight file version mismatch (found {found:?})")]
    VersionMismatch { found: [u8; 4] },
    #[error("corrupt weight payload: {0}")]
    CorruptPayload(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Target(#[from] TargetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    pub in_dim: usize,
    /// Zero gives a single affine map `Linear(d, d)`.
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub activation: Activation,
}

impl MlpArchitecture {
    pub fn new(in_dim: usize) -> Self {
        Self { in_dim, hidden_width: 32, hidden_layers: 2, activation: Activation::Celu }
    }

    pub fn affine(in_dim: usize) -> Self {
        Self { in_dim, hidden_width: 0, hidden_layers: 0, activation: Activation::Celu }
    }

    pub fn out_dim(&self) -> usize {
        self.in_dim
    }

    /// (fan_in, fan_out) of each affine layer in evaluation order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let d = self.in_dim;
        let h = self.hidden_width;
        if h == 0 {
            return vec![(d, d)];
        }
        let mut dims = vec![(d, h)];
        dims.extend(std::iter::repeat_n((h, h), self.hidden_layers));
        dims.push((h, d));
        dims
    }

    /// Number of entries of θu (θ0 excluded).
    pub fn n_params(&self) -> usize {
        self.layer_dims().iter().map(|&(i, o)| i * o + o).sum()
    }

    fn validate(&self) -> Result<(), SteinError> {
        if self.in_dim == 0 {
            return Err(SteinError::InvalidArchitecture("input dimension must be positive".into()));
        }
        if self.hidden_width == 0 && self.hidden_layers > 0 {
            return Err(SteinError::InvalidArchitecture("hidden layers need a positive width".into()));
        }
        Ok(())
    }
}

/// How a scale is derived from observed scores for [`MChoice::ScaledIdentity`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleRule {
    /// Standard deviation of all score entries pooled together.
    Std,
    /// Largest absolute score entry.
    Max,
}

/// The matrix-valued function m(x) of the Stein operator. All choices are diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MChoice {
    Identity,
    /// m = I / C.
    ScaledIdentity(f64),
    /// m = I / (‖x‖² + 1).
    InverseSquareNorm,
    /// m = I / √(‖x‖² + 1).
    InverseNorm,
    /// m = π(x) I; needs a normalized density.
    DensityScaled,
    /// m = diag(x).
    DiagX,
    /// m = diag(1/c₁, …, 1/c_d).
    ScaledDiagonal(Vec<f64>),
}

impl MChoice {
    pub fn scaled_identity_from_scores(scores: &DenseMatrix, rule: ScaleRule) -> MChoice {
        let c = score_scale(scores.as_slice(), rule);
        MChoice::ScaledIdentity(if c > 0.0 && c.is_finite() { c } else { 1.0 })
    }

    /// Per-coordinate variant of the score scaling.
    pub fn scaled_diagonal_from_scores(scores: &DenseMatrix, rule: ScaleRule) -> MChoice {
        let d = scores.cols();
        let c = (0..d)
            .map(|j| {
                let col: Vec<f64> = scores.row_iter().map(|r| r[j]).collect();
                let c = score_scale(&col, rule);
                if c > 0.0 && c.is_finite() { c } else { 1.0 }
            })
            .collect();
        MChoice::ScaledDiagonal(c)
    }

    pub fn needs_density(&self) -> bool {
        matches!(self, MChoice::DensityScaled)
    }

    pub fn name(&self) -> &'static str {
        match self {
            MChoice::Identity => "identity",
            MChoice::ScaledIdentity(_) => "scaled_identity",
            MChoice::InverseSquareNorm => "inverse_square_norm",
            MChoice::InverseNorm => "inverse_norm",
            MChoice::DensityScaled => "density_scaled",
            MChoice::DiagX => "diag_x",
            MChoice::ScaledDiagonal(_) => "scaled_diagonal",
        }
    }

    /// Diagonal of m(x) and ∂m_ii/∂x_i into `m` and `dm`.
    fn eval(&self, x: &[f64], score: &[f64], log_density: Option<f64>, m: &mut [f64], dm: &mut [f64]) {
        let d = x.len();
        match self {
            MChoice::Identity => {
                m.fill(1.0);
                dm.fill(0.0);
            }
            MChoice::ScaledIdentity(c) => {
                m.fill(1.0 / c);
                dm.fill(0.0);
            }
            MChoice::ScaledDiagonal(c) => {
                for i in 0..d {
                    m[i] = 1.0 / c[i];
                }
                dm.fill(0.0);
            }
            MChoice::InverseSquareNorm => {
                let phi = 1.0 / (x.iter().map(|v| v * v).sum::<f64>() + 1.0);
                m.fill(phi);
                for i in 0..d {
                    dm[i] = -2.0 * x[i] * phi * phi;
                }
            }
            MChoice::InverseNorm => {
                let phi = 1.0 / (x.iter().map(|v| v * v).sum::<f64>() + 1.0).sqrt();
                m.fill(phi);
                for i in 0..d {
                    dm[i] = -x[i] * phi * phi * phi;
                }
            }
            MChoice::DensityScaled => {
                let p = log_density.expect("density checked before evaluation").exp();
                m.fill(p);
                for i in 0..d {
                    dm[i] = p * score[i];
                }
            }
            MChoice::DiagX => {
                m.copy_from_slice(x);
                dm.fill(1.0);
            }
        }
    }
}

fn score_scale(values: &[f64], rule: ScaleRule) -> f64 {
    match rule {
        ScaleRule::Std => crate::numerics::std_dev(values),
        ScaleRule::Max => values.iter().fold(0.0f64, |a, v| a.max(v.abs())),
    }
}

/// Axis-aligned domain on which u is multiplied by δ(x) = ∏(x_k − a_k)(b_k − x_k).
/// Infinite bounds drop the corresponding factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Boundary {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Boundary {
    /// δ(x) and ∂δ/∂x_i.
    fn eval(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let d = x.len();
        let mut f = vec![0.0; d];
        let mut df = vec![0.0; d];
        for k in 0..d {
            let (a, b) = (self.lower[k], self.upper[k]);
            let (v, dv) = match (a.is_finite(), b.is_finite()) {
                (true, true) => ((x[k] - a) * (b - x[k]), a + b - 2.0 * x[k]),
                (true, false) => (x[k] - a, 1.0),
                (false, true) => (b - x[k], -1.0),
                (false, false) => (1.0, 0.0),
            };
            f[k] = v;
            df[k] = dv;
        }
        // prefix/suffix products so the gradient stays exact where a factor vanishes
        let mut prefix = vec![1.0; d + 1];
        for k in 0..d {
            prefix[k + 1] = prefix[k] * f[k];
        }
        let mut suffix = 1.0;
        for k in (0..d).rev() {
            grad[k] = prefix[k] * suffix * df[k];
            suffix *= f[k];
        }
        prefix[d]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteinNetwork {
    pub arch: MlpArchitecture,
    /// Affine layers in evaluation order, each as W (row-major, out × in) followed by b.
    pub theta_u: Vec<f64>,
    pub theta_0: f64,
    pub m_choice: MChoice,
    pub boundary: Option<Boundary>,
}

/// Evaluation of g at one point with its parts. `u` and `j_u` are the raw MLP output;
/// with a boundary the two terms are built from δ·u.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub value: f64,
    pub u: Vec<f64>,
    /// j_u[(i, j)] = ∂u_i/∂x_j.
    pub j_u: DenseMatrix,
    pub div_term: f64,
    pub score_term: f64,
}

/// Training points with integrand values, scores and (optionally) normalized log densities.
#[derive(Debug, Clone)]
pub struct SteinData {
    pub points: DenseMatrix,
    pub f: Vec<f64>,
    pub scores: DenseMatrix,
    pub log_density: Option<Vec<f64>>,
}

impl SteinData {
    pub fn new(points: DenseMatrix, f: Vec<f64>, scores: DenseMatrix) -> Result<Self, SteinError> {
        if f.len() != points.rows() {
            return Err(SteinError::DimensionMismatch { expected: points.rows(), got: f.len() });
        }
        if scores.rows() != points.rows() || scores.cols() != points.cols() {
            return Err(SteinError::DimensionMismatch { expected: points.rows() * points.cols(), got: scores.rows() * scores.cols() });
        }
        Ok(Self { points, f, scores, log_density: None })
    }

    /// Computes scores from the target, and normalized log densities when available.
    pub fn from_target(target: &dyn ScoreTarget, points: DenseMatrix, f: Vec<f64>) -> Result<Self, SteinError> {
        let scores = crate::targets::scores_of(target, &points)?;
        let mut data = Self::new(points, f, scores)?;
        if target.is_normalized() {
            data.log_density =
                Some(data.points.row_iter().map(|x| target.log_density_unnorm(x)).collect::<Result<Vec<_>, _>>()?);
        }
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.f.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    /// Rows selected by `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> SteinData {
        let d = self.dim();
        let pick = |m: &DenseMatrix| {
            let mut out = Vec::with_capacity(idx.len() * d);
            for &i in idx {
                out.extend_from_slice(m.row(i));
            }
            DenseMatrix::from_row_major(idx.len(), d, out)
        };
        SteinData {
            points: pick(&self.points),
            f: idx.iter().map(|&i| self.f[i]).collect(),
            scores: pick(&self.scores),
            log_density: self.log_density.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }

    /// First `n` rows.
    pub fn head(&self, n: usize) -> SteinData {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

/// Regularization and parallelism settings for the training loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    /// Include θ0 in the weight-decay term.
    pub penalize_theta0: bool,
    pub workers: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 1e-6, penalize_theta0: false, workers: 1 }
    }
}

/// Random MLP weights with θ0 = 0, identity m and no boundary.
pub fn init_network(arch: MlpArchitecture, rng: &mut RandomStream) -> SteinNetwork {
    SteinNetwork::init(arch, rng).expect("invalid architecture")
}

impl SteinNetwork {
    /// Weights uniform in ±1/√fan_in, biases zero.
    pub fn init(arch: MlpArchitecture, rng: &mut RandomStream) -> Result<Self, SteinError> {
        arch.validate()?;
        let mut theta_u = Vec::with_capacity(arch.n_params());
        for (fan_in, fan_out) in arch.layer_dims() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                theta_u.push(rng.random_range(-bound..bound));
            }
            theta_u.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self { arch, theta_u, theta_0: 0.0, m_choice: MChoice::Identity, boundary: None })
    }

    pub fn from_params(arch: MlpArchitecture, theta_u: Vec<f64>, theta_0: f64) -> Result<Self, SteinError> {
        arch.validate()?;
        if theta_u.len() != arch.n_params() {
            return Err(SteinError::DimensionMismatch { expected: arch.n_params(), got: theta_u.len() });
        }
        Ok(Self { arch, theta_u, theta_0, m_choice: MChoice::Identity, boundary: None })
    }

    pub fn with_m(mut self, m: MChoice) -> Self {
        self.m_choice = m;
        self
    }

    pub fn with_boundary(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), self.arch.in_dim);
        assert_eq!(upper.len(), self.arch.in_dim);
        self.boundary = Some(Boundary { lower, upper });
        self
    }

    /// Sets θ0 to the mean of the observed integrand values.
    pub fn with_theta0_from(mut self, f: &[f64]) -> Self {
        if !f.is_empty() {
            self.theta_0 = crate::numerics::mean(f);
        }
        self
    }

    pub fn dim(&self) -> usize {
        self.arch.in_dim
    }

    /// Length of the full parameter vector [θ0, θu].
    pub fn n_params_total(&self) -> usize {
        self.theta_u.len() + 1
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params_total());
        p.push(self.theta_0);
        p.extend_from_slice(&self.theta_u);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.n_params_total(), "parameter vector length");
        self.theta_0 = p[0];
        self.theta_u.copy_from_slice(&p[1..]);
    }

    /// u(x) and ∂u_i/∂x_j.
    pub fn forward_with_input_jacobian(&self, x: &[f64]) -> (Vec<f64>, DenseMatrix) {
        let d = self.dim();
        assert_eq!(x.len(), d);
        let tape = self.forward_chunk(x, 1);
        let out = tape.output();
        let u = out[..d].to_vec();
        let mut j = DenseMatrix::zeros(d, d);
        for jj in 0..d {
            for i in 0..d {
                j[(i, jj)] = out[(1 + jj) * d + i];
            }
        }
        (u, j)
    }

    /// g(x) with its decomposition. Fails only for a density-scaled m, which needs
    /// [`SteinNetwork::stein_forward_with_density`].
    pub fn stein_forward(&self, x: &[f64], score: &[f64]) -> Result<EvalRecord, SteinError> {
        if self.m_choice.needs_density() {
            return Err(SteinError::DensityRequired);
        }
        Ok(self.stein_forward_inner(x, score, None))
    }

    pub fn stein_forward_with_density(&self, x: &[f64], score: &[f64], log_density: f64) -> EvalRecord {
        self.stein_forward_inner(x, score, Some(log_density))
    }

    fn stein_forward_inner(&self, x: &[f64], score: &[f64], log_density: Option<f64>) -> EvalRecord {
        let d = self.dim();
        let (u, j_u) = self.forward_with_input_jacobian(x);
        let mut coef = SteinCoefficients::new(d);
        coef.fill(self, x, score, log_density);
        let mut score_term = 0.0;
        let mut div_term = 0.0;
        for i in 0..d {
            score_term += coef.m[i] * score[i] * coef.delta * u[i];
            div_term += (coef.dm[i] * coef.delta + coef.m[i] * coef.ddelta[i]) * u[i] + coef.beta[i] * j_u[(i, i)];
        }
        EvalRecord { value: score_term + div_term + self.theta_0, u, j_u, div_term, score_term }
    }

    /// g at every data point.
    pub fn eval_batch(&self, data: &SteinData, workers: usize) -> Result<Vec<f64>, SteinError> {
        self.check_data(data)?;
        let n_chunks = data.len().div_ceil(CHUNK_SIZE);
        let parts = run_chunks(n_chunks, workers, |c| {
            let (lo, hi) = chunk_range(c, data.len());
            let tape = self.forward_chunk(&data.points.as_slice()[lo * self.dim()..hi * self.dim()], hi - lo);
            let coefs = self.chunk_coefficients(data, lo, hi);
            (0..hi - lo).map(|b| self.theta_0 + tape.g_value(b, &coefs[b])).collect::<Vec<f64>>()
        });
        Ok(parts.into_iter().flatten().collect())
    }

    fn check_data(&self, data: &SteinData) -> Result<(), SteinError> {
        if data.dim() != self.dim() {
            return Err(SteinError::DimensionMismatch { expected: self.dim(), got: data.dim() });
        }
        if self.m_choice.needs_density() && data.log_density.is_none() {
            return Err(SteinError::DensityRequired);
        }
        Ok(())
    }

    fn chunk_coefficients(&self, data: &SteinData, lo: usize, hi: usize) -> Vec<SteinCoefficients> {
        (lo..hi)
            .map(|i| {
                let mut c = SteinCoefficients::new(self.dim());
                c.fill(self, data.points.row(i), data.scores.row(i), data.log_density.as_ref().map(|l| l[i]));
                c
            })
            .collect()
    }

    /// Forward pass over `b` points stored row-major in `x`.
    fn forward_chunk(&self, x: &[f64], b: usize) -> Tape {
        let d = self.dim();
        let ch = d + 1;
        let rows = b * ch;
        let mut a0 = vec![0.0; rows * d];
        for p in 0..b {
            a0[p * ch * d..p * ch * d + d].copy_from_slice(&x[p * d..(p + 1) * d]);
            for j in 0..d {
                a0[(p * ch + 1 + j) * d + j] = 1.0;
            }
        }
        let dims = self.arch.layer_dims();
        let n_layers = dims.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers - 1);
        inputs.push(a0);
        let mut offset = 0;
        let mut output = Vec::new();
        for (k, &(fi, fo)) in dims.iter().enumerate() {
            let w = &self.theta_u[offset..offset + fi * fo];
            let bias = &self.theta_u[offset + fi * fo..offset + fi * fo + fo];
            offset += fi * fo + fo;
            let mut z = vec![0.0; rows * fo];
            // Z = A Wᵀ
            gemm(rows, fi, fo, 1.0, &inputs[k], (fi as isize, 1), w, (1, fi as isize), 0.0, &mut z, (fo as isize, 1));
            for p in 0..b {
                let zr = &mut z[p * ch * fo..p * ch * fo + fo];
                for (zv, bv) in zr.iter_mut().zip(bias) {
                    *zv += bv;
                }
            }
            if k + 1 == n_layers {
                output = z;
            } else {
                let mut a = vec![0.0; rows * fo];
                let act = self.arch.activation;
                for p in 0..b {
                    let base = p * ch * fo;
                    for unit in 0..fo {
                        let (s, s1, _) = act.eval(z[base + unit]);
                        a[base + unit] = s;
                        for j in 1..ch {
                            a[base + j * fo + unit] = s1 * z[base + j * fo + unit];
                        }
                    }
                }
                inputs.push(a);
                pre.push(z);
            }
        }
        Tape { d, dims, inputs, pre, output, activation: self.arch.activation }
    }

    /// Backpropagates output adjoints for points `p0..p1` of the tape, accumulating into
    /// `grad_u` (length of θu).
    fn reverse(&self, tape: &Tape, p0: usize, p1: usize, out_adj: Vec<f64>, grad_u: &mut [f64]) {
        let ch = tape.d + 1;
        let rows = (p1 - p0) * ch;
        let r0 = p0 * ch;
        let n_layers = tape.dims.len();
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for &(fi, fo) in &tape.dims {
            offsets.push(off);
            off += fi * fo + fo;
        }
        let mut zbar = out_adj;
        for k in (0..n_layers).rev() {
            let (fi, fo) = tape.dims[k];
            let off = offsets[k];
            let a = &tape.inputs[k][r0 * fi..(r0 + rows) * fi];
            // W̄ += Z̄ᵀ A
            gemm(fo, rows, fi, 1.0, &zbar, (1, fo as isize), a, (fi as isize, 1), 1.0, &mut grad_u[off..off + fi * fo], (fi as isize, 1));
            let gb = &mut grad_u[off + fi * fo..off + fi * fo + fo];
            for p in 0..p1 - p0 {
                for (g, z) in gb.iter_mut().zip(&zbar[p * ch * fo..p * ch * fo + fo]) {
                    *g += z;
                }
            }
            if k == 0 {
                break;
            }
            let w = &self.theta_u[off..off + fi * fo];
            let mut abar = vec![0.0; rows * fi];
            gemm(rows, fo, fi, 1.0, &zbar, (fo as isize, 1), w, (fi as isize, 1), 0.0, &mut abar, (fi as isize, 1));
            // through the activation of layer k-1, whose pre-activations have width fi
            let z = &tape.pre[k - 1][r0 * fi..(r0 + rows) * fi];
            let mut zb = vec![0.0; rows * fi];
            for p in 0..p1 - p0 {
                let base = p * ch * fi;
                for unit in 0..fi {
                    let (_, s1, s2) = tape.activation.eval(z[base + unit]);
                    let mut cross = 0.0;
                    for j in 1..ch {
                        let idx = base + j * fi + unit;
                        cross += abar[idx] * z[idx];
                        zb[idx] = s1 * abar[idx];
                    }
                    zb[base + unit] = s1 * abar[base + unit] + s2 * cross;
                }
            }
            zbar = zb;
        }
    }

    /// Output adjoint of g for point `p` of a tape, scaled by `w`.
    fn write_output_adjoint(&self, coef: &SteinCoefficients, w: f64, out: &mut [f64]) {
        let d = self.dim();
        for i in 0..d {
            out[i] = w * coef.alpha[i];
            out[(1 + i) * d + i] = w * coef.beta[i];
        }
    }

    /// ∇θ g(x) as [∂g/∂θ0 = 1, ∂g/∂θu…].
    pub fn g_jacobian_wrt_theta(&self, x: &[f64], score: &[f64]) -> Result<Vec<f64>, SteinError> {
        if self.m_choice.needs_density() {
            return Err(SteinError::DensityRequired);
        }
        Ok(self.g_jacobian_inner(x, score, None))
    }

    pub fn g_jacobian_wrt_theta_with_density(&self, x: &[f64], score: &[f64], log_density: f64) -> Vec<f64> {
        self.g_jacobian_inner(x, score, Some(log_density))
    }

    fn g_jacobian_inner(&self, x: &[f64], score: &[f64], log_density: Option<f64>) -> Vec<f64> {
        let d = self.dim();
        let tape = self.forward_chunk(x, 1);
        let mut coef = SteinCoefficients::new(d);
        coef.fill(self, x, score, log_density);
        let mut adj = vec![0.0; (d + 1) * d];
        self.write_output_adjoint(&coef, 1.0, &mut adj);
        let mut out = vec![0.0; self.n_params_total()];
        out[0] = 1.0;
        self.reverse(&tape, 0, 1, adj, &mut out[1..]);
        out
    }

    /// Matrix with row i = ∇θ g(x_i).
    pub fn theta_jacobian(&self, data: &SteinData, workers: usize) -> Result<DenseMatrix, SteinError> {
        self.check_data(data)?;
        let n = data.len();
        let p = self.n_params_total();
        let d = self.dim();
        let mut jac = DenseMatrix::zeros(n, p);
        let slices: Vec<(usize, &mut [f64])> = jac.as_mut_slice().chunks_mut(CHUNK_SIZE * p).enumerate().collect();
        run_on_slices(slices, workers, |c, out| {
            let (lo, hi) = chunk_range(c, n);
            let tape = self.forward_chunk(&data.points.as_slice()[lo * d..hi * d], hi - lo);
            let coefs = self.chunk_coefficients(data, lo, hi);
            for b in 0..hi - lo {
                let row = &mut out[b * p..(b + 1) * p];
                row[0] = 1.0;
                let mut adj = vec![0.0; (d + 1) * d];
                self.write_output_adjoint(&coefs[b], 1.0, &mut adj);
                self.reverse(&tape, b, b + 1, adj, &mut row[1..]);
            }
        });
        Ok(jac)
    }

    /// Training loss (1/n)Σ(f_i − g(x_i))² + λ‖θu‖² (θ0 optionally penalized) and its gradient
    /// with respect to [θ0, θu].
    pub fn loss_and_gradient_with(&self, data: &SteinData, cfg: &LossConfig) -> Result<(f64, Vec<f64>), SteinError> {
        self.check_data(data)?;
        if data.is_empty() {
            return Err(SteinError::EmptyData);
        }
        let n = data.len();
        let d = self.dim();
        let p = self.n_params_total();
        let inv_n = 1.0 / n as f64;
        let n_chunks = n.div_ceil(CHUNK_SIZE);
        let parts = run_chunks(n_chunks, cfg.workers, |c| {
            let (lo, hi) = chunk_range(c, n);
            let b = hi - lo;
            let tape = self.forward_chunk(&data.points.as_slice()[lo * d..hi * d], b);
            let coefs = self.chunk_coefficients(data, lo, hi);
            let mut sq = Vec::with_capacity(b);
            let mut adj = vec![0.0; b * (d + 1) * d];
            let mut g0 = Vec::with_capacity(b);
            for k in 0..b {
                let r = data.f[lo + k] - self.theta_0 - tape.g_value(k, &coefs[k]);
                sq.push(r * r);
                let w = -2.0 * r * inv_n;
                g0.push(w);
                self.write_output_adjoint(&coefs[k], w, &mut adj[k * (d + 1) * d..(k + 1) * (d + 1) * d]);
            }
            let mut grad = vec![0.0; p];
            grad[0] = pairwise_sum(&g0);
            self.reverse(&tape, 0, b, adj, &mut grad[1..]);
            (pairwise_sum(&sq), grad)
        });
        let (sq, mut grad) = tree_reduce(parts);
        let mut loss = sq * inv_n;
        let lambda = cfg.lambda;
        if lambda != 0.0 {
            let mut reg = 0.0;
            for (g, t) in grad[1..].iter_mut().zip(&self.theta_u) {
                reg += t * t;
                *g += 2.0 * lambda * t;
            }
            if cfg.penalize_theta0 {
                reg += self.theta_0 * self.theta_0;
                grad[0] += 2.0 * lambda * self.theta_0;
            }
            loss += lambda * reg;
        }
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(SteinError::NonFiniteLoss);
        }
        Ok((loss, grad))
    }
}

/// Training loss with weight decay λ on θu and a single worker.
pub fn loss_and_gradient(net: &SteinNetwork, data: &SteinData, lambda: f64) -> Result<(f64, Vec<f64>), SteinError> {
    net.loss_and_gradient_with(data, &LossConfig { lambda, ..LossConfig::default() })
}

/// Per-point weights of the Stein layer: g = θ0 + Σ α_i u_i + Σ β_i ∂u_i/∂x_i.
#[derive(Debug, Clone)]
struct SteinCoefficients {
    m: Vec<f64>,
    dm: Vec<f64>,
    delta: f64,
    ddelta: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

impl SteinCoefficients {
    fn new(d: usize) -> Self {
        Self { m: vec![0.0; d], dm: vec![0.0; d], delta: 1.0, ddelta: vec![0.0; d], alpha: vec![0.0; d], beta: vec![0.0; d] }
    }

    fn fill(&mut self, net: &SteinNetwork, x: &[f64], score: &[f64], log_density: Option<f64>) {
        net.m_choice.eval(x, score, log_density, &mut self.m, &mut self.dm);
        match &net.boundary {
            Some(bd) => self.delta = bd.eval(x, &mut self.ddelta),
            None => {
                self.delta = 1.0;
                self.ddelta.fill(0.0);
            }
        }
        for i in 0..x.len() {
            self.alpha[i] = self.m[i] * score[i] * self.delta + self.dm[i] * self.delta + self.m[i] * self.ddelta[i];
            self.beta[i] = self.m[i] * self.delta;
        }
    }
}

struct Tape {
    d: usize,
    dims: Vec<(usize, usize)>,
    /// Input of each affine layer (rows = points × channels).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of every hidden layer.
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
    activation: Activation,
}

impl Tape {
    fn output(&self) -> &[f64] {
        &self.output
    }

    /// g(x_p) − θ0.
    fn g_value(&self, p: usize, coef: &SteinCoefficients) -> f64 {
        let d = self.d;
        let base = p * (d + 1) * d;
        let mut s = 0.0;
        for i in 0..d {
            s += coef.alpha[i] * self.output[base + i] + coef.beta[i] * self.output[base + (1 + i) * d + i];
        }
        s
    }
}

fn chunk_range(c: usize, n: usize) -> (usize, usize) {
    (c * CHUNK_SIZE, ((c + 1) * CHUNK_SIZE).min(n))
}

/// Runs `f` on every chunk index with up to `workers` threads; results are in chunk order.
pub(crate) fn run_chunks<T: Send, F: Fn(usize) -> T + Sync>(n_chunks: usize, workers: usize, f: F) -> Vec<T> {
    let workers = workers.max(1).min(n_chunks.max(1));
    if workers == 1 {
        return (0..n_chunks).map(&f).collect();
    }
    let mut slots: Vec<Option<T>> = (0..n_chunks).map(|_| None).collect();
    std::thread::scope(|s| {
        let f = &f;
        let handles: Vec<_> = (0..workers)
            .map(|t| s.spawn(move || (t..n_chunks).step_by(workers).map(|c| (c, f(c))).collect::<Vec<_>>()))
            .collect();
        for h in handles {
            for (c, v) in h.join().expect("worker panicked") {
                slots[c] = Some(v);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("chunk result")).collect()
}

fn run_on_slices<F: Fn(usize, &mut [f64]) + Sync>(slices: Vec<(usize, &mut [f64])>, workers: usize, f: F) {
    let workers = workers.max(1);
    if workers == 1 {
        for (c, s) in slices {
            f(c, s);
        }
        return;
    }
    let mut buckets: Vec<Vec<(usize, &mut [f64])>> = (0..workers).map(|_| Vec::new()).collect();
    for (i, item) in slices.into_iter().enumerate() {
        buckets[i % workers].push(item);
    }
    std::thread::scope(|s| {
        let f = &f;
        for bucket in buckets {
            s.spawn(move || {
                for (c, sl) in bucket {
                    f(c, sl);
                }
            });
        }
    });
}

/// Pairwise reduction of (scalar, vector) chunk results in chunk order.
fn tree_reduce(mut parts: Vec<(f64, Vec<f64>)>) -> (f64, Vec<f64>) {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some((s1, mut v1)) = it.next() {
            if let Some((s2, v2)) = it.next() {
                for (a, b) in v1.iter_mut().zip(&v2) {
                    *a += b;
                }
                next.push((s1 + s2, v1));
            } else {
                next.push((s1, v1));
            }
        }
        parts = next;
    }
    parts.pop().expect("at least one chunk")
}


#[cfg(test)]
mod tests;
