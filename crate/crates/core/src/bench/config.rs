use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::goodwin::{ChainProtocol, GoodwinParam, OdeSolverConfig};
use crate::integrands::{CoordinateTransform, GenzFamily, GenzSpec};
use crate::samplers::{MalaConfig, Provenance, GRID_BUDGET, MAX_HALTON_DIM};
use crate::steinnet::{Activation, MChoice, MlpArchitecture, ScaleRule};
use crate::targets::{wind_farm_inputs, GaussianMixture1D, GaussianTarget, ScoreTarget, TruncatedGaussian1D};
use crate::baselines::KernelFamily;
use crate::numerics::DenseMatrix;
use crate::training::OptimizerConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot serialize config: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Bsn,
    Bq,
    Mc,
    Mala,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Bsn, Method::Bq, Method::Mc, Method::Mala];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Bsn => "bsn",
            Method::Bq => "bq",
            Method::Mc => "mc",
            Method::Mala => "mala",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| ConfigError::Invalid(format!("unknown method '{s}' (expected bsn, bq, mc or mala)")))
    }
}

/// Distribution used by a custom problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetConfig {
    Gaussian {
        mean: Vec<f64>,
        variance: Vec<f64>,
    },
    TruncatedGaussian {
        mu: f64,
        sigma: f64,
        lower: f64,
        upper: f64,
    },
    Mixture {
        weights: Vec<f64>,
        means: Vec<f64>,
        variances: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lower: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        upper: Option<f64>,
    },
    WindFarm,
}

impl TargetConfig {
    pub fn dim(&self) -> usize {
        match self {
            TargetConfig::Gaussian { mean, .. } => mean.len(),
            TargetConfig::TruncatedGaussian { .. } | TargetConfig::Mixture { .. } => 1,
            TargetConfig::WindFarm => 7,
        }
    }

    pub fn build(&self) -> Result<Arc<dyn ScoreTarget>, ConfigError> {
        let bad = |e: crate::targets::TargetError| ConfigError::Invalid(format!("target: {e}"));
        Ok(match self {
            TargetConfig::Gaussian { mean, variance } => Arc::new(GaussianTarget::new(mean.clone(), variance.clone()).map_err(bad)?),
            TargetConfig::TruncatedGaussian { mu, sigma, lower, upper } => Arc::new(TruncatedGaussian1D::new(*mu, *sigma, *lower, *upper).map_err(bad)?),
            TargetConfig::Mixture { weights, means, variances, lower, upper } => {
                let truncation = match (lower, upper) {
                    (None, None) => None,
                    (l, u) => Some((l.unwrap_or(f64::NEG_INFINITY), u.unwrap_or(f64::INFINITY))),
                };
                Arc::new(GaussianMixture1D::new(weights.clone(), means.clone(), variances.clone(), truncation).map_err(bad)?)
            }
            TargetConfig::WindFarm => Arc::new(wind_farm_inputs()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    /// A Genz integrand composed with the standard normal CDF, integrated against N(0, I).
    Genz { family: GenzFamily, dim: usize },
    /// Posterior mean of one Goodwin parameter.
    Goodwin {
        param: GoodwinParam,
        /// Use all 2400 observations instead of every tenth.
        #[serde(default)]
        full_data: bool,
        #[serde(default)]
        data_seed: u64,
        /// Read observations from a CSV file instead of generating them.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        data_path: Option<PathBuf>,
    },
    /// E[x_j] or E[exp(x_j)] under a configurable target.
    Custom {
        target: TargetConfig,
        #[serde(default)]
        coordinate: usize,
        #[serde(default = "identity_transform")]
        transform: CoordinateTransform,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reference: Option<f64>,
    },
}

fn identity_transform() -> CoordinateTransform {
    CoordinateTransform::Identity
}

impl ProblemConfig {
    pub fn dim(&self) -> usize {
        match self {
            ProblemConfig::Genz { dim, .. } => *dim,
            ProblemConfig::Goodwin { .. } => 4,
            ProblemConfig::Custom { target, .. } => target.dim(),
        }
    }

    /// Label used in the `problem` column.
    pub fn label(&self) -> String {
        match self {
            ProblemConfig::Genz { family, .. } => format!("genz:{family}"),
            ProblemConfig::Goodwin { param, .. } => format!("goodwin:{param}"),
            ProblemConfig::Custom { target, coordinate, transform, .. } => {
                let kind = match target {
                    TargetConfig::Gaussian { .. } => "gaussian",
                    TargetConfig::TruncatedGaussian { .. } => "truncated_gaussian",
                    TargetConfig::Mixture { .. } => "mixture",
                    TargetConfig::WindFarm => "wind_farm",
                };
                let f = match transform {
                    CoordinateTransform::Identity => "x",
                    CoordinateTransform::Exp => "exp",
                };
                format!("custom:{kind}:{f}{coordinate}")
            }
        }
    }

    fn gaussian_target(&self) -> bool {
        matches!(self, ProblemConfig::Genz { .. } | ProblemConfig::Custom { target: TargetConfig::Gaussian { .. }, .. })
    }
}

/// Source of the constant C in m = I/C or of the per-coordinate constants in m = diag(1/c).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScaleSource {
    Rule(ScaleRule),
    Fixed(f64),
}

/// The m(x) choice as written in a config file or on the command line.
///
/// Grammar: `identity`, `inverse_square_norm`, `inverse_norm`, `density_scaled`, `diag_x`,
/// `scaled_identity:<std|max|C>`, `scaled_diagonal:<std|max>`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MSpec {
    Identity,
    ScaledIdentity(ScaleSource),
    ScaledDiagonal(ScaleRule),
    InverseSquareNorm,
    InverseNorm,
    DensityScaled,
    DiagX,
}

fn rule_str(r: ScaleRule) -> &'static str {
    match r {
        ScaleRule::Std => "std",
        ScaleRule::Max => "max",
    }
}

impl fmt::Display for MSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MSpec::Identity => f.write_str("identity"),
            MSpec::ScaledIdentity(ScaleSource::Rule(r)) => write!(f, "scaled_identity:{}", rule_str(*r)),
            MSpec::ScaledIdentity(ScaleSource::Fixed(c)) => write!(f, "scaled_identity:{c:?}"),
            MSpec::ScaledDiagonal(r) => write!(f, "scaled_diagonal:{}", rule_str(*r)),
            MSpec::InverseSquareNorm => f.write_str("inverse_square_norm"),
            MSpec::InverseNorm => f.write_str("inverse_norm"),
            MSpec::DensityScaled => f.write_str("density_scaled"),
            MSpec::DiagX => f.write_str("diag_x"),
        }
    }
}

impl FromStr for MSpec {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let rule = |r: &str| match r {
            "std" => Some(ScaleRule::Std),
            "max" => Some(ScaleRule::Max),
            _ => None,
        };
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (s, None),
        };
        let spec = match (head, arg) {
            ("identity", None) => MSpec::Identity,
            ("inverse_square_norm", None) => MSpec::InverseSquareNorm,
            ("inverse_norm", None) => MSpec::InverseNorm,
            ("density_scaled", None) => MSpec::DensityScaled,
            ("diag_x", None) => MSpec::DiagX,
            ("scaled_identity", Some(a)) => match rule(a) {
                Some(r) => MSpec::ScaledIdentity(ScaleSource::Rule(r)),
                None => match a.parse::<f64>() {
                    Ok(c) if c > 0.0 && c.is_finite() => MSpec::ScaledIdentity(ScaleSource::Fixed(c)),
                    _ => return invalid(format!("scaled_identity needs std, max or a positive constant, got '{a}'")),
                },
            },
            ("scaled_diagonal", Some(a)) => match rule(a) {
                Some(r) => MSpec::ScaledDiagonal(r),
                None => return invalid(format!("scaled_diagonal needs std or max, got '{a}'")),
            },
            _ => return invalid(format!("unknown m choice '{s}'")),
        };
        Ok(spec)
    }
}

impl TryFrom<String> for MSpec {
    type Error = ConfigError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<MSpec> for String {
    fn from(m: MSpec) -> String {
        m.to_string()
    }
}

impl MSpec {
    /// Turns the spec into a concrete m, reading score statistics where needed.
    pub fn resolve(&self, scores: &DenseMatrix) -> MChoice {
        match *self {
            MSpec::Identity => MChoice::Identity,
            MSpec::ScaledIdentity(ScaleSource::Rule(r)) => MChoice::scaled_identity_from_scores(scores, r),
            MSpec::ScaledIdentity(ScaleSource::Fixed(c)) => MChoice::ScaledIdentity(c),
            MSpec::ScaledDiagonal(r) => MChoice::scaled_diagonal_from_scores(scores, r),
            MSpec::InverseSquareNorm => MChoice::InverseSquareNorm,
            MSpec::InverseNorm => MChoice::InverseNorm,
            MSpec::DensityScaled => MChoice::DensityScaled,
            MSpec::DiagX => MChoice::DiagX,
        }
    }
}

/// A number or a keyword, the on-disk form of the noise-scale settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum NumberOrWord {
    Number(f64),
    Word(String),
}

/// Observation noise σ: the RMS training residual, or a fixed value.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "NumberOrWord", into = "NumberOrWord")]
pub enum SigmaSetting {
    #[default]
    Auto,
    Value(f64),
}

/// Prior scale σ0: chosen by evidence over nine values in [1e-2, 1e2], or fixed.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "NumberOrWord", into = "NumberOrWord")]
pub enum Sigma0Setting {
    #[default]
    Grid,
    Value(f64),
}

fn positive(v: f64, what: &str) -> Result<f64, ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        invalid(format!("{what} must be positive, got {v}"))
    }
}

impl TryFrom<NumberOrWord> for SigmaSetting {
    type Error = ConfigError;

    fn try_from(v: NumberOrWord) -> Result<Self, Self::Error> {
        match v {
            NumberOrWord::Word(w) if w == "auto" => Ok(SigmaSetting::Auto),
            NumberOrWord::Word(w) => w.parse::<f64>().map_err(|_| ConfigError::Invalid(format!("sigma must be 'auto' or a number, got '{w}'"))).and_then(|v| Ok(SigmaSetting::Value(positive(v, "sigma")?))),
            NumberOrWord::Number(v) => Ok(SigmaSetting::Value(positive(v, "sigma")?)),
        }
    }
}

impl From<SigmaSetting> for NumberOrWord {
    fn from(s: SigmaSetting) -> Self {
        match s {
            SigmaSetting::Auto => NumberOrWord::Word("auto".into()),
            SigmaSetting::Value(v) => NumberOrWord::Number(v),
        }
    }
}

impl FromStr for SigmaSetting {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        NumberOrWord::Word(s.to_string()).try_into()
    }
}

impl TryFrom<NumberOrWord> for Sigma0Setting {
    type Error = ConfigError;

    fn try_from(v: NumberOrWord) -> Result<Self, Self::Error> {
        match v {
            NumberOrWord::Word(w) if w == "grid" => Ok(Sigma0Setting::Grid),
            NumberOrWord::Word(w) => w.parse::<f64>().map_err(|_| ConfigError::Invalid(format!("sigma0 must be 'grid' or a number, got '{w}'"))).and_then(|v| Ok(Sigma0Setting::Value(positive(v, "sigma0")?))),
            NumberOrWord::Number(v) => Ok(Sigma0Setting::Value(positive(v, "sigma0")?)),
        }
    }
}

impl From<Sigma0Setting> for NumberOrWord {
    fn from(s: Sigma0Setting) -> Self {
        match s {
            Sigma0Setting::Grid => NumberOrWord::Word("grid".into()),
            Sigma0Setting::Value(v) => NumberOrWord::Number(v),
        }
    }
}

impl FromStr for Sigma0Setting {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        NumberOrWord::Word(s.to_string()).try_into()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BsnConfig {
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub activation: Activation,
    pub m: MSpec,
    pub lambda: f64,
    pub penalize_theta0: bool,
    pub optimizer: OptimizerConfig,
    /// Fit the Laplace posterior after training; without it no posterior_std or gamma is reported.
    pub laplace: bool,
    pub sigma: SigmaSetting,
    pub sigma0: Sigma0Setting,
}

impl Default for BsnConfig {
    fn default() -> Self {
        let arch = MlpArchitecture::new(1);
        Self {
            hidden_width: arch.hidden_width,
            hidden_layers: arch.hidden_layers,
            activation: arch.activation,
            m: MSpec::Identity,
            lambda: 1e-6,
            penalize_theta0: false,
            optimizer: OptimizerConfig::default(),
            laplace: true,
            sigma: SigmaSetting::Auto,
            sigma0: Sigma0Setting::Grid,
        }
    }
}

impl BsnConfig {
    pub fn architecture(&self, dim: usize) -> MlpArchitecture {
        MlpArchitecture { in_dim: dim, hidden_width: self.hidden_width, hidden_layers: self.hidden_layers, activation: self.activation }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BqConfig {
    pub kernel: KernelFamily,
    /// Larger designs are skipped and recorded as such.
    pub max_n: usize,
    /// Hyperparameters are fitted on at most this many leading points.
    pub max_fit_points: usize,
}

impl Default for BqConfig {
    fn default() -> Self {
        Self { kernel: KernelFamily::Rbf, max_n: 4096, max_fit_points: 512 }
    }
}

fn default_repetitions() -> usize {
    5
}

fn default_workers() -> usize {
    1
}

/// One experiment: a problem, a method and everything the method needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Defaults to `mala` for the Goodwin problem and the MALA method, `iid` otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampler: Option<Provenance>,
    pub problem: ProblemConfig,
    #[serde(default)]
    pub bsn: BsnConfig,
    #[serde(default)]
    pub bq: BqConfig,
    #[serde(default)]
    pub mala: MalaConfig,
    #[serde(default)]
    pub chains: ChainProtocol,
    #[serde(default)]
    pub ode: OdeSolverConfig,
}

impl ExperimentConfig {
    pub fn new(problem: ProblemConfig, method: Method, n: usize) -> Self {
        Self {
            method,
            n,
            seed: 0,
            repetitions: default_repetitions(),
            workers: default_workers(),
            sampler: None,
            problem,
            bsn: BsnConfig::default(),
            bq: BqConfig::default(),
            mala: MalaConfig::default(),
            chains: ChainProtocol::default(),
            ode: OdeSolverConfig::default(),
        }
    }

    pub fn genz(family: GenzFamily, dim: usize, method: Method, n: usize) -> Self {
        Self::new(ProblemConfig::Genz { family, dim }, method, n)
    }

    /// Goodwin posterior mean on the 240-point dataset with data seed 0. MALA chains use the
    /// small initial step that suits this posterior.
    pub fn goodwin(param: GoodwinParam, method: Method, n: usize) -> Self {
        let mut cfg = Self::new(ProblemConfig::Goodwin { param, full_data: false, data_seed: 0, data_path: None }, method, n);
        cfg.mala.step_size = 0.01;
        cfg
    }

    /// Parses and validates.
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::from_toml_str(&text)
    }

    pub fn sampler(&self) -> Provenance {
        match (self.sampler, self.method, &self.problem) {
            (Some(s), _, _) => s,
            (None, Method::Mala, _) | (None, _, ProblemConfig::Goodwin { .. }) => Provenance::Mala,
            (None, _, _) => Provenance::Iid,
        }
    }

    /// Checks everything that can be checked without touching data.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n == 0 {
            return invalid("n must be at least 1");
        }
        if self.repetitions == 0 {
            return invalid("repetitions must be at least 1");
        }
        if self.workers == 0 {
            return invalid("workers must be at least 1");
        }
        let d = self.problem.dim();
        if d == 0 {
            return invalid("problem dimension must be positive");
        }
        let target_normalized = match &self.problem {
            ProblemConfig::Genz { family, dim } => {
                GenzSpec::new(*family, *dim).validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
                true
            }
            ProblemConfig::Goodwin { .. } => {
                let o = &self.ode;
                if !(o.rtol > 0.0 && o.atol > 0.0 && o.max_steps > 0) {
                    return invalid("ode tolerances and step budget must be positive");
                }
                if self.chains.n_chains == 0 {
                    return invalid("chains.n_chains must be at least 1");
                }
                false
            }
            ProblemConfig::Custom { target, coordinate, reference, .. } => {
                let t = target.build()?;
                if *coordinate >= d {
                    return invalid(format!("coordinate {coordinate} out of range for dimension {d}"));
                }
                if reference.is_some_and(|r| !r.is_finite()) {
                    return invalid("reference must be finite");
                }
                t.is_normalized()
            }
        };

        let sampler = self.sampler();
        if self.method == Method::Mala && sampler != Provenance::Mala {
            return invalid(format!("method mala cannot use the {sampler} sampler"));
        }
        if self.method == Method::Mc && sampler == Provenance::Grid {
            return invalid("a grid design is not a sample from the target; use bsn or bq with it");
        }
        match sampler {
            Provenance::Iid if matches!(self.problem, ProblemConfig::Goodwin { .. }) => return invalid("the Goodwin posterior has no exact sampler; use sampler = \"mala\""),
            Provenance::Qmc | Provenance::Grid if !self.problem.gaussian_target() => return invalid(format!("the {sampler} sampler needs a Gaussian target")),
            Provenance::Qmc if d > MAX_HALTON_DIM => return invalid(format!("qmc supports at most {MAX_HALTON_DIM} dimensions")),
            Provenance::Grid if grid_side(self.n, d).checked_pow(d as u32).is_none_or(|c| c > GRID_BUDGET) => return invalid(format!("grid with n = {} in dimension {d} exceeds the point budget", self.n)),
            Provenance::Mala => self.mala.validate(d).map_err(|e| ConfigError::Invalid(format!("mala: {e}")))?,
            _ => {}
        }

        match self.method {
            Method::Bsn => {
                let b = &self.bsn;
                if !(b.lambda >= 0.0 && b.lambda.is_finite()) {
                    return invalid("bsn.lambda must be non-negative");
                }
                if b.hidden_width == 0 && b.hidden_layers > 0 {
                    return invalid("bsn.hidden_layers needs a positive hidden_width");
                }
                match &b.optimizer {
                    OptimizerConfig::Lbfgs(c) => c.validate(),
                    OptimizerConfig::Adam(c) => c.validate(),
                }
                .map_err(|e| ConfigError::Invalid(format!("bsn.optimizer: {e}")))?;
                if b.m == MSpec::DensityScaled && !target_normalized {
                    return invalid("m = density_scaled needs a target with a normalized density");
                }
            }
            Method::Bq => {
                let measure_ok = match &self.problem {
                    ProblemConfig::Genz { .. } => true,
                    ProblemConfig::Custom { target, .. } => matches!(target, TargetConfig::Gaussian { .. } | TargetConfig::TruncatedGaussian { .. }),
                    ProblemConfig::Goodwin { .. } => false,
                };
                if !measure_ok {
                    return invalid("bq needs a Gaussian or truncated Gaussian measure");
                }
                if self.bq.max_n == 0 || self.bq.max_fit_points < 2 {
                    return invalid("bq.max_n must be positive and bq.max_fit_points at least 2");
                }
            }
            Method::Mc | Method::Mala => {}
        }
        Ok(())
    }
}

/// Points per axis of a grid design with about `n` points.
pub fn grid_side(n: usize, d: usize) -> usize {
    ((n as f64).powf(1.0 / d as f64).round() as usize).max(1)
}
