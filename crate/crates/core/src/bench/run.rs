use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use super::alloc;
use super::config::{ExperimentConfig, Method, ProblemConfig, Sigma0Setting, SigmaSetting, TargetConfig};
use super::record::{relative_error, ExperimentRecord};
use super::BenchError;
use crate::baselines::{bq_posterior, fit_gp_hyperparams, mc_estimate, BqMeasure, HyperGrid, KernelFamily};
use crate::goodwin::{goodwin_mala, long_chain_reference, make_goodwin_target, GoodwinData, GoodwinTarget, LongChainReference};
use crate::integrands::{coordinate_integrand, genz_integrand, genz_reference, genz_reference_mc, CoordinateTransform, GenzSpec, Integrand, IntegrandError};
use crate::laplace::{calibration, LaplaceFit, NoiseGrid};
use crate::numerics::{forked_rng, integrate_piecewise, logspace, mean, seeded_rng, std_dev, DenseMatrix};
use crate::samplers::{effective_sample_size, grid_points, iid_points, mala_sample, qmc_points, MalaConfig, PointSet, Provenance};
use crate::steinnet::{LossConfig, MChoice, SteinData, SteinNetwork};
use crate::targets::{GaussianTarget, ScoreTarget, Support, TruncatedGaussian1D};
use crate::training::train_bsn;

/// Samples in the Monte Carlo reference used where no deterministic one exists.
pub const MC_REFERENCE_SAMPLES: usize = 1_000_000;
/// Kept samples of the long Goodwin reference chain.
pub const GOODWIN_REFERENCE_SAMPLES: usize = 100_000;
const REFERENCE_SEED: u64 = 0x5eed_0f_4ef;

/// Value an estimate is compared against, with its own Monte Carlo error when it has one.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub value: f64,
    pub std_error: Option<f64>,
    pub source: &'static str,
}

/// Everything a repetition needs that does not depend on the seed.
struct Problem {
    label: String,
    dim: usize,
    target: Arc<dyn ScoreTarget>,
    gaussian: Option<GaussianTarget>,
    goodwin: Option<GoodwinTarget>,
    integrand: Integrand,
    reference: Reference,
    measure: Option<BqMeasure>,
}

type GoodwinKey = (u64, bool, Option<String>, [u64; 2], usize);

fn goodwin_reference_cache() -> &'static Mutex<HashMap<GoodwinKey, LongChainReference>> {
    static CACHE: OnceLock<Mutex<HashMap<GoodwinKey, LongChainReference>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

fn mc_reference_cache() -> &'static Mutex<HashMap<String, (f64, f64)>> {
    static CACHE: OnceLock<Mutex<HashMap<String, (f64, f64)>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

/// Posterior means from a 10⁵-sample chain started at the ground truth, computed once per
/// dataset and solver setting in this process.
pub fn goodwin_reference(cfg: &ExperimentConfig) -> Result<LongChainReference, BenchError> {
    let ProblemConfig::Goodwin { full_data, data_seed, data_path, .. } = &cfg.problem else {
        return Err(BenchError::Format("not a Goodwin problem".into()));
    };
    let key: GoodwinKey = (*data_seed, *full_data, data_path.as_ref().map(|p| p.display().to_string()), [cfg.ode.rtol.to_bits(), cfg.ode.atol.to_bits()], cfg.ode.max_steps);
    if let Some(r) = goodwin_reference_cache().lock().expect("cache poisoned").get(&key) {
        return Ok(*r);
    }
    let target = goodwin_target(cfg)?;
    let r = long_chain_reference(&target, GOODWIN_REFERENCE_SAMPLES, REFERENCE_SEED)?;
    goodwin_reference_cache().lock().expect("cache poisoned").insert(key, r);
    Ok(r)
}

fn goodwin_target(cfg: &ExperimentConfig) -> Result<GoodwinTarget, BenchError> {
    let ProblemConfig::Goodwin { full_data, data_seed, data_path, .. } = &cfg.problem else {
        return Err(BenchError::Format("not a Goodwin problem".into()));
    };
    let data = match data_path {
        Some(p) => GoodwinData::read_csv(p)?,
        None => GoodwinData::synthetic(*data_seed, *full_data)?,
    };
    Ok(make_goodwin_target(data, cfg.ode))
}

/// Reference for a Genz integral: deterministic quadrature where available, otherwise a
/// cached Monte Carlo estimate.
pub fn genz_problem_reference(spec: &GenzSpec) -> Result<Reference, BenchError> {
    match genz_reference(spec) {
        Ok(v) => Ok(Reference { value: v, std_error: None, source: "quadrature" }),
        Err(IntegrandError::DimensionTooLarge { .. }) => {
            let key = format!("{:?}", spec);
            let mut cache = mc_reference_cache().lock().expect("cache poisoned");
            let (v, se) = *cache.entry(key).or_insert_with(|| genz_reference_mc(spec, MC_REFERENCE_SAMPLES, &mut seeded_rng(REFERENCE_SEED)));
            Ok(Reference { value: v, std_error: Some(se), source: "mc" })
        }
        Err(e) => Err(e.into()),
    }
}

fn transform(t: CoordinateTransform, x: f64) -> f64 {
    match t {
        CoordinateTransform::Identity => x,
        CoordinateTransform::Exp => x.exp(),
    }
}

/// E[f(x)] under a one-dimensional target by quadrature of f·π/∫π. The range is the span of
/// 20000 exact draws widened by the span on each side and clipped to the support.
fn expectation_1d(target: &dyn ScoreTarget, t: CoordinateTransform) -> Result<f64, BenchError> {
    let draws = crate::targets::sample(target, 20_000, &mut seeded_rng(REFERENCE_SEED))?;
    let (lo, hi) = draws.as_slice().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let span = (hi - lo).max(1e-12);
    let (mut a, mut b) = (lo - span, hi + span);
    if let Support::Box { lower, upper } = target.support() {
        a = a.max(lower[0]);
        b = b.min(upper[0]);
    }
    let shift = target.log_density_unnorm(&[draws.row(0)[0]])?;
    let density = |x: f64| target.log_density_unnorm(&[x]).map(|l| (l - shift).exp()).unwrap_or(0.0);
    let z = integrate_piecewise(density, a, b, &[], 400, 20);
    let num = integrate_piecewise(|x| transform(t, x) * density(x), a, b, &[], 400, 20);
    Ok(num / z)
}

fn custom_reference(target_cfg: &TargetConfig, target: &dyn ScoreTarget, j: usize, t: CoordinateTransform) -> Result<Reference, BenchError> {
    let quad = |value| Reference { value, std_error: None, source: "quadrature" };
    match target_cfg {
        TargetConfig::Gaussian { mean, variance } => {
            let value = match t {
                CoordinateTransform::Identity => mean[j],
                CoordinateTransform::Exp => (mean[j] + 0.5 * variance[j]).exp(),
            };
            Ok(Reference { value, std_error: None, source: "closed_form" })
        }
        TargetConfig::TruncatedGaussian { .. } | TargetConfig::Mixture { .. } => Ok(quad(expectation_1d(target, t)?)),
        TargetConfig::WindFarm => {
            let product = crate::targets::wind_farm_inputs();
            Ok(quad(expectation_1d(product.factors()[j].as_ref(), t)?))
        }
    }
}

fn build_problem(cfg: &ExperimentConfig) -> Result<Problem, BenchError> {
    let label = cfg.problem.label();
    match &cfg.problem {
        ProblemConfig::Genz { family, dim } => {
            let spec = GenzSpec::new(*family, *dim);
            let gaussian = GaussianTarget::standard(*dim);
            Ok(Problem {
                label,
                dim: *dim,
                target: Arc::new(gaussian.clone()),
                integrand: genz_integrand(&spec)?,
                reference: genz_problem_reference(&spec)?,
                measure: Some(BqMeasure::Gaussian(gaussian.clone())),
                gaussian: Some(gaussian),
                goodwin: None,
            })
        }
        ProblemConfig::Goodwin { param, .. } => {
            let target = goodwin_target(cfg)?;
            let r = goodwin_reference(cfg)?;
            let j = param.index();
            Ok(Problem {
                label,
                dim: 4,
                target: Arc::new(target.clone()),
                integrand: coordinate_integrand(4, j, CoordinateTransform::Exp),
                reference: Reference { value: r.means[j], std_error: Some(r.std_errors[j]), source: "long_chain" },
                measure: None,
                gaussian: None,
                goodwin: Some(target),
            })
        }
        ProblemConfig::Custom { target: tc, coordinate, transform, reference } => {
            let target = tc.build()?;
            let dim = target.dim();
            let reference = match reference {
                Some(v) => Reference { value: *v, std_error: None, source: "config" },
                None => custom_reference(tc, target.as_ref(), *coordinate, *transform)?,
            };
            let (gaussian, measure) = match tc {
                TargetConfig::Gaussian { mean, variance } => {
                    let g = GaussianTarget::new(mean.clone(), variance.clone())?;
                    (Some(g.clone()), Some(BqMeasure::Gaussian(g)))
                }
                TargetConfig::TruncatedGaussian { mu, sigma, lower, upper } => (None, Some(BqMeasure::TruncatedProduct(vec![TruncatedGaussian1D::new(*mu, *sigma, *lower, *upper)?]))),
                _ => (None, None),
            };
            Ok(Problem { label, dim, target, gaussian, goodwin: None, integrand: coordinate_integrand(dim, *coordinate, *transform), reference, measure })
        }
    }
}

fn head(set: PointSet, n: usize) -> PointSet {
    if set.len() <= n {
        return set;
    }
    let d = set.dim();
    let take = |m: &DenseMatrix| DenseMatrix::from_row_major(n, d, m.as_slice()[..n * d].to_vec());
    PointSet { points: take(&set.points), scores: take(&set.scores), provenance: set.provenance }
}

struct Draw {
    set: PointSet,
    notes: Vec<String>,
}

fn draw_points(cfg: &ExperimentConfig, problem: &Problem, seed: u64) -> Result<Draw, BenchError> {
    let mut notes = Vec::new();
    let set = match cfg.sampler() {
        Provenance::Iid => iid_points(problem.target.as_ref(), cfg.n, &mut forked_rng(seed, 0))?,
        Provenance::Qmc => qmc_points(problem.gaussian.as_ref().ok_or_else(|| BenchError::Format("qmc needs a Gaussian target".into()))?, cfg.n)?,
        Provenance::Grid => {
            let g = problem.gaussian.as_ref().ok_or_else(|| BenchError::Format("grid needs a Gaussian target".into()))?;
            grid_points(super::config::grid_side(cfg.n, problem.dim), g)?
        }
        Provenance::Mala => match &problem.goodwin {
            Some(target) => {
                let chains = cfg.chains.n_chains;
                let mala = MalaConfig { n_keep: cfg.n.div_ceil(chains), ..cfg.mala.clone() };
                let out = goodwin_mala(target, &mala, &cfg.chains, seed)?;
                let acc = mean(&out.runs.iter().map(|r| r.accept_rate).collect::<Vec<_>>());
                notes.push(format!("accept_rate={acc:.3}"));
                notes.push(format!("chain_restarts={}", out.restarts));
                head(out.pooled, cfg.n)
            }
            None => {
                let mala = MalaConfig { n_keep: cfg.n, ..cfg.mala.clone() };
                let run = mala_sample(problem.target.as_ref(), &mala, &mut forked_rng(seed, 0))?;
                notes.push(format!("accept_rate={:.3}", run.accept_rate));
                run.set
            }
        },
    };
    Ok(Draw { set, notes })
}

/// What a method reports before it is compared with the reference.
struct MethodOutput {
    estimate: f64,
    posterior_std: Option<f64>,
    final_loss: Option<f64>,
    notes: Vec<String>,
}

fn sample_mean(provenance: Provenance, f: &[f64]) -> Result<MethodOutput, BenchError> {
    let est = mc_estimate(f)?;
    let posterior_std = match provenance {
        Provenance::Iid => Some(est.std_error),
        Provenance::Mala => Some(std_dev(f) / effective_sample_size(f).max(1.0).sqrt()),
        Provenance::Qmc | Provenance::Grid => None,
    };
    Ok(MethodOutput { estimate: est.mean, posterior_std, final_loss: None, notes: Vec::new() })
}

fn run_bsn(cfg: &ExperimentConfig, problem: &Problem, set: &PointSet, f: Vec<f64>, seed: u64) -> Result<MethodOutput, BenchError> {
    let b = &cfg.bsn;
    let mut data = SteinData::new(set.points.clone(), f, set.scores.clone())?;
    if problem.target.is_normalized() {
        data.log_density = Some(data.points.row_iter().map(|x| problem.target.log_density_unnorm(x)).collect::<Result<Vec<_>, _>>()?);
    }
    let m = b.m.resolve(&data.scores);
    let mut notes = vec![format!("m={}", b.m)];
    if let MChoice::ScaledIdentity(c) = m {
        notes.push(format!("C={c:.6e}"));
    }
    let mut net = SteinNetwork::init(b.architecture(problem.dim), &mut forked_rng(seed, 1))?.with_m(m).with_theta0_from(&data.f);
    if let Support::Box { lower, upper } = problem.target.support() {
        net = net.with_boundary(lower, upper);
    }
    let loss = LossConfig { lambda: b.lambda, penalize_theta0: b.penalize_theta0, workers: cfg.workers };
    let (net, report) = train_bsn(net, &data, &loss, &b.optimizer, &mut forked_rng(seed, 2))?;
    notes.push(format!("stop={}", report.status));
    notes.push(format!("iters={}", report.iters_used));

    let posterior_std = if b.laplace {
        let fit = LaplaceFit::new(&net, &data, cfg.workers)?;
        let sigma = match b.sigma {
            SigmaSetting::Auto => fit.residual_sigma(),
            SigmaSetting::Value(s) => s,
        };
        let (sigma, sigma0) = match b.sigma0 {
            Sigma0Setting::Grid => fit.tune(&NoiseGrid { sigma: vec![sigma], sigma0: logspace(1e-2, 1e2, 9) })?,
            Sigma0Setting::Value(s0) => (sigma, s0),
        };
        notes.push(format!("sigma={sigma:.6e}"));
        notes.push(format!("sigma0={sigma0:.6e}"));
        Some(fit.posterior(sigma, sigma0)?.theta0_std())
    } else {
        None
    };
    Ok(MethodOutput { estimate: net.theta_0, posterior_std, final_loss: Some(report.final_loss), notes })
}

fn run_bq(cfg: &ExperimentConfig, problem: &Problem, set: &PointSet, f: &[f64]) -> Result<MethodOutput, BenchError> {
    let measure = problem.measure.as_ref().ok_or_else(|| BenchError::Format("no kernel mean embedding for this target".into()))?;
    let grid = HyperGrid { max_points: cfg.bq.max_fit_points, ..HyperGrid::default_for(&set.points, f) };
    let kernel = fit_gp_hyperparams(cfg.bq.kernel, &set.points, f, &grid, cfg.workers)?;
    let post = bq_posterior(&kernel, measure, &set.points, f, cfg.workers)?;
    let notes = vec![format!("kernel={}", match cfg.bq.kernel { KernelFamily::Rbf => "rbf", KernelFamily::Matern12 => "matern12" }), format!("lengthscale={:.6e}", kernel.lengthscale()), format!("amplitude={:.6e}", kernel.amplitude())];
    Ok(MethodOutput { estimate: post.mean, posterior_std: post.std(), final_loss: None, notes })
}

fn failed_record(cfg: &ExperimentConfig, problem: &Problem, seed: u64, n: usize, note: String) -> ExperimentRecord {
    ExperimentRecord {
        method: cfg.method.to_string(),
        problem: problem.label.clone(),
        d: problem.dim,
        n,
        seed,
        estimate: f64::NAN,
        reference: problem.reference.value,
        rel_error: f64::NAN,
        posterior_std: None,
        gamma: None,
        runtime_s: 0.0,
        final_loss: None,
        notes: note,
    }
}

fn run_repetition(cfg: &ExperimentConfig, problem: &Problem, seed: u64) -> ExperimentRecord {
    if cfg.method == Method::Bq && cfg.n > cfg.bq.max_n {
        return failed_record(cfg, problem, seed, cfg.n, "skipped: budget".into());
    }
    alloc::reset_peak();
    let t_sample = Instant::now();
    let draw = match draw_points(cfg, problem, seed) {
        Ok(d) => d,
        Err(e) => return failed_record(cfg, problem, seed, cfg.n, format!("failed: sampling: {e}")),
    };
    let f = problem.integrand.eval_rows(&draw.set.points);
    let sampling_time = t_sample.elapsed().as_secs_f64();
    let n = draw.set.len();

    let t_method = Instant::now();
    let out = match cfg.method {
        Method::Mc | Method::Mala => sample_mean(draw.set.provenance, &f),
        Method::Bsn => run_bsn(cfg, problem, &draw.set, f, seed),
        Method::Bq => run_bq(cfg, problem, &draw.set, &f),
    };
    let runtime_s = t_method.elapsed().as_secs_f64();
    let out = match out {
        Ok(o) => o,
        Err(e) => return failed_record(cfg, problem, seed, n, format!("failed: {e}")),
    };

    let reference = problem.reference.value;
    let rel_error = relative_error(out.estimate, reference);
    let gamma = match out.posterior_std {
        Some(s) if reference != 0.0 && s > 0.0 => calibration(out.estimate, reference, s).ok().map(|c| c.gamma),
        _ => None,
    };
    let mut notes = vec![format!("sampler={}", draw.set.provenance), format!("sampling_time={sampling_time:.6}")];
    notes.extend(draw.notes);
    notes.extend(out.notes);
    notes.push(format!("reference_source={}", problem.reference.source));
    if let Some(se) = problem.reference.std_error {
        notes.push(format!("reference_se={se:.3e}"));
    }
    if let Some(p) = alloc::peak_allocated_bytes() {
        notes.push(format!("peak_alloc_bytes={p}"));
    }
    ExperimentRecord {
        method: cfg.method.to_string(),
        problem: problem.label.clone(),
        d: problem.dim,
        n,
        seed,
        estimate: out.estimate,
        reference,
        rel_error,
        posterior_std: out.posterior_std,
        gamma,
        runtime_s,
        final_loss: out.final_loss,
        notes: notes.join(";"),
    }
}

/// Runs every repetition of the experiment, with seeds `seed..seed + repetitions`.
///
/// Each repetition draws its points from stream 0 of its seed, initializes the network from
/// stream 1 and shuffles minibatches from stream 2. A repetition that fails is recorded with
/// a NaN estimate and the error in its notes.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<ExperimentRecord>, BenchError> {
    cfg.validate()?;
    let problem = build_problem(cfg)?;
    Ok((0..cfg.repetitions as u64).map(|r| run_repetition(cfg, &problem, cfg.seed + r)).collect())
}

/// n-values of a sweep when none are given: 2⁴ through 2¹⁴.
pub fn default_n_grid() -> Vec<usize> {
    (4..=14).map(|k| 1usize << k).collect()
}

/// Repeats the experiment for each n; configs are validated up front.
pub fn n_sweep(template: &ExperimentConfig, ns: &[usize]) -> Result<Vec<ExperimentRecord>, BenchError> {
    let cfgs: Vec<ExperimentConfig> = ns.iter().map(|&n| ExperimentConfig { n, ..template.clone() }).collect();
    for c in &cfgs {
        c.validate()?;
    }
    let mut out = Vec::new();
    for c in &cfgs {
        out.extend(run_experiment(c)?);
    }
    Ok(out)
}
