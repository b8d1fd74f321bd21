//! Experiment orchestration: declarative configs, seeded repetitions, CSV records, the Genz
//! table and n-sweeps.

pub mod alloc;
mod config;
mod record;
mod run;
pub mod selftest;
mod table;

use thiserror::Error;

pub use config::{grid_side, BqConfig, BsnConfig, ConfigError, ExperimentConfig, MSpec, Method, ProblemConfig, ScaleSource, Sigma0Setting, SigmaSetting, TargetConfig};
pub use record::{emit_csv, fmt_float, parse_csv, read_records, records_to_csv, relative_error, write_records, ExperimentRecord, CSV_HEADER};
pub use run::{default_n_grid, genz_problem_reference, goodwin_reference, n_sweep, run_experiment, Reference, GOODWIN_REFERENCE_SAMPLES, MC_REFERENCE_SAMPLES};
pub use table::{genz_table, GenzTable, TableCell, TABLE_HEADER};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed records: {0}")]
    Format(String),
    #[error(transparent)]
    Goodwin(#[from] crate::goodwin::GoodwinError),
    #[error(transparent)]
    Integrand(#[from] crate::integrands::IntegrandError),
    #[error(transparent)]
    Target(#[from] crate::targets::TargetError),
    #[error(transparent)]
    Sampler(#[from] crate::samplers::SamplerError),
    #[error(transparent)]
    Stein(#[from] crate::steinnet::SteinError),
    #[error(transparent)]
    Train(#[from] crate::training::TrainError),
    #[error(transparent)]
    Laplace(#[from] crate::laplace::LaplaceError),
    #[error(transparent)]
    Baseline(#[from] crate::baselines::BaselineError),
}

impl BenchError {
    pub fn is_config(&self) -> bool {
        matches!(self, BenchError::Config(_))
    }

    /// Failures of the numerical pipeline, as opposed to config or file problems.
    pub fn is_numerical(&self) -> bool {
        !matches!(self, BenchError::Config(_) | BenchError::Io(_) | BenchError::Csv(_) | BenchError::Format(_))
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::goodwin::GoodwinParam;
    use crate::integrands::{CoordinateTransform, GenzFamily};
    use crate::numerics::mean;
    use crate::samplers::Provenance;
    use crate::training::{AdamConfig, BatchSize, LbfgsConfig, OptimizerConfig};

    fn quick_bsn(dim: usize, n: usize) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::genz(GenzFamily::Continuous, dim, Method::Bsn, n);
        cfg.bsn.hidden_width = 8;
        cfg.bsn.hidden_layers = 1;
        cfg.bsn.optimizer = OptimizerConfig::Lbfgs(LbfgsConfig { max_iters: 50, ..Default::default() });
        cfg
    }

    const FULL_CONFIG: &str = r#"
method = "bsn"
n = 256
seed = 4
repetitions = 2
workers = 1
sampler = "qmc"

[problem]
kind = "genz"
family = "gaussian_peak"
dim = 3

[bsn]
hidden_width = 16
m = "scaled_identity:std"
lambda = 1e-5
sigma = 0.01
sigma0 = "grid"

[bsn.optimizer]
kind = "adam"
lr = 0.01
iters = 200
batch_size = { mini = 64 }

[bq]
kernel = "matern12"

[mala]
step_size = 0.1
n_burn = 100
"#;

    #[test]
    fn full_config_parses_and_round_trips() {
        let cfg = ExperimentConfig::from_toml_str(FULL_CONFIG).unwrap();
        assert_eq!(cfg.sampler(), Provenance::Qmc);
        assert_eq!(cfg.bsn.m, MSpec::ScaledIdentity(ScaleSource::Rule(crate::steinnet::ScaleRule::Std)));
        assert_eq!(cfg.bsn.sigma, SigmaSetting::Value(0.01));
        assert_eq!(cfg.bsn.optimizer, OptimizerConfig::Adam(AdamConfig { lr: 0.01, iters: 200, batch_size: BatchSize::Mini(64), ..Default::default() }));
        assert_eq!(cfg.bsn.hidden_layers, 2);
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = ExperimentConfig::from_toml_str("method = \"mc\"\nn = 10\n[problem]\nkind = \"genz\"\nfamily = \"continuous\"\ndim = 1\n").unwrap();
        assert_eq!(cfg, ExperimentConfig::genz(GenzFamily::Continuous, 1, Method::Mc, 10));
        assert_eq!(cfg.repetitions, 5);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let base = "method = \"mc\"\nn = 10\n[problem]\nkind = \"genz\"\nfamily = \"continuous\"\ndim = 1\n";
        assert!(matches!(ExperimentConfig::from_toml_str(&base.replace("n = 10", "n = 10\ncolour = 1")), Err(ConfigError::Parse(_))));
        assert!(matches!(ExperimentConfig::from_toml_str(&format!("{base}[bsn]\nlearning = 1\n")), Err(ConfigError::Parse(_))));
        assert!(matches!(ExperimentConfig::from_toml_str(&base.replace("\"mc\"", "\"svm\"")), Err(ConfigError::Parse(_))));
        assert!(matches!(ExperimentConfig::from_toml_str(&base.replace("dim = 1", "dim = 1\nextra = 2")), Err(ConfigError::Parse(_))));
        assert!(matches!(ExperimentConfig::from_toml_str(&base.replace("n = 10", "n = 0")), Err(ConfigError::Invalid(_))));
        assert!(ExperimentConfig::from_toml_str(&format!("{base}[bsn]\nsigma = \"often\"\n")).is_err());
        assert!(ExperimentConfig::from_toml_str(&format!("{base}[bsn]\nm = \"scaled_identity:-1\"\n")).is_err());
        assert!("svm".parse::<Method>().is_err());
    }

    #[test]
    fn incompatible_combinations_fail_validation() {
        let mut c = ExperimentConfig::goodwin(GoodwinParam::A1, Method::Bsn, 100);
        c.sampler = Some(Provenance::Iid);
        assert!(matches!(c.validate(), Err(ConfigError::Invalid(_))));
        let c = ExperimentConfig::goodwin(GoodwinParam::A1, Method::Bq, 100);
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::goodwin(GoodwinParam::K1, Method::Bsn, 100);
        c.bsn.m = MSpec::DensityScaled;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::genz(GenzFamily::Continuous, 2, Method::Mala, 100);
        c.sampler = Some(Provenance::Qmc);
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::genz(GenzFamily::Continuous, 10, Method::Bsn, 1 << 24);
        c.sampler = Some(Provenance::Grid);
        assert!(c.validate().is_err());
        c.n = 1 << 20;
        assert!(c.validate().is_ok());
        c.method = Method::Mc;
        assert!(c.validate().is_err());
        let c = ExperimentConfig::new(ProblemConfig::Custom { target: TargetConfig::WindFarm, coordinate: 7, transform: CoordinateTransform::Identity, reference: None }, Method::Mc, 10);
        assert!(c.validate().is_err());
        assert!(ExperimentConfig::goodwin(GoodwinParam::Alpha, Method::Mala, 100).validate().is_ok());
    }

    #[test]
    fn m_spec_strings_round_trip() {
        for s in ["identity", "scaled_identity:std", "scaled_identity:max", "scaled_identity:2.5", "scaled_diagonal:max", "inverse_square_norm", "inverse_norm", "density_scaled", "diag_x"] {
            assert_eq!(s.parse::<MSpec>().unwrap().to_string(), s);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn config_round_trip_is_identity(
            n in 1usize..100_000, seed in any::<u64>(), reps in 1usize..10, dim in 1usize..4,
            fam in 0usize..6, method in 0usize..4, lambda in 0.0..1.0f64, sigma in proptest::option::of(1e-6..10.0f64),
            c in proptest::option::of(0.1..100.0f64), lbfgs in any::<bool>(), laplace in any::<bool>(),
        ) {
            let mut cfg = ExperimentConfig::genz(GenzFamily::ALL[fam], dim, Method::ALL[method], n);
            cfg.seed = seed;
            cfg.repetitions = reps;
            cfg.bsn.lambda = lambda;
            cfg.bsn.laplace = laplace;
            cfg.bsn.sigma = sigma.map_or(SigmaSetting::Auto, SigmaSetting::Value);
            cfg.bsn.m = c.map_or(MSpec::Identity, |c| MSpec::ScaledIdentity(ScaleSource::Fixed(c)));
            if !lbfgs {
                cfg.bsn.optimizer = OptimizerConfig::Adam(AdamConfig { batch_size: BatchSize::Full, ..Default::default() });
            }
            cfg.chains.restart_gap = f64::INFINITY;
            let text = cfg.to_toml_string().unwrap();
            prop_assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
        }
    }

    #[test]
    fn mc_records_follow_the_clt_band() {
        let mut cfg = ExperimentConfig::genz(GenzFamily::Continuous, 1, Method::Mc, 10_000);
        cfg.seed = 17;
        let recs = run_experiment(&cfg).unwrap();
        assert_eq!(recs.len(), 5);
        assert_eq!(recs.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![17, 18, 19, 20, 21]);
        let errs: Vec<f64> = recs.iter().map(|r| r.rel_error).collect();
        let se = recs[0].posterior_std.unwrap() / recs[0].reference.abs();
        assert!(mean(&errs) <= 5.0 * se, "mean rel error {} vs band {}", mean(&errs), 5.0 * se);
        for r in &recs {
            assert_eq!(r.method, "mc");
            assert_eq!(r.problem, "genz:continuous");
            assert!(r.note("sampling_time").is_some());
            assert!((r.rel_error - (r.estimate - r.reference).abs() / r.reference.abs()).abs() < 1e-15);
        }
    }

    #[test]
    fn bsn_with_a_single_point_reports_gamma() {
        let mut cfg = quick_bsn(2, 1);
        cfg.repetitions = 1;
        let recs = run_experiment(&cfg).unwrap();
        assert_eq!(recs.len(), 1);
        assert!(recs[0].succeeded(), "{}", recs[0].notes);
        assert!(recs[0].gamma.is_some());
        assert!(recs[0].final_loss.is_some());
    }

    #[test]
    fn reruns_are_bitwise_identical() {
        let mut cfg = quick_bsn(2, 64);
        cfg.repetitions = 2;
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.estimate.to_bits(), y.estimate.to_bits());
            assert_eq!(x.posterior_std.map(f64::to_bits), y.posterior_std.map(f64::to_bits));
        }
        assert_ne!(a[0].estimate, a[1].estimate);
    }

    #[test]
    fn bq_above_budget_is_skipped() {
        let mut cfg = ExperimentConfig::genz(GenzFamily::Continuous, 1, Method::Bq, 40);
        cfg.repetitions = 1;
        cfg.bq.max_n = 32;
        let recs = run_experiment(&cfg).unwrap();
        assert_eq!(recs[0].notes, "skipped: budget");
        assert!(!recs[0].succeeded());
    }

    #[test]
    fn truncated_bq_has_no_posterior_std() {
        let target = TargetConfig::TruncatedGaussian { mu: 0.3, sigma: 1.0, lower: 0.0, upper: f64::INFINITY };
        let mut cfg = ExperimentConfig::new(ProblemConfig::Custom { target, coordinate: 0, transform: CoordinateTransform::Identity, reference: None }, Method::Bq, 64);
        cfg.repetitions = 1;
        let recs = run_experiment(&cfg).unwrap();
        let r = &recs[0];
        assert!(r.succeeded(), "{}", r.notes);
        assert_eq!(r.posterior_std, None);
        assert_eq!(r.gamma, None);
        // E[x] of N(0.3, 1) truncated to x > 0 is μ + φ(μ)/Φ(μ)
        let mu = 0.3f64;
        let exact = mu + crate::numerics::std_normal_pdf(mu) / crate::numerics::std_normal_cdf(mu);
        assert!((r.reference - exact).abs() < 1e-10, "{} vs {exact}", r.reference);
        assert!(r.rel_error < 0.05);
        let csv = records_to_csv(&recs).unwrap();
        assert!(csv.lines().nth(1).unwrap().contains(",,,"));
    }

    #[test]
    fn custom_truncated_bsn_uses_the_boundary() {
        let target = TargetConfig::TruncatedGaussian { mu: 0.3, sigma: 1.0, lower: 0.0, upper: f64::INFINITY };
        let mut cfg = ExperimentConfig::new(ProblemConfig::Custom { target, coordinate: 0, transform: CoordinateTransform::Exp, reference: None }, Method::Bsn, 128);
        cfg.repetitions = 1;
        cfg.bsn.hidden_width = 8;
        cfg.bsn.hidden_layers = 1;
        let r = &run_experiment(&cfg).unwrap()[0];
        assert!(r.succeeded(), "{}", r.notes);
        assert!(r.rel_error < 0.05, "{}", r.rel_error);
    }

    #[test]
    fn other_samplers_run() {
        for s in [Provenance::Qmc, Provenance::Mala] {
            let mut cfg = ExperimentConfig::genz(GenzFamily::ProductPeak, 2, Method::Mc, 100);
            cfg.repetitions = 1;
            cfg.sampler = Some(s);
            cfg.mala.n_burn = 200;
            let r = &run_experiment(&cfg).unwrap()[0];
            assert!(r.succeeded(), "{s}: {}", r.notes);
            assert_eq!(r.note("sampler"), Some(s.as_str()));
            assert!(r.rel_error < 0.2, "{s}: {}", r.rel_error);
        }
        let mut cfg = quick_bsn(2, 100);
        cfg.repetitions = 1;
        cfg.sampler = Some(Provenance::Grid);
        let r = &run_experiment(&cfg).unwrap()[0];
        assert!(r.succeeded(), "{}", r.notes);
        assert_eq!(r.n, 100);
        assert!(r.estimate.is_finite() && r.posterior_std.is_some());
    }

    #[test]
    fn table_with_one_method_has_one_column() {
        let mut t = ExperimentConfig::genz(GenzFamily::Continuous, 1, Method::Mc, 100);
        t.repetitions = 2;
        let table = genz_table(1, 100, &[Method::Mc], &t).unwrap();
        assert_eq!(table.shape(), (6, 1));
        assert_eq!(table.records.len(), 12);
        let csv = table.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.starts_with(&TABLE_HEADER.join(",")));
        assert!(table.cells.iter().all(|c| c.repetitions == 2 && c.mean_rel_error.is_finite()));
    }

    #[test]
    fn sweep_covers_each_n() {
        let mut t = ExperimentConfig::genz(GenzFamily::Oscillatory, 1, Method::Mc, 1);
        t.repetitions = 1;
        let recs = n_sweep(&t, &[16, 32]).unwrap();
        assert_eq!(recs.iter().map(|r| r.n).collect::<Vec<_>>(), vec![16, 32]);
        assert_eq!(default_n_grid().first(), Some(&16));
        assert_eq!(default_n_grid().last(), Some(&16384));
        assert!(n_sweep(&t, &[0]).is_err());
    }
}
