use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use stein_quad::baselines::KernelFamily;
use stein_quad::bench::alloc::{peak_allocated_bytes, PeakAlloc};
use stein_quad::bench::{
    default_n_grid, genz_table, n_sweep, run_experiment, selftest::selftest, write_records, BenchError, ConfigError, ExperimentConfig, ExperimentRecord, MSpec, Method, Sigma0Setting, SigmaSetting,
};
use stein_quad::goodwin::{GoodwinData, GoodwinParam};
use stein_quad::integrands::GenzFamily;
use stein_quad::samplers::Provenance;
use stein_quad::training::{AdamConfig, LbfgsConfig, OptimizerConfig};

#[global_allocator]
static ALLOC: PeakAlloc = PeakAlloc;

#[derive(Parser)]
#[command(name = "stein-quad", version, about = "Numerical integration with Bayesian Stein networks and baselines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate a Genz function against N(0, I).
    Genz {
        #[arg(long, default_value = "continuous")]
        family: GenzFamily,
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long, default_value_t = 5120)]
        n: usize,
        #[command(flatten)]
        opts: MethodArgs,
    },
    /// Posterior mean of a Goodwin oscillator parameter.
    Goodwin {
        #[arg(long, default_value = "a1")]
        param: GoodwinParam,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Use all 2400 observations.
        #[arg(long)]
        full_data: bool,
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
        /// Observations CSV written by `goodwin-data`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        opts: MethodArgs,
    },
    /// Run an experiment described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Every Genz family against several methods; writes the summary table.
    Table {
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long, default_value_t = 5120)]
        n: usize,
        #[arg(long, value_delimiter = ',', default_value = "mc,bq,bsn")]
        methods: Vec<Method>,
        /// Also write the per-repetition records here.
        #[arg(long)]
        records: Option<PathBuf>,
        #[command(flatten)]
        opts: MethodArgs,
    },
    /// Repeat a config over several n.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to 16, 32, ..., 16384.
        #[arg(long, value_delimiter = ',')]
        ns: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic Goodwin observations.
    GoodwinData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        full: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check closed forms and derivatives against independent oracles.
    Selftest,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerKind {
    Lbfgs,
    Adam,
}

#[derive(Args)]
struct MethodArgs {
    #[arg(long, default_value = "bsn")]
    method: Method,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    sampler: Option<Provenance>,
    /// Initial MALA step size.
    #[arg(long)]
    mala_step: Option<f64>,
    #[arg(long)]
    burn: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerKind>,
    /// L-BFGS iterations or Adam steps.
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// L-BFGS history size.
    #[arg(long)]
    history: Option<usize>,
    /// `auto` or a value.
    #[arg(long)]
    sigma: Option<SigmaSetting>,
    /// `grid` or a value.
    #[arg(long)]
    sigma0: Option<Sigma0Setting>,
    #[arg(long)]
    kernel: Option<KernelFamily>,
    /// identity, scaled_identity:<std|max|C>, scaled_diagonal:<std|max>, inverse_square_norm, ...
    #[arg(long)]
    m: Option<MSpec>,
    #[arg(long)]
    hidden_width: Option<usize>,
    #[arg(long)]
    hidden_layers: Option<usize>,
    /// Skip the Laplace posterior.
    #[arg(long)]
    no_laplace: bool,
    /// Largest n for which BQ runs.
    #[arg(long)]
    bq_max_n: Option<usize>,
    /// Print the resolved config as TOML and exit.
    #[arg(long)]
    dump_config: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl MethodArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<(), ConfigError> {
        cfg.method = self.method;
        cfg.seed = self.seed;
        cfg.repetitions = self.reps;
        cfg.workers = self.workers;
        if self.sampler.is_some() {
            cfg.sampler = self.sampler;
        }
        if let Some(s) = self.mala_step {
            cfg.mala.step_size = s;
        }
        if let Some(b) = self.burn {
            cfg.mala.n_burn = b;
        }
        if let Some(t) = self.thin {
            cfg.mala.thinning = t;
        }
        match self.optimizer {
            Some(OptimizerKind::Adam) => cfg.bsn.optimizer = OptimizerConfig::Adam(AdamConfig::default()),
            Some(OptimizerKind::Lbfgs) => cfg.bsn.optimizer = OptimizerConfig::Lbfgs(LbfgsConfig::default()),
            None => {}
        }
        match &mut cfg.bsn.optimizer {
            OptimizerConfig::Lbfgs(c) => {
                if let Some(k) = self.max_iters {
                    c.max_iters = k;
                }
                if let Some(h) = self.history {
                    c.history_size = h;
                }
            }
            OptimizerConfig::Adam(c) => {
                if let Some(k) = self.max_iters {
                    c.iters = k;
                }
                if self.history.is_some() {
                    return Err(ConfigError::Invalid("--history applies to L-BFGS only".into()));
                }
            }
        }
        if let Some(l) = self.lambda {
            cfg.bsn.lambda = l;
        }
        if let Some(s) = self.sigma {
            cfg.bsn.sigma = s;
        }
        if let Some(s) = self.sigma0 {
            cfg.bsn.sigma0 = s;
        }
        if let Some(k) = self.kernel {
            cfg.bq.kernel = k;
        }
        if let Some(m) = self.m {
            cfg.bsn.m = m;
        }
        if let Some(w) = self.hidden_width {
            cfg.bsn.hidden_width = w;
        }
        if let Some(l) = self.hidden_layers {
            cfg.bsn.hidden_layers = l;
        }
        if self.no_laplace {
            cfg.bsn.laplace = false;
        }
        if let Some(b) = self.bq_max_n {
            cfg.bq.max_n = b;
        }
        cfg.validate()
    }
}

enum Failure {
    Config(String),
    Numerical(String),
    Other(String),
}

impl From<BenchError> for Failure {
    fn from(e: BenchError) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Other(e.to_string())
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Other(e.to_string())
    }
}

fn output(records: &[ExperimentRecord], out: Option<&PathBuf>) -> Result<(), Failure> {
    match out {
        Some(path) => write_records(records, std::io::BufWriter::new(std::fs::File::create(path)?))?,
        None => write_records(records, std::io::stdout().lock())?,
    }
    Ok(())
}

/// Writes the records, prints a summary and flags failed repetitions.
fn finish(records: &[ExperimentRecord], out: Option<&PathBuf>) -> Result<(), Failure> {
    output(records, out)?;
    let ok: Vec<&ExperimentRecord> = records.iter().filter(|r| r.succeeded()).collect();
    if !ok.is_empty() {
        let errs: Vec<f64> = ok.iter().map(|r| r.rel_error).collect();
        eprintln!("{} of {} repetitions succeeded; mean relative error {:.3e}", ok.len(), records.len(), stein_quad::numerics::mean(&errs));
    }
    let failed: Vec<&ExperimentRecord> = records.iter().filter(|r| r.notes.starts_with("failed:")).collect();
    if let Some(first) = failed.first() {
        return Err(Failure::Numerical(format!("{} repetition(s) failed, first: seed {}: {}", failed.len(), first.seed, first.notes)));
    }
    Ok(())
}

fn run_single(cfg: &mut ExperimentConfig, opts: &MethodArgs) -> Result<(), Failure> {
    opts.apply(cfg)?;
    if opts.dump_config {
        print!("{}", cfg.to_toml_string()?);
        return Ok(());
    }
    let records = run_experiment(cfg)?;
    finish(&records, opts.out.as_ref())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Genz { family, dim, n, opts } => run_single(&mut ExperimentConfig::genz(family, dim, opts.method, n), &opts),
        Command::Goodwin { param, n, full_data, data_seed, data, opts } => {
            let mut cfg = ExperimentConfig::goodwin(param, opts.method, n);
            cfg.problem = stein_quad::bench::ProblemConfig::Goodwin { param, full_data, data_seed, data_path: data };
            run_single(&mut cfg, &opts)
        }
        Command::Run { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let records = run_experiment(&cfg)?;
            finish(&records, out.as_ref())
        }
        Command::Table { dim, n, methods, records, opts } => {
            if methods.is_empty() {
                return Err(Failure::Config("--methods must name at least one method".into()));
            }
            let mut template = ExperimentConfig::genz(GenzFamily::Continuous, dim, methods[0], n);
            opts.apply(&mut template)?;
            if opts.dump_config {
                print!("{}", template.to_toml_string()?);
                return Ok(());
            }
            let table = genz_table(dim, n, &methods, &template)?;
            if let Some(path) = records {
                output(&table.records, Some(&path))?;
            }
            match &opts.out {
                Some(path) => table.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))?,
                None => table.write_csv(std::io::stdout().lock())?,
            }
            Ok(())
        }
        Command::Sweep { config, ns, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let ns = if ns.is_empty() { default_n_grid() } else { ns };
            let records = n_sweep(&cfg, &ns)?;
            finish(&records, out.as_ref())
        }
        Command::GoodwinData { seed, full, out } => {
            let data = GoodwinData::synthetic(seed, full).map_err(|e| Failure::Numerical(e.to_string()))?;
            data.write_csv(&out).map_err(|e| Failure::Other(e.to_string()))?;
            eprintln!("wrote {} observations to {}", data.len(), out.display());
            Ok(())
        }
        Command::Selftest => {
            let checks = selftest();
            let mut stdout = std::io::stdout().lock();
            for c in &checks {
                writeln!(stdout, "{:<28} {}  {}", c.name, if c.passed { "PASS" } else { "FAIL" }, c.detail)?;
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                return Err(Failure::Numerical(format!("{failed} self-test check(s) failed")));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = run(cli);
    if let Some(peak) = peak_allocated_bytes() {
        eprintln!("peak heap: {:.1} MiB", peak as f64 / (1024.0 * 1024.0));
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
        Err(Failure::Other(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
