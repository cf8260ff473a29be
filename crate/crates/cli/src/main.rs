//! `amcmc` command-line front end. Each subcommand writes its CSV tables,
//! a `timing.csv` and a `manifest.json` into the output directory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use amcmc::experiments::{self, Artifacts, ExperimentConfig};
use amcmc::{Error, Exec};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "amcmc", version, about = "Error bounds and approximate samplers for MCMC")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: results/<subcommand>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Retained samples per chain, overriding the config.
    #[arg(long, global = true)]
    budget_steps: Option<usize>,
    /// Wall-clock limit per chain in seconds.
    #[arg(long, global = true)]
    budget_seconds: Option<f64>,
}

#[derive(Subcommand, Clone)]
enum Command {
    /// TV and L2 bounds over a grid of path lengths.
    Bounds,
    /// Mixing-time bounds over (alpha, delta) pairs.
    Mixtimes,
    /// Budget-optimal approximation error curves.
    Compminimax,
    /// Exact checks of the bounds on small finite chains.
    VerifyFinite {
        /// Extra kernel (one row per line) to check against the TV bound.
        #[arg(long)]
        kernel: Option<PathBuf>,
    },
    /// Latent class model with approximate multinomial updates.
    Mixture {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Subset Pólya-Gamma logistic regression.
    Logistic {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Gaussian process regression with low-rank covariance factors.
    Gp {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Convergence diagnostics for a trace CSV.
    Diagnose {
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Second trace for the kernel distance.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Bounds => "bounds",
            Command::Mixtimes => "mixtimes",
            Command::Compminimax => "compminimax",
            Command::VerifyFinite { .. } => "verify-finite",
            Command::Mixture { .. } => "mixture",
            Command::Logistic { .. } => "logistic",
            Command::Gp { .. } => "gp",
            Command::Diagnose { .. } => "diagnose",
        }
    }
}

fn path_string(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn load_config(cli: &Cli) -> amcmc::Result<ExperimentConfig> {
    let mut cfg = match &cli.common.config {
        Some(p) => ExperimentConfig::from_toml_str(&std::fs::read_to_string(p)?)?,
        None => ExperimentConfig::default(),
    };
    let c = &cli.common;
    cfg.seed = c.seed.or(cfg.seed);
    cfg.threads = c.threads.or(cfg.threads);
    cfg.budget_steps = c.budget_steps.or(cfg.budget_steps);
    cfg.budget_seconds = c.budget_seconds.or(cfg.budget_seconds);
    if let Some(o) = &c.out {
        cfg.out = Some(path_string(o));
    }
    match &cli.command {
        Command::VerifyFinite { kernel: Some(k) } => cfg.verify_finite.kernel_file = Some(path_string(k)),
        Command::Mixture { data: Some(d) } => cfg.mixture.data_file = Some(path_string(d)),
        Command::Logistic { data: Some(d) } => cfg.logistic.data_file = Some(path_string(d)),
        Command::Gp { data: Some(d) } => cfg.gp.data_file = Some(path_string(d)),
        Command::Diagnose { trace, reference } => {
            if let Some(t) = trace {
                cfg.diagnose.trace_file = Some(path_string(t));
            }
            if let Some(r) = reference {
                cfg.diagnose.reference_file = Some(path_string(r));
            }
        }
        _ => {}
    }
    if let Some(b) = cfg.budget_seconds.filter(|b| b.is_nan() || *b <= 0.0) {
        return Err(Error::Config(format!("budget_seconds must be positive, got {b}")));
    }
    Ok(cfg)
}

fn exec_for(threads: Option<usize>) -> amcmc::Result<Exec> {
    match threads {
        Some(0) => Err(Error::Config("threads must be at least 1".into())),
        Some(1) => Ok(Exec::Sequential),
        #[cfg(feature = "parallel")]
        Some(n) => {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::Config(e.to_string()))?;
            Ok(Exec::Parallel)
        }
        _ => Ok(Exec::default()),
    }
}

fn run(cli: &Cli) -> amcmc::Result<bool> {
    let cfg = load_config(cli)?;
    let exec = exec_for(cfg.threads)?;
    let name = cli.command.name();
    let art: Artifacts = match cli.command {
        Command::Bounds => experiments::run_bounds(&cfg)?,
        Command::Mixtimes => experiments::run_mixtimes(&cfg)?,
        Command::Compminimax => experiments::run_compminimax(&cfg, exec)?,
        Command::VerifyFinite { .. } => experiments::run_verify_finite(&cfg)?,
        Command::Mixture { .. } => experiments::run_mixture(&cfg, exec)?,
        Command::Logistic { .. } => experiments::run_logistic(&cfg, exec)?,
        Command::Gp { .. } => experiments::run_gp(&cfg, exec)?,
        Command::Diagnose { .. } => experiments::run_diagnose(&cfg, exec)?,
    };
    let out = cfg
        .out
        .as_ref()
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new("results").join(name));
    std::fs::create_dir_all(&out)?;
    for (file, table) in &art.tables {
        table.write(&out.join(file))?;
    }
    art.timing.write(&out.join("timing.csv"))?;
    let manifest = experiments::manifest(name, &cfg, &art)?;
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(out.join("manifest.json"), text + "\n")?;
    for (file, table) in &art.tables {
        println!("{}: {} rows", out.join(file).display(), table.len());
    }
    Ok(art.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("{}", serde_json::json!({ "error": "check", "message": "one or more checks failed" }));
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::from(2)
        }
    }
}
