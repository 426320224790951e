//! `slowman`: slow-manifold projection, stability maps and convergence sweeps
//! from the command line.

mod config;
mod error;
mod json;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use slowman::par::Exec;
use slowman::projector::SeedPolicy;
use slowman::rpm::RpmConfig;
use slowman::systems::SystemSpec;

use config::{CommandKind, Format, RunConfig, StepMode};
use error::{exit, CliError};

#[derive(Parser, Debug)]
#[command(name = "slowman", version, about, allow_negative_numbers = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Zero-derivative iteration at a fixed slow point.
    Project(Opts),
    /// Orders 0..=m, each stage seeded with the previous output.
    Cascade(Opts),
    /// Zero-derivative iteration stabilized by recursive projection.
    Rpm(Opts),
    /// Spectrum of the fast Jacobian and the stability verdict for the chosen steps.
    Stability(Opts),
    /// Predicted stability raster over (angle, scaled step).
    Region(Opts),
    /// Order-of-accuracy sweep over a decreasing list of epsilons.
    Sweep(Opts),
}

#[derive(Args, Debug, Default)]
struct Opts {
    /// JSON config file; flags given alongside override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in system: linear, mm or pair.
    #[arg(long)]
    system: Option<String>,
    #[arg(long)]
    a: Option<f64>,
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Eigenvalue angle of the pair system, radians.
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    modulus: Option<f64>,
    /// Order of the iteration.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<StepMode>,
    #[arg(long = "H-over-eps")]
    h_over_eps: Option<f64>,
    #[arg(long = "Hhat-over-eps")]
    h_hat_over_eps: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    /// Slow point, comma separated.
    #[arg(long, value_delimiter = ',')]
    x0: Option<Vec<f64>>,
    /// Initial fast value, comma separated.
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<f64>>,
    /// Replace the seed by the critical-manifold point nearest to it.
    #[arg(long)]
    critical_seed: bool,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// RPM eigenvalue modulus cut-off.
    #[arg(long)]
    delta: Option<f64>,
    /// Cells per axis of the region raster.
    #[arg(long)]
    resolution: Option<usize>,
    /// Iterate every region cell and report the predicted/observed mismatch.
    #[arg(long)]
    compare: bool,
    /// Epsilons for sweeps, comma separated, strictly decreasing.
    #[arg(long, value_delimiter = ',')]
    epsilons: Option<Vec<f64>>,
    /// Orders for sweeps, comma separated.
    #[arg(long = "m-values", value_delimiter = ',')]
    m_values: Option<Vec<usize>>,
    /// Threshold bisection bracket `lo,hi` in units of eps.
    #[arg(long, value_delimiter = ',')]
    threshold_range: Option<Vec<f64>>,
    /// Run sweeps on one thread.
    #[arg(long)]
    sequential: bool,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Echo the resolved config as JSON on standard output.
    #[arg(long)]
    verbose: bool,
}

impl Opts {
    fn to_config(&self, command: CommandKind) -> Result<RunConfig, CliError> {
        let mut params: Vec<(&str, f64)> = Vec::new();
        for (k, v) in [
            ("a", self.a),
            ("c", self.c),
            ("eps", self.eps),
            ("kappa", self.kappa),
            ("lambda", self.lambda),
            ("theta", self.theta),
            ("modulus", self.modulus),
        ] {
            if let Some(v) = v {
                params.push((k, v));
            }
        }
        let system = match (&self.system, params.is_empty()) {
            (None, true) => None,
            // bare parameters refine whatever system the config file names
            (id, _) => Some(params.iter().fold(SystemSpec::new(id.as_deref().unwrap_or("")), |s, (k, v)| s.param(k, *v))),
        };
        let threshold_range = match self.threshold_range.as_deref() {
            None => None,
            Some(&[lo, hi]) => Some((lo, hi)),
            Some(_) => return Err(CliError::Config("--threshold-range takes exactly two values: lo,hi".into())),
        };
        Ok(RunConfig {
            command: Some(command),
            system,
            m: self.m,
            mode: self.mode,
            h_over_eps: self.h_over_eps,
            h_hat_over_eps: self.h_hat_over_eps,
            eta: self.eta,
            x0: self.x0.clone(),
            seed: self.seed.clone(),
            seed_policy: self.critical_seed.then_some(SeedPolicy::CriticalManifold),
            tol: self.tol,
            max_iters: self.max_iters,
            rpm: self.delta.map(|delta| RpmConfig {
                delta,
                ..RpmConfig::default()
            }),
            resolution: self.resolution,
            theta_range: None,
            step_range: None,
            compare: self.compare.then_some(true),
            epsilons: self.epsilons.clone(),
            m_values: self.m_values.clone(),
            threshold_range,
            exec: self.sequential.then_some(Exec::Sequential),
            output: self.output.clone(),
            format: self.format,
        })
    }
}

fn load(command: CommandKind, opts: &Opts) -> Result<RunConfig, CliError> {
    let mut flags = opts.to_config(command)?;
    let base = match &opts.config {
        Some(path) => {
            let file = RunConfig::from_json(&std::fs::read_to_string(path)?)?;
            if let Some(c) = file.command {
                if c != command {
                    return Err(CliError::Config(format!("config file is for '{c:?}', not '{command:?}'")));
                }
            }
            file
        }
        None => RunConfig::default(),
    };
    // a bare parameter flag keeps the file's system id
    if let Some(sys) = flags.system.as_mut() {
        if sys.id.is_empty() {
            sys.id = base.system.as_ref().map_or_else(|| "linear".to_string(), |s| s.id.clone());
        }
    }
    // --delta adjusts one field of the file's RPM settings
    if let (Some(f), Some(b)) = (flags.rpm.as_mut(), base.rpm.as_ref()) {
        *f = RpmConfig { delta: f.delta, ..*b };
    }
    Ok(base.overlay(flags))
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("SLOWMAN_THREADS") else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Config(format!("SLOWMAN_THREADS must be a positive integer, got '{raw}'")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn main_inner(cli: Cli) -> Result<i32, CliError> {
    configure_threads()?;
    let (kind, opts) = match &cli.command {
        Command::Project(o) => (CommandKind::Project, o),
        Command::Cascade(o) => (CommandKind::Cascade, o),
        Command::Rpm(o) => (CommandKind::Rpm, o),
        Command::Stability(o) => (CommandKind::Stability, o),
        Command::Region(o) => (CommandKind::Region, o),
        Command::Sweep(o) => (CommandKind::Sweep, o),
    };
    let resolved = load(kind, opts)?.resolve()?;
    if opts.verbose {
        print!("{}", json::to_string(&resolved.cfg)?);
    }
    let outcome = run::execute(&resolved)?;
    match &resolved.cfg.output {
        Some(path) => std::fs::write(path, &outcome.body)?,
        None => print!("{}", outcome.body),
    }
    Ok(outcome.code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match main_inner(cli) {
        Ok(code) => {
            match code {
                exit::NOT_CONVERGED => eprintln!("slowman: iteration did not converge within max_iters"),
                exit::DIVERGENCE => eprintln!("slowman: iteration diverged"),
                _ => {}
            }
            code
        }
        Err(e) => {
            eprintln!("slowman: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
