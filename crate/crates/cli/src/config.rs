//! Run configuration: JSON file merged with command-line flags.
//!
//! Every field is optional on input; [`RunConfig::resolve`] fills defaults so
//! the echoed config reproduces the run exactly when fed back via `--config`.

use std::f64::consts::{FRAC_PI_2, PI};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use slowman::derivatives::DerivativeMode;
use slowman::par::Exec;
use slowman::projector::{IterationConfig, SeedPolicy, DEFAULT_MAX_ITERS};
use slowman::rpm::RpmConfig;
use slowman::systems::SystemSpec;

use crate::error::CliError;

const DEFAULT_EPSILON: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum CommandKind {
    Project,
    Cascade,
    Rpm,
    Stability,
    Region,
    Sweep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum StepMode {
    Analytic,
    Differenced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub command: Option<CommandKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub system: Option<SystemSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<StepMode>,
    /// `H / eps`; in differenced mode derived from `eta * H_hat / eps` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h_over_eps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h_hat_over_eps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed_policy: Option<SeedPolicy>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_iters: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rpm: Option<RpmConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resolution: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_range: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step_range: Option<(f64, f64)>,
    /// Region only: also iterate every cell and report the mismatch.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compare: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilons: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m_values: Option<Vec<usize>>,
    /// Sweep only: bisection bracket for the empirical threshold, in units of eps.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold_range: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exec: Option<Exec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format: Option<Format>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident; $($f:ident),*) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f; } )*
    };
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("config file: {e}")))
    }

    /// Fields set in `flags` win; system parameters merge key by key unless
    /// the system id changes.
    pub fn overlay(mut self, flags: RunConfig) -> Self {
        if let Some(sys) = flags.system {
            self.system = Some(match self.system.take() {
                Some(mut base) if base.id == sys.id => {
                    base.params.extend(sys.params);
                    base
                }
                _ => sys,
            });
        }
        overlay!(self, flags; command, m, mode, h_over_eps, h_hat_over_eps, eta, x0, seed, seed_policy, tol,
            max_iters, rpm, resolution, theta_range, step_range, compare, epsilons, m_values, threshold_range,
            exec, output, format);
        self
    }

    /// Fills every default the command uses and validates numeric options.
    pub fn resolve(mut self) -> Result<Resolved, CliError> {
        let command = self.command.ok_or_else(|| CliError::Config("no command given".into()))?;
        let mut system = self.system.take().unwrap_or_else(|| SystemSpec::new("linear"));
        if system.epsilon().is_none() {
            system = system.with_epsilon(DEFAULT_EPSILON);
        }
        let sys = system.build()?;
        let eps = sys.epsilon();
        let m = *self.m.get_or_insert(1);
        let mode = *self.mode.get_or_insert(StepMode::Analytic);
        if command == CommandKind::Region || mode == StepMode::Differenced {
            self.eta.get_or_insert(1.0);
        }
        if mode == StepMode::Differenced && command != CommandKind::Region {
            let eta = self.eta.unwrap_or(1.0);
            let h_hat = *self.h_hat_over_eps.get_or_insert(1.0);
            self.h_over_eps.get_or_insert(eta * h_hat);
        }
        match command {
            CommandKind::Region => {
                self.resolution.get_or_insert(256);
                self.theta_range.get_or_insert((FRAC_PI_2, 1.5 * PI));
                self.step_range.get_or_insert((0.0, 3.0));
                self.compare.get_or_insert(false);
            }
            CommandKind::Sweep => {
                self.epsilons.get_or_insert_with(|| vec![1e-2, 5e-3, 2e-3, 1e-3]);
                self.m_values.get_or_insert_with(|| vec![m]);
                self.h_over_eps.get_or_insert(1.0);
                self.x0.get_or_insert_with(|| vec![1.0; sys.n_slow()]);
            }
            _ => {
                self.h_over_eps.get_or_insert(1.0);
                self.x0.get_or_insert_with(|| vec![1.0; sys.n_slow()]);
                self.seed.get_or_insert_with(|| vec![0.0; sys.n_fast()]);
                self.seed_policy.get_or_insert(SeedPolicy::UserValue);
                // a cascade tightens its stage-0 tolerance by eps per stage
                let order = if command == CommandKind::Cascade { 0 } else { m };
                self.tol.get_or_insert(eps.powi(order as i32 + 1));
                self.max_iters.get_or_insert(DEFAULT_MAX_ITERS);
            }
        }
        if command == CommandKind::Rpm {
            self.rpm.get_or_insert_with(RpmConfig::default);
        }
        self.exec.get_or_insert_with(Exec::default);
        self.format.get_or_insert(match command {
            CommandKind::Region | CommandKind::Sweep => Format::Csv,
            _ => Format::Json,
        });
        self.command = Some(command);
        self.system = Some(system);
        let resolved = Resolved { cfg: self };
        resolved.validate()?;
        Ok(resolved)
    }
}

/// A [`RunConfig`] whose defaults have been filled in and checked.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub cfg: RunConfig,
}

fn check(ok: bool, msg: impl Into<String>) -> Result<(), CliError> {
    if ok { Ok(()) } else { Err(CliError::Config(msg.into())) }
}

fn positive(name: &str, v: Option<f64>) -> Result<(), CliError> {
    match v {
        Some(v) => check(v > 0.0 && v.is_finite(), format!("{name} must be positive and finite, got {v}")),
        None => Ok(()),
    }
}

impl Resolved {
    pub fn command(&self) -> CommandKind {
        self.cfg.command.expect("resolved")
    }
    pub fn system(&self) -> &SystemSpec {
        self.cfg.system.as_ref().expect("resolved")
    }
    pub fn epsilon(&self) -> f64 {
        self.system().epsilon().expect("resolved")
    }
    pub fn m(&self) -> usize {
        self.cfg.m.expect("resolved")
    }
    pub fn exec(&self) -> Exec {
        self.cfg.exec.expect("resolved")
    }
    pub fn format(&self) -> Format {
        self.cfg.format.expect("resolved")
    }
    pub fn step_mode(&self) -> StepMode {
        self.cfg.mode.expect("resolved")
    }

    /// Derivative mode at the configured epsilon.
    pub fn derivative_mode(&self) -> DerivativeMode {
        self.derivative_mode_at(self.epsilon())
    }

    pub fn derivative_mode_at(&self, eps: f64) -> DerivativeMode {
        let c = &self.cfg;
        match self.step_mode() {
            StepMode::Analytic => DerivativeMode::analytic(c.h_over_eps.unwrap_or(1.0) * eps),
            StepMode::Differenced => {
                DerivativeMode::forward_difference(c.h_hat_over_eps.unwrap_or(1.0) * eps, c.eta.unwrap_or(1.0))
            }
        }
    }

    pub fn iteration_config(&self) -> IterationConfig {
        let c = &self.cfg;
        IterationConfig::new(self.m(), self.derivative_mode(), self.epsilon())
            .with_tol(c.tol.unwrap_or(f64::NAN))
            .with_max_iters(c.max_iters.unwrap_or(DEFAULT_MAX_ITERS))
            .with_seed_policy(c.seed_policy.unwrap_or(SeedPolicy::UserValue))
    }

    fn validate(&self) -> Result<(), CliError> {
        let c = &self.cfg;
        positive("H/eps", c.h_over_eps)?;
        positive("H_hat/eps", c.h_hat_over_eps)?;
        positive("eta", c.eta)?;
        positive("tol", c.tol)?;
        if let (StepMode::Differenced, Some(h), Some(h_hat), Some(eta)) =
            (self.step_mode(), c.h_over_eps, c.h_hat_over_eps, c.eta)
        {
            check(
                (h - eta * h_hat).abs() <= 1e-12 * h,
                format!("differenced mode requires H = eta * H_hat, got H/eps = {h}, eta * H_hat/eps = {}", eta * h_hat),
            )?;
        }
        if let Some(n) = c.max_iters {
            check(n > 0, "max_iters must be at least 1")?;
        }
        if let Some(r) = &c.rpm {
            r.validate()?;
        }
        let cmd = self.command();
        if matches!(cmd, CommandKind::Project | CommandKind::Cascade | CommandKind::Rpm | CommandKind::Stability) {
            self.iteration_config().validate(self.epsilon())?;
        }
        if let Some(r) = c.resolution {
            check(
                r > 0 && r <= slowman::stability::MAX_RASTER_RESOLUTION,
                format!("resolution must lie in 1..={}", slowman::stability::MAX_RASTER_RESOLUTION),
            )?;
        }
        if let Some((lo, hi)) = c.threshold_range {
            check(lo > 0.0 && lo < hi && hi.is_finite(), "threshold_range must satisfy 0 < lo < hi")?;
        }
        Ok(())
    }
}
