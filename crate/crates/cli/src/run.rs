//! Command execution: maps a resolved config onto library calls and renders
//! the result as CSV or JSON.

use serde::Serialize;

use slowman::harness::{compare_regions, empirical_threshold, order_of_accuracy, RegionSpec, StepSpec, Summary, SweepSpec};
use slowman::projector::{project, project_cascade, IterationStatus, IterationTrace};
use slowman::rpm::rpm_iterate;
use slowman::stability::{raster_region, spectrum_at, verdict, RasterMode, RasterSpec, StabilityReport};
use slowman::systems::FlowMap;
use slowman::table::{Table, Value};
use slowman::SlowError;

use crate::config::{CommandKind, Format, Resolved, StepMode};
use crate::error::{exit, CliError};
use crate::json;

/// Rendered output plus the exit code the run earned.
pub struct Outcome {
    pub body: String,
    pub code: i32,
}

pub fn execute(r: &Resolved) -> Result<Outcome, CliError> {
    match r.command() {
        CommandKind::Project => iterate(r, project),
        CommandKind::Rpm => {
            let rpm_cfg = r.cfg.rpm.unwrap_or_default();
            iterate(r, move |fm, cfg, x0, seed| rpm_iterate(fm, cfg, &rpm_cfg, x0, seed))
        }
        CommandKind::Cascade => cascade(r),
        CommandKind::Stability => stability(r),
        CommandKind::Region => region(r),
        CommandKind::Sweep => sweep(r),
    }
}

fn flow_map(r: &Resolved, eps: f64) -> Result<FlowMap, CliError> {
    let sys = r.system().with_epsilon(eps).build()?;
    let h_hat = match r.step_mode() {
        StepMode::Analytic => None,
        StepMode::Differenced => Some(r.cfg.h_hat_over_eps.unwrap_or(1.0) * eps),
    };
    Ok(FlowMap::with_default_step(sys, h_hat)?)
}

fn status_code(status: IterationStatus) -> i32 {
    match status {
        IterationStatus::Converged => exit::OK,
        IterationStatus::MaxIterations => exit::NOT_CONVERGED,
        IterationStatus::Diverged | IterationStatus::NonFinite => exit::DIVERGENCE,
    }
}

fn trace_table(traces: &[(usize, &IterationTrace)]) -> Table {
    let n_fast = traces.first().map_or(0, |(_, t)| t.output.len());
    let mut header = vec!["m".to_string(), "iteration".into(), "residual".into()];
    header.extend((0..n_fast).map(|i| format!("y{i}")));
    let mut t = Table {
        header,
        rows: Vec::new(),
    };
    for (m, trace) in traces {
        for (k, y) in trace.iterates.iter().enumerate() {
            let res = if k == 0 { f64::NAN } else { trace.residuals[k - 1] };
            let mut row: Vec<Value> = vec![(*m).into(), k.into(), res.into()];
            row.extend(y.iter().map(|v| Value::from(*v)));
            t.push(row);
        }
    }
    t
}

#[derive(Serialize)]
struct TraceReport<'a> {
    m: usize,
    status: IterationStatus,
    converged: bool,
    iterations: usize,
    x0: &'a [f64],
    output: &'a [f64],
    last_residual: Option<f64>,
    error_bound: f64,
    residuals: &'a [f64],
}

impl<'a> TraceReport<'a> {
    fn new(m: usize, t: &'a IterationTrace) -> Self {
        Self {
            m,
            status: t.status,
            converged: t.converged,
            iterations: t.iterations_used,
            x0: &t.x0,
            output: &t.output,
            last_residual: t.last_residual(),
            error_bound: t.error_bound,
            residuals: &t.residuals,
        }
    }
}

fn render<T: Serialize>(r: &Resolved, value: &T, table: impl FnOnce() -> Table) -> Result<String, CliError> {
    Ok(match r.format() {
        Format::Json => json::to_string(value)?,
        Format::Csv => table().to_csv(),
    })
}

fn iterate<F>(r: &Resolved, run: F) -> Result<Outcome, CliError>
where
    F: FnOnce(&FlowMap, &slowman::projector::IterationConfig, &[f64], &[f64]) -> slowman::Result<IterationTrace>,
{
    let fm = flow_map(r, r.epsilon())?;
    let cfg = r.iteration_config();
    let x0 = r.cfg.x0.as_deref().unwrap_or_default();
    let seed = r.cfg.seed.as_deref().unwrap_or_default();
    let trace = match run(&fm, &cfg, x0, seed) {
        Ok(t) => t,
        // the partial trace is still worth writing
        Err(SlowError::IterationDiverged { trace }) => *trace,
        Err(e) => return Err(e.into()),
    };
    let body = render(r, &TraceReport::new(cfg.m, &trace), || trace_table(&[(cfg.m, &trace)]))?;
    Ok(Outcome {
        body,
        code: status_code(trace.status),
    })
}

fn cascade(r: &Resolved) -> Result<Outcome, CliError> {
    let fm = flow_map(r, r.epsilon())?;
    let base = r.iteration_config();
    let base = slowman::projector::IterationConfig { m: 0, ..base };
    let x0 = r.cfg.x0.as_deref().unwrap_or_default();
    let seed = r.cfg.seed.as_deref().unwrap_or_default();
    let stages = project_cascade(&fm, &base, x0, seed, r.m())?;
    let indexed: Vec<(usize, &IterationTrace)> = stages.iter().enumerate().collect();
    let reports: Vec<TraceReport> = indexed.iter().map(|(m, t)| TraceReport::new(*m, t)).collect();
    let code = stages.iter().map(|t| status_code(t.status)).find(|c| *c != exit::OK).unwrap_or(exit::OK);
    let body = render(r, &reports, || trace_table(&indexed))?;
    Ok(Outcome { body, code })
}

fn stability(r: &Resolved) -> Result<Outcome, CliError> {
    let sys = r.system().build()?;
    let x0 = r.cfg.x0.as_deref().unwrap_or_default();
    let seed = r.cfg.seed.as_deref();
    let spectrum = spectrum_at(&sys, x0, seed)?;
    let report: StabilityReport = verdict(&sys, &r.iteration_config(), &spectrum)?;
    let body = render(r, &report, || {
        let mut t = Table::new(&[
            "lambda_re",
            "lambda_im",
            "modulus",
            "angle",
            "abs_multiplier",
            "in_sector",
            "h_max",
            "scaled_step",
        ]);
        for rec in &report.records {
            let e = &rec.eigenvalue;
            t.push(vec![
                e.lambda_re.into(),
                e.lambda_im.into(),
                e.modulus.into(),
                e.angle.into(),
                rec.abs_multiplier.into(),
                rec.in_sector.into(),
                // no stable step outside the sector
                rec.h_max.unwrap_or(f64::NAN).into(),
                rec.scaled_step.into(),
            ]);
        }
        t
    })?;
    Ok(Outcome { body, code: exit::OK })
}

#[derive(Serialize)]
struct CompareReport<'a> {
    summary: Summary,
    compared: usize,
    excluded: usize,
    mismatched: usize,
    cells: &'a [slowman::harness::RegionCell],
}

fn region(r: &Resolved) -> Result<Outcome, CliError> {
    let c = &r.cfg;
    let n = c.resolution.unwrap_or(256);
    let theta_range = c.theta_range.expect("resolved");
    let step_range = c.step_range.expect("resolved");
    let eta = c.eta.unwrap_or(1.0);
    if c.compare == Some(true) {
        if r.step_mode() != StepMode::Differenced {
            return Err(CliError::Config("region comparison is defined for the differenced scheme".into()));
        }
        let spec = RegionSpec {
            theta_range,
            step_range,
            epsilon: r.epsilon(),
            ..RegionSpec::new(r.m(), eta, (n, n))
        };
        let cmp = compare_regions(&spec, r.exec())?;
        let summary = Summary {
            mismatch: Some(cmp.mismatch),
            ..Default::default()
        };
        let report = CompareReport {
            summary,
            compared: cmp.compared,
            excluded: cmp.excluded,
            mismatched: cmp.mismatched,
            cells: &cmp.cells,
        };
        let body = render(r, &report, || cmp.to_table())?;
        return Ok(Outcome { body, code: exit::OK });
    }
    let spec = RasterSpec {
        m: r.m(),
        mode: match r.step_mode() {
            StepMode::Analytic => RasterMode::Analytic,
            StepMode::Differenced => RasterMode::Differenced { eta },
        },
        theta_range,
        step_range,
        resolution: (n, n),
    };
    let cells = raster_region(&spec, r.exec())?;
    let body = render(r, &cells, || {
        let mut t = Table::new(&["theta", "step", "abs_mu", "stable"]);
        for cell in &cells {
            t.push(vec![cell.theta.into(), cell.step.into(), cell.abs_mu.into(), cell.stable.into()]);
        }
        t
    })?;
    Ok(Outcome { body, code: exit::OK })
}

#[derive(Serialize)]
struct SweepReport<'a> {
    m: usize,
    summary: Summary,
    floor_limited: bool,
    points: &'a [slowman::harness::ErrorPoint],
    excluded: &'a [f64],
}

fn sweep(r: &Resolved) -> Result<Outcome, CliError> {
    let c = &r.cfg;
    let step = match r.step_mode() {
        StepMode::Analytic => StepSpec::Analytic {
            h_over_eps: c.h_over_eps.unwrap_or(1.0),
        },
        StepMode::Differenced => StepSpec::Differenced {
            h_hat_over_eps: c.h_hat_over_eps.unwrap_or(1.0),
            eta: c.eta.unwrap_or(1.0),
        },
    };
    let spec = SweepSpec {
        system: r.system().clone(),
        epsilons: c.epsilons.clone().unwrap_or_default(),
        m_values: c.m_values.clone().unwrap_or_default(),
        x0: c.x0.clone().unwrap_or_default(),
        y_seed: c.seed.clone(),
        step,
        tol: c.tol,
        max_iters: c.max_iters,
    };
    spec.validate()?;
    let fits = spec
        .m_values
        .iter()
        .map(|&m| order_of_accuracy(&spec, m, r.exec()))
        .collect::<slowman::Result<Vec<_>>>()?;
    let threshold = |m: usize| -> Result<Option<f64>, CliError> {
        let Some((lo, hi)) = c.threshold_range else { return Ok(None) };
        let eps = r.epsilon();
        let sys = r.system().build()?;
        let seed = c.seed.clone().unwrap_or_else(|| vec![0.0; sys.n_fast()]);
        let template = slowman::projector::IterationConfig::new(m, r.derivative_mode(), eps);
        let template = match c.tol {
            Some(tol) => template.with_tol(tol),
            None => template,
        };
        let t = empirical_threshold(&sys, &template, &spec.x0, &seed, (lo * eps, hi * eps))?;
        Ok(Some(t / eps))
    };
    let mut reports = Vec::with_capacity(fits.len());
    for fit in &fits {
        reports.push(SweepReport {
            m: fit.m,
            summary: Summary {
                slope: fit.slope,
                r_squared: fit.r_squared,
                threshold: threshold(fit.m)?,
                mismatch: None,
            },
            floor_limited: fit.floor_limited,
            points: &fit.points,
            excluded: &fit.excluded,
        });
    }
    let body = render(r, &reports, || {
        let mut all = Table::new(&["m", "epsilon", "error", "converged", "iterations"]);
        for fit in &fits {
            all.rows.extend(fit.to_table().rows);
        }
        all
    })?;
    Ok(Outcome { body, code: exit::OK })
}
