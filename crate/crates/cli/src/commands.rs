use std::path::Path;

use rayon::prelude::*;
use riskfield::course::Course;
use riskfield::data::{
    log_to_csv, parse_log, segment_by_obstacle, segment_manifest, synthesize, to_dataset, DriverLog,
    Segment, SegmentWindow, Stride,
};
use riskfield::dynamics::{IntegratorConfig, VehicleState};
use riskfield::error::Error;
use riskfield::eval::{
    median_trajectory, render_velocity_svg, render_xy_svg, sweep, trajectory_csv, velocity_error, DeviationReport,
    Series,
};
use riskfield::mle::{select_preview_with_reports, FitConfig, FitReport};
use riskfield::policy::{sample_ensemble, ControlGrid, Ensemble, Policy, SamplerConfig, Trajectory};
use riskfield::riskmodel::{DriverFeatures, FittedModel, Param, QuantileTable};

use crate::manifest::{Outputs, RunManifest};
use crate::{Command, EvalArgs, FitArgs, PlotArgs, SampleArgs, Sampling, SweepArgs, SynthArgs};

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Self::usage(e.to_string())
        } else {
            Self::runtime(e.to_string())
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn run(command: Command, verbose: bool) -> Result<()> {
    match command {
        Command::Fit(a) => fit(a, verbose),
        Command::Sample(a) => sample(a),
        Command::Synth(a) => synth(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Plot(a) => plot(a),
    }
}

/// Reads an input file, recording its digest. Any failure here is a usage
/// error naming the path.
fn read_input(path: &Path, manifest: &mut RunManifest) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    manifest.input(path, &bytes);
    String::from_utf8(bytes).map_err(|_| CliError::usage(format!("{} is not UTF-8", path.display())))
}

fn load_course(path: &Path, manifest: &mut RunManifest) -> Result<Course> {
    let text = read_input(path, manifest)?;
    Course::from_json_str(&text, &path.display().to_string()).map_err(|e| CliError::usage(e.to_string()))
}

fn load_driver_log(path: &Path, manifest: &mut RunManifest) -> Result<DriverLog> {
    let text = read_input(path, manifest)?;
    parse_log(&text, &path.display().to_string()).map_err(|e| CliError::usage(e.to_string()))
}

fn load_model(path: &Path, manifest: &mut RunManifest) -> Result<FittedModel> {
    let text = read_input(path, manifest)?;
    FittedModel::from_json_str(&text, &path.display().to_string()).map_err(|e| CliError::usage(e.to_string()))
}

fn initial_state(course: &Course, init: &Option<Vec<f64>>) -> Result<VehicleState> {
    match init {
        None => Ok(course.state_at(0.0, 0.0, course.v_tgt())),
        Some(v) if v.len() == 4 => {
            let s = VehicleState::new(v[0], v[1], v[2], v[3]);
            if s.is_finite() {
                Ok(s)
            } else {
                Err(CliError::usage("--init values must be finite"))
            }
        }
        Some(_) => Err(CliError::usage("--init expects x,y,v,psi")),
    }
}

fn sampler(s: &Sampling, preview: f64) -> Result<SamplerConfig> {
    let cfg = SamplerConfig {
        preview,
        dt: s.dt,
        n_steps: s.steps,
        seed: s.seed,
        integrator: IntegratorConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn record_sampling(manifest: &mut RunManifest, cfg: &SamplerConfig, s0: &VehicleState) {
    manifest.set("preview", cfg.preview);
    manifest.set("dt", cfg.dt);
    manifest.set("steps", cfg.n_steps);
    manifest.set("init", [s0.x, s0.y, s0.v, s0.psi]);
    manifest.set("integrator_step", cfg.integrator.step);
    manifest.set("rng", "chacha8, stream = trajectory index");
}

fn fit(a: FitArgs, verbose: bool) -> Result<()> {
    let mut manifest = RunManifest::new("fit", None);
    let course = load_course(&a.course, &mut manifest)?;
    let log = load_driver_log(&a.log, &mut manifest)?;
    let grid = ControlGrid::default();
    let previews = a.preview.map_or(a.preview_grid.clone(), |p| vec![p]);
    let stride = a.stride.map_or(Stride::Auto, Stride::Every);
    let cfg = FitConfig {
        previews: previews.clone(),
        ..FitConfig::default()
    };
    manifest.set("previews", &previews);
    manifest.set("stride", a.stride.map_or("auto".to_string(), |k| k.to_string()));
    manifest.set("segmented", !a.no_segment);
    manifest.set("tolerance", cfg.tolerance);
    manifest.set("max_iterations", cfg.max_iterations);

    let window = SegmentWindow::default();
    let segments: Vec<Option<Segment>> = if a.no_segment {
        vec![None]
    } else {
        manifest.set("window_before_m", window.before);
        manifest.set("window_after_m", window.after);
        segment_by_obstacle(&log, &course, &window)?.into_iter().map(Some).collect()
    };

    let fits = segments
        .par_iter()
        .enumerate()
        .map(|(k, seg)| {
            let part = seg.as_ref().map_or_else(|| log.clone(), |s| log.slice(s.rows()));
            if part.len() < 2 {
                tracing::warn!(segment = k, "segment has fewer than two rows; skipped");
                return Ok(None);
            }
            let data = to_dataset(&part, &grid, stride)?;
            tracing::info!(segment = k, observations = data.len(), "fitting");
            let (best, reports) = select_preview_with_reports(&data, &course, &grid, &cfg)?;
            let report = reports
                .into_iter()
                .find(|(m, _)| m.preview == best.preview)
                .map(|(_, r)| r)
                .expect("selected preview was fitted");
            Ok(Some((best, report)))
        })
        .collect::<std::result::Result<Vec<Option<(FittedModel, FitReport)>>, Error>>()?;

    let mut out = Outputs::new();
    let mut fitted = Vec::new();
    let mut unconverged = Vec::new();
    for (k, (seg, fit)) in segments.iter().zip(&fits).enumerate() {
        let Some((model, report)) = fit else { continue };
        let name = match seg {
            Some(s) => format!("model_{k:02}_obstacle{}", s.obstacle),
            None => "model".to_string(),
        };
        out.add(format!("{name}.json"), model.to_json());
        if verbose {
            out.add(format!("{name}_convergence.csv"), report.trace_csv());
        }
        if !report.converged {
            unconverged.push(format!(
                "{name} (projected gradient {:.3e} after {} iterations)",
                report.grad_norm, report.iterations
            ));
        }
        fitted.push(model.params);
    }
    if fitted.is_empty() {
        return Err(CliError::usage("no segment had enough rows to fit"));
    }
    if !a.no_segment {
        let segs: Vec<Segment> = segments.into_iter().flatten().collect();
        out.add("segments.json", segment_manifest(&segs));
    }
    out.add("quantiles.csv", QuantileTable::from_samples(&fitted)?.to_csv());
    out.write(&a.out, &manifest)?;
    if !unconverged.is_empty() {
        return Err(CliError::runtime(format!(
            "{} fit(s) did not converge; best iterates written: {}",
            unconverged.len(),
            unconverged.join(", ")
        )));
    }
    Ok(())
}

fn sample(a: SampleArgs) -> Result<()> {
    let mut manifest = RunManifest::new("sample", Some(a.sampling.seed));
    let course = load_course(&a.course, &mut manifest)?;
    let model = load_model(&a.model, &mut manifest)?;
    let cfg = sampler(&a.sampling, a.preview.unwrap_or(model.preview))?;
    let s0 = initial_state(&course, &a.sampling.init)?;
    if a.n == 0 {
        return Err(CliError::usage("--n must be at least 1"));
    }
    record_sampling(&mut manifest, &cfg, &s0);
    manifest.set("n", a.n);
    manifest.set("params", model.params);

    let grid = ControlGrid::default();
    let policy = Policy::new(&course, &grid, &DriverFeatures, cfg.preview, &cfg.integrator)?;
    let ensemble = sample_ensemble(&policy, &model.params.to_weights(), &s0, &cfg, a.n)?;
    let mut out = Outputs::new();
    for (i, t) in ensemble.members.iter().enumerate() {
        out.add(format!("trajectory_{i:03}.csv"), trajectory_csv(t));
    }
    out.add("median.csv", trajectory_csv(&median_trajectory(&ensemble)?));
    out.write(&a.out, &manifest)
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut manifest = RunManifest::new("synth", Some(a.sampling.seed));
    let course = load_course(&a.course, &mut manifest)?;
    let model = match &a.model {
        Some(p) => load_model(p, &mut manifest)?,
        None => FittedModel::from_params(QuantileTable::default().median, 1.2),
    };
    let cfg = sampler(&a.sampling, a.preview.unwrap_or(model.preview))?;
    let s0 = initial_state(&course, &a.sampling.init)?;
    record_sampling(&mut manifest, &cfg, &s0);
    manifest.set("params", model.params);

    let log = synthesize(&model.params, &course, &s0, &cfg, &ControlGrid::default())?;
    let mut out = Outputs::new();
    out.add("log.csv", log_to_csv(&log));
    out.write(&a.out, &manifest)
}

fn log_trajectory(log: &DriverLog, start: usize) -> Trajectory {
    let rows = &log.rows[start..];
    Trajectory {
        times: rows.iter().map(|r| r.t - rows[0].t).collect(),
        states: rows.iter().map(|r| r.state).collect(),
        controls: Vec::new(),
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut manifest = RunManifest::new("eval", Some(a.seed));
    let course = load_course(&a.course, &mut manifest)?;
    let model = load_model(&a.model, &mut manifest)?;
    let log = load_driver_log(&a.log, &mut manifest)?;
    if a.horizons.is_empty() || a.horizons.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
        return Err(CliError::usage("--horizons must be positive"));
    }
    if a.n == 0 {
        return Err(CliError::usage("--n must be at least 1"));
    }
    let horizon = a.horizons.iter().copied().fold(0.0, f64::max);
    let steps = (horizon / a.dt - 1e-9).ceil() as usize;
    let starts: Vec<usize> = if a.no_segment {
        vec![0]
    } else {
        segment_by_obstacle(&log, &course, &SegmentWindow::default())?
            .iter()
            .map(|s| s.start_row)
            .collect()
    };
    manifest.set("n", a.n);
    manifest.set("horizons", &a.horizons);
    manifest.set("dt", a.dt);
    manifest.set("steps", steps);
    manifest.set("preview", model.preview);
    manifest.set("case_start_rows", &starts);
    manifest.set("rng", "case c uses seed + c; member i uses stream i");

    let grid = ControlGrid::default();
    let policy = Policy::new(&course, &grid, &DriverFeatures, model.preview, &IntegratorConfig::default())?;
    let weights = model.params.to_weights();
    let cases = starts
        .iter()
        .enumerate()
        .map(|(c, &start)| {
            let cfg = SamplerConfig {
                preview: model.preview,
                dt: a.dt,
                n_steps: steps,
                seed: a.seed.wrapping_add(c as u64),
                integrator: IntegratorConfig::default(),
            };
            let e = sample_ensemble(&policy, &weights, &log.rows[start].state, &cfg, a.n)?;
            Ok((e, log_trajectory(&log, start)))
        })
        .collect::<std::result::Result<Vec<(Ensemble, Trajectory)>, Error>>()?;

    let mut out = Outputs::new();
    let mut report = DeviationReport::new(a.horizons.clone());
    for (c, (e, reference)) in cases.iter().enumerate() {
        let median = median_trajectory(e)?;
        report.add_case(&median, reference)?;
        out.add(format!("median_case_{c:02}.csv"), trajectory_csv(&median));
    }
    out.add("deviation.csv", report.to_csv()?);
    let mut verr = String::from("horizon,velocity_error\n");
    for &h in &a.horizons {
        match velocity_error(&cases, h) {
            Ok(v) => verr.push_str(&format!("{h},{v}\n")),
            Err(Error::Misaligned(msg)) => tracing::warn!(horizon = h, "velocity error skipped: {msg}"),
            Err(e) => return Err(e.into()),
        }
    }
    out.add("velocity_error.csv", verr);
    out.write(&a.out, &manifest)
}

fn run_sweep(a: SweepArgs) -> Result<()> {
    let mut manifest = RunManifest::new("sweep", Some(a.sampling.seed));
    let course = load_course(&a.course, &mut manifest)?;
    let param: Param = a.param.parse().map_err(|e: Error| CliError::usage(e.to_string()))?;
    let quantiles = match &a.quantiles {
        Some(p) => {
            let text = read_input(p, &mut manifest)?;
            QuantileTable::from_csv_str(&text, &p.display().to_string()).map_err(|e| CliError::usage(e.to_string()))?
        }
        None => QuantileTable::default(),
    };
    let cfg = sampler(&a.sampling, a.preview)?;
    let s0 = initial_state(&course, &a.sampling.init)?;
    record_sampling(&mut manifest, &cfg, &s0);
    manifest.set("param", param.to_string());
    manifest.set("n", a.n);
    manifest.set("quantiles", quantiles);

    let result = sweep(&quantiles, param, a.n, &course, &s0, &cfg, &ControlGrid::default())?;
    let mut out = Outputs::new();
    for level in &result.levels {
        for (i, t) in level.ensemble.members.iter().enumerate() {
            out.add(format!("{}/trajectory_{i:03}.csv", level.level.as_str()), trajectory_csv(t));
        }
    }
    out.add("summary.csv", result.summary_csv());
    out.add("turn_rate.csv", result.turn_rate_csv());
    out.write(&a.out, &manifest)
}

fn plot(a: PlotArgs) -> Result<()> {
    let mut manifest = RunManifest::new("plot", None);
    let course = load_course(&a.course, &mut manifest)?;
    let mut trajectories = Vec::new();
    for p in &a.trajectories {
        trajectories.push(log_trajectory(&load_driver_log(p, &mut manifest)?, 0));
    }
    let reference = match &a.log {
        Some(p) => Some(log_trajectory(&load_driver_log(p, &mut manifest)?, 0)),
        None => None,
    };
    if trajectories.is_empty() && reference.is_none() {
        return Err(CliError::usage("nothing to plot: give trajectory files or --log"));
    }
    let mut series: Vec<Series<'_>> = trajectories
        .iter()
        .map(|t| Series {
            traj: t,
            color: "#1f77b4",
            width: 1.0,
            opacity: 0.35,
        })
        .collect();
    if let Some(r) = &reference {
        series.push(Series {
            traj: r,
            color: "black",
            width: 2.0,
            opacity: 1.0,
        });
    }
    let mut out = Outputs::new();
    out.add("trajectories.svg", render_xy_svg(&course, &series, 900.0, 600.0));
    out.add("velocity.svg", render_velocity_svg(&series, 900.0, 400.0));
    out.write(&a.out, &manifest)
}
