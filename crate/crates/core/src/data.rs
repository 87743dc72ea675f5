//! Driving logs: CSV I/O, control derivation, per-obstacle segmentation and
//! synthetic logs drawn from a known model.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::course::Course;
use crate::dynamics::{Control, VehicleState};
use crate::error::{Error, Result};
use crate::mle::{Dataset, Observation};
use crate::policy::{
    sample_trajectory_with, stream_rng, ControlGrid, Policy, SamplerConfig, Trajectory,
};
use crate::riskmodel::{DriverFeatures, RiskParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub state: VehicleState,
    /// Raw control channels, carried through untouched when present.
    pub control: Option<Control>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DriverLog {
    pub rows: Vec<LogRow>,
    pub driver_id: String,
    pub trial_id: String,
}

const HEADER: [&str; 5] = ["t", "x", "y", "v", "psi"];
const CONTROL_HEADER: [&str; 2] = ["u1", "u2"];

impl DriverLog {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn has_controls(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.control.is_some())
    }

    /// Log of a sampled trajectory; the final state reuses the last control.
    pub fn from_trajectory(traj: &Trajectory) -> Self {
        let rows = traj
            .times
            .iter()
            .zip(&traj.states)
            .enumerate()
            .map(|(i, (&t, &state))| LogRow {
                t,
                state,
                control: traj.controls.get(i).or(traj.controls.last()).copied(),
            })
            .collect();
        Self {
            rows,
            ..Self::default()
        }
    }

    /// Rows in `range` as a standalone log.
    pub fn slice(&self, range: Range<usize>) -> Self {
        Self {
            rows: self.rows[range].to_vec(),
            driver_id: self.driver_id.clone(),
            trial_id: self.trial_id.clone(),
        }
    }

    fn validate(&self, source_name: &str) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::Empty("driver log"));
        }
        for (i, r) in self.rows.iter().enumerate() {
            let line = i + 2;
            if !r.t.is_finite() || !r.state.is_finite() || r.control.is_some_and(|u| !u.is_finite()) {
                return Err(parse_error(source_name, line, "non-finite value"));
            }
            if i > 0 && r.t <= self.rows[i - 1].t {
                return Err(parse_error(source_name, line, "timestamps must be strictly increasing"));
            }
        }
        Ok(())
    }
}

fn parse_error(source_name: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        source_name: source_name.to_string(),
        line,
        message: message.into(),
    }
}

/// Parses a log from CSV text. Optional leading `# driver: ...` and
/// `# trial: ...` lines carry metadata; error line numbers count from the
/// first line of `text`.
pub fn parse_log(text: &str, source_name: &str) -> Result<DriverLog> {
    let mut log = DriverLog::default();
    let mut skipped = 0;
    let mut body = text;
    while let Some(rest) = body.strip_prefix('#') {
        let (line, tail) = rest.split_once('\n').unwrap_or((rest, ""));
        if let Some((key, value)) = line.split_once(':') {
            match key.trim() {
                "driver" => log.driver_id = value.trim().to_string(),
                "trial" => log.trial_id = value.trim().to_string(),
                _ => {}
            }
        }
        skipped += 1;
        body = tail;
    }
    if body.trim().is_empty() {
        return Err(Error::Empty("driver log"));
    }

    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(body.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| parse_error(source_name, skipped + 1, e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let with_controls = match header.len() {
        5 => false,
        7 => true,
        _ => {
            return Err(parse_error(
                source_name,
                skipped + 1,
                "expected header t,x,y,v,psi[,u1,u2]",
            ))
        }
    };
    if header.iter().zip(HEADER.iter().chain(&CONTROL_HEADER)).any(|(h, e)| h != e) {
        return Err(parse_error(source_name, skipped + 1, "expected header t,x,y,v,psi[,u1,u2]"));
    }

    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_error(source_name, skipped + line, e.to_string())
        })?;
        let line = skipped + record.position().map_or(0, |p| p.line() as usize);
        let values = record
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| parse_error(source_name, line, format!("cannot parse {f:?} as a number")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(parse_error(source_name, line, "non-finite value"));
        }
        if let Some(prev) = log.rows.last() {
            if values[0] <= prev.t {
                return Err(parse_error(source_name, line, "timestamps must be strictly increasing"));
            }
        }
        log.rows.push(LogRow {
            t: values[0],
            state: VehicleState::new(values[1], values[2], values[3], values[4]),
            control: with_controls.then(|| Control::new(values[5], values[6])),
        });
    }
    log.validate(source_name)?;
    Ok(log)
}

pub fn load_log(path: &Path) -> Result<DriverLog> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_log(&text, &path.display().to_string())
}

/// Canonical CSV form: shortest round-trip float formatting, `\n` endings.
pub fn log_to_csv(log: &DriverLog) -> String {
    let mut out = String::new();
    if !log.driver_id.is_empty() {
        let _ = writeln!(out, "# driver: {}", log.driver_id);
    }
    if !log.trial_id.is_empty() {
        let _ = writeln!(out, "# trial: {}", log.trial_id);
    }
    let controls = log.has_controls();
    out.push_str(&HEADER.join(","));
    if controls {
        out.push(',');
        out.push_str(&CONTROL_HEADER.join(","));
    }
    out.push('\n');
    for r in &log.rows {
        let s = r.state;
        let _ = write!(out, "{},{},{},{},{}", r.t, s.x, s.y, s.v, s.psi);
        if let (true, Some(u)) = (controls, r.control) {
            let _ = write!(out, ",{},{}", u.u1, u.u2);
        }
        out.push('\n');
    }
    out
}

pub fn save_log(log: &DriverLog, path: &Path) -> Result<()> {
    std::fs::write(path, log_to_csv(log)).map_err(|e| Error::io(path, e))
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Forward-difference controls; the last row repeats the previous control.
pub fn derive_controls(log: &DriverLog) -> Result<Vec<Control>> {
    if log.rows.len() < 2 {
        return Err(Error::invalid("deriving controls needs at least two rows"));
    }
    let mut out: Vec<Control> = log
        .rows
        .windows(2)
        .map(|w| {
            let dt = w[1].t - w[0].t;
            Control::new(
                (w[1].state.v - w[0].state.v) / dt,
                wrap_angle(w[1].state.psi - w[0].state.psi) / dt,
            )
        })
        .collect();
    out.push(*out.last().expect("at least one difference"));
    Ok(out)
}

/// Row subsampling for fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stride {
    /// Every k-th row with k chosen to give roughly 10 Hz.
    #[default]
    Auto,
    Every(usize),
}

impl Stride {
    fn resolve(self, log: &DriverLog) -> usize {
        match self {
            Stride::Every(k) => k.max(1),
            Stride::Auto => {
                let mut dts: Vec<f64> = log.rows.windows(2).map(|w| w[1].t - w[0].t).collect();
                if dts.is_empty() {
                    return 1;
                }
                dts.sort_by(f64::total_cmp);
                let median = dts[dts.len() / 2];
                ((0.1 / median).round() as usize).max(1)
            }
        }
    }
}

/// Fitting observations: every `stride`-th row except the last, paired with
/// its derived control snapped to the nearest grid cell.
pub fn to_dataset(log: &DriverLog, grid: &ControlGrid, stride: Stride) -> Result<Dataset> {
    let controls = derive_controls(log)?;
    let k = stride.resolve(log);
    let observations = (0..log.rows.len() - 1)
        .step_by(k)
        .map(|i| Observation {
            t: log.rows[i].t,
            state: log.rows[i].state,
            cell: grid.nearest_cell(&controls[i]),
        })
        .collect();
    Dataset::new(observations)
}

/// Contiguous rows attributed to one obstacle encounter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub obstacle: usize,
    pub start_row: usize,
    /// Exclusive.
    pub end_row: usize,
    /// Arc-length window `[s_obs - before, s_obs + after]`, unwrapped.
    pub s_window: [f64; 2],
}

impl Segment {
    pub fn rows(&self) -> Range<usize> {
        self.start_row..self.end_row
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentWindow {
    pub before: f64,
    pub after: f64,
}

impl Default for SegmentWindow {
    fn default() -> Self {
        Self {
            before: 100.0,
            after: 50.0,
        }
    }
}

fn in_window(course: &Course, s: f64, s_obs: f64, w: &SegmentWindow) -> bool {
    if course.is_closed() {
        course.arc_ahead(s, s_obs) <= w.before || course.arc_ahead(s_obs, s) <= w.after
    } else {
        s >= s_obs - w.before && s <= s_obs + w.after
    }
}

/// Splits a log into per-obstacle encounters. Each maximal run of rows inside
/// an obstacle's window becomes one segment, so a log passing an obstacle
/// twice yields two segments for it; overlapping windows share rows.
pub fn segment_by_obstacle(log: &DriverLog, course: &Course, window: &SegmentWindow) -> Result<Vec<Segment>> {
    if course.obstacles().is_empty() {
        return Err(Error::NoObstacles);
    }
    if !(window.before >= 0.0 && window.after >= 0.0) {
        return Err(Error::invalid("segment windows must be nonnegative"));
    }
    let arcs: Vec<f64> = log
        .rows
        .iter()
        .map(|r| course.project(&r.state.position().into()).s)
        .collect();
    let mut segments = Vec::new();
    for j in 0..course.obstacles().len() {
        let s_obs = course.obstacle_arc(j);
        let mut start = None;
        for (i, &s) in arcs.iter().enumerate() {
            match (in_window(course, s, s_obs, window), start) {
                (true, None) => start = Some(i),
                (false, Some(a)) => {
                    segments.push(make_segment(j, a, i, s_obs, window));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(a) = start {
            segments.push(make_segment(j, a, arcs.len(), s_obs, window));
        }
        if !segments.iter().any(|s| s.obstacle == j) {
            tracing::warn!(obstacle = j, "no log rows inside the obstacle window; segment omitted");
        }
    }
    segments.sort_by_key(|s| (s.start_row, s.obstacle));
    Ok(segments)
}

fn make_segment(obstacle: usize, start: usize, end: usize, s_obs: f64, w: &SegmentWindow) -> Segment {
    Segment {
        obstacle,
        start_row: start,
        end_row: end,
        s_window: [s_obs - w.before, s_obs + w.after],
    }
}

pub fn segment_manifest(segments: &[Segment]) -> String {
    let mut s = serde_json::to_string_pretty(segments).expect("segments serialize");
    s.push('\n');
    s
}

/// Log of one trajectory sampled from the driver model (stream 0 of
/// `cfg.seed`), with the sampled controls attached.
pub fn synthesize(
    theta: &RiskParams,
    course: &Course,
    s0: &VehicleState,
    cfg: &SamplerConfig,
    grid: &ControlGrid,
) -> Result<DriverLog> {
    theta.validate()?;
    let policy = Policy::new(course, grid, &DriverFeatures, cfg.preview, &cfg.integrator)?;
    let traj = sample_trajectory_with(&policy, &theta.to_weights(), s0, cfg, &mut stream_rng(cfg.seed, 0))?;
    Ok(DriverLog::from_trajectory(&traj))
}

/// Start-state distribution for short synthetic approach episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeDesign {
    pub episodes: usize,
    /// Control steps per episode.
    pub steps: usize,
    /// Arc distance from the constant-speed preview point to the obstacle at
    /// the start of an episode, m. Near zero puts the obstacle inside the
    /// preview fan.
    pub lead: [f64; 2],
    /// Lateral start offset, m.
    pub lateral: [f64; 2],
    /// Heading offset from the centerline tangent, rad.
    pub heading: [f64; 2],
    /// Start speed, m/s.
    pub speed: [f64; 2],
}

impl Default for EpisodeDesign {
    fn default() -> Self {
        Self {
            episodes: 6000,
            steps: 1,
            lead: [-1.0, 1.0],
            lateral: [-1.0, 1.0],
            heading: [-0.05, 0.05],
            speed: [17.0, 23.0],
        }
    }
}

/// Dataset pooled from many short episodes starting ahead of randomly
/// chosen obstacles. Episode `i` draws its start state from stream
/// `2 i` and its controls from stream `2 i + 1` of `cfg.seed`; the sampled
/// grid cells are used directly.
pub fn synthesize_episodes(
    theta: &RiskParams,
    course: &Course,
    design: &EpisodeDesign,
    cfg: &SamplerConfig,
    grid: &ControlGrid,
) -> Result<Dataset> {
    use rayon::prelude::*;
    theta.validate()?;
    if course.obstacles().is_empty() {
        return Err(Error::NoObstacles);
    }
    let policy = Policy::new(course, grid, &DriverFeatures, cfg.preview, &cfg.integrator)?;
    let weights = theta.to_weights();
    let episode_cfg = SamplerConfig {
        n_steps: design.steps,
        ..*cfg
    };
    let uniform = |rng: &mut rand_chacha::ChaCha8Rng, r: [f64; 2]| {
        if r[1] > r[0] {
            rng.random_range(r[0]..r[1])
        } else {
            r[0]
        }
    };
    let episodes = (0..design.episodes)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(cfg.seed, 2 * i as u64);
            let j = rng.random_range(0..course.obstacles().len());
            let lead = uniform(&mut rng, design.lead);
            let lateral = uniform(&mut rng, design.lateral);
            let heading = uniform(&mut rng, design.heading);
            let speed = uniform(&mut rng, design.speed);
            let s = (course.obstacle_arc(j) - lead - speed * cfg.preview).max(0.0);
            let mut s0 = course.state_at(s, lateral, speed);
            s0.psi += heading;
            let traj = sample_trajectory_with(&policy, &weights, &s0, &episode_cfg, &mut stream_rng(cfg.seed, 2 * i as u64 + 1))?;
            let t0 = i as f64 * (design.steps as f64 + 1.0) * cfg.dt;
            Ok(traj
                .controls
                .iter()
                .enumerate()
                .map(|(k, u)| Observation {
                    t: t0 + traj.times[k],
                    state: traj.states[k],
                    cell: grid.nearest_cell(u),
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(episodes.concat())
}
