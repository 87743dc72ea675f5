//! Prediction-accuracy metrics and parameter sweeps.

use std::fmt::Write as _;

use rstar::{primitives::GeomWithData, RTree};
use serde::{Deserialize, Serialize};

use crate::course::Course;
use crate::dynamics::{Control, VehicleState};
use crate::error::{Error, Result};
use crate::policy::{sample_ensemble, ControlGrid, Ensemble, Policy, SamplerConfig, Trajectory};
use crate::riskmodel::{DriverFeatures, Param, QuantileTable, RiskParams};

/// Median of a slice (mean of the two middle values for even length).
fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Per-timestamp coordinate-wise median of the members.
pub fn median_trajectory(e: &Ensemble) -> Result<Trajectory> {
    let first = e.members.first().ok_or(Error::Empty("ensemble"))?;
    let mut buf = vec![0.0; e.members.len()];
    let mut column = |f: &dyn Fn(&Trajectory) -> f64| {
        for (b, m) in buf.iter_mut().zip(&e.members) {
            *b = f(m);
        }
        median(&mut buf)
    };
    let states = (0..first.states.len())
        .map(|i| {
            VehicleState::new(
                column(&|m| m.states[i].x),
                column(&|m| m.states[i].y),
                column(&|m| m.states[i].v),
                column(&|m| m.states[i].psi),
            )
        })
        .collect();
    let controls = (0..first.controls.len())
        .map(|i| Control::new(column(&|m| m.controls[i].u1), column(&|m| m.controls[i].u2)))
        .collect();
    Ok(Trajectory {
        times: first.times.clone(),
        states,
        controls,
    })
}

/// Distance from `p` to the polyline through `line` (a single point counts
/// as a degenerate polyline).
pub fn point_polyline_distance(p: [f64; 2], line: &[[f64; 2]]) -> Result<f64> {
    match line {
        [] => Err(Error::Empty("polyline")),
        [q] => Ok((p[0] - q[0]).hypot(p[1] - q[1])),
        _ => Ok(line
            .windows(2)
            .map(|w| point_segment_distance(p, w[0], w[1]))
            .fold(f64::INFINITY, f64::min)),
    }
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (fx, fy) = (a[0] + t * dx, a[1] + t * dy);
    (p[0] - fx).hypot(p[1] - fy)
}

/// Index of the sample at time `t`, allowing rounding in the timestamps.
fn time_index(times: &[f64], t: f64) -> Result<usize> {
    let end = times.last().copied().ok_or(Error::Empty("trajectory"))?;
    let tol = 1e-9 * t.abs().max(1.0);
    if !(t >= -tol && t <= end + tol) {
        return Err(Error::HorizonOutOfRange { horizon: t, end });
    }
    let i = times.partition_point(|&s| s < t - tol);
    if i < times.len() && (times[i] - t).abs() <= tol {
        Ok(i)
    } else {
        Err(Error::Misaligned(format!("no sample at t = {t}")))
    }
}

/// Distance from the median's position at each horizon to the reference
/// trajectory's polyline.
pub fn deviation(median: &Trajectory, reference: &Trajectory, horizons: &[f64]) -> Result<Vec<f64>> {
    let line: Vec<[f64; 2]> = reference.positions().collect();
    horizons
        .iter()
        .map(|&h| {
            let i = time_index(&median.times, h)?;
            point_polyline_distance(median.states[i].position(), &line)
        })
        .collect()
}

/// Deviations per evaluated case and horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationReport {
    pub horizons: Vec<f64>,
    /// `cases[c][h]`, metres.
    pub cases: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

impl DeviationReport {
    pub fn new(horizons: Vec<f64>) -> Self {
        Self {
            horizons,
            cases: Vec::new(),
        }
    }

    pub fn add_case(&mut self, median: &Trajectory, reference: &Trajectory) -> Result<()> {
        let row = deviation(median, reference, &self.horizons)?;
        self.cases.push(row);
        Ok(())
    }

    /// Min, median and max across cases for each horizon.
    pub fn summary(&self) -> Result<Vec<Summary>> {
        if self.cases.is_empty() {
            return Err(Error::Empty("deviation report"));
        }
        Ok((0..self.horizons.len())
            .map(|h| {
                let mut col: Vec<f64> = self.cases.iter().map(|c| c[h]).collect();
                let m = median(&mut col);
                Summary {
                    min: col[0],
                    median: m,
                    max: col[col.len() - 1],
                }
            })
            .collect())
    }

    /// One row per case, then `min`, `median` and `max` rows; one column per
    /// horizon.
    pub fn to_csv(&self) -> Result<String> {
        let summary = self.summary()?;
        let mut out = String::from("case");
        for h in &self.horizons {
            let _ = write!(out, ",{h}s");
        }
        out.push('\n');
        for (i, c) in self.cases.iter().enumerate() {
            out.push_str(&i.to_string());
            for d in c {
                let _ = write!(out, ",{d}");
            }
            out.push('\n');
        }
        for (name, pick) in [
            ("min", (|s: &Summary| s.min) as fn(&Summary) -> f64),
            ("median", |s| s.median),
            ("max", |s| s.max),
        ] {
            out.push_str(name);
            for s in &summary {
                let _ = write!(out, ",{}", pick(s));
            }
            out.push('\n');
        }
        Ok(out)
    }
}

/// Mean over cases of `|median ensemble speed - reference speed|` at
/// `horizon`.
pub fn velocity_error(cases: &[(Ensemble, Trajectory)], horizon: f64) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::Empty("evaluation cases"));
    }
    let mut total = 0.0;
    for (k, (ensemble, reference)) in cases.iter().enumerate() {
        let i = time_index(ensemble.times(), horizon)?;
        let j = time_index(&reference.times, horizon)?;
        let aligned = ensemble.times()[..=i]
            .iter()
            .zip(&reference.times[..=j])
            .all(|(a, b)| (a - b).abs() <= 1e-9 * a.abs().max(1.0));
        if i != j || !aligned {
            return Err(Error::Misaligned(format!("case {k}: ensemble and reference timestamps differ")));
        }
        let mut speeds: Vec<f64> = ensemble.members.iter().map(|m| m.states[i].v).collect();
        total += (median(&mut speeds) - reference.states[j].v).abs();
    }
    Ok(total / cases.len() as f64)
}

type ObstaclePoint = GeomWithData<[f64; 2], usize>;

/// Minimum distance from any trajectory position to any obstacle centre.
pub fn clearance(traj: &Trajectory, course: &Course) -> Result<f64> {
    if course.obstacles().is_empty() {
        return Err(Error::NoObstacles);
    }
    let tree: RTree<ObstaclePoint> = RTree::bulk_load(
        course
            .obstacles()
            .iter()
            .enumerate()
            .map(|(i, o)| ObstaclePoint::new([o.x, o.y], i))
            .collect(),
    );
    traj.positions()
        .map(|p| {
            let o = tree.nearest_neighbor(&p).expect("nonempty tree");
            (p[0] - o.geom()[0]).hypot(p[1] - o.geom()[1])
        })
        .reduce(f64::min)
        .ok_or(Error::Empty("trajectory"))
}

/// Root-mean-square distance from the centerline over all samples.
pub fn rms_centerline_deviation(traj: &Trajectory, course: &Course) -> Result<f64> {
    if traj.is_empty() {
        return Err(Error::Empty("trajectory"));
    }
    let sum: f64 = traj
        .positions()
        .map(|p| course.pt_line_distance(&p.into()).powi(2))
        .sum();
    Ok((sum / traj.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Low,
    Median,
    High,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Low, Level::Median, Level::High];

    pub fn as_str(self) -> &'static str {
        match self {
            Level::Low => "low",
            Level::Median => "median",
            Level::High => "high",
        }
    }
}

/// Ensemble statistics for one sweep level.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepStats {
    /// Median over members of each member's minimum obstacle clearance.
    pub median_min_clearance: f64,
    /// Median over members of each member's RMS centerline distance.
    pub median_rms_centerline: f64,
    /// Variance of all sampled accelerations.
    pub accel_variance: f64,
    /// Mean sampled turn rate at each control step.
    pub turn_rate_profile: Vec<f64>,
}

pub fn ensemble_stats(e: &Ensemble, course: &Course) -> Result<SweepStats> {
    let mut clear = e
        .members
        .iter()
        .map(|m| clearance(m, course))
        .collect::<Result<Vec<f64>>>()?;
    let mut rms = e
        .members
        .iter()
        .map(|m| rms_centerline_deviation(m, course))
        .collect::<Result<Vec<f64>>>()?;
    let accels: Vec<f64> = e.members.iter().flat_map(|m| m.controls.iter().map(|u| u.u1)).collect();
    let accel_variance = if accels.is_empty() {
        0.0
    } else {
        let mean = accels.iter().sum::<f64>() / accels.len() as f64;
        accels.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / accels.len() as f64
    };
    let steps = e.members[0].controls.len();
    let turn_rate_profile = (0..steps)
        .map(|k| e.members.iter().map(|m| m.controls[k].u2).sum::<f64>() / e.len() as f64)
        .collect();
    Ok(SweepStats {
        median_min_clearance: median(&mut clear),
        median_rms_centerline: median(&mut rms),
        accel_variance,
        turn_rate_profile,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepLevel {
    pub level: Level,
    pub params: RiskParams,
    pub ensemble: Ensemble,
    pub stats: SweepStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub param: Param,
    pub levels: Vec<SweepLevel>,
}

/// Sets `param` to each quantile level with the rest at their medians and
/// samples `n` trajectories per level. Every level uses the same seed, so
/// member `i` draws from the same stream across levels.
pub fn sweep(
    quantiles: &QuantileTable,
    param: Param,
    n: usize,
    course: &Course,
    s0: &VehicleState,
    cfg: &SamplerConfig,
    grid: &ControlGrid,
) -> Result<SweepResult> {
    if n == 0 {
        return Err(Error::invalid("sweep needs at least one trajectory per level"));
    }
    if course.obstacles().is_empty() {
        return Err(Error::NoObstacles);
    }
    let policy = Policy::new(course, grid, &DriverFeatures, cfg.preview, &cfg.integrator)?;
    let levels = Level::ALL
        .iter()
        .map(|&level| {
            let source = match level {
                Level::Low => &quantiles.low,
                Level::Median => &quantiles.median,
                Level::High => &quantiles.high,
            };
            let params = quantiles.median.with(param, source.get(param));
            params.validate()?;
            let ensemble = sample_ensemble(&policy, &params.to_weights(), s0, cfg, n)?;
            let stats = ensemble_stats(&ensemble, course)?;
            Ok(SweepLevel {
                level,
                params,
                ensemble,
                stats,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult { param, levels })
}

impl SweepResult {
    pub fn summary_csv(&self) -> String {
        let mut out = String::from(
            "level,param,value,A,B,C,D,E,median_min_clearance,median_rms_centerline,accel_variance,mean_abs_turn_rate\n",
        );
        for l in &self.levels {
            let w = l.params.to_weights();
            let profile = &l.stats.turn_rate_profile;
            let mean_abs = if profile.is_empty() {
                0.0
            } else {
                profile.iter().map(|u| u.abs()).sum::<f64>() / profile.len() as f64
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                l.level.as_str(),
                self.param,
                l.params.get(self.param),
                w[0],
                w[1],
                w[2],
                w[3],
                w[4],
                l.stats.median_min_clearance,
                l.stats.median_rms_centerline,
                l.stats.accel_variance,
                mean_abs
            );
        }
        out
    }

    /// Mean turn rate per control step, one column per level.
    pub fn turn_rate_csv(&self) -> String {
        let mut out = String::from("t");
        for l in &self.levels {
            let _ = write!(out, ",{}", l.level.as_str());
        }
        out.push('\n');
        let Some(first) = self.levels.first() else {
            return out;
        };
        for (k, t) in first.ensemble.times().iter().take(first.stats.turn_rate_profile.len()).enumerate() {
            out.push_str(&t.to_string());
            for l in &self.levels {
                let _ = write!(out, ",{}", l.stats.turn_rate_profile[k]);
            }
            out.push('\n');
        }
        out
    }
}

/// Trajectory CSV (`t,x,y,v,psi,u1,u2`); the final row repeats the last
/// control.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    crate::data::log_to_csv(&crate::data::DriverLog::from_trajectory(traj))
}

/// A drawable series for the SVG plots.
#[derive(Debug, Clone, Copy)]
pub struct Series<'a> {
    pub traj: &'a Trajectory,
    pub color: &'a str,
    pub width: f64,
    pub opacity: f64,
}

struct Frame {
    min: [f64; 2],
    /// Pixels per data unit along each axis.
    scale: [f64; 2],
    height: f64,
    margin: f64,
}

impl Frame {
    fn fit(points: impl Iterator<Item = [f64; 2]>, width: f64, height: f64, equal: bool) -> Self {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in points {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        if !lo[0].is_finite() {
            lo = [0.0; 2];
            hi = [1.0; 2];
        }
        let margin = 20.0;
        let sx = (width - 2.0 * margin) / (hi[0] - lo[0]).max(1e-9);
        let sy = (height - 2.0 * margin) / (hi[1] - lo[1]).max(1e-9);
        let scale = if equal { [sx.min(sy); 2] } else { [sx, sy] };
        Self {
            min: lo,
            scale,
            height,
            margin,
        }
    }

    fn map(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.margin + (p[0] - self.min[0]) * self.scale[0],
            self.height - self.margin - (p[1] - self.min[1]) * self.scale[1],
        ]
    }
}

fn polyline(out: &mut String, frame: &Frame, pts: impl Iterator<Item = [f64; 2]>, style: &str) {
    out.push_str("<polyline points=\"");
    for (i, p) in pts.enumerate() {
        let q = frame.map(p);
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{:.2},{:.2}", q[0], q[1]);
    }
    let _ = writeln!(out, "\" fill=\"none\" {style}/>");
}

/// Plan view: centerline, obstacles and the given trajectories, equal axes.
pub fn render_xy_svg(course: &Course, series: &[Series<'_>], width: f64, height: f64) -> String {
    let traj_points = series.iter().flat_map(|s| s.traj.positions());
    let frame = Frame::fit(traj_points.chain(course.obstacles().iter().map(|o| [o.x, o.y])), width, height, true);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">"
    );
    let _ = writeln!(out, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let mut line: Vec<[f64; 2]> = course.centerline().iter().map(|p| [p.x, p.y]).collect();
    if course.is_closed() {
        line.push(line[0]);
    }
    polyline(&mut out, &frame, line.into_iter(), "stroke=\"#999\" stroke-dasharray=\"4 3\" stroke-width=\"1\"");
    for s in series {
        let style = format!(
            "stroke=\"{}\" stroke-width=\"{}\" stroke-opacity=\"{}\"",
            s.color, s.width, s.opacity
        );
        polyline(&mut out, &frame, s.traj.positions(), &style);
    }
    let r = (0.5 * course.obstacle_diameter() * frame.scale[0]).max(2.0);
    for o in course.obstacles() {
        let q = frame.map([o.x, o.y]);
        let _ = writeln!(out, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"{r:.2}\" fill=\"#c00\"/>", q[0], q[1]);
    }
    out.push_str("</svg>\n");
    out
}

/// Speed against time for the given trajectories.
pub fn render_velocity_svg(series: &[Series<'_>], width: f64, height: f64) -> String {
    let pts = |t: &Trajectory| -> Vec<[f64; 2]> { t.times.iter().zip(&t.states).map(|(t, s)| [*t, s.v]).collect() };
    let frame = Frame::fit(series.iter().flat_map(|s| pts(s.traj)), width, height, false);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">"
    );
    let _ = writeln!(out, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    for s in series {
        let style = format!(
            "stroke=\"{}\" stroke-width=\"{}\" stroke-opacity=\"{}\"",
            s.color, s.width, s.opacity
        );
        polyline(&mut out, &frame, pts(s.traj).into_iter(), &style);
    }
    out.push_str("</svg>\n");
    out
}
