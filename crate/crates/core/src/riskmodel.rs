//! Additive risk field and control cost.
//!
//! Both are nonnegative weighted sums of fixed features:
//! `risk(x) = sum_j p_j f_j(x)` and `cost(u) = sum_i q_i g_i(u)`. The
//! [`FeatureMap`] trait is the generic contract the likelihood works with;
//! [`DriverFeatures`] is the lane-keeping / obstacle / speed instantiation
//! with quadratic control costs.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::course::{Course, Point};
use crate::dynamics::{Control, VehicleState};
use crate::error::{Error, Result};

/// Weights of the driver risk field and control cost.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RiskParams {
    /// Squared centerline distance.
    #[serde(rename = "A")]
    pub a: f64,
    /// Obstacle proximity.
    #[serde(rename = "B")]
    pub b: f64,
    /// Squared speed error.
    #[serde(rename = "C")]
    pub c: f64,
    /// Squared acceleration.
    #[serde(rename = "D")]
    pub d: f64,
    /// Squared turning rate.
    #[serde(rename = "E")]
    pub e: f64,
}

impl RiskParams {
    pub fn new(a: f64, b: f64, c: f64, d: f64, e: f64) -> Result<Self> {
        let p = Self { a, b, c, d, e };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (param, w) in Param::ALL.iter().zip(self.to_weights()) {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::invalid(format!(
                    "parameter {param} must be nonnegative and finite, got {w}"
                )));
            }
        }
        Ok(())
    }

    /// Weights ordered (A, B, C, D, E): risk weights first, then cost weights.
    pub fn to_weights(&self) -> [f64; 5] {
        [self.a, self.b, self.c, self.d, self.e]
    }

    pub fn from_weights(w: &[f64]) -> Result<Self> {
        match *w {
            [a, b, c, d, e] => Self::new(a, b, c, d, e),
            _ => Err(Error::invalid(format!("expected 5 weights, got {}", w.len()))),
        }
    }

    pub fn get(&self, p: Param) -> f64 {
        self.to_weights()[p as usize]
    }

    pub fn with(mut self, p: Param, value: f64) -> Self {
        match p {
            Param::A => self.a = value,
            Param::B => self.b = value,
            Param::C => self.c = value,
            Param::D => self.d = value,
            Param::E => self.e = value,
        }
        self
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            a: k * self.a,
            b: k * self.b,
            c: k * self.c,
            d: k * self.d,
            e: k * self.e,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Param {
    A = 0,
    B = 1,
    C = 2,
    D = 3,
    E = 4,
}

impl Param {
    pub const ALL: [Param; 5] = [Param::A, Param::B, Param::C, Param::D, Param::E];
}

impl fmt::Display for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Param::A => "A",
            Param::B => "B",
            Param::C => "C",
            Param::D => "D",
            Param::E => "E",
        })
    }
}

impl FromStr for Param {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(Param::A),
            "B" | "b" => Ok(Param::B),
            "C" | "c" => Ok(Param::C),
            "D" | "d" => Ok(Param::D),
            "E" | "e" => Ok(Param::E),
            other => Err(Error::UnknownParameter(other.to_string())),
        }
    }
}

/// Feature functions of an additive risk/cost model.
///
/// Implementations must return nonnegative, finite features. Weights are laid
/// out as `[risk weights..., cost weights...]`.
pub trait FeatureMap: Send + Sync {
    fn name(&self) -> &str;
    fn risk_dim(&self) -> usize;
    fn cost_dim(&self) -> usize;
    fn risk_features(&self, s: &VehicleState, course: &Course, out: &mut [f64]) -> Result<()>;
    fn cost_features(&self, u: &Control, out: &mut [f64]);

    fn dim(&self) -> usize {
        self.risk_dim() + self.cost_dim()
    }
}

/// Identifier written to fitted-model files for [`DriverFeatures`].
pub const DRIVER_FEATURE_SET: &str = "eq3-eq4";

/// Risk features `(d_center^2, exp(-d_obs^2 / d_o^2), (v - v_tgt)^2)` and
/// cost features `(u1^2, u2^2)`.
///
/// The obstacle feature is zero when no obstacle lies ahead, including on a
/// course without obstacles.
#[derive(Debug, Clone, Copy, Default)]
pub struct DriverFeatures;

impl FeatureMap for DriverFeatures {
    fn name(&self) -> &str {
        DRIVER_FEATURE_SET
    }

    fn risk_dim(&self) -> usize {
        3
    }

    fn cost_dim(&self) -> usize {
        2
    }

    fn risk_features(&self, s: &VehicleState, course: &Course, out: &mut [f64]) -> Result<()> {
        let f = state_features(s, course)?;
        out.copy_from_slice(&f);
        Ok(())
    }

    fn cost_features(&self, u: &Control, out: &mut [f64]) {
        out.copy_from_slice(&control_features(u));
    }
}

pub fn state_features(s: &VehicleState, course: &Course) -> Result<[f64; 3]> {
    if !s.is_finite() {
        return Err(Error::invalid("non-finite state"));
    }
    let pos = Point::new(s.x, s.y);
    let loc = course.locate(&pos);
    let obstacle = if course.obstacles().is_empty() {
        0.0
    } else {
        let d = course.obstacle_distance_at(&pos, &loc)?;
        let d_o = course.obstacle_diameter();
        if d.is_finite() {
            (-(d * d) / (d_o * d_o)).exp()
        } else {
            0.0
        }
    };
    let dv = s.v - course.v_tgt();
    Ok([loc.distance * loc.distance, obstacle, dv * dv])
}

pub fn control_features(u: &Control) -> [f64; 2] {
    [u.u1 * u.u1, u.u2 * u.u2]
}

pub fn risk(s: &VehicleState, theta: &RiskParams, course: &Course) -> Result<f64> {
    let [f1, f2, f3] = state_features(s, course)?;
    Ok(theta.a * f1 + theta.b * f2 + theta.c * f3)
}

pub fn cost(u: &Control, theta: &RiskParams) -> f64 {
    let [g1, g2] = control_features(u);
    theta.d * g1 + theta.e * g2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub converged: bool,
    pub iterations: usize,
    /// Sup-norm of the projected gradient at the returned iterate.
    pub grad_norm: f64,
}

/// Fitted model file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub params: RiskParams,
    pub preview: f64,
    pub feature_set: String,
    pub loglik: f64,
    pub n_obs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convergence: Option<Convergence>,
}

impl FittedModel {
    /// A model built from known weights rather than fitted.
    pub fn from_params(params: RiskParams, preview: f64) -> Self {
        Self {
            params,
            preview,
            feature_set: DRIVER_FEATURE_SET.to_string(),
            loglik: 0.0,
            n_obs: 0,
            convergence: None,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("model serialises");
        s.push('\n');
        s
    }

    pub fn from_json_str(text: &str, source_name: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text).map_err(|e| Error::Parse {
            source_name: source_name.to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        model.params.validate()?;
        if model.feature_set != DRIVER_FEATURE_SET {
            return Err(Error::invalid(format!(
                "{source_name}: unsupported feature_set `{}`",
                model.feature_set
            )));
        }
        if !(model.preview.is_finite() && model.preview > 0.0) {
            return Err(Error::invalid(format!(
                "{source_name}: preview must be positive, got {}",
                model.preview
            )));
        }
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text, &path.display().to_string())
    }
}

/// 5th / 50th / 95th percentile weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileTable {
    pub low: RiskParams,
    pub median: RiskParams,
    pub high: RiskParams,
}

impl Default for QuantileTable {
    /// Per-obstacle fits reported for human drivers.
    fn default() -> Self {
        Self {
            low: RiskParams { a: 0.248, b: 0.000, c: 0.000, d: 0.000, e: 14.233 },
            median: RiskParams { a: 0.544, b: 16.349, c: 0.000, d: 1.416, e: 40.782 },
            high: RiskParams { a: 0.939, b: 110.864, c: 0.025, d: 11.827, e: 99.543 },
        }
    }
}

impl QuantileTable {
    /// Per-coordinate 5/50/95% quantiles (linear interpolation) of a set of fits.
    pub fn from_samples(samples: &[RiskParams]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("parameter sample"));
        }
        let mut q = [[0.0; 5]; 3];
        for (k, param) in Param::ALL.iter().enumerate() {
            let mut column: Vec<f64> = samples.iter().map(|p| p.get(*param)).collect();
            column.sort_by(f64::total_cmp);
            for (row, level) in [0.05, 0.5, 0.95].into_iter().enumerate() {
                q[row][k] = quantile_sorted(&column, level);
            }
        }
        Ok(Self {
            low: RiskParams::from_weights(&q[0])?,
            median: RiskParams::from_weights(&q[1])?,
            high: RiskParams::from_weights(&q[2])?,
        })
    }

    /// CSV with header `quantile,A,B,C,D,E` and rows 5%, 50%, 95%.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("quantile,A,B,C,D,E\n");
        for (label, p) in [("5%", &self.low), ("50%", &self.median), ("95%", &self.high)] {
            let w = p.to_weights();
            out.push_str(&format!("{label},{},{},{},{},{}\n", w[0], w[1], w[2], w[3], w[4]));
        }
        out
    }

    /// Parses the [`to_csv`](Self::to_csv) layout.
    pub fn from_csv_str(text: &str, source_name: &str) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            source_name: source_name.to_string(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, h)) if h.trim() == "quantile,A,B,C,D,E" => {}
            _ => return Err(parse_err(1, "expected header quantile,A,B,C,D,E".into())),
        }
        let mut rows: [Option<RiskParams>; 3] = [None; 3];
        for (i, line) in lines {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let slot = match fields.first() {
                Some(&"5%") => 0,
                Some(&"50%") => 1,
                Some(&"95%") => 2,
                _ => return Err(parse_err(i + 1, format!("unknown quantile row {line:?}"))),
            };
            if fields.len() != 6 {
                return Err(parse_err(i + 1, "expected 6 fields".into()));
            }
            let w = fields[1..]
                .iter()
                .map(|f| f.parse::<f64>().map_err(|_| parse_err(i + 1, format!("cannot parse {f:?}"))))
                .collect::<Result<Vec<f64>>>()?;
            rows[slot] = Some(RiskParams::from_weights(&w).map_err(|e| parse_err(i + 1, e.to_string()))?);
        }
        match rows {
            [Some(low), Some(median), Some(high)] => Ok(Self { low, median, high }),
            _ => Err(parse_err(1, "need 5%, 50% and 95% rows".into())),
        }
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}
