//! Driving course: a centerline polyline with point obstacles.
//!
//! Positions are located against the centerline by arc length. "Next
//! obstacle" means the obstacle with the smallest arc coordinate at or ahead
//! of the query point's own arc coordinate; the vehicle heading plays no part.

use std::f64::consts::PI;
use std::path::Path;

use rstar::primitives::{GeomWithData, Line};
use rstar::RTree;
use serde::{Deserialize, Serialize};

use crate::dynamics::VehicleState;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// Position along the centerline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArcCoordinate {
    /// Arc length from the centerline start, m.
    pub s: f64,
    /// Signed offset, m; positive to the left of the direction of travel.
    pub lateral: f64,
}

/// Result of locating a point against the centerline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Location {
    /// Distance to the nearest centerline point.
    pub distance: f64,
    pub arc: ArcCoordinate,
    /// Index of the segment holding the chosen foot point.
    pub segment: usize,
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    a: Point,
    b: Point,
    s0: f64,
    len: f64,
}

impl Segment {
    /// Foot parameter in [0, 1] and distance from `p`.
    #[inline]
    fn foot(&self, p: &Point) -> (f64, f64) {
        let (dx, dy) = (self.b.x - self.a.x, self.b.y - self.a.y);
        let (px, py) = (p.x - self.a.x, p.y - self.a.y);
        let t = ((px * dx + py * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
        let (fx, fy) = (self.a.x + t * dx, self.a.y + t * dy);
        (t, (p.x - fx).hypot(p.y - fy))
    }

    fn side(&self, p: &Point) -> f64 {
        let cross = (self.b.x - self.a.x) * (p.y - self.a.y) - (self.b.y - self.a.y) * (p.x - self.a.x);
        if cross < 0.0 {
            -1.0
        } else {
            1.0
        }
    }

    fn heading(&self) -> f64 {
        (self.b.y - self.a.y).atan2(self.b.x - self.a.x)
    }
}

type IndexedLine = GeomWithData<Line<[f64; 2]>, usize>;

/// On-disk course description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CourseFile {
    pub centerline: Vec<Point>,
    #[serde(default)]
    pub obstacles: Vec<Point>,
    #[serde(default = "default_obstacle_diameter")]
    pub obstacle_diameter: f64,
    #[serde(default = "default_lane_width")]
    pub lane_width: f64,
    #[serde(default = "default_v_tgt")]
    pub v_tgt: f64,
    #[serde(default)]
    pub closed: bool,
}

impl CourseFile {
    /// Open course with default diameter, lane width and target speed.
    pub fn with_defaults(centerline: Vec<Point>, obstacles: Vec<Point>) -> Self {
        Self {
            centerline,
            obstacles,
            obstacle_diameter: default_obstacle_diameter(),
            lane_width: default_lane_width(),
            v_tgt: default_v_tgt(),
            closed: false,
        }
    }
}

fn default_obstacle_diameter() -> f64 {
    0.3
}
fn default_lane_width() -> f64 {
    3.0
}
fn default_v_tgt() -> f64 {
    20.0
}

/// Validated, immutable course with a precomputed arc-length table and a
/// spatial index over the centerline segments.
#[derive(Debug, Clone)]
pub struct Course {
    spec: CourseFile,
    segments: Vec<Segment>,
    length: f64,
    index: RTree<IndexedLine>,
    /// Obstacle arc coordinates, indexed like `spec.obstacles`.
    obstacle_s: Vec<f64>,
    /// Obstacle indices sorted by arc coordinate.
    obstacle_order: Vec<usize>,
}

/// Which invariant a [`CourseFile`] broke, with enough context to point at
/// the offending JSON line.
enum Violation {
    Field(&'static str, String),
    CenterlinePoint(usize, String),
    ObstaclePoint(usize, String),
}

impl Course {
    pub fn new(spec: CourseFile) -> Result<Self> {
        Self::build(spec).map_err(|v| match v {
            Violation::Field(_, m) | Violation::CenterlinePoint(_, m) | Violation::ObstaclePoint(_, m) => {
                Error::invalid(m)
            }
        })
    }

    fn build(spec: CourseFile) -> std::result::Result<Self, Violation> {
        let pts = &spec.centerline;
        if pts.len() < 2 {
            return Err(Violation::Field(
                "centerline",
                format!("centerline needs at least 2 points, got {}", pts.len()),
            ));
        }
        for (i, p) in pts.iter().enumerate() {
            if !p.is_finite() {
                return Err(Violation::CenterlinePoint(i, format!("centerline point {i} is not finite")));
            }
            if i > 0 && pts[i - 1] == *p {
                return Err(Violation::CenterlinePoint(
                    i,
                    format!("centerline point {i} duplicates point {}", i - 1),
                ));
            }
        }
        for (i, p) in spec.obstacles.iter().enumerate() {
            if !p.is_finite() {
                return Err(Violation::ObstaclePoint(i, format!("obstacle {i} is not finite")));
            }
        }
        let positive = |name: &'static str, value: f64| {
            if value.is_finite() && value > 0.0 {
                Ok(())
            } else {
                Err(Violation::Field(name, format!("{name} must be positive and finite, got {value}")))
            }
        };
        positive("obstacle_diameter", spec.obstacle_diameter)?;
        positive("lane_width", spec.lane_width)?;
        if !(spec.v_tgt.is_finite() && spec.v_tgt >= 0.0) {
            return Err(Violation::Field(
                "v_tgt",
                format!("v_tgt must be nonnegative and finite, got {}", spec.v_tgt),
            ));
        }

        let mut ends: Vec<(Point, Point)> = pts.windows(2).map(|w| (w[0], w[1])).collect();
        let last = pts[pts.len() - 1];
        if spec.closed && last != pts[0] {
            ends.push((last, pts[0]));
        }
        let mut segments = Vec::with_capacity(ends.len());
        let mut s0 = 0.0;
        for (a, b) in ends {
            let len = a.distance(&b);
            segments.push(Segment { a, b, s0, len });
            s0 += len;
        }
        let length = s0;
        let index = RTree::bulk_load(
            segments
                .iter()
                .enumerate()
                .map(|(i, seg)| GeomWithData::new(Line::new([seg.a.x, seg.a.y], [seg.b.x, seg.b.y]), i))
                .collect(),
        );

        let mut course = Self {
            spec,
            segments,
            length,
            index,
            obstacle_s: Vec::new(),
            obstacle_order: Vec::new(),
        };
        course.obstacle_s = course.spec.obstacles.iter().map(|o| course.locate(o).arc.s).collect();
        let mut order: Vec<usize> = (0..course.obstacle_s.len()).collect();
        order.sort_by(|&i, &j| course.obstacle_s[i].total_cmp(&course.obstacle_s[j]).then(i.cmp(&j)));
        course.obstacle_order = order;
        Ok(course)
    }

    /// Parses course JSON; validation failures are reported with the line of
    /// the offending entry.
    pub fn from_json_str(text: &str, source_name: &str) -> Result<Self> {
        let spec: CourseFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            source_name: source_name.to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        Self::build(spec).map_err(|v| {
            let (line, message) = match v {
                Violation::Field(key, m) => (json_key_line(text, key), m),
                Violation::CenterlinePoint(i, m) => (json_array_item_line(text, "centerline", i), m),
                Violation::ObstaclePoint(i, m) => (json_array_item_line(text, "obstacles", i), m),
            };
            Error::Parse {
                source_name: source_name.to_string(),
                line: line.unwrap_or(1),
                message,
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.spec).expect("course serialises")
    }

    pub fn spec(&self) -> &CourseFile {
        &self.spec
    }

    pub fn centerline(&self) -> &[Point] {
        &self.spec.centerline
    }

    pub fn obstacles(&self) -> &[Point] {
        &self.spec.obstacles
    }

    pub fn obstacle_diameter(&self) -> f64 {
        self.spec.obstacle_diameter
    }

    pub fn lane_width(&self) -> f64 {
        self.spec.lane_width
    }

    pub fn v_tgt(&self) -> f64 {
        self.spec.v_tgt
    }

    pub fn is_closed(&self) -> bool {
        self.spec.closed
    }

    /// Total centerline length, including the closing segment of a loop.
    pub fn length(&self) -> f64 {
        self.length
    }

    /// Arc coordinate of obstacle `i`.
    pub fn obstacle_arc(&self, i: usize) -> f64 {
        self.obstacle_s[i]
    }

    /// Nearest centerline point. Equidistant candidates resolve to the
    /// smallest arc coordinate.
    pub fn locate(&self, pos: &Point) -> Location {
        let q = [pos.x, pos.y];
        let first = self.index.nearest_neighbor(&q).expect("centerline has segments");
        let (_, d) = self.segments[first.data].foot(pos);
        let reach = d * (1.0 + 1e-9) + 1e-9;

        let mut best_d = f64::INFINITY;
        let mut candidates: Vec<(usize, f64, f64)> = Vec::new();
        for item in self.index.locate_within_distance(q, reach * reach) {
            let (t, dist) = self.segments[item.data].foot(pos);
            best_d = best_d.min(dist);
            candidates.push((item.data, t, dist));
        }
        // The nearest neighbour itself is always within reach, but rounding in
        // the index's own metric must not leave us empty-handed.
        if candidates.is_empty() {
            let (t, dist) = self.segments[first.data].foot(pos);
            best_d = dist;
            candidates.push((first.data, t, dist));
        }

        let tie = best_d + 1e-12 * best_d.max(1.0);
        let (seg, t, _) = candidates
            .into_iter()
            .filter(|&(_, _, dist)| dist <= tie)
            .map(|(i, t, dist)| (i, t, dist, self.arc_of(i, t)))
            .min_by(|a, b| a.3.total_cmp(&b.3).then(a.2.total_cmp(&b.2)))
            .map(|(i, t, dist, _)| (i, t, dist))
            .expect("at least one candidate");
        let segment = &self.segments[seg];
        Location {
            distance: best_d,
            arc: ArcCoordinate {
                s: self.arc_of(seg, t),
                lateral: segment.side(pos) * segment.foot(pos).1,
            },
            segment: seg,
        }
    }

    fn arc_of(&self, seg: usize, t: f64) -> f64 {
        let segment = &self.segments[seg];
        let s = segment.s0 + t * segment.len;
        if self.spec.closed && s >= self.length {
            s - self.length
        } else {
            s
        }
    }

    /// Euclidean distance from `pos` to the centerline.
    pub fn pt_line_distance(&self, pos: &Point) -> f64 {
        self.locate(pos).distance
    }

    pub fn project(&self, pos: &Point) -> ArcCoordinate {
        self.locate(pos).arc
    }

    /// Index of the obstacle encountered next from arc coordinate `s`, or
    /// `None` past the last obstacle of an open course.
    pub fn next_obstacle_from_arc(&self, s: f64) -> Option<usize> {
        if self.obstacle_order.is_empty() {
            return None;
        }
        let k = self.obstacle_order.partition_point(|&i| self.obstacle_s[i] < s);
        match self.obstacle_order.get(k) {
            Some(&i) => Some(i),
            None if self.spec.closed => Some(self.obstacle_order[0]),
            None => None,
        }
    }

    /// Distance from `pos` to the centre of the next obstacle, or
    /// `f64::INFINITY` when no obstacle lies ahead on an open course.
    pub fn obstacle_distance(&self, pos: &Point) -> Result<f64> {
        self.obstacle_distance_at(pos, &self.locate(pos))
    }

    /// As [`Course::obstacle_distance`] with a precomputed location of `pos`.
    pub fn obstacle_distance_at(&self, pos: &Point, loc: &Location) -> Result<f64> {
        if self.spec.obstacles.is_empty() {
            return Err(Error::NoObstacles);
        }
        Ok(match self.next_obstacle_from_arc(loc.arc.s) {
            Some(i) => pos.distance(&self.spec.obstacles[i]),
            None => f64::INFINITY,
        })
    }

    /// Forward arc distance from `from` to `to`, wrapping on a closed course.
    pub fn arc_ahead(&self, from: f64, to: f64) -> f64 {
        let d = to - from;
        if self.spec.closed {
            d.rem_euclid(self.length)
        } else {
            d
        }
    }

    /// Centerline point and travel direction at arc coordinate `s`.
    pub fn pose_at(&self, s: f64) -> (Point, f64) {
        let s = if self.spec.closed {
            s.rem_euclid(self.length)
        } else {
            s.clamp(0.0, self.length)
        };
        let k = self
            .segments
            .partition_point(|seg| seg.s0 + seg.len < s)
            .min(self.segments.len() - 1);
        let seg = &self.segments[k];
        let t = ((s - seg.s0) / seg.len).clamp(0.0, 1.0);
        let p = Point::new(seg.a.x + t * (seg.b.x - seg.a.x), seg.a.y + t * (seg.b.y - seg.a.y));
        (p, seg.heading())
    }

    /// A state on the centerline at arc coordinate `s`, heading along the
    /// course, offset `lateral` metres to the left.
    pub fn state_at(&self, s: f64, lateral: f64, v: f64) -> VehicleState {
        let (p, heading) = self.pose_at(s);
        let (sin, cos) = heading.sin_cos();
        VehicleState::new(p.x - lateral * sin, p.y + lateral * cos, v, heading)
    }
}

/// Layout for [`stadium`]: a loop of two straights joined by semicircles.
#[derive(Debug, Clone)]
pub struct StadiumLayout {
    pub straight: f64,
    pub radius: f64,
    /// Centerline vertex spacing along the curves, m.
    pub spacing: f64,
    /// Obstacle positions measured from the start of each straight, m.
    pub obstacle_offsets: Vec<f64>,
    pub obstacle_diameter: f64,
    pub lane_width: f64,
    pub v_tgt: f64,
}

impl Default for StadiumLayout {
    fn default() -> Self {
        Self {
            straight: 600.0,
            radius: 150.0,
            spacing: 2.0,
            obstacle_offsets: vec![150.0, 450.0],
            obstacle_diameter: 0.3,
            lane_width: 3.0,
            v_tgt: 20.0,
        }
    }
}

/// Counter-clockwise closed loop starting at the origin heading +x. The
/// obstacles sit on the centerline of both straights, just after each curve.
pub fn stadium(layout: &StadiumLayout) -> Result<Course> {
    let StadiumLayout {
        straight: l,
        radius: r,
        spacing,
        ..
    } = *layout;
    if !(l > 0.0 && r > 0.0 && spacing > 0.0) {
        return Err(Error::invalid("stadium dimensions must be positive"));
    }
    let mut centerline = Vec::new();
    let straight_steps = (l / spacing).ceil().max(1.0) as usize;
    let arc_steps = (PI * r / spacing).ceil().max(2.0) as usize;

    for i in 0..straight_steps {
        centerline.push(Point::new(l * i as f64 / straight_steps as f64, 0.0));
    }
    for i in 0..arc_steps {
        let a = -PI / 2.0 + PI * i as f64 / arc_steps as f64;
        centerline.push(Point::new(l + r * a.cos(), r + r * a.sin()));
    }
    for i in 0..straight_steps {
        centerline.push(Point::new(l - l * i as f64 / straight_steps as f64, 2.0 * r));
    }
    for i in 0..arc_steps {
        let a = PI / 2.0 + PI * i as f64 / arc_steps as f64;
        centerline.push(Point::new(r * a.cos(), r + r * a.sin()));
    }

    let mut obstacles = Vec::new();
    for &off in &layout.obstacle_offsets {
        obstacles.push(Point::new(off, 0.0));
    }
    for &off in &layout.obstacle_offsets {
        obstacles.push(Point::new(l - off, 2.0 * r));
    }
    Course::new(CourseFile {
        centerline,
        obstacles,
        obstacle_diameter: layout.obstacle_diameter,
        lane_width: layout.lane_width,
        v_tgt: layout.v_tgt,
        closed: true,
    })
}

/// 1-based line of the first occurrence of `"key"` in `text`.
fn json_key_line(text: &str, key: &str) -> Option<usize> {
    let needle = format!("\"{key}\"");
    text.find(&needle).map(|pos| line_at(text, pos))
}

/// 1-based line where the `index`-th inner array of the top-level `key`
/// array opens.
fn json_array_item_line(text: &str, key: &str, index: usize) -> Option<usize> {
    let needle = format!("\"{key}\"");
    let start = text.find(&needle)? + needle.len();
    let mut depth = 0usize;
    let mut seen = 0usize;
    for (off, ch) in text[start..].char_indices() {
        match ch {
            '[' => {
                depth += 1;
                if depth == 2 {
                    if seen == index {
                        return Some(line_at(text, start + off));
                    }
                    seen += 1;
                }
            }
            ']' => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return None;
                }
            }
            _ => {}
        }
    }
    None
}

fn line_at(text: &str, byte: usize) -> usize {
    text[..byte].bytes().filter(|&b| b == b'\n').count() + 1
}
