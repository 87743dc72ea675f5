//! Unicycle kinematics integrated with fixed-step classical Runge-Kutta.
//!
//! The model is
//!
//! ```text
//! dx/dt = v cos(psi)    dy/dt = v sin(psi)
//! dv/dt = u1            dpsi/dt = u2
//! ```
//!
//! with the control held constant over the integration interval. Speed is
//! floored at zero: a vehicle braking through `v = 0` stops and stays stopped
//! (heading may still rotate) for the rest of the interval.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    /// East position, m.
    pub x: f64,
    /// North position, m.
    pub y: f64,
    /// Speed, m/s.
    pub v: f64,
    /// Heading, rad. Unwrapped.
    pub psi: f64,
}

impl VehicleState {
    pub const fn new(x: f64, y: f64, v: f64, psi: f64) -> Self {
        Self { x, y, v, psi }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.v.is_finite() && self.psi.is_finite()
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    fn advanced(&self, rate: &StateRate, h: f64) -> Self {
        Self {
            x: self.x + h * rate.dx,
            y: self.y + h * rate.dy,
            v: self.v + h * rate.dv,
            psi: self.psi + h * rate.dpsi,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Control {
    /// Longitudinal acceleration, m/s^2.
    pub u1: f64,
    /// Turning rate, rad/s.
    pub u2: f64,
}

impl Control {
    pub const fn new(u1: f64, u2: f64) -> Self {
        Self { u1, u2 }
    }

    pub fn is_finite(&self) -> bool {
        self.u1.is_finite() && self.u2.is_finite()
    }
}

/// Time derivative of a [`VehicleState`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StateRate {
    pub dx: f64,
    pub dy: f64,
    pub dv: f64,
    pub dpsi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    /// Internal integration step, s.
    pub step: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self { step: 0.01 }
    }
}

impl IntegratorConfig {
    pub fn with_step(step: f64) -> Self {
        Self { step }
    }

    fn validate(&self) -> Result<()> {
        if !(self.step.is_finite() && self.step > 0.0) {
            return Err(Error::invalid(format!(
                "integration step must be positive and finite, got {}",
                self.step
            )));
        }
        Ok(())
    }
}

pub fn derivative(s: &VehicleState, u: &Control) -> Result<StateRate> {
    if !s.is_finite() || !u.is_finite() {
        return Err(Error::invalid("non-finite state or control"));
    }
    Ok(rate(s, u))
}

#[inline]
fn rate(s: &VehicleState, u: &Control) -> StateRate {
    let (sin, cos) = s.psi.sin_cos();
    StateRate {
        dx: s.v * cos,
        dy: s.v * sin,
        dv: u.u1,
        dpsi: u.u2,
    }
}

fn rk4_step(s: &VehicleState, u: &Control, h: f64) -> VehicleState {
    let k1 = rate(s, u);
    let k2 = rate(&s.advanced(&k1, 0.5 * h), u);
    let k3 = rate(&s.advanced(&k2, 0.5 * h), u);
    let k4 = rate(&s.advanced(&k3, h), u);
    let w = h / 6.0;
    VehicleState {
        x: s.x + w * (k1.dx + 2.0 * k2.dx + 2.0 * k3.dx + k4.dx),
        y: s.y + w * (k1.dy + 2.0 * k2.dy + 2.0 * k3.dy + k4.dy),
        v: s.v + w * (k1.dv + 2.0 * k2.dv + 2.0 * k3.dv + k4.dv),
        psi: s.psi + w * (k1.dpsi + 2.0 * k2.dpsi + 2.0 * k3.dpsi + k4.dpsi),
    }
}

/// Splits `duration` into `full` steps of length `h` followed by one partial
/// step of length `tail` (possibly zero). Durations within 1e-9 steps of an
/// exact multiple use equal steps so no sliver step is produced.
#[derive(Debug, Clone, Copy)]
struct StepPlan {
    full: usize,
    h: f64,
    tail: f64,
}

impl StepPlan {
    fn new(duration: f64, step: f64) -> Self {
        let ratio = duration / step;
        let rounded = ratio.round();
        if rounded >= 1.0 && (rounded * step - duration).abs() <= 1e-9 * step {
            let full = rounded as usize;
            return Self {
                full,
                h: duration / rounded,
                tail: 0.0,
            };
        }
        let full = ratio.floor();
        Self {
            full: full as usize,
            h: step,
            tail: duration - full * step,
        }
    }

    fn steps(&self) -> impl Iterator<Item = f64> + '_ {
        std::iter::repeat_n(self.h, self.full).chain((self.tail > 0.0).then_some(self.tail))
    }
}

/// State reached from `s` after holding `u` for `duration` seconds.
pub fn next_state(
    s: &VehicleState,
    u: &Control,
    duration: f64,
    cfg: &IntegratorConfig,
) -> Result<VehicleState> {
    if !s.is_finite() || !u.is_finite() {
        return Err(Error::invalid("non-finite state or control"));
    }
    if !(duration.is_finite() && duration >= 0.0) {
        return Err(Error::invalid(format!(
            "duration must be finite and nonnegative, got {duration}"
        )));
    }
    cfg.validate()?;
    if duration == 0.0 {
        return Ok(*s);
    }

    let plan = StepPlan::new(duration, cfg.step);
    let mut state = *s;
    let mut stopped = false;
    for h in plan.steps() {
        if stopped {
            state.psi += u.u2 * h;
            continue;
        }
        if u.u1 < 0.0 && state.v + u.u1 * h < 0.0 {
            // Integrate exactly up to the stop, then hold v = 0.
            let to_stop = (-state.v / u.u1).clamp(0.0, h);
            if to_stop > 0.0 {
                state = rk4_step(&state, u, to_stop);
            }
            state.v = 0.0;
            state.psi += u.u2 * (h - to_stop);
            stopped = true;
            continue;
        }
        state = rk4_step(&state, u, h);
    }
    Ok(state)
}

/// Batched preview evaluator for a fixed set of turning rates and a fixed
/// preview duration.
///
/// With the control held constant, `v` and `psi` are affine in time, so the
/// RK4 stages for `x` and `y` collapse to a Simpson-weighted sum of
/// `(v0 + u1 t) cos(psi0 + u2 t)` over the stage times. Expanding the cosine
/// with the angle-addition identity leaves four state-independent sums per
/// turning rate; every preview then costs a handful of multiplications.
/// Results agree with [`next_state`] to rounding error. Previews that would
/// hit the speed floor fall back to the stepwise integrator.
#[derive(Debug, Clone)]
pub struct PreviewKernel {
    duration: f64,
    cfg: IntegratorConfig,
    u2_values: Vec<f64>,
    /// Per turning rate: sum w cos(a), sum w sin(a), sum w t cos(a), sum w t sin(a)
    /// with a = u2 t over all stage times t.
    sums: Vec<[f64; 4]>,
}

impl PreviewKernel {
    pub fn new(u2_values: &[f64], duration: f64, cfg: &IntegratorConfig) -> Result<Self> {
        cfg.validate()?;
        if !(duration.is_finite() && duration >= 0.0) {
            return Err(Error::invalid(format!(
                "preview duration must be finite and nonnegative, got {duration}"
            )));
        }
        if u2_values.iter().any(|u2| !u2.is_finite()) {
            return Err(Error::invalid("non-finite turning rate"));
        }

        let mut nodes: Vec<(f64, f64)> = Vec::new();
        if duration > 0.0 {
            let plan = StepPlan::new(duration, cfg.step);
            let mut t0 = 0.0;
            for (i, h) in plan.steps().enumerate() {
                if i < plan.full {
                    t0 = i as f64 * plan.h;
                }
                nodes.push((t0, h / 6.0));
                nodes.push((t0 + 0.5 * h, 4.0 * h / 6.0));
                nodes.push((t0 + h, h / 6.0));
                t0 += h;
            }
        }

        let sums = u2_values
            .iter()
            .map(|&u2| {
                let mut acc = [0.0; 4];
                for &(t, w) in &nodes {
                    let (sin, cos) = (u2 * t).sin_cos();
                    acc[0] += w * cos;
                    acc[1] += w * sin;
                    acc[2] += w * t * cos;
                    acc[3] += w * t * sin;
                }
                acc
            })
            .collect();

        Ok(Self {
            duration,
            cfg: *cfg,
            u2_values: u2_values.to_vec(),
            sums,
        })
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn u2_values(&self) -> &[f64] {
        &self.u2_values
    }

    /// Previewed state for acceleration `u1` and the `u2_index`-th turning rate.
    pub fn preview(&self, s: &VehicleState, u1: f64, u2_index: usize) -> Result<VehicleState> {
        let u2 = self.u2_values[u2_index];
        if !s.is_finite() || !u1.is_finite() {
            return Err(Error::invalid("non-finite state or control"));
        }
        if s.v < 0.0 || (u1 < 0.0 && s.v + u1 * self.duration < 0.0) {
            return next_state(s, &Control::new(u1, u2), self.duration, &self.cfg);
        }
        let [c0, s0, c1, s1] = self.sums[u2_index];
        let (sin, cos) = s.psi.sin_cos();
        Ok(VehicleState {
            x: s.x + s.v * (cos * c0 - sin * s0) + u1 * (cos * c1 - sin * s1),
            y: s.y + s.v * (sin * c0 + cos * s0) + u1 * (sin * c1 + cos * s1),
            v: s.v + u1 * self.duration,
            psi: s.psi + u2 * self.duration,
        })
    }
}
