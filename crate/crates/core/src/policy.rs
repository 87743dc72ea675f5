//! Softmax operator policy over a discrete control grid, and trajectory
//! sampling from it.
//!
//! For a state `x` each grid control `u_k` is held for the preview time to
//! give `x'_k`; the policy picks `u_k` with probability proportional to
//! `exp(-risk(x'_k) - cost(u_k))`.
//!
//! Randomness: member `i` of an ensemble seeded with `seed` draws from
//! `ChaCha8Rng::seed_from_u64(seed)` switched to stream `i`. Streams are
//! independent, so ensembles are identical however their members are
//! scheduled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::course::Course;
use crate::dynamics::{next_state, Control, IntegratorConfig, PreviewKernel, VehicleState};
use crate::error::{Error, Result};
use crate::riskmodel::{DriverFeatures, FeatureMap, RiskParams};

/// Evenly spaced values `min + i * step` for `i in 0..count`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub min: f64,
    pub step: f64,
    pub count: usize,
}

impl Axis {
    pub fn new(min: f64, step: f64, count: usize) -> Result<Self> {
        if !(min.is_finite() && step.is_finite() && step > 0.0 && count >= 1) {
            return Err(Error::invalid(format!(
                "grid axis needs finite min, positive step and count >= 1 (got {min}, {step}, {count})"
            )));
        }
        Ok(Self { min, step, count })
    }

    pub fn value(&self, i: usize) -> f64 {
        let v = self.min + i as f64 * self.step;
        // keep the symmetric centre exactly at zero
        if v.abs() < 1e-9 * self.step {
            0.0
        } else {
            v
        }
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.count).map(|i| self.value(i)).collect()
    }

    fn nearest(&self, x: f64) -> usize {
        let k = ((x - self.min) / self.step).round();
        k.clamp(0.0, (self.count - 1) as f64) as usize
    }
}

/// Cartesian grid of (acceleration, turning rate) controls. Cell `k` is
/// `(u1[k / n2], u2[k % n2])`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlGrid {
    pub u1: Axis,
    pub u2: Axis,
}

impl Default for ControlGrid {
    /// u1 in {-1.0, -0.9, ..., 1.0} m/s^2 and u2 in {-0.5, -0.45, ..., 0.5}
    /// rad/s: 21 x 21 = 441 cells.
    fn default() -> Self {
        Self {
            u1: Axis { min: -1.0, step: 0.1, count: 21 },
            u2: Axis { min: -0.5, step: 0.05, count: 21 },
        }
    }
}

impl ControlGrid {
    pub fn new(u1: Axis, u2: Axis) -> Self {
        Self { u1, u2 }
    }

    pub fn len(&self) -> usize {
        self.u1.count * self.u2.count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn split(&self, cell: usize) -> (usize, usize) {
        (cell / self.u2.count, cell % self.u2.count)
    }

    pub fn cell(&self, i1: usize, i2: usize) -> usize {
        i1 * self.u2.count + i2
    }

    pub fn control(&self, cell: usize) -> Control {
        let (i1, i2) = self.split(cell);
        Control::new(self.u1.value(i1), self.u2.value(i2))
    }

    pub fn controls(&self) -> Vec<Control> {
        (0..self.len()).map(|k| self.control(k)).collect()
    }

    /// Nearest cell in grid-step units; values beyond the grid snap to the edge.
    pub fn nearest_cell(&self, u: &Control) -> usize {
        self.cell(self.u1.nearest(u.u1), self.u2.nearest(u.u2))
    }
}

/// Probabilities over grid cells, in cell order.
///
/// `log_probs` holds the exact log-probabilities. `probs` is their
/// exponential, floored at the smallest positive normal `f64` so that
/// cells whose probability underflows stay strictly positive, then
/// renormalised.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    pub log_probs: Vec<f64>,
    pub probs: Vec<f64>,
}

impl ActionDistribution {
    /// Distribution with `p_k ∝ exp(-energy_k)`, evaluated after subtracting
    /// the minimum energy.
    pub fn from_energies(energies: &[f64]) -> Result<Self> {
        if energies.is_empty() {
            return Err(Error::Empty("control grid"));
        }
        if energies.iter().any(|e| !e.is_finite()) {
            return Err(Error::invalid("non-finite risk or cost"));
        }
        let min = energies.iter().copied().fold(f64::INFINITY, f64::min);
        let total: f64 = energies.iter().map(|e| (min - e).exp()).sum();
        let log_norm = total.ln();
        let log_probs: Vec<f64> = energies.iter().map(|e| (min - e) - log_norm).collect();
        let mut probs: Vec<f64> = log_probs.iter().map(|lp| lp.exp().max(f64::MIN_POSITIVE)).collect();
        let sum: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= sum);
        Ok(Self { log_probs, probs })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn argmax(&self) -> usize {
        self.log_probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(k, _)| k)
            .expect("nonempty distribution")
    }
}

/// Draws a cell by inverse-CDF over cells in grid order.
pub fn sample_control<R: Rng + ?Sized>(d: &ActionDistribution, rng: &mut R) -> usize {
    let r: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in d.probs.iter().enumerate() {
        acc += p;
        if r < acc {
            return k;
        }
    }
    // r landed in the rounding slack above the final partial sum
    d.log_probs
        .iter()
        .rposition(|lp| *lp > -700.0)
        .unwrap_or(d.len() - 1)
}

/// Generator for member `index` of an ensemble seeded with `seed`.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Evaluates the policy at arbitrary states for a fixed course, grid,
/// feature map and preview time.
pub struct Policy<'a> {
    course: &'a Course,
    grid: ControlGrid,
    features: &'a dyn FeatureMap,
    kernel: PreviewKernel,
    u1_values: Vec<f64>,
    /// Cell-major cost features.
    cost_features: Vec<f64>,
}

impl<'a> Policy<'a> {
    pub fn new(
        course: &'a Course,
        grid: &ControlGrid,
        features: &'a dyn FeatureMap,
        preview: f64,
        integrator: &IntegratorConfig,
    ) -> Result<Self> {
        if !(preview.is_finite() && preview > 0.0) {
            return Err(Error::invalid(format!("preview time must be positive, got {preview}")));
        }
        Axis::new(grid.u1.min, grid.u1.step, grid.u1.count)?;
        Axis::new(grid.u2.min, grid.u2.step, grid.u2.count)?;
        let kernel = PreviewKernel::new(&grid.u2.values(), preview, integrator)?;
        let nc = features.cost_dim();
        let mut cost_features = vec![0.0; grid.len() * nc];
        for (k, chunk) in cost_features.chunks_mut(nc.max(1)).enumerate().take(grid.len()) {
            features.cost_features(&grid.control(k), &mut chunk[..nc]);
        }
        Ok(Self {
            course,
            grid: *grid,
            features,
            kernel,
            u1_values: grid.u1.values(),
            cost_features,
        })
    }

    pub fn grid(&self) -> &ControlGrid {
        &self.grid
    }

    pub fn course(&self) -> &Course {
        self.course
    }

    pub fn features(&self) -> &dyn FeatureMap {
        self.features
    }

    pub fn preview_time(&self) -> f64 {
        self.kernel.duration()
    }

    /// Cost features, `grid.len() x cost_dim`, cell-major.
    pub fn cost_features(&self) -> &[f64] {
        &self.cost_features
    }

    /// Previewed states in cell order.
    pub fn previews(&self, s: &VehicleState) -> Result<Vec<VehicleState>> {
        let n2 = self.grid.u2.count;
        let mut out = Vec::with_capacity(self.grid.len());
        for &u1 in &self.u1_values {
            for i2 in 0..n2 {
                out.push(self.kernel.preview(s, u1, i2)?);
            }
        }
        Ok(out)
    }

    /// Risk features of every previewed state, `grid.len() x risk_dim`,
    /// written into `out`.
    pub fn preview_risk_features(&self, s: &VehicleState, out: &mut [f64]) -> Result<()> {
        let nr = self.features.risk_dim();
        debug_assert_eq!(out.len(), self.grid.len() * nr);
        for (k, preview) in self.previews(s)?.iter().enumerate() {
            self.features
                .risk_features(preview, self.course, &mut out[k * nr..(k + 1) * nr])?;
        }
        Ok(())
    }

    /// `risk(x'_k) + cost(u_k)` for every cell.
    pub fn energies(&self, s: &VehicleState, weights: &[f64]) -> Result<Vec<f64>> {
        let nr = self.features.risk_dim();
        let nc = self.features.cost_dim();
        if weights.len() != nr + nc {
            return Err(Error::invalid(format!(
                "expected {} weights, got {}",
                nr + nc,
                weights.len()
            )));
        }
        let mut risk = vec![0.0; self.grid.len() * nr];
        self.preview_risk_features(s, &mut risk)?;
        Ok((0..self.grid.len())
            .map(|k| {
                let r: f64 = risk[k * nr..(k + 1) * nr].iter().zip(&weights[..nr]).map(|(f, w)| f * w).sum();
                let c: f64 = self.cost_features[k * nc..(k + 1) * nc]
                    .iter()
                    .zip(&weights[nr..])
                    .map(|(g, w)| g * w)
                    .sum();
                r + c
            })
            .collect())
    }

    pub fn distribution(&self, s: &VehicleState, weights: &[f64]) -> Result<ActionDistribution> {
        ActionDistribution::from_energies(&self.energies(s, weights)?)
    }
}

/// Policy distribution for the driver risk model at state `s`.
pub fn action_distribution(
    s: &VehicleState,
    theta: &RiskParams,
    grid: &ControlGrid,
    preview: f64,
    course: &Course,
) -> Result<ActionDistribution> {
    theta.validate()?;
    let policy = Policy::new(course, grid, &DriverFeatures, preview, &IntegratorConfig::default())?;
    policy.distribution(s, &theta.to_weights())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Preview time, s.
    pub preview: f64,
    /// Control update period, s.
    pub dt: f64,
    pub n_steps: usize,
    pub seed: u64,
    #[serde(default)]
    pub integrator: IntegratorConfig,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            preview: 1.2,
            dt: 0.1,
            n_steps: 100,
            seed: 0,
            integrator: IntegratorConfig::default(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.preview.is_finite() && self.preview > 0.0) {
            return Err(Error::invalid(format!("preview must be positive, got {}", self.preview)));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::invalid(format!("time step must be positive, got {}", self.dt)));
        }
        Ok(())
    }
}

/// Sampled states at times `0, dt, ..., n*dt` with the control applied
/// after each state (one fewer control than states).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<VehicleState>,
    pub controls: Vec<Control>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn end_time(&self) -> f64 {
        self.times.last().copied().unwrap_or(0.0)
    }

    pub fn positions(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        self.states.iter().map(|s| s.position())
    }
}

/// Runs the sampler from `s0` with the given generator.
pub fn sample_trajectory_with<R: Rng + ?Sized>(
    policy: &Policy<'_>,
    weights: &[f64],
    s0: &VehicleState,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Trajectory> {
    cfg.validate()?;
    let mut times = Vec::with_capacity(cfg.n_steps + 1);
    let mut states = Vec::with_capacity(cfg.n_steps + 1);
    let mut controls = Vec::with_capacity(cfg.n_steps);
    times.push(0.0);
    states.push(*s0);
    let mut state = *s0;
    for step in 1..=cfg.n_steps {
        let dist = policy.distribution(&state, weights)?;
        let u = policy.grid().control(sample_control(&dist, rng));
        state = next_state(&state, &u, cfg.dt, &cfg.integrator)?;
        times.push(step as f64 * cfg.dt);
        states.push(state);
        controls.push(u);
    }
    Ok(Trajectory {
        times,
        states,
        controls,
    })
}

/// Samples one trajectory of the driver risk model, drawing from stream 0
/// of `cfg.seed`.
pub fn sample_trajectory(
    s0: &VehicleState,
    theta: &RiskParams,
    grid: &ControlGrid,
    cfg: &SamplerConfig,
    course: &Course,
) -> Result<Trajectory> {
    theta.validate()?;
    let policy = Policy::new(course, grid, &DriverFeatures, cfg.preview, &cfg.integrator)?;
    sample_trajectory_with(&policy, &theta.to_weights(), s0, cfg, &mut stream_rng(cfg.seed, 0))
}

/// Trajectories sampled from a shared initial state; member `i` used stream
/// `i` of `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub seed: u64,
    pub dt: f64,
    pub members: Vec<Trajectory>,
}

impl Ensemble {
    pub fn new(seed: u64, dt: f64, members: Vec<Trajectory>) -> Result<Self> {
        let first = members.first().ok_or(Error::Empty("ensemble"))?;
        if members.iter().any(|m| m.times != first.times) {
            return Err(Error::Misaligned("ensemble members have different timestamps".into()));
        }
        Ok(Self { seed, dt, members })
    }

    pub fn times(&self) -> &[f64] {
        &self.members[0].times
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Samples `n` trajectories in parallel; the result does not depend on
/// thread count or scheduling.
pub fn sample_ensemble(
    policy: &Policy<'_>,
    weights: &[f64],
    s0: &VehicleState,
    cfg: &SamplerConfig,
    n: usize,
) -> Result<Ensemble> {
    let members = (0..n)
        .into_par_iter()
        .map(|i| sample_trajectory_with(policy, weights, s0, cfg, &mut stream_rng(cfg.seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ensemble::new(cfg.seed, cfg.dt, members)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::course::{CourseFile, Point};

    fn medians() -> RiskParams {
        crate::riskmodel::QuantileTable::default().median
    }

    fn straight_course() -> Course {
        Course::new(CourseFile {
            centerline: vec![Point::new(-100.0, 0.0), Point::new(2000.0, 0.0)],
            obstacles: vec![Point::new(300.0, 0.0)],
            obstacle_diameter: 0.3,
            lane_width: 3.0,
            v_tgt: 20.0,
            closed: false,
        })
        .unwrap()
    }

    #[test]
    fn default_grid_is_21_by_21() {
        let g = ControlGrid::default();
        assert_eq!(g.len(), 441);
        let u1 = g.u1.values();
        let u2 = g.u2.values();
        assert_eq!(u1[0], -1.0);
        assert_eq!(u1[10], 0.0);
        assert!((u1[20] - 1.0).abs() < 1e-15);
        assert_eq!(u2[10], 0.0);
        assert!((u2[20] - 0.5).abs() < 1e-15);
        assert!(u1.windows(2).all(|w| w[0] < w[1]));
        assert!(u2.windows(2).all(|w| w[0] < w[1]));
        for i in 0..21 {
            assert!((u2[i] + u2[20 - i]).abs() < 1e-15);
        }
    }

    #[test]
    fn nearest_cell_snaps_and_clamps() {
        let g = ControlGrid::default();
        for k in [0, 17, 220, 440] {
            assert_eq!(g.nearest_cell(&g.control(k)), k);
        }
        assert_eq!(g.nearest_cell(&Control::new(0.04, 0.026)), g.cell(10, 11));
        assert_eq!(g.nearest_cell(&Control::new(7.0, -3.0)), g.cell(20, 0));
    }

    #[test]
    fn zero_weights_give_uniform() {
        let c = straight_course();
        let d = action_distribution(
            &VehicleState::new(0.0, 0.5, 18.0, 0.1),
            &RiskParams::default(),
            &ControlGrid::default(),
            1.2,
            &c,
        )
        .unwrap();
        for p in &d.probs {
            assert!((p - 1.0 / 441.0).abs() < 1e-15);
        }
    }

    #[test]
    fn toy_energies() {
        let ln2 = 2f64.ln();
        let d = ActionDistribution::from_energies(&[0.0, ln2, ln2]).unwrap();
        assert!((d.probs[0] - 0.5).abs() < 1e-15);
        assert!((d.probs[1] - 0.25).abs() < 1e-15);
        assert!((d.probs[2] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn shift_invariance() {
        let e = [3.0, 1.0, 7.5, 0.2];
        let a = ActionDistribution::from_energies(&e).unwrap();
        let shifted: Vec<f64> = e.iter().map(|x| x + 1234.5).collect();
        let b = ActionDistribution::from_energies(&shifted).unwrap();
        for (p, q) in a.probs.iter().zip(&b.probs) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn huge_energies_stay_positive() {
        let d = ActionDistribution::from_energies(&[1e4, 0.0, 5e4]).unwrap();
        assert!(d.probs.iter().all(|p| *p > 0.0 && p.is_finite()));
        assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(d.log_probs[2], -5e4);
    }

    #[test]
    fn point_mass_always_sampled() {
        let d = ActionDistribution::from_energies(&[1e3, 1e3, 0.0, 1e3]).unwrap();
        let mut rng = stream_rng(1, 0);
        for _ in 0..1000 {
            assert_eq!(sample_control(&d, &mut rng), 2);
        }
    }

    #[test]
    fn uniform_sampling_frequencies() {
        let d = ActionDistribution::from_energies(&[0.0; 441]).unwrap();
        let mut rng = stream_rng(42, 0);
        let n = 1_000_000;
        let mut counts = vec![0usize; 441];
        for _ in 0..n {
            counts[sample_control(&d, &mut rng)] += 1;
        }
        let p = 1.0 / 441.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 5.0 * sigma, "{c}");
        }
    }

    #[test]
    fn same_seed_same_samples() {
        let d = ActionDistribution::from_energies(&[0.5, 0.1, 0.9, 0.3]).unwrap();
        let a: Vec<usize> = {
            let mut rng = stream_rng(9, 3);
            (0..100).map(|_| sample_control(&d, &mut rng)).collect()
        };
        let b: Vec<usize> = {
            let mut rng = stream_rng(9, 3);
            (0..100).map(|_| sample_control(&d, &mut rng)).collect()
        };
        let c: Vec<usize> = {
            let mut rng = stream_rng(9, 4);
            (0..100).map(|_| sample_control(&d, &mut rng)).collect()
        };
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn zero_steps_returns_initial_state() {
        let c = straight_course();
        let s0 = VehicleState::new(0.0, 0.0, 20.0, 0.0);
        let cfg = SamplerConfig { n_steps: 0, ..SamplerConfig::default() };
        let t = sample_trajectory(&s0, &medians(), &ControlGrid::default(), &cfg, &c).unwrap();
        assert_eq!(t.states, vec![s0]);
        assert_eq!(t.times, vec![0.0]);
        assert!(t.controls.is_empty());
    }

    #[test]
    fn large_turn_cost_keeps_straight() {
        let c = straight_course();
        let theta = RiskParams::new(0.0, 0.0, 0.0, 0.0, 1e6).unwrap();
        let s0 = VehicleState::new(0.0, 0.0, 20.0, 0.0);
        let cfg = SamplerConfig { n_steps: 50, seed: 5, ..SamplerConfig::default() };
        let t = sample_trajectory(&s0, &theta, &ControlGrid::default(), &cfg, &c).unwrap();
        assert!(t.controls.iter().all(|u| u.u2 == 0.0));
        assert!(t.states.iter().all(|s| s.y == 0.0 && s.psi == 0.0));
    }

    #[test]
    fn timestamps_are_exact() {
        let c = straight_course();
        let s0 = VehicleState::new(0.0, 0.0, 20.0, 0.0);
        let cfg = SamplerConfig { n_steps: 37, dt: 0.1, seed: 2, ..SamplerConfig::default() };
        let t = sample_trajectory(&s0, &medians(), &ControlGrid::default(), &cfg, &c).unwrap();
        assert_eq!(t.len(), 38);
        assert_eq!(t.controls.len(), 37);
        for (i, time) in t.times.iter().enumerate() {
            assert_eq!(*time, i as f64 * 0.1);
        }
    }

    #[test]
    fn ensemble_members_differ_but_reproduce() {
        let c = straight_course();
        let theta = medians();
        let grid = ControlGrid::default();
        let cfg = SamplerConfig { n_steps: 30, seed: 11, ..SamplerConfig::default() };
        let policy = Policy::new(&c, &grid, &DriverFeatures, cfg.preview, &cfg.integrator).unwrap();
        let s0 = VehicleState::new(0.0, 0.0, 20.0, 0.0);
        let a = sample_ensemble(&policy, &theta.to_weights(), &s0, &cfg, 10).unwrap();
        let b = sample_ensemble(&policy, &theta.to_weights(), &s0, &cfg, 10).unwrap();
        assert_eq!(a, b);
        for i in 0..10 {
            for j in i + 1..10 {
                assert_ne!(a.members[i].states, a.members[j].states);
            }
        }
        // member i is exactly the single trajectory drawn from stream i
        let solo = sample_trajectory_with(&policy, &theta.to_weights(), &s0, &cfg, &mut stream_rng(11, 3)).unwrap();
        assert_eq!(solo, a.members[3]);
    }
}
