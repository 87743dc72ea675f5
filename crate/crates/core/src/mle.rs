//! Maximum-likelihood fitting of additive risk/cost weights.
//!
//! For observations `(x_i, u_i)` the log-likelihood is
//!
//! ```text
//! L(w) = sum_i [ -w . F_i(u_i) - log sum_k exp(-w . F_i(u_k)) ]
//! ```
//!
//! where `F_i(u_k)` stacks the risk features of the state previewed from
//! `x_i` under `u_k` with the cost features of `u_k`. Each term is linear
//! minus log-sum-exp of linear, so `L` is concave and the bound-constrained
//! maximiser over `w >= 0` is global. Previewed features do not depend on
//! `w` and are computed once into a [`FeatureCache`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::course::Course;
use crate::dynamics::{IntegratorConfig, VehicleState};
use crate::error::{Error, Result};
use crate::policy::{ControlGrid, Policy};
use crate::riskmodel::{Convergence, DriverFeatures, FittedModel, RiskParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub t: f64,
    pub state: VehicleState,
    /// Grid cell of the applied control.
    pub cell: usize,
}

/// Nonempty list of observations with nondecreasing timestamps.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    observations: Vec<Observation>,
}

impl Dataset {
    pub fn new(observations: Vec<Observation>) -> Result<Self> {
        if observations.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        for (i, o) in observations.iter().enumerate() {
            if !o.state.is_finite() || !o.t.is_finite() {
                return Err(Error::invalid(format!("observation {i} is not finite")));
            }
            if i > 0 && o.t < observations[i - 1].t {
                return Err(Error::invalid(format!("observation {i} goes back in time")));
            }
        }
        Ok(Self { observations })
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Concatenates datasets; timestamps of later parts are shifted so the
    /// result stays nondecreasing.
    pub fn concat(parts: &[Dataset]) -> Result<Self> {
        let mut out: Vec<Observation> = Vec::new();
        for part in parts {
            let offset = match (out.last(), part.observations.first()) {
                (Some(last), Some(first)) if first.t < last.t => last.t - first.t,
                _ => 0.0,
            };
            out.extend(part.observations.iter().map(|o| Observation { t: o.t + offset, ..*o }));
        }
        Self::new(out)
    }
}

/// Value, gradient and (optionally) Hessian of the log-likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: Vec<f64>,
    /// Row-major `dim x dim`.
    pub hessian: Option<Vec<f64>>,
}

/// Previewed features for every (observation, grid cell) pair.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    n_obs: usize,
    n_cells: usize,
    n_risk: usize,
    n_cost: usize,
    preview: f64,
    /// `n_obs x n_cells x n_risk`.
    risk: Vec<f64>,
    /// `n_cells x n_cost`.
    cost: Vec<f64>,
    observed: Vec<usize>,
}

impl FeatureCache {
    pub fn build(data: &Dataset, policy: &Policy<'_>) -> Result<Self> {
        let n_cells = policy.grid().len();
        let n_risk = policy.features().risk_dim();
        for (i, o) in data.observations().iter().enumerate() {
            if o.cell >= n_cells {
                return Err(Error::invalid(format!(
                    "observation {i} has cell {} outside a {n_cells}-cell grid",
                    o.cell
                )));
            }
        }
        let blocks = data
            .observations()
            .par_iter()
            .map(|o| {
                let mut block = vec![0.0; n_cells * n_risk];
                policy.preview_risk_features(&o.state, &mut block)?;
                Ok(block)
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        Ok(Self {
            n_obs: data.len(),
            n_cells,
            n_risk,
            n_cost: policy.features().cost_dim(),
            preview: policy.preview_time(),
            risk: blocks.concat(),
            cost: policy.cost_features().to_vec(),
            observed: data.observations().iter().map(|o| o.cell).collect(),
        })
    }

    /// Cache from explicit feature tables, for callers with their own
    /// preview machinery.
    pub fn from_parts(
        n_risk: usize,
        risk: Vec<f64>,
        n_cost: usize,
        cost: Vec<f64>,
        observed: Vec<usize>,
        preview: f64,
    ) -> Result<Self> {
        let n_obs = observed.len();
        if n_obs == 0 {
            return Err(Error::Empty("dataset"));
        }
        let n_cells = cost
            .len()
            .checked_div(n_cost)
            .or_else(|| risk.len().checked_div(n_obs * n_risk))
            .unwrap_or(0);
        if n_cells == 0
            || risk.len() != n_obs * n_cells * n_risk
            || cost.len() != n_cells * n_cost
            || observed.iter().any(|&c| c >= n_cells)
        {
            return Err(Error::invalid("inconsistent feature table sizes"));
        }
        if risk.iter().chain(&cost).any(|f| !f.is_finite()) {
            return Err(Error::invalid("non-finite feature"));
        }
        Ok(Self {
            n_obs,
            n_cells,
            n_risk,
            n_cost,
            preview,
            risk,
            cost,
            observed,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn dim(&self) -> usize {
        self.n_risk + self.n_cost
    }

    pub fn preview(&self) -> f64 {
        self.preview
    }

    /// Full feature vector of cell `k` for observation `i`.
    pub fn features(&self, i: usize, k: usize) -> Vec<f64> {
        let r = &self.risk[(i * self.n_cells + k) * self.n_risk..][..self.n_risk];
        let c = &self.cost[k * self.n_cost..][..self.n_cost];
        r.iter().chain(c).copied().collect()
    }

    pub fn observed_cell(&self, i: usize) -> usize {
        self.observed[i]
    }

    fn check_weights(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.dim() {
            return Err(Error::invalid(format!("expected {} weights, got {}", self.dim(), w.len())));
        }
        if w.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("non-finite weight"));
        }
        Ok(())
    }

    fn cost_energies(&self, w: &[f64]) -> Vec<f64> {
        let q = &w[self.n_risk..];
        (0..self.n_cells)
            .map(|k| {
                self.cost[k * self.n_cost..(k + 1) * self.n_cost]
                    .iter()
                    .zip(q)
                    .map(|(g, q)| g * q)
                    .sum()
            })
            .collect()
    }

    fn energies_into(&self, i: usize, w: &[f64], cost_e: &[f64], out: &mut [f64]) {
        let p = &w[..self.n_risk];
        let block = &self.risk[i * self.n_cells * self.n_risk..(i + 1) * self.n_cells * self.n_risk];
        for (k, e) in out.iter_mut().enumerate() {
            let f = &block[k * self.n_risk..(k + 1) * self.n_risk];
            *e = f.iter().zip(p).map(|(f, p)| f * p).sum::<f64>() + cost_e[k];
        }
    }

    pub fn log_likelihood(&self, w: &[f64]) -> Result<f64> {
        self.check_weights(w)?;
        let cost_e = self.cost_energies(w);
        let mut energies = vec![0.0; self.n_cells];
        let mut total = NeumaierSum::default();
        for i in 0..self.n_obs {
            self.energies_into(i, w, &cost_e, &mut energies);
            let min = energies.iter().copied().fold(f64::INFINITY, f64::min);
            let z: f64 = energies.iter().map(|e| (min - e).exp()).sum();
            total.add((min - energies[self.observed[i]]) - z.ln());
        }
        Ok(total.value())
    }

    pub fn gradient(&self, w: &[f64]) -> Result<Vec<f64>> {
        Ok(self.evaluate(w, false)?.gradient)
    }

    /// Log-likelihood with its gradient `sum_i (E_p[F_i] - F_i(u_i))` and,
    /// when asked, Hessian `-sum_i Cov_p[F_i]`.
    pub fn evaluate(&self, w: &[f64], with_hessian: bool) -> Result<Evaluation> {
        self.check_weights(w)?;
        let dim = self.dim();
        let cost_e = self.cost_energies(w);
        let mut energies = vec![0.0; self.n_cells];
        let mut value = NeumaierSum::default();
        let mut grad = vec![NeumaierSum::default(); dim];
        let mut hess = vec![0.0; if with_hessian { dim * dim } else { 0 }];
        let mut mean = vec![0.0; dim];
        let mut second = vec![0.0; if with_hessian { dim * dim } else { 0 }];
        let mut f = vec![0.0; dim];

        for i in 0..self.n_obs {
            self.energies_into(i, w, &cost_e, &mut energies);
            let min = energies.iter().copied().fold(f64::INFINITY, f64::min);
            let mut z = 0.0;
            for e in energies.iter_mut() {
                *e = (min - *e).exp();
                z += *e;
            }
            let obs = self.observed[i];
            value.add(((min - self.energy_of(i, obs, w, &cost_e)) - z.ln()).min(0.0));

            mean.iter_mut().for_each(|m| *m = 0.0);
            second.iter_mut().for_each(|m| *m = 0.0);
            for (k, weight) in energies.iter().enumerate() {
                let p = weight / z;
                self.fill_features(i, k, &mut f);
                for a in 0..dim {
                    mean[a] += p * f[a];
                }
                if with_hessian {
                    for a in 0..dim {
                        let pa = p * f[a];
                        for b in a..dim {
                            second[a * dim + b] += pa * f[b];
                        }
                    }
                }
            }
            self.fill_features(i, obs, &mut f);
            for a in 0..dim {
                grad[a].add(mean[a] - f[a]);
            }
            if with_hessian {
                for a in 0..dim {
                    for b in a..dim {
                        let cov = second[a * dim + b] - mean[a] * mean[b];
                        hess[a * dim + b] -= cov;
                    }
                }
            }
        }
        if with_hessian {
            for a in 0..dim {
                for b in 0..a {
                    hess[a * dim + b] = hess[b * dim + a];
                }
            }
        }
        Ok(Evaluation {
            value: value.value(),
            gradient: grad.iter().map(NeumaierSum::value).collect(),
            hessian: with_hessian.then_some(hess),
        })
    }

    fn energy_of(&self, i: usize, k: usize, w: &[f64], cost_e: &[f64]) -> f64 {
        let f = &self.risk[(i * self.n_cells + k) * self.n_risk..][..self.n_risk];
        f.iter().zip(&w[..self.n_risk]).map(|(f, p)| f * p).sum::<f64>() + cost_e[k]
    }

    fn fill_features(&self, i: usize, k: usize, out: &mut [f64]) {
        out[..self.n_risk].copy_from_slice(&self.risk[(i * self.n_cells + k) * self.n_risk..][..self.n_risk]);
        out[self.n_risk..].copy_from_slice(&self.cost[k * self.n_cost..][..self.n_cost]);
    }
}

/// Compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Method {
    /// Newton steps on the free variables, projected onto `w >= 0`.
    #[default]
    ProjectedNewton,
    /// Plain projected gradient ascent.
    ProjectedGradient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    /// Candidate preview times, s.
    pub previews: Vec<f64>,
    /// Sup-norm of the projected gradient at which to stop.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Starting weights; all ones when `None`.
    pub initial: Option<Vec<f64>>,
    pub method: Method,
    pub integrator: IntegratorConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            previews: vec![0.6, 0.8, 1.0, 1.2],
            tolerance: 1e-6,
            max_iterations: 500,
            initial: None,
            method: Method::default(),
            integrator: IntegratorConfig::default(),
        }
    }
}

impl FitConfig {
    fn validate(&self) -> Result<()> {
        if self.previews.is_empty() {
            return Err(Error::Empty("preview grid"));
        }
        if self.previews.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(Error::invalid("preview times must be positive"));
        }
        if !(self.tolerance.is_finite() && self.tolerance > 0.0) {
            return Err(Error::invalid("tolerance must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub loglik: f64,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub weights: Vec<f64>,
    pub loglik: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
    /// One row per accepted iterate, starting with the initial point.
    pub trace: Vec<TraceRow>,
}

impl FitReport {
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iteration,loglik,step\n");
        for row in &self.trace {
            out.push_str(&format!("{},{},{}\n", row.iteration, row.loglik, row.step));
        }
        out
    }
}

fn projected_gradient(w: &[f64], g: &[f64]) -> Vec<f64> {
    w.iter().zip(g).map(|(w, g)| if *w > 0.0 { *g } else { g.max(0.0) }).collect()
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn project(w: &[f64], d: &[f64], alpha: f64) -> Vec<f64> {
    w.iter().zip(d).map(|(w, d)| (w + alpha * d).max(0.0)).collect()
}

/// Solves `m x = b` for symmetric positive definite `m` (row-major).
fn cholesky_solve(m: &[f64], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = m[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                // Also rejects NaN.
                if s.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i * n + i];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

const ARMIJO: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

/// Backtracks along the projection arc `P(w + alpha d)`; returns the new
/// point, its value and the accepted step.
fn line_search(
    cache: &FeatureCache,
    w: &[f64],
    value: f64,
    g: &[f64],
    d: &[f64],
    alpha0: f64,
) -> Result<Option<(Vec<f64>, f64, f64)>> {
    let mut alpha = alpha0;
    for _ in 0..MAX_HALVINGS {
        let trial = project(w, d, alpha);
        let gain: f64 = g.iter().zip(trial.iter().zip(w)).map(|(g, (t, w))| g * (t - w)).sum();
        if gain > 0.0 {
            let v = cache.log_likelihood(&trial)?;
            if v >= value + ARMIJO * gain && v >= value {
                return Ok(Some((trial, v, alpha)));
            }
        }
        alpha *= 0.5;
    }
    Ok(None)
}

/// Maximises the cached log-likelihood over `w >= 0`.
///
/// Iterates are monotone in `L`. Stops when the projected gradient's sup-norm
/// drops below `cfg.tolerance`; otherwise returns the last (best) iterate
/// flagged as not converged.
pub fn maximize(cache: &FeatureCache, cfg: &FitConfig) -> Result<FitReport> {
    if !(cfg.tolerance.is_finite() && cfg.tolerance > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    let dim = cache.dim();
    let mut w = match &cfg.initial {
        Some(w0) if w0.len() == dim => w0.iter().map(|x| x.max(0.0)).collect(),
        Some(w0) => {
            return Err(Error::invalid(format!(
                "initial weights have length {}, expected {dim}",
                w0.len()
            )))
        }
        None => vec![1.0; dim],
    };
    let mut eval = cache.evaluate(&w, cfg.method == Method::ProjectedNewton)?;
    let mut trace = vec![TraceRow {
        iteration: 0,
        loglik: eval.value,
        step: 0.0,
    }];
    let mut iterations = 0;
    let mut pg_norm = sup_norm(&projected_gradient(&w, &eval.gradient));

    while pg_norm >= cfg.tolerance && iterations < cfg.max_iterations {
        let g = &eval.gradient;
        let mut accepted = None;
        if let (Method::ProjectedNewton, Some(h)) = (cfg.method, &eval.hessian) {
            if let Some(d) = newton_direction(&w, g, h, pg_norm) {
                accepted = line_search(cache, &w, eval.value, g, &d, 1.0)?;
            }
        }
        if accepted.is_none() {
            let scale = sup_norm(g).max(1e-300);
            accepted = line_search(cache, &w, eval.value, g, g, 1.0 / scale)?;
        }
        let Some((next, _, step)) = accepted else {
            // no ascent left at working precision
            break;
        };
        iterations += 1;
        w = next;
        eval = cache.evaluate(&w, cfg.method == Method::ProjectedNewton)?;
        pg_norm = sup_norm(&projected_gradient(&w, &eval.gradient));
        trace.push(TraceRow {
            iteration: iterations,
            loglik: eval.value,
            step,
        });
    }

    Ok(FitReport {
        weights: w,
        loglik: eval.value,
        iterations,
        grad_norm: pg_norm,
        converged: pg_norm < cfg.tolerance,
        trace,
    })
}

/// Newton direction on the free variables; variables pinned at the bound
/// with a gradient pushing outward are held fixed.
fn newton_direction(w: &[f64], g: &[f64], h: &[f64], pg_norm: f64) -> Option<Vec<f64>> {
    let dim = w.len();
    let eps = pg_norm.min(1e-6);
    let free: Vec<usize> = (0..dim).filter(|&j| !(w[j] <= eps && g[j] < 0.0)).collect();
    if free.is_empty() {
        return None;
    }
    let n = free.len();
    let mut m = vec![0.0; n * n];
    for (a, &i) in free.iter().enumerate() {
        for (b, &j) in free.iter().enumerate() {
            m[a * n + b] = -h[i * dim + j];
        }
    }
    let rhs: Vec<f64> = free.iter().map(|&j| g[j]).collect();
    let diag_max = (0..n).map(|a| m[a * n + a]).fold(0.0, f64::max);
    let mut lambda = 1e-12 * diag_max.max(1e-12);
    for _ in 0..30 {
        let mut damped = m.clone();
        for a in 0..n {
            damped[a * n + a] += lambda;
        }
        if let Some(x) = cholesky_solve(&damped, &rhs) {
            let mut d = vec![0.0; dim];
            for (a, &j) in free.iter().enumerate() {
                d[j] = x[a];
            }
            return Some(d);
        }
        lambda *= 100.0;
    }
    None
}

fn to_model(report: &FitReport, preview: f64, n_obs: usize) -> Result<FittedModel> {
    debug_assert!(report.loglik <= 0.0);
    Ok(FittedModel {
        params: RiskParams::from_weights(&report.weights)?,
        preview,
        feature_set: crate::riskmodel::DRIVER_FEATURE_SET.to_string(),
        loglik: report.loglik,
        n_obs,
        convergence: Some(Convergence {
            converged: report.converged,
            iterations: report.iterations,
            grad_norm: report.grad_norm,
        }),
    })
}

/// Driver-model feature cache for one preview time.
pub fn driver_cache(
    data: &Dataset,
    course: &Course,
    grid: &ControlGrid,
    preview: f64,
    integrator: &IntegratorConfig,
) -> Result<FeatureCache> {
    let policy = Policy::new(course, grid, &DriverFeatures, preview, integrator)?;
    FeatureCache::build(data, &policy)
}

/// Log-likelihood of `data` under the driver model with weights `theta`.
pub fn log_likelihood(
    theta: &RiskParams,
    data: &Dataset,
    course: &Course,
    grid: &ControlGrid,
    preview: f64,
) -> Result<f64> {
    driver_cache(data, course, grid, preview, &IntegratorConfig::default())?.log_likelihood(&theta.to_weights())
}

/// Gradient of [`log_likelihood`] ordered (A, B, C, D, E).
pub fn log_likelihood_gradient(
    theta: &RiskParams,
    data: &Dataset,
    course: &Course,
    grid: &ControlGrid,
    preview: f64,
) -> Result<Vec<f64>> {
    driver_cache(data, course, grid, preview, &IntegratorConfig::default())?.gradient(&theta.to_weights())
}

/// Fits the driver model at a fixed preview time.
pub fn fit(
    data: &Dataset,
    course: &Course,
    grid: &ControlGrid,
    preview: f64,
    cfg: &FitConfig,
) -> Result<(FittedModel, FitReport)> {
    let cache = driver_cache(data, course, grid, preview, &cfg.integrator)?;
    let report = maximize(&cache, cfg)?;
    Ok((to_model(&report, preview, data.len())?, report))
}

/// Picks the highest-likelihood model; ties (within 1e-12 relative) go to
/// the longer preview.
pub fn select_best(models: Vec<FittedModel>) -> Result<FittedModel> {
    models
        .into_iter()
        .reduce(|best, m| {
            let tol = 1e-12 * best.loglik.abs().max(m.loglik.abs()).max(1.0);
            if m.loglik > best.loglik + tol || ((m.loglik - best.loglik).abs() <= tol && m.preview > best.preview) {
                m
            } else {
                best
            }
        })
        .ok_or(Error::Empty("preview grid"))
}

/// Fits every preview in `cfg.previews` and keeps the most likely one.
pub fn select_preview(
    data: &Dataset,
    course: &Course,
    grid: &ControlGrid,
    cfg: &FitConfig,
) -> Result<FittedModel> {
    Ok(select_preview_with_reports(data, course, grid, cfg)?.0)
}

/// As [`select_preview`], also returning every per-preview fit.
pub fn select_preview_with_reports(
    data: &Dataset,
    course: &Course,
    grid: &ControlGrid,
    cfg: &FitConfig,
) -> Result<(FittedModel, Vec<(FittedModel, FitReport)>)> {
    cfg.validate()?;
    let fits = cfg
        .previews
        .par_iter()
        .map(|&p| fit(data, course, grid, p, cfg))
        .collect::<Result<Vec<_>>>()?;
    let best = select_best(fits.iter().map(|(m, _)| m.clone()).collect())?;
    Ok((best, fits))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Random cache with `n_obs` observations over `n_cells` cells.
    fn toy_cache(n_obs: usize, n_cells: usize, seed: u64) -> FeatureCache {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let risk: Vec<f64> = (0..n_obs * n_cells * 3).map(|_| rng.random_range(0.0..4.0)).collect();
        let cost: Vec<f64> = (0..n_cells * 2).map(|_| rng.random_range(0.0..1.0)).collect();
        let observed = (0..n_obs).map(|_| rng.random_range(0..n_cells)).collect();
        FeatureCache::from_parts(3, risk, 2, cost, observed, 1.0).unwrap()
    }

    #[test]
    fn toy_three_cell_likelihood() {
        let ln2 = 2f64.ln();
        let cache = FeatureCache::from_parts(1, vec![0.0, ln2, ln2], 0, vec![], vec![0], 1.0).unwrap();
        let l = cache.log_likelihood(&[1.0]).unwrap();
        assert!((l - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_give_uniform_likelihood() {
        let cache = toy_cache(37, 441, 1);
        let l = cache.log_likelihood(&[0.0; 5]).unwrap();
        assert!((l - 37.0 * (1.0f64 / 441.0).ln()).abs() < 1e-9);
    }

    #[test]
    fn gradient_at_zero_is_mean_minus_observed() {
        let cache = toy_cache(1, 9, 2);
        let g = cache.gradient(&[0.0; 5]).unwrap();
        let obs = cache.features(0, cache.observed_cell(0));
        for j in 0..5 {
            let mean: f64 = (0..9).map(|k| cache.features(0, k)[j]).sum::<f64>() / 9.0;
            assert!((g[j] - (mean - obs[j])).abs() < 1e-14);
        }
    }

    #[test]
    fn stationary_when_observed_equals_uniform_mean() {
        // two cells with mirrored features; observations split evenly
        let risk = vec![1.0, 0.0, 2.0, 0.0, 1.0, 0.0, 1.0, 0.0, 2.0, 0.0, 1.0, 0.0];
        let cost = vec![0.5, 0.1, 0.5, 0.1];
        let cache = FeatureCache::from_parts(3, risk, 2, cost, vec![0, 1], 1.0).unwrap();
        let g = cache.gradient(&[0.0; 5]).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-15), "{g:?}");
    }

    #[test]
    fn hessian_matches_gradient_differences() {
        let cache = toy_cache(20, 30, 3);
        let w = [0.3, 1.2, 0.7, 2.0, 0.1];
        let e = cache.evaluate(&w, true).unwrap();
        let h = e.hessian.unwrap();
        let step = 1e-6;
        for j in 0..5 {
            let mut wp = w;
            let mut wm = w;
            wp[j] += step;
            wm[j] -= step;
            let gp = cache.gradient(&wp).unwrap();
            let gm = cache.gradient(&wm).unwrap();
            for i in 0..5 {
                let fd = (gp[i] - gm[i]) / (2.0 * step);
                assert!((fd - h[i * 5 + j]).abs() < 1e-6 * h[i * 5 + j].abs().max(1.0));
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(Dataset::new(vec![]).is_err());
        let o = Observation { t: 1.0, state: VehicleState::new(0.0, 0.0, 1.0, 0.0), cell: 0 };
        assert!(Dataset::new(vec![o, Observation { t: 0.5, ..o }]).is_err());
        let cache = toy_cache(3, 4, 4);
        assert!(cache.log_likelihood(&[1.0; 4]).is_err());
        assert!(cache.log_likelihood(&[1.0, f64::NAN, 1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn both_methods_reach_same_optimum() {
        let cache = toy_cache(200, 25, 5);
        let newton = maximize(&cache, &FitConfig::default()).unwrap();
        let gradient = maximize(
            &cache,
            &FitConfig {
                method: Method::ProjectedGradient,
                max_iterations: 20_000,
                tolerance: 1e-4,
                ..FitConfig::default()
            },
        )
        .unwrap();
        assert!(newton.converged, "{newton:?}");
        assert!((newton.loglik - gradient.loglik).abs() < 1e-6 * newton.loglik.abs());
        assert!(newton.trace.windows(2).all(|r| r[1].loglik >= r[0].loglik));
        assert!(gradient.trace.windows(2).all(|r| r[1].loglik >= r[0].loglik));
    }

    #[test]
    fn optimum_beats_random_probes() {
        use rand::{Rng, SeedableRng};
        let cache = toy_cache(150, 40, 6);
        let fit = maximize(&cache, &FitConfig::default()).unwrap();
        assert!(fit.converged);
        assert!(fit.weights.iter().all(|w| *w >= 0.0));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(60);
        for _ in 0..100 {
            let probe: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..5.0)).collect();
            assert!(cache.log_likelihood(&probe).unwrap() <= fit.loglik + 1e-9);
        }
    }

    #[test]
    fn active_bound_is_respected() {
        // the observed cell always has the largest first feature, pushing A to 0
        let n_cells = 5;
        let mut risk = Vec::new();
        for _ in 0..10 {
            for k in 0..n_cells {
                risk.extend([k as f64, 0.0, 0.0]);
            }
        }
        let cost = vec![0.0; n_cells * 2];
        let cache = FeatureCache::from_parts(3, risk, 2, cost, vec![4; 10], 1.0).unwrap();
        let fit = maximize(&cache, &FitConfig::default()).unwrap();
        assert_eq!(fit.weights[0], 0.0);
        assert!(fit.converged);
    }

    #[test]
    fn tie_break_prefers_longer_preview() {
        let m = |preview: f64, loglik: f64| FittedModel {
            loglik,
            ..FittedModel::from_params(RiskParams::default(), preview)
        };
        let best = select_best(vec![m(0.6, -10.0), m(1.2, -10.0), m(1.0, -10.0)]).unwrap();
        assert_eq!(best.preview, 1.2);
        let best = select_best(vec![m(0.6, -9.0), m(1.2, -10.0)]).unwrap();
        assert_eq!(best.preview, 0.6);
        assert!(select_best(vec![]).is_err());
    }
}
