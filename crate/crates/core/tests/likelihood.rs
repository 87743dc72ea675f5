mod common;

use rand::seq::SliceRandom;
use rand::Rng;
use riskfield::course::Course;
use riskfield::dynamics::{next_state, IntegratorConfig};
use riskfield::mle::{driver_cache, fit, select_best, select_preview, Dataset, FeatureCache, FitConfig, Observation};
use riskfield::policy::ControlGrid;
use riskfield::riskmodel::{control_features, state_features, FittedModel, RiskParams};

use common::{brute_log_likelihood, random_dataset, random_params, rng, track};

const PREVIEW: f64 = 1.2;

fn cache(data: &Dataset, course: &Course, grid: &ControlGrid) -> FeatureCache {
    driver_cache(data, course, grid, PREVIEW, &IntegratorConfig::default()).unwrap()
}

fn weights(r: &mut impl Rng, hi: f64) -> Vec<f64> {
    (0..5).map(|_| r.random_range(0.0..hi)).collect()
}

#[test]
fn matches_brute_force_softmax() {
    let course = track();
    let grid = ControlGrid::default();
    let mut r = rng(20);
    for _ in 0..5 {
        let data = random_dataset(&course, &grid, 100, &mut r);
        let theta = random_params(&mut r, 0.0, 50.0);
        let got = riskfield::mle::log_likelihood(&theta, &data, &course, &grid, PREVIEW).unwrap();
        let want = brute_log_likelihood(&theta, &data, &course, &grid, PREVIEW);
        assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "{got} vs {want}");
    }
}

#[test]
fn zero_weights_give_uniform_likelihood() {
    let course = track();
    let grid = ControlGrid::default();
    let data = random_dataset(&course, &grid, 37, &mut rng(21));
    let l = cache(&data, &course, &grid).log_likelihood(&[0.0; 5]).unwrap();
    let want = 37.0 * (1.0f64 / 441.0).ln();
    assert!((l - want).abs() <= 1e-10 * want.abs());
}

#[test]
fn single_observation_gradient_at_zero_is_mean_minus_observed() {
    let course = track();
    let grid = ControlGrid::default();
    let data = random_dataset(&course, &grid, 1, &mut rng(22));
    let o = &data.observations()[0];
    let features: Vec<[f64; 5]> = grid
        .controls()
        .iter()
        .map(|u| {
            let s = next_state(&o.state, u, PREVIEW, &IntegratorConfig::default()).unwrap();
            let f = state_features(&s, &course).unwrap();
            let g = control_features(u);
            [f[0], f[1], f[2], g[0], g[1]]
        })
        .collect();
    let g = cache(&data, &course, &grid).gradient(&[0.0; 5]).unwrap();
    for j in 0..5 {
        let mean = features.iter().map(|f| f[j]).sum::<f64>() / grid.len() as f64;
        let want = mean - features[o.cell][j];
        assert!((g[j] - want).abs() <= 1e-10 * want.abs().max(1.0), "{j}: {} vs {want}", g[j]);
    }
}

#[test]
fn gradient_matches_central_differences() {
    let course = track();
    let grid = ControlGrid::default();
    let mut r = rng(23);
    let h = 1e-5;
    for _ in 0..5 {
        let c = cache(&random_dataset(&course, &grid, 100, &mut r), &course, &grid);
        let w = weights(&mut r, 50.0);
        let g = c.gradient(&w).unwrap();
        for j in 0..5 {
            let (mut up, mut down) = (w.clone(), w.clone());
            up[j] += h;
            down[j] -= h;
            let fd = (c.log_likelihood(&up).unwrap() - c.log_likelihood(&down).unwrap()) / (2.0 * h);
            assert!((fd - g[j]).abs() <= 1e-6 * g[j].abs().max(1.0), "{j}: {fd} vs {}", g[j]);
        }
        // Random direction.
        let d: Vec<f64> = (0..5).map(|_| r.random_range(-1.0..1.0)).collect();
        let at = |t: f64| -> Vec<f64> { w.iter().zip(&d).map(|(a, b)| a + t * b).collect() };
        let fd = (c.log_likelihood(&at(h)).unwrap() - c.log_likelihood(&at(-h)).unwrap()) / (2.0 * h);
        let dd: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
        assert!((fd - dd).abs() <= 1e-6 * dd.abs().max(1.0), "{fd} vs {dd}");
    }
}

#[test]
fn midpoint_concavity() {
    let course = track();
    let grid = ControlGrid::default();
    let mut r = rng(24);
    for _ in 0..2 {
        let c = cache(&random_dataset(&course, &grid, 100, &mut r), &course, &grid);
        for _ in 0..200 {
            let (a, b) = (weights(&mut r, 100.0), weights(&mut r, 100.0));
            let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
            let (la, lb) = (c.log_likelihood(&a).unwrap(), c.log_likelihood(&b).unwrap());
            let lm = c.log_likelihood(&mid).unwrap();
            let tol = 1e-9 * la.abs().max(lb.abs()).max(1.0);
            assert!(lm >= 0.5 * (la + lb) - tol, "{lm} < {}", 0.5 * (la + lb));
        }
    }
}

/// Data drawn from the model itself at the recorded states.
fn model_dataset(theta: &RiskParams, n: usize, seed: u64, course: &Course, grid: &ControlGrid) -> Dataset {
    let mut r = rng(seed);
    let base = random_dataset(course, grid, n, &mut r);
    let obs = base
        .observations()
        .iter()
        .map(|o| {
            let d = riskfield::policy::action_distribution(&o.state, theta, grid, PREVIEW, course).unwrap();
            Observation {
                cell: riskfield::policy::sample_control(&d, &mut r),
                ..*o
            }
        })
        .collect();
    Dataset::new(obs).unwrap()
}

#[test]
fn fit_is_optimal_monotone_and_order_invariant() {
    let course = track();
    let grid = ControlGrid::default();
    let theta = RiskParams::new(0.5, 10.0, 0.01, 1.5, 40.0).unwrap();
    let data = model_dataset(&theta, 300, 25, &course, &grid);
    let cfg = FitConfig::default();
    let (model, report) = fit(&data, &course, &grid, PREVIEW, &cfg).unwrap();
    assert!(report.converged);
    assert!(model.loglik <= 0.0);
    assert!(report.trace.windows(2).all(|w| w[1].loglik >= w[0].loglik));

    let c = cache(&data, &course, &grid);
    let mut r = rng(26);
    for _ in 0..100 {
        let probe = weights(&mut r, 60.0);
        assert!(c.log_likelihood(&probe).unwrap() <= model.loglik);
    }

    let mut obs = data.observations().to_vec();
    obs.shuffle(&mut r);
    let t: Vec<f64> = (0..obs.len()).map(|i| i as f64).collect();
    for (o, t) in obs.iter_mut().zip(t) {
        o.t = t;
    }
    let (shuffled, _) = fit(&Dataset::new(obs).unwrap(), &course, &grid, PREVIEW, &cfg).unwrap();
    assert!((shuffled.loglik - model.loglik).abs() < 1e-10 * model.loglik.abs().max(1.0));
    for (a, b) in shuffled.params.to_weights().iter().zip(model.params.to_weights()) {
        assert!((a - b).abs() < 1e-8 * b.abs().max(1.0), "{a} vs {b}");
    }
}

/// Inverse of a small symmetric positive definite matrix by Gauss-Jordan.
fn invert(mut m: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = m.len();
    let mut inv: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(i == j)).collect()).collect();
    for c in 0..n {
        let pivot = m[c][c];
        for j in 0..n {
            m[c][j] /= pivot;
            inv[c][j] /= pivot;
        }
        for r in 0..n {
            if r != c {
                let k = m[r][c];
                for j in 0..n {
                    m[r][j] -= k * m[c][j];
                    inv[r][j] -= k * inv[c][j];
                }
            }
        }
    }
    inv
}

#[test]
fn uniform_data_fits_near_zero() {
    let course = track();
    let grid = ControlGrid::default();
    let m = 2000;
    let data = random_dataset(&course, &grid, m, &mut rng(27));
    let (model, report) = fit(&data, &course, &grid, PREVIEW, &FitConfig::default()).unwrap();
    assert!(report.converged);
    let uniform = m as f64 * (1.0f64 / 441.0).ln();
    // Likelihood-ratio statistic against the true (zero) parameters; the
    // chi-square(5) upper 1e-4 tail is about 25.7.
    assert!(model.loglik >= uniform);
    assert!(2.0 * (model.loglik - uniform) < 25.7, "{} vs {uniform}", model.loglik);

    // Each coordinate within four standard errors of zero, taken from the
    // observed information at the null.
    let ev = cache(&data, &course, &grid).evaluate(&[0.0; 5], true).unwrap();
    let h = ev.hessian.unwrap();
    let info: Vec<Vec<f64>> = (0..5).map(|a| (0..5).map(|b| -h[a * 5 + b]).collect()).collect();
    let cov = invert(info);
    for (j, w) in model.params.to_weights().iter().enumerate() {
        let se = cov[j][j].sqrt();
        assert!(*w <= 4.0 * se, "coordinate {j}: {w} vs se {se}");
    }
}

#[test]
fn single_preview_grid_returns_that_fit() {
    let course = track();
    let grid = ControlGrid::default();
    let data = random_dataset(&course, &grid, 50, &mut rng(28));
    let cfg = FitConfig {
        previews: vec![0.8],
        ..FitConfig::default()
    };
    let picked = select_preview(&data, &course, &grid, &cfg).unwrap();
    let (direct, _) = fit(&data, &course, &grid, 0.8, &cfg).unwrap();
    assert_eq!(picked, direct);
}

#[test]
fn ties_go_to_the_longest_preview() {
    let make = |preview| FittedModel {
        loglik: -100.0,
        ..FittedModel::from_params(RiskParams::new(0.0, 0.0, 0.0, 0.0, 0.0).unwrap(), preview)
    };
    let best = select_best(vec![make(0.6), make(1.2), make(0.8), make(1.0)]).unwrap();
    assert_eq!(best.preview, 1.2);
}
