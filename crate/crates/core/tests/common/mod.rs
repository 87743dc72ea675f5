#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use riskfield::course::{stadium, Course, StadiumLayout};
use riskfield::dynamics::{next_state, IntegratorConfig, VehicleState};
use riskfield::mle::{Dataset, Observation};
use riskfield::policy::ControlGrid;
use riskfield::riskmodel::{control_features, state_features, RiskParams};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn track() -> Course {
    stadium(&StadiumLayout::default()).unwrap()
}

/// State near the course, biased toward obstacle approaches.
pub fn random_state(course: &Course, rng: &mut ChaCha8Rng) -> VehicleState {
    let s = if rng.random_bool(0.5) {
        let j = rng.random_range(0..course.obstacles().len());
        (course.obstacle_arc(j) - rng.random_range(15.0..35.0)).rem_euclid(course.length())
    } else {
        rng.random_range(0.0..course.length())
    };
    let mut st = course.state_at(s, rng.random_range(-1.5..1.5), rng.random_range(15.0..25.0));
    st.psi += rng.random_range(-0.1..0.1);
    st
}

pub fn random_dataset(course: &Course, grid: &ControlGrid, n: usize, rng: &mut ChaCha8Rng) -> Dataset {
    let obs = (0..n)
        .map(|i| Observation {
            t: i as f64 * 0.1,
            state: random_state(course, rng),
            cell: rng.random_range(0..grid.len()),
        })
        .collect();
    Dataset::new(obs).unwrap()
}

pub fn random_params(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> RiskParams {
    let w: Vec<f64> = (0..5).map(|_| rng.random_range(lo..hi)).collect();
    RiskParams::from_weights(&w).unwrap()
}

/// Log-likelihood recomputed from scratch: stepwise previews, direct
/// feature evaluation and a max-shifted log-sum-exp per observation.
pub fn brute_log_likelihood(theta: &RiskParams, data: &Dataset, course: &Course, grid: &ControlGrid, preview: f64) -> f64 {
    let w = theta.to_weights();
    let cfg = IntegratorConfig::default();
    let mut total = 0.0;
    for o in data.observations() {
        let energies: Vec<f64> = grid
            .controls()
            .iter()
            .map(|u| {
                let s = next_state(&o.state, u, preview, &cfg).unwrap();
                let f = state_features(&s, course).unwrap();
                let g = control_features(u);
                w[0] * f[0] + w[1] * f[1] + w[2] * f[2] + w[3] * g[0] + w[4] * g[1]
            })
            .collect();
        let m = energies.iter().copied().fold(f64::INFINITY, f64::min);
        let z: f64 = energies.iter().map(|e| (m - e).exp()).sum();
        total += (m - energies[o.cell]) - z.ln();
    }
    total
}
