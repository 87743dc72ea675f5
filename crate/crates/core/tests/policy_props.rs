mod common;

use proptest::prelude::*;
use riskfield::course::{Course, CourseFile, Point};
use riskfield::dynamics::{IntegratorConfig, VehicleState};
use riskfield::policy::{action_distribution, ControlGrid, Policy};
use riskfield::riskmodel::{DriverFeatures, RiskParams};

use common::{random_params, random_state, rng, track};

fn mirrored(course: &Course) -> Course {
    let flip = |p: &Point| Point::new(p.x, -p.y);
    Course::new(CourseFile {
        centerline: course.centerline().iter().map(flip).collect(),
        obstacles: course.obstacles().iter().map(flip).collect(),
        ..course.spec().clone()
    })
    .unwrap()
}

#[test]
fn mirroring_course_and_state_mirrors_the_distribution() {
    let course = track();
    let flipped = mirrored(&course);
    let grid = ControlGrid::default();
    let n2 = grid.u2.count;
    let mut r = rng(30);
    for _ in 0..50 {
        let s = random_state(&course, &mut r);
        let theta = random_params(&mut r, 0.0, 100.0);
        let d = action_distribution(&s, &theta, &grid, 1.2, &course).unwrap();
        let m = VehicleState::new(s.x, -s.y, s.v, -s.psi);
        let dm = action_distribution(&m, &theta, &grid, 1.2, &flipped).unwrap();
        for k in 0..grid.len() {
            let (i1, i2) = grid.split(k);
            let mk = grid.cell(i1, n2 - 1 - i2);
            assert!((d.probs[k] - dm.probs[mk]).abs() <= 1e-9, "{} vs {}", d.probs[k], dm.probs[mk]);
        }
    }
}

#[test]
fn argmax_is_argmin_of_energy() {
    let course = track();
    let grid = ControlGrid::default();
    let policy = Policy::new(&course, &grid, &DriverFeatures, 1.2, &IntegratorConfig::default()).unwrap();
    let mut r = rng(31);
    for _ in 0..200 {
        let s = random_state(&course, &mut r);
        let w = random_params(&mut r, 0.0, 100.0).to_weights();
        let e = policy.energies(&s, &w).unwrap();
        let d = policy.distribution(&s, &w).unwrap();
        let min = e.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(e[d.argmax()], min);
    }
}

#[test]
fn zero_weights_are_uniform() {
    let course = track();
    let grid = ControlGrid::default();
    let s = course.state_at(10.0, 0.5, 20.0);
    let d = action_distribution(&s, &RiskParams::new(0.0, 0.0, 0.0, 0.0, 0.0).unwrap(), &grid, 1.2, &course).unwrap();
    assert!(d.probs.iter().all(|p| (p - 1.0 / 441.0).abs() < 1e-15));
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn distributions_are_normalized(seed in any::<u64>(), scale in 0.0f64..1e3) {
        let course = track();
        let grid = ControlGrid::default();
        let mut r = rng(seed);
        let s = random_state(&course, &mut r);
        let theta = random_params(&mut r, 0.0, 1.0).scaled(scale);
        let d = action_distribution(&s, &theta, &grid, 1.2, &course).unwrap();
        let sum: f64 = d.probs.iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
        prop_assert!(d.probs.iter().all(|p| *p > 0.0 && p.is_finite()));
        prop_assert!(d.log_probs.iter().all(|lp| lp.is_finite() && *lp <= 0.0));
    }
}
