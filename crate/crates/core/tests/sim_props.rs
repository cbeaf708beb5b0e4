//! Closed-loop episode invariants, using grid-independent fan policies so
//! the behaviour does not depend on training.

mod common;

use common::fan_policies;
use proptest::prelude::*;
use smartbsp::grid::SensorGeometry;
use smartbsp::planner::{Pose, PolicySet};
use smartbsp::sim::{
    in_collision, make_scenario, run_episode, EpisodeResult, EpisodeSetup, ScenarioKind, ScenarioParams, SimConfig,
    Termination, WorldScenario,
};
use smartbsp::spline::{CostWeights, SplineSettings};
use smartbsp::Point2;

fn setup(policies: &PolicySet, fov: f64) -> EpisodeSetup<'_> {
    EpisodeSetup {
        policies,
        geometry: SensorGeometry::with_fov(fov),
        weights: CostWeights::default(),
        settings: SplineSettings::default(),
        sim: SimConfig::default(),
    }
}

fn open_world(target: Point2) -> WorldScenario {
    WorldScenario {
        obstacle_points: Vec::new(),
        start: Pose::default(),
        target,
        arrival_radius: 0.5,
    }
}

fn check_invariants(ep: &EpisodeResult, world: &WorldScenario, cfg: &SimConfig) {
    for w in ep.trajectory.windows(2) {
        let step = w[0].pose.position().distance(w[1].pose.position());
        assert!(step <= cfg.speed * cfg.dt + 1e-12, "jump of {step} m");
        assert!((w[1].t - w[0].t - cfg.dt).abs() < 1e-9);
    }
    let flagged = ep.trajectory.iter().filter(|s| s.replan).count();
    assert_eq!(flagged, ep.replan_events.len());
    for e in &ep.replan_events {
        assert!(ep.trajectory[e.step].replan);
    }
    for pair in ep.replan_events.windows(2) {
        let progress = pair[1].progress_on_previous.expect("later replans follow a path");
        assert!(progress >= cfg.replan_fraction * pair[0].path_length - 1e-12);
    }
    let hit = |p: Point2| in_collision(p, &world.obstacle_points, cfg.clearance_m);
    let last = ep.trajectory.last().unwrap().pose.position();
    assert_eq!(ep.collided, hit(last));
    assert!(ep.trajectory[..ep.trajectory.len() - 1].iter().all(|s| !hit(s.pose.position())));
    assert_eq!(ep.reached, last.distance(world.target) < world.arrival_radius);
    assert_eq!(ep.steps + 1, ep.trajectory.len());
}

#[test]
fn straight_run_is_within_ten_percent_of_the_line() {
    let policies = fan_policies();
    let s = setup(&policies, 100.0);
    let world = open_world(Point2::new(12.0, 0.0));
    let ep = run_episode(&world, &s).unwrap();
    check_invariants(&ep, &world, &s.sim);
    assert!(ep.reached);
    let ideal = 12.0 - world.arrival_radius;
    assert!(ep.driven_length() <= 1.1 * ideal, "{} vs {ideal}", ep.driven_length());
    assert_eq!(ep.fallback_count(), 0);
}

#[test]
fn off_axis_targets_are_reached_in_open_space() {
    let policies = fan_policies();
    for fov in [100.0, 120.0, 180.0] {
        let s = setup(&policies, fov);
        for target in [Point2::new(8.0, 5.0), Point2::new(6.0, -6.0), Point2::new(-4.0, 3.0)] {
            let world = open_world(target);
            let ep = run_episode(&world, &s).unwrap();
            check_invariants(&ep, &world, &s.sim);
            assert!(ep.reached, "fov {fov} target {target:?}: {:?}", ep.termination);
            let ideal = target.norm() - world.arrival_radius;
            assert!(ep.driven_length() >= ideal - 1e-9);
        }
    }
}

#[test]
fn enclosed_start_is_all_blocked() {
    let policies = fan_policies();
    let s = setup(&policies, 100.0);
    // a dense ring of points around the start fills every cell
    let mut pts = Vec::new();
    for ring in 1..50 {
        for k in 0..200 {
            pts.push(Point2::from_polar(0.3 + ring as f64 * 0.05, k as f64 * std::f64::consts::TAU / 200.0));
        }
    }
    let world = WorldScenario {
        obstacle_points: pts,
        ..open_world(Point2::new(10.0, 0.0))
    };
    let ep = run_episode(&world, &s).unwrap();
    assert_eq!(ep.termination, Termination::AllBlocked);
    assert_eq!(ep.steps, 0);
    assert_eq!(ep.replan_events.len(), 1);
}

#[test]
fn episodes_are_deterministic() {
    let policies = fan_policies();
    let s = setup(&policies, 100.0);
    let world = make_scenario(&ScenarioKind::RandomField, 4, &ScenarioParams::default()).unwrap();
    let a = run_episode(&world, &s).unwrap();
    let b = run_episode(&world, &s).unwrap();
    assert_eq!(a.trajectory, b.trajectory);
    let mut csv_a = Vec::new();
    let mut csv_b = Vec::new();
    a.write_log_csv(&mut csv_a).unwrap();
    b.write_log_csv(&mut csv_b).unwrap();
    assert_eq!(csv_a, csv_b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn random_fields_respect_loop_invariants(seed in 0u64..10_000, count in 0usize..16) {
        let policies = fan_policies();
        let s = setup(&policies, 100.0);
        let params = ScenarioParams { obstacle_count: count, ..ScenarioParams::default() };
        let world = make_scenario(&ScenarioKind::RandomField, seed, &params).unwrap();
        let ep = run_episode(&world, &s).unwrap();
        check_invariants(&ep, &world, &s.sim);
    }
}
