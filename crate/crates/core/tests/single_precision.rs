//! The generic core instantiated at `f32`: fit, calibrate, and drive past
//! an obstacle, checked against the `f64` run of the same pipeline.

use koopnav::conformal::{calibrate, nonconformity_scores, CalibrationPair};
use koopnav::koopman::{fit_body_frame, Dictionary};
use koopnav::qp::QpStatus;
use koopnav::ref_gen::{next_waypoint, RefGenConfig};
use koopnav::sim_env::{collect_dataset, unicycle_step, CollectConfig, ExcitationPolicy, Position};
use koopnav::{Model32, Obstacle32, Real};

fn drive<T: Real>(
    model: &koopnav::koopman::KoopmanModel<T>,
    obstacles: &[koopnav::sim_env::ObstacleSpec<T>],
    delta: T,
) -> (bool, f64, usize) {
    let mut cfg = koopnav::mpc::MpcConfig::for_model(model);
    cfg.solver.eps_abs = T::lit(1e-4);
    cfg.solver.eps_rel = T::lit(1e-4);
    let mut ctl = koopnav::mpc::MpcController::new(cfg);
    let goal = Position::new(T::lit(1.5), T::zero());
    let mut x = koopnav::sim_env::State::new(T::zero(), T::lit(0.02), T::zero());
    let rg = RefGenConfig::default();
    let mut clearance = f64::INFINITY;
    let mut optimal = 0;
    for k in 0..120 {
        if (x.position() - goal).norm() <= T::lit(0.1) {
            return (true, clearance, optimal);
        }
        let w = next_waypoint(&x, &goal, obstacles, k, delta, &rg).unwrap();
        let r = ctl.step(model, &x, &w.state, obstacles, k, delta).unwrap();
        optimal += usize::from(r.status == QpStatus::Optimal);
        x = unicycle_step(&x, &r.control, T::lit(0.1)).unwrap();
        clearance =
            clearance.min(koopnav::sim_env::min_obstacle_distance(&x, obstacles, k + 1).as_f64());
    }
    (false, clearance, optimal)
}

#[test]
fn f32_stack_reaches_goal_around_obstacle() {
    let ds = collect_dataset(
        &CollectConfig::<f32>::default(),
        &ExcitationPolicy::default(),
        80,
        40,
        3,
    )
    .unwrap();
    let model: Model32 =
        fit_body_frame(&ds.transitions, Dictionary::Default11, 1e-5, 10, 2).unwrap();

    let pairs: Vec<CalibrationPair<f32>> = ds
        .transitions
        .iter()
        .enumerate()
        .map(|(i, t)| CalibrationPair {
            scenario: 0,
            step: i,
            truth: t.next_state,
            predicted: model.predict_state(&t.state, &t.control).unwrap(),
        })
        .collect();
    let cal = calibrate(&nonconformity_scores(&pairs).unwrap(), 0.1f32, 1.0, 0.01).unwrap();
    let delta = cal.margin().unwrap();
    assert!(delta > 0.0 && delta < 0.2, "delta {delta}");

    let obstacles: Vec<Obstacle32> = vec![Obstacle32::fixed(1, 0.3, [0.75, 0.0]).unwrap()];
    let (done, clearance, optimal) = drive(&model, &obstacles, delta);
    assert!(done, "f32 run did not reach the goal");
    assert!(clearance > 0.0, "clearance {clearance}");
    assert!(optimal > 0);

    // the same pipeline in f64 behaves the same way
    let ds64 = collect_dataset(
        &CollectConfig::<f64>::default(),
        &ExcitationPolicy::default(),
        80,
        40,
        3,
    )
    .unwrap();
    let model64 = fit_body_frame(&ds64.transitions, Dictionary::Default11, 1e-5, 10, 2).unwrap();
    let obstacles64 = vec![koopnav::Obstacle64::fixed(1, 0.3, [0.75, 0.0]).unwrap()];
    let (done64, clearance64, _) = drive(&model64, &obstacles64, delta as f64);
    assert!(done64 && clearance64 > 0.0);
}
