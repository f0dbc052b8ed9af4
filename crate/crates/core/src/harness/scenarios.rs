//! Built-in scenario reconstructions. The same definitions ship as JSON
//! files under `scenarios/` at the repository root.

use std::f64::consts::FRAC_PI_4;

use super::{Confidence, Jitter, ReferenceMode, Scenario};
use crate::safe_sets::ObstaclePrediction;
use crate::sim_env::{Motion, ObstacleSpec};

pub const BUILTIN_NAMES: [&str; 4] = ["fig2", "fig3", "fig4", "free"];

fn obstacle(id: u32, radius: f64, motion: Motion<f64>) -> ObstacleSpec<f64> {
    ObstacleSpec { id, radius, motion }
}

fn base(name: &str, start: [f64; 3], targets: Vec<[f64; 2]>, max_steps: usize) -> Scenario {
    Scenario {
        name: name.into(),
        start,
        targets,
        goal_tolerance: 0.1,
        obstacles: Vec::new(),
        confidence: Confidence::Alpha(0.02),
        dt: 0.1,
        horizon: 10,
        max_steps,
        seed: 0,
        reference: ReferenceMode::Governor,
        prediction: ObstaclePrediction::Frozen,
        jitter: Jitter::default(),
    }
}

/// Multi-target run from (-2, -2) to (2, 0) through three moving
/// obstacles and one static one.
fn fig2() -> Scenario {
    let mut s = base(
        "fig2",
        [-2.0, -2.0, FRAC_PI_4],
        vec![[-0.6, -0.6], [0.6, 0.6], [2.0, 0.0]],
        400,
    );
    s.obstacles = vec![
        obstacle(
            1,
            0.3,
            Motion::Sinusoidal {
                center: [-1.2, -1.3],
                amplitude: [0.4, -0.4],
                period: 80.0,
            },
        ),
        obstacle(
            2,
            0.3,
            Motion::Linear {
                start: [0.0, 1.6],
                velocity: [0.0, -0.008],
            },
        ),
        obstacle(3, 0.25, Motion::Static { center: [1.3, 0.2] }),
        obstacle(
            4,
            0.25,
            Motion::Sinusoidal {
                center: [0.9, -0.6],
                amplitude: [0.5, 0.0],
                period: 100.0,
            },
        ),
    ];
    s.jitter = Jitter {
        start: 0.05,
        heading: 0.1,
        obstacle: 0.15,
    };
    s
}

/// Route of `fig2` with obstacles drifting head-on into each leg, so the
/// frozen-obstacle prediction is wrong by a few millimeters per step and
/// the margin has to absorb it.
fn fig3() -> Scenario {
    let mut s = fig2();
    s.name = "fig3".into();
    s.obstacles = vec![
        obstacle(
            1,
            0.3,
            Motion::Linear {
                start: [-0.9, -1.0],
                velocity: [-0.007, -0.007],
            },
        ),
        obstacle(
            2,
            0.25,
            Motion::Linear {
                start: [0.4, 0.3],
                velocity: [-0.007, -0.007],
            },
        ),
        obstacle(
            3,
            0.25,
            Motion::Linear {
                start: [1.6, 0.25],
                velocity: [-0.007, 0.003],
            },
        ),
    ];
    s
}

/// Single goal straight ahead with one obstacle in between.
fn fig4() -> Scenario {
    let mut s = base("fig4", [-1.0, 0.0, 0.0], vec![[0.5, 0.0]], 200);
    s.obstacles = vec![obstacle(
        1,
        0.3,
        Motion::Static {
            center: [-0.25, 0.0],
        },
    )];
    s.jitter = Jitter {
        start: 0.0,
        heading: 0.05,
        obstacle: 0.05,
    };
    s
}

fn free() -> Scenario {
    base("free", [0.0, 0.0, 0.0], vec![[1.0, 0.0]], 100)
}

pub fn builtin(name: &str) -> Option<Scenario> {
    match name {
        "fig2" => Some(fig2()),
        "fig3" => Some(fig3()),
        "fig4" => Some(fig4()),
        "free" => Some(free()),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_validate_and_roundtrip() {
        for name in BUILTIN_NAMES {
            let s = builtin(name).unwrap();
            s.validate().unwrap();
            let back: Scenario = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
            assert_eq!(back, s);
        }
        assert!(builtin("nope").is_none());
    }

    #[test]
    fn bundled_files_match_builtins() {
        let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
        for name in BUILTIN_NAMES {
            let file = Scenario::load(dir.join(format!("{name}.scenario.json"))).unwrap();
            assert_eq!(file, builtin(name).unwrap(), "{name}");
        }
    }

    #[test]
    fn realize_is_seeded() {
        let s = builtin("fig2").unwrap();
        assert_eq!(s.realize(4), s.realize(4));
        assert_ne!(s.realize(4), s.realize(5));
        assert_eq!(s.realize(4).jitter, Jitter::default());
        // targets never move
        assert_eq!(s.realize(9).targets, s.targets);
    }
}
