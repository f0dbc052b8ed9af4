//! Ground-truth unicycle plant, moving disk obstacles, and data collection.

mod dataset;
mod log;

pub use dataset::{
    collect_dataset, load_transitions_csv, save_transitions_csv, CollectConfig, Dataset,
    DatasetWarning, ExcitationPolicy, Transition, TRANSITIONS_CSV_HEADER,
};
pub use log::{ScenarioMeta, StepRecord, TrajectoryLog, CSV_COLUMNS, CSV_SCHEMA_VERSION};

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{wrap_angle, Real};

/// Planar position in meters.
pub type Position<T> = Vector2<T>;

/// Default sampling time in seconds.
pub const DEFAULT_DT: f64 = 0.1;

/// Unicycle pose. The heading is kept in (-pi, pi].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct State<T> {
    pub x: T,
    pub y: T,
    pub theta: T,
}

impl<T: Real> State<T> {
    pub fn new(x: T, y: T, theta: T) -> Self {
        State {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn position(&self) -> Position<T> {
        Vector2::new(self.x, self.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }

    pub fn to_vec(&self) -> Vec<T> {
        vec![self.x, self.y, self.theta]
    }

    /// This pose expressed in the frame attached to `origin`.
    pub fn relative_to(&self, origin: &State<T>) -> State<T> {
        let (s, c) = origin.theta.sin_cos();
        let (dx, dy) = (self.x - origin.x, self.y - origin.y);
        State::new(c * dx + s * dy, -s * dx + c * dy, self.theta - origin.theta)
    }

    /// Inverse of [`State::relative_to`]: `rel` given in `origin`'s frame.
    pub fn from_relative(origin: &State<T>, rel: &State<T>) -> State<T> {
        let (s, c) = origin.theta.sin_cos();
        State::new(
            origin.x + c * rel.x - s * rel.y,
            origin.y + s * rel.x + c * rel.y,
            origin.theta + rel.theta,
        )
    }

    /// Build from a slice `[x, y, theta]`.
    pub fn from_slice(s: &[T]) -> Result<Self> {
        match s {
            [x, y, theta] => Ok(State::new(*x, *y, *theta)),
            _ => Err(Error::InvalidInput(format!(
                "unicycle state needs 3 components, got {}",
                s.len()
            ))),
        }
    }
}

/// Translational and angular velocity command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Control<T> {
    pub v: T,
    pub omega: T,
}

impl<T: Real> Control<T> {
    pub fn new(v: T, omega: T) -> Self {
        Control { v, omega }
    }

    pub fn zero() -> Self {
        Control::new(T::zero(), T::zero())
    }

    pub fn is_finite(&self) -> bool {
        self.v.is_finite() && self.omega.is_finite()
    }

    pub fn to_vec(&self) -> Vec<T> {
        vec![self.v, self.omega]
    }
}

/// Admissible control box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ControlBounds<T> {
    pub v_min: T,
    pub v_max: T,
    pub omega_min: T,
    pub omega_max: T,
}

impl<T: Real> Default for ControlBounds<T> {
    fn default() -> Self {
        ControlBounds {
            v_min: T::lit(-1.0),
            v_max: T::lit(1.0),
            omega_min: T::lit(-2.0),
            omega_max: T::lit(2.0),
        }
    }
}

impl<T: Real> ControlBounds<T> {
    pub fn contains(&self, u: &Control<T>) -> bool {
        u.v >= self.v_min
            && u.v <= self.v_max
            && u.omega >= self.omega_min
            && u.omega <= self.omega_max
    }

    pub fn clamp(&self, u: Control<T>) -> Control<T> {
        Control::new(
            u.v.clamp(self.v_min, self.v_max),
            u.omega.clamp(self.omega_min, self.omega_max),
        )
    }

    pub fn lower(&self) -> [T; 2] {
        [self.v_min, self.omega_min]
    }

    pub fn upper(&self) -> [T; 2] {
        [self.v_max, self.omega_max]
    }
}

/// One step of the discrete-time unicycle.
pub fn unicycle_step<T: Real>(state: &State<T>, control: &Control<T>, dt: T) -> Result<State<T>> {
    if !state.is_finite() || !control.is_finite() || !dt.is_finite() {
        return Err(Error::InvalidInput(
            "non-finite state, control or dt".into(),
        ));
    }
    if dt <= T::zero() {
        return Err(Error::InvalidInput("dt must be positive".into()));
    }
    let (s, c) = state.theta.sin_cos();
    Ok(State::new(
        state.x + dt * control.v * c,
        state.y + dt * control.v * s,
        state.theta + dt * control.omega,
    ))
}

/// How an obstacle center evolves with the step index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", bound = "T: Real")]
pub enum Motion<T> {
    Static {
        center: [T; 2],
    },
    /// `start + k * velocity`, velocity in meters per step.
    Linear {
        start: [T; 2],
        velocity: [T; 2],
    },
    /// `center + amplitude * sin(2 pi k / period)`, period in steps.
    Sinusoidal {
        center: [T; 2],
        amplitude: [T; 2],
        period: T,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ObstacleSpec<T> {
    pub id: u32,
    pub radius: T,
    pub motion: Motion<T>,
}

impl<T: Real> ObstacleSpec<T> {
    pub fn new(id: u32, radius: T, motion: Motion<T>) -> Result<Self> {
        let spec = ObstacleSpec { id, radius, motion };
        spec.validate()?;
        Ok(spec)
    }

    pub fn fixed(id: u32, radius: T, center: [T; 2]) -> Result<Self> {
        Self::new(id, radius, Motion::Static { center })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > T::zero()) || !self.radius.is_finite() {
            return Err(Error::InvalidInput(format!(
                "obstacle {} radius must be positive",
                self.id
            )));
        }
        if let Motion::Sinusoidal { period, .. } = &self.motion {
            if !(*period > T::zero()) {
                return Err(Error::InvalidInput(format!(
                    "obstacle {} period must be positive",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn center(&self, k: usize) -> Position<T> {
        obstacle_center(self, k)
    }
}

/// Obstacle center at step `k` according to its motion law.
pub fn obstacle_center<T: Real>(spec: &ObstacleSpec<T>, k: usize) -> Position<T> {
    let kf = T::lit(k as f64);
    match &spec.motion {
        Motion::Static { center } => Vector2::new(center[0], center[1]),
        Motion::Linear { start, velocity } => {
            Vector2::new(start[0] + kf * velocity[0], start[1] + kf * velocity[1])
        }
        Motion::Sinusoidal {
            center,
            amplitude,
            period,
        } => {
            let s = (T::two_pi() * kf / *period).sin();
            Vector2::new(center[0] + amplitude[0] * s, center[1] + amplitude[1] * s)
        }
    }
}

/// Signed clearance to the nearest obstacle boundary; negative inside a disk.
/// Returns `+inf` when there are no obstacles.
pub fn min_obstacle_distance<T: Real>(
    state: &State<T>,
    obstacles: &[ObstacleSpec<T>],
    k: usize,
) -> T {
    let p = state.position();
    obstacles
        .iter()
        .map(|o| (p - o.center(k)).norm() - o.radius)
        .fold(T::infinity(), |a, b| a.min(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn step_along_x() {
        let s = unicycle_step(&State::new(0.0, 0.0, 0.0), &Control::new(1.0, 0.0), 0.1).unwrap();
        assert_eq!(s, State::new(0.1, 0.0, 0.0));
    }

    #[test]
    fn step_along_y() {
        let s = unicycle_step(
            &State::new(0.0, 0.0, FRAC_PI_2),
            &Control::new(1.0, 0.0),
            0.1,
        )
        .unwrap();
        assert!(s.x.abs() < 1e-17);
        assert_eq!(s.y, 0.1);
        assert_eq!(s.theta, FRAC_PI_2);
    }

    #[test]
    fn step_fixture() {
        // hand evaluation: 1 + 0.05 cos 0.3, -1 + 0.05 sin 0.3, 0.3 + 0.12
        let s: State<f64> =
            unicycle_step(&State::new(1.0, -1.0, 0.3), &Control::new(0.5, 1.2), 0.1).unwrap();
        assert!((s.x - 1.047_766_824_456_280_3).abs() < 1e-12);
        assert!((s.y - (-0.985_223_989_666_933)).abs() < 1e-12);
        assert!((s.theta - 0.42).abs() < 1e-15);
    }

    #[test]
    fn step_rejects_non_finite() {
        let err = unicycle_step(&State::new(f64::NAN, 0.0, 0.0), &Control::zero(), 0.1);
        assert!(matches!(err, Err(Error::InvalidInput(_))));
        let err = unicycle_step(
            &State::new(0.0, 0.0, 0.0),
            &Control::new(f64::INFINITY, 0.0),
            0.1,
        );
        assert!(err.is_err());
        assert!(unicycle_step(&State::new(0.0, 0.0, 0.0), &Control::zero(), 0.0).is_err());
    }

    #[test]
    fn step_wraps_heading() {
        let s = unicycle_step(
            &State::new(0.0, 0.0, PI - 0.05),
            &Control::new(0.0, 2.0),
            0.1,
        )
        .unwrap();
        assert!(s.theta < 0.0 && s.theta > -PI);
    }

    #[test]
    fn f32_step() {
        let s = unicycle_step(
            &State::new(0.0f32, 0.0, 0.0),
            &Control::new(1.0f32, 0.0),
            0.1,
        )
        .unwrap();
        assert!((s.x - 0.1).abs() < 1e-7);
    }

    #[test]
    fn obstacle_motion_laws() {
        let st = ObstacleSpec::fixed(0, 0.5, [1.0, 0.0]).unwrap();
        assert_eq!(obstacle_center(&st, 0), Vector2::new(1.0, 0.0));
        assert_eq!(obstacle_center(&st, 123), Vector2::new(1.0, 0.0));

        let lin = ObstacleSpec::new(
            1,
            0.3,
            Motion::Linear {
                start: [0.0, 0.0],
                velocity: [0.1, 0.0],
            },
        )
        .unwrap();
        assert!((obstacle_center(&lin, 5) - Vector2::new(0.5, 0.0)).norm() < 1e-15);

        let sin = ObstacleSpec::new(
            2,
            0.3,
            Motion::Sinusoidal {
                center: [0.0, 1.0],
                amplitude: [0.0, 0.5],
                period: 20.0,
            },
        )
        .unwrap();
        // sin(2 pi 5 / 20) = 1
        assert!((obstacle_center(&sin, 5) - Vector2::new(0.0, 1.5)).norm() < 1e-15);
    }

    #[test]
    fn obstacle_validation() {
        assert!(ObstacleSpec::fixed(0, 0.0, [0.0, 0.0]).is_err());
        assert!(ObstacleSpec::fixed(0, -1.0, [0.0, 0.0]).is_err());
        assert!(ObstacleSpec::new(
            0,
            1.0,
            Motion::Sinusoidal {
                center: [0.0, 0.0],
                amplitude: [1.0, 0.0],
                period: 0.0
            }
        )
        .is_err());
    }

    #[test]
    fn clearance_examples() {
        let s = State::new(0.0, 0.0, 0.0);
        let o = ObstacleSpec::fixed(0, 0.5, [1.0, 0.0]).unwrap();
        assert_eq!(min_obstacle_distance(&s, std::slice::from_ref(&o), 0), 0.5);

        let inside = State::new(1.0, 0.0, 0.0);
        assert_eq!(min_obstacle_distance(&inside, &[o], 0), -0.5);

        let a = ObstacleSpec::fixed(0, 0.3, [1.0, 0.0]).unwrap(); // 0.7
        let b = ObstacleSpec::fixed(1, 0.8, [0.0, 1.0]).unwrap(); // 0.2
        assert!((min_obstacle_distance::<f64>(&s, &[a, b], 0) - 0.2).abs() < 1e-15);

        assert_eq!(min_obstacle_distance::<f64>(&s, &[], 0), f64::INFINITY);
    }

    proptest! {
        #[test]
        fn heading_always_wrapped(
            x in -3.0..3.0f64, y in -3.0..3.0f64, th in -20.0..20.0f64,
            v in -1.0..1.0f64, w in -2.0..2.0f64,
        ) {
            let s = unicycle_step(&State::new(x, y, th), &Control::new(v, w), 0.1).unwrap();
            prop_assert!(s.theta > -PI && s.theta <= PI);
            let again = unicycle_step(&State::new(x, y, th), &Control::new(v, w), 0.1).unwrap();
            prop_assert_eq!(s, again);
        }

        #[test]
        fn clearance_sign_matches_disk_membership(
            px in -2.0..2.0f64, py in -2.0..2.0f64,
            cx in -2.0..2.0f64, cy in -2.0..2.0f64, r in 0.05..1.5f64,
        ) {
            let s = State::new(px, py, 0.0);
            let o = ObstacleSpec::fixed(0, r, [cx, cy]).unwrap();
            let d = min_obstacle_distance(&s, &[o], 0);
            let inside = (px - cx).powi(2) + (py - cy).powi(2) < r * r;
            prop_assert_eq!(d < 0.0, inside);
        }
    }
}
