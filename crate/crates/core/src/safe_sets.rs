//! Tangent half-space outer approximations of disk obstacles.

use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::sim_env::{ObstacleSpec, Position, State};

/// `h(q) = normal . q + offset`, with a unit normal so `h` is 1-Lipschitz
/// in position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HalfSpace<T: Real> {
    pub normal: Vector2<T>,
    pub offset: T,
}

impl<T: Real> HalfSpace<T> {
    pub fn eval(&self, q: &Position<T>) -> T {
        self.normal.dot(q) + self.offset
    }

    /// Same plane pushed to pass through `center` displaced: the obstacle
    /// moved, the linearization direction did not.
    pub fn translated(&self, shift: &Vector2<T>) -> Self {
        HalfSpace {
            normal: self.normal,
            offset: self.offset - self.normal.dot(shift),
        }
    }
}

impl<T: Real> HalfSpace<T> {
    /// The same set written in the frame attached to `origin`.
    pub fn in_frame(&self, origin: &State<T>) -> Self {
        let (s, c) = origin.theta.sin_cos();
        let n = self.normal;
        HalfSpace {
            normal: Vector2::new(c * n[0] + s * n[1], -s * n[0] + c * n[1]),
            offset: self.offset + n.dot(&origin.position()),
        }
    }
}

/// Half-space together with the margin it must be satisfied with.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TightenedHalfSpace<T: Real> {
    pub halfspace: HalfSpace<T>,
    pub margin: T,
}

impl<T: Real> TightenedHalfSpace<T> {
    /// `h(q) - margin`; non-negative iff `q` is in the tightened set.
    pub fn slack(&self, q: &Position<T>) -> T {
        self.halfspace.eval(q) - self.margin
    }

    pub fn contains(&self, q: &Position<T>) -> bool {
        self.slack(q) >= T::zero()
    }
}

/// Supporting plane of the disk at its point nearest to `agent`.
pub fn halfspace_from_circle<T: Real>(
    center: &Position<T>,
    radius: T,
    agent: &Position<T>,
) -> Option<HalfSpace<T>> {
    let d = agent - center;
    let dist = d.norm();
    if !(dist > T::default_epsilon()) {
        return None;
    }
    let normal = d / dist;
    Some(HalfSpace {
        normal,
        offset: -normal.dot(center) - radius,
    })
}

pub fn tighten<T: Real>(hs: HalfSpace<T>, delta: T) -> TightenedHalfSpace<T> {
    debug_assert!(delta >= T::zero());
    TightenedHalfSpace {
        halfspace: hs,
        margin: delta,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObstacleConstraint<T: Real> {
    pub obstacle: u32,
    pub halfspace: HalfSpace<T>,
}

/// Stacked constraints `H pos + b >= margin`, one row per obstacle.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet<T: Real> {
    pub rows: Vec<ObstacleConstraint<T>>,
    pub margin: T,
}

impl<T: Real> ConstraintSet<T> {
    pub fn empty(margin: T) -> Self {
        ConstraintSet {
            rows: Vec::new(),
            margin,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `rows x 2` matrix of normals.
    pub fn h(&self) -> DMatrix<T> {
        DMatrix::from_fn(self.rows.len(), 2, |i, j| self.rows[i].halfspace.normal[j])
    }

    pub fn b(&self) -> DVector<T> {
        DVector::from_iterator(
            self.rows.len(),
            self.rows.iter().map(|r| r.halfspace.offset),
        )
    }

    /// Smallest `h_i(q) - margin`; `+inf` for an empty set.
    pub fn min_slack(&self, q: &Position<T>) -> T {
        self.rows
            .iter()
            .map(|r| r.halfspace.eval(q) - self.margin)
            .fold(T::infinity(), |a, b| a.min(b))
    }

    pub fn tightened(&self) -> impl Iterator<Item = (u32, TightenedHalfSpace<T>)> + '_ {
        self.rows
            .iter()
            .map(move |r| (r.obstacle, tighten(r.halfspace, self.margin)))
    }

    /// `id:a:b:c` entries joined by `|`.
    pub fn audit_string(&self) -> String {
        self.rows
            .iter()
            .map(|r| {
                format!(
                    "{}:{}:{}:{}",
                    r.obstacle,
                    r.halfspace.normal[0].as_f64(),
                    r.halfspace.normal[1].as_f64(),
                    r.halfspace.offset.as_f64()
                )
            })
            .collect::<Vec<_>>()
            .join("|")
    }
}

/// Linearize every obstacle at its step-`k` center around `agent`.
pub fn build_constraint_set<T: Real>(
    obstacles: &[ObstacleSpec<T>],
    k: usize,
    agent: &Position<T>,
    delta: T,
) -> Result<ConstraintSet<T>> {
    let mut sorted: Vec<&ObstacleSpec<T>> = obstacles.iter().collect();
    sorted.sort_by_key(|o| o.id);
    let rows = sorted
        .into_iter()
        .map(|o| {
            halfspace_from_circle(&o.center(k), o.radius, agent)
                .map(|halfspace| ObstacleConstraint {
                    obstacle: o.id,
                    halfspace,
                })
                .ok_or(Error::DegenerateNormal { obstacle: o.id })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConstraintSet {
        rows,
        margin: delta,
    })
}

/// How obstacle positions are treated inside one MPC horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObstaclePrediction {
    /// Every predicted step sees the step-`k` constraints.
    #[default]
    Frozen,
    /// Normals stay at the step-`k` linearization; each plane follows its
    /// obstacle's known motion law to step `k + i`.
    Propagate,
}

/// Constraint sets for predicted steps `k + 1 ..= k + horizon`.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonConstraints<T: Real> {
    pub steps: Vec<ConstraintSet<T>>,
}

impl<T: Real> ConstraintSet<T> {
    pub fn in_frame(&self, origin: &State<T>) -> Self {
        ConstraintSet {
            rows: self
                .rows
                .iter()
                .map(|r| ObstacleConstraint {
                    obstacle: r.obstacle,
                    halfspace: r.halfspace.in_frame(origin),
                })
                .collect(),
            margin: self.margin,
        }
    }
}

impl<T: Real> HorizonConstraints<T> {
    pub fn in_frame(&self, origin: &State<T>) -> Self {
        HorizonConstraints {
            steps: self.steps.iter().map(|s| s.in_frame(origin)).collect(),
        }
    }

    pub fn frozen(set: ConstraintSet<T>, horizon: usize) -> Self {
        HorizonConstraints {
            steps: vec![set; horizon],
        }
    }

    pub fn none(horizon: usize) -> Self {
        Self::frozen(ConstraintSet::empty(T::zero()), horizon)
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// Replace the margin of predicted step `i + 1` with `margins[i]`.
    pub fn set_margins(&mut self, margins: &[T]) -> Result<()> {
        if margins.len() != self.steps.len() {
            return Err(Error::InvalidInput(format!(
                "{} margins for a horizon of {}",
                margins.len(),
                self.steps.len()
            )));
        }
        for (set, m) in self.steps.iter_mut().zip(margins) {
            set.margin = *m;
        }
        Ok(())
    }
}

pub fn horizon_constraints<T: Real>(
    obstacles: &[ObstacleSpec<T>],
    k: usize,
    agent: &Position<T>,
    delta: T,
    horizon: usize,
    mode: ObstaclePrediction,
) -> Result<HorizonConstraints<T>> {
    let base = build_constraint_set(obstacles, k, agent, delta)?;
    match mode {
        ObstaclePrediction::Frozen => Ok(HorizonConstraints::frozen(base, horizon)),
        ObstaclePrediction::Propagate => {
            let steps = (1..=horizon)
                .map(|i| {
                    let rows = base
                        .rows
                        .iter()
                        .map(|r| {
                            let o = obstacles
                                .iter()
                                .find(|o| o.id == r.obstacle)
                                .expect("row built from obstacle list");
                            let shift = o.center(k + i) - o.center(k);
                            ObstacleConstraint {
                                obstacle: r.obstacle,
                                halfspace: r.halfspace.translated(&shift),
                            }
                        })
                        .collect();
                    ConstraintSet {
                        rows,
                        margin: delta,
                    }
                })
                .collect();
            Ok(HorizonConstraints { steps })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim_env::{min_obstacle_distance, Motion, State};
    use proptest::prelude::*;

    fn v(x: f64, y: f64) -> Vector2<f64> {
        Vector2::new(x, y)
    }

    #[test]
    fn circle_examples() {
        let hs = halfspace_from_circle(&v(1.0, 0.0), 0.5, &v(0.0, 0.0)).unwrap();
        assert_eq!(hs.normal, v(-1.0, 0.0));
        // h(q) = -(q_x - 1) - 0.5
        assert!((hs.offset - 0.5).abs() < 1e-15);
        assert!((hs.eval(&v(0.0, 0.0)) - 0.5).abs() < 1e-15);
        assert!(hs.eval(&v(0.5, 0.0)).abs() < 1e-15);

        let boundary = halfspace_from_circle(&v(0.0, 0.0), 1.0, &v(0.6, 0.8)).unwrap();
        assert!(boundary.eval(&v(0.6, 0.8)).abs() < 1e-15);

        let hs = halfspace_from_circle(&v(0.0, 0.0), 1.0, &v(0.0, 2.0)).unwrap();
        assert_eq!(hs.normal, v(0.0, 1.0));
        assert_eq!(hs.offset, -1.0);

        assert!(halfspace_from_circle(&v(1.0, 1.0), 0.3, &v(1.0, 1.0)).is_none());
    }

    #[test]
    fn tighten_examples() {
        let hs = halfspace_from_circle(&v(1.0, 0.0), 0.5, &v(0.0, 0.0)).unwrap();
        let agent = v(0.0, 0.0);
        assert_eq!(tighten(hs, 0.0).slack(&agent), hs.eval(&agent));
        assert!((tighten(hs, 0.06).slack(&agent) - 0.44).abs() < 1e-15);
        assert!(!tighten(hs, 0.6).contains(&agent));
    }

    #[test]
    fn constraint_set_examples() {
        let agent = v(0.0, 0.0);
        let empty = build_constraint_set::<f64>(&[], 0, &agent, 0.1).unwrap();
        assert!(empty.is_empty());
        assert_eq!(empty.min_slack(&agent), f64::INFINITY);

        let obs = vec![
            ObstacleSpec::fixed(7, 0.3, [0.0, 1.0]).unwrap(),
            ObstacleSpec::fixed(2, 0.4, [1.5, -1.0]).unwrap(),
        ];
        let set = build_constraint_set(&obs, 0, &agent, 0.1).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.rows[0].obstacle, 2);
        for i in 0..2 {
            assert!((set.h().row(i).norm() - 1.0).abs() < 1e-12);
        }

        let bad = build_constraint_set(&obs, 0, &v(0.0, 1.0), 0.1);
        assert!(matches!(bad, Err(Error::DegenerateNormal { obstacle: 7 })));
    }

    #[test]
    fn moving_obstacle_shifts_by_displacement() {
        let o = ObstacleSpec::new(
            0,
            0.3,
            Motion::Linear {
                start: [1.0, 0.0],
                velocity: [0.0, 0.05],
            },
        )
        .unwrap();
        let agent = v(-1.0, 0.0);
        let a = build_constraint_set(std::slice::from_ref(&o), 4, &agent, 0.0).unwrap();
        let b = build_constraint_set(std::slice::from_ref(&o), 5, &agent, 0.0).unwrap();
        // relinearize at k+1 and compare against a direct recomputation
        let direct = halfspace_from_circle(&o.center(5), 0.3, &agent).unwrap();
        assert_eq!(b.rows[0].halfspace, direct);
        assert_ne!(a.rows[0].halfspace, b.rows[0].halfspace);
        let hz = horizon_constraints(
            std::slice::from_ref(&o),
            4,
            &agent,
            0.0,
            3,
            ObstaclePrediction::Propagate,
        )
        .unwrap();
        let shift = o.center(5) - o.center(4);
        assert!(
            (hz.steps[0].rows[0].halfspace.offset
                - (a.rows[0].halfspace.offset - a.rows[0].halfspace.normal.dot(&shift)))
            .abs()
                < 1e-15
        );
        let frozen =
            horizon_constraints(&[o], 4, &agent, 0.0, 3, ObstaclePrediction::Frozen).unwrap();
        assert!(frozen.steps.iter().all(|s| *s == a));
    }

    #[test]
    fn audit_string_format() {
        let o = ObstacleSpec::fixed(3, 1.0, [0.0, 0.0]).unwrap();
        let set = build_constraint_set(&[o], 0, &v(0.0, 2.0), 0.0).unwrap();
        assert_eq!(set.audit_string(), "3:0:1:-1");
    }

    proptest! {
        #[test]
        fn tightened_set_excludes_disk(
            cx in -2.0..2.0f64, cy in -2.0..2.0f64, r in 0.05..1.0f64,
            ax in -3.0..3.0f64, ay in -3.0..3.0f64,
            qx in -3.0..3.0f64, qy in -3.0..3.0f64, delta in 0.0..0.5f64,
        ) {
            let c = v(cx, cy);
            prop_assume!((v(ax, ay) - c).norm() > 1e-6);
            let hs = halfspace_from_circle(&c, r, &v(ax, ay)).unwrap();
            prop_assert!((hs.normal.norm() - 1.0).abs() < 1e-12);
            let t = tighten(hs, delta);
            if t.contains(&v(qx, qy)) {
                prop_assert!((v(qx, qy) - c).norm() >= r - 1e-12);
            }
            // at the agent, h equals the signed clearance
            let o = ObstacleSpec::fixed(0, r, [cx, cy]).unwrap();
            let d = min_obstacle_distance(&State::new(ax, ay, 0.0), &[o], 0);
            prop_assert!((hs.eval(&v(ax, ay)) - d).abs() < 1e-12);
        }
    }
}
