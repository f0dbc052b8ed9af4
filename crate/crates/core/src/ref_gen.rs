//! Greedy waypoint generator over the tightened half-space geometry.
//!
//! The agent is treated as a single integrator: move toward the goal until
//! the first tightened boundary (margin `delta + clearance_bonus`), then
//! slide the remaining step length along that boundary's tangent. When the
//! goal direction is anti-parallel to the boundary normal the slide turns
//! counterclockwise.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::safe_sets::halfspace_from_circle;
use crate::safe_sets::HalfSpace;
use crate::scalar::Real;
use crate::sim_env::{ObstacleSpec, Position, State};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct RefGenConfig<T> {
    pub step: T,
    pub clearance_bonus: T,
    pub goal_tolerance: T,
}

impl<T: Real> Default for RefGenConfig<T> {
    fn default() -> Self {
        RefGenConfig {
            step: T::lit(0.6),
            clearance_bonus: T::lit(0.05),
            goal_tolerance: T::lit(0.1),
        }
    }
}

impl<T: Real> RefGenConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > T::zero()
            && self.goal_tolerance > T::zero()
            && self.clearance_bonus >= T::zero())
        {
            return Err(Error::Config(
                "reference step and goal tolerance must be positive, clearance bonus nonnegative"
                    .into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Waypoint<T> {
    pub state: State<T>,
    /// Agent inside an obstacle disk: the goal is passed through unchanged.
    pub pass_through: bool,
    pub slid: bool,
    /// The counterclockwise tie-break fired.
    pub tie_break: bool,
    /// Every tightened half-space holds at the waypoint.
    pub satisfied: bool,
}

pub fn goal_reached<T: Real>(x: &State<T>, goal: &Position<T>, delta: T) -> bool {
    (x.position() - goal).norm() <= delta
}

fn ccw<T: Real>(v: &Vector2<T>) -> Vector2<T> {
    Vector2::new(-v[1], v[0])
}

pub fn next_waypoint<T: Real>(
    x_k: &State<T>,
    goal: &Position<T>,
    obstacles: &[ObstacleSpec<T>],
    k: usize,
    delta: T,
    cfg: &RefGenConfig<T>,
) -> Result<Waypoint<T>> {
    if !(goal[0].is_finite() && goal[1].is_finite()) {
        return Err(Error::InvalidInput("goal must be finite".into()));
    }
    let pos = x_k.position();
    let to_goal = goal - pos;
    let dist = to_goal.norm();
    let heading = |from: &Position<T>, to: &Position<T>| {
        let d = to - from;
        if d.norm() > T::lit(1e-12) {
            d[1].atan2(d[0])
        } else {
            x_k.theta
        }
    };
    let snap = |pass_through: bool| Waypoint {
        state: State::new(goal[0], goal[1], heading(&pos, goal)),
        pass_through,
        slid: false,
        tie_break: false,
        satisfied: !pass_through,
    };

    let mut planes: Vec<HalfSpace<T>> = Vec::with_capacity(obstacles.len());
    let mut sorted: Vec<&ObstacleSpec<T>> = obstacles.iter().collect();
    sorted.sort_by_key(|o| o.id);
    for o in sorted {
        let c = o.center(k);
        if (pos - c).norm() <= o.radius {
            log::debug!(
                "agent inside obstacle {} at step {k}; waypoint passes through",
                o.id
            );
            return Ok(snap(true));
        }
        planes.push(
            halfspace_from_circle(&c, o.radius, &pos)
                .ok_or(Error::DegenerateNormal { obstacle: o.id })?,
        );
    }
    if dist <= cfg.step {
        let mut w = snap(false);
        w.satisfied = planes.iter().all(|h| h.eval(goal) >= delta);
        return Ok(w);
    }

    let margin = delta + cfg.clearance_bonus;
    let tiny = T::lit(1e-12);
    let mut p = pos;
    let mut dir = to_goal / dist;
    let mut left = cfg.step;
    let mut slid = false;
    let mut tie_break = false;
    let mut last_hit: Option<usize> = None;
    for _ in 0..=planes.len() {
        // first boundary crossed along `dir` within the remaining length
        let mut hit: Option<(usize, T)> = None;
        for (j, h) in planes.iter().enumerate() {
            if Some(j) == last_hit {
                continue;
            }
            let rate = h.normal.dot(&dir);
            if rate >= -tiny {
                continue;
            }
            let s = ((h.eval(&p) - margin) / -rate).max(T::zero());
            if s < left && hit.is_none_or(|(_, best)| s < best) {
                hit = Some((j, s));
            }
        }
        let Some((j, s)) = hit else {
            p += dir * left;
            break;
        };
        if last_hit.is_some() {
            // corner between two boundaries: stop on the second one
            p += dir * s;
            break;
        }
        p += dir * s;
        left -= s;
        let n = planes[j].normal;
        let mut t = dir - n * n.dot(&dir);
        if t.norm() <= T::lit(1e-9) {
            t = ccw(&dir);
            tie_break = true;
            log::debug!("waypoint slide tie-break: counterclockwise at step {k}");
        }
        dir = t.normalize();
        slid = true;
        last_hit = Some(j);
    }
    // started inside a tightened band: push out along each violated normal
    for h in &planes {
        let v = h.eval(&p);
        if v < margin {
            p += h.normal * (margin - v);
        }
    }
    let satisfied = planes.iter().all(|h| h.eval(&p) >= delta - T::lit(1e-12));
    Ok(Waypoint {
        state: State::new(p[0], p[1], heading(&pos, &p)),
        pass_through: false,
        slid,
        tie_break,
        satisfied,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn at(x: f64, y: f64) -> State<f64> {
        State::new(x, y, 0.0)
    }

    #[test]
    fn straight_step() {
        let cfg = RefGenConfig {
            step: 0.3,
            ..Default::default()
        };
        let w = next_waypoint(&at(0.0, 0.0), &Position::new(1.0, 0.0), &[], 0, 0.1, &cfg).unwrap();
        assert!(
            (w.state.x - 0.3).abs() < 1e-12
                && w.state.y.abs() < 1e-12
                && w.state.theta.abs() < 1e-12
        );
        assert!(!w.slid);
    }

    #[test]
    fn terminal_snap() {
        let w = next_waypoint(
            &at(0.0, 0.0),
            &Position::new(0.1, 0.0),
            &[],
            0,
            0.1,
            &RefGenConfig::default(),
        )
        .unwrap();
        assert_eq!((w.state.x, w.state.y), (0.1, 0.0));
    }

    #[test]
    fn slides_around_obstacle_counterclockwise() {
        let obs = [ObstacleSpec::fixed(1, 0.2, [0.5, 0.0]).unwrap()];
        let delta = 0.1;
        let cfg = RefGenConfig {
            step: 0.3,
            ..Default::default()
        };
        let w = next_waypoint(
            &at(0.0, 0.0),
            &Position::new(1.0, 0.0),
            &obs,
            0,
            delta,
            &cfg,
        )
        .unwrap();
        assert!(w.slid && w.tie_break && w.satisfied);
        assert!(w.state.y > 0.0, "ccw slide goes to +y");
        assert!(w.state.x > 0.0, "still forward");
        let h =
            halfspace_from_circle(&Position::new(0.5, 0.0), 0.2, &Position::new(0.0, 0.0)).unwrap();
        assert!(h.eval(&w.state.position()) >= delta);
        // step length is preserved along the broken path
        assert!((w.state.x + w.state.y - 0.3).abs() < 1e-12);
    }

    #[test]
    fn slide_follows_goal_side() {
        let obs = [ObstacleSpec::fixed(1, 0.2, [0.5, 0.0]).unwrap()];
        let w = next_waypoint(
            &at(0.0, 0.0),
            &Position::new(1.0, -0.3),
            &obs,
            0,
            0.1,
            &RefGenConfig::default(),
        )
        .unwrap();
        assert!(w.slid && !w.tie_break);
        assert!(w.state.y < 0.0);
    }

    #[test]
    fn inside_obstacle_passes_through() {
        let obs = [ObstacleSpec::fixed(1, 0.5, [0.1, 0.0]).unwrap()];
        let w = next_waypoint(
            &at(0.0, 0.0),
            &Position::new(2.0, 0.0),
            &obs,
            0,
            0.1,
            &RefGenConfig::default(),
        )
        .unwrap();
        assert!(w.pass_through);
        assert_eq!((w.state.x, w.state.y), (2.0, 0.0));
    }

    #[test]
    fn goal_tolerance_is_closed() {
        let g = Position::new(0.0, 0.0);
        assert!(goal_reached(&at(0.0, 0.0), &g, 0.1));
        assert!(goal_reached(&at(0.1, 0.0), &g, 0.1));
        assert!(!goal_reached(&at(0.1 + 1e-9, 0.0), &g, 0.1));
    }

    proptest! {
        #[test]
        fn free_space_progress(x in -3.0..3.0f64, y in -3.0..3.0f64, gx in -3.0..3.0f64, gy in -3.0..3.0f64) {
            let cfg = RefGenConfig::default();
            let goal = Position::new(gx, gy);
            let before = (Position::new(x, y) - goal).norm();
            let w = next_waypoint(&at(x, y), &goal, &[], 0, 0.1, &cfg).unwrap();
            let after = (w.state.position() - goal).norm();
            prop_assert!((before - after - before.min(cfg.step)).abs() < 1e-9);
        }

        #[test]
        fn waypoints_respect_margin(
            ox in -1.0..1.0f64, oy in -1.0..1.0f64, r in 0.1..0.5f64,
            ox2 in -1.0..1.0f64, oy2 in -1.0..1.0f64,
            gx in -3.0..3.0f64, gy in -3.0..3.0f64, delta in 0.0..0.3f64,
        ) {
            let obs = [
                ObstacleSpec::fixed(1, r, [ox, oy]).unwrap(),
                ObstacleSpec::fixed(2, 0.2, [ox2, oy2]).unwrap(),
            ];
            let agent = at(-2.0, 0.0);
            let cfg = RefGenConfig::default();
            let w = next_waypoint(&agent, &Position::new(gx, gy), &obs, 0, delta, &cfg).unwrap();
            let a = next_waypoint(&agent, &Position::new(gx, gy), &obs, 0, delta, &cfg).unwrap();
            prop_assert_eq!(w, a);
            if !w.pass_through && (Position::new(gx, gy) - agent.position()).norm() > cfg.step {
                prop_assert!(w.satisfied);
                for o in &obs {
                    let h = halfspace_from_circle(&o.center(0), o.radius, &agent.position()).unwrap();
                    prop_assert!(h.eval(&w.state.position()) >= delta - 1e-9);
                }
            }
        }
    }
}
