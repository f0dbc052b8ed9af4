use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{unicycle_step, Control, ControlBounds, State};

use crate::error::{Error, Result};
use crate::scalar::{wrap_angle, Real};

/// One observed step of the plant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Transition<T> {
    pub state: State<T>,
    pub control: Control<T>,
    pub next_state: State<T>,
}

/// Control generator used to excite the plant during data collection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", bound = "T: Real")]
pub enum ExcitationPolicy<T> {
    /// i.i.d. uniform samples over the control box.
    Uniform,
    /// Random walk on the control with the given per-step increments,
    /// clipped to the box.
    RandomWalk { step_v: T, step_omega: T },
    /// Proportional steering toward random goals plus uniform dither.
    Tracking {
        gain_v: T,
        gain_omega: T,
        dither_v: T,
        dither_omega: T,
    },
    /// Fixed command; only useful to exercise the degenerate-data path.
    Constant { control: Control<T> },
}

impl<T: Real> Default for ExcitationPolicy<T> {
    fn default() -> Self {
        ExcitationPolicy::Tracking {
            gain_v: T::lit(1.0),
            gain_omega: T::lit(2.0),
            dither_v: T::lit(0.3),
            dither_omega: T::lit(0.8),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", default)]
pub struct CollectConfig<T> {
    pub dt: T,
    /// Axis-aligned box `[lo, hi]^2` for initial positions and goals.
    pub workspace: [T; 2],
    /// Initial headings are drawn uniformly from this interval.
    pub heading_range: [T; 2],
    pub bounds: ControlBounds<T>,
}

impl<T: Real> Default for CollectConfig<T> {
    fn default() -> Self {
        CollectConfig {
            dt: T::lit(super::DEFAULT_DT),
            workspace: [T::lit(-3.0), T::lit(3.0)],
            heading_range: [-T::pi(), T::pi()],
            bounds: ControlBounds::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetWarning {
    /// A control channel never varied, so its column in the regressor is
    /// collinear with the constant observable.
    ZeroControlVariance { channel: &'static str },
}

impl std::fmt::Display for DatasetWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DatasetWarning::ZeroControlVariance { channel } => write!(
                f,
                "control channel `{channel}` has zero variance; the fit will be rank deficient"
            ),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub transitions: Vec<Transition<T>>,
    pub warnings: Vec<DatasetWarning>,
}

fn uniform<T: Real>(rng: &mut ChaCha8Rng, lo: T, hi: T) -> T {
    if hi <= lo {
        return lo;
    }
    let u: f64 = rng.gen();
    lo + (hi - lo) * T::lit(u)
}

fn sample_position<T: Real>(rng: &mut ChaCha8Rng, ws: [T; 2]) -> (T, T) {
    (uniform(rng, ws[0], ws[1]), uniform(rng, ws[0], ws[1]))
}

/// Roll the plant under `policy` for `episodes` episodes of `steps` steps.
///
/// Episodes start from poses drawn uniformly from the workspace and
/// heading range. Identical seeds give identical datasets.
pub fn collect_dataset<T: Real>(
    cfg: &CollectConfig<T>,
    policy: &ExcitationPolicy<T>,
    episodes: usize,
    steps: usize,
    seed: u64,
) -> Result<Dataset<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = cfg.bounds;
    let mut transitions = Vec::with_capacity(episodes * steps);

    for _ in 0..episodes {
        let (x0, y0) = sample_position(&mut rng, cfg.workspace);
        let th0 = uniform(&mut rng, cfg.heading_range[0], cfg.heading_range[1]);
        let mut state = State::new(x0, y0, th0);
        let mut u = Control::new(
            uniform(&mut rng, b.v_min, b.v_max),
            uniform(&mut rng, b.omega_min, b.omega_max),
        );
        let mut goal = sample_position(&mut rng, cfg.workspace);

        for _ in 0..steps {
            let control = match policy {
                ExcitationPolicy::Uniform => Control::new(
                    uniform(&mut rng, b.v_min, b.v_max),
                    uniform(&mut rng, b.omega_min, b.omega_max),
                ),
                ExcitationPolicy::RandomWalk { step_v, step_omega } => {
                    let dv = uniform(&mut rng, -*step_v, *step_v);
                    let dw = uniform(&mut rng, -*step_omega, *step_omega);
                    u = b.clamp(Control::new(u.v + dv, u.omega + dw));
                    u
                }
                ExcitationPolicy::Tracking {
                    gain_v,
                    gain_omega,
                    dither_v,
                    dither_omega,
                } => {
                    let (dx, dy) = (goal.0 - state.x, goal.1 - state.y);
                    let dist = (dx * dx + dy * dy).sqrt();
                    if dist < T::lit(0.2) {
                        goal = sample_position(&mut rng, cfg.workspace);
                    }
                    let err = wrap_angle(dy.atan2(dx) - state.theta);
                    let v = *gain_v * dist.min(T::one()) * err.cos();
                    let w = *gain_omega * err;
                    let dv = uniform(&mut rng, -*dither_v, *dither_v);
                    let dw = uniform(&mut rng, -*dither_omega, *dither_omega);
                    b.clamp(Control::new(v + dv, w + dw))
                }
                ExcitationPolicy::Constant { control } => *control,
            };
            let next_state = unicycle_step(&state, &control, cfg.dt)?;
            transitions.push(Transition {
                state,
                control,
                next_state,
            });
            state = next_state;
        }
    }

    let warnings = control_variance_warnings(&transitions);
    Ok(Dataset {
        transitions,
        warnings,
    })
}

fn control_variance_warnings<T: Real>(transitions: &[Transition<T>]) -> Vec<DatasetWarning> {
    if transitions.is_empty() {
        return Vec::new();
    }
    let n = transitions.len() as f64;
    let var = |f: &dyn Fn(&Transition<T>) -> f64| {
        let mean = transitions.iter().map(f).sum::<f64>() / n;
        transitions
            .iter()
            .map(|t| (f(t) - mean).powi(2))
            .sum::<f64>()
            / n
    };
    let mut out = Vec::new();
    if var(&|t| t.control.v.as_f64()) < 1e-14 {
        out.push(DatasetWarning::ZeroControlVariance { channel: "v" });
    }
    if var(&|t| t.control.omega.as_f64()) < 1e-14 {
        out.push(DatasetWarning::ZeroControlVariance { channel: "omega" });
    }
    out
}

pub const TRANSITIONS_CSV_HEADER: [&str; 8] = [
    "x",
    "y",
    "theta",
    "v",
    "omega",
    "next_x",
    "next_y",
    "next_theta",
];

#[derive(Serialize, Deserialize)]
struct TransitionRow {
    x: f64,
    y: f64,
    theta: f64,
    v: f64,
    omega: f64,
    next_x: f64,
    next_y: f64,
    next_theta: f64,
}

/// One row per transition, columns [`TRANSITIONS_CSV_HEADER`].
pub fn save_transitions_csv<T: Real>(
    transitions: &[Transition<T>],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
    for t in transitions {
        let row = TransitionRow {
            x: t.state.x.as_f64(),
            y: t.state.y.as_f64(),
            theta: t.state.theta.as_f64(),
            v: t.control.v.as_f64(),
            omega: t.control.omega.as_f64(),
            next_x: t.next_state.x.as_f64(),
            next_y: t.next_state.y.as_f64(),
            next_theta: t.next_state.theta.as_f64(),
        };
        w.serialize(row).map_err(|e| Error::format(path, e))?;
    }
    if transitions.is_empty() {
        w.write_record(TRANSITIONS_CSV_HEADER)
            .map_err(|e| Error::format(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_transitions_csv(path: impl AsRef<Path>) -> Result<Vec<Transition<f64>>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    r.deserialize::<TransitionRow>()
        .map(|row| {
            let row = row.map_err(|e| Error::format(path, e))?;
            Ok(Transition {
                state: State::new(row.x, row.y, row.theta),
                control: Control::new(row.v, row.omega),
                next_state: State::new(row.next_x, row.next_y, row.next_theta),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_policy_counts_and_consistency() {
        let cfg = CollectConfig::<f64>::default();
        let ds = collect_dataset(&cfg, &ExcitationPolicy::Uniform, 100, 50, 7).unwrap();
        assert_eq!(ds.transitions.len(), 5000);
        assert!(ds.warnings.is_empty());
        for t in &ds.transitions {
            assert_eq!(
                t.next_state,
                unicycle_step(&t.state, &t.control, cfg.dt).unwrap()
            );
            assert!(cfg.bounds.contains(&t.control));
        }
    }

    #[test]
    fn zero_episodes_is_empty() {
        let cfg = CollectConfig::<f64>::default();
        let ds = collect_dataset(&cfg, &ExcitationPolicy::Uniform, 0, 50, 7).unwrap();
        assert!(ds.transitions.is_empty());
        assert!(ds.warnings.is_empty());
    }

    #[test]
    fn reproducible_by_seed() {
        let cfg = CollectConfig::<f64>::default();
        let p = ExcitationPolicy::default();
        let a = collect_dataset(&cfg, &p, 5, 20, 11).unwrap();
        let b = collect_dataset(&cfg, &p, 5, 20, 11).unwrap();
        let c = collect_dataset(&cfg, &p, 5, 20, 12).unwrap();
        assert_eq!(a.transitions, b.transitions);
        assert_ne!(a.transitions, c.transitions);
    }

    #[test]
    fn constant_policy_warns() {
        let cfg = CollectConfig::<f64>::default();
        let p = ExcitationPolicy::Constant {
            control: Control::new(0.5, 0.0),
        };
        let ds = collect_dataset(&cfg, &p, 3, 10, 1).unwrap();
        assert_eq!(ds.warnings.len(), 2);
    }

    #[test]
    fn tracking_concentrates_near_paths() {
        // Tracking moves mostly forward: the fraction of steps with positive
        // speed is far above what the uniform policy gives.
        let cfg = CollectConfig::<f64>::default();
        let ds = collect_dataset(&cfg, &ExcitationPolicy::default(), 20, 100, 3).unwrap();
        let fwd = ds.transitions.iter().filter(|t| t.control.v > 0.0).count() as f64
            / ds.transitions.len() as f64;
        assert!(fwd > 0.75, "forward fraction {fwd}");
        // and stays within a modest margin of the workspace
        assert!(ds
            .transitions
            .iter()
            .all(|t| t.state.x.abs() < 4.0 && t.state.y.abs() < 4.0));
    }

    #[test]
    fn random_walk_stays_in_bounds() {
        let cfg = CollectConfig::<f64>::default();
        let p = ExcitationPolicy::RandomWalk {
            step_v: 0.2,
            step_omega: 0.4,
        };
        let ds = collect_dataset(&cfg, &p, 4, 100, 5).unwrap();
        assert!(ds
            .transitions
            .iter()
            .all(|t| cfg.bounds.contains(&t.control)));
    }

    #[test]
    fn transitions_csv_roundtrip() {
        let ds = collect_dataset(
            &CollectConfig::<f64>::default(),
            &ExcitationPolicy::default(),
            3,
            7,
            9,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        save_transitions_csv(&ds.transitions, &path).unwrap();
        assert_eq!(load_transitions_csv(&path).unwrap(), ds.transitions);
        save_transitions_csv::<f64>(&[], &path).unwrap();
        assert!(load_transitions_csv(&path).unwrap().is_empty());
    }
}
