//! Split conformal calibration of one-step prediction error and the
//! resulting constraint-tightening margin.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::koopman::KoopmanModel;
use crate::scalar::{wrap_angle, Real};
use crate::sim_env::{unicycle_step, Control, ControlBounds, State};

/// Probability-space slack used when comparing cumulative mass against
/// `1 - alpha`, so `k / (n + 1)` landing exactly on the target is not
/// pushed up a rank by rounding.
const MASS_TOL: f64 = 1e-10;

/// Tolerance on `sum(weights) == 1`.
const WEIGHT_SUM_TOL: f64 = 1e-9;

/// Conformal quantile: an observed score, or the `+inf` atom.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(
    tag = "kind",
    content = "value",
    rename_all = "snake_case",
    bound = "T: Real"
)]
pub enum Quantile<T> {
    Finite(T),
    Infinite,
}

impl<T: Real> Quantile<T> {
    pub fn finite(&self) -> Option<T> {
        match self {
            Quantile::Finite(q) => Some(*q),
            Quantile::Infinite => None,
        }
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, Quantile::Infinite)
    }

    /// `score <= Q`
    pub fn covers(&self, score: T) -> bool {
        match self {
            Quantile::Finite(q) => score <= *q,
            Quantile::Infinite => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreSource {
    pub scenario: u32,
    pub step: usize,
}

/// Nonconformity scores with where they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet<T> {
    scores: Vec<T>,
    sources: Vec<ScoreSource>,
}

impl<T: Real> ScoreSet<T> {
    /// Scores must be finite and non-negative.
    pub fn new(scores: Vec<T>) -> Result<Self> {
        let sources = (0..scores.len())
            .map(|step| ScoreSource { scenario: 0, step })
            .collect();
        Self::with_sources(scores, sources)
    }

    pub fn with_sources(scores: Vec<T>, sources: Vec<ScoreSource>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::EmptyScores);
        }
        if scores.len() != sources.len() {
            return Err(Error::InvalidInput("one source per score".into()));
        }
        if let Some(bad) = scores.iter().find(|s| !s.is_finite() || **s < T::zero()) {
            return Err(Error::InvalidInput(format!(
                "scores must be finite and non-negative, found {bad}"
            )));
        }
        Ok(ScoreSet { scores, sources })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[T] {
        &self.scores
    }

    pub fn sources(&self) -> &[ScoreSource] {
        &self.sources
    }

    fn sorted(&self) -> Vec<T> {
        let mut s = self.scores.clone();
        s.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
        s
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )))
    }
}

/// Rank `k = ceil((n + 1)(1 - alpha))` into the augmented multiset,
/// in `1..=n + 1`.
pub fn conformal_rank(n: usize, alpha: f64) -> usize {
    let m = (n + 1) as f64;
    let k = (m * (1.0 - alpha) - m * MASS_TOL).ceil();
    (k.max(1.0) as usize).min(n + 1)
}

/// `k`-th smallest of `scores ∪ {+inf}` with `k` from [`conformal_rank`].
pub fn conformal_quantile<T: Real>(scores: &ScoreSet<T>, alpha: T) -> Result<Quantile<T>> {
    let alpha = alpha.as_f64();
    check_alpha(alpha)?;
    if scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    let n = scores.len();
    let k = conformal_rank(n, alpha);
    if k == n + 1 {
        return Ok(Quantile::Infinite);
    }
    Ok(Quantile::Finite(scores.sorted()[k - 1]))
}

/// Quantile of `sum_i w_i delta(s_i) + w_{n+1} delta(+inf)`.
///
/// `weights` has `n + 1` entries; the last belongs to the infinite atom.
pub fn weighted_quantile<T: Real>(
    scores: &ScoreSet<T>,
    weights: &[T],
    alpha: T,
) -> Result<Quantile<T>> {
    let alpha = alpha.as_f64();
    check_alpha(alpha)?;
    let n = scores.len();
    if weights.len() != n + 1 {
        return Err(Error::UnnormalizedWeights(format!(
            "expected {} weights, got {}",
            n + 1,
            weights.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < T::zero()) {
        return Err(Error::UnnormalizedWeights(
            "weights must be finite and non-negative".into(),
        ));
    }
    let total: f64 = weights.iter().map(|w| w.as_f64()).sum();
    if (total - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::UnnormalizedWeights(format!(
            "weights sum to {total}"
        )));
    }

    let mut atoms: Vec<(T, f64)> = scores
        .scores()
        .iter()
        .zip(weights)
        .map(|(s, w)| (*s, w.as_f64()))
        .collect();
    atoms.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));

    let target = 1.0 - alpha - MASS_TOL;
    let mut cum = 0.0;
    let mut i = 0;
    while i < atoms.len() {
        let s = atoms[i].0;
        // all atoms equal to s enter together
        while i < atoms.len() && atoms[i].0 == s {
            cum += atoms[i].1;
            i += 1;
        }
        if cum >= target {
            return Ok(Quantile::Finite(s));
        }
    }
    Ok(Quantile::Infinite)
}

/// `Delta = L Q + epsilon`.
pub fn tightening_margin<T: Real>(q: Quantile<T>, lipschitz: T, epsilon: T) -> Result<T> {
    let q = match q {
        Quantile::Finite(q) => q,
        Quantile::Infinite => {
            return Err(Error::InvalidInput(
                "cannot tighten with an infinite quantile; collect more calibration pairs or raise alpha".into(),
            ))
        }
    };
    if q < T::zero() || !(lipschitz > T::zero()) || !(epsilon > T::zero()) {
        return Err(Error::InvalidInput(
            "tightening needs Q >= 0, L > 0 and epsilon > 0".into(),
        ));
    }
    Ok(lipschitz * q + epsilon)
}

/// Fraction of held-out scores not exceeding `q`.
pub fn empirical_coverage<T: Real>(q: Quantile<T>, held_out: &[T]) -> f64 {
    if held_out.is_empty() {
        return 1.0;
    }
    held_out.iter().filter(|s| q.covers(**s)).count() as f64 / held_out.len() as f64
}

/// Observed successor and the model's prediction for it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct CalibrationPair<T> {
    pub scenario: u32,
    pub step: usize,
    pub truth: State<T>,
    pub predicted: State<T>,
}

impl<T: Real> CalibrationPair<T> {
    /// Euclidean distance between the planar positions; heading is excluded.
    pub fn score(&self) -> T {
        (self.truth.position() - self.predicted.position()).norm()
    }
}

pub fn nonconformity_scores<T: Real>(pairs: &[CalibrationPair<T>]) -> Result<ScoreSet<T>> {
    let scores = pairs.iter().map(CalibrationPair::score).collect();
    let sources = pairs
        .iter()
        .map(|p| ScoreSource {
            scenario: p.scenario,
            step: p.step,
        })
        .collect();
    ScoreSet::with_sources(scores, sources)
}

/// Randomized tracking task used to gather calibration pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct CalibrationScenario<T> {
    pub id: u32,
    pub start: State<T>,
    /// Visited in order, cycling, until `steps` controls have been applied.
    pub goals: Vec<[T; 2]>,
    pub steps: usize,
}

/// Sampling box for [`random_scenarios`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", default)]
pub struct ScenarioSampler<T> {
    pub workspace: [T; 2],
    pub heading_range: [T; 2],
    pub goals_per_scenario: usize,
}

impl<T: Real> Default for ScenarioSampler<T> {
    fn default() -> Self {
        ScenarioSampler {
            workspace: [T::lit(-2.5), T::lit(2.5)],
            heading_range: [-T::pi(), T::pi()],
            goals_per_scenario: 4,
        }
    }
}

pub fn random_scenarios<T: Real>(
    sampler: &ScenarioSampler<T>,
    count: usize,
    steps: usize,
    seed: u64,
) -> Vec<CalibrationScenario<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [lo, hi] = sampler.workspace;
    let [tlo, thi] = sampler.heading_range;
    let mut draw = |lo: T, hi: T| lo + (hi - lo) * T::lit(rng.gen::<f64>());
    (0..count)
        .map(|id| {
            let start = State::new(draw(lo, hi), draw(lo, hi), draw(tlo, thi));
            let goals = (0..sampler.goals_per_scenario.max(1))
                .map(|_| [draw(lo, hi), draw(lo, hi)])
                .collect();
            CalibrationScenario {
                id: id as u32,
                start,
                goals,
                steps,
            }
        })
        .collect()
}

/// Closed-loop controller driven during calibration.
pub trait TrackingPolicy<T: Real> {
    /// Called before each scenario.
    fn reset(&mut self, _scenario: &CalibrationScenario<T>) {}

    fn control(&mut self, state: &State<T>, goal: [T; 2], k: usize) -> Result<Control<T>>;
}

/// Proportional heading/speed tracker.
#[derive(Debug, Clone)]
pub struct ProportionalTracker<T> {
    pub gain_v: T,
    pub gain_omega: T,
    pub bounds: ControlBounds<T>,
}

impl<T: Real> Default for ProportionalTracker<T> {
    fn default() -> Self {
        ProportionalTracker {
            gain_v: T::lit(1.0),
            gain_omega: T::lit(2.0),
            bounds: ControlBounds::default(),
        }
    }
}

impl<T: Real> TrackingPolicy<T> for ProportionalTracker<T> {
    fn control(&mut self, state: &State<T>, goal: [T; 2], _k: usize) -> Result<Control<T>> {
        let dx = goal[0] - state.x;
        let dy = goal[1] - state.y;
        let dist = (dx * dx + dy * dy).sqrt();
        let err = wrap_angle(dy.atan2(dx) - state.theta);
        Ok(self.bounds.clamp(Control::new(
            self.gain_v * dist.min(T::one()) * err.cos(),
            self.gain_omega * err,
        )))
    }
}

type Trace<T> = (Vec<State<T>>, Vec<Control<T>>);

/// Executed states `x_0 ..= x_steps` and controls `u_0 .. u_steps` of one
/// scenario.
fn trace_scenario<T: Real, P: TrackingPolicy<T>>(
    sc: &CalibrationScenario<T>,
    policy: &mut P,
    dt: T,
    goal_tolerance: T,
) -> Result<Trace<T>> {
    if sc.goals.is_empty() {
        return Err(Error::InvalidInput(format!(
            "calibration scenario {} has no goals",
            sc.id
        )));
    }
    policy.reset(sc);
    let mut states = Vec::with_capacity(sc.steps + 1);
    let mut controls = Vec::with_capacity(sc.steps);
    let mut state = sc.start;
    states.push(state);
    let mut goal_idx = 0;
    for k in 0..sc.steps {
        let g = sc.goals[goal_idx % sc.goals.len()];
        let gx = g[0] - state.x;
        let gy = g[1] - state.y;
        if (gx * gx + gy * gy).sqrt() <= goal_tolerance {
            goal_idx += 1;
        }
        let goal = sc.goals[goal_idx % sc.goals.len()];
        let u = policy.control(&state, goal, k)?;
        state = unicycle_step(&state, &u, dt)?;
        controls.push(u);
        states.push(state);
    }
    Ok((states, controls))
}

/// Run each scenario under `policy` on the true plant and record
/// `(x_{k+1}, predict_one_step(x_k, u_k))` for every applied control.
pub fn collect_calibration_pairs<T: Real, P: TrackingPolicy<T>>(
    model: &KoopmanModel<T>,
    scenarios: &[CalibrationScenario<T>],
    policy: &mut P,
    dt: T,
    goal_tolerance: T,
) -> Result<Vec<CalibrationPair<T>>> {
    let mut pairs = Vec::with_capacity(scenarios.iter().map(|s| s.steps).sum());
    for sc in scenarios {
        let (states, controls) = trace_scenario(sc, policy, dt, goal_tolerance)?;
        for (k, u) in controls.iter().enumerate() {
            pairs.push(CalibrationPair {
                scenario: sc.id,
                step: k,
                truth: states[k + 1],
                predicted: model.predict_state(&states[k], u)?,
            });
        }
    }
    Ok(pairs)
}

/// Multi-step variant: entry `j - 1` holds `(x_{k+j}, x̂_{k+j|k})` for every
/// `k` with `k + j` inside the run, where the prediction rolls the model
/// open loop from `x_k` under the applied controls. `j = 1` reproduces
/// [`collect_calibration_pairs`] up to rounding.
pub fn collect_horizon_pairs<T: Real, P: TrackingPolicy<T>>(
    model: &KoopmanModel<T>,
    scenarios: &[CalibrationScenario<T>],
    policy: &mut P,
    dt: T,
    goal_tolerance: T,
    horizon: usize,
) -> Result<Vec<Vec<CalibrationPair<T>>>> {
    let mut sets = vec![Vec::new(); horizon];
    for sc in scenarios {
        let (states, controls) = trace_scenario(sc, policy, dt, goal_tolerance)?;
        for k in 0..controls.len() {
            let len = horizon.min(controls.len() - k);
            let predicted = model.rollout_states(&states[k], &controls[k..k + len])?;
            for (j, p) in predicted.into_iter().enumerate() {
                sets[j].push(CalibrationPair {
                    scenario: sc.id,
                    step: k,
                    truth: states[k + j + 1],
                    predicted: p,
                });
            }
        }
    }
    Ok(sets)
}

/// Outcome of calibration: quantile and the margin derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct CalibrationResult<T> {
    pub alpha: T,
    pub quantile: Quantile<T>,
    pub lipschitz: T,
    pub epsilon: T,
    /// `L Q + epsilon`; absent when the quantile is infinite.
    pub delta: Option<T>,
    pub n: usize,
}

impl<T: Real> CalibrationResult<T> {
    /// Margin, or an error explaining how to obtain a finite quantile.
    pub fn margin(&self) -> Result<T> {
        self.delta.ok_or(Error::InfiniteQuantile {
            n: self.n,
            alpha: self.alpha.as_f64(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("calibration serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&s).map_err(|e| Error::format(path, e))
    }
}

pub fn calibrate<T: Real>(
    scores: &ScoreSet<T>,
    alpha: T,
    lipschitz: T,
    epsilon: T,
) -> Result<CalibrationResult<T>> {
    let quantile = conformal_quantile(scores, alpha)?;
    let delta = match quantile {
        Quantile::Finite(_) => Some(tightening_margin(quantile, lipschitz, epsilon)?),
        Quantile::Infinite => None,
    };
    Ok(CalibrationResult {
        alpha,
        quantile,
        lipschitz,
        epsilon,
        delta,
        n: scores.len(),
    })
}

pub const PAIRS_CSV_HEADER: &str =
    "pair_id,scenario,step,true_x,true_y,true_theta,pred_x,pred_y,pred_theta,score";

pub fn write_pairs_csv<T: Real, W: Write>(
    pairs: &[CalibrationPair<T>],
    mut out: W,
) -> std::io::Result<()> {
    writeln!(out, "{PAIRS_CSV_HEADER}")?;
    for (i, p) in pairs.iter().enumerate() {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            i,
            p.scenario,
            p.step,
            p.truth.x.as_f64(),
            p.truth.y.as_f64(),
            p.truth.theta.as_f64(),
            p.predicted.x.as_f64(),
            p.predicted.y.as_f64(),
            p.predicted.theta.as_f64(),
            p.score().as_f64()
        )?;
    }
    Ok(())
}

pub fn read_pairs_csv(path: impl AsRef<Path>) -> Result<Vec<CalibrationPair<f64>>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::format(path, e))?;
        let f = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| Error::format(path, format!("bad field {i}")))
        };
        out.push(CalibrationPair {
            scenario: f(1)? as u32,
            step: f(2)? as usize,
            truth: State::new(f(3)?, f(4)?, f(5)?),
            predicted: State::new(f(6)?, f(7)?, f(8)?),
        });
    }
    Ok(out)
}

pub const HORIZON_PAIRS_CSV_HEADER: &str =
    "ahead,pair_id,scenario,step,true_x,true_y,true_theta,pred_x,pred_y,pred_theta,score";

/// Multi-step pairs, one row per pair, `ahead` = steps predicted.
pub fn write_horizon_pairs_csv<T: Real, W: Write>(
    sets: &[Vec<CalibrationPair<T>>],
    mut out: W,
) -> std::io::Result<()> {
    writeln!(out, "{HORIZON_PAIRS_CSV_HEADER}")?;
    for (j, pairs) in sets.iter().enumerate() {
        for (i, p) in pairs.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                j + 1,
                i,
                p.scenario,
                p.step,
                p.truth.x.as_f64(),
                p.truth.y.as_f64(),
                p.truth.theta.as_f64(),
                p.predicted.x.as_f64(),
                p.predicted.y.as_f64(),
                p.predicted.theta.as_f64(),
                p.score().as_f64()
            )?;
        }
    }
    Ok(())
}

pub fn read_horizon_pairs_csv(path: impl AsRef<Path>) -> Result<Vec<Vec<CalibrationPair<f64>>>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    let mut sets: Vec<Vec<CalibrationPair<f64>>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::format(path, e))?;
        let f = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| Error::format(path, format!("bad field {i}")))
        };
        let ahead = f(0)? as usize;
        if ahead == 0 || ahead > sets.len() + 1 {
            return Err(Error::format(
                path,
                format!("rows out of order at ahead = {ahead}"),
            ));
        }
        if ahead > sets.len() {
            sets.push(Vec::new());
        }
        sets[ahead - 1].push(CalibrationPair {
            scenario: f(2)? as u32,
            step: f(3)? as usize,
            truth: State::new(f(4)?, f(5)?, f(6)?),
            predicted: State::new(f(7)?, f(8)?, f(9)?),
        });
    }
    Ok(sets)
}
