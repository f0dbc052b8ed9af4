//! End-to-end pipeline: offline fit and calibration, the online closed
//! loop, and the scripted experiments. Everything here runs in `f64`.

mod experiments;
mod report;
mod scenarios;

pub use experiments::{
    experiment_confidence_sweep, experiment_fig2, experiment_rg_vs_soft, CONFIDENCE_LEVELS,
};
pub use report::{
    emit, load_report, ArmAggregate, EmitFormat, ExperimentReport, RunMetrics, RunSummary,
};
pub use scenarios::BUILTIN_NAMES;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conformal::{
    calibrate, collect_calibration_pairs, collect_horizon_pairs, nonconformity_scores,
    random_scenarios, CalibrationPair, CalibrationResult, CalibrationScenario, ScenarioSampler,
    ScoreSet, TrackingPolicy,
};
use crate::error::{Error, Result};
use crate::koopman::{fit_body_frame, fit_transitions, Dictionary, KoopmanModel};
use crate::mpc::{MpcConfig, MpcController, SlackNorm};
use crate::qp::QpSettings;
use crate::ref_gen::{goal_reached, next_waypoint, RefGenConfig};
use crate::safe_sets::{build_constraint_set, ObstaclePrediction};
use crate::sim_env::{
    collect_dataset, min_obstacle_distance, unicycle_step, CollectConfig, Control, Dataset,
    ExcitationPolicy, Motion, ObstacleSpec, Position, ScenarioMeta, State, StepRecord,
    TrajectoryLog,
};

/// Tightening level of one closed-loop arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Confidence {
    /// Margin from the `1 - alpha` conformal quantile.
    Alpha(f64),
    /// Untightened baseline, `delta = 0`.
    NoTightening,
}

impl Confidence {
    pub fn alpha(&self) -> Option<f64> {
        match self {
            Confidence::Alpha(a) => Some(*a),
            Confidence::NoTightening => None,
        }
    }

    /// Short arm label, e.g. `98` for `alpha = 0.02` and `none` for the
    /// baseline.
    pub fn label(&self) -> String {
        match self {
            Confidence::Alpha(a) => format!("{}", ((1.0 - a) * 100.0).round()),
            Confidence::NoTightening => "none".into(),
        }
    }

    /// Margin for this level from calibration scores.
    pub fn margin(&self, scores: &ScoreSet<f64>, lipschitz: f64, epsilon: f64) -> Result<f64> {
        match self {
            Confidence::Alpha(a) => calibrate_or_explain(scores, *a, lipschitz, epsilon)?.margin(),
            Confidence::NoTightening => Ok(0.0),
        }
    }
}

/// Constraint margin for the predicted steps of one MPC horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Margin {
    /// The same margin on every predicted step.
    Uniform(f64),
    /// `margins[i]` on predicted step `k + 1 + i`.
    PerStep(Vec<f64>),
}

impl Margin {
    /// Margin on the first predicted step; the value that gets logged.
    pub fn first(&self) -> f64 {
        match self {
            Margin::Uniform(d) => *d,
            Margin::PerStep(v) => v.first().copied().unwrap_or(0.0),
        }
    }

    /// Largest margin over the horizon.
    pub fn max(&self) -> f64 {
        match self {
            Margin::Uniform(d) => *d,
            Margin::PerStep(v) => v.iter().copied().fold(0.0, f64::max),
        }
    }
}

impl From<f64> for Margin {
    fn from(d: f64) -> Self {
        Margin::Uniform(d)
    }
}

/// Calibration scores: one-step, plus `j`-step-ahead sets for
/// `j = 1..=N` when per-step margins are enabled.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBank {
    pub one_step: ScoreSet<f64>,
    pub per_step: Vec<ScoreSet<f64>>,
}

impl From<ScoreSet<f64>> for ScoreBank {
    fn from(one_step: ScoreSet<f64>) -> Self {
        ScoreBank {
            one_step,
            per_step: Vec::new(),
        }
    }
}

impl ScoreBank {
    pub fn from_pairs(
        one_step: &[CalibrationPair<f64>],
        horizon: &[Vec<CalibrationPair<f64>>],
    ) -> Result<Self> {
        Ok(ScoreBank {
            one_step: nonconformity_scores(one_step)?,
            per_step: horizon
                .iter()
                .map(|p| nonconformity_scores(p))
                .collect::<Result<_>>()?,
        })
    }

    /// Margin at `confidence`: one value from the one-step scores, or with
    /// `per_step` one value per predicted step from the `j`-step scores.
    pub fn margin(
        &self,
        confidence: Confidence,
        per_step: bool,
        horizon: usize,
        lipschitz: f64,
        epsilon: f64,
    ) -> Result<Margin> {
        let Confidence::Alpha(alpha) = confidence else {
            return Ok(Margin::Uniform(0.0));
        };
        if !per_step {
            return Ok(Margin::Uniform(confidence.margin(
                &self.one_step,
                lipschitz,
                epsilon,
            )?));
        }
        if self.per_step.len() < horizon {
            return Err(Error::Config(format!(
                "per-step margins need {horizon}-step calibration scores, found {}; \
                 recalibrate with per_step enabled and horizon >= {horizon}",
                self.per_step.len()
            )));
        }
        self.per_step[..horizon]
            .iter()
            .map(|s| calibrate_or_explain(s, alpha, lipschitz, epsilon)?.margin())
            .collect::<Result<Vec<_>>>()
            .map(Margin::PerStep)
    }
}

/// Calibrate, treating an infinite quantile as an error.
pub fn calibrate_or_explain(
    scores: &ScoreSet<f64>,
    alpha: f64,
    l: f64,
    eps: f64,
) -> Result<CalibrationResult<f64>> {
    let cal = calibrate(scores, alpha, l, eps)?;
    if cal.quantile.is_infinite() {
        return Err(Error::InfiniteQuantile { n: cal.n, alpha });
    }
    Ok(cal)
}

/// Where the MPC tracking reference comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    /// Waypoints from the reference generator.
    #[default]
    Governor,
    /// Constant reference at the current target (soft constraints only).
    Goal,
}

/// Per-seed randomization of a scenario. All offsets are uniform in
/// `[-x, x]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Jitter {
    /// start position offset, meters
    #[serde(default)]
    pub start: f64,
    /// start heading offset, radians
    #[serde(default)]
    pub heading: f64,
    /// obstacle initial-center offset, meters
    #[serde(default)]
    pub obstacle: f64,
}

fn default_tolerance() -> f64 {
    0.1
}
fn default_dt() -> f64 {
    0.1
}
fn default_horizon() -> usize {
    10
}
fn default_confidence() -> Confidence {
    Confidence::Alpha(0.02)
}
fn default_prediction() -> ObstaclePrediction {
    ObstaclePrediction::Frozen
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    /// `[x, y, theta]`
    pub start: [f64; 3],
    pub targets: Vec<[f64; 2]>,
    #[serde(default = "default_tolerance")]
    pub goal_tolerance: f64,
    #[serde(default)]
    pub obstacles: Vec<ObstacleSpec<f64>>,
    #[serde(default = "default_confidence")]
    pub confidence: Confidence,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    pub max_steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub reference: ReferenceMode,
    #[serde(default = "default_prediction")]
    pub prediction: ObstaclePrediction,
    #[serde(default)]
    pub jitter: Jitter,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("scenario `{}`: {m}", self.name)));
        if self.targets.is_empty() {
            return bad("needs at least one target".into());
        }
        if self.max_steps == 0 || self.horizon == 0 {
            return bad("max_steps and horizon must be positive".into());
        }
        if !(self.dt > 0.0 && self.goal_tolerance > 0.0) {
            return bad("dt and goal_tolerance must be positive".into());
        }
        if let Confidence::Alpha(a) = self.confidence {
            if !(a > 0.0 && a < 1.0) {
                return bad(format!("alpha {a} outside (0, 1)"));
            }
        }
        for o in &self.obstacles {
            o.validate()?;
        }
        let mut ids: Vec<u32> = self.obstacles.iter().map(|o| o.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad("obstacle ids must be unique".into());
        }
        Ok(())
    }

    pub fn start_state(&self) -> State<f64> {
        State::new(self.start[0], self.start[1], self.start[2])
    }

    /// Copy with this seed's jitter applied (and the jitter cleared).
    pub fn realize(&self, seed: u64) -> Scenario {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut off = |w: f64| if w > 0.0 { rng.gen_range(-w..=w) } else { 0.0 };
        let mut out = self.clone();
        out.seed = seed;
        out.start[0] += off(self.jitter.start);
        out.start[1] += off(self.jitter.start);
        out.start[2] += off(self.jitter.heading);
        for o in &mut out.obstacles {
            let (dx, dy) = (off(self.jitter.obstacle), off(self.jitter.obstacle));
            match &mut o.motion {
                Motion::Static { center } | Motion::Sinusoidal { center, .. } => {
                    center[0] += dx;
                    center[1] += dy;
                }
                Motion::Linear { start, .. } => {
                    start[0] += dx;
                    start[1] += dy;
                }
            }
        }
        out.jitter = Jitter::default();
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let sc: Scenario = serde_json::from_str(&s).map_err(|e| Error::format(path, e))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let s = serde_json::to_string_pretty(self).expect("scenario serializes");
        std::fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
    }

    /// Built-in reconstructions: `fig2`, `fig3`, `fig4`, `free`.
    pub fn builtin(name: &str) -> Option<Scenario> {
        scenarios::builtin(name)
    }
}

/// Offline training data and fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub episodes: usize,
    pub steps: usize,
    pub seed: u64,
    pub dictionary: String,
    pub ridge: f64,
    /// Fit in the body frame on windows of this many transitions; `0`
    /// fits in world coordinates.
    pub window: usize,
    pub stride: usize,
    pub policy: ExcitationPolicy<f64>,
    pub collect: CollectConfig<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: 200,
            steps: 50,
            seed: 1,
            dictionary: "default11".into(),
            ridge: 1e-6,
            window: 10,
            stride: 1,
            policy: ExcitationPolicy::default(),
            collect: CollectConfig::default(),
        }
    }
}

/// Deployment-like calibration runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibConfig {
    pub scenarios: usize,
    pub steps: usize,
    pub seed: u64,
    /// Random moving obstacles per calibration scenario.
    pub obstacles: usize,
    /// Margin the controller uses while calibrating.
    pub margin: f64,
    pub lipschitz: f64,
    pub epsilon: f64,
    pub goal_tolerance: f64,
    pub sampler: ScenarioSampler<f64>,
    /// MPC horizon while calibrating, and the deepest `j` for per-step scores.
    pub horizon: usize,
    /// Calibrate and apply a separate margin for each predicted step.
    pub per_step: bool,
}

impl Default for CalibConfig {
    fn default() -> Self {
        CalibConfig {
            scenarios: 24,
            steps: 60,
            seed: 2,
            obstacles: 2,
            margin: 0.05,
            lipschitz: 1.0,
            epsilon: 0.01,
            goal_tolerance: 0.1,
            sampler: ScenarioSampler::default(),
            horizon: 10,
            per_step: false,
        }
    }
}

/// Serializable controller settings; [`ControllerSettings::mpc_config`]
/// expands them for a given model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerSettings {
    pub q_position: f64,
    pub q_other: f64,
    pub r: f64,
    pub s: f64,
    pub rho1: f64,
    pub slack_norm: SlackNorm,
    pub eps_max: f64,
    pub warm_start: bool,
    pub condensed: bool,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iter: usize,
    pub refgen: RefGenConfig<f64>,
    /// Record wall-clock solve times; off makes logs byte-reproducible.
    pub log_solve_time: bool,
}

impl Default for ControllerSettings {
    fn default() -> Self {
        let q = QpSettings::<f64>::default();
        ControllerSettings {
            q_position: 10.0,
            q_other: 0.1,
            r: 0.1,
            s: 1e3,
            rho1: 1e3,
            slack_norm: SlackNorm::One,
            eps_max: 0.5,
            warm_start: true,
            condensed: true,
            eps_abs: q.eps_abs,
            eps_rel: q.eps_rel,
            max_iter: q.max_iter,
            refgen: RefGenConfig::default(),
            log_solve_time: true,
        }
    }
}

impl ControllerSettings {
    pub fn mpc_config(
        &self,
        model: &KoopmanModel<f64>,
        horizon: usize,
        prediction: ObstaclePrediction,
    ) -> MpcConfig<f64> {
        let mut cfg = MpcConfig::for_model(model);
        let p = model.lifted_dim();
        let pos = model.dictionary.position_slots();
        for i in 0..p {
            cfg.q[(i, i)] = if pos.contains(&i) {
                self.q_position
            } else {
                self.q_other
            };
        }
        cfg.r = nalgebra::DMatrix::identity(2, 2) * self.r;
        cfg.horizon = horizon;
        cfg.s = self.s;
        cfg.rho1 = self.rho1;
        cfg.slack_norm = self.slack_norm;
        cfg.eps_max = self.eps_max;
        cfg.warm_start = self.warm_start;
        cfg.condensed = self.condensed;
        cfg.prediction = prediction;
        cfg.solver.eps_abs = self.eps_abs;
        cfg.solver.eps_rel = self.eps_rel;
        cfg.solver.max_iter = self.max_iter;
        cfg
    }
}

/// Every knob of the pipeline; hashed into each output.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub train: TrainConfig,
    pub calib: CalibConfig,
    pub controller: ControllerSettings,
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&s).map_err(|e| Error::format(path, e))
    }
}

/// Hex SHA-256 of the canonical JSON of `value`.
pub fn config_hash<S: Serialize>(value: &S) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

pub fn collect_training_data(cfg: &TrainConfig) -> Result<Dataset<f64>> {
    collect_dataset(&cfg.collect, &cfg.policy, cfg.episodes, cfg.steps, cfg.seed)
}

pub fn fit_model(data: &Dataset<f64>, cfg: &TrainConfig) -> Result<KoopmanModel<f64>> {
    let dict = Dictionary::from_name(&cfg.dictionary)?;
    if cfg.window == 0 {
        fit_transitions(&data.transitions, dict, cfg.ridge)
    } else {
        fit_body_frame(
            &data.transitions,
            dict,
            cfg.ridge,
            cfg.window,
            cfg.stride.max(1),
        )
    }
}

/// Random moving obstacles around a calibration scenario, kept clear of
/// its start pose.
pub fn random_obstacles(
    rng: &mut ChaCha8Rng,
    count: usize,
    start: &State<f64>,
    half_width: f64,
) -> Vec<ObstacleSpec<f64>> {
    let mut out = Vec::with_capacity(count);
    let mut id = 1;
    while out.len() < count {
        let r = rng.gen_range(0.15..0.35);
        let c = [
            rng.gen_range(-half_width..half_width),
            rng.gen_range(-half_width..half_width),
        ];
        if (Position::new(c[0], c[1]) - start.position()).norm() < r + 0.6 {
            continue;
        }
        let motion = match rng.gen_range(0..3) {
            0 => Motion::Static { center: c },
            1 => Motion::Linear {
                start: c,
                velocity: [rng.gen_range(-0.02..0.02), rng.gen_range(-0.02..0.02)],
            },
            _ => Motion::Sinusoidal {
                center: c,
                amplitude: [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)],
                period: rng.gen_range(40.0..120.0),
            },
        };
        out.push(ObstacleSpec {
            id,
            radius: r,
            motion,
        });
        id += 1;
    }
    out
}

/// The full online stack (reference generator + MPC) as a calibration
/// policy, so calibration scores come from the deployment distribution.
pub struct GovernedMpcPolicy<'a> {
    model: &'a KoopmanModel<f64>,
    controller: MpcController<f64>,
    refgen: RefGenConfig<f64>,
    margin: f64,
    obstacle_count: usize,
    seed: u64,
    half_width: f64,
    obstacles: Vec<ObstacleSpec<f64>>,
}

impl<'a> GovernedMpcPolicy<'a> {
    pub fn new(
        model: &'a KoopmanModel<f64>,
        settings: &ControllerSettings,
        calib: &CalibConfig,
    ) -> Self {
        GovernedMpcPolicy {
            model,
            controller: MpcController::new(settings.mpc_config(
                model,
                calib.horizon,
                ObstaclePrediction::Frozen,
            )),
            refgen: settings.refgen,
            margin: calib.margin,
            obstacle_count: calib.obstacles,
            seed: calib.seed,
            half_width: calib.sampler.workspace[1],
            obstacles: Vec::new(),
        }
    }
}

impl TrackingPolicy<f64> for GovernedMpcPolicy<'_> {
    fn reset(&mut self, scenario: &CalibrationScenario<f64>) {
        self.controller.reset();
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.seed ^ (0x9e37_79b9_u64.wrapping_mul(scenario.id as u64 + 1)),
        );
        self.obstacles = random_obstacles(
            &mut rng,
            self.obstacle_count,
            &scenario.start,
            self.half_width,
        );
    }

    fn control(&mut self, state: &State<f64>, goal: [f64; 2], k: usize) -> Result<Control<f64>> {
        let goal = Position::new(goal[0], goal[1]);
        let out = controller_step(
            self.model,
            &mut self.controller,
            &self.refgen,
            ReferenceMode::Governor,
            state,
            &goal,
            0.0,
            &self.obstacles,
            k,
            &Margin::Uniform(self.margin),
        )?;
        Ok(out.control)
    }
}

/// Calibration pairs from closed-loop runs of the full stack.
pub fn collect_deployment_pairs(
    model: &KoopmanModel<f64>,
    settings: &ControllerSettings,
    calib: &CalibConfig,
    dt: f64,
) -> Result<Vec<CalibrationPair<f64>>> {
    let scenarios = random_scenarios(&calib.sampler, calib.scenarios, calib.steps, calib.seed);
    let mut policy = GovernedMpcPolicy::new(model, settings, calib);
    collect_calibration_pairs(model, &scenarios, &mut policy, dt, calib.goal_tolerance)
}

/// `j`-step-ahead pairs for `j = 1..=calib.horizon` from the same runs as
/// [`collect_deployment_pairs`].
pub fn collect_deployment_horizon_pairs(
    model: &KoopmanModel<f64>,
    settings: &ControllerSettings,
    calib: &CalibConfig,
    dt: f64,
) -> Result<Vec<Vec<CalibrationPair<f64>>>> {
    let scenarios = random_scenarios(&calib.sampler, calib.scenarios, calib.steps, calib.seed);
    let mut policy = GovernedMpcPolicy::new(model, settings, calib);
    collect_horizon_pairs(
        model,
        &scenarios,
        &mut policy,
        dt,
        calib.goal_tolerance,
        calib.horizon,
    )
}

/// One-step pairs, and `j`-step pairs when `calib.per_step` is set (the
/// one-step pairs are then their `j = 1` set).
#[allow(clippy::type_complexity)]
pub fn deployment_pairs(
    model: &KoopmanModel<f64>,
    settings: &ControllerSettings,
    calib: &CalibConfig,
    dt: f64,
) -> Result<(Vec<CalibrationPair<f64>>, Vec<Vec<CalibrationPair<f64>>>)> {
    if calib.per_step {
        let sets = collect_deployment_horizon_pairs(model, settings, calib, dt)?;
        let one = sets.first().cloned().unwrap_or_default();
        Ok((one, sets))
    } else {
        Ok((
            collect_deployment_pairs(model, settings, calib, dt)?,
            Vec::new(),
        ))
    }
}

/// Products of the offline phase.
#[derive(Debug, Clone)]
pub struct OfflineArtifacts {
    pub model: KoopmanModel<f64>,
    /// One-step pairs.
    pub pairs: Vec<CalibrationPair<f64>>,
    /// `j`-step pairs, empty unless per-step margins are enabled.
    pub horizon_pairs: Vec<Vec<CalibrationPair<f64>>>,
    pub scores: ScoreBank,
    /// One-step calibration at the requested level.
    pub calibration: CalibrationResult<f64>,
}

/// Collect, fit, calibrate. The infinite-quantile case is an error that
/// says how to fix it.
pub fn offline_phase(cfg: &PipelineConfig, alpha: f64) -> Result<OfflineArtifacts> {
    let data = collect_training_data(&cfg.train)?;
    for w in &data.warnings {
        log::warn!("{w}");
    }
    let model = fit_model(&data, &cfg.train)?;
    let (pairs, horizon_pairs) =
        deployment_pairs(&model, &cfg.controller, &cfg.calib, cfg.train.collect.dt)?;
    let scores = ScoreBank::from_pairs(&pairs, &horizon_pairs)?;
    let calibration = calibrate_or_explain(
        &scores.one_step,
        alpha,
        cfg.calib.lipschitz,
        cfg.calib.epsilon,
    )?;
    Ok(OfflineArtifacts {
        model,
        pairs,
        horizon_pairs,
        scores,
        calibration,
    })
}

/// What one controller call produced.
#[derive(Debug, Clone)]
pub(crate) struct StepOutput {
    pub control: Control<f64>,
    pub reference: State<f64>,
    pub rg_flagged: bool,
    pub mpc: Option<crate::mpc::MpcStepResult<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn controller_step(
    model: &KoopmanModel<f64>,
    controller: &mut MpcController<f64>,
    refgen: &RefGenConfig<f64>,
    mode: ReferenceMode,
    state: &State<f64>,
    goal: &Position<f64>,
    goal_heading: f64,
    obstacles: &[ObstacleSpec<f64>],
    k: usize,
    margin: &Margin,
) -> Result<StepOutput> {
    // the waypoint serves the whole horizon, so it honours the largest margin
    let (reference, rg_flagged) = match mode {
        ReferenceMode::Governor => {
            match next_waypoint(state, goal, obstacles, k, margin.max(), refgen) {
                Ok(w) => (w.state, w.pass_through || !w.satisfied),
                Err(Error::DegenerateNormal { .. }) => {
                    (State::new(goal[0], goal[1], state.theta), true)
                }
                Err(e) => return Err(e),
            }
        }
        ReferenceMode::Goal => (State::new(goal[0], goal[1], goal_heading), false),
    };
    let solved = match margin {
        Margin::Uniform(d) => controller.step(model, state, &reference, obstacles, k, *d),
        Margin::PerStep(v) => {
            controller.step_with_margins(model, state, &reference, obstacles, k, v)
        }
    };
    match solved {
        Ok(res) => Ok(StepOutput {
            control: res.control,
            reference,
            rg_flagged,
            mpc: Some(res),
        }),
        Err(Error::DegenerateNormal { obstacle }) => {
            log::warn!("agent at the center of obstacle {obstacle} at step {k}; braking");
            controller.reset();
            Ok(StepOutput {
                control: Control::zero(),
                reference,
                rg_flagged,
                mpc: None,
            })
        }
        Err(e) => Err(e),
    }
}

/// Algorithm loop on one (already realized) scenario: measure, rebuild
/// constraints, waypoint, MPC, one plant step, advance targets.
pub fn run_closed_loop(
    scenario: &Scenario,
    model: &KoopmanModel<f64>,
    delta: f64,
    settings: &ControllerSettings,
    meta: ScenarioMeta,
) -> Result<TrajectoryLog> {
    run_closed_loop_with(scenario, model, &Margin::Uniform(delta), settings, meta)
}

/// [`run_closed_loop`] with a general margin; records log its first step.
pub fn run_closed_loop_with(
    scenario: &Scenario,
    model: &KoopmanModel<f64>,
    margin: &Margin,
    settings: &ControllerSettings,
    meta: ScenarioMeta,
) -> Result<TrajectoryLog> {
    scenario.validate()?;
    if let Margin::PerStep(v) = margin {
        if v.len() != scenario.horizon {
            return Err(Error::Config(format!(
                "{} per-step margins for horizon {}",
                v.len(),
                scenario.horizon
            )));
        }
    }
    let delta = margin.first();
    let mpc_cfg = settings.mpc_config(model, scenario.horizon, scenario.prediction);
    let mut controller = MpcController::new(mpc_cfg);
    let mut log = TrajectoryLog::new(meta);
    let mut x = scenario.start_state();
    let mut target = 0;
    let mut active: Option<(usize, f64)> = None;
    let obstacles = &scenario.obstacles;

    for k in 0..scenario.max_steps {
        while target < scenario.targets.len() {
            let t = scenario.targets[target];
            if goal_reached(&x, &Position::new(t[0], t[1]), scenario.goal_tolerance) {
                target += 1;
            } else {
                break;
            }
        }
        if target == scenario.targets.len() {
            log.completed = true;
            break;
        }
        let t = scenario.targets[target];
        let goal = Position::new(t[0], t[1]);
        // the constant goal reference faces along the approach direction,
        // fixed when the target becomes active
        let heading = match active {
            Some((i, h)) if i == target => h,
            _ => {
                let h = (t[1] - x.y).atan2(t[0] - x.x);
                active = Some((target, h));
                h
            }
        };
        let out = controller_step(
            model,
            &mut controller,
            &settings.refgen,
            scenario.reference,
            &x,
            &goal,
            heading,
            obstacles,
            k,
            margin,
        )?;
        let pred = match &out.mpc {
            Some(r) => r.predicted_state(model, 1).unwrap_or(x),
            None => x,
        };
        let halfspaces = build_constraint_set(obstacles, k, &x.position(), delta)
            .map(|c| c.audit_string())
            .unwrap_or_default();
        let rec = match &out.mpc {
            Some(r) => StepRecord {
                k,
                x: x.x,
                y: x.y,
                theta: x.theta,
                v: out.control.v,
                omega: out.control.omega,
                ref_x: out.reference.x,
                ref_y: out.reference.y,
                ref_theta: out.reference.theta,
                pred_x: pred.x,
                pred_y: pred.y,
                pred_theta: pred.theta,
                min_dist: min_obstacle_distance(&x, obstacles, k),
                delta,
                slack_shared: r.max_shared_slack(),
                slack_step_max: r.max_step_slack(),
                slack_total: r.total_slack(),
                objective: r.objective,
                solve_time_us: if settings.log_solve_time {
                    r.solve_time.as_secs_f64() * 1e6
                } else {
                    0.0
                },
                qp_iterations: r.iterations,
                status: r.status.as_str().into(),
                fallback: r.fallback,
                rg_flagged: out.rg_flagged,
                target_index: target,
                halfspaces,
            },
            None => StepRecord {
                k,
                x: x.x,
                y: x.y,
                theta: x.theta,
                v: 0.0,
                omega: 0.0,
                ref_x: out.reference.x,
                ref_y: out.reference.y,
                ref_theta: out.reference.theta,
                pred_x: x.x,
                pred_y: x.y,
                pred_theta: x.theta,
                min_dist: min_obstacle_distance(&x, obstacles, k),
                delta,
                slack_shared: 0.0,
                slack_step_max: 0.0,
                slack_total: 0.0,
                objective: 0.0,
                solve_time_us: 0.0,
                qp_iterations: 0,
                status: "skipped".into(),
                fallback: true,
                rg_flagged: out.rg_flagged,
                target_index: target,
                halfspaces,
            },
        };
        log.push(rec)?;
        x = unicycle_step(&x, &out.control, scenario.dt)?;
    }
    let k_end = log.records.last().map_or(0, |r| r.k + 1);
    log.final_state = Some([x.x, x.y, x.theta]);
    log.final_min_dist = Some(min_obstacle_distance(&x, obstacles, k_end));
    if !log.completed {
        log.completed = scenario.targets.last().is_some_and(|t| {
            target + 1 >= scenario.targets.len()
                && goal_reached(&x, &Position::new(t[0], t[1]), scenario.goal_tolerance)
        });
    }
    Ok(log)
}
