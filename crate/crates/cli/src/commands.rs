//! Subcommand bodies and the failure-to-exit-code mapping.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::ArgMatches;
use koopnav::conformal::{
    read_horizon_pairs_csv, read_pairs_csv, write_horizon_pairs_csv, write_pairs_csv,
    CalibrationResult,
};
use koopnav::harness::{
    calibrate_or_explain, collect_training_data, config_hash, deployment_pairs, emit,
    experiment_confidence_sweep, experiment_fig2, experiment_rg_vs_soft, fit_model,
    run_closed_loop_with, Confidence, ExperimentReport, Margin, PipelineConfig, Scenario,
    ScoreBank, BUILTIN_NAMES, CONFIDENCE_LEVELS,
};
use koopnav::koopman::{Dictionary, KoopmanModel};
use koopnav::sim_env::{load_transitions_csv, save_transitions_csv, Dataset, ScenarioMeta};

use crate::config::{self, explicit};
use crate::{
    CalibrateArgs, Cli, ClosedLoopArgs, CollectArgs, Command, ExperimentArgs, ExperimentKind,
    FitArgs, RunArgs,
};

const TRANSITIONS: &str = "transitions.csv";
const MODEL: &str = "model.json";
const CALIBRATION: &str = "calibration.json";
const PAIRS: &str = "calibration_pairs.csv";
const HORIZON_PAIRS: &str = "calibration_horizon_pairs.csv";

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Missing { path: PathBuf, hint: String },
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Missing { .. } => 3,
            Failure::Runtime(_) => 4,
        }
    }

    pub fn missing(path: &Path, hint: &str) -> Self {
        Failure::Missing {
            path: path.to_path_buf(),
            hint: hint.into(),
        }
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Failure::Runtime(msg.into())
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => f.write_str(m),
            Failure::Missing { path, hint } => {
                write!(f, "required file {} not found; {hint}", path.display())
            }
        }
    }
}

impl From<koopnav::Error> for Failure {
    fn from(e: koopnav::Error) -> Self {
        match e {
            koopnav::Error::Config(m) => Failure::Usage(m),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

struct Ctx {
    run_dir: PathBuf,
    cfg: PipelineConfig,
}

impl Ctx {
    fn path(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.run_dir.join(default))
    }

    fn finish(&self) -> Outcome {
        config::save(&self.run_dir, &self.cfg)?;
        println!("config_hash {}", config_hash(&self.cfg));
        Ok(())
    }
}

fn create_dir(dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir).map_err(|e| Failure::runtime(format!("{}: {e}", dir.display())))
}

fn create_parent(path: &Path) -> Outcome {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn require(path: &Path, hint: &str) -> Outcome {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::missing(path, hint))
    }
}

pub fn dispatch(cli: &Cli, matches: &ArgMatches) -> Outcome {
    let run_dir = cli.out.join(&cli.run);
    create_dir(&run_dir)?;
    let cfg = config::load(&run_dir, cli.config.as_deref())?;
    let mut ctx = Ctx { run_dir, cfg };
    let (_, sub) = matches.subcommand().expect("subcommand required");
    match &cli.command {
        Command::Collect(a) => collect(&mut ctx, a, sub),
        Command::Fit(a) => fit(&mut ctx, a, sub),
        Command::Calibrate(a) => calibrate(&mut ctx, a, sub),
        Command::Run(a) => run(&mut ctx, a, sub),
        Command::Experiment(kind) => {
            let (_, m) = sub.subcommand().expect("experiment kind required");
            experiment(&mut ctx, kind, m)
        }
    }
}

fn collect(ctx: &mut Ctx, a: &CollectArgs, m: &ArgMatches) -> Outcome {
    let t = &mut ctx.cfg.train;
    if explicit(m, "episodes") {
        t.episodes = a.episodes;
    }
    if explicit(m, "steps") {
        t.steps = a.steps;
    }
    if explicit(m, "seed") {
        t.seed = a.seed;
    }
    let out = ctx.path(&a.output, TRANSITIONS);
    let data = collect_training_data(&ctx.cfg.train)?;
    for w in &data.warnings {
        log::warn!("{w}");
    }
    create_parent(&out)?;
    save_transitions_csv(&data.transitions, &out)?;
    println!(
        "wrote {} ({} transitions)",
        out.display(),
        data.transitions.len()
    );
    ctx.finish()
}

fn fit(ctx: &mut Ctx, a: &FitArgs, m: &ArgMatches) -> Outcome {
    let t = &mut ctx.cfg.train;
    if explicit(m, "dictionary") {
        t.dictionary = a.dictionary.clone();
    }
    if explicit(m, "ridge") {
        t.ridge = a.ridge;
    }
    if explicit(m, "window") {
        t.window = a.window;
    }
    if explicit(m, "stride") {
        t.stride = a.stride;
    }
    Dictionary::from_name(&ctx.cfg.train.dictionary)?;
    let data_path = ctx.path(&a.data, TRANSITIONS);
    require(&data_path, "run `koopnav collect` first or pass --data")?;
    let out = ctx.path(&a.output, MODEL);
    let data = Dataset {
        transitions: load_transitions_csv(&data_path)?,
        warnings: Vec::new(),
    };
    let model = fit_model(&data, &ctx.cfg.train)?;
    create_parent(&out)?;
    model.save(&out)?;
    println!(
        "wrote {} (dictionary {}, lifted dimension {})",
        out.display(),
        model.dictionary.name(),
        model.lifted_dim()
    );
    ctx.finish()
}

fn calibrate(ctx: &mut Ctx, a: &CalibrateArgs, m: &ArgMatches) -> Outcome {
    let c = &mut ctx.cfg.calib;
    if explicit(m, "scenarios") {
        c.scenarios = a.scenarios;
    }
    if explicit(m, "steps") {
        c.steps = a.steps;
    }
    if explicit(m, "seed") {
        c.seed = a.seed;
    }
    if explicit(m, "obstacles") {
        c.obstacles = a.obstacles;
    }
    if explicit(m, "lipschitz") {
        c.lipschitz = a.lipschitz;
    }
    if explicit(m, "epsilon") {
        c.epsilon = a.epsilon;
    }
    if explicit(m, "per_step") {
        c.per_step = a.per_step;
    }
    if !(a.alpha > 0.0 && a.alpha < 1.0) {
        return Err(Failure::Usage(format!(
            "--alpha must lie in (0, 1), got {}",
            a.alpha
        )));
    }
    let model_path = ctx.path(&a.model, MODEL);
    require(&model_path, "run `koopnav fit` first or pass --model")?;
    let model = KoopmanModel::<f64>::load(&model_path)?;
    let out = ctx.path(&a.output, CALIBRATION);
    let pairs_path = ctx.path(&a.pairs, PAIRS);

    let cfg = &ctx.cfg;
    let (pairs, horizon_pairs) =
        deployment_pairs(&model, &cfg.controller, &cfg.calib, cfg.train.collect.dt)?;
    let io_err =
        |path: &Path, e: std::io::Error| Failure::runtime(format!("{}: {e}", path.display()));
    create_parent(&pairs_path)?;
    let file = File::create(&pairs_path).map_err(|e| io_err(&pairs_path, e))?;
    write_pairs_csv(&pairs, BufWriter::new(file)).map_err(|e| io_err(&pairs_path, e))?;
    println!("wrote {} ({} pairs)", pairs_path.display(), pairs.len());
    if cfg.calib.per_step {
        let path = ctx.path(&a.horizon_pairs, HORIZON_PAIRS);
        create_parent(&path)?;
        let file = File::create(&path).map_err(|e| io_err(&path, e))?;
        write_horizon_pairs_csv(&horizon_pairs, BufWriter::new(file))
            .map_err(|e| io_err(&path, e))?;
        println!(
            "wrote {} (1 to {} steps ahead)",
            path.display(),
            horizon_pairs.len()
        );
    }

    let bank = ScoreBank::from_pairs(&pairs, &horizon_pairs)?;
    let cal = calibrate_or_explain(
        &bank.one_step,
        a.alpha,
        cfg.calib.lipschitz,
        cfg.calib.epsilon,
    )?;
    if let Margin::PerStep(v) = bank.margin(
        Confidence::Alpha(a.alpha),
        cfg.calib.per_step,
        horizon_pairs.len(),
        cfg.calib.lipschitz,
        cfg.calib.epsilon,
    )? {
        let list: Vec<String> = v.iter().map(|d| format!("{d:.4}")).collect();
        println!("per-step delta [{}]", list.join(", "));
    }
    create_parent(&out)?;
    cal.save(&out)?;
    println!(
        "wrote {} (alpha {}, n {}, delta {})",
        out.display(),
        a.alpha,
        cal.n,
        cal.margin()?
    );
    ctx.finish()
}

/// A scenario file, or a built-in by name (`fig3`, `fig3.scenario`,
/// `scenarios/fig3.scenario.json` when that file is absent).
pub fn resolve_scenario(arg: &str) -> Result<Scenario, Failure> {
    let path = Path::new(arg);
    if path.is_file() {
        let s = Scenario::load(path)?;
        s.validate()
            .map_err(|e| Failure::Usage(format!("{arg}: {e}")))?;
        return Ok(s);
    }
    let stem = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or(arg)
        .trim_end_matches(".json")
        .trim_end_matches(".scenario");
    if let Some(s) = Scenario::builtin(stem) {
        return Ok(s);
    }
    if arg.contains(std::path::MAIN_SEPARATOR) || arg.ends_with(".json") {
        return Err(Failure::missing(path, "pass an existing scenario file"));
    }
    Err(Failure::Usage(format!(
        "unknown scenario `{arg}`; expected a file or one of {}",
        BUILTIN_NAMES.join(", ")
    )))
}

fn apply_closed_loop(ctx: &mut Ctx, a: &ClosedLoopArgs, m: &ArgMatches) {
    if explicit(m, "log_solve_time") {
        ctx.cfg.controller.log_solve_time = a.log_solve_time;
    }
}

fn load_model(ctx: &Ctx, a: &ClosedLoopArgs) -> Result<KoopmanModel<f64>, Failure> {
    let path = ctx.path(&a.model, MODEL);
    require(&path, "run `koopnav fit` first or pass --model")?;
    Ok(KoopmanModel::load(&path)?)
}

fn load_scores(ctx: &Ctx, a: &ClosedLoopArgs) -> Result<ScoreBank, Failure> {
    let path = ctx.path(&a.pairs, PAIRS);
    require(&path, "run `koopnav calibrate` first or pass --pairs")?;
    let pairs = read_pairs_csv(&path)?;
    let horizon = if ctx.cfg.calib.per_step {
        let path = ctx.path(&a.horizon_pairs, HORIZON_PAIRS);
        require(
            &path,
            "per-step margins are enabled; run `koopnav calibrate --per-step true` or pass --horizon-pairs",
        )?;
        read_horizon_pairs_csv(&path)?
    } else {
        Vec::new()
    };
    Ok(ScoreBank::from_pairs(&pairs, &horizon)?)
}

fn check_alpha(alpha: Option<f64>) -> Outcome {
    match alpha {
        Some(a) if !(a > 0.0 && a < 1.0) => Err(Failure::Usage(format!(
            "--alpha must lie in (0, 1), got {a}"
        ))),
        _ => Ok(()),
    }
}

fn print_arms(report: &ExperimentReport) {
    for arm in &report.arms {
        let label = if arm.arm.is_empty() { "-" } else { &arm.arm };
        println!(
            "arm {label}: delta {:.4}, completed {}/{}, collision steps {}, min clearance {:.4}, median solve {}",
            arm.delta,
            arm.completed,
            arm.runs,
            arm.collision_steps,
            arm.min_clearance,
            arm.median_solve_us
                .map(|us| format!("{:.0} us", us))
                .unwrap_or_else(|| "n/a".into())
        );
    }
}

fn run(ctx: &mut Ctx, a: &RunArgs, m: &ArgMatches) -> Outcome {
    apply_closed_loop(ctx, &a.common, m);
    check_alpha(a.alpha)?;
    let mut scenario = resolve_scenario(&a.scenario)?;
    let model = load_model(ctx, &a.common)?;
    let cal_path = ctx.path(&a.calibration, CALIBRATION);
    require(
        &cal_path,
        "run `koopnav calibrate` first or pass --calibration",
    )?;
    let cal = CalibrationResult::<f64>::load(&cal_path)?;

    let cfg = &ctx.cfg;
    let confidence = if a.no_tightening {
        Confidence::NoTightening
    } else {
        Confidence::Alpha(a.alpha.unwrap_or(cal.alpha))
    };
    let margin = if a.no_tightening {
        Margin::Uniform(0.0)
    } else if a.alpha.is_none() && !cfg.calib.per_step {
        Margin::Uniform(cal.margin()?)
    } else {
        load_scores(ctx, &a.common)?.margin(
            confidence,
            cfg.calib.per_step,
            scenario.horizon,
            cfg.calib.lipschitz,
            cfg.calib.epsilon,
        )?
    };
    scenario.confidence = confidence;

    let hash = config_hash(&("run", &scenario, cfg, a.seed, &margin));
    let meta = ScenarioMeta {
        scenario: scenario.name.clone(),
        arm: String::new(),
        alpha: confidence.alpha(),
        delta: margin.first(),
        seed: a.seed,
        config_hash: hash.clone(),
    };
    let log = run_closed_loop_with(
        &scenario.realize(a.seed),
        &model,
        &margin,
        &cfg.controller,
        meta,
    )?;
    let report = ExperimentReport::new("run", scenario, cfg.clone(), hash, vec![log]);
    let out = a.output.clone().unwrap_or_else(|| ctx.run_dir.clone());
    for path in emit(&report, a.common.format.into(), &out)? {
        println!("wrote {}", path.display());
    }
    let r = &report.runs[0].metrics;
    println!(
        "completed {}, steps {}, collision steps {}, min clearance {:.4}",
        r.completed, r.steps, r.collision_steps, r.min_clearance
    );
    ctx.finish()
}

fn experiment(ctx: &mut Ctx, kind: &ExperimentKind, m: &ArgMatches) -> Outcome {
    let (name, default_scenario, a) = match kind {
        ExperimentKind::ConfidenceSweep(a) => ("confidence-sweep", "fig3", a),
        ExperimentKind::RgVsSoft(a) => ("rg-vs-soft", "fig4", a),
        ExperimentKind::Fig2(a) => ("fig2", "fig2", a),
    };
    experiment_with(ctx, name, default_scenario, a, m)
}

fn experiment_with(
    ctx: &mut Ctx,
    name: &str,
    default_scenario: &str,
    a: &ExperimentArgs,
    m: &ArgMatches,
) -> Outcome {
    apply_closed_loop(ctx, &a.common, m);
    check_alpha(a.alpha)?;
    if a.seeds == 0 {
        return Err(Failure::Usage("--seeds must be at least 1".into()));
    }
    let mut scenario = resolve_scenario(a.scenario.as_deref().unwrap_or(default_scenario))?;
    if let Some(alpha) = a.alpha {
        scenario.confidence = Confidence::Alpha(alpha);
    }
    let model = load_model(ctx, &a.common)?;
    let scores = load_scores(ctx, &a.common)?;
    let seeds: Vec<u64> = (a.seed_base..a.seed_base + a.seeds).collect();
    let cfg = &ctx.cfg;
    let report = match name {
        "confidence-sweep" => experiment_confidence_sweep(
            &scenario,
            &CONFIDENCE_LEVELS,
            &seeds,
            &model,
            &scores,
            cfg,
        )?,
        "rg-vs-soft" => experiment_rg_vs_soft(&scenario, &seeds, &model, &scores, cfg)?,
        _ => experiment_fig2(&scenario, &seeds, &model, &scores, cfg)?,
    };
    let out = a.output.clone().unwrap_or_else(|| ctx.run_dir.join(name));
    let written = emit(&report, a.common.format.into(), &out)?;
    println!("wrote {} files to {}", written.len(), out.display());
    print_arms(&report);
    ctx.finish()
}
