//! Scripted multi-seed experiments. Runs are independent and execute in
//! parallel; results come back in (arm, seed) order.

use rayon::prelude::*;

use super::report::ExperimentReport;
use super::{
    config_hash, run_closed_loop_with, Confidence, Margin, PipelineConfig, ReferenceMode, Scenario,
    ScoreBank,
};
use crate::error::Result;
use crate::koopman::KoopmanModel;
use crate::sim_env::{ScenarioMeta, TrajectoryLog};

/// 98%, 50%, 10% and the untightened baseline.
pub const CONFIDENCE_LEVELS: [Confidence; 4] = [
    Confidence::Alpha(0.02),
    Confidence::Alpha(0.5),
    Confidence::Alpha(0.9),
    Confidence::NoTightening,
];

/// One arm: scenario variant, margin and label.
struct Arm {
    label: String,
    scenario: Scenario,
    alpha: Option<f64>,
    margin: Margin,
}

fn margin_for(
    confidence: Confidence,
    scenario: &Scenario,
    scores: &ScoreBank,
    cfg: &PipelineConfig,
) -> Result<Margin> {
    scores.margin(
        confidence,
        cfg.calib.per_step,
        scenario.horizon,
        cfg.calib.lipschitz,
        cfg.calib.epsilon,
    )
}

fn run_arms(
    experiment: &str,
    base: &Scenario,
    arms: Vec<Arm>,
    seeds: &[u64],
    model: &KoopmanModel<f64>,
    cfg: &PipelineConfig,
) -> Result<ExperimentReport> {
    let hash = config_hash(&(experiment, base, cfg, seeds));
    let jobs: Vec<(&Arm, u64)> = arms
        .iter()
        .flat_map(|a| seeds.iter().map(move |s| (a, *s)))
        .collect();
    let logs = jobs
        .par_iter()
        .map(|(arm, seed)| {
            let meta = ScenarioMeta {
                scenario: base.name.clone(),
                arm: arm.label.clone(),
                alpha: arm.alpha,
                delta: arm.margin.first(),
                seed: *seed,
                config_hash: hash.clone(),
            };
            run_closed_loop_with(
                &arm.scenario.realize(*seed),
                model,
                &arm.margin,
                &cfg.controller,
                meta,
            )
        })
        .collect::<Result<Vec<TrajectoryLog>>>()?;
    Ok(ExperimentReport::new(
        experiment,
        base.clone(),
        cfg.clone(),
        hash,
        logs,
    ))
}

/// Same scenario and seeds at each confidence level.
pub fn experiment_confidence_sweep(
    base: &Scenario,
    levels: &[Confidence],
    seeds: &[u64],
    model: &KoopmanModel<f64>,
    scores: &ScoreBank,
    cfg: &PipelineConfig,
) -> Result<ExperimentReport> {
    let arms = levels
        .iter()
        .map(|c| {
            let mut scenario = base.clone();
            scenario.confidence = *c;
            Ok(Arm {
                label: c.label(),
                scenario,
                alpha: c.alpha(),
                margin: margin_for(*c, base, scores, cfg)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    run_arms("confidence-sweep", base, arms, seeds, model, cfg)
}

/// Arm `rg`: full stack. Arm `soft`: constant goal reference, soft
/// constraints only. Both use the scenario's confidence level.
pub fn experiment_rg_vs_soft(
    base: &Scenario,
    seeds: &[u64],
    model: &KoopmanModel<f64>,
    scores: &ScoreBank,
    cfg: &PipelineConfig,
) -> Result<ExperimentReport> {
    let margin = margin_for(base.confidence, base, scores, cfg)?;
    let arms = [
        ("rg", ReferenceMode::Governor),
        ("soft", ReferenceMode::Goal),
    ]
    .into_iter()
    .map(|(label, mode)| {
        let mut scenario = base.clone();
        scenario.reference = mode;
        Arm {
            label: label.into(),
            scenario,
            alpha: base.confidence.alpha(),
            margin: margin.clone(),
        }
    })
    .collect();
    run_arms("rg-vs-soft", base, arms, seeds, model, cfg)
}

/// The scenario as configured, once per seed.
pub fn experiment_fig2(
    base: &Scenario,
    seeds: &[u64],
    model: &KoopmanModel<f64>,
    scores: &ScoreBank,
    cfg: &PipelineConfig,
) -> Result<ExperimentReport> {
    let arm = Arm {
        label: String::new(),
        scenario: base.clone(),
        alpha: base.confidence.alpha(),
        margin: margin_for(base.confidence, base, scores, cfg)?,
    };
    run_arms("fig2", base, vec![arm], seeds, model, cfg)
}
