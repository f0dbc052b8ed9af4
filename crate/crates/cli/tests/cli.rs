use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

fn koopnav(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_koopnav"))
        .env_remove("KOOPNAV_OUT")
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("spawn koopnav")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> Output {
    assert_eq!(
        code(&o),
        0,
        "stdout:\n{}\nstderr:\n{}",
        stdout(&o),
        stderr(&o)
    );
    o
}

/// Collected, fitted and calibrated run directory shared by the tests
/// that need upstream artifacts.
fn prepared() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        ok(koopnav(
            &dir,
            &["collect", "--episodes", "60", "--steps", "50"],
        ));
        let fit = ok(koopnav(&dir, &["fit", "--dict", "default11"]));
        assert!(stdout(&fit).contains("lifted dimension 11"));
        ok(koopnav(
            &dir,
            &["calibrate", "--scenarios", "8", "--steps", "40"],
        ));
        dir
    })
}

/// `(flag line, full entry text)` for every option in a `-h` listing.
fn option_entries(help: &str) -> Vec<(String, String)> {
    let mut entries: Vec<(String, String)> = Vec::new();
    let mut in_options = false;
    for line in help.lines() {
        if line.starts_with("Options:") {
            in_options = true;
            continue;
        }
        if !in_options {
            continue;
        }
        let t = line.trim_start();
        if t.starts_with('-') && line.len() - t.len() <= 6 {
            entries.push((
                t.split_whitespace().next().unwrap().to_string(),
                line.into(),
            ));
        } else if let Some(last) = entries.last_mut() {
            last.1.push(' ');
            last.1.push_str(t);
        }
    }
    entries
}

#[test]
fn help_lists_every_flag_with_its_default() {
    let dir = tempfile::tempdir().unwrap();
    let commands: [&[&str]; 9] = [
        &[],
        &["collect"],
        &["fit"],
        &["calibrate"],
        &["run"],
        &["experiment"],
        &["experiment", "confidence-sweep"],
        &["experiment", "rg-vs-soft"],
        &["experiment", "fig2"],
    ];
    for cmd in commands {
        let mut args = cmd.to_vec();
        args.push("-h");
        let o = ok(koopnav(dir.path(), &args));
        let entries = option_entries(&stdout(&o));
        assert!(entries.len() >= 5, "{cmd:?}: {entries:?}");
        for (flag, text) in entries {
            if flag == "-h," || flag == "-V," {
                continue;
            }
            assert!(text.contains("[default: "), "{cmd:?} {flag}: `{text}`");
        }
    }
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&koopnav(d, &[])), 2);
    assert_eq!(code(&koopnav(d, &["collect", "-o"])), 2);
    assert_eq!(code(&koopnav(d, &["collect", "--episodes", "many"])), 2);
    assert_eq!(code(&koopnav(d, &["bogus"])), 2);
    assert_eq!(code(&koopnav(d, &["experiment"])), 2);
    assert_eq!(
        code(&koopnav(d, &["run", "--alpha", "0.1", "--no-tightening"])),
        2
    );
    let o = koopnav(d, &["run", "--scenario", "nowhere"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("fig2, fig3, fig4, free"));
    let o = koopnav(d, &["fit", "--dict", "poly7"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("poly7"));
    let o = koopnav(d, &["calibrate", "--alpha", "1.5"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_upstream_artifacts_exit_3_and_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cases: [(&[&str], &str); 6] = [
        (&["fit"], "transitions.csv"),
        (&["calibrate"], "model.json"),
        (&["run", "--scenario", "free"], "model.json"),
        (&["experiment", "fig2"], "model.json"),
        (&["--config", "absent.json", "collect"], "absent.json"),
        (
            &["run", "--scenario", "dir/absent.scenario.json"],
            "absent.scenario.json",
        ),
    ];
    for (args, file) in cases {
        let o = koopnav(d, args);
        assert_eq!(code(&o), 3, "{args:?}: {}", stderr(&o));
        assert!(stderr(&o).contains(file), "{args:?}: {}", stderr(&o));
    }
    let p = prepared();
    let o = koopnav(
        p,
        &[
            "run",
            "--run",
            "empty",
            "--model",
            p.join("default/model.json").to_str().unwrap(),
        ],
    );
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("calibration.json"));
}

#[test]
fn infinite_quantile_is_a_runtime_failure() {
    let p = prepared();
    let model = p.join("default/model.json");
    let o = koopnav(
        p,
        &[
            "calibrate",
            "--run",
            "tiny",
            "--model",
            model.to_str().unwrap(),
            "--scenarios",
            "1",
            "--steps",
            "5",
        ],
    );
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("collect more calibration pairs or raise alpha"));
    assert!(!p.join("tiny/calibration.json").exists());
}

#[test]
fn collect_counts_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data.csv");
    ok(koopnav(
        d,
        &[
            "collect",
            "--episodes",
            "100",
            "--steps",
            "50",
            "--seed",
            "7",
            "-o",
            data.to_str().unwrap(),
        ],
    ));
    let text = std::fs::read_to_string(&data).unwrap();
    assert_eq!(text.lines().count(), 5001);
    assert_eq!(
        text.lines().next().unwrap(),
        "x,y,theta,v,omega,next_x,next_y,next_theta"
    );

    let empty = d.join("empty.csv");
    ok(koopnav(
        d,
        &["collect", "--episodes", "0", "-o", empty.to_str().unwrap()],
    ));
    assert_eq!(std::fs::read_to_string(&empty).unwrap().lines().count(), 1);
}

#[test]
fn output_root_comes_from_the_environment() {
    let env_root = tempfile::tempdir().unwrap();
    let flag_root = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_koopnav");
    let run = |extra: &[&str]| {
        let o = Command::new(bin)
            .env("KOOPNAV_OUT", env_root.path())
            .args(extra)
            .args(["collect", "--episodes", "2", "--steps", "3"])
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    };
    run(&[]);
    assert!(env_root.path().join("default/transitions.csv").is_file());
    run(&["--out", flag_root.path().to_str().unwrap(), "--run", "r1"]);
    assert!(flag_root.path().join("r1/transitions.csv").is_file());
    assert!(!env_root.path().join("r1").exists());
}

#[test]
fn settings_layer_and_persist() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let extra = d.join("extra.json");
    std::fs::write(&extra, r#"{"train": {"episodes": 3, "steps": 4}}"#).unwrap();
    ok(koopnav(
        d,
        &[
            "--config",
            extra.to_str().unwrap(),
            "collect",
            "--steps",
            "5",
        ],
    ));
    let cfg: Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("default/config.json")).unwrap())
            .unwrap();
    assert_eq!(cfg["train"]["episodes"], 3);
    assert_eq!(cfg["train"]["steps"], 5);
    assert_eq!(cfg["calib"]["scenarios"], 24);
    ok(koopnav(d, &["collect"]));
    let rows = std::fs::read_to_string(d.join("default/transitions.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 15);
}

#[test]
fn run_writes_artifacts_and_is_reproducible() {
    let p = prepared();
    let run_dir = p.join("default");
    let cal: Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("calibration.json")).unwrap())
            .unwrap();
    assert_eq!(cal["alpha"], 0.02);
    assert_eq!(cal["n"], 320);
    let delta = cal["delta"].as_f64().unwrap();
    assert!(delta >= 0.01);

    let outputs: Vec<Vec<u8>> = ["a", "b"]
        .iter()
        .map(|sub| {
            let out = p.join(sub);
            ok(koopnav(
                p,
                &[
                    "run",
                    "--scenario",
                    "free",
                    "--seed",
                    "4",
                    "--log-solve-time",
                    "false",
                    "-o",
                    out.to_str().unwrap(),
                ],
            ));
            let mut bytes = std::fs::read(out.join("trajectory_free_4.csv")).unwrap();
            bytes.extend(std::fs::read(out.join("report.json")).unwrap());
            bytes
        })
        .collect();
    assert_eq!(outputs[0], outputs[1]);

    let o = ok(koopnav(p, &["run", "--scenario", "free", "--seed", "4"]));
    assert!(stdout(&o).contains("completed true"));
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["schema"], "koopnav-report/1");
    assert_eq!(report["runs"][0]["meta"]["delta"].as_f64().unwrap(), delta);
    let csv = std::fs::read_to_string(run_dir.join("trajectory_free_4.csv")).unwrap();
    assert!(csv.starts_with("# schema=koopnav-trajectory/1 scenario=free"));

    ok(koopnav(
        p,
        &[
            "run",
            "--scenario",
            "free",
            "--seed",
            "4",
            "--no-tightening",
            "-o",
            p.join("c").to_str().unwrap(),
        ],
    ));
    let csv = std::fs::read_to_string(p.join("c/trajectory_free_4.csv")).unwrap();
    assert!(csv.contains("alpha=none delta=0 "));
}

#[test]
fn confidence_sweep_end_to_end() {
    let p = prepared();
    let out = p.join("sweep");
    let o = ok(koopnav(
        p,
        &[
            "experiment",
            "confidence-sweep",
            "--scenario",
            "fig3.scenario",
            "--seeds",
            "1",
            "-o",
            out.to_str().unwrap(),
        ],
    ));
    assert_eq!(stdout(&o).matches("arm ").count(), 4);
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["schema"], "koopnav-report/1");
    assert_eq!(report["experiment"], "confidence-sweep");
    let arms: Vec<&str> = report["arms"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| a["arm"].as_str().unwrap())
        .collect();
    assert_eq!(arms, ["98", "50", "10", "none"]);
    let runs = report["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 4);
    for run in runs {
        let file = out.join(run["file"].as_str().unwrap());
        let text = std::fs::read_to_string(&file).unwrap();
        assert!(
            text.starts_with("# schema=koopnav-trajectory/1 scenario=fig3"),
            "{file:?}"
        );
        assert_eq!(
            text.lines().count(),
            2 + run["metrics"]["steps"].as_u64().unwrap() as usize
        );
    }
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 4);
}

#[test]
fn rg_vs_soft_json_format() {
    let p = prepared();
    let out = p.join("rgsoft");
    ok(koopnav(
        p,
        &[
            "experiment",
            "rg-vs-soft",
            "--seeds",
            "1",
            "--seed-base",
            "2",
            "--format",
            "json",
            "-o",
            out.to_str().unwrap(),
        ],
    ));
    assert!(out.join("trajectory_fig4-rg_2.json").is_file());
    assert!(out.join("trajectory_fig4-soft_2.json").is_file());
}

#[test]
fn per_step_margins_persist_into_later_runs() {
    let p = prepared();
    let model = p.join("default").join("model.json");
    let model = model.to_str().unwrap();
    let base = ["--run", "perstep"];
    let o = ok(koopnav(
        p,
        &[
            &base[..],
            &[
                "calibrate",
                "--model",
                model,
                "--scenarios",
                "8",
                "--steps",
                "40",
                "--alpha",
                "0.1",
                "--per-step",
                "true",
            ],
        ]
        .concat(),
    ));
    let line = stdout(&o)
        .lines()
        .find(|l| l.starts_with("per-step delta ["))
        .expect("per-step margins printed")
        .to_string();
    let margins: Vec<f64> = line
        .trim_start_matches("per-step delta [")
        .trim_end_matches(']')
        .split(", ")
        .map(|d| d.parse().unwrap())
        .collect();
    assert_eq!(margins.len(), 10);
    let run_dir = p.join("perstep");
    let horizon = run_dir.join("calibration_horizon_pairs.csv");
    assert!(horizon.exists());

    // per_step was persisted, so a plain run picks it up
    let cfg: Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("config.json")).unwrap())
            .unwrap();
    assert_eq!(cfg["calib"]["per_step"], true);
    let run = [
        &base[..],
        &[
            "run",
            "--scenario",
            "free",
            "--alpha",
            "0.1",
            "--model",
            model,
        ],
    ]
    .concat();
    ok(koopnav(p, &run));
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("report.json")).unwrap())
            .unwrap();
    let first = report["runs"][0]["meta"]["delta"].as_f64().unwrap();
    assert!((first - margins[0]).abs() < 1e-4, "{first} vs {margins:?}");

    std::fs::remove_file(&horizon).unwrap();
    let o = koopnav(p, &run);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("calibration_horizon_pairs.csv"));
}
