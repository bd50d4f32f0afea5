//! Behavior of the command-line surface: exit codes, error wording, sidecar
//! files, and determinism. Everything drives the compiled binary; a shared
//! fixture trains one tiny checkpoint that read-only tests reuse.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use sha2::{Digest, Sha256};
use tempfile::TempDir;

use longflow_core::config::{CorrectionConfig, DataConfig, RunConfig};
use longflow_core::nn::ModelConfig;
use longflow_core::rollout::{GenerationPlan, Strategy};
use longflow_core::train::TrainConfig;
use longflow_core::world::{simulate, write_dataset, Dataset, WorldConfig};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_longflow"))
        .args(args)
        .output()
        .expect("spawn cli")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn assert_code(out: &Output, code: i32, what: &str) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "{what}: expected exit {code}\nstdout: {}\nstderr: {}",
        stdout_of(out),
        stderr_of(out)
    );
}

fn sha256_file(path: &Path) -> String {
    let bytes = std::fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()));
    format!("{:x}", Sha256::digest(&bytes))
}

fn tiny_config() -> RunConfig {
    RunConfig {
        seed: 5,
        world: WorldConfig {
            num_views: 1,
            frame_size: 8,
            ..WorldConfig::default()
        },
        model: ModelConfig {
            views: 1,
            height: 8,
            width: 8,
            hidden: 16,
            max_frames: 8,
            ..ModelConfig::default()
        },
        data: DataConfig {
            episodes: 3,
            frames_per_episode: 32,
        },
        train: TrainConfig {
            stage1_steps: 2,
            stage2_steps: 2,
            stage3_steps: 2,
            batch_windows: 1,
            warmup_steps: 1,
            log_every: 1,
            ..TrainConfig::default()
        },
        plan: GenerationPlan {
            strategy: Strategy::CoarseRefine,
            n_condition: 2,
            s_noisy: 4,
            high_fps: 12,
            anchor_fps: 3,
            horizon: 8,
            steps: 4,
            cfg_scale: 1.0,
            ..GenerationPlan::default()
        },
        correction: CorrectionConfig::default(),
        ..RunConfig::default()
    }
}

/// One tiny end-to-end workspace shared by the read-only tests: a saved
/// config, a dataset, a trained checkpoint, and a sampled clip.
struct Fixture {
    _dir: TempDir,
    config: PathBuf,
    data: PathBuf,
    model: PathBuf,
    clip: PathBuf,
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("run.json");
        tiny_config().save(&config).unwrap();
        let data = dir.path().join("data.lfds");
        let model = dir.path().join("model.lfck");
        let clip = dir.path().join("clip.lfds");
        for args in [
            vec!["gen-data", "--config", cstr(&config), "--out", cstr(&data)],
            vec![
                "train",
                "--config",
                cstr(&config),
                "--dataset",
                cstr(&data),
                "--out",
                cstr(&model),
            ],
            vec![
                "sample",
                "--config",
                cstr(&config),
                "--checkpoint",
                cstr(&model),
                "--out",
                cstr(&clip),
            ],
        ] {
            let out = run(&args);
            assert_code(&out, 0, "fixture step");
        }
        Fixture {
            _dir: dir,
            config,
            data,
            model,
            clip,
        }
    })
}

/// Path as &str for arg lists; fixture paths are valid UTF-8 by construction.
fn cstr(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    for args in [&["--help"][..], &["--version"][..], &["sample", "--help"][..]] {
        let out = run(args);
        assert_code(&out, 0, "help/version");
    }
    assert!(stdout_of(&run(&["--help"])).contains("Usage"));
}

#[test]
fn missing_required_flags_exit_one() {
    let out = run(&["gen-data"]);
    assert_code(&out, 1, "bare gen-data");
    assert!(stderr_of(&out).contains("--config"));
}

#[test]
fn unknown_config_keys_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"seed": 1, "warp_speed": 9}"#).unwrap();
    let out = run(&[
        "gen-data",
        "--config",
        cstr(&path),
        "--out",
        cstr(&dir.path().join("data.lfds")),
    ]);
    assert_code(&out, 1, "unknown key");
    let err = stderr_of(&out);
    assert!(err.contains("warp_speed"), "stderr: {err}");
}

#[test]
fn gen_data_creates_directories_and_snapshots_the_full_config() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("nested/deep/data.lfds");
    let out = run(&[
        "gen-data",
        "--config",
        cstr(&f.config),
        "--out",
        cstr(&out_path),
    ]);
    assert_code(&out, 0, "gen-data into missing directory");
    assert!(out_path.exists());

    // The sidecar snapshot materializes every section with defaults filled.
    let snapshot = out_path.with_extension("config.json");
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&snapshot).unwrap()).unwrap();
    for key in [
        "version",
        "seed",
        "world",
        "model",
        "data",
        "train",
        "plan",
        "correction",
    ] {
        assert!(doc.get(key).is_some(), "snapshot lacks {key}");
    }
    assert_eq!(doc["plan"]["cfg_scale"].as_f64(), Some(1.0));
    assert_eq!(doc["correction"]["alpha1"].as_f64(), Some(0.1));
    assert_eq!(doc["train"]["drop_rate"].as_f64(), Some(0.15));

    // Same config, same bytes.
    assert_eq!(sha256_file(&out_path), sha256_file(&f.data));
}

#[test]
fn unknown_strategies_are_rejected_with_the_valid_list() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "sample",
        "--config",
        cstr(&f.config),
        "--checkpoint",
        cstr(&f.model),
        "--strategy",
        "warp",
        "--out",
        cstr(&dir.path().join("clip.lfds")),
    ]);
    assert_code(&out, 1, "unknown strategy");
    let err = stderr_of(&out);
    for name in ["recurrent", "divide_conquer", "coarse_refine"] {
        assert!(err.contains(name), "stderr lacks {name}: {err}");
    }
}

#[test]
fn missing_inputs_exit_one() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "train",
        "--config",
        cstr(&f.config),
        "--dataset",
        cstr(&dir.path().join("nope.lfds")),
        "--out",
        cstr(&dir.path().join("model.lfck")),
    ]);
    assert_code(&out, 1, "missing dataset");
    assert!(stderr_of(&out).contains("reading dataset"));
}

#[test]
fn non_finite_training_data_exits_two() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config();
    let mut dataset = Dataset {
        config: config.world.clone(),
        episodes: (0..2)
            .map(|i| simulate(&config.world, 70 + i, 32).unwrap())
            .collect(),
    };
    for episode in &mut dataset.episodes {
        episode.frames.as_mut_slice().fill(f64::NAN);
    }
    let data = dir.path().join("nan.lfds");
    write_dataset(&dataset, &data).unwrap();

    let out = run(&[
        "train",
        "--config",
        cstr(&f.config),
        "--dataset",
        cstr(&data),
        "--out",
        cstr(&dir.path().join("model.lfck")),
    ]);
    assert_code(&out, 2, "NaN dataset");
    let err = stderr_of(&out);
    assert!(err.contains("non-finite"), "stderr: {err}");
    assert!(err.contains("last good checkpoint"), "stderr: {err}");
}

#[test]
fn schedule_prints_the_table_to_stdout() {
    let out = run(&["schedule", "--steps", "6", "--frames", "3"]);
    assert_code(&out, 0, "schedule to stdout");
    let text = stdout_of(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 8, "header plus steps + 1 rows:\n{text}");
    assert_eq!(lines[0], "step,interp_0,interp_1,interp_2");
    assert_eq!(lines[1], "0,0,0,0");
    assert_eq!(lines[7], "6,1,1,1");
}

#[test]
fn schedule_appends_an_anchor_column_with_correction_flags() {
    let out = run(&[
        "schedule",
        "--steps",
        "4",
        "--frames",
        "3",
        "--alpha1",
        "0.1",
        "--gmax",
        "0.55",
    ]);
    assert_code(&out, 0, "schedule with anchor");
    let text = stdout_of(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,interp_0,interp_1,anchor_2");
    // The anchor column starts at 1 - g_max and ends clean.
    let first: f64 = lines[1].split(',').nth(3).unwrap().parse().unwrap();
    assert!((first - 0.45).abs() < 1e-12, "anchor start {first}");
    let last: f64 = lines[5].split(',').nth(3).unwrap().parse().unwrap();
    assert_eq!(last, 1.0);
}

#[test]
fn eval_scores_a_clip_against_a_dataset() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("eval.json");
    let out = run(&[
        "eval",
        "--config",
        cstr(&f.config),
        "--clip",
        cstr(&f.clip),
        "--reference",
        cstr(&f.data),
        "--out",
        cstr(&report),
    ]);
    assert_code(&out, 0, "eval");
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(doc["flicker_median"].as_f64().is_some());
    assert!(doc["drift"].as_array().is_some_and(|d| !d.is_empty()));

    let csv = std::fs::read_to_string(report.with_extension("csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert_eq!(
        header,
        "metric,start,end,value,generated_samples,reference_samples,seed"
    );
    assert!(csv.lines().any(|l| l.starts_with("flicker_median,")));
}

#[test]
fn resumed_training_matches_a_straight_run() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();

    // First hop: only the first stage step, everything else zero.
    let mut partial = tiny_config();
    partial.train.stage1_steps = 1;
    partial.train.stage2_steps = 0;
    partial.train.stage3_steps = 0;
    let partial_path = dir.path().join("partial.json");
    partial.save(&partial_path).unwrap();
    let hop = dir.path().join("hop.lfck");
    let out = run(&[
        "train",
        "--config",
        cstr(&partial_path),
        "--dataset",
        cstr(&f.data),
        "--out",
        cstr(&hop),
    ]);
    assert_code(&out, 0, "partial train");

    // Second hop: resume under the full budget.
    let resumed = dir.path().join("resumed.lfck");
    let out = run(&[
        "train",
        "--config",
        cstr(&f.config),
        "--dataset",
        cstr(&f.data),
        "--resume",
        cstr(&hop),
        "--out",
        cstr(&resumed),
    ]);
    assert_code(&out, 0, "resumed train");

    assert_eq!(
        sha256_file(&resumed),
        sha256_file(&f.model),
        "resume diverged from the straight-through run"
    );
}

#[test]
fn windows_beyond_the_checkpoint_limit_are_rejected() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    // Recurrent plan at stride 1 so the config itself validates; only the
    // checkpoint's max_frames is too small for the 16-frame window.
    let mut config = tiny_config();
    config.plan.strategy = Strategy::Recurrent;
    config.plan.n_condition = 4;
    config.plan.s_noisy = 12;
    config.plan.anchor_fps = 12;
    config.plan.horizon = 12;
    let path = dir.path().join("wide.json");
    config.save(&path).unwrap();
    let out = run(&[
        "sample",
        "--config",
        cstr(&path),
        "--checkpoint",
        cstr(&f.model),
        "--out",
        cstr(&dir.path().join("clip.lfds")),
    ]);
    assert_code(&out, 1, "window beyond max_frames");
    assert!(stderr_of(&out).contains("exceeds the checkpoint's limit"));
}

#[test]
fn malformed_seed_lists_are_rejected() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "compare",
        "--config",
        cstr(&f.config),
        "--checkpoint",
        cstr(&f.model),
        "--seeds",
        "a,b",
        "--out",
        cstr(&dir.path().join("report.json")),
    ]);
    assert_code(&out, 1, "bad seed list");
    assert!(stderr_of(&out).contains("parsing seed list"));
}
