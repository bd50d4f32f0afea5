//! The six subcommands. Input loading and validation exit 1; everything
//! after that (compute, numeric trouble, output IO) exits 2.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use rand::Rng as _;

use longflow_core::config::RunConfig;
use longflow_core::metrics::{drift_curve, flicker, FeatureEmbedder};
use longflow_core::nn::{load_model_file, save_model_file, VelocityModel};
use longflow_core::rng;
use longflow_core::rollout::{generate, GenerationPlan, SceneTrack, Strategy};
use longflow_core::schedule::{build_table, FrameRole};
use longflow_core::train::{train_stage, Stage, TrainError};
use longflow_core::world::{
    make_dataset, read_dataset, simulate, write_dataset, Dataset, Episode, WorldConfig,
};
use longflow_core::{CorrectionParams, Real, WarpConfig};

use crate::report::{self, CompareReport, EvalReport, SeedResult, StrategyReport};

/// Sub-stream index reserved for drawing fresh model parameters; training
/// steps use indices 0..total_steps of the same stream.
const INIT_STREAM_INDEX: u64 = u64::MAX;
/// Offset separating scenario simulations from gen-data's episode stream.
const SCENARIO_STREAM_BASE: u64 = 1 << 32;

const ALL_STRATEGIES: [Strategy; 3] = [
    Strategy::Recurrent,
    Strategy::DivideConquer,
    Strategy::CoarseRefine,
];

#[derive(Debug)]
pub struct CliError {
    pub exit: u8,
    pub source: anyhow::Error,
}

impl CliError {
    fn invalid(source: anyhow::Error) -> Self {
        Self { exit: 1, source }
    }

    fn runtime(source: anyhow::Error) -> Self {
        Self { exit: 2, source }
    }
}

/// Tags a result with the phase that produced its error.
trait Phase<T> {
    fn invalid(self, what: impl Into<String>) -> Result<T, CliError>;
    fn runtime(self, what: impl Into<String>) -> Result<T, CliError>;
}

impl<T, E: std::error::Error + Send + Sync + 'static> Phase<T> for Result<T, E> {
    fn invalid(self, what: impl Into<String>) -> Result<T, CliError> {
        self.map_err(|e| CliError::invalid(anyhow::Error::new(e).context(what.into())))
    }

    fn runtime(self, what: impl Into<String>) -> Result<T, CliError> {
        self.map_err(|e| CliError::runtime(anyhow::Error::new(e).context(what.into())))
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut config =
        RunConfig::load(path).invalid(format!("loading config {}", path.display()))?;
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .runtime(format!("creating output directory {}", parent.display()))?;
        }
    }
    Ok(())
}

/// Persists the fully materialized config next to an output file.
fn snapshot(config: &RunConfig, out: &Path) -> Result<PathBuf, CliError> {
    let path = out.with_extension("config.json");
    config
        .save(&path)
        .runtime(format!("writing config snapshot {}", path.display()))?;
    Ok(path)
}

fn parse_strategy(s: &str) -> Result<Strategy, CliError> {
    match s {
        "recurrent" => Ok(Strategy::Recurrent),
        "divide_conquer" => Ok(Strategy::DivideConquer),
        "coarse_refine" => Ok(Strategy::CoarseRefine),
        other => Err(CliError::invalid(anyhow!(
            "unknown strategy `{other}`; valid strategies: recurrent, divide_conquer, coarse_refine"
        ))),
    }
}

fn check_model_world(model: &VelocityModel, world: &WorldConfig) -> Result<(), CliError> {
    let mc = model.config();
    let fs = world.frame_size as usize;
    if mc.views != world.num_views as usize || mc.height != fs || mc.width != fs {
        return Err(CliError::invalid(anyhow!(
            "checkpoint geometry {}x{}x{} (views x height x width) does not match world {}x{fs}x{fs}",
            mc.views,
            mc.height,
            mc.width,
            world.num_views
        )));
    }
    Ok(())
}

fn frame_dim(world: &WorldConfig) -> usize {
    (world.num_views * world.frame_size * world.frame_size) as usize
}

pub fn gen_data(config: &Path, seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    let config = load_config(config, seed)?;
    ensure_parent(out)?;
    let data_seed: u64 = rng::stream(config.seed, rng::STREAM_DATA, 0).gen();
    let summary = make_dataset(
        &config.world,
        config.data.episodes,
        config.data.frames_per_episode,
        data_seed,
        out,
    )
    .runtime(format!("writing dataset {}", out.display()))?;
    let snap = snapshot(&config, out)?;
    println!(
        "wrote {} episodes ({} frames) to {}; config snapshot {}",
        summary.episodes,
        summary.total_frames,
        out.display(),
        snap.display()
    );
    Ok(())
}

fn stage_budget(train: &longflow_core::train::TrainConfig, stage: Stage, steps: usize) -> longflow_core::train::TrainConfig {
    let mut cfg = train.clone();
    match stage {
        Stage::MixedFps => cfg.stage1_steps = steps,
        Stage::LayoutMix => cfg.stage2_steps = steps,
        Stage::AnchorCorrection => cfg.stage3_steps = steps,
    }
    cfg
}

pub fn train(
    config: &Path,
    seed: Option<u64>,
    out: &Path,
    dataset: &Path,
    resume: Option<&Path>,
) -> Result<(), CliError> {
    let config = load_config(config, seed)?;
    let dataset = read_dataset(dataset)
        .invalid(format!("reading dataset {}", dataset.display()))?;
    let mut model = match resume {
        Some(path) => {
            let model = load_model_file(path)
                .invalid(format!("reading checkpoint {}", path.display()))?;
            if model.config() != &config.model {
                return Err(CliError::invalid(anyhow!(
                    "checkpoint architecture in {} differs from the config's model section",
                    path.display()
                )));
            }
            model
        }
        None => VelocityModel::new(
            config.model.clone(),
            &mut rng::stream(config.seed, rng::STREAM_TRAIN, INIT_STREAM_INDEX),
        )
        .invalid("initializing model")?,
    };
    let correction = config.correction.params().invalid("correction parameters")?;
    ensure_parent(out)?;

    let loss_path = out.with_extension("loss.csv");
    let fresh_log = resume.is_none() || !loss_path.exists();
    let mut loss_file = BufWriter::new(
        fs::OpenOptions::new()
            .create(true)
            .append(!fresh_log)
            .write(true)
            .truncate(fresh_log)
            .open(&loss_path)
            .runtime(format!("opening loss log {}", loss_path.display()))?,
    );
    if fresh_log {
        writeln!(loss_file, "step,stage,loss").runtime("writing loss log")?;
    }

    let mut last_good: Option<PathBuf> = resume.map(Path::to_path_buf);
    let mut consumed = model.store().step();
    for stage in Stage::ALL {
        let full = config.train.steps_for(stage) as u64;
        let done = consumed.min(full);
        consumed -= done;
        let remaining = (full - done) as usize;
        let stage_cfg = stage_budget(&config.train, stage, remaining);
        let log = train_stage(
            &mut model,
            &dataset,
            &config.plan,
            &correction,
            &stage_cfg,
            stage,
            config.seed,
        )
        .map_err(|e| {
            let retained = last_good
                .as_ref()
                .map_or("none".to_string(), |p| p.display().to_string());
            let err = anyhow::Error::new(e)
                .context(format!("{stage} failed; last good checkpoint: {retained}"));
            if matches!(
                err.downcast_ref::<TrainError>(),
                Some(TrainError::NonFinite { .. })
            ) {
                CliError::runtime(err)
            } else {
                CliError::invalid(err)
            }
        })?;
        for (step, loss) in &log {
            writeln!(loss_file, "{step},{stage},{loss}").runtime("writing loss log")?;
        }
        loss_file.flush().runtime("writing loss log")?;
        let stage_path = out.with_extension(format!("{stage}.lfck"));
        save_model_file(&stage_path, &model)
            .runtime(format!("writing checkpoint {}", stage_path.display()))?;
        last_good = Some(stage_path);
        println!(
            "{stage}: ran {remaining} steps, global step now {}",
            model.store().step()
        );
    }
    save_model_file(out, &model).runtime(format!("writing checkpoint {}", out.display()))?;
    let snap = snapshot(&config, out)?;
    println!(
        "final checkpoint {}; loss log {}; config snapshot {}",
        out.display(),
        loss_path.display(),
        snap.display()
    );
    Ok(())
}

/// Builds the ground-truth scenario a rollout conditions on: a fresh
/// simulated episode long enough to supply waypoints for every padded
/// window the plan can request.
fn scenario(
    world: &WorldConfig,
    track_len: usize,
    scenario_seed: u64,
) -> Result<(Episode, SceneTrack), CliError> {
    let truth = simulate(world, scenario_seed, track_len)
        .runtime("simulating the conditioning scenario")?;
    let track = SceneTrack::from_episode(world, &truth).runtime("building the scene track")?;
    Ok((truth, track))
}

pub fn sample(
    config: &Path,
    seed: Option<u64>,
    out: &Path,
    checkpoint: &Path,
    strategy: Option<&str>,
    horizon: Option<usize>,
) -> Result<(), CliError> {
    let mut config = load_config(config, seed)?;
    let model = load_model_file(checkpoint)
        .invalid(format!("reading checkpoint {}", checkpoint.display()))?;
    check_model_world(&model, &config.world)?;
    let mut plan = config.plan.clone();
    plan.seed = config.seed;
    if let Some(s) = strategy {
        plan.strategy = parse_strategy(s)?;
    }
    if let Some(h) = horizon {
        plan.horizon = h;
    }
    plan.validate().invalid("generation plan")?;
    if plan.n_condition + plan.s_noisy > model.config().max_frames {
        return Err(CliError::invalid(anyhow!(
            "window of {} frames exceeds the checkpoint's limit of {}",
            plan.n_condition + plan.s_noisy,
            model.config().max_frames
        )));
    }
    config.plan = plan.clone();
    let correction = config.correction.params().invalid("correction parameters")?;

    let n_init = plan.n_condition;
    let track_len = plan.required_track_len(n_init);
    let scenario_seed: u64 =
        rng::stream(config.seed, rng::STREAM_DATA, SCENARIO_STREAM_BASE).gen();
    let (truth, track) = scenario(&config.world, track_len, scenario_seed)?;
    let init = truth.frames.slice_frames(0..n_init);

    let clip = generate(&model, &init, &track, &plan, &correction)
        .runtime(format!("generating with {}", plan.strategy))?;
    for warning in &clip.warnings {
        log::warn!("{warning}");
    }

    ensure_parent(out)?;
    let total = clip.num_frames();
    let episode = Episode {
        seed: config.seed,
        states: truth.states[..total].to_vec(),
        waypoints: truth.waypoints[..total].to_vec(),
        frames: clip.frames.clone(),
    };
    write_dataset(
        &Dataset {
            config: config.world.clone(),
            episodes: vec![episode],
        },
        out,
    )
    .runtime(format!("writing clip {}", out.display()))?;
    let prov_path = out.with_extension("provenance.csv");
    let prov_file = File::create(&prov_path)
        .runtime(format!("writing provenance {}", prov_path.display()))?;
    clip.write_provenance_csv(plan.strategy, config.seed, BufWriter::new(prov_file))
        .runtime("writing provenance")?;
    let snap = snapshot(&config, out)?;
    println!(
        "wrote {total} frames ({} generated) via {} to {}; provenance {}; config snapshot {}",
        total - n_init,
        plan.strategy,
        out.display(),
        prov_path.display(),
        snap.display()
    );
    Ok(())
}

/// Drops the leading `skip` frames of every episode; episodes that end
/// inside the skip contribute nothing.
fn clip_pool(dataset: &Dataset, skip: usize) -> Vec<longflow_core::FrameGrid> {
    dataset
        .episodes
        .iter()
        .filter(|e| e.num_frames() > skip)
        .map(|e| e.frames.slice_frames(skip..e.num_frames()))
        .collect()
}

pub fn eval(
    config: &Path,
    seed: Option<u64>,
    out: &Path,
    clip: &Path,
    reference: &Path,
    window: Option<usize>,
    skip: Option<usize>,
) -> Result<(), CliError> {
    let config = load_config(config, seed)?;
    let clip_ds = read_dataset(clip).invalid(format!("reading clip {}", clip.display()))?;
    let ref_ds = read_dataset(reference)
        .invalid(format!("reading reference {}", reference.display()))?;
    if frame_dim(&clip_ds.config) != frame_dim(&ref_ds.config) {
        return Err(CliError::invalid(anyhow!(
            "clip frames ({} values) and reference frames ({} values) have different geometry",
            frame_dim(&clip_ds.config),
            frame_dim(&ref_ds.config)
        )));
    }
    let window = window.unwrap_or(config.plan.s_noisy * 2).max(1);
    let skip = skip.unwrap_or(config.plan.n_condition);

    let generated = clip_pool(&clip_ds, skip);
    let refs = clip_pool(&ref_ds, skip);
    if generated.is_empty() {
        return Err(CliError::invalid(anyhow!(
            "clip has no frames past the {skip}-frame skip"
        )));
    }
    let embedder = FeatureEmbedder::new(frame_dim(&clip_ds.config));
    let drift =
        drift_curve(&generated, &refs, window, &embedder).runtime("computing drift curve")?;
    let mut flickers = Vec::with_capacity(generated.len());
    for clip_frames in &generated {
        flickers.push(flicker(clip_frames).runtime("computing flicker")?);
    }
    let report = EvalReport {
        seed: config.seed,
        window,
        skip,
        clip_episodes: generated.len(),
        reference_episodes: refs.len(),
        flicker_median: report::median(&flickers),
        flicker: flickers,
        drift,
    };

    ensure_parent(out)?;
    let json_path = out.with_extension("json");
    let csv_path = out.with_extension("csv");
    report::write_json(&json_path, &report).runtime("writing JSON report")?;
    report::write_eval_csv(&csv_path, &report).runtime("writing CSV report")?;
    for point in &report.drift {
        match point.value {
            Some(v) => println!(
                "frechet[{}..{}] = {v:.6} ({} vs {} samples)",
                point.start_frame, point.end_frame, point.generated_samples,
                point.reference_samples
            ),
            None => println!(
                "frechet[{}..{}] = insufficient samples ({} vs {})",
                point.start_frame, point.end_frame, point.generated_samples,
                point.reference_samples
            ),
        }
    }
    if let Some(f) = report.flicker_median {
        println!("flicker median = {f:.6} over {} clips", report.clip_episodes);
    }
    println!("reports: {} {}", json_path.display(), csv_path.display());
    Ok(())
}

pub fn schedule(
    config: Option<&Path>,
    out: Option<&Path>,
    steps: Option<usize>,
    frames: Option<usize>,
    omega: Option<f64>,
    alpha1: Option<f64>,
    gmax: Option<f64>,
) -> Result<(), CliError> {
    let base = match config {
        Some(path) => load_config(path, None)?,
        None => RunConfig::default(),
    };
    let steps = steps.unwrap_or(base.plan.steps);
    let frames = frames.unwrap_or(base.plan.s_noisy);
    let omega = omega.unwrap_or(base.plan.omega);
    if frames == 0 {
        return Err(CliError::invalid(anyhow!("--frames must be at least 1")));
    }
    let warp = WarpConfig::cosine(omega, frames, steps).invalid("warp configuration")?;
    let with_anchor = alpha1.is_some() || gmax.is_some();
    let correction = if with_anchor {
        Some(
            CorrectionParams::new(
                alpha1.unwrap_or(base.correction.alpha1),
                gmax.unwrap_or(base.correction.g_max),
            )
            .invalid("correction parameters")?,
        )
    } else {
        None
    };
    let mut roles = vec![FrameRole::Interpolation; frames];
    if with_anchor {
        *roles.last_mut().expect("frames >= 1") = FrameRole::Anchor;
    }
    let table = build_table(&roles, &warp, correction.as_ref()).invalid("building the table")?;
    match out {
        Some(path) => {
            ensure_parent(path)?;
            let file =
                File::create(path).runtime(format!("writing table {}", path.display()))?;
            table
                .write_csv(BufWriter::new(file))
                .runtime("writing table")?;
            println!("wrote {} steps x {frames} frames to {}", steps, path.display());
        }
        None => {
            let stdout = std::io::stdout();
            table
                .write_csv(stdout.lock())
                .runtime("writing table to stdout")?;
        }
    }
    Ok(())
}

fn parse_seeds(spec: Option<&str>, root: u64) -> Result<Vec<u64>, CliError> {
    match spec {
        None => Ok((0..5).map(|i| root + i).collect()),
        Some(s) => {
            let seeds: Result<Vec<u64>, _> =
                s.split(',').map(|p| p.trim().parse::<u64>()).collect();
            let seeds = seeds.invalid(format!("parsing seed list `{s}`"))?;
            if seeds.is_empty() {
                return Err(CliError::invalid(anyhow!("at least one seed is required")));
            }
            Ok(seeds)
        }
    }
}

pub fn compare(
    config: &Path,
    seed: Option<u64>,
    out: &Path,
    checkpoint: &Path,
    seeds: Option<&str>,
    horizon: Option<usize>,
    clips: Option<usize>,
    window: Option<usize>,
) -> Result<(), CliError> {
    let mut config = load_config(config, seed)?;
    let model = load_model_file(checkpoint)
        .invalid(format!("reading checkpoint {}", checkpoint.display()))?;
    check_model_world(&model, &config.world)?;
    let mut plan = config.plan.clone();
    if let Some(h) = horizon {
        plan.horizon = h;
    }
    let seeds = parse_seeds(seeds, config.seed)?;
    let clips_per_seed = clips.unwrap_or(5).max(1);
    let window = window.unwrap_or_else(|| plan.horizon.div_ceil(5).max(1));
    let correction = config.correction.params().invalid("correction parameters")?;
    let n_init = plan.n_condition;

    // One simulation budget covers every strategy: anchored plans may pad
    // their coarse stage past the plain window grid.
    let mut track_len = 0;
    for strategy in ALL_STRATEGIES {
        let variant = GenerationPlan {
            strategy,
            ..plan.clone()
        };
        variant.validate().invalid(format!("plan for {strategy}"))?;
        track_len = track_len.max(variant.required_track_len(n_init));
    }
    config.plan = plan.clone();

    let embedder = FeatureEmbedder::new(frame_dim(&config.world));
    let mut strategy_reports = Vec::with_capacity(ALL_STRATEGIES.len());
    let mut per_strategy: Vec<Vec<SeedResult>> = vec![Vec::new(); ALL_STRATEGIES.len()];

    for &seed in &seeds {
        // Scenarios and rollout noise are derived once per seed so every
        // strategy sees identical conditions and identical noise.
        let mut truths = Vec::with_capacity(clips_per_seed);
        let mut plan_seeds = Vec::with_capacity(clips_per_seed);
        for j in 0..clips_per_seed {
            let scenario_seed: u64 = rng::stream(
                seed,
                rng::STREAM_DATA,
                SCENARIO_STREAM_BASE + j as u64,
            )
            .gen();
            truths.push(scenario(&config.world, track_len, scenario_seed)?);
            plan_seeds.push(rng::stream(seed, rng::STREAM_SAMPLE, j as u64).gen::<u64>());
        }
        let reference: Vec<_> = truths
            .iter()
            .map(|(truth, _)| truth.frames.slice_frames(n_init..n_init + plan.horizon))
            .collect();

        for (si, strategy) in ALL_STRATEGIES.into_iter().enumerate() {
            let mut generated = Vec::with_capacity(clips_per_seed);
            let mut flickers = Vec::with_capacity(clips_per_seed);
            for ((truth, track), &plan_seed) in truths.iter().zip(&plan_seeds) {
                let variant = GenerationPlan {
                    strategy,
                    seed: plan_seed,
                    ..plan.clone()
                };
                let init = truth.frames.slice_frames(0..n_init);
                let clip = generate(&model, &init, track, &variant, &correction)
                    .runtime(format!("generating with {strategy} for seed {seed}"))?;
                for warning in &clip.warnings {
                    log::warn!("seed {seed}, {strategy}: {warning}");
                }
                let frames = clip.generated(n_init);
                flickers.push(flicker(&frames).runtime("computing flicker")?);
                generated.push(frames);
            }
            let drift = drift_curve(&generated, &reference, window, &embedder)
                .runtime("computing drift curve")?;
            let last_bucket_frechet = drift.last().and_then(|p| p.value);
            per_strategy[si].push(SeedResult {
                seed,
                last_bucket_frechet,
                flicker_median: report::median(&flickers),
                flicker: flickers,
                drift,
            });
            log::info!(
                "seed {seed}, {strategy}: last bucket {:?}",
                last_bucket_frechet
            );
        }
    }

    for (si, strategy) in ALL_STRATEGIES.into_iter().enumerate() {
        let results = std::mem::take(&mut per_strategy[si]);
        let lasts: Vec<Real> = results
            .iter()
            .filter_map(|r| r.last_bucket_frechet)
            .collect();
        let flickers: Vec<Real> = results.iter().filter_map(|r| r.flicker_median).collect();
        strategy_reports.push(StrategyReport {
            strategy: strategy.to_string(),
            median_last_bucket_frechet: if lasts.len() == results.len() {
                report::median(&lasts)
            } else {
                None
            },
            median_flicker: report::median(&flickers),
            seeds: results,
        });
    }

    let report = CompareReport {
        seeds,
        horizon: plan.horizon,
        window,
        clips_per_seed,
        strategies: strategy_reports,
    };
    ensure_parent(out)?;
    let json_path = out.with_extension("json");
    let csv_path = out.with_extension("csv");
    report::write_json(&json_path, &report).runtime("writing JSON report")?;
    report::write_compare_csv(&csv_path, &report).runtime("writing CSV report")?;
    snapshot(&config, out)?;

    println!("{:<16} {:>24} {:>16}", "strategy", "median last-bucket frechet", "median flicker");
    for s in &report.strategies {
        let frechet = s
            .median_last_bucket_frechet
            .map_or("n/a".to_string(), |v| format!("{v:.6}"));
        let flick = s
            .median_flicker
            .map_or("n/a".to_string(), |v| format!("{v:.6}"));
        println!("{:<16} {frechet:>24} {flick:>16}", s.strategy);
    }
    println!("reports: {} {}", json_path.display(), csv_path.display());
    Ok(())
}
