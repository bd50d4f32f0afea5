//! Three-stage training curriculum.
//!
//! Stage one teaches plain next-window prediction at mixed frame rates.
//! Stage two mixes every window layout the rollout strategies later need:
//! high-rate prefixes, high-rate conditions with low-rate targets, all-low
//! windows, and the two interpolation shapes with frozen end conditions.
//! Stage three keeps that mix and additionally trains the anchor-correction
//! path by turning the tail of prefix windows into a corrupted anchor.
//!
//! Every optimization step draws its own rng stream keyed by the global
//! step counter, so training resumed from a checkpoint consumes exactly the
//! randomness it would have consumed uninterrupted.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{flow_matching_loss, Conditioning, FlowError, LossInputs};
use crate::grid::{FrameGrid, GridError};
use crate::nn::{AdamConfig, ModelError, ParamError, VelocityModel};
use crate::rng;
use crate::rollout::GenerationPlan;
use crate::schedule::{FrameRole, ScheduleError};
use crate::world::{view_params, Dataset, WorldError};

use crate::{CorrectionParams, Real, WarpConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("dataset has no episodes")]
    EmptyDataset,
    #[error("episode {episode} has {got} frames, the widest window needs {need}")]
    EpisodeTooShort {
        episode: usize,
        got: usize,
        need: usize,
    },
    #[error("model expects {model:?} (views, height, width), dataset provides {data:?}")]
    GeometryMismatch {
        model: [usize; 3],
        data: [usize; 3],
    },
    #[error("window of {got} frames exceeds the model's limit of {max}")]
    WindowTooLong { got: usize, max: usize },
    #[error("loss became non-finite at global step {step}")]
    NonFinite { step: u64 },
    #[error("{what} must lie in [0, 1], got {value}")]
    BadRate { what: &'static str, value: f64 },
    #[error("batch_windows must be at least 1")]
    ZeroBatch,
    #[error("log_every must be at least 1")]
    ZeroLogEvery,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub stage3_steps: usize,
    /// Windows accumulated into one optimizer step.
    pub batch_windows: usize,
    pub learning_rate: Real,
    pub warmup_steps: u64,
    /// Independent probability of dropping waypoints and of dropping the
    /// scene id, per window.
    pub drop_rate: Real,
    /// Probability that a stage-three prefix window trains the corrupted
    /// tail anchor.
    pub anchor_rate: Real,
    /// Log the batch loss every this many steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_steps: 300,
            stage2_steps: 3000,
            stage3_steps: 1200,
            batch_windows: 2,
            learning_rate: 1e-3,
            warmup_steps: 100,
            drop_rate: 0.15,
            anchor_rate: 0.75,
            log_every: 25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_windows == 0 {
            return Err(TrainError::ZeroBatch);
        }
        if self.log_every == 0 {
            return Err(TrainError::ZeroLogEvery);
        }
        for (what, value) in [("drop_rate", self.drop_rate), ("anchor_rate", self.anchor_rate)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(TrainError::BadRate { what, value });
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            warmup_steps: self.warmup_steps,
            ..AdamConfig::default()
        }
    }

    pub fn steps_for(&self, stage: Stage) -> usize {
        match stage {
            Stage::MixedFps => self.stage1_steps,
            Stage::LayoutMix => self.stage2_steps,
            Stage::AnchorCorrection => self.stage3_steps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    MixedFps,
    LayoutMix,
    AnchorCorrection,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::MixedFps, Stage::LayoutMix, Stage::AnchorCorrection];
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::MixedFps => "stage1",
            Stage::LayoutMix => "stage2",
            Stage::AnchorCorrection => "stage3",
        };
        f.write_str(s)
    }
}

/// Window shapes the curriculum draws from. The interpolation shapes mirror
/// the divide-and-conquer sampler exactly: a run of conditions with a
/// frozen trailing condition, and a pair of conditions bracketing the gap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Layout {
    /// Conditions then targets, one rate throughout.
    Prefix { rate: u32 },
    /// High-rate conditions, low-rate targets.
    CoarseFirst,
    /// High-rate window whose last frame is also a condition.
    SealedTail,
    /// Two conditions bracketing the frames between them.
    Bracket,
}

/// Stage-two layout weights, in units of 1/1000.
const LAYOUT_WEIGHTS: [(u32, LayoutKind); 5] = [
    (450, LayoutKind::PrefixHigh),
    (200, LayoutKind::CoarseFirst),
    (100, LayoutKind::AllLow),
    (125, LayoutKind::SealedTail),
    (125, LayoutKind::Bracket),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LayoutKind {
    PrefixHigh,
    CoarseFirst,
    AllLow,
    SealedTail,
    Bracket,
}

fn stage1_rates(plan: &GenerationPlan, base: u32) -> Vec<u32> {
    let mut rates = vec![plan.anchor_fps, plan.anchor_fps * 2, plan.high_fps];
    rates.retain(|r| *r >= 1 && *r <= base && base % *r == 0);
    rates.dedup();
    if rates.is_empty() {
        rates.push(base);
    }
    rates
}

/// Draws the window layout plus whether the tail trains as an anchor.
fn draw_layout<R: Rng>(
    stage: Stage,
    plan: &GenerationPlan,
    base: u32,
    anchor_rate: Real,
    rng: &mut R,
) -> (Layout, bool) {
    match stage {
        Stage::MixedFps => {
            let rates = stage1_rates(plan, base);
            let rate = rates[rng.gen_range(0..rates.len())];
            (Layout::Prefix { rate }, false)
        }
        Stage::LayoutMix | Stage::AnchorCorrection => {
            let roll = rng.gen_range(0..1000u32);
            let mut acc = 0;
            let mut kind = LayoutKind::PrefixHigh;
            for (weight, k) in LAYOUT_WEIGHTS {
                acc += weight;
                if roll < acc {
                    kind = k;
                    break;
                }
            }
            let layout = match kind {
                LayoutKind::PrefixHigh => Layout::Prefix {
                    rate: plan.high_fps,
                },
                LayoutKind::AllLow => Layout::Prefix {
                    rate: plan.anchor_fps,
                },
                LayoutKind::CoarseFirst => Layout::CoarseFirst,
                LayoutKind::SealedTail => Layout::SealedTail,
                LayoutKind::Bracket => Layout::Bracket,
            };
            let jdc = stage == Stage::AnchorCorrection
                && matches!(layout, Layout::Prefix { rate } if rate == plan.high_fps)
                && rng.gen_range(0.0..1.0) < anchor_rate;
            (layout, jdc)
        }
    }
}

/// Source frame indices, roles and fps tags of one drawn window.
struct WindowShape {
    offsets: Vec<usize>,
    roles: Vec<FrameRole>,
    fps: Vec<Real>,
}

fn shape_window(
    layout: Layout,
    jdc_tail: bool,
    plan: &GenerationPlan,
    base: u32,
) -> WindowShape {
    let n = plan.n_condition;
    let s = plan.s_noisy;
    let tag = |rate: u32| rate as Real / base as Real;
    let stride = |rate: u32| (base / rate) as usize;
    match layout {
        Layout::Prefix { rate } => {
            let st = stride(rate);
            let offsets = (0..n + s).map(|i| i * st).collect();
            let mut roles = vec![FrameRole::Condition; n];
            roles.extend(std::iter::repeat(FrameRole::Interpolation).take(s));
            if jdc_tail {
                roles[n + s - 1] = FrameRole::Anchor;
            }
            WindowShape {
                offsets,
                roles,
                fps: vec![tag(rate); n + s],
            }
        }
        Layout::CoarseFirst => {
            let hi = stride(plan.high_fps);
            let lo = stride(plan.anchor_fps);
            let e = (n - 1) * hi;
            let mut offsets: Vec<usize> = (0..n).map(|i| i * hi).collect();
            offsets.extend((1..=s).map(|k| e + k * lo));
            let mut roles = vec![FrameRole::Condition; n];
            roles.extend(std::iter::repeat(FrameRole::Interpolation).take(s));
            let mut fps = vec![tag(plan.high_fps); n];
            fps.extend(std::iter::repeat(tag(plan.anchor_fps)).take(s));
            WindowShape { offsets, roles, fps }
        }
        Layout::SealedTail => {
            let st = stride(plan.high_fps);
            let t = n + s;
            let offsets = (0..t).map(|i| i * st).collect();
            let mut roles = vec![FrameRole::Condition; n];
            roles.extend(std::iter::repeat(FrameRole::Interpolation).take(s - 1));
            roles.push(FrameRole::Condition);
            WindowShape {
                offsets,
                roles,
                fps: vec![tag(plan.high_fps); t],
            }
        }
        Layout::Bracket => {
            let st = stride(plan.high_fps);
            let t = s + 1;
            let offsets = (0..t).map(|i| i * st).collect();
            let mut roles = vec![FrameRole::Condition];
            roles.extend(std::iter::repeat(FrameRole::Interpolation).take(s - 1));
            roles.push(FrameRole::Condition);
            WindowShape {
                offsets,
                roles,
                fps: vec![tag(plan.high_fps); t],
            }
        }
    }
}

/// Longest source span any layout can draw, in dataset frames.
fn widest_span(plan: &GenerationPlan, base: u32) -> usize {
    let lo = (base / plan.anchor_fps.max(1)).max(1) as usize;
    let hi = (base / plan.high_fps.max(1)).max(1) as usize;
    let prefix_low = (plan.n_condition + plan.s_noisy - 1) * lo;
    let coarse_first = (plan.n_condition - 1) * hi + plan.s_noisy * lo;
    prefix_low.max(coarse_first)
}

fn check_inputs(
    model: &VelocityModel,
    dataset: &Dataset,
    plan: &GenerationPlan,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    cfg.validate()?;
    if dataset.episodes.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mc = model.config();
    let model_geom = [mc.views, mc.height, mc.width];
    let fs = dataset.config.frame_size as usize;
    let data_geom = [dataset.config.num_views as usize, fs, fs];
    if model_geom != data_geom {
        return Err(TrainError::GeometryMismatch {
            model: model_geom,
            data: data_geom,
        });
    }
    let window = plan.n_condition + plan.s_noisy;
    if window > mc.max_frames {
        return Err(TrainError::WindowTooLong {
            got: window,
            max: mc.max_frames,
        });
    }
    let need = widest_span(plan, dataset.config.base_fps) + 1;
    for (i, episode) in dataset.episodes.iter().enumerate() {
        if episode.num_frames() < need {
            return Err(TrainError::EpisodeTooShort {
                episode: i,
                got: episode.num_frames(),
                need,
            });
        }
    }
    Ok(())
}

/// Runs one curriculum stage. Returns `(global_step, batch_loss)` samples
/// taken every `log_every` steps plus always the final step.
///
/// The model's own optimizer step counter is the global step, so resuming
/// from a checkpoint continues the identical trajectory.
pub fn train_stage(
    model: &mut VelocityModel,
    dataset: &Dataset,
    plan: &GenerationPlan,
    correction: &CorrectionParams,
    cfg: &TrainConfig,
    stage: Stage,
    seed: u64,
) -> Result<Vec<(u64, Real)>, TrainError> {
    check_inputs(model, dataset, plan, cfg)?;
    let steps = cfg.steps_for(stage);
    let base = dataset.config.base_fps;
    let arena = dataset.config.arena_size;
    let views: Vec<_> = (0..dataset.config.num_views as usize)
        .map(|v| view_params(&dataset.config, v))
        .collect::<Result<_, _>>()?;
    let adam = cfg.adam();
    let mut log = Vec::new();

    for local in 0..steps {
        let global = model.store().step();
        let mut rng = rng::stream(seed, rng::STREAM_TRAIN, global);
        model.store_mut().zero_grads();
        let mut batch_loss = 0.0;

        for _ in 0..cfg.batch_windows {
            let (layout, jdc_tail) = draw_layout(stage, plan, base, cfg.anchor_rate, &mut rng);
            let shape = shape_window(layout, jdc_tail, plan, base);
            let t_frames = shape.offsets.len();
            let span = *shape.offsets.last().expect("non-empty window");

            let episode = &dataset.episodes[rng.gen_range(0..dataset.episodes.len())];
            let max_start = episode.num_frames() - 1 - span;
            let start = rng.gen_range(0..=max_start);

            let drop_waypoints = rng.gen_range(0.0..1.0) < cfg.drop_rate;
            let drop_scene = rng.gen_range(0.0..1.0) < cfg.drop_rate;
            let t = rng.gen_range(0.0..1.0);

            let [_, v, h, w] = episode.frames.shape();
            let mut target = FrameGrid::zeros(t_frames, v, h, w);
            let mut waypoints = Vec::with_capacity(t_frames);
            for (slot, off) in shape.offsets.iter().enumerate() {
                let src = start + off;
                target.copy_frame_from(slot, &episode.frames, src)?;
                let wp = episode.waypoints[src];
                waypoints.push([wp[0] / arena, wp[1] / arena]);
            }
            let mut noise = FrameGrid::zeros(t_frames, v, h, w);
            for p in noise.as_mut_slice() {
                *p = rng.sample(StandardNormal);
            }
            let anchor_mask: Vec<bool> =
                shape.roles.iter().map(|r| *r == FrameRole::Anchor).collect();
            let any_anchor = anchor_mask.iter().any(|a| *a);
            let anchor_noise = if any_anchor {
                let mut grid = FrameGrid::zeros(t_frames, v, h, w);
                for p in grid.as_mut_slice() {
                    *p = rng.sample(StandardNormal);
                }
                Some(grid)
            } else {
                None
            };

            let cond = Conditioning {
                waypoints,
                views: views.clone(),
                fps: shape.fps.clone(),
                scene_id: episode.scene_id(),
                cond_mask: shape
                    .roles
                    .iter()
                    .map(|r| *r == FrameRole::Condition)
                    .collect(),
                drop_waypoints,
                drop_scene,
            };
            let num_noisy = anchor_mask
                .iter()
                .zip(&cond.cond_mask)
                .filter(|(_, c)| !**c)
                .count();
            let warp = WarpConfig::cosine(plan.omega, num_noisy, 1)?;
            let inputs = LossInputs {
                noise: &noise,
                target: &target,
                t,
                anchor_mask: &anchor_mask,
                anchor_noise: anchor_noise.as_ref(),
            };
            let params = any_anchor.then_some(correction);
            let loss = match flow_matching_loss(model, &inputs, &warp, params, &cond) {
                Ok(l) => l,
                Err(FlowError::NonFiniteLoss) | Err(FlowError::NonFiniteVelocity(_)) => {
                    return Err(TrainError::NonFinite { step: global });
                }
                Err(e) => return Err(e.into()),
            };
            batch_loss += loss;
        }

        batch_loss /= cfg.batch_windows as Real;
        if !batch_loss.is_finite() {
            return Err(TrainError::NonFinite { step: global });
        }
        // Window losses summed their gradients; average them.
        let scale = 1.0 / cfg.batch_windows as Real;
        let ids: Vec<_> = model.store().ids().collect();
        for id in ids {
            for g in model.store_mut().grad_mut(id).as_mut_slice() {
                *g *= scale;
            }
        }
        model.store_mut().adam_step(&adam)?;

        if local % cfg.log_every == 0 || local + 1 == steps {
            log.push((global, batch_loss));
        }
    }
    Ok(log)
}
