//! Long-horizon rollout strategies: plain recurrent prediction, parallel
//! interpolation between frozen anchors, and coarse-then-refine with anchor
//! correction.
//!
//! Anchors live on the lattice `e + k * spacing`, `k = 1..`, where `e` is
//! the index of the last initial frame, so every refine window ends exactly
//! on its anchor. Noise is keyed per global frame index, which makes window
//! execution order irrelevant and collapses all three strategies onto the
//! identical single window when the horizon fits in one.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{euler_sample, Conditioning, FlowError, FlowState, VelocityField, ViewParams};
use crate::grid::{FrameGrid, GridError};
use crate::rng;
use crate::schedule::{FrameRole, ScheduleError};
use crate::world::{view_params, Episode, WorldConfig, WorldError};
use crate::{CorrectionParams, Real, WarpConfig};

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("plan needs at least one condition frame per window")]
    ZeroConditionFrames,
    #[error("plan needs at least one noisy frame per window")]
    ZeroNoisyFrames,
    #[error("plan needs at least one integration step")]
    ZeroSteps,
    #[error("horizon {horizon} is shorter than one window of {s} frames")]
    HorizonTooShort { horizon: usize, s: usize },
    #[error("anchor fps {anchor} must divide high fps {high}")]
    FpsNotDivisible { high: u32, anchor: u32 },
    #[error("anchor spacing {spacing} must equal the window's {s} noisy frames")]
    SpacingMismatch { spacing: usize, s: usize },
    #[error("got {got} initial frames, strategy needs {need}")]
    InitTooShort { got: usize, need: usize },
    #[error("scene track covers {got} frames, rollout needs {need}")]
    TrackTooShort { got: usize, need: usize },
    #[error("track has {track} views, frames have {frames}")]
    ViewCountMismatch { track: usize, frames: usize },
    #[error("refine window needs correction parameters when an anchor is present")]
    MissingCorrection,
    #[error("track waypoint count {got} does not match episode frames {expected}")]
    TrackLength { got: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Recurrent,
    DivideConquer,
    CoarseRefine,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Strategy::Recurrent => "recurrent",
            Strategy::DivideConquer => "divide_conquer",
            Strategy::CoarseRefine => "coarse_refine",
        };
        f.write_str(s)
    }
}

/// Everything that shapes a rollout besides the field and the scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationPlan {
    pub strategy: Strategy,
    /// Condition frames per window.
    pub n_condition: usize,
    /// Noisy frames per window.
    pub s_noisy: usize,
    pub high_fps: u32,
    pub anchor_fps: u32,
    /// Frames to generate beyond the initial ones.
    pub horizon: usize,
    /// Euler steps per window.
    pub steps: usize,
    pub cfg_scale: Real,
    /// Cosine warp sharpness for the interpolation columns.
    pub omega: Real,
    pub seed: u64,
}

impl Default for GenerationPlan {
    fn default() -> Self {
        Self {
            strategy: Strategy::CoarseRefine,
            n_condition: 4,
            s_noisy: 12,
            high_fps: 12,
            anchor_fps: 1,
            horizon: 120,
            steps: 24,
            cfg_scale: 3.0,
            omega: std::f64::consts::FRAC_PI_2,
            seed: 0,
        }
    }
}

impl GenerationPlan {
    pub fn validate(&self) -> Result<(), RolloutError> {
        if self.n_condition == 0 {
            return Err(RolloutError::ZeroConditionFrames);
        }
        if self.s_noisy == 0 {
            return Err(RolloutError::ZeroNoisyFrames);
        }
        if self.steps == 0 {
            return Err(RolloutError::ZeroSteps);
        }
        if self.horizon < self.s_noisy {
            return Err(RolloutError::HorizonTooShort {
                horizon: self.horizon,
                s: self.s_noisy,
            });
        }
        if self.anchor_fps == 0 || self.high_fps % self.anchor_fps != 0 {
            return Err(RolloutError::FpsNotDivisible {
                high: self.high_fps,
                anchor: self.anchor_fps,
            });
        }
        if self.uses_anchors() && self.anchor_spacing() != self.s_noisy {
            return Err(RolloutError::SpacingMismatch {
                spacing: self.anchor_spacing(),
                s: self.s_noisy,
            });
        }
        Ok(())
    }

    /// Frames between consecutive anchors.
    pub fn anchor_spacing(&self) -> usize {
        (self.high_fps / self.anchor_fps) as usize
    }

    /// Whether this plan actually runs a coarse anchor stage. A horizon
    /// that fits in one window degenerates to a single plain sample for
    /// every strategy.
    pub fn uses_anchors(&self) -> bool {
        self.strategy != Strategy::Recurrent && self.horizon > self.s_noisy
    }

    /// Number of anchors the coarse stage must produce.
    pub fn num_anchors(&self) -> usize {
        self.horizon.div_ceil(self.anchor_spacing())
    }

    /// Scene-track frames needed for `n_init` initial frames, including the
    /// padded final window that is generated and then truncated.
    pub fn required_track_len(&self, n_init: usize) -> usize {
        let plain = n_init + self.horizon.div_ceil(self.s_noisy) * self.s_noisy;
        if !self.uses_anchors() {
            return plain;
        }
        let padded_anchors = self.num_anchors().div_ceil(self.s_noisy) * self.s_noisy;
        n_init + padded_anchors * self.anchor_spacing()
    }
}

/// Per-frame conditioning shared by every window of one rollout: normalized
/// waypoints indexed by global frame, the camera set, and the scene id.
#[derive(Debug, Clone)]
pub struct SceneTrack {
    /// One waypoint per global frame index, normalized to `[0, 1]`.
    pub waypoints: Vec<[Real; 2]>,
    pub views: Vec<ViewParams>,
    /// Rate that normalizes fps tags.
    pub base_fps: u32,
    pub scene_id: u32,
}

impl SceneTrack {
    pub fn from_episode(config: &WorldConfig, episode: &Episode) -> Result<Self, RolloutError> {
        if episode.waypoints.len() != episode.num_frames() {
            return Err(RolloutError::TrackLength {
                got: episode.waypoints.len(),
                expected: episode.num_frames(),
            });
        }
        let views = (0..config.num_views as usize)
            .map(|v| view_params(config, v))
            .collect::<Result<Vec<_>, _>>()?;
        let waypoints = episode
            .waypoints
            .iter()
            .map(|w| [w[0] / config.arena_size, w[1] / config.arena_size])
            .collect();
        Ok(Self {
            waypoints,
            views,
            base_fps: config.base_fps,
            scene_id: episode.scene_id(),
        })
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    fn fps_tag(&self, rate: u32) -> Real {
        rate as Real / self.base_fps as Real
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Condition,
    Generated,
    AnchorCorrected,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Provenance::Condition => "condition",
            Provenance::Generated => "generated",
            Provenance::AnchorCorrected => "anchor_corrected",
        };
        f.write_str(s)
    }
}

/// Accumulated rollout output with one provenance tag per frame.
#[derive(Debug, Clone)]
pub struct ClipBuffer {
    pub frames: FrameGrid,
    pub provenance: Vec<Provenance>,
    pub warnings: Vec<String>,
}

impl ClipBuffer {
    fn with_capacity(init: &FrameGrid, horizon: usize) -> Self {
        let [n, v, h, w] = init.shape();
        let mut frames = FrameGrid::zeros(n + horizon, v, h, w);
        for i in 0..n {
            frames.copy_frame_from(i, init, i).expect("same geometry");
        }
        Self {
            frames,
            provenance: vec![Provenance::Condition; n],
            warnings: Vec::new(),
        }
    }

    fn push(&mut self, src: &FrameGrid, src_idx: usize, tag: Provenance) {
        let dst = self.provenance.len();
        self.frames
            .copy_frame_from(dst, src, src_idx)
            .expect("capacity reserved up front");
        self.provenance.push(tag);
    }

    fn is_full(&self) -> bool {
        self.provenance.len() == self.frames.num_frames()
    }

    pub fn num_frames(&self) -> usize {
        self.provenance.len()
    }

    /// The frames generated past the initial conditions.
    pub fn generated(&self, n_init: usize) -> FrameGrid {
        self.frames.slice_frames(n_init..self.num_frames())
    }

    /// Sidecar provenance listing: one row per frame.
    pub fn write_provenance_csv<W: std::io::Write>(
        &self,
        strategy: Strategy,
        seed: u64,
        mut w: W,
    ) -> std::io::Result<()> {
        writeln!(w, "frame,provenance,strategy,seed")?;
        for (i, p) in self.provenance.iter().enumerate() {
            writeln!(w, "{i},{p},{strategy},{seed}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorState {
    CleanPredicted,
    Corrupted,
    Corrected,
}

/// Low-rate frames pinned to global lattice indices.
#[derive(Debug, Clone)]
pub struct AnchorSet {
    /// One frame per anchor, in index order.
    pub frames: FrameGrid,
    pub indices: Vec<usize>,
    pub states: Vec<AnchorState>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn spacing(&self) -> Option<usize> {
        self.indices
            .windows(2)
            .map(|w| w[1] - w[0])
            .next()
    }
}

/// One window of frames handed to the sampler.
struct WindowInput<'a> {
    globals: Vec<usize>,
    roles: Vec<FrameRole>,
    fps: Vec<Real>,
    /// Content for every `Condition` slot, aligned with `globals`.
    content: Vec<Option<&'a [Real]>>,
}

fn geometry_of(init: &FrameGrid, track: &SceneTrack) -> Result<(usize, usize, usize), RolloutError> {
    let [_, v, h, w] = init.shape();
    if track.views.len() != v {
        return Err(RolloutError::ViewCountMismatch {
            track: track.views.len(),
            frames: v,
        });
    }
    Ok((v, h, w))
}

fn check_track(track: &SceneTrack, need: usize) -> Result<(), RolloutError> {
    if track.len() < need {
        return Err(RolloutError::TrackTooShort {
            got: track.len(),
            need,
        });
    }
    Ok(())
}

/// Fills noisy slots, builds the schedule, and integrates one window.
///
/// Interpolation noise is keyed by the frame's global index; anchor
/// corruption draws from its own stream keyed the same way. `content` must
/// be `Some` exactly for `Condition` and `Anchor` slots (the anchor slot
/// holds the predicted frame to corrupt).
fn run_window<F: VelocityField>(
    field: &F,
    window: &WindowInput,
    geom: (usize, usize, usize),
    track: &SceneTrack,
    plan: &GenerationPlan,
    correction: Option<&CorrectionParams>,
) -> Result<FrameGrid, RolloutError> {
    let t = window.globals.len();
    let (views, height, width) = geom;
    let mut x = FrameGrid::zeros(t, views, height, width);

    let num_noisy = window
        .roles
        .iter()
        .filter(|r| **r != FrameRole::Condition)
        .count();
    for (slot, role) in window.roles.iter().enumerate() {
        let global = window.globals[slot] as u64;
        match role {
            FrameRole::Condition => {
                let content = window.content[slot].expect("condition content supplied");
                x.frame_mut(slot).copy_from_slice(content);
            }
            FrameRole::Interpolation => {
                let mut r = rng::stream(plan.seed, rng::STREAM_SAMPLE, global);
                for p in x.frame_mut(slot) {
                    *p = r.sample(StandardNormal);
                }
            }
            FrameRole::Anchor => {
                let params = correction.ok_or(RolloutError::MissingCorrection)?;
                let predicted = window.content[slot].expect("anchor content supplied");
                let mut r = rng::stream(plan.seed, rng::STREAM_JDC, global);
                let z: Vec<Real> = predicted
                    .iter()
                    .map(|&p| {
                        let n: Real = r.sample(StandardNormal);
                        (1.0 - params.alpha1) * p + params.alpha1 * n
                    })
                    .collect();
                let corrupted =
                    crate::schedule::corrupt_frame(&z, params.alpha2, params.sigma2, &mut r);
                x.frame_mut(slot).copy_from_slice(&corrupted);
            }
        }
    }

    let warp = WarpConfig::cosine(plan.omega, num_noisy, plan.steps)?;
    let table = crate::schedule::build_table(&window.roles, &warp, correction)?;
    let timestamps = (0..t).map(|f| table.timestamp(0, f)).collect();
    let cond = Conditioning {
        waypoints: window.globals.iter().map(|&g| track.waypoints[g]).collect(),
        views: track.views.clone(),
        fps: window.fps.clone(),
        scene_id: track.scene_id,
        cond_mask: window
            .roles
            .iter()
            .map(|r| *r == FrameRole::Condition)
            .collect(),
        drop_waypoints: false,
        drop_scene: false,
    };
    let out = euler_sample(field, FlowState { frames: x, timestamps }, &table, &cond, plan.cfg_scale)?;
    Ok(out)
}

/// Plain recurrent rollout: condition on the last `N` frames, sample the
/// next `S`, repeat until the horizon is covered. The final window may
/// overshoot; extra frames are dropped.
pub fn generate_recurrent<F: VelocityField>(
    field: &F,
    init: &FrameGrid,
    track: &SceneTrack,
    plan: &GenerationPlan,
) -> Result<ClipBuffer, RolloutError> {
    plan.validate()?;
    let n_init = init.num_frames();
    if n_init < plan.n_condition {
        return Err(RolloutError::InitTooShort {
            got: n_init,
            need: plan.n_condition,
        });
    }
    let geom = geometry_of(init, track)?;
    check_track(track, n_init + plan.horizon.div_ceil(plan.s_noisy) * plan.s_noisy)?;

    let mut buffer = ClipBuffer::with_capacity(init, plan.horizon);
    let high = track.fps_tag(plan.high_fps);
    while !buffer.is_full() {
        let filled = buffer.num_frames();
        let n = plan.n_condition;
        let s = plan.s_noisy;
        let globals: Vec<usize> = (filled - n..filled + s).collect();
        let mut roles = vec![FrameRole::Condition; n];
        roles.extend(std::iter::repeat(FrameRole::Interpolation).take(s));
        let content: Vec<Option<&[Real]>> = (0..n + s)
            .map(|i| (i < n).then(|| buffer.frames.frame(filled - n + i)))
            .collect();
        let window = WindowInput {
            globals,
            roles,
            fps: vec![high; n + s],
            content,
        };
        let out = run_window(field, &window, geom, track, plan, None)?;
        for i in 0..s {
            if buffer.is_full() {
                break;
            }
            buffer.push(&out, n + i, Provenance::Generated);
        }
    }
    Ok(buffer)
}

/// Low-rate recurrent rollout producing the anchor lattice. The first
/// window conditions on the initial high-rate frames; later windows
/// condition on previous anchors. The padded final window is truncated to
/// exactly the anchors the horizon needs.
pub fn generate_coarse<F: VelocityField>(
    field: &F,
    init: &FrameGrid,
    track: &SceneTrack,
    plan: &GenerationPlan,
) -> Result<AnchorSet, RolloutError> {
    plan.validate()?;
    let n_init = init.num_frames();
    let n = plan.n_condition;
    let s = plan.s_noisy;
    if n_init < n {
        return Err(RolloutError::InitTooShort {
            got: n_init,
            need: n,
        });
    }
    let (views, height, width) = geometry_of(init, track)?;
    check_track(track, plan.required_track_len(n_init))?;

    let e = n_init - 1;
    let spacing = plan.anchor_spacing();
    let wanted = plan.num_anchors();
    let padded = wanted.div_ceil(s) * s;
    let anchor_global = |k: usize| e + k * spacing;

    let high = track.fps_tag(plan.high_fps);
    let low = track.fps_tag(plan.anchor_fps);
    let mut produced: Vec<Vec<Real>> = Vec::with_capacity(padded);
    while produced.len() < padded {
        let done = produced.len();
        let (globals, fps, content): (Vec<usize>, Vec<Real>, Vec<Option<&[Real]>>) = if done == 0 {
            // Condition on the tail of the initial high-rate frames.
            let mut g: Vec<usize> = (e + 1 - n..=e).collect();
            g.extend((1..=s).map(anchor_global));
            let mut f = vec![high; n];
            f.extend(std::iter::repeat(low).take(s));
            let c: Vec<Option<&[Real]>> = (0..n + s)
                .map(|i| (i < n).then(|| init.frame(e + 1 - n + i)))
                .collect();
            (g, f, c)
        } else {
            let mut g: Vec<usize> = (done - n + 1..=done).map(anchor_global).collect();
            g.extend((done + 1..=done + s).map(anchor_global));
            let f = vec![low; n + s];
            let c: Vec<Option<&[Real]>> = (0..n + s)
                .map(|i| (i < n).then(|| produced[done - n + i].as_slice()))
                .collect();
            (g, f, c)
        };
        let mut roles = vec![FrameRole::Condition; n];
        roles.extend(std::iter::repeat(FrameRole::Interpolation).take(s));
        let window = WindowInput {
            globals,
            roles,
            fps,
            content,
        };
        let out = run_window(field, &window, (views, height, width), track, plan, None)?;
        for i in 0..s {
            produced.push(out.frame(n + i).to_vec());
        }
    }

    let mut frames = FrameGrid::zeros(wanted, views, height, width);
    for k in 0..wanted {
        frames.frame_mut(k).copy_from_slice(&produced[k]);
    }
    Ok(AnchorSet {
        frames,
        indices: (1..=wanted).map(anchor_global).collect(),
        states: vec![AnchorState::CleanPredicted; wanted],
    })
}

/// One refine window: `cond` frames, then `S` noisy frames whose trailing
/// slot is the window's anchor.
pub struct RefineInput<'a> {
    /// Exactly `plan.n_condition` already-refined frames.
    pub cond: &'a FrameGrid,
    /// Global index of the first condition frame.
    pub start: usize,
    /// Predicted content for the trailing anchor; `None` falls back to a
    /// plain window.
    pub anchor: Option<&'a [Real]>,
}

/// Denoises one refine window. The anchor is corrupted once at full
/// intensity and then denoised along its own shallower column, jointly with
/// the pure-noise interpolation frames. Returns the `S` new frames plus
/// whether the window fell back to plain interpolation for lack of an
/// anchor.
pub fn generate_refine_window<F: VelocityField>(
    field: &F,
    input: RefineInput,
    track: &SceneTrack,
    plan: &GenerationPlan,
    correction: &CorrectionParams,
) -> Result<(FrameGrid, bool), RolloutError> {
    let n = input.cond.num_frames();
    let s = plan.s_noisy;
    if n != plan.n_condition {
        return Err(RolloutError::InitTooShort {
            got: n,
            need: plan.n_condition,
        });
    }
    let geom = geometry_of(input.cond, track)?;
    check_track(track, input.start + n + s)?;

    let globals: Vec<usize> = (input.start..input.start + n + s).collect();
    let mut roles = vec![FrameRole::Condition; n];
    roles.extend(std::iter::repeat(FrameRole::Interpolation).take(s));
    let fallback = input.anchor.is_none();
    if !fallback {
        roles[n + s - 1] = FrameRole::Anchor;
    }
    let mut content: Vec<Option<&[Real]>> =
        (0..n + s).map(|i| (i < n).then(|| input.cond.frame(i))).collect();
    if let Some(anchor) = input.anchor {
        content[n + s - 1] = Some(anchor);
    }
    let high = track.fps_tag(plan.high_fps);
    let window = WindowInput {
        globals,
        roles,
        fps: vec![high; n + s],
        content,
    };
    let params = if fallback { None } else { Some(correction) };
    let out = run_window(field, &window, geom, track, plan, params)?;
    Ok((out.slice_frames(n..n + s), fallback))
}

/// Coarse anchor pass followed by sequential refine windows, each
/// conditioned on the refined tail and ending on its corrected anchor.
pub fn generate_coarse_to_refine<F: VelocityField>(
    field: &F,
    init: &FrameGrid,
    track: &SceneTrack,
    plan: &GenerationPlan,
    correction: &CorrectionParams,
) -> Result<ClipBuffer, RolloutError> {
    plan.validate()?;
    if !plan.uses_anchors() {
        return generate_recurrent(field, init, track, plan);
    }
    let n_init = init.num_frames();
    let n = plan.n_condition;
    let s = plan.s_noisy;
    if n_init < n {
        return Err(RolloutError::InitTooShort {
            got: n_init,
            need: n,
        });
    }

    let mut anchors = generate_coarse(field, init, track, plan)?;
    let mut buffer = ClipBuffer::with_capacity(init, plan.horizon);
    for k in 0..anchors.len() {
        if buffer.is_full() {
            break;
        }
        let filled = buffer.num_frames();
        let cond = buffer.frames.slice_frames(filled - n..filled);
        let (out, fell_back) = generate_refine_window(
            field,
            RefineInput {
                cond: &cond,
                start: filled - n,
                anchor: Some(anchors.frames.frame(k)),
            },
            track,
            plan,
            correction,
        )?;
        debug_assert!(!fell_back);
        anchors.states[k] = AnchorState::Corrected;
        for i in 0..s {
            if buffer.is_full() {
                break;
            }
            let tag = if i == s - 1 {
                Provenance::AnchorCorrected
            } else {
                Provenance::Generated
            };
            buffer.push(&out, i, tag);
        }
    }
    Ok(buffer)
}

/// Coarse anchors kept frozen, gaps between them interpolated in
/// independent windows: the first conditions on the initial frames plus the
/// first anchor, later ones on the two anchors bracketing the gap.
pub fn generate_divide_conquer<F: VelocityField>(
    field: &F,
    init: &FrameGrid,
    track: &SceneTrack,
    plan: &GenerationPlan,
) -> Result<ClipBuffer, RolloutError> {
    divide_conquer_ordered(field, init, track, plan, false)
}

fn divide_conquer_ordered<F: VelocityField>(
    field: &F,
    init: &FrameGrid,
    track: &SceneTrack,
    plan: &GenerationPlan,
    reverse_windows: bool,
) -> Result<ClipBuffer, RolloutError> {
    plan.validate()?;
    if !plan.uses_anchors() {
        return generate_recurrent(field, init, track, plan);
    }
    let n_init = init.num_frames();
    let n = plan.n_condition;
    if n_init < n {
        return Err(RolloutError::InitTooShort {
            got: n_init,
            need: n,
        });
    }

    let geom = geometry_of(init, track)?;
    let anchors = generate_coarse(field, init, track, plan)?;
    let e = n_init - 1;
    let spacing = plan.anchor_spacing();
    let k_total = anchors.len();
    let high = track.fps_tag(plan.high_fps);

    // Stage every generated frame by global index, then assemble in order.
    // Window 0 spans the initial tail up to the first anchor; window w >= 1
    // fills the gap bracketed by anchors w and w + 1.
    let end = n_init + plan.horizon;
    let mut staged: Vec<Option<Vec<Real>>> = vec![None; end.max(e + k_total * spacing + 1)];

    let mut order: Vec<usize> = (0..k_total).collect();
    if reverse_windows {
        order.reverse();
    }
    for w in order {
        if w == 0 {
            // Initial tail plus the first anchor as a frozen trailing condition.
            let a1 = e + spacing;
            let globals: Vec<usize> = (e + 1 - n..=a1).collect();
            let t = globals.len();
            let mut roles = vec![FrameRole::Interpolation; t];
            for r in roles.iter_mut().take(n) {
                *r = FrameRole::Condition;
            }
            roles[t - 1] = FrameRole::Condition;
            let mut content: Vec<Option<&[Real]>> =
                (0..t).map(|i| (i < n).then(|| init.frame(e + 1 - n + i))).collect();
            content[t - 1] = Some(anchors.frames.frame(0));
            let window = WindowInput {
                globals: globals.clone(),
                roles,
                fps: vec![high; t],
                content,
            };
            let out = run_window(field, &window, geom, track, plan, None)?;
            for (slot, g) in globals.iter().enumerate().skip(n).take(t - n - 1) {
                staged[*g] = Some(out.frame(slot).to_vec());
            }
        } else {
            let left = e + w * spacing;
            let right = left + spacing;
            if left + 1 >= end {
                // Gap lies fully past the horizon.
                continue;
            }
            let globals: Vec<usize> = (left..=right).collect();
            let t = globals.len();
            let mut roles = vec![FrameRole::Interpolation; t];
            roles[0] = FrameRole::Condition;
            roles[t - 1] = FrameRole::Condition;
            let mut content: Vec<Option<&[Real]>> = vec![None; t];
            content[0] = Some(anchors.frames.frame(w - 1));
            content[t - 1] = Some(anchors.frames.frame(w));
            let window = WindowInput {
                globals,
                roles,
                fps: vec![high; t],
                content,
            };
            let out = run_window(field, &window, geom, track, plan, None)?;
            for slot in 1..t - 1 {
                staged[left + slot] = Some(out.frame(slot).to_vec());
            }
        }
    }

    let mut buffer = ClipBuffer::with_capacity(init, plan.horizon);
    let anchor_of = |g: usize| {
        (g > e && (g - e) % spacing == 0).then(|| (g - e) / spacing - 1)
    };
    for g in n_init..end {
        if let Some(k) = anchor_of(g) {
            buffer.push(&anchors.frames, k, Provenance::Generated);
        } else {
            let frame = staged[g]
                .as_ref()
                .expect("every gap frame was staged by some window");
            let mut one = FrameGrid::zeros(
                1,
                buffer.frames.num_views(),
                buffer.frames.height(),
                buffer.frames.width(),
            );
            one.frame_mut(0).copy_from_slice(frame);
            buffer.push(&one, 0, Provenance::Generated);
        }
    }
    Ok(buffer)
}

/// Runs the plan's strategy.
pub fn generate<F: VelocityField>(
    field: &F,
    init: &FrameGrid,
    track: &SceneTrack,
    plan: &GenerationPlan,
    correction: &CorrectionParams,
) -> Result<ClipBuffer, RolloutError> {
    match plan.strategy {
        Strategy::Recurrent => generate_recurrent(field, init, track, plan),
        Strategy::DivideConquer => generate_divide_conquer(field, init, track, plan),
        Strategy::CoarseRefine => generate_coarse_to_refine(field, init, track, plan, correction),
    }
}
