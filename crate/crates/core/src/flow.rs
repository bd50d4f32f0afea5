//! Rectified-flow primitives.
//!
//! States move along straight paths `x_t = (1 - t) * x0 + t * x1` between a
//! noise draw `x0` (timestamp 0) and a data frame `x1` (timestamp 1); the
//! model learns the constant path velocity `y = x1 - x0`. Sampling
//! integrates `dx/dt = v(x, t)` with explicit Euler steps whose per-frame
//! step sizes come from a [`ScheduleTable`], so differently warped frames
//! share one loop.

use thiserror::Error;

use crate::grid::{FrameGrid, GridError};
use crate::nn::LayerError;
use crate::scalar::Scalar;
use crate::schedule::{alpha2_of, sigma2_of, FrameRole, ScheduleError};
use crate::{CorrectionParams, Real, ScheduleTable, WarpConfig};

#[derive(Debug, Error)]
pub enum FlowError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("timestamp {0} outside [0, 1]")]
    BadTimestamp(Real),
    #[error("schedule column for frame {frame} is not monotone at step {step}")]
    NotMonotone { frame: usize, step: usize },
    #[error("schedule has {schedule} frames, state has {state}")]
    FrameCountMismatch { schedule: usize, state: usize },
    #[error("state timestamps disagree with schedule row 0 at frame {0}")]
    StartMismatch(usize),
    #[error("conditioning {field} has length {got}, expected {expected}")]
    ConditioningLength {
        field: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("field produced a non-finite velocity at step {0}")]
    NonFiniteVelocity(usize),
    #[error("frame grid shape {got:?} does not match model geometry {expected:?}")]
    GeometryMismatch {
        got: [usize; 4],
        expected: [usize; 3],
    },
    #[error("window of {got} frames exceeds model capacity {max}")]
    TooManyFrames { got: usize, max: usize },
    #[error("timestamp vector length {got} does not match {expected} frames")]
    TimestampLength { got: usize, expected: usize },
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("anchor mask length {got} does not match {expected} frames")]
    MaskLength { got: usize, expected: usize },
    #[error("frame {0} is both condition and anchor")]
    AnchorOnCondition(usize),
    #[error("anchor frames present but correction parameters or anchor noise missing")]
    MissingAnchorInputs,
}

/// Fixed affine camera description handed to the field as conditioning.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ViewParams {
    /// Rotation of the view in radians.
    pub angle: Real,
    /// World point the view centers on, normalized to `[0, 1]` per axis.
    pub focus: [Real; 2],
    /// Pixels per world unit.
    pub zoom: Real,
}

/// Everything the velocity field sees besides the frames themselves.
///
/// Waypoints and view focus points are normalized to `[0, 1]`; `fps` is the
/// per-frame rate normalized by the dataset base rate. `cond_mask[s]` marks
/// clean context frames (timestamp pinned at 1, excluded from losses).
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub waypoints: Vec<[Real; 2]>,
    pub views: Vec<ViewParams>,
    pub fps: Vec<Real>,
    pub scene_id: u32,
    pub cond_mask: Vec<bool>,
    pub drop_waypoints: bool,
    pub drop_scene: bool,
}

impl Conditioning {
    /// Copy with both conditioning channels dropped, as used for the
    /// unconditional guidance pass.
    pub fn dropped(&self) -> Self {
        Self {
            drop_waypoints: true,
            drop_scene: true,
            ..self.clone()
        }
    }

    pub fn num_frames(&self) -> usize {
        self.cond_mask.len()
    }

    pub fn validate(&self, frames: usize) -> Result<(), FlowError> {
        let fields: [(&'static str, usize); 3] = [
            ("waypoints", self.waypoints.len()),
            ("fps", self.fps.len()),
            ("cond_mask", self.cond_mask.len()),
        ];
        for (field, got) in fields {
            if got != frames {
                return Err(FlowError::ConditioningLength {
                    field,
                    got,
                    expected: frames,
                });
            }
        }
        Ok(())
    }
}

/// A frame window mid-flight: pixels plus each frame's current timestamp.
#[derive(Debug, Clone)]
pub struct FlowState {
    pub frames: FrameGrid,
    pub timestamps: Vec<Real>,
}

/// The velocity network interface the sampler and the loss train against.
///
/// `forward` returns the predicted velocity for every frame plus whatever
/// the implementation needs to run `backward`; oracle fields in tests use a
/// unit cache and a no-op backward.
pub trait VelocityField {
    type Cache;

    fn forward(
        &self,
        frames: &FrameGrid,
        timestamps: &[Real],
        cond: &Conditioning,
    ) -> Result<(FrameGrid, Self::Cache), FlowError>;

    /// Accumulates parameter gradients given `dLoss/dVelocity`.
    fn backward(&mut self, cache: Self::Cache, upstream: &FrameGrid) -> Result<(), FlowError>;

    /// Forward pass without keeping the cache.
    fn eval(
        &self,
        frames: &FrameGrid,
        timestamps: &[Real],
        cond: &Conditioning,
    ) -> Result<FrameGrid, FlowError> {
        Ok(self.forward(frames, timestamps, cond)?.0)
    }
}

/// Straight-path interpolation of two scalars.
pub fn lerp<S: Scalar>(x0: S, x1: S, t: S) -> S {
    (S::one() - t) * x0 + t * x1
}

/// Straight-path interpolation of two grids at a shared timestamp.
pub fn interpolate(x0: &FrameGrid, x1: &FrameGrid, t: Real) -> Result<FrameGrid, FlowError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(FlowError::BadTimestamp(t));
    }
    if x0.shape() != x1.shape() {
        return Err(GridError::ShapeMismatch {
            a: x0.shape(),
            b: x1.shape(),
        }
        .into());
    }
    let mut out = x0.clone();
    for (o, (&a, &b)) in out
        .as_mut_slice()
        .iter_mut()
        .zip(x0.as_slice().iter().zip(x1.as_slice()))
    {
        *o = lerp(a, b, t);
    }
    Ok(out)
}

/// Classifier-free guidance combination:
/// `v = v_uncond + scale * (v_cond - v_uncond)`.
///
/// `scale == 1` returns the conditional field exactly and `scale == 0` the
/// unconditional one (no arithmetic applied in either case).
pub fn cfg_combine(
    v_cond: &FrameGrid,
    v_uncond: &FrameGrid,
    scale: Real,
) -> Result<FrameGrid, FlowError> {
    if v_cond.shape() != v_uncond.shape() {
        return Err(GridError::ShapeMismatch {
            a: v_cond.shape(),
            b: v_uncond.shape(),
        }
        .into());
    }
    if scale == 1.0 {
        return Ok(v_cond.clone());
    }
    if scale == 0.0 {
        return Ok(v_uncond.clone());
    }
    let mut out = v_uncond.clone();
    for (o, &c) in out.as_mut_slice().iter_mut().zip(v_cond.as_slice()) {
        *o += scale * (c - *o);
    }
    Ok(out)
}

/// Integrates a window from its start timestamps to 1 along the schedule.
///
/// Per step the field is evaluated once at the current row (twice when
/// `cfg_scale != 1`, for guidance), and every frame advances by its own
/// column difference. Condition frames have zero column differences and are
/// never written, so they pass through bit-identical.
pub fn euler_sample<F: VelocityField>(
    field: &F,
    state: FlowState,
    table: &ScheduleTable,
    cond: &Conditioning,
    cfg_scale: Real,
) -> Result<FrameGrid, FlowError> {
    let frames = state.frames.num_frames();
    if table.num_frames() != frames {
        return Err(FlowError::FrameCountMismatch {
            schedule: table.num_frames(),
            state: frames,
        });
    }
    cond.validate(frames)?;
    for f in 0..frames {
        if (state.timestamps[f] - table.timestamp(0, f)).abs() > 1e-12 {
            return Err(FlowError::StartMismatch(f));
        }
        for i in 0..table.num_steps() {
            if table.timestamp(i + 1, f) < table.timestamp(i, f) {
                return Err(FlowError::NotMonotone { frame: f, step: i });
            }
        }
    }

    let uncond = if cfg_scale != 1.0 {
        Some(cond.dropped())
    } else {
        None
    };
    let mut x = state.frames;
    for i in 0..table.num_steps() {
        let row = table.row(i);
        let v = match &uncond {
            None => field.eval(&x, row, cond)?,
            Some(dropped) => {
                let v_c = field.eval(&x, row, cond)?;
                let v_u = field.eval(&x, row, dropped)?;
                cfg_combine(&v_c, &v_u, cfg_scale)?
            }
        };
        if !v.is_finite() {
            return Err(FlowError::NonFiniteVelocity(i));
        }
        let next = table.row(i + 1);
        for f in 0..frames {
            let delta = next[f] - row[f];
            if delta != 0.0 {
                let xf = x.frame_mut(f);
                for (o, &vf) in xf.iter_mut().zip(v.frame(f)) {
                    *o += vf * delta;
                }
            }
        }
    }
    Ok(x)
}

/// Inputs for one training window.
pub struct LossInputs<'a> {
    /// One standard-normal draw per frame slot, `x0` on the flow path. For
    /// anchor frames this draw doubles as the fresh corruption noise.
    pub noise: &'a FrameGrid,
    /// Clean data frames, `x1` on the flow path.
    pub target: &'a FrameGrid,
    /// Shared window time in `[0, 1]`; per-frame timestamps derive from it.
    pub t: Real,
    /// True for frames trained through the anchor-correction path.
    pub anchor_mask: &'a [bool],
    /// Residual noise draws consumed by anchor frames (same shape as
    /// `target`); required iff any anchor is masked.
    pub anchor_noise: Option<&'a FrameGrid>,
}

/// Flow-matching loss over one window, with gradients.
///
/// Every non-condition frame contributes a squared velocity error at its own
/// timestamp: interpolation frames at the warped time `warp(t, rank)`, and
/// anchor frames at `1 - g(t)` after simulating the two-stage corruption of
/// a predicted frame holding residual noise `alpha1`. The anchor's
/// regression target uses the *combined* corruption noise, which the
/// variance algebra keeps standard, so both branches are plain rectified
/// flow at their respective timestamps. When `g(t) <= alpha1` the anchor
/// degrades to an ordinary frame at timestamp `1 - g(t)` (no corruption).
///
/// Returns the mean squared error over noisy frames and pixels after
/// accumulating parameter gradients through `field.backward`.
pub fn flow_matching_loss<F: VelocityField>(
    field: &mut F,
    inputs: &LossInputs,
    warp: &WarpConfig,
    correction: Option<&CorrectionParams>,
    cond: &Conditioning,
) -> Result<Real, FlowError> {
    let frames = inputs.target.num_frames();
    cond.validate(frames)?;
    if inputs.noise.shape() != inputs.target.shape() {
        return Err(GridError::ShapeMismatch {
            a: inputs.noise.shape(),
            b: inputs.target.shape(),
        }
        .into());
    }
    if inputs.anchor_mask.len() != frames {
        return Err(FlowError::MaskLength {
            got: inputs.anchor_mask.len(),
            expected: frames,
        });
    }
    if !(0.0..=1.0).contains(&inputs.t) {
        return Err(FlowError::BadTimestamp(inputs.t));
    }
    let any_anchor = inputs
        .anchor_mask
        .iter()
        .zip(&cond.cond_mask)
        .any(|(a, c)| *a && !*c);
    if any_anchor && (correction.is_none() || inputs.anchor_noise.is_none()) {
        return Err(FlowError::MissingAnchorInputs);
    }

    let mut x_in = inputs.target.clone();
    let mut timestamps = vec![1.0; frames];
    let mut target_v = FrameGrid::zeros(
        frames,
        inputs.target.num_views(),
        inputs.target.height(),
        inputs.target.width(),
    );
    let mut rank = 0usize;
    let mut num_noisy = 0usize;
    for f in 0..frames {
        if cond.cond_mask[f] {
            if inputs.anchor_mask[f] {
                return Err(FlowError::AnchorOnCondition(f));
            }
            continue;
        }
        num_noisy += 1;
        let x0 = inputs.noise.frame(f);
        let x1 = inputs.target.frame(f);
        let (tau, effective_noise): (Real, Vec<Real>) = if inputs.anchor_mask[f] {
            let params = correction.expect("checked above");
            let g = params.noise_level(inputs.t);
            match alpha2_of(g, params.alpha1) {
                Err(ScheduleError::NoCorruption { .. }) => (1.0 - g, x0.to_vec()),
                Err(e) => return Err(e.into()),
                Ok(alpha2) => {
                    let sigma = sigma2_of(params.alpha1, alpha2)?.sqrt();
                    let n1 = inputs.anchor_noise.expect("checked above").frame(f);
                    // Combined noise of the two-stage corruption, scaled back
                    // to unit variance by g.
                    let noise: Vec<Real> = x0
                        .iter()
                        .zip(n1)
                        .map(|(&n2, &r)| {
                            (alpha2 * sigma * n2 + params.alpha1 * (1.0 - alpha2) * r) / g
                        })
                        .collect();
                    (1.0 - g, noise)
                }
            }
        } else {
            (warp.timestamp(inputs.t, rank)?, x0.to_vec())
        };
        rank += 1;
        timestamps[f] = tau;
        let xf = x_in.frame_mut(f);
        for i in 0..xf.len() {
            xf[i] = lerp(effective_noise[i], x1[i], tau);
        }
        let tf = target_v.frame_mut(f);
        for i in 0..tf.len() {
            tf[i] = x1[i] - effective_noise[i];
        }
    }
    if rank != warp.num_noisy() {
        return Err(ScheduleError::RoleCountMismatch {
            got: rank,
            expected: warp.num_noisy(),
        }
        .into());
    }

    let (v, cache) = field.forward(&x_in, &timestamps, cond)?;
    let denom = (num_noisy * inputs.target.frame_len()) as Real;
    let mut upstream = FrameGrid::zeros(
        frames,
        inputs.target.num_views(),
        inputs.target.height(),
        inputs.target.width(),
    );
    let mut loss = 0.0;
    for f in 0..frames {
        if cond.cond_mask[f] {
            continue;
        }
        let vf = v.frame(f);
        let yf = target_v.frame(f);
        let uf = upstream.frame_mut(f);
        for i in 0..vf.len() {
            let diff = vf[i] - yf[i];
            loss += diff * diff;
            uf[i] = 2.0 * diff / denom;
        }
    }
    loss /= denom;
    if !loss.is_finite() {
        return Err(FlowError::NonFiniteLoss);
    }
    field.backward(cache, &upstream)?;
    Ok(loss)
}

/// Derives window roles from a condition mask and anchor mask, in the layout
/// used by `build_table`.
pub fn roles_from_masks(cond_mask: &[bool], anchor_mask: &[bool]) -> Vec<FrameRole> {
    cond_mask
        .iter()
        .zip(anchor_mask)
        .map(|(c, a)| match (c, a) {
            (true, _) => FrameRole::Condition,
            (false, true) => FrameRole::Anchor,
            (false, false) => FrameRole::Interpolation,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::build_table;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Field returning a fixed grid regardless of state.
    struct ConstantField(FrameGrid);

    impl VelocityField for ConstantField {
        type Cache = ();

        fn forward(
            &self,
            _frames: &FrameGrid,
            _timestamps: &[Real],
            _cond: &Conditioning,
        ) -> Result<(FrameGrid, ()), FlowError> {
            Ok((self.0.clone(), ()))
        }

        fn backward(&mut self, _cache: (), _upstream: &FrameGrid) -> Result<(), FlowError> {
            Ok(())
        }
    }

    /// Field computing a per-frame function of the timestamp.
    struct TimeField<Fn_: Fn(Real) -> Real>(Fn_);

    impl<Fn_: Fn(Real) -> Real> VelocityField for TimeField<Fn_> {
        type Cache = ();

        fn forward(
            &self,
            frames: &FrameGrid,
            timestamps: &[Real],
            _cond: &Conditioning,
        ) -> Result<(FrameGrid, ()), FlowError> {
            let mut out = frames.clone();
            for f in 0..frames.num_frames() {
                let value = (self.0)(timestamps[f]);
                out.frame_mut(f).fill(value);
            }
            Ok((out, ()))
        }

        fn backward(&mut self, _cache: (), _upstream: &FrameGrid) -> Result<(), FlowError> {
            Ok(())
        }
    }

    fn plain_cond(frames: usize, num_cond: usize) -> Conditioning {
        Conditioning {
            waypoints: vec![[0.5, 0.5]; frames],
            views: vec![ViewParams {
                angle: 0.0,
                focus: [0.5, 0.5],
                zoom: 2.0,
            }],
            fps: vec![1.0; frames],
            scene_id: 0,
            cond_mask: (0..frames).map(|f| f < num_cond).collect(),
            drop_waypoints: false,
            drop_scene: false,
        }
    }

    fn random_grid<R: Rng>(frames: usize, pixels: usize, rng: &mut R) -> FrameGrid {
        let mut g = FrameGrid::zeros(frames, 1, 1, pixels);
        for v in g.as_mut_slice() {
            *v = rng.gen_range(-1.0..1.0);
        }
        g
    }

    #[test]
    fn lerp_matches_hand_values_and_endpoints() {
        assert_eq!(lerp(4.0, 8.0, 0.25), 5.0);
        assert_eq!(lerp(4.0f32, 8.0, 0.25), 5.0);
        let x0 = -3.25;
        let x1 = 7.5;
        assert_eq!(lerp(x0, x1, 0.0), x0);
        assert_eq!(lerp(x0, x1, 1.0), x1);
    }

    #[test]
    fn interpolate_checks_shapes_and_range() {
        let a = FrameGrid::zeros(1, 1, 2, 2);
        let b = FrameGrid::zeros(1, 1, 2, 3);
        assert!(interpolate(&a, &b, 0.5).is_err());
        assert!(interpolate(&a, &a, 1.5).is_err());
        assert!(interpolate(&a, &a, -0.1).is_err());
    }

    #[test]
    fn cfg_combine_trivial_scales_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = random_grid(2, 4, &mut rng);
        let u = random_grid(2, 4, &mut rng);
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
    }

    #[test]
    fn cfg_combine_extrapolates() {
        let c = FrameGrid::from_vec(1, 1, 1, 1, vec![4.0]).unwrap();
        let u = FrameGrid::from_vec(1, 1, 1, 1, vec![2.0]).unwrap();
        let out = cfg_combine(&c, &u, 3.0).unwrap();
        assert_eq!(out.as_slice(), &[8.0]);
    }

    #[test]
    fn constant_field_recovers_target_for_any_step_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for steps in [1usize, 7, 50] {
            let x0 = random_grid(3, 8, &mut rng);
            let x1 = random_grid(3, 8, &mut rng);
            let mut v = x1.clone();
            v.add_scaled(&x0, -1.0).unwrap();
            let field = ConstantField(v);
            let warp = crate::schedule::WarpConfig::linear(3, steps).unwrap();
            let roles = vec![FrameRole::Interpolation; 3];
            let table = build_table(&roles, &warp, None).unwrap();
            let cond = plain_cond(3, 0);
            let out = euler_sample(
                &field,
                FlowState {
                    frames: x0.clone(),
                    timestamps: vec![0.0; 3],
                },
                &table,
                &cond,
                1.0,
            )
            .unwrap();
            for (o, w) in out.as_slice().iter().zip(x1.as_slice()) {
                assert!(
                    (o - w).abs() <= 1e-12,
                    "steps={steps}: {o} vs {w}"
                );
            }
        }
    }

    /// `v(x, t) = 2 t` integrates to exactly 1; Euler at 1000 steps lands
    /// within its first-order error bound.
    #[test]
    fn time_quadratic_field_matches_integral() {
        let field = TimeField(|t| 2.0 * t);
        let warp = crate::schedule::WarpConfig::linear(2, 1000).unwrap();
        let table = build_table(&[FrameRole::Interpolation; 2], &warp, None).unwrap();
        let cond = plain_cond(2, 0);
        let x0 = FrameGrid::zeros(2, 1, 1, 4);
        let out = euler_sample(
            &field,
            FlowState {
                frames: x0,
                timestamps: vec![0.0; 2],
            },
            &table,
            &cond,
            1.0,
        )
        .unwrap();
        for v in out.as_slice() {
            assert!((v - 1.0).abs() < 2e-3, "integrated value {v}");
        }
    }

    #[test]
    fn condition_frames_pass_through_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let start = random_grid(4, 6, &mut rng);
        let v = random_grid(4, 6, &mut rng);
        let field = ConstantField(v);
        let warp = crate::schedule::WarpConfig::cosine(
            std::f64::consts::FRAC_PI_2,
            2,
            13,
        )
        .unwrap();
        let roles = vec![
            FrameRole::Condition,
            FrameRole::Condition,
            FrameRole::Interpolation,
            FrameRole::Interpolation,
        ];
        let table = build_table(&roles, &warp, None).unwrap();
        let cond = plain_cond(4, 2);
        let out = euler_sample(
            &field,
            FlowState {
                frames: start.clone(),
                timestamps: vec![1.0, 1.0, 0.0, 0.0],
            },
            &table,
            &cond,
            2.5,
        )
        .unwrap();
        assert_eq!(out.frame(0), start.frame(0));
        assert_eq!(out.frame(1), start.frame(1));
        assert_ne!(out.frame(2), start.frame(2));
    }

    #[test]
    fn sampler_rejects_mismatched_start_timestamps() {
        let field = ConstantField(FrameGrid::zeros(1, 1, 1, 2));
        let warp = crate::schedule::WarpConfig::linear(1, 4).unwrap();
        let table = build_table(&[FrameRole::Interpolation], &warp, None).unwrap();
        let cond = plain_cond(1, 0);
        let err = euler_sample(
            &field,
            FlowState {
                frames: FrameGrid::zeros(1, 1, 1, 2),
                timestamps: vec![0.5],
            },
            &table,
            &cond,
            1.0,
        );
        assert!(matches!(err, Err(FlowError::StartMismatch(0))));
    }

    #[test]
    fn sampler_rejects_non_finite_velocities() {
        let field = ConstantField(FrameGrid::from_vec(1, 1, 1, 1, vec![Real::NAN]).unwrap());
        let warp = crate::schedule::WarpConfig::linear(1, 2).unwrap();
        let table = build_table(&[FrameRole::Interpolation], &warp, None).unwrap();
        let cond = plain_cond(1, 0);
        let err = euler_sample(
            &field,
            FlowState {
                frames: FrameGrid::zeros(1, 1, 1, 1),
                timestamps: vec![0.0],
            },
            &table,
            &cond,
            1.0,
        );
        assert!(matches!(err, Err(FlowError::NonFiniteVelocity(0))));
    }

    /// A field that always outputs the true path velocity drives the loss
    /// to zero for any mask-free window.
    #[test]
    fn perfect_oracle_field_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = random_grid(3, 5, &mut rng);
        let x1 = random_grid(3, 5, &mut rng);
        let mut v = x1.clone();
        v.add_scaled(&x0, -1.0).unwrap();
        let mut field = ConstantField(v);
        let warp = crate::schedule::WarpConfig::linear(3, 8).unwrap();
        let cond = plain_cond(3, 0);
        let loss = flow_matching_loss(
            &mut field,
            &LossInputs {
                noise: &x0,
                target: &x1,
                t: 0.37,
                anchor_mask: &[false; 3],
                anchor_noise: None,
            },
            &warp,
            None,
            &cond,
        )
        .unwrap();
        assert!(loss.abs() < 1e-24, "loss {loss}");
    }

    #[test]
    fn zero_field_loss_is_mean_squared_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x0 = random_grid(2, 4, &mut rng);
        let x1 = random_grid(2, 4, &mut rng);
        let mut field = ConstantField(FrameGrid::zeros(2, 1, 1, 4));
        let warp = crate::schedule::WarpConfig::linear(2, 8).unwrap();
        let cond = plain_cond(2, 0);
        let loss = flow_matching_loss(
            &mut field,
            &LossInputs {
                noise: &x0,
                target: &x1,
                t: 0.5,
                anchor_mask: &[false; 2],
                anchor_noise: None,
            },
            &warp,
            None,
            &cond,
        )
        .unwrap();
        let mut want = 0.0;
        for (a, b) in x1.as_slice().iter().zip(x0.as_slice()) {
            let y = a - b;
            want += y * y;
        }
        want /= 8.0;
        assert!((loss - want).abs() < 1e-12);
    }

    /// With every frame an anchor and `alpha1 = 0`, the corruption path is
    /// plain interpolation at timestamp `1 - g(t)`; the loss must agree with
    /// the unmasked loss evaluated there.
    #[test]
    fn all_anchor_zero_alpha1_equals_unmasked_at_shifted_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = random_grid(3, 6, &mut rng);
        let x1 = random_grid(3, 6, &mut rng);
        let n1 = random_grid(3, 6, &mut rng);
        let v = random_grid(3, 6, &mut rng);
        let params = crate::CorrectionParams::new(0.0, 0.55).unwrap();
        let t = 0.3;
        let cond = plain_cond(3, 0);
        let warp = crate::schedule::WarpConfig::linear(3, 8).unwrap();

        let mut field = ConstantField(v.clone());
        let masked = flow_matching_loss(
            &mut field,
            &LossInputs {
                noise: &x0,
                target: &x1,
                t,
                anchor_mask: &[true; 3],
                anchor_noise: Some(&n1),
            },
            &warp,
            Some(&params),
            &cond,
        )
        .unwrap();

        let shifted_t = 1.0 - params.noise_level(t);
        let unmasked = flow_matching_loss(
            &mut field,
            &LossInputs {
                noise: &x0,
                target: &x1,
                t: shifted_t,
                anchor_mask: &[false; 3],
                anchor_noise: None,
            },
            &warp,
            None,
            &cond,
        )
        .unwrap();
        assert!(
            (masked - unmasked).abs() < 1e-9,
            "masked {masked} vs unmasked {unmasked}"
        );
    }

    #[test]
    fn loss_validates_inputs() {
        let x = FrameGrid::zeros(2, 1, 1, 2);
        let warp = crate::schedule::WarpConfig::linear(2, 4).unwrap();
        let cond = plain_cond(2, 0);
        let mut field = ConstantField(FrameGrid::zeros(2, 1, 1, 2));
        // Anchor without correction parameters.
        let err = flow_matching_loss(
            &mut field,
            &LossInputs {
                noise: &x,
                target: &x,
                t: 0.5,
                anchor_mask: &[true, false],
                anchor_noise: None,
            },
            &warp,
            None,
            &cond,
        );
        assert!(matches!(err, Err(FlowError::MissingAnchorInputs)));
        // Bad mask length.
        let err = flow_matching_loss(
            &mut field,
            &LossInputs {
                noise: &x,
                target: &x,
                t: 0.5,
                anchor_mask: &[false; 3],
                anchor_noise: None,
            },
            &warp,
            None,
            &cond,
        );
        assert!(matches!(err, Err(FlowError::MaskLength { .. })));
        // Bad time.
        let err = flow_matching_loss(
            &mut field,
            &LossInputs {
                noise: &x,
                target: &x,
                t: 1.5,
                anchor_mask: &[false; 2],
                anchor_noise: None,
            },
            &warp,
            None,
            &cond,
        );
        assert!(matches!(err, Err(FlowError::BadTimestamp(_))));
    }

    #[test]
    fn roles_from_masks_maps_all_three_roles() {
        let roles = roles_from_masks(&[true, false, false], &[false, false, true]);
        assert_eq!(
            roles,
            vec![
                FrameRole::Condition,
                FrameRole::Interpolation,
                FrameRole::Anchor
            ]
        );
    }
}
