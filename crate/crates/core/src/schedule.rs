//! Denoising timetables.
//!
//! A generation window holds three kinds of frames: clean *condition* frames,
//! *interpolation* frames denoised from pure noise, and *anchor* frames that
//! arrive as earlier predictions and are re-noised once, then jointly
//! denoised. This module computes the per-frame timestamp column each role
//! follows across the sampling steps:
//!
//! * Interpolation frames follow a cosine warp of the shared step grid. Each
//!   frame gets a phase from its rank inside the window; earlier frames warp
//!   toward the denoised end faster, and every column still starts at 0 and
//!   ends at 1, so all frames finish together.
//! * Anchor frames follow `1 - g(t)` where `g(t) = g_max * (1 - t)` is the
//!   scheduled noise intensity. Their one-time corruption draws noise whose
//!   variance is inflated so the *total* noise on the anchor stays a standard
//!   normal scaled by `g` (see [`sigma2_of`]); that keeps corrupted anchors
//!   on the same flow path as ordinary noisy frames.
//! * Condition frames sit at timestamp 1 for the whole table.
//!
//! Timestamp convention: `t = 1` is clean data, `t = 0` is pure noise, and a
//! state at noise intensity `alpha` has timestamp `1 - alpha`.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::scalar::Scalar;
use crate::Real;

/// Role of one frame inside a generation window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameRole {
    /// Clean context frame, held fixed at timestamp 1.
    Condition,
    /// Generated from pure noise along a warped column.
    Interpolation,
    /// Predicted earlier, corrupted once, then denoised along `1 - g(t)`.
    Anchor,
}

/// Errors from schedule construction and the noise algebra.
#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("omega must lie in (0, pi/2], got {0}")]
    InvalidOmega(f64),
    #[error("num_steps must be >= 1")]
    ZeroSteps,
    #[error("num_noisy must be >= 1")]
    ZeroNoisyFrames,
    #[error("frame rank {s} out of range for {num_noisy} noisy frames")]
    PhaseOutOfRange { s: usize, num_noisy: usize },
    #[error("alpha1 must lie in [0, 1), got {0}")]
    InvalidAlpha1(f64),
    #[error("g_max must lie in (alpha1, 1], got {0}")]
    InvalidGMax(f64),
    #[error("noise level g = {g} is at or below alpha1 = {alpha1}: no-corruption regime")]
    NoCorruption { g: f64, alpha1: f64 },
    #[error("alpha2 must lie in (0, 1], got {0}")]
    InvalidAlpha2(f64),
    #[error("role list has {got} noisy frames but the warp config expects {expected}")]
    RoleCountMismatch { got: usize, expected: usize },
    #[error("window contains anchor frames but no correction parameters were supplied")]
    MissingCorrection,
    #[error("role list is empty")]
    EmptyRoles,
}

fn to_f64<S: Scalar>(v: S) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// Phase offset for the noisy frame of rank `s` among `num_noisy` frames:
/// `0.5 * pi * s / num_noisy`, increasing with rank and strictly below
/// `pi / 2`.
pub fn phase<S: Scalar>(s: usize, num_noisy: usize) -> Result<S, ScheduleError> {
    if num_noisy == 0 {
        return Err(ScheduleError::ZeroNoisyFrames);
    }
    if s >= num_noisy {
        return Err(ScheduleError::PhaseOutOfRange { s, num_noisy });
    }
    let ratio = S::from_f64_lossy(s as f64 / num_noisy as f64);
    Ok(S::FRAC_PI_2() * ratio)
}

/// Cosine warp of a shared timestamp.
///
/// `warp(t) = 1 - (cos((1 - t) * omega + phi) - cos(phi)) / (cos(omega + phi) - cos(phi))`
///
/// For any valid phase the warp fixes the endpoints (`warp(0) = 0`,
/// `warp(1) = 1`, both exact in floating point) and is strictly increasing in
/// `t`. Smaller phases warp harder toward 1, so lower-rank frames run ahead.
///
/// Preconditions (checked by [`WarpConfig`] and [`phase`], not here):
/// `t` in `[0, 1]`, `omega` in `(0, pi/2]`, `phi` in `[0, pi/2)`.
pub fn warp<S: Scalar>(t: S, phi: S, omega: S) -> S {
    let one = S::one();
    let denom = (omega + phi).cos() - phi.cos();
    let numer = ((one - t) * omega + phi).cos() - phi.cos();
    one - numer / denom
}

/// Scheduled noise intensity for anchor frames: `g(t) = g_max * (1 - t)`.
pub fn noise_level<S: Scalar>(t: S, g_max: S) -> S {
    g_max * (S::one() - t)
}

/// Second-stage mixing weight that brings an anchor holding residual noise
/// `alpha1` up to total intensity `g`: `alpha2 = (g - alpha1) / (1 - alpha1)`.
///
/// Returns [`ScheduleError::NoCorruption`] when `g <= alpha1`; the caller
/// treats the anchor as an ordinary frame at timestamp `1 - g` in that
/// regime.
pub fn alpha2_of<S: Scalar>(g: S, alpha1: S) -> Result<S, ScheduleError> {
    if alpha1 < S::zero() || alpha1 >= S::one() {
        return Err(ScheduleError::InvalidAlpha1(to_f64(alpha1)));
    }
    if g <= alpha1 {
        return Err(ScheduleError::NoCorruption {
            g: to_f64(g),
            alpha1: to_f64(alpha1),
        });
    }
    Ok((g - alpha1) / (S::one() - alpha1))
}

/// Variance of the freshly drawn corruption noise:
/// `sigma2 = (alpha2 - 2 * alpha1 * alpha2 + 2 * alpha1) / alpha2`.
///
/// Always `>= 1`: the fresh noise is inflated exactly enough that the
/// combined residual-plus-fresh noise on the anchor is `g * N(0, 1)` with
/// `g = 1 - (1 - alpha1) * (1 - alpha2)`.
pub fn sigma2_of<S: Scalar>(alpha1: S, alpha2: S) -> Result<S, ScheduleError> {
    if alpha1 < S::zero() || alpha1 >= S::one() {
        return Err(ScheduleError::InvalidAlpha1(to_f64(alpha1)));
    }
    if alpha2 <= S::zero() || alpha2 > S::one() {
        return Err(ScheduleError::InvalidAlpha2(to_f64(alpha2)));
    }
    let two = S::from_f64_lossy(2.0);
    Ok((alpha2 - two * alpha1 * alpha2 + two * alpha1) / alpha2)
}

/// Per-window warp settings: number of sampling steps, number of noisy
/// frames (which fixes the phase ladder), and the warp strength.
#[derive(Debug, Clone)]
pub struct WarpConfig<S: Scalar> {
    omega: Option<S>,
    num_noisy: usize,
    num_steps: usize,
}

impl<S: Scalar> WarpConfig<S> {
    /// Cosine warp with strength `omega` in `(0, pi/2]`.
    pub fn cosine(omega: S, num_noisy: usize, num_steps: usize) -> Result<Self, ScheduleError> {
        if !(omega > S::zero() && omega <= S::FRAC_PI_2()) || !omega.is_finite() {
            return Err(ScheduleError::InvalidOmega(to_f64(omega)));
        }
        Self::checked(Some(omega), num_noisy, num_steps)
    }

    /// Identity warp: every noisy frame follows the uniform step grid.
    pub fn linear(num_noisy: usize, num_steps: usize) -> Result<Self, ScheduleError> {
        Self::checked(None, num_noisy, num_steps)
    }

    fn checked(omega: Option<S>, num_noisy: usize, num_steps: usize) -> Result<Self, ScheduleError> {
        if num_steps == 0 {
            return Err(ScheduleError::ZeroSteps);
        }
        if num_noisy == 0 {
            return Err(ScheduleError::ZeroNoisyFrames);
        }
        Ok(Self {
            omega,
            num_noisy,
            num_steps,
        })
    }

    pub fn omega(&self) -> Option<S> {
        self.omega
    }

    pub fn num_noisy(&self) -> usize {
        self.num_noisy
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    /// Warped timestamp for the noisy frame of rank `s` at shared time `t`.
    pub fn timestamp(&self, t: S, s: usize) -> Result<S, ScheduleError> {
        match self.omega {
            None => Ok(t),
            Some(omega) => Ok(warp(t, phase(s, self.num_noisy)?, omega)),
        }
    }
}

/// Anchor-correction parameters: the residual intensity `alpha1` assumed to
/// sit on predicted anchors and the peak scheduled intensity `g_max`, plus
/// the mixing weight and fresh-noise variance derived at `g_max`.
#[derive(Debug, Clone)]
pub struct CorrectionParams<S: Scalar> {
    pub alpha1: S,
    pub g_max: S,
    /// Mixing weight at peak intensity: `alpha2_of(g_max, alpha1)`.
    pub alpha2: S,
    /// Fresh-noise variance at peak intensity: `sigma2_of(alpha1, alpha2)`.
    pub sigma2: S,
}

impl<S: Scalar> CorrectionParams<S> {
    pub fn new(alpha1: S, g_max: S) -> Result<Self, ScheduleError> {
        if alpha1 < S::zero() || alpha1 >= S::one() {
            return Err(ScheduleError::InvalidAlpha1(to_f64(alpha1)));
        }
        if g_max <= alpha1 || g_max > S::one() {
            return Err(ScheduleError::InvalidGMax(to_f64(g_max)));
        }
        let alpha2 = alpha2_of(g_max, alpha1)?;
        let sigma2 = sigma2_of(alpha1, alpha2)?;
        Ok(Self {
            alpha1,
            g_max,
            alpha2,
            sigma2,
        })
    }

    /// Scheduled noise intensity at shared time `t`.
    pub fn noise_level(&self, t: S) -> S {
        noise_level(t, self.g_max)
    }
}

/// Applies the one-time anchor corruption to a predicted frame:
/// `x = (1 - alpha2) * z + alpha2 * sigma * n`, `n ~ N(0, 1)` per pixel.
///
/// `alpha2 == 0` bypasses exactly (returns `z` unchanged, draws nothing).
pub fn corrupt_frame<R: Rng>(
    z: &[Real],
    alpha2: Real,
    sigma2: Real,
    rng: &mut R,
) -> Vec<Real> {
    if alpha2 == 0.0 {
        return z.to_vec();
    }
    let sigma = sigma2.sqrt();
    z.iter()
        .map(|&v| {
            let n: Real = rng.sample(StandardNormal);
            (1.0 - alpha2) * v + alpha2 * sigma * n
        })
        .collect()
}

/// Timetable for one window: `num_steps + 1` rows of per-frame timestamps.
///
/// Row 0 holds each frame's start timestamp, the last row is exactly 1 for
/// every frame, and every column is non-decreasing.
#[derive(Debug, Clone)]
pub struct ScheduleTable<S: Scalar> {
    roles: Vec<FrameRole>,
    num_steps: usize,
    /// Row-major `(num_steps + 1) x num_frames`.
    rows: Vec<S>,
}

/// Builds the timetable for a window given per-frame roles.
///
/// Noisy-frame phases are assigned by rank in window order over *all* noisy
/// frames (interpolation and anchor alike); anchor frames then override
/// their column with `1 - g(t)`. `correction` is required iff any frame is
/// an anchor.
pub fn build_table<S: Scalar>(
    roles: &[FrameRole],
    warp: &WarpConfig<S>,
    correction: Option<&CorrectionParams<S>>,
) -> Result<ScheduleTable<S>, ScheduleError> {
    if roles.is_empty() {
        return Err(ScheduleError::EmptyRoles);
    }
    let noisy: Vec<usize> = roles
        .iter()
        .enumerate()
        .filter(|(_, r)| **r != FrameRole::Condition)
        .map(|(i, _)| i)
        .collect();
    if noisy.len() != warp.num_noisy() {
        return Err(ScheduleError::RoleCountMismatch {
            got: noisy.len(),
            expected: warp.num_noisy(),
        });
    }
    let has_anchor = roles.iter().any(|r| *r == FrameRole::Anchor);
    if has_anchor && correction.is_none() {
        return Err(ScheduleError::MissingCorrection);
    }

    let steps = warp.num_steps();
    let frames = roles.len();
    let mut rows = vec![S::one(); (steps + 1) * frames];
    for i in 0..=steps {
        let t = S::from_f64_lossy(i as f64 / steps as f64);
        for (rank, &frame) in noisy.iter().enumerate() {
            let value = match roles[frame] {
                FrameRole::Interpolation => warp.timestamp(t, rank)?,
                FrameRole::Anchor => {
                    let params = correction.expect("checked above");
                    S::one() - params.noise_level(t)
                }
                FrameRole::Condition => unreachable!("noisy list excludes conditions"),
            };
            rows[i * frames + frame] = value;
        }
    }
    Ok(ScheduleTable {
        roles: roles.to_vec(),
        num_steps: steps,
        rows,
    })
}

impl<S: Scalar> ScheduleTable<S> {
    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn num_frames(&self) -> usize {
        self.roles.len()
    }

    pub fn roles(&self) -> &[FrameRole] {
        &self.roles
    }

    /// Timestamps of every frame at step `i` (`0..=num_steps`).
    pub fn row(&self, i: usize) -> &[S] {
        let f = self.num_frames();
        &self.rows[i * f..(i + 1) * f]
    }

    pub fn timestamp(&self, step: usize, frame: usize) -> S {
        self.rows[step * self.num_frames() + frame]
    }

    /// CSV dump: header `step,frame_0,...`, one row per step.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "step")?;
        for (i, role) in self.roles.iter().enumerate() {
            let tag = match role {
                FrameRole::Condition => "cond",
                FrameRole::Interpolation => "interp",
                FrameRole::Anchor => "anchor",
            };
            write!(w, ",{tag}_{i}")?;
        }
        writeln!(w)?;
        for i in 0..=self.num_steps {
            write!(w, "{i}")?;
            for f in 0..self.num_frames() {
                write!(w, ",{}", to_f64(self.timestamp(i, f)))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}
