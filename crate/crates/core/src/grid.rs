//! Dense frame storage shared by the simulator, the networks, and the
//! samplers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Real;

/// Errors raised by [`FrameGrid`] construction and arithmetic.
#[derive(Debug, Error)]
pub enum GridError {
    #[error("data length {got} does not match shape {frames}x{views}x{height}x{width}")]
    LengthMismatch {
        got: usize,
        frames: usize,
        views: usize,
        height: usize,
        width: usize,
    },
    #[error("shape mismatch: {a:?} vs {b:?}")]
    ShapeMismatch { a: [usize; 4], b: [usize; 4] },
}

/// Row-major `[frames, views, height, width]` array of `f64` pixels.
///
/// This is the carrier for everything frame-shaped: rendered episodes, noisy
/// flow states, velocities, and generated clips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameGrid {
    frames: usize,
    views: usize,
    height: usize,
    width: usize,
    data: Vec<Real>,
}

impl FrameGrid {
    /// Grid filled with zeros.
    pub fn zeros(frames: usize, views: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            views,
            height,
            width,
            data: vec![0.0; frames * views * height * width],
        }
    }

    /// Grid wrapping an existing buffer; the buffer length must match.
    pub fn from_vec(
        frames: usize,
        views: usize,
        height: usize,
        width: usize,
        data: Vec<Real>,
    ) -> Result<Self, GridError> {
        if data.len() != frames * views * height * width {
            return Err(GridError::LengthMismatch {
                got: data.len(),
                frames,
                views,
                height,
                width,
            });
        }
        Ok(Self {
            frames,
            views,
            height,
            width,
            data,
        })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.frames, self.views, self.height, self.width]
    }

    pub fn num_frames(&self) -> usize {
        self.frames
    }

    pub fn num_views(&self) -> usize {
        self.views
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Pixels per frame across all views.
    pub fn frame_len(&self) -> usize {
        self.views * self.height * self.width
    }

    pub fn as_slice(&self) -> &[Real] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Real] {
        &mut self.data
    }

    /// Flattened pixels of one frame (all views).
    pub fn frame(&self, t: usize) -> &[Real] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [Real] {
        let n = self.frame_len();
        &mut self.data[t * n..(t + 1) * n]
    }

    pub fn get(&self, t: usize, v: usize, y: usize, x: usize) -> Real {
        self.data[((t * self.views + v) * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, t: usize, v: usize, y: usize, x: usize, value: Real) {
        self.data[((t * self.views + v) * self.height + y) * self.width + x] = value;
    }

    /// Copies frame `src` of `other` into frame `dst` of `self`.
    pub fn copy_frame_from(
        &mut self,
        dst: usize,
        other: &FrameGrid,
        src: usize,
    ) -> Result<(), GridError> {
        if self.frame_len() != other.frame_len() {
            return Err(GridError::ShapeMismatch {
                a: self.shape(),
                b: other.shape(),
            });
        }
        let n = self.frame_len();
        let from = src * n;
        self.data[dst * n..(dst + 1) * n].copy_from_slice(&other.data[from..from + n]);
        Ok(())
    }

    /// New grid holding the frames `range` of `self`.
    pub fn slice_frames(&self, range: std::ops::Range<usize>) -> FrameGrid {
        let n = self.frame_len();
        FrameGrid {
            frames: range.len(),
            views: self.views,
            height: self.height,
            width: self.width,
            data: self.data[range.start * n..range.end * n].to_vec(),
        }
    }

    /// True when every element is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same_shape(&self, other: &FrameGrid) -> Result<(), GridError> {
        if self.shape() != other.shape() {
            return Err(GridError::ShapeMismatch {
                a: self.shape(),
                b: other.shape(),
            });
        }
        Ok(())
    }

    /// Elementwise `self + scale * other`.
    pub fn add_scaled(&mut self, other: &FrameGrid, scale: Real) -> Result<(), GridError> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_is_row_major() {
        let mut g = FrameGrid::zeros(2, 2, 3, 4);
        g.set(1, 0, 2, 3, 7.5);
        assert_eq!(g.as_slice()[((1 * 2 + 0) * 3 + 2) * 4 + 3], 7.5);
        assert_eq!(g.get(1, 0, 2, 3), 7.5);
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(FrameGrid::from_vec(1, 1, 2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn slice_and_copy_round_trip() {
        let mut g = FrameGrid::zeros(3, 1, 2, 2);
        for t in 0..3 {
            for i in 0..4 {
                g.frame_mut(t)[i] = (t * 10 + i) as Real;
            }
        }
        let tail = g.slice_frames(1..3);
        assert_eq!(tail.num_frames(), 2);
        assert_eq!(tail.frame(0), g.frame(1));

        let mut dst = FrameGrid::zeros(1, 1, 2, 2);
        dst.copy_frame_from(0, &g, 2).unwrap();
        assert_eq!(dst.frame(0), g.frame(2));
    }

    #[test]
    fn add_scaled_checks_shape() {
        let mut a = FrameGrid::zeros(1, 1, 2, 2);
        let b = FrameGrid::zeros(1, 1, 2, 3);
        assert!(a.add_scaled(&b, 1.0).is_err());
    }
}
