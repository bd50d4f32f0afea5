//! Core library for `longflow`: a desk-scale world model that generates long
//! videos of a 2-D point agent with rectified-flow matching.
//!
//! The crate is organized around the data flow of a run:
//!
//! * [`world`] simulates episodes of the toy world, renders multi-view
//!   frames, and persists them in the `LFDS` binary format.
//! * [`nn`] is a small f64 tensor/layer toolkit with hand-written backward
//!   passes, an Adam optimizer, and the velocity-field networks.
//! * [`flow`] holds the rectified-flow primitives: interpolation, the
//!   flow-matching training loss, classifier-free guidance, and the Euler
//!   sampler.
//! * [`schedule`] builds per-frame denoising timetables: the progressive
//!   cosine warp that staggers frames within a window, and the
//!   anchor-correction noise algebra used when re-noising predicted frames.
//! * [`rollout`] turns windows into long clips via the three generation
//!   strategies (recurrent, divide-and-conquer, coarse-to-refine).
//! * [`metrics`] embeds frames and scores clips with a Fréchet distance,
//!   temporal flicker, and per-horizon drift curves.
//! * [`config`] and [`train`] tie everything to a JSON run configuration and
//!   the three-stage training curriculum.
//!
//! Closed-form schedule math is generic over [`scalar::Scalar`]; everything
//! that touches tensors, files, or optimizers is pinned to [`Real`] (`f64`)
//! so numeric tolerances stay tight.

pub mod config;
pub mod flow;
pub mod grid;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod rollout;
pub mod scalar;
pub mod schedule;
pub mod train;
pub mod world;

/// Scalar type used by all tensor, simulation, and training code.
pub type Real = f64;

/// Concrete progressive-warp configuration used by the pipeline.
pub type WarpConfig = schedule::WarpConfig<Real>;
/// Concrete anchor-correction parameters used by the pipeline.
pub type CorrectionParams = schedule::CorrectionParams<Real>;
/// Concrete denoising timetable used by the pipeline.
pub type ScheduleTable = schedule::ScheduleTable<Real>;

pub use grid::FrameGrid;
