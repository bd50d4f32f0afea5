//! Synthetic multi-view world: a point agent chasing a smooth random target
//! across a square arena with disc obstacles, rasterized into fixed affine
//! camera views.
//!
//! Everything is deterministic in `(config, seed)`. Rendering works in f64
//! and quantizes each pixel to its nearest f32 value before storing, so the
//! 32-bit dataset format round-trips bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::ViewParams;
use crate::grid::{FrameGrid, GridError};
use crate::rng;
use crate::Real;

const MAGIC: &[u8; 4] = b"LFDS";
const VERSION: u32 = 1;

/// Obstacle discs render at this constant intensity.
const OBSTACLE_INTENSITY: Real = 0.45;
/// Agent blob shape in pixel units.
const BLOB_SIGMA_PX: Real = 1.5;
const BLOB_AMPLITUDE: Real = 1.0;
const BLOB_CUTOFF_SIGMAS: Real = 5.0;
/// Zoom is chosen so one view window spans `arena / ZOOM_FILL`.
const ZOOM_FILL: Real = 1.8;
/// Target process: low-pass-filtered random walk around the arena center.
const TARGET_RHO: Real = 0.92;
const TARGET_STD: Real = 0.9;
const TARGET_MARGIN: Real = 1.0;
const INIT_MARGIN: Real = 2.0;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error("num_steps must be at least 1")]
    ZeroSteps,
    #[error("view index {got} out of range for {views} views")]
    ViewOutOfRange { got: usize, views: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt dataset: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    /// Side length of the square arena, world units.
    pub arena_size: Real,
    pub num_obstacles: u32,
    /// Agent displacement per simulation step, world units.
    pub agent_speed: Real,
    pub num_views: u32,
    /// Square frame edge in pixels.
    pub frame_size: u32,
    /// Simulation steps per second at full rate.
    pub base_fps: u32,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            arena_size: 10.0,
            num_obstacles: 3,
            agent_speed: 0.15,
            num_views: 2,
            frame_size: 16,
            base_fps: 12,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), WorldError> {
        if !(self.arena_size > 0.0 && self.arena_size.is_finite()) {
            return Err(WorldError::InvalidConfig("arena_size must be positive".into()));
        }
        if !(self.agent_speed > 0.0 && self.agent_speed.is_finite()) {
            return Err(WorldError::InvalidConfig("agent_speed must be positive".into()));
        }
        if self.num_views == 0 {
            return Err(WorldError::InvalidConfig("num_views must be at least 1".into()));
        }
        if self.frame_size < 8 {
            return Err(WorldError::InvalidConfig("frame_size must be at least 8".into()));
        }
        if self.base_fps == 0 {
            return Err(WorldError::InvalidConfig("base_fps must be at least 1".into()));
        }
        Ok(())
    }

    /// Pixels per world unit, shared by all views.
    pub fn zoom(&self) -> Real {
        ZOOM_FILL * self.frame_size as Real / self.arena_size
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obstacle {
    pub center: [Real; 2],
    pub radius: Real,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState {
    pub position: [Real; 2],
    pub velocity: [Real; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub seed: u64,
    pub states: Vec<AgentState>,
    /// Ground-truth waypoints are the realized trajectory, one per frame.
    pub waypoints: Vec<[Real; 2]>,
    pub frames: FrameGrid,
}

impl Episode {
    pub fn num_frames(&self) -> usize {
        self.states.len()
    }

    /// Categorical scene label used for conditioning; derived from the seed
    /// so every episode's obstacle layout has a stable id.
    pub fn scene_id(&self) -> u32 {
        self.seed as u32
    }
}

/// World-to-pixel affine map of one view: rotate, scale, center on focus.
struct ViewMap {
    cos: Real,
    sin: Real,
    focus: [Real; 2],
    zoom: Real,
    half_px: Real,
}

impl ViewMap {
    fn new(config: &WorldConfig, view: usize) -> Self {
        let v = config.num_views as usize;
        let angle = 2.0 * std::f64::consts::PI * view as Real / v as Real;
        let center = config.arena_size / 2.0;
        // A single view looks at the arena center; multiple views fan out
        // around it so each covers a different region.
        let radius = if v > 1 { config.arena_size / 6.0 } else { 0.0 };
        let focus = [
            center + radius * angle.cos(),
            center + radius * angle.sin(),
        ];
        Self {
            cos: angle.cos(),
            sin: angle.sin(),
            focus,
            zoom: config.zoom(),
            half_px: config.frame_size as Real / 2.0,
        }
    }

    fn world_to_pixel(&self, w: [Real; 2]) -> [Real; 2] {
        let dx = w[0] - self.focus[0];
        let dy = w[1] - self.focus[1];
        [
            self.zoom * (self.cos * dx + self.sin * dy) + self.half_px,
            self.zoom * (-self.sin * dx + self.cos * dy) + self.half_px,
        ]
    }

    fn pixel_to_world(&self, p: [Real; 2]) -> [Real; 2] {
        let dx = (p[0] - self.half_px) / self.zoom;
        let dy = (p[1] - self.half_px) / self.zoom;
        [
            self.cos * dx - self.sin * dy + self.focus[0],
            self.sin * dx + self.cos * dy + self.focus[1],
        ]
    }
}

/// Pixel coordinates of a world point in the given view.
pub fn world_to_pixel(
    config: &WorldConfig,
    view: usize,
    point: [Real; 2],
) -> Result<[Real; 2], WorldError> {
    if view >= config.num_views as usize {
        return Err(WorldError::ViewOutOfRange {
            got: view,
            views: config.num_views as usize,
        });
    }
    Ok(ViewMap::new(config, view).world_to_pixel(point))
}

/// Conditioning descriptor of one view, with focus normalized to `[0, 1]`.
pub fn view_params(config: &WorldConfig, view: usize) -> Result<ViewParams, WorldError> {
    if view >= config.num_views as usize {
        return Err(WorldError::ViewOutOfRange {
            got: view,
            views: config.num_views as usize,
        });
    }
    let map = ViewMap::new(config, view);
    let angle =
        2.0 * std::f64::consts::PI * view as Real / config.num_views as Real;
    Ok(ViewParams {
        angle,
        focus: [
            map.focus[0] / config.arena_size,
            map.focus[1] / config.arena_size,
        ],
        zoom: map.zoom,
    })
}

/// Obstacle layout for a seed: radii then centers, margins keeping discs
/// inside the arena.
pub fn obstacles_for_seed(config: &WorldConfig, seed: u64) -> Vec<Obstacle> {
    let mut rng = rng::stream(seed, "world/obstacles", 0);
    (0..config.num_obstacles)
        .map(|_| {
            let radius = rng.gen_range(0.6..1.2);
            let margin = radius + 0.5;
            let center = [
                rng.gen_range(margin..config.arena_size - margin),
                rng.gen_range(margin..config.arena_size - margin),
            ];
            Obstacle { center, radius }
        })
        .collect()
}

/// Rasterizes one view: obstacle discs plus the agent's Gaussian blob,
/// clamped to `[0, 1]` and quantized to f32 precision.
pub fn render(
    position: [Real; 2],
    obstacles: &[Obstacle],
    view: usize,
    config: &WorldConfig,
) -> Result<Vec<Real>, WorldError> {
    if view >= config.num_views as usize {
        return Err(WorldError::ViewOutOfRange {
            got: view,
            views: config.num_views as usize,
        });
    }
    let map = ViewMap::new(config, view);
    let size = config.frame_size as usize;
    let sigma_w = BLOB_SIGMA_PX / map.zoom;
    let cutoff2 = (BLOB_CUTOFF_SIGMAS * sigma_w) * (BLOB_CUTOFF_SIGMAS * sigma_w);
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let w = map.pixel_to_world([x as Real + 0.5, y as Real + 0.5]);
            let mut value = 0.0;
            for o in obstacles {
                let dx = w[0] - o.center[0];
                let dy = w[1] - o.center[1];
                if dx * dx + dy * dy <= o.radius * o.radius {
                    value = OBSTACLE_INTENSITY;
                    break;
                }
            }
            let dx = w[0] - position[0];
            let dy = w[1] - position[1];
            let d2 = dx * dx + dy * dy;
            if d2 <= cutoff2 {
                value += BLOB_AMPLITUDE * (-d2 / (2.0 * sigma_w * sigma_w)).exp();
            }
            out[y * size + x] = (value.clamp(0.0, 1.0) as f32) as Real;
        }
    }
    Ok(out)
}

fn reflect(v: Real, lo: Real, hi: Real) -> Real {
    let mut v = v;
    // At most a few bounces for any realistic step size.
    for _ in 0..8 {
        if v < lo {
            v = 2.0 * lo - v;
        } else if v > hi {
            v = 2.0 * hi - v;
        } else {
            return v;
        }
    }
    v.clamp(lo, hi)
}

fn simulate_with_speed(
    config: &WorldConfig,
    seed: u64,
    num_steps: usize,
    speed: Real,
) -> Result<Episode, WorldError> {
    config.validate()?;
    if num_steps == 0 {
        return Err(WorldError::ZeroSteps);
    }
    let obstacles = obstacles_for_seed(config, seed);
    let mut agent_rng = rng::stream(seed, "world/agent", 0);
    let arena = config.arena_size;
    let center = arena / 2.0;
    let mut target = [
        agent_rng.gen_range(INIT_MARGIN..arena - INIT_MARGIN),
        agent_rng.gen_range(INIT_MARGIN..arena - INIT_MARGIN),
    ];
    let mut position = [
        agent_rng.gen_range(INIT_MARGIN..arena - INIT_MARGIN),
        agent_rng.gen_range(INIT_MARGIN..arena - INIT_MARGIN),
    ];
    let mut states = Vec::with_capacity(num_steps);
    states.push(AgentState {
        position,
        velocity: [0.0, 0.0],
    });
    for _ in 1..num_steps {
        // Smooth target: mean-reverting random walk, reflected at margins.
        for axis in 0..2 {
            let noise: Real = agent_rng.sample(StandardNormal);
            let next = center + TARGET_RHO * (target[axis] - center) + TARGET_STD * noise;
            target[axis] = reflect(next, TARGET_MARGIN, arena - TARGET_MARGIN);
        }
        // Constant-speed pursuit, capped at reaching the target.
        let dx = target[0] - position[0];
        let dy = target[1] - position[1];
        let dist = (dx * dx + dy * dy).sqrt();
        let velocity = if dist <= speed || dist == 0.0 {
            [dx, dy]
        } else {
            [speed * dx / dist, speed * dy / dist]
        };
        position = [
            reflect(position[0] + velocity[0], 0.0, arena),
            reflect(position[1] + velocity[1], 0.0, arena),
        ];
        states.push(AgentState { position, velocity });
    }

    let size = config.frame_size as usize;
    let views = config.num_views as usize;
    let mut frames = FrameGrid::zeros(num_steps, views, size, size);
    for (k, state) in states.iter().enumerate() {
        let dst = frames.frame_mut(k);
        for v in 0..views {
            let pixels = render(state.position, &obstacles, v, config)?;
            dst[v * size * size..(v + 1) * size * size].copy_from_slice(&pixels);
        }
    }
    let waypoints = states.iter().map(|s| s.position).collect();
    Ok(Episode {
        seed,
        states,
        waypoints,
        frames,
    })
}

/// Runs the agent for `num_steps` steps and renders every view.
pub fn simulate(config: &WorldConfig, seed: u64, num_steps: usize) -> Result<Episode, WorldError> {
    simulate_with_speed(config, seed, num_steps, config.agent_speed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetSummary {
    pub episodes: usize,
    pub total_frames: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: WorldConfig,
    pub episodes: Vec<Episode>,
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_f64<W: Write>(w: &mut W, v: Real) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64<R: Read>(r: &mut R) -> std::io::Result<Real> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(Real::from_le_bytes(buf))
}

fn write_episode<W: Write>(w: &mut W, episode: &Episode) -> std::io::Result<()> {
    let [t, v, h, wd] = episode.frames.shape();
    for dim in [t, v, h, wd] {
        write_u32(w, dim as u32)?;
    }
    w.write_all(&episode.seed.to_le_bytes())?;
    for s in &episode.states {
        write_f64(w, s.position[0])?;
        write_f64(w, s.position[1])?;
    }
    for s in &episode.states {
        write_f64(w, s.velocity[0])?;
        write_f64(w, s.velocity[1])?;
    }
    for p in &episode.waypoints {
        write_f64(w, p[0])?;
        write_f64(w, p[1])?;
    }
    for &px in episode.frames.as_slice() {
        w.write_all(&(px as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_episode<R: Read>(r: &mut R, config: &WorldConfig) -> Result<Option<Episode>, WorldError> {
    let mut first = [0u8; 4];
    match r.read_exact(&mut first) {
        Ok(()) => {}
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let t = u32::from_le_bytes(first) as usize;
    let v = read_u32(r)? as usize;
    let h = read_u32(r)? as usize;
    let w = read_u32(r)? as usize;
    if v != config.num_views as usize
        || h != config.frame_size as usize
        || w != config.frame_size as usize
    {
        return Err(WorldError::Corrupt(format!(
            "episode geometry {v}x{h}x{w} does not match config"
        )));
    }
    if t == 0 || t > (1 << 24) {
        return Err(WorldError::Corrupt(format!("implausible frame count {t}")));
    }
    let mut seed_buf = [0u8; 8];
    r.read_exact(&mut seed_buf)?;
    let seed = u64::from_le_bytes(seed_buf);
    let mut positions = Vec::with_capacity(t);
    for _ in 0..t {
        positions.push([read_f64(r)?, read_f64(r)?]);
    }
    let mut velocities = Vec::with_capacity(t);
    for _ in 0..t {
        velocities.push([read_f64(r)?, read_f64(r)?]);
    }
    let mut waypoints = Vec::with_capacity(t);
    for _ in 0..t {
        waypoints.push([read_f64(r)?, read_f64(r)?]);
    }
    let mut data = Vec::with_capacity(t * v * h * w);
    let mut buf = [0u8; 4];
    for _ in 0..t * v * h * w {
        r.read_exact(&mut buf)?;
        data.push(f32::from_le_bytes(buf) as Real);
    }
    let frames = FrameGrid::from_vec(t, v, h, w, data)?;
    let states = positions
        .into_iter()
        .zip(velocities)
        .map(|(position, velocity)| AgentState { position, velocity })
        .collect();
    Ok(Some(Episode {
        seed,
        states,
        waypoints,
        frames,
    }))
}

fn write_config<W: Write>(w: &mut W, config: &WorldConfig) -> std::io::Result<()> {
    write_f64(w, config.arena_size)?;
    write_u32(w, config.num_obstacles)?;
    write_f64(w, config.agent_speed)?;
    write_u32(w, config.num_views)?;
    write_u32(w, config.frame_size)?;
    write_u32(w, config.base_fps)
}

fn read_config<R: Read>(r: &mut R) -> Result<WorldConfig, WorldError> {
    let config = WorldConfig {
        arena_size: read_f64(r)?,
        num_obstacles: read_u32(r)?,
        agent_speed: read_f64(r)?,
        num_views: read_u32(r)?,
        frame_size: read_u32(r)?,
        base_fps: read_u32(r)?,
    };
    config.validate()?;
    Ok(config)
}

/// Writes an in-memory dataset (episodes need not come from the simulator;
/// generated clips reuse the same container).
pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<DatasetSummary, WorldError> {
    dataset.config.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    write_config(&mut w, &dataset.config)?;
    let mut total_frames = 0;
    for episode in &dataset.episodes {
        total_frames += episode.num_frames();
        write_episode(&mut w, episode)?;
    }
    w.flush()?;
    Ok(DatasetSummary {
        episodes: dataset.episodes.len(),
        total_frames,
    })
}

/// Simulates `num_episodes` episodes (episode `i` uses seed `seed + i`) and
/// writes them to `path`.
pub fn make_dataset(
    config: &WorldConfig,
    num_episodes: usize,
    steps_per_episode: usize,
    seed: u64,
    path: &Path,
) -> Result<DatasetSummary, WorldError> {
    config.validate()?;
    if num_episodes > 0 && steps_per_episode == 0 {
        return Err(WorldError::ZeroSteps);
    }
    let mut episodes = Vec::with_capacity(num_episodes);
    for i in 0..num_episodes {
        episodes.push(simulate(config, seed + i as u64, steps_per_episode)?);
    }
    let dataset = Dataset {
        config: config.clone(),
        episodes,
    };
    write_dataset(&dataset, path)
}

/// Reads a dataset written by [`make_dataset`]; episode count is implicit
/// in the file length.
pub fn read_dataset(path: &Path) -> Result<Dataset, WorldError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(WorldError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(WorldError::UnsupportedVersion(version));
    }
    let config = read_config(&mut r)?;
    let mut episodes = Vec::new();
    while let Some(episode) = read_episode(&mut r, &config)? {
        episodes.push(episode);
    }
    Ok(Dataset { config, episodes })
}
