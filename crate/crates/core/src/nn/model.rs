//! The velocity network: conditioning featurization plus two interchangeable
//! backbones.
//!
//! Both backbones read the same per-frame feature vector (timestamp,
//! waypoint, rate, position and view encodings, scene embedding, flags) and
//! end in a zero-initialized head, so a fresh model predicts exactly zero
//! velocity everywhere. The `mlp` backbone flattens each frame and mixes in
//! a mean-pooled context of the condition frames; the `attn` backbone
//! tokenizes frames into patches and runs one spatial-view attention block,
//! one temporal attention block, and a pointwise feed-forward block, all
//! pre-normalized with residual connections.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::array::NumArray;
use super::layers::{
    attention_backward, attention_forward, fourier_embed, tanh_backward, tanh_forward, AttnCache,
    Dense, DenseCache, Embedding, LayerError, LayerNorm, LayerNormCache,
};
use super::params::ParamStore;
use crate::flow::{Conditioning, FlowError, VelocityField};
use crate::grid::FrameGrid;
use crate::Real;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Param(#[from] super::params::ParamError),
    #[error("invalid model config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Mlp,
    Attn,
}

/// Architecture and geometry of a [`VelocityModel`]; stored verbatim inside
/// checkpoints so a model can be rebuilt from the file alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub views: usize,
    pub height: usize,
    pub width: usize,
    /// Width of the `mlp` backbone's hidden layers.
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Token channels of the `attn` backbone.
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Patch edge length of the `attn` backbone.
    #[serde(default = "default_patch")]
    pub patch: usize,
    #[serde(default = "default_frequencies")]
    pub num_frequencies: usize,
    #[serde(default = "default_scene_buckets")]
    pub scene_buckets: usize,
    #[serde(default = "default_scene_dim")]
    pub scene_dim: usize,
    /// Longest window the model accepts; positional features and the
    /// temporal embedding table are sized by it.
    #[serde(default = "default_max_frames")]
    pub max_frames: usize,
}

fn default_hidden() -> usize {
    128
}
fn default_channels() -> usize {
    32
}
fn default_patch() -> usize {
    4
}
fn default_frequencies() -> usize {
    8
}
fn default_scene_buckets() -> usize {
    16
}
fn default_scene_dim() -> usize {
    8
}
fn default_max_frames() -> usize {
    16
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::Mlp,
            views: 2,
            height: 16,
            width: 16,
            hidden: default_hidden(),
            channels: default_channels(),
            patch: default_patch(),
            num_frequencies: default_frequencies(),
            scene_buckets: default_scene_buckets(),
            scene_dim: default_scene_dim(),
            max_frames: default_max_frames(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive: [(&str, usize); 9] = [
            ("views", self.views),
            ("height", self.height),
            ("width", self.width),
            ("hidden", self.hidden),
            ("channels", self.channels),
            ("num_frequencies", self.num_frequencies),
            ("scene_buckets", self.scene_buckets),
            ("scene_dim", self.scene_dim),
            ("max_frames", self.max_frames),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::BadConfig(format!("{name} must be positive")));
            }
        }
        if self.backbone == Backbone::Attn {
            if self.patch == 0 {
                return Err(ModelError::BadConfig("patch must be positive".into()));
            }
            if self.height % self.patch != 0 || self.width % self.patch != 0 {
                return Err(ModelError::BadConfig(format!(
                    "patch {} must divide height {} and width {}",
                    self.patch, self.height, self.width
                )));
            }
        }
        Ok(())
    }

    /// Scalars per frame in one view of one frame.
    pub fn frame_len(&self) -> usize {
        self.views * self.height * self.width
    }

    /// Width of the per-frame conditioning feature vector.
    pub fn feature_dim(&self) -> usize {
        // Fourier features for timestamp, waypoint x, waypoint y, frame
        // rate, and local index; then raw view descriptors, the scene
        // embedding, and three flags.
        10 * self.num_frequencies + 4 * self.views + self.scene_dim + 3
    }
}

/// Where the scene embedding sits inside the feature vector, for routing
/// its gradient back to the lookup table.
#[derive(Debug, Clone)]
struct FeatureMeta {
    bucket: usize,
    dropped: bool,
    col_start: usize,
}

struct MlpArch {
    embed: Dense,
    fc1: Dense,
    fc2: Dense,
    head: Dense,
    scene: Embedding,
}

struct AttnArch {
    patch_embed: Dense,
    feat_embed: Dense,
    pos_spatial: super::params::ParamId,
    pos_temporal: super::params::ParamId,
    ln_sp: LayerNorm,
    q_sp: Dense,
    k_sp: Dense,
    v_sp: Dense,
    o_sp: Dense,
    ln_tm: LayerNorm,
    q_tm: Dense,
    k_tm: Dense,
    v_tm: Dense,
    o_tm: Dense,
    ln_ff: LayerNorm,
    ff_a: Dense,
    ff_b: Dense,
    head: Dense,
    scene: Embedding,
}

enum Arch {
    Mlp(MlpArch),
    Attn(Box<AttnArch>),
}

pub struct MlpCache {
    embed: DenseCache,
    tokens: NumArray,
    fc1: DenseCache,
    act1: NumArray,
    fc2: DenseCache,
    act2: NumArray,
    head: DenseCache,
    cond_mask: Vec<bool>,
    meta: FeatureMeta,
}

pub struct AttnNetCache {
    patch_embed: DenseCache,
    feat_embed: DenseCache,
    frames: usize,
    ln_sp: LayerNormCache,
    q_sp: DenseCache,
    k_sp: DenseCache,
    v_sp: DenseCache,
    attn_sp: Vec<AttnCache>,
    o_sp: DenseCache,
    ln_tm: LayerNormCache,
    q_tm: DenseCache,
    k_tm: DenseCache,
    v_tm: DenseCache,
    attn_tm: Vec<AttnCache>,
    o_tm: DenseCache,
    ln_ff: LayerNormCache,
    ff_a: DenseCache,
    act: NumArray,
    ff_b: DenseCache,
    head: DenseCache,
    meta: FeatureMeta,
}

pub enum ModelCache {
    Mlp(Box<MlpCache>),
    Attn(Box<AttnNetCache>),
}

/// A trainable velocity field: parameters plus one of the two backbones.
pub struct VelocityModel {
    config: ModelConfig,
    store: ParamStore,
    arch: Arch,
}

impl VelocityModel {
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let feat = config.feature_dim();
        let arch = match config.backbone {
            Backbone::Mlp => {
                let pixels = config.frame_len();
                let h = config.hidden;
                Arch::Mlp(MlpArch {
                    embed: Dense::new(&mut store, "embed", pixels + feat, h, rng)?,
                    fc1: Dense::new(&mut store, "fc1", 2 * h, h, rng)?,
                    fc2: Dense::new(&mut store, "fc2", h, h, rng)?,
                    head: Dense::new_zeroed(&mut store, "head", h, pixels)?,
                    scene: Embedding::new(
                        &mut store,
                        "scene",
                        config.scene_buckets,
                        config.scene_dim,
                        rng,
                    )?,
                })
            }
            Backbone::Attn => {
                let c = config.channels;
                let p2 = config.patch * config.patch;
                let n_sp = config.views * (config.height / config.patch)
                    * (config.width / config.patch);
                Arch::Attn(Box::new(AttnArch {
                    patch_embed: Dense::new(&mut store, "patch", p2, c, rng)?,
                    feat_embed: Dense::new(&mut store, "feat", feat, c, rng)?,
                    pos_spatial: store.register_normal("pos.spatial", &[n_sp, c], 0.1, rng)?,
                    pos_temporal: store.register_normal(
                        "pos.temporal",
                        &[config.max_frames, c],
                        0.1,
                        rng,
                    )?,
                    ln_sp: LayerNorm::new(&mut store, "sp.ln", c)?,
                    q_sp: Dense::new(&mut store, "sp.q", c, c, rng)?,
                    k_sp: Dense::new(&mut store, "sp.k", c, c, rng)?,
                    v_sp: Dense::new(&mut store, "sp.v", c, c, rng)?,
                    o_sp: Dense::new(&mut store, "sp.o", c, c, rng)?,
                    ln_tm: LayerNorm::new(&mut store, "tm.ln", c)?,
                    q_tm: Dense::new(&mut store, "tm.q", c, c, rng)?,
                    k_tm: Dense::new(&mut store, "tm.k", c, c, rng)?,
                    v_tm: Dense::new(&mut store, "tm.v", c, c, rng)?,
                    o_tm: Dense::new(&mut store, "tm.o", c, c, rng)?,
                    ln_ff: LayerNorm::new(&mut store, "ff.ln", c)?,
                    ff_a: Dense::new(&mut store, "ff.a", c, 2 * c, rng)?,
                    ff_b: Dense::new(&mut store, "ff.b", 2 * c, c, rng)?,
                    head: Dense::new_zeroed(&mut store, "head", c, p2)?,
                    scene: Embedding::new(
                        &mut store,
                        "scene",
                        config.scene_buckets,
                        config.scene_dim,
                        rng,
                    )?,
                }))
            }
        };
        Ok(Self {
            config,
            store,
            arch,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub(crate) fn replace_store(&mut self, store: ParamStore) {
        self.store = store;
    }

    fn scene_embedding(&self) -> &Embedding {
        match &self.arch {
            Arch::Mlp(a) => &a.scene,
            Arch::Attn(a) => &a.scene,
        }
    }

    fn validate_inputs(
        &self,
        frames: &FrameGrid,
        timestamps: &[Real],
        cond: &Conditioning,
    ) -> Result<(), FlowError> {
        let c = &self.config;
        let [t, v, h, w] = frames.shape();
        if v != c.views || h != c.height || w != c.width {
            return Err(FlowError::GeometryMismatch {
                got: frames.shape(),
                expected: [c.views, c.height, c.width],
            });
        }
        if t > c.max_frames {
            return Err(FlowError::TooManyFrames {
                got: t,
                max: c.max_frames,
            });
        }
        if timestamps.len() != t {
            return Err(FlowError::TimestampLength {
                got: timestamps.len(),
                expected: t,
            });
        }
        for &ts in timestamps {
            if !(0.0..=1.0).contains(&ts) || !ts.is_finite() {
                return Err(FlowError::BadTimestamp(ts));
            }
        }
        cond.validate(t)?;
        if cond.views.len() != c.views {
            return Err(FlowError::ConditioningLength {
                field: "views",
                got: cond.views.len(),
                expected: c.views,
            });
        }
        Ok(())
    }

    /// Builds the `[frames, feature_dim]` conditioning matrix. Dropped
    /// channels (waypoints, scene) contribute zeros, so the output is
    /// exactly independent of their values.
    fn build_features(
        &self,
        frames: usize,
        timestamps: &[Real],
        cond: &Conditioning,
    ) -> Result<(NumArray, FeatureMeta), FlowError> {
        let c = &self.config;
        let nf = c.num_frequencies;
        let feat = c.feature_dim();
        let mut out = NumArray::zeros(&[frames, feat]);
        let bucket = cond.scene_id as usize % c.scene_buckets;
        let scene_row = if cond.drop_scene {
            vec![0.0; c.scene_dim]
        } else {
            self.scene_embedding().forward(&self.store, bucket)?
        };
        let meta = FeatureMeta {
            bucket,
            dropped: cond.drop_scene,
            col_start: 10 * nf + 4 * c.views,
        };
        let two_pi = 2.0 * std::f64::consts::PI;
        for f in 0..frames {
            let row = out.row_mut(f);
            let mut at = 0usize;
            let push = |row: &mut [Real], at: &mut usize, values: &[Real]| {
                row[*at..*at + values.len()].copy_from_slice(values);
                *at += values.len();
            };
            push(row, &mut at, fourier_embed(&[timestamps[f]], nf).as_slice());
            if cond.drop_waypoints {
                at += 4 * nf;
            } else {
                let [wx, wy] = cond.waypoints[f];
                push(row, &mut at, fourier_embed(&[wx], nf).as_slice());
                push(row, &mut at, fourier_embed(&[wy], nf).as_slice());
            }
            push(row, &mut at, fourier_embed(&[cond.fps[f]], nf).as_slice());
            let local = f as Real / c.max_frames as Real;
            push(row, &mut at, fourier_embed(&[local], nf).as_slice());
            for view in &cond.views {
                push(
                    row,
                    &mut at,
                    &[
                        view.angle / two_pi,
                        view.focus[0],
                        view.focus[1],
                        view.zoom * 0.1,
                    ],
                );
            }
            debug_assert_eq!(at, meta.col_start);
            push(row, &mut at, &scene_row);
            push(
                row,
                &mut at,
                &[
                    if cond.cond_mask[f] { 1.0 } else { 0.0 },
                    if cond.drop_waypoints { 1.0 } else { 0.0 },
                    if cond.drop_scene { 1.0 } else { 0.0 },
                ],
            );
            debug_assert_eq!(at, feat);
        }
        Ok((out, meta))
    }

    /// Routes the gradient of the feature matrix into the scene table.
    fn backprop_features(
        &mut self,
        d_features: &NumArray,
        meta: &FeatureMeta,
    ) -> Result<(), FlowError> {
        if meta.dropped {
            return Ok(());
        }
        let dim = self.config.scene_dim;
        let (rows, _) = d_features.dims2().map_err(LayerError::from)?;
        let mut total = vec![0.0; dim];
        for r in 0..rows {
            let row = d_features.row(r);
            for (t, v) in total.iter_mut().zip(&row[meta.col_start..meta.col_start + dim]) {
                *t += v;
            }
        }
        let scene = match &self.arch {
            Arch::Mlp(a) => a.scene.clone(),
            Arch::Attn(a) => a.scene.clone(),
        };
        scene.backward(&mut self.store, meta.bucket, &total)?;
        Ok(())
    }

    fn forward_mlp(
        &self,
        frames: &FrameGrid,
        timestamps: &[Real],
        cond: &Conditioning,
    ) -> Result<(FrameGrid, ModelCache), FlowError> {
        let Arch::Mlp(arch) = &self.arch else {
            unreachable!("backbone dispatch");
        };
        let t = frames.num_frames();
        let pixels = self.config.frame_len();
        let (features, meta) = self.build_features(t, timestamps, cond)?;
        let mut input = NumArray::zeros(&[t, pixels + self.config.feature_dim()]);
        for f in 0..t {
            let row = input.row_mut(f);
            row[..pixels].copy_from_slice(frames.frame(f));
            row[pixels..].copy_from_slice(features.row(f));
        }
        let (pre, embed_cache) = arch.embed.forward(&self.store, &input)?;
        let tokens = tanh_forward(&pre);
        let h = self.config.hidden;

        // Mean-pooled context of the condition frames; zeros when there are
        // none, so unconditional windows are still well-defined.
        let n_cond = cond.cond_mask.iter().filter(|c| **c).count();
        let mut ctx = vec![0.0; h];
        if n_cond > 0 {
            for f in 0..t {
                if cond.cond_mask[f] {
                    for (c, v) in ctx.iter_mut().zip(tokens.row(f)) {
                        *c += v / n_cond as Real;
                    }
                }
            }
        }
        let mut body = NumArray::zeros(&[t, 2 * h]);
        for f in 0..t {
            let row = body.row_mut(f);
            row[..h].copy_from_slice(tokens.row(f));
            row[h..].copy_from_slice(&ctx);
        }
        let (pre1, fc1_cache) = arch.fc1.forward(&self.store, &body)?;
        let act1 = tanh_forward(&pre1);
        let (pre2, fc2_cache) = arch.fc2.forward(&self.store, &act1)?;
        let act2 = tanh_forward(&pre2);
        let (out, head_cache) = arch.head.forward(&self.store, &act2)?;

        let mut grid = FrameGrid::zeros(
            t,
            self.config.views,
            self.config.height,
            self.config.width,
        );
        for f in 0..t {
            grid.frame_mut(f).copy_from_slice(out.row(f));
        }
        Ok((
            grid,
            ModelCache::Mlp(Box::new(MlpCache {
                embed: embed_cache,
                tokens,
                fc1: fc1_cache,
                act1,
                fc2: fc2_cache,
                act2,
                head: head_cache,
                cond_mask: cond.cond_mask.clone(),
                meta,
            })),
        ))
    }

    fn backward_mlp(&mut self, cache: MlpCache, upstream: &FrameGrid) -> Result<(), FlowError> {
        let Arch::Mlp(arch) = &self.arch else {
            unreachable!("backbone dispatch");
        };
        let arch = MlpArch {
            embed: arch.embed.clone(),
            fc1: arch.fc1.clone(),
            fc2: arch.fc2.clone(),
            head: arch.head.clone(),
            scene: arch.scene.clone(),
        };
        let t = upstream.num_frames();
        let pixels = self.config.frame_len();
        let h = self.config.hidden;
        let mut d_out = NumArray::zeros(&[t, pixels]);
        for f in 0..t {
            d_out.row_mut(f).copy_from_slice(upstream.frame(f));
        }
        let d_act2 = arch.head.backward(&mut self.store, &cache.head, &d_out)?;
        let d_pre2 = tanh_backward(&cache.act2, &d_act2).map_err(LayerError::from)?;
        let d_act1 = arch.fc2.backward(&mut self.store, &cache.fc2, &d_pre2)?;
        let d_pre1 = tanh_backward(&cache.act1, &d_act1).map_err(LayerError::from)?;
        let d_body = arch.fc1.backward(&mut self.store, &cache.fc1, &d_pre1)?;

        // Split the body gradient into per-frame token part and context
        // part; the context gradient flows back evenly to condition frames.
        let mut d_tokens = NumArray::zeros(&[t, h]);
        let mut d_ctx = vec![0.0; h];
        for f in 0..t {
            let row = d_body.row(f);
            d_tokens.row_mut(f).copy_from_slice(&row[..h]);
            for (c, v) in d_ctx.iter_mut().zip(&row[h..]) {
                *c += v;
            }
        }
        let n_cond = cache.cond_mask.iter().filter(|c| **c).count();
        if n_cond > 0 {
            for f in 0..t {
                if cache.cond_mask[f] {
                    for (g, v) in d_tokens.row_mut(f).iter_mut().zip(&d_ctx) {
                        *g += v / n_cond as Real;
                    }
                }
            }
        }
        let d_pre = tanh_backward(&cache.tokens, &d_tokens).map_err(LayerError::from)?;
        let d_input = arch.embed.backward(&mut self.store, &cache.embed, &d_pre)?;
        let mut d_features = NumArray::zeros(&[t, self.config.feature_dim()]);
        for f in 0..t {
            d_features
                .row_mut(f)
                .copy_from_slice(&d_input.row(f)[pixels..]);
        }
        self.backprop_features(&d_features, &cache.meta)?;
        Ok(())
    }

    /// Token row index of spatial slot `s` in frame `f`.
    fn token_index(&self, f: usize, s: usize) -> usize {
        let n_sp = self.spatial_tokens();
        f * n_sp + s
    }

    fn spatial_tokens(&self) -> usize {
        let c = &self.config;
        c.views * (c.height / c.patch) * (c.width / c.patch)
    }

    /// Copies pixel patches of every frame into `[frames * n_sp, patch^2]`.
    fn patchify(&self, frames: &FrameGrid) -> NumArray {
        let c = &self.config;
        let p = c.patch;
        let (ph, pw) = (c.height / p, c.width / p);
        let t = frames.num_frames();
        let n_sp = self.spatial_tokens();
        let mut out = NumArray::zeros(&[t * n_sp, p * p]);
        for f in 0..t {
            let pix = frames.frame(f);
            let mut s = 0usize;
            for v in 0..c.views {
                for py in 0..ph {
                    for px in 0..pw {
                        let row = out.row_mut(self.token_index(f, s));
                        for dy in 0..p {
                            for dx in 0..p {
                                let y = py * p + dy;
                                let x = px * p + dx;
                                row[dy * p + dx] = pix[v * c.height * c.width + y * c.width + x];
                            }
                        }
                        s += 1;
                    }
                }
            }
        }
        out
    }

    /// Inverse of [`Self::patchify`] for head outputs.
    fn unpatchify(&self, tokens: &NumArray, t: usize) -> FrameGrid {
        let c = &self.config;
        let p = c.patch;
        let (ph, pw) = (c.height / p, c.width / p);
        let mut grid = FrameGrid::zeros(t, c.views, c.height, c.width);
        for f in 0..t {
            let pix = grid.frame_mut(f);
            let mut s = 0usize;
            for v in 0..c.views {
                for py in 0..ph {
                    for px in 0..pw {
                        let row = tokens.row(self.token_index(f, s));
                        for dy in 0..p {
                            for dx in 0..p {
                                let y = py * p + dy;
                                let x = px * p + dx;
                                pix[v * c.height * c.width + y * c.width + x] = row[dy * p + dx];
                            }
                        }
                        s += 1;
                    }
                }
            }
        }
        grid
    }

    fn forward_attn(
        &self,
        frames: &FrameGrid,
        timestamps: &[Real],
        cond: &Conditioning,
    ) -> Result<(FrameGrid, ModelCache), FlowError> {
        let Arch::Attn(arch) = &self.arch else {
            unreachable!("backbone dispatch");
        };
        let t = frames.num_frames();
        let n_sp = self.spatial_tokens();
        let c = self.config.channels;
        let (features, meta) = self.build_features(t, timestamps, cond)?;
        let patches = self.patchify(frames);
        let (tok0, patch_cache) = arch.patch_embed.forward(&self.store, &patches)?;
        let (feat_proj, feat_cache) = arch.feat_embed.forward(&self.store, &features)?;

        let mut x0 = tok0;
        {
            let pos_sp = self.store.value(arch.pos_spatial);
            let pos_tm = self.store.value(arch.pos_temporal);
            for f in 0..t {
                for s in 0..n_sp {
                    let row = x0.row_mut(f * n_sp + s);
                    for i in 0..c {
                        row[i] += feat_proj.row(f)[i] + pos_sp.row(s)[i] + pos_tm.row(f)[i];
                    }
                }
            }
        }

        // Spatial-view attention: tokens of one frame attend to each other.
        let (n_sp_x, sp_ln_cache) = arch.ln_sp.forward(&self.store, &x0)?;
        let (q_all, q_cache) = arch.q_sp.forward(&self.store, &n_sp_x)?;
        let (k_all, k_cache) = arch.k_sp.forward(&self.store, &n_sp_x)?;
        let (v_all, v_cache) = arch.v_sp.forward(&self.store, &n_sp_x)?;
        let mut attn_out = NumArray::zeros(&[t * n_sp, c]);
        let mut attn_sp = Vec::with_capacity(t);
        for f in 0..t {
            let idx: Vec<usize> = (0..n_sp).map(|s| f * n_sp + s).collect();
            let (out, cache) = attention_forward(
                &gather_rows(&q_all, &idx),
                &gather_rows(&k_all, &idx),
                &gather_rows(&v_all, &idx),
            )?;
            scatter_rows(&mut attn_out, &idx, &out);
            attn_sp.push(cache);
        }
        let (proj_sp, o_sp_cache) = arch.o_sp.forward(&self.store, &attn_out)?;
        let mut x1 = x0.clone();
        x1.add_assign(&proj_sp).map_err(LayerError::from)?;

        // Temporal attention: the same spatial slot attends across frames.
        let (n_tm_x, tm_ln_cache) = arch.ln_tm.forward(&self.store, &x1)?;
        let (qt_all, qt_cache) = arch.q_tm.forward(&self.store, &n_tm_x)?;
        let (kt_all, kt_cache) = arch.k_tm.forward(&self.store, &n_tm_x)?;
        let (vt_all, vt_cache) = arch.v_tm.forward(&self.store, &n_tm_x)?;
        let mut attn_out_tm = NumArray::zeros(&[t * n_sp, c]);
        let mut attn_tm = Vec::with_capacity(n_sp);
        for s in 0..n_sp {
            let idx: Vec<usize> = (0..t).map(|f| f * n_sp + s).collect();
            let (out, cache) = attention_forward(
                &gather_rows(&qt_all, &idx),
                &gather_rows(&kt_all, &idx),
                &gather_rows(&vt_all, &idx),
            )?;
            scatter_rows(&mut attn_out_tm, &idx, &out);
            attn_tm.push(cache);
        }
        let (proj_tm, o_tm_cache) = arch.o_tm.forward(&self.store, &attn_out_tm)?;
        let mut x2 = x1;
        x2.add_assign(&proj_tm).map_err(LayerError::from)?;

        // Pointwise feed-forward.
        let (n_ff_x, ff_ln_cache) = arch.ln_ff.forward(&self.store, &x2)?;
        let (pre, ff_a_cache) = arch.ff_a.forward(&self.store, &n_ff_x)?;
        let act = tanh_forward(&pre);
        let (ff_out, ff_b_cache) = arch.ff_b.forward(&self.store, &act)?;
        let mut x3 = x2;
        x3.add_assign(&ff_out).map_err(LayerError::from)?;

        let (head_out, head_cache) = arch.head.forward(&self.store, &x3)?;
        let grid = self.unpatchify(&head_out, t);
        Ok((
            grid,
            ModelCache::Attn(Box::new(AttnNetCache {
                patch_embed: patch_cache,
                feat_embed: feat_cache,
                frames: t,
                ln_sp: sp_ln_cache,
                q_sp: q_cache,
                k_sp: k_cache,
                v_sp: v_cache,
                attn_sp,
                o_sp: o_sp_cache,
                ln_tm: tm_ln_cache,
                q_tm: qt_cache,
                k_tm: kt_cache,
                v_tm: vt_cache,
                attn_tm,
                o_tm: o_tm_cache,
                ln_ff: ff_ln_cache,
                ff_a: ff_a_cache,
                act,
                ff_b: ff_b_cache,
                head: head_cache,
                meta,
            })),
        ))
    }

    fn backward_attn(
        &mut self,
        cache: AttnNetCache,
        upstream: &FrameGrid,
    ) -> Result<(), FlowError> {
        let arch = match &self.arch {
            Arch::Attn(a) => AttnArch {
                patch_embed: a.patch_embed.clone(),
                feat_embed: a.feat_embed.clone(),
                pos_spatial: a.pos_spatial,
                pos_temporal: a.pos_temporal,
                ln_sp: a.ln_sp.clone(),
                q_sp: a.q_sp.clone(),
                k_sp: a.k_sp.clone(),
                v_sp: a.v_sp.clone(),
                o_sp: a.o_sp.clone(),
                ln_tm: a.ln_tm.clone(),
                q_tm: a.q_tm.clone(),
                k_tm: a.k_tm.clone(),
                v_tm: a.v_tm.clone(),
                o_tm: a.o_tm.clone(),
                ln_ff: a.ln_ff.clone(),
                ff_a: a.ff_a.clone(),
                ff_b: a.ff_b.clone(),
                head: a.head.clone(),
                scene: a.scene.clone(),
            },
            Arch::Mlp(_) => unreachable!("backbone dispatch"),
        };
        let t = cache.frames;
        let n_sp = self.spatial_tokens();
        let c = self.config.channels;

        let d_head_out = self.patchify(upstream);
        let d_x3 = arch
            .head
            .backward(&mut self.store, &cache.head, &d_head_out)?;

        // Feed-forward block.
        let d_ff_out = arch.ff_b.backward(&mut self.store, &cache.ff_b, &d_x3)?;
        let d_pre = tanh_backward(&cache.act, &d_ff_out).map_err(LayerError::from)?;
        let d_n_ff = arch.ff_a.backward(&mut self.store, &cache.ff_a, &d_pre)?;
        let mut d_x2 = arch.ln_ff.backward(&mut self.store, &cache.ln_ff, &d_n_ff)?;
        d_x2.add_assign(&d_x3).map_err(LayerError::from)?;

        // Temporal attention block.
        let d_attn_tm = arch.o_tm.backward(&mut self.store, &cache.o_tm, &d_x2)?;
        let mut d_qt = NumArray::zeros(&[t * n_sp, c]);
        let mut d_kt = NumArray::zeros(&[t * n_sp, c]);
        let mut d_vt = NumArray::zeros(&[t * n_sp, c]);
        for s in 0..n_sp {
            let idx: Vec<usize> = (0..t).map(|f| f * n_sp + s).collect();
            let (dq, dk, dv) =
                attention_backward(&cache.attn_tm[s], &gather_rows(&d_attn_tm, &idx))?;
            scatter_rows(&mut d_qt, &idx, &dq);
            scatter_rows(&mut d_kt, &idx, &dk);
            scatter_rows(&mut d_vt, &idx, &dv);
        }
        let mut d_n_tm = arch.q_tm.backward(&mut self.store, &cache.q_tm, &d_qt)?;
        d_n_tm
            .add_assign(&arch.k_tm.backward(&mut self.store, &cache.k_tm, &d_kt)?)
            .map_err(LayerError::from)?;
        d_n_tm
            .add_assign(&arch.v_tm.backward(&mut self.store, &cache.v_tm, &d_vt)?)
            .map_err(LayerError::from)?;
        let mut d_x1 = arch.ln_tm.backward(&mut self.store, &cache.ln_tm, &d_n_tm)?;
        d_x1.add_assign(&d_x2).map_err(LayerError::from)?;

        // Spatial attention block.
        let d_attn_sp = arch.o_sp.backward(&mut self.store, &cache.o_sp, &d_x1)?;
        let mut d_qs = NumArray::zeros(&[t * n_sp, c]);
        let mut d_ks = NumArray::zeros(&[t * n_sp, c]);
        let mut d_vs = NumArray::zeros(&[t * n_sp, c]);
        for f in 0..t {
            let idx: Vec<usize> = (0..n_sp).map(|s| f * n_sp + s).collect();
            let (dq, dk, dv) =
                attention_backward(&cache.attn_sp[f], &gather_rows(&d_attn_sp, &idx))?;
            scatter_rows(&mut d_qs, &idx, &dq);
            scatter_rows(&mut d_ks, &idx, &dk);
            scatter_rows(&mut d_vs, &idx, &dv);
        }
        let mut d_n_sp = arch.q_sp.backward(&mut self.store, &cache.q_sp, &d_qs)?;
        d_n_sp
            .add_assign(&arch.k_sp.backward(&mut self.store, &cache.k_sp, &d_ks)?)
            .map_err(LayerError::from)?;
        d_n_sp
            .add_assign(&arch.v_sp.backward(&mut self.store, &cache.v_sp, &d_vs)?)
            .map_err(LayerError::from)?;
        let mut d_x0 = arch.ln_sp.backward(&mut self.store, &cache.ln_sp, &d_n_sp)?;
        d_x0.add_assign(&d_x1).map_err(LayerError::from)?;

        // Embeddings: positions, per-frame features, patch projection.
        let mut d_feat_proj = NumArray::zeros(&[t, c]);
        {
            let mut d_pos_sp = vec![0.0; n_sp * c];
            let mut d_pos_tm = vec![0.0; t * c];
            for f in 0..t {
                for s in 0..n_sp {
                    let row = d_x0.row(f * n_sp + s);
                    for i in 0..c {
                        d_feat_proj.row_mut(f)[i] += row[i];
                        d_pos_sp[s * c + i] += row[i];
                        d_pos_tm[f * c + i] += row[i];
                    }
                }
            }
            {
                let g = self.store.grad_mut(arch.pos_spatial).as_mut_slice();
                for (gv, dv) in g.iter_mut().zip(&d_pos_sp) {
                    *gv += dv;
                }
            }
            {
                let g = self.store.grad_mut(arch.pos_temporal).as_mut_slice();
                for (gv, dv) in g.iter_mut().take(t * c).zip(&d_pos_tm) {
                    *gv += dv;
                }
            }
        }
        let d_features =
            arch.feat_embed
                .backward(&mut self.store, &cache.feat_embed, &d_feat_proj)?;
        arch.patch_embed
            .backward(&mut self.store, &cache.patch_embed, &d_x0)?;
        self.backprop_features(&d_features, &cache.meta)?;
        Ok(())
    }
}

fn gather_rows(m: &NumArray, idx: &[usize]) -> NumArray {
    let cols = m.shape()[1];
    let mut out = NumArray::zeros(&[idx.len(), cols]);
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(m.row(i));
    }
    out
}

fn scatter_rows(dst: &mut NumArray, idx: &[usize], src: &NumArray) {
    for (r, &i) in idx.iter().enumerate() {
        dst.row_mut(i).copy_from_slice(src.row(r));
    }
}

impl VelocityField for VelocityModel {
    type Cache = ModelCache;

    fn forward(
        &self,
        frames: &FrameGrid,
        timestamps: &[Real],
        cond: &Conditioning,
    ) -> Result<(FrameGrid, ModelCache), FlowError> {
        self.validate_inputs(frames, timestamps, cond)?;
        match self.config.backbone {
            Backbone::Mlp => self.forward_mlp(frames, timestamps, cond),
            Backbone::Attn => self.forward_attn(frames, timestamps, cond),
        }
    }

    fn backward(&mut self, cache: ModelCache, upstream: &FrameGrid) -> Result<(), FlowError> {
        match cache {
            ModelCache::Mlp(c) => self.backward_mlp(*c, upstream),
            ModelCache::Attn(c) => self.backward_attn(*c, upstream),
        }
    }
}
