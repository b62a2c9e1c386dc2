//! Four-stage windowed-attention backbone.
//!
//! Stage `i` (1-based) works on tokens at stride `2·2ⁱ`: a 4×4 patch
//! embedding feeds stage 1 and each later stage begins with a 2×2 patch
//! merge. Every stage output passes through its own layer norm before being
//! exposed as `Mapᵢ`; the un-normalized tokens continue to the next stage.

use dbat_tensor::{ParamStore, Var};

use crate::attention::{relative_position_index, shifted_window_mask, windowed_attention};
use crate::config::{EncoderConfig, NUM_STAGES, STAGE_STRIDES};
use crate::error::{DbatError, Result};
use crate::layers::{AttentionRecord, Ctx, Init, LayerNorm, Linear};

const PATCH: usize = 4;

/// The four stage outputs `Map₁..Map₄`, each `[N, Cᵢ, H/strideᵢ, W/strideᵢ]`.
#[derive(Clone, Debug)]
pub struct StagePyramid<'g> {
    pub maps: [Var<'g>; NUM_STAGES],
}

impl<'g> StagePyramid<'g> {
    pub const STRIDES: [usize; NUM_STAGES] = STAGE_STRIDES;

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.maps.iter().map(Var::shape).collect()
    }
}

/// 4×4 non-overlapping patches projected to `embed_dim`, then normalized.
///
/// Patch pixels are flattened as `(dy·4 + dx)·3 + channel`.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub norm: LayerNorm,
}

impl PatchEmbed {
    pub fn new(store: &mut ParamStore, init: &mut Init, prefix: &str, cfg: &EncoderConfig) -> Result<Self> {
        let fan_in = PATCH * PATCH * cfg.input_channels;
        Ok(Self {
            proj: Linear::new(store, init, &format!("{prefix}.proj"), fan_in, cfg.embed_dim, true)?,
            norm: LayerNorm::new(store, &format!("{prefix}.norm"), cfg.embed_dim)?,
        })
    }

    /// Linear projection of each patch, before normalization. NHWC output.
    pub fn project<'g>(&self, ctx: &Ctx<'g>, image: &Var<'g>) -> Result<Var<'g>> {
        let s = image.shape();
        if s.len() != 4 || s[2] % PATCH != 0 || s[3] % PATCH != 0 {
            return Err(DbatError::Tensor(dbat_tensor::TensorError::Shape {
                op: "patch_embed",
                detail: format!("image {s:?} is not NCHW with H, W divisible by {PATCH}"),
            }));
        }
        let patches = image.nchw_to_nhwc()?.space_to_depth(PATCH)?;
        self.proj.forward(ctx, &patches)
    }

    /// `[N, 3, H, W]` image to `[N, H/4, W/4, C₁]` tokens.
    pub fn forward<'g>(&self, ctx: &Ctx<'g>, image: &Var<'g>) -> Result<Var<'g>> {
        let x = self.project(ctx, image)?;
        self.norm.forward(ctx, &x)
    }

    /// As [`PatchEmbed::forward`], returning `[N, C₁, H/4, W/4]`.
    pub fn forward_nchw<'g>(&self, ctx: &Ctx<'g>, image: &Var<'g>) -> Result<Var<'g>> {
        Ok(self.forward(ctx, image)?.nhwc_to_nchw()?)
    }
}

/// Concatenate each 2×2 neighbourhood (`4C` channels, order
/// `(dy·2 + dx)·C + c`), normalize, project to `2C` without bias.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub norm: LayerNorm,
    pub reduction: Linear,
}

impl PatchMerge {
    pub fn new(store: &mut ParamStore, init: &mut Init, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{prefix}.norm"), 4 * dim)?,
            reduction: Linear::new(store, init, &format!("{prefix}.reduction"), 4 * dim, 2 * dim, false)?,
        })
    }

    /// `[N, H, W, C]` tokens to `[N, H/2, W/2, 2C]`.
    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: &Var<'g>) -> Result<Var<'g>> {
        let s = x.shape();
        if s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(DbatError::Tensor(dbat_tensor::TensorError::Shape {
                op: "patch_merge",
                detail: format!("odd spatial size {}x{}", s[1], s[2]),
            }));
        }
        let cat = x.space_to_depth(2)?;
        let normed = self.norm.forward(ctx, &cat)?;
        self.reduction.forward(ctx, &normed)
    }

    pub fn forward_nchw<'g>(&self, ctx: &Ctx<'g>, x: &Var<'g>) -> Result<Var<'g>> {
        self.forward(ctx, &x.nchw_to_nhwc()?)?.nhwc_to_nchw().map_err(Into::into)
    }
}

/// Pre-norm transformer block with windowed multi-head self-attention,
/// learned relative position bias and a GELU MLP.
#[derive(Clone, Debug)]
pub struct WindowBlock {
    pub name: String,
    pub heads: usize,
    pub window: usize,
    pub shifted: bool,
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub rel_bias_table: String,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl WindowBlock {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        mlp_ratio: usize,
        shifted: bool,
    ) -> Result<Self> {
        let table = format!("{name}.attn.relative_position_bias_table");
        let side = 2 * window - 1;
        store.insert(&table, init.trunc_normal(&[side * side, heads], 0.02))?;
        Ok(Self {
            name: name.to_string(),
            heads,
            window,
            shifted,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            qkv: Linear::new(store, init, &format!("{name}.attn.qkv"), dim, 3 * dim, true)?,
            rel_bias_table: table,
            proj: Linear::new(store, init, &format!("{name}.attn.proj"), dim, dim, true)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            fc1: Linear::new(store, init, &format!("{name}.mlp.fc1"), dim, mlp_ratio * dim, true)?,
            fc2: Linear::new(store, init, &format!("{name}.mlp.fc2"), mlp_ratio * dim, dim, true)?,
        })
    }

    fn relative_bias<'g>(&self, ctx: &Ctx<'g>) -> Result<Var<'g>> {
        let t = self.window * self.window;
        let table = ctx.param(&self.rel_bias_table)?;
        Ok(table
            .index_select(&relative_position_index(self.window))?
            .reshape(&[t, t, self.heads])?
            .permute(&[2, 0, 1])?)
    }

    /// `[N, H, W, C]` -> `[N, H, W, C]`. Records attention weights under
    /// `self.name` when the context is recording.
    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: &Var<'g>, stage: usize) -> Result<Var<'g>> {
        let s = x.shape();
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        if h % self.window != 0 || w % self.window != 0 {
            return Err(DbatError::Tensor(dbat_tensor::TensorError::Shape {
                op: "window_attention",
                detail: format!("{h}x{w} map is not divisible by window {}", self.window),
            }));
        }
        let shift = if self.shifted && self.window < h.min(w) { self.window / 2 } else { 0 };
        let mut normed = self.norm1.forward(ctx, x)?;
        if shift > 0 {
            let sh = -(shift as isize);
            normed = normed.roll(&[(1, sh), (2, sh)])?;
        }
        let qkv = self.qkv.forward(ctx, &normed)?;
        let qkv = qkv.reshape(&[n * h * w, 3, c])?.permute(&[1, 0, 2])?;
        let pick = |i: usize| -> Result<Var<'g>> { Ok(qkv.index_select(&[i])?.reshape(&[n, h, w, c])?) };
        let (q, k, v) = (pick(0)?, pick(1)?, pick(2)?);
        let bias = self.relative_bias(ctx)?;
        let mask = (shift > 0).then(|| ctx.constant(shifted_window_mask(h, w, self.window, shift, self.heads)));
        let (mixed, attn) = windowed_attention(&q, &k, &v, self.heads, self.window, Some(&bias), mask.as_ref())?;
        let mut out = self.proj.forward(ctx, &mixed)?;
        if shift > 0 {
            let sh = shift as isize;
            out = out.roll(&[(1, sh), (2, sh)])?;
        }
        if ctx.is_recording() {
            ctx.record_attention(AttentionRecord {
                layer: self.name.clone(),
                stage,
                stride: STAGE_STRIDES[stage],
                window: self.window,
                weights: (*attn.value()).clone(),
            });
        }
        let x = x.add(&out)?;
        let hidden = self.fc1.forward(ctx, &self.norm2.forward(ctx, &x)?)?.gelu();
        Ok(x.add(&self.fc2.forward(ctx, &hidden)?)?)
    }

    /// NCHW convenience wrapper around [`WindowBlock::forward`].
    pub fn forward_nchw<'g>(&self, ctx: &Ctx<'g>, x: &Var<'g>, stage: usize) -> Result<Var<'g>> {
        Ok(self.forward(ctx, &x.nchw_to_nhwc()?, stage)?.nhwc_to_nchw()?)
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub merge: Option<PatchMerge>,
    pub blocks: Vec<WindowBlock>,
    pub norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub patch_embed: PatchEmbed,
    pub stages: Vec<Stage>,
    /// Window side per stage, fixed at construction from the input size.
    pub windows: [usize; NUM_STAGES],
}

impl Encoder {
    /// Build for `h × w` inputs.
    ///
    /// The window of a stage is clamped to its map size, so the parameter
    /// layout depends on the input size the model is built for.
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &EncoderConfig, h: usize, w: usize) -> Result<Self> {
        cfg.validate()?;
        cfg.validate_input(h, w)?;
        let patch_embed = PatchEmbed::new(store, init, "encoder.patch_embed", cfg)?;
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut windows = [0; NUM_STAGES];
        for s in 0..NUM_STAGES {
            let dim = cfg.channels(s);
            let window = cfg.effective_window(h / STAGE_STRIDES[s], w / STAGE_STRIDES[s]);
            windows[s] = window;
            let prefix = format!("encoder.stage{}", s + 1);
            let merge = if s > 0 {
                Some(PatchMerge::new(store, init, &format!("{prefix}.downsample"), cfg.channels(s - 1))?)
            } else {
                None
            };
            let blocks = (0..cfg.depths[s])
                .map(|b| {
                    let shifted = cfg.shifted_windows && b % 2 == 1;
                    WindowBlock::new(store, init, &format!("{prefix}.block{b}"), dim, cfg.heads[s], window, cfg.mlp_ratio, shifted)
                })
                .collect::<Result<_>>()?;
            let norm = LayerNorm::new(store, &format!("{prefix}.norm"), dim)?;
            stages.push(Stage { merge, blocks, norm });
        }
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed,
            stages,
            windows,
        })
    }

    /// `[N, 3, H, W]` image to the four stage outputs. Records each block
    /// output as `stage{i}.block{j}` and each stage output as `map{i}`.
    pub fn encode<'g>(&self, ctx: &Ctx<'g>, image: &Var<'g>) -> Result<StagePyramid<'g>> {
        let s = image.shape();
        if s.len() != 4 || s[1] != self.cfg.input_channels {
            return Err(DbatError::Argument(format!("expected [N, 3, H, W] image, got {s:?}")));
        }
        self.cfg.validate_input(s[2], s[3])?;
        for (stage, stride) in STAGE_STRIDES.iter().enumerate() {
            let (hs, ws) = (s[2] / stride, s[3] / stride);
            let win = self.windows[stage];
            if hs % win != 0 || ws % win != 0 {
                return Err(DbatError::Argument(format!(
                    "stage {} map {hs}x{ws} does not tile the model's window {win}",
                    stage + 1
                )));
            }
        }
        let mut x = self.patch_embed.forward(ctx, image)?;
        let mut maps = Vec::with_capacity(NUM_STAGES);
        for (si, stage) in self.stages.iter().enumerate() {
            if let Some(m) = &stage.merge {
                x = m.forward(ctx, &x)?;
            }
            for (bi, block) in stage.blocks.iter().enumerate() {
                x = block.forward(ctx, &x, si)?;
                if ctx.is_recording() {
                    ctx.record_layer(format!("stage{}.block{bi}", si + 1), &x.nhwc_to_nchw()?);
                }
            }
            let map = stage.norm.forward(ctx, &x)?.nhwc_to_nchw()?;
            ctx.record_layer(format!("map{}", si + 1), &map);
            maps.push(map);
        }
        let maps: [Var<'g>; NUM_STAGES] = maps.try_into().expect("four stages");
        Ok(StagePyramid { maps })
    }
}
