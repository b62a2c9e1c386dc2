//! Dynamic backward attention: per-pixel weights over the four stage
//! outputs, predicted from the deepest stage.

use dbat_tensor::{pixel_weighted_sum, ParamStore, Tensor, Var};

use crate::config::{DbaConfig, Downsampler, EncoderConfig, MaskPredictor, NUM_STAGES};
use crate::encoder::StagePyramid;
use crate::error::{DbatError, Result};
use crate::layers::{Conv1x1, Conv2d, Ctx, Init, Linear};

/// `[N, 4, H₄, W₄]` softmax weights; channel `i` weights `Mapᵢ₊₁`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionStack<'g> {
    pub weights: Var<'g>,
}

impl<'g> AttentionStack<'g> {
    /// Mean weight of each stage over all pixels and batch entries.
    pub fn stage_means(&self) -> [f64; NUM_STAGES] {
        stage_means(&self.weights.value())
    }
}

/// Per-stage means of a `[N, 4, H, W]` weight tensor.
pub fn stage_means(weights: &Tensor) -> [f64; NUM_STAGES] {
    let s = weights.shape();
    let (n, hw) = (s[0], s[2] * s[3]);
    let mut means = [0.0; NUM_STAGES];
    for b in 0..n {
        for (i, m) in means.iter_mut().enumerate() {
            let o = (b * NUM_STAGES + i) * hw;
            *m += weights.data()[o..o + hw].iter().sum::<f64>();
        }
    }
    means.map(|m| m / (n * hw) as f64)
}

#[derive(Clone, Debug)]
enum Predictor {
    Conv1x1(Conv1x1),
    Dilated(Conv2d),
}

#[derive(Clone, Debug)]
enum Projection {
    /// Space-to-depth followed by a linear map.
    Mlp(Linear),
    /// Average pooling followed by a 1×1 convolution.
    Pool(Conv1x1),
}

#[derive(Clone, Debug)]
pub struct Dba {
    pub cfg: DbaConfig,
    predictor: Predictor,
    /// Projections for `Map₁..Map₃`.
    projections: Vec<Projection>,
}

/// Down-sampling factor from stage `i` (1-based) to stage 4.
pub fn factor(i: usize) -> usize {
    1 << (NUM_STAGES - i)
}

impl Dba {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &DbaConfig, enc: &EncoderConfig) -> Result<Self> {
        let c4 = enc.channels(NUM_STAGES - 1);
        let predictor = match cfg.mask_predictor {
            MaskPredictor::Conv1x1 => Predictor::Conv1x1(Conv1x1::new(store, init, "dba.mask", c4, NUM_STAGES)?),
            MaskPredictor::DilatedConv => {
                Predictor::Dilated(Conv2d::same(store, init, "dba.mask", c4, NUM_STAGES, 3, cfg.dilation)?)
            }
        };
        let projections = (1..NUM_STAGES)
            .map(|i| {
                let ci = enc.channels(i - 1);
                let name = format!("dba.down{i}");
                Ok(match cfg.downsampler {
                    Downsampler::Mlp => {
                        let f = factor(i);
                        Projection::Mlp(Linear::new(store, init, &name, f * f * ci, c4, true)?)
                    }
                    Downsampler::AveragePool => Projection::Pool(Conv1x1::new(store, init, &name, ci, c4)?),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            predictor,
            projections,
        })
    }

    /// Four-channel logits from `Map₄`, softmax-normalized per pixel.
    pub fn predict_masks<'g>(&self, ctx: &Ctx<'g>, map4: &Var<'g>) -> Result<AttentionStack<'g>> {
        let logits = match &self.predictor {
            Predictor::Conv1x1(c) => c.forward(ctx, map4)?,
            Predictor::Dilated(c) => c.forward(ctx, map4)?,
        };
        Ok(AttentionStack {
            weights: logits.softmax(1)?,
        })
    }

    /// Bring `Mapᵢ` (`i` in 1..=3) to `Map₄`'s spatial size and channel count.
    pub fn downsample_map<'g>(&self, ctx: &Ctx<'g>, map: &Var<'g>, i: usize) -> Result<Var<'g>> {
        if !(1..NUM_STAGES).contains(&i) {
            return Err(DbatError::Argument(format!("downsample_map: stage {i} outside 1..=3")));
        }
        let f = factor(i);
        match &self.projections[i - 1] {
            Projection::Mlp(lin) => {
                let blocks = map.nchw_to_nhwc()?.space_to_depth(f)?;
                Ok(lin.forward(ctx, &blocks)?.nhwc_to_nchw()?)
            }
            Projection::Pool(conv) => conv.forward(ctx, &map.avg_pool(f)?),
        }
    }

    /// `Σᵢ Attnᵢ ⊙ Mapᵢ` over maps already at `Map₄`'s shape.
    pub fn aggregate<'g>(maps: &[Var<'g>; NUM_STAGES], attn: &AttentionStack<'g>) -> Result<Var<'g>> {
        Ok(pixel_weighted_sum(maps, &attn.weights)?)
    }

    /// Masks, down-sampled maps and the aggregated feature for a pyramid.
    pub fn forward<'g>(&self, ctx: &Ctx<'g>, pyramid: &StagePyramid<'g>) -> Result<DbaOutput<'g>> {
        let map4 = pyramid.maps[NUM_STAGES - 1];
        let attn = self.predict_masks(ctx, &map4)?;
        let mut down = Vec::with_capacity(NUM_STAGES);
        for i in 1..NUM_STAGES {
            down.push(self.downsample_map(ctx, &pyramid.maps[i - 1], i)?);
        }
        down.push(map4);
        let down: [Var<'g>; NUM_STAGES] = down.try_into().expect("four maps");
        let aggregated = Self::aggregate(&down, &attn)?;
        Ok(DbaOutput { attn, down, aggregated })
    }
}

#[derive(Clone, Debug)]
pub struct DbaOutput<'g> {
    pub attn: AttentionStack<'g>,
    pub down: [Var<'g>; NUM_STAGES],
    pub aggregated: Var<'g>,
}
