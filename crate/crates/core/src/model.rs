//! The full segmentation network: encoder, backward attention, merging and
//! decoder, with the ablation switches applied at construction.

use dbat_tensor::{ParamStore, Var};

use crate::config::{ModelConfig, NUM_STAGES};
use crate::dba::{AttentionStack, Dba};
use crate::encoder::{Encoder, StagePyramid};
use crate::error::{DbatError, Result};
use crate::layers::{Ctx, Init};
use crate::merge::Merge;
use crate::seghead::FpnDecoder;

#[derive(Clone, Debug)]
pub struct Dbat {
    pub cfg: ModelConfig,
    pub image_size: usize,
    pub encoder: Encoder,
    /// Absent when `ablation.disable_dba` is set.
    pub dba: Option<Dba>,
    /// Absent when `ablation.disable_merge` is set.
    pub merge: Option<Merge>,
    pub decoder: FpnDecoder,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<'g> {
    /// `[N, K, H, W]`.
    pub logits: Var<'g>,
    pub pyramid: StagePyramid<'g>,
    pub attn: Option<AttentionStack<'g>>,
    pub aggregated: Option<Var<'g>>,
    pub merged: Option<Var<'g>>,
    /// Feature fed to the decoder's deepest level.
    pub top: Var<'g>,
}

impl Dbat {
    /// Build a freshly initialized model for square `image_size` inputs.
    /// Only parameters reachable under the configured ablation are created.
    pub fn new(cfg: &ModelConfig, image_size: usize, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let encoder = Encoder::new(&mut store, &mut init, &cfg.encoder, image_size, image_size)?;
        let dba = if cfg.ablation.disable_dba {
            None
        } else {
            Some(Dba::new(&mut store, &mut init, &cfg.dba, &cfg.encoder)?)
        };
        let merge = if cfg.ablation.disable_merge {
            None
        } else {
            Some(Merge::new(&mut store, &mut init, &cfg.merge, &cfg.encoder, encoder.windows[NUM_STAGES - 1])?)
        };
        let decoder = FpnDecoder::new(&mut store, &mut init, &cfg.encoder, cfg.fpn_width, cfg.num_classes)?;
        Ok((
            Self {
                cfg: cfg.clone(),
                image_size,
                encoder,
                dba,
                merge,
                decoder,
            },
            store,
        ))
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, image: &Var<'g>) -> Result<ForwardOutput<'g>> {
        let s = image.shape();
        if s.len() != 4 {
            return Err(DbatError::Argument(format!("expected [N, 3, H, W] image, got {s:?}")));
        }
        let pyramid = self.encoder.encode(ctx, image)?;
        let map4 = pyramid.maps[NUM_STAGES - 1];
        let (attn, aggregated) = match &self.dba {
            Some(d) => {
                let out = d.forward(ctx, &pyramid)?;
                ctx.record_masks(&out.attn.weights);
                ctx.record_layer("aggregated", &out.aggregated);
                (Some(out.attn), Some(out.aggregated))
            }
            None => (None, None),
        };
        let merged = match &self.merge {
            Some(m) => {
                let second = aggregated.unwrap_or(map4);
                let (merged, _) = m.forward(ctx, &map4, &second)?;
                ctx.record_layer("merged", &merged);
                Some(merged)
            }
            None => None,
        };
        let top = merged.or(aggregated).unwrap_or(map4);
        let levels = [pyramid.maps[0], pyramid.maps[1], pyramid.maps[2], top];
        let logits = self.decoder.decode(ctx, &levels, s[2], s[3])?;
        Ok(ForwardOutput {
            logits,
            pyramid,
            attn,
            aggregated,
            merged,
            top,
        })
    }
}
