//! Injects the aggregated feature into `Map₄`.

use dbat_tensor::{ParamStore, Var};

use crate::attention::windowed_attention;
use crate::config::{EncoderConfig, MergeConfig, MergeMode, NUM_STAGES};
use crate::error::{DbatError, Result};
use crate::layers::{Ctx, Init, LayerNorm, Linear};

/// Window cross-attention: queries from `Map₄`, keys and values from the
/// aggregated feature. Both inputs are layer-normalized before projection.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub heads: usize,
    pub window: usize,
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
}

#[derive(Clone, Debug)]
pub struct Merge {
    pub mode: MergeMode,
    pub cross: Option<CrossAttention>,
}

impl Merge {
    /// `window` is the side used at stage 4.
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &MergeConfig, enc: &EncoderConfig, window: usize) -> Result<Self> {
        let cross = match cfg.mode {
            MergeMode::PlainResidual => None,
            MergeMode::Attention => {
                let c = enc.channels(NUM_STAGES - 1);
                let heads = enc.heads[NUM_STAGES - 1];
                Some(CrossAttention {
                    heads,
                    window,
                    norm_q: LayerNorm::new(store, "merge.norm_q", c)?,
                    norm_kv: LayerNorm::new(store, "merge.norm_kv", c)?,
                    q_proj: Linear::new(store, init, "merge.q_proj", c, c, true)?,
                    k_proj: Linear::new(store, init, "merge.k_proj", c, c, true)?,
                    v_proj: Linear::new(store, init, "merge.v_proj", c, c, true)?,
                    out_proj: Linear::new(store, init, "merge.out_proj", c, c, true)?,
                })
            }
        };
        Ok(Self { mode: cfg.mode, cross })
    }

    /// `[N, C₄, H₄, W₄]` inputs to the merged feature of the same shape.
    /// Also returns the cross-attention weights when in attention mode.
    pub fn forward<'g>(&self, ctx: &Ctx<'g>, map4: &Var<'g>, aggregated: &Var<'g>) -> Result<(Var<'g>, Option<Var<'g>>)> {
        if map4.shape() != aggregated.shape() {
            return Err(DbatError::Tensor(dbat_tensor::TensorError::Shape {
                op: "merge",
                detail: format!("map4 {:?} vs aggregated {:?}", map4.shape(), aggregated.shape()),
            }));
        }
        let Some(x) = &self.cross else {
            return Ok((map4.add(aggregated)?, None));
        };
        let s = map4.shape();
        if s[2] % x.window != 0 || s[3] % x.window != 0 {
            return Err(DbatError::Tensor(dbat_tensor::TensorError::Shape {
                op: "merge",
                detail: format!("{}x{} map is not divisible by window {}", s[2], s[3], x.window),
            }));
        }
        let m = map4.nchw_to_nhwc()?;
        let a = aggregated.nchw_to_nhwc()?;
        let mq = x.norm_q.forward(ctx, &m)?;
        let ak = x.norm_kv.forward(ctx, &a)?;
        let q = x.q_proj.forward(ctx, &mq)?;
        let k = x.k_proj.forward(ctx, &ak)?;
        let v = x.v_proj.forward(ctx, &ak)?;
        let (mixed, attn) = windowed_attention(&q, &k, &v, x.heads, x.window, None, None)?;
        let out = x.out_proj.forward(ctx, &mixed)?.nhwc_to_nchw()?;
        Ok((map4.add(&out)?, Some(attn)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dbat_tensor::{Graph, Precision, Tensor};

    fn inputs(g: &Graph) -> (Var<'_>, Var<'_>) {
        let a = g.constant(Tensor::from_fn([1, 128, 2, 2], |i| (i as f64 * 0.37).sin()));
        let b = g.constant(Tensor::from_fn([1, 128, 2, 2], |i| (i as f64 * 0.11).cos()));
        (a, b)
    }

    #[test]
    fn plain_residual_with_zero_aggregate_is_identity() {
        let mut store = ParamStore::new();
        let cfg = MergeConfig {
            mode: MergeMode::PlainResidual,
        };
        let merge = Merge::new(&mut store, &mut Init::new(0), &cfg, &EncoderConfig::default(), 2).unwrap();
        assert!(store.is_empty());
        let g = Graph::new(Precision::Double);
        let ctx = Ctx::new(&g, &store);
        let (m4, _) = inputs(&g);
        let zero = g.constant(Tensor::zeros([1, 128, 2, 2]));
        let (out, attn) = merge.forward(&ctx, &m4, &zero).unwrap();
        assert_eq!(*out.value(), *m4.value());
        assert!(attn.is_none());
    }

    #[test]
    fn zero_output_projection_leaves_map4() {
        let mut store = ParamStore::new();
        let merge = Merge::new(&mut store, &mut Init::new(0), &MergeConfig::default(), &EncoderConfig::default(), 2).unwrap();
        store.value_mut("merge.out_proj.weight").unwrap().data_mut().fill(0.0);
        let g = Graph::new(Precision::Double);
        let ctx = Ctx::new(&g, &store);
        let (m4, agg) = inputs(&g);
        let (out, attn) = merge.forward(&ctx, &m4, &agg).unwrap();
        assert_eq!(*out.value(), *m4.value());
        let attn = attn.unwrap().value();
        for row in attn.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut store = ParamStore::new();
        let merge = Merge::new(&mut store, &mut Init::new(0), &MergeConfig::default(), &EncoderConfig::default(), 2).unwrap();
        let g = Graph::new(Precision::Double);
        let ctx = Ctx::new(&g, &store);
        let (m4, _) = inputs(&g);
        let other = g.constant(Tensor::zeros([1, 128, 4, 4]));
        assert!(merge.forward(&ctx, &m4, &other).is_err());
    }
}
