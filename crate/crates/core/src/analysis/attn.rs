//! Attention statistics: mean backward-attention weight per stage and the
//! attention-weighted pixel distance of every encoder head.

use serde::{Deserialize, Serialize};

use crate::config::NUM_STAGES;
use crate::dba::stage_means;
use crate::error::{DbatError, Result};
use crate::layers::Trace;
use dbat_tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadStats {
    /// Mean over queries of `Σₖ α·‖p_q − p_k‖` in input pixels.
    pub distance: f64,
    /// Side of a square whose diagonal equals `distance`.
    pub side: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAttnStats {
    pub layer: String,
    /// 1-based.
    pub stage: usize,
    pub stride: usize,
    pub window: usize,
    pub heads: Vec<HeadStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    /// Mean weight of `Attn₁..Attn₄`; absent for models without masks.
    pub mask_means: Option<[f64; NUM_STAGES]>,
    pub layers: Vec<LayerAttnStats>,
    /// Mean equivalent side over every head of a stage.
    pub stage_sides: Vec<Option<f64>>,
}

pub fn side_from_distance(d: f64) -> f64 {
    d / std::f64::consts::SQRT_2
}

/// Per-head sums of attention-weighted distances and the query count,
/// for `[windows, heads, T, T]` weights with `T = window²`.
pub fn distance_sums(weights: &Tensor, window: usize, stride: usize) -> Result<(Vec<f64>, usize)> {
    let s = weights.shape();
    let t = window * window;
    if s.len() != 4 || s[2] != t || s[3] != t {
        return Err(DbatError::Argument(format!(
            "attention weights {s:?} do not match window {window}"
        )));
    }
    let (nw, heads) = (s[0], s[1]);
    let dist: Vec<f64> = (0..t * t)
        .map(|i| {
            let (q, k) = (i / t, i % t);
            let dy = (q / window) as f64 - (k / window) as f64;
            let dx = (q % window) as f64 - (k % window) as f64;
            (dy * dy + dx * dx).sqrt() * stride as f64
        })
        .collect();
    let mut sums = vec![0.0; heads];
    for b in 0..nw {
        for (h, sum) in sums.iter_mut().enumerate() {
            let block = &weights.data()[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
            *sum += block.iter().zip(&dist).map(|(a, d)| a * d).sum::<f64>();
        }
    }
    Ok((sums, nw * t))
}

/// Aggregate statistics over probe batches recorded with the same model.
pub fn attention_stats(traces: &[Trace]) -> Result<AttentionReport> {
    let Some(first) = traces.first() else {
        return Err(DbatError::Argument("no probe batches".into()));
    };
    let mut mask_sum = [0.0; NUM_STAGES];
    let mut mask_pixels = 0usize;
    let mut have_masks = true;
    for t in traces {
        match &t.masks {
            Some(m) => {
                let s = m.shape();
                let px = s[0] * s[2] * s[3];
                for (acc, mean) in mask_sum.iter_mut().zip(stage_means(m)) {
                    *acc += mean * px as f64;
                }
                mask_pixels += px;
            }
            None => have_masks = false,
        }
    }
    let mask_means = (have_masks && mask_pixels > 0).then(|| mask_sum.map(|s| s / mask_pixels as f64));

    let mut layers = Vec::with_capacity(first.attention.len());
    for (li, rec) in first.attention.iter().enumerate() {
        let heads = rec.weights.shape()[1];
        let mut sums = vec![0.0; heads];
        let mut queries = 0;
        for t in traces {
            let r = t
                .attention
                .get(li)
                .filter(|r| r.layer == rec.layer)
                .ok_or_else(|| DbatError::Argument(format!("attention layer `{}` missing from a probe batch", rec.layer)))?;
            let (s, q) = distance_sums(&r.weights, r.window, r.stride)?;
            for (a, b) in sums.iter_mut().zip(s) {
                *a += b;
            }
            queries += q;
        }
        let heads = sums
            .iter()
            .map(|s| {
                let distance = s / queries as f64;
                HeadStats {
                    distance,
                    side: side_from_distance(distance),
                }
            })
            .collect();
        layers.push(LayerAttnStats {
            layer: rec.layer.clone(),
            stage: rec.stage + 1,
            stride: rec.stride,
            window: rec.window,
            heads,
        });
    }
    let stage_sides = (1..=NUM_STAGES)
        .map(|s| {
            let sides: Vec<f64> = layers
                .iter()
                .filter(|l| l.stage == s)
                .flat_map(|l| l.heads.iter().map(|h| h.side))
                .collect();
            (!sides.is_empty()).then(|| sides.iter().sum::<f64>() / sides.len() as f64)
        })
        .collect();
    Ok(AttentionReport {
        mask_means,
        layers,
        stage_sides,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_token_window_has_zero_distance() {
        let w = Tensor::ones([5, 2, 1, 1]);
        let (sums, q) = distance_sums(&w, 1, 8).unwrap();
        assert_eq!(sums, vec![0.0, 0.0]);
        assert_eq!(q, 5);
    }

    #[test]
    fn side_is_diagonal_over_root_two() {
        assert!((side_from_distance(2f64.sqrt() * 3.0) - 3.0).abs() < 1e-12);
    }
}
