use dbat_tensor::{Graph, Precision, Tensor};

use crate::error::{DbatError, Result};

/// Resize so the shorter side equals `target` (bilinear for the image,
/// nearest for labels), then take the centred `target × target` crop.
/// `image` is `[3, H, W]`; `labels` has `H·W` entries.
pub fn resize_min_border_then_crop(image: &Tensor, labels: &[u8], target: usize) -> Result<(Tensor, Vec<u8>)> {
    let s = image.shape();
    if s.len() != 3 || labels.len() != s[1] * s[2] || target == 0 {
        return Err(DbatError::Argument(format!(
            "expected [3, H, W] image with H·W labels, got {s:?} and {}",
            labels.len()
        )));
    }
    let (h, w) = (s[1], s[2]);
    let scale = target as f64 / h.min(w) as f64;
    let (rh, rw) = (
        ((h as f64 * scale).round() as usize).max(target),
        ((w as f64 * scale).round() as usize).max(target),
    );
    let g = Graph::new(Precision::Double);
    let x = g.constant(image.clone().reshaped([1, s[0], h, w])?);
    let resized = x.resize_bilinear(rh, rw)?.value();
    let (oy, ox) = ((rh - target) / 2, (rw - target) / 2);
    let mut out = Vec::with_capacity(s[0] * target * target);
    for c in 0..s[0] {
        for y in 0..target {
            let row = (c * rh + oy + y) * rw + ox;
            out.extend_from_slice(&resized.data()[row..row + target]);
        }
    }
    let mut lab = Vec::with_capacity(target * target);
    for y in 0..target {
        let sy = ((((oy + y) as f64 + 0.5) * h as f64 / rh as f64) as usize).min(h - 1);
        for x in 0..target {
            let sx = ((((ox + x) as f64 + 0.5) * w as f64 / rw as f64) as usize).min(w - 1);
            lab.push(labels[sy * w + sx]);
        }
    }
    Ok((Tensor::new([s[0], target, target], out)?, lab))
}
