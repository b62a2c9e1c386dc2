//! Multi-head attention restricted to non-overlapping square windows.

use dbat_tensor::{Tensor, Var};

use crate::error::{DbatError, Result};

/// Score added between tokens from different regions of a shifted window.
const MASK_NEG: f64 = -100.0;

/// Attention within `window × window` tiles.
///
/// `q`, `k`, `v` are `[N, H, W, C]` token maps that are already projected.
/// `bias` is `[heads, T, T]` with `T = window²`; `mask` is
/// `[windows_per_image, heads, T, T]`. Returns the `[N, H, W, C]` mixed values
/// (before any output projection) and the `[N·nW, heads, T, T]` softmax weights.
pub fn windowed_attention<'g>(
    q: &Var<'g>,
    k: &Var<'g>,
    v: &Var<'g>,
    heads: usize,
    window: usize,
    bias: Option<&Var<'g>>,
    mask: Option<&Var<'g>>,
) -> Result<(Var<'g>, Var<'g>)> {
    let shape = q.shape();
    if shape.len() != 4 {
        return Err(DbatError::Argument(format!("attention expects NHWC tokens, got {shape:?}")));
    }
    let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    if k.shape() != shape || v.shape() != shape {
        return Err(DbatError::Argument(format!(
            "attention operands differ: q {shape:?}, k {:?}, v {:?}",
            k.shape(),
            v.shape()
        )));
    }
    if heads == 0 || c % heads != 0 {
        return Err(DbatError::Argument(format!("{heads} heads do not divide {c} channels")));
    }
    let hd = c / heads;
    let t = window * window;
    let split = |x: &Var<'g>| -> Result<Var<'g>> {
        let win = x.window_partition(window)?;
        let b = win.shape()[0];
        Ok(win.reshape(&[b, t, heads, hd])?.permute(&[0, 2, 1, 3])?)
    };
    let (qw, kw, vw) = (split(q)?, split(k)?, split(v)?);
    let windows = qw.shape()[0];
    let mut scores = qw.scale(1.0 / (hd as f64).sqrt()).matmul(&kw.transpose_last()?)?;
    if let Some(b) = bias {
        scores = scores.add_leading_broadcast(b)?;
    }
    if let Some(m) = mask {
        let nw = windows / n;
        scores = scores
            .reshape(&[n, nw, heads, t, t])?
            .add_leading_broadcast(m)?
            .reshape(&[windows, heads, t, t])?;
    }
    let attn = scores.softmax(3)?;
    let mixed = attn
        .matmul(&vw)?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[windows, t, c])?
        .window_reverse(window, n, h, w)?;
    Ok((mixed, attn))
}

/// Index into a `(2w−1)²`-row relative-position table for every
/// (query, key) pair of a `w × w` window, row-major over pairs.
pub fn relative_position_index(window: usize) -> Vec<usize> {
    let t = window * window;
    let side = 2 * window - 1;
    let mut idx = Vec::with_capacity(t * t);
    for q in 0..t {
        let (qy, qx) = (q / window, q % window);
        for k in 0..t {
            let (ky, kx) = (k / window, k % window);
            let dy = qy + window - 1 - ky;
            let dx = qx + window - 1 - kx;
            idx.push(dy * side + dx);
        }
    }
    idx
}

/// Additive mask separating regions that wrap around after a cyclic shift
/// of `shift` pixels on an `h × w` map. Shape `[nW, heads, T, T]`.
pub fn shifted_window_mask(h: usize, w: usize, window: usize, shift: usize, heads: usize) -> Tensor {
    let region = |pos: usize, len: usize| -> usize {
        if pos < len - window {
            0
        } else if pos < len - shift {
            1
        } else {
            2
        }
    };
    let t = window * window;
    let (nh, nw) = (h / window, w / window);
    let mut data = Vec::with_capacity(nh * nw * heads * t * t);
    for wy in 0..nh {
        for wx in 0..nw {
            let ids: Vec<usize> = (0..t)
                .map(|p| {
                    let (y, x) = (wy * window + p / window, wx * window + p % window);
                    region(y, h) * 3 + region(x, w)
                })
                .collect();
            for _ in 0..heads {
                for qi in 0..t {
                    for ki in 0..t {
                        data.push(if ids[qi] == ids[ki] { 0.0 } else { MASK_NEG });
                    }
                }
            }
        }
    }
    Tensor::new([nh * nw, heads, t, t], data).expect("mask shape")
}
