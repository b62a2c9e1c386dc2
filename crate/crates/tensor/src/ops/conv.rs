//! NCHW spatial ops: convolutions, pooling, resizing and per-pixel mixing.

use rayon::prelude::*;

use super::linalg::{gemm, Layout};
use crate::error::{Result, TensorError};
use crate::graph::Var;

fn nchw(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if s.len() != 4 {
        return Err(TensorError::shape(op, format!("expected NCHW input, got {s:?}")));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// Hyper-parameters of a 2-d convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

/// Source pixel for one tap of a bilinear sample along an axis.
#[derive(Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

/// Half-pixel-centre sampling positions (`align_corners = false`).
fn bilinear_taps(src: usize, dst: usize) -> Vec<Tap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let pos = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            Tap {
                lo,
                hi,
                frac: pos - lo as f64,
            }
        })
        .collect()
}

impl<'g> Var<'g> {
    /// Per-pixel linear map `[N, C, H, W]` -> `[N, K, H, W]` with `w: [K, C]`, `b: [K]`.
    pub fn conv1x1(&self, weight: &Var<'g>, bias: &Var<'g>) -> Result<Var<'g>> {
        let (n, c, h, w) = nchw("conv1x1", &self.shape())?;
        let sw = weight.shape();
        if sw.len() != 2 || sw[1] != c {
            return Err(TensorError::shapes("conv1x1", &self.shape(), &sw));
        }
        let k = sw[0];
        if bias.shape() != [k] {
            return Err(TensorError::shapes("conv1x1", &sw, &bias.shape()));
        }
        let hw = h * w;
        let (x, wt, b) = (self.value(), weight.value(), bias.value());
        let mut out = vec![0.0; n * k * hw];
        for (i, dst) in out.chunks_mut(k * hw).enumerate() {
            gemm(wt.data(), Layout::Normal, &x.data()[i * c * hw..(i + 1) * c * hw], Layout::Normal, k, c, hw, dst);
            for (kk, plane) in dst.chunks_mut(hw).enumerate() {
                plane.iter_mut().for_each(|v| *v += b.data()[kk]);
            }
        }
        Ok(self.graph().push_op(out, vec![n, k, h, w], &[*self, *weight, *bias], move || {
            Box::new(move |g, needs| {
                let gx = needs[0].then(|| {
                    let mut gx = vec![0.0; n * c * hw];
                    for (i, dst) in gx.chunks_mut(c * hw).enumerate() {
                        gemm(wt.data(), Layout::Transposed, &g[i * k * hw..(i + 1) * k * hw], Layout::Normal, c, k, hw, dst);
                    }
                    gx
                });
                let gw = needs[1].then(|| {
                    let mut gw = vec![0.0; k * c];
                    let mut tmp = vec![0.0; k * c];
                    for i in 0..n {
                        gemm(&g[i * k * hw..(i + 1) * k * hw], Layout::Normal, &x.data()[i * c * hw..(i + 1) * c * hw], Layout::Transposed, k, hw, c, &mut tmp);
                        gw.iter_mut().zip(&tmp).for_each(|(a, t)| *a += t);
                    }
                    gw
                });
                let gb = needs[2].then(|| {
                    let mut gb = vec![0.0; k];
                    for i in 0..n {
                        for (kk, plane) in g[i * k * hw..(i + 1) * k * hw].chunks(hw).enumerate() {
                            gb[kk] += plane.iter().sum::<f64>();
                        }
                    }
                    gb
                });
                vec![gx, gw, gb]
            })
        }))
    }

    /// General 2-d convolution with `w: [K, C, kh, kw]` and optional bias `[K]`,
    /// lowered to im2col + matrix product.
    pub fn conv2d(&self, weight: &Var<'g>, bias: Option<&Var<'g>>, spec: Conv2dSpec) -> Result<Var<'g>> {
        let (n, c, h, w) = nchw("conv2d", &self.shape())?;
        let sw = weight.shape();
        if sw.len() != 4 || sw[1] != c {
            return Err(TensorError::shapes("conv2d", &self.shape(), &sw));
        }
        let (k, kh, kw) = (sw[0], sw[2], sw[3]);
        if let Some(b) = bias {
            if b.shape() != [k] {
                return Err(TensorError::shapes("conv2d", &sw, &b.shape()));
            }
        }
        let Conv2dSpec { stride, padding, dilation } = spec;
        if stride == 0 || dilation == 0 {
            return Err(TensorError::Argument("conv2d: stride and dilation must be positive".into()));
        }
        let span_h = dilation * (kh - 1) + 1;
        let span_w = dilation * (kw - 1) + 1;
        if h + 2 * padding < span_h || w + 2 * padding < span_w {
            return Err(TensorError::shape("conv2d", format!("kernel {kh}x{kw} larger than padded input {h}x{w}")));
        }
        let oh = (h + 2 * padding - span_h) / stride + 1;
        let ow = (w + 2 * padding - span_w) / stride + 1;
        let ohw = oh * ow;
        let ckk = c * kh * kw;
        // col_src[p * ckk + q] = flat input offset within one image, or usize::MAX for padding
        let mut col_src = vec![usize::MAX; ohw * ckk];
        for oy in 0..oh {
            for ox in 0..ow {
                let p = oy * ow + ox;
                for ci in 0..c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                            let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                col_src[p * ckk + (ci * kh + ky) * kw + kx] = (ci * h + iy as usize) * w + ix as usize;
                            }
                        }
                    }
                }
            }
        }
        let x = self.value();
        let wt = weight.value();
        let chw = c * h * w;
        let xd = x.data();
        let cols: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let img = &xd[i * chw..(i + 1) * chw];
                col_src.iter().map(|&s| if s == usize::MAX { 0.0 } else { img[s] }).collect()
            })
            .collect();
        let mut out = vec![0.0; n * k * ohw];
        for (i, dst) in out.chunks_mut(k * ohw).enumerate() {
            // [K, ckk] @ [ohw, ckk]^T
            gemm(wt.data(), Layout::Normal, &cols[i], Layout::Transposed, k, ckk, ohw, dst);
            if let Some(b) = bias {
                let bv = b.value();
                for (kk, plane) in dst.chunks_mut(ohw).enumerate() {
                    plane.iter_mut().for_each(|v| *v += bv.data()[kk]);
                }
            }
        }
        let mut parents = vec![*self, *weight];
        parents.extend(bias.copied());
        Ok(self.graph().push_op(out, vec![n, k, oh, ow], &parents, move || {
            Box::new(move |g, needs| {
                let gx = needs[0].then(|| {
                    let mut gx = vec![0.0; n * chw];
                    let mut gcols = vec![0.0; ohw * ckk];
                    for i in 0..n {
                        // [ohw, K] @ [K, ckk]
                        gemm(&g[i * k * ohw..(i + 1) * k * ohw], Layout::Transposed, wt.data(), Layout::Normal, ohw, k, ckk, &mut gcols);
                        let dst = &mut gx[i * chw..(i + 1) * chw];
                        for (&s, &v) in col_src.iter().zip(&gcols) {
                            if s != usize::MAX {
                                dst[s] += v;
                            }
                        }
                    }
                    gx
                });
                let gw = needs[1].then(|| {
                    let mut gw = vec![0.0; k * ckk];
                    let mut tmp = vec![0.0; k * ckk];
                    for i in 0..n {
                        gemm(&g[i * k * ohw..(i + 1) * k * ohw], Layout::Normal, &cols[i], Layout::Normal, k, ohw, ckk, &mut tmp);
                        gw.iter_mut().zip(&tmp).for_each(|(a, t)| *a += t);
                    }
                    gw
                });
                let mut grads = vec![gx, gw];
                if needs.len() == 3 {
                    grads.push(needs[2].then(|| {
                        let mut gb = vec![0.0; k];
                        for i in 0..n {
                            for (kk, plane) in g[i * k * ohw..(i + 1) * k * ohw].chunks(ohw).enumerate() {
                                gb[kk] += plane.iter().sum::<f64>();
                            }
                        }
                        gb
                    }));
                }
                grads
            })
        }))
    }

    /// Average pooling with kernel = stride = `factor`.
    pub fn avg_pool(&self, factor: usize) -> Result<Var<'g>> {
        let (n, c, h, w) = nchw("avg_pool", &self.shape())?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(TensorError::shape("avg_pool", format!("{h}x{w} not divisible by {factor}")));
        }
        let (oh, ow) = (h / factor, w / factor);
        let norm = 1.0 / (factor * factor) as f64;
        let x = self.value();
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &x.data()[plane * h * w..(plane + 1) * h * w];
            for y in 0..h {
                for xx in 0..w {
                    out[plane * oh * ow + (y / factor) * ow + xx / factor] += src[y * w + xx];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= norm);
        Ok(self.graph().push_op(out, vec![n, c, oh, ow], &[*self], move || {
            Box::new(move |g, _| {
                let mut gx = vec![0.0; n * c * h * w];
                for plane in 0..n * c {
                    for y in 0..h {
                        for xx in 0..w {
                            gx[plane * h * w + y * w + xx] = g[plane * oh * ow + (y / factor) * ow + xx / factor] * norm;
                        }
                    }
                }
                vec![Some(gx)]
            })
        }))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Var<'g>> {
        let (n, c, h, w) = nchw("upsample_nearest", &self.shape())?;
        if factor == 0 {
            return Err(TensorError::Argument("upsample_nearest: factor must be positive".into()));
        }
        let (oh, ow) = (h * factor, w * factor);
        let x = self.value();
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[plane * oh * ow + y * ow + xx] = x.data()[plane * h * w + (y / factor) * w + xx / factor];
                }
            }
        }
        Ok(self.graph().push_op(out, vec![n, c, oh, ow], &[*self], move || {
            Box::new(move |g, _| {
                let mut gx = vec![0.0; n * c * h * w];
                for plane in 0..n * c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            gx[plane * h * w + (y / factor) * w + xx / factor] += g[plane * oh * ow + y * ow + xx];
                        }
                    }
                }
                vec![Some(gx)]
            })
        }))
    }

    /// Bilinear resize to `(out_h, out_w)` with half-pixel centres.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Var<'g>> {
        let (n, c, h, w) = nchw("resize_bilinear", &self.shape())?;
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::Argument("resize_bilinear: zero output size".into()));
        }
        let ty = bilinear_taps(h, out_h);
        let tx = bilinear_taps(w, out_w);
        let x = self.value();
        let mut out = vec![0.0; n * c * out_h * out_w];
        for plane in 0..n * c {
            let src = &x.data()[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * out_h * out_w..(plane + 1) * out_h * out_w];
            for (oy, a) in ty.iter().enumerate() {
                for (ox, b) in tx.iter().enumerate() {
                    let top = src[a.lo * w + b.lo] * (1.0 - b.frac) + src[a.lo * w + b.hi] * b.frac;
                    let bot = src[a.hi * w + b.lo] * (1.0 - b.frac) + src[a.hi * w + b.hi] * b.frac;
                    dst[oy * out_w + ox] = top * (1.0 - a.frac) + bot * a.frac;
                }
            }
        }
        Ok(self.graph().push_op(out, vec![n, c, out_h, out_w], &[*self], move || {
            Box::new(move |g, _| {
                let mut gx = vec![0.0; n * c * h * w];
                for plane in 0..n * c {
                    let gsrc = &g[plane * out_h * out_w..(plane + 1) * out_h * out_w];
                    let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
                    for (oy, a) in ty.iter().enumerate() {
                        for (ox, b) in tx.iter().enumerate() {
                            let v = gsrc[oy * out_w + ox];
                            dst[a.lo * w + b.lo] += v * (1.0 - a.frac) * (1.0 - b.frac);
                            dst[a.lo * w + b.hi] += v * (1.0 - a.frac) * b.frac;
                            dst[a.hi * w + b.lo] += v * a.frac * (1.0 - b.frac);
                            dst[a.hi * w + b.hi] += v * a.frac * b.frac;
                        }
                    }
                }
                vec![Some(gx)]
            })
        }))
    }
}

/// `out[n,c,h,w] = Σ_s weights[n,s,h,w] · maps[s][n,c,h,w]`; each per-pixel
/// weight is shared by all channels.
pub fn pixel_weighted_sum<'g>(maps: &[Var<'g>], weights: &Var<'g>) -> Result<Var<'g>> {
    let Some(first) = maps.first() else {
        return Err(TensorError::Argument("pixel_weighted_sum: no maps".into()));
    };
    let shape = first.shape();
    let (n, c, h, w) = nchw("pixel_weighted_sum", &shape)?;
    for m in maps {
        if m.shape() != shape {
            return Err(TensorError::shapes("pixel_weighted_sum", &shape, &m.shape()));
        }
    }
    let s = maps.len();
    if weights.shape() != [n, s, h, w] {
        return Err(TensorError::shapes("pixel_weighted_sum", &shape, &weights.shape()));
    }
    let hw = h * w;
    let values: Vec<_> = maps.iter().map(|m| m.value()).collect();
    let wv = weights.value();
    let mut out = vec![0.0; n * c * hw];
    for b in 0..n {
        for ch in 0..c {
            let dst = &mut out[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            for (si, m) in values.iter().enumerate() {
                let src = &m.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                let wplane = &wv.data()[(b * s + si) * hw..(b * s + si + 1) * hw];
                for ((d, &x), &a) in dst.iter_mut().zip(src).zip(wplane) {
                    *d += a * x;
                }
            }
        }
    }
    let mut parents = maps.to_vec();
    parents.push(*weights);
    Ok(first.graph().push_op(out, shape, &parents, move || {
        Box::new(move |g, needs| {
            let mut grads: Vec<Option<Vec<f64>>> = (0..s)
                .map(|si| {
                    needs[si].then(|| {
                        let mut gm = vec![0.0; n * c * hw];
                        for b in 0..n {
                            let wplane = &wv.data()[(b * s + si) * hw..(b * s + si + 1) * hw];
                            for ch in 0..c {
                                let o = (b * c + ch) * hw;
                                for p in 0..hw {
                                    gm[o + p] = g[o + p] * wplane[p];
                                }
                            }
                        }
                        gm
                    })
                })
                .collect();
            grads.push(needs[s].then(|| {
                let mut gw = vec![0.0; n * s * hw];
                for b in 0..n {
                    for (si, m) in values.iter().enumerate() {
                        let dst = &mut gw[(b * s + si) * hw..(b * s + si + 1) * hw];
                        for ch in 0..c {
                            let o = (b * c + ch) * hw;
                            for p in 0..hw {
                                dst[p] += g[o + p] * m.data()[o + p];
                            }
                        }
                    }
                }
                gw
            }));
            grads
        })
    }))
}
