//! Normalization, softmax and loss.

use crate::error::{Result, TensorError};
use crate::graph::Var;

/// Label value excluded from the loss.
pub const IGNORE_INDEX: u8 = 255;

fn lines(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'g> Var<'g> {
    /// Max-shifted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'g>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op: "softmax",
                axis,
                ndim: shape.len(),
            });
        }
        let (outer, len, inner) = lines(&shape, axis);
        let x = self.value();
        let xd = x.data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let mut m = f64::NEG_INFINITY;
                for k in 0..len {
                    m = m.max(xd[at(k)]);
                }
                let mut s = 0.0;
                for k in 0..len {
                    let e = (xd[at(k)] - m).exp();
                    out[at(k)] = e;
                    s += e;
                }
                for k in 0..len {
                    out[at(k)] /= s;
                }
            }
        }
        self.graph().precision().round_slice(&mut out);
        let y = std::rc::Rc::new(out.clone());
        Ok(self.graph().push_op(out, shape, &[*self], move || {
            Box::new(move |g, _| {
                let yd = &y[..];
                let mut gx = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let mut dot = 0.0;
                        for k in 0..len {
                            dot += g[at(k)] * yd[at(k)];
                        }
                        for k in 0..len {
                            gx[at(k)] = yd[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            })
        }))
    }

    /// Layer normalization over the last dim with affine `gamma`, `beta` of
    /// that length.
    pub fn layer_norm(&self, gamma: &Var<'g>, beta: &Var<'g>, eps: f64) -> Result<Var<'g>> {
        let shape = self.shape();
        let d = *shape.last().unwrap();
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(TensorError::shapes("layer_norm", &shape, &gamma.shape()));
        }
        let x = self.value();
        let (gv, bv) = (gamma.value(), beta.value());
        let rows = x.numel() / d;
        let mut out = vec![0.0; x.numel()];
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        Ok(self.graph().push_op(out, shape, &[*self, *gamma, *beta], move || {
            Box::new(move |g, needs| {
                let gx = needs[0].then(|| {
                    let mut gx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let (mut m1, mut m2) = (0.0, 0.0);
                        for j in 0..d {
                            let gh = g[r * d + j] * gv.data()[j];
                            m1 += gh;
                            m2 += gh * xhat[r * d + j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let gh = g[r * d + j] * gv.data()[j];
                            gx[r * d + j] = inv_std[r] * (gh - m1 - xhat[r * d + j] * m2);
                        }
                    }
                    gx
                });
                let (ggamma, gbeta) = if needs[1] || needs[2] {
                    let mut gg = vec![0.0; d];
                    let mut gb = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                            gb[j] += g[r * d + j];
                        }
                    }
                    (Some(gg), Some(gb))
                } else {
                    (None, None)
                };
                vec![gx, ggamma, gbeta]
            })
        }))
    }

    /// Mean per-pixel cross-entropy of `self: [N, K, H, W]` logits against
    /// `labels` (`N*H*W` entries), skipping [`IGNORE_INDEX`].
    pub fn cross_entropy(&self, labels: &[u8]) -> Result<Var<'g>> {
        let shape = self.shape();
        if shape.len() != 4 {
            return Err(TensorError::shape("cross_entropy", format!("logits must be NCHW, got {shape:?}")));
        }
        let (n, k, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let hw = h * w;
        if labels.len() != n * hw {
            return Err(TensorError::shape(
                "cross_entropy",
                format!("{} labels for logits {shape:?}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != IGNORE_INDEX && l as usize >= k) {
            return Err(TensorError::Argument(format!("label {bad} out of range for {k} classes")));
        }
        let kept = labels.iter().filter(|&&l| l != IGNORE_INDEX).count();
        if kept == 0 {
            return Err(TensorError::Evaluation("all pixels are ignored".into()));
        }
        let x = self.value();
        let xd = x.data();
        let mut probs = vec![0.0; xd.len()];
        let mut total = 0.0;
        for b in 0..n {
            for p in 0..hw {
                let label = labels[b * hw + p];
                if label == IGNORE_INDEX {
                    continue;
                }
                let at = |c: usize| (b * k + c) * hw + p;
                let m = (0..k).map(|c| xd[at(c)]).fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = (0..k).map(|c| (xd[at(c)] - m).exp()).sum();
                let lse = m + s.ln();
                total += lse - xd[at(label as usize)];
                for c in 0..k {
                    probs[at(c)] = (xd[at(c)] - lse).exp();
                }
            }
        }
        let scale = 1.0 / kept as f64;
        let labels = labels.to_vec();
        Ok(self.graph().push_op(vec![total * scale], vec![1], &[*self], move || {
            Box::new(move |g, _| {
                let mut gx = probs.clone();
                for b in 0..n {
                    for p in 0..hw {
                        let label = labels[b * hw + p];
                        if label != IGNORE_INDEX {
                            gx[(b * k + label as usize) * hw + p] -= 1.0;
                        }
                    }
                }
                let f = g[0] * scale;
                gx.iter_mut().for_each(|v| *v *= f);
                vec![Some(gx)]
            })
        }))
    }
}
