//! Matrix products.
//!
//! Each output row is produced by exactly one task with a fixed summation
//! order, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::error::{Result, TensorError};
use crate::graph::Var;

/// Work (multiply-adds) below which kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

#[derive(Clone, Copy)]
pub(crate) enum Layout {
    /// Row-major `[rows, cols]`.
    Normal,
    /// Stored as `[cols, rows]`, read transposed.
    Transposed,
}

/// `out[m,n] = op(a)[m,k] @ op(b)[k,n]`, overwriting `out`.
pub(crate) fn gemm(a: &[f64], la: Layout, b: &[f64], lb: Layout, m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, dst: &mut [f64]| {
        dst.iter_mut().for_each(|v| *v = 0.0);
        match (la, lb) {
            (Layout::Normal, Layout::Normal) => {
                for p in 0..k {
                    let av = a[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for (d, &bv) in dst.iter_mut().zip(brow) {
                        *d += av * bv;
                    }
                }
            }
            (Layout::Transposed, Layout::Normal) => {
                for p in 0..k {
                    let av = a[p * m + i];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for (d, &bv) in dst.iter_mut().zip(brow) {
                        *d += av * bv;
                    }
                }
            }
            (Layout::Normal, Layout::Transposed) => {
                let arow = &a[i * k..(i + 1) * k];
                for (j, d) in dst.iter_mut().enumerate() {
                    let brow = &b[j * k..(j + 1) * k];
                    *d = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
                }
            }
            (Layout::Transposed, Layout::Transposed) => {
                for (j, d) in dst.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for p in 0..k {
                        s += a[p * m + i] * b[j * k + p];
                    }
                    *d = s;
                }
            }
        }
    };
    if m * n * k >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, dst)| row(i, dst));
    } else {
        out.chunks_mut(n).enumerate().for_each(|(i, dst)| row(i, dst));
    }
}

/// Numpy-style broadcast of leading (batch) dims.
fn broadcast_batch(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Flat batch offset in a (possibly broadcast) operand for each output batch index.
fn batch_offsets(src: &[usize], out: &[usize]) -> Vec<usize> {
    let total: usize = out.iter().product();
    let rank = out.len();
    let pad = rank - src.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..src.len()).rev() {
        strides[i + pad] = if src[i] == 1 { 0 } else { s };
        s *= src[i];
    }
    (0..total)
        .map(|mut flat| {
            let mut off = 0;
            for d in (0..rank).rev() {
                let idx = flat % out[d];
                flat /= out[d];
                off += idx * strides[d];
            }
            off
        })
        .collect()
}

impl<'g> Var<'g> {
    /// Batched matrix product `[..., m, k] @ [..., k, n]`, broadcasting
    /// leading dims.
    pub fn matmul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.check_same_graph(other);
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(TensorError::shapes("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(TensorError::shapes("matmul", &sa, &sb));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_batch(ba, bb).ok_or_else(|| TensorError::shapes("matmul", &sa, &sb))?;
        let off_a = batch_offsets(ba, &batch);
        let off_b = batch_offsets(bb, &batch);
        let nbatch = off_a.len();
        let (a, b) = (self.value(), other.value());
        let mut out = vec![0.0; nbatch * m * n];
        for (bi, dst) in out.chunks_mut(m * n).enumerate() {
            let (oa, ob) = (off_a[bi] * m * k, off_b[bi] * k * n);
            gemm(&a.data()[oa..oa + m * k], Layout::Normal, &b.data()[ob..ob + k * n], Layout::Normal, m, k, n, dst);
        }
        let mut shape = batch.clone();
        shape.extend([m, n]);
        Ok(self.graph().push_op(out, shape, &[*self, *other], move || {
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    let mut ga = vec![0.0; a.numel()];
                    let mut tmp = vec![0.0; m * k];
                    for bi in 0..nbatch {
                        let ob = off_b[bi] * k * n;
                        gemm(&g[bi * m * n..(bi + 1) * m * n], Layout::Normal, &b.data()[ob..ob + k * n], Layout::Transposed, m, n, k, &mut tmp);
                        let oa = off_a[bi] * m * k;
                        for (d, t) in ga[oa..oa + m * k].iter_mut().zip(&tmp) {
                            *d += t;
                        }
                    }
                    ga
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![0.0; b.numel()];
                    let mut tmp = vec![0.0; k * n];
                    for bi in 0..nbatch {
                        let oa = off_a[bi] * m * k;
                        gemm(&a.data()[oa..oa + m * k], Layout::Transposed, &g[bi * m * n..(bi + 1) * m * n], Layout::Normal, k, m, n, &mut tmp);
                        let ob = off_b[bi] * k * n;
                        for (d, t) in gb[ob..ob + k * n].iter_mut().zip(&tmp) {
                            *d += t;
                        }
                    }
                    gb
                });
                vec![ga, gb]
            })
        }))
    }

    /// Affine map over the last dim: `x[..., in] @ wᵀ + b`, with `w: [out, in]`.
    pub fn linear(&self, weight: &Var<'g>, bias: Option<&Var<'g>>) -> Result<Var<'g>> {
        self.check_same_graph(weight);
        let (sx, sw) = (self.shape(), weight.shape());
        let fan_in = *sx.last().unwrap();
        if sw.len() != 2 || sw[1] != fan_in {
            return Err(TensorError::shapes("linear", &sx, &sw));
        }
        let fan_out = sw[0];
        if let Some(b) = bias {
            if b.shape() != [fan_out] {
                return Err(TensorError::shapes("linear", &sw, &b.shape()));
            }
        }
        let rows = self.numel() / fan_in;
        let (x, w) = (self.value(), weight.value());
        let mut out = vec![0.0; rows * fan_out];
        gemm(x.data(), Layout::Normal, w.data(), Layout::Transposed, rows, fan_in, fan_out, &mut out);
        if let Some(b) = bias {
            let bv = b.value();
            for row in out.chunks_mut(fan_out) {
                for (o, bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = fan_out;
        let mut parents = vec![*self, *weight];
        parents.extend(bias.copied());
        Ok(self.graph().push_op(out, shape, &parents, move || {
            Box::new(move |g, needs| {
                let gx = needs[0].then(|| {
                    let mut gx = vec![0.0; rows * fan_in];
                    gemm(g, Layout::Normal, w.data(), Layout::Normal, rows, fan_out, fan_in, &mut gx);
                    gx
                });
                let gw = needs[1].then(|| {
                    let mut gw = vec![0.0; fan_out * fan_in];
                    gemm(g, Layout::Transposed, x.data(), Layout::Normal, fan_out, rows, fan_in, &mut gw);
                    gw
                });
                let mut grads = vec![gx, gw];
                if needs.len() == 3 {
                    grads.push(needs[2].then(|| {
                        let mut gb = vec![0.0; fan_out];
                        for row in g.chunks_exact(fan_out) {
                            for (a, v) in gb.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        gb
                    }));
                }
                grads
            })
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::{Graph, Precision, Tensor};

    #[test]
    fn identity_product() {
        let g = Graph::new(Precision::Double);
        let i = g.constant(Tensor::eye(2));
        assert_eq!(*i.matmul(&i).unwrap().value(), Tensor::eye(2));
    }

    #[test]
    fn hand_product() {
        let g = Graph::new(Precision::Double);
        let a = g.constant(Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::new([2, 1], vec![1.0, 1.0]).unwrap());
        let c = a.matmul(&b).unwrap().value();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let g = Graph::new(Precision::Double);
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] and [2, 3]"), "{msg}");
    }

    #[test]
    fn broadcasts_leading_dims() {
        let g = Graph::new(Precision::Double);
        let a = g.constant(Tensor::from_fn([3, 2, 2], |i| i as f64));
        let b = g.constant(Tensor::eye(2));
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), vec![3, 2, 2]);
        assert_eq!(*c.value(), *a.value());
    }
}
