//! Data movement: reshape, permute, roll, gather and window partitioning.

use crate::error::{Result, TensorError};
use crate::graph::Var;

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For every output position, the flat source index under `axes`.
fn permute_index(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides_src: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let n: usize = shape.iter().product();
    let rank = shape.len();
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        idx.push(src);
        // odometer increment over output dims
        for d in (0..rank).rev() {
            counter[d] += 1;
            src += out_strides_src[d];
            if counter[d] < out_shape[d] {
                break;
            }
            src -= out_strides_src[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    idx
}

impl<'g> Var<'g> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.contains(&0) {
            return Err(TensorError::shape(
                "reshape",
                format!("cannot reshape {:?} to {:?}", self.shape(), shape),
            ));
        }
        let a = self.value();
        Ok(self
            .graph()
            .push_op(a.data().to_vec(), shape.to_vec(), &[*self], || Box::new(|g, _| vec![Some(g.to_vec())])))
    }

    /// Reorder dims: output dim `i` is input dim `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Var<'g>> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::Argument(format!(
                "permute: {axes:?} is not a permutation of {} axes",
                shape.len()
            )));
        }
        let idx = permute_index(&shape, axes);
        let a = self.value();
        let out = idx.iter().map(|&i| a.data()[i]).collect();
        let out_shape = axes.iter().map(|&a| shape[a]).collect();
        Ok(self.graph().push_op(out, out_shape, &[*self], move || {
            Box::new(move |g, _| {
                let mut ga = vec![0.0; g.len()];
                for (o, &i) in idx.iter().enumerate() {
                    ga[i] = g[o];
                }
                vec![Some(ga)]
            })
        }))
    }

    /// Swap the last two dims.
    pub fn transpose_last(&self) -> Result<Var<'g>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(TensorError::Axis {
                op: "transpose_last",
                axis: 1,
                ndim: r,
            });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    /// Cyclic shift: element at `i` moves to `(i + shift) mod len` along each listed axis.
    pub fn roll(&self, shifts: &[(usize, isize)]) -> Result<Var<'g>> {
        let shape = self.shape();
        for &(axis, _) in shifts {
            if axis >= shape.len() {
                return Err(TensorError::Axis {
                    op: "roll",
                    axis,
                    ndim: shape.len(),
                });
            }
        }
        let st = strides(&shape);
        let n = self.numel();
        // src index for every output index
        let idx: Vec<usize> = (0..n)
            .map(|flat| {
                let mut src = 0;
                for d in 0..shape.len() {
                    let mut c = (flat / st[d]) % shape[d];
                    for &(axis, shift) in shifts {
                        if axis == d {
                            let len = shape[d] as isize;
                            c = (c as isize - shift).rem_euclid(len) as usize;
                        }
                    }
                    src += c * st[d];
                }
                src
            })
            .collect();
        let a = self.value();
        let out = idx.iter().map(|&i| a.data()[i]).collect();
        Ok(self.graph().push_op(out, shape, &[*self], move || {
            Box::new(move |g, _| {
                let mut ga = vec![0.0; g.len()];
                for (o, &i) in idx.iter().enumerate() {
                    ga[i] += g[o];
                }
                vec![Some(ga)]
            })
        }))
    }

    /// Gather rows of `self: [R, ...]` by index, giving `[indices.len(), ...]`.
    pub fn index_select(&self, indices: &[usize]) -> Result<Var<'g>> {
        let shape = self.shape();
        let rows = shape[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Argument(format!(
                "index_select: index {bad} out of range for {rows} rows"
            )));
        }
        if indices.is_empty() {
            return Err(TensorError::Argument("index_select: no indices".into()));
        }
        let inner: usize = shape[1..].iter().product();
        let a = self.value();
        let mut out = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            out.extend_from_slice(&a.data()[i * inner..(i + 1) * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = indices.len();
        let indices = indices.to_vec();
        let total = a.numel();
        Ok(self.graph().push_op(out, out_shape, &[*self], move || {
            Box::new(move |g, _| {
                let mut ga = vec![0.0; total];
                for (o, &i) in indices.iter().enumerate() {
                    for (d, s) in ga[i * inner..(i + 1) * inner].iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                        *d += s;
                    }
                }
                vec![Some(ga)]
            })
        }))
    }

    /// `[N, H, W, C]` -> `[N * H/w * W/w, w*w, C]`, windows in row-major order.
    pub fn window_partition(&self, window: usize) -> Result<Var<'g>> {
        let s = self.shape();
        if s.len() != 4 || window == 0 || s[1] % window != 0 || s[2] % window != 0 {
            return Err(TensorError::shape(
                "window_partition",
                format!("shape {s:?} is not NHWC divisible by window {window}"),
            ));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        self.reshape(&[n, h / window, window, w / window, window, c])?
            .permute(&[0, 1, 3, 2, 4, 5])?
            .reshape(&[n * (h / window) * (w / window), window * window, c])
    }

    /// Inverse of [`Var::window_partition`].
    pub fn window_reverse(&self, window: usize, n: usize, h: usize, w: usize) -> Result<Var<'g>> {
        let s = self.shape();
        if s.len() != 3
            || window == 0
            || h % window != 0
            || w % window != 0
            || s[0] != n * (h / window) * (w / window)
            || s[1] != window * window
        {
            return Err(TensorError::shape(
                "window_reverse",
                format!("shape {s:?} does not tile [{n}, {h}, {w}] with window {window}"),
            ));
        }
        let c = s[2];
        self.reshape(&[n, h / window, w / window, window, window, c])?
            .permute(&[0, 1, 3, 2, 4, 5])?
            .reshape(&[n, h, w, c])
    }

    /// `[N, H, W, C]` -> `[N, H/f, W/f, f*f*C]`; the new channel index is
    /// `(dy * f + dx) * C + c`.
    pub fn space_to_depth(&self, factor: usize) -> Result<Var<'g>> {
        let s = self.shape();
        if s.len() != 4 || factor == 0 || s[1] % factor != 0 || s[2] % factor != 0 {
            return Err(TensorError::shape(
                "space_to_depth",
                format!("shape {s:?} is not NHWC divisible by {factor}"),
            ));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        self.reshape(&[n, h / factor, factor, w / factor, factor, c])?
            .permute(&[0, 1, 3, 2, 4, 5])?
            .reshape(&[n, h / factor, w / factor, factor * factor * c])
    }

    /// `[N, C, H, W]` -> `[N, H, W, C]`.
    pub fn nchw_to_nhwc(&self) -> Result<Var<'g>> {
        self.permute(&[0, 2, 3, 1])
    }

    /// `[N, H, W, C]` -> `[N, C, H, W]`.
    pub fn nhwc_to_nchw(&self) -> Result<Var<'g>> {
        self.permute(&[0, 3, 1, 2])
    }
}
