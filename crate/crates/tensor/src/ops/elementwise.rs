//! Same-shape elementwise arithmetic, activations and reductions.

use crate::error::{Result, TensorError};
use crate::graph::Var;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl<'g> Var<'g> {
    fn same_shape(&self, other: &Var<'g>, op: &'static str) -> Result<Vec<usize>> {
        self.check_same_graph(other);
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(TensorError::shapes(op, &a, &b));
        }
        Ok(a)
    }

    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let shape = self.same_shape(other, "add")?;
        let (a, b) = (self.value(), other.value());
        let out = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        Ok(self.graph().push_op(out, shape, &[*self, *other], || {
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.to_vec())])
        }))
    }

    pub fn sub(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let shape = self.same_shape(other, "sub")?;
        let (a, b) = (self.value(), other.value());
        let out = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        Ok(self.graph().push_op(out, shape, &[*self, *other], || {
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())])
        }))
    }

    pub fn mul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let shape = self.same_shape(other, "mul")?;
        let (a, b) = (self.value(), other.value());
        let out = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        Ok(self.graph().push_op(out, shape, &[*self, *other], move || {
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| g.iter().zip(b.data()).map(|(g, y)| g * y).collect());
                let gb = needs[1].then(|| g.iter().zip(a.data()).map(|(g, x)| g * x).collect());
                vec![ga, gb]
            })
        }))
    }

    pub fn scale(&self, factor: f64) -> Var<'g> {
        let a = self.value();
        let out = a.data().iter().map(|x| x * factor).collect();
        self.graph().push_op(out, a.shape().to_vec(), &[*self], move || {
            Box::new(move |g, _| vec![Some(g.iter().map(|v| v * factor).collect())])
        })
    }

    /// `self + other` where `other`'s shape equals the trailing dims of `self`.
    pub fn add_leading_broadcast(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.check_same_graph(other);
        let (sa, sb) = (self.shape(), other.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(TensorError::shapes("add_leading_broadcast", &sa, &sb));
        }
        let (a, b) = (self.value(), other.value());
        let inner = b.numel();
        let out = a
            .data()
            .chunks_exact(inner)
            .flat_map(|chunk| chunk.iter().zip(b.data()).map(|(x, y)| x + y))
            .collect();
        Ok(self.graph().push_op(out, sa, &[*self, *other], move || {
            Box::new(move |g, needs| {
                let gb = needs[1].then(|| {
                    let mut acc = vec![0.0; inner];
                    for chunk in g.chunks_exact(inner) {
                        for (a, v) in acc.iter_mut().zip(chunk) {
                            *a += v;
                        }
                    }
                    acc
                });
                vec![Some(g.to_vec()), gb]
            })
        }))
    }

    pub fn relu(&self) -> Var<'g> {
        let a = self.value();
        let out = a.data().iter().map(|&x| x.max(0.0)).collect();
        self.graph().push_op(out, a.shape().to_vec(), &[*self], move || {
            Box::new(move |g, _| {
                vec![Some(
                    g.iter()
                        .zip(a.data())
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                )]
            })
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'g> {
        let a = self.value();
        let out = a.data().iter().map(|&x| gelu(x)).collect();
        self.graph().push_op(out, a.shape().to_vec(), &[*self], move || {
            Box::new(move |g, _| vec![Some(g.iter().zip(a.data()).map(|(g, &x)| g * gelu_grad(x)).collect())])
        })
    }

    pub fn sum_all(&self) -> Var<'g> {
        let a = self.value();
        let n = a.numel();
        let out = vec![a.data().iter().sum()];
        self.graph()
            .push_op(out, vec![1], &[*self], move || Box::new(move |g, _| vec![Some(vec![g[0]; n])]))
    }

    pub fn mean_all(&self) -> Var<'g> {
        let n = self.numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sum over `axis`, removing it. A 1-d input yields shape `[1]`.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'g>> {
        let a = self.value();
        let shape = a.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op: "sum_axis",
                axis,
                ndim: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &a.data()[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(self.graph().push_op(out, out_shape, &[*self], move || {
            Box::new(move |g, _| {
                let mut ga = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        ga.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(ga)]
            })
        }))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'g>> {
        let len = *self.shape().get(axis).ok_or(TensorError::Axis {
            op: "mean_axis",
            axis,
            ndim: self.shape().len(),
        })?;
        Ok(self.sum_axis(axis)?.scale(1.0 / len as f64))
    }
}
