//! Turning recorded feature maps into `examples × features` matrices.

use dbat_tensor::{Graph, ParamStore, Precision, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{DbatError, Result};
use crate::layers::{Ctx, Trace};
use crate::model::Dbat;

/// How a `[N, C, H, W]` map becomes CKA rows. Each map is average-pooled
/// (or nearest-expanded) to a `grid × grid` probe grid, so every layer
/// yields `N·grid²` rows regardless of its resolution; rows beyond
/// `max_rows` are dropped by even striding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeOptions {
    pub grid: usize,
    pub max_rows: usize,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self { grid: 4, max_rows: 256 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMatrix {
    pub layer_name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ActivationMatrix {
    pub fn new(layer_name: impl Into<String>, rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        let layer_name = layer_name.into();
        if rows < 4 {
            return Err(DbatError::Argument(format!("layer `{layer_name}`: {rows} examples, need at least 4")));
        }
        if data.len() != rows * cols || cols == 0 {
            return Err(DbatError::Argument(format!(
                "layer `{layer_name}`: {} values for {rows}x{cols}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DbatError::Argument(format!("layer `{layer_name}` has non-finite activations")));
        }
        Ok(Self {
            layer_name,
            rows,
            cols,
            data,
        })
    }

    /// Rows `(n, y, x)` over the probe grid, channels as features.
    pub fn from_activation(name: &str, act: &Tensor, opts: &ProbeOptions) -> Result<Self> {
        let s = act.shape();
        if s.len() != 4 {
            return Err(DbatError::Argument(format!("layer `{name}`: expected NCHW, got {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let g = opts.grid;
        let fits = |len: usize| g > 0 && (len % g == 0 || g % len == 0);
        if !fits(h) || !fits(w) {
            return Err(DbatError::Argument(format!("layer `{name}`: {h}x{w} map does not align with a {g}x{g} grid")));
        }
        let cell = |y: usize, x: usize, src: &[f64]| -> f64 {
            let (y0, y1) = if h >= g { (y * h / g, (y + 1) * h / g) } else { (y * h / g, y * h / g + 1) };
            let (x0, x1) = if w >= g { (x * w / g, (x + 1) * w / g) } else { (x * w / g, x * w / g + 1) };
            let mut sum = 0.0;
            for yy in y0..y1 {
                for xx in x0..x1 {
                    sum += src[yy * w + xx];
                }
            }
            sum / ((y1 - y0) * (x1 - x0)) as f64
        };
        let total = n * g * g;
        let keep: Vec<usize> = if total > opts.max_rows {
            (0..opts.max_rows).map(|i| i * total / opts.max_rows).collect()
        } else {
            (0..total).collect()
        };
        let mut data = Vec::with_capacity(keep.len() * c);
        for &r in &keep {
            let (b, y, x) = (r / (g * g), (r / g) % g, r % g);
            for ch in 0..c {
                let plane = &act.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                data.push(cell(y, x, plane));
            }
        }
        Self::new(name, keep.len(), c, data)
    }

    /// Copy with each column's mean subtracted.
    pub fn centered(&self) -> Self {
        let mut means = vec![0.0; self.cols];
        for row in self.data.chunks(self.cols) {
            for (m, v) in means.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut means {
            *m /= self.rows as f64;
        }
        let data = self
            .data
            .chunks(self.cols)
            .flat_map(|row| row.iter().zip(&means).map(|(v, m)| v - m))
            .collect();
        Self {
            data,
            ..self.clone()
        }
    }
}

/// Forward `images` through the model, recording every block output,
/// stage output, attention weights and backward-attention masks.
pub fn probe(model: &Dbat, store: &ParamStore, images: &Tensor) -> Result<Trace> {
    let graph = Graph::new(Precision::Single);
    let ctx = Ctx::recording(&graph, store);
    model.forward(&ctx, &graph.constant(images.clone()))?;
    Ok(ctx.take_trace())
}
