//! Parameterised building blocks and the forward-pass context.

use std::cell::RefCell;

use dbat_tensor::{Conv2dSpec, Graph, ParamStore, Precision, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Seeded parameter initializer. Values are rounded to `f32` so stored
/// parameters are exactly representable in checkpoints.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| self.rng.gen_range(-bound..bound)).rounded(Precision::Single)
    }

    /// Normal with `std`, redrawn outside ±2σ.
    pub fn trunc_normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("positive std");
        Tensor::from_fn(shape.to_vec(), |_| loop {
            let v: f64 = dist.sample(&mut self.rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .rounded(Precision::Single)
    }
}

/// Per-forward context: the tape, the parameters, and an optional recorder.
pub struct Ctx<'g> {
    pub graph: &'g Graph,
    pub params: &'g ParamStore,
    trace: Option<RefCell<Trace>>,
}

impl<'g> Ctx<'g> {
    pub fn new(graph: &'g Graph, params: &'g ParamStore) -> Self {
        Self {
            graph,
            params,
            trace: None,
        }
    }

    /// Like [`Ctx::new`], additionally recording activations and attention weights.
    pub fn recording(graph: &'g Graph, params: &'g ParamStore) -> Self {
        Self {
            graph,
            params,
            trace: Some(RefCell::new(Trace::default())),
        }
    }

    pub fn param(&self, name: &str) -> Result<Var<'g>> {
        Ok(self.graph.param(self.params, name)?)
    }

    pub fn constant(&self, t: Tensor) -> Var<'g> {
        self.graph.constant(t)
    }

    pub fn is_recording(&self) -> bool {
        self.trace.is_some()
    }

    /// Record an NCHW activation under `name`.
    pub fn record_layer(&self, name: impl Into<String>, value: &Var<'g>) {
        if let Some(t) = &self.trace {
            t.borrow_mut().layers.push((name.into(), (*value.value()).clone()));
        }
    }

    pub fn record_attention(&self, rec: AttentionRecord) {
        if let Some(t) = &self.trace {
            t.borrow_mut().attention.push(rec);
        }
    }

    /// Record the `[N, 4, H₄, W₄]` backward-attention weights.
    pub fn record_masks(&self, weights: &Var<'g>) {
        if let Some(t) = &self.trace {
            t.borrow_mut().masks = Some((*weights.value()).clone());
        }
    }

    pub fn take_trace(&self) -> Trace {
        self.trace.as_ref().map(|t| t.take()).unwrap_or_default()
    }
}

/// Activations captured during one forward pass, in forward order.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    /// `(layer name, [N, C, H, W] activation)`.
    pub layers: Vec<(String, Tensor)>,
    pub attention: Vec<AttentionRecord>,
    pub masks: Option<Tensor>,
}

impl Trace {
    pub fn layer(&self, name: &str) -> Option<&Tensor> {
        self.layers.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Softmax weights of one windowed attention layer.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub layer: String,
    /// 0-based encoder stage.
    pub stage: usize,
    /// Input pixels per feature-map pixel at this stage.
    pub stride: usize,
    /// Window side in feature-map pixels.
    pub window: usize,
    /// `[windows, heads, window², window²]`, rows indexed by query.
    pub weights: Tensor,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
}

impl Linear {
    /// Uniform ±1/√fan_in weights, zero bias.
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Self> {
        let weight = format!("{name}.weight");
        store.insert(&weight, init.uniform(&[fan_out, fan_in], 1.0 / (fan_in as f64).sqrt()))?;
        let bias = if bias {
            let b = format!("{name}.bias");
            store.insert(&b, Tensor::zeros([fan_out]))?;
            Some(b)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: &Var<'g>) -> Result<Var<'g>> {
        let w = ctx.param(&self.weight)?;
        let b = self.bias.as_deref().map(|b| ctx.param(b)).transpose()?;
        Ok(x.linear(&w, b.as_ref())?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gamma = format!("{name}.weight");
        let beta = format!("{name}.bias");
        store.insert(&gamma, Tensor::ones([dim]))?;
        store.insert(&beta, Tensor::zeros([dim]))?;
        Ok(Self { gamma, beta })
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: &Var<'g>) -> Result<Var<'g>> {
        Ok(x.layer_norm(&ctx.param(&self.gamma)?, &ctx.param(&self.beta)?, LN_EPS)?)
    }
}

/// Per-pixel projection of NCHW maps.
#[derive(Clone, Debug)]
pub struct Conv1x1 {
    pub weight: String,
    pub bias: String,
}

impl Conv1x1 {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.insert(&weight, init.uniform(&[cout, cin], 1.0 / (cin as f64).sqrt()))?;
        store.insert(&bias, Tensor::zeros([cout]))?;
        Ok(Self { weight, bias })
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: &Var<'g>) -> Result<Var<'g>> {
        Ok(x.conv1x1(&ctx.param(&self.weight)?, &ctx.param(&self.bias)?)?)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: String,
    pub bias: String,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    /// Square `kernel`, stride 1, padding keeping the spatial size.
    pub fn same(store: &mut ParamStore, init: &mut Init, name: &str, cin: usize, cout: usize, kernel: usize, dilation: usize) -> Result<Self> {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        let fan_in = cin * kernel * kernel;
        store.insert(&weight, init.uniform(&[cout, cin, kernel, kernel], 1.0 / (fan_in as f64).sqrt()))?;
        store.insert(&bias, Tensor::zeros([cout]))?;
        Ok(Self {
            weight,
            bias,
            spec: Conv2dSpec {
                stride: 1,
                padding: dilation * (kernel - 1) / 2,
                dilation,
            },
        })
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: &Var<'g>) -> Result<Var<'g>> {
        let b = ctx.param(&self.bias)?;
        Ok(x.conv2d(&ctx.param(&self.weight)?, Some(&b), self.spec)?)
    }
}
