//! Linear CKA with the unbiased HSIC estimator, including the minibatch
//! form that sums the three HSIC terms over batches before normalizing.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::activations::ActivationMatrix;
use crate::error::{DbatError, Result};
use crate::layers::Trace;
use crate::analysis::activations::ProbeOptions;

/// Self-HSIC values at or below this fraction of the mean squared Gram
/// entry are treated as zero.
const DEGENERATE_RTOL: f64 = 1e-10;

/// Square matrix in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gram {
    pub m: usize,
    pub data: Vec<f64>,
}

impl Gram {
    /// `X Xᵀ` of an `m × p` matrix.
    pub fn linear(x: &ActivationMatrix) -> Self {
        let (m, p) = (x.rows, x.cols);
        let mut data = vec![0.0; m * m];
        data.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
            let xi = &x.data[i * p..(i + 1) * p];
            for (j, out) in row.iter_mut().enumerate() {
                let xj = &x.data[j * p..(j + 1) * p];
                *out = xi.iter().zip(xj).map(|(a, b)| a * b).sum();
            }
        });
        Self { m, data }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.m + j]
    }

    /// Copy with the diagonal set to zero.
    pub fn zero_diagonal(&self) -> Self {
        let mut g = self.clone();
        for i in 0..self.m {
            g.data[i * self.m + i] = 0.0;
        }
        g
    }

    fn mean_square(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>() / self.data.len() as f64
    }
}

/// The two Gram matrices of a layer pair with their zero-diagonal copies.
#[derive(Clone, Debug)]
pub struct GramPair {
    pub k: Gram,
    pub l: Gram,
    pub k_tilde: Gram,
    pub l_tilde: Gram,
}

impl GramPair {
    pub fn new(x: &ActivationMatrix, y: &ActivationMatrix) -> Result<Self> {
        if x.rows != y.rows {
            return Err(DbatError::Argument(format!(
                "activation matrices have {} and {} examples",
                x.rows, y.rows
            )));
        }
        let k = Gram::linear(x);
        let l = Gram::linear(y);
        Ok(Self {
            k_tilde: k.zero_diagonal(),
            l_tilde: l.zero_diagonal(),
            k,
            l,
        })
    }

    pub fn hsic1(&self) -> Result<f64> {
        hsic1(&self.k, &self.l)
    }
}

/// Unbiased HSIC estimator of two `m × m` Gram matrices, `m ≥ 4`:
/// `[tr(K̃L̃) + 1ᵀK̃1·1ᵀL̃1 / ((m−1)(m−2)) − 2/(m−2)·1ᵀK̃L̃1] / (m(m−3))`
/// where `K̃`, `L̃` are `K`, `L` with zeroed diagonals.
pub fn hsic1(k: &Gram, l: &Gram) -> Result<f64> {
    let m = k.m;
    if l.m != m {
        return Err(DbatError::Argument(format!("Gram sizes differ: {m} and {}", l.m)));
    }
    if m < 4 {
        return Err(DbatError::Argument(format!("HSIC\u{2081} undefined for m = {m} < 4")));
    }
    let kt = |i: usize, j: usize| if i == j { 0.0 } else { k.get(i, j) };
    let lt = |i: usize, j: usize| if i == j { 0.0 } else { l.get(i, j) };
    let mut trace = 0.0;
    let mut sum_k = 0.0;
    let mut sum_l = 0.0;
    let mut k_cols = vec![0.0; m];
    let mut l_rows = vec![0.0; m];
    for i in 0..m {
        for j in 0..m {
            let (a, b) = (kt(i, j), lt(i, j));
            trace += a * lt(j, i);
            sum_k += a;
            sum_l += b;
            k_cols[j] += a;
            l_rows[i] += b;
        }
    }
    // 1ᵀK̃L̃1 = Σⱼ (1ᵀK̃)ⱼ (L̃1)ⱼ
    let cross: f64 = k_cols.iter().zip(&l_rows).map(|(a, b)| a * b).sum();
    let mf = m as f64;
    let value = trace + sum_k * sum_l / ((mf - 1.0) * (mf - 2.0)) - 2.0 / (mf - 2.0) * cross;
    Ok(value / (mf * (mf - 3.0)))
}

fn centered_gram(x: &ActivationMatrix) -> Gram {
    Gram::linear(&x.centered())
}

fn degenerate(self_hsic: f64, gram_scale: f64) -> bool {
    !(self_hsic > DEGENERATE_RTOL * gram_scale) || gram_scale == 0.0
}

/// Linear CKA after centering each feature column; clamped to [−1, 1].
pub fn cka(x: &ActivationMatrix, y: &ActivationMatrix) -> Result<f64> {
    if x.rows != y.rows {
        return Err(DbatError::Argument(format!(
            "activation matrices have {} and {} examples",
            x.rows, y.rows
        )));
    }
    let k = centered_gram(x);
    let l = centered_gram(y);
    let hxx = hsic1(&k, &k)?;
    let hyy = hsic1(&l, &l)?;
    if degenerate(hxx, k.mean_square()) {
        return Err(DbatError::DegenerateLayer(x.layer_name.clone()));
    }
    if degenerate(hyy, l.mean_square()) {
        return Err(DbatError::DegenerateLayer(y.layer_name.clone()));
    }
    Ok((hsic1(&k, &l)? / (hxx * hyy).sqrt()).clamp(-1.0, 1.0))
}

/// Running sums for minibatch CKA of one layer pair.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CkaAccumulator {
    pub xy: f64,
    pub xx: f64,
    pub yy: f64,
    scale_x: f64,
    scale_y: f64,
}

impl CkaAccumulator {
    pub fn update(&mut self, x: &ActivationMatrix, y: &ActivationMatrix) -> Result<()> {
        let k = centered_gram(x);
        let l = centered_gram(y);
        self.add(&k, &l)
    }

    fn add(&mut self, k: &Gram, l: &Gram) -> Result<()> {
        self.xy += hsic1(k, l)?;
        self.xx += hsic1(k, k)?;
        self.yy += hsic1(l, l)?;
        self.scale_x += k.mean_square();
        self.scale_y += l.mean_square();
        Ok(())
    }

    /// `None` when either side's accumulated self-similarity vanishes.
    pub fn value(&self) -> Option<f64> {
        if degenerate(self.xx, self.scale_x) || degenerate(self.yy, self.scale_y) {
            return None;
        }
        Some((self.xy / (self.xx * self.yy).sqrt()).clamp(-1.0, 1.0))
    }
}

/// CKA between every recorded layer of two networks. Rows follow the
/// first network's forward order, columns the second's.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkaMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    /// `None` marks a degenerate layer.
    pub values: Vec<Vec<Option<f64>>>,
}

impl CkaMatrix {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer");
        for c in &self.cols {
            s.push(',');
            s.push_str(c);
        }
        s.push('\n');
        for (r, row) in self.rows.iter().zip(&self.values) {
            s.push_str(r);
            for v in row {
                s.push(',');
                if let Some(v) = v {
                    s.push_str(&v.to_string());
                }
            }
            s.push('\n');
        }
        s
    }
}

struct LayerGrams {
    names: Vec<String>,
    /// `[batch][layer]` centered Grams.
    grams: Vec<Vec<Gram>>,
}

fn trace_grams(traces: &[Trace], opts: &ProbeOptions) -> Result<LayerGrams> {
    let Some(first) = traces.first() else {
        return Err(DbatError::Argument("no probe batches".into()));
    };
    let names: Vec<String> = first.layers.iter().map(|(n, _)| n.clone()).collect();
    let grams = traces
        .iter()
        .map(|t| {
            names
                .iter()
                .map(|n| {
                    let act = t
                        .layer(n)
                        .ok_or_else(|| DbatError::Argument(format!("layer `{n}` missing from a probe batch")))?;
                    Ok(centered_gram(&ActivationMatrix::from_activation(n, act, opts)?))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(LayerGrams { names, grams })
}

/// Minibatch CKA matrix over paired probe batches (`a[i]` and `b[i]` must
/// come from the same inputs).
pub fn cka_matrix(a: &[Trace], b: &[Trace], opts: &ProbeOptions) -> Result<CkaMatrix> {
    if a.len() != b.len() {
        return Err(DbatError::Argument(format!("{} and {} probe batches", a.len(), b.len())));
    }
    let ga = trace_grams(a, opts)?;
    let gb = trace_grams(b, opts)?;
    let values = (0..ga.names.len())
        .into_par_iter()
        .map(|i| {
            (0..gb.names.len())
                .map(|j| {
                    let mut acc = CkaAccumulator::default();
                    for (ka, kb) in ga.grams.iter().zip(&gb.grams) {
                        acc.add(&ka[i], &kb[j])?;
                    }
                    Ok(acc.value())
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CkaMatrix {
        rows: ga.names,
        cols: gb.names,
        values,
    })
}
