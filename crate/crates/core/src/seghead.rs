//! Feature-pyramid decoder, pixel loss and segmentation metrics.

use dbat_tensor::{ParamStore, Tensor, Var, IGNORE_INDEX};
use serde::{Deserialize, Serialize};

use crate::config::{EncoderConfig, NUM_STAGES};
use crate::error::{DbatError, Result};
use crate::layers::{Conv1x1, Conv2d, Ctx, Init};

/// Lateral 1×1 projections, top-down nearest upsampling with addition,
/// a 3×3 smoothing conv per level, sum fusion at stride 4, 1×1 classifier
/// and bilinear upsampling to the input size.
#[derive(Clone, Debug)]
pub struct FpnDecoder {
    pub num_classes: usize,
    laterals: Vec<Conv1x1>,
    smooth: Vec<Conv2d>,
    classifier: Conv1x1,
}

impl FpnDecoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, enc: &EncoderConfig, width: usize, num_classes: usize) -> Result<Self> {
        let mut laterals = Vec::with_capacity(NUM_STAGES);
        let mut smooth = Vec::with_capacity(NUM_STAGES);
        for s in 0..NUM_STAGES {
            laterals.push(Conv1x1::new(store, init, &format!("decoder.lateral{}", s + 1), enc.channels(s), width)?);
            smooth.push(Conv2d::same(store, init, &format!("decoder.smooth{}", s + 1), width, width, 3, 1)?);
        }
        let classifier = Conv1x1::new(store, init, "decoder.classifier", width, num_classes)?;
        Ok(Self {
            num_classes,
            laterals,
            smooth,
            classifier,
        })
    }

    /// `levels` are stride-4/8/16/32 NCHW features; returns `[N, K, h, w]`.
    pub fn decode<'g>(&self, ctx: &Ctx<'g>, levels: &[Var<'g>; NUM_STAGES], out_h: usize, out_w: usize) -> Result<Var<'g>> {
        let lat: Vec<Var<'g>> = levels
            .iter()
            .zip(&self.laterals)
            .map(|(x, l)| l.forward(ctx, x))
            .collect::<Result<_>>()?;
        let mut top = vec![lat[NUM_STAGES - 1]];
        for s in (0..NUM_STAGES - 1).rev() {
            let up = top.last().expect("non-empty").upsample_nearest(2)?;
            top.push(lat[s].add(&up)?);
        }
        top.reverse();
        let mut fused: Option<Var<'g>> = None;
        for (s, (p, conv)) in top.iter().zip(&self.smooth).enumerate() {
            let mut y = conv.forward(ctx, p)?.relu();
            if s > 0 {
                y = y.upsample_nearest(1 << s)?;
            }
            fused = Some(match fused {
                None => y,
                Some(f) => f.add(&y)?,
            });
        }
        let logits = self.classifier.forward(ctx, &fused.expect("four levels"))?;
        Ok(logits.resize_bilinear(out_h, out_w)?)
    }
}

/// Mean cross-entropy over pixels whose label is not [`IGNORE_INDEX`].
pub fn loss<'g>(logits: &Var<'g>, labels: &[u8]) -> Result<Var<'g>> {
    if labels.iter().all(|&l| l == IGNORE_INDEX) {
        return Err(DbatError::DegenerateBatch("every pixel is IGNORE".into()));
    }
    Ok(logits.cross_entropy(labels)?)
}

/// Class index per pixel (`N·H·W`, row-major) from `[N, K, H, W]` logits.
pub fn predict(logits: &Tensor) -> Result<Vec<u8>> {
    Ok(logits.argmax(1)?.into_iter().map(|k| k as u8).collect())
}

/// Confusion-matrix based scores. `confusion[g][p]` counts pixels with
/// ground truth `g` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pixel_acc: f64,
    pub mean_acc: f64,
    pub miou: f64,
    pub per_class_acc: Vec<Option<f64>>,
    pub per_class_iou: Vec<Option<f64>>,
    pub confusion: Vec<Vec<u64>>,
}

impl MetricsReport {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Self {
        let k = confusion.len();
        let total: u64 = confusion.iter().flatten().sum();
        let diag: u64 = (0..k).map(|i| confusion[i][i]).sum();
        let col = |j: usize| confusion.iter().map(|r| r[j]).sum::<u64>();
        let mut per_class_acc = Vec::with_capacity(k);
        let mut per_class_iou = Vec::with_capacity(k);
        let (mut acc_sum, mut iou_sum, mut present) = (0.0, 0.0, 0usize);
        for i in 0..k {
            let tp = confusion[i][i];
            let gt: u64 = confusion[i].iter().sum();
            let union = gt + col(i) - tp;
            let acc = (gt > 0).then(|| tp as f64 / gt as f64);
            let iou = (union > 0).then(|| tp as f64 / union as f64);
            if let Some(a) = acc {
                present += 1;
                acc_sum += a;
                iou_sum += iou.unwrap_or(0.0);
            }
            per_class_acc.push(acc);
            per_class_iou.push(iou);
        }
        let avg = |s: f64| if present == 0 { 0.0 } else { s / present as f64 };
        Self {
            pixel_acc: if total == 0 { 0.0 } else { diag as f64 / total as f64 },
            mean_acc: avg(acc_sum),
            miou: avg(iou_sum),
            per_class_acc,
            per_class_iou,
            confusion,
        }
    }

    /// Combine reports computed on disjoint shards.
    pub fn merge(&self, other: &MetricsReport) -> Result<MetricsReport> {
        if self.confusion.len() != other.confusion.len() {
            return Err(DbatError::Argument(format!(
                "cannot merge metrics over {} and {} classes",
                self.confusion.len(),
                other.confusion.len()
            )));
        }
        let conf = self
            .confusion
            .iter()
            .zip(&other.confusion)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect();
        Ok(Self::from_confusion(conf))
    }

    /// Headline numbers as JSON; the LMD-style preset leaves out mIoU.
    pub fn summary(&self, preset: SummaryPreset) -> serde_json::Value {
        let mut v = serde_json::json!({
            "pixel_acc": self.pixel_acc,
            "mean_acc": self.mean_acc,
        });
        if preset == SummaryPreset::Full {
            v["miou"] = self.miou.into();
        }
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryPreset {
    #[default]
    Full,
    Lmd,
}

/// Metrics over non-IGNORE pixels. `pred` and `labels` are flat and aligned.
pub fn metrics(pred: &[u8], labels: &[u8], num_classes: usize) -> Result<MetricsReport> {
    if pred.len() != labels.len() {
        return Err(DbatError::Argument(format!(
            "{} predictions for {} labels",
            pred.len(),
            labels.len()
        )));
    }
    let mut confusion = vec![vec![0u64; num_classes]; num_classes];
    for (&p, &g) in pred.iter().zip(labels) {
        if g == IGNORE_INDEX {
            continue;
        }
        let (p, g) = (p as usize, g as usize);
        if p >= num_classes || g >= num_classes {
            return Err(DbatError::Argument(format!(
                "class {} out of range for {num_classes} classes",
                p.max(g)
            )));
        }
        confusion[g][p] += 1;
    }
    Ok(MetricsReport::from_confusion(confusion))
}
