//! Ablation variants and their delta table against the full model.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::{Downsampler, MaskPredictor, MergeMode, ModelConfig};
use crate::error::Result;
use crate::seghead::MetricsReport;
use crate::train::schedule::TrainConfig;
use crate::train::trainer::{evaluate, train_synthetic, CheckpointPolicy, Trainer};
use crate::train::data::Batch;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub model: ModelConfig,
}

/// The reference rows: the two cumulative removals, then one swap each.
pub fn table_variants(base: &ModelConfig) -> Vec<Variant> {
    let with = |name: &str, f: &dyn Fn(&mut ModelConfig)| {
        let mut m = base.clone();
        f(&mut m);
        Variant { name: name.into(), model: m }
    };
    vec![
        with("Full model", &|_| {}),
        with("- Feature merging", &|m| m.ablation.disable_merge = true),
        with("- Dynamic backward attention", &|m| {
            m.ablation.disable_merge = true;
            m.ablation.disable_dba = true;
        }),
        with("CNN --> Dilated CNN", &|m| m.dba.mask_predictor = MaskPredictor::DilatedConv),
        with("MLP --> Average Pooling", &|m| m.dba.downsampler = Downsampler::AveragePool),
        with("Attention --> Residual Connection", &|m| m.merge.mode = MergeMode::PlainResidual),
    ]
}

/// Every combination of the four switches, without repeating variants
/// whose differences are switched off. The first entry is the base model.
pub fn grid_variants(base: &ModelConfig) -> Vec<Variant> {
    let mut out = vec![Variant {
        name: "Full model".into(),
        model: base.clone(),
    }];
    for disable_merge in [false, true] {
        for disable_dba in [false, true] {
            for mask in [MaskPredictor::Conv1x1, MaskPredictor::DilatedConv] {
                for down in [Downsampler::Mlp, Downsampler::AveragePool] {
                    for mode in [MergeMode::Attention, MergeMode::PlainResidual] {
                        let mut m = base.clone();
                        m.ablation.disable_merge = disable_merge;
                        m.ablation.disable_dba = disable_dba;
                        m.dba.mask_predictor = mask;
                        m.dba.downsampler = down;
                        m.merge.mode = mode;
                        let m = canonical(m, base);
                        if out.iter().any(|v| v.model == m) {
                            continue;
                        }
                        let name = variant_name(&m);
                        out.push(Variant { name, model: m });
                    }
                }
            }
        }
    }
    out
}

/// Reset options that have no effect under the active removals.
fn canonical(mut m: ModelConfig, base: &ModelConfig) -> ModelConfig {
    if m.ablation.disable_dba {
        m.dba = base.dba.clone();
    }
    if m.ablation.disable_merge {
        m.merge = base.merge.clone();
    }
    m
}

fn variant_name(m: &ModelConfig) -> String {
    let mut parts = Vec::new();
    if m.ablation.disable_merge {
        parts.push("-merge".to_string());
    } else {
        parts.push(format!("merge={:?}", m.merge.mode).to_lowercase());
    }
    if m.ablation.disable_dba {
        parts.push("-dba".into());
    } else {
        parts.push(format!("mask={:?}", m.dba.mask_predictor).to_lowercase());
        parts.push(format!("down={:?}", m.dba.downsampler).to_lowercase());
    }
    parts.join(" ")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub pixel_acc: f64,
    pub mean_acc: f64,
    /// Percentage points relative to the first row.
    pub delta_pixel_acc: f64,
    pub delta_mean_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Deltas in percentage points against `results[0]`.
    pub fn from_results(results: &[(String, MetricsReport)]) -> Self {
        let (base_p, base_m) = results
            .first()
            .map(|(_, r)| (r.pixel_acc, r.mean_acc))
            .unwrap_or((0.0, 0.0));
        let rows = results
            .iter()
            .map(|(name, r)| AblationRow {
                name: name.clone(),
                pixel_acc: r.pixel_acc,
                mean_acc: r.mean_acc,
                delta_pixel_acc: 100.0 * (r.pixel_acc - base_p),
                delta_mean_acc: 100.0 * (r.mean_acc - base_m),
            })
            .collect();
        Self { rows }
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Variant | Pixel Acc | Mean Acc | Δ Pixel Acc | Δ Mean Acc |\n|---|---|---|---|---|\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {:.2} | {:.2} | {:+.2} | {:+.2} |",
                r.name,
                100.0 * r.pixel_acc,
                100.0 * r.mean_acc,
                r.delta_pixel_acc,
                r.delta_mean_acc
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,pixel_acc,mean_acc,delta_pixel_acc_pp,delta_mean_acc_pp\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "\"{}\",{},{},{},{}",
                r.name.replace('"', "\"\""),
                r.pixel_acc,
                r.mean_acc,
                r.delta_pixel_acc,
                r.delta_mean_acc
            );
        }
        s
    }
}

/// Train each variant from the same seed and evaluate it on `eval`.
pub fn run_ablation(variants: &[Variant], train: &TrainConfig, eval: &[Batch]) -> Result<Vec<(String, MetricsReport)>> {
    variants
        .iter()
        .map(|v| {
            let mut t = Trainer::new(&v.model, train)?;
            train_synthetic(&mut t, train.total_steps as u64, &mut std::io::sink(), &CheckpointPolicy::default())?;
            Ok((v.name.clone(), evaluate(&t.model, &t.store, eval)?))
        })
        .collect()
}
