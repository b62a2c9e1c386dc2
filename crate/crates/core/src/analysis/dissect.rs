//! Unit-to-concept alignment by thresholded activation masks.

use std::collections::BTreeMap;

use dbat_tensor::{Graph, Precision, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DbatError, Result};
use crate::train::data::{SyntheticScene, PALETTE, SHAPE_NAMES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    pub concepts: Vec<String>,
}

/// Dense per-pixel concept labels: for each image and category, one label
/// map of `height × width` entries indexing that category's concepts.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptCorpus {
    pub height: usize,
    pub width: usize,
    pub categories: Vec<Category>,
    /// `[image][category][pixel]`.
    pub labels: Vec<Vec<Vec<u8>>>,
}

impl ConceptCorpus {
    /// Texture, color and shape concepts of synthetic scenes.
    pub fn from_scenes(scenes: &[SyntheticScene], num_textures: usize) -> Result<Self> {
        let Some(first) = scenes.first() else {
            return Err(DbatError::Argument("empty concept corpus".into()));
        };
        let categories = vec![
            Category {
                name: "texture".into(),
                concepts: (0..num_textures).map(|k| format!("texture{k}")).collect(),
            },
            Category {
                name: "color".into(),
                concepts: (0..PALETTE.len()).map(|k| format!("color{k}")).collect(),
            },
            Category {
                name: "shape".into(),
                concepts: SHAPE_NAMES.iter().map(|s| s.to_string()).collect(),
            },
        ];
        let labels = scenes
            .iter()
            .map(|s| vec![s.texture.clone(), s.color.clone(), s.shape.clone()])
            .collect();
        let corpus = Self {
            height: first.size,
            width: first.size,
            categories,
            labels,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(DbatError::Argument("empty concept corpus".into()));
        }
        let px = self.height * self.width;
        for img in &self.labels {
            if img.len() != self.categories.len() {
                return Err(DbatError::Argument("image without a label map for every category".into()));
            }
            for (cat, map) in self.categories.iter().zip(img) {
                if map.len() != px {
                    return Err(DbatError::Argument(format!("`{}` label map has {} pixels, expected {px}", cat.name, map.len())));
                }
                if map.iter().any(|&l| l as usize >= cat.concepts.len()) {
                    return Err(DbatError::Argument(format!("`{}` label outside its concept list", cat.name)));
                }
            }
        }
        Ok(())
    }

    fn concept_offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.categories.len());
        let mut acc = 0;
        for c in &self.categories {
            off.push(acc);
            acc += c.concepts.len();
        }
        off
    }

    fn num_concepts(&self) -> usize {
        self.categories.iter().map(|c| c.concepts.len()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DissectOptions {
    /// Fraction of activation values that lie above the unit threshold.
    pub quantile: f64,
    pub iou_threshold: f64,
}

impl Default for DissectOptions {
    fn default() -> Self {
        Self {
            quantile: 0.005,
            iou_threshold: 0.04,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitReport {
    pub unit: usize,
    pub threshold: f64,
    /// Highest-IoU concept, labeled or not.
    pub best_concept: String,
    pub best_category: String,
    pub iou: f64,
    /// Set iff `iou` exceeds the IoU threshold.
    pub label: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DissectionReport {
    pub layer: String,
    pub quantile: f64,
    pub iou_threshold: f64,
    pub units: Vec<UnitReport>,
    /// Labeled units per category.
    pub category_counts: BTreeMap<String, usize>,
    pub unlabeled: usize,
}

impl DissectionReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("unit,threshold,best_category,best_concept,iou,label\n");
        for u in &self.units {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                u.unit,
                u.threshold,
                u.best_category,
                u.best_concept,
                u.iou,
                u.label.as_deref().unwrap_or("")
            ));
        }
        s
    }
}

/// Threshold with `round(q·n)` of the `n` values strictly above it when
/// values are distinct.
pub fn unit_threshold(values: &[f64], quantile: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(DbatError::Argument("no activation values".into()));
    }
    if !(0.0..=1.0).contains(&quantile) {
        return Err(DbatError::Argument(format!("quantile {quantile} outside [0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let above = ((quantile * n as f64).round() as usize).min(n - 1);
    Ok(sorted[n - 1 - above])
}

/// Dissect every channel of `activations: [N, C, h, w]` against a corpus
/// whose `N` images have label resolution `H × W`. Activations are
/// bilinearly resized to `H × W` and compared with the unit threshold;
/// IoU is accumulated over the whole corpus.
pub fn dissect(layer: &str, activations: &Tensor, corpus: &ConceptCorpus, opts: &DissectOptions) -> Result<DissectionReport> {
    corpus.validate()?;
    let s = activations.shape();
    if s.len() != 4 || s[0] != corpus.labels.len() {
        return Err(DbatError::Argument(format!(
            "activations {s:?} do not match a corpus of {} images",
            corpus.labels.len()
        )));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (hh, ww) = (corpus.height, corpus.width);
    let hw = h * w;
    let thresholds: Vec<(f64, bool)> = (0..c)
        .into_par_iter()
        .map(|u| {
            let vals: Vec<f64> = (0..n)
                .flat_map(|b| activations.data()[(b * c + u) * hw..(b * c + u + 1) * hw].iter().copied())
                .collect();
            let constant = vals.iter().all(|&v| v == vals[0]);
            Ok((unit_threshold(&vals, opts.quantile)?, constant))
        })
        .collect::<Result<_>>()?;

    let nc = corpus.num_concepts();
    let offsets = corpus.concept_offsets();
    let mut inter = vec![0u64; c * nc];
    let mut mask_px = vec![0u64; c];
    let mut concept_px = vec![0u64; nc];
    for b in 0..n {
        let graph = Graph::new(Precision::Double);
        let slice = Tensor::new([1, c, h, w], activations.data()[b * c * hw..(b + 1) * c * hw].to_vec())?;
        let up_rc = graph.constant(slice).resize_bilinear(hh, ww)?.value();
        let up = up_rc.data();
        let maps = &corpus.labels[b];
        for (cat, map) in maps.iter().enumerate() {
            for &l in map {
                concept_px[offsets[cat] + l as usize] += 1;
            }
        }
        let per_unit: Vec<(Vec<u64>, u64)> = (0..c)
            .into_par_iter()
            .map(|u| {
                let mut hits = vec![0u64; nc];
                let mut count = 0;
                let (a_k, constant) = thresholds[u];
                if constant {
                    return (hits, 0);
                }
                let plane = &up[u * hh * ww..(u + 1) * hh * ww];
                for (p, &v) in plane.iter().enumerate() {
                    if v > a_k {
                        count += 1;
                        for (cat, map) in maps.iter().enumerate() {
                            hits[offsets[cat] + map[p] as usize] += 1;
                        }
                    }
                }
                (hits, count)
            })
            .collect();
        for (u, (hits, count)) in per_unit.into_iter().enumerate() {
            mask_px[u] += count;
            for (dst, h) in inter[u * nc..(u + 1) * nc].iter_mut().zip(hits) {
                *dst += h;
            }
        }
    }

    let names: Vec<(String, String)> = corpus
        .categories
        .iter()
        .flat_map(|cat| cat.concepts.iter().map(move |k| (cat.name.clone(), k.clone())))
        .collect();
    let mut category_counts: BTreeMap<String, usize> = corpus.categories.iter().map(|c| (c.name.clone(), 0)).collect();
    let mut unlabeled = 0;
    let units = (0..c)
        .map(|u| {
            let mut best = (0usize, -1.0);
            for k in 0..nc {
                let i = inter[u * nc + k];
                let union = mask_px[u] + concept_px[k] - i;
                let iou = if union == 0 { 0.0 } else { i as f64 / union as f64 };
                if iou > best.1 {
                    best = (k, iou);
                }
            }
            let (cat, concept) = names[best.0].clone();
            let label = (best.1 > opts.iou_threshold).then(|| concept.clone());
            if label.is_some() {
                *category_counts.get_mut(&cat).expect("known category") += 1;
            } else {
                unlabeled += 1;
            }
            UnitReport {
                unit: u,
                threshold: thresholds[u].0,
                best_concept: concept,
                best_category: cat,
                iou: best.1,
                label,
            }
        })
        .collect();
    Ok(DissectionReport {
        layer: layer.to_string(),
        quantile: opts.quantile,
        iou_threshold: opts.iou_threshold,
        units,
        category_counts,
        unlabeled,
    })
}
