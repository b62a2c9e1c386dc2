use std::fs;
use std::path::{Path, PathBuf};

use dbat::analysis::{DissectOptions, ProbeOptions};
use dbat::seghead::SummaryPreset;
use dbat::train::TrainConfig;
use dbat::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Seed of the held-out scene stream.
    pub seed: u64,
    pub batches: usize,
    pub batch_size: usize,
    pub summary: SummaryPreset,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            seed: 1000,
            batches: 8,
            batch_size: 4,
            summary: SummaryPreset::Full,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisOptions {
    pub probe_seed: u64,
    pub probe_batches: usize,
    pub probe_batch_size: usize,
    pub probe: ProbeOptions,
    pub dissect: DissectOptions,
    /// Layers to dissect; empty means every stage map plus the
    /// aggregated and merged features when present.
    pub dissect_layers: Vec<String>,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            probe_seed: 2000,
            probe_batches: 2,
            probe_batch_size: 8,
            probe: ProbeOptions::default(),
            dissect: DissectOptions::default(),
            dissect_layers: Vec::new(),
        }
    }
}

/// Everything a run needs. The resolved copy written into a run directory
/// has every default filled in and reproduces the run on its own.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Overrides `train.seed` when set.
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub analysis: AnalysisOptions,
}

#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub poly_power: Option<f64>,
    pub quantile: Option<f64>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Apply command-line overrides and check the result.
    pub fn resolve(mut self, o: &Overrides, default_out: &str) -> Result<Self, CliError> {
        if let Some(seed) = o.seed.or(self.seed) {
            self.train.seed = seed;
        }
        self.seed = Some(self.train.seed);
        if let Some(p) = o.poly_power {
            self.train.poly_power = p;
        }
        if let Some(q) = o.quantile {
            self.analysis.dissect.quantile = q;
        }
        if let Some(out) = &o.out {
            self.out = Some(out.clone());
        }
        if self.out.is_none() {
            self.out = Some(PathBuf::from(default_out));
        }
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.model.encoder.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.model
            .encoder
            .validate_input(self.train.crop, self.train.crop)
            .map_err(|e| CliError::Config(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.analysis.dissect.quantile) {
            return Err(CliError::Config(format!("quantile {} outside [0, 1]", self.analysis.dissect.quantile)));
        }
        if self.eval.batches == 0 || self.eval.batch_size == 0 {
            return Err(CliError::Config("eval needs at least one batch of one image".into()));
        }
        if self.analysis.probe_batches == 0 || self.analysis.probe_batch_size == 0 {
            return Err(CliError::Config("analysis needs at least one probe batch of one image".into()));
        }
        Ok(self)
    }

    pub fn out_dir(&self) -> &Path {
        self.out.as_deref().expect("resolved config has an output directory")
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Run(e.to_string()))?;
        crate::commands::write_file(&dir.join("config.json"), text.as_bytes())
    }
}
