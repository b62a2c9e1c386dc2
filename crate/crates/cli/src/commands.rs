use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dbat::analysis::dump::dump_file_name;
use dbat::analysis::{attention_stats, cka_matrix, dissect, probe, read_activation, write_activation, ConceptCorpus};
use dbat::layers::Trace;
use dbat::tensor::{ParamStore, Tensor};
use dbat::train::ablation::{grid_variants, table_variants, AblationTable};
use dbat::train::data::{generate_scenes, SyntheticScene};
use dbat::train::trainer::eval_batches;
use dbat::train::{evaluate, load_checkpoint, train_loop, Batch, Checkpoint, CheckpointPolicy, SceneSpec, Trainer};
use dbat::Dbat;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Run(e.to_string()))?;
    write_file(path, text.as_bytes())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

/// A checkpoint file, or a run directory holding `checkpoints/final.dbat`.
pub fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("checkpoints").join("final.dbat")
    } else {
        p.to_path_buf()
    }
}

fn open_checkpoint(p: &Path) -> Result<Checkpoint, CliError> {
    let path = checkpoint_path(p);
    if !path.is_file() {
        return Err(CliError::Checkpoint(format!("missing checkpoint {}", path.display())));
    }
    load_checkpoint(&path).map_err(|e| CliError::Checkpoint(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct TrainSummary {
    steps: u64,
    final_loss: Option<f64>,
    checkpoint: PathBuf,
    log: PathBuf,
}

pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<(), CliError> {
    let out = cfg.out_dir();
    let mut trainer = match resume {
        Some(p) => Trainer::from_checkpoint(&open_checkpoint(p)?)?,
        None => Trainer::new(&cfg.model, &cfg.train)?,
    };
    let mut resolved = cfg.clone();
    resolved.model = trainer.model.cfg.clone();
    resolved.train = trainer.cfg.clone();
    resolved.seed = Some(trainer.cfg.seed);
    create_dir(out)?;
    resolved.write(out)?;
    let ckpt_dir = out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    let log_path = out.join("train_log.jsonl");
    let file = fs::File::create(&log_path).map_err(|e| CliError::Io(format!("{}: {e}", log_path.display())))?;
    let mut log = BufWriter::new(file);
    let policy = CheckpointPolicy {
        dir: Some(ckpt_dir.clone()),
        every: trainer.cfg.checkpoint_every,
    };
    let until = trainer.cfg.total_steps as u64;
    let outcome = train_loop(&mut trainer, until, |t, step| t.training_batch(step), &mut log, &policy)?;
    log.flush().map_err(|e| CliError::Io(e.to_string()))?;
    let summary = TrainSummary {
        steps: trainer.step,
        final_loss: outcome.log.last().map(|r| r.loss),
        checkpoint: ckpt_dir.join("final.dbat"),
        log: log_path,
    };
    println!("{}", serde_json::to_string(&summary).map_err(|e| CliError::Run(e.to_string()))?);
    Ok(())
}

fn held_out(cfg: &RunConfig, spec: SceneSpec) -> Result<Vec<Batch>, CliError> {
    Ok(eval_batches(cfg.eval.seed, cfg.eval.batches, cfg.eval.batch_size, spec)?)
}

fn spec_of(ckpt: &Checkpoint) -> SceneSpec {
    SceneSpec {
        num_classes: ckpt.header.model.num_classes,
        crop: ckpt.header.image_size,
        ignore_fraction: ckpt.header.train.ignore_fraction,
        preset: ckpt.header.train.preset,
    }
}

pub fn eval(cfg: &RunConfig, ckpt_path: &Path, data_seed: Option<u64>) -> Result<(), CliError> {
    let ckpt = open_checkpoint(ckpt_path)?;
    let (model, store) = ckpt.restore()?;
    let mut cfg = cfg.clone();
    if let Some(s) = data_seed {
        cfg.eval.seed = s;
    }
    let report = evaluate(&model, &store, &held_out(&cfg, spec_of(&ckpt))?)?;
    let out = cfg.out_dir();
    write_json(&out.join("metrics.json"), &report)?;
    write_json(&out.join("eval_config.json"), &cfg.eval)?;
    println!("{}", report.summary(cfg.eval.summary));
    Ok(())
}

fn slug(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect();
    s.split('-').filter(|p| !p.is_empty()).collect::<Vec<_>>().join("-")
}

pub fn ablate(cfg: &RunConfig, full_grid: bool) -> Result<(), CliError> {
    let out = cfg.out_dir();
    create_dir(out)?;
    cfg.write(out)?;
    let variants = if full_grid { grid_variants(&cfg.model) } else { table_variants(&cfg.model) };
    let spec = SceneSpec {
        num_classes: cfg.model.num_classes,
        crop: cfg.train.crop,
        ignore_fraction: cfg.train.ignore_fraction,
        preset: cfg.train.preset,
    };
    let eval = held_out(cfg, spec)?;
    let mut results = Vec::with_capacity(variants.len());
    for (i, v) in variants.iter().enumerate() {
        let dir = out.join("variants").join(format!("{i:02}-{}", slug(&v.name)));
        let mut run = cfg.clone();
        run.model = v.model.clone();
        run.out = Some(dir.clone());
        create_dir(&dir)?;
        run.write(&dir)?;
        let mut trainer = Trainer::new(&v.model, &cfg.train)?;
        let mut log = Vec::new();
        train_loop(&mut trainer, cfg.train.total_steps as u64, |t, s| t.training_batch(s), &mut log, &CheckpointPolicy::default())?;
        write_file(&dir.join("train_log.jsonl"), &log)?;
        let report = evaluate(&trainer.model, &trainer.store, &eval)?;
        write_json(&dir.join("metrics.json"), &report)?;
        eprintln!("variant {}/{}: {} pixel_acc {:.4}", i + 1, variants.len(), v.name, report.pixel_acc);
        results.push((v.name.clone(), report));
    }
    let table = AblationTable::from_results(&results);
    let md = table.to_markdown();
    write_file(&out.join("ablation.md"), md.as_bytes())?;
    write_file(&out.join("ablation.csv"), table.to_csv().as_bytes())?;
    write_json(&out.join("ablation.json"), &table)?;
    print!("{md}");
    Ok(())
}

/// Probe scenes shared by every analysis command: `probe_batches`
/// batches of textured-or-configured scenes without IGNORE pixels.
fn probe_scenes(cfg: &RunConfig, spec: SceneSpec) -> Result<Vec<Vec<SyntheticScene>>, CliError> {
    let spec = SceneSpec {
        ignore_fraction: 0.0,
        ..spec
    };
    (0..cfg.analysis.probe_batches as u64)
        .map(|b| Ok(generate_scenes(cfg.analysis.probe_seed, b, cfg.analysis.probe_batch_size, spec)?))
        .collect()
}

fn probe_traces(model: &Dbat, store: &ParamStore, scenes: &[Vec<SyntheticScene>]) -> Result<Vec<Trace>, CliError> {
    scenes
        .iter()
        .map(|batch| Ok(probe(model, store, &Batch::from_scenes(batch)?.images)?))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct DumpManifest {
    image_size: usize,
    batches: usize,
    layers: Vec<String>,
}

const MANIFEST: &str = "manifest.json";

fn is_dump_dir(p: &Path) -> bool {
    p.join(MANIFEST).is_file()
}

fn read_dumps(dir: &Path) -> Result<(usize, Vec<Trace>), CliError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let m: DumpManifest = serde_json::from_str(&text).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))?;
    let traces = (0..m.batches)
        .map(|b| {
            let layers = m
                .layers
                .iter()
                .map(|name| {
                    let (stored, t) = read_activation(&dir.join(format!("batch{b:03}")).join(dump_file_name(name)))?;
                    Ok((stored, t))
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            Ok(Trace {
                layers,
                ..Default::default()
            })
        })
        .collect::<Result<_, CliError>>()?;
    Ok((m.image_size, traces))
}

/// Traces of a run directory, checkpoint file or activation dump.
fn traces_of(cfg: &RunConfig, p: &Path, expect_size: Option<usize>) -> Result<(usize, Vec<Trace>), CliError> {
    if is_dump_dir(p) {
        return read_dumps(p);
    }
    let ckpt = open_checkpoint(p)?;
    let (model, store) = ckpt.restore()?;
    let mut spec = spec_of(&ckpt);
    if let Some(size) = expect_size {
        if size != spec.crop {
            return Err(CliError::Run(format!("probe image size {size} differs from model input {}", spec.crop)));
        }
        spec.crop = size;
    }
    Ok((spec.crop, probe_traces(&model, &store, &probe_scenes(cfg, spec)?)?))
}

pub fn analyze_cka(cfg: &RunConfig, a: &Path, b: &Path) -> Result<(), CliError> {
    let (size, ta) = traces_of(cfg, a, None)?;
    let (_, tb) = traces_of(cfg, b, Some(size))?;
    let mat = cka_matrix(&ta, &tb, &cfg.analysis.probe)?;
    let out = cfg.out_dir();
    write_json(&out.join("cka.json"), &mat)?;
    write_file(&out.join("cka.csv"), mat.to_csv().as_bytes())?;
    let diag: Vec<Option<f64>> = (0..mat.rows.len().min(mat.cols.len())).map(|i| mat.values[i][i]).collect();
    println!(
        "{}",
        serde_json::json!({ "rows": mat.rows.len(), "cols": mat.cols.len(), "diagonal": diag })
    );
    Ok(())
}

pub fn analyze_attn(cfg: &RunConfig, ckpt_path: &Path) -> Result<(), CliError> {
    let ckpt = open_checkpoint(ckpt_path)?;
    let (model, store) = ckpt.restore()?;
    let traces = probe_traces(&model, &store, &probe_scenes(cfg, spec_of(&ckpt))?)?;
    let rep = attention_stats(&traces)?;
    let out = cfg.out_dir();
    write_json(&out.join("attn.json"), &rep)?;
    let mut csv = String::from("layer,stage,stride,window,head,distance,side\n");
    for l in &rep.layers {
        for (h, s) in l.heads.iter().enumerate() {
            csv.push_str(&format!("{},{},{},{},{h},{},{}\n", l.layer, l.stage, l.stride, l.window, s.distance, s.side));
        }
    }
    write_file(&out.join("attn.csv"), csv.as_bytes())?;
    println!(
        "{}",
        serde_json::json!({ "mask_means": rep.mask_means, "stage_sides": rep.stage_sides })
    );
    Ok(())
}

fn concat_batches(traces: &[Trace], layer: &str) -> Result<Tensor, CliError> {
    let mut shape: Option<Vec<usize>> = None;
    let mut data = Vec::new();
    for t in traces {
        let a = t
            .layer(layer)
            .ok_or_else(|| CliError::Run(format!("layer `{layer}` not recorded")))?;
        match &mut shape {
            None => shape = Some(a.shape().to_vec()),
            Some(s) => s[0] += a.shape()[0],
        }
        data.extend_from_slice(a.data());
    }
    let shape = shape.ok_or_else(|| CliError::Run("no probe batches".into()))?;
    Ok(Tensor::new(shape, data).map_err(dbat::DbatError::from)?)
}

pub fn analyze_dissect(cfg: &RunConfig, ckpt_path: &Path) -> Result<(), CliError> {
    let ckpt = open_checkpoint(ckpt_path)?;
    let (model, store) = ckpt.restore()?;
    let scenes = probe_scenes(cfg, spec_of(&ckpt))?;
    let traces = probe_traces(&model, &store, &scenes)?;
    let flat: Vec<SyntheticScene> = scenes.into_iter().flatten().collect();
    let corpus = ConceptCorpus::from_scenes(&flat, model.cfg.num_classes)?;
    let layers = if cfg.analysis.dissect_layers.is_empty() {
        ["map1", "map2", "map3", "map4", "aggregated", "merged"]
            .into_iter()
            .filter(|n| traces[0].layer(n).is_some())
            .map(String::from)
            .collect()
    } else {
        cfg.analysis.dissect_layers.clone()
    };
    let out = cfg.out_dir();
    let mut summary = serde_json::Map::new();
    for layer in &layers {
        let acts = concat_batches(&traces, layer)?;
        let rep = dissect(layer, &acts, &corpus, &cfg.analysis.dissect)?;
        let file = dump_file_name(layer).replace(".act", "");
        write_json(&out.join(format!("dissect_{file}.json")), &rep)?;
        write_file(&out.join(format!("dissect_{file}.csv")), rep.to_csv().as_bytes())?;
        summary.insert(
            layer.clone(),
            serde_json::json!({ "units": rep.units.len(), "unlabeled": rep.unlabeled, "labeled": rep.category_counts }),
        );
    }
    println!("{}", serde_json::Value::Object(summary));
    Ok(())
}

pub fn dump_activations(cfg: &RunConfig, ckpt_path: &Path) -> Result<(), CliError> {
    let ckpt = open_checkpoint(ckpt_path)?;
    let (model, store) = ckpt.restore()?;
    let traces = probe_traces(&model, &store, &probe_scenes(cfg, spec_of(&ckpt))?)?;
    let out = cfg.out_dir();
    let layers: Vec<String> = traces[0].layers.iter().map(|(n, _)| n.clone()).collect();
    for (b, t) in traces.iter().enumerate() {
        let dir = out.join(format!("batch{b:03}"));
        create_dir(&dir)?;
        for (name, act) in &t.layers {
            write_activation(&dir.join(dump_file_name(name)), name, act)?;
        }
    }
    let manifest = DumpManifest {
        image_size: ckpt.header.image_size,
        batches: traces.len(),
        layers,
    };
    write_json(&out.join(MANIFEST), &manifest)?;
    println!(
        "{}",
        serde_json::json!({ "dir": out, "batches": manifest.batches, "layers": manifest.layers.len() })
    );
    Ok(())
}
