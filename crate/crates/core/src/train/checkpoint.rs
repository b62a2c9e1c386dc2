//! Binary checkpoint files.
//!
//! Layout: `b"DBAT"`, format version (`u32` LE), header length (`u64` LE),
//! a JSON header, then every parameter as little-endian `f32` in manifest
//! order, then the first and second optimizer moments in the same layout.

use std::fs;
use std::io::Write;
use std::path::Path;

use dbat_tensor::{ParamStore, Precision, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{DbatError, Result};
use crate::model::Dbat;
use crate::train::adamw::AdamW;
use crate::train::schedule::TrainConfig;

pub const MAGIC: &[u8; 4] = b"DBAT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in `f32` elements from the start of the parameter payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub model: ModelConfig,
    pub image_size: usize,
    pub train: TrainConfig,
    pub step: u64,
    pub seed: u64,
    pub optimizer_steps: u64,
    pub params: Vec<ManifestEntry>,
}

/// Everything needed to rebuild a model and continue training it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: Header,
    pub params: ParamStore,
    pub optimizer: AdamW,
}

impl Checkpoint {
    pub fn new(model: &Dbat, store: &ParamStore, optimizer: &AdamW, train: &TrainConfig, step: u64, seed: u64) -> Self {
        let mut offset = 0;
        let params = store
            .iter()
            .map(|p| {
                let e = ManifestEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    offset,
                };
                offset += p.value.numel();
                e
            })
            .collect();
        Self {
            header: Header {
                model: model.cfg.clone(),
                image_size: model.image_size,
                train: train.clone(),
                step,
                seed,
                optimizer_steps: optimizer.t,
                params,
            },
            params: store.clone(),
            optimizer: optimizer.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let total: usize = self.params.numel();
        let mut out = Vec::with_capacity(16 + header.len() + 12 * total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let mut put = |t: &Tensor| {
            for &x in t.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        };
        for p in self.params.iter() {
            put(&p.value);
        }
        for m in &self.optimizer.m {
            put(m);
        }
        for v in &self.optimizer.v {
            put(v);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| DbatError::Checkpoint(m);
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing DBAT magic bytes".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        let payload = &bytes[16 + hlen..];
        let total: usize = header.params.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if payload.len() != 3 * 4 * total {
            return Err(bad(format!(
                "payload has {} bytes, manifest needs {}",
                payload.len(),
                12 * total
            )));
        }
        let read = |section: usize, e: &ManifestEntry| -> Result<Tensor> {
            let n: usize = e.shape.iter().product();
            let start = 4 * (section * total + e.offset);
            let data = payload
                .get(start..start + 4 * n)
                .ok_or_else(|| bad(format!("parameter `{}` exceeds the payload", e.name)))?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            Tensor::new(e.shape.clone(), data).map_err(|err| bad(format!("parameter `{}`: {err}", e.name)))
        };
        let mut params = ParamStore::new();
        let mut m = Vec::with_capacity(header.params.len());
        let mut v = Vec::with_capacity(header.params.len());
        for e in &header.params {
            params.insert(&e.name, read(0, e)?)?;
            m.push(read(1, e)?);
            v.push(read(2, e)?);
        }
        let t = &header.train;
        let optimizer = AdamW {
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.adam_eps,
            weight_decay: t.weight_decay,
            precision: Precision::Single,
            t: header.optimizer_steps,
            m,
            v,
        };
        Ok(Self {
            header,
            params,
            optimizer,
        })
    }

    /// Rebuild the model described by the header with the stored weights.
    pub fn restore(&self) -> Result<(Dbat, ParamStore)> {
        self.restore_as(&self.header.model, self.header.image_size)
    }

    /// Rebuild with an explicitly expected architecture; any difference in
    /// parameter names or shapes is reported by parameter name.
    pub fn restore_as(&self, cfg: &ModelConfig, image_size: usize) -> Result<(Dbat, ParamStore)> {
        let (model, mut fresh) = Dbat::new(cfg, image_size, 0)?;
        for p in fresh.iter() {
            match self.params.get(&p.name) {
                None => return Err(DbatError::Checkpoint(format!("parameter `{}` missing from checkpoint", p.name))),
                Some(c) if c.value.shape() != p.value.shape() => {
                    return Err(DbatError::Checkpoint(format!(
                        "parameter `{}` has shape {:?} in checkpoint, model expects {:?}",
                        p.name,
                        c.value.shape(),
                        p.value.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = self.params.names().find(|n| !fresh.contains(n)) {
            return Err(DbatError::Checkpoint(format!("parameter `{extra}` in checkpoint is not part of the model")));
        }
        for p in fresh.iter_mut() {
            p.value = self.params.value(&p.name)?.clone();
        }
        Ok((model, fresh))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| DbatError::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EncoderConfig;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig::default();
        let (model, store) = Dbat::new(&cfg, 32, 4).unwrap();
        let opt = AdamW::new(&store, 0.9, 0.999, 1e-8, 0.01);
        Checkpoint::new(&model, &store, &opt, &TrainConfig::default(), 3, 4)
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        for p in c.params.iter() {
            assert_eq!(back.params.value(&p.name).unwrap(), &p.value);
        }
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        bytes[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(DbatError::Checkpoint(_))));
        assert!(Checkpoint::from_bytes(b"NOPE").is_err());
    }

    #[test]
    fn mismatched_encoder_is_named() {
        let c = sample();
        let other = ModelConfig {
            encoder: EncoderConfig {
                embed_dim: 8,
                ..Default::default()
            },
            ..Default::default()
        };
        let err = c.restore_as(&other, 32).unwrap_err().to_string();
        assert!(err.contains("encoder.patch_embed.proj.weight"), "{err}");
    }
}
