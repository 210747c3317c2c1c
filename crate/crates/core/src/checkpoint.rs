//! Checkpoint directories: `manifest.json` describing the architecture,
//! `index.json` listing every tensor, and `tensors.bin` holding them as
//! little-endian f32. Training checkpoints add optimizer moments and `state.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use mcgan_nn::{Adam, AdamConfig, Kind, Params};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::config::Hyperparams;
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::generator::Generator;

pub const FORMAT: &str = "mcgan-checkpoint/1";
pub const MANIFEST: &str = "manifest.json";
pub const INDEX: &str = "index.json";
pub const TENSORS: &str = "tensors.bin";
pub const STATE: &str = "state.json";

const GEN: &str = "generator/";
const DISC: &str = "discriminator/";
const OPT_G: &str = "optimizer/generator/";
const OPT_D: &str = "optimizer/discriminator/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flags {
    pub with_mask: bool,
    pub stacked: bool,
    pub stage1_frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub hyperparams: Hyperparams,
    /// Foreground channels entering each synthesis block and leaving the last.
    pub channel_plan: Vec<usize>,
    pub flags: Flags,
    pub bn_mode: String,
    pub has_discriminator: bool,
    pub has_optimizer: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Weight,
    Buffer,
    Moment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
    pub kind: TensorKind,
}

/// Optimizer counters and anything else needed to continue training exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epoch: u64,
    pub step: u64,
    /// Position inside the current epoch, in batches.
    pub batch_in_epoch: u64,
    pub adam_g_step: u64,
    pub adam_d_step: u64,
    pub config: serde_json::Value,
}

/// Everything a checkpoint directory can hold.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub hyperparams: Hyperparams,
    pub generator: Params<f32>,
    pub discriminator: Option<Params<f32>>,
    pub optimizers: Option<(Adam<f32>, Adam<f32>)>,
    pub meta: Option<TrainMeta>,
}

fn kind_of(k: Kind) -> TensorKind {
    match k {
        Kind::Weight => TensorKind::Weight,
        Kind::Buffer => TensorKind::Buffer,
    }
}

fn push(index: &mut Vec<IndexEntry>, blob: &mut Vec<u8>, name: String, value: &ArrayD<f32>, kind: TensorKind) {
    let offset = blob.len() as u64;
    for v in value.iter() {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    index.push(IndexEntry {
        name,
        shape: value.shape().to_vec(),
        offset,
        nbytes: blob.len() as u64 - offset,
        kind,
    });
}

fn push_params(index: &mut Vec<IndexEntry>, blob: &mut Vec<u8>, prefix: &str, p: &Params<f32>) {
    for (name, e) in p.iter() {
        push(index, blob, format!("{prefix}{name}"), &e.value, kind_of(e.kind));
    }
}

fn push_adam(index: &mut Vec<IndexEntry>, blob: &mut Vec<u8>, prefix: &str, a: &Adam<f32>) {
    for (name, m) in &a.m {
        push(index, blob, format!("{prefix}m/{name}"), m, TensorKind::Moment);
    }
    for (name, v) in &a.v {
        push(index, blob, format!("{prefix}v/{name}"), v, TensorKind::Moment);
    }
}

impl Checkpoint {
    pub fn inference(generator: &Generator<f32>) -> Self {
        Checkpoint {
            hyperparams: generator.hyperparams().clone(),
            generator: generator.params.clone(),
            discriminator: None,
            optimizers: None,
            meta: None,
        }
    }

    pub fn manifest(&self) -> Manifest {
        let hp = &self.hyperparams;
        let mut plan = hp.channel_plan();
        plan.push(hp.final_channels());
        Manifest {
            format: FORMAT.into(),
            hyperparams: hp.clone(),
            channel_plan: plan,
            flags: Flags {
                with_mask: hp.with_mask,
                stacked: hp.stacked,
                stage1_frozen: hp.stage1_frozen,
            },
            bn_mode: "batch statistics in training, running statistics at inference".into(),
            has_discriminator: self.discriminator.is_some(),
            has_optimizer: self.optimizers.is_some(),
        }
    }

    /// Writes the directory. Output bytes depend only on the contents.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut index = Vec::new();
        let mut blob = Vec::new();
        push_params(&mut index, &mut blob, GEN, &self.generator);
        if let Some(d) = &self.discriminator {
            push_params(&mut index, &mut blob, DISC, d);
        }
        if let Some((g, d)) = &self.optimizers {
            push_adam(&mut index, &mut blob, OPT_G, g);
            push_adam(&mut index, &mut blob, OPT_D, d);
        }
        fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&self.manifest())?)?;
        fs::write(dir.join(INDEX), serde_json::to_vec_pretty(&index)?)?;
        fs::write(dir.join(TENSORS), blob)?;
        match &self.meta {
            Some(m) => fs::write(dir.join(STATE), serde_json::to_vec_pretty(m)?)?,
            None => {
                if dir.join(STATE).exists() {
                    fs::remove_file(dir.join(STATE))?;
                }
            }
        }
        Ok(())
    }

    /// Reads a directory and validates every tensor against the manifest's hyperparameters.
    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<Vec<u8>> {
            let p = dir.join(name);
            if !p.exists() {
                return Err(Error::MissingFile(p));
            }
            Ok(fs::read(p)?)
        };
        let manifest: Manifest = serde_json::from_slice(&read(MANIFEST)?)?;
        if manifest.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", manifest.format)));
        }
        manifest.hyperparams.validate()?;
        let index: Vec<IndexEntry> = serde_json::from_slice(&read(INDEX)?)?;
        let blob = read(TENSORS)?;

        let mut gen = Params::new();
        let mut disc = Params::new();
        let mut moments: BTreeMap<&str, BTreeMap<String, ArrayD<f32>>> = BTreeMap::new();
        for e in &index {
            let count: usize = e.shape.iter().product();
            let (start, end) = (e.offset as usize, (e.offset + e.nbytes) as usize);
            if e.nbytes as usize != 4 * count || end > blob.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} at {}..{} does not fit shape {:?} in {} bytes",
                    e.name,
                    start,
                    end,
                    e.shape,
                    blob.len()
                )));
            }
            let values: Vec<f32> = blob[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), values)
                .map_err(|err| Error::Checkpoint(format!("tensor {}: {err}", e.name)))?;
            let kind = match e.kind {
                TensorKind::Weight => Kind::Weight,
                _ => Kind::Buffer,
            };
            if let Some(n) = e.name.strip_prefix(GEN) {
                gen.insert(n, arr, kind);
            } else if let Some(n) = e.name.strip_prefix(DISC) {
                disc.insert(n, arr, kind);
            } else if let Some(rest) = e.name.strip_prefix("optimizer/") {
                let (net, rest) = rest
                    .split_once('/')
                    .ok_or_else(|| Error::Checkpoint(format!("bad optimizer tensor {}", e.name)))?;
                let key = match (net, rest.split_once('/')) {
                    ("generator", Some(("m", _))) => "gm",
                    ("generator", Some(("v", _))) => "gv",
                    ("discriminator", Some(("m", _))) => "dm",
                    ("discriminator", Some(("v", _))) => "dv",
                    _ => return Err(Error::Checkpoint(format!("bad optimizer tensor {}", e.name))),
                };
                let name = rest.split_once('/').map(|(_, n)| n.to_string()).unwrap_or_default();
                moments.entry(key).or_default().insert(name, arr);
            } else {
                return Err(Error::Checkpoint(format!("unexpected tensor {}", e.name)));
            }
        }
        let hp = manifest.hyperparams.clone();
        // Layout checks against freshly built networks.
        Generator::from_params(hp.clone(), gen.clone())?;
        let discriminator = if manifest.has_discriminator {
            Discriminator::from_params(hp.clone(), disc.clone())?;
            Some(disc)
        } else {
            None
        };
        let meta: Option<TrainMeta> = if dir.join(STATE).exists() {
            Some(serde_json::from_slice(&read(STATE)?)?)
        } else {
            None
        };
        let optimizers = if manifest.has_optimizer {
            let meta = meta
                .as_ref()
                .ok_or_else(|| Error::Checkpoint("optimizer tensors without state.json".into()))?;
            let mut take = |k: &str| moments.remove(k).unwrap_or_default();
            let mut g = Adam::new(AdamConfig::default());
            g.m = take("gm");
            g.v = take("gv");
            g.step = meta.adam_g_step;
            let mut d = Adam::new(AdamConfig::default());
            d.m = take("dm");
            d.v = take("dv");
            d.step = meta.adam_d_step;
            Some((g, d))
        } else {
            None
        };
        Ok(Checkpoint {
            hyperparams: hp,
            generator: gen,
            discriminator,
            optimizers,
            meta,
        })
    }

    pub fn generator(&self) -> Result<Generator<f32>> {
        Generator::from_params(self.hyperparams.clone(), self.generator.clone())
    }

    pub fn discriminator(&self) -> Result<Discriminator<f32>> {
        let p = self
            .discriminator
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint holds no discriminator".into()))?;
        Discriminator::from_params(self.hyperparams.clone(), p)
    }
}

/// Loads only the generator of a checkpoint directory.
pub fn load_generator(dir: &Path) -> Result<Generator<f32>> {
    Checkpoint::load(dir)?.generator()
}

/// True when two checkpoint directories hold byte-identical tensors and manifests.
pub fn same_bytes(a: &Path, b: &Path) -> Result<bool> {
    for f in [MANIFEST, INDEX, TENSORS] {
        if fs::read(a.join(f))? != fs::read(b.join(f))? {
            return Ok(false);
        }
    }
    Ok(true)
}
