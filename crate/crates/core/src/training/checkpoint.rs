//! Checkpoint container: magic line, one JSON manifest line, then the
//! little-endian `f64` payload of every named blob.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::freeze::FreezeLedger;
use super::model::{Agent, PolyInter, Zoo};
use super::optim::Adam;
use crate::config::Config;
use crate::detection::DetectionHead;
use crate::encoders::Encoder;
use crate::error::{Error, Result};
use crate::interpreter::{init_prompt_lowrank, InterpreterNet, PromptSet, SpecificPrompt};
use crate::losses::Discriminator;
use crate::numerics::{ParamVisitor, Parameter, Tensor};
use crate::rng::RngState;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"PICK1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Phase1,
    Phase2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "lowercase")]
pub enum PromptMeta {
    Dense,
    Lowrank { rank: usize, depth_factor: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborEntry {
    pub id: String,
    pub channels: usize,
    pub prompt: PromptMeta,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Structure {
    pub agents: Vec<String>,
    pub ego: Option<String>,
    pub neighbors: Vec<NeighborEntry>,
}

/// One row of the per-step loss breakdown. Terms absent in a phase are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub l_collab: f64,
    pub l_single: f64,
    pub l_style_s: f64,
    pub l_adv_d: f64,
    pub l_adv_gen: f64,
    pub l_style_g: f64,
    pub total: f64,
}

impl LossRow {
    pub const CSV_HEADER: &'static str =
        "step,l_collab,l_single,l_style_s,l_adv_d,l_adv_gen,l_style_g,total";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.l_collab,
            self.l_single,
            self.l_style_s,
            self.l_adv_d,
            self.l_adv_gen,
            self.l_style_g,
            self.total
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Single-agent validation AP@0.5 of each pretrained encoder.
    pub baseline_ap50: BTreeMap<String, f64>,
    pub loss_log: Vec<LossRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in `f64` values.
    pub offset: usize,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimMeta {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    /// Parameters with moment buffers, stored as blobs `optim.<key>.m.<name>`
    /// and `optim.<key>.v.<name>`.
    pub moments: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub stage: Stage,
    pub config: Config,
    pub config_hash: String,
    pub base_hash: String,
    pub encoder_hash: String,
    pub seed: u64,
    pub step: usize,
    pub total_steps: usize,
    pub structure: Structure,
    pub ledger: FreezeLedger,
    pub rng: Option<RngState>,
    pub optimizers: BTreeMap<String, OptimMeta>,
    pub metrics: Metrics,
    pub blobs: Vec<BlobEntry>,
}

/// Everything needed to evaluate a model or resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config: Config,
    pub seed: u64,
    pub step: usize,
    pub total_steps: usize,
    pub zoo: Zoo,
    pub model: Option<PolyInter>,
    pub ledger: FreezeLedger,
    pub rng: Option<RngState>,
    pub optimizers: BTreeMap<String, Adam>,
    pub metrics: Metrics,
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    /// Fail with a drift error unless `cfg` hashes like the stored config.
    pub fn verify_config(&self, cfg: &Config) -> Result<()> {
        let (found, expected) = (self.config.hash(), cfg.hash());
        if found != expected {
            return Err(Error::ConfigDrift { expected, found });
        }
        Ok(())
    }

    /// Like [`verify_config`](Self::verify_config) but only over the settings
    /// a Phase I model depends on.
    pub fn verify_base(&self, cfg: &Config) -> Result<()> {
        let (found, expected) = (self.config.base_hash(), cfg.base_hash());
        if found != expected {
            return Err(Error::ConfigDrift { expected, found });
        }
        Ok(())
    }

    pub fn verify_encoders(&self, cfg: &Config) -> Result<()> {
        let (found, expected) = (self.config.encoder_hash(), cfg.encoder_hash());
        if found != expected {
            return Err(Error::ConfigDrift { expected, found });
        }
        Ok(())
    }

    /// All parameters in storage order.
    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        self.zoo.visit_params(&mut |p| out.push(p));
        if let Some(m) = &self.model {
            m.visit_params(&mut |p| out.push(p));
        }
        out
    }

    fn structure(&self) -> Structure {
        let neighbors = self
            .model
            .as_ref()
            .map(|m| {
                m.prompts
                    .specifics
                    .values()
                    .map(|s| NeighborEntry {
                        id: s.encoder_id.clone(),
                        channels: s.channels,
                        prompt: match &s.form {
                            crate::interpreter::PromptForm::Dense(_) => PromptMeta::Dense,
                            crate::interpreter::PromptForm::LowRank {
                                rank, depth_factor, ..
                            } => PromptMeta::Lowrank {
                                rank: *rank,
                                depth_factor: *depth_factor,
                            },
                        },
                    })
                    .collect()
            })
            .unwrap_or_default();
        Structure {
            agents: self.zoo.agents.keys().cloned().collect(),
            ego: self.model.as_ref().map(|_| self.config.roles.ego.clone()),
            neighbors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload: Vec<f64> = Vec::new();
        let mut blobs = Vec::new();
        for p in self.params() {
            blobs.push(BlobEntry {
                name: p.name.clone(),
                shape: p.shape().to_vec(),
                offset: payload.len(),
                frozen: p.frozen,
            });
            payload.extend_from_slice(p.tensor.data());
        }
        let mut optimizers = BTreeMap::new();
        for (key, opt) in &self.optimizers {
            for (kind, bufs) in [("m", &opt.m), ("v", &opt.v)] {
                for (name, buf) in bufs {
                    blobs.push(BlobEntry {
                        name: format!("optim.{key}.{kind}.{name}"),
                        shape: vec![buf.len()],
                        offset: payload.len(),
                        frozen: true,
                    });
                    payload.extend_from_slice(buf);
                }
            }
            optimizers.insert(
                key.clone(),
                OptimMeta {
                    lr: opt.lr,
                    beta1: opt.beta1,
                    beta2: opt.beta2,
                    eps: opt.eps,
                    t: opt.t,
                    moments: opt.m.keys().cloned().collect(),
                },
            );
        }
        let manifest = Manifest {
            format_version: CHECKPOINT_VERSION,
            stage: self.stage,
            config: self.config.clone(),
            config_hash: self.config.hash(),
            base_hash: self.config.base_hash(),
            encoder_hash: self.config.encoder_hash(),
            seed: self.seed,
            step: self.step,
            total_steps: self.total_steps,
            structure: self.structure(),
            ledger: self.ledger.clone(),
            rng: self.rng.clone(),
            optimizers,
            metrics: self.metrics.clone(),
            blobs,
        };
        let mut out = Vec::with_capacity(payload.len() * 8 + 4096);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(b'\n');
        serde_json::to_writer(&mut out, &manifest)?;
        out.push(b'\n');
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_reader(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut magic = Vec::new();
        r.read_until(b'\n', &mut magic)?;
        if magic.strip_suffix(b"\n") != Some(CHECKPOINT_MAGIC.as_slice()) {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let mut line = Vec::new();
        r.read_until(b'\n', &mut line)?;
        if line.last() != Some(&b'\n') {
            return Err(Error::Truncated("checkpoint manifest".into()));
        }
        let raw: serde_json::Value = serde_json::from_slice(&line)?;
        let found = raw
            .get("format_version")
            .and_then(|v| v.as_u64())
            .unwrap_or(0) as u32;
        if found != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found,
                expected: CHECKPOINT_VERSION,
            });
        }
        let manifest: Manifest = serde_json::from_value(raw)?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let needed: usize = manifest
            .blobs
            .iter()
            .map(|b| b.offset + b.shape.iter().product::<usize>())
            .max()
            .unwrap_or(0);
        if bytes.len() < needed * 8 {
            return Err(Error::Truncated(format!(
                "checkpoint payload has {} of {} bytes",
                bytes.len(),
                needed * 8
            )));
        }
        if bytes.len() != needed * 8 {
            return Err(Error::Format(
                "checkpoint payload length does not match its manifest".into(),
            ));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut blobs: BTreeMap<String, (Tensor, bool)> = BTreeMap::new();
        for b in &manifest.blobs {
            let n: usize = b.shape.iter().product();
            let t = Tensor::new(b.shape.clone(), values[b.offset..b.offset + n].to_vec())?;
            if blobs.insert(b.name.clone(), (t, b.frozen)).is_some() {
                return Err(Error::Format(format!("duplicate blob `{}`", b.name)));
            }
        }
        rebuild(manifest, blobs)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::Missing(format!("checkpoint {}: {e}", path.display())))?;
        Self::from_reader(f)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

/// Load and reject checkpoints whose stored config hash differs from `expected_hash`.
pub fn load_checkpoint_expecting(path: &Path, expected_hash: &str) -> Result<Checkpoint> {
    let c = Checkpoint::load(path)?;
    let found = c.config.hash();
    if found != expected_hash {
        return Err(Error::ConfigDrift {
            expected: expected_hash.into(),
            found,
        });
    }
    Ok(c)
}

fn fill(model: &mut dyn ParamVisitor, blobs: &mut BTreeMap<String, (Tensor, bool)>) -> Result<()> {
    let mut err = None;
    model.visit_params_mut(&mut |p| match blobs.remove(&p.name) {
        Some((t, frozen)) if t.shape() == p.shape() => {
            p.tensor = t;
            p.frozen = frozen;
        }
        Some((t, _)) => {
            err = err.take().or(Some(Error::Format(format!(
                "blob `{}` has shape {:?}, expected {:?}",
                p.name,
                t.shape(),
                p.shape()
            ))))
        }
        None => {
            err = err
                .take()
                .or(Some(Error::Format(format!("missing blob `{}`", p.name))))
        }
    });
    err.map_or(Ok(()), Err)
}

fn rebuild(m: Manifest, mut blobs: BTreeMap<String, (Tensor, bool)>) -> Result<Checkpoint> {
    let cfg = &m.config;
    let mut zoo = Zoo::default();
    for id in &m.structure.agents {
        let spec = cfg.encoder_spec(id)?;
        let c = spec.out_channels;
        let agent = Agent {
            encoder: Encoder::build(spec)?,
            head: DetectionHead::zeros(id, c),
        };
        zoo.agents.insert(id.clone(), agent);
    }
    fill(&mut zoo, &mut blobs)?;

    let model = match &m.structure.ego {
        None => None,
        Some(ego) => {
            let fg = cfg.encoder_spec(ego)?.feature_grid();
            let c1 = cfg.encoder_spec(ego)?.out_channels;
            let mut net = InterpreterNet::new(
                cfg.interpreter_config(),
                c1,
                fg.height_cells,
                fg.width_cells,
                m.seed,
            )?;
            let mut prompts =
                PromptSet::new(Tensor::zeros(vec![c1, fg.height_cells, fg.width_cells]));
            for n in &m.structure.neighbors {
                net.add_resizer(&n.id, n.channels, 0)?;
                let sp = match n.prompt {
                    PromptMeta::Dense => SpecificPrompt::dense(
                        &n.id,
                        Tensor::zeros(vec![n.channels, fg.height_cells, fg.width_cells]),
                    )?,
                    PromptMeta::Lowrank { rank, depth_factor } => init_prompt_lowrank(
                        &n.id,
                        n.channels,
                        fg.height_cells,
                        fg.width_cells,
                        rank,
                        depth_factor,
                        0,
                    )?,
                };
                prompts.register(sp)?;
            }
            let mut model = PolyInter {
                net,
                prompts,
                disc: Discriminator::new(c1, 0),
            };
            fill(&mut model, &mut blobs)?;
            Some(model)
        }
    };

    let mut optimizers = BTreeMap::new();
    for (key, meta) in &m.optimizers {
        let mut opt = Adam::with_betas(meta.lr, meta.beta1, meta.beta2);
        opt.eps = meta.eps;
        opt.t = meta.t;
        for name in &meta.moments {
            for kind in ["m", "v"] {
                let blob = format!("optim.{key}.{kind}.{name}");
                let (t, _) = blobs
                    .remove(&blob)
                    .ok_or_else(|| Error::Format(format!("missing blob `{blob}`")))?;
                let target = if kind == "m" { &mut opt.m } else { &mut opt.v };
                target.insert(name.clone(), t.into_data());
            }
        }
        optimizers.insert(key.clone(), opt);
    }
    if let Some(extra) = blobs.keys().next() {
        return Err(Error::Format(format!("unexpected blob `{extra}`")));
    }
    Ok(Checkpoint {
        stage: m.stage,
        config: m.config,
        seed: m.seed,
        step: m.step,
        total_steps: m.total_steps,
        zoo,
        model,
        ledger: m.ledger,
        rng: m.rng,
        optimizers,
        metrics: m.metrics,
    })
}
