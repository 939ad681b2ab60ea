//! Experiment configuration, parsed from TOML by the CLI and snapshotted
//! into every checkpoint.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{Activation, EncoderSpec};
use crate::error::{Error, Result};
use crate::interpreter::{validate_lowrank, ChannelAdapter, InterpreterConfig};
use crate::losses::LossWeights;
use crate::scene::{DatasetSpec, Extent, GridSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub scenes: usize,
    pub objects: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    pub extent: Extent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub id: String,
    pub out_channels: usize,
    pub downsample: usize,
    pub mixing_seed: u64,
    pub activation: Activation,
    pub cell_size: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolesConfig {
    pub ego: String,
    pub phase1_neighbors: Vec<String>,
    pub phase2_neighbor: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpreterSection {
    pub d_k: usize,
    pub window: usize,
    pub channel_adapter: ChannelAdapter,
    pub normalize_qk: bool,
    pub ln_eps: f64,
    /// Training samples averaged for sampling-based prompt initialization.
    pub sampling_n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSection {
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Scenes per step; all share the step's sampled neighbor.
    #[serde(default = "one")]
    pub batch: usize,
}

fn one() -> usize {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptInit {
    Sampling,
    Lowrank,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase2Section {
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub prompt_init: PromptInit,
    pub rank: usize,
    pub depth_factor: usize,
    #[serde(default = "one")]
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub conf_threshold: f64,
    pub nms_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// `(R, T)` pairs for low-rank prompts.
    pub grid: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub encoders: Vec<EncoderConfig>,
    pub roles: RolesConfig,
    pub pretrain: PretrainSection,
    pub interpreter: InterpreterSection,
    pub phase1: OptimSection,
    pub phase2: Phase2Section,
    pub loss: LossWeights,
    pub eval: EvalSection,
    pub sweep: SweepSection,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn field(path: &str, detail: impl std::fmt::Display) -> Error {
    Error::Invalid {
        what: "config",
        detail: format!("{path}: {detail}"),
    }
}

impl Config {
    /// Semantic checks beyond what deserialization enforces. Errors name the
    /// offending field path.
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        Extent::new(
            d.extent.x_min,
            d.extent.x_max,
            d.extent.y_min,
            d.extent.y_max,
        )
        .map_err(|e| field("data.extent", e))?;
        if d.val_scenes + d.test_scenes > d.scenes {
            return Err(field(
                "data.scenes",
                "must be at least val_scenes + test_scenes",
            ));
        }
        for (i, e) in self.encoders.iter().enumerate() {
            self.encoder_spec_at(i)
                .and_then(|s| s.validate())
                .map_err(|err| field(&format!("encoders[{i}]"), err))?;
            if self.encoders[..i].iter().any(|o| o.id == e.id) {
                return Err(field(
                    &format!("encoders[{i}].id"),
                    format!("duplicate id `{}`", e.id),
                ));
            }
        }
        let known = |id: &str| self.encoders.iter().any(|e| e.id == id);
        if !known(&self.roles.ego) {
            return Err(field(
                "roles.ego",
                format!("unknown encoder `{}`", self.roles.ego),
            ));
        }
        if self.roles.phase1_neighbors.is_empty() {
            return Err(field(
                "roles.phase1_neighbors",
                "needs at least one neighbor",
            ));
        }
        for (i, n) in self.roles.phase1_neighbors.iter().enumerate() {
            if !known(n) {
                return Err(field(
                    &format!("roles.phase1_neighbors[{i}]"),
                    format!("unknown encoder `{n}`"),
                ));
            }
        }
        if !known(&self.roles.phase2_neighbor) {
            return Err(field(
                "roles.phase2_neighbor",
                format!("unknown encoder `{}`", self.roles.phase2_neighbor),
            ));
        }
        if self
            .roles
            .phase1_neighbors
            .contains(&self.roles.phase2_neighbor)
        {
            return Err(field(
                "roles.phase2_neighbor",
                "must not be a Phase I neighbor",
            ));
        }
        let ego = self.ego_spec()?;
        let fg = ego.feature_grid();
        if self.interpreter.d_k == 0 {
            return Err(field("interpreter.d_k", "must be positive"));
        }
        if self.interpreter.window == 0 {
            return Err(field("interpreter.window", "must be positive"));
        }
        if self.interpreter.sampling_n == 0 {
            return Err(field("interpreter.sampling_n", "must be positive"));
        }
        for (name, lr) in [
            ("pretrain.lr", self.pretrain.lr),
            ("phase1.lr", self.phase1.lr),
            ("phase2.lr", self.phase2.lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(field(name, "must be a positive number"));
            }
        }
        for (name, b) in [
            ("phase1.batch", self.phase1.batch),
            ("phase2.batch", self.phase2.batch),
        ] {
            if b == 0 {
                return Err(field(name, "must be positive"));
            }
        }
        self.loss.validate().map_err(|e| field("loss", e))?;
        if !(self.eval.conf_threshold > 0.0 && self.eval.conf_threshold < 1.0) {
            return Err(field("eval.conf_threshold", "must lie in (0, 1)"));
        }
        if !(self.eval.nms_iou > 0.0 && self.eval.nms_iou <= 1.0) {
            return Err(field("eval.nms_iou", "must lie in (0, 1]"));
        }
        let c2 = self.encoder_spec(&self.roles.phase2_neighbor)?.out_channels;
        if self.phase2.prompt_init == PromptInit::Lowrank {
            validate_lowrank(
                c2,
                fg.height_cells,
                fg.width_cells,
                self.phase2.rank,
                self.phase2.depth_factor,
            )
            .map_err(|e| field("phase2.rank", e))?;
        }
        for (i, (r, t)) in self.sweep.grid.iter().enumerate() {
            validate_lowrank(c2, fg.height_cells, fg.width_cells, *r, *t)
                .map_err(|e| field(&format!("sweep.grid[{i}]"), e))?;
        }
        Ok(())
    }

    fn encoder_spec_at(&self, i: usize) -> Result<EncoderSpec> {
        let e = &self.encoders[i];
        Ok(EncoderSpec {
            id: e.id.clone(),
            out_channels: e.out_channels,
            downsample: e.downsample,
            mixing_seed: e.mixing_seed,
            activation: e.activation,
            grid: GridSpec::covering(&self.data.extent, e.cell_size)?,
        })
    }

    pub fn encoder_spec(&self, id: &str) -> Result<EncoderSpec> {
        let i = self
            .encoders
            .iter()
            .position(|e| e.id == id)
            .ok_or_else(|| Error::Missing(format!("encoder `{id}` in config")))?;
        self.encoder_spec_at(i)
    }

    pub fn ego_spec(&self) -> Result<EncoderSpec> {
        self.encoder_spec(&self.roles.ego)
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        let d = &self.data;
        DatasetSpec {
            seed: d.seed,
            scenes: d.scenes,
            objects: d.objects,
            val_scenes: d.val_scenes,
            test_scenes: d.test_scenes,
            extent: d.extent,
        }
    }

    pub fn interpreter_config(&self) -> InterpreterConfig {
        let i = &self.interpreter;
        InterpreterConfig {
            d_k: i.d_k,
            window: i.window,
            channel_adapter: i.channel_adapter,
            normalize_qk: i.normalize_qk,
            ln_eps: i.ln_eps,
        }
    }

    /// Hash of the whole configuration.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// Hash of everything a Phase I model depends on; Phase II, evaluation
    /// and sweep settings are excluded so adaptation runs can vary them.
    pub fn base_hash(&self) -> String {
        let v = serde_json::json!({
            "data": self.data,
            "encoders": self.encoders,
            "roles": self.roles,
            "pretrain": self.pretrain,
            "interpreter": self.interpreter,
            "phase1": self.phase1,
            "loss": self.loss,
        });
        sha256_hex(&serde_json::to_vec(&v).expect("json serializes"))
    }

    /// Hash of what pretrained encoders depend on.
    pub fn encoder_hash(&self) -> String {
        let v = serde_json::json!({ "data": self.data, "encoders": self.encoders, "pretrain": self.pretrain, "eval": self.eval });
        sha256_hex(&serde_json::to_vec(&v).expect("json serializes"))
    }
}
