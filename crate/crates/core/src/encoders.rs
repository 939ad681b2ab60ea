//! Frozen toy encoders: occupancy grid to BEV feature map.
//!
//! Each encoder is two 3×3 convolutions with an activation, an optional 2×
//! max-pool and a fixed random orthogonal 1×1 channel mixing. Different
//! mixing seeds scramble channel semantics between otherwise similar
//! encoders.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::detection::{detection_loss, DetectionHead};
use crate::error::{Error, Result};
use crate::eval::average_precision_scenes;
use crate::numerics::{randn, ParamVisitor, Parameter, Tape, Tensor, Var};
use crate::rng::{derive_seed, seeded};
use crate::scene::{rasterize_points, GridSpec, Scene};
use crate::training::optim::Adam;

pub const ALLOWED_CHANNELS: [usize; 4] = [16, 24, 32, 48];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub id: String,
    pub out_channels: usize,
    pub downsample: usize,
    pub mixing_seed: u64,
    pub activation: Activation,
    /// Input grid; the feature grid is this grid downsampled.
    pub grid: GridSpec,
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if !ALLOWED_CHANNELS.contains(&self.out_channels) {
            return Err(Error::invalid(
                "encoder spec",
                format!(
                    "{}: out_channels {} not in {ALLOWED_CHANNELS:?}",
                    self.id, self.out_channels
                ),
            ));
        }
        if !matches!(self.downsample, 1 | 2) {
            return Err(Error::invalid(
                "encoder spec",
                format!("{}: downsample must be 1 or 2", self.id),
            ));
        }
        if !self.grid.height_cells.is_multiple_of(self.downsample)
            || !self.grid.width_cells.is_multiple_of(self.downsample)
        {
            return Err(Error::invalid(
                "encoder spec",
                format!("{}: grid not divisible by downsample", self.id),
            ));
        }
        Ok(())
    }

    pub fn feature_grid(&self) -> GridSpec {
        self.grid.downsampled(self.downsample)
    }
}

/// A feature map with the identity and geometry of the encoder that made it.
#[derive(Clone, Debug, PartialEq)]
pub struct BevFeature {
    pub data: Tensor,
    pub encoder_id: String,
    pub grid: GridSpec,
}

impl BevFeature {
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub spec: EncoderSpec,
    pub conv1: Parameter,
    pub bias1: Parameter,
    pub conv2: Parameter,
    pub bias2: Parameter,
    /// Permutation `[C×C×1×1]` channel mixing (orthogonal); never trained.
    pub mixing: Parameter,
}

/// Random `n×n` permutation matrix, row-major. Being non-negative it keeps
/// ReLU features non-negative, so elementwise max over two agents' features
/// still acts as a union of evidence.
pub fn random_permutation(n: usize, seed: u64) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded(seed));
    let mut m = vec![0.0; n * n];
    for (i, j) in idx.into_iter().enumerate() {
        m[i * n + j] = 1.0;
    }
    m
}

impl Encoder {
    pub fn build(spec: EncoderSpec) -> Result<Self> {
        spec.validate()?;
        let c = spec.out_channels;
        let mut rng = seeded(derive_seed(
            spec.mixing_seed,
            &format!("encoder/{}", spec.id),
        ));
        let name = |s: &str| format!("encoder.{}.{s}", spec.id);
        let conv1 = Parameter::new(
            name("conv1.weight"),
            randn(vec![c, 1, 3, 3], (2.0f64 / 9.0).sqrt(), &mut rng),
        );
        let bias1 = Parameter::new(
            name("conv1.bias"),
            Tensor::new(
                vec![c],
                (0..c).map(|_| rng.random_range(-0.05..0.05)).collect(),
            )?,
        );
        let conv2 = Parameter::new(
            name("conv2.weight"),
            randn(vec![c, c, 3, 3], (2.0 / (9.0 * c as f64)).sqrt(), &mut rng),
        );
        let bias2 = Parameter::new(
            name("conv2.bias"),
            Tensor::new(
                vec![c],
                (0..c).map(|_| rng.random_range(-0.05..0.05)).collect(),
            )?,
        );
        let mut mixing = Parameter::new(
            name("mixing"),
            Tensor::new(vec![c, c, 1, 1], random_permutation(c, spec.mixing_seed))?,
        );
        mixing.frozen = true;
        Ok(Self {
            spec,
            conv1,
            bias1,
            conv2,
            bias2,
            mixing,
        })
    }

    pub fn is_frozen(&self) -> bool {
        let mut all = true;
        self.visit_params(&mut |p| all &= p.frozen);
        all
    }

    /// Record the forward pass on `tape`; `input` is `[1×H×W]`.
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let g = &self.spec.grid;
        if tape.shape(input) != [1, g.height_cells, g.width_cells] {
            return Err(Error::shape(
                "encode",
                format!(
                    "{} expects input [1×{}×{}], got {:?}",
                    self.spec.id,
                    g.height_cells,
                    g.width_cells,
                    tape.shape(input)
                ),
            ));
        }
        let act = |t: &mut Tape, v: Var| match self.spec.activation {
            Activation::Relu => t.relu(v),
            Activation::Tanh => t.tanh(v),
        };
        let w1 = tape.param(&self.conv1);
        let b1 = tape.param(&self.bias1);
        let w2 = tape.param(&self.conv2);
        let b2 = tape.param(&self.bias2);
        let mix = tape.param(&self.mixing);
        let x = tape.conv2d(input, w1, 1, 1)?;
        let x = tape.add_channel(x, b1)?;
        let x = act(tape, x);
        let x = tape.conv2d(x, w2, 1, 1)?;
        let x = tape.add_channel(x, b2)?;
        let mut x = act(tape, x);
        if self.spec.downsample > 1 {
            x = tape.max_pool(x, self.spec.downsample)?;
        }
        tape.conv2d(x, mix, 1, 0)
    }

    /// Deterministic forward pass outside any training tape.
    pub fn encode(&self, grid: &Tensor) -> Result<BevFeature> {
        let mut tape = Tape::new();
        let x = tape.constant(grid.clone());
        let y = self.forward(&mut tape, x)?;
        Ok(BevFeature {
            data: tape.value(y).clone(),
            encoder_id: self.spec.id.clone(),
            grid: self.spec.feature_grid(),
        })
    }

    pub fn encode_scene_points(&self, points: &[crate::scene::Point]) -> Result<BevFeature> {
        self.encode(&rasterize_points(points, &self.spec.grid))
    }
}

impl ParamVisitor for Encoder {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        for p in [
            &self.conv1,
            &self.bias1,
            &self.conv2,
            &self.bias2,
            &self.mixing,
        ] {
            f(p);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        for p in [
            &mut self.conv1,
            &mut self.bias1,
            &mut self.conv2,
            &mut self.bias2,
            &mut self.mixing,
        ] {
            f(p);
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub conf_threshold: f64,
    pub nms_iou: f64,
}

/// Result of pretraining one encoder with its own head.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub encoder: Encoder,
    pub head: DetectionHead,
    /// Single-agent AP@0.5 on the validation scenes.
    pub baseline_ap50: f64,
    pub losses: Vec<f64>,
}

/// Train encoder and head jointly on single-agent detection over full-view
/// scenes, then freeze both.
pub fn pretrain_encoder(
    mut enc: Encoder,
    mut head: DetectionHead,
    train: &[&Scene],
    val: &[&Scene],
    cfg: &PretrainConfig,
) -> Result<Pretrained> {
    if train.is_empty() && cfg.steps > 0 {
        return Err(Error::Missing("training scenes for pretraining".into()));
    }
    enc.mixing.frozen = true;
    let mut opt = Adam::new(cfg.lr);
    let mut rng = seeded(derive_seed(cfg.seed, &format!("pretrain/{}", enc.spec.id)));
    let fgrid = enc.spec.feature_grid();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let scene = train[rng.random_range(0..train.len())];
        let mut tape = Tape::new();
        let x = tape.constant(rasterize_points(&scene.points, &enc.spec.grid));
        let f = enc.forward(&mut tape, x)?;
        let out = head.forward(&mut tape, f)?;
        let loss = detection_loss(&mut tape, out, &scene.boxes, &fgrid)?;
        let l = tape.scalar(loss);
        if !l.is_finite() {
            return Err(Error::Divergence {
                step,
                term: "pretrain_detection".into(),
            });
        }
        losses.push(l);
        let grads = tape.backward(loss)?;
        opt.step(
            &tape,
            &grads,
            &mut [&mut enc as &mut dyn ParamVisitor, &mut head],
        );
    }
    enc.set_frozen(true);
    head.set_frozen(true);
    let baseline_ap50 = single_agent_ap(&enc, &head, val, 0.5, cfg.conf_threshold, cfg.nms_iou)?;
    Ok(Pretrained {
        encoder: enc,
        head,
        baseline_ap50,
        losses,
    })
}

/// AP of an encoder with its own head on full-view scenes.
pub fn single_agent_ap(
    enc: &Encoder,
    head: &DetectionHead,
    scenes: &[&Scene],
    iou: f64,
    conf: f64,
    nms: f64,
) -> Result<f64> {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        let f = enc.encode_scene_points(&s.points)?;
        let pred = head.predict(&f.data)?;
        for (b, sc) in crate::detection::decode_boxes(&pred, &f.grid, conf, nms)? {
            dets.push((i, b, sc));
        }
        gts.push(s.boxes.clone());
    }
    average_precision_scenes(&dets, &gts, iou)
}

/// Memo of frozen-encoder outputs keyed by (scene seed, encoder id,
/// viewpoint). Features are stored already max-pooled onto the ego grid
/// when one is given, which is exactly what the interpreter would compute
/// first, so cached and uncached runs agree bit for bit.
type CacheKey = (u64, String, Option<crate::scene::Viewpoint>, usize, usize);

#[derive(Default)]
pub struct FeatureCache {
    map: std::collections::HashMap<CacheKey, std::sync::Arc<Tensor>>,
}

impl FeatureCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Feature of `scene` seen from `view` (`None` = unmasked), pooled to
    /// `h1×w1` (pass the encoder's own feature size to skip pooling).
    pub fn get(
        &mut self,
        enc: &Encoder,
        scene: &Scene,
        view: Option<crate::scene::Viewpoint>,
        h1: usize,
        w1: usize,
    ) -> Result<std::sync::Arc<Tensor>> {
        let key = (scene.seed, enc.spec.id.clone(), view, h1, w1);
        if let Some(t) = self.map.get(&key) {
            return Ok(t.clone());
        }
        let points = match view {
            Some(v) => scene.view(v).points,
            None => scene.points.clone(),
        };
        let f = enc.encode_scene_points(&points)?;
        let mut tape = Tape::new();
        let x = tape.constant(f.data);
        let y = crate::interpreter::resize_on_tape(&mut tape, x, h1, w1)?;
        let t = std::sync::Arc::new(tape.value(y).clone());
        self.map.insert(key, t.clone());
        Ok(t)
    }
}
