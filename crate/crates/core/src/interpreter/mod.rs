//! The interpreter: resizer, channel selection, prompt refinement and axial
//! spatial attention, mapping a neighbor feature into the ego feature space.

mod prompt;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use prompt::{
    init_prompt_lowrank, init_prompt_sampling, lowrank_param_count, resample_to, specific_name,
    validate_lowrank, PromptForm, SpecificPrompt, GENERAL_NAME, LOWRANK_STD,
};

use crate::encoders::BevFeature;
use crate::error::{Error, Result};
use crate::numerics::{randn, Axis, ParamVisitor, Parameter, Tape, Tensor, Var};
use crate::rng::{derive_seed, seeded, Rng};
use crate::scene::GridSpec;

/// How the specific prompt is mapped from neighbor to ego channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelAdapter {
    /// `S^r = LN(M S + R S)`; the resizer `R` starts at zero so the prompt
    /// path initially follows the similarity matrix alone.
    Matmul,
    /// `S^r = LN(R S)`; the resizer replaces `M` on the prompt path.
    Conv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpreterConfig {
    pub d_k: usize,
    /// Window length of the local (height-axis) attention pass.
    pub window: usize,
    pub channel_adapter: ChannelAdapter,
    pub normalize_qk: bool,
    pub ln_eps: f64,
}

impl Default for InterpreterConfig {
    fn default() -> Self {
        Self {
            d_k: 64,
            window: 4,
            channel_adapter: ChannelAdapter::Matmul,
            normalize_qk: false,
            ln_eps: 1e-5,
        }
    }
}

/// Query/key/value/output projections of one axial attention pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AxialPass {
    pub axis: Axis,
    pub wq: Parameter,
    pub wk: Parameter,
    pub wv: Parameter,
    pub wo: Parameter,
}

impl AxialPass {
    fn new(axis: Axis, c: usize, rng: &mut crate::rng::Rng) -> Self {
        let tag = match axis {
            Axis::Height => "height",
            Axis::Width => "width",
        };
        let name = |s: &str| format!("interpreter.spatial.{tag}.{s}");
        let std = (1.0 / c as f64).sqrt();
        Self {
            axis,
            wq: Parameter::new(name("wq"), randn(vec![c, c], std, rng)),
            wk: Parameter::new(name("wk"), randn(vec![c, c], std, rng)),
            wv: Parameter::new(name("wv"), randn(vec![c, c], std, rng)),
            wo: Parameter::new(name("wo"), randn(vec![c, c], 0.1 * std, rng)),
        }
    }

    fn params(&self) -> [&Parameter; 4] {
        [&self.wq, &self.wk, &self.wv, &self.wo]
    }

    fn params_mut(&mut self) -> [&mut Parameter; 4] {
        [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo]
    }
}

/// Interpreter weights shared by all neighbors plus one resizer per neighbor.
#[derive(Clone, Debug, PartialEq)]
pub struct InterpreterNet {
    pub cfg: InterpreterConfig,
    pub c1: usize,
    pub h1: usize,
    pub w1: usize,
    pub wq: Parameter,
    pub wk: Parameter,
    pub ln_f_gain: Parameter,
    pub ln_f_bias: Parameter,
    pub ln_s_gain: Parameter,
    pub ln_s_bias: Parameter,
    pub spatial: [AxialPass; 2],
    /// `[C1×C2]` per neighbor id.
    pub resizers: BTreeMap<String, Parameter>,
}

pub fn resizer_name(id: &str) -> String {
    format!("interpreter.resizer.{id}.conv")
}

/// Gaussian `[hw×d_k]` projection with every column shifted to zero sum, so
/// a channel's spatial mean does not contribute to its query or key.
fn centered_projection(hw: usize, d_k: usize, rng: &mut Rng) -> Result<Tensor> {
    let mut w = randn(vec![hw, d_k], (1.0 / hw as f64).sqrt(), rng).into_data();
    for j in 0..d_k {
        let mean = (0..hw).map(|i| w[i * d_k + j]).sum::<f64>() / hw as f64;
        for i in 0..hw {
            w[i * d_k + j] -= mean;
        }
    }
    Tensor::new(vec![hw, d_k], w)
}

impl InterpreterNet {
    /// Fresh network for ego features of shape `[c1×h1×w1]`. `wk` starts as
    /// a copy of `wq` so identical channels initially attend to each other.
    pub fn new(cfg: InterpreterConfig, c1: usize, h1: usize, w1: usize, seed: u64) -> Result<Self> {
        if cfg.d_k == 0 || cfg.window == 0 || c1 == 0 || h1 * w1 < 2 {
            return Err(Error::invalid(
                "interpreter",
                format!("d_k={}, window={}, ego {c1}×{h1}×{w1}", cfg.d_k, cfg.window),
            ));
        }
        let mut rng = seeded(derive_seed(seed, "interpreter"));
        let hw = h1 * w1;
        let wq = Parameter::new(
            "interpreter.channel.wq",
            centered_projection(hw, cfg.d_k, &mut rng)?,
        );
        let wk = Parameter::new("interpreter.channel.wk", wq.tensor.clone());
        let ones = Tensor::full(vec![c1], 1.0);
        let spatial = [
            AxialPass::new(Axis::Height, c1, &mut rng),
            AxialPass::new(Axis::Width, c1, &mut rng),
        ];
        Ok(Self {
            cfg,
            c1,
            h1,
            w1,
            wq,
            wk,
            ln_f_gain: Parameter::new("interpreter.ln_f.gain", ones.clone()),
            ln_f_bias: Parameter::new("interpreter.ln_f.bias", Tensor::zeros(vec![c1])),
            ln_s_gain: Parameter::new("interpreter.ln_s.gain", ones),
            ln_s_bias: Parameter::new("interpreter.ln_s.bias", Tensor::zeros(vec![c1])),
            spatial,
            resizers: BTreeMap::new(),
        })
    }

    pub fn ego_grid_shape(&self) -> [usize; 3] {
        [self.c1, self.h1, self.w1]
    }

    /// Add the resizer for a neighbor with `c2` channels. `seed` only
    /// matters for the conv adapter, whose resizer starts random.
    pub fn add_resizer(&mut self, id: &str, c2: usize, seed: u64) -> Result<()> {
        if self.resizers.contains_key(id) {
            return Err(Error::DuplicateId(id.into()));
        }
        let t = match self.cfg.channel_adapter {
            ChannelAdapter::Matmul => Tensor::zeros(vec![self.c1, c2]),
            ChannelAdapter::Conv => {
                let mut rng = seeded(derive_seed(seed, &format!("resizer/{id}")));
                randn(vec![self.c1, c2], (1.0 / c2 as f64).sqrt(), &mut rng)
            }
        };
        self.resizers
            .insert(id.into(), Parameter::new(resizer_name(id), t));
        Ok(())
    }

    /// Parameters shared across neighbors (everything but the resizers).
    pub fn visit_shared<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        for p in [
            &self.wq,
            &self.wk,
            &self.ln_f_gain,
            &self.ln_f_bias,
            &self.ln_s_gain,
            &self.ln_s_bias,
        ] {
            f(p);
        }
        for pass in &self.spatial {
            for p in pass.params() {
                f(p);
            }
        }
    }
}

impl ParamVisitor for InterpreterNet {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.visit_shared(f);
        for p in self.resizers.values() {
            f(p);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        for p in [
            &mut self.wq,
            &mut self.wk,
            &mut self.ln_f_gain,
            &mut self.ln_f_bias,
            &mut self.ln_s_gain,
            &mut self.ln_s_bias,
        ] {
            f(p);
        }
        for pass in &mut self.spatial {
            for p in pass.params_mut() {
                f(p);
            }
        }
        for p in self.resizers.values_mut() {
            f(p);
        }
    }
}

/// General prompt plus the registry of specific prompts.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    pub general: Parameter,
    pub specifics: BTreeMap<String, SpecificPrompt>,
}

impl PromptSet {
    pub fn new(general: Tensor) -> Self {
        Self {
            general: Parameter::new(GENERAL_NAME, general),
            specifics: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, prompt: SpecificPrompt) -> Result<()> {
        if self.specifics.contains_key(&prompt.encoder_id) {
            return Err(Error::DuplicateId(prompt.encoder_id));
        }
        self.specifics.insert(prompt.encoder_id.clone(), prompt);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&SpecificPrompt> {
        self.specifics
            .get(id)
            .ok_or_else(|| Error::Registry(id.into()))
    }
}

impl ParamVisitor for PromptSet {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.general);
        for s in self.specifics.values() {
            s.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.general);
        for s in self.specifics.values_mut() {
            s.visit_params_mut(f);
        }
    }
}

/// Every node produced by one interpreter forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Interpretation {
    /// Neighbor feature after spatial resizing, `[C2×H1×W1]`.
    pub resized: Var,
    /// Similarity matrix `[C1×C2]`.
    pub m: Var,
    /// `M F_neb` before layer normalization, `[C1×H1W1]`.
    pub mixed: Var,
    pub f_r: Var,
    pub s_r: Var,
    pub f_g: Var,
    pub f_s: Var,
    pub f_ref: Var,
    /// Interpreted feature `[C1×H1×W1]`.
    pub out: Var,
}

/// Integer max-pool ratio taking a `h×w` map to `h1×w1`.
pub fn resize_ratio(h: usize, w: usize, h1: usize, w1: usize) -> Result<usize> {
    if h1 == 0 || w1 == 0 || !h.is_multiple_of(h1) || !w.is_multiple_of(w1) || h / h1 != w / w1 {
        return Err(Error::shape(
            "resize_neighbor",
            format!("{h}×{w} is not an integer multiple of ego {h1}×{w1}"),
        ));
    }
    Ok(h / h1)
}

/// Spatial max-pool of a neighbor feature onto the ego grid.
pub fn resize_on_tape(tape: &mut Tape, f: Var, h1: usize, w1: usize) -> Result<Var> {
    let s = tape.shape(f).to_vec();
    if s.len() != 3 {
        return Err(Error::shape(
            "resize_neighbor",
            format!("expected [C×H×W], got {s:?}"),
        ));
    }
    let k = resize_ratio(s[1], s[2], h1, w1)?;
    if k == 1 {
        Ok(f)
    } else {
        tape.max_pool(f, k)
    }
}

pub fn resize_neighbor(f: &BevFeature, ego_grid: &GridSpec) -> Result<BevFeature> {
    let mut tape = Tape::new();
    let x = tape.constant(f.data.clone());
    let y = resize_on_tape(&mut tape, x, ego_grid.height_cells, ego_grid.width_cells)?;
    Ok(BevFeature {
        data: tape.value(y).clone(),
        encoder_id: f.encoder_id.clone(),
        grid: *ego_grid,
    })
}

/// Row-stochastic `M = softmax(Q Kᵀ / √d_k)` with `Q = F'_ego W_q`,
/// `K = F'_neb W_k` on flattened `[C×HW]` features.
pub fn channel_similarity(
    tape: &mut Tape,
    net: &InterpreterNet,
    f_ego: Var,
    f_neb: Var,
) -> Result<Var> {
    let (se, sn) = (tape.shape(f_ego).to_vec(), tape.shape(f_neb).to_vec());
    let hw = net.h1 * net.w1;
    let flat = |s: &[usize]| s.len() >= 2 && s[1..].iter().product::<usize>() == hw;
    if !flat(&se) || !flat(&sn) {
        return Err(Error::shape(
            "channel_similarity",
            format!("ego {se:?} and neighbor {sn:?} must both flatten to C×{hw}"),
        ));
    }
    let e = tape.reshape(f_ego, &[se[0], hw])?;
    let n = tape.reshape(f_neb, &[sn[0], hw])?;
    let wq = tape.param(&net.wq);
    let wk = tape.param(&net.wk);
    let mut q = tape.matmul(e, wq)?;
    let mut k = tape.matmul(n, wk)?;
    if net.cfg.normalize_qk {
        q = tape.l2_normalize_rows(q)?;
        k = tape.l2_normalize_rows(k)?;
    }
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    tape.softmax_rows(logits, (net.cfg.d_k as f64).sqrt())
}

fn layer_norm_affine(
    tape: &mut Tape,
    x: Var,
    gain: &Parameter,
    bias: &Parameter,
    eps: f64,
) -> Result<Var> {
    let y = tape.layer_norm_rows(x, eps)?;
    let g = tape.param(gain);
    let b = tape.param(bias);
    let y = tape.mul_channel(y, g)?;
    tape.add_channel(y, b)
}

/// `f_r = LN_f(M F_neb)` and the prompt path `s_r` (see [`ChannelAdapter`]),
/// both `[C1×H1×W1]`. `resizer` is required unless the adapter is matmul
/// and no resizer has been registered.
pub fn reorganize(
    tape: &mut Tape,
    net: &InterpreterNet,
    m: Var,
    f_neb: Var,
    s: Var,
    resizer: Option<&Parameter>,
) -> Result<(Var, Var)> {
    let (_, f_r, s_r) = reorganize_parts(tape, net, m, f_neb, s, resizer)?;
    Ok((f_r, s_r))
}

/// [`reorganize`] that also returns the pre-normalization mix `M F_neb`
/// as `[C1×H1W1]`.
fn reorganize_parts(
    tape: &mut Tape,
    net: &InterpreterNet,
    m: Var,
    f_neb: Var,
    s: Var,
    resizer: Option<&Parameter>,
) -> Result<(Var, Var, Var)> {
    let hw = net.h1 * net.w1;
    let c2 = tape.shape(m)[1];
    let n = tape.reshape(f_neb, &[c2, hw])?;
    let s = tape.reshape(s, &[c2, hw])?;
    let mixed = tape.matmul(m, n)?;
    let f_r = layer_norm_affine(tape, mixed, &net.ln_f_gain, &net.ln_f_bias, net.cfg.ln_eps)?;
    let s_mixed = match (net.cfg.channel_adapter, resizer) {
        (ChannelAdapter::Matmul, None) => tape.matmul(m, s)?,
        (ChannelAdapter::Matmul, Some(r)) => {
            let ms = tape.matmul(m, s)?;
            let rv = tape.param(r);
            let rs = tape.matmul(rv, s)?;
            tape.add(ms, rs)?
        }
        (ChannelAdapter::Conv, Some(r)) => {
            let rv = tape.param(r);
            tape.matmul(rv, s)?
        }
        (ChannelAdapter::Conv, None) => {
            return Err(Error::Missing("resizer for conv channel adapter".into()))
        }
    };
    let s_r = layer_norm_affine(
        tape,
        s_mixed,
        &net.ln_s_gain,
        &net.ln_s_bias,
        net.cfg.ln_eps,
    )?;
    let shape = [net.c1, net.h1, net.w1];
    Ok((
        mixed,
        tape.reshape(f_r, &shape)?,
        tape.reshape(s_r, &shape)?,
    ))
}

/// `f_g = f_r + G`, `f_s = f_r + s_r`.
pub fn refine_with_prompts(
    tape: &mut Tape,
    f_r: Var,
    s_r: Var,
    general: Var,
) -> Result<(Var, Var)> {
    let f_g = tape.add(f_r, general)?;
    let f_s = tape.add(f_r, s_r)?;
    Ok((f_g, f_s))
}

fn project(tape: &mut Tape, w: &Parameter, x: Var, shape: &[usize]) -> Result<Var> {
    let wv = tape.param(w);
    let flat = tape.reshape(x, &[shape[0], shape[1] * shape[2]])?;
    let y = tape.matmul(wv, flat)?;
    tape.reshape(y, shape)
}

/// Two residual cross-attention passes with queries from the ego feature:
/// windowed along the height axis, then global along the width axis.
pub fn spatial_attention(
    tape: &mut Tape,
    net: &InterpreterNet,
    f_ego: Var,
    f_ref: Var,
) -> Result<Var> {
    let shape = tape.shape(f_ref).to_vec();
    if tape.shape(f_ego) != shape.as_slice() || shape.len() != 3 || shape[0] != net.c1 {
        return Err(Error::shape(
            "spatial_attention",
            format!("ego {:?} vs refined {shape:?}", tape.shape(f_ego)),
        ));
    }
    let mut x = f_ref;
    for pass in &net.spatial {
        let window = match pass.axis {
            Axis::Height => net.cfg.window,
            Axis::Width => shape[2],
        };
        let q = project(tape, &pass.wq, f_ego, &shape)?;
        let k = project(tape, &pass.wk, x, &shape)?;
        let v = project(tape, &pass.wv, x, &shape)?;
        let a = tape.axial_attention(q, k, v, pass.axis, window)?;
        let o = project(tape, &pass.wo, a, &shape)?;
        x = tape.add(x, o)?;
    }
    Ok(x)
}

/// Full forward pass for one neighbor: resize, channel selection,
/// reorganization, prompt refinement and spatial attention.
pub fn interpret(
    tape: &mut Tape,
    net: &InterpreterNet,
    prompts: &PromptSet,
    encoder_id: &str,
    f_ego: Var,
    f_neb_raw: Var,
) -> Result<Interpretation> {
    let spec = prompts.get(encoder_id)?;
    let resizer = net.resizers.get(encoder_id);
    if tape.shape(f_ego) != net.ego_grid_shape() {
        return Err(Error::shape(
            "interpret",
            format!(
                "ego feature {:?} vs interpreter {:?}",
                tape.shape(f_ego),
                net.ego_grid_shape()
            ),
        ));
    }
    let resized = resize_on_tape(tape, f_neb_raw, net.h1, net.w1)?;
    if tape.shape(resized)[0] != spec.channels {
        return Err(Error::shape(
            "interpret",
            format!(
                "{encoder_id} feature has {} channels, prompt has {}",
                tape.shape(resized)[0],
                spec.channels
            ),
        ));
    }
    let m = channel_similarity(tape, net, f_ego, resized)?;
    let s = spec.materialize(tape)?;
    let (mixed, f_r, s_r) = reorganize_parts(tape, net, m, resized, s, resizer)?;
    let g = tape.param(&prompts.general);
    let (f_g, f_s) = refine_with_prompts(tape, f_r, s_r, g)?;
    let f_ref = tape.add(f_g, f_s)?;
    let out = spatial_attention(tape, net, f_ego, f_ref)?;
    Ok(Interpretation {
        resized,
        m,
        mixed,
        f_r,
        s_r,
        f_g,
        f_s,
        f_ref,
        out,
    })
}

/// Inference-only interpretation of concrete features.
pub fn interpret_features(
    net: &InterpreterNet,
    prompts: &PromptSet,
    f_ego: &BevFeature,
    f_neb: &BevFeature,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let e = tape.constant(f_ego.data.clone());
    let n = tape.constant(f_neb.data.clone());
    let out = interpret(&mut tape, net, prompts, &f_neb.encoder_id, e, n)?;
    Ok(tape.value(out.out).clone())
}
