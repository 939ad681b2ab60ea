use rand::seq::index::sample;

use crate::encoders::Encoder;
use crate::error::{Error, Result};
use crate::numerics::{randn, ParamVisitor, Parameter, Tape, Tensor, Var};
use crate::rng::seeded;
use crate::scene::{Scene, Viewpoint};

pub const LOWRANK_STD: f64 = 0.02;

/// Storage form of a specific prompt.
#[derive(Clone, Debug, PartialEq)]
pub enum PromptForm {
    /// `[C2×H1×W1]`.
    Dense(Parameter),
    /// `u: [C2/T × H1 × R]`, `v: [C2/T × R × W1]`; channel `j` of the
    /// materialized prompt is factor channel `j / T`.
    LowRank {
        u: Parameter,
        v: Parameter,
        rank: usize,
        depth_factor: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpecificPrompt {
    pub encoder_id: String,
    pub channels: usize,
    pub form: PromptForm,
}

pub fn specific_name(id: &str) -> String {
    format!("interpreter.prompt.specific.{id}")
}

pub const GENERAL_NAME: &str = "interpreter.prompt.general";

impl SpecificPrompt {
    pub fn dense(encoder_id: &str, data: Tensor) -> Result<Self> {
        if data.rank() != 3 {
            return Err(Error::shape(
                "SpecificPrompt::dense",
                format!("expected [C×H×W], got {:?}", data.shape()),
            ));
        }
        let channels = data.shape()[0];
        Ok(Self {
            encoder_id: encoder_id.into(),
            channels,
            form: PromptForm::Dense(Parameter::new(specific_name(encoder_id), data)),
        })
    }

    /// `[C2×H1×W1]` prompt on `tape`.
    pub fn materialize(&self, tape: &mut Tape) -> Result<Var> {
        match &self.form {
            PromptForm::Dense(p) => Ok(tape.param(p)),
            PromptForm::LowRank {
                u, v, depth_factor, ..
            } => {
                let uv = tape.param(u);
                let vv = tape.param(v);
                let m = tape.batch_matmul(uv, vv)?;
                if *depth_factor == 1 {
                    Ok(m)
                } else {
                    tape.repeat_channels(m, *depth_factor)
                }
            }
        }
    }

    pub fn materialize_value(&self) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = self.materialize(&mut tape)?;
        Ok(tape.value(v).clone())
    }

    pub fn param_count(&self) -> usize {
        ParamVisitor::param_count(self)
    }
}

impl ParamVisitor for SpecificPrompt {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        match &self.form {
            PromptForm::Dense(p) => f(p),
            PromptForm::LowRank { u, v, .. } => {
                f(u);
                f(v);
            }
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        match &mut self.form {
            PromptForm::Dense(p) => f(p),
            PromptForm::LowRank { u, v, .. } => {
                f(u);
                f(v);
            }
        }
    }
}

/// Parameter count of a low-rank prompt: `(c2 / t) · r · (h + w)`.
pub fn lowrank_param_count(c2: usize, h: usize, w: usize, r: usize, t: usize) -> usize {
    (c2 / t) * r * (h + w)
}

pub fn validate_lowrank(c2: usize, h: usize, w: usize, r: usize, t: usize) -> Result<()> {
    if r == 0 || r > h.min(w) {
        return Err(Error::invalid(
            "rank",
            format!("R={r} must lie in 1..={}", h.min(w)),
        ));
    }
    if t == 0 || !c2.is_multiple_of(t) {
        return Err(Error::invalid(
            "depth factor",
            format!("T={t} must divide C={c2}"),
        ));
    }
    if t > 1 && r != 1 {
        return Err(Error::invalid(
            "depth factor",
            format!("T={t} > 1 requires R=1, got R={r}"),
        ));
    }
    Ok(())
}

/// Low-rank specific prompt with N(0, 0.02²) factors.
pub fn init_prompt_lowrank(
    encoder_id: &str,
    c2: usize,
    h: usize,
    w: usize,
    r: usize,
    t: usize,
    seed: u64,
) -> Result<SpecificPrompt> {
    validate_lowrank(c2, h, w, r, t)?;
    let mut rng = seeded(seed);
    let c = c2 / t;
    let base = specific_name(encoder_id);
    let u = Parameter::new(
        format!("{base}.u"),
        randn(vec![c, h, r], LOWRANK_STD, &mut rng),
    );
    let v = Parameter::new(
        format!("{base}.v"),
        randn(vec![c, r, w], LOWRANK_STD, &mut rng),
    );
    Ok(SpecificPrompt {
        encoder_id: encoder_id.into(),
        channels: c2,
        form: PromptForm::LowRank {
            u,
            v,
            rank: r,
            depth_factor: t,
        },
    })
}

/// Bring a `[C×H×W]` map to `h1×w1` by average pooling (finer source) or
/// nearest-neighbour upsampling (coarser source).
pub fn resample_to(x: &Tensor, h1: usize, w1: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::shape(
            "resample_to",
            format!("expected [C×H×W], got {s:?}"),
        ));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = x.data();
    let mut out = vec![0.0; c * h1 * w1];
    if h >= h1 && w >= w1 {
        if h % h1 != 0 || w % w1 != 0 || h / h1 != w / w1 {
            return Err(Error::shape(
                "resample_to",
                format!("{h}×{w} is not an integer multiple of {h1}×{w1}"),
            ));
        }
        let k = h / h1;
        let inv = 1.0 / (k * k) as f64;
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[ch * h1 * w1 + (i / k) * w1 + j / k] += d[ch * h * w + i * w + j] * inv;
                }
            }
        }
    } else {
        if !h1.is_multiple_of(h) || !w1.is_multiple_of(w) || h1 / h != w1 / w {
            return Err(Error::shape(
                "resample_to",
                format!("{h1}×{w1} is not an integer multiple of {h}×{w}"),
            ));
        }
        let k = h1 / h;
        for ch in 0..c {
            for i in 0..h1 {
                for j in 0..w1 {
                    out[ch * h1 * w1 + i * w1 + j] = d[ch * h * w + (i / k) * w + j / k];
                }
            }
        }
    }
    Tensor::new(vec![c, h1, w1], out)
}

/// Mean of `n` encoded training samples (drawn without replacement) seen
/// from `view`, resampled to the ego grid `h1×w1`.
pub fn init_prompt_sampling(
    enc: &Encoder,
    scenes: &[&Scene],
    view: Viewpoint,
    n: usize,
    h1: usize,
    w1: usize,
    seed: u64,
) -> Result<Tensor> {
    if scenes.is_empty() {
        return Err(Error::Missing("training scenes for prompt sampling".into()));
    }
    if n == 0 || n > scenes.len() {
        return Err(Error::invalid(
            "sampling size",
            format!("N={n} with {} training scenes", scenes.len()),
        ));
    }
    let mut rng = seeded(seed);
    let mut idx = sample(&mut rng, scenes.len(), n).into_vec();
    idx.sort_unstable();
    let mut acc: Option<Vec<f64>> = None;
    for i in idx {
        let f = enc.encode_scene_points(&scenes[i].view(view).points)?;
        let r = resample_to(&f.data, h1, w1)?;
        match &mut acc {
            None => acc = Some(r.into_data()),
            Some(a) => a.iter_mut().zip(r.data()).for_each(|(x, y)| *x += y),
        }
    }
    let inv = 1.0 / n as f64;
    let data = acc.expect("n ≥ 1").into_iter().map(|v| v * inv).collect();
    Tensor::new(vec![enc.spec.out_channels, h1, w1], data)
}
