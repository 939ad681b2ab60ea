//! Style loss, discriminator and adversarial objectives, and the composite
//! phase losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{randn, ParamVisitor, Parameter, Tape, Tensor, Var};
use crate::rng::{derive_seed, seeded};

pub const DISC_CHANNELS: usize = 16;
/// Label of ego-space features for the discriminator.
pub const EGO_LABEL: f64 = 1.0;
pub const NEIGHBOR_LABEL: f64 = 0.0;

/// `‖μ(f) − μ(f_ego)‖₂ + ‖σ(f) − σ(f_ego)‖₂` with per-channel moments over
/// the spatial extent (population σ).
pub fn style_loss(tape: &mut Tape, f: Var, f_ego: Var) -> Result<Var> {
    let s = tape.shape(f).to_vec();
    if s != tape.shape(f_ego) || s.len() != 3 {
        return Err(Error::shape(
            "style_loss",
            format!("{s:?} vs {:?}", tape.shape(f_ego)),
        ));
    }
    let flat = [s[0], s[1] * s[2]];
    let a = tape.reshape(f, &flat)?;
    let b = tape.reshape(f_ego, &flat)?;
    let (ma, mb) = (tape.row_mean(a)?, tape.row_mean(b)?);
    let (sa, sb) = (tape.row_std(a)?, tape.row_std(b)?);
    let dm = tape.sub(ma, mb)?;
    let ds = tape.sub(sa, sb)?;
    let nm = tape.l2_norm(dm);
    let ns = tape.l2_norm(ds);
    tape.add(nm, ns)
}

/// Two stride-2 3×3 convolutions, global average pooling and an affine
/// layer producing one logit ("is this an ego feature?").
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub conv1: Parameter,
    pub bias1: Parameter,
    pub conv2: Parameter,
    pub bias2: Parameter,
    pub fc: Parameter,
    pub fc_bias: Parameter,
}

impl Discriminator {
    pub fn new(in_channels: usize, seed: u64) -> Self {
        let mut rng = seeded(derive_seed(seed, "discriminator"));
        let c = DISC_CHANNELS;
        let n = |s: &str| format!("discriminator.{s}");
        Self {
            conv1: Parameter::new(
                n("conv1.weight"),
                randn(
                    vec![c, in_channels, 3, 3],
                    (2.0 / (9.0 * in_channels as f64)).sqrt(),
                    &mut rng,
                ),
            ),
            bias1: Parameter::new(n("conv1.bias"), Tensor::zeros(vec![c])),
            conv2: Parameter::new(
                n("conv2.weight"),
                randn(vec![c, c, 3, 3], (2.0 / (9.0 * c as f64)).sqrt(), &mut rng),
            ),
            bias2: Parameter::new(n("conv2.bias"), Tensor::zeros(vec![c])),
            fc: Parameter::new(
                n("fc.weight"),
                randn(vec![c, 1], (1.0 / c as f64).sqrt(), &mut rng),
            ),
            fc_bias: Parameter::new(n("fc.bias"), Tensor::zeros(vec![1, 1])),
        }
    }

    /// Logit `[1×1]` for a `[C×H×W]` feature. With `detached`, the weights
    /// enter the tape as constants so no gradient reaches them.
    pub fn forward(&self, tape: &mut Tape, x: Var, detached: bool) -> Result<Var> {
        let mut bind = |p: &Parameter| {
            if detached {
                tape.param_detached(p)
            } else {
                tape.param(p)
            }
        };
        let (w1, b1, w2, b2, fc, fb) = (
            bind(&self.conv1),
            bind(&self.bias1),
            bind(&self.conv2),
            bind(&self.bias2),
            bind(&self.fc),
            bind(&self.fc_bias),
        );
        let y = tape.conv2d(x, w1, 2, 1)?;
        let y = tape.add_channel(y, b1)?;
        let y = tape.relu(y);
        let y = tape.conv2d(y, w2, 2, 1)?;
        let y = tape.add_channel(y, b2)?;
        let y = tape.relu(y);
        let s = tape.shape(y).to_vec();
        let flat = tape.reshape(y, &[s[0], s[1] * s[2]])?;
        let pooled = tape.row_mean(flat)?;
        let row = tape.reshape(pooled, &[1, s[0]])?;
        let z = tape.matmul(row, fc)?;
        tape.add(z, fb)
    }
}

impl ParamVisitor for Discriminator {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        for p in [
            &self.conv1,
            &self.bias1,
            &self.conv2,
            &self.bias2,
            &self.fc,
            &self.fc_bias,
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
            &mut self.fc,
            &mut self.fc_bias,
        ] {
            f(p);
        }
    }
}

/// Discriminator objective: ego features labelled ego, generalized neighbor
/// features (cut from the graph) labelled neighbor.
pub fn discriminator_loss(tape: &mut Tape, d: &Discriminator, f_g: Var, f_ego: Var) -> Result<Var> {
    let fg = tape.detach(f_g);
    let z_ego = d.forward(tape, f_ego, false)?;
    let z_neb = d.forward(tape, fg, false)?;
    let a = tape.bce_with_logits(z_ego, vec![EGO_LABEL])?;
    let b = tape.bce_with_logits(z_neb, vec![NEIGHBOR_LABEL])?;
    tape.add(a, b)
}

/// Generator objective: make `f_g` pass as ego. The discriminator is frozen
/// on this path.
pub fn generator_loss(tape: &mut Tape, d: &Discriminator, f_g: Var) -> Result<Var> {
    let z = d.forward(tape, f_g, true)?;
    tape.bce_with_logits(z, vec![EGO_LABEL])
}

/// Returns `(loss_d, loss_gen)`.
pub fn adversarial_losses(
    tape: &mut Tape,
    d: &Discriminator,
    f_g: Var,
    f_ego: Var,
) -> Result<(Var, Var)> {
    Ok((
        discriminator_loss(tape, d, f_g, f_ego)?,
        generator_loss(tape, d, f_g)?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub omega: f64,
    pub lambda_s: f64,
    pub lambda_g: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            omega: 0.5,
            lambda_s: 1.0,
            lambda_g: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("omega", self.omega),
            ("lambda_s", self.lambda_s),
            ("lambda_g", self.lambda_g),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid("loss weight", format!("{k} = {v}")));
            }
        }
        Ok(())
    }
}

/// Component losses of one training step. Phase II leaves the adversarial
/// and general-style terms empty.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub collab: Var,
    pub single: Var,
    pub style_s: Var,
    pub adv_gen: Option<Var>,
    pub style_g: Option<Var>,
}

fn check_finite(tape: &Tape, step: usize, terms: &[(&str, Option<Var>)]) -> Result<()> {
    for (name, v) in terms {
        if let Some(v) = v {
            if !tape.scalar(*v).is_finite() {
                return Err(Error::Divergence {
                    step,
                    term: (*name).into(),
                });
            }
        }
    }
    Ok(())
}

/// `L_collab + λs (L_single + ω L_style^s) + λg (L_adv + ω L_style^g)`.
pub fn phase1_loss(tape: &mut Tape, p: &LossParts, w: &LossWeights, step: usize) -> Result<Var> {
    check_finite(
        tape,
        step,
        &[
            ("l_collab", Some(p.collab)),
            ("l_single", Some(p.single)),
            ("l_style_s", Some(p.style_s)),
            ("l_adv_gen", p.adv_gen),
            ("l_style_g", p.style_g),
        ],
    )?;
    let ss = tape.scale(p.style_s, w.omega);
    let ls = tape.add(p.single, ss)?;
    let ls = tape.scale(ls, w.lambda_s);
    let mut total = tape.add(p.collab, ls)?;
    if w.lambda_g != 0.0 {
        let (adv, sg) = match (p.adv_gen, p.style_g) {
            (Some(a), Some(s)) => (a, s),
            _ => {
                return Err(Error::Contract(
                    "phase I loss with λg > 0 needs adversarial and general-style terms".into(),
                ))
            }
        };
        let sg = tape.scale(sg, w.omega);
        let lg = tape.add(adv, sg)?;
        let lg = tape.scale(lg, w.lambda_g);
        total = tape.add(total, lg)?;
    }
    let t = tape.scalar(total);
    if !t.is_finite() {
        return Err(Error::Divergence {
            step,
            term: "total".into(),
        });
    }
    Ok(total)
}

/// `L_collab + λs (L_single + ω L_style^s)`: Phase I with `λg = 0`.
pub fn phase2_loss(tape: &mut Tape, p: &LossParts, w: &LossWeights, step: usize) -> Result<Var> {
    let w2 = LossWeights {
        lambda_g: 0.0,
        ..*w
    };
    phase1_loss(
        tape,
        &LossParts {
            adv_gen: None,
            style_g: None,
            ..*p
        },
        &w2,
        step,
    )
}
