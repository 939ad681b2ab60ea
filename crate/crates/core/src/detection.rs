//! Dense single-anchor detection head, its loss and box decoding.
//!
//! Every cell predicts an objectness logit and four deltas relative to a
//! fixed 4 m × 2 m prior centred on the cell: `dx = (cx - x_c) / 4`,
//! `dy = (cy - y_c) / 2`, `dw = ln(w / 4)`, `dh = ln(h / 2)`.

use crate::error::{Error, Result};
use crate::numerics::{randn, ParamVisitor, Parameter, Tape, Tensor, Var};
use crate::rng::{derive_seed, seeded};
use crate::scene::{Aabb, GridSpec};

pub const PRIOR_W: f64 = 4.0;
pub const PRIOR_H: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;
/// Objectness bias so the initial foreground probability is 1%.
const PRIOR_LOGIT: f64 = -4.595_119_850_134_589;

#[derive(Clone, Debug, PartialEq)]
pub struct DensePrediction {
    /// Logits `[H×W]`.
    pub objectness: Tensor,
    /// `[4×H×W]`: dx, dy, log w, log h.
    pub box_deltas: Tensor,
}

impl DensePrediction {
    /// Split a raw `[5×H×W]` head output.
    pub fn from_raw(raw: &Tensor) -> Result<Self> {
        let s = raw.shape();
        if s.len() != 3 || s[0] != 5 {
            return Err(Error::shape(
                "DensePrediction",
                format!("expected [5×H×W], got {s:?}"),
            ));
        }
        let hw = s[1] * s[2];
        Ok(Self {
            objectness: Tensor::new(vec![s[1], s[2]], raw.data()[..hw].to_vec())?,
            box_deltas: Tensor::new(vec![4, s[1], s[2]], raw.data()[hw..].to_vec())?,
        })
    }
}

/// 1×1 convolution from `C` feature channels to 5 outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionHead {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl DetectionHead {
    pub fn new(owner: &str, in_channels: usize, seed: u64) -> Self {
        let mut rng = seeded(derive_seed(seed, &format!("head/{owner}")));
        let weight = Parameter::new(
            format!("head.{owner}.weight"),
            randn(vec![5, in_channels, 1, 1], 0.01, &mut rng),
        );
        let mut b = vec![0.0; 5];
        b[0] = PRIOR_LOGIT;
        let bias = Parameter::new(format!("head.{owner}.bias"), Tensor::from_parts(vec![5], b));
        Self { weight, bias }
    }

    pub fn zeros(owner: &str, in_channels: usize) -> Self {
        Self {
            weight: Parameter::new(
                format!("head.{owner}.weight"),
                Tensor::zeros(vec![5, in_channels, 1, 1]),
            ),
            bias: Parameter::new(format!("head.{owner}.bias"), Tensor::zeros(vec![5])),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Raw `[5×H×W]` output for a `[C×H×W]` feature.
    pub fn forward(&self, tape: &mut Tape, feature: Var) -> Result<Var> {
        let s = tape.shape(feature);
        if s.len() != 3 || s[0] != self.in_channels() {
            return Err(Error::shape(
                "head_forward",
                format!(
                    "head expects {} channels, feature is {s:?}",
                    self.in_channels()
                ),
            ));
        }
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let y = tape.conv2d(feature, w, 1, 0)?;
        tape.add_channel(y, b)
    }

    pub fn predict(&self, feature: &Tensor) -> Result<DensePrediction> {
        let mut tape = Tape::new();
        let f = tape.constant(feature.clone());
        let y = self.forward(&mut tape, f)?;
        DensePrediction::from_raw(tape.value(y))
    }
}

impl ParamVisitor for DetectionHead {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

pub fn encode_deltas(b: &Aabb, cell_x: f64, cell_y: f64) -> [f64; 4] {
    [
        (b.cx - cell_x) / PRIOR_W,
        (b.cy - cell_y) / PRIOR_H,
        (b.w / PRIOR_W).ln(),
        (b.h / PRIOR_H).ln(),
    ]
}

pub fn decode_deltas(d: [f64; 4], cell_x: f64, cell_y: f64) -> Aabb {
    Aabb::new(
        cell_x + d[0] * PRIOR_W,
        cell_y + d[1] * PRIOR_H,
        PRIOR_W * d[2].exp(),
        PRIOR_H * d[3].exp(),
    )
}

/// Dense training targets on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    /// 1 on cells whose center lies inside a box.
    pub objectness: Vec<f64>,
    /// `[4×H×W]` delta targets, zero on negatives.
    pub deltas: Vec<f64>,
    /// `[4×H×W]` regression mask.
    pub mask: Vec<f64>,
    pub num_pos: usize,
}

pub fn build_targets(boxes: &[Aabb], grid: &GridSpec) -> Targets {
    let hw = grid.cells();
    let mut t = Targets {
        objectness: vec![0.0; hw],
        deltas: vec![0.0; 4 * hw],
        mask: vec![0.0; 4 * hw],
        num_pos: 0,
    };
    for r in 0..grid.height_cells {
        for c in 0..grid.width_cells {
            let (x, y) = grid.cell_center(r, c);
            if let Some(b) = boxes.iter().find(|b| b.contains(x, y)) {
                let i = r * grid.width_cells + c;
                t.objectness[i] = 1.0;
                t.num_pos += 1;
                for (k, d) in encode_deltas(b, x, y).into_iter().enumerate() {
                    t.deltas[k * hw + i] = d;
                    t.mask[k * hw + i] = 1.0;
                }
            }
        }
    }
    t
}

/// Focal classification loss plus smooth-L1 regression on positive cells,
/// both normalised by the number of positives (at least 1).
pub fn detection_loss(tape: &mut Tape, raw: Var, boxes: &[Aabb], grid: &GridSpec) -> Result<Var> {
    let s = tape.shape(raw).to_vec();
    if s != [5, grid.height_cells, grid.width_cells] {
        return Err(Error::shape(
            "detection_loss",
            format!(
                "prediction {s:?} does not match grid {}×{}",
                grid.height_cells, grid.width_cells
            ),
        ));
    }
    let t = build_targets(boxes, grid);
    let norm = t.num_pos.max(1) as f64;
    let flat = tape.reshape(raw, &[5, grid.cells()])?;
    let obj = tape.slice_rows(flat, 0, 1)?;
    let deltas = tape.slice_rows(flat, 1, 4)?;
    let cls = tape.focal_loss(obj, t.objectness, FOCAL_ALPHA, FOCAL_GAMMA, norm)?;
    let reg = tape.smooth_l1(deltas, t.deltas, t.mask, SMOOTH_L1_BETA, norm)?;
    tape.add(cls, reg)
}

/// Threshold, decode and greedily suppress overlapping boxes. Candidates are
/// visited by descending score, ties by (row, col).
pub fn decode_boxes(
    pred: &DensePrediction,
    grid: &GridSpec,
    conf_threshold: f64,
    nms_iou: f64,
) -> Result<Vec<(Aabb, f64)>> {
    if !(conf_threshold > 0.0 && conf_threshold < 1.0) {
        return Err(Error::invalid(
            "conf_threshold",
            format!("{conf_threshold} not in (0,1)"),
        ));
    }
    let (h, w) = (grid.height_cells, grid.width_cells);
    if pred.objectness.shape() != [h, w] {
        return Err(Error::shape(
            "decode_boxes",
            format!("objectness {:?} vs grid {h}×{w}", pred.objectness.shape()),
        ));
    }
    let hw = h * w;
    let d = pred.box_deltas.data();
    let mut cands = Vec::new();
    for (i, &logit) in pred.objectness.data().iter().enumerate() {
        let score = crate::numerics::sigmoid(logit);
        if score > conf_threshold {
            let (r, c) = (i / w, i % w);
            let (x, y) = grid.cell_center(r, c);
            let b = decode_deltas([d[i], d[hw + i], d[2 * hw + i], d[3 * hw + i]], x, y);
            if !b.is_degenerate() && b.w.is_finite() && b.h.is_finite() {
                cands.push((i, b, score));
            }
        }
    }
    cands.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    let mut kept: Vec<(Aabb, f64)> = Vec::new();
    for (_, b, s) in cands {
        let mut keep = true;
        for (k, _) in &kept {
            if b.iou(k)? > nms_iou {
                keep = false;
                break;
            }
        }
        if keep {
            kept.push((b, s));
        }
    }
    Ok(kept)
}
