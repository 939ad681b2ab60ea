//! Fusion, IoU and average precision.

use serde::{Deserialize, Serialize};

use crate::detection::{decode_boxes, DensePrediction};
use crate::encoders::FeatureCache;
use crate::error::{Error, Result};
use crate::interpreter::interpret;
use crate::numerics::{Tape, Tensor, Var};
use crate::scene::{Aabb, Scene, Viewpoint};
use crate::training::{Checkpoint, PolyInter, Zoo};

/// Elementwise-max fusion of an ego feature and an aligned collaborator
/// feature. Ties send the gradient to the ego operand.
pub fn fuse_max(tape: &mut Tape, ego: Var, other: Var) -> Result<Var> {
    tape.maximum(ego, other)
}

pub fn iou_aabb(a: &Aabb, b: &Aabb) -> Result<f64> {
    a.iou(b)
}

/// All-point interpolated AP for a single image.
pub fn average_precision(dets: &[(Aabb, f64)], gts: &[Aabb], iou_thr: f64) -> Result<f64> {
    let tagged: Vec<(usize, Aabb, f64)> = dets.iter().map(|(b, s)| (0, *b, *s)).collect();
    average_precision_scenes(&tagged, &[gts.to_vec()], iou_thr)
}

/// All-point interpolated AP over many scenes. Detections carry the index of
/// their scene and are ranked globally by descending score (stable, so equal
/// scores keep insertion order); each is greedily matched to the unmatched
/// ground-truth box of its scene with the highest IoU at or above `iou_thr`.
pub fn average_precision_scenes(
    dets: &[(usize, Aabb, f64)],
    gts: &[Vec<Aabb>],
    iou_thr: f64,
) -> Result<f64> {
    if dets.iter().any(|d| !d.2.is_finite()) {
        return Err(Error::invalid("detections", "non-finite score"));
    }
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return Ok(if dets.is_empty() { 1.0 } else { 0.0 });
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].2.total_cmp(&dets[a].2));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(dets.len());
    let mut precision = Vec::with_capacity(dets.len());
    for (rank, &i) in order.iter().enumerate() {
        let (scene, b, _) = &dets[i];
        let scene_gts = gts.get(*scene).ok_or_else(|| {
            Error::invalid("detections", format!("scene index {scene} out of range"))
        })?;
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in scene_gts.iter().enumerate() {
            if used[*scene][j] {
                continue;
            }
            let iou = b.iou(g)?;
            if iou >= iou_thr && best.is_none_or(|(_, bi)| iou > bi) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            used[*scene][j] = true;
            tp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (rank + 1) as f64);
    }
    // Precision envelope from the right, then integrate over recall steps.
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    Ok(ap)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Ego fused with the interpreted neighbor feature.
    Collab,
    /// Ego feature alone.
    EgoOnly,
    /// Ego fused with the spatially resized neighbor feature whose channels
    /// are truncated or zero-padded to the ego channel count.
    NoInterp,
}

impl EvalMode {
    pub const ALL: [EvalMode; 3] = [EvalMode::Collab, EvalMode::EgoOnly, EvalMode::NoInterp];

    pub fn as_str(&self) -> &'static str {
        match self {
            EvalMode::Collab => "collab",
            EvalMode::EgoOnly => "ego_only",
            EvalMode::NoInterp => "no_interp",
        }
    }
}

/// Metrics record written by the `eval` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub scenario: String,
    pub mode: EvalMode,
    pub ap50: f64,
    pub ap70: f64,
    pub n_scenes: usize,
    pub seed: u64,
}

/// Channel-truncate or zero-pad `[C×H×W]` to `c1` channels.
pub fn match_channels(x: &Tensor, c1: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::shape(
            "match_channels",
            format!("expected [C×H×W], got {s:?}"),
        ));
    }
    let hw = s[1] * s[2];
    let mut data = vec![0.0; c1 * hw];
    let keep = c1.min(s[0]) * hw;
    data[..keep].copy_from_slice(&x.data()[..keep]);
    Tensor::new(vec![c1, s[1], s[2]], data)
}

/// Detect on every scene with the ego head in `mode` and score against all
/// boxes of each scene.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_scenario(
    zoo: &Zoo,
    model: Option<&PolyInter>,
    ego_id: &str,
    neighbor_id: &str,
    scenes: &[&Scene],
    mode: EvalMode,
    conf_threshold: f64,
    nms_iou: f64,
    cache: &mut FeatureCache,
) -> Result<(f64, f64)> {
    let ego = zoo.get(ego_id)?;
    let neighbor = &zoo.get(neighbor_id)?.encoder;
    let fgrid = ego.encoder.spec.feature_grid();
    let (c1, h1, w1) = (
        ego.encoder.spec.out_channels,
        fgrid.height_cells,
        fgrid.width_cells,
    );
    if mode == EvalMode::Collab {
        model
            .ok_or_else(|| Error::Missing("interpreter for collaborative evaluation".into()))?
            .prompts
            .get(neighbor_id)?;
    }
    let mut dets = Vec::new();
    let mut gts = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let f_ego = cache.get(&ego.encoder, scene, Some(Viewpoint::Ego), h1, w1)?;
        let mut tape = Tape::new();
        let e = tape.constant((*f_ego).clone());
        let feat = match mode {
            EvalMode::EgoOnly => e,
            EvalMode::Collab => {
                let m = model.expect("checked above");
                let f_neb = cache.get(neighbor, scene, Some(Viewpoint::Neighbor), h1, w1)?;
                let n = tape.constant((*f_neb).clone());
                let it = interpret(&mut tape, &m.net, &m.prompts, neighbor_id, e, n)?;
                fuse_max(&mut tape, e, it.out)?
            }
            EvalMode::NoInterp => {
                let f_neb = cache.get(neighbor, scene, Some(Viewpoint::Neighbor), h1, w1)?;
                let n = tape.constant(match_channels(&f_neb, c1)?);
                fuse_max(&mut tape, e, n)?
            }
        };
        let raw = ego.head.forward(&mut tape, feat)?;
        let pred = DensePrediction::from_raw(tape.value(raw))?;
        for (b, s) in decode_boxes(&pred, &fgrid, conf_threshold, nms_iou)? {
            dets.push((i, b, s));
        }
        gts.push(scene.boxes.clone());
    }
    Ok((
        average_precision_scenes(&dets, &gts, 0.5)?,
        average_precision_scenes(&dets, &gts, 0.7)?,
    ))
}

/// Evaluate a trained checkpoint on `scenes` for the ego and `neighbor_id`.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    neighbor_id: &str,
    scenes: &[&Scene],
    mode: EvalMode,
    cache: &mut FeatureCache,
) -> Result<EvalResult> {
    let cfg = &ckpt.config;
    let (ap50, ap70) = evaluate_scenario(
        &ckpt.zoo,
        ckpt.model.as_ref(),
        &cfg.roles.ego,
        neighbor_id,
        scenes,
        mode,
        cfg.eval.conf_threshold,
        cfg.eval.nms_iou,
        cache,
    )?;
    Ok(EvalResult {
        scenario: format!("{}+{}", cfg.roles.ego, neighbor_id),
        mode,
        ap50,
        ap70,
        n_scenes: scenes.len(),
        seed: ckpt.seed,
    })
}
