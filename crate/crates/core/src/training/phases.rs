use std::collections::BTreeMap;

use rand::Rng as _;

use super::checkpoint::{Checkpoint, LossRow, Metrics, Stage};
use super::freeze::{FreezeLedger, Phase};
use super::model::{Agent, PolyInter, Zoo};
use super::optim::Adam;
use crate::config::{Config, PromptInit};
use crate::detection::{detection_loss, DetectionHead};
use crate::encoders::{pretrain_encoder, Encoder, FeatureCache, PretrainConfig};
use crate::error::{Error, Result};
use crate::eval::fuse_max;
use crate::interpreter::{
    init_prompt_lowrank, init_prompt_sampling, interpret, InterpreterNet, PromptSet, SpecificPrompt,
};
use crate::losses::{
    discriminator_loss, generator_loss, phase1_loss, phase2_loss, style_loss, Discriminator,
    LossParts,
};
use crate::numerics::{Tape, Var};
use crate::rng::{derive_seed, seeded, Rng, RngState};
use crate::scene::{Dataset, Scene, Split, Viewpoint};

pub const OPT_INTERP: &str = "interpreter";
pub const OPT_DISC: &str = "discriminator";

/// Pretrain every encoder of the config with its own head and freeze them.
pub fn pretrain_all(cfg: &Config, data: &Dataset, seed: u64) -> Result<Checkpoint> {
    cfg.validate()?;
    let train = data.split(Split::Train);
    let val = data.split(Split::Val);
    let pcfg = PretrainConfig {
        steps: cfg.pretrain.steps,
        lr: cfg.pretrain.lr,
        seed,
        conf_threshold: cfg.eval.conf_threshold,
        nms_iou: cfg.eval.nms_iou,
    };
    let mut zoo = Zoo::default();
    let mut metrics = Metrics::default();
    for e in &cfg.encoders {
        let spec = cfg.encoder_spec(&e.id)?;
        let head = DetectionHead::new(&e.id, spec.out_channels, seed);
        let p = pretrain_encoder(Encoder::build(spec)?, head, &train, &val, &pcfg)?;
        metrics.baseline_ap50.insert(e.id.clone(), p.baseline_ap50);
        zoo.agents.insert(
            e.id.clone(),
            Agent {
                encoder: p.encoder,
                head: p.head,
            },
        );
    }
    Ok(Checkpoint {
        stage: Stage::Pretrain,
        config: cfg.clone(),
        seed,
        step: cfg.pretrain.steps,
        total_steps: cfg.pretrain.steps,
        zoo,
        model: None,
        ledger: FreezeLedger::default(),
        rng: None,
        optimizers: BTreeMap::new(),
        metrics,
    })
}

fn ego_dims(zoo: &Zoo, cfg: &Config) -> Result<(usize, usize, usize)> {
    let ego = zoo.get(&cfg.roles.ego)?;
    let g = ego.encoder.spec.feature_grid();
    Ok((ego.encoder.spec.out_channels, g.height_cells, g.width_cells))
}

fn train_scenes(data: &Dataset) -> Result<Vec<&Scene>> {
    let t = data.split(Split::Train);
    if t.is_empty() {
        return Err(Error::Missing("training scenes".into()));
    }
    Ok(t)
}

/// Fresh Phase I state: sampled prompts for the ego (general) and every
/// Phase I neighbor (specific), zero-step optimizers.
pub fn init_phase1(
    pre: &Checkpoint,
    cfg: &Config,
    data: &Dataset,
    seed: u64,
) -> Result<Checkpoint> {
    cfg.validate()?;
    if pre.stage != Stage::Pretrain {
        return Err(Error::Contract(format!(
            "Phase I needs a pretrain checkpoint, got {:?}",
            pre.stage
        )));
    }
    pre.verify_encoders(cfg)?;
    let zoo = pre.zoo.clone();
    if !zoo.agents.values().all(|a| a.encoder.is_frozen()) {
        return Err(Error::Contract(
            "encoders must be frozen before Phase I".into(),
        ));
    }
    let train = train_scenes(data)?;
    let (c1, h1, w1) = ego_dims(&zoo, cfg)?;
    let n = cfg.interpreter.sampling_n.min(train.len());
    let mut net = InterpreterNet::new(
        cfg.interpreter_config(),
        c1,
        h1,
        w1,
        derive_seed(seed, "net"),
    )?;
    let g = init_prompt_sampling(
        &zoo.get(&cfg.roles.ego)?.encoder,
        &train,
        Viewpoint::Ego,
        n,
        h1,
        w1,
        derive_seed(seed, "prompt/general"),
    )?;
    let mut prompts = PromptSet::new(g);
    for id in &cfg.roles.phase1_neighbors {
        let enc = &zoo.get(id)?.encoder;
        let s = init_prompt_sampling(
            enc,
            &train,
            Viewpoint::Neighbor,
            n,
            h1,
            w1,
            derive_seed(seed, &format!("prompt/{id}")),
        )?;
        prompts.register(SpecificPrompt::dense(id, s)?)?;
        net.add_resizer(id, enc.spec.out_channels, seed)?;
    }
    let mut model = PolyInter {
        net,
        prompts,
        disc: Discriminator::new(c1, seed),
    };
    let ledger = FreezeLedger::classify(&[&zoo, &model], &[]);
    ledger.apply(Phase::Phase1, &mut [&mut model]);
    let mut optimizers = BTreeMap::new();
    optimizers.insert(
        OPT_INTERP.to_string(),
        Adam::with_betas(cfg.phase1.lr, cfg.phase1.beta1, cfg.phase1.beta2),
    );
    optimizers.insert(
        OPT_DISC.to_string(),
        Adam::with_betas(cfg.phase1.lr, cfg.phase1.beta1, cfg.phase1.beta2),
    );
    Ok(Checkpoint {
        stage: Stage::Phase1,
        config: cfg.clone(),
        seed,
        step: 0,
        total_steps: cfg.phase1.steps,
        zoo,
        model: Some(model),
        ledger,
        rng: Some(RngState::capture(&seeded(derive_seed(seed, "phase1/loop")))),
        optimizers,
        metrics: Metrics {
            baseline_ap50: pre.metrics.baseline_ap50.clone(),
            loss_log: Vec::new(),
        },
    })
}

/// Fresh Phase II state on top of a Phase I checkpoint: registers the new
/// neighbor's prompt (sampling or low-rank init) and resizer, and freezes
/// everything else.
pub fn init_phase2(
    base: &Checkpoint,
    cfg: &Config,
    data: &Dataset,
    seed: u64,
) -> Result<Checkpoint> {
    cfg.validate()?;
    if base.stage != Stage::Phase1 {
        return Err(Error::Contract(format!(
            "Phase II needs a Phase I checkpoint, got {:?}",
            base.stage
        )));
    }
    base.verify_base(cfg)?;
    let mut model = base
        .model
        .clone()
        .ok_or_else(|| Error::Contract("base checkpoint holds no interpreter".into()))?;
    let zoo = base.zoo.clone();
    let id = cfg.roles.phase2_neighbor.clone();
    if model.prompts.specifics.contains_key(&id) {
        return Err(Error::DuplicateId(id));
    }
    let enc = &zoo.get(&id)?.encoder;
    let (c2, h1, w1) = (enc.spec.out_channels, model.net.h1, model.net.w1);
    let prompt = match cfg.phase2.prompt_init {
        PromptInit::Sampling => {
            let train = train_scenes(data)?;
            let n = cfg.interpreter.sampling_n.min(train.len());
            SpecificPrompt::dense(
                &id,
                init_prompt_sampling(
                    enc,
                    &train,
                    Viewpoint::Neighbor,
                    n,
                    h1,
                    w1,
                    derive_seed(seed, &format!("prompt/{id}")),
                )?,
            )?
        }
        PromptInit::Lowrank => init_prompt_lowrank(
            &id,
            c2,
            h1,
            w1,
            cfg.phase2.rank,
            cfg.phase2.depth_factor,
            derive_seed(seed, &format!("prompt/{id}")),
        )?,
    };
    model.prompts.register(prompt)?;
    model.net.add_resizer(&id, c2, seed)?;
    let ledger = FreezeLedger::classify(&[&zoo, &model], &[id.as_str()]);
    ledger.apply(Phase::Phase2, &mut [&mut model]);
    let mut optimizers = BTreeMap::new();
    optimizers.insert(
        OPT_INTERP.to_string(),
        Adam::with_betas(cfg.phase2.lr, cfg.phase2.beta1, cfg.phase2.beta2),
    );
    Ok(Checkpoint {
        stage: Stage::Phase2,
        config: cfg.clone(),
        seed,
        step: 0,
        total_steps: cfg.phase2.steps,
        zoo,
        model: Some(model),
        ledger,
        rng: Some(RngState::capture(&seeded(derive_seed(seed, "phase2/loop")))),
        optimizers,
        metrics: Metrics {
            baseline_ap50: base.metrics.baseline_ap50.clone(),
            loss_log: Vec::new(),
        },
    })
}

/// Index drawn uniformly from `0..k`; used to pick the Phase I neighbor.
pub fn sample_neighbor(rng: &mut Rng, k: usize) -> usize {
    rng.random_range(0..k)
}

/// Advance a Phase I or Phase II checkpoint to `until` steps (capped at its
/// total). Resuming a saved checkpoint continues bit-identically.
pub fn train(
    ckpt: &mut Checkpoint,
    data: &Dataset,
    cache: &mut FeatureCache,
    until: usize,
) -> Result<()> {
    let phase = match ckpt.stage {
        Stage::Phase1 => Phase::Phase1,
        Stage::Phase2 => Phase::Phase2,
        Stage::Pretrain => {
            return Err(Error::Contract(
                "pretrain checkpoints are not trained by this loop".into(),
            ))
        }
    };
    let until = until.min(ckpt.total_steps);
    if ckpt.step >= until {
        return Ok(());
    }
    let train = train_scenes(data)?;
    let cfg = ckpt.config.clone();
    let (neighbors, batch) = match phase {
        Phase::Phase1 => (cfg.roles.phase1_neighbors.clone(), cfg.phase1.batch),
        Phase::Phase2 => (vec![cfg.roles.phase2_neighbor.clone()], cfg.phase2.batch),
    };
    let mut rng = ckpt
        .rng
        .as_ref()
        .ok_or_else(|| Error::Contract("checkpoint has no RNG state".into()))?
        .restore();
    let mut opt = ckpt
        .optimizers
        .remove(OPT_INTERP)
        .ok_or_else(|| Error::Missing("interpreter optimizer state".into()))?;
    let mut opt_d = ckpt.optimizers.remove(OPT_DISC);
    let model = ckpt
        .model
        .as_mut()
        .ok_or_else(|| Error::Contract("checkpoint holds no interpreter".into()))?;
    let ego = ckpt.zoo.get(&cfg.roles.ego)?;
    let result = (|| {
        while ckpt.step < until {
            let step = ckpt.step;
            let scenes: Vec<&Scene> = (0..batch)
                .map(|_| train[rng.random_range(0..train.len())])
                .collect();
            let nb = &neighbors[sample_neighbor(&mut rng, neighbors.len())];
            let row = train_step(
                model,
                ego,
                &ckpt.zoo.get(nb)?.encoder,
                &scenes,
                &cfg,
                phase,
                step,
                cache,
                &mut opt,
                opt_d.as_mut(),
            )?;
            ckpt.metrics.loss_log.push(row);
            ckpt.step += 1;
        }
        Ok(())
    })();
    ckpt.optimizers.insert(OPT_INTERP.to_string(), opt);
    if let Some(d) = opt_d {
        ckpt.optimizers.insert(OPT_DISC.to_string(), d);
    }
    ckpt.rng = Some(RngState::capture(&rng));
    result
}

/// Per-scene loss terms of one training step.
struct SceneTerms {
    collab: Var,
    single: Var,
    style_s: Var,
    adversarial: Option<(Var, Var, Var)>,
}

fn scene_terms(
    tape: &mut Tape,
    model: &PolyInter,
    ego: &Agent,
    neighbor: &Encoder,
    scene: &Scene,
    phase: Phase,
    cache: &mut FeatureCache,
) -> Result<SceneTerms> {
    let (h1, w1) = (model.net.h1, model.net.w1);
    let fgrid = ego.encoder.spec.feature_grid();
    let f_ego = cache.get(&ego.encoder, scene, Some(Viewpoint::Ego), h1, w1)?;
    let f_neb = cache.get(neighbor, scene, Some(Viewpoint::Neighbor), h1, w1)?;
    let neb_boxes = scene.view(Viewpoint::Neighbor).boxes;
    let e = tape.constant((*f_ego).clone());
    let n = tape.constant((*f_neb).clone());
    let it = interpret(tape, &model.net, &model.prompts, &neighbor.spec.id, e, n)?;
    let fused = fuse_max(tape, e, it.out)?;
    let raw = ego.head.forward(tape, fused)?;
    let collab = detection_loss(tape, raw, &scene.boxes, &fgrid)?;
    let raw_s = ego.head.forward(tape, it.f_s)?;
    let single = detection_loss(tape, raw_s, &neb_boxes, &fgrid)?;
    let style_s = style_loss(tape, it.f_s, e)?;
    let adversarial = match phase {
        Phase::Phase1 => Some((
            generator_loss(tape, &model.disc, it.f_g)?,
            style_loss(tape, it.f_g, e)?,
            discriminator_loss(tape, &model.disc, it.f_g, e)?,
        )),
        Phase::Phase2 => None,
    };
    Ok(SceneTerms {
        collab,
        single,
        style_s,
        adversarial,
    })
}

fn batch_mean(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(if vars.len() > 1 {
        tape.scale(acc, 1.0 / vars.len() as f64)
    } else {
        acc
    })
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut PolyInter,
    ego: &Agent,
    neighbor: &Encoder,
    scenes: &[&Scene],
    cfg: &Config,
    phase: Phase,
    step: usize,
    cache: &mut FeatureCache,
    opt: &mut Adam,
    opt_d: Option<&mut Adam>,
) -> Result<LossRow> {
    let mut tape = Tape::new();
    let mut terms = Vec::with_capacity(scenes.len());
    for scene in scenes {
        terms.push(scene_terms(
            &mut tape, model, ego, neighbor, scene, phase, cache,
        )?);
    }
    let pick = |f: &dyn Fn(&SceneTerms) -> Var| terms.iter().map(f).collect::<Vec<_>>();
    let collab = batch_mean(&mut tape, &pick(&|t| t.collab))?;
    let single = batch_mean(&mut tape, &pick(&|t| t.single))?;
    let style_s = batch_mean(&mut tape, &pick(&|t| t.style_s))?;
    let mut row = LossRow {
        step,
        l_collab: tape.scalar(collab),
        l_single: tape.scalar(single),
        l_style_s: tape.scalar(style_s),
        ..Default::default()
    };

    let (total, adv_d) = match phase {
        Phase::Phase1 => {
            let adv: Vec<(Var, Var, Var)> = terms.iter().filter_map(|t| t.adversarial).collect();
            let adv_gen = batch_mean(&mut tape, &adv.iter().map(|a| a.0).collect::<Vec<_>>())?;
            let style_g = batch_mean(&mut tape, &adv.iter().map(|a| a.1).collect::<Vec<_>>())?;
            let adv_d = batch_mean(&mut tape, &adv.iter().map(|a| a.2).collect::<Vec<_>>())?;
            let parts = LossParts {
                collab,
                single,
                style_s,
                adv_gen: Some(adv_gen),
                style_g: Some(style_g),
            };
            let total = phase1_loss(&mut tape, &parts, &cfg.loss, step)?;
            row.l_style_g = tape.scalar(style_g);
            row.l_adv_gen = tape.scalar(adv_gen);
            row.l_adv_d = tape.scalar(adv_d);
            if !row.l_adv_d.is_finite() {
                return Err(Error::Divergence {
                    step,
                    term: "l_adv_d".into(),
                });
            }
            (total, Some(adv_d))
        }
        Phase::Phase2 => {
            let parts = LossParts {
                collab,
                single,
                style_s,
                adv_gen: None,
                style_g: None,
            };
            (phase2_loss(&mut tape, &parts, &cfg.loss, step)?, None)
        }
    };
    row.total = tape.scalar(total);

    let grads = tape.backward(total)?;
    if let (Some(ld), Some(od)) = (adv_d, opt_d) {
        let gd = tape.backward(ld)?;
        od.step(&tape, &gd, &mut [&mut model.disc]);
    }
    opt.step(&tape, &grads, &mut [&mut model.net, &mut model.prompts]);
    Ok(row)
}

/// Phase I from a pretrain checkpoint, run to completion.
pub fn run_phase1(
    pre: &Checkpoint,
    cfg: &Config,
    data: &Dataset,
    seed: u64,
    cache: &mut FeatureCache,
) -> Result<Checkpoint> {
    let mut c = init_phase1(pre, cfg, data, seed)?;
    let total = c.total_steps;
    train(&mut c, data, cache, total)?;
    Ok(c)
}

/// Phase II adaptation from a Phase I checkpoint, run to completion.
pub fn adapt_phase2(
    base: &Checkpoint,
    cfg: &Config,
    data: &Dataset,
    seed: u64,
    cache: &mut FeatureCache,
) -> Result<Checkpoint> {
    let mut c = init_phase2(base, cfg, data, seed)?;
    let total = c.total_steps;
    train(&mut c, data, cache, total)?;
    Ok(c)
}
