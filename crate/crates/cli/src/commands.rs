//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use polyinter_core::config::{Config, PromptInit};
use polyinter_core::encoders::FeatureCache;
use polyinter_core::eval::{evaluate_checkpoint, EvalMode, EvalResult};
use polyinter_core::interpreter::ChannelAdapter;
use polyinter_core::scene::{generate_dataset, load_dataset, save_dataset, Dataset, Split};
use polyinter_core::training::{
    init_phase1, init_phase2, pretrain_all, train, trainable_param_report, Checkpoint, LossRow,
    Stage,
};

use crate::rundir::{load_config, write_new, FileRecord, RunDir, RunManifest, EVAL_DIR, TRAIN_LOG};
use crate::{
    AdapterArg, Command, EvalArgs, GenDataArgs, ModeArg, Phase1Args, Phase2Args, PretrainArgs,
    PromptInitArg, ReportArgs, SplitArg, SweepArgs,
};

/// Steps between progress lines of the training loops.
const LOG_EVERY: usize = 50;

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(&a),
        Command::Pretrain(a) => pretrain(&a),
        Command::Phase1(a) => phase1(&a),
        Command::Phase2(a) => phase2(&a),
        Command::Eval(a) => eval(&a),
        Command::Report(a) => report(&a),
        Command::SweepRank(a) => sweep_rank(&a),
    }
}

fn load_data(path: &Path) -> Result<Dataset> {
    load_dataset(path).with_context(|| format!("cannot load dataset {}", path.display()))
}

fn load_base(dir: &Path) -> Result<(RunDir, Checkpoint)> {
    let run = RunDir::open(dir)?;
    let ckpt = Checkpoint::load(&run.checkpoint())
        .with_context(|| format!("cannot load checkpoint of run {}", dir.display()))?;
    Ok((run, ckpt))
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let cfg = load_config(&a.config.config)?;
    let mut spec = cfg.dataset_spec();
    spec.seed = a.seed.unwrap_or(spec.seed);
    spec.scenes = a.scenes.unwrap_or(spec.scenes);
    spec.objects = a.objects.unwrap_or(spec.objects);
    if a.out.exists() {
        bail!("{} already exists", a.out.display());
    }
    let ds = generate_dataset(&spec)?;
    save_dataset(&ds, &a.out).with_context(|| format!("cannot write {}", a.out.display()))?;
    let rec = FileRecord::of("data", &a.out)?;
    println!(
        "wrote {} scenes to {} ({})",
        ds.len(),
        a.out.display(),
        rec.hash
    );
    Ok(())
}

struct RunOutput<'a> {
    command: &'a str,
    config_path: &'a Path,
    cfg: &'a Config,
    data_path: &'a Path,
    base: Option<&'a RunDir>,
    ckpt: &'a Checkpoint,
}

/// Write `ckpt.bin`, the training log (for interpreter stages) and the
/// manifest into a fresh run directory.
fn finish_run(run: &RunDir, out: RunOutput) -> Result<()> {
    let ckpt_path = run.checkpoint();
    write_new(&ckpt_path, &out.ckpt.to_bytes()?)?;
    let mut outputs = vec![FileRecord::of("checkpoint", &ckpt_path)?];
    if out.ckpt.stage != Stage::Pretrain {
        let mut csv = String::from(LossRow::CSV_HEADER);
        csv.push('\n');
        for r in &out.ckpt.metrics.loss_log {
            csv.push_str(&r.csv());
            csv.push('\n');
        }
        write_new(&run.file(TRAIN_LOG), csv.as_bytes())?;
        outputs.push(FileRecord::of("train_log", &run.file(TRAIN_LOG))?);
    }
    let mut inputs = vec![
        FileRecord::of("config", out.config_path)?,
        FileRecord::of("data", out.data_path)?,
    ];
    if let Some(b) = out.base {
        inputs.push(FileRecord::of("base_checkpoint", &b.checkpoint())?);
    }
    let (trainable, interp, fraction) = if out.ckpt.model.is_some() {
        let r = trainable_param_report(out.ckpt);
        (
            Some(r.trainable),
            Some(r.interpreter_total),
            Some(r.interpreter_fraction()),
        )
    } else {
        let n = out.ckpt.params().iter().map(|p| p.numel()).sum();
        (Some(n), None, None)
    };
    run.write_manifest(&RunManifest {
        command: out.command.into(),
        stage: Some(out.ckpt.stage),
        config_hash: out.cfg.hash(),
        seed: out.ckpt.seed,
        steps: Some(out.ckpt.step),
        inputs,
        outputs,
        trainable_params: trainable,
        interpreter_params: interp,
        trainable_fraction: fraction,
        config: out.cfg.clone(),
    })?;
    eprintln!("run written to {}", run.path.display());
    Ok(())
}

fn pretrain(a: &PretrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.config.config)?;
    if let Some(s) = a.steps {
        cfg.pretrain.steps = s;
    }
    cfg.validate()?;
    let data = load_data(&a.data)?;
    let run = RunDir::create(&a.out.runs_dir, &a.out.run)?;
    let ckpt = pretrain_all(&cfg, &data, a.seed)?;
    for (id, ap) in &ckpt.metrics.baseline_ap50 {
        eprintln!("{id}: validation AP@0.5 {ap:.4}");
    }
    finish_run(
        &run,
        RunOutput {
            command: "pretrain",
            config_path: &a.config.config,
            cfg: &cfg,
            data_path: &a.data,
            base: None,
            ckpt: &ckpt,
        },
    )
}

/// Train to completion, printing the mean loss every `LOG_EVERY` steps.
fn train_logged(ckpt: &mut Checkpoint, data: &Dataset, cache: &mut FeatureCache) -> Result<()> {
    while ckpt.step < ckpt.total_steps {
        let from = ckpt.step;
        train(ckpt, data, cache, from + LOG_EVERY)?;
        let rows = &ckpt.metrics.loss_log[ckpt.metrics.loss_log.len() - (ckpt.step - from)..];
        let mean = rows.iter().map(|r| r.total).sum::<f64>() / rows.len() as f64;
        eprintln!(
            "step {}/{}: mean loss {mean:.4}",
            ckpt.step, ckpt.total_steps
        );
    }
    Ok(())
}

fn phase1(a: &Phase1Args) -> Result<()> {
    let mut cfg = load_config(&a.config.config)?;
    if let Some(s) = a.steps {
        cfg.phase1.steps = s;
    }
    if let Some(ad) = a.channel_adapter {
        cfg.interpreter.channel_adapter = match ad {
            AdapterArg::Matmul => ChannelAdapter::Matmul,
            AdapterArg::Conv => ChannelAdapter::Conv,
        };
    }
    cfg.interpreter.normalize_qk |= a.normalize_qk;
    cfg.validate()?;
    let data = load_data(&a.data)?;
    let (base, pre) = load_base(&a.from)?;
    let run = RunDir::create(&a.out.runs_dir, &a.out.run)?;
    let mut ckpt = init_phase1(&pre, &cfg, &data, a.seed)?;
    train_logged(&mut ckpt, &data, &mut FeatureCache::new())?;
    finish_run(
        &run,
        RunOutput {
            command: "phase1",
            config_path: &a.config.config,
            cfg: &cfg,
            data_path: &a.data,
            base: Some(&base),
            ckpt: &ckpt,
        },
    )
}

fn phase2_config(
    cfg: &mut Config,
    init: Option<PromptInitArg>,
    rank: Option<usize>,
    depth: Option<usize>,
) {
    if let Some(p) = init {
        cfg.phase2.prompt_init = match p {
            PromptInitArg::Sampling => PromptInit::Sampling,
            PromptInitArg::Lowrank => PromptInit::Lowrank,
        };
    }
    cfg.phase2.rank = rank.unwrap_or(cfg.phase2.rank);
    cfg.phase2.depth_factor = depth.unwrap_or(cfg.phase2.depth_factor);
}

fn phase2(a: &Phase2Args) -> Result<()> {
    let mut cfg = load_config(&a.config.config)?;
    if let Some(s) = a.steps {
        cfg.phase2.steps = s;
    }
    phase2_config(&mut cfg, a.prompt_init, a.rank, a.depth_factor);
    cfg.validate()?;
    let data = load_data(&a.data)?;
    let (base, p1) = load_base(&a.from)?;
    let run = RunDir::create(&a.out.runs_dir, &a.out.run)?;
    let mut ckpt = init_phase2(&p1, &cfg, &data, a.seed)?;
    train_logged(&mut ckpt, &data, &mut FeatureCache::new())?;
    finish_run(
        &run,
        RunOutput {
            command: "phase2",
            config_path: &a.config.config,
            cfg: &cfg,
            data_path: &a.data,
            base: Some(&base),
            ckpt: &ckpt,
        },
    )
}

fn default_neighbor(ckpt: &Checkpoint) -> String {
    match ckpt.stage {
        Stage::Phase2 => ckpt.config.roles.phase2_neighbor.clone(),
        _ => ckpt
            .config
            .roles
            .phase1_neighbors
            .first()
            .cloned()
            .unwrap_or_default(),
    }
}

fn eval(a: &EvalArgs) -> Result<()> {
    let (run, ckpt) = load_base(&a.run)?;
    let manifest = run.manifest()?;
    if ckpt.config_hash() != manifest.config_hash {
        bail!(
            "checkpoint config hash {} does not match manifest {}",
            ckpt.config_hash(),
            manifest.config_hash
        );
    }
    let data_path = match &a.data {
        Some(p) => p.clone(),
        None => {
            let rec = manifest
                .input("data")
                .context("manifest records no dataset; pass --data")?;
            let now = FileRecord::of("data", &rec.path)?;
            if now.hash != rec.hash {
                bail!(
                    "dataset {} changed since the run (hash {} vs recorded {})",
                    rec.path.display(),
                    now.hash,
                    rec.hash
                );
            }
            rec.path.clone()
        }
    };
    let data = load_data(&data_path)?;
    let split = match a.split {
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    };
    let scenes = data.split(split);
    let neighbor = a
        .neighbor
        .clone()
        .unwrap_or_else(|| default_neighbor(&ckpt));
    let modes: Vec<EvalMode> = match a.mode {
        ModeArg::Collab => vec![EvalMode::Collab],
        ModeArg::EgoOnly => vec![EvalMode::EgoOnly],
        ModeArg::NoInterp => vec![EvalMode::NoInterp],
        ModeArg::All if ckpt.model.is_none() => vec![EvalMode::EgoOnly, EvalMode::NoInterp],
        ModeArg::All => EvalMode::ALL.to_vec(),
    };
    let dir = run.file(EVAL_DIR);
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let mut cache = FeatureCache::new();
    for mode in modes {
        let r = evaluate_checkpoint(&ckpt, &neighbor, &scenes, mode, &mut cache)?;
        let json = serde_json::to_string_pretty(&r)?;
        println!("{}", serde_json::to_string(&r)?);
        let split_tag = match split {
            Split::Test => "",
            _ => "_val",
        };
        let path = dir.join(format!("{}_{}{split_tag}.json", r.scenario, mode.as_str()));
        if path.exists() {
            let old = fs::read_to_string(&path)?;
            if old != json {
                bail!(
                    "{} exists with different metrics; evaluation did not reproduce",
                    path.display()
                );
            }
            eprintln!("{} reproduced", path.display());
        } else {
            write_new(&path, json.as_bytes())?;
        }
    }
    Ok(())
}

/// Evaluations stored under a run directory, sorted by file name.
pub fn stored_evals(run: &RunDir) -> Result<Vec<EvalResult>> {
    let dir = run.file(EVAL_DIR);
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut paths: Vec<_> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text).with_context(|| format!("malformed {}", p.display()))
        })
        .collect()
}

/// Markdown table of every stored evaluation of `runs`.
pub fn report_table(runs: &[RunDir]) -> Result<String> {
    let mut out = String::from("| run | scenario | mode | AP@0.5 | AP@0.7 | trainable params |\n|---|---|---|---|---|---|\n");
    for run in runs {
        let m = run.manifest()?;
        let name = run
            .path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let trainable = m
            .trainable_params
            .map(|t| t.to_string())
            .unwrap_or_else(|| "-".into());
        for r in stored_evals(run)? {
            writeln!(
                out,
                "| {name} | {} | {} | {:.4} | {:.4} | {trainable} |",
                r.scenario,
                r.mode.as_str(),
                r.ap50,
                r.ap70
            )?;
        }
    }
    Ok(out)
}

fn report(a: &ReportArgs) -> Result<()> {
    let runs = a
        .runs
        .iter()
        .map(|p| RunDir::open(p))
        .collect::<Result<Vec<_>>>()?;
    print!("{}", report_table(&runs)?);
    Ok(())
}

pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_HEADER: &str = "rank,depth_factor,trainable_params,ap50,ap70";

fn sweep_rank(a: &SweepArgs) -> Result<()> {
    let mut cfg = load_config(&a.config.config)?;
    if let Some(s) = a.steps {
        cfg.phase2.steps = s;
    }
    cfg.validate()?;
    let data = load_data(&a.data)?;
    let (base, p1) = load_base(&a.from)?;
    let run = RunDir::create(&a.out.runs_dir, &a.out.run)?;
    let test = data.split(Split::Test);
    let mut cache = FeatureCache::new();
    let mut csv = format!("{SWEEP_HEADER}\n");
    for &(r, t) in &cfg.sweep.grid {
        let mut c = cfg.clone();
        phase2_config(&mut c, Some(PromptInitArg::Lowrank), Some(r), Some(t));
        let mut ckpt = init_phase2(&p1, &c, &data, a.seed)?;
        let total = ckpt.total_steps;
        train(&mut ckpt, &data, &mut cache, total)?;
        let trainable = trainable_param_report(&ckpt).trainable;
        let e = evaluate_checkpoint(
            &ckpt,
            &c.roles.phase2_neighbor,
            &test,
            EvalMode::Collab,
            &mut cache,
        )?;
        eprintln!("R={r} T={t}: {trainable} trainable, AP@0.5 {:.4}", e.ap50);
        writeln!(csv, "{r},{t},{trainable},{},{}", e.ap50, e.ap70)?;
    }
    write_new(&run.file(SWEEP_CSV), csv.as_bytes())?;
    print!("{csv}");
    run.write_manifest(&RunManifest {
        command: "sweep-rank".into(),
        stage: None,
        config_hash: cfg.hash(),
        seed: a.seed,
        steps: Some(cfg.phase2.steps),
        inputs: vec![
            FileRecord::of("config", &a.config.config)?,
            FileRecord::of("data", &a.data)?,
            FileRecord::of("base_checkpoint", &base.checkpoint())?,
        ],
        outputs: vec![FileRecord::of("sweep", &run.file(SWEEP_CSV))?],
        trainable_params: None,
        interpreter_params: None,
        trainable_fraction: None,
        config: cfg,
    })
}
