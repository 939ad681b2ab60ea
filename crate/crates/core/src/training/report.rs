//! Parameter accounting and freeze-integrity fingerprints.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::freeze::{FreezeLedger, Phase};
use crate::config::sha256_hex;
use crate::numerics::{ParamVisitor, Parameter};

/// Dense specific prompt `[C2×H1×W1]`.
pub fn dense_prompt_count(c2: usize, h1: usize, w1: usize) -> usize {
    c2 * h1 * w1
}

/// Resizer 1×1 convolution `[C1×C2]`.
pub fn resizer_count(c1: usize, c2: usize) -> usize {
    c1 * c2
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamRow {
    pub name: String,
    pub count: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub phase: Phase,
    pub rows: Vec<ParamRow>,
    pub trainable: usize,
    pub frozen: usize,
    /// Interpreter network plus prompts, excluding encoders, heads and the
    /// discriminator.
    pub interpreter_total: usize,
    pub interpreter_trainable: usize,
}

impl ParamReport {
    /// Trainable share of the interpreter parameters.
    pub fn interpreter_fraction(&self) -> f64 {
        self.interpreter_trainable as f64 / self.interpreter_total as f64
    }

    pub fn count_of(&self, name: &str) -> Option<usize> {
        self.rows.iter().find(|r| r.name == name).map(|r| r.count)
    }
}

fn is_interpreter(name: &str) -> bool {
    name.starts_with("interpreter.")
}

/// Classify every parameter of `models` by `ledger` for `phase`.
pub fn param_report(
    models: &[&dyn ParamVisitor],
    ledger: &FreezeLedger,
    phase: Phase,
) -> ParamReport {
    let mut rows = Vec::new();
    for m in models {
        m.visit_params(&mut |p| {
            rows.push(ParamRow {
                name: p.name.clone(),
                count: p.numel(),
                trainable: ledger.trainable(&p.name, phase),
            })
        });
    }
    let sum = |f: &dyn Fn(&ParamRow) -> bool| {
        rows.iter().filter(|r| f(r)).map(|r| r.count).sum::<usize>()
    };
    ParamReport {
        phase,
        trainable: sum(&|r| r.trainable),
        frozen: sum(&|r| !r.trainable),
        interpreter_total: sum(&|r| is_interpreter(&r.name)),
        interpreter_trainable: sum(&|r| is_interpreter(&r.name) && r.trainable),
        rows,
    }
}

/// Report for a checkpoint in the phase it was trained in (Phase I for
/// pretrain checkpoints, where nothing is trainable).
pub fn trainable_param_report(ckpt: &Checkpoint) -> ParamReport {
    let phase = match ckpt.stage {
        super::Stage::Phase2 => Phase::Phase2,
        _ => Phase::Phase1,
    };
    let mut models: Vec<&dyn ParamVisitor> = vec![&ckpt.zoo];
    if let Some(m) = &ckpt.model {
        models.push(m);
    }
    param_report(&models, &ckpt.ledger, phase)
}

fn hash_params<'a>(params: impl Iterator<Item = &'a Parameter>) -> String {
    let mut bytes = Vec::new();
    for p in params {
        bytes.extend_from_slice(p.name.as_bytes());
        bytes.push(0);
        bytes.extend_from_slice(&p.tensor.to_le_bytes());
    }
    sha256_hex(&bytes)
}

/// SHA-256 over the names and bytes of every parameter the ledger freezes in
/// `phase`, in storage order.
pub fn frozen_fingerprint(ckpt: &Checkpoint, phase: Phase) -> String {
    hash_params(
        ckpt.params()
            .into_iter()
            .filter(|p| !ckpt.ledger.trainable(&p.name, phase)),
    )
}

/// Names whose bytes differ between two checkpoints, plus names present in
/// only one of them.
pub fn changed_params(a: &Checkpoint, b: &Checkpoint) -> BTreeSet<String> {
    let index = |c: &Checkpoint| {
        c.params()
            .into_iter()
            .map(|p| (p.name.clone(), p.tensor.to_le_bytes()))
            .collect::<BTreeMap<_, _>>()
    };
    let (ia, ib) = (index(a), index(b));
    let mut out = BTreeSet::new();
    for (name, bytes) in &ia {
        if ib.get(name) != Some(bytes) {
            out.insert(name.clone());
        }
    }
    out.extend(ib.keys().filter(|n| !ia.contains_key(*n)).cloned());
    out
}
