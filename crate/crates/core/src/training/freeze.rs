use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::numerics::ParamVisitor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Phase1,
    Phase2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeEntry {
    pub trainable_phase1: bool,
    pub trainable_phase2: bool,
}

impl FreezeEntry {
    pub fn trainable(&self, phase: Phase) -> bool {
        match phase {
            Phase::Phase1 => self.trainable_phase1,
            Phase::Phase2 => self.trainable_phase2,
        }
    }
}

/// Which parameters train in which phase, keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeLedger {
    pub entries: BTreeMap<String, FreezeEntry>,
}

/// Neighbor id owning a per-neighbor parameter (specific prompt or resizer).
pub fn neighbor_of(name: &str) -> Option<&str> {
    if let Some(rest) = name.strip_prefix("interpreter.prompt.specific.") {
        return Some(
            rest.strip_suffix(".u")
                .or_else(|| rest.strip_suffix(".v"))
                .unwrap_or(rest),
        );
    }
    name.strip_prefix("interpreter.resizer.")
        .and_then(|r| r.strip_suffix(".conv"))
}

impl FreezeLedger {
    /// Classify every parameter of `models`. Per-neighbor parameters of ids
    /// in `phase2_ids` train only in Phase II, all other per-neighbor
    /// parameters only in Phase I.
    pub fn classify(models: &[&dyn ParamVisitor], phase2_ids: &[&str]) -> Self {
        let mut entries = BTreeMap::new();
        for m in models {
            m.visit_params(&mut |p| {
                let e = if p.name.starts_with("encoder.") || p.name.starts_with("head.") {
                    FreezeEntry {
                        trainable_phase1: false,
                        trainable_phase2: false,
                    }
                } else if let Some(id) = neighbor_of(&p.name) {
                    let late = phase2_ids.contains(&id);
                    FreezeEntry {
                        trainable_phase1: !late,
                        trainable_phase2: late,
                    }
                } else {
                    FreezeEntry {
                        trainable_phase1: true,
                        trainable_phase2: false,
                    }
                };
                entries.insert(p.name.clone(), e);
            });
        }
        Self { entries }
    }

    pub fn trainable(&self, name: &str, phase: Phase) -> bool {
        self.entries.get(name).is_some_and(|e| e.trainable(phase))
    }

    /// Set every parameter's frozen flag for `phase`. Parameters missing from
    /// the ledger are frozen.
    pub fn apply(&self, phase: Phase, models: &mut [&mut dyn ParamVisitor]) {
        for m in models.iter_mut() {
            m.visit_params_mut(&mut |p| p.frozen = !self.trainable(&p.name, phase));
        }
    }
}
