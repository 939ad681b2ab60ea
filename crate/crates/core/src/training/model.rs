use std::collections::BTreeMap;

use crate::detection::DetectionHead;
use crate::encoders::Encoder;
use crate::interpreter::{InterpreterNet, PromptSet};
use crate::losses::Discriminator;
use crate::numerics::{ParamVisitor, Parameter};

/// A frozen encoder with the detection head it was pretrained with.
#[derive(Clone, Debug, PartialEq)]
pub struct Agent {
    pub encoder: Encoder,
    pub head: DetectionHead,
}

impl ParamVisitor for Agent {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.encoder.visit_params(f);
        self.head.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.encoder.visit_params_mut(f);
        self.head.visit_params_mut(f);
    }
}

/// Pretrained agents keyed by encoder id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Zoo {
    pub agents: BTreeMap<String, Agent>,
}

impl Zoo {
    pub fn get(&self, id: &str) -> crate::Result<&Agent> {
        self.agents
            .get(id)
            .ok_or_else(|| crate::Error::Missing(format!("pretrained encoder `{id}`")))
    }
}

impl ParamVisitor for Zoo {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        for a in self.agents.values() {
            a.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        for a in self.agents.values_mut() {
            a.visit_params_mut(f);
        }
    }
}

/// Interpreter, prompts and discriminator.
#[derive(Clone, Debug, PartialEq)]
pub struct PolyInter {
    pub net: InterpreterNet,
    pub prompts: PromptSet,
    pub disc: Discriminator,
}

impl PolyInter {
    /// Parameters counted as "the interpreter": network and prompts, not the
    /// discriminator.
    pub fn interpreter_param_count(&self) -> usize {
        self.net.param_count() + self.prompts.param_count()
    }
}

impl ParamVisitor for PolyInter {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.net.visit_params(f);
        self.prompts.visit_params(f);
        self.disc.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.net.visit_params_mut(f);
        self.prompts.visit_params_mut(f);
        self.disc.visit_params_mut(f);
    }
}
