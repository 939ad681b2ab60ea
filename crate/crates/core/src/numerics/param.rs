use super::Tensor;

/// A named, optionally frozen tensor owned by a model component.
///
/// Names are dotted paths (`interpreter.channel.wq`) and must be unique
/// within one model; the optimizer, freeze ledger and checkpoint format all
/// key on them.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub frozen: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Self {
            name: name.into(),
            tensor,
            frozen: false,
        }
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }
}

/// Anything that owns parameters.
pub trait ParamVisitor {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.numel());
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |p| names.push(p.name.clone()));
        names
    }

    fn set_frozen(&mut self, frozen: bool) {
        self.visit_params_mut(&mut |p| p.frozen = frozen);
    }
}
