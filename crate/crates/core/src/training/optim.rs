use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::numerics::{Gradients, ParamVisitor, Tape};

/// Adaptive-moment optimizer. Moment buffers are created lazily, only for
/// parameters that actually received a gradient, and keyed by name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Apply one update to every trainable parameter of `models` that is
    /// bound on `tape` and has a gradient.
    pub fn step(&mut self, tape: &Tape, grads: &Gradients, models: &mut [&mut dyn ParamVisitor]) {
        let bound: HashMap<&str, _> = tape
            .bindings()
            .iter()
            .map(|(n, v)| (n.as_str(), *v))
            .collect();
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (lr, eps) = (self.lr, self.eps);
        let (ms, vs) = (&mut self.m, &mut self.v);
        for model in models.iter_mut() {
            model.visit_params_mut(&mut |p| {
                if p.frozen {
                    return;
                }
                let Some(g) = bound.get(p.name.as_str()).and_then(|v| grads.wrt(*v)) else {
                    return;
                };
                let n = g.len();
                let m = ms.entry(p.name.clone()).or_insert_with(|| vec![0.0; n]);
                let v = vs.entry(p.name.clone()).or_insert_with(|| vec![0.0; n]);
                for (((w, &gi), mi), vi) in p
                    .tensor
                    .data_mut()
                    .iter_mut()
                    .zip(g)
                    .zip(m.iter_mut())
                    .zip(v.iter_mut())
                {
                    *mi = b1 * *mi + (1.0 - b1) * gi;
                    *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                    *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                }
            });
        }
    }
}
