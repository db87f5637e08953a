//! Binds named model parameters onto a [`Tape`] for one forward pass.

use std::collections::HashMap;

use crate::autodiff::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Which parameters receive gradients.
#[derive(Clone, Debug, Default)]
pub enum Trainable {
    /// Inference: nothing is differentiated and nothing is recorded.
    #[default]
    Nothing,
    All,
    /// Parameters whose name starts with any of the prefixes.
    Prefixes(Vec<String>),
}

impl Trainable {
    pub fn includes(&self, name: &str) -> bool {
        match self {
            Trainable::Nothing => false,
            Trainable::All => true,
            Trainable::Prefixes(p) => p.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

pub struct Graph {
    pub tape: Tape,
    trainable: Trainable,
    bound: Vec<(String, Var)>,
}

impl Graph {
    pub fn new(trainable: Trainable) -> Self {
        let tape = match trainable {
            Trainable::Nothing => Tape::no_grad(),
            _ => Tape::new(),
        };
        Self {
            tape,
            trainable,
            bound: Vec::new(),
        }
    }

    pub fn inference() -> Self {
        Self::new(Trainable::Nothing)
    }

    /// Records `value` under `name`; trainable parameters become gradient leaves.
    pub fn param(&mut self, name: String, value: &Tensor) -> Var {
        let train = self.trainable.includes(&name);
        let var = self.tape.leaf(value.clone().with_requires_grad(train));
        if train {
            self.bound.push((name, var));
        }
        var
    }

    /// Backpropagates `loss` and returns gradients keyed by parameter name.
    pub fn param_grads(&self, loss: Var) -> crate::Result<HashMap<String, Vec<f32>>> {
        let mut grads: Gradients = self.tape.backward(loss)?;
        let mut out = HashMap::with_capacity(self.bound.len());
        for (name, var) in &self.bound {
            if let Some(g) = grads.take(*var) {
                match out.get_mut(name) {
                    Some(acc) => {
                        let acc: &mut Vec<f32> = acc;
                        acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                    }
                    None => {
                        out.insert(name.clone(), g);
                    }
                }
            }
        }
        Ok(out)
    }
}
