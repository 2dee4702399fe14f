//! Named trainable parameters and their binding onto tapes.

use std::collections::HashMap;

use crate::numerics::NodeId;
use crate::{Tape, Tensor};

/// A named model parameter. Frozen params still participate in forward and
/// receive gradients on the tape; the optimizer never applies them.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param { name: name.into(), value, frozen: false }
    }
}

/// One forward pass worth of tape plus the param-name -> leaf binding, so a
/// parameter used several times maps to a single node and its gradient
/// accumulates in one place.
pub struct Graph {
    pub tape: Tape,
    bound: HashMap<String, NodeId>,
    consts: HashMap<(u8, usize), NodeId>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { tape: Tape::new(), bound: HashMap::new(), consts: HashMap::new() }
    }

    /// Leaf for a parameter, memoized by name.
    pub fn param(&mut self, p: &Param) -> NodeId {
        if let Some(&id) = self.bound.get(&p.name) {
            return id;
        }
        let id = self.tape.leaf(&p.value);
        self.bound.insert(p.name.clone(), id);
        id
    }

    /// Gradient for a bound parameter after `backward`; zeros if the param
    /// never influenced the loss.
    pub fn param_grad(&self, p: &Param) -> Vec<f64> {
        match self.bound.get(&p.name) {
            Some(&id) => self
                .tape
                .grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; p.value.numel()]),
            None => vec![0.0; p.value.numel()],
        }
    }

    pub fn is_bound(&self, name: &str) -> bool {
        self.bound.contains_key(name)
    }

    /// Constant all-ones row [1 x d], memoized.
    pub fn unit_gain(&mut self, d: usize) -> NodeId {
        if let Some(&id) = self.consts.get(&(1, d)) {
            return id;
        }
        let id = self.tape.leaf(&Tensor::ones(vec![d]));
        self.consts.insert((1, d), id);
        id
    }

    /// Constant all-zeros row [1 x d], memoized.
    pub fn zero_bias(&mut self, d: usize) -> NodeId {
        if let Some(&id) = self.consts.get(&(0, d)) {
            return id;
        }
        let id = self.tape.leaf(&Tensor::zeros(vec![d]));
        self.consts.insert((0, d), id);
        id
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_binds_once() {
        let p = Param::new("w", Tensor::scalar(2.0));
        let mut g = Graph::new();
        let a = g.param(&p);
        let b = g.param(&p);
        assert_eq!(a, b);
        assert_eq!(g.tape.len(), 1);
    }

    #[test]
    fn fan_out_grad_accumulates_on_single_leaf() {
        let p = Param::new("w", Tensor::scalar(3.0));
        let mut g = Graph::new();
        let a = g.param(&p);
        let b = g.param(&p);
        let y = g.tape.mul(a, b).unwrap();
        g.tape.backward(y).unwrap();
        assert_eq!(g.param_grad(&p), vec![6.0]);
    }
}
