use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded operation.
///
/// Returns one entry per input; `None` means "no gradient for this input".
/// `needs[i]` tells whether input `i` wants a gradient at all.
pub trait Backward: Send + Sync {
    fn backward(
        &self,
        inputs: &[&Tensor],
        needs: &[bool],
        output: &Tensor,
        grad: &Tensor,
    ) -> Vec<Option<Tensor>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward>>,
    needs_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Several losses may be differentiated against one tape; each call to
/// [`Tape::backward`] only visits nodes reachable from its seeds, so values
/// inserted with [`Tape::constant`] or [`Tape::detach`] act as stop-gradient
/// boundaries between components.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies `v` into a fresh constant node.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn push(&mut self, value: Tensor, inputs: Vec<Var>, op: Box<dyn Backward>) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            inputs,
            op: needs_grad.then_some(op),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Back-propagates the given output gradients and returns the gradients
    /// of every reachable leaf.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let Some(top) = seeds.iter().map(|(v, _)| v.0).max() else {
            return Ok(Gradients { grads: Vec::new() });
        };
        let mut grads: Vec<Option<Tensor>> = vec![None; top + 1];
        for (v, g) in seeds {
            let node = &self.nodes[v.0];
            if node.value.shape() != g.shape() {
                return Err(Error::invalid(format!(
                    "seed gradient shape {:?} does not match value shape {:?}",
                    g.shape(),
                    node.value.shape()
                )));
            }
            accumulate(&mut grads[v.0], g.clone());
        }
        for idx in (0..=top).rev() {
            let node = &self.nodes[idx];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(g) = grads[idx].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].needs_grad).collect();
            let input_grads = op.backward(&inputs, &needs, &node.value, &g);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (v, ig) in node.inputs.iter().zip(input_grads) {
                if let Some(ig) = ig {
                    if self.nodes[v.0].needs_grad {
                        accumulate(&mut grads[v.0], ig);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{add, relu};

    #[test]
    fn constants_stop_gradients() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let b = tape.param(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let bd = tape.detach(b);
        let s = add(&mut tape, a, bd).unwrap();
        let r = relu(&mut tape, s);
        let grads = tape
            .backward(&[(r, Tensor::new(vec![2], vec![1.0, 1.0]).unwrap())])
            .unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 1.0]);
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::new(vec![1], vec![2.0]).unwrap());
        let s = add(&mut tape, a, a).unwrap();
        let grads = tape.backward(&[(s, Tensor::scalar(1.0))]).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[2.0]);
    }
}
