//! Reverse-mode differentiation over a recorded list of tensor operations.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A recorded operation. Forward values are computed by the caller before the
/// primitive is pushed; the primitive keeps whatever it needs for `backward`.
pub trait Primitive {
    fn name(&self) -> &'static str;

    /// Gradients w.r.t. each input given the output gradient. Only inputs with
    /// `needs[i]` set have to be returned.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let _ = (inputs, output, grad, needs);
        Err(Error::MissingAdjoint(self.name().to_string()))
    }
}

struct Node {
    value: Tensor,
    op: Option<Box<dyn Primitive>>,
    inputs: Vec<usize>,
    requires_grad: bool,
}

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

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: None,
            inputs: Vec::new(),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A leaf whose gradient is collected by [`Tape::backward`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records `value = op(inputs)`. If no input needs a gradient the result
    /// is stored as a constant and `op` is dropped.
    pub fn push(&mut self, op: impl Primitive + 'static, inputs: &[Var], value: Tensor) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if !requires_grad {
            return self.constant(value);
        }
        self.nodes.push(Node {
            value,
            op: Some(Box::new(op)),
            inputs: inputs.iter().map(|v| v.0).collect(),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradients of the scalar `root` w.r.t. every recorded value. Nodes are
    /// visited in reverse recording order, so accumulation is deterministic.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        let rv = &self.nodes[root.0].value;
        if rv.len() != 1 {
            return Err(Error::shape("backward root", &[1], rv.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::filled(rv.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(op) = &node.op {
                let inputs: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
                let needs: Vec<bool> = node.inputs.iter().map(|&j| self.nodes[j].requires_grad).collect();
                let back = op.backward(&inputs, &node.value, &g, &needs)?;
                if back.len() != node.inputs.len() {
                    return Err(Error::InvalidArgument(format!(
                        "{} returned {} gradients for {} inputs",
                        op.name(),
                        back.len(),
                        node.inputs.len()
                    )));
                }
                for ((&j, gj), need) in node.inputs.iter().zip(back).zip(needs) {
                    let Some(gj) = gj else { continue };
                    if !need {
                        continue;
                    }
                    if gj.shape() != self.nodes[j].value.shape() {
                        return Err(Error::shape(op.name(), self.nodes[j].value.shape(), gj.shape()));
                    }
                    match &mut grads[j] {
                        Some(acc) => acc.add_assign(&gj),
                        slot => *slot = Some(gj),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Grads(grads))
    }
}

/// Result of [`Tape::backward`].
pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    /// Gradient of the root w.r.t. `v`, or `None` if `v` does not influence it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0.get_mut(v.0).and_then(Option::take)
    }
}
