//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and, when any
//! input requires a gradient, a backward rule. [`Graph::backward`] walks the
//! tape in reverse and accumulates gradients for every reachable node, so
//! intermediate activations (Grad-CAM taps) have gradients available too.

use super::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) trait Backward {
    /// Gradients with respect to each input. Entries for inputs whose
    /// `needs` flag is false may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward>>,
    requires_grad: bool,
}

/// Tape of recorded operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    track_all: bool,
    scope: String,
    fault: Option<String>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records gradients for every node, including ones that only depend on
    /// constant inputs. Needed when explaining a frozen network.
    pub fn tracking_all() -> Self {
        Graph {
            track_all: true,
            ..Self::default()
        }
    }

    pub fn set_scope(&mut self, scope: impl Into<String>) {
        self.scope = scope.into();
    }

    pub fn scope(&self) -> &str {
        &self.scope
    }

    /// Scope of the first operation that produced a non-finite value.
    pub fn fault(&self) -> Option<&str> {
        self.fault.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.check_finite(&value);
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            requires_grad: requires_grad || self.track_all,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input that never receives a gradient unless tracking all.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub(crate) fn push(&mut self, value: Tensor, inputs: Vec<Var>, op: Box<dyn Backward>) -> Var {
        self.check_finite(&value);
        let requires_grad = self.track_all || inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs,
            op: requires_grad.then_some(op),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check_finite(&mut self, value: &Tensor) {
        if self.fault.is_none() && !value.is_finite() {
            self.fault = Some(if self.scope.is_empty() {
                "<unscoped>".to_string()
            } else {
                self.scope.clone()
            });
        }
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Back-propagates `seed` (d loss / d root) through the tape.
    pub fn backward(&self, root: Var, seed: Tensor) -> Gradients {
        assert_eq!(
            seed.shape(),
            self.value(root).shape(),
            "seed gradient shape must match the root"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = &node.op else { continue };
            let Some(grad) = grads[idx].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let input_grads = op.backward(&inputs, &node.value, &grad, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for ((input, g), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let (Some(g), true) = (g, need) else { continue };
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[idx] = Some(grad);
        }
        Gradients { grads }
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}
