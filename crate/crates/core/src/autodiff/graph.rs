use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::tensor::Tensor;

/// Receives the output gradient and a mask of which parents need a gradient;
/// returns one entry per parent (`None` where masked off).
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn>,
}

/// A value living on a [`Graph`]. Cloning is cheap (shared value).
///
/// Vars that do not depend on any trainable leaf carry no node and are
/// treated as constants by the backward pass.
#[derive(Clone)]
pub struct Var {
    value: Rc<Tensor>,
    node: Option<usize>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub(crate) fn rc(&self) -> Rc<Tensor> {
        Rc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn node_id(&self) -> Option<usize> {
        self.node
    }
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("shape", &self.value.shape()).field("node", &self.node).finish()
    }
}

/// Reverse-mode tape.
///
/// In no-grad mode nothing is recorded, so intermediate activations are
/// freed as soon as the last `Var` referencing them is dropped.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), grad_enabled: true }
    }

    pub fn inference() -> Self {
        Self { nodes: RefCell::new(Vec::new()), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable leaf.
    pub fn leaf(&self, value: Tensor) -> Var {
        if !self.grad_enabled {
            return self.constant(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { parents: Vec::new(), backward: None });
        Var { value: Rc::new(value), node: Some(nodes.len() - 1) }
    }

    pub fn constant(&self, value: Tensor) -> Var {
        Var { value: Rc::new(value), node: None }
    }

    pub(crate) fn record(
        &self,
        value: Tensor,
        parents: &[&Var],
        backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Var {
        let tracked = self.grad_enabled && parents.iter().any(|p| p.node.is_some());
        if !tracked {
            return Var { value: Rc::new(value), node: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: parents.iter().map(|p| p.node).collect(),
            backward: Some(Box::new(backward)),
        });
        Var { value: Rc::new(value), node: Some(nodes.len() - 1) }
    }

    /// Backpropagates from a scalar `loss` with seed gradient 1.
    pub fn backward(&self, loss: &Var) -> Gradients {
        assert_eq!(loss.value.len(), 1, "backward() needs a scalar loss");
        self.backward_with(loss, Tensor::full(loss.shape().to_vec(), 1.0))
    }

    /// Backpropagates an arbitrary output cotangent.
    pub fn backward_with(&self, output: &Var, seed: Tensor) -> Gradients {
        assert_eq!(seed.shape(), output.shape(), "seed gradient shape mismatch");
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        let Some(root) = output.node else {
            return Gradients { grads: HashMap::new() };
        };
        grads[root] = Some(seed);
        let mut leaves = HashMap::new();
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.backward {
                None => {
                    leaves.insert(id, g);
                }
                Some(backward) => {
                    let mask: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
                    let parent_grads = backward(&g, &mask);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (parent, pg) in node.parents.iter().zip(parent_grads) {
                        if let (Some(pid), Some(pg)) = (parent, pg) {
                            match &mut grads[*pid] {
                                Some(acc) => acc.add_assign(&pg),
                                slot @ None => *slot = Some(pg),
                            }
                        }
                    }
                }
            }
        }
        Gradients { grads: leaves }
    }
}

/// Gradients of leaves reached by a backward pass.
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        var.node.and_then(|id| self.grads.get(&id))
    }

    /// Gradient for `var`, or zeros when it did not influence the output.
    pub fn get_or_zeros(&self, var: &Var) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.shape().to_vec()))
    }
}
