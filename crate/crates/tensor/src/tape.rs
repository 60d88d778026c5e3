use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Maps the gradient flowing into an op's output to gradients for each of
/// its inputs (`None` where an input receives nothing).
pub(crate) type BackwardFn = Box<dyn Fn(&[f32]) -> Vec<Option<Vec<f32>>>>;

struct Node {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn>,
    is_leaf: bool,
}

#[derive(Default)]
struct TapeInner {
    nodes: RefCell<Vec<Node>>,
    retained: RefCell<HashSet<usize>>,
}

/// Records operations for reverse-mode differentiation.
///
/// Cloning a tape yields another handle to the same recording.
#[derive(Clone, Default)]
pub struct Tape(Rc<TapeInner>);

#[derive(Clone)]
pub(crate) struct NodeRef {
    pub tape: Tape,
    pub id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn same_as(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub(crate) fn push(
        &self,
        parents: Vec<Option<usize>>,
        backward: Option<BackwardFn>,
        is_leaf: bool,
    ) -> usize {
        let mut nodes = self.0.nodes.borrow_mut();
        nodes.push(Node {
            parents,
            backward,
            is_leaf,
        });
        nodes.len() - 1
    }

    /// Registers `t` as a differentiable leaf on this tape. The returned
    /// tensor shares `t`'s buffer.
    pub fn leaf(&self, t: Tensor) -> Tensor {
        let id = self.push(Vec::new(), None, true);
        t.detach().with_node(NodeRef {
            tape: self.clone(),
            id,
        })
    }

    /// Keeps the gradient of an intermediate tensor in the result of
    /// [`Tape::backward`].
    pub fn retain_grad(&self, t: &Tensor) {
        if let Some(id) = t.node_id() {
            self.0.retained.borrow_mut().insert(id);
        }
    }

    pub fn len(&self) -> usize {
        self.0.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if loss.len() != 1 {
            return Err(TensorError::NonScalarLoss(loss.shape().to_vec()));
        }
        let root = match &loss.node {
            Some(n) if n.tape.same_as(self) => n.id,
            _ => return Err(TensorError::NotRecorded),
        };
        let nodes = self.0.nodes.borrow();
        let retained = self.0.retained.borrow();
        let mut grads: Vec<Option<Vec<f32>>> = Vec::with_capacity(root + 1);
        grads.resize_with(root + 1, || None);
        grads[root] = Some(vec![1.0]);
        let mut kept = HashMap::new();

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if let Some(backward) = &node.backward {
                let parent_grads = backward(&g);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (parent, pg) in node.parents.iter().zip(parent_grads) {
                    let (Some(p), Some(pg)) = (parent, pg) else {
                        continue;
                    };
                    match &mut grads[*p] {
                        Some(acc) => {
                            for (a, v) in acc.iter_mut().zip(&pg) {
                                *a += v;
                            }
                        }
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            if node.is_leaf || retained.contains(&id) {
                kept.insert(id, g);
            }
        }
        Ok(Gradients { grads: kept })
    }
}

/// Gradients of leaves (and retained intermediates) after a backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<usize, Vec<f32>>,
}

impl Gradients {
    /// Gradient of `t`, or `None` when it did not influence the loss.
    pub fn get(&self, t: &Tensor) -> Option<&[f32]> {
        t.node_id()
            .and_then(|id| self.grads.get(&id))
            .map(|v| v.as_slice())
    }

    /// Removes and returns the gradient of `t`.
    pub fn take(&mut self, t: &Tensor) -> Option<Vec<f32>> {
        t.node_id().and_then(|id| self.grads.remove(&id))
    }

    /// Gradient of `t`, or zeros of matching length when it did not
    /// influence the loss.
    pub fn get_or_zeros(&self, t: &Tensor) -> Vec<f32> {
        self.get(t)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; t.len()])
    }
}
