use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::params::{ParamId, ParamStore};
use crate::{Scalar, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward function of a recorded op: maps the output gradient to one
/// optional gradient per parent, in parent order.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Arc<Tensor<T>>,
    parents: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Reverse-mode tape.
///
/// A graph lives for one forward/backward pass. Ops append nodes; gradients
/// flow back in reverse insertion order. When gradient recording is disabled
/// no backward closures are built.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
    bound_params: RefCell<HashMap<ParamId, Var>>,
    buffer_updates: RefCell<Vec<(ParamId, Tensor<T>)>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self::with_grad(true)
    }

    pub fn no_grad() -> Self {
        Self::with_grad(false)
    }

    fn with_grad(grad_enabled: bool) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled,
            bound_params: RefCell::new(HashMap::new()),
            buffer_updates: RefCell::new(Vec::new()),
        }
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

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push_node(Arc::new(value), Vec::new(), None, false)
    }

    /// Leaf whose gradient is collected by [`Graph::backward`].
    pub fn input(&self, value: Tensor<T>) -> Var {
        let rg = self.grad_enabled;
        self.push_node(Arc::new(value), Vec::new(), None, rg)
    }

    /// Bind a stored parameter as a leaf. Repeated binds of the same id
    /// return the same variable.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound_params.borrow().get(&id) {
            return v;
        }
        let rg = self.grad_enabled && store.is_trainable(id);
        let v = self.push_node(store.value_arc(id), Vec::new(), None, rg);
        self.bound_params.borrow_mut().insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn is_meta(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].value.is_meta()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// True when an op over `parents` must record a backward closure.
    pub fn tracks(&self, parents: &[Var]) -> bool {
        self.grad_enabled && {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].requires_grad)
        }
    }

    /// Record an op result. `backward` is only called when some parent
    /// requires a gradient; build it lazily via [`Graph::tracks`] when it is
    /// expensive to construct.
    pub fn record(&self, value: Arc<Tensor<T>>, parents: &[Var], backward: BackwardFn<T>) -> Var {
        let rg = self.tracks(parents);
        if rg {
            self.push_node(value, parents.to_vec(), Some(backward), true)
        } else {
            self.push_node(value, Vec::new(), None, false)
        }
    }

    /// Record a result that carries no gradient path.
    pub fn record_constant(&self, value: Arc<Tensor<T>>) -> Var {
        self.push_node(value, Vec::new(), None, false)
    }

    fn push_node(
        &self,
        value: Arc<Tensor<T>>,
        parents: Vec<Var>,
        backward: Option<BackwardFn<T>>,
        requires_grad: bool,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, parents, backward, requires_grad });
        Var(nodes.len() - 1)
    }

    /// Queue a new value for a non-trainable buffer (batch-norm running
    /// statistics). The owner applies queued updates after the step.
    pub fn stage_buffer_update(&self, id: ParamId, value: Tensor<T>) {
        self.buffer_updates.borrow_mut().push((id, value));
    }

    pub fn take_buffer_updates(&self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.buffer_updates.borrow_mut())
    }

    /// Backpropagate from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        assert_eq!(root.value.numel(), 1, "backward needs a scalar, got {:?}", root.value.shape());
        let mut pending: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        let mut leaves = HashMap::new();
        if !root.requires_grad {
            return Gradients { grads: leaves, params: self.bound_params.borrow().clone() };
        }
        pending[loss.0] = Some(Tensor::ones(root.value.shape()));
        for i in (0..=loss.0).rev() {
            let Some(grad) = pending[i].take() else { continue };
            let node = &nodes[i];
            match &node.backward {
                None => {
                    if node.requires_grad {
                        leaves.insert(i, grad);
                    }
                }
                Some(f) => {
                    let parent_grads = f(&grad);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (p, g) in node.parents.iter().zip(parent_grads) {
                        let Some(g) = g else { continue };
                        if !nodes[p.0].requires_grad {
                            continue;
                        }
                        debug_assert_eq!(g.shape(), nodes[p.0].value.shape());
                        match &mut pending[p.0] {
                            Some(acc) => acc.add_assign(&g),
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
            }
        }
        Gradients { grads: leaves, params: self.bound_params.borrow().clone() }
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: HashMap<usize, Tensor<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v.0)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|v| self.grads.get(&v.0))
    }

    /// Gradients of every bound parameter that received one.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|(&id, v)| self.grads.get(&v.0).map(|g| (id, g)))
    }
}
