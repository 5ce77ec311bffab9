//! Graph nodes and reverse-mode accumulation.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{ArrayD, IxDyn};

use crate::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Backward rule of one node: receives the node's output value and the
/// incoming gradient, returns one optional gradient per parent.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&ArrayD<T>, &ArrayD<T>) -> Vec<Option<ArrayD<T>>>>;

struct Node<T: Scalar> {
    id: u64,
    value: ArrayD<T>,
    requires_grad: bool,
    parents: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
}

/// A value in the computation graph.
///
/// Cloning is cheap (reference counted). Nodes only point at their parents,
/// so dropping the loss releases the whole graph.
pub struct Var<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Scalar> Var<T> {
    /// Leaf that participates in differentiation (parameters, probed inputs).
    pub fn leaf(value: ArrayD<T>) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: true,
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(value: ArrayD<T>) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
        }))
    }

    pub fn scalar(v: T) -> Self {
        Self::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub(crate) fn from_op(value: ArrayD<T>, parents: Vec<Var<T>>, backward: BackwardFn<T>) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if !requires_grad {
            return Self::constant(value);
        }
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            parents,
            backward: Some(backward),
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &ArrayD<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn ndim(&self) -> usize {
        self.0.value.ndim()
    }

    pub fn len(&self) -> usize {
        self.0.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.value.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape());
        *self.0.value.iter().next().expect("one element")
    }

    /// Reverse-mode sweep from this node, seeded with ones.
    ///
    /// Gradients are retained for leaves only.
    pub fn backward(&self) -> Gradients<T> {
        let seed = ArrayD::from_elem(self.0.value.raw_dim(), T::one());
        self.backward_with(seed)
    }

    pub fn backward_with(&self, seed: ArrayD<T>) -> Gradients<T> {
        let mut out = Gradients {
            map: HashMap::new(),
        };
        if !self.requires_grad() {
            return out;
        }
        let order = self.topo_order();
        let mut pending: HashMap<u64, ArrayD<T>> = HashMap::new();
        pending.insert(self.id(), seed);
        for node in order.iter().rev() {
            let Some(grad) = pending.remove(&node.id()) else {
                continue;
            };
            match &node.0.backward {
                None => {
                    out.map.insert(node.id(), grad);
                }
                Some(rule) => {
                    let parent_grads = rule(&node.0.value, &grad);
                    debug_assert_eq!(parent_grads.len(), node.0.parents.len());
                    for (parent, g) in node.0.parents.iter().zip(parent_grads) {
                        let Some(g) = g else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(g.shape(), parent.shape());
                        match pending.get_mut(&parent.id()) {
                            Some(acc) => *acc += &g,
                            None => {
                                pending.insert(parent.id(), g);
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Nodes reachable from `self` that require a gradient, parents first.
    fn topo_order(&self) -> Vec<Var<T>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Var<T>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            for p in node.0.parents.iter() {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

/// Leaf gradients from one backward sweep.
#[derive(Default)]
pub struct Gradients<T: Scalar> {
    map: HashMap<u64, ArrayD<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&ArrayD<T>> {
        self.map.get(&var.id())
    }

    /// Gradient of `var`, zeros if it did not influence the root.
    pub fn get_or_zeros(&self, var: &Var<T>) -> ArrayD<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(var.value().raw_dim()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|g| g.iter().all(|v| v.is_finite()))
    }
}
