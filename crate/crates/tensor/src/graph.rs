use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::{Precision, Tensor};

/// Computes parent gradients from the output gradient.
///
/// The second argument flags which parents need a gradient; entries for the
/// others may be `None`.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// A reverse-mode computation tape.
///
/// Nodes are appended in evaluation order, so the tape is always
/// topologically sorted. A graph is single-threaded; build a fresh one per
/// forward pass.
pub struct Graph {
    precision: Precision,
    nodes: RefCell<Vec<Node>>,
    params: RefCell<Vec<(String, usize)>>,
    param_index: RefCell<HashMap<String, usize>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Self {
            precision,
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(Vec::new()),
            param_index: RefCell::new(HashMap::new()),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let value = value.rounded(self.precision);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, false)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, true)
    }

    /// Bring a stored parameter onto the tape. Repeated calls with the same
    /// name return the same node.
    pub fn param(&self, store: &ParamStore, name: &str) -> Result<Var<'_>> {
        if let Some(&id) = self.param_index.borrow().get(name) {
            return Ok(Var { graph: self, id });
        }
        let p = store
            .get(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))?;
        let var = self.push_leaf(p.value.clone(), p.requires_grad);
        self.param_index.borrow_mut().insert(name.to_string(), var.id);
        self.params.borrow_mut().push((name.to_string(), var.id));
        Ok(var)
    }

    /// Append an op result. `make_backward` is only invoked when some parent
    /// requires a gradient.
    pub(crate) fn push_op<F>(&self, mut value: Vec<f64>, shape: Vec<usize>, parents: &[Var<'_>], make_backward: F) -> Var<'_>
    where
        F: FnOnce() -> BackwardFn,
    {
        self.precision.round_slice(&mut value);
        let parent_ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parent_ids.iter().any(|&p| nodes[p].requires_grad);
        let backward = requires_grad.then(make_backward);
        nodes.push(Node {
            value: Rc::new(Tensor::from_parts(shape, value)),
            parents: parent_ids,
            backward,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse-mode sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss.id].value;
        if loss_value.numel() != 1 {
            return Err(TensorError::shape(
                "backward",
                format!("loss must have one element, got shape {:?}", loss_value.shape()),
            ));
        }
        if !loss_value.item().is_finite() {
            return Err(TensorError::Evaluation(format!(
                "non-finite loss {}",
                loss_value.item()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g_out) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&g_out, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, g), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(mut g), true) = (g, need) else {
                    continue;
                };
                debug_assert_eq!(g.len(), nodes[p].value.numel());
                match &mut grads[p] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += b;
                        }
                        self.precision.round_slice(acc);
                    }
                    slot @ None => {
                        self.precision.round_slice(&mut g);
                        *slot = Some(g);
                    }
                }
            }
        }
        let tensors = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| g.map(|g| Tensor::from_parts(nodes[id].value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients {
            grads: tensors,
            params: self.params.borrow().clone(),
        })
    }
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("precision", &self.precision)
            .field("nodes", &self.len())
            .finish()
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Single-element value.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub(crate) fn check_same_graph(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "vars belong to different graphs"
        );
    }
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, usize)>,
}

impl Gradients {
    /// Gradient for a leaf. Returns `None` for intermediate nodes, constants,
    /// and leaves the loss does not depend on.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// `(name, grad)` for every parameter that received a gradient.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(name, id)| self.grads.get(*id).and_then(Option::as_ref).map(|g| (name.as_str(), g)))
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, id)| self.grads.get(*id).and_then(Option::as_ref))
    }
}
