use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use super::Tensor;
use crate::error::{Error, Result};
use crate::module::{ParamKind, Parameter};

/// Backward rule: receives the output gradient and, per parent, whether that
/// parent needs a gradient. Returns one optional gradient per parent.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    param: Option<String>,
}

/// Define-by-run record of a computation.
///
/// Nodes are appended in execution order, so every operand of node `i` has
/// an index below `i`. A tape supports exactly one backward sweep; build a
/// fresh tape per step.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    swept: Cell<bool>,
    attention_probe: RefCell<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("swept", &self.swept.get())
            .finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            swept: Cell::new(false),
            attention_probe: RefCell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push_leaf(t, t.requires_grad(), None)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.push_leaf(t, false, None)
    }

    /// Registers a named model parameter. Buffers and frozen weights are
    /// recorded as constants.
    pub fn param(&self, p: &Parameter) -> Var<'_> {
        let trainable = p.kind == ParamKind::Weight && p.tensor.requires_grad();
        self.push_leaf(&p.tensor, trainable, Some(p.name.clone()))
    }

    fn push_leaf(&self, t: &Tensor, requires_grad: bool, param: Option<String>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape: t.shape().to_vec(),
            data: t.shared_data(),
            requires_grad,
            parents: Vec::new(),
            backward: None,
            param,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records an op result. The backward rule is dropped when no parent
    /// requires a gradient.
    pub(crate) fn push(
        &self,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: &[Var<'_>],
        backward: impl Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.id].requires_grad);
        nodes.push(Node {
            shape,
            data: Arc::new(data),
            requires_grad,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            param: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a user-defined differentiable op.
    ///
    /// `backward` maps the output gradient to one gradient per input; it is
    /// trusted as-is, which makes this the hook for gradient-check fixtures.
    pub fn custom_op<'t>(
        &'t self,
        inputs: &[Var<'t>],
        shape: Vec<usize>,
        data: Vec<f64>,
        backward: impl Fn(&[f64]) -> Vec<Vec<f64>> + 'static,
    ) -> Result<Var<'t>> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::dim("custom_op", &shape, &[data.len()]));
        }
        Ok(self.push(shape, data, inputs, move |g, _| {
            backward(g).into_iter().map(Some).collect()
        }))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Each node at or below `loss` is visited once, highest index first;
    /// gradients from multiple uses of a value add up. Calling this a second
    /// time on the same tape is a contract error.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        assert!(
            std::ptr::eq(loss.tape, self),
            "loss belongs to another tape"
        );
        if self.swept.get() {
            return Err(Error::contract(
                "backward",
                "tape already consumed by a backward sweep",
            ));
        }
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.data.len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", loss_node.shape),
            ));
        }
        self.swept.set(true);

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.len(), nodes[p].data.len());
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }

        // Only leaves keep their gradients.
        for (g, node) in grads.iter_mut().zip(nodes.iter()) {
            if !node.parents.is_empty() || !node.requires_grad {
                *g = None;
            }
        }
        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.as_ref().map(|name| (name.clone(), i)))
            .collect();
        Ok(Gradients { grads, params })
    }

    /// Turns on recording of attention-row normalization errors.
    pub fn enable_attention_probe(&self) {
        *self.attention_probe.borrow_mut() = Some(Vec::new());
    }

    /// Max |row sum − 1| of every attention matrix recorded since the probe
    /// was enabled, in call order.
    pub fn attention_row_errors(&self) -> Option<Vec<f64>> {
        self.attention_probe.borrow().clone()
    }

    pub(crate) fn probe_attention(&self, weights: Var<'_>) {
        let mut probe = self.attention_probe.borrow_mut();
        let Some(errors) = probe.as_mut() else {
            return;
        };
        let shape = weights.shape();
        let row = *shape.last().expect("attention weights have rank >= 1");
        let worst = weights
            .data()
            .chunks(row)
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max);
        errors.push(worst);
    }

    fn node_shape(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].shape.clone()
    }

    fn node_data(&self, id: usize) -> Arc<Vec<f64>> {
        Arc::clone(&self.nodes.borrow()[id].data)
    }

    fn node_requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.node_shape(self.id)
    }

    pub fn data(&self) -> Arc<Vec<f64>> {
        self.tape.node_data(self.id)
    }

    pub fn numel(&self) -> usize {
        self.data().len()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.node_requires_grad(self.id)
    }

    /// Snapshot of the value as a detached tensor.
    pub fn value(&self) -> Tensor {
        Tensor::from_parts(self.shape(), self.data())
    }

    /// The single element of a one-element value.
    pub fn item(&self) -> f64 {
        let d = self.data();
        assert_eq!(d.len(), 1, "item() on a non-scalar value");
        d[0]
    }
}

/// Leaf gradients produced by one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(String, usize)>,
}

impl Gradients {
    /// Gradient of a leaf; `None` when it did not require one or was not
    /// reached from the loss.
    pub fn grad(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradients keyed by parameter name, summed over repeated registrations.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<f64>> {
        let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (name, id) in &self.params {
            let Some(g) = &self.grads[*id] else { continue };
            match out.get_mut(name) {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => {
                    out.insert(name.clone(), g.clone());
                }
            }
        }
        out
    }
}
