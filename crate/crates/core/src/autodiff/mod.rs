//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied during one forward pass on a
//! tape. Parameters live in a [`ParamStore`] that outlives the graph; calling
//! [`Graph::backward`] accumulates gradients into the store and returns the
//! gradients of any non-parameter leaves. A graph is dropped after its
//! backward pass.

pub mod kernels;
mod ops;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use ops::{ConvSpec, BN_EPS, BN_MOMENTUM};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which optimizer owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Weight,
    Bias,
    BnScale,
    BnShift,
    ArchAlpha,
    ArchBeta,
}

impl Role {
    pub fn is_arch(self) -> bool {
        matches!(self, Role::ArchAlpha | Role::ArchBeta)
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub role: Role,
    pub value: Tensor,
    pub grad: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

/// Non-trainable state such as batch-norm running statistics.
#[derive(Clone, Debug)]
pub struct Buffer {
    pub name: String,
    pub value: Tensor,
}

/// Owner of all parameters and buffers of one network.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    buffers: Vec<Buffer>,
}

/// Parameter and buffer values captured at one point in training.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    params: Vec<Tensor>,
    buffers: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, role: Role, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.push(Parameter {
            name: name.into(),
            role,
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> BufferId {
        self.buffers.push(Buffer {
            name: name.into(),
            value,
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer] {
        &mut self.buffers
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Number of scalars held by parameters with the given role.
    pub fn count(&self, role: Role) -> usize {
        self.params
            .iter()
            .filter(|p| p.role == role)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            params: self.params.iter().map(|p| p.value.clone()).collect(),
            buffers: self.buffers.iter().map(|b| b.value.clone()).collect(),
        }
    }

    pub fn restore(&mut self, snapshot: &Snapshot) {
        for (p, v) in self.params.iter_mut().zip(&snapshot.params) {
            p.value = v.clone();
        }
        for (b, v) in self.buffers.iter_mut().zip(&snapshot.buffers) {
            b.value = v.clone();
        }
    }
}

/// Whether batch normalization uses batch statistics and updates running
/// statistics (`Train`) or uses the stored running statistics (`Eval`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

pub(crate) struct BackwardArgs<'a> {
    pub grad: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub needs: Vec<bool>,
}

pub(crate) type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Gradients of the non-parameter leaves that required them.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var)
    }
}

pub struct Graph<'p> {
    nodes: Vec<Node>,
    store: &'p mut ParamStore,
    mode: Mode,
    param_vars: HashMap<ParamId, Var>,
    trainable: fn(Role) -> bool,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p mut ParamStore, mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            store,
            mode,
            param_vars: HashMap::new(),
            trainable: |_| true,
        }
    }

    /// Only parameters whose role passes `trainable` receive gradients.
    /// Set this before bringing any parameter onto the tape.
    pub fn with_trainable(mut self, trainable: fn(Role) -> bool) -> Self {
        self.trainable = trainable;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        self.store
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Input value; gradients are reported through [`Gradients`] when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_node(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
            param: None,
        })
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Bring a stored parameter onto the tape. Repeated calls return the same
    /// handle. In eval mode, or when filtered out by
    /// [`Graph::with_trainable`], parameters do not require gradients.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        let requires_grad = self.mode == Mode::Train && (self.trainable)(p.role);
        let value = p.value.clone();
        let var = self.push_node(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
            param: Some(id),
        });
        self.param_vars.insert(id, var);
        var
    }

    fn push_node(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Record an operation result. The backward closure is dropped when no
    /// parent requires a gradient.
    pub(crate) fn record(&mut self, value: Tensor, parents: Vec<Var>, backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_node(Node {
            value,
            parents,
            backward: requires_grad.then_some(backward),
            requires_grad,
            param: None,
        })
    }

    /// Back-propagate from a scalar loss. Parameter gradients are added to
    /// the store; calling this twice accumulates twice.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_value.shape().to_vec(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Some(backward) = &node.backward {
                let args = BackwardArgs {
                    grad: &grad,
                    inputs: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                    output: &node.value,
                    needs: node
                        .parents
                        .iter()
                        .map(|p| self.nodes[p.0].requires_grad)
                        .collect(),
                };
                let parent_grads = backward(&args);
                for (parent, pg) in node.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !self.nodes[parent.0].requires_grad {
                        continue;
                    }
                    match &mut grads[parent.0] {
                        Some(existing) => existing.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            if node.parents.is_empty() {
                grads[idx] = Some(grad);
            }
        }

        let mut out = Gradients::default();
        for (idx, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad || !node.parents.is_empty() {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match node.param {
                Some(pid) => self.store.get_mut(pid).grad.add_assign(&g),
                None => {
                    out.grads.insert(Var(idx), g);
                }
            }
        }
        Ok(out)
    }
}
