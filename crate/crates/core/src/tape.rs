//! Reverse-mode differentiation tape.
//!
//! Forward evaluation records one node per differentiable operation; the
//! backward sweep replays nodes in exact reverse execution order, so a
//! gradient accumulation over a fixed forward program is deterministic.

use std::collections::HashMap;

use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Given the output gradient, produce one gradient per parent, in parent
/// order, each matching the parent's value shape.
pub type BackwardFn<F> = Box<dyn FnOnce(&Tensor<F>) -> Vec<Tensor<F>> + Send>;

struct Node<F> {
    value: Tensor<F>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<F>>,
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    recording: bool,
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that keeps values but records no backward closures; used for
    /// evaluation-only passes.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert an input (leaf) value. Leaves have no backward function; their
    /// gradients are read out of the `Gradients` result.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor<F> {
        &self.nodes[var.0].value
    }

    /// Record an operation result. `make_backward` is only invoked while
    /// recording, so inference passes skip closure and saved-tensor setup.
    pub fn push_op(
        &mut self,
        value: Tensor<F>,
        parents: &[Var],
        make_backward: impl FnOnce() -> BackwardFn<F>,
    ) -> Var {
        let backward = if self.recording {
            Some(make_backward())
        } else {
            None
        };
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|v| v.0).collect(),
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    /// Backward sweep from a scalar root. Consumes the recorded closures;
    /// the tape's values remain readable.
    pub fn backward(&mut self, root: Var) -> Result<Gradients<F>> {
        let root_value = &self.nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be a scalar, got shape {:?}",
                root_value.shape()
            )));
        }
        if !root_value.data()[0].is_finite() {
            return Err(Error::NonFinite(format!(
                "backward root is {}",
                root_value.data()[0]
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(F::one()));

        for i in (0..=root.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            let Some(back) = self.nodes[i].backward.take() else {
                continue;
            };
            let parent_grads = {
                let g = grads[i].as_ref().expect("grad present");
                back(g)
            };
            debug_assert_eq!(parent_grads.len(), self.nodes[i].parents.len());
            let parents = self.nodes[i].parents.clone();
            for (p, pg) in parents.into_iter().zip(parent_grads) {
                debug_assert_eq!(
                    pg.shape(),
                    self.nodes[p].value.shape(),
                    "gradient shape mismatch at node {p}"
                );
                match &mut grads[p] {
                    slot @ None => *slot = Some(pg),
                    Some(acc) => acc.acc_in_place(&pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, var: Var) -> Option<&Tensor<F>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

/// Named parameter: value plus accumulated gradient of identical shape.
#[derive(Clone, Debug)]
pub struct Param<F: Scalar> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
    /// Buffers (false) are saved and restored but never updated or
    /// gradient-checked.
    pub trainable: bool,
}

/// Stable index of a parameter within a `ParamSet`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Ordered, uniquely named parameter collection for one model.
pub struct ParamSet<F: Scalar> {
    params: Vec<Param<F>>,
    by_name: HashMap<String, usize>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let grad = Tensor::zeros(value.shape());
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            grad,
            trainable,
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<F>) {
        debug_assert_eq!(value.shape(), self.params[id.0].value.shape());
        self.params[id.0].value = value;
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    /// Insert every parameter as a tape leaf, in declaration order.
    pub fn bind(&self, tape: &mut Tape<F>) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect();
        BoundParams { vars }
    }

    /// Accumulate tape gradients into the stored `grad` fields.
    pub fn accumulate_grads(&mut self, bound: &BoundParams, grads: &mut Gradients<F>) {
        for (p, &var) in self.params.iter_mut().zip(bound.vars.iter()) {
            if !p.trainable {
                continue;
            }
            if let Some(g) = grads.take(var) {
                p.grad.acc_in_place(&g);
            }
        }
    }
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-tape leaf bindings for a `ParamSet`, aligned by parameter index.
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}
