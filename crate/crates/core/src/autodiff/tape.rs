use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::param::Parameter;
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Local derivative of one recorded operation.
pub(crate) trait BackwardOp {
    /// Gradients for each input given the gradient of the output. Entries
    /// for inputs with `needs[i] == false` may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>>;
}

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    op: Option<Box<dyn BackwardOp>>,
    param: Option<String>,
    requires_grad: bool,
}

/// Record of one forward computation.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Parameter gradients produced by [`Tape::backward`], keyed by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Node {
            value,
            parents: vec![],
            op: None,
            param: None,
            requires_grad: false,
        })
    }

    /// A leaf holding a copy of the parameter's value. Frozen parameters
    /// enter as constants.
    pub fn param(&mut self, p: &Parameter) -> Var {
        self.push(Node {
            value: p.value.clone(),
            parents: vec![],
            op: None,
            param: p.trainable.then(|| p.name.clone()),
            requires_grad: p.trainable,
        })
    }

    fn index(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        v.index
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.index(v)].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.index(v)].requires_grad
    }

    pub(crate) fn record(
        &mut self,
        name: &'static str,
        value: Tensor,
        parents: &[Var],
        op: Box<dyn BackwardOp>,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let parents: Vec<usize> = parents.iter().map(|&p| self.index(p)).collect();
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        Ok(self.push(Node {
            value,
            parents,
            op: requires_grad.then_some(op),
            param: None,
            requires_grad,
        }))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.tape != self.id {
            return Err(Error::Autodiff("loss was recorded on a different tape".into()));
        }
        let root = &self.nodes[loss.index];
        if root.value.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if root.parents.is_empty() {
            return Err(Error::Autodiff(
                "backward called on a value with no recorded forward computation".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.index).map(|_| None).collect();
        grads[loss.index] = Some(Tensor::full(root.value.shape(), 1.0));
        let mut out = Gradients::default();
        for idx in (0..=loss.index).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Some(name) = &node.param {
                match out.by_name.get_mut(name) {
                    Some(acc) => acc.add_assign(&g)?,
                    None => {
                        out.by_name.insert(name.clone(), g);
                    }
                }
                continue;
            }
            let Some(op) = &node.op else { continue };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| self.nodes[p].requires_grad)
                .collect();
            let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let parent_grads = op.backward(&inputs, &node.value, &g, &needs)?;
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(pg), true) = (pg, *need) else { continue };
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(out)
    }
}
