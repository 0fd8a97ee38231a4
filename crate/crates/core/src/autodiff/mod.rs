//! A small reverse-mode automatic differentiation tape.
//!
//! Every op evaluates eagerly and records how to push gradients back to its
//! inputs. A [`Graph`] lives for one forward/backward pass; model weights
//! live in a [`ParamStore`](crate::layers::ParamStore) and are bound into the
//! graph by name.

mod kernels;
mod ops;

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

pub use kernels::ConvGeom;
pub(crate) use kernels::{col2im, gemm, im2col, permute_indices, MatRef};

use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::tensor::Tensor;
use ops::Op;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    buffer_updates: Vec<(String, Tensor)>,
}

#[derive(Default)]
pub struct Graph {
    inner: RefCell<Inner>,
}

/// Gradients of a scalar with respect to every node that needed one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut inner = self.inner.borrow_mut();
        let needs_grad = match &op {
            Op::Leaf { trainable } => *trainable,
            other => other.parents().iter().any(|p| inner.nodes[p.0].needs_grad),
        };
        inner.nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var(inner.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf { trainable: false })
    }

    /// Leaf that receives a gradient.
    pub fn variable(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf { trainable: true })
    }

    /// Binds a named entry of `store`; repeated binds return the same node.
    pub fn param(&self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.inner.borrow().params.get(name) {
            return Ok(v);
        }
        let entry = store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
        let v = if entry.trainable {
            self.variable(entry.value.clone())
        } else {
            self.constant(entry.value.clone())
        };
        self.inner.borrow_mut().params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.inner.borrow().nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().nodes[v.0].value.shape().to_vec()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.inner.borrow().nodes[v.0].needs_grad
    }

    pub fn record_buffer_update(&self, name: &str, value: Tensor) {
        self.inner
            .borrow_mut()
            .buffer_updates
            .push((name.to_string(), value));
    }

    /// Running-statistic updates produced by training-mode forward passes.
    pub fn take_buffer_updates(&self) -> Vec<(String, Tensor)> {
        std::mem::take(&mut self.inner.borrow_mut().buffer_updates)
    }

    /// Gradients of the trainable parameters bound into this graph, keyed by name.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        let inner = self.inner.borrow();
        inner
            .params
            .iter()
            .filter_map(|(name, &v)| {
                if !inner.nodes[v.0].needs_grad {
                    return None;
                }
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(inner.nodes[v.0].value.shape().to_vec()));
                Some((name.clone(), g))
            })
            .collect()
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let inner = self.inner.borrow();
        let root = &inner.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(root.value.shape().to_vec()));
        for i in (0..=loss.0).rev() {
            let node = &inner.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut sink = GradSink {
                nodes: &inner.nodes,
                grads: &mut grads,
            };
            ops::backward(&node.op, &node.value, &g, &mut sink);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Accumulates parent gradients during the backward sweep.
pub(crate) struct GradSink<'a> {
    nodes: &'a [Node],
    grads: &'a mut Vec<Option<Tensor>>,
}

impl GradSink<'_> {
    pub fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes[v.0].value)
    }

    pub fn add(&mut self, v: Var, data: Vec<f64>) {
        if !self.wants(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(&data) {
                    *e += d;
                }
            }
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Tensor::new(shape, data).expect("gradient shape"));
            }
        }
    }
}
