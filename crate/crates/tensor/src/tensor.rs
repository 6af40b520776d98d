use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use crate::error::{contract_err, dim_err, Result};

/// Computes parent gradients from the output gradient.
///
/// The second argument flags which parents actually need a gradient; entries
/// for parents that don't may be returned as `None`.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

struct GradNode {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    node: Option<GradNode>,
}

/// Dense row-major `f64` tensor.
///
/// Values are immutable once built; only the gradient buffer changes. Cloning
/// is cheap (shared handle). Tensors produced by an op on at least one
/// `requires_grad` input remember their parents, so calling [`Tensor::backward`]
/// on a scalar walks the recorded graph in reverse.
#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.0.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &preview)
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if numel_of(&shape) != data.len() {
            return dim_err(format!(
                "shape {:?} holds {} values but {} were given",
                shape,
                numel_of(&shape),
                data.len()
            ));
        }
        Ok(Self::leaf(shape, data, false))
    }

    /// Trainable leaf.
    pub fn param(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        Ok(Self::new(shape, data)?.with_requires_grad(true))
    }

    pub fn scalar(value: f64) -> Self {
        Self::leaf(Vec::new(), vec![value], false)
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = numel_of(&shape);
        Self::leaf(shape, vec![value; n], false)
    }

    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Self {
        Tensor(Arc::new(Inner {
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            node: None,
        }))
    }

    /// Builds an op output. The graph edge is only recorded when some parent
    /// requires a gradient.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        let requires_grad = parents.iter().any(Tensor::requires_grad);
        let node = requires_grad.then_some(GradNode { parents, backward });
        Tensor(Arc::new(Inner {
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            node,
        }))
    }

    /// Same values as a fresh leaf with the given flag. Any stored gradient
    /// is carried over.
    pub fn with_requires_grad(&self, requires_grad: bool) -> Self {
        let t = Self::leaf(self.0.shape.clone(), self.0.data.clone(), requires_grad);
        if let Some(g) = self.grad() {
            *t.0.grad.lock().unwrap() = Some(g);
        }
        t
    }

    /// Leaf copy cut from the graph; never requires grad.
    pub fn detach(&self) -> Self {
        Self::leaf(self.0.shape.clone(), self.0.data.clone(), false)
    }

    /// New leaf holding `data` with this tensor's shape, flag and gradient.
    /// Used by optimizers to publish updated parameter values.
    pub fn replaced_data(&self, data: Vec<f64>) -> Result<Self> {
        if data.len() != self.numel() {
            return dim_err(format!(
                "replacement has {} values, tensor holds {}",
                data.len(),
                self.numel()
            ));
        }
        let t = Self::leaf(self.0.shape.clone(), data, self.0.requires_grad);
        *t.0.grad.lock().unwrap() = self.grad();
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return contract_err(format!("item() on tensor of shape {:?}", self.shape()));
        }
        Ok(self.0.data[0])
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().unwrap().clone()
    }

    /// Overwrites the gradient buffer.
    pub fn set_grad(&self, grad: Option<Vec<f64>>) -> Result<()> {
        if let Some(g) = &grad {
            if g.len() != self.numel() {
                return dim_err(format!(
                    "gradient of length {} for tensor of shape {:?}",
                    g.len(),
                    self.shape()
                ));
            }
        }
        *self.0.grad.lock().unwrap() = grad;
        Ok(())
    }

    /// Fills an existing gradient buffer with zeros. A missing buffer stays missing.
    pub fn zero_grad(&self) {
        if let Some(g) = self.0.grad.lock().unwrap().as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.0.grad.lock().unwrap();
        match slot.as_mut() {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, v)| *b += v),
            None => *slot = Some(g.to_vec()),
        }
    }

    fn key(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }

    /// Reverse-mode sweep from a scalar.
    ///
    /// Gradients are added to whatever each reachable `requires_grad` tensor
    /// already holds, so two calls on two losses leave the sum of both
    /// contributions. Propagation itself uses pass-local buffers.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return contract_err(format!(
                "backward() needs a scalar, got shape {:?}",
                self.shape()
            ));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let order = self.topo_order();
        let mut pending: HashMap<usize, Vec<f64>> = HashMap::with_capacity(order.len());
        pending.insert(self.key(), vec![1.0]);

        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.key()) else {
                continue;
            };
            if let Some(node) = &t.0.node {
                let needs: Vec<bool> = node.parents.iter().map(Tensor::requires_grad).collect();
                let parent_grads = (node.backward)(&g, &needs);
                for ((p, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                    let (Some(pg), true) = (pg, *need) else {
                        continue;
                    };
                    debug_assert_eq!(pg.len(), p.numel());
                    match pending.get_mut(&p.key()) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, v)| *a += v),
                        None => {
                            pending.insert(p.key(), pg);
                        }
                    }
                }
            }
            t.accumulate_grad(&g);
        }
        Ok(())
    }

    /// Post-order over the grad-requiring subgraph; parents precede children.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.0.node {
                for p in &node.parents {
                    if p.requires_grad() && !seen.contains(&p.key()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}
