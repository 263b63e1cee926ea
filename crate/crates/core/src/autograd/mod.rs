//! A small reverse-mode automatic differentiation engine over dense `f32` arrays.
//!
//! Tensors are immutable, reference counted nodes of a tape. An operation records
//! its parents and a closure mapping the output gradient to one gradient per
//! parent. Nodes whose inputs do not require gradients record nothing, so forward
//! passes of frozen networks carry no tape.

mod conv;
mod gemm;
mod ops;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

pub use conv::conv_output_size;
pub use gemm::{dgemm, sgemm, View};

/// Maps the gradient of an op's output to the gradients of its parents, in order.
/// `None` entries mean "no contribution".
pub type BackwardFn = Box<dyn Fn(&[f32]) -> Vec<Option<Vec<f32>>>>;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Rc<Vec<f32>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(
        data: Rc<Vec<f32>>,
        shape: Vec<usize>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert_eq!(data.len(), numel(&shape), "data/shape mismatch");
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data,
            requires_grad,
            parents,
            backward,
        }))
    }

    /// A constant (no gradient) tensor.
    pub fn new(data: Vec<f32>, shape: &[usize]) -> Tensor {
        assert_eq!(
            data.len(),
            numel(shape),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor::build(Rc::new(data), shape.to_vec(), false, Vec::new(), None)
    }

    /// A leaf that accumulates gradients.
    pub fn leaf(data: Vec<f32>, shape: &[usize]) -> Tensor {
        assert_eq!(data.len(), numel(shape));
        Tensor::build(Rc::new(data), shape.to_vec(), true, Vec::new(), None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new(vec![0.0; numel(shape)], shape)
    }

    pub fn scalar(v: f32) -> Tensor {
        Tensor::new(vec![v], &[])
    }

    /// Records an operation. The backward closure is dropped when no parent
    /// requires a gradient.
    pub fn from_op(data: Vec<f32>, shape: Vec<usize>, parents: Vec<Tensor>, backward: BackwardFn) -> Tensor {
        Tensor::from_op_shared(Rc::new(data), shape, parents, backward)
    }

    pub(crate) fn from_op_shared(
        data: Rc<Vec<f32>>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let requires_grad = parents.iter().any(Tensor::requires_grad);
        if requires_grad {
            Tensor::build(data, shape, true, parents, Some(backward))
        } else {
            Tensor::build(data, shape, false, Vec::new(), None)
        }
    }

    pub(crate) fn from_shared(data: Rc<Vec<f32>>, shape: Vec<usize>) -> Tensor {
        Tensor::build(data, shape, false, Vec::new(), None)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.0.data
    }

    pub(crate) fn shared_data(&self) -> Rc<Vec<f32>> {
        Rc::clone(&self.0.data)
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.0.data.as_ref().clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Same values, cut from the tape.
    pub fn detach(&self) -> Tensor {
        Tensor::from_shared(self.shared_data(), self.shape().to_vec())
    }

    /// Reverse-mode sweep from a scalar. Returns gradients of every leaf reached.
    pub fn backward(&self) -> Gradients {
        assert_eq!(self.numel(), 1, "backward() needs a scalar output");
        let mut grads: HashMap<u64, Vec<f32>> = HashMap::new();
        let mut leaves = HashMap::new();
        if !self.requires_grad() {
            return Gradients { map: leaves };
        }

        // Iterative post-order DFS for a topological order.
        let mut order: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !seen.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            for p in &node.0.parents {
                if p.requires_grad() && !seen.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }

        grads.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match &node.0.backward {
                None => {
                    leaves.insert(node.id(), g);
                }
                Some(f) => {
                    let parent_grads = f(&g);
                    debug_assert_eq!(parent_grads.len(), node.0.parents.len());
                    for (p, pg) in node.0.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel(), "gradient size mismatch");
                        match grads.get_mut(&p.id()) {
                            Some(acc) => {
                                for (a, v) in acc.iter_mut().zip(&pg) {
                                    *a += v;
                                }
                            }
                            None => {
                                grads.insert(p.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Gradients { map: leaves }
    }
}

/// Leaf gradients produced by [`Tensor::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    map: HashMap<u64, Vec<f32>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f32]> {
        self.map.get(&t.id()).map(Vec::as_slice)
    }

    pub fn take(&mut self, t: &Tensor) -> Option<Vec<f32>> {
        self.map.remove(&t.id())
    }
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;

    /// Central finite-difference check of `f` against autograd at `x`.
    /// Returns the max of `|a - n| / (0.02 + |a| + |n|)`; the floor absorbs f32
    /// rounding in the difference quotient.
    pub fn grad_check(f: impl Fn(&Tensor) -> Tensor, x: &[f32], shape: &[usize], h: f32) -> f32 {
        let leaf = Tensor::leaf(x.to_vec(), shape);
        let out = f(&leaf);
        let grads = out.backward();
        let analytic = grads.get(&leaf).map(<[f32]>::to_vec).unwrap_or(vec![0.0; x.len()]);
        let mut worst = 0.0f32;
        for i in 0..x.len() {
            let mut plus = x.to_vec();
            plus[i] += h;
            let mut minus = x.to_vec();
            minus[i] -= h;
            let fp = f(&Tensor::new(plus, shape)).item() as f64;
            let fm = f(&Tensor::new(minus, shape)).item() as f64;
            let numeric = ((fp - fm) / (2.0 * h as f64)) as f32;
            let err = (analytic[i] - numeric).abs() / (2e-2 + analytic[i].abs() + numeric.abs());
            worst = worst.max(err);
        }
        worst
    }
}
