//! Reverse-mode automatic differentiation over dense `ndarray` tensors.
//!
//! A [`Graph`] is a tape: every op appends a node holding its output value and
//! enough saved state to run its backward rule. Nodes are only ever appended, so
//! node order is a valid topological order and [`Graph::backward`] is a single
//! reverse sweep.
//!
//! The graph is generic over [`Real`] so the same model code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

mod kernels;
mod ops;

pub use kernels::{bilinear_matrix, ConvGeom};

#[cfg(test)]
mod tests;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{ArrayD, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

/// Floating point element type usable on the tape.
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// Name written into file headers ("f32" / "f64").
    const DTYPE: &'static str;
    const BYTES: usize;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn lit(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("representable literal")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Powf(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Relu(Var),
    Ln(Var),
    Exp(Var),
    Abs(Var),
    Clamp(Var, T, T),
    MatMul { a: Var, b: Var, trans_b: bool },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    SharedMatMul { w: Var, x: Var, trans_w: bool },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow { x: Var, axis: usize, start: usize },
    SumAll(Var),
    SumAxis(Var, usize),
    Softmax(Var),
    LayerNorm { x: Var, axis: usize, xhat: ArrayD<T>, inv_std: ArrayD<T> },
    Unfold { x: Var, geom: ConvGeom },
    DeformUnfold { x: Var, offsets: Var, geom: ConvGeom },
    DeformDepthwise { x: Var, offsets: Var, weight: Var, geom: ConvGeom },
    PixelShuffle2(Var),
    Resize { x: Var, rows: ndarray::Array2<T>, cols: ndarray::Array2<T> },
    CrossEntropy { logits: Var, probs: ArrayD<T>, target: Vec<usize> },
    DiceLoss { probs: Var, target: Vec<usize>, eps: T, inter: Vec<T>, denom: Vec<T> },
}

pub(crate) struct Node<T> {
    pub(crate) value: ArrayD<T>,
    pub(crate) op: Op<T>,
    pub(crate) needs_grad: bool,
}

/// Tape of tensor operations.
pub struct Graph<T: Real> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: ArrayD<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that is treated as a constant by [`Graph::backward`].
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: ArrayD<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: value.as_standard_layout().into_owned(), op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Value of a scalar (single element) node.
    pub fn scalar(&self, v: Var) -> T {
        let value = self.value(v);
        assert_eq!(value.len(), 1, "scalar() on a tensor of shape {:?}", value.shape());
        *value.iter().next().expect("one element")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub(crate) fn push(&mut self, value: ArrayD<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        debug_assert!(value.is_standard_layout());
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar root. Only gradients of leaves are retained.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let root_value = &self.nodes[root.0].value;
        assert_eq!(root_value.len(), 1, "backward() needs a scalar root");
        let mut grads: Vec<Option<ArrayD<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::from_elem(root_value.raw_dim(), T::one()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(grad) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(grad);
            } else {
                self.backprop(i, grad, &mut grads);
            }
        }
        Gradients { grads }
    }

    pub(crate) fn accumulate(&self, grads: &mut [Option<ArrayD<T>>], v: Var, g: ArrayD<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.nodes[v.0].value.shape(), "gradient shape for node {}", v.0);
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
