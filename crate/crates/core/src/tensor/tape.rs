use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias { x: Var, bias: Var, inner: usize },
    Matmul(Var, Var),
    Bmm(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat { inputs: Vec<Var>, axis: usize },
    Crop { x: Var, top: usize, left: usize },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Sum(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Deconv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    Resize(Var),
    Windows { x: Var, merge: bool },
    /// Scalar loss whose derivative w.r.t. `e` was computed in the forward pass.
    PrecomputedGrad { e: Var, dloss: Vec<f64> },
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

/// Append-only record of one forward pass.
///
/// Nodes are only ever appended, so every op's inputs have smaller indices
/// than its output and a single reverse sweep visits them in topological
/// order.
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    grad_enabled: bool,
    pub(crate) kinks: Option<Vec<bool>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
            kinks: None,
        }
    }

    /// A tape that never tracks gradients; ops keep no saved state.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
            kinks: None,
        }
    }

    /// Starts logging which side of its kink every ReLU input lies on.
    /// Finite-difference checks use this to detect stencils that straddle
    /// a non-differentiable point.
    pub fn record_kinks(&mut self) {
        self.kinks = Some(Vec::new());
    }

    pub fn kinks(&self) -> Option<&[bool]> {
        self.kinks.as_deref()
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a tracked leaf (after [`Tape::backward`]).
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Leaf gradients accumulate across calls; intermediate adjoints are
    /// transient and recomputed on every call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut slots: Vec<Option<Vec<f64>>> = Vec::new();
        slots.resize_with(loss.0 + 1, || None);
        slots[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = slots[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                leaf_grads.push((i, g));
                continue;
            }
            let mut grads = Grads {
                nodes: &self.nodes,
                slots: &mut slots,
            };
            backprop(&node.op, &node.value, &g, &mut grads);
        }
        for (i, g) in leaf_grads {
            match &mut self.nodes[i].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

/// Adjoint accumulators for one backward sweep.
pub(crate) struct Grads<'a> {
    pub nodes: &'a [Node],
    slots: &'a mut [Option<Vec<f64>>],
}

impl<'a> Grads<'a> {
    pub fn value(&self, v: Var) -> &'a Tensor {
        &self.nodes[v.0].value
    }

    /// Mutable adjoint buffer of `v`, or `None` when `v` is untracked.
    pub fn slot(&mut self, v: Var) -> Option<&mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(self.slots[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    pub fn add(&mut self, v: Var, g: &[f64]) {
        if let Some(s) = self.slot(v) {
            s.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
}

fn backprop(op: &Op, out: &Tensor, g: &[f64], grads: &mut Grads) {
    use super::{conv, norm, ops};
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            grads.add(*a, g);
            grads.add(*b, g);
        }
        Op::Sub(a, b) => {
            grads.add(*a, g);
            if let Some(s) = grads.slot(*b) {
                s.iter_mut().zip(g).for_each(|(a, b)| *a -= b);
            }
        }
        Op::Mul(a, b) => ops::backward_mul(*a, *b, g, grads),
        Op::Scale(a, k) => {
            if let Some(s) = grads.slot(*a) {
                s.iter_mut().zip(g).for_each(|(a, b)| *a += k * b);
            }
        }
        Op::AddBias { x, bias, inner } => ops::backward_add_bias(*x, *bias, *inner, g, grads),
        Op::Matmul(a, b) => ops::backward_matmul(*a, *b, g, grads),
        Op::Bmm(a, b) => ops::backward_bmm(*a, *b, g, grads),
        Op::Reshape(a) => grads.add(*a, g),
        Op::Permute(a, perm) => ops::backward_permute(*a, perm, out, g, grads),
        Op::Concat { inputs, axis } => ops::backward_concat(inputs, *axis, out, g, grads),
        Op::Crop { x, top, left } => ops::backward_crop(*x, *top, *left, out, g, grads),
        Op::Relu(a) => ops::backward_relu(*a, g, grads),
        Op::Gelu(a) => ops::backward_gelu(*a, g, grads),
        Op::Sigmoid(a) => {
            if let Some(s) = grads.slot(*a) {
                for ((s, y), g) in s.iter_mut().zip(out.data()).zip(g) {
                    *s += g * y * (1.0 - y);
                }
            }
        }
        Op::Softmax(a) => ops::backward_softmax(*a, out, g, grads),
        Op::Sum(a) => {
            if let Some(s) = grads.slot(*a) {
                s.iter_mut().for_each(|v| *v += g[0]);
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => norm::backward_layer_norm(*x, *gain, *bias, xhat, inv_std, g, grads),
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => norm::backward_batch_norm(*x, *gamma, *beta, xhat, inv_std, *train, g, grads),
        Op::Conv2d { x, w, b, stride, pad } => conv::backward_conv2d(*x, *w, *b, *stride, *pad, out, g, grads),
        Op::Deconv2d { x, w, b, stride } => conv::backward_deconv2d(*x, *w, *b, *stride, out, g, grads),
        Op::Resize(a) => ops::backward_resize(*a, out, g, grads),
        Op::Windows { x, merge } => ops::backward_windows(*x, *merge, out, g, grads),
        Op::PrecomputedGrad { e, dloss } => {
            if let Some(s) = grads.slot(*e) {
                s.iter_mut().zip(dloss).for_each(|(a, d)| *a += g[0] * d);
            }
        }
    }
}
