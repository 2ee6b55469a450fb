//! Wengert tape: operations are recorded in execution order and replayed in
//! reverse to accumulate gradients.

use crate::array::DiffArray;
use crate::error::{arg_err, AutodiffError, Result};
use crate::real::Real;
use crate::{ops_basic, ops_loss, ops_nn};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) type CustomBackward<T> = Box<dyn Fn(&[&[T]], &[T], &[T]) -> Vec<Vec<T>> + Send + Sync>;

pub(crate) enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    MaxPool { input: Var, argmax: Vec<usize> },
    Linear { input: Var, weight: Var, bias: Option<Var> },
    LayerNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBroadcast(Var, Var),
    Softmax { input: Var, axis: usize },
    Gather { input: Var, index: Vec<usize> },
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    AddToRows { base: Var, addend: Var, offset: usize },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    SoftDice { probs: Var, target: Vec<T>, eps: T },
    Custom { inputs: Vec<Var>, backward: CustomBackward<T> },
}

impl<T> Op<T> {
    pub(crate) fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::MaxPool { .. } => "maxpool2d",
            Op::Linear { .. } => "linear",
            Op::LayerNorm { .. } => "layernorm",
            Op::Attention { .. } => "attention",
            Op::Relu(_) => "relu",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBroadcast(..) => "add_broadcast",
            Op::Softmax { .. } => "softmax",
            Op::Gather { .. } => "gather",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::AddToRows { .. } => "add_to_rows",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SoftDice { .. } => "soft_dice",
            Op::Custom { .. } => "custom",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { input, weight, bias, .. } | Op::Linear { input, weight, bias } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::BatchNorm { input, gamma, beta, .. } | Op::LayerNorm { input, gamma, beta, .. } => {
                vec![*input, *gamma, *beta]
            }
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::MaxPool { input, .. }
            | Op::Softmax { input, .. }
            | Op::Gather { input, .. }
            | Op::Slice { input, .. } => vec![*input],
            Op::Relu(a) | Op::Scale(a, _) | Op::Reshape(a) | Op::Sum(a) | Op::Mean(a) => vec![*a],
            Op::Add(a, b) | Op::Mul(a, b) | Op::AddBroadcast(a, b) => vec![*a, *b],
            Op::Concat { inputs, .. } | Op::Custom { inputs, .. } => inputs.clone(),
            Op::AddToRows { base, addend, .. } => vec![*base, *addend],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::SoftDice { probs, .. } => vec![*probs],
        }
    }
}

pub(crate) struct Node<T> {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Records a forward computation. Nodes are appended in execution order, so
/// inputs always precede the nodes that consume them.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient buffers produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Operation names in recording order.
    pub fn op_kinds(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.kind()).collect()
    }

    /// Input node ids of a recorded node.
    pub fn inputs_of(&self, var: Var) -> Vec<Var> {
        self.nodes[var.0].op.inputs()
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Copies an array onto the tape and records the node id on the array.
    pub fn enroll(&mut self, array: &mut DiffArray<T>) -> Var {
        let var = self.leaf(array);
        array.set_node(Some(var));
        var
    }

    /// Copies an array onto the tape as a leaf without touching the array.
    pub fn leaf(&mut self, array: &DiffArray<T>) -> Var {
        self.nodes.push(Node {
            shape: array.shape().to_vec(),
            value: array.data().to_vec(),
            op: Op::Leaf,
            requires_grad: array.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let arr = DiffArray::new(shape, data)?;
        Ok(self.leaf(&arr))
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[var.0].shape
    }

    pub fn value(&self, var: Var) -> &[T] {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Snapshot of a node as an array carrying its node id.
    pub fn to_array(&self, var: Var) -> DiffArray<T> {
        let node = &self.nodes[var.0];
        let mut arr = DiffArray::new(&node.shape, node.value.clone())
            .expect("tape nodes are shape-consistent");
        arr.set_requires_grad(node.requires_grad);
        arr.set_node(Some(var));
        arr
    }

    /// Records an opaque operation with a caller-supplied vector-Jacobian
    /// product `backward(input_values, output_value, upstream) -> input_grads`.
    pub fn custom<F>(&mut self, inputs: &[Var], shape: &[usize], value: Vec<T>, backward: F) -> Result<Var>
    where
        F: Fn(&[&[T]], &[T], &[T]) -> Vec<Vec<T>> + Send + Sync + 'static,
    {
        if shape.iter().product::<usize>() != value.len() {
            return arg_err("custom", "value length does not match shape");
        }
        Ok(self.push(shape.to_vec(), value, Op::Custom { inputs: inputs.to_vec(), backward: Box::new(backward) }))
    }

    /// Reverse-mode sweep from a single-element loss. Fan-out contributions
    /// are summed. The tape is left untouched.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(node.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, stride, padding } => {
                ops_nn::conv2d_backward(self, g, *input, *weight, *bias, *stride, *padding, grads)
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, train } => {
                ops_nn::batchnorm_backward(self, g, *input, *gamma, *beta, xhat, inv_std, *train, grads)
            }
            Op::MaxPool { input, argmax } => {
                if let Some(dx) = self.grad_buf(*input, grads) {
                    for (o, &src) in argmax.iter().enumerate() {
                        dx[src] += g[o];
                    }
                }
            }
            Op::Linear { input, weight, bias } => {
                ops_nn::linear_backward(self, g, *input, *weight, *bias, grads)
            }
            Op::LayerNorm { input, gamma, beta, xhat, inv_std } => {
                ops_nn::layernorm_backward(self, g, *input, *gamma, *beta, xhat, inv_std, grads)
            }
            Op::Attention { q, k, v, heads, probs } => {
                ops_nn::attention_backward(self, g, *q, *k, *v, *heads, probs, grads)
            }
            Op::Relu(a) => {
                let x = &self.nodes[a.0].value;
                if let Some(dx) = self.grad_buf(*a, grads) {
                    for ((d, &xi), &gi) in dx.iter_mut().zip(x).zip(g) {
                        if xi > T::zero() {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(dx) = self.grad_buf(v, grads) {
                        add_into(dx, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if let Some(da) = self.grad_buf(*a, grads) {
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                }
                if let Some(db) = self.grad_buf(*b, grads) {
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(dx) = self.grad_buf(*a, grads) {
                    for (d, &gi) in dx.iter_mut().zip(g) {
                        *d += gi * *s;
                    }
                }
            }
            Op::AddBroadcast(a, b) => {
                if let Some(da) = self.grad_buf(*a, grads) {
                    add_into(da, g);
                }
                if let Some(db) = self.grad_buf(*b, grads) {
                    let m = db.len();
                    for chunk in g.chunks(m) {
                        add_into(db, chunk);
                    }
                }
            }
            Op::Softmax { input, axis } => ops_basic::softmax_backward(self, id, g, *input, *axis, grads),
            Op::Gather { input, index } => {
                if let Some(dx) = self.grad_buf(*input, grads) {
                    for (o, &src) in index.iter().enumerate() {
                        dx[src] += g[o];
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(dx) = self.grad_buf(*a, grads) {
                    add_into(dx, g);
                }
            }
            Op::Concat { inputs, axis } => ops_basic::concat_backward(self, id, g, inputs, *axis, grads),
            Op::Slice { input, axis, start } => {
                ops_basic::slice_backward(self, id, g, *input, *axis, *start, grads)
            }
            Op::AddToRows { base, addend, offset } => {
                ops_basic::add_to_rows_backward(self, g, *base, *addend, *offset, grads)
            }
            Op::Sum(a) => {
                if let Some(dx) = self.grad_buf(*a, grads) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                if let Some(dx) = self.grad_buf(*a, grads) {
                    let s = g[0] / T::from_usize(dx.len()).unwrap();
                    for d in dx.iter_mut() {
                        *d += s;
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                ops_loss::cross_entropy_backward(self, g, *logits, labels, probs, grads)
            }
            Op::SoftDice { probs, target, eps } => {
                ops_loss::soft_dice_backward(self, g, *probs, target, *eps, grads)
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&[T]> = inputs.iter().map(|v| self.nodes[v.0].value.as_slice()).collect();
                let input_grads = backward(&vals, &node.value, g);
                for (v, ig) in inputs.iter().zip(input_grads) {
                    if let Some(dx) = self.grad_buf(*v, grads) {
                        add_into(dx, &ig);
                    }
                }
            }
        }
    }

    /// Zero-initialized gradient accumulator for `var`, or `None` when the
    /// node does not participate in differentiation.
    pub(crate) fn grad_buf<'g>(&self, var: Var, grads: &'g mut [Option<Vec<T>>]) -> Option<&'g mut Vec<T>> {
        let node = &self.nodes[var.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[var.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
    }
}

pub(crate) fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
