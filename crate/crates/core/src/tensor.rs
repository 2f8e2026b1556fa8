//! Dense 64-bit tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is a cheap handle (`Rc`) onto a node of a dynamically built
//! compute graph. Every operation records its inputs, so calling
//! [`Tensor::backward`] on a scalar walks the tape in reverse and fills the
//! `grad` buffer of every `grad_enabled` leaf that the loss depends on.
//! The graph is rebuilt on every forward pass; nothing is cached between
//! passes.
//!
//! Conventions used across the crate:
//! - row-major storage, tokens are rows;
//! - almost everything is 2-D `[rows, cols]`; scalars are `[1, 1]`;
//!   images are `[h, w, 3]` and only [`Tensor::extract_patches`] accepts them;
//! - data is immutable after construction, except `grad` buffers and
//!   [`Tensor::set_data`] on leaves (for optimizer updates between passes).

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use crate::error::Error;
use crate::Result;

/// Epsilon added to the row variance inside layer normalization.
pub const LAYERNORM_EPS: f64 = 1e-5;

/// tanh-approximation constants for GELU: `0.5 x (1 + tanh(C (x + A x^3)))`.
pub const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub const GELU_A: f64 = 0.044_715;

#[derive(Clone)]
enum Op {
    Leaf,
    Matmul(Tensor, Tensor),
    Transpose(Tensor),
    ConcatRows(Vec<Tensor>),
    ConcatCols(Vec<Tensor>),
    SliceRows { input: Tensor, from: usize },
    SliceCols { input: Tensor, from: usize },
    Add(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    Gelu(Tensor),
    SoftmaxRows(Tensor),
    LayerNormRows(Tensor),
    L2NormalizeRows(Tensor),
    BroadcastRows(Tensor),
    SumAll(Tensor),
    Reshape(Tensor),
    Embed { table: Tensor, ids: Vec<usize> },
    ExtractPatches { image: Tensor, patch: usize },
    CrossEntropy { probs: Tensor, labels: Vec<usize> },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    /// Leaf marker: this tensor's grad should be kept after backward.
    grad_enabled: bool,
    /// True when some grad_enabled leaf is reachable below this node.
    needs_grad: bool,
    op: Op,
}

/// Handle onto a compute-graph node. Cloning shares the node.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<RefCell<Node>>,
}

impl core::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("grad_enabled", &self.grad_enabled())
            .field("data", &self.to_vec())
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn from_node(node: Node) -> Self {
        Tensor { node: Rc::new(RefCell::new(node)) }
    }

    fn leaf(data: Vec<f64>, shape: Vec<usize>, grad_enabled: bool) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Contract(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor::from_node(Node {
            shape,
            data,
            grad: None,
            grad_enabled,
            needs_grad: grad_enabled,
            op: Op::Leaf,
        }))
    }

    /// Constant leaf: participates in the forward pass, never receives a grad.
    pub fn constant(data: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        Tensor::leaf(data, shape, false)
    }

    /// Trainable leaf: `backward` accumulates into its grad buffer.
    pub fn param(data: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        Tensor::leaf(data, shape, true)
    }

    /// 1x1 constant.
    pub fn scalar(value: f64) -> Self {
        Tensor::leaf(vec![value], vec![1, 1], false).unwrap()
    }

    /// rows x cols constant filled with zeros.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::leaf(vec![0.0; rows * cols], vec![rows, cols], false).unwrap()
    }

    fn op_node(shape: Vec<usize>, data: Vec<f64>, needs_grad: bool, op: Op) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor::from_node(Node { shape, data, grad: None, grad_enabled: false, needs_grad, op })
    }

    // ── Accessors ──────────────────────────────────────────────────────

    pub fn shape(&self) -> Vec<usize> {
        self.node.borrow().shape.clone()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.node.borrow().data.clone()
    }

    pub fn numel(&self) -> usize {
        self.node.borrow().data.len()
    }

    pub fn grad_enabled(&self) -> bool {
        self.node.borrow().grad_enabled
    }

    /// Accumulated gradient, if backward has reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.borrow().grad.clone()
    }

    /// Drop the accumulated gradient.
    pub fn zero_grad(&self) {
        self.node.borrow_mut().grad = None;
    }

    /// Scalar extraction; errors unless the tensor has exactly one element.
    pub fn item(&self) -> Result<f64> {
        let n = self.node.borrow();
        if n.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                n.shape
            )));
        }
        Ok(n.data[0])
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        let n = self.node.borrow();
        if n.shape.len() != 2 {
            return Err(Error::Contract(format!(
                "expected a 2-D tensor, got shape {:?}",
                n.shape
            )));
        }
        Ok((n.shape[0], n.shape[1]))
    }

    pub fn rows(&self) -> usize {
        self.node.borrow().shape.first().copied().unwrap_or(0)
    }

    /// Replace the data of a leaf. Used by optimizers and the gradient
    /// checker between forward passes; rejected on op outputs because graph
    /// intermediates are immutable.
    pub fn set_data(&self, data: Vec<f64>) -> Result<()> {
        let mut n = self.node.borrow_mut();
        if !matches!(n.op, Op::Leaf) {
            return Err(Error::Contract(String::from(
                "set_data is only valid on leaf tensors",
            )));
        }
        if data.len() != n.data.len() {
            return Err(Error::Contract(format!(
                "set_data length {} does not match tensor of shape {:?}",
                data.len(),
                n.shape
            )));
        }
        n.data = data;
        Ok(())
    }

    /// Same underlying node?
    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.node, &other.node)
    }

    // ── Forward ops ────────────────────────────────────────────────────

    /// Matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = rhs.dims2()?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let a = self.node.borrow();
        let b = rhs.node.borrow();
        let data = matmul_raw(&a.data, &b.data, m, k, n);
        let needs = a.needs_grad || b.needs_grad;
        drop(a);
        drop(b);
        Ok(Tensor::op_node(vec![m, n], data, needs, Op::Matmul(self.clone(), rhs.clone())))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let n = self.node.borrow();
        let data = transpose_raw(&n.data, r, c);
        let needs = n.needs_grad;
        drop(n);
        Ok(Tensor::op_node(vec![c, r], data, needs, Op::Transpose(self.clone())))
    }

    /// Stack blocks on top of each other; all blocks share a column count.
    /// Zero-row blocks are legal and contribute nothing.
    pub fn concat_rows(blocks: &[Tensor]) -> Result<Tensor> {
        if blocks.is_empty() {
            return Err(Error::Contract(String::from("concat_rows of an empty list")));
        }
        let mut cols = None;
        let mut rows = 0;
        for b in blocks {
            let (r, c) = b.dims2()?;
            match cols {
                None => cols = Some(c),
                Some(c0) if c0 != c => {
                    return Err(Error::Dimension {
                        op: "concat_rows",
                        lhs: vec![rows, c0],
                        rhs: vec![r, c],
                    })
                }
                _ => {}
            }
            rows += r;
        }
        let cols = cols.unwrap();
        let mut data = Vec::with_capacity(rows * cols);
        let mut needs = false;
        for b in blocks {
            let n = b.node.borrow();
            data.extend_from_slice(&n.data);
            needs |= n.needs_grad;
        }
        Ok(Tensor::op_node(vec![rows, cols], data, needs, Op::ConcatRows(blocks.to_vec())))
    }

    /// Stack blocks side by side; all blocks share a row count.
    pub fn concat_cols(blocks: &[Tensor]) -> Result<Tensor> {
        if blocks.is_empty() {
            return Err(Error::Contract(String::from("concat_cols of an empty list")));
        }
        let mut rows = None;
        let mut cols = 0;
        for b in blocks {
            let (r, c) = b.dims2()?;
            match rows {
                None => rows = Some(r),
                Some(r0) if r0 != r => {
                    return Err(Error::Dimension {
                        op: "concat_cols",
                        lhs: vec![r0, cols],
                        rhs: vec![r, c],
                    })
                }
                _ => {}
            }
            cols += c;
        }
        let rows = rows.unwrap();
        let mut data = vec![0.0; rows * cols];
        let mut needs = false;
        let mut offset = 0;
        for b in blocks {
            let n = b.node.borrow();
            let (_, c) = (n.shape[0], n.shape[1]);
            for r in 0..rows {
                data[r * cols + offset..r * cols + offset + c]
                    .copy_from_slice(&n.data[r * c..(r + 1) * c]);
            }
            needs |= n.needs_grad;
            offset += c;
        }
        Ok(Tensor::op_node(vec![rows, cols], data, needs, Op::ConcatCols(blocks.to_vec())))
    }

    /// Rows `from..to`. `from == to` yields a legal empty `0 x cols` tensor.
    pub fn slice_rows(&self, from: usize, to: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if from > to || to > r {
            return Err(Error::Bounds { op: "slice_rows", from, to, extent: r });
        }
        let n = self.node.borrow();
        let data = n.data[from * c..to * c].to_vec();
        let needs = n.needs_grad;
        drop(n);
        Ok(Tensor::op_node(
            vec![to - from, c],
            data,
            needs,
            Op::SliceRows { input: self.clone(), from },
        ))
    }

    /// Columns `from..to`.
    pub fn slice_cols(&self, from: usize, to: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if from > to || to > c {
            return Err(Error::Bounds { op: "slice_cols", from, to, extent: c });
        }
        let n = self.node.borrow();
        let w = to - from;
        let mut data = Vec::with_capacity(r * w);
        for row in 0..r {
            data.extend_from_slice(&n.data[row * c + from..row * c + to]);
        }
        let needs = n.needs_grad;
        drop(n);
        Ok(Tensor::op_node(vec![r, w], data, needs, Op::SliceCols { input: self.clone(), from }))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        let a = self.node.borrow();
        let b = rhs.node.borrow();
        if a.shape != b.shape {
            return Err(Error::Dimension {
                op: "add",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let data: Vec<f64> = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
        let shape = a.shape.clone();
        let needs = a.needs_grad || b.needs_grad;
        drop(a);
        drop(b);
        Ok(Tensor::op_node(shape, data, needs, Op::Add(self.clone(), rhs.clone())))
    }

    /// Elementwise (Hadamard) product of two same-shape tensors.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        let a = self.node.borrow();
        let b = rhs.node.borrow();
        if a.shape != b.shape {
            return Err(Error::Dimension {
                op: "mul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let data: Vec<f64> = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
        let shape = a.shape.clone();
        let needs = a.needs_grad || b.needs_grad;
        drop(a);
        drop(b);
        Ok(Tensor::op_node(shape, data, needs, Op::Mul(self.clone(), rhs.clone())))
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, s: f64) -> Tensor {
        let n = self.node.borrow();
        let data: Vec<f64> = n.data.iter().map(|x| x * s).collect();
        let shape = n.shape.clone();
        let needs = n.needs_grad;
        drop(n);
        Tensor::op_node(shape, data, needs, Op::Scale(self.clone(), s))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.add(&rhs.scale(-1.0))
    }

    /// GELU with the tanh approximation (see [`GELU_C`], [`GELU_A`]).
    pub fn gelu(&self) -> Tensor {
        let n = self.node.borrow();
        let data: Vec<f64> = n.data.iter().map(|&x| gelu_raw(x)).collect();
        let shape = n.shape.clone();
        let needs = n.needs_grad;
        drop(n);
        Tensor::op_node(shape, data, needs, Op::Gelu(self.clone()))
    }

    /// Row-wise softmax with max subtraction. Errors on non-finite input.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let n = self.node.borrow();
        if n.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(String::from("softmax_rows on non-finite input")));
        }
        let mut data = vec![0.0; r * c];
        for row in 0..r {
            let x = &n.data[row * c..(row + 1) * c];
            let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &v) in data[row * c..(row + 1) * c].iter_mut().zip(x) {
                *o = libm::exp(v - max);
                sum += *o;
            }
            for o in &mut data[row * c..(row + 1) * c] {
                *o /= sum;
            }
        }
        let needs = n.needs_grad;
        drop(n);
        Ok(Tensor::op_node(vec![r, c], data, needs, Op::SoftmaxRows(self.clone())))
    }

    /// Normalize each row to mean 0 and variance 1 (epsilon-stabilized).
    /// The learnable gain/bias of a transformer block is applied separately.
    pub fn layernorm_rows(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if c == 0 {
            return Err(Error::Contract(String::from("layernorm_rows on zero columns")));
        }
        let n = self.node.borrow();
        let mut data = vec![0.0; r * c];
        for row in 0..r {
            let x = &n.data[row * c..(row + 1) * c];
            let (mu, var) = row_moments(x);
            let inv = 1.0 / libm::sqrt(var + LAYERNORM_EPS);
            for (o, &v) in data[row * c..(row + 1) * c].iter_mut().zip(x) {
                *o = (v - mu) * inv;
            }
        }
        let needs = n.needs_grad;
        drop(n);
        Ok(Tensor::op_node(vec![r, c], data, needs, Op::LayerNormRows(self.clone())))
    }

    /// Scale each row to unit Euclidean norm. A zero-norm row is an error;
    /// there is no silent epsilon substitution.
    pub fn l2_normalize_rows(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if c == 0 {
            return Err(Error::Contract(String::from("l2_normalize_rows on zero columns")));
        }
        let n = self.node.borrow();
        let mut data = vec![0.0; r * c];
        for row in 0..r {
            let x = &n.data[row * c..(row + 1) * c];
            let norm = libm::sqrt(x.iter().map(|v| v * v).sum());
            if norm == 0.0 {
                return Err(Error::Numeric(format!("l2_normalize_rows: row {row} has zero norm")));
            }
            for (o, &v) in data[row * c..(row + 1) * c].iter_mut().zip(x) {
                *o = v / norm;
            }
        }
        let needs = n.needs_grad;
        drop(n);
        Ok(Tensor::op_node(vec![r, c], data, needs, Op::L2NormalizeRows(self.clone())))
    }

    /// Repeat a `1 x d` row `target_rows` times.
    pub fn broadcast_rows(&self, target_rows: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if r != 1 {
            return Err(Error::Dimension {
                op: "broadcast_rows",
                lhs: vec![r, c],
                rhs: vec![1, c],
            });
        }
        let n = self.node.borrow();
        let mut data = Vec::with_capacity(target_rows * c);
        for _ in 0..target_rows {
            data.extend_from_slice(&n.data);
        }
        let needs = n.needs_grad;
        drop(n);
        Ok(Tensor::op_node(vec![target_rows, c], data, needs, Op::BroadcastRows(self.clone())))
    }

    /// Sum of all elements, as a `1 x 1` tensor.
    pub fn sum_all(&self) -> Tensor {
        let n = self.node.borrow();
        let s: f64 = n.data.iter().sum();
        let needs = n.needs_grad;
        drop(n);
        Tensor::op_node(vec![1, 1], vec![s], needs, Op::SumAll(self.clone()))
    }

    pub fn mean_all(&self) -> Tensor {
        let count = self.numel().max(1);
        self.sum_all().scale(1.0 / count as f64)
    }

    /// Reinterpret the row-major data under a new shape with equal element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let n = self.node.borrow();
        if numel(&shape) != n.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: n.shape.clone(),
                rhs: shape,
            });
        }
        let data = n.data.clone();
        let needs = n.needs_grad;
        drop(n);
        Ok(Tensor::op_node(shape, data, needs, Op::Reshape(self.clone())))
    }

    /// Look up rows of an embedding table: `ids[i]` selects row `i` of the
    /// output. Gradient flows only to the looked-up rows.
    pub fn embed(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let (v, d) = table.dims2()?;
        for &id in ids {
            if id >= v {
                return Err(Error::Vocab { id, vocab_size: v });
            }
        }
        let n = table.node.borrow();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&n.data[id * d..(id + 1) * d]);
        }
        let needs = n.needs_grad;
        drop(n);
        Ok(Tensor::op_node(
            vec![ids.len(), d],
            data,
            needs,
            Op::Embed { table: table.clone(), ids: ids.to_vec() },
        ))
    }

    /// Cut an `[h, w, 3]` image into non-overlapping `patch x patch` squares,
    /// flattened row-major (pixel rows, then pixel columns, channels fastest)
    /// into an `[n_patches, patch*patch*3]` matrix. Patches are ordered
    /// row-major over the patch grid.
    pub fn extract_patches(&self, patch: usize) -> Result<Tensor> {
        let n = self.node.borrow();
        if n.shape.len() != 3 || n.shape[2] != 3 {
            return Err(Error::Contract(format!(
                "extract_patches expects an [h, w, 3] image, got {:?}",
                n.shape
            )));
        }
        let (h, w) = (n.shape[0], n.shape[1]);
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::Config(format!(
                "image {h}x{w} not divisible into {patch}x{patch} patches"
            )));
        }
        let (gr, gc) = (h / patch, w / patch);
        let cols = patch * patch * 3;
        let mut data = Vec::with_capacity(gr * gc * cols);
        for pr in 0..gr {
            for pc in 0..gc {
                for r in 0..patch {
                    for c in 0..patch {
                        let src = ((pr * patch + r) * w + (pc * patch + c)) * 3;
                        data.extend_from_slice(&n.data[src..src + 3]);
                    }
                }
            }
        }
        let needs = n.needs_grad;
        drop(n);
        Ok(Tensor::op_node(
            vec![gr * gc, cols],
            data,
            needs,
            Op::ExtractPatches { image: self.clone(), patch },
        ))
    }

    /// Mean negative log probability of the true class, from a `[batch, c]`
    /// matrix of probabilities (rows already normalized).
    pub fn cross_entropy_from_probs(probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let (b, c) = probs.dims2()?;
        if labels.len() != b {
            return Err(Error::Data(format!(
                "{} labels for a batch of {b} probability rows",
                labels.len()
            )));
        }
        let n = probs.node.borrow();
        let mut sum = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::Data(format!("label {y} out of range for {c} classes")));
            }
            let p = n.data[i * c + y];
            if !(p > 0.0) {
                return Err(Error::Numeric(format!(
                    "cross entropy: probability {p} for sample {i}, class {y}"
                )));
            }
            sum -= libm::log(p);
        }
        let loss = sum / b as f64;
        let needs = n.needs_grad;
        drop(n);
        Ok(Tensor::op_node(
            vec![1, 1],
            vec![loss],
            needs,
            Op::CrossEntropy { probs: probs.clone(), labels: labels.to_vec() },
        ))
    }

    // ── Backward ───────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Fills `grad` on every
    /// `grad_enabled` leaf the loss depends on. Leaf grads accumulate across
    /// calls (callers reset between steps); interior grads are rebuilt on
    /// each call.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.node.borrow().needs_grad {
            // Loss does not depend on any grad-enabled leaf; nothing to do.
            return Ok(());
        }
        let order = self.topo_order();
        for t in &order {
            let mut n = t.node.borrow_mut();
            if !(matches!(n.op, Op::Leaf) && n.grad_enabled) {
                n.grad = None;
            }
        }
        accumulate(self, &[1.0]);
        for t in order.iter().rev() {
            backprop_node(t);
        }
        Ok(())
    }

    /// Post-order over the needs-grad subgraph (inputs before consumers).
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: BTreeSet<usize> = BTreeSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            let key = Rc::as_ptr(&t.node) as usize;
            if !visited.insert(key) {
                continue;
            }
            stack.push((t.clone(), true));
            for input in grad_inputs(&t) {
                stack.push((input, false));
            }
        }
        order
    }
}

/// Inputs of a node that can carry gradient, in a fixed structural order.
fn grad_inputs(t: &Tensor) -> Vec<Tensor> {
    let n = t.node.borrow();
    let all: Vec<Tensor> = match &n.op {
        Op::Leaf => Vec::new(),
        Op::Matmul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![a.clone(), b.clone()],
        Op::ConcatRows(blocks) | Op::ConcatCols(blocks) => blocks.clone(),
        Op::Transpose(x)
        | Op::Scale(x, _)
        | Op::Gelu(x)
        | Op::SoftmaxRows(x)
        | Op::LayerNormRows(x)
        | Op::L2NormalizeRows(x)
        | Op::BroadcastRows(x)
        | Op::SumAll(x)
        | Op::Reshape(x) => vec![x.clone()],
        Op::SliceRows { input, .. } | Op::SliceCols { input, .. } => vec![input.clone()],
        Op::Embed { table, .. } => vec![table.clone()],
        Op::ExtractPatches { image, .. } => vec![image.clone()],
        Op::CrossEntropy { probs, .. } => vec![probs.clone()],
    };
    all.into_iter().filter(|t| t.node.borrow().needs_grad).collect()
}

fn accumulate(t: &Tensor, contrib: &[f64]) {
    let mut n = t.node.borrow_mut();
    debug_assert_eq!(n.data.len(), contrib.len());
    match &mut n.grad {
        Some(g) => {
            for (gi, ci) in g.iter_mut().zip(contrib) {
                *gi += ci;
            }
        }
        None => n.grad = Some(contrib.to_vec()),
    }
}

fn needs(t: &Tensor) -> bool {
    t.node.borrow().needs_grad
}

/// Apply one node's vector-Jacobian product, pushing grad into its inputs.
fn backprop_node(t: &Tensor) {
    let (op, out_shape, out_data, out_grad) = {
        let n = t.node.borrow();
        let grad = match &n.grad {
            Some(g) => g.clone(),
            // Unreachable in a backward sweep, but harmless: no contribution.
            None => return,
        };
        (n.op.clone(), n.shape.clone(), n.data.clone(), grad)
    };
    match op {
        Op::Leaf => {}
        Op::Matmul(a, b) => {
            let (m, n_) = (out_shape[0], out_shape[1]);
            let k = a.node.borrow().shape[1];
            if needs(&a) {
                let b_data = b.node.borrow().data.clone();
                let bt = transpose_raw(&b_data, k, n_);
                accumulate(&a, &matmul_raw(&out_grad, &bt, m, n_, k));
            }
            if needs(&b) {
                let a_data = a.node.borrow().data.clone();
                let at = transpose_raw(&a_data, m, k);
                accumulate(&b, &matmul_raw(&at, &out_grad, k, m, n_));
            }
        }
        Op::Transpose(x) => {
            accumulate(&x, &transpose_raw(&out_grad, out_shape[0], out_shape[1]));
        }
        Op::ConcatRows(blocks) => {
            let cols = out_shape[1];
            let mut offset = 0;
            for b in &blocks {
                let r = b.node.borrow().shape[0];
                if needs(b) {
                    accumulate(b, &out_grad[offset * cols..(offset + r) * cols]);
                }
                offset += r;
            }
        }
        Op::ConcatCols(blocks) => {
            let (rows, cols) = (out_shape[0], out_shape[1]);
            let mut offset = 0;
            for b in &blocks {
                let c = b.node.borrow().shape[1];
                if needs(b) {
                    let mut g = vec![0.0; rows * c];
                    for r in 0..rows {
                        g[r * c..(r + 1) * c]
                            .copy_from_slice(&out_grad[r * cols + offset..r * cols + offset + c]);
                    }
                    accumulate(b, &g);
                }
                offset += c;
            }
        }
        Op::SliceRows { input, from } => {
            let (ir, ic) = (input.node.borrow().shape[0], input.node.borrow().shape[1]);
            let mut g = vec![0.0; ir * ic];
            g[from * ic..from * ic + out_grad.len()].copy_from_slice(&out_grad);
            accumulate(&input, &g);
        }
        Op::SliceCols { input, from } => {
            let (ir, ic) = (input.node.borrow().shape[0], input.node.borrow().shape[1]);
            let w = out_shape[1];
            let mut g = vec![0.0; ir * ic];
            for r in 0..ir {
                g[r * ic + from..r * ic + from + w].copy_from_slice(&out_grad[r * w..(r + 1) * w]);
            }
            accumulate(&input, &g);
        }
        Op::Add(a, b) => {
            if needs(&a) {
                accumulate(&a, &out_grad);
            }
            if needs(&b) {
                accumulate(&b, &out_grad);
            }
        }
        Op::Mul(a, b) => {
            if needs(&a) {
                let b_data = b.node.borrow().data.clone();
                let g: Vec<f64> = out_grad.iter().zip(&b_data).map(|(g, v)| g * v).collect();
                accumulate(&a, &g);
            }
            if needs(&b) {
                let a_data = a.node.borrow().data.clone();
                let g: Vec<f64> = out_grad.iter().zip(&a_data).map(|(g, v)| g * v).collect();
                accumulate(&b, &g);
            }
        }
        Op::Scale(x, s) => {
            let g: Vec<f64> = out_grad.iter().map(|g| g * s).collect();
            accumulate(&x, &g);
        }
        Op::Gelu(x) => {
            let x_data = x.node.borrow().data.clone();
            let g: Vec<f64> = out_grad
                .iter()
                .zip(&x_data)
                .map(|(g, &v)| g * gelu_grad_raw(v))
                .collect();
            accumulate(&x, &g);
        }
        Op::SoftmaxRows(x) => {
            let (r, c) = (out_shape[0], out_shape[1]);
            let mut g = vec![0.0; r * c];
            for row in 0..r {
                let y = &out_data[row * c..(row + 1) * c];
                let dy = &out_grad[row * c..(row + 1) * c];
                let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                for i in 0..c {
                    g[row * c + i] = y[i] * (dy[i] - dot);
                }
            }
            accumulate(&x, &g);
        }
        Op::LayerNormRows(x) => {
            let (r, c) = (out_shape[0], out_shape[1]);
            let x_data = x.node.borrow().data.clone();
            let mut g = vec![0.0; r * c];
            for row in 0..r {
                let xs = &x_data[row * c..(row + 1) * c];
                let y = &out_data[row * c..(row + 1) * c];
                let dy = &out_grad[row * c..(row + 1) * c];
                let (_, var) = row_moments(xs);
                let inv = 1.0 / libm::sqrt(var + LAYERNORM_EPS);
                let mean_dy: f64 = dy.iter().sum::<f64>() / c as f64;
                let mean_dyy: f64 = dy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                for i in 0..c {
                    g[row * c + i] = inv * (dy[i] - mean_dy - y[i] * mean_dyy);
                }
            }
            accumulate(&x, &g);
        }
        Op::L2NormalizeRows(x) => {
            let (r, c) = (out_shape[0], out_shape[1]);
            let x_data = x.node.borrow().data.clone();
            let mut g = vec![0.0; r * c];
            for row in 0..r {
                let xs = &x_data[row * c..(row + 1) * c];
                let y = &out_data[row * c..(row + 1) * c];
                let dy = &out_grad[row * c..(row + 1) * c];
                let norm = libm::sqrt(xs.iter().map(|v| v * v).sum());
                let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                for i in 0..c {
                    g[row * c + i] = (dy[i] - y[i] * dot) / norm;
                }
            }
            accumulate(&x, &g);
        }
        Op::BroadcastRows(x) => {
            let (r, c) = (out_shape[0], out_shape[1]);
            let mut g = vec![0.0; c];
            for row in 0..r {
                for i in 0..c {
                    g[i] += out_grad[row * c + i];
                }
            }
            accumulate(&x, &g);
        }
        Op::SumAll(x) => {
            let g = vec![out_grad[0]; x.numel()];
            accumulate(&x, &g);
        }
        Op::Reshape(x) => {
            accumulate(&x, &out_grad);
        }
        Op::Embed { table, ids } => {
            let (v, d) = {
                let n = table.node.borrow();
                (n.shape[0], n.shape[1])
            };
            let mut g = vec![0.0; v * d];
            for (row, &id) in ids.iter().enumerate() {
                for i in 0..d {
                    g[id * d + i] += out_grad[row * d + i];
                }
            }
            accumulate(&table, &g);
        }
        Op::ExtractPatches { image, patch } => {
            let (h, w) = {
                let n = image.node.borrow();
                (n.shape[0], n.shape[1])
            };
            let gc = w / patch;
            let mut g = vec![0.0; h * w * 3];
            let mut src = 0;
            for pr in 0..h / patch {
                for pc in 0..gc {
                    for r in 0..patch {
                        for c in 0..patch {
                            let dst = ((pr * patch + r) * w + (pc * patch + c)) * 3;
                            for ch in 0..3 {
                                g[dst + ch] += out_grad[src + ch];
                            }
                            src += 3;
                        }
                    }
                }
            }
            accumulate(&image, &g);
        }
        Op::CrossEntropy { probs, labels } => {
            let (b, c) = {
                let n = probs.node.borrow();
                (n.shape[0], n.shape[1])
            };
            let p_data = probs.node.borrow().data.clone();
            let scale = out_grad[0] / b as f64;
            let mut g = vec![0.0; b * c];
            for (i, &y) in labels.iter().enumerate() {
                g[i * c + y] = -scale / p_data[i * c + y];
            }
            accumulate(&probs, &g);
        }
    }
}

// ── Raw kernels ────────────────────────────────────────────────────────

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

fn row_moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, var)
}

fn gelu_raw(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(GELU_C * (x + GELU_A * x * x * x)))
}

fn gelu_grad_raw(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = libm::tanh(inner);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
