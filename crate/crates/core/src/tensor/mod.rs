//! Dense n-dimensional tensors with reverse-mode automatic differentiation.
//!
//! The engine is a recording tape: a [`Graph`] owns every tensor created
//! during a forward pass and appends one record per primitive op whose
//! inputs require gradients. [`Graph::backward`] walks the records in
//! reverse, visiting each exactly once, and leaves `d loss / d tensor` in
//! the grad buffer of every `requires_grad` tensor.
//!
//! Image tensors are row-major NCHW throughout. There is no broadcasting
//! beyond bias addition; any other shape disagreement is an error.

pub mod check;
pub mod kernels;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use kernels::{AffineMap, SampleMode};

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// A dense n-dimensional value, plus an optional gradient buffer of the
/// same shape. Data is immutable once the tensor enters a graph; only the
/// grad buffer is written afterwards.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    /// Build a tensor, checking that the element count matches the shape.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} wants {} elements, data has {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![T::zero(); numel], requires_grad: false, grad: None }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    /// Convert element type, e.g. a 32-bit tensor into the 64-bit engine
    /// for finite-difference work.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64_lossy())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Scalar loss handle: the value for logging plus the graph node to seed
/// backward from.
#[derive(Clone, Copy, Debug)]
pub struct LossValue<T> {
    id: TensorId,
    value: T,
}

impl<T: Scalar> LossValue<T> {
    pub fn id(&self) -> TensorId {
        self.id
    }

    pub fn value(&self) -> T {
        self.value
    }
}

enum Op<T> {
    Add,
    Mul,
    Scale(T),
    Relu,
    MatMul { trans_b: bool },
    AddBias,
    Conv2d { stride: usize, pad: usize },
    MaxPool2d { argmax: Vec<usize> },
    Flatten,
    Sum,
    SoftmaxCrossEntropy { labels: Vec<usize>, probs: Vec<T> },
    AffineSample { map: AffineMap, mode: SampleMode },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Relu => "relu",
            Op::MatMul { .. } => "matmul",
            Op::AddBias => "add_bias",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::Flatten => "flatten",
            Op::Sum => "sum",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::AffineSample { .. } => "affine_sample",
        }
    }
}

struct OpRecord<T> {
    op: Op<T>,
    inputs: Vec<TensorId>,
    output: TensorId,
}

/// Recording tape for one forward/backward cycle. A graph is used by one
/// thread at a time; independent graphs may run in parallel.
pub struct Graph<T> {
    values: Vec<Tensor<T>>,
    records: Vec<OpRecord<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { values: Vec::new(), records: Vec::new(), consumed: false }
    }

    /// Insert an externally built tensor as a leaf.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> TensorId {
        let id = TensorId(self.values.len());
        self.values.push(tensor);
        id
    }

    /// Insert a constant (non-differentiated) leaf.
    pub fn constant(&mut self, tensor: Tensor<T>) -> TensorId {
        let mut t = tensor;
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor<T> {
        &self.values[id.0]
    }

    /// Gradient buffer of a tensor, populated by [`Graph::backward`].
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.values[id.0].grad()
    }

    /// Wrap a single-element tensor as a loss handle.
    pub fn loss_value(&self, id: TensorId) -> Result<LossValue<T>> {
        let t = self.tensor(id);
        if t.numel() != 1 {
            return Err(Error::shape("loss", format!("expected a scalar, got shape {:?}", t.shape())));
        }
        Ok(LossValue { id, value: t.item() })
    }

    fn push_result(
        &mut self,
        op: Op<T>,
        inputs: Vec<TensorId>,
        shape: Vec<usize>,
        data: Vec<T>,
    ) -> Result<TensorId> {
        let requires_grad = inputs.iter().any(|id| self.values[id.0].requires_grad);
        let out = Tensor { shape, data, requires_grad, grad: None };
        if !out.all_finite() {
            return Err(Error::non_finite(format!("forward {}", op.name())));
        }
        let id = TensorId(self.values.len());
        self.values.push(out);
        if requires_grad {
            self.records.push(OpRecord { op, inputs, output: id });
        }
        Ok(id)
    }

    // ── Primitive ops ───────────────────────────────────────────────────

    /// Elementwise addition of two same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (self.tensor(a), self.tensor(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| x + y).collect();
        let shape = ta.shape.clone();
        self.push_result(Op::Add, vec![a, b], shape, data)
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (self.tensor(a), self.tensor(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| x * y).collect();
        let shape = ta.shape.clone();
        self.push_result(Op::Mul, vec![a, b], shape, data)
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, x: TensorId, c: T) -> Result<TensorId> {
        let t = self.tensor(x);
        let data = t.data.iter().map(|&v| v * c).collect();
        let shape = t.shape.clone();
        self.push_result(Op::Scale(c), vec![x], shape, data)
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let t = self.tensor(x);
        let data = t.data.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let shape = t.shape.clone();
        self.push_result(Op::Relu, vec![x], shape, data)
    }

    /// `a (m x k)` times `b (k x n)`, or `b (n x k)` when `trans_b`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId, trans_b: bool) -> Result<TensorId> {
        let (ta, tb) = (self.tensor(a), self.tensor(b));
        let [m, k] = as_2d("matmul", ta.shape())?;
        let [bk, bn] = as_2d("matmul", tb.shape())?;
        let (inner, n) = if trans_b { (bn, bk) } else { (bk, bn) };
        if k != inner {
            return Err(Error::shape(
                "matmul",
                format!("inner dims differ: {}x{} vs {:?} (trans_b={})", m, k, tb.shape(), trans_b),
            ));
        }
        let data = kernels::matmul_forward(&ta.data, &tb.data, m, k, n, trans_b);
        self.push_result(Op::MatMul { trans_b }, vec![a, b], vec![m, n], data)
    }

    /// Broadcast bias addition: per column for `n x k` inputs with a `k`
    /// bias, per channel for NCHW inputs with a `c` bias. The only
    /// broadcasting the engine performs.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (tx, tb) = (self.tensor(x), self.tensor(bias));
        if tb.shape.len() != 1 {
            return Err(Error::shape("add_bias", format!("bias must be rank 1, got {:?}", tb.shape())));
        }
        let b = tb.shape[0];
        let data: Vec<T> = match tx.shape.len() {
            2 => {
                let k = tx.shape[1];
                if k != b {
                    return Err(Error::shape("add_bias", format!("{:?} vs bias [{}]", tx.shape(), b)));
                }
                tx.data.iter().enumerate().map(|(i, &v)| v + tb.data[i % k]).collect()
            }
            4 => {
                let (c, hw) = (tx.shape[1], tx.shape[2] * tx.shape[3]);
                if c != b {
                    return Err(Error::shape("add_bias", format!("{:?} vs bias [{}]", tx.shape(), b)));
                }
                tx.data.iter().enumerate().map(|(i, &v)| v + tb.data[(i / hw) % c]).collect()
            }
            _ => {
                return Err(Error::shape("add_bias", format!("input must be rank 2 or 4, got {:?}", tx.shape())))
            }
        };
        let shape = tx.shape.clone();
        self.push_result(Op::AddBias, vec![x, bias], shape, data)
    }

    /// NCHW convolution with a `f x c x kh x kw` kernel.
    pub fn conv2d(&mut self, x: TensorId, kernel: TensorId, stride: usize, pad: usize) -> Result<TensorId> {
        let (tx, tk) = (self.tensor(x), self.tensor(kernel));
        let ishape = as_4d("conv2d", tx.shape())?;
        let kshape = as_4d("conv2d", tk.shape())?;
        if ishape[1] != kshape[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {} vs kernel channels {}", ishape[1], kshape[1]),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive".to_string()));
        }
        if ishape[2] + 2 * pad < kshape[2] || ishape[3] + 2 * pad < kshape[3] {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {}x{} larger than padded input {}x{}", kshape[2], kshape[3], ishape[2] + 2 * pad, ishape[3] + 2 * pad),
            ));
        }
        let (data, oshape) = kernels::conv2d_forward(&tx.data, ishape, &tk.data, kshape, stride, pad);
        self.push_result(Op::Conv2d { stride, pad }, vec![x, kernel], oshape.to_vec(), data)
    }

    /// Non-overlapping square-window max pooling over NCHW input.
    pub fn maxpool2d(&mut self, x: TensorId, window: usize) -> Result<TensorId> {
        let tx = self.tensor(x);
        let ishape = as_4d("maxpool2d", tx.shape())?;
        if window == 0 || ishape[2] < window || ishape[3] < window {
            return Err(Error::shape(
                "maxpool2d",
                format!("window {} on {}x{} input", window, ishape[2], ishape[3]),
            ));
        }
        let (data, oshape, argmax) = kernels::maxpool2d_forward(&tx.data, ishape, window);
        self.push_result(Op::MaxPool2d { argmax }, vec![x], oshape.to_vec(), data)
    }

    /// Collapse all trailing dims: `n x ...` becomes `n x rest`.
    pub fn flatten(&mut self, x: TensorId) -> Result<TensorId> {
        let tx = self.tensor(x);
        if tx.shape.len() < 2 {
            return Err(Error::shape("flatten", format!("rank must be >= 2, got {:?}", tx.shape())));
        }
        let n = tx.shape[0];
        let rest: usize = tx.shape[1..].iter().product();
        let data = tx.data.clone();
        self.push_result(Op::Flatten, vec![x], vec![n, rest], data)
    }

    /// Sum of all elements, as a 1-element tensor.
    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let tx = self.tensor(x);
        let total = tx.data.iter().cloned().sum();
        self.push_result(Op::Sum, vec![x], vec![1], vec![total])
    }

    /// Fused softmax + cross-entropy, averaged over the batch.
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let tl = self.tensor(logits);
        let [n, k] = as_2d("softmax_cross_entropy", tl.shape())?;
        if labels.len() != n {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} logit rows vs {} labels", n, labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("label {} out of range for {} classes", bad, k),
            ));
        }
        let (loss, probs) = kernels::softmax_cross_entropy_forward(&tl.data, n, k, labels);
        self.push_result(
            Op::SoftmaxCrossEntropy { labels: labels.to_vec(), probs },
            vec![logits],
            vec![1],
            vec![loss],
        )
    }

    /// Warp the trailing `h x w` planes through an affine map (output to
    /// source coordinates), zero-filling outside the source.
    pub fn affine_sample(&mut self, x: TensorId, map: AffineMap, mode: SampleMode) -> Result<TensorId> {
        let tx = self.tensor(x);
        if tx.shape.len() < 2 {
            return Err(Error::shape("affine_sample", format!("rank must be >= 2, got {:?}", tx.shape())));
        }
        let data = kernels::affine_sample_forward(&tx.data, &tx.shape, &map, mode);
        let shape = tx.shape.clone();
        self.push_result(Op::AffineSample { map, mode }, vec![x], shape, data)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar root. Populates the grad buffer of every
    /// `requires_grad` tensor reachable from the root and consumes the
    /// graph; a second call is an error.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.values[root.0].numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got shape {:?}", self.values[root.0].shape()),
            ));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.values.len()];
        grads[root.0] = Some(vec![T::one()]);

        for rec in self.records.iter().rev() {
            let gout = match grads[rec.output.0].take() {
                Some(g) => g,
                None => continue, // not on the path to the root
            };
            let input_grads = self.op_backward(rec, &gout)?;
            grads[rec.output.0] = Some(gout);
            for (id, g) in rec.inputs.iter().zip(input_grads) {
                let g = match g {
                    Some(g) => g,
                    None => continue,
                };
                match &mut grads[id.0] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&g) {
                            *a = *a + *v;
                        }
                    }
                    slot => *slot = Some(g),
                }
            }
        }

        for (value, grad) in self.values.iter_mut().zip(grads) {
            if let (true, Some(g)) = (value.requires_grad, grad) {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::non_finite("backward gradient"));
                }
                value.grad = Some(g);
            }
        }
        Ok(())
    }

    /// Per-op adjoint: gradient w.r.t. each input (None for inputs that do
    /// not require grad and have no differentiable ancestors).
    fn op_backward(&self, rec: &OpRecord<T>, gout: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let input = |i: usize| &self.values[rec.inputs[i].0];
        Ok(match &rec.op {
            Op::Add => vec![Some(gout.to_vec()), Some(gout.to_vec())],
            Op::Mul => {
                let (a, b) = (input(0), input(1));
                let ga = gout.iter().zip(&b.data).map(|(&g, &v)| g * v).collect();
                let gb = gout.iter().zip(&a.data).map(|(&g, &v)| g * v).collect();
                vec![Some(ga), Some(gb)]
            }
            Op::Scale(c) => vec![Some(gout.iter().map(|&g| g * *c).collect())],
            Op::Relu => {
                let x = input(0);
                let g = gout
                    .iter()
                    .zip(&x.data)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                vec![Some(g)]
            }
            Op::MatMul { trans_b } => {
                let (a, b) = (input(0), input(1));
                let (m, k) = (a.shape[0], a.shape[1]);
                let n = self.values[rec.output.0].shape[1];
                let (ga, gb) = kernels::matmul_backward(&a.data, &b.data, gout, m, k, n, *trans_b);
                vec![Some(ga), Some(gb)]
            }
            Op::AddBias => {
                let x = input(0);
                let blen = input(1).data.len();
                let mut gb = vec![T::zero(); blen];
                match x.shape.len() {
                    2 => {
                        for (i, &g) in gout.iter().enumerate() {
                            gb[i % blen] = gb[i % blen] + g;
                        }
                    }
                    _ => {
                        let hw = x.shape[2] * x.shape[3];
                        for (i, &g) in gout.iter().enumerate() {
                            let c = (i / hw) % blen;
                            gb[c] = gb[c] + g;
                        }
                    }
                }
                vec![Some(gout.to_vec()), Some(gb)]
            }
            Op::Conv2d { stride, pad } => {
                let (x, k) = (input(0), input(1));
                let ishape = as_4d("conv2d", x.shape())?;
                let kshape = as_4d("conv2d", k.shape())?;
                let oshape = as_4d("conv2d", self.values[rec.output.0].shape())?;
                let (gin, gker) =
                    kernels::conv2d_backward(&x.data, ishape, &k.data, kshape, *stride, *pad, gout, oshape);
                vec![Some(gin), Some(gker)]
            }
            Op::MaxPool2d { argmax } => {
                let x = input(0);
                let mut gin = vec![T::zero(); x.data.len()];
                for (o, &src) in argmax.iter().enumerate() {
                    gin[src] = gin[src] + gout[o];
                }
                vec![Some(gin)]
            }
            Op::Flatten => vec![Some(gout.to_vec())],
            Op::Sum => {
                let x = input(0);
                vec![Some(vec![gout[0]; x.data.len()])]
            }
            Op::SoftmaxCrossEntropy { labels, probs } => {
                let [n, k] = as_2d("softmax_cross_entropy", input(0).shape())?;
                vec![Some(kernels::softmax_cross_entropy_backward(probs, n, k, labels, gout[0]))]
            }
            Op::AffineSample { map, mode } => {
                let x = input(0);
                vec![Some(kernels::affine_sample_backward(gout, &x.shape, map, *mode))]
            }
        })
    }
}

fn as_2d(op: &'static str, shape: &[usize]) -> Result<[usize; 2]> {
    match shape {
        [a, b] => Ok([*a, *b]),
        _ => Err(Error::shape(op, format!("expected rank 2, got {:?}", shape))),
    }
}

fn as_4d(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        [a, b, c, d] => Ok([*a, *b, *c, *d]),
        _ => Err(Error::shape(op, format!("expected rank 4 (NCHW), got {:?}", shape))),
    }
}

#[cfg(test)]
mod tests;
