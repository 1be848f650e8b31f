//! Dense f64 tensors with a dynamically recorded derivative graph.
//!
//! Every operation on tensors that require gradients records its inputs in
//! the result node. Backward rules are themselves written with tensor
//! operations, so a backward pass run with graph recording enabled produces
//! gradients that can be differentiated again. That second pass is what a
//! gradient penalty needs.

use std::cell::Cell;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::conv::{self, ConvGeom, ConvMode};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Whether new operations are currently recorded on the graph.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` with graph recording switched on or off, restoring the previous
/// state afterwards.
pub fn with_grad_mode<R>(enabled: bool, f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(enabled)));
    f()
}

/// Runs `f` without recording any operations.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    with_grad_mode(false, f)
}

#[derive(Clone)]
pub(crate) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Neg(Tensor),
    Scale(Tensor, f64),
    AddScalar(Tensor),
    PowF(Tensor, f64),
    Exp(Tensor),
    Tanh(Tensor),
    Sigmoid(Tensor),
    /// Piecewise-linear map with a constant derivative mask.
    Masked(Tensor, Rc<Vec<f64>>),
    /// First-order-only SiLU; its backward is computed numerically.
    FusedSilu(Tensor),
    MatMul(Tensor, Tensor),
    Transpose(Tensor),
    Reshape(Tensor),
    BroadcastTo(Tensor),
    SumTo(Tensor),
    Gather(Tensor, Rc<Vec<usize>>),
    ScatterAdd(Tensor, Rc<Vec<usize>>),
    Slice {
        src: Tensor,
        axis: usize,
        start: usize,
    },
    Pad {
        src: Tensor,
        axis: usize,
        start: usize,
    },
    Concat(Vec<Tensor>, usize),
    Conv(Tensor, Tensor, ConvMode, ConvGeom),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::PowF(..) => "powf",
            Op::Exp(..) => "exp",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Masked(..) => "masked",
            Op::FusedSilu(..) => "fused_silu",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::BroadcastTo(..) => "broadcast_to",
            Op::SumTo(..) => "sum_to",
            Op::Gather(..) => "gather",
            Op::ScatterAdd(..) => "scatter_add",
            Op::Slice { .. } => "slice",
            Op::Pad { .. } => "pad",
            Op::Concat(..) => "concat",
            Op::Conv(..) => "conv",
        }
    }

    /// Ops whose backward rule is expressed with recorded tensor ops.
    pub(crate) fn twice_differentiable(&self) -> bool {
        !matches!(self, Op::FusedSilu(..))
    }

    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![a, b],
            Op::Conv(a, b, ..) => vec![a, b],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::PowF(a, _)
            | Op::Exp(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Masked(a, _)
            | Op::FusedSilu(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::BroadcastTo(a)
            | Op::SumTo(a)
            | Op::Gather(a, _)
            | Op::ScatterAdd(a, _) => vec![a],
            Op::Slice { src, .. } | Op::Pad { src, .. } => vec![src],
            Op::Concat(parts, _) => parts.iter().collect(),
        }
    }
}

pub(crate) struct Node {
    pub(crate) id: usize,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Option<Op>,
}

/// Reference-counted tensor handle. Cloning is cheap and shares the node.
#[derive(Clone)]
pub struct Tensor(pub(crate) Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Tensor {
    fn make(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Option<Op>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            op,
        }))
    }

    /// Constant tensor (no gradient tracking).
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            numel(shape),
            data.len(),
            "shape {:?} does not match {} values",
            shape,
            data.len()
        );
        Self::make(shape.to_vec(), data, false, None)
    }

    /// Leaf tensor that accumulates gradients.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(numel(shape), data.len());
        Self::make(shape.to_vec(), data, true, None)
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(&[], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_vec(shape, vec![0.0; numel(shape)])
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::from_vec(shape, vec![v; numel(shape)])
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::from_vec(&self.0.shape, self.0.data.clone())
    }

    /// Same values as a fresh gradient-tracking leaf.
    pub fn detach_param(&self) -> Self {
        Self::param(&self.0.shape, self.0.data.clone())
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub(crate) fn id(&self) -> usize {
        self.0.id
    }

    pub(crate) fn op(&self) -> Option<&Op> {
        self.0.op.as_ref()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    fn record(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Self {
        let track = grad_enabled() && op.parents().iter().any(|p| p.requires_grad());
        if track {
            Self::make(shape, data, true, Some(op))
        } else {
            Self::make(shape, data, false, None)
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.0.data.iter().map(|&v| f(v)).collect()
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.0
            .data
            .iter()
            .zip(other.0.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect()
    }

    /// Brings `self` and `other` to a common shape, numpy style, with rank
    /// alignment on the right.
    fn broadcast_pair(&self, other: &Tensor) -> (Tensor, Tensor) {
        if self.shape() == other.shape() {
            return (self.clone(), other.clone());
        }
        let rank = self.shape().len().max(other.shape().len());
        let pad = |t: &Tensor| -> Tensor {
            if t.shape().len() == rank {
                t.clone()
            } else {
                let mut s = vec![1; rank - t.shape().len()];
                s.extend_from_slice(t.shape());
                t.reshape(&s)
            }
        };
        let (a, b) = (pad(self), pad(other));
        let target: Vec<usize> = a
            .shape()
            .iter()
            .zip(b.shape())
            .map(|(&x, &y)| {
                assert!(
                    x == y || x == 1 || y == 1,
                    "cannot broadcast {:?} with {:?}",
                    self.shape(),
                    other.shape()
                );
                x.max(y)
            })
            .collect();
        (a.broadcast_to(&target), b.broadcast_to(&target))
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        let (a, b) = self.broadcast_pair(other);
        let data = a.zip(&b, |x, y| x + y);
        Self::record(a.shape().to_vec(), data, Op::Add(a, b))
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let (a, b) = self.broadcast_pair(other);
        let data = a.zip(&b, |x, y| x - y);
        Self::record(a.shape().to_vec(), data, Op::Sub(a, b))
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        let (a, b) = self.broadcast_pair(other);
        let data = a.zip(&b, |x, y| x * y);
        Self::record(a.shape().to_vec(), data, Op::Mul(a, b))
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        self.mul(&other.powf(-1.0))
    }

    pub fn neg(&self) -> Tensor {
        Self::record(self.shape().to_vec(), self.map(|v| -v), Op::Neg(self.clone()))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        Self::record(
            self.shape().to_vec(),
            self.map(|v| v * c),
            Op::Scale(self.clone(), c),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        Self::record(
            self.shape().to_vec(),
            self.map(|v| v + c),
            Op::AddScalar(self.clone()),
        )
    }

    pub fn powf(&self, p: f64) -> Tensor {
        Self::record(
            self.shape().to_vec(),
            self.map(|v| v.powf(p)),
            Op::PowF(self.clone(), p),
        )
    }

    pub fn square(&self) -> Tensor {
        self.mul(self)
    }

    pub fn sqrt(&self) -> Tensor {
        self.powf(0.5)
    }

    pub fn exp(&self) -> Tensor {
        Self::record(self.shape().to_vec(), self.map(f64::exp), Op::Exp(self.clone()))
    }

    pub fn tanh(&self) -> Tensor {
        Self::record(self.shape().to_vec(), self.map(f64::tanh), Op::Tanh(self.clone()))
    }

    pub fn sigmoid(&self) -> Tensor {
        Self::record(
            self.shape().to_vec(),
            self.map(|v| 1.0 / (1.0 + (-v).exp())),
            Op::Sigmoid(self.clone()),
        )
    }

    /// `x * sigmoid(x)`, built from recorded primitives.
    pub fn silu(&self) -> Tensor {
        self.mul(&self.sigmoid())
    }

    /// SiLU as a single node whose backward is not recorded. Faster, but
    /// unusable under a second differentiation pass.
    pub fn silu_fused(&self) -> Tensor {
        let data = self.map(|v| v / (1.0 + (-v).exp()));
        Self::record(self.shape().to_vec(), data, Op::FusedSilu(self.clone()))
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let mask: Vec<f64> = self.map(|v| if v > 0.0 { 1.0 } else { slope });
        let data = self.zip_mask(&mask);
        Self::record(
            self.shape().to_vec(),
            data,
            Op::Masked(self.clone(), Rc::new(mask)),
        )
    }

    pub fn relu(&self) -> Tensor {
        self.leaky_relu(0.0)
    }

    /// `|x|`, with derivative `sign(x)` (zero at zero).
    pub fn abs(&self) -> Tensor {
        let mask: Vec<f64> = self.map(|v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        });
        let data = self.zip_mask(&mask);
        Self::record(
            self.shape().to_vec(),
            data,
            Op::Masked(self.clone(), Rc::new(mask)),
        )
    }

    fn zip_mask(&self, mask: &[f64]) -> Vec<f64> {
        self.0.data.iter().zip(mask).map(|(v, m)| v * m).collect()
    }

    /// Multiplies elementwise by a constant mask.
    pub(crate) fn mul_mask(&self, mask: &Rc<Vec<f64>>) -> Tensor {
        let data = self.zip_mask(mask);
        Self::record(
            self.shape().to_vec(),
            data,
            Op::Masked(self.clone(), mask.clone()),
        )
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (a, b) = (self.shape(), other.shape());
        assert!(
            a.len() == 2 && b.len() == 2 && a[1] == b[0],
            "matmul shapes {:?} x {:?}",
            a,
            b
        );
        let (m, k, n) = (a[0], a[1], b[1]);
        let mut out = vec![0.0; m * n];
        if m > 0 && k > 0 && n > 0 {
            // SAFETY: both operands are dense row-major with the checked shapes.
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    self.data().as_ptr(),
                    k as isize,
                    1,
                    other.data().as_ptr(),
                    n as isize,
                    1,
                    0.0,
                    out.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        Self::record(vec![m, n], out, Op::MatMul(self.clone(), other.clone()))
    }

    /// Transpose of a 2-D tensor.
    pub fn t(&self) -> Tensor {
        let s = self.shape();
        assert_eq!(s.len(), 2, "transpose needs a matrix, got {:?}", s);
        let (m, n) = (s[0], s[1]);
        let x = self.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        Self::record(vec![n, m], out, Op::Transpose(self.clone()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            numel(shape),
            self.numel(),
            "reshape {:?} -> {:?}",
            self.shape(),
            shape
        );
        if shape == self.shape() {
            return self.clone();
        }
        Self::record(shape.to_vec(), self.0.data.clone(), Op::Reshape(self.clone()))
    }

    /// Repeats size-1 axes up to `shape` (ranks must match).
    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        if shape == self.shape() {
            return self.clone();
        }
        let src = self.shape();
        assert_eq!(src.len(), shape.len(), "broadcast {:?} -> {:?}", src, shape);
        let src_strides = strides(src);
        let eff: Vec<usize> = src
            .iter()
            .zip(shape)
            .zip(&src_strides)
            .map(|((&s, &d), &st)| {
                assert!(s == d || s == 1, "broadcast {:?} -> {:?}", src, shape);
                if s == 1 {
                    0
                } else {
                    st
                }
            })
            .collect();
        let total = numel(shape);
        let mut out = Vec::with_capacity(total);
        let mut idx = vec![0usize; shape.len()];
        let x = self.data();
        for _ in 0..total {
            let off: usize = idx.iter().zip(&eff).map(|(i, s)| i * s).sum();
            out.push(x[off]);
            for d in (0..shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Self::record(shape.to_vec(), out, Op::BroadcastTo(self.clone()))
    }

    /// Sums over axes where `shape` has size 1 (ranks must match).
    pub fn sum_to(&self, shape: &[usize]) -> Tensor {
        if shape == self.shape() {
            return self.clone();
        }
        let src = self.shape();
        assert_eq!(src.len(), shape.len(), "sum_to {:?} -> {:?}", src, shape);
        let dst_strides = strides(shape);
        let eff: Vec<usize> = src
            .iter()
            .zip(shape)
            .zip(&dst_strides)
            .map(|((&s, &d), &st)| {
                assert!(s == d || d == 1, "sum_to {:?} -> {:?}", src, shape);
                if d == 1 {
                    0
                } else {
                    st
                }
            })
            .collect();
        let mut out = vec![0.0; numel(shape)];
        let mut idx = vec![0usize; src.len()];
        for &v in self.data() {
            let off: usize = idx.iter().zip(&eff).map(|(i, s)| i * s).sum();
            out[off] += v;
            for d in (0..src.len()).rev() {
                idx[d] += 1;
                if idx[d] < src[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Self::record(shape.to_vec(), out, Op::SumTo(self.clone()))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self) -> Tensor {
        let ones = vec![1; self.shape().len()];
        self.sum_to(&ones).reshape(&[])
    }

    pub fn mean(&self) -> Tensor {
        self.sum().scale(1.0 / self.numel() as f64)
    }

    /// Sums over `axis`, keeping it with size 1.
    pub fn sum_axis_keep(&self, axis: usize) -> Tensor {
        let mut s = self.shape().to_vec();
        s[axis] = 1;
        self.sum_to(&s)
    }

    /// Selects rows of a 2-D table.
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        let s = self.shape();
        assert_eq!(s.len(), 2, "gather_rows needs a table, got {:?}", s);
        let (n, d) = (s[0], s[1]);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            assert!(i < n, "row {} out of range for table with {} rows", i, n);
            out.extend_from_slice(&self.data()[i * d..(i + 1) * d]);
        }
        Self::record(
            vec![idx.len(), d],
            out,
            Op::Gather(self.clone(), Rc::new(idx.to_vec())),
        )
    }

    /// Adds row `r` of `self` into row `idx[r]` of an `n_rows` table.
    pub(crate) fn scatter_add_rows(&self, idx: &Rc<Vec<usize>>, n_rows: usize) -> Tensor {
        let d = self.shape()[1];
        let mut out = vec![0.0; n_rows * d];
        for (r, &i) in idx.iter().enumerate() {
            for j in 0..d {
                out[i * d + j] += self.data()[r * d + j];
            }
        }
        Self::record(
            vec![n_rows, d],
            out,
            Op::ScatterAdd(self.clone(), idx.clone()),
        )
    }

    fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
        (numel(&shape[..axis]), numel(&shape[axis + 1..]))
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let s = self.shape();
        assert!(start + len <= s[axis], "slice out of range on {:?}", s);
        let (outer, inner) = Self::outer_inner(s, axis);
        let full = s[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner;
            out.extend_from_slice(&self.data()[base + start * inner..base + (start + len) * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        Self::record(
            shape,
            out,
            Op::Slice {
                src: self.clone(),
                axis,
                start,
            },
        )
    }

    /// Embeds `self` into zeros of length `full` along `axis` at `start`.
    pub fn pad_axis(&self, axis: usize, start: usize, full: usize) -> Tensor {
        let s = self.shape();
        let len = s[axis];
        assert!(start + len <= full, "pad out of range");
        let (outer, inner) = Self::outer_inner(s, axis);
        let mut out = vec![0.0; outer * full * inner];
        for o in 0..outer {
            let dst = o * full * inner + start * inner;
            let src = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&self.data()[src..src + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = full;
        Self::record(
            shape,
            out,
            Op::Pad {
                src: self.clone(),
                axis,
                start,
            },
        )
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = parts[0].shape();
        for p in parts {
            let s = p.shape();
            assert!(
                s.len() == first.len()
                    && s.iter()
                        .zip(first)
                        .enumerate()
                        .all(|(d, (a, b))| d == axis || a == b),
                "concat shapes {:?} vs {:?}",
                first,
                s
            );
        }
        let (outer, inner) = Self::outer_inner(first, axis);
        let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = p.shape()[axis] * inner;
                out.extend_from_slice(&p.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first.to_vec();
        shape[axis] = total;
        Self::record(shape, out, Op::Concat(parts.to_vec(), axis))
    }

    pub(crate) fn conv_op(a: &Tensor, b: &Tensor, mode: ConvMode, geom: ConvGeom) -> Tensor {
        let (shape, data) = conv::compute(mode, &geom, a, b);
        Self::record(shape, data, Op::Conv(a.clone(), b.clone(), mode, geom))
    }
}

/// Gradient of `out` with respect to each op input, given `g = dL/d out`.
pub(crate) fn backward_rule(out: &Tensor, op: &Op, g: &Tensor) -> Vec<Option<Tensor>> {
    match op {
        Op::Add(_, _) => vec![Some(g.clone()), Some(g.clone())],
        Op::Sub(_, _) => vec![Some(g.clone()), Some(g.neg())],
        Op::Mul(a, b) => vec![Some(g.mul(b)), Some(g.mul(a))],
        Op::Neg(_) => vec![Some(g.neg())],
        Op::Scale(_, c) => vec![Some(g.scale(*c))],
        Op::AddScalar(_) => vec![Some(g.clone())],
        Op::PowF(a, p) => vec![Some(g.mul(&a.powf(p - 1.0)).scale(*p))],
        Op::Exp(_) => vec![Some(g.mul(out))],
        Op::Tanh(_) => {
            let d = out.square().neg().add_scalar(1.0);
            vec![Some(g.mul(&d))]
        }
        Op::Sigmoid(_) => {
            let d = out.mul(&out.neg().add_scalar(1.0));
            vec![Some(g.mul(&d))]
        }
        Op::Masked(_, mask) => vec![Some(g.mul_mask(mask))],
        Op::FusedSilu(a) => {
            let d: Vec<f64> = a
                .data()
                .iter()
                .map(|&x| {
                    let s = 1.0 / (1.0 + (-x).exp());
                    s * (1.0 + x * (1.0 - s))
                })
                .collect();
            vec![Some(g.mul_mask(&Rc::new(d)))]
        }
        Op::MatMul(a, b) => vec![Some(g.matmul(&b.t())), Some(a.t().matmul(g))],
        Op::Transpose(_) => vec![Some(g.t())],
        Op::Reshape(a) => vec![Some(g.reshape(a.shape()))],
        Op::BroadcastTo(a) => vec![Some(g.sum_to(a.shape()))],
        Op::SumTo(a) => vec![Some(g.broadcast_to(a.shape()))],
        Op::Gather(a, idx) => vec![Some(g.scatter_add_rows(idx, a.shape()[0]))],
        Op::ScatterAdd(_, idx) => vec![Some(g.gather_rows(idx))],
        Op::Slice { src, axis, start } => vec![Some(g.pad_axis(*axis, *start, src.shape()[*axis]))],
        Op::Pad { src, axis, start } => vec![Some(g.slice(*axis, *start, src.shape()[*axis]))],
        Op::Concat(parts, axis) => {
            let mut off = 0;
            parts
                .iter()
                .map(|p| {
                    let len = p.shape()[*axis];
                    let s = g.slice(*axis, off, len);
                    off += len;
                    Some(s)
                })
                .collect()
        }
        Op::Conv(a, b, mode, geom) => conv::backward(*mode, geom, a, b, g),
    }
}

macro_rules! binop {
    ($tr:ident, $f:ident, $method:ident) => {
        impl std::ops::$tr<&Tensor> for &Tensor {
            type Output = Tensor;
            fn $f(self, rhs: &Tensor) -> Tensor {
                self.$method(rhs)
            }
        }
        impl std::ops::$tr<Tensor> for Tensor {
            type Output = Tensor;
            fn $f(self, rhs: Tensor) -> Tensor {
                (&self).$method(&rhs)
            }
        }
    };
}
binop!(Add, add, add);
binop!(Sub, sub, sub);
binop!(Mul, mul, mul);

impl std::ops::Neg for &Tensor {
    type Output = Tensor;
    fn neg(self) -> Tensor {
        Tensor::neg(self)
    }
}
