//! Reverse-mode differentiation tape.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends one node to the
//! owning [`Tape`]. Node ids are assigned in creation order, so replaying ids
//! from high to low is a valid reverse topological order. A tape is built per
//! forward pass and dropped afterwards.

use std::cell::{Cell, RefCell};
use std::f64::consts::PI;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{as_matrix, matmul_kernel, transpose_kernel, Tensor};

/// Primitive kinds recorded on the tape. Used for reporting and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Atan2,
    Sqrt,
    Cos,
    Sin,
    Tanh,
    Sigmoid,
    Softplus,
    Scale,
    Matmul,
    Softmax,
    BatchOuter,
    BatchMatvec,
    Dft2,
    Slice,
    Stack,
    Gather,
    Reshape,
    MaxAxis0,
    MeanAxis0,
    Sum,
    Conv3x3,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 25] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Atan2,
        OpKind::Sqrt,
        OpKind::Cos,
        OpKind::Sin,
        OpKind::Tanh,
        OpKind::Sigmoid,
        OpKind::Softplus,
        OpKind::Scale,
        OpKind::Matmul,
        OpKind::Softmax,
        OpKind::BatchOuter,
        OpKind::BatchMatvec,
        OpKind::Dft2,
        OpKind::Slice,
        OpKind::Stack,
        OpKind::Gather,
        OpKind::Reshape,
        OpKind::MaxAxis0,
        OpKind::MeanAxis0,
        OpKind::Sum,
        OpKind::Conv3x3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Atan2 => "atan2",
            OpKind::Sqrt => "sqrt",
            OpKind::Cos => "cos",
            OpKind::Sin => "sin",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softplus => "softplus",
            OpKind::Scale => "scale",
            OpKind::Matmul => "matmul",
            OpKind::Softmax => "softmax",
            OpKind::BatchOuter => "batch_outer",
            OpKind::BatchMatvec => "batch_matvec",
            OpKind::Dft2 => "dft2",
            OpKind::Slice => "slice",
            OpKind::Stack => "stack",
            OpKind::Gather => "gather",
            OpKind::Reshape => "reshape",
            OpKind::MaxAxis0 => "max_axis0",
            OpKind::MeanAxis0 => "mean_axis0",
            OpKind::Sum => "sum",
            OpKind::Conv3x3 => "conv3x3",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        std::iter::once(OpKind::Leaf)
            .chain(OpKind::DIFFERENTIABLE)
            .find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Test hook: perturbs the adjoints produced by one primitive kind so that
/// gradient checks can be shown to catch a wrong backward rule.
#[doc(hidden)]
pub mod fault {
    use super::*;

    thread_local! {
        static CORRUPT: Cell<Option<OpKind>> = const { Cell::new(None) };
    }

    /// Relative error injected into the corrupted adjoints.
    pub const CORRUPTION: f64 = 1e-2;

    pub fn corrupt_adjoint(kind: Option<OpKind>) {
        CORRUPT.with(|c| c.set(kind));
    }

    pub(super) fn active() -> Option<OpKind> {
        CORRUPT.with(|c| c.get())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    None,
    /// Left operand is one plane repeated over the right operand's leading axis.
    Lhs,
    /// Right operand is one plane repeated over the left operand's leading axis.
    Rhs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Atan2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Sqrt,
    Cos,
    Sin,
    Tanh,
    Sigmoid,
    Softplus,
}

enum Op {
    Leaf,
    Binary {
        kind: Binary,
        a: usize,
        b: usize,
        bcast: Broadcast,
    },
    Unary {
        kind: Unary,
        a: usize,
    },
    Scale {
        a: usize,
        k: f64,
    },
    Matmul {
        a: usize,
        b: usize,
    },
    Softmax {
        a: usize,
    },
    BatchOuter {
        a: usize,
        b: usize,
    },
    BatchMatvec {
        a: usize,
        v: usize,
    },
    Dft2 {
        re: usize,
        im: Option<usize>,
        inverse: bool,
    },
    Slice {
        a: usize,
        index: usize,
    },
    Stack {
        parts: Vec<usize>,
    },
    Gather {
        a: usize,
        index: Rc<[usize]>,
    },
    Reshape {
        a: usize,
    },
    MaxAxis0 {
        a: usize,
        argmax: Vec<usize>,
    },
    MeanAxis0 {
        a: usize,
    },
    Sum {
        a: usize,
    },
    Conv3x3 {
        x: usize,
        w: usize,
        b: usize,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Binary { kind, .. } => match kind {
                Binary::Add => OpKind::Add,
                Binary::Sub => OpKind::Sub,
                Binary::Mul => OpKind::Mul,
                Binary::Div => OpKind::Div,
                Binary::Atan2 => OpKind::Atan2,
            },
            Op::Unary { kind, .. } => match kind {
                Unary::Sqrt => OpKind::Sqrt,
                Unary::Cos => OpKind::Cos,
                Unary::Sin => OpKind::Sin,
                Unary::Tanh => OpKind::Tanh,
                Unary::Sigmoid => OpKind::Sigmoid,
                Unary::Softplus => OpKind::Softplus,
            },
            Op::Scale { .. } => OpKind::Scale,
            Op::Matmul { .. } => OpKind::Matmul,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::BatchOuter { .. } => OpKind::BatchOuter,
            Op::BatchMatvec { .. } => OpKind::BatchMatvec,
            Op::Dft2 { .. } => OpKind::Dft2,
            Op::Slice { .. } => OpKind::Slice,
            Op::Stack { .. } => OpKind::Stack,
            Op::Gather { .. } => OpKind::Gather,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::MaxAxis0 { .. } => OpKind::MaxAxis0,
            Op::MeanAxis0 { .. } => OpKind::MeanAxis0,
            Op::Sum { .. } => OpKind::Sum,
            Op::Conv3x3 { .. } => OpKind::Conv3x3,
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input. Leaves are the only nodes whose adjoints callers
    /// usually read, but every node receives one.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// Re-creates a handle from an id returned by [`Var::id`].
    pub fn var(&self, id: usize) -> Result<Var<'_>> {
        if id < self.len() {
            Ok(Var { tape: self, id })
        } else {
            Err(Error::Contract(format!("node {id} is not on this tape")))
        }
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var { tape: self, id }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Stacks equally shaped values along a new leading axis.
    pub fn stack<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let values: Vec<Tensor> = parts.iter().map(|p| (*p.value()).clone()).collect();
        let out = Tensor::stack(&values)?;
        Ok(self.push(
            out,
            Op::Stack {
                parts: parts.iter().map(|p| p.id).collect(),
            },
        ))
    }

    /// 2D DFT over the last two axes of `C×H×W` planes.
    ///
    /// Returns the packed `2×C×H×W` result (real planes, then imaginary
    /// planes). The forward direction is unnormalized; the inverse carries
    /// the full `1/(H·W)`.
    pub fn dft2<'t>(&'t self, re: Var<'t>, im: Option<Var<'t>>, inverse: bool) -> Result<Var<'t>> {
        let rv = re.value();
        let (c, h, w) = chw(&rv)?;
        if c * h * w == 0 {
            return Err(Error::shape("dft2 of an empty tensor"));
        }
        let iv = match im {
            Some(im) => {
                let iv = im.value();
                if iv.shape() != rv.shape() {
                    return Err(Error::shape(format!(
                        "dft2: real {:?} and imaginary {:?} planes differ",
                        rv.shape(),
                        iv.shape()
                    )));
                }
                Some(iv)
            }
            None => None,
        };
        let (sign, scale) = if inverse {
            (1.0, 1.0 / (h * w) as f64)
        } else {
            (-1.0, 1.0)
        };
        let (ore, oim) = dft2_kernel(rv.data(), iv.as_ref().map(|t| t.data()), c, h, w, sign, scale);
        let mut data = ore;
        data.extend(oim);
        let out = Tensor::new(vec![2, c, h, w], data)?;
        Ok(self.push(
            out,
            Op::Dft2 {
                re: re.id,
                im: im.map(|v| v.id),
                inverse,
            },
        ))
    }

    /// Same-size 3×3 convolution with zero padding.
    ///
    /// `x`: `Cin×H×W`, `w`: `Cout×Cin×3×3`, `b`: `[Cout]`.
    pub fn conv3x3<'t>(&'t self, x: Var<'t>, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let xv = x.value();
        let wv = w.value();
        let bv = b.value();
        let (cin, h, wd) = chw(&xv)?;
        let cout = match *wv.shape() {
            [co, ci, 3, 3] if ci == cin => co,
            _ => {
                return Err(Error::shape(format!(
                    "conv3x3 weight {:?} does not fit input {:?}",
                    wv.shape(),
                    xv.shape()
                )))
            }
        };
        if bv.shape() != [cout] {
            return Err(Error::shape(format!("conv3x3 bias {:?}, want [{cout}]", bv.shape())));
        }
        let out = conv3x3_forward(xv.data(), wv.data(), bv.data(), cin, cout, h, wd);
        let out = Tensor::new(vec![cout, h, wd], out)?;
        Ok(self.push(
            out,
            Op::Conv3x3 {
                x: x.id,
                w: w.id,
                b: b.id,
            },
        ))
    }

    /// Adjoints of every node with respect to the scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let numel = loss.value().numel();
        if numel != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {numel} elements"
            )));
        }
        let seed = Tensor::new(loss.value().shape().to_vec(), vec![1.0])?;
        self.backward_from(loss, seed)
    }

    /// Vector-Jacobian product seeded with `upstream` at `output`.
    pub fn backward_from(&self, output: Var<'_>, upstream: Tensor) -> Result<Gradients> {
        if !std::ptr::eq(output.tape, self) {
            return Err(Error::Contract("output belongs to a different tape".into()));
        }
        if upstream.shape() != output.value().shape() {
            return Err(Error::shape(format!(
                "upstream gradient {:?} does not match output {:?}",
                upstream.shape(),
                output.value().shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[output.id] = Some(upstream);
        let corrupt = fault::active();

        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let mut contributions = local_adjoints(&nodes, node, &g)?;
            if corrupt == Some(node.op.kind()) {
                for (_, t) in contributions.iter_mut() {
                    *t = t.scale(1.0 + fault::CORRUPTION);
                }
            }
            for (parent, adj) in contributions {
                accumulate(&mut grads[parent], adj);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(slot: &mut Option<Tensor>, adj: Tensor) {
    match slot {
        Some(existing) => {
            for (e, a) in existing.data_mut().iter_mut().zip(adj.data()) {
                *e += a;
            }
        }
        None => *slot = Some(adj),
    }
}

/// Adjoints from one backward sweep, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Adjoint of `v`, or zeros when `v` does not influence the output.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match self.get(v) {
            Some(t) => t.clone(),
            None => Tensor::zeros(v.value().shape()),
        }
    }
}

// Shape-checked arithmetic returns Result, so the std operator traits do not fit.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract("operands recorded on different tapes".into()))
        }
    }

    fn binary(self, other: Var<'t>, kind: Binary) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let a = self.value();
        let b = other.value();
        let bcast = broadcast_kind(a.shape(), b.shape())?;
        let f: fn(f64, f64) -> f64 = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
            Binary::Atan2 => phase_angle,
        };
        let (out_shape, data) = match bcast {
            Broadcast::None => (
                a.shape().to_vec(),
                a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
            ),
            Broadcast::Rhs => {
                let plane = b.numel();
                let data = a
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, b.data()[i % plane]))
                    .collect();
                (a.shape().to_vec(), data)
            }
            Broadcast::Lhs => {
                let plane = a.numel();
                let data = b
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &y)| f(a.data()[i % plane], y))
                    .collect();
                (b.shape().to_vec(), data)
            }
        };
        let out = Tensor::new(out_shape, data)?;
        Ok(self.tape.push(
            out,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
                bcast,
            },
        ))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Mul)
    }

    /// Elementwise quotient. A zero denominator yields an infinite value, which
    /// [`Tensor::is_finite`] reports.
    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Div)
    }

    /// Angle of `(x = other, y = self)`, in `[−π, π)`. `atan2(0, 0) = 0` and its
    /// adjoint there is zero.
    pub fn atan2(self, x: Var<'t>) -> Result<Var<'t>> {
        self.binary(x, Binary::Atan2)
    }

    fn unary(self, kind: Unary) -> Var<'t> {
        let f: fn(f64) -> f64 = match kind {
            Unary::Sqrt => f64::sqrt,
            Unary::Cos => f64::cos,
            Unary::Sin => f64::sin,
            Unary::Tanh => f64::tanh,
            Unary::Sigmoid => sigmoid,
            Unary::Softplus => softplus,
        };
        let out = self.value().map(f);
        self.tape.push(out, Op::Unary { kind, a: self.id })
    }

    /// Square root; the adjoint at zero is taken as zero.
    pub fn sqrt(self) -> Var<'t> {
        self.unary(Unary::Sqrt)
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(Unary::Cos)
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(Unary::Sin)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Unary::Tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(Unary::Softplus)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.mul(self)
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        let out = self.value().scale(k);
        self.tape.push(out, Op::Scale { a: self.id, k })
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let out = self.value().matmul(&other.value())?;
        Ok(self.tape.push(
            out,
            Op::Matmul {
                a: self.id,
                b: other.id,
            },
        ))
    }

    /// Softmax along the last axis.
    pub fn softmax(self) -> Result<Var<'t>> {
        let out = self.value().softmax()?;
        Ok(self.tape.push(out, Op::Softmax { a: self.id }))
    }

    /// Per-row outer products: `out[i, j, k] = self[i, j] · other[i, k]`.
    pub fn batch_outer(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let a = self.value();
        let b = other.value();
        let (d, n) = as_matrix(&a)?;
        let (d2, m) = as_matrix(&b)?;
        if d != d2 {
            return Err(Error::shape(format!(
                "batch_outer row counts differ: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let mut data = vec![0.0; d * n * m];
        for i in 0..d {
            for j in 0..n {
                let aij = a.data()[i * n + j];
                let out = &mut data[(i * n + j) * m..(i * n + j + 1) * m];
                for (o, &bv) in out.iter_mut().zip(&b.data()[i * m..(i + 1) * m]) {
                    *o = aij * bv;
                }
            }
        }
        let out = Tensor::new(vec![d, n, m], data)?;
        Ok(self.tape.push(
            out,
            Op::BatchOuter {
                a: self.id,
                b: other.id,
            },
        ))
    }

    /// Per-batch matrix-vector products: `out[i, j] = Σₖ self[i, j, k] · v[i, k]`.
    pub fn batch_matvec(self, v: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&v)?;
        let a = self.value();
        let vv = v.value();
        let (d, n, m) = match *a.shape() {
            [d, n, m] => (d, n, m),
            _ => return Err(Error::shape(format!("batch_matvec needs rank 3, got {:?}", a.shape()))),
        };
        if vv.shape() != [d, m] {
            return Err(Error::shape(format!(
                "batch_matvec vector {:?} does not fit {:?}",
                vv.shape(),
                a.shape()
            )));
        }
        let mut data = vec![0.0; d * n];
        for i in 0..d {
            let vec_i = &vv.data()[i * m..(i + 1) * m];
            for j in 0..n {
                let row = &a.data()[(i * n + j) * m..(i * n + j + 1) * m];
                data[i * n + j] = row.iter().zip(vec_i).map(|(x, y)| x * y).sum();
            }
        }
        let out = Tensor::new(vec![d, n], data)?;
        Ok(self.tape.push(out, Op::BatchMatvec { a: self.id, v: v.id }))
    }

    /// Plane `index` of the leading axis.
    pub fn index0(self, index: usize) -> Result<Var<'t>> {
        let out = self.value().index0(index)?;
        Ok(self.tape.push(out, Op::Slice { a: self.id, index }))
    }

    /// `out[i] = self[index[i]]` (flat indices), reshaped to `shape`.
    pub fn gather(self, index: Rc<[usize]>, shape: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let numel: usize = shape.iter().product();
        if numel != index.len() {
            return Err(Error::shape(format!(
                "gather: {} indices for output shape {shape:?}",
                index.len()
            )));
        }
        let src = a.data();
        let mut data = Vec::with_capacity(index.len());
        for &i in index.iter() {
            data.push(
                *src.get(i)
                    .ok_or_else(|| Error::shape(format!("gather index {i} out of range")))?,
            );
        }
        let out = Tensor::new(shape.to_vec(), data)?;
        Ok(self.tape.push(out, Op::Gather { a: self.id, index }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        Ok(self.tape.push(out, Op::Reshape { a: self.id }))
    }

    /// Maximum over the leading axis. Ties route the adjoint to the first
    /// maximal plane.
    pub fn max_axis0(self) -> Result<Var<'t>> {
        let a = self.value();
        let (p, plane) = lead_split(&a)?;
        let mut data = a.data()[..plane].to_vec();
        let mut argmax = vec![0usize; plane];
        for k in 1..p {
            for j in 0..plane {
                let v = a.data()[k * plane + j];
                if v > data[j] {
                    data[j] = v;
                    argmax[j] = k;
                }
            }
        }
        let out = Tensor::new(a.shape()[1..].to_vec(), data)?;
        Ok(self.tape.push(out, Op::MaxAxis0 { a: self.id, argmax }))
    }

    pub fn mean_axis0(self) -> Result<Var<'t>> {
        let a = self.value();
        let (p, plane) = lead_split(&a)?;
        let mut data = vec![0.0; plane];
        for k in 0..p {
            for (d, v) in data.iter_mut().zip(&a.data()[k * plane..(k + 1) * plane]) {
                *d += v;
            }
        }
        let inv = 1.0 / p as f64;
        data.iter_mut().for_each(|d| *d *= inv);
        let out = Tensor::new(a.shape()[1..].to_vec(), data)?;
        Ok(self.tape.push(out, Op::MeanAxis0 { a: self.id }))
    }

    pub fn sum(self) -> Var<'t> {
        let out = Tensor::scalar(self.value().sum());
        self.tape.push(out, Op::Sum { a: self.id })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }
}

fn lead_split(a: &Tensor) -> Result<(usize, usize)> {
    match a.shape().split_first() {
        Some((&p, rest)) if p > 0 && !rest.is_empty() => Ok((p, rest.iter().product())),
        _ => Err(Error::shape(format!(
            "reduction over leading axis needs rank ≥ 2 and a non-empty axis, got {:?}",
            a.shape()
        ))),
    }
}

pub(crate) fn chw(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(format!("expected C×H×W, got {:?}", t.shape()))),
    }
}

fn broadcast_kind(a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        Ok(Broadcast::None)
    } else if !a.is_empty() && &a[1..] == b {
        Ok(Broadcast::Rhs)
    } else if !b.is_empty() && &b[1..] == a {
        Ok(Broadcast::Lhs)
    } else {
        Err(Error::shape(format!("incompatible operand shapes {a:?} and {b:?}")))
    }
}

/// Angle of `(x, y)` in `[−π, π)`.
///
/// Signed zeros are folded so that points on the negative real axis map to
/// `−π` regardless of the sign of a zero imaginary part.
pub fn phase_angle(y: f64, x: f64) -> f64 {
    let y = if y == 0.0 { 0.0 } else { y };
    let a = y.atan2(x);
    if a >= PI {
        a - 2.0 * PI
    } else {
        a
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn reduce_to_plane(g: &Tensor, plane_shape: &[usize]) -> Tensor {
    let plane: usize = plane_shape.iter().product();
    let mut out = vec![0.0; plane];
    for (i, v) in g.data().iter().enumerate() {
        out[i % plane] += v;
    }
    Tensor::new(plane_shape.to_vec(), out).expect("plane shape")
}

fn local_adjoints(nodes: &[Node], node: &Node, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    let out = &*node.value;
    let adj = match &node.op {
        Op::Leaf => Vec::new(),
        Op::Binary { kind, a, b, bcast } => {
            let av = val(*a);
            let bv = val(*b);
            let full = out.numel();
            let (ap, bp) = match bcast {
                Broadcast::None => (1, 1),
                Broadcast::Rhs => (av.numel(), bv.numel()),
                Broadcast::Lhs => (av.numel(), bv.numel()),
            };
            let at = |i: usize| av.data()[if *bcast == Broadcast::Lhs { i % ap } else { i }];
            let bt = |i: usize| bv.data()[if *bcast == Broadcast::Rhs { i % bp } else { i }];
            let mut ga = vec![0.0; full];
            let mut gb = vec![0.0; full];
            for i in 0..full {
                let gi = g.data()[i];
                let (p, q) = (at(i), bt(i));
                let (da, db) = match kind {
                    Binary::Add => (1.0, 1.0),
                    Binary::Sub => (1.0, -1.0),
                    Binary::Mul => (q, p),
                    Binary::Div => (1.0 / q, -p / (q * q)),
                    Binary::Atan2 => {
                        // p is the imaginary (y) coordinate, q the real (x) one
                        let r2 = p * p + q * q;
                        if r2 == 0.0 {
                            (0.0, 0.0)
                        } else {
                            (q / r2, -p / r2)
                        }
                    }
                };
                ga[i] = gi * da;
                gb[i] = gi * db;
            }
            let ga = Tensor::new(out.shape().to_vec(), ga)?;
            let gb = Tensor::new(out.shape().to_vec(), gb)?;
            let ga = if *bcast == Broadcast::Lhs {
                reduce_to_plane(&ga, av.shape())
            } else {
                ga
            };
            let gb = if *bcast == Broadcast::Rhs {
                reduce_to_plane(&gb, bv.shape())
            } else {
                gb
            };
            vec![(*a, ga), (*b, gb)]
        }
        Op::Unary { kind, a } => {
            let x = val(*a);
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(out.data())
                .map(|((&gi, &xi), &yi)| {
                    gi * match kind {
                        Unary::Sqrt => {
                            if yi == 0.0 {
                                0.0
                            } else {
                                0.5 / yi
                            }
                        }
                        Unary::Cos => -xi.sin(),
                        Unary::Sin => xi.cos(),
                        Unary::Tanh => 1.0 - yi * yi,
                        Unary::Sigmoid => yi * (1.0 - yi),
                        Unary::Softplus => sigmoid(xi),
                    }
                })
                .collect();
            vec![(*a, Tensor::new(x.shape().to_vec(), data)?)]
        }
        Op::Scale { a, k } => vec![(*a, g.scale(*k))],
        Op::Matmul { a, b } => {
            let av = val(*a);
            let bv = val(*b);
            let (m, k) = as_matrix(av)?;
            let (_, n) = as_matrix(bv)?;
            let bt = transpose_kernel(bv.data(), k, n);
            let at = transpose_kernel(av.data(), m, k);
            vec![
                (*a, Tensor::new(vec![m, k], matmul_kernel(g.data(), &bt, m, n, k))?),
                (*b, Tensor::new(vec![k, n], matmul_kernel(&at, g.data(), k, m, n))?),
            ]
        }
        Op::Softmax { a } => {
            let width = *out.shape().last().expect("softmax rank");
            let mut data = vec![0.0; out.numel()];
            for ((dst, y), gr) in data
                .chunks_mut(width)
                .zip(out.data().chunks(width))
                .zip(g.data().chunks(width))
            {
                let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((d, &yi), &gi) in dst.iter_mut().zip(y).zip(gr) {
                    *d = yi * (gi - dot);
                }
            }
            vec![(*a, Tensor::new(out.shape().to_vec(), data)?)]
        }
        Op::BatchOuter { a, b } => {
            let av = val(*a);
            let bv = val(*b);
            let (d, n) = as_matrix(av)?;
            let (_, m) = as_matrix(bv)?;
            let mut ga = vec![0.0; d * n];
            let mut gb = vec![0.0; d * m];
            for i in 0..d {
                for j in 0..n {
                    let grow = &g.data()[(i * n + j) * m..(i * n + j + 1) * m];
                    let aij = av.data()[i * n + j];
                    let brow = &bv.data()[i * m..(i + 1) * m];
                    ga[i * n + j] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    for (gbk, &gk) in gb[i * m..(i + 1) * m].iter_mut().zip(grow) {
                        *gbk += gk * aij;
                    }
                }
            }
            vec![
                (*a, Tensor::new(vec![d, n], ga)?),
                (*b, Tensor::new(vec![d, m], gb)?),
            ]
        }
        Op::BatchMatvec { a, v } => {
            let av = val(*a);
            let vv = val(*v);
            let (d, n, m) = match *av.shape() {
                [d, n, m] => (d, n, m),
                _ => unreachable!("checked at record time"),
            };
            let mut ga = vec![0.0; d * n * m];
            let mut gv = vec![0.0; d * m];
            for i in 0..d {
                let vec_i = &vv.data()[i * m..(i + 1) * m];
                for j in 0..n {
                    let gij = g.data()[i * n + j];
                    let base = (i * n + j) * m;
                    for k in 0..m {
                        ga[base + k] = gij * vec_i[k];
                        gv[i * m + k] += gij * av.data()[base + k];
                    }
                }
            }
            vec![
                (*a, Tensor::new(vec![d, n, m], ga)?),
                (*v, Tensor::new(vec![d, m], gv)?),
            ]
        }
        Op::Dft2 { re, im, inverse } => {
            let (c, h, w) = chw(val(*re))?;
            let plane = c * h * w;
            let (gre, gim) = g.data().split_at(plane);
            // Forward F has adjoint conj(F); inverse conj(F)/(HW) has adjoint F/(HW).
            let (sign, scale) = if *inverse {
                (-1.0, 1.0 / (h * w) as f64)
            } else {
                (1.0, 1.0)
            };
            let (dre, dim) = dft2_kernel(gre, Some(gim), c, h, w, sign, scale);
            let mut out = vec![(*re, Tensor::new(vec![c, h, w], dre)?)];
            if let Some(im) = im {
                out.push((*im, Tensor::new(vec![c, h, w], dim)?));
            }
            out
        }
        Op::Slice { a, index } => {
            let av = val(*a);
            let plane = out.numel();
            let mut data = vec![0.0; av.numel()];
            data[index * plane..(index + 1) * plane].copy_from_slice(g.data());
            vec![(*a, Tensor::new(av.shape().to_vec(), data)?)]
        }
        Op::Stack { parts } => {
            let plane = g.numel() / parts.len();
            parts
                .iter()
                .enumerate()
                .map(|(k, &p)| {
                    let t = Tensor::new(
                        val(p).shape().to_vec(),
                        g.data()[k * plane..(k + 1) * plane].to_vec(),
                    )?;
                    Ok((p, t))
                })
                .collect::<Result<Vec<_>>>()?
        }
        Op::Gather { a, index } => {
            let av = val(*a);
            let mut data = vec![0.0; av.numel()];
            for (&src, &gi) in index.iter().zip(g.data()) {
                data[src] += gi;
            }
            vec![(*a, Tensor::new(av.shape().to_vec(), data)?)]
        }
        Op::Reshape { a } => vec![(*a, g.reshape(val(*a).shape())?)],
        Op::MaxAxis0 { a, argmax } => {
            let av = val(*a);
            let plane = out.numel();
            let mut data = vec![0.0; av.numel()];
            for (j, (&k, &gi)) in argmax.iter().zip(g.data()).enumerate() {
                data[k * plane + j] += gi;
            }
            vec![(*a, Tensor::new(av.shape().to_vec(), data)?)]
        }
        Op::MeanAxis0 { a } => {
            let av = val(*a);
            let plane = out.numel();
            let inv = 1.0 / (av.numel() / plane) as f64;
            let data = (0..av.numel()).map(|i| g.data()[i % plane] * inv).collect();
            vec![(*a, Tensor::new(av.shape().to_vec(), data)?)]
        }
        Op::Sum { a } => {
            let av = val(*a);
            vec![(*a, Tensor::full(av.shape(), g.data()[0]))]
        }
        Op::Conv3x3 { x, w, b } => {
            let xv = val(*x);
            let wv = val(*w);
            let (cin, h, wd) = chw(xv)?;
            let cout = wv.shape()[0];
            let (gx, gw, gb) = conv3x3_backward(xv.data(), wv.data(), g.data(), cin, cout, h, wd);
            vec![
                (*x, Tensor::new(xv.shape().to_vec(), gx)?),
                (*w, Tensor::new(wv.shape().to_vec(), gw)?),
                (*b, Tensor::new(vec![cout], gb)?),
            ]
        }
    };
    Ok(adj)
}

/// `(cos, sin)` of `2π·j/n` for `j in 0..n`, exact at quarter turns so that
/// self-conjugate bins of a real signal get an exactly zero imaginary part.
pub(crate) fn twiddles(n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|j| {
            if (4 * j) % n == 0 {
                match (4 * j) / n {
                    0 => (1.0, 0.0),
                    1 => (0.0, 1.0),
                    2 => (-1.0, 0.0),
                    _ => (0.0, -1.0),
                }
            } else {
                let t = 2.0 * PI * j as f64 / n as f64;
                (t.cos(), t.sin())
            }
        })
        .collect()
}

/// Separable 2D DFT of `c` planes of `h×w` complex values.
///
/// `sign = −1` is the forward kernel `e^{−2πi(uh/H + vw/W)}`, `sign = +1` the
/// conjugate one. Every output is multiplied by `scale`.
pub(crate) fn dft2_kernel(
    re: &[f64],
    im: Option<&[f64]>,
    c: usize,
    h: usize,
    w: usize,
    sign: f64,
    scale: f64,
) -> (Vec<f64>, Vec<f64>) {
    let tw_w = twiddles(w);
    let tw_h = twiddles(h);
    let plane = h * w;
    let mut out_re = vec![0.0; c * plane];
    let mut out_im = vec![0.0; c * plane];
    let mut row_re = vec![0.0; plane];
    let mut row_im = vec![0.0; plane];

    for ch in 0..c {
        let src_re = &re[ch * plane..(ch + 1) * plane];
        let src_im = im.map(|s| &s[ch * plane..(ch + 1) * plane]);
        // rows: transform along w
        for r in 0..h {
            for v in 0..w {
                let (mut acc_re, mut acc_im) = (0.0, 0.0);
                for x in 0..w {
                    let (cs, sn) = tw_w[(v * x) % w];
                    let sn = sign * sn;
                    let a = src_re[r * w + x];
                    let b = src_im.map_or(0.0, |s| s[r * w + x]);
                    acc_re += a * cs - b * sn;
                    acc_im += a * sn + b * cs;
                }
                row_re[r * w + v] = acc_re;
                row_im[r * w + v] = acc_im;
            }
        }
        // columns: transform along h
        let dst_re = &mut out_re[ch * plane..(ch + 1) * plane];
        let dst_im = &mut out_im[ch * plane..(ch + 1) * plane];
        for u in 0..h {
            for v in 0..w {
                let (mut acc_re, mut acc_im) = (0.0, 0.0);
                for y in 0..h {
                    let (cs, sn) = tw_h[(u * y) % h];
                    let sn = sign * sn;
                    let a = row_re[y * w + v];
                    let b = row_im[y * w + v];
                    acc_re += a * cs - b * sn;
                    acc_im += a * sn + b * cs;
                }
                dst_re[u * w + v] = acc_re * scale;
                dst_im[u * w + v] = acc_im * scale;
            }
        }
    }
    (out_re, out_im)
}

fn conv3x3_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
) -> Vec<f64> {
    let plane = h * wd;
    let mut out = vec![0.0; cout * plane];
    for co in 0..cout {
        let dst = &mut out[co * plane..(co + 1) * plane];
        dst.iter_mut().for_each(|v| *v = b[co]);
        for ci in 0..cin {
            let src = &x[ci * plane..(ci + 1) * plane];
            let k = &w[(co * cin + ci) * 9..(co * cin + ci + 1) * 9];
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = 0.0;
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= wd as isize {
                                continue;
                            }
                            acc += k[ky * 3 + kx] * src[sy as usize * wd + sx as usize];
                        }
                    }
                    dst[y * wd + xx] += acc;
                }
            }
        }
    }
    out
}

fn conv3x3_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let plane = h * wd;
    let mut gx = vec![0.0; cin * plane];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; cout];
    for co in 0..cout {
        let gplane = &g[co * plane..(co + 1) * plane];
        gb[co] = gplane.iter().sum();
        for ci in 0..cin {
            let src = &x[ci * plane..(ci + 1) * plane];
            let kbase = (co * cin + ci) * 9;
            for y in 0..h {
                for xx in 0..wd {
                    let gv = gplane[y * wd + xx];
                    if gv == 0.0 {
                        continue;
                    }
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= wd as isize {
                                continue;
                            }
                            let si = sy as usize * wd + sx as usize;
                            gw[kbase + ky * 3 + kx] += gv * src[si];
                            gx[ci * plane + si] += gv * w[kbase + ky * 3 + kx];
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}
