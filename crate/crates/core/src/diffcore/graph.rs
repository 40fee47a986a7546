//! The evaluation tape: graph construction, forward execution, and the
//! reverse sweep.

use std::cell::RefCell;
use std::rc::Rc;

use super::ops;
use super::tensor::{strides_of, Tensor};
use super::DiffError;

/// A differentiable operation implemented outside the built-in op set.
///
/// Custom ops participate in the tape like any other node: `forward` runs at
/// record time, `backward` is invoked during the reverse sweep with the
/// upstream gradient and must *add* each input's contribution into the
/// matching `input_grads` slot (slots are pre-zeroed; `None` marks inputs
/// that do not require gradients). Implementations may cache forward state
/// internally (e.g. behind a `RefCell`) since each recorded node owns its
/// own op instance.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, DiffError>;
    fn backward(
        &self,
        grad_out: &[f64],
        inputs: &[&Tensor],
        input_grads: &mut [Option<Vec<f64>>],
    ) -> Result<(), DiffError>;
}

#[derive(Clone)]
enum Op {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Sqrt,
    Square,
    Abs,
    Relu,
    Sigmoid,
    Softplus,
    Matmul,
    Conv2d { stride: usize, pad: usize },
    Upsample2x,
    Softmax { from_axis: usize },
    Sum { axis: Option<usize> },
    Mean { axis: Option<usize> },
    /// Backward needs only the saved argmax indices, not the axis.
    Max,
    Reshape,
    Concat { axis: usize },
    /// Backward recovers the box extent from the output shape.
    Slice { starts: Vec<usize> },
    Custom(Rc<dyn CustomOp>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::Square => "square",
            Op::Abs => "abs",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Softplus => "softplus",
            Op::Matmul => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample2x => "upsample2x",
            Op::Softmax { .. } => "softmax",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Max => "max",
            Op::Reshape => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Custom(c) => c.name(),
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
    /// Argmax flat indices saved by `Max` for the reverse sweep.
    saved: Vec<usize>,
    /// Gradient accumulated across backward sweeps.
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
}

/// An append-only tape of tensor operations. Cloning is cheap (shared
/// handle); all `Value`s of one computation must come from the same graph.
#[derive(Clone, Default)]
pub struct Graph(Rc<RefCell<Inner>>);

/// Handle to one node of a [`Graph`]: its forward tensor plus, after a
/// backward sweep, its accumulated gradient.
#[derive(Clone)]
pub struct Value {
    graph: Graph,
    id: usize,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_count(&self) -> usize {
        self.0.borrow().nodes.len()
    }

    fn push(
        &self,
        op: Op,
        inputs: Vec<usize>,
        value: Tensor,
        requires_grad: bool,
        saved: Vec<usize>,
    ) -> Result<Value, DiffError> {
        let name = op.name();
        if value.numel() == 0 {
            return Err(DiffError::Empty { op: name });
        }
        if !value.all_finite() {
            return Err(DiffError::NonFinite { op: name });
        }
        let mut inner = self.0.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { op, inputs, value, requires_grad, saved, grad: None });
        Ok(Value { graph: self.clone(), id })
    }

    /// Records a differentiation leaf. The tensor's `requires_grad` flag
    /// decides whether the sweep deposits a gradient here.
    pub fn leaf(&self, t: &Tensor) -> Result<Value, DiffError> {
        let rg = t.requires_grad;
        self.push(Op::Leaf, vec![], t.clone(), rg, vec![])
    }

    /// Records a constant: never receives gradients, even if upstream ops do.
    pub fn constant(&self, t: Tensor) -> Result<Value, DiffError> {
        self.push(Op::Constant, vec![], t, false, vec![])
    }

    /// Scalar constant convenience.
    pub fn scalar(&self, v: f64) -> Result<Value, DiffError> {
        self.constant(Tensor::scalar(v))
    }

    /// Records a [`CustomOp`] application.
    pub fn apply_custom(
        &self,
        op: Rc<dyn CustomOp>,
        inputs: &[&Value],
    ) -> Result<Value, DiffError> {
        let mut ids = Vec::with_capacity(inputs.len());
        for v in inputs {
            v.same_graph(self)?;
            ids.push(v.id);
        }
        let (out, rg) = {
            let inner = self.0.borrow();
            let tensors: Vec<&Tensor> = ids.iter().map(|&i| &inner.nodes[i].value).collect();
            let out = op.forward(&tensors)?;
            let rg = ids.iter().any(|&i| inner.nodes[i].requires_grad);
            (out, rg)
        };
        self.push(Op::Custom(op), ids, out, rg, vec![])
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let inner = self.0.borrow();
        ids.iter().any(|&i| inner.nodes[i].requires_grad)
    }
}

/// Concatenates values along `axis`. All parts must share every other
/// dimension and live on the same graph.
pub fn concat(parts: &[&Value], axis: usize) -> Result<Value, DiffError> {
    let first = *parts.first().ok_or(DiffError::Empty { op: "concat" })?;
    let graph = first.graph.clone();
    let mut ids = Vec::with_capacity(parts.len());
    for p in parts {
        p.same_graph(&graph)?;
        ids.push(p.id);
    }
    let out = {
        let inner = graph.0.borrow();
        let shapes: Vec<&[usize]> = ids.iter().map(|&i| inner.nodes[i].value.shape.as_slice()).collect();
        let nd = shapes[0].len();
        if axis >= nd {
            return Err(DiffError::Shape {
                op: "concat",
                detail: format!("axis {axis} out of range for {nd}-d input"),
            });
        }
        let mut out_shape = shapes[0].to_vec();
        let mut axis_total = 0usize;
        for s in &shapes {
            if s.len() != nd
                || s[..axis] != shapes[0][..axis]
                || s[axis + 1..] != shapes[0][axis + 1..]
            {
                return Err(DiffError::Shape {
                    op: "concat",
                    detail: format!("incompatible part shapes {:?} vs {:?}", shapes[0], s),
                });
            }
            axis_total += s[axis];
        }
        out_shape[axis] = axis_total;
        let (outer, _, inner_ext) = ops::axis_split(&out_shape, axis);
        let total = axis_total * inner_ext;
        let mut data = vec![0.0; outer * total];
        let mut off = 0usize;
        for (&id, s) in ids.iter().zip(&shapes) {
            let ext = s[axis] * inner_ext;
            let src = &inner.nodes[id].value.data;
            for o in 0..outer {
                data[o * total + off..o * total + off + ext]
                    .copy_from_slice(&src[o * ext..(o + 1) * ext]);
            }
            off += ext;
        }
        Tensor { shape: out_shape, data, requires_grad: false, grad: None }
    };
    let rg = graph.requires(&ids);
    graph.push(Op::Concat { axis }, ids, out, rg, vec![])
}

impl Value {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    fn same_graph(&self, g: &Graph) -> Result<(), DiffError> {
        if Rc::ptr_eq(&self.graph.0, &g.0) {
            Ok(())
        } else {
            Err(DiffError::GraphMismatch)
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.0.borrow().nodes[self.id].value.shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.graph.0.borrow().nodes[self.id].value.numel()
    }

    /// Clone of the forward tensor.
    pub fn tensor(&self) -> Tensor {
        self.graph.0.borrow().nodes[self.id].value.clone()
    }

    /// Runs `f` over the forward data without cloning it.
    pub fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.graph.0.borrow().nodes[self.id].value.data)
    }

    pub fn item(&self) -> Result<f64, DiffError> {
        self.graph.0.borrow().nodes[self.id].value.item()
    }

    /// Accumulated gradient (same shape as the value), if any sweep reached
    /// this node.
    pub fn grad(&self) -> Option<Tensor> {
        let inner = self.graph.0.borrow();
        let node = &inner.nodes[self.id];
        node.grad.as_ref().map(|g| Tensor {
            shape: node.value.shape.clone(),
            data: g.clone(),
            requires_grad: false,
            grad: None,
        })
    }

    /// Re-records this value as a constant: forward data flows, gradients
    /// stop.
    pub fn detach(&self) -> Result<Value, DiffError> {
        let mut t = self.tensor();
        t.requires_grad = false;
        t.grad = None;
        self.graph.constant(t)
    }

    // ---- elementwise binary ops (scalar broadcast on either side) ----

    fn binary(
        &self,
        other: &Value,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Value, DiffError> {
        other.same_graph(&self.graph)?;
        let name = op.name();
        let out = {
            let inner = self.graph.0.borrow();
            let a = &inner.nodes[self.id].value;
            let b = &inner.nodes[other.id].value;
            let (shape, n) = if a.shape == b.shape {
                (a.shape.clone(), a.numel())
            } else if a.numel() == 1 {
                (b.shape.clone(), b.numel())
            } else if b.numel() == 1 {
                (a.shape.clone(), a.numel())
            } else {
                return Err(DiffError::Shape {
                    op: name,
                    detail: format!("operand shapes {:?} vs {:?}", a.shape, b.shape),
                });
            };
            let mut data = Vec::with_capacity(n);
            if a.numel() == 1 && n != 1 {
                let av = a.data[0];
                data.extend(b.data.iter().map(|&bv| f(av, bv)));
            } else if b.numel() == 1 && n != 1 {
                let bv = b.data[0];
                data.extend(a.data.iter().map(|&av| f(av, bv)));
            } else {
                data.extend(a.data.iter().zip(&b.data).map(|(&av, &bv)| f(av, bv)));
            }
            Tensor { shape, data, requires_grad: false, grad: None }
        };
        let ids = vec![self.id, other.id];
        let rg = self.graph.requires(&ids);
        self.graph.push(op, ids, out, rg, vec![])
    }

    pub fn add(&self, other: &Value) -> Result<Value, DiffError> {
        self.binary(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Value) -> Result<Value, DiffError> {
        self.binary(other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Value) -> Result<Value, DiffError> {
        self.binary(other, Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, other: &Value) -> Result<Value, DiffError> {
        self.binary(other, Op::Div, |a, b| a / b)
    }

    /// Multiplies by a compile-time constant.
    pub fn scale(&self, c: f64) -> Result<Value, DiffError> {
        let k = self.graph.scalar(c)?;
        self.mul(&k)
    }

    /// Adds a compile-time constant.
    pub fn add_scalar(&self, c: f64) -> Result<Value, DiffError> {
        let k = self.graph.scalar(c)?;
        self.add(&k)
    }

    // ---- elementwise unary ops ----

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Result<Value, DiffError> {
        let out = {
            let inner = self.graph.0.borrow();
            let a = &inner.nodes[self.id].value;
            Tensor {
                shape: a.shape.clone(),
                data: a.data.iter().map(|&v| f(v)).collect(),
                requires_grad: false,
                grad: None,
            }
        };
        let rg = self.graph.requires(&[self.id]);
        self.graph.push(op, vec![self.id], out, rg, vec![])
    }

    pub fn neg(&self) -> Result<Value, DiffError> {
        self.unary(Op::Neg, |v| -v)
    }

    pub fn exp(&self) -> Result<Value, DiffError> {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn log(&self) -> Result<Value, DiffError> {
        self.unary(Op::Log, f64::ln)
    }

    pub fn sqrt(&self) -> Result<Value, DiffError> {
        self.unary(Op::Sqrt, f64::sqrt)
    }

    pub fn square(&self) -> Result<Value, DiffError> {
        self.unary(Op::Square, |v| v * v)
    }

    pub fn abs(&self) -> Result<Value, DiffError> {
        self.unary(Op::Abs, f64::abs)
    }

    pub fn relu(&self) -> Result<Value, DiffError> {
        self.unary(Op::Relu, |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Result<Value, DiffError> {
        self.unary(Op::Sigmoid, sigmoid)
    }

    pub fn softplus(&self) -> Result<Value, DiffError> {
        self.unary(Op::Softplus, softplus)
    }

    // ---- linear algebra ----

    /// `[m,k] @ [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Value) -> Result<Value, DiffError> {
        other.same_graph(&self.graph)?;
        let out = {
            let inner = self.graph.0.borrow();
            let a = &inner.nodes[self.id].value;
            let b = &inner.nodes[other.id].value;
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(DiffError::Shape {
                    op: "matmul",
                    detail: format!("operand shapes {:?} vs {:?}", a.shape, b.shape),
                });
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            Tensor {
                shape: vec![m, n],
                data: ops::matmul(&a.data, &b.data, m, k, n),
                requires_grad: false,
                grad: None,
            }
        };
        let ids = vec![self.id, other.id];
        let rg = self.graph.requires(&ids);
        self.graph.push(Op::Matmul, ids, out, rg, vec![])
    }

    /// NCHW convolution with zero padding: `self` is `[n,cin,h,w]`, `weight`
    /// is `[cout,cin,kh,kw]`, optional `bias` is `[cout]`.
    pub fn conv2d(
        &self,
        weight: &Value,
        bias: Option<&Value>,
        stride: usize,
        pad: usize,
    ) -> Result<Value, DiffError> {
        weight.same_graph(&self.graph)?;
        if let Some(b) = bias {
            b.same_graph(&self.graph)?;
        }
        if stride == 0 {
            return Err(DiffError::Shape { op: "conv2d", detail: "stride must be >= 1".into() });
        }
        let out = {
            let inner = self.graph.0.borrow();
            let x = &inner.nodes[self.id].value;
            let w = &inner.nodes[weight.id].value;
            let (n, cin, h, wd) = dims4(x, "conv2d")?;
            let (cout, wcin, kh, kw) = dims4(w, "conv2d")?;
            if wcin != cin {
                return Err(DiffError::Shape {
                    op: "conv2d",
                    detail: format!("input has {cin} channels but kernel expects {wcin}"),
                });
            }
            if h + 2 * pad < kh || wd + 2 * pad < kw {
                return Err(DiffError::Shape {
                    op: "conv2d",
                    detail: format!("kernel {kh}x{kw} larger than padded input {h}x{wd}"),
                });
            }
            let bias_data = match bias {
                Some(b) => {
                    let bt = &inner.nodes[b.id].value;
                    if bt.shape != vec![cout] {
                        return Err(DiffError::Shape {
                            op: "conv2d",
                            detail: format!("bias shape {:?}, expected [{cout}]", bt.shape),
                        });
                    }
                    Some(bt.data.clone())
                }
                None => None,
            };
            let ho = ops::conv_out_dim(h, kh, stride, pad);
            let wo = ops::conv_out_dim(wd, kw, stride, pad);
            let data = ops::conv2d(
                &x.data,
                n,
                cin,
                h,
                wd,
                &w.data,
                cout,
                kh,
                kw,
                bias_data.as_deref(),
                stride,
                pad,
            );
            Tensor { shape: vec![n, cout, ho, wo], data, requires_grad: false, grad: None }
        };
        let mut ids = vec![self.id, weight.id];
        if let Some(b) = bias {
            ids.push(b.id);
        }
        let rg = self.graph.requires(&ids);
        self.graph.push(Op::Conv2d { stride, pad }, ids, out, rg, vec![])
    }

    /// Nearest-neighbor 2x spatial upsampling of an NCHW tensor.
    pub fn upsample2x(&self) -> Result<Value, DiffError> {
        let out = {
            let inner = self.graph.0.borrow();
            let x = &inner.nodes[self.id].value;
            let (n, c, h, w) = dims4(x, "upsample2x")?;
            Tensor {
                shape: vec![n, c, 2 * h, 2 * w],
                data: ops::upsample2x(&x.data, n * c, h, w),
                requires_grad: false,
                grad: None,
            }
        };
        let rg = self.graph.requires(&[self.id]);
        self.graph.push(Op::Upsample2x, vec![self.id], out, rg, vec![])
    }

    // ---- normalization & reductions ----

    /// Softmax over the trailing dimensions starting at `from_axis`; leading
    /// dimensions index independent rows.
    pub fn softmax(&self, from_axis: usize) -> Result<Value, DiffError> {
        let out = {
            let inner = self.graph.0.borrow();
            let x = &inner.nodes[self.id].value;
            let nd = x.shape.len();
            if from_axis >= nd {
                return Err(DiffError::Shape {
                    op: "softmax",
                    detail: format!("from_axis {from_axis} out of range for {nd}-d input"),
                });
            }
            let rows: usize = x.shape[..from_axis].iter().product();
            let cols: usize = x.shape[from_axis..].iter().product();
            Tensor {
                shape: x.shape.clone(),
                data: ops::softmax_rows(&x.data, rows, cols),
                requires_grad: false,
                grad: None,
            }
        };
        let rg = self.graph.requires(&[self.id]);
        self.graph.push(Op::Softmax { from_axis }, vec![self.id], out, rg, vec![])
    }

    fn reduce(&self, axis: Option<usize>, kind: u8) -> Result<Value, DiffError> {
        let op = match kind {
            0 => Op::Sum { axis },
            1 => Op::Mean { axis },
            _ => Op::Max,
        };
        let name = op.name();
        let (out, saved) = {
            let inner = self.graph.0.borrow();
            let x = &inner.nodes[self.id].value;
            match axis {
                None => {
                    let mut saved = vec![];
                    let v = match kind {
                        0 => x.data.iter().sum::<f64>(),
                        1 => x.data.iter().sum::<f64>() / x.numel() as f64,
                        _ => {
                            let mut best = 0usize;
                            for (i, &v) in x.data.iter().enumerate() {
                                if v > x.data[best] {
                                    best = i;
                                }
                            }
                            saved = vec![best];
                            x.data[best]
                        }
                    };
                    (Tensor::scalar(v), saved)
                }
                Some(ax) => {
                    let nd = x.shape.len();
                    if ax >= nd {
                        return Err(DiffError::Shape {
                            op: name,
                            detail: format!("axis {ax} out of range for {nd}-d input"),
                        });
                    }
                    let (outer, len, inner_ext) = ops::axis_split(&x.shape, ax);
                    let mut shape: Vec<usize> = x.shape.clone();
                    shape.remove(ax);
                    if shape.is_empty() {
                        shape.push(1);
                    }
                    let mut data = vec![0.0; outer * inner_ext];
                    let mut saved = vec![];
                    if kind == 2 {
                        saved = vec![0usize; outer * inner_ext];
                    }
                    for o in 0..outer {
                        for i in 0..inner_ext {
                            let base = o * len * inner_ext + i;
                            match kind {
                                0 | 1 => {
                                    let mut s = 0.0;
                                    for j in 0..len {
                                        s += x.data[base + j * inner_ext];
                                    }
                                    if kind == 1 {
                                        s /= len as f64;
                                    }
                                    data[o * inner_ext + i] = s;
                                }
                                _ => {
                                    let mut bj = 0usize;
                                    for j in 1..len {
                                        if x.data[base + j * inner_ext]
                                            > x.data[base + bj * inner_ext]
                                        {
                                            bj = j;
                                        }
                                    }
                                    data[o * inner_ext + i] = x.data[base + bj * inner_ext];
                                    saved[o * inner_ext + i] = base + bj * inner_ext;
                                }
                            }
                        }
                    }
                    (Tensor { shape, data, requires_grad: false, grad: None }, saved)
                }
            }
        };
        let rg = self.graph.requires(&[self.id]);
        self.graph.push(op, vec![self.id], out, rg, saved)
    }

    /// Sum of all elements (scalar).
    pub fn sum(&self) -> Result<Value, DiffError> {
        self.reduce(None, 0)
    }

    /// Sum along one axis (that axis is removed from the shape).
    pub fn sum_axis(&self, axis: usize) -> Result<Value, DiffError> {
        self.reduce(Some(axis), 0)
    }

    /// Mean of all elements (scalar).
    pub fn mean(&self) -> Result<Value, DiffError> {
        self.reduce(None, 1)
    }

    /// Mean along one axis.
    pub fn mean_axis(&self, axis: usize) -> Result<Value, DiffError> {
        self.reduce(Some(axis), 1)
    }

    /// Maximum of all elements (scalar). Ties resolve to the lowest flat
    /// index, which also receives the full subgradient.
    pub fn max(&self) -> Result<Value, DiffError> {
        self.reduce(None, 2)
    }

    /// Maximum along one axis; ties resolve to the lowest index on that axis.
    pub fn max_axis(&self, axis: usize) -> Result<Value, DiffError> {
        self.reduce(Some(axis), 2)
    }

    // ---- shape ops ----

    pub fn reshape(&self, shape: &[usize]) -> Result<Value, DiffError> {
        let out = {
            let inner = self.graph.0.borrow();
            let x = &inner.nodes[self.id].value;
            let n: usize = shape.iter().product();
            if n != x.numel() {
                return Err(DiffError::Shape {
                    op: "reshape",
                    detail: format!("cannot view {:?} as {:?}", x.shape, shape),
                });
            }
            Tensor {
                shape: shape.to_vec(),
                data: x.data.clone(),
                requires_grad: false,
                grad: None,
            }
        };
        let rg = self.graph.requires(&[self.id]);
        self.graph.push(Op::Reshape, vec![self.id], out, rg, vec![])
    }

    /// Sub-box copy: element `o[c]` comes from `x[starts + c]`, with
    /// `starts[d] <= c[d] < ends[d]` per dimension.
    pub fn slice(&self, starts: &[usize], ends: &[usize]) -> Result<Value, DiffError> {
        let out = {
            let inner = self.graph.0.borrow();
            let x = &inner.nodes[self.id].value;
            let nd = x.shape.len();
            if starts.len() != nd || ends.len() != nd {
                return Err(DiffError::Shape {
                    op: "slice",
                    detail: format!("expected {nd} start/end pairs"),
                });
            }
            for d in 0..nd {
                if starts[d] >= ends[d] || ends[d] > x.shape[d] {
                    return Err(DiffError::Shape {
                        op: "slice",
                        detail: format!(
                            "range {}..{} invalid for dimension {d} of extent {}",
                            starts[d], ends[d], x.shape[d]
                        ),
                    });
                }
            }
            let out_shape: Vec<usize> = (0..nd).map(|d| ends[d] - starts[d]).collect();
            let mut data = vec![0.0; out_shape.iter().product()];
            copy_box(&x.data, &x.shape, starts, &out_shape, |dst_pos, src| {
                data[dst_pos..dst_pos + src.len()].copy_from_slice(src);
            });
            Tensor { shape: out_shape, data, requires_grad: false, grad: None }
        };
        let rg = self.graph.requires(&[self.id]);
        self.graph.push(
            Op::Slice { starts: starts.to_vec() },
            vec![self.id],
            out,
            rg,
            vec![],
        )
    }

    // ---- backward ----

    /// Reverse sweep from this scalar. Gradients accumulate into every node
    /// with `requires_grad` (leaves included) and add up across calls.
    pub fn backward(&self) -> Result<(), DiffError> {
        let mut inner = self.graph.0.borrow_mut();
        {
            let root = &inner.nodes[self.id].value;
            if root.numel() != 1 {
                return Err(DiffError::NotScalar { shape: root.shape.clone() });
            }
        }
        let mut g: Vec<Option<Vec<f64>>> = (0..=self.id).map(|_| None).collect();
        g[self.id] = Some(vec![1.0]);
        for id in (0..=self.id).rev() {
            let Some(gout) = g[id].take() else { continue };
            let node = &inner.nodes[id];
            if node.requires_grad && !node.inputs.is_empty() {
                backprop(&inner.nodes, id, &gout, &mut g)?;
            }
            let node = &mut inner.nodes[id];
            if node.requires_grad {
                match &mut node.grad {
                    Some(acc) => {
                        for (a, &v) in acc.iter_mut().zip(&gout) {
                            *a += v;
                        }
                    }
                    None => node.grad = Some(gout),
                }
            }
        }
        Ok(())
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
    // ln(1 + e^x), stable for large |x|.
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn dims4(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize), DiffError> {
    if t.shape.len() != 4 {
        return Err(DiffError::Shape {
            op,
            detail: format!("expected a 4-d tensor, got shape {:?}", t.shape),
        });
    }
    Ok((t.shape[0], t.shape[1], t.shape[2], t.shape[3]))
}

/// Walks the sub-box of `src` selected by `starts`/`out_shape`, invoking
/// `emit(dst_offset, contiguous_src_run)` once per innermost row.
fn copy_box(
    src: &[f64],
    src_shape: &[usize],
    starts: &[usize],
    out_shape: &[usize],
    mut emit: impl FnMut(usize, &[f64]),
) {
    let nd = src_shape.len();
    let strides = strides_of(src_shape);
    let run = out_shape[nd - 1];
    let rows: usize = out_shape[..nd - 1].iter().product();
    let mut coord = vec![0usize; nd.saturating_sub(1)];
    for row in 0..rows {
        let mut off = starts[nd - 1];
        for d in 0..nd - 1 {
            off += (starts[d] + coord[d]) * strides[d];
        }
        emit(row * run, &src[off..off + run]);
        for d in (0..nd - 1).rev() {
            coord[d] += 1;
            if coord[d] < out_shape[d] {
                break;
            }
            coord[d] = 0;
        }
    }
}

fn ensure<'a>(g: &'a mut [Option<Vec<f64>>], id: usize, n: usize) -> &'a mut Vec<f64> {
    g[id].get_or_insert_with(|| vec![0.0; n])
}

/// Broadcast-aware read: scalar operands repeat across the output.
fn bc(t: &Tensor, k: usize) -> f64 {
    if t.data.len() == 1 {
        t.data[0]
    } else {
        t.data[k]
    }
}

/// Adds `partial(k)` into the gradient slot of input `iid`, summing over the
/// output if that input is a broadcast scalar.
fn acc_elem(
    g: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    iid: usize,
    out_len: usize,
    partial: impl Fn(usize) -> f64,
) {
    if !nodes[iid].requires_grad {
        return;
    }
    let n = nodes[iid].value.numel();
    let buf = ensure(g, iid, n);
    if n == out_len {
        for (k, b) in buf.iter_mut().enumerate() {
            *b += partial(k);
        }
    } else {
        let mut s = 0.0;
        for k in 0..out_len {
            s += partial(k);
        }
        buf[0] += s;
    }
}

fn backprop(
    nodes: &[Node],
    id: usize,
    gout: &[f64],
    g: &mut Vec<Option<Vec<f64>>>,
) -> Result<(), DiffError> {
    let node = &nodes[id];
    let ins = &node.inputs;
    let y = &node.value;
    let m = gout.len();
    match &node.op {
        Op::Leaf | Op::Constant => {}
        Op::Add => {
            acc_elem(g, nodes, ins[0], m, |k| gout[k]);
            acc_elem(g, nodes, ins[1], m, |k| gout[k]);
        }
        Op::Sub => {
            acc_elem(g, nodes, ins[0], m, |k| gout[k]);
            acc_elem(g, nodes, ins[1], m, |k| -gout[k]);
        }
        Op::Mul => {
            let (a, b) = (&nodes[ins[0]].value, &nodes[ins[1]].value);
            acc_elem(g, nodes, ins[0], m, |k| gout[k] * bc(b, k));
            acc_elem(g, nodes, ins[1], m, |k| gout[k] * bc(a, k));
        }
        Op::Div => {
            let (a, b) = (&nodes[ins[0]].value, &nodes[ins[1]].value);
            acc_elem(g, nodes, ins[0], m, |k| gout[k] / bc(b, k));
            acc_elem(g, nodes, ins[1], m, |k| {
                let bv = bc(b, k);
                -gout[k] * bc(a, k) / (bv * bv)
            });
        }
        Op::Neg => acc_elem(g, nodes, ins[0], m, |k| -gout[k]),
        Op::Exp => acc_elem(g, nodes, ins[0], m, |k| gout[k] * y.data[k]),
        Op::Log => {
            let x = &nodes[ins[0]].value;
            acc_elem(g, nodes, ins[0], m, |k| gout[k] / x.data[k]);
        }
        Op::Sqrt => acc_elem(g, nodes, ins[0], m, |k| gout[k] * 0.5 / y.data[k]),
        Op::Square => {
            let x = &nodes[ins[0]].value;
            acc_elem(g, nodes, ins[0], m, |k| gout[k] * 2.0 * x.data[k]);
        }
        Op::Abs => {
            let x = &nodes[ins[0]].value;
            acc_elem(g, nodes, ins[0], m, |k| {
                let s = if x.data[k] > 0.0 {
                    1.0
                } else if x.data[k] < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                gout[k] * s
            });
        }
        Op::Relu => {
            let x = &nodes[ins[0]].value;
            acc_elem(g, nodes, ins[0], m, |k| if x.data[k] > 0.0 { gout[k] } else { 0.0 });
        }
        Op::Sigmoid => acc_elem(g, nodes, ins[0], m, |k| gout[k] * y.data[k] * (1.0 - y.data[k])),
        Op::Softplus => {
            let x = &nodes[ins[0]].value;
            acc_elem(g, nodes, ins[0], m, |k| gout[k] * sigmoid(x.data[k]));
        }
        Op::Matmul => {
            let (a, b) = (&nodes[ins[0]].value, &nodes[ins[1]].value);
            let (mm, kk, nn) = (a.shape[0], a.shape[1], b.shape[1]);
            if nodes[ins[0]].requires_grad {
                let da = ensure(g, ins[0], a.numel());
                ops::matmul_grad_a(gout, &b.data, mm, kk, nn, da);
            }
            if nodes[ins[1]].requires_grad {
                let db = ensure(g, ins[1], b.numel());
                ops::matmul_grad_b(gout, &a.data, mm, kk, nn, db);
            }
        }
        Op::Conv2d { stride, pad } => {
            let x = &nodes[ins[0]].value;
            let w = &nodes[ins[1]].value;
            let (n, cin, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
            let (cout, _, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
            if nodes[ins[0]].requires_grad {
                let dx = ensure(g, ins[0], x.numel());
                ops::conv2d_grad_x(
                    gout, n, cin, h, wd, &w.data, cout, kh, kw, *stride, *pad, dx,
                );
            }
            if nodes[ins[1]].requires_grad {
                let dw = ensure(g, ins[1], w.numel());
                ops::conv2d_grad_w(
                    gout, &x.data, n, cin, h, wd, cout, kh, kw, *stride, *pad, dw, None,
                );
            }
            if ins.len() == 3 && nodes[ins[2]].requires_grad {
                let plane = y.shape[2] * y.shape[3];
                let db = ensure(g, ins[2], cout);
                for b in 0..n {
                    for co in 0..cout {
                        let base = (b * cout + co) * plane;
                        db[co] += gout[base..base + plane].iter().sum::<f64>();
                    }
                }
            }
        }
        Op::Upsample2x => {
            if nodes[ins[0]].requires_grad {
                let x = &nodes[ins[0]].value;
                let (n, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
                let dx = ensure(g, ins[0], x.numel());
                ops::upsample2x_grad(gout, n * c, h, wd, dx);
            }
        }
        Op::Softmax { from_axis } => {
            if nodes[ins[0]].requires_grad {
                let rows: usize = y.shape[..*from_axis].iter().product();
                let cols: usize = y.shape[*from_axis..].iter().product();
                let dx = ensure(g, ins[0], y.numel());
                for r in 0..rows {
                    let yr = &y.data[r * cols..(r + 1) * cols];
                    let gr = &gout[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                    let dr = &mut dx[r * cols..(r + 1) * cols];
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d += yv * (gv - dot);
                    }
                }
            }
        }
        Op::Sum { axis } => {
            if nodes[ins[0]].requires_grad {
                let x = &nodes[ins[0]].value;
                let dx = ensure(g, ins[0], x.numel());
                match axis {
                    None => {
                        let gv = gout[0];
                        dx.iter_mut().for_each(|d| *d += gv);
                    }
                    Some(ax) => {
                        let (outer, len, inner_ext) = ops::axis_split(&x.shape, *ax);
                        for o in 0..outer {
                            for j in 0..len {
                                let base = (o * len + j) * inner_ext;
                                let gb = o * inner_ext;
                                for i in 0..inner_ext {
                                    dx[base + i] += gout[gb + i];
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::Mean { axis } => {
            if nodes[ins[0]].requires_grad {
                let x = &nodes[ins[0]].value;
                let dx = ensure(g, ins[0], x.numel());
                match axis {
                    None => {
                        let gv = gout[0] / x.numel() as f64;
                        dx.iter_mut().for_each(|d| *d += gv);
                    }
                    Some(ax) => {
                        let (outer, len, inner_ext) = ops::axis_split(&x.shape, *ax);
                        let inv = 1.0 / len as f64;
                        for o in 0..outer {
                            for j in 0..len {
                                let base = (o * len + j) * inner_ext;
                                let gb = o * inner_ext;
                                for i in 0..inner_ext {
                                    dx[base + i] += gout[gb + i] * inv;
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::Max => {
            if nodes[ins[0]].requires_grad {
                let x = &nodes[ins[0]].value;
                let dx = ensure(g, ins[0], x.numel());
                for (k, &src) in node.saved.iter().enumerate() {
                    dx[src] += gout[k];
                }
            }
        }
        Op::Reshape => {
            if nodes[ins[0]].requires_grad {
                let x = &nodes[ins[0]].value;
                let dx = ensure(g, ins[0], x.numel());
                for (d, &gv) in dx.iter_mut().zip(gout) {
                    *d += gv;
                }
            }
        }
        Op::Concat { axis } => {
            let (outer, total_len, inner_ext) = ops::axis_split(&y.shape, *axis);
            let total = total_len * inner_ext;
            let mut off = 0usize;
            for &iid in ins {
                let ext = nodes[iid].value.shape[*axis] * inner_ext;
                if nodes[iid].requires_grad {
                    let dx = ensure(g, iid, nodes[iid].value.numel());
                    for o in 0..outer {
                        let src = &gout[o * total + off..o * total + off + ext];
                        let dst = &mut dx[o * ext..(o + 1) * ext];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                off += ext;
            }
        }
        Op::Slice { starts } => {
            if nodes[ins[0]].requires_grad {
                let x = &nodes[ins[0]].value;
                let shape = x.shape.clone();
                let out_shape = y.shape.clone();
                let dx = ensure(g, ins[0], x.numel());
                scatter_box(dx, &shape, starts, &out_shape, gout);
            }
        }
        Op::Custom(op) => {
            let tensors: Vec<&Tensor> = ins.iter().map(|&i| &nodes[i].value).collect();
            let mut local: Vec<Option<Vec<f64>>> = ins
                .iter()
                .map(|&i| {
                    if nodes[i].requires_grad {
                        Some(vec![0.0; nodes[i].value.numel()])
                    } else {
                        None
                    }
                })
                .collect();
            op.backward(gout, &tensors, &mut local)?;
            for (slot, &iid) in local.into_iter().zip(ins) {
                if let Some(buf) = slot {
                    let dst = ensure(g, iid, nodes[iid].value.numel());
                    for (d, &s) in dst.iter_mut().zip(&buf) {
                        *d += s;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Adds `grad` (shaped `out_shape`) into the `starts` sub-box of `dst`.
fn scatter_box(
    dst: &mut [f64],
    dst_shape: &[usize],
    starts: &[usize],
    out_shape: &[usize],
    grad: &[f64],
) {
    let nd = dst_shape.len();
    let strides = strides_of(dst_shape);
    let run = out_shape[nd - 1];
    let rows: usize = out_shape[..nd - 1].iter().product();
    let mut coord = vec![0usize; nd.saturating_sub(1)];
    for row in 0..rows {
        let mut off = starts[nd - 1];
        for d in 0..nd - 1 {
            off += (starts[d] + coord[d]) * strides[d];
        }
        for (d, &s) in dst[off..off + run].iter_mut().zip(&grad[row * run..row * run + run]) {
            *d += s;
        }
        for d in (0..nd - 1).rev() {
            coord[d] += 1;
            if coord[d] < out_shape[d] {
                break;
            }
            coord[d] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &Graph, data: Vec<f64>) -> Value {
        g.leaf(&Tensor::from_vec(data).with_grad()).unwrap()
    }

    #[test]
    fn chain_rule_scalar() {
        // y = (2x + 3)^2, dy/dx = 4(2x+3); at x = 1 -> 20.
        let g = Graph::new();
        let x = leaf(&g, vec![1.0]);
        let y = x.scale(2.0).unwrap().add_scalar(3.0).unwrap().square().unwrap();
        y.backward().unwrap();
        assert_eq!(y.item().unwrap(), 25.0);
        assert_eq!(x.grad().unwrap().data, vec![20.0]);
    }

    #[test]
    fn grads_accumulate_until_cleared() {
        let g = Graph::new();
        let x = leaf(&g, vec![3.0]);
        let y = x.square().unwrap();
        y.backward().unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap().data, vec![12.0]); // 2 * (2x)
    }

    #[test]
    fn duplicated_input_accumulates_both_paths() {
        // y = x * x -> dy/dx = 2x via two product paths.
        let g = Graph::new();
        let x = leaf(&g, vec![5.0]);
        let y = x.mul(&x).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap().data, vec![10.0]);
    }

    #[test]
    fn scalar_broadcast_backward_sums() {
        let g = Graph::new();
        let s = leaf(&g, vec![2.0]);
        let v = leaf(&g, vec![1.0, 2.0, 3.0]);
        let y = v.mul(&s).unwrap().sum().unwrap();
        y.backward().unwrap();
        assert_eq!(s.grad().unwrap().data, vec![6.0]);
        assert_eq!(v.grad().unwrap().data, vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn max_tie_takes_lowest_index() {
        let g = Graph::new();
        let x = leaf(&g, vec![1.0, 7.0, 7.0, 3.0]);
        let y = x.max().unwrap();
        y.backward().unwrap();
        assert_eq!(y.item().unwrap(), 7.0);
        assert_eq!(x.grad().unwrap().data, vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grad_is_centered() {
        let g = Graph::new();
        let x = g
            .leaf(
                &Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, -1.0, 0.0, 1.0])
                    .unwrap()
                    .with_grad(),
            )
            .unwrap();
        let y = x.softmax(1).unwrap();
        let t = y.tensor();
        for r in 0..2 {
            let s: f64 = t.data[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // Sum of softmax outputs is constant 1, so its gradient is zero.
        let total = y.sum().unwrap();
        total.backward().unwrap();
        for v in x.grad().unwrap().data {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn concat_slice_round_trip() {
        let g = Graph::new();
        let a = g.leaf(&Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap().with_grad()).unwrap();
        let b = g.leaf(&Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap().with_grad()).unwrap();
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.tensor().data, vec![1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = c.slice(&[0, 2], &[2, 3]).unwrap();
        assert_eq!(back.tensor().data, vec![5.0, 6.0]);
        let loss = back.sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(b.grad().unwrap().data, vec![1.0, 1.0]);
        assert_eq!(a.grad().unwrap().data, vec![0.0; 4]);
    }

    #[test]
    fn mixing_graphs_is_rejected() {
        let g1 = Graph::new();
        let g2 = Graph::new();
        let a = leaf(&g1, vec![1.0]);
        let b = leaf(&g2, vec![2.0]);
        assert!(matches!(a.add(&b), Err(DiffError::GraphMismatch)));
    }

    #[test]
    fn overflow_is_an_error_not_a_value() {
        let g = Graph::new();
        let x = leaf(&g, vec![1000.0]);
        assert!(matches!(x.exp(), Err(DiffError::NonFinite { op: "exp" })));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let g = Graph::new();
        let x = leaf(&g, vec![1.0, 2.0]);
        assert!(matches!(x.backward(), Err(DiffError::NotScalar { .. })));
    }

    #[test]
    fn detach_blocks_gradient_flow() {
        let g = Graph::new();
        let x = leaf(&g, vec![2.0]);
        let d = x.square().unwrap().detach().unwrap();
        let y = x.mul(&d).unwrap(); // y = x * const(4)
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap().data, vec![4.0]);
    }

    #[test]
    fn mean_axis_shapes_and_grads() {
        let g = Graph::new();
        let x = g
            .leaf(&Tensor::new(vec![2, 3], (1..=6).map(|v| v as f64).collect()).unwrap().with_grad())
            .unwrap();
        let m = x.mean_axis(1).unwrap();
        assert_eq!(m.shape(), vec![2]);
        assert_eq!(m.tensor().data, vec![2.0, 5.0]);
        m.sum().unwrap().backward().unwrap();
        for v in x.grad().unwrap().data {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn conv_bias_grad_counts_output_pixels() {
        let g = Graph::new();
        let x = g.leaf(&Tensor::zeros(&[1, 1, 4, 4])).unwrap();
        let w = g.leaf(&Tensor::new(vec![2, 1, 3, 3], vec![0.0; 18]).unwrap().with_grad()).unwrap();
        let b = g.leaf(&Tensor::from_vec(vec![0.5, -0.5]).with_grad()).unwrap();
        let y = x.conv2d(&w, Some(&b), 1, 1).unwrap();
        assert_eq!(y.shape(), vec![1, 2, 4, 4]);
        y.sum().unwrap().backward().unwrap();
        assert_eq!(b.grad().unwrap().data, vec![16.0, 16.0]);
    }
}
