//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Broadcasting and contraction rules (all tensors have rank <= 2; a rank-1
//! tensor of length `n` is treated as a `1 x n` row where a matrix is expected):
//!
//! * `matmul(a, b)`: `[m, k] x [k, n] -> [m, n]`.
//! * `add`, `sub`, `mul`: identical shapes; or `rhs` is a vector whose length
//!   equals the last dimension of `lhs` (broadcast over rows); or `rhs` holds a
//!   single element (broadcast everywhere). The result has `lhs`'s shape.
//! * `sum`, `mean`: `axis = None` reduces everything to a scalar (shape `[]`);
//!   `Some(0)` on `[r, c]` gives `[c]`, `Some(1)` gives `[r]`.
//! * `softmax(axis)`, `layernorm`: along an axis of a matrix (layernorm always
//!   normalizes the last axis, without affine parameters).
//! * `concat(axis)`: all inputs are matrices agreeing on the other axis.
//! * `index_select(axis, idx)`: gathers rows (`axis = 0`) or columns (`axis = 1`).
//! * `smooth_l1`, `l1`: elementwise with the same broadcasting as `sub`.
//! * `map_rows`: a row-wise function supplied with its own local Jacobian.

use std::collections::BTreeMap;

use super::{Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Kinds of recorded operations, used in error messages and gradcheck reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    Matmul,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Sum,
    Mean,
    Concat,
    IndexSelect,
    Transpose,
    Relu,
    Gelu,
    Sigmoid,
    Tanh,
    Softmax,
    LayerNorm,
    SmoothL1,
    L1,
    MapRows,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Matmul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Concat => "concat",
            OpKind::IndexSelect => "index_select",
            OpKind::Transpose => "transpose",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layernorm",
            OpKind::SmoothL1 => "smooth_l1",
            OpKind::L1 => "l1",
            OpKind::MapRows => "map_rows",
        }
    }
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Rows,
    Scalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var, bc: Broadcast },
    Sub { a: Var, b: Var, bc: Broadcast },
    Mul { a: Var, b: Var, bc: Broadcast },
    Scale { x: Var, c: f64 },
    AddScalar { x: Var },
    Reduce { x: Var, axis: Option<usize>, mean: bool },
    Concat { inputs: Vec<Var>, axis: usize },
    IndexSelect { x: Var, axis: usize, indices: Vec<usize> },
    Transpose { x: Var },
    Relu { x: Var },
    Gelu { x: Var },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, inv_std: Vec<f64> },
    SmoothL1 { x: Var, y: Var, bc: Broadcast, beta: f64 },
    L1 { x: Var, y: Var, bc: Broadcast },
    MapRows { x: Var, in_cols: usize, out_cols: usize, jacobian: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// A single forward pass. Build a fresh graph per pass, call
/// [`Graph::backward`] once on a scalar loss, then read gradients.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    params: Vec<(String, Var)>,
    inference: bool,
}

/// Interprets a shape as `(rows, cols)`.
fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[0], shape[1]),
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise Huber-style loss: `0.5 d^2 / beta` inside `|d| < beta`, `|d| - beta/2` outside.
pub fn smooth_l1_value(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        0.5 * d * d / beta
    } else {
        d.abs() - 0.5 * beta
    }
}

fn smooth_l1_grad(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        d / beta
    } else {
        d.signum()
    }
}

fn sign0(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// A graph whose parameter leaves do not require gradients.
    pub fn inference() -> Self {
        Graph {
            inference: true,
            ..Graph::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    /// The single element of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).data[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shapes are consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    fn push(&mut self, op_kind: OpKind, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var, TensorError> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: op_kind });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self.inputs_of(&op).iter().any(|v| self.node(*v).requires_grad),
        };
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Matmul { a, b, .. }
            | Op::Add { a, b, .. }
            | Op::Sub { a, b, .. }
            | Op::Mul { a, b, .. } => vec![*a, *b],
            Op::SmoothL1 { x, y, .. } | Op::L1 { x, y, .. } => vec![*x, *y],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Scale { x, .. }
            | Op::AddScalar { x }
            | Op::Reduce { x, .. }
            | Op::IndexSelect { x, .. }
            | Op::Transpose { x }
            | Op::Relu { x }
            | Op::Gelu { x }
            | Op::Sigmoid { x }
            | Op::Tanh { x }
            | Op::Softmax { x, .. }
            | Op::LayerNorm { x, .. }
            | Op::MapRows { x, .. } => vec![*x],
        }
    }

    /// Records a leaf. Gradients are tracked when `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        let t = tensor.clone();
        let requires_grad = t.requires_grad();
        let shape = t.shape().to_vec();
        let data = t.into_data();
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let shape = tensor.shape().to_vec();
        self.nodes.push(Node {
            shape,
            data: tensor.into_data(),
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a named parameter leaf; see [`Graph::accumulate_param_grads`].
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var, TensorError> {
        let t = params
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        let v = self.leaf(t);
        if self.inference {
            self.nodes[v.0].requires_grad = false;
        } else {
            self.params.push((name.to_string(), v));
        }
        Ok(v)
    }

    fn broadcast(&self, op: OpKind, a: Var, b: Var) -> Result<Broadcast, TensorError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let nb: usize = sb.iter().product();
        if sa == sb {
            Ok(Broadcast::Same)
        } else if sb.len() == 1 && !sa.is_empty() && sa[sa.len() - 1] == sb[0] {
            Ok(Broadcast::Rows)
        } else if nb == 1 {
            Ok(Broadcast::Scalar)
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn rhs_index(bc: Broadcast, i: usize, cols: usize) -> usize {
        match bc {
            Broadcast::Same => i,
            Broadcast::Rows => i % cols,
            Broadcast::Scalar => 0,
        }
    }

    fn binary(
        &mut self,
        kind: OpKind,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<usize>, Vec<f64>, Broadcast), TensorError> {
        let bc = self.broadcast(kind, a, b)?;
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().unwrap_or(&1);
        let da = self.value(a);
        let db = self.value(b);
        let data = da
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, db[Self::rhs_index(bc, i, cols)]))
            .collect();
        Ok((shape, data, bc))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (m, k) = dims2(&sa);
        let (k2, n) = dims2(&sb);
        if sa.len() != 2 || sb.len() != 2 || k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: OpKind::Matmul,
                lhs: sa,
                rhs: sb,
            });
        }
        let mut out = vec![0.0; m * n];
        let da = self.value(a);
        let db = self.value(b);
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = da[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &db[p * n..(p + 1) * n];
                for (o, bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        self.push(OpKind::Matmul, vec![m, n], out, Op::Matmul { a, b, m, k, n })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (shape, data, bc) = self.binary(OpKind::Add, a, b, |x, y| x + y)?;
        self.push(OpKind::Add, shape, data, Op::Add { a, b, bc })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (shape, data, bc) = self.binary(OpKind::Sub, a, b, |x, y| x - y)?;
        self.push(OpKind::Sub, shape, data, Op::Sub { a, b, bc })
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (shape, data, bc) = self.binary(OpKind::Mul, a, b, |x, y| x * y)?;
        self.push(OpKind::Mul, shape, data, Op::Mul { a, b, bc })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        let n = self.node(x);
        let data = n.data.iter().map(|v| v * c).collect();
        let shape = n.shape.clone();
        self.push(OpKind::Scale, shape, data, Op::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        let n = self.node(x);
        let data = n.data.iter().map(|v| v + c).collect();
        let shape = n.shape.clone();
        self.push(OpKind::AddScalar, shape, data, Op::AddScalar { x })
    }

    fn reduce(&mut self, x: Var, axis: Option<usize>, mean: bool) -> Result<Var, TensorError> {
        let kind = if mean { OpKind::Mean } else { OpKind::Sum };
        let shape = self.shape(x).to_vec();
        let (r, c) = dims2(&shape);
        let data = self.value(x);
        let (out_shape, out) = match axis {
            None => {
                let s: f64 = data.iter().sum();
                let n = data.len().max(1) as f64;
                (vec![], vec![if mean { s / n } else { s }])
            }
            Some(0) if shape.len() == 1 => {
                let s: f64 = data.iter().sum();
                (vec![], vec![if mean { s / c as f64 } else { s }])
            }
            Some(0) if shape.len() == 2 => {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        out[j] += data[i * c + j];
                    }
                }
                if mean {
                    out.iter_mut().for_each(|v| *v /= r as f64);
                }
                (vec![c], out)
            }
            Some(1) if shape.len() == 2 => {
                let out = (0..r)
                    .map(|i| {
                        let s: f64 = data[i * c..(i + 1) * c].iter().sum();
                        if mean {
                            s / c as f64
                        } else {
                            s
                        }
                    })
                    .collect();
                (vec![r], out)
            }
            Some(a) => {
                return Err(TensorError::InvalidAxis {
                    op: kind,
                    axis: a,
                    shape,
                })
            }
        };
        self.push(kind, out_shape, out, Op::Reduce { x, axis, mean })
    }

    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var, TensorError> {
        self.reduce(x, axis, false)
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var, TensorError> {
        self.reduce(x, axis, true)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = *inputs.first().ok_or(TensorError::EmptyConcat)?;
        let s0 = self.shape(first).to_vec();
        if s0.len() != 2 || axis > 1 {
            return Err(TensorError::InvalidAxis {
                op: OpKind::Concat,
                axis,
                shape: s0,
            });
        }
        let other = 1 - axis;
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != 2 || s[other] != s0[other] {
                return Err(TensorError::ShapeMismatch {
                    op: OpKind::Concat,
                    lhs: s0,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (shape, data) = if axis == 0 {
            let mut data = Vec::with_capacity(total * s0[1]);
            for v in inputs {
                data.extend_from_slice(self.value(*v));
            }
            (vec![total, s0[1]], data)
        } else {
            let rows = s0[0];
            let mut data = Vec::with_capacity(rows * total);
            for i in 0..rows {
                for v in inputs {
                    let c = self.shape(*v)[1];
                    data.extend_from_slice(&self.value(*v)[i * c..(i + 1) * c]);
                }
            }
            (vec![rows, total], data)
        };
        self.push(
            OpKind::Concat,
            shape,
            data,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || axis > 1 {
            return Err(TensorError::InvalidAxis {
                op: OpKind::IndexSelect,
                axis,
                shape,
            });
        }
        let (r, c) = (shape[0], shape[1]);
        let limit = shape[axis];
        if let Some(&bad) = indices.iter().find(|&&i| i >= limit) {
            return Err(TensorError::IndexOutOfRange {
                op: OpKind::IndexSelect,
                index: bad,
                len: limit,
            });
        }
        let data = self.value(x);
        let (out_shape, out) = if axis == 0 {
            let mut out = Vec::with_capacity(indices.len() * c);
            for &i in indices {
                out.extend_from_slice(&data[i * c..(i + 1) * c]);
            }
            (vec![indices.len(), c], out)
        } else {
            let mut out = Vec::with_capacity(r * indices.len());
            for i in 0..r {
                for &j in indices {
                    out.push(data[i * c + j]);
                }
            }
            (vec![r, indices.len()], out)
        };
        self.push(
            OpKind::IndexSelect,
            out_shape,
            out,
            Op::IndexSelect {
                x,
                axis,
                indices: indices.to_vec(),
            },
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::InvalidAxis {
                op: OpKind::Transpose,
                axis: 1,
                shape,
            });
        }
        let (r, c) = (shape[0], shape[1]);
        let data = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = data[i * c + j];
            }
        }
        self.push(OpKind::Transpose, vec![c, r], out, Op::Transpose { x })
    }

    fn unary(&mut self, kind: OpKind, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, TensorError> {
        let n = self.node(x);
        let data = n.data.iter().map(|&v| f(v)).collect();
        let shape = n.shape.clone();
        self.push(kind, shape, data, op)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(OpKind::Relu, x, |v| v.max(0.0), Op::Relu { x })
    }

    /// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(OpKind::Gelu, x, gelu, Op::Gelu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(OpKind::Sigmoid, x, sigmoid, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(OpKind::Tanh, x, f64::tanh, Op::Tanh { x })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let (r, c) = dims2(&shape);
        let valid = match shape.len() {
            1 => axis == 0,
            2 => axis <= 1,
            _ => false,
        };
        if !valid {
            return Err(TensorError::InvalidAxis {
                op: OpKind::Softmax,
                axis,
                shape,
            });
        }
        let last = shape.len() == 1 || axis == 1;
        let data = self.value(x);
        let mut out = vec![0.0; data.len()];
        let (groups, len) = if last { (r, c) } else { (c, r) };
        let idx = |g: usize, k: usize| if last { g * c + k } else { k * c + g };
        for g in 0..groups {
            let max = (0..len).map(|k| data[idx(g, k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = (data[idx(g, k)] - max).exp();
                out[idx(g, k)] = e;
                total += e;
            }
            for k in 0..len {
                out[idx(g, k)] /= total;
            }
        }
        let axis = if last { 1 } else { 0 };
        self.push(OpKind::Softmax, shape, out, Op::Softmax { x, axis })
    }

    /// Normalizes each row to zero mean and unit (population) variance.
    pub fn layernorm(&mut self, x: Var, eps: f64) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let (r, c) = dims2(&shape);
        let data = self.value(x);
        let mut out = vec![0.0; data.len()];
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = &data[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mu) * s;
            }
            inv_std.push(s);
        }
        self.push(OpKind::LayerNorm, shape, out, Op::LayerNorm { x, inv_std })
    }

    /// Elementwise smooth-L1 between `x` and `y`; see [`smooth_l1_value`].
    pub fn smooth_l1(&mut self, x: Var, y: Var, beta: f64) -> Result<Var, TensorError> {
        let (shape, data, bc) = self.binary(OpKind::SmoothL1, x, y, |a, b| smooth_l1_value(a - b, beta))?;
        self.push(OpKind::SmoothL1, shape, data, Op::SmoothL1 { x, y, bc, beta })
    }

    /// Elementwise `|x - y|`.
    pub fn l1(&mut self, x: Var, y: Var) -> Result<Var, TensorError> {
        let (shape, data, bc) = self.binary(OpKind::L1, x, y, |a, b| (a - b).abs())?;
        self.push(OpKind::L1, shape, data, Op::L1 { x, y, bc })
    }

    /// Applies `f(row_index, input_row, output_row, jacobian)` to every row.
    /// `jacobian` is `out_cols x in_cols`, row-major, and must hold the
    /// derivative of the outputs with respect to the inputs at this point.
    pub fn map_rows<F>(&mut self, x: Var, out_cols: usize, mut f: F) -> Result<Var, TensorError>
    where
        F: FnMut(usize, &[f64], &mut [f64], &mut [f64]),
    {
        let shape = self.shape(x).to_vec();
        let (r, c) = dims2(&shape);
        let data = self.value(x);
        let mut out = vec![0.0; r * out_cols];
        let mut jacobian = vec![0.0; r * out_cols * c];
        for i in 0..r {
            f(
                i,
                &data[i * c..(i + 1) * c],
                &mut out[i * out_cols..(i + 1) * out_cols],
                &mut jacobian[i * out_cols * c..(i + 1) * out_cols * c],
            );
        }
        let out_shape = if shape.len() == 2 { vec![r, out_cols] } else { vec![out_cols] };
        self.push(
            OpKind::MapRows,
            out_shape,
            out,
            Op::MapRows {
                x,
                in_cols: c,
                out_cols,
                jacobian,
            },
        )
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let ln = self.node(loss);
        if ln.data.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: ln.shape.clone(),
            });
        }
        let requires_grad = ln.requires_grad;
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    /// Clears gradients so `backward` may run again on this graph.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].data.len();
        let buf = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(buf);
    }

    fn acc_broadcast(&mut self, b: Var, bc: Broadcast, cols: usize, g: &[f64], sign: f64, mul: Option<&[f64]>) {
        self.acc(b, |buf| {
            for (i, gv) in g.iter().enumerate() {
                let w = mul.map_or(1.0, |m| m[i]);
                buf[Self::rhs_index(bc, i, cols)] += sign * gv * w;
            }
        });
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        let cols = *self.nodes[idx].shape.last().unwrap_or(&1);
        match &op {
            Op::Leaf => {}
            Op::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.nodes[a.0].requires_grad {
                    let db = self.nodes[b.0].data.clone();
                    self.acc(*a, |buf| {
                        for i in 0..m {
                            for p in 0..k {
                                let brow = &db[p * n..(p + 1) * n];
                                let grow = &g[i * n..(i + 1) * n];
                                buf[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    });
                }
                if self.nodes[b.0].requires_grad {
                    let da = self.nodes[a.0].data.clone();
                    self.acc(*b, |buf| {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let av = da[i * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                for (o, gv) in buf[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *o += av * gv;
                                }
                            }
                        }
                    });
                }
            }
            Op::Add { a, b, bc } => {
                self.acc(*a, |buf| buf.iter_mut().zip(g).for_each(|(o, v)| *o += v));
                self.acc_broadcast(*b, *bc, cols, g, 1.0, None);
            }
            Op::Sub { a, b, bc } => {
                self.acc(*a, |buf| buf.iter_mut().zip(g).for_each(|(o, v)| *o += v));
                self.acc_broadcast(*b, *bc, cols, g, -1.0, None);
            }
            Op::Mul { a, b, bc } => {
                let bc = *bc;
                let da = self.nodes[a.0].data.clone();
                let db = self.nodes[b.0].data.clone();
                self.acc(*a, |buf| {
                    for (i, o) in buf.iter_mut().enumerate() {
                        *o += g[i] * db[Self::rhs_index(bc, i, cols)];
                    }
                });
                self.acc_broadcast(*b, bc, cols, g, 1.0, Some(&da));
            }
            Op::Scale { x, c } => {
                let c = *c;
                self.acc(*x, |buf| buf.iter_mut().zip(g).for_each(|(o, v)| *o += c * v));
            }
            Op::AddScalar { x } => {
                self.acc(*x, |buf| buf.iter_mut().zip(g).for_each(|(o, v)| *o += v));
            }
            Op::Reduce { x, axis, mean } => {
                let shape = self.nodes[x.0].shape.clone();
                let (r, c) = dims2(&shape);
                let (axis, mean) = (*axis, *mean);
                self.acc(*x, |buf| match (axis, shape.len()) {
                    (None, _) | (Some(0), 1) => {
                        let s = if mean { g[0] / buf.len().max(1) as f64 } else { g[0] };
                        buf.iter_mut().for_each(|o| *o += s);
                    }
                    (Some(0), _) => {
                        let d = if mean { r as f64 } else { 1.0 };
                        for i in 0..r {
                            for j in 0..c {
                                buf[i * c + j] += g[j] / d;
                            }
                        }
                    }
                    _ => {
                        let d = if mean { c as f64 } else { 1.0 };
                        for i in 0..r {
                            for j in 0..c {
                                buf[i * c + j] += g[i] / d;
                            }
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let total_cols = cols;
                let mut offset = 0;
                for v in inputs {
                    let s = self.nodes[v.0].shape.clone();
                    let (r, c) = (s[0], s[1]);
                    if *axis == 0 {
                        let start = offset * total_cols;
                        self.acc(*v, |buf| {
                            buf.iter_mut().zip(&g[start..start + r * c]).for_each(|(o, x)| *o += x)
                        });
                        offset += r;
                    } else {
                        let off = offset;
                        self.acc(*v, |buf| {
                            for i in 0..r {
                                for j in 0..c {
                                    buf[i * c + j] += g[i * total_cols + off + j];
                                }
                            }
                        });
                        offset += c;
                    }
                }
            }
            Op::IndexSelect { x, axis, indices } => {
                let s = self.nodes[x.0].shape.clone();
                let (r, c) = (s[0], s[1]);
                let k = indices.len();
                self.acc(*x, |buf| {
                    if *axis == 0 {
                        for (row, &i) in indices.iter().enumerate() {
                            for j in 0..c {
                                buf[i * c + j] += g[row * c + j];
                            }
                        }
                    } else {
                        for i in 0..r {
                            for (col, &j) in indices.iter().enumerate() {
                                buf[i * c + j] += g[i * k + col];
                            }
                        }
                    }
                });
            }
            Op::Transpose { x } => {
                let s = self.nodes[x.0].shape.clone();
                let (r, c) = (s[0], s[1]);
                self.acc(*x, |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Relu { x } => {
                let dx = self.nodes[x.0].data.clone();
                self.acc(*x, |buf| {
                    for (i, o) in buf.iter_mut().enumerate() {
                        if dx[i] > 0.0 {
                            *o += g[i];
                        }
                    }
                });
            }
            Op::Gelu { x } => {
                let dx = self.nodes[x.0].data.clone();
                self.acc(*x, |buf| {
                    for (i, o) in buf.iter_mut().enumerate() {
                        *o += g[i] * gelu_grad(dx[i]);
                    }
                });
            }
            Op::Sigmoid { x } => {
                let y = self.nodes[idx].data.clone();
                self.acc(*x, |buf| {
                    for (i, o) in buf.iter_mut().enumerate() {
                        *o += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Tanh { x } => {
                let y = self.nodes[idx].data.clone();
                self.acc(*x, |buf| {
                    for (i, o) in buf.iter_mut().enumerate() {
                        *o += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = self.nodes[idx].data.clone();
                let (r, c) = dims2(&self.nodes[idx].shape);
                let last = *axis == 1;
                let (groups, len) = if last { (r, c) } else { (c, r) };
                let at = |gi: usize, k: usize| if last { gi * c + k } else { k * c + gi };
                self.acc(*x, |buf| {
                    for gi in 0..groups {
                        let dot: f64 = (0..len).map(|k| g[at(gi, k)] * y[at(gi, k)]).sum();
                        for k in 0..len {
                            let p = at(gi, k);
                            buf[p] += y[p] * (g[p] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let y = self.nodes[idx].data.clone();
                let (r, c) = dims2(&self.nodes[idx].shape);
                self.acc(*x, |buf| {
                    for i in 0..r {
                        let gr = &g[i * c..(i + 1) * c];
                        let yr = &y[i * c..(i + 1) * c];
                        let mg = gr.iter().sum::<f64>() / c as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            buf[i * c + j] += inv_std[i] * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                });
            }
            Op::SmoothL1 { x, y, bc, beta } => {
                let (bc, beta) = (*bc, *beta);
                let dx = self.nodes[x.0].data.clone();
                let dy = self.nodes[y.0].data.clone();
                let d: Vec<f64> = dx
                    .iter()
                    .enumerate()
                    .map(|(i, a)| g[i] * smooth_l1_grad(a - dy[Self::rhs_index(bc, i, cols)], beta))
                    .collect();
                self.acc(*x, |buf| buf.iter_mut().zip(&d).for_each(|(o, v)| *o += v));
                self.acc_broadcast(*y, bc, cols, &d, -1.0, None);
            }
            Op::L1 { x, y, bc } => {
                let bc = *bc;
                let dx = self.nodes[x.0].data.clone();
                let dy = self.nodes[y.0].data.clone();
                let d: Vec<f64> = dx
                    .iter()
                    .enumerate()
                    .map(|(i, a)| g[i] * sign0(a - dy[Self::rhs_index(bc, i, cols)]))
                    .collect();
                self.acc(*x, |buf| buf.iter_mut().zip(&d).for_each(|(o, v)| *o += v));
                self.acc_broadcast(*y, bc, cols, &d, -1.0, None);
            }
            Op::MapRows {
                x,
                in_cols,
                out_cols,
                jacobian,
            } => {
                let (ic, oc) = (*in_cols, *out_cols);
                let rows = g.len() / oc.max(1);
                self.acc(*x, |buf| {
                    for r in 0..rows {
                        let jac = &jacobian[r * oc * ic..(r + 1) * oc * ic];
                        for o in 0..oc {
                            let gv = g[r * oc + o];
                            if gv == 0.0 {
                                continue;
                            }
                            for i in 0..ic {
                                buf[r * ic + i] += gv * jac[o * ic + i];
                            }
                        }
                    }
                });
            }
        }
        self.nodes[idx].op = op;
    }

    /// Gradient of the last loss with respect to `v`, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds `scale * grad` of every parameter leaf into the matching tensor's
    /// grad buffer. Parameters unreachable from the loss receive zeros.
    pub fn accumulate_param_grads(&self, params: &mut ParamSet, scale: f64) -> Result<(), TensorError> {
        if !self.backward_done {
            return Err(TensorError::NoBackward);
        }
        for (name, v) in &self.params {
            let t = params
                .get_mut(name)
                .ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
            match self.grad(*v) {
                Some(g) => t.accumulate_grad(g, scale),
                None => {
                    let zeros = vec![0.0; t.numel()];
                    t.accumulate_grad(&zeros, 0.0);
                }
            }
        }
        Ok(())
    }
}

/// Named learnable tensors with deterministic (sorted) iteration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor.with_grad());
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// Euclidean norm of all gradients together.
    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .values()
            .filter_map(Tensor::grad)
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for t in self.tensors.values_mut() {
                if let Some(g) = t.grad_mut() {
                    g.iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_leaf(g: &mut Graph, shape: Vec<usize>, data: Vec<f64>) -> Var {
        g.leaf(&Tensor::new(shape, data).unwrap().with_grad())
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, vec![1, 2], vec![0.0, 0.0]);
        let y = g.softmax(x, 1).unwrap();
        assert_eq!(g.value(y), &[0.5, 0.5]);
    }

    #[test]
    fn layernorm_hand_case() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, vec![1, 2], vec![1.0, 3.0]);
        let y = g.layernorm(x, 0.0).unwrap();
        assert_eq!(g.value(y), &[-1.0, 1.0]);
    }

    #[test]
    fn smooth_l1_hand_case() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.05));
        let y = g.constant(Tensor::scalar(0.0));
        let l = g.smooth_l1(x, y, 1.0).unwrap();
        assert!((g.scalar(l) - 0.00125).abs() < 1e-18);
        assert_eq!(smooth_l1_value(2.0, 1.0), 1.5);
    }

    #[test]
    fn gelu_pinned_values() {
        assert_eq!(gelu(0.0), 0.0);
        // 0.5 * (1 + tanh(sqrt(2/pi) * 1.044715))
        assert!((gelu(1.0) - 0.841_191_990_608_276_8).abs() < 1e-15);
        assert!((gelu(-1.0) + 0.158_808_009_391_723_2).abs() < 1e-15);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, vec![3], vec![1.0, 2.0, 3.0]);
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq, None).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, vec![2], vec![1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(TensorError::NotScalar { .. })));
        let l = g.sum(x, None).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.backward(l), Err(TensorError::BackwardTwice));
        g.reset_grads();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: OpKind::Matmul,
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("matmul"));
        let c = g.constant(Tensor::zeros(vec![2]));
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn non_finite_outputs_are_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1e308, 1e308]));
        assert_eq!(
            g.scale(x, 10.0),
            Err(TensorError::NonFinite { op: OpKind::Scale })
        );
    }

    #[test]
    fn row_broadcast_gradient_sums_over_rows() {
        let mut g = Graph::new();
        let a = vec_leaf(&mut g, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = vec_leaf(&mut g, vec![2], vec![10.0, 20.0]);
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s), &[11.0, 22.0, 13.0, 24.0]);
        let l = g.sum(s, None).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn params_accumulate_into_set() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::vector(vec![1.0, -2.0]));
        for _ in 0..2 {
            let mut g = Graph::new();
            let w = g.param(&params, "w").unwrap();
            let sq = g.mul(w, w).unwrap();
            let l = g.sum(sq, None).unwrap();
            g.backward(l).unwrap();
            g.accumulate_param_grads(&mut params, 0.5).unwrap();
        }
        assert_eq!(params.get("w").unwrap().grad().unwrap(), &[2.0, -4.0]);
        assert!((params.clip_grad_norm(1.0) - 20f64.sqrt()).abs() < 1e-12);
        assert!((params.grad_norm() - 1.0).abs() < 1e-12);
    }
}
