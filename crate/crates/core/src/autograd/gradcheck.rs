//! Central finite-difference verification of analytic gradients.
//!
//! The numeric side only ever evaluates forward passes, so it is independent
//! of the backward rules it checks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Graph, OpKind, Tensor, TensorError, Var};
use crate::boxgeom::clamp_with_jacobian;
use crate::util::rng_from;

#[derive(Debug, Clone, Copy)]
pub struct Tolerance {
    pub step: f64,
    pub rel: f64,
    /// Differences below this are accepted regardless of magnitude.
    pub abs_floor: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            step: 1e-6,
            rel: 1e-4,
            abs_floor: 1e-8,
        }
    }
}

impl Tolerance {
    /// `|a - n| / max(|a|, |n|, abs_floor / rel)`; passing means `<= rel`.
    pub fn relative_error(&self, analytic: f64, numeric: f64) -> f64 {
        let scale = analytic.abs().max(numeric.abs()).max(self.abs_floor / self.rel);
        (analytic - numeric).abs() / scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub worst_rel_error: f64,
    pub elements: usize,
    pub passed: bool,
}

/// Compares the analytic gradient of `build` with central differences for
/// every element of every input. `build` receives one leaf per input and
/// must return a one-element loss. `distort` rescales the analytic gradient
/// before comparison (`1.0` for a real check).
pub fn check<F>(inputs: &[Tensor], tol: &Tolerance, distort: f64, build: F) -> Result<CheckOutcome, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(&t.clone().with_grad())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.scalar(loss))
    };

    let mut worst: f64 = 0.0;
    let mut elements = 0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for (ei, &orig) in t.data().iter().enumerate() {
            work[ti].data_mut()[ei] = orig + tol.step;
            let up = eval(&work)?;
            work[ti].data_mut()[ei] = orig - tol.step;
            let down = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * tol.step);
            let a = analytic[ti][ei] * distort;
            worst = worst.max(tol.relative_error(a, numeric));
            elements += 1;
        }
    }
    Ok(CheckOutcome {
        worst_rel_error: worst,
        elements,
        passed: worst <= tol.rel,
    })
}

/// Worst error over all cases for one operation.
#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub op: String,
    pub cases: usize,
    pub worst_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct SuiteOptions {
    pub seed: u64,
    pub cases_per_op: usize,
    /// Corrupts the analytic gradient of one op; used to prove the suite can fail.
    pub inject_fault: Option<OpKind>,
    pub tolerance: Tolerance,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seed: 0,
            cases_per_op: 20,
            inject_fault: None,
            tolerance: Tolerance::default(),
        }
    }
}

/// Every differentiable op in the engine.
pub const DIFFERENTIABLE_OPS: [OpKind; 20] = [
    OpKind::Matmul,
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::Scale,
    OpKind::AddScalar,
    OpKind::Sum,
    OpKind::Mean,
    OpKind::Concat,
    OpKind::IndexSelect,
    OpKind::Transpose,
    OpKind::Relu,
    OpKind::Gelu,
    OpKind::Sigmoid,
    OpKind::Tanh,
    OpKind::Softmax,
    OpKind::LayerNorm,
    OpKind::SmoothL1,
    OpKind::L1,
    OpKind::MapRows,
];

fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape, data).expect("consistent shape")
}

/// Values bounded away from zero, so kinks sit far from the FD stencil.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.random_range(0.05..2.0);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape, data).expect("consistent shape")
}

/// `sum(y * w)` with a fixed random weight so every output element matters.
fn weighted_sum(g: &mut Graph, y: Var, w: &Tensor) -> Result<Var, TensorError> {
    let wv = g.constant(w.clone());
    let p = g.mul(y, wv)?;
    g.sum(p, None)
}

fn weights_for(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    randn(rng, shape.to_vec())
}

fn output_shape(op: OpKind, r: usize, c: usize, axis: usize) -> Vec<usize> {
    match op {
        OpKind::Sum | OpKind::Mean => {
            if axis == 0 {
                vec![c]
            } else {
                vec![r]
            }
        }
        OpKind::Transpose => vec![c, r],
        _ => vec![r, c],
    }
}

/// Runs one randomized case for `op`.
fn run_case(op: OpKind, rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<CheckOutcome, TensorError> {
    let r = rng.random_range(1..=5);
    let c = rng.random_range(1..=5);
    let k = rng.random_range(1..=5);
    let axis = rng.random_range(0..=1usize);
    let distort = if opts.inject_fault == Some(op) { 1.01 } else { 1.0 };
    let tol = &opts.tolerance;
    match op {
        OpKind::Matmul => {
            // a [r, k] times a square b [k, k], chained twice
            let a = randn(rng, vec![r, k]);
            let b = randn(rng, vec![k, k]);
            let w = weights_for(rng, &[r, k]);
            check(&[a, b], tol, distort, |g, v| {
                let y = g.matmul(v[0], v[1])?;
                let y = g.matmul(y, v[1])?;
                weighted_sum(g, y, &w)
            })
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let a = randn(rng, vec![r, c]);
            let bshape = match rng.random_range(0..3) {
                0 => vec![r, c],
                1 => vec![c],
                _ => vec![1],
            };
            let b = randn(rng, bshape);
            let w = weights_for(rng, &[r, c]);
            check(&[a, b], tol, distort, |g, v| {
                let y = match op {
                    OpKind::Add => g.add(v[0], v[1])?,
                    OpKind::Sub => g.sub(v[0], v[1])?,
                    _ => g.mul(v[0], v[1])?,
                };
                weighted_sum(g, y, &w)
            })
        }
        OpKind::Scale | OpKind::AddScalar => {
            let a = randn(rng, vec![r, c]);
            let s: f64 = rng.random_range(-2.0..2.0);
            let w = weights_for(rng, &[r, c]);
            check(&[a], tol, distort, |g, v| {
                let y = if op == OpKind::Scale { g.scale(v[0], s)? } else { g.add_scalar(v[0], s)? };
                let y = g.mul(y, y)?;
                weighted_sum(g, y, &w)
            })
        }
        OpKind::Sum | OpKind::Mean => {
            let a = randn(rng, vec![r, c]);
            let w = weights_for(rng, &output_shape(op, r, c, axis));
            check(&[a], tol, distort, |g, v| {
                let y = if op == OpKind::Sum { g.sum(v[0], Some(axis))? } else { g.mean(v[0], Some(axis))? };
                let y = g.mul(y, y)?;
                weighted_sum(g, y, &w)
            })
        }
        OpKind::Concat => {
            let a = randn(rng, vec![r, c]);
            let b = if axis == 0 { randn(rng, vec![k, c]) } else { randn(rng, vec![r, k]) };
            let shape = if axis == 0 { [r + k, c] } else { [r, c + k] };
            let w = weights_for(rng, &shape);
            check(&[a, b], tol, distort, |g, v| {
                let y = g.concat(&[v[0], v[1], v[0]], axis)?;
                let y = g.index_select(y, axis, &(0..shape[axis]).collect::<Vec<_>>())?;
                weighted_sum(g, y, &w)
            })
        }
        OpKind::IndexSelect => {
            let a = randn(rng, vec![r, c]);
            let len = if axis == 0 { r } else { c };
            let idx: Vec<usize> = (0..k).map(|_| rng.random_range(0..len)).collect();
            let shape = if axis == 0 { [k, c] } else { [r, k] };
            let w = weights_for(rng, &shape);
            check(&[a], tol, distort, |g, v| {
                let y = g.index_select(v[0], axis, &idx)?;
                weighted_sum(g, y, &w)
            })
        }
        OpKind::Transpose => {
            let a = randn(rng, vec![r, c]);
            let w = weights_for(rng, &[c, r]);
            check(&[a], tol, distort, |g, v| {
                let y = g.transpose(v[0])?;
                weighted_sum(g, y, &w)
            })
        }
        OpKind::Relu | OpKind::Gelu | OpKind::Sigmoid | OpKind::Tanh => {
            let a = rand_away_from_zero(rng, vec![r, c]);
            let w = weights_for(rng, &[r, c]);
            check(&[a], tol, distort, |g, v| {
                let y = match op {
                    OpKind::Relu => g.relu(v[0])?,
                    OpKind::Gelu => g.gelu(v[0])?,
                    OpKind::Sigmoid => g.sigmoid(v[0])?,
                    _ => g.tanh(v[0])?,
                };
                weighted_sum(g, y, &w)
            })
        }
        OpKind::Softmax => {
            let a = randn(rng, vec![r, c]);
            let w = weights_for(rng, &[r, c]);
            check(&[a], tol, distort, |g, v| {
                let y = g.softmax(v[0], axis)?;
                let wv = g.constant(w.clone());
                let p = g.mul(y, wv)?;
                g.mean(p, None)
            })
        }
        OpKind::LayerNorm => {
            let c = c.max(2);
            let a = randn(rng, vec![r, c]);
            let w = weights_for(rng, &[r, c]);
            check(&[a], tol, distort, |g, v| {
                let y = g.layernorm(v[0], 1e-5)?;
                weighted_sum(g, y, &w)
            })
        }
        OpKind::SmoothL1 | OpKind::L1 => {
            let a = randn(rng, vec![r, c]);
            let mut b = randn(rng, vec![r, c]);
            // keep differences off the |d| = 0 and |d| = beta kinks
            for (bi, ai) in b.data_mut().iter_mut().zip(a.data()) {
                let d = *ai - *bi;
                if d.abs() < 0.05 || (d.abs() - 1.0).abs() < 0.05 {
                    *bi = ai - 0.5;
                }
            }
            let w = weights_for(rng, &[r, c]);
            check(&[a, b], tol, distort, |g, v| {
                let y = if op == OpKind::SmoothL1 { g.smooth_l1(v[0], v[1], 1.0)? } else { g.l1(v[0], v[1])? };
                weighted_sum(g, y, &w)
            })
        }
        OpKind::MapRows => {
            // clamp of cxcywh rows, using the box module's Jacobian
            let data: Vec<f64> = (0..r * 4)
                .map(|i| {
                    if i % 4 < 2 {
                        rng.random_range(0.2..0.8)
                    } else {
                        rng.random_range(0.1..0.5)
                    }
                })
                .collect();
            let a = Tensor::new(vec![r, 4], data)?;
            let w = weights_for(rng, &[r, 4]);
            check(&[a], tol, distort, |g, v| {
                let y = g.map_rows(v[0], 4, |_, row, out, jac| {
                    let (b, j) = clamp_with_jacobian([row[0], row[1], row[2], row[3]]);
                    out.copy_from_slice(&b);
                    for (o, jr) in j.iter().enumerate() {
                        jac[o * 4..o * 4 + 4].copy_from_slice(jr);
                    }
                })?;
                weighted_sum(g, y, &w)
            })
        }
        OpKind::Leaf => unreachable!("leaves are not operations"),
    }
}

/// Runs `cases_per_op` randomized checks for every differentiable op.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<OpReport>, TensorError> {
    DIFFERENTIABLE_OPS
        .iter()
        .map(|&op| {
            let mut rng = rng_from(opts.seed, &[b"gradcheck", op.name().as_bytes()]);
            let mut worst: f64 = 0.0;
            for _ in 0..opts.cases_per_op {
                let out = run_case(op, &mut rng, opts)?;
                worst = worst.max(out.worst_rel_error);
            }
            Ok(OpReport {
                op: op.name().to_string(),
                cases: opts.cases_per_op,
                worst_rel_error: worst,
                passed: worst <= opts.tolerance.rel,
            })
        })
        .collect()
}
