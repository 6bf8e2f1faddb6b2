//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every primitive as it is evaluated (define-by-run).
//! Each node stores its value, the primitive that produced it and whether
//! gradient flows through it. [`Graph::backward`] walks the tape in reverse
//! and accumulates vector-Jacobian products; [`Graph::replay`] re-evaluates
//! the recorded program against new bindings for the named inputs.
//!
//! Every primitive works on the trailing axis as "columns" and folds all
//! leading axes into "rows", which is all the attention and MLP math in
//! this crate needs.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels::{self, AttnShape};
use crate::tensor::Tensor;

/// Variance floor used by [`Graph::layer_norm`]; constant rows normalize to zero.
pub const LAYER_NORM_VAR_FLOOR: f64 = 1e-6;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-row cosine/sine coefficients for a rotary rotation.
///
/// Row `r`, pair `p` rotates columns `(2p, 2p + 1)` of every head by the
/// angle whose cosine and sine are stored at `r * pairs + p`.
#[derive(Clone, Debug, PartialEq)]
pub struct RotaryCoeffs {
    pub rows: usize,
    pub pairs: usize,
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

#[derive(Clone, Debug)]
enum Op {
    Input { name: Option<String> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Softmax(Var),
    MaskedFill { x: Var, mask: Rc<[bool]>, value: f64 },
    LayerNorm(Var),
    Gather { table: Var, idx: Rc<[usize]> },
    Scatter { src: Var, idx: Rc<[usize]>, rows: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize, len: usize },
    SliceCols { x: Var, start: usize, len: usize },
    Reshape(Var, Vec<usize>),
    Rotary { x: Var, coeffs: Rc<RotaryCoeffs>, heads: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize, blocked: Option<Rc<[bool]>> },
    Silu(Var),
    Detach(Var),
    MeanSquare(Var),
    Sum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul { .. } => "matmul",
            Op::Softmax(..) => "softmax",
            Op::MaskedFill { .. } => "masked_fill",
            Op::LayerNorm(..) => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::Scatter { .. } => "scatter",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::Reshape(..) => "reshape",
            Op::Rotary { .. } => "rotary",
            Op::Attention { .. } => "attention",
            Op::Silu(..) => "silu",
            Op::Detach(..) => "detach",
            Op::MeanSquare(..) => "mean_square",
            Op::Sum(..) => "sum",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Input { .. } => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MulRow(a, b) => {
                vec![*a, *b]
            }
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Scale(x, _)
            | Op::AddScalar(x, _)
            | Op::Softmax(x)
            | Op::LayerNorm(x)
            | Op::Reshape(x, _)
            | Op::Silu(x)
            | Op::Detach(x)
            | Op::MeanSquare(x)
            | Op::Sum(x) => vec![*x],
            Op::MaskedFill { x, .. }
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Rotary { x, .. } => vec![*x],
            Op::Gather { table, .. } => vec![*table],
            Op::Scatter { src, .. } => vec![*src],
            Op::ConcatRows(xs) | Op::ConcatCols(xs) => xs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Attention probabilities `[heads, n, m]`, kept only when gradient flows.
    saved: Option<Vec<f64>>,
}

/// Recorded program plus the values of every intermediate.
///
/// A graph is single-threaded; independent graphs may live on different threads.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: HashMap<String, Var>,
    outputs: Vec<(String, Var)>,
    /// Values that upcoming `detach` nodes take instead of their input, last first.
    frozen: Vec<Tensor>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros when nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// `C (+)= op(A) · op(B)` with `op(A): [m, k]`, `op(B): [k, n]`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover exactly the strided extents described above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn attention_dims(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<(usize, usize, usize)> {
    let (n, d) = (q.rows(), q.cols());
    if q.rank() != 2 || k.rank() != 2 || v.shape() != k.shape() || k.cols() != d {
        return Err(shape_err("attention", q, k));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::invalid(format!("attention: {d} columns do not split into {heads} heads")));
    }
    Ok((n, k.rows(), d))
}

fn matmul_dims(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<(usize, usize, usize)> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(shape_err("matmul", a, b));
    }
    let (m, ka) = if ta {
        (a.shape()[1], a.shape()[0])
    } else {
        (a.shape()[0], a.shape()[1])
    };
    let (kb, n) = if tb {
        (b.shape()[1], b.shape()[0])
    } else {
        (b.shape()[0], b.shape()[1])
    };
    if ka != kb {
        return Err(shape_err("matmul", a, b));
    }
    Ok((m, ka, n))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn layer_norm_row(x: &[f64], out: &mut [f64]) -> (f64, bool) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let floored = var < LAYER_NORM_VAR_FLOOR;
    let std = var.max(LAYER_NORM_VAR_FLOOR).sqrt();
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - mean) / std;
    }
    (std, floored)
}

fn attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    blocked: Option<&[bool]>,
    keep: bool,
) -> Result<(Tensor, Option<Vec<f64>>)> {
    let (n, m, d) = attention_dims(q, k, v, heads)?;
    if blocked.is_some_and(|b| b.len() != n * m) {
        return Err(Error::invalid("attention: mask does not match [queries, keys]"));
    }
    let shape = AttnShape { n, m, d, heads };
    let mut out = vec![0.0; n * d];
    let mut probs = keep.then(|| vec![0.0; heads * n * m]);
    kernels::attention_forward(q.data(), k.data(), v.data(), shape, blocked, &mut out, probs.as_deref_mut());
    Ok((Tensor::new(vec![n, d], out)?, probs))
}

fn eval<'a>(op: &Op, vals: &dyn Fn(Var) -> &'a Tensor) -> Result<Tensor> {
    let out = match op {
        Op::Input { .. } => unreachable!("inputs are bound, not evaluated"),
        Op::Add(a, b) => vals(*a).zip_map(vals(*b), |x, y| x + y)?,
        Op::Sub(a, b) => vals(*a).zip_map(vals(*b), |x, y| x - y)?,
        Op::Mul(a, b) => vals(*a).zip_map(vals(*b), |x, y| x * y)?,
        Op::AddRow(a, r) | Op::MulRow(a, r) => {
            let (a, r) = (vals(*a), vals(*r));
            if r.len() != a.cols() {
                return Err(shape_err(op.name(), a, r));
            }
            let add = matches!(op, Op::AddRow(..));
            let mut out = a.clone();
            for row in out.data_mut().chunks_mut(r.len()) {
                for (o, w) in row.iter_mut().zip(r.data()) {
                    if add {
                        *o += w;
                    } else {
                        *o *= w;
                    }
                }
            }
            out
        }
        Op::Scale(x, s) => vals(*x).map(|v| v * s),
        Op::AddScalar(x, s) => vals(*x).map(|v| v + s),
        Op::MatMul { a, b, ta, tb } => {
            let (a, b) = (vals(*a), vals(*b));
            let (m, k, n) = matmul_dims(a, b, *ta, *tb)?;
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, a.data(), *ta, b.data(), *tb, &mut out, false);
            Tensor::new(vec![m, n], out)?
        }
        Op::Softmax(x) => {
            let x = vals(*x);
            let mut out = x.clone();
            let c = x.cols();
            for row in out.data_mut().chunks_mut(c) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    row.fill(0.0);
                    continue;
                }
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            out
        }
        Op::MaskedFill { x, mask, value } => {
            let mut out = vals(*x).clone();
            if mask.len() != out.len() {
                return Err(Error::Shape {
                    op: "masked_fill",
                    lhs: out.shape().to_vec(),
                    rhs: vec![mask.len()],
                });
            }
            for (o, &m) in out.data_mut().iter_mut().zip(mask.iter()) {
                if m {
                    *o = *value;
                }
            }
            out
        }
        Op::LayerNorm(x) => {
            let x = vals(*x);
            let mut out = x.clone();
            let c = x.cols();
            for (src, dst) in x.data().chunks(c).zip(out.data_mut().chunks_mut(c)) {
                layer_norm_row(src, dst);
            }
            out
        }
        Op::Gather { table, idx } => {
            let t = vals(*table);
            let c = t.cols();
            let mut out = Vec::with_capacity(idx.len() * c);
            for &i in idx.iter() {
                if i >= t.rows() {
                    return Err(Error::invalid(format!(
                        "gather: index {i} out of range for {} rows",
                        t.rows()
                    )));
                }
                out.extend_from_slice(t.row(i));
            }
            Tensor::new(vec![idx.len(), c], out)?
        }
        Op::Scatter { src, idx, rows } => {
            let s = vals(*src);
            if s.rows() != idx.len() {
                return Err(Error::Shape {
                    op: "scatter",
                    lhs: s.shape().to_vec(),
                    rhs: vec![idx.len()],
                });
            }
            let c = s.cols();
            let mut out = Tensor::zeros(&[*rows, c]);
            for (k, &i) in idx.iter().enumerate() {
                if i >= *rows {
                    return Err(Error::invalid(format!(
                        "scatter: index {i} out of range for {rows} rows"
                    )));
                }
                for (o, v) in out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(s.row(k)) {
                    *o += v;
                }
            }
            out
        }
        Op::ConcatRows(xs) => {
            let parts: Vec<&Tensor> = xs.iter().map(|v| vals(*v)).collect();
            let c = parts[0].cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in &parts {
                if p.cols() != c {
                    return Err(shape_err("concat_rows", parts[0], p));
                }
                rows += p.rows();
                data.extend_from_slice(p.data());
            }
            Tensor::new(vec![rows, c], data)?
        }
        Op::ConcatCols(xs) => {
            let parts: Vec<&Tensor> = xs.iter().map(|v| vals(*v)).collect();
            let r = parts[0].rows();
            let mut cols = 0;
            for p in &parts {
                if p.rows() != r {
                    return Err(shape_err("concat_cols", parts[0], p));
                }
                cols += p.cols();
            }
            let mut data = Vec::with_capacity(r * cols);
            for i in 0..r {
                for p in &parts {
                    data.extend_from_slice(p.row(i));
                }
            }
            Tensor::new(vec![r, cols], data)?
        }
        Op::SliceRows { x, start, len } => {
            let x = vals(*x);
            if start + len > x.rows() || *len == 0 {
                return Err(Error::Shape {
                    op: "slice_rows",
                    lhs: x.shape().to_vec(),
                    rhs: vec![*start, *len],
                });
            }
            let c = x.cols();
            Tensor::new(vec![*len, c], x.data()[start * c..(start + len) * c].to_vec())?
        }
        Op::SliceCols { x, start, len } => {
            let x = vals(*x);
            if start + len > x.cols() || *len == 0 {
                return Err(Error::Shape {
                    op: "slice_cols",
                    lhs: x.shape().to_vec(),
                    rhs: vec![*start, *len],
                });
            }
            let mut data = Vec::with_capacity(x.rows() * len);
            for i in 0..x.rows() {
                data.extend_from_slice(&x.row(i)[*start..start + len]);
            }
            Tensor::new(vec![x.rows(), *len], data)?
        }
        Op::Reshape(x, shape) => vals(*x).clone().reshape(shape)?,
        Op::Rotary { x, coeffs, heads } => {
            let x = vals(*x);
            check_rotary(x, coeffs, *heads)?;
            let mut out = x.clone();
            rotate(out.data_mut(), x.cols(), coeffs, *heads, false);
            out
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            blocked,
        } => attention_forward(vals(*q), vals(*k), vals(*v), *heads, blocked.as_deref(), false)?.0,
        Op::Silu(x) => vals(*x).map(|v| v * sigmoid(v)),
        Op::Detach(x) => vals(*x).clone(),
        Op::MeanSquare(x) => {
            let x = vals(*x);
            Tensor::scalar(x.data().iter().map(|v| v * v).sum::<f64>() / x.len() as f64)
        }
        Op::Sum(x) => Tensor::scalar(vals(*x).sum()),
    };
    Ok(out)
}

fn check_rotary(x: &Tensor, c: &RotaryCoeffs, heads: usize) -> Result<()> {
    if heads == 0 || x.cols() % heads != 0 || x.rows() != c.rows || 2 * c.pairs > x.cols() / heads
    {
        return Err(Error::Shape {
            op: "rotary",
            lhs: x.shape().to_vec(),
            rhs: vec![c.rows, heads, c.pairs],
        });
    }
    Ok(())
}

/// Rotates each `(2p, 2p+1)` column pair in place; `inverse` applies the transpose.
fn rotate(data: &mut [f64], cols: usize, c: &RotaryCoeffs, heads: usize, inverse: bool) {
    let hd = cols / heads;
    for (r, row) in data.chunks_mut(cols).enumerate() {
        let cos = &c.cos[r * c.pairs..(r + 1) * c.pairs];
        let sin = &c.sin[r * c.pairs..(r + 1) * c.pairs];
        for h in 0..heads {
            let head = &mut row[h * hd..(h + 1) * hd];
            for p in 0..c.pairs {
                let (x0, x1) = (head[2 * p], head[2 * p + 1]);
                let s = if inverse { -sin[p] } else { sin[p] };
                head[2 * p] = x0 * cos[p] - x1 * s;
                head[2 * p + 1] = x0 * s + x1 * cos[p];
            }
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

fn col_sum(g: &Tensor) -> Vec<f64> {
    let c = g.cols();
    let mut out = vec![0.0; c];
    for row in g.data().chunks(c) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose `detach` nodes output `values` in creation order instead
    /// of their inputs. Differencing a function on such a graph treats
    /// detached values as constants, which is what reverse mode differentiates.
    pub fn with_frozen_detach(mut values: Vec<Tensor>) -> Self {
        values.reverse();
        Self {
            frozen: values,
            ..Self::default()
        }
    }

    /// Outputs of every `detach` node, in creation order.
    pub fn detached_values(&self) -> Vec<Tensor> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Detach(_)))
            .map(|n| n.value.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let requires_grad = match op {
            Op::Detach(_) => false,
            _ => op.parents().iter().any(|p| self.nodes[p.0].requires_grad),
        };
        let nodes = &self.nodes;
        let (value, saved) = match &op {
            Op::Attention {
                q,
                k,
                v,
                heads,
                blocked,
            } if requires_grad => {
                let val = |x: Var| &nodes[x.0].value;
                let (t, p) = attention_forward(val(*q), val(*k), val(*v), *heads, blocked.as_deref(), true)?;
                (t, p)
            }
            Op::Detach(x) if !self.frozen.is_empty() => {
                let t = self.frozen.pop().expect("non-empty");
                if t.shape() != nodes[x.0].value.shape() {
                    return Err(shape_err("detach", &nodes[x.0].value, &t));
                }
                (t, None)
            }
            _ => (eval(&op, &|v: Var| &nodes[v.0].value)?, None),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            saved,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers a named input; the name is the binding key for [`Graph::replay`].
    pub fn input(&mut self, name: &str, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input {
                name: Some(name.to_string()),
            },
            requires_grad,
            saved: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.inputs.insert(name.to_string(), v);
        v
    }

    /// Unnamed leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input { name: None },
            requires_grad: false,
            saved: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn named_input(&self, name: &str) -> Option<Var> {
        self.inputs.get(name).copied()
    }

    pub fn mark_output(&mut self, name: &str, v: Var) {
        self.outputs.push((name.to_string(), v));
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

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    /// `a + row`, broadcasting `row` over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::AddRow(a, row))
    }

    /// `a * row`, broadcasting `row` over every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.push(Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.push(Op::AddScalar(a, s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul {
            a,
            b,
            ta: false,
            tb: false,
        })
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul {
            a,
            b,
            ta: false,
            tb: true,
        })
    }

    /// Row-wise softmax. Rows that are entirely `-inf` produce zeros.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Softmax(a))
    }

    pub fn masked_fill(&mut self, a: Var, mask: Rc<[bool]>, value: f64) -> Result<Var> {
        self.push(Op::MaskedFill { x: a, mask, value })
    }

    /// Row-wise normalization without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        self.push(Op::LayerNorm(a))
    }

    /// Selects rows of a 2-D table; doubles as embedding lookup.
    pub fn gather(&mut self, table: Var, idx: Rc<[usize]>) -> Result<Var> {
        if idx.is_empty() {
            return Err(Error::invalid("gather: empty index list"));
        }
        self.push(Op::Gather { table, idx })
    }

    /// Writes the rows of `src` into a zero `[rows, cols]` tensor at `idx`.
    pub fn scatter(&mut self, src: Var, idx: Rc<[usize]>, rows: usize) -> Result<Var> {
        self.push(Op::Scatter { src, idx, rows })
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::invalid("concat_rows: no inputs"));
        }
        self.push(Op::ConcatRows(xs.to_vec()))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::invalid("concat_cols: no inputs"));
        }
        self.push(Op::ConcatCols(xs.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.push(Op::SliceRows { x: a, start, len })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.push(Op::SliceCols { x: a, start, len })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.push(Op::Reshape(a, shape.to_vec()))
    }

    /// Applies per-row rotary rotations to `heads` equal column groups.
    pub fn rotary(&mut self, a: Var, coeffs: Rc<RotaryCoeffs>, heads: usize) -> Result<Var> {
        self.push(Op::Rotary {
            x: a,
            coeffs,
            heads,
        })
    }

    /// Multi-head softmax attention, `softmax(q_h k_hᵀ) v_h` per head.
    ///
    /// `q: [n, D]` must already carry any score scaling; `k, v: [m, D]`.
    /// `blocked` is `[n, m]`, `true` where a key is hidden; rows with every
    /// key hidden produce zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        blocked: Option<Rc<[bool]>>,
    ) -> Result<Var> {
        self.push(Op::Attention {
            q,
            k,
            v,
            heads,
            blocked,
        })
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Silu(a))
    }

    /// Value-identical node through which no gradient flows.
    pub fn detach(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Detach(a))
    }

    pub fn mean_square(&mut self, a: Var) -> Result<Var> {
        self.push(Op::MeanSquare(a))
    }

    /// `mean((a - b)^2)`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        self.mean_square(d)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, node.saved.as_deref(), &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Tensor,
        saved: Option<&[f64]>,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let send = |v: Var, t: Tensor, grads: &mut [Option<Tensor>]| {
            if rg(v) {
                accumulate(&mut grads[v.0], t);
            }
        };
        match op {
            Op::Input { .. } | Op::Detach(_) => {}
            Op::Add(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.map(|x| -x), grads);
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    send(*a, g.zip_map(val(*b), |x, y| x * y)?, grads);
                }
                if rg(*b) {
                    send(*b, g.zip_map(val(*a), |x, y| x * y)?, grads);
                }
            }
            Op::AddRow(a, r) => {
                send(*a, g.clone(), grads);
                if rg(*r) {
                    let gr = Tensor::new(val(*r).shape().to_vec(), col_sum(g))?;
                    send(*r, gr, grads);
                }
            }
            Op::MulRow(a, r) => {
                let (av, rv) = (val(*a), val(*r));
                if rg(*a) {
                    let mut ga = g.clone();
                    for row in ga.data_mut().chunks_mut(rv.len()) {
                        for (o, w) in row.iter_mut().zip(rv.data()) {
                            *o *= w;
                        }
                    }
                    send(*a, ga, grads);
                }
                if rg(*r) {
                    let prod = g.zip_map(av, |x, y| x * y)?;
                    send(*r, Tensor::new(rv.shape().to_vec(), col_sum(&prod))?, grads);
                }
            }
            Op::Scale(a, s) => send(*a, g.map(|x| x * s), grads),
            Op::AddScalar(a, _) => send(*a, g.clone(), grads),
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = matmul_dims(av, bv, *ta, *tb)?;
                if rg(*a) {
                    let mut da = vec![0.0; m * k];
                    if *ta {
                        // dA = op(B) · Gᵀ, shape [k, m]
                        gemm(k, n, m, bv.data(), *tb, g.data(), true, &mut da, false);
                    } else {
                        // dA = G · op(B)ᵀ, shape [m, k]
                        gemm(m, n, k, g.data(), false, bv.data(), !*tb, &mut da, false);
                    }
                    send(*a, Tensor::new(av.shape().to_vec(), da)?, grads);
                }
                if rg(*b) {
                    let mut db = vec![0.0; k * n];
                    if *tb {
                        // dB = Gᵀ · op(A), shape [n, k]
                        gemm(n, m, k, g.data(), true, av.data(), *ta, &mut db, false);
                    } else {
                        // dB = op(A)ᵀ · G, shape [k, n]
                        gemm(k, m, n, av.data(), !*ta, g.data(), false, &mut db, false);
                    }
                    send(*b, Tensor::new(bv.shape().to_vec(), db)?, grads);
                }
            }
            Op::Softmax(x) => {
                let c = out.cols();
                let mut gx = g.clone();
                for (gr, yr) in gx.data_mut().chunks_mut(c).zip(out.data().chunks(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (gv, y) in gr.iter_mut().zip(yr) {
                        *gv = y * (*gv - dot);
                    }
                }
                send(*x, gx, grads);
            }
            Op::MaskedFill { x, mask, .. } => {
                let mut gx = g.clone();
                for (v, &m) in gx.data_mut().iter_mut().zip(mask.iter()) {
                    if m {
                        *v = 0.0;
                    }
                }
                send(*x, gx, grads);
            }
            Op::LayerNorm(x) => {
                let xv = val(*x);
                let c = xv.cols();
                let n = c as f64;
                let mut gx = g.clone();
                let mut y = vec![0.0; c];
                for (gr, xr) in gx.data_mut().chunks_mut(c).zip(xv.data().chunks(c)) {
                    let (std, floored) = layer_norm_row(xr, &mut y);
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = if floored {
                        0.0
                    } else {
                        gr.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / n
                    };
                    for (gv, yv) in gr.iter_mut().zip(&y) {
                        *gv = (*gv - mean_g - yv * mean_gy) / std;
                    }
                }
                send(*x, gx, grads);
            }
            Op::Gather { table, idx } => {
                if rg(*table) {
                    let tv = val(*table);
                    let c = tv.cols();
                    let mut gt = Tensor::zeros(tv.shape());
                    for (k, &i) in idx.iter().enumerate() {
                        for (o, v) in gt.data_mut()[i * c..(i + 1) * c].iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    send(*table, gt, grads);
                }
            }
            Op::Scatter { src, idx, .. } => {
                if rg(*src) {
                    let c = g.cols();
                    let mut data = Vec::with_capacity(idx.len() * c);
                    for &i in idx.iter() {
                        data.extend_from_slice(g.row(i));
                    }
                    send(*src, Tensor::new(val(*src).shape().to_vec(), data)?, grads);
                }
            }
            Op::ConcatRows(xs) => {
                let c = g.cols();
                let mut offset = 0;
                for x in xs {
                    let xv = val(*x);
                    let len = xv.rows();
                    if rg(*x) {
                        let part = g.data()[offset * c..(offset + len) * c].to_vec();
                        send(*x, Tensor::new(xv.shape().to_vec(), part)?, grads);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(xs) => {
                let mut offset = 0;
                for x in xs {
                    let xv = val(*x);
                    let w = xv.cols();
                    if rg(*x) {
                        let mut part = Vec::with_capacity(xv.len());
                        for r in 0..g.rows() {
                            part.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        send(*x, Tensor::new(xv.shape().to_vec(), part)?, grads);
                    }
                    offset += w;
                }
            }
            Op::SliceRows { x, start, .. } => {
                let xv = val(*x);
                let c = xv.cols();
                let mut gx = Tensor::zeros(xv.shape());
                gx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                send(*x, gx, grads);
            }
            Op::SliceCols { x, start, len } => {
                let xv = val(*x);
                let c = xv.cols();
                let mut gx = Tensor::zeros(xv.shape());
                for r in 0..xv.rows() {
                    gx.data_mut()[r * c + start..r * c + start + len].copy_from_slice(g.row(r));
                }
                send(*x, gx, grads);
            }
            Op::Reshape(x, _) => {
                let shape = val(*x).shape().to_vec();
                send(*x, g.clone().reshape(&shape)?, grads);
            }
            Op::Rotary { x, coeffs, heads } => {
                let mut gx = g.clone();
                rotate(gx.data_mut(), g.cols(), coeffs, *heads, true);
                send(*x, gx, grads);
            }
            Op::Attention { q, k, v, heads, .. } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let (n, m, d) = attention_dims(qv, kv, vv, *heads)?;
                let probs = saved.ok_or_else(|| Error::invalid("attention: probabilities were not recorded"))?;
                let (mut dq, mut dk, mut dv) = (vec![0.0; n * d], vec![0.0; m * d], vec![0.0; m * d]);
                let shape = AttnShape { n, m, d, heads: *heads };
                kernels::attention_backward(qv.data(), kv.data(), vv.data(), shape, probs, g.data(), &mut dq, &mut dk, &mut dv);
                send(*q, Tensor::new(vec![n, d], dq)?, grads);
                send(*k, Tensor::new(vec![m, d], dk)?, grads);
                send(*v, Tensor::new(vec![m, d], dv)?, grads);
            }
            Op::Silu(x) => {
                let gx = g.zip_map(val(*x), |gv, xv| {
                    let s = sigmoid(xv);
                    gv * s * (1.0 + xv * (1.0 - s))
                })?;
                send(*x, gx, grads);
            }
            Op::MeanSquare(x) => {
                let xv = val(*x);
                let k = 2.0 * g.item() / xv.len() as f64;
                send(*x, xv.map(|v| v * k), grads);
            }
            Op::Sum(x) => {
                let xv = val(*x);
                send(*x, Tensor::full(xv.shape(), g.item()), grads);
            }
        }
        Ok(())
    }

    /// Re-evaluates the recorded program with new values for named inputs.
    ///
    /// Unbound named inputs keep their recorded values. Returns the values of
    /// every output registered with [`Graph::mark_output`].
    pub fn replay(&self, bindings: &HashMap<String, Tensor>) -> Result<HashMap<String, Tensor>> {
        for name in bindings.keys() {
            if !self.inputs.contains_key(name) {
                return Err(Error::UnboundInput(name.clone()));
            }
        }
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Input { name } => {
                    let bound = name.as_ref().and_then(|n| bindings.get(n));
                    match bound {
                        Some(t) => {
                            if t.shape() != node.value.shape() {
                                return Err(shape_err("input", &node.value, t));
                            }
                            t.clone()
                        }
                        None => node.value.clone(),
                    }
                }
                op => eval(op, &|v: Var| &values[v.0])?,
            };
            values.push(v);
        }
        Ok(self
            .outputs
            .iter()
            .map(|(n, v)| (n.clone(), values[v.0].clone()))
            .collect())
    }
}

/// Compares reverse-mode gradients of `f` at `x` with fourth-order central
/// differences, `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`.
///
/// `f` receives a fresh graph and the input variable and must return a
/// scalar. Detached values stay at their value at `x` while differencing,
/// matching the stop-gradient semantics of `detach`. The result is `max_i |g_ad - g_fd| / max(1e-12, |g_fd|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("finite_diff_check: eps must be positive"));
    }
    let mut g = Graph::new();
    let v = g.input("x", x.clone(), true);
    let out = f(&mut g, v)?;
    if !g.value(out).item().is_finite() {
        return Err(Error::NonFinite("f(x)".into()));
    }
    let analytic = g.backward(out)?.wrt(v);
    let detached = g.detached_values();

    let eval_at = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::with_frozen_detach(detached.clone());
        let v = g.input("x", t.clone(), false);
        let out = f(&mut g, v)?;
        let y = g.value(out);
        if !y.is_scalar() {
            return Err(Error::NonScalarLoss(y.shape().to_vec()));
        }
        let y = y.item();
        if !y.is_finite() {
            return Err(Error::NonFinite(format!("f(x) = {y}")));
        }
        Ok(y)
    };

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        let mut at = |h: f64| -> Result<f64> {
            probe.data_mut()[i] = orig + h;
            eval_at(&probe)
        };
        let (p1, m1, p2, m2) = (at(eps)?, at(-eps)?, at(2.0 * eps)?, at(-2.0 * eps)?);
        probe.data_mut()[i] = orig;
        let fd = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
        let err = (analytic.data()[i] - fd).abs() / fd.abs().max(1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn fully_masked_softmax_row_is_zero() {
        let mut g = Graph::new();
        let x = g.input("x", t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let mask: Rc<[bool]> = vec![true, true, false, true].into();
        let m = g.masked_fill(x, mask, f64::NEG_INFINITY).unwrap();
        let y = g.softmax(m).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 1.0, 0.0]);
        let s = g.sum(y).unwrap();
        let gr = g.backward(s).unwrap().wrt(x);
        assert!(gr.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 5], 3.5));
        let y = g.layer_norm(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_names_primitive() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.input("x", t(&[2], &[1.0, 2.0]), true);
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq).unwrap();
        assert_eq!(g.backward(l).unwrap().wrt(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_gradients_are_transposed_products() {
        let a_val = t(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 1.5, -1.0]);
        let b_val = t(&[3, 2], &[0.2, 1.0, -0.7, 2.0, 1.1, -0.3]);
        let up = t(&[2, 2], &[1.0, -1.0, 0.5, 2.0]);
        let mut g = Graph::new();
        let a = g.input("a", a_val.clone(), true);
        let b = g.input("b", b_val.clone(), true);
        let c = g.matmul(a, b).unwrap();
        let w = g.constant(up.clone());
        let cw = g.mul(c, w).unwrap();
        let l = g.sum(cw).unwrap();
        let grads = g.backward(l).unwrap();
        // dA = G Bᵀ, dB = Aᵀ G, written out by hand.
        let mut da = vec![0.0; 6];
        let mut db = vec![0.0; 6];
        for i in 0..2 {
            for j in 0..2 {
                for p in 0..3 {
                    da[i * 3 + p] += up.data()[i * 2 + j] * b_val.data()[p * 2 + j];
                    db[p * 2 + j] += a_val.data()[i * 3 + p] * up.data()[i * 2 + j];
                }
            }
        }
        assert_eq!(grads.wrt(a).data(), &da[..]);
        assert_eq!(grads.wrt(b).data(), &db[..]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::zeros(&[3]), true);
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.input("x", t(&[3], &[1.0, 2.0, 3.0]), true);
        let w = g.input("w", t(&[3], &[0.5, -1.0, 2.0]), true);
        let d = g.detach(x).unwrap();
        assert_eq!(g.value(d), g.value(x));
        let p = g.mul(d, w).unwrap();
        let l = g.sum(p).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(x).data(), &[0.0, 0.0, 0.0]);
        assert_eq!(grads.wrt(w).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn fd_check_sum_of_squares() {
        let x = t(&[2], &[1.0, 2.0]);
        let err = finite_diff_check(
            |g, x| {
                let s = g.mul(x, x)?;
                g.sum(s)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn fd_check_softmax_mean_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let err = finite_diff_check(
            |g, x| {
                let s = g.softmax(x)?;
                g.mean_square(s)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn fd_check_rejects_non_finite() {
        let x = t(&[1], &[1.0]);
        let r = finite_diff_check(|g, x| g.scale(x, f64::INFINITY), &x, 1e-5);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn replay_reproduces_recorded_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let x = g.input("x", Tensor::randn(&[4, 3], 1.0, &mut rng), false);
        let w = g.input("w", Tensor::randn(&[3, 2], 1.0, &mut rng), false);
        let h = g.matmul(x, w).unwrap();
        let y = g.softmax(h).unwrap();
        g.mark_output("y", y);
        let replayed = g.replay(&HashMap::new()).unwrap();
        assert!(replayed["y"].bit_eq(g.value(y)));

        let new_x = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let mut fresh = Graph::new();
        let fx = fresh.constant(new_x.clone());
        let fw = fresh.constant(g.value(w).clone());
        let fh = fresh.matmul(fx, fw).unwrap();
        let fy = fresh.softmax(fh).unwrap();
        let bindings = HashMap::from([("x".to_string(), new_x)]);
        assert!(g.replay(&bindings).unwrap()["y"].bit_eq(fresh.value(fy)));
    }

    /// Per-head attention built from separate primitives.
    fn composite_attention(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize, blocked: &Rc<[bool]>) -> Var {
        let hd = g.shape(q)[1] / heads;
        let outs: Vec<Var> = (0..heads)
            .map(|h| {
                let qh = g.slice_cols(q, h * hd, hd).unwrap();
                let kh = g.slice_cols(k, h * hd, hd).unwrap();
                let vh = g.slice_cols(v, h * hd, hd).unwrap();
                let s = g.matmul_nt(qh, kh).unwrap();
                let s = g.masked_fill(s, blocked.clone(), f64::NEG_INFINITY).unwrap();
                let p = g.softmax(s).unwrap();
                g.matmul(p, vh).unwrap()
            })
            .collect();
        g.concat_cols(&outs).unwrap()
    }

    #[test]
    fn fused_attention_matches_composite() {
        check_fused_attention(5, 7, 6);
        check_fused_attention(20, 20, 12);
        check_fused_attention(300, 11, 6);
    }

    fn check_fused_attention(n: usize, m: usize, d: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let heads = 2;
        // Row 3 has every key blocked.
        let blocked: Rc<[bool]> = (0..n * m).map(|i| i / m == 3 || (i * 7) % 5 == 0).collect();
        let q = Tensor::randn(&[n, d], 1.0, &mut rng);
        let k = Tensor::randn(&[m, d], 1.0, &mut rng);
        let v = Tensor::randn(&[m, d], 1.0, &mut rng);
        let w = Tensor::randn(&[n, d], 1.0, &mut rng);
        let run = |fused: bool| {
            let mut g = Graph::new();
            let (qv, kv, vv) = (
                g.input("q", q.clone(), true),
                g.input("k", k.clone(), true),
                g.input("v", v.clone(), true),
            );
            let o = if fused {
                g.attention(qv, kv, vv, heads, Some(blocked.clone())).unwrap()
            } else {
                composite_attention(&mut g, qv, kv, vv, heads, &blocked)
            };
            let wv = g.constant(w.clone());
            let y = g.mul(o, wv).unwrap();
            let l = g.sum(y).unwrap();
            let gr = g.backward(l).unwrap();
            (g.value(o).clone(), gr.wrt(qv), gr.wrt(kv), gr.wrt(vv))
        };
        let (a, b) = (run(true), run(false));
        assert!(a.0.row(3).iter().all(|&x| x == 0.0));
        assert!(a.1.row(3).iter().all(|&x| x == 0.0));
        assert!(a.0.max_abs_diff(&b.0) < 1e-12);
        assert!(a.1.max_abs_diff(&b.1) < 1e-12);
        assert!(a.2.max_abs_diff(&b.2) < 1e-12);
        assert!(a.3.max_abs_diff(&b.3) < 1e-12);
    }

    fn rand_coeffs(rows: usize, pairs: usize, rng: &mut ChaCha8Rng) -> RotaryCoeffs {
        let angles: Vec<f64> = (0..rows * pairs).map(|_| rng.gen_range(-4.0..4.0)).collect();
        RotaryCoeffs {
            rows,
            pairs,
            cos: angles.iter().map(|a| a.cos()).collect(),
            sin: angles.iter().map(|a| a.sin()).collect(),
        }
    }

    /// Every differentiable primitive, each checked through `sum(op(x) * w)`.
    #[test]
    fn fd_check_every_primitive() {
        type Case = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[6, 12], 1.0, &mut rng);
        let other = Tensor::randn(&[6, 12], 1.0, &mut rng);
        let row = Tensor::randn(&[12], 1.0, &mut rng);
        let mat = Tensor::randn(&[12, 5], 1.0, &mut rng);
        let coeffs = Rc::new(rand_coeffs(6, 3, &mut rng));
        let blocked: Rc<[bool]> = (0..36).map(|i| i % 7 == 2).collect();
        let dup: Rc<[usize]> = Rc::from([0, 3, 3, 5, 0, 1, 3]);
        let perm: Rc<[usize]> = Rc::from([4, 1, 8]);
        let (o, r, m) = (other.clone(), row.clone(), mat.clone());
        let cases: Vec<(&str, Case)> = vec![
            ("add", Box::new(move |g, x| { let c = g.constant(o.clone()); g.add(x, c) })),
            ("sub", Box::new({ let o = other.clone(); move |g, x| { let c = g.constant(o.clone()); g.sub(c, x) } })),
            ("mul", Box::new({ let o = other.clone(); move |g, x| { let c = g.constant(o.clone()); g.mul(x, c) } })),
            ("mul_self", Box::new(|g, x| g.mul(x, x))),
            ("add_row", Box::new(move |g, x| { let c = g.constant(r.clone()); g.add_row(x, c) })),
            ("mul_row", Box::new({ let r = row.clone(); move |g, x| { let c = g.constant(r.clone()); g.mul_row(x, c) } })),
            ("row_grad", Box::new({ let o = other.clone(); move |g, x| {
                let r = g.slice_rows(x, 2, 1)?;
                let r = g.reshape(r, &[12])?;
                let c = g.constant(o.clone());
                let a = g.mul_row(c, r)?;
                g.add_row(a, r)
            } })),
            ("scale", Box::new(|g, x| g.scale(x, -1.5))),
            ("add_scalar", Box::new(|g, x| { let y = g.add_scalar(x, 2.0)?; g.mul(y, y) })),
            ("matmul", Box::new(move |g, x| { let c = g.constant(m.clone()); g.matmul(x, c) })),
            ("matmul_b", Box::new({ let o = other.clone(); move |g, x| {
                let c = g.constant(o.clone());
                let y = g.reshape(x, &[12, 6])?;
                g.matmul(c, y)
            } })),
            ("matmul_nt", Box::new({ let o = other.clone(); move |g, x| { let c = g.constant(o.clone()); g.matmul_nt(x, c) } })),
            ("matmul_nt_b", Box::new({ let o = other.clone(); move |g, x| { let c = g.constant(o.clone()); g.matmul_nt(c, x) } })),
            ("softmax", Box::new(|g, x| g.softmax(x))),
            ("masked_fill", Box::new(|g, x| {
                let mask: Rc<[bool]> = (0..72).map(|i| i % 5 == 1).collect();
                g.masked_fill(x, mask, -3.0)
            })),
            ("layer_norm", Box::new(|g, x| g.layer_norm(x))),
            ("gather", Box::new(move |g, x| g.gather(x, dup.clone()))),
            ("scatter", Box::new(move |g, x| { let s = g.slice_rows(x, 0, 3)?; g.scatter(s, perm.clone(), 9) })),
            ("concat_rows", Box::new(|g, x| { let a = g.slice_rows(x, 1, 2)?; g.concat_rows(&[x, a, x]) })),
            ("concat_cols", Box::new(|g, x| { let a = g.slice_cols(x, 3, 4)?; g.concat_cols(&[a, x]) })),
            ("rotary", Box::new(move |g, x| g.rotary(x, coeffs.clone(), 2))),
            ("attention", Box::new(move |g, x| {
                let k = g.scale(x, 0.7)?;
                let v = g.silu(x)?;
                g.attention(x, k, v, 2, Some(blocked.clone()))
            })),
            ("silu", Box::new(|g, x| g.silu(x))),
            ("mean_square", Box::new(|g, x| g.mean_square(x))),
            ("mse", Box::new({ let o = other.clone(); move |g, x| { let c = g.constant(o.clone()); g.mse(x, c) } })),
            ("detach_mix", Box::new(|g, x| { let d = g.detach(x)?; g.mul(x, d) })),
        ];
        for (name, f) in cases {
            let probe = g_shape(&f, &x);
            let w = Tensor::randn(&probe, 1.0, &mut rng);
            let err = finite_diff_check(
                |g, x| {
                    let y = f(g, x)?;
                    let wv = g.constant(w.clone());
                    let p = g.mul(y, wv)?;
                    g.sum(p)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "{name}: {err}");
        }
    }

    fn g_shape(f: &dyn Fn(&mut Graph, Var) -> Result<Var>, x: &Tensor) -> Vec<usize> {
        let mut g = Graph::new();
        let v = g.input("x", x.clone(), false);
        let y = f(&mut g, v).unwrap();
        g.shape(y).to_vec()
    }

    #[test]
    fn fd_check_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let v = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let x = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let err = finite_diff_check(
            |g, q| {
                let kv = g.input("k", k.clone(), false);
                let vv = g.input("v", v.clone(), false);
                let mixed = q_like(g, q)?;
                let kk = g.add(kv, mixed)?;
                let o = g.attention(q, kk, vv, 3, None)?;
                g.mean_square(o)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    /// Mixes the query into the keys so key gradients are exercised too.
    fn q_like(g: &mut Graph, q: Var) -> Result<Var> {
        let top = g.slice_rows(q, 0, 3)?;
        let first = g.slice_rows(q, 0, 1)?;
        g.concat_rows(&[top, first])
    }
}
