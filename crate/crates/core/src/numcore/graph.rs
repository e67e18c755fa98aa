//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are
//! addressed by copyable [`Var`] handles and hold their forward value.
//! [`Graph::backward`] replays the tape in reverse and accumulates
//! `∂loss/∂leaf` into the gradient slot of every tracked leaf. Calling it a
//! second time without [`Graph::zero_grad`] adds to the existing slots.
//!
//! Parameters enter the tape through [`Graph::param`], which remembers the
//! originating [`ParamId`] so that [`ParamStore::absorb_grads`] can move the
//! leaf gradients back into the store after `backward`.
//!
//! Matrix-style operations treat a tensor as `[rows, last_dim]`, flattening
//! any leading axes.

use super::params::{ParamId, ParamStore};
use super::tensor::{axis_split, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    MatMulT {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    LogSigmoid(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LogSumExp {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Sum(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
    RepeatCols {
        x: Var,
        times: usize,
    },
    BroadcastRows(Var),
    Pick {
        x: Var,
        index: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    tracked: bool,
    param: Option<ParamId>,
    grad: Option<Vec<f64>>,
}

impl Node {
    fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }
}

/// The tape for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, tracked: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
            param: None,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    // ── leaves ──────────────────────────────────────────────────────────

    /// Records `t` as a leaf; it is differentiated iff `t.requires_grad()`.
    pub fn input(&mut self, t: &Tensor) -> Var {
        let tracked = t.requires_grad();
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, tracked)
    }

    /// Records an untracked leaf.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_vec(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(&t))
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        let v = self.input(t);
        self.nodes[v.0].param = Some(id);
        v
    }

    // ── accessors ───────────────────────────────────────────────────────

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn rows(&self, v: Var) -> usize {
        let n = self.node(v);
        n.value.len() / n.cols()
    }

    pub fn cols(&self, v: Var) -> usize {
        self.node(v).cols()
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub(crate) fn param_leaves(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.nodes.iter().filter_map(|n| match (n.param, &n.grad) {
            (Some(id), Some(g)) => Some((id, g.as_slice())),
            _ => None,
        })
    }

    // ── elementwise binary ──────────────────────────────────────────────

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.node(a).shape != self.node(b).shape {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.node(a).shape,
                self.node(b).shape
            )));
        }
        Ok(())
    }

    fn zip(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(self.node(a).shape.clone(), value, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// `a[i, j] ∘ row[j]` for every row of `a`.
    fn row_broadcast(&mut self, a: Var, row: Var, mul: bool) -> Result<Var> {
        let n = self.cols(a);
        if self.node(row).value.len() != n {
            return Err(Error::shape(format!(
                "row broadcast: {} values against last extent {n}",
                self.node(row).value.len()
            )));
        }
        let r = &self.node(row).value;
        let value = self
            .value(a)
            .chunks(n)
            .flat_map(|chunk| {
                chunk
                    .iter()
                    .zip(r)
                    .map(|(&x, &y)| if mul { x * y } else { x + y })
            })
            .collect();
        let tracked = self.tracked(&[a, row]);
        let op = if mul {
            Op::MulRow(a, row)
        } else {
            Op::AddRow(a, row)
        };
        Ok(self.push(self.node(a).shape.clone(), value, op, tracked))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, false)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, true)
    }

    /// `a[i, j] ∘ col[i]` for every column of `a`.
    fn col_broadcast(&mut self, a: Var, col: Var, mul: bool) -> Result<Var> {
        let n = self.cols(a);
        let rows = self.rows(a);
        if self.node(col).value.len() != rows {
            return Err(Error::shape(format!(
                "column broadcast: {} values against {rows} rows",
                self.node(col).value.len()
            )));
        }
        let c = &self.node(col).value;
        let value = self
            .value(a)
            .chunks(n)
            .zip(c)
            .flat_map(|(chunk, &y)| chunk.iter().map(move |&x| if mul { x * y } else { x + y }))
            .collect();
        let tracked = self.tracked(&[a, col]);
        let op = if mul {
            Op::MulCol(a, col)
        } else {
            Op::AddCol(a, col)
        };
        Ok(self.push(self.node(a).shape.clone(), value, op, tracked))
    }

    pub fn add_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.col_broadcast(a, col, false)
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.col_broadcast(a, col, true)
    }

    // ── elementwise unary ───────────────────────────────────────────────

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let tracked = self.tracked(&[a]);
        self.push(self.node(a).shape.clone(), value, op, tracked)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, 1.0)
    }

    /// Branches on sign so that neither exponential overflows.
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid_scalar)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, Op::Gelu(a), gelu_scalar)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.map(a, Op::Log(a), f64::ln)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, Op::Softplus(a), softplus_scalar)
    }

    /// `log σ(x) = -softplus(-x)`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::LogSigmoid(a), |x| -softplus_scalar(-x))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    // ── linear algebra ──────────────────────────────────────────────────

    /// `[m, k] × [k, n] → [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = (self.rows(a), self.cols(a));
        let bs = &self.node(b).shape;
        if bs.len() != 2 || bs[0] != k {
            return Err(Error::shape(format!("matmul: [{m}, {k}] × {bs:?}")));
        }
        let n = bs[1];
        let mut out = vec![0.0; m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for (o, &y) in orow.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *o += x * y;
                }
            }
        }
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, tracked))
    }

    /// `[m, k] × [n, k]ᵀ → [m, n]`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = (self.rows(a), self.cols(a));
        let (n, kb) = (self.rows(b), self.cols(b));
        if k != kb {
            return Err(Error::shape(format!("matmul_t: [{m}, {k}] × [{n}, {kb}]ᵀ")));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bv[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMulT { a, b, m, k, n }, tracked))
    }

    // ── normalisation and reductions ────────────────────────────────────

    /// Parameter-free layer normalisation over the last axis.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let n = self.cols(x);
        if self.node(x).shape.last() == Some(&0) || n == 0 {
            return Err(Error::shape("layer_norm over an empty axis"));
        }
        let rows = self.rows(x);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(
            self.node(x).shape.clone(),
            out,
            Op::LayerNorm { x, inv_std },
            tracked,
        ))
    }

    /// Softmax along `axis`, computed after subtracting the axis maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = axis_split(&self.node(x).shape, axis)?;
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let max = (0..n).map(|k| xv[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..n {
                    let e = (xv[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    total += e;
                }
                for k in 0..n {
                    out[idx(k)] /= total;
                }
            }
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(
            self.node(x).shape.clone(),
            out,
            Op::Softmax { x, outer, n, inner },
            tracked,
        ))
    }

    /// Softmax along the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let axis = self.node(x).shape.len().saturating_sub(1);
        self.softmax(x, axis)
    }

    /// `log Σ exp` along `axis`; the axis is removed from the result.
    pub fn log_sum_exp(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.node(x).shape.clone();
        let (outer, n, inner) = axis_split(&shape, axis)?;
        let xv = self.value(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let max = (0..n).map(|k| xv[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = (0..n).map(|k| (xv[idx(k)] - max).exp()).sum();
                out[o * inner + i] = max + total.ln();
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let tracked = self.tracked(&[x]);
        Ok(self.push(
            out_shape,
            out,
            Op::LogSumExp { x, outer, n, inner },
            tracked,
        ))
    }

    /// Row-wise `x - logsumexp(x)` over the last axis.
    pub fn log_softmax_last(&mut self, x: Var) -> Result<Var> {
        let axis = self.node(x).shape.len().saturating_sub(1);
        let lse = self.log_sum_exp(x, axis)?;
        let neg = self.neg(lse);
        self.add_col(x, neg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let tracked = self.tracked(&[x]);
        self.push(Vec::new(), vec![s], Op::Sum(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    // ── structural ──────────────────────────────────────────────────────

    /// Concatenates 2-D blocks with equal row counts along the columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols of nothing"))?;
        let rows = self.rows(first);
        if parts.iter().any(|&p| self.rows(p) != rows) {
            return Err(Error::shape("concat_cols: row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.cols(p)).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let c = self.cols(p);
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        let tracked = self.tracked(parts);
        Ok(self.push(
            vec![rows, total],
            out,
            Op::ConcatCols(parts.to_vec()),
            tracked,
        ))
    }

    /// Stacks 2-D blocks with equal column counts along the rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows of nothing"))?;
        let cols = self.cols(first);
        if parts.iter().any(|&p| self.cols(p) != cols) {
            return Err(Error::shape("concat_rows: column counts differ"));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rows = out.len() / cols;
        let tracked = self.tracked(parts);
        Ok(self.push(
            vec![rows, cols],
            out,
            Op::ConcatRows(parts.to_vec()),
            tracked,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = (self.rows(x), self.cols(x));
        if len == 0 || start + len > cols {
            return Err(Error::shape(format!(
                "slice_cols {start}..{} of {cols} columns",
                start + len
            )));
        }
        let xv = self.value(x);
        let out = (0..rows)
            .flat_map(|r| xv[r * cols + start..r * cols + start + len].iter().copied())
            .collect();
        let tracked = self.tracked(&[x]);
        Ok(self.push(vec![rows, len], out, Op::SliceCols { x, start }, tracked))
    }

    /// Output row `r` is input row `index[r]`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (rows, cols) = (self.rows(x), self.cols(x));
        if index.is_empty() || index.iter().any(|&i| i >= rows) {
            return Err(Error::shape(format!(
                "gather_rows: index out of {rows} rows"
            )));
        }
        let xv = self.value(x);
        let out = index
            .iter()
            .flat_map(|&i| xv[i * cols..(i + 1) * cols].iter().copied())
            .collect();
        let tracked = self.tracked(&[x]);
        Ok(self.push(
            vec![index.len(), cols],
            out,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            tracked,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape(format!(
                "reshape {:?} into {shape:?}",
                self.node(x).shape
            )));
        }
        let value = self.value(x).to_vec();
        let tracked = self.tracked(&[x]);
        Ok(self.push(shape, value, Op::Reshape(x), tracked))
    }

    /// `[m, n] → [m, n·times]`, each column repeated `times` times in place.
    pub fn repeat_cols(&mut self, x: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(Error::shape("repeat_cols by zero"));
        }
        let (rows, cols) = (self.rows(x), self.cols(x));
        let out = self
            .value(x)
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, times))
            .collect();
        let tracked = self.tracked(&[x]);
        Ok(self.push(
            vec![rows, cols * times],
            out,
            Op::RepeatCols { x, times },
            tracked,
        ))
    }

    /// `[n] → [m, n]` by copying the vector into every row.
    pub fn broadcast_rows(&mut self, x: Var, m: usize) -> Result<Var> {
        if m == 0 {
            return Err(Error::shape("broadcast_rows to zero rows"));
        }
        let n = self.value(x).len();
        let out = (0..m).flat_map(|_| self.value(x).iter().copied()).collect();
        let tracked = self.tracked(&[x]);
        Ok(self.push(vec![m, n], out, Op::BroadcastRows(x), tracked))
    }

    /// Selects flat elements by index into a vector.
    pub fn pick(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let len = self.value(x).len();
        if index.is_empty() || index.iter().any(|&i| i >= len) {
            return Err(Error::shape(format!("pick: index out of {len} elements")));
        }
        let out = index.iter().map(|&i| self.value(x)[i]).collect();
        let tracked = self.tracked(&[x]);
        Ok(self.push(
            vec![index.len()],
            out,
            Op::Pick {
                x,
                index: index.to_vec(),
            },
            tracked,
        ))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Accumulates `∂loss/∂leaf` into every tracked leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        if !self.node(loss).tracked {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn slot<'a>(&self, adj: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.tracked {
            return None;
        }
        Some(adj[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                if let Some(s) = self.slot(adj, *a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
                if let Some(s) = self.slot(adj, *b) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = self.slot(adj, *a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
                if let Some(s) = self.slot(adj, *b) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s -= g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(s) = self.slot(adj, *a) {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(bv) {
                        *s += g * y;
                    }
                }
                if let Some(s) = self.slot(adj, *b) {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(av) {
                        *s += g * x;
                    }
                }
            }
            Op::AddRow(a, r) => {
                let n = node.cols();
                if let Some(s) = self.slot(adj, *a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
                if let Some(s) = self.slot(adj, *r) {
                    for chunk in g.chunks(n) {
                        s.iter_mut().zip(chunk).for_each(|(s, g)| *s += g);
                    }
                }
            }
            Op::MulRow(a, r) => {
                let n = node.cols();
                let (av, rv) = (self.value(*a), self.value(*r));
                if let Some(s) = self.slot(adj, *a) {
                    for (k, (s, g)) in s.iter_mut().zip(g).enumerate() {
                        *s += g * rv[k % n];
                    }
                }
                if let Some(s) = self.slot(adj, *r) {
                    for (k, (g, x)) in g.iter().zip(av).enumerate() {
                        s[k % n] += g * x;
                    }
                }
            }
            Op::AddCol(a, c) => {
                let n = node.cols();
                if let Some(s) = self.slot(adj, *a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
                if let Some(s) = self.slot(adj, *c) {
                    for (r, chunk) in g.chunks(n).enumerate() {
                        s[r] += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::MulCol(a, c) => {
                let n = node.cols();
                let (av, cv) = (self.value(*a), self.value(*c));
                if let Some(s) = self.slot(adj, *a) {
                    for (k, (s, g)) in s.iter_mut().zip(g).enumerate() {
                        *s += g * cv[k / n];
                    }
                }
                if let Some(s) = self.slot(adj, *c) {
                    for (k, (g, x)) in g.iter().zip(av).enumerate() {
                        s[k / n] += g * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(s) = self.slot(adj, *a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g);
                }
            }
            Op::AddScalar(a) => {
                if let Some(s) = self.slot(adj, *a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(s) = self.slot(adj, *a) {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            s[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(s) = self.slot(adj, *b) {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, gv) in s[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += x * gv;
                            }
                        }
                    }
                }
            }
            Op::MatMulT { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(s) = self.slot(adj, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for (o, y) in s[i * k..(i + 1) * k]
                                .iter_mut()
                                .zip(&bv[j * k..(j + 1) * k])
                            {
                                *o += gv * y;
                            }
                        }
                    }
                }
                if let Some(s) = self.slot(adj, *b) {
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for (o, x) in s[j * k..(j + 1) * k]
                                .iter_mut()
                                .zip(&av[i * k..(i + 1) * k])
                            {
                                *o += gv * x;
                            }
                        }
                    }
                }
            }
            Op::Sigmoid(a) => self.unary(adj, *a, g, |k, _| y[k] * (1.0 - y[k])),
            Op::Tanh(a) => self.unary(adj, *a, g, |k, _| 1.0 - y[k] * y[k]),
            Op::Gelu(a) => self.unary(adj, *a, g, |_, x| gelu_grad(x)),
            Op::Exp(a) => self.unary(adj, *a, g, |k, _| y[k]),
            Op::Log(a) => self.unary(adj, *a, g, |_, x| 1.0 / x),
            Op::Softplus(a) => self.unary(adj, *a, g, |_, x| sigmoid_scalar(x)),
            Op::LogSigmoid(a) => self.unary(adj, *a, g, |_, x| sigmoid_scalar(-x)),
            Op::Relu(a) => self.unary(adj, *a, g, |_, x| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                self.unary(
                    adj,
                    *a,
                    g,
                    |_, x| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 },
                )
            }
            Op::LayerNorm { x, inv_std } => {
                let n = node.cols();
                if let Some(s) = self.slot(adj, *x) {
                    for (r, inv) in inv_std.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let yr = &y[r * n..(r + 1) * n];
                        let mean_g = gr.iter().sum::<f64>() / n as f64;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for k in 0..n {
                            s[r * n + k] += inv * (gr[k] - mean_g - yr[k] * mean_gy);
                        }
                    }
                }
            }
            Op::Softmax { x, outer, n, inner } => {
                let (outer, n, inner) = (*outer, *n, *inner);
                if let Some(s) = self.slot(adj, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * n + k) * inner + i;
                            let dot: f64 = (0..n).map(|k| g[idx(k)] * y[idx(k)]).sum();
                            for k in 0..n {
                                s[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSumExp { x, outer, n, inner } => {
                let (outer, n, inner) = (*outer, *n, *inner);
                let xv = self.value(*x);
                if let Some(s) = self.slot(adj, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let out = y[o * inner + i];
                            let go = g[o * inner + i];
                            for k in 0..n {
                                let idx = (o * n + k) * inner + i;
                                s[idx] += go * (xv[idx] - out).exp();
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(s) = self.slot(adj, *x) {
                    s.iter_mut().for_each(|s| *s += g[0]);
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.cols(p);
                    if let Some(s) = self.slot(adj, p) {
                        for (r, row) in s.chunks_mut(c).enumerate() {
                            let src = &g[r * total + offset..r * total + offset + c];
                            row.iter_mut().zip(src).for_each(|(s, g)| *s += g);
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(s) = self.slot(adj, p) {
                        s.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(s, g)| *s += g);
                    }
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                let len = node.cols();
                let cols = self.cols(*x);
                if let Some(s) = self.slot(adj, *x) {
                    for (r, chunk) in g.chunks(len).enumerate() {
                        s[r * cols + start..r * cols + start + len]
                            .iter_mut()
                            .zip(chunk)
                            .for_each(|(s, g)| *s += g);
                    }
                }
            }
            Op::GatherRows { x, index } => {
                let cols = node.cols();
                if let Some(s) = self.slot(adj, *x) {
                    for (r, &src) in index.iter().enumerate() {
                        s[src * cols..(src + 1) * cols]
                            .iter_mut()
                            .zip(&g[r * cols..(r + 1) * cols])
                            .for_each(|(s, g)| *s += g);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(s) = self.slot(adj, *x) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
            }
            Op::RepeatCols { x, times } => {
                if let Some(s) = self.slot(adj, *x) {
                    for (s, chunk) in s.iter_mut().zip(g.chunks(*times)) {
                        *s += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::BroadcastRows(x) => {
                let n = node.cols();
                if let Some(s) = self.slot(adj, *x) {
                    for chunk in g.chunks(n) {
                        s.iter_mut().zip(chunk).for_each(|(s, g)| *s += g);
                    }
                }
            }
            Op::Pick { x, index } => {
                if let Some(s) = self.slot(adj, *x) {
                    for (&k, gv) in index.iter().zip(g) {
                        s[k] += gv;
                    }
                }
            }
        }
    }

    fn unary(
        &self,
        adj: &mut [Option<Vec<f64>>],
        a: Var,
        g: &[f64],
        deriv: impl Fn(usize, f64) -> f64,
    ) {
        let xv = self.value(a);
        if let Some(s) = self.slot(adj, a) {
            for (k, (s, gv)) in s.iter_mut().zip(g).enumerate() {
                *s += gv * deriv(k, xv[k]);
            }
        }
    }
}
