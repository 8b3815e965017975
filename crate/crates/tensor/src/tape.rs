//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every operation evaluates eagerly and records its inputs plus whatever
//! activations its vector-Jacobian product needs. `backward` walks the tape
//! in exact reverse order, so node order is always a valid forward schedule.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::sparse::CsrMatrix;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    /// Negative-side slope; 0.01 is the conventional default.
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
}

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

/// Rows whose Euclidean norm is below this pass through `l2_normalize_rows` unchanged.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Affine(Var, f64),
    Act(Var, Activation),
    Log(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    RowSum(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    L2Normalize { x: Var, norms: Vec<f64> },
    LayerNorm { x: Var, inv_std: Vec<f64> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, index: Vec<Option<usize>> },
    GatherFlat { x: Var, index: Vec<usize> },
    SegmentSum { x: Var, segment: Vec<usize> },
    SegmentSoftmax { x: Var, segment: Vec<usize> },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    SpMM { m: Arc<CsrMatrix>, x: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Append-only record of a forward computation. Not shareable across threads
/// while recording; build one tape per step (or per evaluation worker).
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let shape = self.shape(v);
        match shape {
            [m, n] => Ok((*m, *n)),
            _ => Err(TensorError::Shape {
                op,
                lhs: shape.to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ---------------------------------------------------------------- linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched product of `[B,m,k]` by `[B,k,n]`, or by `[B,n,k]ᵀ` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || TensorError::Shape {
            op: "batch_matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(mismatch());
        }
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for t in 0..batch {
            let ab = &ad[t * m * k..(t + 1) * m * k];
            let bb = &bd[t * k * n..(t + 1) * k * n];
            let cb = &mut out[t * m * n..(t + 1) * m * n];
            if trans_b {
                gemm_nt(ab, bb, cb, m, k, n);
            } else {
                gemm_nn(ab, bb, cb, m, k, n);
            }
        }
        let value = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push(value, Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    /// `M · x` for a constant sparse `M`.
    pub fn spmm(&mut self, m: Arc<CsrMatrix>, x: Var) -> Result<Var> {
        let (rows, d) = self.dims2(x, "spmm")?;
        if rows != m.cols() {
            return Err(TensorError::Shape {
                op: "spmm",
                lhs: vec![m.rows(), m.cols()],
                rhs: vec![rows, d],
            });
        }
        let mut out = vec![0.0; m.rows() * d];
        m.matmul_into(self.value(x).data(), d, &mut out);
        let value = Tensor::new(vec![m.rows(), d], out)?;
        Ok(self.push(value, Op::SpMM { m, x }, &[x]))
    }

    // ---------------------------------------------------------------- elementwise

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(a, b, op)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    fn check_row_vector(&self, x: Var, b: Var, op: &'static str) -> Result<(usize, usize)> {
        let (m, n) = self.value(x).as_rows();
        if self.value(b).numel() != n {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok((m, n))
    }

    /// `x[.., n] + b[n]`, broadcasting `b` over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, n) = self.check_row_vector(x, b, "add_row")?;
        let bd = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[i % n])
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::AddRow(x, b), &[x, b]))
    }

    /// `x[.., n] ∘ b[n]`, broadcasting `b` over rows.
    pub fn mul_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, n) = self.check_row_vector(x, b, "mul_row")?;
        let bd = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * bd[i % n])
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::MulRow(x, b), &[x, b]))
    }

    /// Scales row `i` of `x` by the scalar `c[i]`.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (m, n) = self.value(x).as_rows();
        if self.value(c).numel() != m {
            return Err(TensorError::Shape {
                op: "mul_col",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(c).to_vec(),
            });
        }
        let cd = self.value(c).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * cd[i / n])
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::MulCol(x, c), &[x, c]))
    }

    /// `scale · x + offset`
    pub fn affine(&mut self, x: Var, scale: f64, offset: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| scale * v + offset).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::Affine(x, scale), &[x]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.affine(x, s, 0.0)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let f: fn(f64, f64) -> f64 = match kind {
            Activation::Relu => |v, _| v.max(0.0),
            Activation::LeakyRelu(_) => |v, s| if v > 0.0 { v } else { s * v },
            Activation::Sigmoid => |v, _| 1.0 / (1.0 + (-v).exp()),
            Activation::Tanh => |v, _| v.tanh(),
        };
        let slope = match kind {
            Activation::LeakyRelu(s) => s,
            _ => 0.0,
        };
        let data = self.value(x).data().iter().map(|&v| f(v, slope)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::Act(x, kind), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.activation(x, Activation::LeakyRelu(slope))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v.ln()).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::Log(x), &[x]))
    }

    /// Clamps into `[lo, hi]`; gradient is zero wherever the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v.clamp(lo, hi)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::Clamp(x, lo, hi), &[x]))
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sums the last axis: `[.., n] -> [..]` (a vector for matrix input).
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.as_rows();
        let data: Vec<f64> = (0..m).map(|i| t.data()[i * n..(i + 1) * n].iter().sum()).collect();
        let value = Tensor::new(vec![m], data)?;
        Ok(self.push(value, Op::RowSum(x), &[x]))
    }

    /// Softmax over the last axis. Masked entries (`false`) come out exactly 0.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.as_rows();
        if let Some(mask) = mask {
            if mask.len() != t.numel() {
                return Err(TensorError::Shape {
                    op: "softmax_rows mask",
                    lhs: t.shape().to_vec(),
                    rhs: vec![mask.len()],
                });
            }
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &t.data()[i * n..(i + 1) * n];
            let keep = |j: usize| mask.is_none_or(|mk| mk[i * n + j]);
            if !(0..n).any(keep) {
                return Err(TensorError::DegenerateRow { row: i });
            }
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if keep(j) && v > max {
                    max = v;
                }
            }
            let orow = &mut out[i * n..(i + 1) * n];
            let mut total = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if keep(j) {
                    let e = (v - max).exp();
                    orow[j] = e;
                    total += e;
                }
            }
            for o in orow.iter_mut() {
                *o /= total;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.as_rows();
        let mut out = t.data().to_vec();
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            let lse = logsumexp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(value, Op::LogSoftmax(x), &[x]))
    }

    /// `log Σ exp` over the last axis.
    pub fn logsumexp_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.as_rows();
        let data = (0..m).map(|i| logsumexp(&t.data()[i * n..(i + 1) * n])).collect();
        let value = Tensor::new(vec![m], data)?;
        Ok(self.push(value, Op::LogSumExp(x), &[x]))
    }

    /// Scales each row to unit Euclidean norm. Rows with norm below
    /// [`NORM_FLOOR`] pass through unchanged.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.as_rows();
        let mut out = t.data().to_vec();
        let mut norms = Vec::with_capacity(m);
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm >= NORM_FLOOR {
                for v in row.iter_mut() {
                    *v /= norm;
                }
            }
            norms.push(norm);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(value, Op::L2Normalize { x, norms }, &[x]))
    }

    /// Zero-mean, unit-variance normalization over the last axis (no affine part).
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.as_rows();
        let mut out = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(value, Op::LayerNorm { x, inv_std }, &[x]))
    }

    // ---------------------------------------------------------------- layout

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of nothing".into()))?;
        let (m, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2(p, "concat_cols")?;
            if pm != m {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(vec![m, total], out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Stacks matrices with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of nothing".into()))?;
        let (_, n) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pm, pn) = self.dims2(p, "concat_rows")?;
            if pn != n {
                return Err(TensorError::Shape {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += pm;
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, n], out)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Row lookup into a matrix; `None` yields a zero row with no gradient.
    pub fn gather_rows(&mut self, x: Var, index: &[Option<usize>]) -> Result<Var> {
        let (m, n) = self.dims2(x, "gather_rows")?;
        if index.is_empty() {
            return Err(TensorError::Invalid("gather_rows with empty index".into()));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; index.len() * n];
        for (r, idx) in index.iter().enumerate() {
            if let Some(i) = *idx {
                if i >= m {
                    return Err(TensorError::Contract(format!(
                        "row index {i} out of range for {m} rows"
                    )));
                }
                out[r * n..(r + 1) * n].copy_from_slice(&src[i * n..(i + 1) * n]);
            }
        }
        let value = Tensor::new(vec![index.len(), n], out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    /// `out.flat[k] = x.flat[index[k]]`, reshaped to `shape`.
    pub fn gather_flat(&mut self, x: Var, index: &[usize], shape: Vec<usize>) -> Result<Var> {
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(index.len());
        for &i in index {
            out.push(*src.get(i).ok_or_else(|| {
                TensorError::Contract(format!("flat index {i} out of range for {}", src.len()))
            })?);
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::GatherFlat {
                x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    /// Sums rows of `x[m, d]` into `segments` buckets: `out[segment[i]] += x[i]`.
    pub fn segment_sum(&mut self, x: Var, segment: &[usize], segments: usize) -> Result<Var> {
        let (m, d) = self.value(x).as_rows();
        if segment.len() != m || segments == 0 {
            return Err(TensorError::Shape {
                op: "segment_sum",
                lhs: self.shape(x).to_vec(),
                rhs: vec![segment.len(), segments],
            });
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; segments * d];
        for (i, &s) in segment.iter().enumerate() {
            if s >= segments {
                return Err(TensorError::Contract(format!("segment {s} >= {segments}")));
            }
            for (o, v) in out[s * d..(s + 1) * d].iter_mut().zip(&src[i * d..(i + 1) * d]) {
                *o += v;
            }
        }
        let value = Tensor::new(vec![segments, d], out)?;
        Ok(self.push(
            value,
            Op::SegmentSum {
                x,
                segment: segment.to_vec(),
            },
            &[x],
        ))
    }

    /// Softmax of a flat vector within groups sharing a segment id.
    pub fn segment_softmax(&mut self, x: Var, segment: &[usize], segments: usize) -> Result<Var> {
        let src = self.value(x).data();
        if segment.len() != src.len() {
            return Err(TensorError::Shape {
                op: "segment_softmax",
                lhs: self.shape(x).to_vec(),
                rhs: vec![segment.len()],
            });
        }
        let mut max = vec![f64::NEG_INFINITY; segments];
        for (&v, &s) in src.iter().zip(segment) {
            if s >= segments {
                return Err(TensorError::Contract(format!("segment {s} >= {segments}")));
            }
            max[s] = max[s].max(v);
        }
        let mut out: Vec<f64> = src.iter().zip(segment).map(|(&v, &s)| (v - max[s]).exp()).collect();
        let mut total = vec![0.0; segments];
        for (&e, &s) in out.iter().zip(segment) {
            total[s] += e;
        }
        for (o, &s) in out.iter_mut().zip(segment) {
            *o /= total[s];
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            value,
            Op::SegmentSoftmax {
                x,
                segment: segment.to_vec(),
            },
            &[x],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::Shape {
                op: "permute",
                lhs: shape,
                rhs: axes.to_vec(),
            });
        }
        let (new_shape, data) = permute_data(self.value(x).data(), &shape, axes);
        let value = Tensor::new(new_shape, data)?;
        Ok(self.push(
            value,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            &[x],
        ))
    }

    // ---------------------------------------------------------------- backward

    /// Accumulates `d loss / d leaf` into every reachable trainable leaf.
    /// Repeated calls add to existing gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        let mut leaves = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves.push((i, g));
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        for (i, g) in leaves {
            let node = &mut self.nodes[i];
            match node.grad.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().expect("matrix");
                let n = self.nodes[b.0].value.shape()[1];
                if self.wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(g, val(*b), &mut ga, m, n, k);
                    accumulate(adj, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(val(*a), g, &mut gb, m, k, n);
                    accumulate(adj, *b, gb);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.nodes[a.0].value.shape();
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (ad, bd) = (val(*a), val(*b));
                if self.wants(*a) {
                    let mut ga = vec![0.0; batch * m * k];
                    for t in 0..batch {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let bt = &bd[t * k * n..(t + 1) * k * n];
                        let gat = &mut ga[t * m * k..(t + 1) * m * k];
                        if *trans_b {
                            gemm_nn(gt, bt, gat, m, n, k);
                        } else {
                            gemm_nt(gt, bt, gat, m, n, k);
                        }
                    }
                    accumulate(adj, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; batch * k * n];
                    for t in 0..batch {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let at = &ad[t * m * k..(t + 1) * m * k];
                        let gbt = &mut gb[t * k * n..(t + 1) * k * n];
                        if *trans_b {
                            gemm_tn(gt, at, gbt, m, n, k);
                        } else {
                            gemm_tn(at, gt, gbt, m, k, n);
                        }
                    }
                    accumulate(adj, *b, gb);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(adj, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(adj, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(adj, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(adj, *b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(adj, *a, g.iter().zip(val(*b)).map(|(x, y)| x * y).collect());
                }
                if self.wants(*b) {
                    accumulate(adj, *b, g.iter().zip(val(*a)).map(|(x, y)| x * y).collect());
                }
            }
            Op::AddRow(x, b) => {
                let n = self.nodes[b.0].value.numel();
                if self.wants(*x) {
                    accumulate(adj, *x, g.to_vec());
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; n];
                    for (j, v) in g.iter().enumerate() {
                        gb[j % n] += v;
                    }
                    accumulate(adj, *b, gb);
                }
            }
            Op::MulRow(x, b) => {
                let bd = val(*b);
                let n = bd.len();
                if self.wants(*x) {
                    accumulate(adj, *x, g.iter().enumerate().map(|(j, v)| v * bd[j % n]).collect());
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; n];
                    for (j, (v, xv)) in g.iter().zip(val(*x)).enumerate() {
                        gb[j % n] += v * xv;
                    }
                    accumulate(adj, *b, gb);
                }
            }
            Op::MulCol(x, c) => {
                let cd = val(*c);
                let n = g.len() / cd.len();
                if self.wants(*x) {
                    accumulate(adj, *x, g.iter().enumerate().map(|(j, v)| v * cd[j / n]).collect());
                }
                if self.wants(*c) {
                    let mut gc = vec![0.0; cd.len()];
                    for (j, (v, xv)) in g.iter().zip(val(*x)).enumerate() {
                        gc[j / n] += v * xv;
                    }
                    accumulate(adj, *c, gc);
                }
            }
            Op::Affine(x, s) => {
                if self.wants(*x) {
                    accumulate(adj, *x, g.iter().map(|v| v * s).collect());
                }
            }
            Op::Act(x, kind) => {
                if self.wants(*x) {
                    let xd = val(*x);
                    let gx = match kind {
                        Activation::Relu => g.iter().zip(xd).map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 }).collect(),
                        Activation::LeakyRelu(s) => g
                            .iter()
                            .zip(xd)
                            .map(|(gv, &xv)| if xv > 0.0 { *gv } else { s * gv })
                            .collect(),
                        Activation::Sigmoid => g.iter().zip(out).map(|(gv, y)| gv * y * (1.0 - y)).collect(),
                        Activation::Tanh => g.iter().zip(out).map(|(gv, y)| gv * (1.0 - y * y)).collect(),
                    };
                    accumulate(adj, *x, gx);
                }
            }
            Op::Log(x) => {
                if self.wants(*x) {
                    accumulate(adj, *x, g.iter().zip(val(*x)).map(|(gv, xv)| gv / xv).collect());
                }
            }
            Op::Clamp(x, lo, hi) => {
                if self.wants(*x) {
                    let gx = g
                        .iter()
                        .zip(val(*x))
                        .map(|(gv, &xv)| if xv >= *lo && xv <= *hi { *gv } else { 0.0 })
                        .collect();
                    accumulate(adj, *x, gx);
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    accumulate(adj, *x, vec![g[0]; self.nodes[x.0].value.numel()]);
                }
            }
            Op::RowSum(x) => {
                if self.wants(*x) {
                    let (m, n) = self.nodes[x.0].value.as_rows();
                    let mut gx = vec![0.0; m * n];
                    for (i, row) in gx.chunks_mut(n).enumerate() {
                        row.fill(g[i]);
                    }
                    accumulate(adj, *x, gx);
                }
            }
            Op::Softmax(x) => {
                if self.wants(*x) {
                    let n = node.value.as_rows().1;
                    let mut gx = vec![0.0; g.len()];
                    for ((grow, yrow), orow) in g.chunks(n).zip(out.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((o, gv), y) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o = y * (gv - dot);
                        }
                    }
                    accumulate(adj, *x, gx);
                }
            }
            Op::LogSoftmax(x) => {
                if self.wants(*x) {
                    let n = node.value.as_rows().1;
                    let mut gx = vec![0.0; g.len()];
                    for ((grow, yrow), orow) in g.chunks(n).zip(out.chunks(n)).zip(gx.chunks_mut(n)) {
                        let total: f64 = grow.iter().sum();
                        for ((o, gv), y) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o = gv - y.exp() * total;
                        }
                    }
                    accumulate(adj, *x, gx);
                }
            }
            Op::LogSumExp(x) => {
                if self.wants(*x) {
                    let (m, n) = self.nodes[x.0].value.as_rows();
                    let xd = val(*x);
                    let mut gx = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] = g[i] * (xd[i * n + j] - out[i]).exp();
                        }
                    }
                    accumulate(adj, *x, gx);
                }
            }
            Op::L2Normalize { x, norms } => {
                if self.wants(*x) {
                    let n = node.value.as_rows().1;
                    let mut gx = vec![0.0; g.len()];
                    for (i, ((grow, yrow), orow)) in g.chunks(n).zip(out.chunks(n)).zip(gx.chunks_mut(n)).enumerate() {
                        if norms[i] < NORM_FLOOR {
                            orow.copy_from_slice(grow);
                            continue;
                        }
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((o, gv), y) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o = (gv - y * dot) / norms[i];
                        }
                    }
                    accumulate(adj, *x, gx);
                }
            }
            Op::LayerNorm { x, inv_std } => {
                if self.wants(*x) {
                    let n = node.value.as_rows().1;
                    let nf = n as f64;
                    let mut gx = vec![0.0; g.len()];
                    for (i, ((grow, yrow), orow)) in g.chunks(n).zip(out.chunks(n)).zip(gx.chunks_mut(n)).enumerate() {
                        let mean_g = grow.iter().sum::<f64>() / nf;
                        let mean_gy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / nf;
                        for ((o, gv), y) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o = inv_std[i] * (gv - mean_g - y * mean_gy);
                        }
                    }
                    accumulate(adj, *x, gx);
                }
            }
            Op::ConcatCols(parts) => {
                let m = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.shape()[1];
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(m * w);
                        for r in 0..m {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(adj, p, gp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.numel();
                    if self.wants(p) {
                        accumulate(adj, p, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::GatherRows { x, index } => {
                if self.wants(*x) {
                    let (m, n) = self.nodes[x.0].value.dims2().expect("matrix");
                    let mut gx = vec![0.0; m * n];
                    for (r, idx) in index.iter().enumerate() {
                        if let Some(src) = *idx {
                            for (o, v) in gx[src * n..(src + 1) * n].iter_mut().zip(&g[r * n..(r + 1) * n]) {
                                *o += v;
                            }
                        }
                    }
                    accumulate(adj, *x, gx);
                }
            }
            Op::GatherFlat { x, index } => {
                if self.wants(*x) {
                    let mut gx = vec![0.0; self.nodes[x.0].value.numel()];
                    for (k, &src) in index.iter().enumerate() {
                        gx[src] += g[k];
                    }
                    accumulate(adj, *x, gx);
                }
            }
            Op::SegmentSum { x, segment } => {
                if self.wants(*x) {
                    let d = node.value.shape()[1];
                    let mut gx = Vec::with_capacity(segment.len() * d);
                    for &s in segment {
                        gx.extend_from_slice(&g[s * d..(s + 1) * d]);
                    }
                    accumulate(adj, *x, gx);
                }
            }
            Op::SegmentSoftmax { x, segment } => {
                if self.wants(*x) {
                    let segments = segment.iter().max().map_or(0, |m| m + 1);
                    let mut dot = vec![0.0; segments];
                    for ((gv, y), &s) in g.iter().zip(out).zip(segment) {
                        dot[s] += gv * y;
                    }
                    let gx = g
                        .iter()
                        .zip(out)
                        .zip(segment)
                        .map(|((gv, y), &s)| y * (gv - dot[s]))
                        .collect();
                    accumulate(adj, *x, gx);
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    accumulate(adj, *x, g.to_vec());
                }
            }
            Op::Permute { x, axes } => {
                if self.wants(*x) {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inverse[a] = i;
                    }
                    let (_, gx) = permute_data(g, node.value.shape(), &inverse);
                    accumulate(adj, *x, gx);
                }
            }
            Op::SpMM { m, x } => {
                if self.wants(*x) {
                    let d = node.value.shape()[1];
                    let mut gx = vec![0.0; m.cols() * d];
                    m.transpose_matmul_into(g, d, &mut gx);
                    accumulate(adj, *x, gx);
                }
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match adj[v.0].as_mut() {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => adj[v.0] = Some(g),
    }
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let nd = shape.len();
    let mut strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let new_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut counter = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..nd).rev() {
            counter[ax] += 1;
            offset += src_strides[ax];
            if counter[ax] < new_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * new_shape[ax];
            counter[ax] = 0;
        }
    }
    (new_shape, out)
}
