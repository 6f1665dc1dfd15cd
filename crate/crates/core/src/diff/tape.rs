use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use super::tensor::{dot, matmul, matmul_nt, matmul_tn};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable primitives. Everything the model and the losses need is
/// composed from these.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Subtract,
    Multiply,
    Scale(f64),
    Exp,
    Log,
    Transpose,
    RowSoftmax,
    RowLogSumExp,
    RowL2Normalize,
    MeanAll,
    SumAll,
    SquaredL2DistanceRows,
    Sigmoid,
    Gelu,
    /// Gathers rows of the single input (a `vocab x dim` table).
    EmbeddingLookup(Vec<u32>),
    MeanPoolRows,
    ConcatRows,
    /// `x (m x n) + b (1 x n)` broadcast over rows.
    AddRowBias,
    /// `x * s` where `s` is a scalar node.
    MulScalar,
    /// Elementwise clamp; gradient passes where `lo <= x <= hi`.
    Clamp {
        lo: f64,
        hi: f64,
    },
    /// Per-row standardization to zero mean and unit variance.
    LayerNormRows {
        eps: f64,
    },
    SliceRows {
        start: usize,
        end: usize,
    },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Subtract => "subtract",
            Primitive::Multiply => "elementwise-multiply",
            Primitive::Scale(_) => "scale-by-constant",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Transpose => "transpose",
            Primitive::RowSoftmax => "row-softmax",
            Primitive::RowLogSumExp => "row-log-sum-exp",
            Primitive::RowL2Normalize => "row-l2-normalize",
            Primitive::MeanAll => "mean-all",
            Primitive::SumAll => "sum-all",
            Primitive::SquaredL2DistanceRows => "squared-l2-distance-rowwise",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Gelu => "gelu",
            Primitive::EmbeddingLookup(_) => "embedding-lookup",
            Primitive::MeanPoolRows => "mean-pool-rows",
            Primitive::ConcatRows => "concat-rows",
            Primitive::AddRowBias => "add-row-bias",
            Primitive::MulScalar => "multiply-by-scalar-node",
            Primitive::Clamp { .. } => "clamp",
            Primitive::LayerNormRows { .. } => "layer-norm-rows",
            Primitive::SliceRows { .. } => "slice-rows",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::MatMul
            | Primitive::Add
            | Primitive::Subtract
            | Primitive::Multiply
            | Primitive::SquaredL2DistanceRows
            | Primitive::AddRowBias
            | Primitive::MulScalar => Some(2),
            Primitive::ConcatRows => None,
            _ => Some(1),
        }
    }
}

#[derive(Debug, Clone)]
enum Source {
    Constant,
    Variable,
    Param,
    Apply(Primitive, Vec<NodeId>),
}

#[derive(Debug, Clone)]
struct Node {
    source: Source,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only record of a computation. Inputs of a node always precede it,
/// so reverse insertion order is a valid reverse topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, NodeId>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn of(&self, node: NodeId) -> Option<&Tensor> {
        self.adjoints.get(node.0).and_then(Option::as_ref)
    }
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

    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.nodes[node.0].value
    }

    fn push_leaf(&mut self, source: Source, value: Tensor, requires_grad: bool) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite("leaf".to_string()));
        }
        self.nodes.push(Node {
            source,
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push_leaf(Source::Constant, value, false)
    }

    /// A free leaf whose gradient is reported by [`Tape::backward`].
    pub fn variable(&mut self, value: Tensor) -> Result<NodeId> {
        self.push_leaf(Source::Variable, value, true)
    }

    /// Records a parameter as a leaf; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<NodeId> {
        if let Some(&node) = self.params.get(&id) {
            return Ok(node);
        }
        let node = self.push_leaf(Source::Param, store.get(id).tensor.clone(), true)?;
        self.params.insert(id, node);
        Ok(node)
    }

    pub fn apply(&mut self, primitive: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        if let Some(n) = primitive.arity() {
            if inputs.len() != n {
                return Err(Error::invalid(format!(
                    "{} expects {} inputs, got {}",
                    primitive.name(),
                    n,
                    inputs.len()
                )));
            }
        } else if inputs.is_empty() {
            return Err(Error::invalid(format!("{} needs inputs", primitive.name())));
        }
        if let Some(bad) = inputs.iter().find(|n| n.0 >= self.nodes.len()) {
            return Err(Error::invalid(format!("unknown node {}", bad.0)));
        }
        let values: Vec<&Tensor> = inputs.iter().map(|n| &self.nodes[n.0].value).collect();
        let out = forward(&primitive, &values)?;
        if !out.is_finite() {
            return Err(Error::NonFinite(primitive.name().to_string()));
        }
        let requires_grad = inputs.iter().any(|n| self.nodes[n.0].requires_grad);
        self.nodes.push(Node {
            source: Source::Apply(primitive, inputs.to_vec()),
            value: out,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Subtract, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Multiply, &[a, b])
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.apply(Primitive::Scale(c), &[a])
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Exp, &[a])
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Log, &[a])
    }
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Transpose, &[a])
    }
    pub fn row_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::RowSoftmax, &[a])
    }
    pub fn row_log_sum_exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::RowLogSumExp, &[a])
    }
    pub fn row_l2_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::RowL2Normalize, &[a])
    }
    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::MeanAll, &[a])
    }
    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::SumAll, &[a])
    }
    pub fn sq_dist_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::SquaredL2DistanceRows, &[a, b])
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sigmoid, &[a])
    }
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Gelu, &[a])
    }
    pub fn embedding(&mut self, table: NodeId, ids: Vec<u32>) -> Result<NodeId> {
        self.apply(Primitive::EmbeddingLookup(ids), &[table])
    }
    pub fn mean_pool_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::MeanPoolRows, &[a])
    }
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.apply(Primitive::ConcatRows, parts)
    }
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.apply(Primitive::AddRowBias, &[x, bias])
    }
    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        self.apply(Primitive::MulScalar, &[x, s])
    }
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.apply(Primitive::Clamp { lo, hi }, &[x])
    }
    pub fn layer_norm_rows(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        self.apply(Primitive::LayerNormRows { eps }, &[x])
    }
    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.apply(Primitive::SliceRows { start, end }, &[x])
    }

    /// Reverse pass from a scalar `loss`. Visits each node at most once, in
    /// reverse insertion order.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut adjoints: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adjoints[loss.0] = Some(Tensor::filled(loss_value.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Source::Apply(primitive, inputs) = &node.source else {
                continue;
            };
            let Some(grad) = adjoints[idx].take() else {
                continue;
            };
            let wants: Vec<bool> = inputs
                .iter()
                .map(|n| self.nodes[n.0].requires_grad)
                .collect();
            let values: Vec<&Tensor> = inputs.iter().map(|n| &self.nodes[n.0].value).collect();
            let input_grads = backward_rule(primitive, &values, &node.value, &grad, &wants);
            for ((input, g), want) in inputs.iter().zip(input_grads).zip(wants) {
                if !want {
                    continue;
                }
                let Some(g) = g else { continue };
                match &mut adjoints[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            // keep the adjoint around for leaves and for inspection
            adjoints[idx] = Some(grad);
        }
        Ok(Gradients { adjoints })
    }

    /// Adds the adjoints of every parameter leaf into the store's gradients.
    pub fn accumulate(&self, grads: &Gradients, store: &mut ParamStore) {
        for (&pid, &node) in &self.params {
            if let Some(g) = grads.of(node) {
                store.get_mut(pid).gradient.add_assign(g);
            }
        }
    }

    pub fn backward_into(&self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        self.accumulate(&grads, store);
        Ok(())
    }
}

fn mismatch(p: &Primitive, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        primitive: p.name(),
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn mat(rows: usize, cols: usize, values: Vec<f64>) -> Tensor {
    Tensor::from_parts_unchecked(vec![rows, cols], values)
}

fn like(t: &Tensor, values: Vec<f64>) -> Tensor {
    Tensor::from_parts_unchecked(t.shape().to_vec(), values)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    like(
        a,
        a.values()
            .iter()
            .zip(b.values())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

const FRAC_1_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
// 1 / sqrt(2 pi)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = INV_SQRT_2PI * libm::exp(-0.5 * x * x);
    cdf + x * pdf
}

fn row_lse(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| libm::exp(v - max)).sum();
    max + libm::log(sum)
}

fn forward(p: &Primitive, x: &[&Tensor]) -> Result<Tensor> {
    let a = x[0];
    Ok(match p {
        Primitive::MatMul => {
            let b = x[1];
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            if b.rows() != k {
                return Err(mismatch(p, a, b));
            }
            mat(m, n, matmul(a.values(), b.values(), m, k, n))
        }
        Primitive::Add | Primitive::Subtract | Primitive::Multiply => {
            let b = x[1];
            if a.shape() != b.shape() {
                return Err(mismatch(p, a, b));
            }
            match p {
                Primitive::Add => zip_map(a, b, |u, v| u + v),
                Primitive::Subtract => zip_map(a, b, |u, v| u - v),
                _ => zip_map(a, b, |u, v| u * v),
            }
        }
        Primitive::Scale(c) => {
            let c = *c;
            if !c.is_finite() {
                return Err(Error::NonFinite("scale-by-constant".to_string()));
            }
            a.map(|v| v * c)
        }
        Primitive::Exp => a.map(libm::exp),
        Primitive::Log => a.map(libm::log),
        Primitive::Transpose => {
            let (m, n) = (a.rows(), a.cols());
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = a.values()[i * n + j];
                }
            }
            mat(n, m, out)
        }
        Primitive::RowSoftmax => {
            let n = a.cols();
            let mut out = Vec::with_capacity(a.len());
            for i in 0..a.rows() {
                let row = a.row(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let start = out.len();
                let mut sum = 0.0;
                for &v in row {
                    let e = libm::exp(v - max);
                    sum += e;
                    out.push(e);
                }
                for v in &mut out[start..start + n] {
                    *v /= sum;
                }
            }
            like(a, out)
        }
        Primitive::RowLogSumExp => {
            let out = (0..a.rows()).map(|i| row_lse(a.row(i))).collect();
            mat(a.rows(), 1, out)
        }
        Primitive::RowL2Normalize => {
            let mut out = Vec::with_capacity(a.len());
            for i in 0..a.rows() {
                let row = a.row(i);
                let norm = libm::sqrt(dot(row, row));
                if norm == 0.0 {
                    return Err(Error::DegenerateEmbedding(i));
                }
                out.extend(row.iter().map(|v| v / norm));
            }
            like(a, out)
        }
        Primitive::MeanAll => Tensor::scalar(a.values().iter().sum::<f64>() / a.len() as f64),
        Primitive::SumAll => Tensor::scalar(a.values().iter().sum()),
        Primitive::SquaredL2DistanceRows => {
            let b = x[1];
            if !a.same_shape(b) {
                return Err(mismatch(p, a, b));
            }
            let out = (0..a.rows())
                .map(|i| {
                    a.row(i)
                        .iter()
                        .zip(b.row(i))
                        .map(|(u, v)| (u - v) * (u - v))
                        .sum()
                })
                .collect();
            mat(a.rows(), 1, out)
        }
        Primitive::Sigmoid => a.map(sigmoid),
        Primitive::Gelu => a.map(gelu),
        Primitive::EmbeddingLookup(ids) => {
            if ids.is_empty() {
                return Err(Error::invalid("embedding-lookup with no ids"));
            }
            let (vocab, dim) = (a.rows(), a.cols());
            let mut out = Vec::with_capacity(ids.len() * dim);
            for &id in ids {
                if id as usize >= vocab {
                    return Err(Error::TokenOutOfRange { id, vocab });
                }
                out.extend_from_slice(a.row(id as usize));
            }
            mat(ids.len(), dim, out)
        }
        Primitive::MeanPoolRows => {
            let (m, n) = (a.rows(), a.cols());
            let mut out = vec![0.0; n];
            for i in 0..m {
                for (o, v) in out.iter_mut().zip(a.row(i)) {
                    *o += v;
                }
            }
            let inv = 1.0 / m as f64;
            out.iter_mut().for_each(|v| *v *= inv);
            mat(1, n, out)
        }
        Primitive::ConcatRows => {
            let n = a.cols();
            let mut rows = 0;
            let mut out = Vec::new();
            for t in x {
                if t.cols() != n {
                    return Err(mismatch(p, a, t));
                }
                rows += t.rows();
                out.extend_from_slice(t.values());
            }
            mat(rows, n, out)
        }
        Primitive::AddRowBias => {
            let b = x[1];
            if b.rows() != 1 || b.cols() != a.cols() {
                return Err(mismatch(p, a, b));
            }
            let n = a.cols();
            let mut out = a.values().to_vec();
            for row in out.chunks_mut(n) {
                for (o, v) in row.iter_mut().zip(b.values()) {
                    *o += v;
                }
            }
            like(a, out)
        }
        Primitive::MulScalar => {
            let s = x[1];
            if !s.is_scalar() {
                return Err(mismatch(p, a, s));
            }
            let s = s.item();
            a.map(|v| v * s)
        }
        Primitive::Clamp { lo, hi } => {
            if lo > hi {
                return Err(Error::invalid("clamp bounds reversed"));
            }
            a.map(|v| v.clamp(*lo, *hi))
        }
        Primitive::LayerNormRows { eps } => {
            let n = a.cols();
            let mut out = Vec::with_capacity(a.len());
            for i in 0..a.rows() {
                let row = a.row(i);
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let inv = 1.0 / libm::sqrt(var + eps);
                out.extend(row.iter().map(|v| (v - mean) * inv));
            }
            like(a, out)
        }
        Primitive::SliceRows { start, end } => {
            if start >= end || *end > a.rows() {
                return Err(Error::invalid(format!(
                    "slice-rows {start}..{end} out of range for shape {:?}",
                    a.shape()
                )));
            }
            let n = a.cols();
            mat(end - start, n, a.values()[start * n..end * n].to_vec())
        }
    })
}

/// Returns one optional gradient per input, in input order.
fn backward_rule(
    p: &Primitive,
    x: &[&Tensor],
    y: &Tensor,
    g: &Tensor,
    wants: &[bool],
) -> Vec<Option<Tensor>> {
    let a = x[0];
    match p {
        Primitive::MatMul => {
            let b = x[1];
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            let ga = wants[0].then(|| like(a, matmul_nt(g.values(), b.values(), m, n, k)));
            let gb = wants[1].then(|| like(b, matmul_tn(a.values(), g.values(), m, k, n)));
            vec![ga, gb]
        }
        Primitive::Add => vec![Some(g.clone()), Some(g.clone())],
        Primitive::Subtract => vec![Some(g.clone()), Some(g.map(|v| -v))],
        Primitive::Multiply => {
            let b = x[1];
            vec![
                wants[0].then(|| zip_map(g, b, |u, v| u * v)),
                wants[1].then(|| zip_map(g, a, |u, v| u * v)),
            ]
        }
        Primitive::Scale(c) => vec![Some(g.map(|v| v * c))],
        Primitive::Exp => vec![Some(zip_map(g, y, |u, v| u * v))],
        Primitive::Log => vec![Some(zip_map(g, a, |u, v| u / v))],
        Primitive::Transpose => {
            let (m, n) = (g.rows(), g.cols());
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = g.values()[i * n + j];
                }
            }
            vec![Some(like(a, out))]
        }
        Primitive::RowSoftmax => {
            let mut out = Vec::with_capacity(a.len());
            for i in 0..a.rows() {
                let (gr, yr) = (g.row(i), y.row(i));
                let inner = dot(gr, yr);
                out.extend(gr.iter().zip(yr).map(|(gv, yv)| yv * (gv - inner)));
            }
            vec![Some(like(a, out))]
        }
        Primitive::RowLogSumExp => {
            let mut out = Vec::with_capacity(a.len());
            for i in 0..a.rows() {
                let lse = y.values()[i];
                let gi = g.values()[i];
                out.extend(a.row(i).iter().map(|v| gi * libm::exp(v - lse)));
            }
            vec![Some(like(a, out))]
        }
        Primitive::RowL2Normalize => {
            let mut out = Vec::with_capacity(a.len());
            for i in 0..a.rows() {
                let (xr, yr, gr) = (a.row(i), y.row(i), g.row(i));
                let norm = libm::sqrt(dot(xr, xr));
                let inner = dot(gr, yr);
                out.extend(gr.iter().zip(yr).map(|(gv, yv)| (gv - yv * inner) / norm));
            }
            vec![Some(like(a, out))]
        }
        Primitive::MeanAll => {
            let v = g.item() / a.len() as f64;
            vec![Some(Tensor::filled(a.shape(), v))]
        }
        Primitive::SumAll => vec![Some(Tensor::filled(a.shape(), g.item()))],
        Primitive::SquaredL2DistanceRows => {
            let b = x[1];
            let n = a.cols();
            let mut ga = Vec::with_capacity(a.len());
            for i in 0..a.rows() {
                let gi = g.values()[i];
                ga.extend(
                    a.row(i)
                        .iter()
                        .zip(b.row(i))
                        .map(|(u, v)| 2.0 * gi * (u - v)),
                );
            }
            debug_assert_eq!(ga.len(), a.rows() * n);
            let gb = ga.iter().map(|v| -v).collect();
            vec![Some(like(a, ga)), Some(like(b, gb))]
        }
        Primitive::Sigmoid => vec![Some(zip_map(g, y, |u, s| u * s * (1.0 - s)))],
        Primitive::Gelu => vec![Some(zip_map(g, a, |u, v| u * gelu_grad(v)))],
        Primitive::EmbeddingLookup(ids) => {
            let dim = a.cols();
            let mut out = vec![0.0; a.len()];
            for (r, &id) in ids.iter().enumerate() {
                let dst = &mut out[id as usize * dim..(id as usize + 1) * dim];
                for (o, v) in dst.iter_mut().zip(g.row(r)) {
                    *o += v;
                }
            }
            vec![Some(like(a, out))]
        }
        Primitive::MeanPoolRows => {
            let inv = 1.0 / a.rows() as f64;
            let row: Vec<f64> = g.values().iter().map(|v| v * inv).collect();
            let mut out = Vec::with_capacity(a.len());
            for _ in 0..a.rows() {
                out.extend_from_slice(&row);
            }
            vec![Some(like(a, out))]
        }
        Primitive::ConcatRows => {
            let n = a.cols();
            let mut offset = 0;
            x.iter()
                .zip(wants)
                .map(|(t, &want)| {
                    let len = t.rows() * n;
                    let part = want.then(|| like(t, g.values()[offset..offset + len].to_vec()));
                    offset += len;
                    part
                })
                .collect()
        }
        Primitive::AddRowBias => {
            let b = x[1];
            let n = a.cols();
            let gb = wants[1].then(|| {
                let mut out = vec![0.0; n];
                for row in g.values().chunks(n) {
                    for (o, v) in out.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                like(b, out)
            });
            vec![Some(g.clone()), gb]
        }
        Primitive::MulScalar => {
            let s = x[1];
            let ga = wants[0].then(|| g.map(|v| v * s.item()));
            let gs = wants[1].then(|| like(s, vec![dot(g.values(), a.values())]));
            vec![ga, gs]
        }
        Primitive::Clamp { lo, hi } => vec![Some(zip_map(g, a, |u, v| {
            if v >= *lo && v <= *hi {
                u
            } else {
                0.0
            }
        }))],
        Primitive::LayerNormRows { eps } => {
            let n = a.cols();
            let nf = n as f64;
            let mut out = Vec::with_capacity(a.len());
            for i in 0..a.rows() {
                let row = a.row(i);
                let mean = row.iter().sum::<f64>() / nf;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                let inv = 1.0 / libm::sqrt(var + eps);
                let (gr, yr) = (g.row(i), y.row(i));
                let g_mean = gr.iter().sum::<f64>() / nf;
                let gy_mean = dot(gr, yr) / nf;
                out.extend(
                    gr.iter()
                        .zip(yr)
                        .map(|(gv, yv)| inv * (gv - g_mean - yv * gy_mean)),
                );
            }
            vec![Some(like(a, out))]
        }
        Primitive::SliceRows { start, end } => {
            let n = a.cols();
            let mut out = vec![0.0; a.len()];
            out[start * n..end * n].copy_from_slice(g.values());
            vec![Some(like(a, out))]
        }
    }
}
