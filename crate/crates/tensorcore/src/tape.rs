//! Operation tape and reverse-mode differentiation.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::tensor::{gemm, ParamStore, Tensor};
use crate::LAYER_NORM_EPS;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A recorded primitive. Inputs refer to earlier tape entries.
#[derive(Clone, Debug)]
pub enum Op {
    /// Constant input; receives a gradient but is not a parameter.
    Leaf,
    /// Named trainable parameter.
    Param(String),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    /// `[d] -> [rows, d]`
    BroadcastRows(Var, usize),
    /// `out[i] = x[idx[i]]` over rows.
    Gather(Var, Arc<[usize]>),
    /// `out[idx[i]] += x[i]` into `rows` output rows.
    ScatterAdd(Var, Arc<[usize]>, usize),
    /// `out[i] = w[i] * x[i]` with constant per-row factors.
    RowScale(Var, Arc<[f32]>),
    /// Per-row normalization to zero mean and unit variance (no affine).
    LayerNorm(Var),
    /// Concatenation of rank-2 tensors along `axis` (0 = rows, 1 = columns).
    Concat(Vec<Var>, usize),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Abs(_) => "abs",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::Gather(..) => "gather",
            Op::ScatterAdd(..) => "scatter_add",
            Op::RowScale(..) => "row_scale",
            Op::LayerNorm(_) => "layer_norm",
            Op::Concat(..) => "concat",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Abs(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::BroadcastRows(a, _)
            | Op::Gather(a, _)
            | Op::ScatterAdd(a, _, _)
            | Op::RowScale(a, _)
            | Op::LayerNorm(a) => vec![*a],
            Op::Concat(vs, _) => vs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records values and the operations that produced them.
///
/// A tape belongs to a single computation; build a fresh one per loss
/// evaluation. Every non-finite intermediate is reported as an error at the
/// op that produced it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

fn map(a: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    let data = a.data().iter().map(|&x| f(x)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

/// `(rows, cols)` treating rank-1 tensors as a single row.
fn as_rows(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [d] => Ok((1, *d)),
        [r, c] => Ok((*r, *c)),
        s => Err(TensorError::Rank {
            op,
            expected: 2,
            shape: s.to_vec(),
        }),
    }
}

fn layer_norm_rows(x: &Tensor) -> Result<Tensor> {
    let (rows, cols) = as_rows("layer_norm", x)?;
    let mut out = vec![0.0f32; rows * cols];
    for r in 0..rows {
        let row = &x.data()[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f32>() / cols as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn gather_rows(op: &'static str, x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let (rows, cols) = x.dims2(op)?;
    let mut out = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        if i >= rows {
            return Err(TensorError::IndexOutOfRange { op, index: i, len: rows });
        }
        out.extend_from_slice(&x.data()[i * cols..(i + 1) * cols]);
    }
    Tensor::new(vec![idx.len(), cols], out)
}

fn scatter_rows(op: &'static str, x: &Tensor, idx: &[usize], rows_out: usize) -> Result<Tensor> {
    let (rows, cols) = x.dims2(op)?;
    if rows != idx.len() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: vec![rows],
            rhs: vec![idx.len()],
        });
    }
    let mut out = vec![0.0f32; rows_out * cols];
    for (r, &i) in idx.iter().enumerate() {
        if i >= rows_out {
            return Err(TensorError::IndexOutOfRange { op, index: i, len: rows_out });
        }
        let src = &x.data()[r * cols..(r + 1) * cols];
        for (o, v) in out[i * cols..(i + 1) * cols].iter_mut().zip(src) {
            *o += v;
        }
    }
    Tensor::new(vec![rows_out, cols], out)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Recorded values in tape order.
    pub fn values(&self) -> impl Iterator<Item = &Tensor> {
        self.nodes.iter().map(|n| &n.value)
    }

    /// Handle of the `i`-th recorded node.
    pub fn var_at(&self, i: usize) -> Var {
        assert!(i < self.nodes.len(), "node {i} of {}", self.nodes.len());
        Var(i)
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(TensorError::ForeignVar(v.0));
        }
        Ok(())
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        for v in op.inputs() {
            self.check(v)?;
        }
        let value = self.eval(&op)?;
        if !value.is_finite() {
            return Err(TensorError::NonFinite {
                op: op.name(),
                node: self.nodes.len(),
            });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Forward semantics of every primitive; shared by recording and replay.
    fn eval(&self, op: &Op) -> Result<Tensor> {
        let val = |v: &Var| &self.nodes[v.0].value;
        match op {
            Op::Leaf | Op::Param(_) => Err(TensorError::Invalid(
                "leaf values are supplied, not evaluated".into(),
            )),
            Op::MatMul(a, b) => {
                let (a, b) = (val(a), val(b));
                let (m, k) = a.dims2("matmul")?;
                let (k2, n) = b.dims2("matmul")?;
                if k != k2 {
                    return Err(TensorError::ShapeMismatch {
                        op: "matmul",
                        lhs: a.shape().to_vec(),
                        rhs: b.shape().to_vec(),
                    });
                }
                Tensor::new(vec![m, n], gemm(a.data(), b.data(), m, k, n, false, false))
            }
            Op::Add(a, b) => {
                same_shape("add", val(a), val(b))?;
                Ok(zip_map(val(a), val(b), |x, y| x + y))
            }
            Op::Sub(a, b) => {
                same_shape("sub", val(a), val(b))?;
                Ok(zip_map(val(a), val(b), |x, y| x - y))
            }
            Op::Mul(a, b) => {
                same_shape("mul", val(a), val(b))?;
                Ok(zip_map(val(a), val(b), |x, y| x * y))
            }
            Op::Scale(a, s) => Ok(map(val(a), |x| x * s)),
            Op::Relu(a) => Ok(map(val(a), |x| x.max(0.0))),
            Op::Abs(a) => Ok(map(val(a), f32::abs)),
            Op::Sum(a) => Ok(Tensor::scalar(val(a).data().iter().sum())),
            Op::Mean(a) => {
                let t = val(a);
                let n = t.numel().max(1) as f32;
                Ok(Tensor::scalar(t.data().iter().sum::<f32>() / n))
            }
            Op::BroadcastRows(a, rows) => {
                let t = val(a);
                if t.rank() != 1 {
                    return Err(TensorError::Rank {
                        op: "broadcast_rows",
                        expected: 1,
                        shape: t.shape().to_vec(),
                    });
                }
                let d = t.numel();
                let mut data = Vec::with_capacity(rows * d);
                for _ in 0..*rows {
                    data.extend_from_slice(t.data());
                }
                Tensor::new(vec![*rows, d], data)
            }
            Op::Gather(a, idx) => gather_rows("gather", val(a), idx),
            Op::ScatterAdd(a, idx, rows) => scatter_rows("scatter_add", val(a), idx, *rows),
            Op::RowScale(a, w) => {
                let t = val(a);
                let (rows, cols) = t.dims2("row_scale")?;
                if w.len() != rows {
                    return Err(TensorError::ShapeMismatch {
                        op: "row_scale",
                        lhs: vec![rows],
                        rhs: vec![w.len()],
                    });
                }
                let mut data = t.data().to_vec();
                for (r, chunk) in data.chunks_mut(cols.max(1)).enumerate().take(rows) {
                    chunk.iter_mut().for_each(|v| *v *= w[r]);
                }
                Tensor::new(vec![rows, cols], data)
            }
            Op::LayerNorm(a) => layer_norm_rows(val(a)),
            Op::Concat(vs, axis) => {
                if vs.is_empty() {
                    return Err(TensorError::Invalid("concat of zero tensors".into()));
                }
                let dims: Vec<(usize, usize)> = vs
                    .iter()
                    .map(|v| val(v).dims2("concat"))
                    .collect::<Result<_>>()?;
                match axis {
                    0 => {
                        let cols = dims[0].1;
                        let mut data = Vec::new();
                        for (v, d) in vs.iter().zip(&dims) {
                            if d.1 != cols {
                                return Err(TensorError::ShapeMismatch {
                                    op: "concat",
                                    lhs: vec![dims[0].0, cols],
                                    rhs: vec![d.0, d.1],
                                });
                            }
                            data.extend_from_slice(val(v).data());
                        }
                        let rows = dims.iter().map(|d| d.0).sum();
                        Tensor::new(vec![rows, cols], data)
                    }
                    1 => {
                        let rows = dims[0].0;
                        if let Some(d) = dims.iter().find(|d| d.0 != rows) {
                            return Err(TensorError::ShapeMismatch {
                                op: "concat",
                                lhs: vec![rows, dims[0].1],
                                rhs: vec![d.0, d.1],
                            });
                        }
                        let total: usize = dims.iter().map(|d| d.1).sum();
                        let mut data = Vec::with_capacity(rows * total);
                        for r in 0..rows {
                            for (v, d) in vs.iter().zip(&dims) {
                                data.extend_from_slice(&val(v).data()[r * d.1..(r + 1) * d.1]);
                            }
                        }
                        Tensor::new(vec![rows, total], data)
                    }
                    _ => Err(TensorError::Invalid(format!("concat axis {axis}"))),
                }
            }
        }
    }

    /// Records a constant input.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite {
                op: "leaf",
                node: self.nodes.len(),
            });
        }
        self.nodes.push(Node { value, op: Op::Leaf });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records (once) the named parameter from `store`.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        let value = store.get(name)?.clone();
        self.nodes.push(Node {
            value,
            op: Op::Param(name.to_string()),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
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

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        self.push(Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Abs(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Mean(a))
    }

    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        self.push(Op::BroadcastRows(a, rows))
    }

    /// `x[rows, d] + b[d]` via an explicit row broadcast.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let rows = self.value(x).dims2("add_row")?.0;
        let bb = self.broadcast_rows(b, rows)?;
        self.add(x, bb)
    }

    /// `x[rows, d] * g[d]` via an explicit row broadcast.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let rows = self.value(x).dims2("mul_row")?.0;
        let gb = self.broadcast_rows(g, rows)?;
        self.mul(x, gb)
    }

    pub fn gather(&mut self, x: Var, idx: Arc<[usize]>) -> Result<Var> {
        self.push(Op::Gather(x, idx))
    }

    pub fn scatter_add(&mut self, x: Var, idx: Arc<[usize]>, rows: usize) -> Result<Var> {
        self.push(Op::ScatterAdd(x, idx, rows))
    }

    pub fn row_scale(&mut self, x: Var, w: Arc<[f32]>) -> Result<Var> {
        self.push(Op::RowScale(x, w))
    }

    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        self.push(Op::LayerNorm(x))
    }

    pub fn concat(&mut self, vs: &[Var], axis: usize) -> Result<Var> {
        if vs.len() == 1 {
            return Ok(vs[0]);
        }
        self.push(Op::Concat(vs.to_vec(), axis))
    }

    /// Contiguous row range `[start, end)` of a rank-2 value.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let idx: Arc<[usize]> = (start..end).collect();
        self.gather(x, idx)
    }

    /// Re-evaluates every recorded op from the leaves and parameters.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut scratch = Tape {
            nodes: Vec::with_capacity(self.nodes.len()),
            params: HashMap::new(),
        };
        for node in &self.nodes {
            let value = match &node.op {
                Op::Leaf | Op::Param(_) => node.value.clone(),
                op => scratch.eval(op)?,
            };
            scratch.nodes.push(Node {
                value,
                op: node.op.clone(),
            });
        }
        Ok(scratch.nodes.into_iter().map(|n| n.value).collect())
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        let accumulate = |slot: &mut Option<Tensor>, g: Tensor| match slot {
            Some(existing) => {
                for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += v;
                }
            }
            None => *slot = Some(g),
        };

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !g.is_finite() {
                return Err(TensorError::NonFinite {
                    op: node.op.name(),
                    node: i,
                });
            }
            let val = |v: &Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (m, k) = val(a).dims2("matmul")?;
                    let n = val(b).dims2("matmul")?.1;
                    // dA = dC B^T, dB = A^T dC
                    let da = gemm(g.data(), val(b).data(), m, n, k, false, true);
                    let db = gemm(val(a).data(), g.data(), k, m, n, true, false);
                    accumulate(&mut grads[a.0], Tensor::new(vec![m, k], da)?);
                    accumulate(&mut grads[b.0], Tensor::new(vec![k, n], db)?);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[b.0], map(&g, |x| -x));
                    accumulate(&mut grads[a.0], g);
                }
                Op::Mul(a, b) => {
                    let ga = zip_map(&g, val(b), |x, y| x * y);
                    let gb = zip_map(&g, val(a), |x, y| x * y);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Scale(a, s) => accumulate(&mut grads[a.0], map(&g, |x| x * s)),
                Op::Relu(a) => {
                    let ga = zip_map(&g, val(a), |x, y| if y > 0.0 { x } else { 0.0 });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Abs(a) => {
                    let ga = zip_map(&g, val(a), |x, y| {
                        if y > 0.0 {
                            x
                        } else if y < 0.0 {
                            -x
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Sum(a) => {
                    let s = g.data()[0];
                    accumulate(&mut grads[a.0], Tensor::full(val(a).shape(), s));
                }
                Op::Mean(a) => {
                    let n = val(a).numel().max(1) as f32;
                    let s = g.data()[0] / n;
                    accumulate(&mut grads[a.0], Tensor::full(val(a).shape(), s));
                }
                Op::BroadcastRows(a, rows) => {
                    let d = val(a).numel();
                    let mut ga = vec![0.0f32; d];
                    for r in 0..*rows {
                        for (o, v) in ga.iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads[a.0], Tensor::new(vec![d], ga)?);
                }
                Op::Gather(a, idx) => {
                    let rows = val(a).dims2("gather")?.0;
                    accumulate(&mut grads[a.0], scatter_rows("gather", &g, idx, rows)?);
                }
                Op::ScatterAdd(a, idx, _) => {
                    accumulate(&mut grads[a.0], gather_rows("scatter_add", &g, idx)?);
                }
                Op::RowScale(a, w) => {
                    let (rows, cols) = g.dims2("row_scale")?;
                    let mut ga = g.into_data();
                    for r in 0..rows {
                        ga[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v *= w[r]);
                    }
                    accumulate(&mut grads[a.0], Tensor::new(vec![rows, cols], ga)?);
                }
                Op::LayerNorm(a) => {
                    let x = val(a);
                    let y = &node.value;
                    let (rows, cols) = as_rows("layer_norm", x)?;
                    let mut ga = vec![0.0f32; rows * cols];
                    for r in 0..rows {
                        let xr = &x.data()[r * cols..(r + 1) * cols];
                        let yr = &y.data()[r * cols..(r + 1) * cols];
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        let mean = xr.iter().sum::<f32>() / cols as f32;
                        let var =
                            xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let g_mean = gr.iter().sum::<f32>() / cols as f32;
                        let gy_mean =
                            gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f32>() / cols as f32;
                        for c in 0..cols {
                            ga[r * cols + c] = inv * (gr[c] - g_mean - yr[c] * gy_mean);
                        }
                    }
                    accumulate(&mut grads[a.0], Tensor::new(x.shape().to_vec(), ga)?);
                }
                Op::Concat(vs, axis) => {
                    let (rows, total) = g.dims2("concat")?;
                    let mut offset = 0;
                    for v in vs {
                        let (r, c) = val(v).dims2("concat")?;
                        let part = if *axis == 0 {
                            g.data()[offset * total..(offset + r) * total].to_vec()
                        } else {
                            let mut d = Vec::with_capacity(r * c);
                            for row in 0..rows {
                                d.extend_from_slice(
                                    &g.data()[row * total + offset..row * total + offset + c],
                                );
                            }
                            d
                        };
                        offset += if *axis == 0 { r } else { c };
                        accumulate(&mut grads[v.0], Tensor::new(vec![r, c], part)?);
                    }
                }
            }
        }

        let mut named = BTreeMap::new();
        for (name, v) in &self.params {
            let g = grads[v.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.value(*v).shape()));
            if !g.is_finite() {
                return Err(TensorError::NonFiniteGradient(name.clone()));
            }
            named.insert(name.clone(), g);
        }
        Ok(Gradients {
            per_node: grads,
            named,
        })
    }
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    per_node: Vec<Option<Tensor>>,
    named: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient of a named parameter.
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.named.get(name)
    }

    /// Gradient with respect to a leaf or parameter variable, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.per_node.get(v.0).and_then(Option::as_ref)
    }

    pub fn named(&self) -> &BTreeMap<String, Tensor> {
        &self.named
    }

    pub fn into_named(self) -> BTreeMap<String, Tensor> {
        self.named
    }

    /// Global L2 norm over all named gradients.
    pub fn global_norm(&self) -> f32 {
        self.named
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f32>()
            .sqrt()
    }

    /// Adds another set of named gradients (gradient accumulation).
    pub fn accumulate(&mut self, other: &Gradients) {
        for (name, g) in &other.named {
            match self.named.get_mut(name) {
                Some(t) => t
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b),
                None => {
                    self.named.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        for t in self.named.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Evaluates `loss_fn` on a fresh tape and returns the loss and the gradient
/// of every parameter in `params` (zero for parameters the loss never reads).
pub fn grad<F>(params: &ParamStore, loss_fn: F) -> Result<(f32, Gradients)>
where
    F: FnOnce(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, params)?;
    let value = tape.value(loss).item()?;
    let mut grads = tape.backward(loss)?;
    for (name, t) in params.iter() {
        if !grads.named.contains_key(name) {
            grads.named.insert(name.clone(), Tensor::zeros(t.shape()));
        }
    }
    Ok((value, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f32) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::new(vec![1], vec![v]).unwrap());
        p
    }

    #[test]
    fn square_has_gradient_two_x() {
        let params = scalar_param(3.0);
        let (loss, g) = grad(&params, |t, p| {
            let x = t.param(p, "x")?;
            let y = t.mul(x, x)?;
            t.sum(y)
        })
        .unwrap();
        assert_eq!(loss, 9.0);
        assert_eq!(g.get("x").unwrap().data(), &[6.0]);
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::from_fn(&[3, 4], |i| i as f32 - 5.0));
        let (_, g) = grad(&params, |t, p| {
            let w = t.param(p, "w")?;
            t.sum(w)
        })
        .unwrap();
        let gw = g.get("w").unwrap();
        assert_eq!(gw.shape(), &[3, 4]);
        assert!(gw.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let params = ParamStore::new();
        let err = grad(&params, |t, _| t.leaf(Tensor::zeros(&[2, 2]))).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss(_)));
    }

    #[test]
    fn nan_in_forward_is_reported() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::full(&[1, 1], f32::MAX)).unwrap();
        let err = t.scale(x, 10.0).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { op: "scale", .. }));
        assert!(t.leaf(Tensor::full(&[1], f32::NAN)).is_err());
    }

    #[test]
    fn unused_params_get_zero_gradient() {
        let mut params = scalar_param(1.0);
        params.insert("unused", Tensor::ones(&[2]));
        let (_, g) = grad(&params, |t, p| {
            let x = t.param(p, "x")?;
            t.sum(x)
        })
        .unwrap();
        assert_eq!(g.get("unused").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn shape_errors_surface() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 3])).unwrap();
        let b = t.leaf(Tensor::zeros(&[2, 3])).unwrap();
        assert!(t.matmul(a, b).is_err());
        let c = t.leaf(Tensor::zeros(&[3, 2])).unwrap();
        assert!(t.add(a, c).is_err());
        assert!(t.gather(a, Arc::from(vec![5usize])).is_err());
    }

    #[test]
    fn concat_rows_and_cols() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
        let b = t.leaf(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap()).unwrap();
        let r = t.concat(&[a, b], 0).unwrap();
        assert_eq!(t.value(r).shape(), &[2, 2]);
        assert_eq!(t.value(r).data(), &[1.0, 2.0, 3.0, 4.0]);
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.value(c).shape(), &[1, 4]);
    }
}
