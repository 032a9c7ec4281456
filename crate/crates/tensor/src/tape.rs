//! Reverse-mode differentiation over dense tensors.
//!
//! Every primitive appends a node holding its output value to the [`Tape`].
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! reverse topological traversal. Parameters enter the tape through
//! [`Tape::param`] and receive gradients in [`Tape::backward`].

use std::collections::HashMap;
use std::sync::Arc;

use crate::activation::Activation;
use crate::error::{invalid, Result, TensorError};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Shared row-index vector used by gather and segment primitives.
pub type Index = Arc<[usize]>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Index),
    SegmentSum(Var, Index),
    SegmentMean(Var, Index, Arc<[f64]>),
    /// `(input, output, weight)` routes; tied maxima share the gradient.
    SegmentMax(Var, Vec<(usize, usize, f64)>),
    SegmentSoftmax(Var, Index),
    MaskedSoftmax(Var),
    BatchedMatVec(Var, Var),
    Reshape(Var),
    Act(Var, Activation),
    SumAll(Var),
    MeanAll(Var),
    Abs(Var),
    Square(Var),
    RowSum(Var),
    RowMean(Var),
    RowMax(Var, Vec<(usize, usize, f64)>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn matrix2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(invalid(op, format!("expected a 2-D tensor, got shape {s:?}"))),
    }
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

fn check_segments(op: &'static str, rows: usize, seg: &[usize], n: usize) -> Result<()> {
    if seg.len() != rows {
        return Err(invalid(
            op,
            format!("{} segment ids for {rows} rows", seg.len()),
        ));
    }
    if let Some(&bad) = seg.iter().find(|&&s| s >= n) {
        return Err(invalid(op, format!("segment id {bad} >= {n} segments")));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A tape whose parameters do not require gradients (inference only).
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Loads a parameter. Repeated loads of the same id share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), self.grad_enabled);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix2(self.value(a), "matmul")?;
        let (k2, n) = matrix2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn zip_with(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        same_shape(op_name, self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`c` vector to every row of an `r x c` tensor.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.value(x).matrix_dims();
        if self.value(bias).shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let b = self.value(bias).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(c.max(1)) {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(t, Op::AddRow(x, bias), rg))
    }

    /// Scales row `i` of `x` by `s[i]`; `s` has one entry per row.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Result<Var> {
        let (r, c) = self.value(x).matrix_dims();
        if self.value(s).len() != r {
            return Err(TensorError::ShapeMismatch {
                op: "mul_col",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(s).shape().to_vec(),
            });
        }
        let sv = self.value(s).data().to_vec();
        let mut t = self.value(x).clone();
        for (row, k) in t.data_mut().chunks_mut(c.max(1)).zip(&sv) {
            for v in row {
                *v *= k;
            }
        }
        let rg = self.any_grad(&[x, s]);
        Ok(self.push(t, Op::MulCol(x, s), rg))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v *= k);
        let rg = self.any_grad(&[x]);
        self.push(t, Op::Scale(x, k), rg)
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v += k);
        let rg = self.any_grad(&[x]);
        self.push(t, Op::AddScalar(x), rg)
    }

    /// Concatenates 2-D tensors with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(invalid("concat_cols", "no inputs"));
        }
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            dims.push(matrix2(self.value(p), "concat_cols")?);
        }
        let rows = dims[0].0;
        if let Some(&(r, _)) = dims.iter().find(|(r, _)| *r != rows) {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: vec![rows, dims[0].1],
                rhs: vec![r, 0],
            });
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &(_, c)) in parts.iter().zip(&dims) {
                out.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::new(vec![rows, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Selects rows: `out[i] = x[idx[i]]`.
    pub fn gather_rows(&mut self, x: Var, idx: &Index) -> Result<Var> {
        let (r, c) = matrix2(self.value(x), "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(invalid("gather_rows", format!("row {bad} out of {r}")));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            out.extend_from_slice(&xd[i * c..(i + 1) * c]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(vec![idx.len(), c], out)?,
            Op::GatherRows(x, idx.clone()),
            rg,
        ))
    }

    /// Sums rows sharing a segment id into an `n x c` output.
    pub fn segment_sum(&mut self, x: Var, seg: &Index, n: usize) -> Result<Var> {
        let (r, c) = matrix2(self.value(x), "segment_sum")?;
        check_segments("segment_sum", r, seg, n)?;
        let out = segment_sum_raw(self.value(x).data(), c, seg, n);
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(vec![n, c], out)?,
            Op::SegmentSum(x, seg.clone()),
            rg,
        ))
    }

    /// Mean of rows per segment; empty segments produce zeros.
    pub fn segment_mean(&mut self, x: Var, seg: &Index, n: usize) -> Result<Var> {
        let (r, c) = matrix2(self.value(x), "segment_mean")?;
        check_segments("segment_mean", r, seg, n)?;
        let mut counts = vec![0.0; n];
        for &s in seg.iter() {
            counts[s] += 1.0;
        }
        let mut out = segment_sum_raw(self.value(x).data(), c, seg, n);
        for (row, &k) in out.chunks_mut(c.max(1)).zip(&counts) {
            if k > 0.0 {
                row.iter_mut().for_each(|v| *v /= k);
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(vec![n, c], out)?,
            Op::SegmentMean(x, seg.clone(), counts.into()),
            rg,
        ))
    }

    /// Column-wise maximum per segment; empty segments produce zeros. Tied
    /// maxima split the gradient equally.
    pub fn segment_max(&mut self, x: Var, seg: &Index, n: usize) -> Result<Var> {
        let (r, c) = matrix2(self.value(x), "segment_max")?;
        check_segments("segment_max", r, seg, n)?;
        let xd = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; n * c];
        for (i, &s) in seg.iter().enumerate() {
            for j in 0..c {
                let o = &mut out[s * c + j];
                *o = o.max(xd[i * c + j]);
            }
        }
        let routes = max_routes(xd, &out, seg.iter().enumerate().flat_map(|(i, &s)| (0..c).map(move |j| (i * c + j, s * c + j))));
        out.iter_mut().filter(|v| **v == f64::NEG_INFINITY).for_each(|v| *v = 0.0);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::SegmentMax(x, routes), rg))
    }

    /// Softmax over rows sharing a segment id, independently per column.
    pub fn segment_softmax(&mut self, x: Var, seg: &Index, n: usize) -> Result<Var> {
        let (r, c) = matrix2(self.value(x), "segment_softmax")?;
        check_segments("segment_softmax", r, seg, n)?;
        let xd = self.value(x).data();
        let mut max = vec![f64::NEG_INFINITY; n * c];
        for (i, &s) in seg.iter().enumerate() {
            for j in 0..c {
                max[s * c + j] = max[s * c + j].max(xd[i * c + j]);
            }
        }
        let mut out: Vec<f64> = seg
            .iter()
            .enumerate()
            .flat_map(|(i, &s)| (0..c).map(move |j| (i, s, j)))
            .map(|(i, s, j)| (xd[i * c + j] - max[s * c + j]).exp())
            .collect();
        let denom = segment_sum_raw(&out, c, seg, n);
        for (i, &s) in seg.iter().enumerate() {
            for j in 0..c {
                out[i * c + j] /= denom[s * c + j];
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(vec![r, c], out)?,
            Op::SegmentSoftmax(x, seg.clone()),
            rg,
        ))
    }

    /// Row-wise softmax over the last axis restricted to positions where
    /// `mask` is nonzero. Masked positions are exactly 0; fully masked rows
    /// are all zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &Tensor) -> Result<Var> {
        same_shape("masked_softmax", self.value(x), mask)?;
        let (_, c) = self.value(x).matrix_dims();
        let mut out = self.value(x).clone();
        for (row, m) in out
            .data_mut()
            .chunks_mut(c.max(1))
            .zip(mask.data().chunks(c.max(1)))
        {
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &k)| k != 0.0)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (v, &k) in row.iter_mut().zip(m) {
                *v = if k != 0.0 { (*v - max).exp() } else { 0.0 };
                sum += *v;
            }
            if sum > 0.0 {
                row.iter_mut().for_each(|v| *v /= sum);
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::MaskedSoftmax(x), rg))
    }

    /// Per-row matrix-vector product: row `e` of `mats` holds a row-major
    /// `d x d` matrix applied to row `e` of `x`.
    pub fn batched_matvec(&mut self, mats: Var, x: Var) -> Result<Var> {
        let (e, dd) = matrix2(self.value(mats), "batched_matvec")?;
        let (e2, d) = matrix2(self.value(x), "batched_matvec")?;
        if e != e2 || dd != d * d {
            return Err(TensorError::ShapeMismatch {
                op: "batched_matvec",
                lhs: vec![e, dd],
                rhs: vec![e2, d],
            });
        }
        let (md, xd) = (self.value(mats).data(), self.value(x).data());
        let mut out = vec![0.0; e * d];
        for k in 0..e {
            let xv = &xd[k * d..(k + 1) * d];
            for i in 0..d {
                let row = &md[k * dd + i * d..k * dd + (i + 1) * d];
                out[k * d + i] = dot(row, xv);
            }
        }
        let rg = self.any_grad(&[mats, x]);
        Ok(self.push(
            Tensor::new(vec![e, d], out)?,
            Op::BatchedMatVec(mats, x),
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        if act == Activation::Linear {
            return x;
        }
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
        let rg = self.any_grad(&[x]);
        self.push(t, Op::Act(x, act), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v = v.abs());
        let rg = self.any_grad(&[x]);
        self.push(t, Op::Abs(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v *= *v);
        let rg = self.any_grad(&[x]);
        self.push(t, Op::Square(x), rg)
    }

    fn row_reduce(&mut self, x: Var, op_name: &'static str) -> Result<(usize, usize)> {
        matrix2(self.value(x), op_name)
    }

    /// Sum over the column axis: `r x c -> r x 1`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.row_reduce(x, "row_sum")?;
        let out = self
            .value(x)
            .data()
            .chunks(c.max(1))
            .map(|row| row.iter().sum())
            .take(r)
            .collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![r, 1], out)?, Op::RowSum(x), rg))
    }

    pub fn row_mean(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.row_reduce(x, "row_mean")?;
        let out = self
            .value(x)
            .data()
            .chunks(c.max(1))
            .map(|row| row.iter().sum::<f64>() / c.max(1) as f64)
            .take(r)
            .collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![r, 1], out)?, Op::RowMean(x), rg))
    }

    pub fn row_max(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.row_reduce(x, "row_max")?;
        if c == 0 {
            return Err(invalid("row_max", "zero columns"));
        }
        let xd = self.value(x).data();
        let out: Vec<f64> = xd.chunks(c).map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
        let routes = max_routes(xd, &out, (0..r * c).map(|k| (k, k / c)));
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![r, 1], out)?, Op::RowMax(x, routes), rg))
    }

    /// Propagates gradients from a scalar `loss` back to every parameter
    /// loaded on this tape, then clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, g, &mut grads, &mut out);
        }
        self.clear();
        Ok(out)
    }

    fn propagate(
        &self,
        id: usize,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) {
        let node = &self.nodes[id];
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(pid) => {
                let t = Tensor::new(node.value.shape().to_vec(), g)
                    .expect("gradient shape matches parameter");
                out.insert(*pid, t);
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.matrix_dims();
                let n = node.value.matrix_dims().1;
                let ad = self.nodes[a.0].value.data();
                let bd = self.nodes[b.0].value.data();
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            da[i * k + p] = dot(grow, brow);
                        }
                    }
                    acc(*a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let drow = &mut db[p * n..(p + 1) * n];
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*b, g.clone());
                acc(*a, g);
            }
            Op::Sub(a, b) => {
                acc(*b, g.iter().map(|v| -v).collect());
                acc(*a, g);
            }
            Op::Mul(a, b) => {
                let ad = self.nodes[a.0].value.data();
                let bd = self.nodes[b.0].value.data();
                acc(*a, g.iter().zip(bd).map(|(x, y)| x * y).collect());
                acc(*b, g.iter().zip(ad).map(|(x, y)| x * y).collect());
            }
            Op::AddRow(x, bias) => {
                let c = self.nodes[bias.0].value.len();
                let mut db = vec![0.0; c];
                for row in g.chunks(c.max(1)) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                acc(*bias, db);
                acc(*x, g);
            }
            Op::MulCol(x, s) => {
                let (_, c) = node.value.matrix_dims();
                let xd = self.nodes[x.0].value.data();
                let sd = self.nodes[s.0].value.data();
                let ds = g
                    .chunks(c.max(1))
                    .zip(xd.chunks(c.max(1)))
                    .map(|(gr, xr)| dot(gr, xr))
                    .collect();
                let dx = g
                    .chunks(c.max(1))
                    .zip(sd)
                    .flat_map(|(gr, k)| gr.iter().map(move |v| v * k))
                    .collect();
                acc(*s, ds);
                acc(*x, dx);
            }
            Op::Scale(x, k) => acc(*x, g.iter().map(|v| v * k).collect()),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, g),
            Op::ConcatCols(parts) => {
                let total = node.value.matrix_dims().1;
                let rows = node.value.matrix_dims().0;
                let mut offset = 0;
                for p in parts {
                    let c = self.nodes[p.0].value.matrix_dims().1;
                    if self.nodes[p.0].requires_grad {
                        let mut d = Vec::with_capacity(rows * c);
                        for i in 0..rows {
                            d.extend_from_slice(&g[i * total + offset..i * total + offset + c]);
                        }
                        acc(*p, d);
                    }
                    offset += c;
                }
            }
            Op::GatherRows(x, idx) => {
                let (r, c) = self.nodes[x.0].value.matrix_dims();
                acc(*x, segment_sum_raw(&g, c, idx, r));
            }
            Op::SegmentSum(x, seg) => {
                let c = node.value.matrix_dims().1;
                acc(*x, gather_raw(&g, c, seg));
            }
            Op::SegmentMean(x, seg, counts) => {
                let c = node.value.matrix_dims().1;
                let mut d = gather_raw(&g, c, seg);
                for (row, &s) in d.chunks_mut(c.max(1)).zip(seg.iter()) {
                    row.iter_mut().for_each(|v| *v /= counts[s]);
                }
                acc(*x, d);
            }
            Op::SegmentMax(x, routes) | Op::RowMax(x, routes) => {
                let mut d = vec![0.0; self.nodes[x.0].value.len()];
                for &(i, o, w) in routes {
                    d[i] += w * g[o];
                }
                acc(*x, d);
            }
            Op::SegmentSoftmax(x, seg) => {
                let (r, c) = node.value.matrix_dims();
                let y = node.value.data();
                let gy: Vec<f64> = g.iter().zip(y).map(|(a, b)| a * b).collect();
                let n = seg.iter().copied().max().map_or(0, |m| m + 1);
                let dots = segment_sum_raw(&gy, c, seg, n);
                let mut d = vec![0.0; r * c];
                for (i, &s) in seg.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] = y[i * c + j] * (g[i * c + j] - dots[s * c + j]);
                    }
                }
                acc(*x, d);
            }
            Op::MaskedSoftmax(x) => {
                let (_, c) = node.value.matrix_dims();
                let y = node.value.data();
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d
                    .chunks_mut(c.max(1))
                    .zip(y.chunks(c.max(1)))
                    .zip(g.chunks(c.max(1)))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((dv, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = yv * (gv - dot);
                    }
                }
                acc(*x, d);
            }
            Op::BatchedMatVec(mats, x) => {
                let (e, d) = self.nodes[x.0].value.matrix_dims();
                let md = self.nodes[mats.0].value.data();
                let xd = self.nodes[x.0].value.data();
                let dd = d * d;
                if self.nodes[mats.0].requires_grad {
                    let mut dm = vec![0.0; e * dd];
                    for k in 0..e {
                        for i in 0..d {
                            let gv = g[k * d + i];
                            let row = &mut dm[k * dd + i * d..k * dd + (i + 1) * d];
                            for (r, xv) in row.iter_mut().zip(&xd[k * d..(k + 1) * d]) {
                                *r = gv * xv;
                            }
                        }
                    }
                    acc(*mats, dm);
                }
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; e * d];
                    for k in 0..e {
                        for i in 0..d {
                            let gv = g[k * d + i];
                            let row = &md[k * dd + i * d..k * dd + (i + 1) * d];
                            for (o, m) in dx[k * d..(k + 1) * d].iter_mut().zip(row) {
                                *o += gv * m;
                            }
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Act(x, act) => {
                let xd = self.nodes[x.0].value.data();
                let y = node.value.data();
                let d = g
                    .iter()
                    .zip(xd.iter().zip(y))
                    .map(|(gv, (xv, yv))| gv * act.derivative(*xv, *yv))
                    .collect();
                acc(*x, d);
            }
            Op::SumAll(x) => acc(*x, vec![g[0]; self.nodes[x.0].value.len()]),
            Op::MeanAll(x) => {
                let n = self.nodes[x.0].value.len().max(1);
                acc(*x, vec![g[0] / n as f64; n]);
            }
            Op::Abs(x) => {
                let xd = self.nodes[x.0].value.data();
                acc(*x, g.iter().zip(xd).map(|(gv, v)| gv * sign(*v)).collect());
            }
            Op::Square(x) => {
                let xd = self.nodes[x.0].value.data();
                acc(*x, g.iter().zip(xd).map(|(gv, v)| 2.0 * gv * v).collect());
            }
            Op::RowSum(x) => {
                let c = self.nodes[x.0].value.matrix_dims().1;
                acc(*x, g.iter().flat_map(|v| std::iter::repeat_n(*v, c)).collect());
            }
            Op::RowMean(x) => {
                let c = self.nodes[x.0].value.matrix_dims().1;
                let k = 1.0 / c.max(1) as f64;
                acc(
                    *x,
                    g.iter().flat_map(|v| std::iter::repeat_n(v * k, c)).collect(),
                );
            }
        }
    }
}

/// Dot product with independent partial sums so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for j in 0..4 {
            acc[j] += x[j] * y[j];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn segment_sum_raw(x: &[f64], c: usize, seg: &[usize], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * c];
    for (i, &s) in seg.iter().enumerate() {
        let dst = &mut out[s * c..(s + 1) * c];
        for (o, v) in dst.iter_mut().zip(&x[i * c..(i + 1) * c]) {
            *o += v;
        }
    }
    out
}

/// Inputs equal to their output's maximum, each weighted by 1 / ties.
fn max_routes(x: &[f64], out: &[f64], pairs: impl Iterator<Item = (usize, usize)> + Clone) -> Vec<(usize, usize, f64)> {
    let mut ties = vec![0u32; out.len()];
    for (i, o) in pairs.clone() {
        if x[i] == out[o] {
            ties[o] += 1;
        }
    }
    pairs
        .filter(|&(i, o)| x[i] == out[o])
        .map(|(i, o)| (i, o, 1.0 / f64::from(ties[o])))
        .collect()
}

fn gather_raw(x: &[f64], c: usize, idx: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        out.extend_from_slice(&x[i * c..(i + 1) * c]);
    }
    out
}
