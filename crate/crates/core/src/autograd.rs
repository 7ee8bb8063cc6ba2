//! Reverse-mode differentiation over a per-forward tape.
//!
//! A [`Tape`] records every intermediate of one forward pass. After
//! [`Tape::backward`] the tape is dropped; nothing persists across steps.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    ScaleRows(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    Softmax(usize),
    LogClamp(usize, f64),
    CrossEntropy(usize, usize),
    LayerNorm(usize),
    Gelu(usize),
    SliceCols(usize, usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of parameter leaves, in tape order. A parameter read more
    /// than once appears once per read.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor)> + '_ {
        self.params
            .iter()
            .filter_map(|&(node, id)| self.grads[node].as_ref().map(|g| (id, g)))
    }

    /// Adds every parameter gradient into `store`. Repeated calls accumulate.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (id, g) in self.param_grads() {
            store.accumulate_grad(id, g)?;
        }
        Ok(())
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044_715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044_715 * x * x)
}

/// Softmax over the `true` entries of `mask`, exactly zero elsewhere.
///
/// Uses max subtraction over the selected entries.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if logits.len() != mask.len() {
        return Err(Error::Shape {
            op: "masked_softmax",
            lhs: vec![logits.len()],
            rhs: vec![mask.len()],
        });
    }
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&z, _)| z)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY && !mask.iter().any(|&m| m) {
        return Err(Error::EmptySubset);
    }
    let mut out: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&z, &m)| if m { (z - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    Ok(out)
}

fn layer_norm_row(x: &[f64], out: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - mean) * inv;
    }
    inv
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// A leaf that does not require a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf { param: None }, false)
    }

    /// A free leaf that requires a gradient but is not tied to a store.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf { param: None }, true)
    }

    /// Reads a parameter. Frozen parameters become constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.shared_value(id),
            op: Op::Leaf { param: Some(id) },
            requires_grad: store.is_trainable(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// Same value, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = Arc::clone(&self.nodes[v.0].value);
        self.nodes.push(Node {
            value,
            op: Op::Leaf { param: None },
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, Op::MatMul(a.0, b.0), rg))
    }

    /// `a · bᵀ`; with `b` a weight stored as `out×in` this is a linear map of the rows of `a`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, Op::MatMulT(a.0, b.0), rg))
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(ta.rows(), ta.cols(), data)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a.0, b.0), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a.0, b.0), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a.0, b.0), "mul", |x, y| x * y)
    }

    fn row_broadcast(
        &mut self,
        a: Var,
        row: Var,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(shape_err(name, ta, tr));
        }
        let cols = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tr.data()[i % cols]))
            .collect();
        let out = Tensor::new(ta.rows(), cols, data)?;
        let rg = self.rg(&[a.0, row.0]);
        Ok(self.push(out, op, rg))
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, Op::AddRow(a.0, row.0), "add_row", |x, y| x + y)
    }

    /// Multiplies every row of `a` elementwise by a `1×c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, Op::MulRow(a.0, row.0), "mul_row", |x, y| x * y)
    }

    /// Scales row `i` of `a` by `w[i]`, where `w` is `r×1`.
    pub fn scale_rows(&mut self, a: Var, w: Var) -> Result<Var> {
        let (ta, tw) = (self.value(a), self.value(w));
        if tw.cols() != 1 || tw.rows() != ta.rows() {
            return Err(shape_err("scale_rows", ta, tw));
        }
        let cols = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * tw.data()[i / cols])
            .collect();
        let out = Tensor::new(ta.rows(), cols, data)?;
        let rg = self.rg(&[a.0, w.0]);
        Ok(self.push(out, Op::ScaleRows(a.0, w.0), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a.0]);
        self.push(out, Op::Scale(a.0, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a.0]);
        self.push(out, Op::AddScalar(a.0), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a.0]);
        self.push(out, Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(&[a.0]);
        self.push(out, Op::Mean(a.0), rg)
    }

    /// Mean over the row axis: `r×c → 1×c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut acc = vec![0.0; t.cols()];
        for r in 0..t.rows() {
            for (o, v) in acc.iter_mut().zip(t.row_slice(r)) {
                *o += v;
            }
        }
        let n = t.rows() as f64;
        acc.iter_mut().for_each(|v| *v /= n);
        let rg = self.rg(&[a.0]);
        self.push(Tensor::row(acc), Op::MeanRows(a.0), rg)
    }

    /// Row-wise softmax restricted to the columns where `mask` is true.
    /// Masked-out columns are exactly zero and receive exactly zero gradient.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(a);
        if mask.len() != t.cols() {
            return Err(Error::Shape {
                op: "masked_softmax_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let mut data = Vec::with_capacity(t.len());
        for r in 0..t.rows() {
            data.extend(masked_softmax(t.row_slice(r), mask)?);
        }
        let out = Tensor::new(t.rows(), t.cols(), data)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(out, Op::Softmax(a.0), rg))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let mask = vec![true; self.value(a).cols()];
        self.masked_softmax_rows(a, &mask)
    }

    /// `ln(max(a, floor))`; clamped entries pass no gradient.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Var {
        let out = self.value(a).map(|x| x.max(floor).ln());
        let rg = self.rg(&[a.0]);
        self.push(out, Op::LogClamp(a.0, floor), rg)
    }

    /// Cross-entropy of `softmax(logits)` against class `target`, for a `1×C` row.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let t = self.value(logits);
        if t.rows() != 1 {
            return Err(Error::Invalid(format!(
                "cross_entropy expects a 1×C row, got {:?}",
                t.shape()
            )));
        }
        if target >= t.cols() {
            return Err(Error::OutOfRange {
                what: "class index",
                index: target,
                len: t.cols(),
            });
        }
        let z = t.data();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let out = Tensor::scalar(lse - z[target]);
        let rg = self.rg(&[logits.0]);
        Ok(self.push(out, Op::CrossEntropy(logits.0, target), rg))
    }

    /// Per-row normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(t.rows(), t.cols());
        let cols = t.cols();
        for r in 0..t.rows() {
            layer_norm_row(
                t.row_slice(r),
                &mut out.data_mut()[r * cols..(r + 1) * cols],
            );
        }
        let rg = self.rg(&[a.0]);
        self.push(out, Op::LayerNorm(a.0), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let rg = self.rg(&[a.0]);
        self.push(out, Op::Gelu(a.0), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if len == 0 || start + len > t.cols() {
            return Err(Error::OutOfRange {
                what: "column slice",
                index: start + len,
                len: t.cols(),
            });
        }
        let mut data = Vec::with_capacity(t.rows() * len);
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row_slice(r)[start..start + len]);
        }
        let out = Tensor::new(t.rows(), len, data)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(out, Op::SliceCols(a.0, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of nothing".into()))?;
        let rows = self.value(*first).rows();
        if let Some(bad) = parts.iter().find(|p| self.value(**p).rows() != rows) {
            return Err(shape_err(
                "concat_cols",
                self.value(*first),
                self.value(*bad),
            ));
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        let out = Tensor::new(rows, cols, data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(out, Op::ConcatCols(ids), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of nothing".into()))?;
        let cols = self.value(*first).cols();
        if let Some(bad) = parts.iter().find(|p| self.value(**p).cols() != cols) {
            return Err(shape_err(
                "concat_rows",
                self.value(*first),
                self.value(*bad),
            ));
        }
        let data: Vec<f64> = parts
            .iter()
            .flat_map(|p| self.value(*p).data().to_vec())
            .collect();
        let rows = data.len() / cols;
        let out = Tensor::new(rows, cols, data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(out, Op::ConcatRows(ids), rg))
    }

    /// Reverse pass from a `1×1` root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rt = self.value(root);
        if rt.len() != 1 {
            return Err(Error::NonScalarRoot(rt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Leaf { param: Some(id) } if n.requires_grad => Some((i, id)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    /// Reverse pass that also accumulates parameter gradients into `store`.
    pub fn backward_into(&self, root: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(root)?;
        grads.accumulate_into(store)?;
        Ok(grads)
    }

    fn send(&self, grads: &mut [Option<Tensor>], to: usize, g: Tensor) {
        if !self.nodes[to].requires_grad {
            return;
        }
        match &mut grads[to] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &self.nodes[i].value;
        let val = |j: usize| -> &Tensor { &self.nodes[j].value };
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                // out = a b
                if self.nodes[*a].requires_grad {
                    self.send(grads, *a, g.matmul_t(val(*b))?);
                }
                if self.nodes[*b].requires_grad {
                    self.send(grads, *b, val(*a).t_matmul(g)?);
                }
            }
            Op::MatMulT(a, b) => {
                // out = a bᵀ
                if self.nodes[*a].requires_grad {
                    self.send(grads, *a, g.matmul(val(*b))?);
                }
                if self.nodes[*b].requires_grad {
                    self.send(grads, *b, g.t_matmul(val(*a))?);
                }
            }
            Op::Add(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.nodes[*a].requires_grad {
                    self.send(grads, *a, hadamard(g, val(*b)));
                }
                if self.nodes[*b].requires_grad {
                    self.send(grads, *b, hadamard(g, val(*a)));
                }
            }
            Op::AddRow(a, row) => {
                self.send(grads, *a, g.clone());
                if self.nodes[*row].requires_grad {
                    self.send(grads, *row, column_sums(g));
                }
            }
            Op::MulRow(a, row) => {
                let (ta, tr) = (val(*a), val(*row));
                let cols = ta.cols();
                if self.nodes[*a].requires_grad {
                    let d = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(k, v)| v * tr.data()[k % cols])
                        .collect();
                    self.send(grads, *a, Tensor::new(ta.rows(), cols, d)?);
                }
                if self.nodes[*row].requires_grad {
                    self.send(grads, *row, column_sums(&hadamard(g, ta)));
                }
            }
            Op::ScaleRows(a, w) => {
                let (ta, tw) = (val(*a), val(*w));
                let cols = ta.cols();
                if self.nodes[*a].requires_grad {
                    let d = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(k, v)| v * tw.data()[k / cols])
                        .collect();
                    self.send(grads, *a, Tensor::new(ta.rows(), cols, d)?);
                }
                if self.nodes[*w].requires_grad {
                    let d = (0..ta.rows())
                        .map(|r| {
                            g.row_slice(r)
                                .iter()
                                .zip(ta.row_slice(r))
                                .map(|(x, y)| x * y)
                                .sum()
                        })
                        .collect();
                    self.send(grads, *w, Tensor::new(ta.rows(), 1, d)?);
                }
            }
            Op::Scale(a, c) => self.send(grads, *a, g.map(|v| v * c)),
            Op::AddScalar(a) => self.send(grads, *a, g.clone()),
            Op::Sum(a) => {
                let t = val(*a);
                self.send(grads, *a, Tensor::filled(t.rows(), t.cols(), g.item()));
            }
            Op::Mean(a) => {
                let t = val(*a);
                self.send(
                    grads,
                    *a,
                    Tensor::filled(t.rows(), t.cols(), g.item() / t.len() as f64),
                );
            }
            Op::MeanRows(a) => {
                let t = val(*a);
                let n = t.rows() as f64;
                let mut d = Vec::with_capacity(t.len());
                for _ in 0..t.rows() {
                    d.extend(g.data().iter().map(|v| v / n));
                }
                self.send(grads, *a, Tensor::new(t.rows(), t.cols(), d)?);
            }
            Op::Softmax(a) => {
                // dx = y ⊙ (g − Σ y g); masked entries have y = 0.
                let cols = out.cols();
                let mut d = Vec::with_capacity(out.len());
                for r in 0..out.rows() {
                    let y = out.row_slice(r);
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    d.extend(y.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                }
                self.send(grads, *a, Tensor::new(out.rows(), cols, d)?);
            }
            Op::LogClamp(a, floor) => {
                let t = val(*a);
                let d = t
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| if x > *floor { gv / x } else { 0.0 })
                    .collect();
                self.send(grads, *a, Tensor::new(t.rows(), t.cols(), d)?);
            }
            Op::CrossEntropy(a, target) => {
                let t = val(*a);
                let mask = vec![true; t.cols()];
                let mut p = masked_softmax(t.data(), &mask)?;
                p[*target] -= 1.0;
                let gv = g.item();
                p.iter_mut().for_each(|v| *v *= gv);
                self.send(grads, *a, Tensor::row(p));
            }
            Op::LayerNorm(a) => {
                let t = val(*a);
                let cols = t.cols();
                let n = cols as f64;
                let mut d = Vec::with_capacity(t.len());
                let mut y = vec![0.0; cols];
                for r in 0..t.rows() {
                    let inv = layer_norm_row(t.row_slice(r), &mut y);
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let mg = gr.iter().sum::<f64>() / n;
                    let mgy = gr.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / n;
                    d.extend(gr.iter().zip(&y).map(|(gv, yv)| inv * (gv - mg - yv * mgy)));
                }
                self.send(grads, *a, Tensor::new(t.rows(), cols, d)?);
            }
            Op::Gelu(a) => {
                let t = val(*a);
                let d = t
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| gv * gelu_grad(x))
                    .collect();
                self.send(grads, *a, Tensor::new(t.rows(), t.cols(), d)?);
            }
            Op::SliceCols(a, start) => {
                let t = val(*a);
                let mut d = Tensor::zeros(t.rows(), t.cols());
                let len = g.cols();
                for r in 0..t.rows() {
                    for c in 0..len {
                        d.set(r, start + c, g.get(r, c));
                    }
                }
                self.send(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let t = val(p);
                    if self.nodes[p].requires_grad {
                        let mut d = Vec::with_capacity(t.len());
                        for r in 0..t.rows() {
                            d.extend_from_slice(&g.row_slice(r)[offset..offset + t.cols()]);
                        }
                        self.send(grads, p, Tensor::new(t.rows(), t.cols(), d)?);
                    }
                    offset += t.cols();
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let t = val(p);
                    if self.nodes[p].requires_grad {
                        let d = g.data()[offset..offset + t.len()].to_vec();
                        self.send(grads, p, Tensor::new(t.rows(), t.cols(), d)?);
                    }
                    offset += t.len();
                }
            }
        }
        Ok(())
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    let d = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.rows(), a.cols(), d).expect("hadamard of same-shape tensors")
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut acc = vec![0.0; g.cols()];
    for r in 0..g.rows() {
        for (o, v) in acc.iter_mut().zip(g.row_slice(r)) {
            *o += v;
        }
    }
    Tensor::row(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn masked_softmax_examples() {
        let u = masked_softmax(&[0.0; 4], &[true; 4]).unwrap();
        assert!(u.iter().all(|&v| v == 0.25));

        let two = masked_softmax(&[1.0, 2.0, 3.0, 4.0], &[false, true, false, true]).unwrap();
        let e2 = 2f64.exp();
        assert_eq!(two[0], 0.0);
        assert_eq!(two[2], 0.0);
        assert!(close(two[1], 1.0 / (1.0 + e2), 1e-15));
        assert!(close(two[3], e2 / (1.0 + e2), 1e-15));
        assert!(close(two[1], 0.1192, 1e-4) && close(two[3], 0.8808, 1e-4));

        let single = masked_softmax(&[5.0, 100.0, -3.0], &[true, false, false]).unwrap();
        assert_eq!(single, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn masked_softmax_rejects_empty_subset() {
        let err = masked_softmax(&[1.0, 2.0], &[false, false]).unwrap_err();
        assert_eq!(err.to_string(), "empty routing subset");
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::from_rows(&[vec![1.0, -2.0], vec![3.0, 4.0]]).unwrap());
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn backward_of_dot_is_other_factor() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::row(vec![1.0, 2.0, 3.0]));
        let y = tape.variable(Tensor::row(vec![-4.0, 0.5, 7.0]));
        let d = tape.matmul_t(x, y).unwrap();
        let g = tape.backward(d).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[-4.0, 0.5, 7.0]);
        assert_eq!(g.wrt(y).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let z = vec![0.3, -1.2, 2.0, 0.0];
        let mut tape = Tape::new();
        let zv = tape.variable(Tensor::row(z.clone()));
        let loss = tape.cross_entropy(zv, 2).unwrap();
        let g = tape.backward(loss).unwrap();
        let mut expect = masked_softmax(&z, &[true; 4]).unwrap();
        expect[2] -= 1.0;
        for (a, b) in g.wrt(zv).unwrap().data().iter().zip(&expect) {
            assert!(close(*a, *b, 1e-15));
        }
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn masked_columns_get_exactly_zero_gradient() {
        let mut tape = Tape::new();
        let z =
            tape.variable(Tensor::from_rows(&[vec![0.1, 2.0, -1.0], vec![1.5, 0.2, 0.3]]).unwrap());
        let s = tape.masked_softmax_rows(z, &[true, false, true]).unwrap();
        let w =
            tape.constant(Tensor::from_rows(&[vec![1.0, 5.0, -2.0], vec![0.3, 9.0, 4.0]]).unwrap());
        let prod = tape.mul(s, w).unwrap();
        let loss = tape.sum(prod);
        let g = tape.backward(loss).unwrap();
        let gz = g.wrt(z).unwrap();
        assert_eq!(gz.get(0, 1), 0.0);
        assert_eq!(gz.get(1, 1), 0.0);
        assert!(gz.get(0, 0) != 0.0);
    }

    #[test]
    fn repeated_backward_accumulates_into_store() {
        let mut store = ParamStore::new();
        let id = store
            .insert("w", Tensor::row(vec![2.0, 3.0]), true)
            .unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let s = tape.sum(w);
        tape.backward_into(s, &mut store).unwrap();
        tape.backward_into(s, &mut store).unwrap();
        assert_eq!(store.grad(id).unwrap().data(), &[2.0, 2.0]);
    }
}
