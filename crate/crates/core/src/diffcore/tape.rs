use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
///
/// A handle is only valid on the tape (and tape generation) that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    tape: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Sigmoid,
    Tanh,
    Relu,
    LeakyRelu { slope: f64 },
}

impl Activation {
    pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

    pub fn leaky_relu() -> Self {
        Activation::LeakyRelu {
            slope: Self::DEFAULT_LEAKY_SLOPE,
        }
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    /// Elementwise (Hadamard) product.
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    MeanAbs,
    MeanSq,
}

/// Coarse operation kind, used to inspect what a forward pass recorded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Binary,
    Activation,
    Softmax,
    Reduce,
    Affine,
    Transpose,
    RowSums,
    Powf,
    ConcatCols,
    SliceCols,
    GatherRows,
    Reshape,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Col,
    Scalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Binary {
        kind: BinaryOp,
        a: usize,
        b: usize,
        bcast: Broadcast,
    },
    Activation {
        kind: Activation,
        input: usize,
    },
    Softmax(usize),
    Reduce {
        kind: Reduction,
        input: usize,
    },
    Affine {
        input: usize,
        scale: f64,
    },
    Transpose(usize),
    RowSums(usize),
    Powf {
        input: usize,
        exponent: f64,
    },
    ConcatCols(Vec<usize>),
    SliceCols {
        input: usize,
        start: usize,
    },
    GatherRows {
        input: usize,
        index: Vec<usize>,
    },
    Reshape(usize),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Binary { .. } => OpKind::Binary,
            Op::Activation { .. } => OpKind::Activation,
            Op::Softmax(_) => OpKind::Softmax,
            Op::Reduce { .. } => OpKind::Reduce,
            Op::Affine { .. } => OpKind::Affine,
            Op::Transpose(_) => OpKind::Transpose,
            Op::RowSums(_) => OpKind::RowSums,
            Op::Powf { .. } => OpKind::Powf,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::Reshape(_) => OpKind::Reshape,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation tape.
///
/// Every operation appends a node whose inputs were recorded earlier, so the
/// node list is always in topological order. A tape is not `Sync` by intent:
/// each forward pass owns its own tape.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    params: Vec<usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded nodes of the given kind.
    pub fn count(&self, kind: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    /// Drops every node and invalidates all outstanding handles.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Contract(
                "variable does not belong to this tape".into(),
            ));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { index, tape: self.id }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Records a copy of `t`. Tensors carrying a gradient buffer become trainable
    /// leaves whose gradients are reported by [`Tape::backward`].
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let requires_grad = t.requires_grad();
        let v = self.push(t.detached(), Op::Leaf, requires_grad);
        if requires_grad {
            self.params.push(v.index);
        }
        v
    }

    /// Records an owned constant (never differentiated).
    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = if t.requires_grad() { t.detached() } else { t };
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        let i = self.check(v)?;
        Ok(&self.nodes[i].value)
    }

    pub fn shape(&self, v: Var) -> Result<(usize, usize)> {
        Ok(self.value(v)?.shape())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if av.cols() != bv.rows() {
            return Err(Error::Shape {
                op: "matmul",
                lhs: av.shape(),
                rhs: bv.shape(),
            });
        }
        let out = matmul_raw(av, bv);
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, Op::MatMul(ia, ib), rg))
    }

    /// Elementwise binary op. `b` may match `a`'s shape or broadcast as a
    /// 1×cols row, a rows×1 column, or a 1×1 scalar.
    pub fn elementwise(&mut self, kind: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (r, c) = av.shape();
        let bcast = if bv.shape() == (r, c) {
            Broadcast::Same
        } else if bv.shape() == (1, 1) {
            Broadcast::Scalar
        } else if bv.shape() == (1, c) {
            Broadcast::Row
        } else if bv.shape() == (r, 1) {
            Broadcast::Col
        } else {
            return Err(Error::Shape {
                op: "elementwise",
                lhs: av.shape(),
                rhs: bv.shape(),
            });
        };
        let f: fn(f64, f64) -> f64 = match kind {
            BinaryOp::Add => |x, y| x + y,
            BinaryOp::Sub => |x, y| x - y,
            BinaryOp::Mul => |x, y| x * y,
        };
        let mut out = Tensor::zeros(r, c);
        {
            let (ad, bd, od) = (av.data(), bv.data(), out.data_mut());
            for i in 0..r {
                for j in 0..c {
                    let k = i * c + j;
                    od[k] = f(ad[k], bd[bindex(bcast, i, j, c)]);
                }
            }
        }
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, Op::Binary { kind, a: ia, b: ib, bcast }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Mul, a, b)
    }

    pub fn activation(&mut self, kind: Activation, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        if kind == Activation::Identity {
            return Ok(a);
        }
        let out = self.nodes[ia].value.map(|x| kind.apply(x));
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Activation { kind, input: ia }, rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.activation(Activation::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.activation(Activation::Tanh, a)
    }

    /// Row-wise softmax, stabilised by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = softmax_rows_raw(&self.nodes[ia].value);
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Softmax(ia), rg))
    }

    pub fn reduce(&mut self, kind: Reduction, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let av = &self.nodes[ia].value;
        if av.is_empty() {
            return Err(Error::Domain("reduction over an empty tensor".into()));
        }
        let n = av.len() as f64;
        let d = av.data();
        let value = match kind {
            Reduction::Sum => d.iter().sum(),
            Reduction::Mean => d.iter().sum::<f64>() / n,
            Reduction::MeanAbs => d.iter().map(|x| x.abs()).sum::<f64>() / n,
            Reduction::MeanSq => d.iter().map(|x| x * x).sum::<f64>() / n,
        };
        let rg = self.rg(ia);
        Ok(self.push(Tensor::scalar(value), Op::Reduce { kind, input: ia }, rg))
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(|x| scale * x + shift);
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Affine { input: ia, scale }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.affine(a, factor, 0.0)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.transpose();
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Transpose(ia), rg))
    }

    /// Sums each row into an rows×1 column.
    pub fn row_sums(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let av = &self.nodes[ia].value;
        let sums = (0..av.rows()).map(|r| av.row_slice(r).iter().sum()).collect();
        let rg = self.rg(ia);
        Ok(self.push(Tensor::column(sums), Op::RowSums(ia), rg))
    }

    /// Elementwise power. Non-integer exponents require strictly positive input.
    pub fn powf(&mut self, a: Var, exponent: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let av = &self.nodes[ia].value;
        if exponent.fract() != 0.0 && av.data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Domain(format!(
                "powf({exponent}) requires positive input"
            )));
        }
        let out = av.map(|x| x.powf(exponent));
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Powf { input: ia, exponent }, rg))
    }

    /// Concatenates tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Domain("concat of zero tensors".into()));
        }
        let idx = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<Vec<_>>>()?;
        let rows = self.nodes[idx[0]].value.rows();
        for &i in &idx[1..] {
            if self.nodes[i].value.rows() != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.nodes[idx[0]].value.shape(),
                    rhs: self.nodes[i].value.shape(),
                });
            }
        }
        let cols: usize = idx.iter().map(|&i| self.nodes[i].value.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &i in &idx {
                data.extend_from_slice(self.nodes[i].value.row_slice(r));
            }
        }
        let rg = idx.iter().any(|&i| self.rg(i));
        let out = Tensor::new(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatCols(idx), rg))
    }

    /// Columns `start..start + len` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let av = &self.nodes[ia].value;
        if start + len > av.cols() || len == 0 {
            return Err(Error::Domain(format!(
                "column slice {start}..{} out of range for {:?}",
                start + len,
                av.shape()
            )));
        }
        let mut data = Vec::with_capacity(av.rows() * len);
        for r in 0..av.rows() {
            data.extend_from_slice(&av.row_slice(r)[start..start + len]);
        }
        let out = Tensor::new(av.rows(), len, data)?;
        let rg = self.rg(ia);
        Ok(self.push(out, Op::SliceCols { input: ia, start }, rg))
    }

    /// Output row `k` is input row `index[k]`; rows may repeat.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let av = &self.nodes[ia].value;
        if let Some(&bad) = index.iter().find(|&&r| r >= av.rows()) {
            return Err(Error::Domain(format!(
                "row index {bad} out of range for {:?}",
                av.shape()
            )));
        }
        let mut data = Vec::with_capacity(index.len() * av.cols());
        for &r in index {
            data.extend_from_slice(av.row_slice(r));
        }
        let out = Tensor::new(index.len(), av.cols(), data)?;
        let rg = self.rg(ia);
        Ok(self.push(
            out,
            Op::GatherRows {
                input: ia,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Reinterprets the row-major data under a new shape of equal size.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let av = &self.nodes[ia].value;
        if av.len() != rows * cols {
            return Err(Error::Shape {
                op: "reshape",
                lhs: av.shape(),
                rhs: (rows, cols),
            });
        }
        let out = Tensor::new(rows, cols, av.data().to_vec())?;
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Reshape(ia), rg))
    }

    /// Reverse sweep from a scalar loss.
    ///
    /// Returns the gradient of every trainable leaf in registration order and
    /// clears the tape, invalidating all handles.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let il = self.check(loss)?;
        if self.nodes[il].value.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward requires a 1x1 loss, got {:?}",
                self.nodes[il].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; il + 1];
        grads[il] = Some(vec![1.0]);

        for i in (0..=il).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    if self.rg(*a) {
                        // dA = G · Bᵀ
                        let mut da = vec![0.0; m * k];
                        let bd = bv.data();
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for kk in 0..k {
                                let brow = &bd[kk * n..(kk + 1) * n];
                                da[r * k + kk] = dot(grow, brow);
                            }
                        }
                        accumulate(&mut grads[*a], da);
                    }
                    if self.rg(*b) {
                        // dB = Aᵀ · G
                        let mut db = vec![0.0; k * n];
                        let ad = av.data();
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for kk in 0..k {
                                let s = ad[r * k + kk];
                                if s != 0.0 {
                                    let dst = &mut db[kk * n..(kk + 1) * n];
                                    for (d, &gv) in dst.iter_mut().zip(grow) {
                                        *d += s * gv;
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads[*b], db);
                    }
                }
                Op::Binary { kind, a, b, bcast } => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let (r, c) = av.shape();
                    if self.rg(*a) {
                        let da: Vec<f64> = match kind {
                            BinaryOp::Add | BinaryOp::Sub => g.clone(),
                            BinaryOp::Mul => (0..r * c)
                                .map(|k| g[k] * bv.data()[bindex(*bcast, k / c, k % c, c)])
                                .collect(),
                        };
                        accumulate(&mut grads[*a], da);
                    }
                    if self.rg(*b) {
                        let mut db = vec![0.0; bv.len()];
                        for k in 0..r * c {
                            let contrib = match kind {
                                BinaryOp::Add => g[k],
                                BinaryOp::Sub => -g[k],
                                BinaryOp::Mul => g[k] * av.data()[k],
                            };
                            db[bindex(*bcast, k / c, k % c, c)] += contrib;
                        }
                        accumulate(&mut grads[*b], db);
                    }
                }
                Op::Activation { kind, input } => {
                    let x = self.nodes[*input].value.data();
                    let y = node.value.data();
                    let dx = (0..g.len())
                        .map(|k| g[k] * kind.derivative(x[k], y[k]))
                        .collect();
                    accumulate(&mut grads[*input], dx);
                }
                Op::Softmax(input) => {
                    let y = &node.value;
                    let c = y.cols();
                    let mut dx = vec![0.0; y.len()];
                    for r in 0..y.rows() {
                        let yr = y.row_slice(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let s = dot(gr, yr);
                        for j in 0..c {
                            dx[r * c + j] = yr[j] * (gr[j] - s);
                        }
                    }
                    accumulate(&mut grads[*input], dx);
                }
                Op::Reduce { kind, input } => {
                    let x = self.nodes[*input].value.data();
                    let n = x.len() as f64;
                    let g0 = g[0];
                    let dx = match kind {
                        Reduction::Sum => vec![g0; x.len()],
                        Reduction::Mean => vec![g0 / n; x.len()],
                        Reduction::MeanAbs => x
                            .iter()
                            .map(|&v| {
                                let s = if v > 0.0 {
                                    1.0
                                } else if v < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                };
                                g0 * s / n
                            })
                            .collect(),
                        Reduction::MeanSq => x.iter().map(|&v| g0 * 2.0 * v / n).collect(),
                    };
                    accumulate(&mut grads[*input], dx);
                }
                Op::Affine { input, scale } => {
                    let dx = g.iter().map(|v| v * scale).collect();
                    accumulate(&mut grads[*input], dx);
                }
                Op::Transpose(input) => {
                    let (r, c) = node.value.shape();
                    let gt = Tensor::new(r, c, g)?.transpose().into_data();
                    accumulate(&mut grads[*input], gt);
                }
                Op::RowSums(input) => {
                    let c = self.nodes[*input].value.cols();
                    let dx = g
                        .iter()
                        .flat_map(|&gi| std::iter::repeat_n(gi, c))
                        .collect();
                    accumulate(&mut grads[*input], dx);
                }
                Op::Powf { input, exponent } => {
                    let x = self.nodes[*input].value.data();
                    let dx = (0..g.len())
                        .map(|k| g[k] * exponent * x[k].powf(exponent - 1.0))
                        .collect();
                    accumulate(&mut grads[*input], dx);
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols();
                    let rows = node.value.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.nodes[p].value.cols();
                        if self.rg(p) {
                            let mut dp = Vec::with_capacity(rows * pc);
                            for r in 0..rows {
                                dp.extend_from_slice(
                                    &g[r * total + offset..r * total + offset + pc],
                                );
                            }
                            accumulate(&mut grads[p], dp);
                        }
                        offset += pc;
                    }
                }
                Op::SliceCols { input, start } => {
                    let (ir, ic) = self.nodes[*input].value.shape();
                    let len = node.value.cols();
                    let mut dx = vec![0.0; ir * ic];
                    for r in 0..ir {
                        dx[r * ic + start..r * ic + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    accumulate(&mut grads[*input], dx);
                }
                Op::GatherRows { input, index } => {
                    let (ir, ic) = self.nodes[*input].value.shape();
                    let mut dx = vec![0.0; ir * ic];
                    for (k, &src) in index.iter().enumerate() {
                        let dst = &mut dx[src * ic..(src + 1) * ic];
                        for (d, &gv) in dst.iter_mut().zip(&g[k * ic..(k + 1) * ic]) {
                            *d += gv;
                        }
                    }
                    accumulate(&mut grads[*input], dx);
                }
                Op::Reshape(input) => {
                    accumulate(&mut grads[*input], g);
                }
            }
        }

        let mut out = Vec::with_capacity(self.params.len());
        for &p in &self.params {
            let shape = self.nodes[p].value.shape();
            let data = match p <= il {
                true => grads[p].take(),
                false => None,
            }
            .unwrap_or_else(|| vec![0.0; shape.0 * shape.1]);
            out.push(Tensor::new(shape.0, shape.1, data)?);
        }
        self.clear();
        Ok(Gradients { grads: out })
    }
}

/// Gradients of the trainable leaves of one backward sweep, in the order the
/// leaves were recorded.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&Tensor> {
        self.grads.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.iter()
    }

    /// Adds each gradient into the matching tensor's gradient buffer.
    pub fn accumulate_into<'a>(
        &self,
        targets: impl IntoIterator<Item = &'a mut Tensor>,
    ) -> Result<()> {
        let mut n = 0;
        for (t, g) in targets.into_iter().zip(&self.grads) {
            if t.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "accumulate_into",
                    lhs: t.shape(),
                    rhs: g.shape(),
                });
            }
            let buf = t.grad_mut().ok_or_else(|| {
                Error::Contract("gradient target does not require grad".into())
            })?;
            for (b, v) in buf.iter_mut().zip(g.data()) {
                *b += v;
            }
            n += 1;
        }
        if n != self.grads.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} targets",
                self.grads.len(),
                n
            )));
        }
        Ok(())
    }
}

#[inline]
fn bindex(b: Broadcast, i: usize, j: usize, cols: usize) -> usize {
    match b {
        Broadcast::Same => i * cols + j,
        Broadcast::Row => j,
        Broadcast::Col => i,
        Broadcast::Scalar => 0,
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => *slot = Some(delta),
    }
}

pub(crate) fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(m, n);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for r in 0..m {
        let orow = &mut od[r * n..(r + 1) * n];
        for kk in 0..k {
            let s = ad[r * k + kk];
            if s == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&bd[kk * n..(kk + 1) * n]) {
                *o += s * bv;
            }
        }
    }
    out
}

pub(crate) fn softmax_rows_raw(a: &Tensor) -> Tensor {
    let mut out = a.clone();
    let c = a.cols();
    for row in out.data_mut().chunks_mut(c.max(1)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
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
