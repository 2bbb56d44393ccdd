//! Tape-based reverse-mode differentiation over dense f64 tensors.
//!
//! A `Tape` records the forward computation as a flat list of nodes; `backward`
//! replays it in reverse, accumulating gradients into the `ParamSet` blocks
//! referenced by `Param` nodes. Graphs are rebuilt per task and stay small, so
//! the tape is a plain arena with no interior mutability.

use crate::error::{Error, Result};
use crate::numkernel::params::ParamSet;
use crate::numkernel::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param(usize),
    SelectRow { src: NodeId, row: usize },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    ConcatVec(Vec<NodeId>),
    StackRows(Vec<NodeId>),
    MeanRows(NodeId),
    SumAll(NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Softplus(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    Neg(NodeId),
    LogAbs(NodeId),
    AddConst(NodeId),
    MulConst(NodeId, f64),
    PowConst(NodeId, f64),
    Gather { src: NodeId, idx: Vec<usize> },
    Scatter { src: NodeId, idx: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// How two operand shapes line up for an elementwise binary op.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    ScalarLhs,
    ScalarRhs,
    /// lhs is [n, d], rhs is [d]: rhs repeated across rows.
    RowRhs,
}

fn classify(lhs: &[usize], rhs: &[usize], op: &'static str) -> Result<(Broadcast, Vec<usize>)> {
    if lhs == rhs {
        return Ok((Broadcast::Same, lhs.to_vec()));
    }
    let ln: usize = lhs.iter().product();
    let rn: usize = rhs.iter().product();
    if rn == 1 && rhs.len() <= 1 {
        return Ok((Broadcast::ScalarRhs, lhs.to_vec()));
    }
    if ln == 1 && lhs.len() <= 1 {
        return Ok((Broadcast::ScalarLhs, rhs.to_vec()));
    }
    if lhs.len() == 2 && rhs.len() == 1 && lhs[1] == rhs[0] {
        return Ok((Broadcast::RowRhs, lhs.to_vec()));
    }
    Err(Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>) -> NodeId {
        self.nodes.push(Node { op, shape, values });
        NodeId(self.nodes.len() - 1)
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn scalar_value(&self, id: NodeId) -> Result<f64> {
        let n = &self.nodes[id.0];
        if n.values.len() == 1 {
            Ok(n.values[0])
        } else {
            Err(Error::Contract(format!(
                "expected scalar node, got shape {:?}",
                n.shape
            )))
        }
    }

    pub fn tensor(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor::new(n.shape.clone(), n.values.clone()).expect("node is well-formed")
    }

    // ── leaves ──────────────────────────────────────────────────────

    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.push(Op::Const, t.shape().to_vec(), t.values().to_vec())
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.push(Op::Const, vec![], vec![v])
    }

    pub fn constant_vector(&mut self, v: &[f64]) -> NodeId {
        self.push(Op::Const, vec![v.len()], v.to_vec())
    }

    pub fn param(&mut self, params: &ParamSet, idx: usize) -> NodeId {
        let b = params.get(idx);
        self.push(
            Op::Param(idx),
            b.value.shape().to_vec(),
            b.value.values().to_vec(),
        )
    }

    pub fn param_by_name(&mut self, params: &ParamSet, name: &str) -> Result<NodeId> {
        let idx = params.index_of(name)?;
        Ok(self.param(params, idx))
    }

    // ── structural ops ──────────────────────────────────────────────

    /// One row of a rank-2 node as a rank-1 vector.
    pub fn select_row(&mut self, src: NodeId, row: usize) -> Result<NodeId> {
        let n = &self.nodes[src.0];
        if n.shape.len() != 2 {
            return Err(Error::Contract(format!(
                "select_row on non-matrix shape {:?}",
                n.shape
            )));
        }
        let (rows, cols) = (n.shape[0], n.shape[1]);
        if row >= rows {
            return Err(Error::Contract(format!("row {row} out of {rows}")));
        }
        let values = n.values[row * cols..(row + 1) * cols].to_vec();
        Ok(self.push(Op::SelectRow { src, row }, vec![cols], values))
    }

    pub fn concat_vec(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut values = Vec::new();
        for &p in parts {
            let n = &self.nodes[p.0];
            if n.shape.len() > 1 {
                return Err(Error::Contract(format!(
                    "concat_vec needs rank<=1 parts, got {:?}",
                    n.shape
                )));
            }
            values.extend_from_slice(&n.values);
        }
        let len = values.len();
        Ok(self.push(Op::ConcatVec(parts.to_vec()), vec![len], values))
    }

    /// Stack equal-length vectors into an [n, d] matrix.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        if rows.is_empty() {
            return Err(Error::Contract("stack_rows on empty set".into()));
        }
        let d = self.nodes[rows[0].0].values.len();
        let mut values = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            let n = &self.nodes[r.0];
            if n.shape.len() != 1 || n.values.len() != d {
                return Err(Error::ShapeMismatch {
                    op: "stack_rows",
                    lhs: vec![d],
                    rhs: n.shape.clone(),
                });
            }
            values.extend_from_slice(&n.values);
        }
        Ok(self.push(Op::StackRows(rows.to_vec()), vec![rows.len(), d], values))
    }

    pub fn gather(&mut self, src: NodeId, idx: &[usize]) -> Result<NodeId> {
        let n = &self.nodes[src.0];
        if n.shape.len() != 1 {
            return Err(Error::Contract("gather needs a vector".into()));
        }
        let mut values = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= n.values.len() {
                return Err(Error::Contract(format!("gather index {i} out of range")));
            }
            values.push(n.values[i]);
        }
        Ok(self.push(
            Op::Gather {
                src,
                idx: idx.to_vec(),
            },
            vec![idx.len()],
            values,
        ))
    }

    /// Place the elements of `src` at positions `idx` of a zero vector of length `len`.
    pub fn scatter(&mut self, src: NodeId, idx: &[usize], len: usize) -> Result<NodeId> {
        let n = &self.nodes[src.0];
        if n.shape.len() != 1 || n.values.len() != idx.len() {
            return Err(Error::Contract("scatter src/idx length mismatch".into()));
        }
        let mut values = vec![0.0; len];
        for (&i, &v) in idx.iter().zip(&n.values) {
            if i >= len {
                return Err(Error::Contract(format!("scatter index {i} out of {len}")));
            }
            values[i] = v;
        }
        Ok(self.push(
            Op::Scatter {
                src,
                idx: idx.to_vec(),
            },
            vec![len],
            values,
        ))
    }

    // ── binary elementwise ──────────────────────────────────────────

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        ctor: impl Fn(NodeId, NodeId) -> Op,
    ) -> Result<NodeId> {
        let (bc, shape) = classify(&self.nodes[a.0].shape, &self.nodes[b.0].shape, name)?;
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let values: Vec<f64> = match bc {
            Broadcast::Same => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::ScalarRhs => av.iter().map(|&x| f(x, bv[0])).collect(),
            Broadcast::ScalarLhs => bv.iter().map(|&y| f(av[0], y)).collect(),
            Broadcast::RowRhs => {
                let d = bv.len();
                av.iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, bv[i % d]))
                    .collect()
            }
        };
        Ok(self.push(ctor(a, b), shape, values))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div)
    }

    // ── matmul ──────────────────────────────────────────────────────

    /// [n,k] x [k,m] -> [n,m]; a rank-1 lhs of length k yields a rank-1 [m].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let ashape = self.nodes[a.0].shape.clone();
        let bshape = self.nodes[b.0].shape.clone();
        let (n, k, vec_lhs) = match ashape.len() {
            1 => (1, ashape[0], true),
            2 => (ashape[0], ashape[1], false),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: ashape,
                    rhs: bshape,
                })
            }
        };
        if bshape.len() != 2 || bshape[0] != k {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ashape,
                rhs: bshape,
            });
        }
        let m = bshape[1];
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let mut values = vec![0.0; n * m];
        for i in 0..n {
            for l in 0..k {
                let x = av[i * k + l];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[l * m..(l + 1) * m];
                let orow = &mut values[i * m..(i + 1) * m];
                for (o, &y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let shape = if vec_lhs { vec![m] } else { vec![n, m] };
        Ok(self.push(Op::MatMul(a, b), shape, values))
    }

    // ── reductions ──────────────────────────────────────────────────

    /// Mean over axis 0 of an [n, d] matrix -> [d]. Summation is sequential
    /// over storage order so results are bit-reproducible.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let n = &self.nodes[a.0];
        if n.shape.len() != 2 || n.shape[0] == 0 {
            return Err(Error::Contract(format!(
                "mean_rows needs a non-empty matrix, got {:?}",
                n.shape
            )));
        }
        let (rows, cols) = (n.shape[0], n.shape[1]);
        let mut values = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                values[c] += n.values[r * cols + c];
            }
        }
        for v in &mut values {
            *v /= rows as f64;
        }
        Ok(self.push(Op::MeanRows(a), vec![cols], values))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].values.iter().sum();
        self.push(Op::SumAll(a), vec![], vec![s])
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.nodes[a.0].values.len();
        if n == 0 {
            return Err(Error::Contract("mean_all on empty tensor".into()));
        }
        let s = self.sum_all(a);
        Ok(self.mul_const(s, 1.0 / n as f64))
    }

    // ── unary elementwise ───────────────────────────────────────────

    fn unary(
        &mut self,
        a: NodeId,
        f: impl Fn(f64) -> f64,
        ctor: impl Fn(NodeId) -> Op,
    ) -> NodeId {
        let n = &self.nodes[a.0];
        let values: Vec<f64> = n.values.iter().map(|&x| f(x)).collect();
        let shape = n.shape.clone();
        self.push(ctor(a), shape, values)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(0.0), Op::Relu)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::tanh, Op::Tanh)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, Op::Exp)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        // Stable ln(1+e^x) = max(x,0) + ln(1+e^{-|x|}).
        self.unary(a, |x| x.max(0.0) + (-x.abs()).exp().ln_1p(), Op::Softplus)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::sqrt, Op::Sqrt)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x * x, Op::Square)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| -x, Op::Neg)
    }

    /// ln|x|; gradient 1/x.
    pub fn log_abs(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.abs().ln(), Op::LogAbs)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |x| x + c, Op::AddConst)
    }

    pub fn mul_const(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |x| x * c, |n| Op::MulConst(n, c))
    }

    /// x^p for x > 0.
    pub fn pow_const(&mut self, a: NodeId, p: f64) -> NodeId {
        self.unary(a, |x| x.powf(p), |n| Op::PowConst(n, p))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar seed; gradients of `Param` nodes are
    /// accumulated into the matching `ParamSet` blocks.
    pub fn backward(&self, seed: NodeId, params: &mut ParamSet) -> Result<()> {
        if !self.nodes[seed.0].shape.is_empty() {
            return Err(Error::Contract(format!(
                "backward seed must be scalar, got shape {:?}",
                self.nodes[seed.0].shape
            )));
        }
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); seed.0 + 1];
        grads[seed.0] = vec![1.0];
        for i in (0..=seed.0).rev() {
            if grads[i].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut grads[i]);
            let node = &self.nodes[i];
            macro_rules! acc {
                ($id:expr, $contrib:expr) => {{
                    let id: NodeId = $id;
                    if grads[id.0].is_empty() {
                        grads[id.0] = vec![0.0; self.nodes[id.0].values.len()];
                    }
                    let contrib: &dyn Fn(&mut Vec<f64>) = &$contrib;
                    contrib(&mut grads[id.0]);
                }};
            }
            match &node.op {
                Op::Const => {}
                Op::Param(idx) => params.accumulate_grad(*idx, &g),
                Op::SelectRow { src, row } => {
                    let cols = node.values.len();
                    acc!(*src, |dst: &mut Vec<f64>| {
                        for (c, &gv) in g.iter().enumerate() {
                            dst[row * cols + c] += gv;
                        }
                    });
                }
                Op::Add(a, b) => {
                    let (bc, _) =
                        classify(&self.nodes[a.0].shape, &self.nodes[b.0].shape, "add")?;
                    self.acc_binary_linear(&mut grads, *a, *b, bc, &g, 1.0, 1.0);
                }
                Op::Sub(a, b) => {
                    let (bc, _) =
                        classify(&self.nodes[a.0].shape, &self.nodes[b.0].shape, "sub")?;
                    self.acc_binary_linear(&mut grads, *a, *b, bc, &g, 1.0, -1.0);
                }
                Op::Mul(a, b) => {
                    let (bc, _) =
                        classify(&self.nodes[a.0].shape, &self.nodes[b.0].shape, "mul")?;
                    let av = self.nodes[a.0].values.clone();
                    let bv = self.nodes[b.0].values.clone();
                    self.acc_binary_mul(&mut grads, *a, *b, bc, &g, &av, &bv);
                }
                Op::Div(a, b) => {
                    let (bc, _) =
                        classify(&self.nodes[a.0].shape, &self.nodes[b.0].shape, "div")?;
                    // d(a/b)/da = 1/b ; d(a/b)/db = -a/b^2
                    let bv = self.nodes[b.0].values.clone();
                    let av = self.nodes[a.0].values.clone();
                    match bc {
                        Broadcast::Same => {
                            acc!(*a, |dst: &mut Vec<f64>| for (k, gv) in g.iter().enumerate() {
                                dst[k] += gv / bv[k];
                            });
                            acc!(*b, |dst: &mut Vec<f64>| for (k, gv) in g.iter().enumerate() {
                                dst[k] += gv * (-av[k] / (bv[k] * bv[k]));
                            });
                        }
                        Broadcast::ScalarRhs => {
                            acc!(*a, |dst: &mut Vec<f64>| for (k, gv) in g.iter().enumerate() {
                                dst[k] += gv / bv[0];
                            });
                            acc!(*b, |dst: &mut Vec<f64>| {
                                let mut s = 0.0;
                                for (k, gv) in g.iter().enumerate() {
                                    s += gv * (-av[k] / (bv[0] * bv[0]));
                                }
                                dst[0] += s;
                            });
                        }
                        Broadcast::ScalarLhs => {
                            acc!(*a, |dst: &mut Vec<f64>| {
                                let mut s = 0.0;
                                for (k, gv) in g.iter().enumerate() {
                                    s += gv / bv[k];
                                }
                                dst[0] += s;
                            });
                            acc!(*b, |dst: &mut Vec<f64>| for (k, gv) in g.iter().enumerate() {
                                dst[k] += gv * (-av[0] / (bv[k] * bv[k]));
                            });
                        }
                        Broadcast::RowRhs => {
                            let d = bv.len();
                            acc!(*a, |dst: &mut Vec<f64>| for (k, gv) in g.iter().enumerate() {
                                dst[k] += gv / bv[k % d];
                            });
                            acc!(*b, |dst: &mut Vec<f64>| for (k, gv) in g.iter().enumerate() {
                                dst[k % d] += gv * (-av[k] / (bv[k % d] * bv[k % d]));
                            });
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let ashape = &self.nodes[a.0].shape;
                    let bshape = &self.nodes[b.0].shape;
                    let (n, k) = if ashape.len() == 1 {
                        (1, ashape[0])
                    } else {
                        (ashape[0], ashape[1])
                    };
                    let m = bshape[1];
                    let av = self.nodes[a.0].values.clone();
                    let bv = self.nodes[b.0].values.clone();
                    // dA = G B^T
                    acc!(*a, |dst: &mut Vec<f64>| {
                        for i in 0..n {
                            for l in 0..k {
                                let mut s = 0.0;
                                for j in 0..m {
                                    s += g[i * m + j] * bv[l * m + j];
                                }
                                dst[i * k + l] += s;
                            }
                        }
                    });
                    // dB = A^T G
                    acc!(*b, |dst: &mut Vec<f64>| {
                        for l in 0..k {
                            for i in 0..n {
                                let x = av[i * k + l];
                                if x == 0.0 {
                                    continue;
                                }
                                for j in 0..m {
                                    dst[l * m + j] += x * g[i * m + j];
                                }
                            }
                        }
                    });
                }
                Op::ConcatVec(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].values.len();
                        acc!(p, |dst: &mut Vec<f64>| {
                            for t in 0..len {
                                dst[t] += g[off + t];
                            }
                        });
                        off += len;
                    }
                }
                Op::StackRows(rows) => {
                    let d = node.shape[1];
                    for (r, &p) in rows.iter().enumerate() {
                        acc!(p, |dst: &mut Vec<f64>| {
                            for t in 0..d {
                                dst[t] += g[r * d + t];
                            }
                        });
                    }
                }
                Op::MeanRows(a) => {
                    let rows = self.nodes[a.0].shape[0];
                    let cols = self.nodes[a.0].shape[1];
                    let inv = 1.0 / rows as f64;
                    acc!(*a, |dst: &mut Vec<f64>| {
                        for r in 0..rows {
                            for c in 0..cols {
                                dst[r * cols + c] += g[c] * inv;
                            }
                        }
                    });
                }
                Op::SumAll(a) => {
                    acc!(*a, |dst: &mut Vec<f64>| {
                        for v in dst.iter_mut() {
                            *v += g[0];
                        }
                    });
                }
                Op::Relu(a) => {
                    let xs = &self.nodes[a.0].values;
                    acc!(*a, |dst: &mut Vec<f64>| for (k, gv) in g.iter().enumerate() {
                        if xs[k] > 0.0 {
                            dst[k] += gv;
                        }
                    });
                }
                Op::Tanh(a) => {
                    let ys = &node.values;
                    acc!(*a, |dst: &mut Vec<f64>| for (k, gv) in g.iter().enumerate() {
                        dst[k] += gv * (1.0 - ys[k] * ys[k]);
                    });
                }
                Op::Sigmoid(a) => {
                    let ys = &node.values;
                    acc!(*a, |dst: &mut Vec<f64>| for (k, gv) in g.iter().enumerate() {
                        dst[k] += gv * ys[k] * (1.0 - ys[k]);
                    });
                }
                Op::Exp(a) => {
                    let ys = &node.values;
                    acc!(*a, |dst: &mut Vec<f64>| for (k, gv) in g.iter().enumerate() {
                        dst[k] += gv * ys[k];
                    });
                }
                Op::Softplus(a) => {
                    let xs = &self.nodes[a.0].values;
                    acc!(*a, |dst: &mut Vec<f64>| for (k, gv) in g.iter().enumerate() {
                        dst[k] += gv / (1.0 + (-xs[k]).exp());
                    });
                }
                Op::Sqrt(a) => {
                    let ys = &node.values;
                    acc!(*a, |dst: &mut Vec<f64>| for (k, gv) in g.iter().enumerate() {
                        dst[k] += gv * 0.5 / ys[k];
                    });
                }
                Op::Square(a) => {
                    let xs = &self.nodes[a.0].values;
                    acc!(*a, |dst: &mut Vec<f64>| for (k, gv) in g.iter().enumerate() {
                        dst[k] += gv * 2.0 * xs[k];
                    });
                }
                Op::Neg(a) => {
                    acc!(*a, |dst: &mut Vec<f64>| for (k, gv) in g.iter().enumerate() {
                        dst[k] -= gv;
                    });
                }
                Op::LogAbs(a) => {
                    let xs = &self.nodes[a.0].values;
                    acc!(*a, |dst: &mut Vec<f64>| for (k, gv) in g.iter().enumerate() {
                        dst[k] += gv / xs[k];
                    });
                }
                Op::AddConst(a) => {
                    acc!(*a, |dst: &mut Vec<f64>| for (k, gv) in g.iter().enumerate() {
                        dst[k] += gv;
                    });
                }
                Op::MulConst(a, c) => {
                    let c = *c;
                    acc!(*a, |dst: &mut Vec<f64>| for (k, gv) in g.iter().enumerate() {
                        dst[k] += gv * c;
                    });
                }
                Op::PowConst(a, p) => {
                    let p = *p;
                    let xs = &self.nodes[a.0].values;
                    acc!(*a, |dst: &mut Vec<f64>| for (k, gv) in g.iter().enumerate() {
                        dst[k] += gv * p * xs[k].powf(p - 1.0);
                    });
                }
                Op::Gather { src, idx } => {
                    acc!(*src, |dst: &mut Vec<f64>| {
                        for (k, &i) in idx.iter().enumerate() {
                            dst[i] += g[k];
                        }
                    });
                }
                Op::Scatter { src, idx, .. } => {
                    acc!(*src, |dst: &mut Vec<f64>| {
                        for (k, &i) in idx.iter().enumerate() {
                            dst[k] += g[i];
                        }
                    });
                }
            }
        }
        Ok(())
    }

    fn acc_binary_linear(
        &self,
        grads: &mut [Vec<f64>],
        a: NodeId,
        b: NodeId,
        bc: Broadcast,
        g: &[f64],
        ca: f64,
        cb: f64,
    ) {
        let ensure = |grads: &mut [Vec<f64>], id: NodeId, len: usize| {
            if grads[id.0].is_empty() {
                grads[id.0] = vec![0.0; len];
            }
        };
        let alen = self.nodes[a.0].values.len();
        let blen = self.nodes[b.0].values.len();
        ensure(grads, a, alen);
        ensure(grads, b, blen);
        match bc {
            Broadcast::Same => {
                for (k, &gv) in g.iter().enumerate() {
                    grads[a.0][k] += gv * ca;
                    grads[b.0][k] += gv * cb;
                }
            }
            Broadcast::ScalarRhs => {
                let mut s = 0.0;
                for (k, &gv) in g.iter().enumerate() {
                    grads[a.0][k] += gv * ca;
                    s += gv;
                }
                grads[b.0][0] += s * cb;
            }
            Broadcast::ScalarLhs => {
                let mut s = 0.0;
                for (k, &gv) in g.iter().enumerate() {
                    grads[b.0][k] += gv * cb;
                    s += gv;
                }
                grads[a.0][0] += s * ca;
            }
            Broadcast::RowRhs => {
                let d = blen;
                for (k, &gv) in g.iter().enumerate() {
                    grads[a.0][k] += gv * ca;
                    grads[b.0][k % d] += gv * cb;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn acc_binary_mul(
        &self,
        grads: &mut [Vec<f64>],
        a: NodeId,
        b: NodeId,
        bc: Broadcast,
        g: &[f64],
        av: &[f64],
        bv: &[f64],
    ) {
        let ensure = |grads: &mut [Vec<f64>], id: NodeId, len: usize| {
            if grads[id.0].is_empty() {
                grads[id.0] = vec![0.0; len];
            }
        };
        ensure(grads, a, av.len());
        ensure(grads, b, bv.len());
        match bc {
            Broadcast::Same => {
                for (k, &gv) in g.iter().enumerate() {
                    grads[a.0][k] += gv * bv[k];
                    grads[b.0][k] += gv * av[k];
                }
            }
            Broadcast::ScalarRhs => {
                let mut s = 0.0;
                for (k, &gv) in g.iter().enumerate() {
                    grads[a.0][k] += gv * bv[0];
                    s += gv * av[k];
                }
                grads[b.0][0] += s;
            }
            Broadcast::ScalarLhs => {
                let mut s = 0.0;
                for (k, &gv) in g.iter().enumerate() {
                    grads[b.0][k] += gv * av[0];
                    s += gv * bv[k];
                }
                grads[a.0][0] += s;
            }
            Broadcast::RowRhs => {
                let d = bv.len();
                for (k, &gv) in g.iter().enumerate() {
                    grads[a.0][k] += gv * bv[k % d];
                    grads[b.0][k % d] += gv * av[k];
                }
            }
        }
    }
}
