//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Every forward operation appends one node; node ids grow monotonically, so
//! the tape order is already a topological order and backward is a single
//! reverse sweep. Values are checked for NaN/Inf as they are produced: a
//! non-finite intermediate is an error, not a silent state.
//!
//! Gradients accumulate: calling [`Tape::backward`] twice without clearing
//! doubles the stored gradients. Each backward pass works on scratch buffers
//! and only adds its result to the persistent per-node gradient, so shared
//! subexpressions are never double-counted within one pass.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    AddN(Vec<NodeId>),
    Mul(NodeId, NodeId),
    /// y = mul * x + add, elementwise with f64 constants; the shift
    /// vanishes in the gradient so only the factor is stored.
    Affine { x: NodeId, mul: f64 },
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    MatMul(NodeId, NodeId),
    /// w[m×k] · x[k] -> [m]
    MatVec { w: NodeId, x: NodeId },
    Dot(NodeId, NodeId),
    Concat(NodeId, NodeId),
    /// Scalars stacked into a vector.
    Stack(Vec<NodeId>),
    /// x[i] as a scalar.
    Pick { x: NodeId, index: usize },
    /// One row of a rank-2 tensor.
    Row { mat: NodeId, row: usize },
    Sum(NodeId),
    /// y = s * x where s is a scalar node.
    Scale { x: NodeId, s: NodeId },
    Softmax { x: NodeId, mask: Option<Vec<bool>> },
    CrossEntropy { probs: NodeId, gold: usize },
    /// Inverted dropout; multipliers are 0 or 1/(1-rate).
    Dropout { x: NodeId, mult: Vec<f64> },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// The differentiation tape. One per forward pass.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of `id`; zeros if backward never reached it.
    pub fn grad(&self, id: NodeId) -> Tensor {
        let node = &self.nodes[id.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()))
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        id
    }

    fn push_checked(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = self.any_requires_grad(&op);
        Ok(self.push(value, op, requires_grad))
    }

    fn any_requires_grad(&self, op: &Op) -> bool {
        let dep = |id: &NodeId| self.nodes[id.0].requires_grad;
        match op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::Dot(a, b) | Op::Concat(a, b) => {
                dep(a) || dep(b)
            }
            Op::AddN(xs) | Op::Stack(xs) => xs.iter().any(dep),
            Op::Affine { x, .. }
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Relu(x)
            | Op::Pick { x, .. }
            | Op::Sum(x)
            | Op::Softmax { x, .. }
            | Op::Dropout { x, .. } => dep(x),
            Op::MatVec { w, x } => dep(w) || dep(x),
            Op::Row { mat, .. } => dep(mat),
            Op::Scale { x, s } => dep(x) || dep(s),
            Op::CrossEntropy { probs, .. } => dep(probs),
        }
    }

    // ── Graph inputs ────────────────────────────────────────────────

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    // ── Elementwise ─────────────────────────────────────────────────

    fn binary_shapes(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            Ok(va.shape().to_vec())
        } else if va.is_scalar() {
            Ok(vb.shape().to_vec())
        } else if vb.is_scalar() {
            Ok(va.shape().to_vec())
        } else {
            Err(Error::ShapeMismatch {
                op,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            })
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_shapes("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = if va.is_scalar() && !vb.is_scalar() {
            let s = va.item();
            vb.data().iter().map(|x| s + x).collect()
        } else if vb.is_scalar() && !va.is_scalar() {
            let s = vb.item();
            va.data().iter().map(|x| x + s).collect()
        } else {
            va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect()
        };
        self.push_checked("add", Tensor::new(shape, data)?, Op::Add(a, b))
    }

    pub fn add_n(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = *xs.first().ok_or_else(|| Error::config("add_n of nothing"))?;
        let shape = self.value(first).shape().to_vec();
        let mut data = self.value(first).data().to_vec();
        for &x in &xs[1..] {
            let vx = self.value(x);
            if vx.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "add_n",
                    lhs: shape,
                    rhs: vx.shape().to_vec(),
                });
            }
            for (acc, v) in data.iter_mut().zip(vx.data()) {
                *acc += v;
            }
        }
        self.push_checked("add_n", Tensor::new(shape, data)?, Op::AddN(xs.to_vec()))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_shapes("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = if va.is_scalar() && !vb.is_scalar() {
            let s = va.item();
            vb.data().iter().map(|x| s * x).collect()
        } else if vb.is_scalar() && !va.is_scalar() {
            let s = vb.item();
            va.data().iter().map(|x| x * s).collect()
        } else {
            va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect()
        };
        self.push_checked("mul", Tensor::new(shape, data)?, Op::Mul(a, b))
    }

    pub fn affine(&mut self, x: NodeId, mul: f64, add: f64) -> Result<NodeId> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| mul * v + add).collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        self.push_checked("affine", t, Op::Affine { x, mul })
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| v.tanh()).collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        self.push_checked("tanh", t, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| sigmoid(*v)).collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        self.push_checked("sigmoid", t, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| v.max(0.0)).collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        self.push_checked("relu", t, Op::Relu(x))
    }

    // ── Linear algebra ─────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.cols() != vb.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = va.data()[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for j in 0..n {
                    data[i * n + j] += aip * vb.data()[p * n + j];
                }
            }
        }
        self.push_checked("matmul", Tensor::new(vec![m, n], data)?, Op::MatMul(a, b))
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let (vw, vx) = (self.value(w), self.value(x));
        if vw.shape().len() != 2 || vx.shape().len() != 1 || vw.cols() != vx.numel() {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                lhs: vw.shape().to_vec(),
                rhs: vx.shape().to_vec(),
            });
        }
        let (m, k) = (vw.rows(), vw.cols());
        let mut data = vec![0.0; m];
        for i in 0..m {
            let row = &vw.data()[i * k..(i + 1) * k];
            data[i] = row.iter().zip(vx.data()).map(|(a, b)| a * b).sum();
        }
        self.push_checked("matvec", Tensor::vector(data), Op::MatVec { w, x })
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() || va.shape().len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "dot",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let v: f64 = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).sum();
        self.push_checked("dot", Tensor::scalar(v), Op::Dot(a, b))
    }

    // ── Structure ──────────────────────────────────────────────────

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 1 || vb.shape().len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut data = va.data().to_vec();
        data.extend_from_slice(vb.data());
        self.push_checked("concat", Tensor::vector(data), Op::Concat(a, b))
    }

    pub fn stack(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let mut data = Vec::with_capacity(xs.len());
        for &x in xs {
            let vx = self.value(x);
            if vx.numel() != 1 {
                return Err(Error::InvalidShape {
                    op: "stack",
                    shape: vx.shape().to_vec(),
                    msg: "stack expects scalar inputs".into(),
                });
            }
            data.push(vx.item());
        }
        self.push_checked("stack", Tensor::vector(data), Op::Stack(xs.to_vec()))
    }

    pub fn pick(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.shape().len() != 1 || index >= vx.numel() {
            return Err(Error::InvalidShape {
                op: "pick",
                shape: vx.shape().to_vec(),
                msg: format!("index {index} out of range"),
            });
        }
        let v = vx.data()[index];
        self.push_checked("pick", Tensor::scalar(v), Op::Pick { x, index })
    }

    pub fn row(&mut self, mat: NodeId, row: usize) -> Result<NodeId> {
        let vm = self.value(mat);
        if vm.shape().len() != 2 || row >= vm.rows() {
            return Err(Error::InvalidShape {
                op: "row",
                shape: vm.shape().to_vec(),
                msg: format!("row {row} out of range"),
            });
        }
        let data = vm.row(row).to_vec();
        self.push_checked("row", Tensor::vector(data), Op::Row { mat, row })
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v: f64 = self.value(x).data().iter().sum();
        self.push_checked("sum", Tensor::scalar(v), Op::Sum(x))
    }

    pub fn scale(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let vs = self.value(s);
        if vs.numel() != 1 {
            return Err(Error::InvalidShape {
                op: "scale",
                shape: vs.shape().to_vec(),
                msg: "scale factor must be a scalar node".into(),
            });
        }
        let f = vs.item();
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| f * v).collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        self.push_checked("scale", t, Op::Scale { x, s })
    }

    // ── Probabilistic ──────────────────────────────────────────────

    /// Max-subtracted softmax over a vector; masked positions get exactly 0.
    pub fn softmax(&mut self, x: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.shape().len() != 1 {
            return Err(Error::InvalidShape {
                op: "softmax",
                shape: vx.shape().to_vec(),
                msg: "softmax expects a vector".into(),
            });
        }
        let n = vx.numel();
        if let Some(m) = mask {
            if m.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "softmax",
                    lhs: vx.shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
        }
        let valid = |i: usize| mask.map_or(true, |m| m[i]);
        let mut max = f64::NEG_INFINITY;
        for i in 0..n {
            if valid(i) && vx.data()[i] > max {
                max = vx.data()[i];
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::AllMasked);
        }
        let mut data = vec![0.0; n];
        let mut denom = 0.0;
        for i in 0..n {
            if valid(i) {
                let e = (vx.data()[i] - max).exp();
                data[i] = e;
                denom += e;
            }
        }
        for v in data.iter_mut() {
            *v /= denom;
        }
        self.push_checked(
            "softmax",
            Tensor::vector(data),
            Op::Softmax {
                x,
                mask: mask.map(|m| m.to_vec()),
            },
        )
    }

    /// −log(probs[gold]); expects a probability vector from `softmax`.
    pub fn cross_entropy(&mut self, probs: NodeId, gold: usize) -> Result<NodeId> {
        let vp = self.value(probs);
        if vp.shape().len() != 1 || gold >= vp.numel() {
            return Err(Error::InvalidShape {
                op: "cross_entropy",
                shape: vp.shape().to_vec(),
                msg: format!("gold index {gold} out of range"),
            });
        }
        let p = vp.data()[gold];
        if p <= 0.0 {
            return Err(Error::ZeroProbability {
                index: gold,
                prob: p,
            });
        }
        self.push_checked(
            "cross_entropy",
            Tensor::scalar(-p.ln()),
            Op::CrossEntropy { probs, gold },
        )
    }

    /// Inverted dropout: zero with probability `rate`, scale survivors by
    /// 1/(1-rate). Identity when not training.
    pub fn dropout(
        &mut self,
        x: NodeId,
        rate: f64,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return self.affine(x, 1.0, 0.0);
        }
        let keep = 1.0 / (1.0 - rate);
        let vx = self.value(x);
        let mult: Vec<f64> = (0..vx.numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = vx.data().iter().zip(&mult).map(|(v, m)| v * m).collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        self.push_checked("dropout", t, Op::Dropout { x, mult })
    }

    // ── Backward ───────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Per-node gradients accumulate
    /// across repeated calls.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                shape: self.value(loss).shape().to_vec(),
                msg: "loss must be scalar".into(),
            });
        }
        let mut scratch: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        scratch[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad && !matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = scratch[idx].take() else { continue };
            let op = self.nodes[idx].op.clone();
            self.propagate(idx, &op, &g, &mut scratch);
            match &mut self.nodes[idx].grad {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn accum(&self, scratch: &mut [Option<Tensor>], id: NodeId, delta: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = &mut scratch[id.0];
        match slot {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(delta) {
                    *a += b;
                }
            }
            None => {
                let shape = self.nodes[id.0].value.shape().to_vec();
                let mut t = Tensor::zeros(shape);
                for (a, b) in t.data_mut().iter_mut().zip(delta) {
                    *a += b;
                }
                *slot = Some(t);
            }
        }
    }

    fn accum_scalar(&self, scratch: &mut [Option<Tensor>], id: NodeId, delta: f64) {
        self.accum(scratch, id, &[delta]);
    }

    fn propagate(&self, idx: usize, op: &Op, g: &Tensor, scratch: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (side, other) in [(*a, *b), (*b, *a)] {
                    let vs = self.value(side);
                    if vs.is_scalar() && !self.value(other).is_scalar() {
                        self.accum_scalar(scratch, side, g.data().iter().sum());
                    } else {
                        self.accum(scratch, side, g.data());
                    }
                }
            }
            Op::AddN(xs) => {
                for &x in xs {
                    self.accum(scratch, x, g.data());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if va.is_scalar() && !vb.is_scalar() {
                    let s = va.item();
                    let d: f64 = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).sum();
                    self.accum_scalar(scratch, *a, d);
                    let db: Vec<f64> = g.data().iter().map(|x| x * s).collect();
                    self.accum(scratch, *b, &db);
                } else if vb.is_scalar() && !va.is_scalar() {
                    let s = vb.item();
                    let da: Vec<f64> = g.data().iter().map(|x| x * s).collect();
                    self.accum(scratch, *a, &da);
                    let d: f64 = g.data().iter().zip(va.data()).map(|(x, y)| x * y).sum();
                    self.accum_scalar(scratch, *b, d);
                } else {
                    let da: Vec<f64> = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                    let db: Vec<f64> = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    self.accum(scratch, *a, &da);
                    self.accum(scratch, *b, &db);
                }
            }
            Op::Affine { x, mul } => {
                let dx: Vec<f64> = g.data().iter().map(|v| mul * v).collect();
                self.accum(scratch, *x, &dx);
            }
            Op::Tanh(x) => {
                let y = &self.nodes[idx].value;
                let dx: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gv, yv)| gv * (1.0 - yv * yv))
                    .collect();
                self.accum(scratch, *x, &dx);
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[idx].value;
                let dx: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gv, yv)| gv * yv * (1.0 - yv))
                    .collect();
                self.accum(scratch, *x, &dx);
            }
            Op::Relu(x) => {
                let vx = self.value(*x);
                let dx: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(vx.data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accum(scratch, *x, &dx);
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                // a.grad += g · bᵀ
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g.data()[i * n + j] * vb.data()[p * n + j];
                        }
                        da[i * k + p] = acc;
                    }
                }
                self.accum(scratch, *a, &da);
                // b.grad += aᵀ · g
                let mut db = vec![0.0; k * n];
                for p in 0..k {
                    for i in 0..m {
                        let aip = va.data()[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += aip * g.data()[i * n + j];
                        }
                    }
                }
                self.accum(scratch, *b, &db);
            }
            Op::MatVec { w, x } => {
                let (vw, vx) = (self.value(*w), self.value(*x));
                let (m, k) = (vw.rows(), vw.cols());
                let mut dw = vec![0.0; m * k];
                for i in 0..m {
                    let gi = g.data()[i];
                    if gi == 0.0 {
                        continue;
                    }
                    for j in 0..k {
                        dw[i * k + j] = gi * vx.data()[j];
                    }
                }
                self.accum(scratch, *w, &dw);
                let mut dx = vec![0.0; k];
                for i in 0..m {
                    let gi = g.data()[i];
                    if gi == 0.0 {
                        continue;
                    }
                    for j in 0..k {
                        dx[j] += gi * vw.data()[i * k + j];
                    }
                }
                self.accum(scratch, *x, &dx);
            }
            Op::Dot(a, b) => {
                let g0 = g.item();
                let da: Vec<f64> = self.value(*b).data().iter().map(|v| g0 * v).collect();
                let db: Vec<f64> = self.value(*a).data().iter().map(|v| g0 * v).collect();
                self.accum(scratch, *a, &da);
                self.accum(scratch, *b, &db);
            }
            Op::Concat(a, b) => {
                let na = self.value(*a).numel();
                self.accum(scratch, *a, &g.data()[..na]);
                self.accum(scratch, *b, &g.data()[na..]);
            }
            Op::Stack(xs) => {
                for (i, &x) in xs.iter().enumerate() {
                    self.accum_scalar(scratch, x, g.data()[i]);
                }
            }
            Op::Pick { x, index } => {
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; self.value(*x).numel()];
                    dx[*index] = g.item();
                    self.accum(scratch, *x, &dx);
                }
            }
            Op::Row { mat, row } => {
                if self.nodes[mat.0].requires_grad {
                    let vm = self.value(*mat);
                    let c = vm.cols();
                    let mut dm = vec![0.0; vm.numel()];
                    dm[row * c..(row + 1) * c].copy_from_slice(g.data());
                    self.accum(scratch, *mat, &dm);
                }
            }
            Op::Sum(x) => {
                let g0 = g.item();
                let dx = vec![g0; self.value(*x).numel()];
                self.accum(scratch, *x, &dx);
            }
            Op::Scale { x, s } => {
                let f = self.value(*s).item();
                let dx: Vec<f64> = g.data().iter().map(|v| f * v).collect();
                self.accum(scratch, *x, &dx);
                let ds: f64 = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(gv, xv)| gv * xv)
                    .sum();
                self.accum_scalar(scratch, *s, ds);
            }
            Op::Softmax { x, mask } => {
                let y = &self.nodes[idx].value;
                let valid = |i: usize| mask.as_ref().map_or(true, |m| m[i]);
                let mut inner = 0.0;
                for i in 0..y.numel() {
                    if valid(i) {
                        inner += g.data()[i] * y.data()[i];
                    }
                }
                let dx: Vec<f64> = (0..y.numel())
                    .map(|i| {
                        if valid(i) {
                            y.data()[i] * (g.data()[i] - inner)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accum(scratch, *x, &dx);
            }
            Op::CrossEntropy { probs, gold } => {
                if self.nodes[probs.0].requires_grad {
                    let vp = self.value(*probs);
                    let mut dp = vec![0.0; vp.numel()];
                    dp[*gold] = -g.item() / vp.data()[*gold];
                    self.accum(scratch, *probs, &dp);
                }
            }
            Op::Dropout { x, mult } => {
                let dx: Vec<f64> = g.data().iter().zip(mult).map(|(gv, m)| gv * m).collect();
                self.accum(scratch, *x, &dx);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
