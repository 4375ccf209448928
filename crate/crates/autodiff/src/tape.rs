//! Define-by-run tape with a differentiable reverse pass.
//!
//! Every primitive is evaluated eagerly when it is recorded. [`Tape::gradient`]
//! walks the recorded nodes backwards and *records* the adjoint computation as
//! new nodes on the same tape, so the returned gradients are ordinary
//! variables that can be differentiated again.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::tensor::{gemm, Tensor};
use crate::AdError;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    Relu(usize),
    Step(usize),
    Softplus(usize),
    Sigmoid(usize),
    Square(usize),
    Sqrt(usize),
    Recip(usize),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    Broadcast(usize, Vec<usize>),
    Reshape(usize, Vec<usize>),
    Concat(Vec<usize>),
    Slice {
        a: usize,
        start: usize,
        end: usize,
    },
    Pad {
        a: usize,
        start: usize,
        total: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul { .. } => "matmul",
            Op::Relu(_) => "relu",
            Op::Step(_) => "step",
            Op::Softplus(_) => "softplus",
            Op::Sigmoid(_) => "sigmoid",
            Op::Square(_) => "square",
            Op::Sqrt(_) => "sqrt",
            Op::Recip(_) => "recip",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::Broadcast(..) => "broadcast",
            Op::Reshape(..) => "reshape",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::Pad { .. } => "pad",
        }
    }

    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf | Op::Constant => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Relu(a)
            | Op::Step(a)
            | Op::Softplus(a)
            | Op::Sigmoid(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Recip(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumAxis(a, _)
            | Op::Broadcast(a, _)
            | Op::Reshape(a, _)
            | Op::Slice { a, .. }
            | Op::Pad { a, .. } => vec![*a],
            Op::Concat(parts) => parts.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Ordered record of primitive operations; parents always precede children.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `1/x` with the convention `1/0 = 0`, used for the sqrt derivative at zero.
fn safe_recip(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        1.0 / x
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), AdError> {
    if a.shape() != b.shape() {
        return Err(AdError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize), AdError> {
    t.dims2().ok_or_else(|| AdError::ShapeMismatch {
        op,
        lhs: t.shape().to_vec(),
        rhs: vec![0, 0],
    })
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize, AdError> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(AdError::ForeignVar);
        }
        Ok(v.index)
    }

    fn var(&self, index: usize) -> Var {
        Var {
            tape: self.id,
            index,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.index].value
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    /// Differentiable input (parameter or data).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
        });
        self.var(self.nodes.len() - 1)
    }

    /// Input that gradients never flow into.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Constant,
            value,
        });
        self.var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> Result<Var, AdError> {
        let value = self.compute(&op)?;
        if !value.is_finite() {
            return Err(AdError::NonFinite {
                op: op.name(),
                node: self.nodes.len(),
            });
        }
        self.nodes.push(Node { op, value });
        Ok(self.var(self.nodes.len() - 1))
    }

    fn compute(&self, op: &Op) -> Result<Tensor, AdError> {
        Ok(match op {
            Op::Leaf | Op::Constant => unreachable!("leaves carry their own value"),
            Op::Add(a, b) => {
                same_shape("add", self.val(*a), self.val(*b))?;
                self.val(*a).zip_map(self.val(*b), |x, y| x + y)
            }
            Op::Sub(a, b) => {
                same_shape("sub", self.val(*a), self.val(*b))?;
                self.val(*a).zip_map(self.val(*b), |x, y| x - y)
            }
            Op::Mul(a, b) => {
                same_shape("mul", self.val(*a), self.val(*b))?;
                self.val(*a).zip_map(self.val(*b), |x, y| x * y)
            }
            Op::Scale(a, c) => self.val(*a).map(|x| x * c),
            Op::AddScalar(a, c) => self.val(*a).map(|x| x + c),
            Op::MatMul { a, b, ta, tb } => {
                let (ar, ac) = dims2("matmul", self.val(*a))?;
                let (br, bc) = dims2("matmul", self.val(*b))?;
                let (m, k) = if *ta { (ac, ar) } else { (ar, ac) };
                let (k2, n) = if *tb { (bc, br) } else { (br, bc) };
                if k != k2 {
                    return Err(AdError::ShapeMismatch {
                        op: "matmul",
                        lhs: self.val(*a).shape().to_vec(),
                        rhs: self.val(*b).shape().to_vec(),
                    });
                }
                let mut out = vec![0.0; m * n];
                gemm(
                    self.val(*a).data(),
                    ar,
                    ac,
                    *ta,
                    self.val(*b).data(),
                    br,
                    bc,
                    *tb,
                    &mut out,
                    1.0,
                    0.0,
                );
                Tensor::matrix(m, n, out)
            }
            Op::Relu(a) => self.val(*a).map(|x| if x > 0.0 { x } else { 0.0 }),
            Op::Step(a) => self.val(*a).map(|x| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Softplus(a) => self.val(*a).map(softplus),
            Op::Sigmoid(a) => self.val(*a).map(sigmoid),
            Op::Square(a) => self.val(*a).map(|x| x * x),
            Op::Sqrt(a) => self.val(*a).map(f64::sqrt),
            Op::Recip(a) => self.val(*a).map(safe_recip),
            Op::Sum(a) => Tensor::scalar(self.val(*a).data().iter().sum()),
            Op::Mean(a) => {
                let t = self.val(*a);
                Tensor::scalar(t.data().iter().sum::<f64>() / t.len().max(1) as f64)
            }
            Op::SumAxis(a, axis) => {
                let t = self.val(*a);
                let (r, c) = dims2("sum_axis", t)?;
                match axis {
                    0 => {
                        let mut out = vec![0.0; c];
                        for row in t.data().chunks_exact(c.max(1)).take(r) {
                            for (o, v) in out.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                        Tensor::matrix(1, c, out)
                    }
                    _ => {
                        let out = if c == 0 {
                            vec![0.0; r]
                        } else {
                            t.data().chunks_exact(c).map(|row| row.iter().sum()).collect()
                        };
                        Tensor::matrix(r, 1, out)
                    }
                }
            }
            Op::Broadcast(a, shape) => {
                let t = self.val(*a);
                let total: usize = shape.iter().product();
                if t.len() == 1 {
                    Tensor::filled(shape, t.data()[0])
                } else {
                    let (r, c) = match shape.as_slice() {
                        [r, c] => (*r, *c),
                        _ => {
                            return Err(AdError::ShapeMismatch {
                                op: "broadcast",
                                lhs: t.shape().to_vec(),
                                rhs: shape.clone(),
                            })
                        }
                    };
                    let src = t.shape();
                    let row_like = src == [1, c] || src == [c];
                    let col_like = src == [r, 1];
                    let mut out = Vec::with_capacity(total);
                    if row_like {
                        for _ in 0..r {
                            out.extend_from_slice(t.data());
                        }
                    } else if col_like {
                        for &v in t.data() {
                            out.extend(std::iter::repeat_n(v, c));
                        }
                    } else if src == shape.as_slice() {
                        out.extend_from_slice(t.data());
                    } else {
                        return Err(AdError::ShapeMismatch {
                            op: "broadcast",
                            lhs: src.to_vec(),
                            rhs: shape.clone(),
                        });
                    }
                    Tensor::matrix(r, c, out)
                }
            }
            Op::Reshape(a, shape) => self.val(*a).clone().reshape(shape.clone())?,
            Op::Concat(parts) => {
                let rows = dims2("concat", self.val(parts[0]))?.0;
                let mut widths = Vec::with_capacity(parts.len());
                for &p in parts {
                    let (r, c) = dims2("concat", self.val(p))?;
                    if r != rows {
                        return Err(AdError::ShapeMismatch {
                            op: "concat",
                            lhs: self.val(parts[0]).shape().to_vec(),
                            rhs: self.val(p).shape().to_vec(),
                        });
                    }
                    widths.push(c);
                }
                let total: usize = widths.iter().sum();
                let mut out = Vec::with_capacity(rows * total);
                for i in 0..rows {
                    for (&p, &w) in parts.iter().zip(&widths) {
                        out.extend_from_slice(&self.val(p).data()[i * w..(i + 1) * w]);
                    }
                }
                Tensor::matrix(rows, total, out)
            }
            Op::Slice { a, start, end } => {
                let t = self.val(*a);
                let (r, c) = dims2("slice", t)?;
                if start > end || *end > c {
                    return Err(AdError::ShapeMismatch {
                        op: "slice",
                        lhs: t.shape().to_vec(),
                        rhs: vec![*start, *end],
                    });
                }
                let w = end - start;
                let mut out = Vec::with_capacity(r * w);
                for row in t.data().chunks_exact(c.max(1)).take(r) {
                    out.extend_from_slice(&row[*start..*end]);
                }
                Tensor::matrix(r, w, out)
            }
            Op::Pad { a, start, total } => {
                let t = self.val(*a);
                let (r, w) = dims2("pad", t)?;
                if start + w > *total {
                    return Err(AdError::ShapeMismatch {
                        op: "pad",
                        lhs: t.shape().to_vec(),
                        rhs: vec![*start, *total],
                    });
                }
                let mut out = vec![0.0; r * total];
                for i in 0..r {
                    out[i * total + start..i * total + start + w]
                        .copy_from_slice(&t.data()[i * w..(i + 1) * w]);
                }
                Tensor::matrix(r, *total, out)
            }
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        self.push(Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        self.push(Op::Mul(a, b))
    }

    /// Multiplication by a constant scalar.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, AdError> {
        let a = self.check(a)?;
        self.push(Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, AdError> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, AdError> {
        let a = self.check(a)?;
        self.push(Op::AddScalar(a, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, AdError> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        self.push(Op::MatMul { a, b, ta, tb })
    }

    /// ReLU; the derivative at exactly zero is taken as zero.
    pub fn relu(&mut self, a: Var) -> Result<Var, AdError> {
        let a = self.check(a)?;
        self.push(Op::Relu(a))
    }

    /// Heaviside mask `1[x > 0]`; has zero derivative everywhere.
    pub fn step(&mut self, a: Var) -> Result<Var, AdError> {
        let a = self.check(a)?;
        self.push(Op::Step(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var, AdError> {
        let a = self.check(a)?;
        self.push(Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, AdError> {
        let a = self.check(a)?;
        self.push(Op::Sigmoid(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var, AdError> {
        let a = self.check(a)?;
        self.push(Op::Square(a))
    }

    /// Square root. Its derivative at zero is defined as zero.
    pub fn sqrt(&mut self, a: Var) -> Result<Var, AdError> {
        let a = self.check(a)?;
        self.push(Op::Sqrt(a))
    }

    /// Reciprocal with `1/0 = 0`.
    pub fn recip(&mut self, a: Var) -> Result<Var, AdError> {
        let a = self.check(a)?;
        self.push(Op::Recip(a))
    }

    /// Sum of all elements (rank-0 result).
    pub fn sum(&mut self, a: Var) -> Result<Var, AdError> {
        let a = self.check(a)?;
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AdError> {
        let a = self.check(a)?;
        self.push(Op::Mean(a))
    }

    /// Sum of a matrix over `axis`, keeping the reduced dimension as 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, AdError> {
        let a = self.check(a)?;
        self.push(Op::SumAxis(a, axis.min(1)))
    }

    /// Broadcast a scalar, row `[1, n]` / `[n]`, or column `[m, 1]` to `shape`.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var, AdError> {
        let a = self.check(a)?;
        self.push(Op::Broadcast(a, shape.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AdError> {
        let a = self.check(a)?;
        self.push(Op::Reshape(a, shape.to_vec()))
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, AdError> {
        if parts.is_empty() {
            return Err(AdError::ShapeMismatch {
                op: "concat",
                lhs: Vec::new(),
                rhs: Vec::new(),
            });
        }
        let idx = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<Vec<_>, _>>()?;
        self.push(Op::Concat(idx))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, AdError> {
        let a = self.check(a)?;
        self.push(Op::Slice { a, start, end })
    }

    /// Embed a matrix into `total` zero columns starting at `start`.
    pub fn pad_cols(&mut self, a: Var, start: usize, total: usize) -> Result<Var, AdError> {
        let a = self.check(a)?;
        self.push(Op::Pad { a, start, total })
    }

    /// Replace leaf values and re-evaluate every recorded node in order.
    pub fn replay(&mut self, inputs: &[(Var, Tensor)]) -> Result<(), AdError> {
        for (v, t) in inputs {
            let i = self.check(*v)?;
            if !matches!(self.nodes[i].op, Op::Leaf | Op::Constant) {
                return Err(AdError::NotALeaf(i));
            }
            same_shape("replay", &self.nodes[i].value, t)?;
            self.nodes[i].value = t.clone();
        }
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf | Op::Constant) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let value = self.compute(&op)?;
            if !value.is_finite() {
                return Err(AdError::NonFinite {
                    op: op.name(),
                    node: i,
                });
            }
            self.nodes[i].value = value;
        }
        Ok(())
    }

    fn accumulate(
        &mut self,
        grads: &mut [Option<usize>],
        target: usize,
        contribution: Var,
    ) -> Result<(), AdError> {
        grads[target] = Some(match grads[target] {
            None => contribution.index,
            Some(prev) => {
                let prev = self.var(prev);
                self.add(prev, contribution)?.index
            }
        });
        Ok(())
    }

    /// Reverse-mode gradient of a single-element `output` with respect to `wrt`.
    ///
    /// The adjoint computation is recorded on this tape, so each returned
    /// variable can itself appear in a later call to `gradient`. Variables in
    /// `wrt` that do not influence `output` get a zero constant.
    pub fn gradient(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>, AdError> {
        let out = self.check(output)?;
        for &w in wrt {
            self.check(w)?;
        }
        if self.val(out).len() != 1 {
            return Err(AdError::NonScalarOutput(self.val(out).shape().to_vec()));
        }
        let n = out + 1;
        let mut depends = vec![false; n];
        for w in wrt {
            if w.index < n {
                depends[w.index] = true;
            }
        }
        for i in 0..n {
            if !depends[i] {
                depends[i] = self.nodes[i].op.parents().iter().any(|&p| depends[p]);
            }
        }

        let mut grads: Vec<Option<usize>> = vec![None; n];
        let seed = Tensor::filled(self.val(out).shape(), 1.0);
        grads[out] = Some(self.constant(seed).index);

        for i in (0..n).rev() {
            let Some(g) = grads[i] else { continue };
            if !depends[i] {
                continue;
            }
            let g = self.var(g);
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf | Op::Constant | Op::Step(_) => {}
                Op::Add(a, b) => {
                    if depends[a] {
                        self.accumulate(&mut grads, a, g)?;
                    }
                    if depends[b] {
                        self.accumulate(&mut grads, b, g)?;
                    }
                }
                Op::Sub(a, b) => {
                    if depends[a] {
                        self.accumulate(&mut grads, a, g)?;
                    }
                    if depends[b] {
                        let c = self.neg(g)?;
                        self.accumulate(&mut grads, b, c)?;
                    }
                }
                Op::Mul(a, b) => {
                    if depends[a] {
                        let c = self.mul(g, self.var(b))?;
                        self.accumulate(&mut grads, a, c)?;
                    }
                    if depends[b] {
                        let c = self.mul(g, self.var(a))?;
                        self.accumulate(&mut grads, b, c)?;
                    }
                }
                Op::Scale(a, c) => {
                    let d = self.scale(g, c)?;
                    self.accumulate(&mut grads, a, d)?;
                }
                Op::AddScalar(a, _) => self.accumulate(&mut grads, a, g)?,
                Op::MatMul { a, b, ta, tb } => {
                    let (va, vb) = (self.var(a), self.var(b));
                    if depends[a] {
                        let c = if ta {
                            self.matmul_t(vb, g, tb, true)?
                        } else {
                            self.matmul_t(g, vb, false, !tb)?
                        };
                        self.accumulate(&mut grads, a, c)?;
                    }
                    if depends[b] {
                        let c = if tb {
                            self.matmul_t(g, va, true, ta)?
                        } else {
                            self.matmul_t(va, g, !ta, false)?
                        };
                        self.accumulate(&mut grads, b, c)?;
                    }
                }
                Op::Relu(a) => {
                    let mask = self.step(self.var(a))?;
                    let c = self.mul(g, mask)?;
                    self.accumulate(&mut grads, a, c)?;
                }
                Op::Softplus(a) => {
                    let s = self.sigmoid(self.var(a))?;
                    let c = self.mul(g, s)?;
                    self.accumulate(&mut grads, a, c)?;
                }
                Op::Sigmoid(a) => {
                    let y = self.var(i);
                    let y2 = self.square(y)?;
                    let dy = self.sub(y, y2)?;
                    let c = self.mul(g, dy)?;
                    self.accumulate(&mut grads, a, c)?;
                }
                Op::Square(a) => {
                    let two_x = self.scale(self.var(a), 2.0)?;
                    let c = self.mul(g, two_x)?;
                    self.accumulate(&mut grads, a, c)?;
                }
                Op::Sqrt(a) => {
                    let r = self.recip(self.var(i))?;
                    let half_r = self.scale(r, 0.5)?;
                    let c = self.mul(g, half_r)?;
                    self.accumulate(&mut grads, a, c)?;
                }
                Op::Recip(a) => {
                    let y2 = self.square(self.var(i))?;
                    let d = self.neg(y2)?;
                    let c = self.mul(g, d)?;
                    self.accumulate(&mut grads, a, c)?;
                }
                Op::Sum(a) => {
                    let shape = self.val(a).shape().to_vec();
                    let c = self.broadcast_to(g, &shape)?;
                    self.accumulate(&mut grads, a, c)?;
                }
                Op::Mean(a) => {
                    let shape = self.val(a).shape().to_vec();
                    let n = self.val(a).len().max(1) as f64;
                    let b = self.broadcast_to(g, &shape)?;
                    let c = self.scale(b, 1.0 / n)?;
                    self.accumulate(&mut grads, a, c)?;
                }
                Op::SumAxis(a, _) => {
                    let shape = self.val(a).shape().to_vec();
                    let c = self.broadcast_to(g, &shape)?;
                    self.accumulate(&mut grads, a, c)?;
                }
                Op::Broadcast(a, shape) => {
                    let src = self.val(a).shape().to_vec();
                    let reduced = if src.as_slice() == shape.as_slice() {
                        g
                    } else if self.val(a).len() == 1 {
                        self.sum(g)?
                    } else if matches!(shape.as_slice(), [r, _] if src == [*r, 1]) {
                        self.sum_axis(g, 1)?
                    } else {
                        self.sum_axis(g, 0)?
                    };
                    let c = if self.value(reduced).shape() == src.as_slice() {
                        reduced
                    } else {
                        self.reshape(reduced, &src)?
                    };
                    self.accumulate(&mut grads, a, c)?;
                }
                Op::Reshape(a, _) => {
                    let src = self.val(a).shape().to_vec();
                    let c = self.reshape(g, &src)?;
                    self.accumulate(&mut grads, a, c)?;
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.val(p).dims2().map(|d| d.1).unwrap_or(0);
                        if depends[p] {
                            let c = self.slice_cols(g, offset, offset + w)?;
                            self.accumulate(&mut grads, p, c)?;
                        }
                        offset += w;
                    }
                }
                Op::Slice { a, start, .. } => {
                    let total = self.val(a).dims2().map(|d| d.1).unwrap_or(0);
                    let c = self.pad_cols(g, start, total)?;
                    self.accumulate(&mut grads, a, c)?;
                }
                Op::Pad { a, start, .. } => {
                    let w = self.val(a).dims2().map(|d| d.1).unwrap_or(0);
                    let c = self.slice_cols(g, start, start + w)?;
                    self.accumulate(&mut grads, a, c)?;
                }
            }
        }

        wrt.iter()
            .map(|w| match grads.get(w.index).copied().flatten() {
                Some(g) => Ok(self.var(g)),
                None => {
                    let shape = self.val(w.index).shape().to_vec();
                    Ok(self.constant(Tensor::zeros(&shape)))
                }
            })
            .collect()
    }
}
