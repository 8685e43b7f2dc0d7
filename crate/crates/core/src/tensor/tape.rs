//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! Operations record their inputs as they execute; [`Tape::backward`] replays
//! the record in reverse and accumulates gradients for every node. Leaves that
//! do not participate in the result get an exactly-zero gradient.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Array;

/// Hyperparameter of the squareplus activation `(x + sqrt(x^2 + b)) / 2`.
pub const SQUAREPLUS_B: f64 = 4.0;

/// Elementwise squareplus on a plain array.
pub fn squareplus(x: f64) -> f64 {
    (x + (x * x + SQUAREPLUS_B).sqrt()) * 0.5
}

/// Derivative of squareplus: `(1 + x / sqrt(x^2 + b)) / 2`.
pub fn squareplus_prime(x: f64) -> f64 {
    (1.0 + x / (x * x + SQUAREPLUS_B).sqrt()) * 0.5
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Div(VarId, VarId),
    Neg(VarId),
    AddScalar(VarId),
    MulScalar(VarId, f64),
    Recip(VarId),
    Log(VarId),
    Sqrt(VarId),
    Squareplus(VarId),
    MaxScalar(VarId, f64),
    MatMul(VarId, VarId),
    /// `[m, n] + [n]`, bias broadcast over rows.
    AddBias(VarId, VarId),
    /// `[m, 1]` repeated to `[m, k]`.
    BroadcastCols(VarId),
    Sum(VarId),
    Reshape(VarId),
    Gather {
        src: VarId,
        ids: Rc<Vec<usize>>,
    },
    SegmentSum {
        src: VarId,
        ids: Rc<Vec<usize>>,
    },
    ConcatCols(Vec<VarId>),
    SliceCols {
        src: VarId,
        start: usize,
        len: usize,
    },
}

struct Node {
    value: Array,
    op: Op,
}

/// Records a forward computation for reverse-mode differentiation.
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A recording tape, ready for [`Tape::backward`].
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A non-recording tape: same forward results, no backward pass.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array, op: Op) -> VarId {
        let op = if self.recording { op } else { Op::Leaf };
        self.nodes.push(Node { value, op });
        VarId(self.nodes.len() - 1)
    }

    /// Registers an input value. Gradients are available for every leaf after
    /// a backward pass.
    pub fn leaf(&mut self, value: Array) -> VarId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        VarId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: VarId) -> &Array {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "div",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x / y)
            .collect();
        let v = Array::from_vec(self.shape(a).to_vec(), data)?;
        Ok(self.push(v, Op::Div(a, b)))
    }

    pub fn neg(&mut self, a: VarId) -> VarId {
        let v = self.value(a).map(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn add_scalar(&mut self, a: VarId, c: f64) -> VarId {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: VarId, c: f64) -> VarId {
        let v = self.value(a).scale(c);
        self.push(v, Op::MulScalar(a, c))
    }

    pub fn recip(&mut self, a: VarId) -> VarId {
        let v = self.value(a).map(|x| 1.0 / x);
        self.push(v, Op::Recip(a))
    }

    pub fn log(&mut self, a: VarId) -> VarId {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: VarId) -> VarId {
        let v = self.value(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn squareplus(&mut self, a: VarId) -> VarId {
        let v = self.value(a).map(squareplus);
        self.push(v, Op::Squareplus(a))
    }

    /// Elementwise `max(x, c)`; gradient passes through where `x >= c`.
    pub fn max_scalar(&mut self, a: VarId, c: f64) -> VarId {
        let v = self.value(a).map(|x| x.max(c));
        self.push(v, Op::MaxScalar(a, c))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `[m, n] + [n]` with the bias vector broadcast over every row.
    pub fn add_bias(&mut self, a: VarId, bias: VarId) -> Result<VarId> {
        let (av, bv) = (self.value(a), self.value(bias));
        if av.rank() != 2 || bv.rank() != 1 || av.cols() != bv.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let n = av.cols();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(idx, &x)| x + bv.data()[idx % n])
            .collect();
        let v = Array::from_vec(av.shape().to_vec(), data)?;
        Ok(self.push(v, Op::AddBias(a, bias)))
    }

    /// Repeats an `[m, 1]` column to `[m, k]`.
    pub fn broadcast_cols(&mut self, a: VarId, k: usize) -> Result<VarId> {
        let av = self.value(a);
        if av.rank() != 2 || av.cols() != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast_cols",
                left: av.shape().to_vec(),
                right: vec![k],
            });
        }
        let m = av.rows();
        let mut data = Vec::with_capacity(m * k);
        for i in 0..m {
            data.extend(std::iter::repeat_n(av.data()[i], k));
        }
        let v = Array::from_vec(vec![m, k], data)?;
        Ok(self.push(v, Op::BroadcastCols(a)))
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum(&mut self, a: VarId) -> VarId {
        let v = Array::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn reshape(&mut self, a: VarId, shape: Vec<usize>) -> Result<VarId> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// Row gather: output row `e` is input row `ids[e]`.
    pub fn gather(&mut self, src: VarId, ids: Rc<Vec<usize>>) -> Result<VarId> {
        let sv = self.value(src);
        let rows = sv.rows();
        let cols = sv.cols();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids.iter() {
            if i >= rows {
                return Err(Error::IndexOutOfRange {
                    what: "gather row",
                    index: i,
                    size: rows,
                });
            }
            data.extend_from_slice(sv.row(i));
        }
        let v = Array::from_vec(vec![ids.len(), cols], data)?;
        Ok(self.push(v, Op::Gather { src, ids }))
    }

    /// Segment sum: output row `s` is the sum of all input rows whose id is
    /// `s`; empty segments are zero.
    pub fn segment_sum(
        &mut self,
        src: VarId,
        ids: Rc<Vec<usize>>,
        num_segments: usize,
    ) -> Result<VarId> {
        let sv = self.value(src);
        if sv.rank() != 2 || sv.rows() != ids.len() {
            return Err(Error::ShapeMismatch {
                op: "segment_sum",
                left: sv.shape().to_vec(),
                right: vec![ids.len()],
            });
        }
        let cols = sv.cols();
        let mut data = vec![0.0; num_segments * cols];
        for (e, &s) in ids.iter().enumerate() {
            if s >= num_segments {
                return Err(Error::IndexOutOfRange {
                    what: "segment id",
                    index: s,
                    size: num_segments,
                });
            }
            let row = sv.row(e);
            let out = &mut data[s * cols..(s + 1) * cols];
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        let v = Array::from_vec(vec![num_segments, cols], data)?;
        Ok(self.push(v, Op::SegmentSum { src, ids }))
    }

    /// Concatenates rank-2 arrays with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId> {
        debug_assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            if pv.rank() != 2 || pv.rows() != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: pv.shape().to_vec(),
                });
            }
            widths.push(pv.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let v = Array::from_vec(vec![rows, total], data)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `[start, start + len)` of a rank-2 array.
    pub fn slice_cols(&mut self, src: VarId, start: usize, len: usize) -> Result<VarId> {
        let sv = self.value(src);
        if sv.rank() != 2 || start + len > sv.cols() {
            return Err(Error::IndexOutOfRange {
                what: "column slice",
                index: start + len,
                size: if sv.rank() == 2 { sv.cols() } else { 0 },
            });
        }
        let rows = sv.rows();
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&sv.row(i)[start..start + len]);
        }
        let v = Array::from_vec(vec![rows, len], data)?;
        Ok(self.push(v, Op::SliceCols { src, start, len }))
    }

    /// Reverse pass from a scalar root. Returns one gradient per node;
    /// non-participating leaves read back as zero.
    pub fn backward(&self, root: VarId) -> Result<Gradients> {
        if !self.recording {
            return Err(Error::Parameter(
                "backward on a non-recording tape".to_string(),
            ));
        }
        if self.value(root).len() != 1 {
            return Err(Error::Parameter(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array::ones(self.shape(root).to_vec()));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            // Leaf gradients stay in place for the caller; interior gradients
            // are consumed as they propagate.
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    let ga = g.mul(self.value(*b))?;
                    let gb = g.mul(self.value(*a))?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    let ga = g.zip_with(bv, |gi, bi| gi / bi);
                    let gb = g.zip3(self.value(*a), bv, |gi, ai, bi| -gi * ai / (bi * bi));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Neg(a) => accumulate(&mut grads, *a, g.map(|x| -x)),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::MulScalar(a, c) => accumulate(&mut grads, *a, g.scale(*c)),
                Op::Recip(a) => {
                    let y = &node.value;
                    accumulate(&mut grads, *a, g.zip_with(y, |gi, yi| -gi * yi * yi));
                }
                Op::Log(a) => {
                    let xv = self.value(*a);
                    accumulate(&mut grads, *a, g.zip_with(xv, |gi, xi| gi / xi));
                }
                Op::Sqrt(a) => {
                    let y = &node.value;
                    accumulate(&mut grads, *a, g.zip_with(y, |gi, yi| gi / (2.0 * yi)));
                }
                Op::Squareplus(a) => {
                    let xv = self.value(*a);
                    accumulate(
                        &mut grads,
                        *a,
                        g.zip_with(xv, |gi, xi| gi * squareplus_prime(xi)),
                    );
                }
                Op::MaxScalar(a, c) => {
                    let xv = self.value(*a);
                    accumulate(
                        &mut grads,
                        *a,
                        g.zip_with(xv, |gi, xi| if xi >= *c { gi } else { 0.0 }),
                    );
                }
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    accumulate(&mut grads, *a, matmul_nt(&g, bv));
                    accumulate(&mut grads, *b, matmul_tn(av, &g));
                }
                Op::AddBias(a, bias) => {
                    let n = self.value(*bias).shape()[0];
                    let mut gb = vec![0.0; n];
                    for (idx, &gi) in g.data().iter().enumerate() {
                        gb[idx % n] += gi;
                    }
                    accumulate(&mut grads, *a, g);
                    accumulate(
                        &mut grads,
                        *bias,
                        Array::from_vec(vec![n], gb).expect("bias grad"),
                    );
                }
                Op::BroadcastCols(a) => {
                    let m = self.value(*a).rows();
                    let k = node.value.cols();
                    let ga: Vec<f64> = g.data().chunks_exact(k).map(|row| row.iter().sum()).collect();
                    accumulate(
                        &mut grads,
                        *a,
                        Array::from_vec(vec![m, 1], ga).expect("broadcast grad"),
                    );
                }
                Op::Sum(a) => {
                    let gi = g.item();
                    accumulate(&mut grads, *a, Array::full(self.shape(*a).to_vec(), gi));
                }
                Op::Reshape(a) => {
                    let reshaped = g
                        .clone()
                        .reshape(self.shape(*a).to_vec())
                        .expect("reshape grad");
                    accumulate(&mut grads, *a, reshaped);
                }
                Op::Gather { src, ids } => {
                    let sv = self.value(*src);
                    let cols = sv.cols();
                    let mut gs = Array::zeros(sv.shape().to_vec());
                    for (e, &i) in ids.iter().enumerate() {
                        let grow = &g.data()[e * cols..(e + 1) * cols];
                        let out = &mut gs.data_mut()[i * cols..(i + 1) * cols];
                        for (o, &x) in out.iter_mut().zip(grow) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *src, gs);
                }
                Op::SegmentSum { src, ids } => {
                    let sv = self.value(*src);
                    let cols = sv.cols();
                    let mut gs = Vec::with_capacity(sv.len());
                    for &s in ids.iter() {
                        gs.extend_from_slice(&g.data()[s * cols..(s + 1) * cols]);
                    }
                    accumulate(
                        &mut grads,
                        *src,
                        Array::from_vec(sv.shape().to_vec(), gs).expect("segment grad"),
                    );
                }
                Op::ConcatCols(parts) => {
                    let rows = node.value.rows();
                    let total = node.value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut gp = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            let start = i * total + offset;
                            gp.extend_from_slice(&g.data()[start..start + w]);
                        }
                        offset += w;
                        accumulate(
                            &mut grads,
                            p,
                            Array::from_vec(vec![rows, w], gp).expect("concat grad"),
                        );
                    }
                }
                Op::SliceCols { src, start, len } => {
                    let (start, len) = (*start, *len);
                    let sv = self.value(*src);
                    let cols = sv.cols();
                    let rows = sv.rows();
                    let mut gs = Array::zeros(sv.shape().to_vec());
                    for i in 0..rows {
                        let grow = &g.data()[i * len..(i + 1) * len];
                        let out = &mut gs.data_mut()[i * cols + start..i * cols + start + len];
                        for (o, &x) in out.iter_mut().zip(grow) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *src, gs);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Array>], id: VarId, g: Array) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot => *slot = Some(g),
    }
}

/// `a · bᵀ` without materializing the transpose.
fn matmul_nt(a: &Array, b: &Array) -> Array {
    let (m, k) = (a.rows(), a.cols());
    let n = b.rows();
    debug_assert_eq!(b.cols(), k);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = a.row(i);
        for j in 0..n {
            let b_row = b.row(j);
            out[i * n + j] = a_row.iter().zip(b_row).map(|(&x, &y)| x * y).sum();
        }
    }
    Array::from_vec(vec![m, n], out).expect("matmul_nt")
}

/// `aᵀ · b` without materializing the transpose.
fn matmul_tn(a: &Array, b: &Array) -> Array {
    let (k, m) = (a.rows(), a.cols());
    let n = b.cols();
    debug_assert_eq!(b.rows(), k);
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let a_row = a.row(p);
        let b_row = b.row(p);
        for (i, &av) in a_row.iter().enumerate() {
            let o = &mut out[i * n..(i + 1) * n];
            for (x, &bv) in o.iter_mut().zip(b_row) {
                *x += av * bv;
            }
        }
    }
    Array::from_vec(vec![m, n], out).expect("matmul_tn")
}

impl Array {
    fn zip_with(&self, other: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
        debug_assert_eq!(self.shape(), other.shape());
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Array::from_vec(self.shape().to_vec(), data).expect("zip_with")
    }

    fn zip3(&self, b: &Array, c: &Array, f: impl Fn(f64, f64, f64) -> f64) -> Array {
        let data = self
            .data()
            .iter()
            .zip(b.data())
            .zip(c.data())
            .map(|((&x, &y), &z)| f(x, y, z))
            .collect();
        Array::from_vec(self.shape().to_vec(), data).expect("zip3")
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`VarId`].
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// Gradient for `id`, or a zero array of the leaf's shape if the node did
    /// not participate in the result.
    pub fn get(&self, id: VarId, tape: &Tape) -> Array {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Array::zeros(tape.shape(id).to_vec()),
        }
    }

    pub fn take(&mut self, id: VarId, tape: &Tape) -> Array {
        match self.grads[id.0].take() {
            Some(g) => g,
            None => Array::zeros(tape.shape(id).to_vec()),
        }
    }
}
