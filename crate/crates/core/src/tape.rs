//! Explicit per-forward-pass gradient tape.
//!
//! A [`Tape`] records every operation applied during one forward pass.
//! Parameters enter through [`Tape::param`], which borrows the tensor and
//! deduplicates by address, so a parameter used by many tokens is a single
//! leaf. [`Tape::backward`] replays the record in reverse exactly once and
//! returns [`Gradients`], which can be folded into the parameter set with
//! [`Gradients::accumulate_into`].
//!
//! Frozen or non-trainable tensors enter the tape as constants and never
//! receive gradient.
//!
//! The tape also keeps a running fingerprint of every piecewise decision
//! taken during the pass (ReLU masks, argmax picks, top-k selections). Two
//! passes with equal fingerprints lie on the same smooth piece, which lets
//! [`gradcheck`](crate::gradcheck) recognise probes that straddle a kink.

use alloc::borrow::Cow;
use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels;
use crate::params::Parameters;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Transpose(Var),
    SliceRows { src: Var, start: usize },
    ConcatRows(Vec<Var>),
    SliceCols { src: Var, start: usize },
    ConcatCols(Vec<Var>),
    Index { src: Var, idx: usize },
    Sum(Var),
    MeanRows(Var),
    RowEntropy(Var),
    RowMax(Var),
    Reshape(Var),
    Gather { src: Var, idx: Vec<usize> },
    GatherRows { src: Var, rows: Vec<usize> },
    ScatterRows { src: Var, rows: Vec<usize> },
    ScaleRows(Var, Var),
}

#[derive(Debug)]
struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    tracked: bool,
}

fn rows_of(shape: &[usize]) -> usize {
    if shape.len() >= 2 {
        shape[..shape.len() - 1].iter().product()
    } else {
        1
    }
}

fn cols_of(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

#[inline]
fn mix(h: u64, v: u64) -> u64 {
    (h ^ v).wrapping_mul(0x100_0000_01B3).rotate_left(17) ^ 0x9E37_79B9_7F4A_7C15
}

#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    params: BTreeMap<usize, Var>,
    pattern: u64,
}

fn key_of(t: &Tensor) -> usize {
    t as *const Tensor as usize
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Fingerprint of all piecewise decisions recorded so far.
    pub fn pattern(&self) -> u64 {
        self.pattern
    }

    /// Folds a discrete decision (e.g. a routing choice) into the pattern.
    pub fn note_decision(&mut self, v: u64) {
        self.pattern = mix(self.pattern, v);
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [f64]>, op: Op, tracked: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn rows(&self, v: Var) -> usize {
        rows_of(self.shape(v))
    }

    pub fn cols(&self, v: Var) -> usize {
        cols_of(self.shape(v))
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("recorded shapes are valid")
    }

    /// Registers a parameter. Trainable tensors become gradient leaves;
    /// frozen or plain tensors become constants. Repeated registration of
    /// the same tensor returns the same handle.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        let key = key_of(t);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let tracked = t.is_trainable();
        let op = if tracked { Op::Leaf } else { Op::Const };
        let v = self.push(t.shape().to_vec(), Cow::Borrowed(t.data()), op, tracked);
        if tracked {
            self.params.insert(key, v);
        }
        v
    }

    /// Records an owned value that needs gradients (e.g. an input probed by a test).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Const, false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.push(t.shape().to_vec(), Cow::Borrowed(t.data()), Op::Const, false)
    }

    /// Same value, no gradient flow.
    pub fn stop_grad(&mut self, a: Var) -> Var {
        let n = &self.nodes[a.0];
        let (shape, value) = (n.shape.clone(), n.value.to_vec());
        self.push(shape, Cow::Owned(value), Op::Const, false)
    }

    fn unary(&mut self, a: Var, op: Op, value: Vec<f64>) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        let tracked = self.tracked(a);
        self.push(shape, Cow::Owned(value), op, tracked)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, k2, n) = match (sa, sb) {
            ([m, k], [k2, n]) => (*m, *k, *k2, *n),
            _ => return Err(Error::shape("matmul", sa, sb)),
        };
        if k != k2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(vec![m, n], Cow::Owned(out), Op::MatMul(a, b), tracked))
    }

    /// `x · wᵀ + b` for `x: [in]` or `[n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (out_dim, in_dim) = match sw.as_slice() {
            [o, i] => (*o, *i),
            _ => return Err(Error::shape("linear", &sx, &sw)),
        };
        if sx.len() > 2 || cols_of(&sx) != in_dim {
            return Err(Error::shape("linear", &sx, &sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [out_dim] {
                return Err(Error::shape("linear bias", self.shape(b), &[out_dim]));
            }
        }
        let n = rows_of(&sx);
        let mut out = vec![0.0; n * out_dim];
        if let Some(b) = b {
            let bv = self.value(b);
            for row in out.chunks_mut(out_dim) {
                row.copy_from_slice(bv);
            }
        }
        kernels::matmul_bt_acc(self.value(x), self.value(w), &mut out, n, in_dim, out_dim);
        let shape = if sx.len() == 1 { vec![out_dim] } else { vec![n, out_dim] };
        let tracked = self.tracked(x) || self.tracked(w) || b.is_some_and(|b| self.tracked(b));
        Ok(self.push(shape, Cow::Owned(out), Op::Linear { x, w, b }, tracked))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, self.shape(a), self.shape(b)));
        }
        Ok(self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(v), Op::Add(a, b), tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(v), Op::Sub(a, b), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(v), Op::Mul(a, b), tracked))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "div", |x, y| x / y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(v), Op::Div(a, b), tracked))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).iter().map(|&x| x * s).collect();
        self.unary(a, Op::Scale(a, s), v)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).iter().map(|&x| x + c).collect();
        self.unary(a, Op::AddScalar(a), v)
    }

    /// Multiplies every entry of `a` by the single-element `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("scale_by", self.shape(a), self.shape(s)));
        }
        let k = self.item(s);
        let v = self.value(a).iter().map(|&x| x * k).collect();
        let tracked = self.tracked(a) || self.tracked(s);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(v), Op::ScaleBy(a, s), tracked))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut h = 0u64;
        let v: Vec<f64> = self
            .value(a)
            .iter()
            .map(|&x| {
                h = h.wrapping_mul(3).wrapping_add((x > 0.0) as u64);
                x.max(0.0)
            })
            .collect();
        self.note_decision(h);
        self.unary(a, Op::Relu(a), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|&x| kernels::sigmoid(x)).collect();
        self.unary(a, Op::Sigmoid(a), v)
    }

    /// Softmax over the last dimension; mask-sentinel entries become 0.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let mut out = vec![0.0; self.value(a).len()];
        kernels::softmax_rows(self.value(a), self.cols(a), &mut out)
            .map_err(|row| Error::EmptyAttentionRow { row })?;
        Ok(self.unary(a, Op::Softmax(a), out))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut out = vec![0.0; self.value(a).len()];
        kernels::log_softmax_rows(self.value(a), self.cols(a), &mut out);
        self.unary(a, Op::LogSoftmax(a), out)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = match self.shape(a) {
            [r, c] => (*r, *c),
            s => return Err(Error::shape("transpose", s, &[0, 0])),
        };
        let mut out = vec![0.0; r * c];
        kernels::transpose(self.value(a), r, c, &mut out);
        let tracked = self.tracked(a);
        Ok(self.push(vec![c, r], Cow::Owned(out), Op::Transpose(a), tracked))
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = match self.shape(a) {
            [r, c] => (*r, *c),
            s => return Err(Error::shape("slice_rows", s, &[start, len])),
        };
        if len == 0 || start + len > r {
            return Err(Error::shape("slice_rows", &[r, c], &[start, len]));
        }
        let v = self.value(a)[start * c..(start + len) * c].to_vec();
        let tracked = self.tracked(a);
        Ok(self.push(vec![len, c], Cow::Owned(v), Op::SliceRows { src: a, start }, tracked))
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let r = self.slice_rows(a, i, 1)?;
        let c = self.cols(a);
        self.reshape(r, &[c])
    }

    /// Stacks matrices (or vectors, as single rows) along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::config("parts", "nothing to concatenate"))?;
        let c = self.cols(first);
        let mut rows = 0;
        let mut v = Vec::new();
        let mut tracked = false;
        for &p in parts {
            if self.cols(p) != c || self.shape(p).len() > 2 {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += self.rows(p);
            v.extend_from_slice(self.value(p));
            tracked |= self.tracked(p);
        }
        Ok(self.push(vec![rows, c], Cow::Owned(v), Op::ConcatRows(parts.to_vec()), tracked))
    }

    /// Columns `start..start+len` of a matrix (or entries of a vector).
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (r, c) = (rows_of(&shape), cols_of(&shape));
        if len == 0 || start + len > c || shape.len() > 2 {
            return Err(Error::shape("slice_cols", &shape, &[start, len]));
        }
        let src = self.value(a);
        let mut v = Vec::with_capacity(r * len);
        for row in src.chunks(c) {
            v.extend_from_slice(&row[start..start + len]);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 1") = len;
        let tracked = self.tracked(a);
        Ok(self.push(out_shape, Cow::Owned(v), Op::SliceCols { src: a, start }, tracked))
    }

    /// Concatenates along the last axis; leading extents must agree.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::config("parts", "nothing to concatenate"))?;
        let lead: Vec<usize> = {
            let s = self.shape(first);
            s[..s.len() - 1].to_vec()
        };
        let r = rows_of(self.shape(first));
        let mut total = 0;
        let mut tracked = false;
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat_cols", self.shape(first), s));
            }
            total += cols_of(s);
            tracked |= self.tracked(p);
        }
        let mut v = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let c = self.cols(p);
                v.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(shape, Cow::Owned(v), Op::ConcatCols(parts.to_vec()), tracked))
    }

    /// Single flat element as a one-element vector.
    pub fn index(&mut self, a: Var, idx: usize) -> Result<Var> {
        let n = self.value(a).len();
        if idx >= n {
            return Err(Error::shape("index", self.shape(a), &[idx]));
        }
        let v = vec![self.value(a)[idx]];
        let tracked = self.tracked(a);
        Ok(self.push(vec![1], Cow::Owned(v), Op::Index { src: a, idx }, tracked))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let tracked = self.tracked(a);
        self.push(vec![1], Cow::Owned(vec![s]), Op::Sum(a), tracked)
    }

    /// Mean over rows: `[n, c] -> [c]`. A vector is returned unchanged in value.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = (self.rows(a), self.cols(a));
        let mut out = vec![0.0; c];
        for row in self.value(a).chunks(c) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in out.iter_mut() {
            *o /= r as f64;
        }
        let tracked = self.tracked(a);
        self.push(vec![c], Cow::Owned(out), Op::MeanRows(a), tracked)
    }

    /// Shannon entropy of each row: `[n, c] -> [n]`.
    pub fn row_entropy(&mut self, a: Var) -> Var {
        let (r, c) = (self.rows(a), self.cols(a));
        let out = self.value(a).chunks(c).map(kernels::entropy).collect();
        let tracked = self.tracked(a);
        self.push(vec![r], Cow::Owned(out), Op::RowEntropy(a), tracked)
    }

    /// Maximum of each row: `[n, c] -> [n]`.
    pub fn row_max(&mut self, a: Var) -> Var {
        let (r, c) = (self.rows(a), self.cols(a));
        let mut h = 0u64;
        let out: Vec<f64> = self
            .value(a)
            .chunks(c)
            .map(|row| {
                let i = kernels::argmax(row);
                h = h.wrapping_mul(31).wrapping_add(i as u64);
                row[i]
            })
            .collect();
        self.note_decision(h);
        let tracked = self.tracked(a);
        self.push(vec![r], Cow::Owned(out), Op::RowMax(a), tracked)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let v = self.value(a).to_vec();
        let tracked = self.tracked(a);
        Ok(self.push(shape.to_vec(), Cow::Owned(v), Op::Reshape(a), tracked))
    }

    /// Flat elements `idx` of `a` as a vector.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let n = self.value(a).len();
        if idx.is_empty() || idx.iter().any(|&i| i >= n) {
            return Err(Error::shape("gather", self.shape(a), &[idx.len()]));
        }
        let src = self.value(a);
        let v = idx.iter().map(|&i| src[i]).collect();
        let tracked = self.tracked(a);
        Ok(self.push(vec![idx.len()], Cow::Owned(v), Op::Gather { src: a, idx: idx.to_vec() }, tracked))
    }

    /// Rows `rows` of the matrix `a`, in the given order: `[n, c] -> [m, c]`.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = (self.rows(a), self.cols(a));
        if rows.is_empty() || rows.iter().any(|&i| i >= r) {
            return Err(Error::shape("gather_rows", self.shape(a), &[rows.len()]));
        }
        let src = self.value(a);
        let mut v = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            v.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let tracked = self.tracked(a);
        Ok(self.push(vec![rows.len(), c], Cow::Owned(v), Op::GatherRows { src: a, rows: rows.to_vec() }, tracked))
    }

    /// Places row `k` of `a: [m, c]` at row `rows[k]` of a zero `[n, c]`
    /// matrix; repeated targets add up.
    pub fn scatter_rows(&mut self, a: Var, rows: &[usize], n: usize) -> Result<Var> {
        let (m, c) = (self.rows(a), self.cols(a));
        if rows.len() != m || rows.iter().any(|&i| i >= n) {
            return Err(Error::shape("scatter_rows", self.shape(a), &[rows.len(), n]));
        }
        let mut v = vec![0.0; n * c];
        for (k, &i) in rows.iter().enumerate() {
            add_into(&mut v[i * c..(i + 1) * c], &self.value(a)[k * c..(k + 1) * c]);
        }
        let tracked = self.tracked(a);
        Ok(self.push(vec![n, c], Cow::Owned(v), Op::ScatterRows { src: a, rows: rows.to_vec() }, tracked))
    }

    /// Row `i` of `a: [n, c]` times `s[i]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (r, c) = (self.rows(a), self.cols(a));
        if self.shape(a).len() != 2 || self.shape(s) != [r] {
            return Err(Error::shape("scale_rows", self.shape(a), self.shape(s)));
        }
        let sv = self.value(s);
        let v = self
            .value(a)
            .chunks(c)
            .zip(sv)
            .flat_map(|(row, &k)| row.iter().map(move |&x| x * k))
            .collect();
        let tracked = self.tracked(a) || self.tracked(s);
        Ok(self.push(vec![r, c], Cow::Owned(v), Op::ScaleRows(a, s), tracked))
    }

    /// Reverse-mode sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_deref() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            self.backprop_node(node, g, lo);
        }

        Ok(Gradients {
            by_node: grads,
            params: self.params.clone(),
        })
    }

    fn backprop_node(&self, node: &Node<'_>, g: &[f64], lo: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($v:expr, |$b:ident| $body:expr) => {
                if let Some($b) = grad_buf(nodes, lo, $v) {
                    $body
                }
            };
        }

        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::MatMul(a, b) => {
                let (m, k) = (rows_of(&nodes[a.0].shape), cols_of(&nodes[a.0].shape));
                let n = cols_of(&nodes[b.0].shape);
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                with_grad!(*a, |ga| kernels::matmul_bt_acc(g, bv, ga, m, n, k));
                with_grad!(*b, |gb| kernels::matmul_at_acc(av, g, gb, m, k, n));
            }
            Op::Linear { x, w, b } => {
                let n = rows_of(&nodes[x.0].shape);
                let (out_dim, in_dim) = (nodes[w.0].shape[0], nodes[w.0].shape[1]);
                let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                with_grad!(*x, |gx| kernels::matmul_acc(g, wv, gx, n, out_dim, in_dim));
                with_grad!(*w, |gw| kernels::matmul_at_acc(g, xv, gw, n, out_dim, in_dim));
                if let Some(b) = b {
                    with_grad!(*b, |gb| {
                        for row in g.chunks(out_dim) {
                            for (o, &x) in gb.iter_mut().zip(row) {
                                *o += x;
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                with_grad!(*a, |ga| add_into(ga, g));
                with_grad!(*b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                with_grad!(*a, |ga| add_into(ga, g));
                with_grad!(*b, |gb| {
                    for (o, &x) in gb.iter_mut().zip(g) {
                        *o -= x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                with_grad!(*a, |ga| {
                    for ((o, &x), &y) in ga.iter_mut().zip(g).zip(bv.iter()) {
                        *o += x * y;
                    }
                });
                with_grad!(*b, |gb| {
                    for ((o, &x), &y) in gb.iter_mut().zip(g).zip(av.iter()) {
                        *o += x * y;
                    }
                });
            }
            Op::Div(a, b) => {
                let (y, bv) = (&node.value, &nodes[b.0].value);
                with_grad!(*a, |ga| {
                    for ((o, &x), &d) in ga.iter_mut().zip(g).zip(bv.iter()) {
                        *o += x / d;
                    }
                });
                with_grad!(*b, |gb| {
                    for (((o, &x), &d), &q) in gb.iter_mut().zip(g).zip(bv.iter()).zip(y.iter()) {
                        *o -= x * q / d;
                    }
                });
            }
            Op::Scale(a, s) => with_grad!(*a, |ga| {
                for (o, &x) in ga.iter_mut().zip(g) {
                    *o += x * s;
                }
            }),
            Op::AddScalar(a) | Op::Reshape(a) => with_grad!(*a, |ga| add_into(ga, g)),
            Op::ScaleBy(a, s) => {
                let k = nodes[s.0].value[0];
                let av = &nodes[a.0].value;
                with_grad!(*a, |ga| {
                    for (o, &x) in ga.iter_mut().zip(g) {
                        *o += x * k;
                    }
                });
                with_grad!(*s, |gs| gs[0] += kernels::dot(g, av));
            }
            Op::Relu(a) => {
                let av = &nodes[a.0].value;
                with_grad!(*a, |ga| {
                    for ((o, &x), &v) in ga.iter_mut().zip(g).zip(av.iter()) {
                        if v > 0.0 {
                            *o += x;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                with_grad!(*a, |ga| {
                    for ((o, &x), &s) in ga.iter_mut().zip(g).zip(y.iter()) {
                        *o += x * s * (1.0 - s);
                    }
                });
            }
            Op::Softmax(a) => {
                let c = cols_of(&node.shape);
                let y = &node.value;
                with_grad!(*a, |ga| {
                    for ((o, gr), yr) in ga.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let s = kernels::dot(gr, yr);
                        for ((o, &gx), &yx) in o.iter_mut().zip(gr).zip(yr) {
                            *o += yx * (gx - s);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let c = cols_of(&node.shape);
                let y = &node.value;
                with_grad!(*a, |ga| {
                    for ((o, gr), yr) in ga.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let s: f64 = gr.iter().sum();
                        for ((o, &gx), &yx) in o.iter_mut().zip(gr).zip(yr) {
                            *o += gx - libm::exp(yx) * s;
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (node.shape[0], node.shape[1]);
                with_grad!(*a, |ga| {
                    // node is [r, c]; parent is [c, r]
                    for i in 0..r {
                        for j in 0..c {
                            ga[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::SliceRows { src, start } => {
                let c = cols_of(&node.shape);
                with_grad!(*src, |gs| add_into(&mut gs[start * c..start * c + g.len()], g));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = nodes[p.0].value.len();
                    with_grad!(*p, |gp| add_into(gp, &g[off..off + n]));
                    off += n;
                }
            }
            Op::SliceCols { src, start } => {
                let c = cols_of(&node.shape);
                let sc = cols_of(&nodes[src.0].shape);
                with_grad!(*src, |gs| {
                    for (srow, grow) in gs.chunks_mut(sc).zip(g.chunks(c)) {
                        add_into(&mut srow[*start..start + c], grow);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = cols_of(&node.shape);
                let mut off = 0;
                for p in parts {
                    let c = cols_of(&nodes[p.0].shape);
                    with_grad!(*p, |gp| {
                        for (prow, grow) in gp.chunks_mut(c).zip(g.chunks(total)) {
                            add_into(prow, &grow[off..off + c]);
                        }
                    });
                    off += c;
                }
            }
            Op::Index { src, idx } => with_grad!(*src, |gs| gs[*idx] += g[0]),
            Op::Sum(a) => with_grad!(*a, |ga| {
                for o in ga.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::MeanRows(a) => {
                let r = rows_of(&nodes[a.0].shape) as f64;
                let c = cols_of(&nodes[a.0].shape);
                with_grad!(*a, |ga| {
                    for row in ga.chunks_mut(c) {
                        for (o, &x) in row.iter_mut().zip(g) {
                            *o += x / r;
                        }
                    }
                });
            }
            Op::RowEntropy(a) => {
                let c = cols_of(&nodes[a.0].shape);
                let av = &nodes[a.0].value;
                with_grad!(*a, |ga| {
                    for ((o, pr), &gx) in ga.chunks_mut(c).zip(av.chunks(c)).zip(g) {
                        for (o, &p) in o.iter_mut().zip(pr) {
                            if p > 0.0 {
                                *o -= gx * (libm::log(p) + 1.0);
                            }
                        }
                    }
                });
            }
            Op::Gather { src, idx } => with_grad!(*src, |gs| {
                for (&i, &x) in idx.iter().zip(g) {
                    gs[i] += x;
                }
            }),
            Op::GatherRows { src, rows } => {
                let c = cols_of(&node.shape);
                with_grad!(*src, |gs| {
                    for (&i, grow) in rows.iter().zip(g.chunks(c)) {
                        add_into(&mut gs[i * c..(i + 1) * c], grow);
                    }
                });
            }
            Op::ScatterRows { src, rows } => {
                let c = cols_of(&node.shape);
                with_grad!(*src, |gs| {
                    for (&i, srow) in rows.iter().zip(gs.chunks_mut(c)) {
                        add_into(srow, &g[i * c..(i + 1) * c]);
                    }
                });
            }
            Op::ScaleRows(a, s) => {
                let c = cols_of(&node.shape);
                let (av, sv) = (&nodes[a.0].value, &nodes[s.0].value);
                with_grad!(*a, |ga| {
                    for ((o, gr), &k) in ga.chunks_mut(c).zip(g.chunks(c)).zip(sv.iter()) {
                        for (o, &x) in o.iter_mut().zip(gr) {
                            *o += x * k;
                        }
                    }
                });
                with_grad!(*s, |gs| {
                    for ((o, gr), ar) in gs.iter_mut().zip(g.chunks(c)).zip(av.chunks(c)) {
                        *o += kernels::dot(gr, ar);
                    }
                });
            }
            Op::RowMax(a) => {
                let c = cols_of(&nodes[a.0].shape);
                let av = &nodes[a.0].value;
                with_grad!(*a, |ga| {
                    for ((o, pr), &gx) in ga.chunks_mut(c).zip(av.chunks(c)).zip(g) {
                        o[kernels::argmax(pr)] += gx;
                    }
                });
            }
        }
    }
}

/// Gradient buffer of a tracked parent, created on first touch.
fn grad_buf<'g>(nodes: &[Node<'_>], lo: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
    if !nodes[v.0].tracked {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(lo[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, &x) in dst.iter_mut().zip(src) {
        *o += x;
    }
}

/// Result of one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    by_node: Vec<Option<Vec<f64>>>,
    params: BTreeMap<usize, Var>,
}

impl Gradients {
    /// Gradient with respect to any recorded value; `None` when no gradient
    /// reached it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.by_node.get(v.0)?.as_deref()
    }

    /// Gradient for a parameter tensor registered with [`Tape::param`].
    pub fn for_param(&self, t: &Tensor) -> Option<&[f64]> {
        let v = self.params.get(&key_of(t))?;
        self.wrt(*v)
    }

    /// Adds each parameter's gradient into its buffer. Frozen tensors are
    /// left at zero.
    pub fn accumulate_into<P: Parameters + ?Sized>(&self, params: &mut P) {
        params.visit_mut(&mut |_, t| {
            if let Some(v) = self.params.get(&key_of(t)) {
                if let Some(g) = self.by_node[v.0].as_deref() {
                    t.accumulate_grad(g);
                }
            }
        });
    }
}
