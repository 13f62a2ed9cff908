//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each primitive pushes a node
//! holding its output value and enough saved state to run its vector-Jacobian
//! product; [`Tape::backward`] walks the nodes once in reverse order.

use std::borrow::Cow;
use std::cell::{Ref, RefCell};
use std::rc::Rc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    BroadcastRows(Var),
    Scale(Var, f64),
    Silu(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    Min(Var, Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax(Var),
    LogSoftmax(Var),
    AddMask(Var),
    SplitHeads { x: Var, batch: usize, len: usize, heads: usize },
    MergeHeads { x: Var, batch: usize, len: usize, heads: usize },
    GatherRows { x: Var, rows: Vec<Option<usize>> },
    Pick { x: Var, cols: Vec<usize> },
    IndexSum { x: Var, index: Vec<Option<usize>> },
    Sum(Var),
    Mean(Var),
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Operation record for one forward pass. Parameters may be borrowed for the
/// lifetime `'p` so binding a large parameter set costs no copies.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: RefCell<Vec<Node<'p>>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` if nothing reached it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

/// `c = a·b + beta·c` for row-major `c` of shape `m×n`; `a` and `b` are
/// addressed through explicit (row, column) strides so transposes are free.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    assert!((m - 1) * sa.0 + (k - 1) * sa.1 < a.len(), "gemm: lhs out of bounds");
    assert!((k - 1) * sb.0 + (n - 1) * sb.1 < b.len(), "gemm: rhs out of bounds");
    // SAFETY: the asserts above bound every index dgemm reads from `a` and
    // `b`, and `c` is exactly m×n with row stride n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

/// Epsilon added to the variance inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(
            !value.data().iter().any(|x| x.is_nan()),
            "NaN produced by {op:?}"
        );
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Cow::Owned(value), op, needs_grad });
        Var(nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    /// A value that receives no gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A trainable leaf owned by the tape.
    pub fn param(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A trainable leaf borrowed from outside the tape.
    pub fn param_ref(&self, t: &'p Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Cow::Borrowed(t), op: Op::Leaf, needs_grad: true });
        Var(nodes.len() - 1)
    }

    pub fn get(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |nodes| nodes[v.0].value.as_ref())
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.get(v).shape().to_vec()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.get(v).item()
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (ta, tb) = (self.get(a), self.get(b));
            if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
                return Err(Error::Dimension(format!(
                    "matmul {:?} x {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, ta.data(), (k, 1), tb.data(), (n, 1), 0.0, &mut c);
            Tensor::new(vec![m, n], c)?
        };
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), g))
    }

    /// Grouped product `[g×m×k] · [g×k×n]`, or `[g×m×k] · [g×n×k]ᵀ` when
    /// `trans_b` is set.
    pub fn batch_matmul(&self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let out = {
            let (ta, tb) = (self.get(a), self.get(b));
            let (sa, sb) = (ta.shape(), tb.shape());
            if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
                return Err(Error::Dimension(format!("batch_matmul {sa:?} x {sb:?}")));
            }
            let (g, m, k) = (sa[0], sa[1], sa[2]);
            let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
            if kb != k {
                return Err(Error::Dimension(format!("batch_matmul {sa:?} x {sb:?}")));
            }
            let mut c = vec![0.0; g * m * n];
            let strides_b = if trans_b { (1, k) } else { (n, 1) };
            for i in 0..g {
                gemm(
                    m,
                    k,
                    n,
                    &ta.data()[i * m * k..(i + 1) * m * k],
                    (k, 1),
                    &tb.data()[i * k * n..(i + 1) * k * n],
                    strides_b,
                    0.0,
                    &mut c[i * m * n..(i + 1) * m * n],
                );
            }
            Tensor::new(vec![g, m, n], c)?
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::BatchMatMul { a, b, trans_b }, needs))
    }

    fn zip(&self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.get(a), self.get(b));
        same_shape(&ta, &tb, what)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.get(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same length")
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), g))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "sub", |x, y| x - y)?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), g))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), g))
    }

    pub fn min(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "min", f64::min)?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Min(a, b), g))
    }

    fn rowwise(&self, x: Var, v: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (tx, tv) = (self.get(x), self.get(v));
        let n = tx.cols();
        if tv.len() != n || tx.shape().is_empty() {
            return Err(Error::Dimension(format!(
                "{what}: {:?} with row vector {:?}",
                tx.shape(),
                tv.shape()
            )));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(tv.data()).for_each(|(a, &b)| *a = f(*a, b));
        }
        Tensor::new(tx.shape().to_vec(), data)
    }

    /// Adds a length-`n` vector to every row of `[…×n]`.
    pub fn add_row(&self, x: Var, v: Var) -> Result<Var> {
        let out = self.rowwise(x, v, "add_row", |a, b| a + b)?;
        let g = self.needs(x) || self.needs(v);
        Ok(self.push(out, Op::AddRow(x, v), g))
    }

    /// Multiplies every row of `[…×n]` elementwise by a length-`n` vector.
    pub fn mul_row(&self, x: Var, v: Var) -> Result<Var> {
        let out = self.rowwise(x, v, "mul_row", |a, b| a * b)?;
        let g = self.needs(x) || self.needs(v);
        Ok(self.push(out, Op::MulRow(x, v), g))
    }

    /// Repeats a length-`n` vector into `[rows×n]`.
    pub fn broadcast_rows(&self, v: Var, rows: usize) -> Var {
        let out = {
            let tv = self.get(v);
            let n = tv.len();
            let data = (0..rows).flat_map(|_| tv.data().iter().copied()).collect();
            Tensor::new(vec![rows, n], data).expect("consistent")
        };
        let g = self.needs(v);
        self.push(out, Op::BroadcastRows(v), g)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let out = self.map(a, |x| x * c);
        let g = self.needs(a);
        self.push(out, Op::Scale(a, c), g)
    }

    pub fn silu(&self, a: Var) -> Var {
        let out = self.map(a, |x| x * sigmoid(x));
        let g = self.needs(a);
        self.push(out, Op::Silu(a), g)
    }

    pub fn exp(&self, a: Var) -> Var {
        let out = self.map(a, f64::exp);
        let g = self.needs(a);
        self.push(out, Op::Exp(a), g)
    }

    /// Elementwise clamp; gradient passes only inside `[lo, hi]`.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.map(a, |x| x.clamp(lo, hi));
        let g = self.needs(a);
        self.push(out, Op::Clamp(a, lo, hi), g)
    }

    /// Per-row normalization over the last axis followed by an affine map.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (out, xhat, rstd) = {
            let (tx, tg, tb) = (self.get(x), self.get(gain), self.get(bias));
            let d = tx.cols();
            if d == 0 || tg.len() != d || tb.len() != d {
                return Err(Error::Dimension(format!(
                    "layer_norm {:?} with gain {:?} bias {:?}",
                    tx.shape(),
                    tg.shape(),
                    tb.shape()
                )));
            }
            let rows = tx.rows();
            let mut xhat = vec![0.0; tx.len()];
            let mut rstd = vec![0.0; rows];
            let mut y = vec![0.0; tx.len()];
            for r in 0..rows {
                let row = tx.row(r);
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                rstd[r] = s;
                for j in 0..d {
                    let h = (row[j] - mean) * s;
                    xhat[r * d + j] = h;
                    y[r * d + j] = h * tg.data()[j] + tb.data()[j];
                }
            }
            (Tensor::new(tx.shape().to_vec(), y)?, xhat, rstd)
        };
        let g = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, g))
    }

    /// Softmax over the last axis. `-inf` entries map to exactly zero; a row
    /// with no finite entry is rejected.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let out = {
            let tx = self.get(x);
            let n = tx.cols();
            if n == 0 {
                return Err(Error::Dimension("softmax over empty rows".into()));
            }
            let mut y = tx.data().to_vec();
            for (r, row) in y.chunks_mut(n).enumerate() {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(Error::InvalidMask(format!("row {r} is fully masked")));
                }
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                row.iter_mut().for_each(|v| *v /= total);
            }
            Tensor::new(tx.shape().to_vec(), y)?
        };
        let g = self.needs(x);
        Ok(self.push(out, Op::Softmax(x), g))
    }

    /// Log-softmax over the last axis (finite inputs).
    pub fn log_softmax(&self, x: Var) -> Result<Var> {
        let out = {
            let tx = self.get(x);
            let n = tx.cols();
            if n == 0 {
                return Err(Error::Dimension("log_softmax over empty rows".into()));
            }
            let mut y = tx.data().to_vec();
            for row in y.chunks_mut(n) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|v| *v -= lse);
            }
            Tensor::new(tx.shape().to_vec(), y)?
        };
        let g = self.needs(x);
        Ok(self.push(out, Op::LogSoftmax(x), g))
    }

    /// Adds a constant additive score mask `[b×l×l]` to attention scores
    /// shaped `[(b·heads)×l×l]`, reusing each item's mask for all its heads.
    pub fn add_mask(&self, scores: Var, mask: &Rc<Tensor>) -> Result<Var> {
        let out = {
            let ts = self.get(scores);
            let (ss, sm) = (ts.shape(), mask.shape());
            if ss.len() != 3 || sm.len() != 3 || ss[1] != sm[1] || ss[2] != sm[2] || ss[0] % sm[0] != 0 {
                return Err(Error::Dimension(format!("mask {sm:?} for scores {ss:?}")));
            }
            let block = ss[1] * ss[2];
            let heads = ss[0] / sm[0];
            let mut y = ts.data().to_vec();
            for (gi, chunk) in y.chunks_mut(block).enumerate() {
                let m = &mask.data()[(gi / heads) * block..(gi / heads + 1) * block];
                chunk.iter_mut().zip(m).for_each(|(v, &mv)| *v += mv);
            }
            Tensor::new(ss.to_vec(), y)?
        };
        let g = self.needs(scores);
        Ok(self.push(out, Op::AddMask(scores), g))
    }

    /// `[(b·l)×(h·dh)]` → `[(b·h)×l×dh]`.
    pub fn split_heads(&self, x: Var, batch: usize, len: usize, heads: usize) -> Result<Var> {
        let out = {
            let tx = self.get(x);
            let d = tx.cols();
            if tx.len() != batch * len * d || heads == 0 || d % heads != 0 {
                return Err(Error::Dimension(format!(
                    "split_heads {:?} into b={batch} l={len} h={heads}",
                    tx.shape()
                )));
            }
            let dh = d / heads;
            let mut y = vec![0.0; tx.len()];
            for b in 0..batch {
                for t in 0..len {
                    let src = &tx.data()[(b * len + t) * d..(b * len + t + 1) * d];
                    for h in 0..heads {
                        let dst = ((b * heads + h) * len + t) * dh;
                        y[dst..dst + dh].copy_from_slice(&src[h * dh..(h + 1) * dh]);
                    }
                }
            }
            Tensor::new(vec![batch * heads, len, dh], y)?
        };
        let g = self.needs(x);
        Ok(self.push(out, Op::SplitHeads { x, batch, len, heads }, g))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&self, x: Var, batch: usize, len: usize, heads: usize) -> Result<Var> {
        let out = {
            let tx = self.get(x);
            let s = tx.shape();
            if s.len() != 3 || s[0] != batch * heads || s[1] != len {
                return Err(Error::Dimension(format!(
                    "merge_heads {s:?} from b={batch} l={len} h={heads}"
                )));
            }
            let dh = s[2];
            let d = dh * heads;
            let mut y = vec![0.0; tx.len()];
            for b in 0..batch {
                for h in 0..heads {
                    for t in 0..len {
                        let src = ((b * heads + h) * len + t) * dh;
                        let dst = (b * len + t) * d + h * dh;
                        y[dst..dst + dh].copy_from_slice(&tx.data()[src..src + dh]);
                    }
                }
            }
            Tensor::new(vec![batch * len, d], y)?
        };
        let g = self.needs(x);
        Ok(self.push(out, Op::MergeHeads { x, batch, len, heads }, g))
    }

    /// Selects rows of a `[r×c]` value; `None` yields a zero row.
    pub fn gather_rows(&self, x: Var, rows: Vec<Option<usize>>) -> Result<Var> {
        let out = {
            let tx = self.get(x);
            let (r, c) = (tx.rows(), tx.cols());
            let mut y = vec![0.0; rows.len() * c];
            for (i, src) in rows.iter().enumerate() {
                if let Some(s) = *src {
                    if s >= r {
                        return Err(Error::Dimension(format!("row {s} out of {r}")));
                    }
                    y[i * c..(i + 1) * c].copy_from_slice(tx.row(s));
                }
            }
            Tensor::new(vec![rows.len(), c], y)?
        };
        let g = self.needs(x);
        Ok(self.push(out, Op::GatherRows { x, rows }, g))
    }

    /// Picks one column per row of `[r×c]`, giving `[r]`.
    pub fn pick(&self, x: Var, cols: Vec<usize>) -> Result<Var> {
        let out = {
            let tx = self.get(x);
            let (r, c) = (tx.rows(), tx.cols());
            if cols.len() != r {
                return Err(Error::Dimension(format!("pick {} columns from {r} rows", cols.len())));
            }
            let mut y = Vec::with_capacity(r);
            for (i, &j) in cols.iter().enumerate() {
                if j >= c {
                    return Err(Error::Contract(format!("column {j} out of range {c}")));
                }
                y.push(tx.data()[i * c + j]);
            }
            Tensor::new(vec![r], y)?
        };
        let g = self.needs(x);
        Ok(self.push(out, Op::Pick { x, cols }, g))
    }

    /// Scatter-adds flattened entries into `len` buckets; `None` drops the entry.
    pub fn index_sum(&self, x: Var, index: Vec<Option<usize>>, len: usize) -> Result<Var> {
        let out = {
            let tx = self.get(x);
            if index.len() != tx.len() {
                return Err(Error::Dimension(format!(
                    "index_sum: {} indices for {} values",
                    index.len(),
                    tx.len()
                )));
            }
            let mut y = vec![0.0; len];
            for (&v, ix) in tx.data().iter().zip(&index) {
                if let Some(i) = *ix {
                    if i >= len {
                        return Err(Error::Dimension(format!("bucket {i} out of {len}")));
                    }
                    y[i] += v;
                }
            }
            Tensor::new(vec![len], y)?
        };
        let g = self.needs(x);
        Ok(self.push(out, Op::IndexSum { x, index }, g))
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = self.get(x).data().iter().sum();
        let g = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), g)
    }

    pub fn mean(&self, x: Var) -> Var {
        let s = {
            let t = self.get(x);
            t.data().iter().sum::<f64>() / t.len().max(1) as f64
        };
        let g = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean(x), g)
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate additively
    /// over every use of a node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            let val = |v: Var| nodes[v.0].value.as_ref();
            let needs = |v: Var| nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(dy);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    if needs(*a) {
                        let ga = slot(&mut grads, *a, m * k);
                        // dA += dY · Bᵀ
                        gemm(m, n, k, &dy, (n, 1), tb.data(), (1, n), 1.0, ga);
                    }
                    if needs(*b) {
                        let gb = slot(&mut grads, *b, k * n);
                        // dB += Aᵀ · dY
                        gemm(k, m, n, ta.data(), (1, k), &dy, (n, 1), 1.0, gb);
                    }
                }
                Op::BatchMatMul { a, b, trans_b } => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (g, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                    let n = if *trans_b { tb.shape()[1] } else { tb.shape()[2] };
                    if needs(*a) {
                        let ga = slot(&mut grads, *a, g * m * k);
                        let sb = if *trans_b { (k, 1) } else { (1, n) };
                        for i in 0..g {
                            gemm(
                                m,
                                n,
                                k,
                                &dy[i * m * n..(i + 1) * m * n],
                                (n, 1),
                                &tb.data()[i * k * n..(i + 1) * k * n],
                                sb,
                                1.0,
                                &mut ga[i * m * k..(i + 1) * m * k],
                            );
                        }
                    }
                    if needs(*b) {
                        let gb = slot(&mut grads, *b, g * k * n);
                        for i in 0..g {
                            let ai = &ta.data()[i * m * k..(i + 1) * m * k];
                            let dyi = &dy[i * m * n..(i + 1) * m * n];
                            let gbi = &mut gb[i * k * n..(i + 1) * k * n];
                            if *trans_b {
                                // B is n×k: dB += dYᵀ · A
                                gemm(n, m, k, dyi, (1, n), ai, (k, 1), 1.0, gbi);
                            } else {
                                gemm(k, m, n, ai, (1, k), dyi, (n, 1), 1.0, gbi);
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if needs(v) {
                            let gv = slot(&mut grads, v, dy.len());
                            gv.iter_mut().zip(&dy).for_each(|(g, d)| *g += d);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if needs(*a) {
                        let ga = slot(&mut grads, *a, dy.len());
                        ga.iter_mut().zip(&dy).for_each(|(g, d)| *g += d);
                    }
                    if needs(*b) {
                        let gb = slot(&mut grads, *b, dy.len());
                        gb.iter_mut().zip(&dy).for_each(|(g, d)| *g -= d);
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    if needs(*a) {
                        let ga = slot(&mut grads, *a, dy.len());
                        for i in 0..dy.len() {
                            ga[i] += dy[i] * tb.data()[i];
                        }
                    }
                    if needs(*b) {
                        let gb = slot(&mut grads, *b, dy.len());
                        for i in 0..dy.len() {
                            gb[i] += dy[i] * ta.data()[i];
                        }
                    }
                }
                Op::Min(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    for i in 0..dy.len() {
                        let target = if ta.data()[i] <= tb.data()[i] { *a } else { *b };
                        if needs(target) {
                            slot(&mut grads, target, dy.len())[i] += dy[i];
                        }
                    }
                }
                Op::AddRow(x, v) => {
                    let n = val(*v).len();
                    if needs(*x) {
                        let gx = slot(&mut grads, *x, dy.len());
                        gx.iter_mut().zip(&dy).for_each(|(g, d)| *g += d);
                    }
                    if needs(*v) {
                        let gv = slot(&mut grads, *v, n);
                        for row in dy.chunks(n) {
                            gv.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                        }
                    }
                }
                Op::MulRow(x, v) => {
                    let (tx, tv) = (val(*x), val(*v));
                    let n = tv.len();
                    if needs(*x) {
                        let gx = slot(&mut grads, *x, dy.len());
                        for (i, (g, d)) in gx.iter_mut().zip(&dy).enumerate() {
                            *g += d * tv.data()[i % n];
                        }
                    }
                    if needs(*v) {
                        let gv = slot(&mut grads, *v, n);
                        for (i, d) in dy.iter().enumerate() {
                            gv[i % n] += d * tx.data()[i];
                        }
                    }
                }
                Op::BroadcastRows(v) => {
                    let n = val(*v).len();
                    let gv = slot(&mut grads, *v, n);
                    for row in dy.chunks(n) {
                        gv.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                    }
                }
                Op::Scale(a, c) => {
                    let ga = slot(&mut grads, *a, dy.len());
                    ga.iter_mut().zip(&dy).for_each(|(g, d)| *g += c * d);
                }
                Op::Silu(a) => {
                    let ta = val(*a);
                    let ga = slot(&mut grads, *a, dy.len());
                    for i in 0..dy.len() {
                        let x = ta.data()[i];
                        let s = sigmoid(x);
                        ga[i] += dy[i] * s * (1.0 + x * (1.0 - s));
                    }
                }
                Op::Exp(a) => {
                    let y = node.value.data();
                    let ga = slot(&mut grads, *a, dy.len());
                    for i in 0..dy.len() {
                        ga[i] += dy[i] * y[i];
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    let ta = val(*a);
                    let ga = slot(&mut grads, *a, dy.len());
                    for i in 0..dy.len() {
                        let x = ta.data()[i];
                        if x >= *lo && x <= *hi {
                            ga[i] += dy[i];
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    let tg = val(*gain);
                    let d = tg.len();
                    if needs(*gain) {
                        let gg = slot(&mut grads, *gain, d);
                        for (i, dv) in dy.iter().enumerate() {
                            gg[i % d] += dv * xhat[i];
                        }
                    }
                    if needs(*bias) {
                        let gb = slot(&mut grads, *bias, d);
                        for (i, dv) in dy.iter().enumerate() {
                            gb[i % d] += dv;
                        }
                    }
                    if needs(*x) {
                        let gx = slot(&mut grads, *x, dy.len());
                        let mut dxhat = vec![0.0; d];
                        for (r, s) in rstd.iter().enumerate() {
                            let base = r * d;
                            let mut mean_d = 0.0;
                            let mut mean_dx = 0.0;
                            for j in 0..d {
                                dxhat[j] = dy[base + j] * tg.data()[j];
                                mean_d += dxhat[j];
                                mean_dx += dxhat[j] * xhat[base + j];
                            }
                            mean_d /= d as f64;
                            mean_dx /= d as f64;
                            for j in 0..d {
                                gx[base + j] += s * (dxhat[j] - mean_d - xhat[base + j] * mean_dx);
                            }
                        }
                    }
                }
                Op::Softmax(a) => {
                    let y = node.value.data();
                    let n = node.value.cols();
                    let ga = slot(&mut grads, *a, dy.len());
                    for (r, (yr, dr)) in y.chunks(n).zip(dy.chunks(n)).enumerate() {
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            ga[r * n + j] += yr[j] * (dr[j] - dot);
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let y = node.value.data();
                    let n = node.value.cols();
                    let ga = slot(&mut grads, *a, dy.len());
                    for (r, (yr, dr)) in y.chunks(n).zip(dy.chunks(n)).enumerate() {
                        let total: f64 = dr.iter().sum();
                        for j in 0..n {
                            ga[r * n + j] += dr[j] - yr[j].exp() * total;
                        }
                    }
                }
                Op::AddMask(a) => {
                    let ga = slot(&mut grads, *a, dy.len());
                    ga.iter_mut().zip(&dy).for_each(|(g, d)| *g += d);
                }
                Op::SplitHeads { x, batch, len, heads } => {
                    let d = val(*x).cols();
                    let dh = d / heads;
                    let gx = slot(&mut grads, *x, dy.len());
                    for b in 0..*batch {
                        for t in 0..*len {
                            for h in 0..*heads {
                                let src = ((b * heads + h) * len + t) * dh;
                                let dst = (b * len + t) * d + h * dh;
                                for j in 0..dh {
                                    gx[dst + j] += dy[src + j];
                                }
                            }
                        }
                    }
                }
                Op::MergeHeads { x, batch, len, heads } => {
                    let dh = val(*x).shape()[2];
                    let d = dh * heads;
                    let gx = slot(&mut grads, *x, dy.len());
                    for b in 0..*batch {
                        for h in 0..*heads {
                            for t in 0..*len {
                                let dst = ((b * heads + h) * len + t) * dh;
                                let src = (b * len + t) * d + h * dh;
                                for j in 0..dh {
                                    gx[dst + j] += dy[src + j];
                                }
                            }
                        }
                    }
                }
                Op::GatherRows { x, rows } => {
                    let tx = val(*x);
                    let c = tx.cols();
                    let gx = slot(&mut grads, *x, tx.len());
                    for (i, src) in rows.iter().enumerate() {
                        if let Some(s) = *src {
                            for j in 0..c {
                                gx[s * c + j] += dy[i * c + j];
                            }
                        }
                    }
                }
                Op::Pick { x, cols } => {
                    let tx = val(*x);
                    let c = tx.cols();
                    let gx = slot(&mut grads, *x, tx.len());
                    for (i, &j) in cols.iter().enumerate() {
                        gx[i * c + j] += dy[i];
                    }
                }
                Op::IndexSum { x, index } => {
                    let gx = slot(&mut grads, *x, index.len());
                    for (g, ix) in gx.iter_mut().zip(index) {
                        if let Some(i) = *ix {
                            *g += dy[i];
                        }
                    }
                }
                Op::Sum(a) => {
                    let n = val(*a).len();
                    let ga = slot(&mut grads, *a, n);
                    ga.iter_mut().for_each(|g| *g += dy[0]);
                }
                Op::Mean(a) => {
                    let n = val(*a).len();
                    let ga = slot(&mut grads, *a, n);
                    let s = dy[0] / n.max(1) as f64;
                    ga.iter_mut().for_each(|g| *g += s);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        t(shape, &(0..n).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<_>>())
    }

    /// Central-difference check of `f` over every entry of every input.
    fn check_grad<F>(inputs: &[Tensor], f: F, tol: f64)
    where
        F: Fn(&Tape, &[Var]) -> Var,
    {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let loss = f(&tape, &vars);
        let grads = tape.backward(loss).unwrap();
        let h = 1e-5;
        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[k], x.len());
            for i in 0..x.len() {
                let eval = |delta: f64| {
                    let mut ins = inputs.to_vec();
                    ins[k].data_mut()[i] += delta;
                    let tape = Tape::new();
                    let vars: Vec<_> = ins.into_iter().map(|x| tape.param(x)).collect();
                    let l = f(&tape, &vars);
                    tape.item(l)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic[i];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
                assert!(err < tol, "input {k} entry {i}: analytic {a} vs fd {fd}");
            }
        }
    }

    #[test]
    fn matmul_identity_and_annihilation() {
        let tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.get(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let row = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        let col = tape.constant(t(&[2, 1], &[0.0, 5.0]));
        let out = tape.matmul(row, col).unwrap();
        assert_eq!(tape.get(out).data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_sum_gradient_is_ones_times_b_transposed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let tape = Tape::new();
        let (va, vb) = (tape.param(a.clone()), tape.param(b.clone()));
        let out = tape.matmul(va, vb).unwrap();
        let loss = tape.sum(out);
        let grads = tape.backward(loss).unwrap();
        let ga = grads.get(va).unwrap();
        for i in 0..3 {
            for k in 0..4 {
                let expected = b.data()[k * 2] + b.data()[k * 2 + 1];
                assert!((ga[i * 4 + k] - expected).abs() < 1e-12);
            }
        }
        check_grad(&[a, b], |tp, v| {
            let o = tp.matmul(v[0], v[1]).unwrap();
            tp.sum(o)
        }, 1e-6);
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3, 3], &[
            0.0, 0.0, f64::NEG_INFINITY,
            0.0, 2f64.ln(), f64::NEG_INFINITY,
            5.0, f64::NEG_INFINITY, 5.0,
        ]));
        let y = tape.softmax(x).unwrap();
        let y = tape.get(y);
        assert_eq!(&y.data()[0..3], &[0.5, 0.5, 0.0]);
        assert!((y.data()[3] - 1.0 / 3.0).abs() < 1e-15);
        assert!((y.data()[4] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(&y.data()[6..9], &[0.5, 0.0, 0.5]);
    }

    #[test]
    fn softmax_fully_masked_row_is_rejected() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[f64::NEG_INFINITY, f64::NEG_INFINITY]));
        assert!(matches!(tape.softmax(x), Err(Error::InvalidMask(_))));
    }

    #[test]
    fn silu_values_and_gradient() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[0.0, 1.0]));
        let y = tape.silu(x);
        assert_eq!(tape.get(y).data()[0], 0.0);
        // 1/(1+e^-1) evaluated independently
        assert!((tape.get(y).data()[1] - 0.731_058_578_630_004_9).abs() < 1e-15);

        let h = 1e-5;
        let f = |x: f64| x / (1.0 + (-x).exp());
        let fd = (f(0.3 + h) - f(0.3 - h)) / (2.0 * h);
        let tape = Tape::new();
        let x = tape.param(t(&[1], &[0.3]));
        let y = tape.silu(x);
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert!((g.get(x).unwrap()[0] - fd).abs() < 1e-8);
    }

    #[test]
    fn layer_norm_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[3.0, 3.0, 1.0, 3.0]));
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.layer_norm(x, g, b).unwrap();
        let y = tape.get(y);
        assert_eq!(&y.data()[0..2], &[0.0, 0.0]);
        // (x-μ)/√(σ²+ε) with μ=2, σ²=1
        let expected = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!((y.data()[2] + expected).abs() < 1e-15);
        assert!((y.data()[3] - expected).abs() < 1e-15);
        assert!(1.0 - expected < 1e-4);
    }

    #[test]
    fn layer_norm_rows_have_zero_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tape = Tape::new();
        let x = tape.constant(random(&[6, 7], &mut rng));
        let g = tape.constant(random(&[7], &mut rng));
        let b = tape.constant(Tensor::zeros(&[7]));
        let y = tape.layer_norm(x, g, b).unwrap();
        let xv = tape.get(x).clone();
        let x2 = tape.constant(xv);
        let one = tape.constant(Tensor::full(&[7], 1.0));
        let y2 = tape.layer_norm(x2, one, b).unwrap();
        for r in 0..6 {
            let m: f64 = tape.get(y2).row(r).iter().sum::<f64>() / 7.0;
            assert!(m.abs() < 1e-9);
        }
        assert!(tape.get(y).is_finite());
    }

    #[test]
    fn backward_simple_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[3, 2, 2], &mut rng);
        let tape = Tape::new();
        let v = tape.param(x.clone());
        let l = tape.sum(v);
        let g = tape.backward(l).unwrap();
        assert!(g.get(v).unwrap().iter().all(|&d| d == 1.0));

        let tape = Tape::new();
        let v = tape.param(x.clone());
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq);
        let l = tape.scale(s, 0.5);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(v).unwrap(), x.data());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let v = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        let tape = Tape::new();
        let v = tape.param(t(&[1], &[3.0]));
        let a = tape.add(v, v).unwrap();
        let b = tape.add(a, v).unwrap();
        let l = tape.sum(b);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(v).unwrap(), &[3.0]);
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tol = 1e-6;
        let a = random(&[4, 5], &mut rng);
        let b = random(&[4, 5], &mut rng);
        let w = random(&[5], &mut rng);
        let wt = random(&[5, 5], &mut rng);
        // weighted sums avoid symmetric cancellation in the checks
        let probe = random(&[4, 5], &mut rng);
        let weigh = move |tp: &Tape, y: Var| {
            let p = tp.constant(probe.clone());
            let m = tp.mul(y, p).unwrap();
            tp.sum(m)
        };
        check_grad(&[a.clone(), b.clone()], |tp, v| weigh(tp, tp.mul(v[0], v[1]).unwrap()), tol);
        check_grad(&[a.clone(), b.clone()], |tp, v| weigh(tp, tp.sub(v[0], v[1]).unwrap()), tol);
        check_grad(&[a.clone(), b.clone()], |tp, v| weigh(tp, tp.min(v[0], v[1]).unwrap()), tol);
        check_grad(&[a.clone(), w.clone()], |tp, v| weigh(tp, tp.add_row(v[0], v[1]).unwrap()), tol);
        check_grad(&[a.clone(), w.clone()], |tp, v| weigh(tp, tp.mul_row(v[0], v[1]).unwrap()), tol);
        check_grad(&[a.clone()], |tp, v| weigh(tp, tp.silu(v[0])), tol);
        check_grad(&[a.clone()], |tp, v| weigh(tp, tp.exp(v[0])), tol);
        check_grad(&[a.clone()], |tp, v| weigh(tp, tp.softmax(v[0]).unwrap()), tol);
        check_grad(&[a.clone()], |tp, v| weigh(tp, tp.log_softmax(v[0]).unwrap()), tol);
        check_grad(&[a.clone()], |tp, v| weigh(tp, tp.clamp(v[0], -0.7, 0.9)), tol);
        check_grad(&[a.clone(), w.clone(), w.clone()], |tp, v| {
            weigh(tp, tp.layer_norm(v[0], v[1], v[2]).unwrap())
        }, tol);
        check_grad(&[a.clone(), wt.clone()], |tp, v| weigh(tp, tp.matmul(v[0], v[1]).unwrap()), tol);
        check_grad(&[w.clone()], |tp, v| weigh(tp, tp.broadcast_rows(v[0], 4)), tol);
        check_grad(&[a.clone()], |tp, v| {
            let g = tp.gather_rows(v[0], vec![Some(2), None, Some(0), Some(2)]).unwrap();
            weigh(tp, g)
        }, tol);
        check_grad(&[a.clone()], |tp, v| {
            let p = tp.pick(v[0], vec![0, 4, 2, 2]).unwrap();
            let i = tp.index_sum(p, vec![Some(0), Some(1), None, Some(0)], 2).unwrap();
            let e = tp.exp(i);
            tp.sum(e)
        }, tol);
        check_grad(&[a.clone()], |tp, v| {
            let m = tp.mean(v[0]);
            let e = tp.exp(m);
            tp.sum(e)
        }, tol);
    }

    #[test]
    fn attention_primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (batch, len, heads, dh) = (2, 3, 2, 2);
        let q = random(&[batch * len, heads * dh], &mut rng);
        let k = random(&[batch * len, heads * dh], &mut rng);
        let vv = random(&[batch * len, heads * dh], &mut rng);
        let probe = random(&[batch * len, heads * dh], &mut rng);
        let mut mask = Tensor::zeros(&[batch, len, len]);
        mask.data_mut()[len * len + 2] = f64::NEG_INFINITY;
        mask.data_mut()[len * len + len + 2] = f64::NEG_INFINITY;
        mask.data_mut()[len * len + 2 * len + 2] = f64::NEG_INFINITY;
        let mask = Rc::new(mask);
        check_grad(&[q, k, vv], |tp, v| {
            let qh = tp.split_heads(v[0], batch, len, heads).unwrap();
            let kh = tp.split_heads(v[1], batch, len, heads).unwrap();
            let vh = tp.split_heads(v[2], batch, len, heads).unwrap();
            let s = tp.batch_matmul(qh, kh, true).unwrap();
            let s = tp.add_mask(s, &mask).unwrap();
            let p = tp.softmax(s).unwrap();
            let o = tp.batch_matmul(p, vh, false).unwrap();
            let o = tp.merge_heads(o, batch, len, heads).unwrap();
            let pr = tp.constant(probe.clone());
            let m = tp.mul(o, pr).unwrap();
            tp.sum(m)
        }, 1e-6);
    }

    #[test]
    fn chain_rule_matches_fused_difference() {
        // exp(silu(x)) composed from two ops vs the closed-form derivative
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let x: f64 = rng.gen_range(-2.0..2.0);
            let tape = Tape::new();
            let v = tape.param(t(&[1], &[x]));
            let s = tape.silu(v);
            let e = tape.exp(s);
            let l = tape.sum(e);
            let g = tape.backward(l).unwrap().get(v).unwrap()[0];
            let f = |x: f64| (x * sigmoid(x)).exp();
            let h = 1e-5;
            let fd = (f(x + h) - f(x - h)) / (2.0 * h);
            assert!((g - fd).abs() / fd.abs().max(1e-3) < 1e-6);
        }
    }

    #[test]
    fn softmax_is_shift_invariant_and_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let x = random(&[3, 6], &mut rng);
            let c: f64 = rng.gen_range(-10.0..10.0);
            let shifted = Tensor::new(vec![3, 6], x.data().iter().map(|v| v + c).collect()).unwrap();
            let tape = Tape::new();
            let a = tape.constant(x);
            let b = tape.constant(shifted);
            let ya = tape.softmax(a).unwrap();
            let yb = tape.softmax(b).unwrap();
            for r in 0..3 {
                let s: f64 = tape.get(ya).row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                for (p, q) in tape.get(ya).row(r).iter().zip(tape.get(yb).row(r)) {
                    assert!((p - q).abs() < 1e-12);
                }
            }
        }
    }
}
