use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::{lit, numel, Float, Tensor, MASK_VALUE};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Scale(f64),
    /// tanh approximation of GELU.
    GeluFast,
    Exp,
    Log,
}

#[derive(Clone, Copy, Debug)]
struct BmmGeom {
    batch: usize,
    b_batch: usize,
    m: usize,
    p: usize,
    n: usize,
    a_size: usize,
    b_size: usize,
    rsa: isize,
    csa: isize,
    rsb: isize,
    csb: isize,
}

enum Op<T> {
    Leaf,
    Binary { a: Var, b: Var, kind: Binary },
    Unary { a: Var, kind: Unary },
    MulConst { a: Var, factor: Vec<T> },
    Bmm { a: Var, b: Var, geom: BmmGeom },
    Softmax { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Reshape { a: Var },
    Permute { a: Var, offsets: Vec<usize> },
    Concat { inputs: Vec<Var>, axis_outer: usize, chunk: Vec<usize> },
    GatherRows { table: Var, idx: Vec<usize>, width: usize },
    GatherLast { a: Var, idx: Rc<Vec<usize>>, lr: usize, cols: usize },
    ShiftRight { a: Var, outer: usize, len: usize, inner: usize, s: usize },
    RepeatInterleave { a: Var, outer: usize, len: usize, inner: usize, k: usize },
    SumAxis { a: Var, outer: usize, len: usize, inner: usize },
    SumAll { a: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<T>, probs: Vec<T>, denom: T },
}

impl<T> Op<T> {
    fn for_each_input(&self, mut f: impl FnMut(Var)) {
        match self {
            Op::Leaf => {}
            Op::Binary { a, b, .. } | Op::Bmm { a, b, .. } => {
                f(*a);
                f(*b);
            }
            Op::LayerNorm { x, gain, bias, .. } => {
                f(*x);
                f(*gain);
                f(*bias);
            }
            Op::Concat { inputs, .. } => inputs.iter().copied().for_each(f),
            Op::GatherRows { table, .. } => f(*table),
            Op::CrossEntropy { logits, .. } => f(*logits),
            Op::Unary { a, .. }
            | Op::MulConst { a, .. }
            | Op::Softmax { a }
            | Op::Reshape { a }
            | Op::Permute { a, .. }
            | Op::GatherLast { a, .. }
            | Op::ShiftRight { a, .. }
            | Op::RepeatInterleave { a, .. }
            | Op::SumAxis { a, .. }
            | Op::SumAll { a } => f(*a),
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Confined to one thread. Nodes are appended in evaluation order, so the
/// tape is topologically sorted by construction and backward visits each
/// node exactly once.
pub struct Graph<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Vec<T>>>>,
    flops: Cell<u64>,
    masked_rows: Cell<u64>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let (na, nb) = (numel(a), numel(b));
    if a == b || nb == 1 && na >= 1 {
        return Some(a.to_vec());
    }
    if na == 1 {
        return Some(b.to_vec());
    }
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        return Some(a.to_vec());
    }
    if a.len() < b.len() && b[b.len() - a.len()..] == *a {
        return Some(b.to_vec());
    }
    None
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

// tanh-form GELU written as x·σ(2u): one exp instead of a tanh.
fn gelu_fast_arg<T: Float>(x: T) -> T {
    let c: T = lit(2.0 * (2.0 / std::f64::consts::PI).sqrt());
    c * (x + lit::<T>(0.044715) * x * x * x)
}

fn sigmoid<T: Float>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

fn gelu_fast<T: Float>(x: T) -> T {
    x * sigmoid(gelu_fast_arg(x))
}

fn gelu_fast_grad<T: Float>(x: T) -> T {
    let c: T = lit(2.0 * (2.0 / std::f64::consts::PI).sqrt());
    let s = sigmoid(gelu_fast_arg(x));
    s + x * s * (T::one() - s) * c * (T::one() + lit::<T>(3.0 * 0.044715) * x * x)
}

/// Calls `f(i, j, k)` for every output index `i` with `j`, `k` the source
/// indices in operands of sizes `na`, `nb` broadcast to `n`. Operands whose
/// shape is a trailing suffix of the output repeat with period `na`/`nb`.
#[inline]
fn for_broadcast(n: usize, na: usize, nb: usize, mut f: impl FnMut(usize, usize, usize)) {
    if na == n && nb == n {
        (0..n).for_each(|i| f(i, i, i));
    } else if na == n && nb > 0 && n.is_multiple_of(nb) {
        for base in (0..n).step_by(nb) {
            (0..nb).for_each(|k| f(base + k, base + k, k));
        }
    } else if nb == n && na > 0 && n.is_multiple_of(na) {
        for base in (0..n).step_by(na) {
            (0..na).for_each(|j| f(base + j, j, base + j));
        }
    } else {
        (0..n).for_each(|i| f(i, i % na, i % nb));
    }
}

fn slot<'a, T: Float>(
    grads: &'a mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let n = node.value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            flops: Cell::new(0),
            masked_rows: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Floating-point operations spent in matrix products so far
    /// (two per multiply-add).
    pub fn flops(&self) -> u64 {
        self.flops.get()
    }

    /// Total number of values held by recorded nodes.
    pub fn activation_words(&self) -> u64 {
        self.nodes
            .borrow()
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .map(|n| n.value.numel() as u64)
            .sum()
    }

    /// Softmax rows whose every entry was masked (returned as zeros).
    pub fn fully_masked_rows(&self) -> u64 {
        self.masked_rows.get()
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Gradient accumulated by the last backward pass, if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let grads = self.grads.borrow();
        let g = grads.get(v.0)?.as_ref()?;
        let shape = self.shape(v);
        Some(Tensor::new(&shape, g.clone()).expect("grad shape"))
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let mut requires_grad = false;
        op.for_each_input(|v| requires_grad |= nodes[v.0].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    // ---- elementwise -------------------------------------------------

    pub fn binary(&self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(va.shape(), vb.shape()).ok_or_else(|| {
            Error::Dimension(format!(
                "cannot broadcast {:?} with {:?} ({kind:?})",
                va.shape(),
                vb.shape()
            ))
        })?;
        let (x, y) = (va.data(), vb.data());
        let (na, nb, n) = (x.len(), y.len(), numel(&shape));
        let f = |p: T, q: T| match kind {
            Binary::Add => p + q,
            Binary::Sub => p - q,
            Binary::Mul => p * q,
        };
        let data: Vec<T> = if na == n && nb == n {
            x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect()
        } else {
            let mut out = Vec::with_capacity(n);
            for_broadcast(n, na, nb, |_, j, k| out.push(f(x[j], y[k])));
            out
        };
        Ok(self.push(Tensor::new(&shape, data)?, Op::Binary { a, b, kind }))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn unary(&self, a: Var, kind: Unary) -> Var {
        let va = self.value(a);
        let data: Vec<T> = match kind {
            Unary::Scale(c) => {
                let c: T = lit(c);
                va.data().iter().map(|&x| c * x).collect()
            }
            Unary::GeluFast => va.data().iter().map(|&x| gelu_fast(x)).collect(),
            Unary::Exp => va.data().iter().map(|x| x.exp()).collect(),
            Unary::Log => va.data().iter().map(|x| x.ln()).collect(),
        };
        let t = Tensor::new(va.shape(), data).expect("same shape");
        self.push(t, Op::Unary { a, kind })
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(a, Unary::Scale(c))
    }

    pub fn gelu_fast(&self, a: Var) -> Var {
        self.unary(a, Unary::GeluFast)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    /// Multiplies by a constant tensor of identical shape (dropout masks).
    pub fn mul_const(&self, a: Var, factor: Vec<T>) -> Result<Var> {
        let va = self.value(a);
        if factor.len() != va.numel() {
            return Err(Error::Dimension(format!(
                "constant factor of {} values for tensor {:?}",
                factor.len(),
                va.shape()
            )));
        }
        let data = va.data().iter().zip(&factor).map(|(&x, &f)| x * f).collect();
        let t = Tensor::new(va.shape(), data)?;
        Ok(self.push(t, Op::MulConst { a, factor }))
    }

    // ---- matrix products --------------------------------------------

    /// `a[.., p] · b[p, n]`; leading axes of `a` are flattened into rows.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::Dimension(format!(
                "matmul shape mismatch: {sa:?} · {sb:?}"
            )));
        }
        let p = sb[0];
        let n = sb[1];
        let m = va.numel() / p.max(1);
        let geom = BmmGeom {
            batch: 1,
            b_batch: 1,
            m,
            p,
            n,
            a_size: m * p,
            b_size: p * n,
            rsa: p as isize,
            csa: 1,
            rsb: n as isize,
            csb: 1,
        };
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        Ok(self.bmm_with(a, b, &va, &vb, geom, shape))
    }

    /// Batched product `op(a) · op(b)` over leading axes, where `op`
    /// optionally transposes the trailing two axes. The batch axes of `b`
    /// must be a suffix of those of `a` (including none) and are repeated.
    pub fn bmm(&self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        let bad = || Error::Dimension(format!("bmm shape mismatch: {sa:?} · {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(bad());
        }
        let (ab, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        if bb.len() > ab.len() || ab[ab.len() - bb.len()..] != *bb {
            return Err(bad());
        }
        let (ar, ac) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (br, bc) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, p, rsa, csa) = if trans_a {
            (ac, ar, 1, ac as isize)
        } else {
            (ar, ac, ac as isize, 1)
        };
        let (p2, n, rsb, csb) = if trans_b {
            (bc, br, 1, bc as isize)
        } else {
            (br, bc, bc as isize, 1)
        };
        if p != p2 {
            return Err(bad());
        }
        let geom = BmmGeom {
            batch: numel(ab),
            b_batch: numel(bb),
            m,
            p,
            n,
            a_size: ar * ac,
            b_size: br * bc,
            rsa,
            csa,
            rsb,
            csb,
        };
        let mut shape = ab.to_vec();
        shape.extend([m, n]);
        Ok(self.bmm_with(a, b, &va, &vb, geom, shape))
    }

    fn bmm_with(
        &self,
        a: Var,
        b: Var,
        va: &Tensor<T>,
        vb: &Tensor<T>,
        g: BmmGeom,
        shape: Vec<usize>,
    ) -> Var {
        let mut out = vec![T::zero(); g.batch * g.m * g.n];
        if g.p > 0 {
            for i in 0..g.batch {
                let ao = &va.data()[i * g.a_size..(i + 1) * g.a_size];
                let bo = &vb.data()[(i % g.b_batch) * g.b_size..][..g.b_size];
                let co = &mut out[i * g.m * g.n..(i + 1) * g.m * g.n];
                // SAFETY: slices cover exactly the strided extents described by `g`.
                unsafe {
                    T::gemm(
                        g.m,
                        g.p,
                        g.n,
                        T::one(),
                        ao.as_ptr(),
                        g.rsa,
                        g.csa,
                        bo.as_ptr(),
                        g.rsb,
                        g.csb,
                        T::zero(),
                        co.as_mut_ptr(),
                        g.n as isize,
                        1,
                    );
                }
            }
        }
        self.flops
            .set(self.flops.get() + 2 * (g.batch * g.m * g.p * g.n) as u64);
        let t = Tensor::new(&shape, out).expect("bmm shape");
        self.push(t, Op::Bmm { a, b, geom: g })
    }

    // ---- normalisers -------------------------------------------------

    /// Softmax over the last axis with an optional additive mask whose shape
    /// is a trailing suffix of `a`'s. Entries at or below half of
    /// [`MASK_VALUE`] are excluded and receive exactly zero weight; a row with
    /// no allowed entry yields zeros and is counted in
    /// [`Graph::fully_masked_rows`].
    pub fn softmax(&self, a: Var, mask: Option<&Tensor<T>>) -> Result<Var> {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| Error::Dimension("softmax of a scalar".into()))?;
        if let Some(m) = mask {
            if broadcast_shape(&shape, m.shape()).as_deref() != Some(&shape[..]) {
                return Err(Error::Dimension(format!(
                    "mask {:?} does not broadcast to {shape:?}",
                    m.shape()
                )));
            }
        }
        let threshold: T = lit(MASK_VALUE / 2.0);
        let x = va.data();
        let mut out = vec![T::zero(); x.len()];
        let mut dead = 0u64;
        let rows = if n == 0 { 0 } else { x.len() / n };
        for r in 0..rows {
            let xr = &x[r * n..(r + 1) * n];
            let yr = &mut out[r * n..(r + 1) * n];
            match mask {
                None => {
                    let mx = xr.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut s = T::zero();
                    for (y, &v) in yr.iter_mut().zip(xr) {
                        *y = (v - mx).exp();
                        s += *y;
                    }
                    let inv = T::one() / s;
                    yr.iter_mut().for_each(|y| *y *= inv);
                }
                Some(m) => {
                    let off = (r * n) % m.numel();
                    let mr = &m.data()[off..off + n];
                    let mut mx = T::neg_infinity();
                    for (&v, &mv) in xr.iter().zip(mr) {
                        if mv > threshold {
                            mx = mx.max(v + mv);
                        }
                    }
                    if mx == T::neg_infinity() {
                        dead += 1;
                        continue;
                    }
                    let mut s = T::zero();
                    for ((y, &v), &mv) in yr.iter_mut().zip(xr).zip(mr) {
                        if mv > threshold {
                            *y = (v + mv - mx).exp();
                            s += *y;
                        }
                    }
                    let inv = T::one() / s;
                    yr.iter_mut().for_each(|y| *y *= inv);
                }
            }
        }
        self.masked_rows.set(self.masked_rows.get() + dead);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { a }))
    }

    /// Normalises over the last axis, then applies `gain` and `bias`.
    pub fn layernorm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let shape = vx.shape().to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| Error::Dimension("layernorm of a scalar".into()))?;
        if vg.shape() != [n] || vb.shape() != [n] {
            return Err(Error::Dimension(format!(
                "layernorm gain/bias {:?}/{:?} for input {shape:?}",
                vg.shape(),
                vb.shape()
            )));
        }
        let rows = vx.numel() / n;
        let inv_n: T = lit(1.0 / n as f64);
        let eps: T = lit(eps);
        let mut xhat = vec![T::zero(); vx.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); vx.numel()];
        for r in 0..rows {
            let xr = &vx.data()[r * n..(r + 1) * n];
            let mean = xr.iter().copied().sum::<T>() * inv_n;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..n {
                let h = (xr[i] - mean) * rs;
                xhat[r * n + i] = h;
                out[r * n + i] = h * vg.data()[i] + vb.data()[i];
            }
        }
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    // ---- index remapping ----------------------------------------------

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if numel(shape) != va.numel() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                va.shape()
            )));
        }
        let t = Tensor::new(shape, va.data().to_vec())?;
        Ok(self.push(t, Op::Reshape { a }))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let shape = va.shape();
        let nd = shape.len();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Dimension(format!(
                "invalid permutation {perm:?} for shape {shape:?}"
            )));
        }
        let mut in_strides = vec![1usize; nd];
        for i in (0..nd.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let total = va.numel();
        let mut offsets = Vec::with_capacity(total);
        let mut idx = vec![0usize; nd];
        let mut off = 0usize;
        for _ in 0..total {
            offsets.push(off);
            for ax in (0..nd).rev() {
                idx[ax] += 1;
                off += strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                off -= strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        let data = offsets.iter().map(|&o| va.data()[o]).collect();
        let t = Tensor::new(&out_shape, data)?;
        Ok(self.push(t, Op::Permute { a, offsets }))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(Error::Dimension("transpose needs at least two axes".into()));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(a, &perm)
    }

    /// `[B, L, H·hd]` → `[B, H, L, hd]`.
    pub fn split_heads(&self, a: Var, heads: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
            return Err(Error::Dimension(format!(
                "cannot split {s:?} into {heads} heads"
            )));
        }
        let r = self.reshape(a, &[s[0], s[1], heads, s[2] / heads])?;
        self.permute(r, &[0, 2, 1, 3])
    }

    /// `[B, H, L, hd]` → `[B, L, H·hd]`.
    pub fn merge_heads(&self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 4 {
            return Err(Error::Dimension(format!("cannot merge heads of {s:?}")));
        }
        let p = self.permute(a, &[0, 2, 1, 3])?;
        self.reshape(p, &[s[0], s[2], s[1] * s[3]])
    }

    pub fn concat(&self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::Dimension("concat of nothing".into()))?);
        if axis >= first.len() {
            return Err(Error::Dimension(format!(
                "concat axis {axis} out of range for {first:?}"
            )));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        let mut chunk = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::Dimension(format!(
                    "concat mismatch: {first:?} vs {s:?} on axis {axis}"
                )));
            }
            out_shape[axis] += s[axis];
            chunk.push(numel(&s[axis..]));
        }
        let outer = numel(&first[..axis]);
        let values: Vec<_> = inputs.iter().map(|&v| self.value(v)).collect();
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for (v, &c) in values.iter().zip(&chunk) {
                data.extend_from_slice(&v.data()[o * c..(o + 1) * c]);
            }
        }
        let t = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis_outer: outer,
                chunk,
            },
        ))
    }

    /// Rows of a `[V, d]` table; output is `[idx.len(), d]`.
    pub fn gather_rows(&self, table: Var, idx: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        let s = vt.shape();
        if s.len() != 2 {
            return Err(Error::Dimension(format!("gather_rows table {s:?} is not 2-D")));
        }
        let (rows, width) = (s[0], s[1]);
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            if i >= rows {
                return Err(Error::Index(format!("row {i} out of range for {rows} rows")));
            }
            data.extend_from_slice(&vt.data()[i * width..(i + 1) * width]);
        }
        let t = Tensor::new(&[idx.len(), width], data)?;
        Ok(self.push(
            t,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
                width,
            },
        ))
    }

    /// Per-row gather on the last axis: `a[.., q, r]` → `out[.., q, c]`
    /// with `out[.., q, c] = a[.., q, idx[q·cols + c]]`.
    pub fn gather_last(&self, a: Var, idx: Rc<Vec<usize>>, cols: usize) -> Result<Var> {
        let va = self.value(a);
        let s = va.shape();
        if s.len() < 2 {
            return Err(Error::Dimension(format!("gather_last on {s:?}")));
        }
        let (lq, lr) = (s[s.len() - 2], s[s.len() - 1]);
        if idx.len() != lq * cols {
            return Err(Error::Dimension(format!(
                "gather_last index table of {} entries for {lq}×{cols}",
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= lr) {
            return Err(Error::Index(format!("column {bad} out of range for {lr}")));
        }
        let outer = va.numel() / (lq * lr).max(1);
        let mut data = Vec::with_capacity(outer * lq * cols);
        for o in 0..outer {
            for q in 0..lq {
                let row = &va.data()[(o * lq + q) * lr..][..lr];
                data.extend(idx[q * cols..(q + 1) * cols].iter().map(|&i| row[i]));
            }
        }
        let mut shape = s[..s.len() - 1].to_vec();
        shape.push(cols);
        let t = Tensor::new(&shape, data)?;
        Ok(self.push(t, Op::GatherLast { a, idx, lr, cols }))
    }

    /// Shifts along `axis` by `s` places, filling the front with zeros and
    /// dropping the last `s` entries.
    pub fn shift_right(&self, a: Var, axis: usize, s: usize) -> Result<Var> {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!("shift axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        if s >= len {
            return Err(Error::Usage(format!(
                "shift of {s} places on an axis of length {len}"
            )));
        }
        let mut data = vec![T::zero(); va.numel()];
        for o in 0..outer {
            let src = &va.data()[o * len * inner..][..(len - s) * inner];
            data[(o * len + s) * inner..][..(len - s) * inner].copy_from_slice(src);
        }
        let t = Tensor::new(&shape, data)?;
        Ok(self.push(
            t,
            Op::ShiftRight {
                a,
                outer,
                len,
                inner,
                s,
            },
        ))
    }

    /// Repeats every slice along `axis` `k` times in place.
    pub fn repeat_interleave(&self, a: Var, axis: usize, k: usize) -> Result<Var> {
        let va = self.value(a);
        let mut shape = va.shape().to_vec();
        if axis >= shape.len() || k == 0 {
            return Err(Error::Dimension(format!(
                "repeat_interleave axis {axis}, k {k} for {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        shape[axis] *= k;
        let mut data = Vec::with_capacity(va.numel() * k);
        for o in 0..outer {
            for p in 0..len {
                let row = &va.data()[(o * len + p) * inner..][..inner];
                for _ in 0..k {
                    data.extend_from_slice(row);
                }
            }
        }
        let t = Tensor::new(&shape, data)?;
        Ok(self.push(
            t,
            Op::RepeatInterleave {
                a,
                outer,
                len,
                inner,
                k,
            },
        ))
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!("sum axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut data[o * inner..(o + 1) * inner];
            for p in 0..len {
                let src = &va.data()[(o * len + p) * inner..][..inner];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let t = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            t,
            Op::SumAxis {
                a,
                outer,
                len,
                inner,
            },
        ))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll { a })
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Weighted mean negative log-likelihood (nats) of `targets` under the
    /// softmax of `logits[.., V]`. Positions with zero weight do not count.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize], weights: Option<&[T]>) -> Result<Var> {
        let vl = self.value(logits);
        let s = vl.shape();
        let v = *s
            .last()
            .ok_or_else(|| Error::Dimension("cross_entropy of a scalar".into()))?;
        let rows = vl.numel() / v.max(1);
        if targets.len() != rows {
            return Err(Error::Dimension(format!(
                "{} targets for logits {s:?}",
                targets.len()
            )));
        }
        let weights: Vec<T> = match weights {
            Some(w) if w.len() != rows => {
                return Err(Error::Dimension(format!(
                    "{} loss weights for {rows} positions",
                    w.len()
                )))
            }
            Some(w) => w.to_vec(),
            None => vec![T::one(); rows],
        };
        let denom: T = weights.iter().copied().sum();
        if denom <= T::zero() {
            return Err(Error::Usage("loss mask selects no positions".into()));
        }
        let mut probs = vec![T::zero(); vl.numel()];
        let mut total = T::zero();
        for r in 0..rows {
            let t = targets[r];
            if t >= v {
                return Err(Error::Index(format!("target {t} out of range for {v} classes")));
            }
            let row = &vl.data()[r * v..(r + 1) * v];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let pr = &mut probs[r * v..(r + 1) * v];
            let mut z = T::zero();
            for (p, &x) in pr.iter_mut().zip(row) {
                *p = (x - mx).exp();
                z += *p;
            }
            let inv = T::one() / z;
            pr.iter_mut().for_each(|p| *p *= inv);
            if weights[r] != T::zero() {
                total += weights[r] * (z.ln() + mx - row[t]);
            }
        }
        let loss = total / denom;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
                probs,
                denom,
            },
        ))
    }

    // ---- reverse pass --------------------------------------------------

    /// Backpropagates from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let v = self.value(loss);
        if !v.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                v.shape()
            )));
        }
        self.backward_with(loss, &Tensor::full(v.shape(), T::one()))
    }

    /// Vector-Jacobian product seeded with `seed` at `out`. All previously
    /// accumulated gradients are cleared first, so the same tape can be
    /// reused for several seeds.
    pub fn backward_with(&self, out: Var, seed: &Tensor<T>) -> Result<()> {
        let nodes = self.nodes.borrow();
        if seed.shape() != nodes[out.0].value.shape() {
            return Err(Error::Dimension(format!(
                "seed {:?} for output {:?}",
                seed.shape(),
                nodes[out.0].value.shape()
            )));
        }
        let mut grads = self.grads.borrow_mut();
        grads.clear();
        grads.resize(nodes.len(), None);
        if !nodes[out.0].requires_grad {
            return Ok(());
        }
        grads[out.0] = Some(seed.data().to_vec());
        for i in (0..=out.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
        }
        Ok(())
    }
}

fn backprop<T: Float>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |v: Var| Rc::clone(&nodes[v.0].value);
    match &node.op {
        Op::Leaf => {}
        Op::Binary { a, b, kind } => {
            let (va, vb) = (val(*a), val(*b));
            let (x, y) = (va.data(), vb.data());
            let (na, nb) = (x.len(), y.len());
            let n = g.len();
            if let Some(ga) = slot(grads, nodes, *a) {
                match kind {
                    Binary::Add | Binary::Sub => for_broadcast(n, na, nb, |i, j, _| ga[j] += g[i]),
                    Binary::Mul => for_broadcast(n, na, nb, |i, j, k| ga[j] += g[i] * y[k]),
                }
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                match kind {
                    Binary::Add => for_broadcast(n, na, nb, |i, _, k| gb[k] += g[i]),
                    Binary::Sub => for_broadcast(n, na, nb, |i, _, k| gb[k] -= g[i]),
                    Binary::Mul => for_broadcast(n, na, nb, |i, j, k| gb[k] += g[i] * x[j]),
                }
            }
        }
        Op::Unary { a, kind } => {
            let va = val(*a);
            let Some(ga) = slot(grads, nodes, *a) else { return };
            let x = va.data();
            match *kind {
                Unary::Scale(c) => {
                    let c: T = lit(c);
                    ga.iter_mut().zip(g).for_each(|(d, &gi)| *d += c * gi);
                }
                Unary::GeluFast => {
                    for i in 0..g.len() {
                        ga[i] += g[i] * gelu_fast_grad(x[i]);
                    }
                }
                Unary::Exp => {
                    let y = node.value.data();
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i];
                    }
                }
                Unary::Log => {
                    for i in 0..g.len() {
                        ga[i] += g[i] / x[i];
                    }
                }
            }
        }
        Op::MulConst { a, factor } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * factor[i];
                }
            }
        }
        Op::Bmm { a, b, geom } => {
            let geo = *geom;
            let (va, vb) = (val(*a), val(*b));
            let mn = geo.m * geo.n;
            if let Some(ga) = slot(grads, nodes, *a) {
                for i in 0..geo.batch {
                    let gi = &g[i * mn..(i + 1) * mn];
                    let bo = &vb.data()[(i % geo.b_batch) * geo.b_size..][..geo.b_size];
                    let dst = &mut ga[i * geo.a_size..(i + 1) * geo.a_size];
                    // dA = G · Bᵀ, written through A's strides.
                    unsafe {
                        T::gemm(
                            geo.m,
                            geo.n,
                            geo.p,
                            T::one(),
                            gi.as_ptr(),
                            geo.n as isize,
                            1,
                            bo.as_ptr(),
                            geo.csb,
                            geo.rsb,
                            T::one(),
                            dst.as_mut_ptr(),
                            geo.rsa,
                            geo.csa,
                        );
                    }
                }
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                for i in 0..geo.batch {
                    let gi = &g[i * mn..(i + 1) * mn];
                    let ao = &va.data()[i * geo.a_size..(i + 1) * geo.a_size];
                    let dst = &mut gb[(i % geo.b_batch) * geo.b_size..][..geo.b_size];
                    // dB = Aᵀ · G, written through B's strides.
                    unsafe {
                        T::gemm(
                            geo.p,
                            geo.m,
                            geo.n,
                            T::one(),
                            ao.as_ptr(),
                            geo.csa,
                            geo.rsa,
                            gi.as_ptr(),
                            geo.n as isize,
                            1,
                            T::one(),
                            dst.as_mut_ptr(),
                            geo.rsb,
                            geo.csb,
                        );
                    }
                }
            }
        }
        Op::Softmax { a } => {
            let Some(ga) = slot(grads, nodes, *a) else { return };
            let y = node.value.data();
            let n = *node.value.shape().last().unwrap_or(&1);
            if n == 0 {
                return;
            }
            for r in 0..y.len() / n {
                let yr = &y[r * n..(r + 1) * n];
                let gr = &g[r * n..(r + 1) * n];
                let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                for i in 0..n {
                    ga[r * n + i] += yr[i] * (gr[i] - dot);
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let vg = val(*gain);
            let gain_v = vg.data();
            let n = gain_v.len();
            let rows = rstd.len();
            if let Some(gg) = slot(grads, nodes, *gain) {
                for r in 0..rows {
                    for i in 0..n {
                        gg[i] += g[r * n + i] * xhat[r * n + i];
                    }
                }
            }
            if let Some(gb) = slot(grads, nodes, *bias) {
                for r in 0..rows {
                    for i in 0..n {
                        gb[i] += g[r * n + i];
                    }
                }
            }
            if let Some(gx) = slot(grads, nodes, *x) {
                let inv_n: T = lit(1.0 / n as f64);
                let mut dxhat = vec![T::zero(); n];
                for r in 0..rows {
                    let h = &xhat[r * n..(r + 1) * n];
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for i in 0..n {
                        dxhat[i] = g[r * n + i] * gain_v[i];
                        m1 += dxhat[i];
                        m2 += dxhat[i] * h[i];
                    }
                    m1 *= inv_n;
                    m2 *= inv_n;
                    for i in 0..n {
                        gx[r * n + i] += rstd[r] * (dxhat[i] - m1 - h[i] * m2);
                    }
                }
            }
        }
        Op::Reshape { a } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi);
            }
        }
        Op::Permute { a, offsets } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                for (&o, &gi) in offsets.iter().zip(g) {
                    ga[o] += gi;
                }
            }
        }
        Op::Concat {
            inputs,
            axis_outer,
            chunk,
        } => {
            let total: usize = chunk.iter().sum();
            let mut start = 0;
            for (&v, &c) in inputs.iter().zip(chunk) {
                if let Some(gv) = slot(grads, nodes, v) {
                    for o in 0..*axis_outer {
                        let src = &g[o * total + start..][..c];
                        gv[o * c..(o + 1) * c]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &s)| *d += s);
                    }
                }
                start += c;
            }
        }
        Op::GatherRows { table, idx, width } => {
            if let Some(gt) = slot(grads, nodes, *table) {
                for (r, &i) in idx.iter().enumerate() {
                    let src = &g[r * width..(r + 1) * width];
                    gt[i * width..(i + 1) * width]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, &s)| *d += s);
                }
            }
        }
        Op::GatherLast { a, idx, lr, cols } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                let lq = idx.len() / cols;
                let outer = g.len() / (lq * cols).max(1);
                for o in 0..outer {
                    for q in 0..lq {
                        let row = &mut ga[(o * lq + q) * lr..][..*lr];
                        let gr = &g[(o * lq + q) * cols..][..*cols];
                        for (c, &i) in idx[q * cols..(q + 1) * cols].iter().enumerate() {
                            row[i] += gr[c];
                        }
                    }
                }
            }
        }
        Op::ShiftRight {
            a,
            outer,
            len,
            inner,
            s,
        } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                for o in 0..*outer {
                    let n = (len - s) * inner;
                    let src = &g[(o * len + s) * inner..][..n];
                    ga[o * len * inner..][..n]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, &v)| *d += v);
                }
            }
        }
        Op::RepeatInterleave {
            a,
            outer,
            len,
            inner,
            k,
        } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                for o in 0..*outer {
                    for p in 0..*len {
                        let dst = &mut ga[(o * len + p) * inner..][..*inner];
                        for r in 0..*k {
                            let src = &g[((o * len + p) * k + r) * inner..][..*inner];
                            dst.iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                        }
                    }
                }
            }
        }
        Op::SumAxis {
            a,
            outer,
            len,
            inner,
        } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                for o in 0..*outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for p in 0..*len {
                        ga[(o * len + p) * inner..][..*inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &v)| *d += v);
                    }
                }
            }
        }
        Op::SumAll { a } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                let gi = g[0];
                ga.iter_mut().for_each(|d| *d += gi);
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            weights,
            probs,
            denom,
        } => {
            if let Some(gl) = slot(grads, nodes, *logits) {
                let v = probs.len() / targets.len().max(1);
                let g0 = g[0] / *denom;
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == T::zero() {
                        continue;
                    }
                    let c = g0 * w;
                    for i in 0..v {
                        gl[r * v + i] += c * probs[r * v + i];
                    }
                    gl[r * v + t] -= c;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_check() {
        let g = Graph::<f64>::new();
        let i = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let b = g.constant(t(&[2, 2], &[5., 6., 7., 8.]));
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.value(c).data(), &[5., 6., 7., 8.]);

        let a = g.constant(t(&[1, 2], &[1., 2.]));
        let b = g.constant(t(&[2, 1], &[3., 4.]));
        assert_eq!(g.value(g.matmul(a, b).unwrap()).data(), &[11.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] · [2, 3]"), "{msg}");
    }

    #[test]
    fn broadcast_rules() {
        let g = Graph::<f64>::new();
        let a = g.constant(t(&[2], &[1., 2.]));
        let b = g.constant(t(&[2], &[3., 4.]));
        assert_eq!(g.value(g.add(a, b).unwrap()).data(), &[4., 6.]);

        let m = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let row = g.constant(t(&[2], &[10., 20.]));
        assert_eq!(g.value(g.add(m, row).unwrap()).data(), &[11., 22., 13., 24.]);
        let s = g.constant(Tensor::scalar(2.0));
        assert_eq!(g.value(g.mul(s, m).unwrap()).data(), &[2., 4., 6., 8.]);

        let col = g.constant(t(&[2, 1], &[1., 1.]));
        assert!(matches!(g.add(m, col), Err(Error::Dimension(_))));
    }

    #[test]
    fn gelu_fast_center_is_zero() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::scalar(0.0));
        assert_eq!(g.value(g.gelu_fast(x)).item(), 0.0);
    }

    #[test]
    fn softmax_basic_and_masked() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[3]));
        let y = g.value(g.softmax(x, None).unwrap());
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let x = g.constant(t(&[2], &[1e6, 0.0]));
        let mask = t(&[2], &[0.0, MASK_VALUE]);
        let y = g.value(g.softmax(x, Some(&mask)).unwrap());
        assert_eq!(y.data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_fully_masked_row_is_zero_and_flagged() {
        let g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let mask = t(&[2, 2], &[MASK_VALUE, MASK_VALUE, 0., 0.]);
        let y = g.value(g.softmax(x, Some(&mask)).unwrap());
        assert_eq!(&y.data()[..2], &[0.0, 0.0]);
        assert!(y.all_finite());
        assert_eq!(g.fully_masked_rows(), 1);
    }

    #[test]
    fn reshape_transpose_round_trips() {
        let g = Graph::<f64>::new();
        let src = Tensor::from_fn(&[6, 4], |i| i as f64);
        let x = g.constant(src.clone());
        let r = g.reshape(x, &[2, 12]).unwrap();
        let back = g.reshape(r, &[6, 4]).unwrap();
        assert_eq!(*g.value(back), src);
        let tt = g.transpose(g.transpose(x).unwrap()).unwrap();
        assert_eq!(*g.value(tt), src);
        assert!(g.reshape(x, &[5, 5]).is_err());
    }

    #[test]
    fn gather_rows_scatter_adds() {
        let g = Graph::<f64>::new();
        let emb = g.leaf(Tensor::from_fn(&[3, 2], |i| i as f64), true);
        let rows = g.gather_rows(emb, &[2, 2]).unwrap();
        assert_eq!(g.value(rows).data(), &[4., 5., 4., 5.]);
        let loss = g.sum_all(rows);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(emb).unwrap().data(), &[0., 0., 0., 0., 2., 2.]);
        assert!(matches!(g.gather_rows(emb, &[3]), Err(Error::Index(_))));
    }

    #[test]
    fn backward_linear_form_and_frozen_leaf() {
        let g = Graph::<f64>::new();
        let w = g.leaf(t(&[3], &[0.5, -1., 2.]), true);
        let x = g.leaf(t(&[3], &[1., 2., 3.]), false);
        let loss = g.sum_all(g.mul(w, x).unwrap());
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[1., 2., 3.]);
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let g = Graph::<f64>::new();
        let w = g.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(g.backward(w), Err(Error::Usage(_))));
    }

    #[test]
    fn shift_right_fills_zeros() {
        let g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 4, 1], &[1., 2., 3., 4.]));
        let y = g.shift_right(x, 1, 2).unwrap();
        assert_eq!(g.value(y).data(), &[0., 0., 1., 2.]);
        assert!(matches!(g.shift_right(x, 1, 4), Err(Error::Usage(_))));
    }

    #[test]
    fn cross_entropy_rejects_empty_mask() {
        let g = Graph::<f64>::new();
        let l = g.constant(Tensor::zeros(&[2, 4]));
        let err = g.cross_entropy(l, &[0, 1], Some(&[0.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn flop_counter_tallies_products() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3, 4]));
        let b = g.constant(Tensor::zeros(&[4, 5]));
        g.matmul(a, b).unwrap();
        assert_eq!(g.flops(), 2 * 6 * 4 * 5);
    }
}
