//! Reverse-mode differentiation over a fixed vocabulary of tensor ops.
//!
//! A [`Tape`] records every op applied during a forward pass together with
//! its output value. Nodes only ever read earlier nodes, so the record is in
//! topological order by construction and [`Tape::backward`] is a single
//! reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::{
    gemm_acc, gemm_nt_acc, gemm_tn_acc, normalize_row, softmax_row, Real, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Exp,
    Log,
    Sigmoid,
    Softplus,
    Abs,
    Recip,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Unary(Var, Unary),
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Softmax(Var),
    Bilinear {
        map: Var,
        coords: Var,
    },
    Reduce {
        x: Var,
        axis: Option<usize>,
        mean: bool,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Transpose(Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        x: Var,
        rows: Vec<usize>,
    },
    ScatterAdd {
        x: Var,
        rows: Vec<usize>,
    },
    GradScale(Var, T),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Unary(x, _)
            | Op::Softmax(x)
            | Op::Reshape(x)
            | Op::Transpose(x)
            | Op::GradScale(x, _) => vec![*x],
            Op::LayerNorm { x, gain, shift, .. } => vec![*x, *gain, *shift],
            Op::Bilinear { map, coords } => vec![*map, *coords],
            Op::Reduce { x, .. }
            | Op::Slice { x, .. }
            | Op::Gather { x, .. }
            | Op::ScatterAdd { x, .. } => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
        }
    }
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
}

/// Recorded forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every node that needed one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }
}

// Shape helpers ---------------------------------------------------------------

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(format!("cannot broadcast {:?} with {:?}", a, b)));
            }
        };
    }
    Ok(out)
}

fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 { 0 } else { s };
        s *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_offset, b_offset)` for every element of the broadcast
/// output.
fn for_each_broadcast(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    if n == 0 {
        return;
    }
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == out && b == out {
        for i in 0..n {
            f(i, i, i);
        }
        return;
    }
    if a == out && (nb == 1 || out.ends_with(b)) {
        for i in 0..n {
            f(i, i, i % nb);
        }
        return;
    }
    if b == out && (na == 1 || out.ends_with(a)) {
        for i in 0..n {
            f(i, i % na, i);
        }
        return;
    }
    let sa = aligned_strides(a, out);
    let sb = aligned_strides(b, out);
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for i in 0..n {
        f(i, oa, ob);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// The four bilinear taps around continuous texel coordinates `(x, y)` with
/// texel centers at `i + 0.5`. Each tap is `(flat texel index or None when
/// outside the map, weight, d weight / dx, d weight / dy)`.
pub(crate) fn bilinear_taps<T: Real>(
    x: T,
    y: T,
    width: usize,
    height: usize,
) -> [(Option<usize>, T, T, T); 4] {
    let half = T::lit(0.5);
    let fx = x - half;
    let fy = y - half;
    let x0f = fx.floor();
    let y0f = fy.floor();
    let tx = fx - x0f;
    let ty = fy - y0f;
    let one = T::one();
    let index = |xi: T, yi: T| -> Option<usize> {
        if xi < T::zero() || yi < T::zero() {
            return None;
        }
        let (xi, yi) = (xi.to_usize()?, yi.to_usize()?);
        (xi < width && yi < height).then_some(yi * width + xi)
    };
    let x1f = x0f + one;
    let y1f = y0f + one;
    [
        (index(x0f, y0f), (one - tx) * (one - ty), -(one - ty), -(one - tx)),
        (index(x1f, y0f), tx * (one - ty), one - ty, -tx),
        (index(x0f, y1f), (one - tx) * ty, -ty, one - tx),
        (index(x1f, y1f), tx * ty, ty, tx),
    ]
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Copies the value of `v` into a fresh non-differentiable node.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    // Linear algebra ----------------------------------------------------------

    /// Matrix product. Supports `[m,k]x[k,n]`, `[b,m,k]x[k,n]` and
    /// `[b,m,k]x[b,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = match (sa.len(), sb.len()) {
            (2 | 3, 2) => {
                let k = sa[sa.len() - 1];
                if k != sb[0] {
                    return Err(Error::shape(format!("matmul {:?} x {:?}", sa, sb)));
                }
                let rows: usize = sa[..sa.len() - 1].iter().product();
                let n = sb[1];
                let mut out = vec![T::zero(); rows * n];
                gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, rows, k, n);
                let mut shape = sa[..sa.len() - 1].to_vec();
                shape.push(n);
                Tensor::new(shape, out)?
            }
            (3, 3) => {
                let (bt, m, k) = (sa[0], sa[1], sa[2]);
                if sb[0] != bt || sb[1] != k {
                    return Err(Error::shape(format!("bmm {:?} x {:?}", sa, sb)));
                }
                let n = sb[2];
                let mut out = vec![T::zero(); bt * m * n];
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                for i in 0..bt {
                    gemm_acc(
                        &av[i * m * k..(i + 1) * m * k],
                        &bv[i * k * n..(i + 1) * k * n],
                        &mut out[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
                Tensor::new(vec![bt, m, n], out)?
            }
            _ => return Err(Error::shape(format!("matmul {:?} x {:?}", sa, sb))),
        };
        Ok(self.push(Op::MatMul(a, b), out))
    }

    /// `x · w + b` with `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    // Elementwise -------------------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb)?;
        let n = out_shape.iter().product();
        let mut out = vec![T::zero(); n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for_each_broadcast(&out_shape, &sa, &sb, |i, ia, ib| {
                out[i] = if mul { av[ia] * bv[ib] } else { av[ia] + bv[ib] };
            });
        }
        let value = Tensor::new(out_shape, out)?;
        let op = if mul { Op::Mul(a, b) } else { Op::Add(a, b) };
        Ok(self.push(op, value))
    }

    /// Broadcasting addition (trailing-axis alignment).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, false)
    }

    /// Broadcasting elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, true)
    }

    pub fn scale(&mut self, x: Var, k: T) -> Result<Var> {
        let c = self.scalar(k);
        self.mul(x, c)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -T::one())?;
        self.add(a, nb)
    }

    pub fn add_scalar(&mut self, x: Var, k: T) -> Result<Var> {
        let c = self.scalar(k);
        self.add(x, c)
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let value = self.value(x).map(|v| match kind {
            Unary::Relu => v.max(T::zero()),
            Unary::Exp => v.exp(),
            Unary::Log => v.ln(),
            Unary::Sigmoid => sigmoid(v),
            Unary::Softplus => softplus(v),
            Unary::Abs => v.abs(),
            Unary::Recip => v.recip(),
        });
        self.push(Op::Unary(x, kind), value)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Recip)
    }

    // Normalization -----------------------------------------------------------

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if c == 0 || self.value(x).is_empty() {
            return Err(Error::Empty("layer_norm row"));
        }
        if self.value(gain).len() != c || self.value(shift).len() != c {
            return Err(Error::shape(format!(
                "layer_norm affine {:?}/{:?} for rows of {}",
                self.shape(gain),
                self.shape(shift),
                c
            )));
        }
        let xv = self.value(x);
        let rows = xv.len() / c;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for (src, dst) in xv.data().chunks(c).zip(xhat.chunks_mut(c)) {
            inv_std.push(normalize_row(src, dst));
        }
        let (g, s) = (self.value(gain).data(), self.value(shift).data());
        let mut out = xhat.clone();
        for row in out.chunks_mut(c) {
            for ((v, &gv), &sv) in row.iter_mut().zip(g).zip(s) {
                *v = *v * gv + sv;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            },
            value,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.last_dim();
        if c == 0 || xv.is_empty() {
            return Err(Error::Empty("softmax input"));
        }
        let mut out = vec![T::zero(); xv.len()];
        for (src, dst) in xv.data().chunks(c).zip(out.chunks_mut(c)) {
            softmax_row(src, dst);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(Op::Softmax(x), value))
    }

    // Sampling ----------------------------------------------------------------

    /// Bilinear sampling of `map: [H, W, C]` at `coords: [P, 2]` (texel units,
    /// `(x, y)`, centers at `i + 0.5`, zero padding). Returns `[P, C]`.
    pub fn bilinear_sample(&mut self, map: Var, coords: Var) -> Result<Var> {
        let ms = self.shape(map).to_vec();
        let cs = self.shape(coords).to_vec();
        if ms.len() != 3 || cs.len() != 2 || cs[1] != 2 {
            return Err(Error::shape(format!("bilinear map {:?} coords {:?}", ms, cs)));
        }
        let (h, w, c) = (ms[0], ms[1], ms[2]);
        let p = cs[0];
        let mut out = vec![T::zero(); p * c];
        let (mv, cv) = (self.value(map).data(), self.value(coords).data());
        for i in 0..p {
            let orow = &mut out[i * c..(i + 1) * c];
            for (idx, wt, _, _) in bilinear_taps(cv[2 * i], cv[2 * i + 1], w, h) {
                if let Some(t) = idx {
                    if wt == T::zero() {
                        continue;
                    }
                    for (o, &v) in orow.iter_mut().zip(&mv[t * c..(t + 1) * c]) {
                        *o += wt * v;
                    }
                }
            }
        }
        let value = Tensor::new(vec![p, c], out)?;
        Ok(self.push(Op::Bilinear { map, coords }, value))
    }

    // Reductions and structure ------------------------------------------------

    fn reduce(&mut self, x: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let xv = self.value(x);
        let value = match axis {
            None => {
                if xv.is_empty() {
                    return Err(Error::Empty("reduction input"));
                }
                let s = xv.sum();
                let n = T::from_usize(xv.len()).unwrap();
                Tensor::scalar(if mean { s / n } else { s })
            }
            Some(ax) => {
                let shape = xv.shape();
                if ax >= shape.len() || shape[ax] == 0 {
                    return Err(Error::shape(format!("reduce axis {} of {:?}", ax, shape)));
                }
                let (outer, dim, inner) = split_axis(shape, ax);
                let mut out = vec![T::zero(); outer * inner];
                let d = xv.data();
                for o in 0..outer {
                    for k in 0..dim {
                        let src = &d[(o * dim + k) * inner..(o * dim + k + 1) * inner];
                        for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *acc += v;
                        }
                    }
                }
                if mean {
                    let n = T::from_usize(dim).unwrap();
                    out.iter_mut().for_each(|v| *v /= n);
                }
                let mut s = shape.to_vec();
                s.remove(ax);
                Tensor::new(s, out)?
            }
        };
        Ok(self.push(Op::Reduce { x, axis, mean }, value))
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, Some(axis), true)
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, Some(axis), false)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, None, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, None, false)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or(Error::Empty("concat parts"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape(format!("concat axis {} of {:?}", axis, first)));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape(format!("concat {:?} with {:?}", first, s)));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let d = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * d..(o + 1) * d]);
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            value,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(x), value))
    }

    /// Swaps the last two axes (batched over any leading axes).
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        if s.len() < 2 {
            return Err(Error::shape(format!("transpose of {:?}", s)));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch: usize = s[..s.len() - 2].iter().product();
        let mut out = vec![T::zero(); xv.len()];
        let d = xv.data();
        for b in 0..batch {
            let base = b * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[base + j * r + i] = d[base + i * c + j];
                }
            }
        }
        let mut shape = s;
        let n = shape.len();
        shape.swap(n - 1, n - 2);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::Transpose(x), value))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::shape(format!(
                "slice {}..{} on axis {} of {:?}",
                start,
                start + len,
                axis,
                s
            )));
        }
        let (outer, dim, inner) = split_axis(&s, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::Slice { x, axis, start }, value))
    }

    /// Selects rows (first axis) by index; indices may repeat.
    pub fn gather(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        if s.is_empty() {
            return Err(Error::shape("gather on a scalar"));
        }
        let inner: usize = s[1..].iter().product();
        let mut out = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            if r >= s[0] {
                return Err(Error::shape(format!("gather row {} of {:?}", r, s)));
            }
            out.extend_from_slice(&xv.data()[r * inner..(r + 1) * inner]);
        }
        let mut shape = s;
        shape[0] = rows.len();
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            Op::Gather {
                x,
                rows: rows.to_vec(),
            },
            value,
        ))
    }

    /// Adds row `i` of `x` into row `rows[i]` of a zero tensor with `out_rows`
    /// rows. Adjoint of [`Tape::gather`].
    pub fn scatter_add(&mut self, x: Var, rows: &[usize], out_rows: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        if s.is_empty() || s[0] != rows.len() {
            return Err(Error::shape(format!(
                "scatter_add of {:?} with {} indices",
                s,
                rows.len()
            )));
        }
        let inner: usize = s[1..].iter().product();
        let mut out = vec![T::zero(); out_rows * inner];
        for (i, &r) in rows.iter().enumerate() {
            if r >= out_rows {
                return Err(Error::shape(format!("scatter row {} of {}", r, out_rows)));
            }
            for (o, &v) in out[r * inner..(r + 1) * inner]
                .iter_mut()
                .zip(&xv.data()[i * inner..(i + 1) * inner])
            {
                *o += v;
            }
        }
        let mut shape = s;
        shape[0] = out_rows;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            Op::ScatterAdd {
                x,
                rows: rows.to_vec(),
            },
            value,
        ))
    }

    /// Identity in the forward pass; multiplies the incoming gradient by
    /// `factor` in the backward pass.
    pub fn grad_scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).clone();
        self.push(Op::GradScale(x, factor), value)
    }

    // Backward ----------------------------------------------------------------

    /// Gradients of a single-element `root` (seeded with 1).
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let v = self.value(root);
        if v.len() != 1 {
            return Err(Error::shape(format!(
                "backward root must have one element, has shape {:?}",
                v.shape()
            )));
        }
        self.backward_with_seed(root, Tensor::full(v.shape(), T::one()))
    }

    pub fn backward_with_seed(&self, root: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.shape(root) {
            return Err(Error::shape(format!(
                "seed {:?} for root {:?}",
                seed.shape(),
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            for input in node.op.inputs() {
                if input.0 >= i {
                    return Err(Error::Cycle {
                        node: i,
                        input: input.0,
                    });
                }
            }
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn zeros_like(&self, v: Var) -> Tensor<T> {
        Tensor::zeros(self.shape(v))
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (sa, sb) = (av.shape(), bv.shape());
                let mut ga = self.zeros_like(*a);
                let mut gb = self.zeros_like(*b);
                if sb.len() == 2 {
                    let k = sa[sa.len() - 1];
                    let rows = av.len() / k;
                    let n = sb[1];
                    gemm_nt_acc(gd, bv.data(), ga.data_mut(), rows, n, k);
                    gemm_tn_acc(av.data(), gd, gb.data_mut(), rows, k, n);
                } else {
                    let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                    for t in 0..bt {
                        let gs = &gd[t * m * n..(t + 1) * m * n];
                        gemm_nt_acc(
                            gs,
                            &bv.data()[t * k * n..(t + 1) * k * n],
                            &mut ga.data_mut()[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                        gemm_tn_acc(
                            &av.data()[t * m * k..(t + 1) * m * k],
                            gs,
                            &mut gb.data_mut()[t * k * n..(t + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Add(a, b) | Op::Mul(a, b) => {
                let is_mul = matches!(node.op, Op::Mul(..));
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = self.zeros_like(*a);
                let mut gb = self.zeros_like(*b);
                {
                    let (gad, gbd) = (ga.data_mut(), gb.data_mut());
                    for_each_broadcast(g.shape(), av.shape(), bv.shape(), |o, ia, ib| {
                        if is_mul {
                            gad[ia] += gd[o] * bv.data()[ib];
                            gbd[ib] += gd[o] * av.data()[ia];
                        } else {
                            gad[ia] += gd[o];
                            gbd[ib] += gd[o];
                        }
                    });
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Unary(x, kind) => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                let out: Vec<T> = gd
                    .iter()
                    .zip(xv.iter().zip(yv))
                    .map(|(&gi, (&xi, &yi))| match kind {
                        Unary::Relu => {
                            if xi > T::zero() {
                                gi
                            } else {
                                T::zero()
                            }
                        }
                        Unary::Exp => gi * yi,
                        Unary::Log => gi / xi,
                        Unary::Sigmoid => gi * yi * (T::one() - yi),
                        Unary::Softplus => gi * sigmoid(xi),
                        Unary::Abs => {
                            if xi > T::zero() {
                                gi
                            } else if xi < T::zero() {
                                -gi
                            } else {
                                T::zero()
                            }
                        }
                        Unary::Recip => -gi * yi * yi,
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), out)?);
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            } => {
                let c = self.value(*gain).len();
                let gv = self.value(*gain).data();
                let mut gx = self.zeros_like(*x);
                let mut ggain = vec![T::zero(); c];
                let mut gshift = vec![T::zero(); c];
                let n = T::from_usize(c).unwrap();
                let mut dxhat = vec![T::zero(); c];
                for (r, (grow, hrow)) in gd.chunks(c).zip(xhat.chunks(c)).enumerate() {
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..c {
                        ggain[j] += grow[j] * hrow[j];
                        gshift[j] += grow[j];
                        dxhat[j] = grow[j] * gv[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * hrow[j];
                    }
                    m1 /= n;
                    m2 /= n;
                    let out = &mut gx.data_mut()[r * c..(r + 1) * c];
                    for j in 0..c {
                        out[j] = inv_std[r] * (dxhat[j] - m1 - hrow[j] * m2);
                    }
                }
                let gs = self.shape(*gain).to_vec();
                let ss = self.shape(*shift).to_vec();
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gain, Tensor::new(gs, ggain)?);
                self.accumulate(grads, *shift, Tensor::new(ss, gshift)?);
            }
            Op::Softmax(x) => {
                let c = node.value.last_dim();
                let mut gx = vec![T::zero(); gd.len()];
                for ((grow, yrow), out) in gd
                    .chunks(c)
                    .zip(node.value.data().chunks(c))
                    .zip(gx.chunks_mut(c))
                {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        out[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), gx)?);
            }
            Op::Bilinear { map, coords } => {
                let ms = self.shape(*map);
                let (h, w, c) = (ms[0], ms[1], ms[2]);
                let mv = self.value(*map).data();
                let cv = self.value(*coords).data();
                let want_map = self.nodes[map.0].needs_grad;
                let mut gmap = if want_map {
                    Some(self.zeros_like(*map))
                } else {
                    None
                };
                let mut gcoords = self.zeros_like(*coords);
                for p in 0..cv.len() / 2 {
                    let grow = &gd[p * c..(p + 1) * c];
                    for (idx, wt, dwx, dwy) in bilinear_taps(cv[2 * p], cv[2 * p + 1], w, h) {
                        let Some(t) = idx else { continue };
                        let texel = &mv[t * c..(t + 1) * c];
                        let dot: T = grow.iter().zip(texel).map(|(&a, &b)| a * b).sum();
                        gcoords.data_mut()[2 * p] += dwx * dot;
                        gcoords.data_mut()[2 * p + 1] += dwy * dot;
                        if let Some(gm) = gmap.as_mut() {
                            for (o, &gi) in gm.data_mut()[t * c..(t + 1) * c].iter_mut().zip(grow) {
                                *o += wt * gi;
                            }
                        }
                    }
                }
                if let Some(gm) = gmap {
                    self.accumulate(grads, *map, gm);
                }
                self.accumulate(grads, *coords, gcoords);
            }
            Op::Reduce { x, axis, mean } => {
                let xs = self.shape(*x).to_vec();
                let gx = match axis {
                    None => {
                        let n = T::from_usize(self.value(*x).len()).unwrap();
                        let v = if *mean { gd[0] / n } else { gd[0] };
                        Tensor::full(&xs, v)
                    }
                    Some(ax) => {
                        let (outer, dim, inner) = split_axis(&xs, *ax);
                        let k = if *mean {
                            T::one() / T::from_usize(dim).unwrap()
                        } else {
                            T::one()
                        };
                        let mut out = vec![T::zero(); outer * dim * inner];
                        for o in 0..outer {
                            for d in 0..dim {
                                for j in 0..inner {
                                    out[(o * dim + d) * inner + j] = gd[o * inner + j] * k;
                                }
                            }
                        }
                        Tensor::new(xs, out)?
                    }
                };
                self.accumulate(grads, *x, gx);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(g.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let d = ps[*axis];
                    let mut out = Vec::with_capacity(outer * d * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        out.extend_from_slice(&gd[base..base + d * inner]);
                    }
                    offset += d;
                    self.accumulate(grads, p, Tensor::new(ps, out)?);
                }
            }
            Op::Reshape(x) => {
                let xs = self.shape(*x).to_vec();
                self.accumulate(grads, *x, g.clone().reshape(&xs)?);
            }
            Op::Transpose(x) => {
                let s = g.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let batch = g.len() / (r * c);
                let mut out = vec![T::zero(); g.len()];
                for b in 0..batch {
                    let base = b * r * c;
                    for i in 0..r {
                        for j in 0..c {
                            out[base + j * r + i] = gd[base + i * c + j];
                        }
                    }
                }
                let xs = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::new(xs, out)?);
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x).to_vec();
                let (outer, dim, inner) = split_axis(&xs, *axis);
                let len = g.shape()[*axis];
                let mut out = vec![T::zero(); outer * dim * inner];
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    let src = o * len * inner;
                    out[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                self.accumulate(grads, *x, Tensor::new(xs, out)?);
            }
            Op::Gather { x, rows } => {
                let xs = self.shape(*x).to_vec();
                let inner: usize = xs[1..].iter().product();
                let mut out = vec![T::zero(); self.value(*x).len()];
                for (i, &r) in rows.iter().enumerate() {
                    for (o, &v) in out[r * inner..(r + 1) * inner]
                        .iter_mut()
                        .zip(&gd[i * inner..(i + 1) * inner])
                    {
                        *o += v;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xs, out)?);
            }
            Op::ScatterAdd { x, rows } => {
                let xs = self.shape(*x).to_vec();
                let inner: usize = xs[1..].iter().product();
                let mut out = Vec::with_capacity(self.value(*x).len());
                for &r in rows {
                    out.extend_from_slice(&gd[r * inner..(r + 1) * inner]);
                }
                self.accumulate(grads, *x, Tensor::new(xs, out)?);
            }
            Op::GradScale(x, factor) => {
                let mut gx = g.clone();
                gx.scale_assign(*factor);
                self.accumulate(grads, *x, gx);
            }
        }
        Ok(())
    }

    /// Appends a node reading `input` without the usual ordering guarantee.
    /// Only used to exercise cycle detection.
    #[doc(hidden)]
    pub fn push_unchecked_relu(&mut self, input: usize) -> Var {
        let value = Tensor::scalar(T::zero());
        self.nodes.push(Node {
            op: Op::Unary(Var(input), Unary::Relu),
            value,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }
}
