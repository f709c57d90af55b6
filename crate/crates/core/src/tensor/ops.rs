use super::{numel, Elem, Tensor};
use crate::error::{Error, Result};

/// Probability clamp applied inside [`Tensor::bce`].
pub const BCE_EPS: f64 = 1e-7;

/// Element-wise operations reachable through [`elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Exp,
    Log,
    Clamp { lo: f64, hi: f64 },
    Ceil,
    Scale(f64),
    Relu,
}

/// Dispatches an element-wise op by kind. Binary kinds require `b`.
pub fn elementwise<E: Elem>(
    kind: ElementwiseKind,
    a: &Tensor<E>,
    b: Option<&Tensor<E>>,
) -> Result<Tensor<E>> {
    let need_b = || b.ok_or_else(|| Error::Usage(format!("{kind:?} needs two operands")));
    match kind {
        ElementwiseKind::Add => a.add(need_b()?),
        ElementwiseKind::Sub => a.sub(need_b()?),
        ElementwiseKind::Mul => a.mul(need_b()?),
        ElementwiseKind::Sigmoid => a.sigmoid(),
        ElementwiseKind::Exp => a.exp(),
        ElementwiseKind::Log => a.log(),
        ElementwiseKind::Clamp { lo, hi } => a.clamp(lo, hi),
        ElementwiseKind::Ceil => a.ceil(),
        ElementwiseKind::Scale(k) => a.scale(k),
        ElementwiseKind::Relu => a.relu(),
    }
}

pub(crate) fn sigmoid_scalar<E: Elem>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

/// Splits a shape around `axis` into (outer, len, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl<E: Elem> Tensor<E> {
    fn check_broadcast(&self, other: &Tensor<E>, op: &str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        let ok = other.numel() == 1 || (b.len() <= a.len() && a[a.len() - b.len()..] == *b);
        if ok {
            Ok(())
        } else {
            Err(Error::shape(format!("{op}: cannot broadcast {b:?} onto {a:?}")))
        }
    }

    fn binary(&self, other: &Tensor<E>, kind: Binary) -> Result<Tensor<E>> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        self.check_broadcast(other, name)?;
        let out = {
            let a = self.data();
            let b = other.data();
            let bl = b.len();
            a.iter()
                .enumerate()
                .map(|(i, &x)| {
                    let y = b[i % bl];
                    match kind {
                        Binary::Add => x + y,
                        Binary::Sub => x - y,
                        Binary::Mul => x * y,
                    }
                })
                .collect()
        };
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            name,
            Box::new(move |ctx| {
                let g = ctx.grad_out;
                let (pa, pb) = (&ctx.parents[0], &ctx.parents[1]);
                let bl = pb.numel();
                let ga = pa.requires_grad().then(|| match kind {
                    Binary::Add | Binary::Sub => g.to_vec(),
                    Binary::Mul => {
                        let b = pb.data();
                        g.iter().enumerate().map(|(i, &g)| g * b[i % bl]).collect()
                    }
                });
                let gb = pb.requires_grad().then(|| {
                    let mut acc = vec![E::zero(); bl];
                    match kind {
                        Binary::Add => g.iter().enumerate().for_each(|(i, &g)| acc[i % bl] = acc[i % bl] + g),
                        Binary::Sub => g.iter().enumerate().for_each(|(i, &g)| acc[i % bl] = acc[i % bl] - g),
                        Binary::Mul => {
                            let a = pa.data();
                            g.iter()
                                .zip(a.iter())
                                .enumerate()
                                .for_each(|(i, (&g, &a))| acc[i % bl] = acc[i % bl] + g * a);
                        }
                    }
                    acc
                });
                vec![ga, gb]
            }),
        )
    }

    /// `self + other`, with `other` broadcast over leading dimensions.
    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(other, Binary::Mul)
    }

    /// Unary op whose derivative is a function of (input, output).
    fn unary<F, D>(&self, op: &'static str, f: F, df: D) -> Result<Tensor<E>>
    where
        F: Fn(E) -> E,
        D: Fn(E, E) -> E + 'static,
    {
        let out = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            op,
            Box::new(move |ctx| {
                let x = ctx.parents[0].data();
                let g = ctx
                    .grad_out
                    .iter()
                    .zip(x.iter().zip(ctx.out))
                    .map(|(&g, (&x, &y))| g * df(x, y))
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn sigmoid(&self) -> Result<Tensor<E>> {
        self.unary("sigmoid", sigmoid_scalar, |_, y| y * (E::one() - y))
    }

    pub fn exp(&self) -> Result<Tensor<E>> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    /// Natural log; non-positive inputs are a domain error.
    pub fn log(&self) -> Result<Tensor<E>> {
        if let Some(bad) = self.data().iter().find(|v| **v <= E::zero()) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        self.unary("log", |x| x.ln(), |x, _| E::one() / x)
    }

    /// Clamp into `[lo, hi]`; the gradient passes only inside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor<E>> {
        if lo > hi {
            return Err(Error::Usage(format!("clamp bounds reversed: {lo} > {hi}")));
        }
        let (lo, hi) = (E::from_f64(lo), E::from_f64(hi));
        self.unary(
            "clamp",
            move |x| x.max(lo).min(hi),
            move |x, _| if x >= lo && x <= hi { E::one() } else { E::zero() },
        )
    }

    /// Ceiling; piecewise constant, so the gradient is zero.
    pub fn ceil(&self) -> Result<Tensor<E>> {
        self.unary("ceil", |x| x.ceil(), |_, _| E::zero())
    }

    pub fn scale(&self, k: f64) -> Result<Tensor<E>> {
        let k = E::from_f64(k);
        self.unary("scale", move |x| x * k, move |_, _| k)
    }

    pub fn add_scalar(&self, k: f64) -> Result<Tensor<E>> {
        let k = E::from_f64(k);
        self.unary("add_scalar", move |x| x + k, |_, _| E::one())
    }

    pub fn relu(&self) -> Result<Tensor<E>> {
        self.unary(
            "relu",
            |x| x.max(E::zero()),
            |x, _| if x > E::zero() { E::one() } else { E::zero() },
        )
    }

    fn dims2(&self, op: &str) -> Result<(usize, usize)> {
        match *self.shape() {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(format!("{op} needs a 2-D tensor, got {:?}", self.shape()))),
        }
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let out = matmul_nn(&self.data(), &other.data(), m, k, n);
        Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            "matmul",
            Box::new(move |ctx| {
                let (pa, pb) = (&ctx.parents[0], &ctx.parents[1]);
                let ga = pa
                    .requires_grad()
                    .then(|| matmul_nt(ctx.grad_out, &pb.data(), m, n, k));
                let gb = pb
                    .requires_grad()
                    .then(|| matmul_tn(&pa.data(), ctx.grad_out, m, k, n));
                vec![ga, gb]
            }),
        )
    }

    pub fn transpose(&self) -> Result<Tensor<E>> {
        let (r, c) = self.dims2("transpose")?;
        let out = transpose_raw(&self.data(), r, c);
        Tensor::from_op(
            vec![c, r],
            out,
            vec![self.clone()],
            "transpose",
            Box::new(move |ctx| vec![Some(transpose_raw(ctx.grad_out, c, r))]),
        )
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<E>> {
        if axis >= self.rank() {
            return Err(Error::shape(format!("softmax axis {axis} out of range for {:?}", self.shape())));
        }
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let mut out = vec![E::zero(); self.numel()];
        {
            let x = self.data();
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |l: usize| (o * len + l) * inner + i;
                    let max = (0..len).map(|l| x[idx(l)]).fold(E::neg_infinity(), E::max);
                    let mut total = E::zero();
                    for l in 0..len {
                        let e = (x[idx(l)] - max).exp();
                        out[idx(l)] = e;
                        total = total + e;
                    }
                    for l in 0..len {
                        out[idx(l)] = out[idx(l)] / total;
                    }
                }
            }
        }
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            "softmax",
            Box::new(move |ctx| {
                let (g, y) = (ctx.grad_out, ctx.out);
                let mut gx = vec![E::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let dot: E = (0..len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                        for l in 0..len {
                            gx[idx(l)] = y[idx(l)] * (g[idx(l)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Layer normalisation over the last axis with `eps` inside the variance.
    #[allow(clippy::needless_range_loop)]
    pub fn layer_norm(&self, gain: &Tensor<E>, bias: &Tensor<E>, eps: f64) -> Result<Tensor<E>> {
        let d = *self
            .shape()
            .last()
            .ok_or_else(|| Error::shape("layer_norm on a rank-0 tensor"))?;
        if gain.numel() != d || bias.numel() != d {
            return Err(Error::shape(format!(
                "layer_norm gain/bias lengths {}/{} differ from axis size {d}",
                gain.numel(),
                bias.numel()
            )));
        }
        let eps = E::from_f64(eps);
        let rows = self.numel() / d;
        let (xhat, rstd) = normalize_rows(&self.data(), rows, d, eps);
        let out = {
            let (gm, bs) = (gain.data(), bias.data());
            xhat.iter()
                .enumerate()
                .map(|(i, &v)| v * gm[i % d] + bs[i % d])
                .collect()
        };
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gain.clone(), bias.clone()],
            "layer_norm",
            Box::new(move |ctx| {
                let g = ctx.grad_out;
                let (px, pg, pb) = (&ctx.parents[0], &ctx.parents[1], &ctx.parents[2]);
                let gm = pg.data();
                let dn = E::from_f64(d as f64);
                let gx = px.requires_grad().then(|| {
                    let mut gx = vec![E::zero(); g.len()];
                    for r in 0..rows {
                        let row = r * d..(r + 1) * d;
                        let dxhat: Vec<E> = row.clone().map(|i| g[i] * gm[i % d]).collect();
                        let mean_d = dxhat.iter().copied().sum::<E>() / dn;
                        let mean_dx = dxhat
                            .iter()
                            .zip(&xhat[row.clone()])
                            .map(|(&a, &b)| a * b)
                            .sum::<E>()
                            / dn;
                        for (j, i) in row.enumerate() {
                            gx[i] = rstd[r] * (dxhat[j] - mean_d - xhat[i] * mean_dx);
                        }
                    }
                    gx
                });
                let ggain = pg.requires_grad().then(|| {
                    let mut acc = vec![E::zero(); d];
                    g.iter().zip(&xhat).enumerate().for_each(|(i, (&g, &x))| acc[i % d] = acc[i % d] + g * x);
                    acc
                });
                let gbias = pb.requires_grad().then(|| {
                    let mut acc = vec![E::zero(); d];
                    g.iter().enumerate().for_each(|(i, &g)| acc[i % d] = acc[i % d] + g);
                    acc
                });
                vec![gx, ggain, gbias]
            }),
        )
    }

    pub fn sum_all(&self) -> Result<Tensor<E>> {
        let total: E = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(
            vec![],
            vec![total],
            vec![self.clone()],
            "sum_all",
            Box::new(move |ctx| vec![Some(vec![ctx.grad_out[0]; n])]),
        )
    }

    pub fn mean_all(&self) -> Result<Tensor<E>> {
        let n = self.numel();
        let inv = E::one() / E::from_f64(n as f64);
        let total: E = self.data().iter().copied().sum();
        Tensor::from_op(
            vec![],
            vec![total * inv],
            vec![self.clone()],
            "mean_all",
            Box::new(move |ctx| vec![Some(vec![ctx.grad_out[0] * inv; n])]),
        )
    }

    /// Sum over one axis, removing it from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<E>> {
        if axis >= self.rank() {
            return Err(Error::shape(format!("sum axis {axis} out of range for {:?}", self.shape())));
        }
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let mut out = vec![E::zero(); outer * inner];
        {
            let x = self.data();
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        out[o * inner + i] = out[o * inner + i] + x[(o * len + l) * inner + i];
                    }
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            "sum_axis",
            Box::new(move |ctx| {
                let mut gx = vec![E::zero(); outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            gx[(o * len + l) * inner + i] = ctx.grad_out[o * inner + i];
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor<E>> {
        let shape = shape.into();
        if numel(&shape) != self.numel() {
            return Err(Error::shape(format!("cannot reshape {:?} into {shape:?}", self.shape())));
        }
        Tensor::from_op(
            shape,
            self.to_vec(),
            vec![self.clone()],
            "reshape",
            Box::new(|ctx| vec![Some(ctx.grad_out.to_vec())]),
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<E>> {
        if axis >= self.rank() || len == 0 || start + len > self.shape()[axis] {
            return Err(Error::shape(format!(
                "narrow({axis}, {start}, {len}) out of range for {:?}",
                self.shape()
            )));
        }
        let (outer, full, inner) = split_axis(self.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        {
            let x = self.data();
            for o in 0..outer {
                let base = (o * full + start) * inner;
                out.extend_from_slice(&x[base..base + len * inner]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            "narrow",
            Box::new(move |ctx| {
                let mut gx = vec![E::zero(); outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    let src = o * len * inner;
                    gx[base..base + len * inner].copy_from_slice(&ctx.grad_out[src..src + len * inner]);
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor<E>], axis: usize) -> Result<Tensor<E>> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::shape(format!("concat axis {axis} out of range for rank {rank}")));
        }
        for p in parts {
            let same = p.rank() == rank
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(Error::shape(format!(
                    "concat shapes {:?} and {:?} disagree off axis {axis}",
                    first.shape(),
                    p.shape()
                )));
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        {
            let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
            for o in 0..outer {
                for (d, &len) in datas.iter().zip(&lens) {
                    out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
                }
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Tensor::from_op(
            shape,
            out,
            parts.to_vec(),
            "concat",
            Box::new(move |ctx| {
                let mut grads: Vec<Vec<E>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (g, &len) in grads.iter_mut().zip(&lens) {
                        g.extend_from_slice(&ctx.grad_out[pos..pos + len * inner]);
                        pos += len * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(ctx.parents)
                    .map(|(g, p)| p.requires_grad().then_some(g))
                    .collect()
            }),
        )
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor<E>]) -> Result<Tensor<E>> {
        let lifted = parts
            .iter()
            .map(|p| {
                let mut s = vec![1];
                s.extend_from_slice(p.shape());
                p.reshape(s)
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::concat(&lifted, 0)
    }

    /// Gathers slices along axis 0; repeated indices accumulate gradient.
    pub fn index_select(&self, indices: &[usize]) -> Result<Tensor<E>> {
        let rows = *self.shape().first().ok_or_else(|| Error::shape("index_select on rank-0"))?;
        if indices.is_empty() {
            return Err(Error::shape("index_select with no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(format!("index {bad} out of range for {rows} rows")));
        }
        let width = self.numel() / rows;
        let mut out = Vec::with_capacity(indices.len() * width);
        {
            let x = self.data();
            for &i in indices {
                out.extend_from_slice(&x[i * width..(i + 1) * width]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[0] = indices.len();
        let indices = indices.to_vec();
        Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            "index_select",
            Box::new(move |ctx| {
                let mut gx = vec![E::zero(); rows * width];
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..width {
                        gx[i * width + j] = gx[i * width + j] + ctx.grad_out[k * width + j];
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Sum of equally shaped tensors as one graph node.
    pub fn add_n(parts: &[Tensor<E>]) -> Result<Tensor<E>> {
        let first = parts.first().ok_or_else(|| Error::shape("add_n of zero tensors"))?;
        if let Some(bad) = parts.iter().find(|p| p.shape() != first.shape()) {
            return Err(Error::shape(format!("add_n shapes {:?} vs {:?}", first.shape(), bad.shape())));
        }
        let mut out = vec![E::zero(); first.numel()];
        for p in parts {
            out.iter_mut().zip(p.data().iter()).for_each(|(o, &v)| *o = *o + v);
        }
        let n = parts.len();
        Tensor::from_op(
            first.shape().to_vec(),
            out,
            parts.to_vec(),
            "add_n",
            Box::new(move |ctx| (0..n).map(|i| ctx.parents[i].requires_grad().then(|| ctx.grad_out.to_vec())).collect()),
        )
    }

    /// Binary cross-entropy, averaged over all elements.
    ///
    /// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` before the log;
    /// the gradient with respect to `self` is zero where the clamp is active.
    /// Optional `weights` (same shape) scale each element's term.
    pub fn bce(&self, target: &Tensor<E>, weights: Option<&Tensor<E>>) -> Result<Tensor<E>> {
        if self.shape() != target.shape() {
            return Err(Error::shape(format!(
                "bce prediction {:?} vs target {:?}",
                self.shape(),
                target.shape()
            )));
        }
        if let Some(w) = weights {
            if w.shape() != self.shape() {
                return Err(Error::shape(format!("bce weights {:?} vs {:?}", w.shape(), self.shape())));
            }
        }
        if let Some(bad) = target.data().iter().find(|&&y| y < E::zero() || y > E::one()) {
            return Err(Error::Domain(format!("bce target {bad} outside [0, 1]")));
        }
        let n = self.numel();
        let inv_n = E::one() / E::from_f64(n as f64);
        let lo = E::from_f64(BCE_EPS);
        let hi = E::one() - lo;
        let terms: Vec<E> = {
            let (p, y) = (self.data(), target.data());
            p.iter()
                .zip(y.iter())
                .map(|(&p, &y)| {
                    let p = p.max(lo).min(hi);
                    -(y * p.ln() + (E::one() - y) * (E::one() - p).ln())
                })
                .collect()
        };
        let total: E = match weights {
            Some(w) => terms.iter().zip(w.data().iter()).map(|(&t, &w)| t * w).sum(),
            None => terms.iter().copied().sum(),
        };
        let mut parents = vec![self.clone(), target.clone()];
        if let Some(w) = weights {
            parents.push(w.clone());
        }
        Tensor::from_op(
            vec![],
            vec![total * inv_n],
            parents,
            "bce",
            Box::new(move |ctx| {
                let g = ctx.grad_out[0] * inv_n;
                let (pp, py) = (&ctx.parents[0], &ctx.parents[1]);
                let w = ctx.parents.get(2).map(|w| w.data());
                let weight = |i: usize| w.as_ref().map_or(E::one(), |w| w[i]);
                let p = pp.data();
                let y = py.data();
                let gp = pp.requires_grad().then(|| {
                    (0..n)
                        .map(|i| {
                            if p[i] <= lo || p[i] >= hi {
                                E::zero()
                            } else {
                                g * weight(i) * (p[i] - y[i]) / (p[i] * (E::one() - p[i]))
                            }
                        })
                        .collect()
                });
                let gy = py.requires_grad().then(|| {
                    (0..n)
                        .map(|i| {
                            let pc = p[i].max(lo).min(hi);
                            -g * weight(i) * (pc.ln() - (E::one() - pc).ln())
                        })
                        .collect()
                });
                let mut grads = vec![gp, gy];
                if let Some(pw) = ctx.parents.get(2) {
                    grads.push(pw.requires_grad().then(|| terms.iter().map(|&t| g * t).collect()));
                }
                grads
            }),
        )
    }
}

fn normalize_rows<E: Elem>(x: &[E], rows: usize, d: usize, eps: E) -> (Vec<E>, Vec<E>) {
    let dn = E::from_f64(d as f64);
    let mut xhat = vec![E::zero(); rows * d];
    let mut rstd = vec![E::zero(); rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<E>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / dn;
        let rs = E::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            xhat[r * d + j] = (row[j] - mean) * rs;
        }
    }
    (xhat, rstd)
}

fn matmul_nn<E: Elem>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == E::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
    c
}

/// `A[m, n] * B[k, n]^T -> [m, k]`.
fn matmul_nt<E: Elem>(a: &[E], b: &[E], m: usize, n: usize, k: usize) -> Vec<E> {
    let mut c = vec![E::zero(); m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            c[i * k + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    c
}

/// `A[m, k]^T * B[m, n] -> [k, n]`.
fn matmul_tn<E: Elem>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == E::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
    c
}

fn transpose_raw<E: Elem>(x: &[E], r: usize, c: usize) -> Vec<E> {
    let mut out = vec![E::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let y = Tensor::<f32>::from_f32([1], &[0.0]).unwrap().sigmoid().unwrap();
        assert_eq!(y.to_vec(), vec![0.5]);
    }

    #[test]
    fn add_and_broadcast() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().to_vec(), vec![4.0, 6.0]);
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.add(&b).unwrap().to_vec(), vec![4.0, 6.0, 6.0, 8.0]);
        assert!(b.add(&m).is_err());
        assert!(m.add(&t(&[3], &[0.0; 3])).is_err());
    }

    #[test]
    fn elementwise_dispatch() {
        let a = t(&[3], &[-0.5, 0.0, 0.3]);
        let c = elementwise(ElementwiseKind::Ceil, &a, None).unwrap();
        assert_eq!(c.to_vec(), vec![0.0, 0.0, 1.0]);
        let s = elementwise(ElementwiseKind::Scale(2.0), &a, None).unwrap();
        assert_eq!(s.to_vec(), vec![-1.0, 0.0, 0.6]);
        assert!(elementwise(ElementwiseKind::Add, &a, None).is_err());
        let cl = elementwise(ElementwiseKind::Clamp { lo: 0.0, hi: 0.1 }, &a, None).unwrap();
        assert_eq!(cl.to_vec(), vec![0.0, 0.0, 0.1]);
    }

    #[test]
    fn log_domain_error() {
        assert!(matches!(t(&[2], &[1.0, 0.0]).log(), Err(Error::Domain(_))));
        assert!(matches!(t(&[1], &[-1.0]).log(), Err(Error::Domain(_))));
    }

    #[test]
    fn exp_overflow_is_non_finite() {
        let x = Tensor::<f32>::from_f32([1], &[1000.0]).unwrap();
        assert!(matches!(x.exp(), Err(Error::NonFinite(_))));
    }

    #[test]
    fn matmul_hand_cases() {
        let i2 = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(i2.matmul(&m).unwrap().to_vec(), m.to_vec());
        let row = t(&[1, 2], &[1.0, 2.0]);
        let col = t(&[2, 1], &[3.0, 4.0]);
        assert_eq!(row.matmul(&col).unwrap().to_vec(), vec![11.0]);
        assert!(row.matmul(&row).is_err());
    }

    #[test]
    fn softmax_closed_forms() {
        let u = t(&[3], &[2.5, 2.5, 2.5]).softmax(0).unwrap();
        close(&u.to_vec(), &[1.0 / 3.0; 3], 1e-12);
        let s = t(&[2], &[0.0, 3f64.ln()]).softmax(0).unwrap();
        close(&s.to_vec(), &[0.25, 0.75], 1e-12);
        let x = t(&[2, 3], &[0.1, -2.0, 3.0, 1.0, 1.5, -0.5]);
        let shifted = x.add_scalar(7.0).unwrap();
        close(&x.softmax(1).unwrap().to_vec(), &shifted.softmax(1).unwrap().to_vec(), 1e-12);
        let cols = x.softmax(0).unwrap().to_vec();
        for j in 0..3 {
            assert!((cols[j] + cols[3 + j] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_closed_forms() {
        let g = t(&[3], &[1.0; 3]);
        let b = t(&[3], &[0.0; 3]);
        let flat = t(&[3], &[1.0, 1.0, 1.0]).layer_norm(&g, &b, 1e-5).unwrap();
        close(&flat.to_vec(), &[0.0; 3], 1e-12);
        let g2 = t(&[2], &[1.0; 2]);
        let b2 = t(&[2], &[0.0; 2]);
        let two = t(&[2], &[0.0, 2.0]).layer_norm(&g2, &b2, 1e-5).unwrap();
        close(&two.to_vec(), &[-1.0, 1.0], 1e-3);
        assert!(t(&[2], &[0.0, 2.0]).layer_norm(&g, &b, 1e-5).is_err());
    }

    #[test]
    fn bce_closed_forms() {
        let half = t(&[1], &[0.5]);
        let one = t(&[1], &[1.0]);
        let l = half.bce(&one, None).unwrap().item();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let w = t(&[1], &[2.0]);
        let lw = half.bce(&one, Some(&w)).unwrap().item();
        assert!((lw - 2.0 * l).abs() < 1e-12);
        let perfect = t(&[1], &[1.0 - 1e-7]).bce(&one, None).unwrap().item();
        assert!((0.0..1e-6).contains(&perfect));
        assert!(matches!(half.bce(&t(&[1], &[1.5]), None), Err(Error::Domain(_))));
        assert!(half.bce(&t(&[2], &[1.0, 1.0]), None).is_err());
    }

    #[test]
    fn bce_is_minimised_at_target() {
        let y = t(&[1], &[0.3]);
        let at = t(&[1], &[0.3]).bce(&y, None).unwrap().item();
        for p in [0.1, 0.25, 0.29, 0.31, 0.5, 0.9] {
            assert!(t(&[1], &[p]).bce(&y, None).unwrap().item() > at);
        }
    }

    #[test]
    fn narrow_concat_index_select() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(x.narrow(1, 1, 2).unwrap().to_vec(), vec![2.0, 3.0, 5.0, 6.0]);
        assert_eq!(x.narrow(0, 1, 1).unwrap().to_vec(), vec![4.0, 5.0, 6.0]);
        let parts = [x.narrow(1, 0, 1).unwrap(), x.narrow(1, 1, 2).unwrap()];
        assert_eq!(Tensor::concat(&parts, 1).unwrap().to_vec(), x.to_vec());
        assert_eq!(x.index_select(&[1, 0, 1]).unwrap().shape(), &[3, 3]);
        let s = Tensor::stack(&[x.clone(), x.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 3]);
        assert_eq!(s.sum_axis(0).unwrap().to_vec(), vec![2.0, 4.0, 6.0, 8.0, 10.0, 12.0]);
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let x = Tensor::<f64>::param([1], vec![0.0]).unwrap();
        x.sigmoid().unwrap().sum_all().unwrap().backward().unwrap();
        assert!((x.grad().unwrap()[0] - 0.25).abs() < 1e-15);
    }
}
